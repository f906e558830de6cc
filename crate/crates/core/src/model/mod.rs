//! Embedding tables, the one-hop GNN over a local star graph, the dot-product
//! rating predictor and exact gradients of the local loss.

pub mod tape;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::LocalGraph;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use tape::{Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GnnVariant {
    Gat,
    Gcn,
    Ggnn,
}

impl GnnVariant {
    pub const ALL: [GnnVariant; 3] = [GnnVariant::Gat, GnnVariant::Gcn, GnnVariant::Ggnn];

    /// Names and shapes of the weight tensors, in flattening order.
    pub fn weight_shapes(&self, dim: usize) -> Vec<(&'static str, usize, usize)> {
        match self {
            GnnVariant::Gat => vec![("w", dim, dim), ("a", 2 * dim, 1)],
            GnnVariant::Gcn => vec![("w", dim, dim)],
            GnnVariant::Ggnn => ["w_msg", "w_z", "u_z", "w_r", "u_r", "w_h", "u_h"]
                .into_iter()
                .map(|n| (n, dim, dim))
                .collect(),
        }
    }
}

impl fmt::Display for GnnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnnVariant::Gat => "gat",
            GnnVariant::Gcn => "gcn",
            GnnVariant::Ggnn => "ggnn",
        })
    }
}

impl FromStr for GnnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(GnnVariant::Gat),
            "gcn" => Ok(GnnVariant::Gcn),
            "ggnn" => Ok(GnnVariant::Ggnn),
            other => Err(Error::InvalidArgument(format!("unknown GNN variant {other:?}"))),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: &'static str,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnWeights {
    pub variant: GnnVariant,
    pub tensors: Vec<NamedTensor>,
}

impl GnnWeights {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.data.iter().copied())
            .collect()
    }

    pub fn flat_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.value.data.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub user_embeddings: Matrix,
    pub item_embeddings: Matrix,
    pub gnn: GnnWeights,
}

impl ModelParams {
    pub fn user_count(&self) -> usize {
        self.user_embeddings.rows
    }

    pub fn item_count(&self) -> usize {
        self.item_embeddings.rows
    }

    pub fn variant(&self) -> GnnVariant {
        self.gnn.variant
    }

    pub fn is_finite(&self) -> bool {
        self.user_embeddings
            .data
            .iter()
            .chain(&self.item_embeddings.data)
            .chain(self.gnn.tensors.iter().flat_map(|t| &t.value.data))
            .all(|x| x.is_finite())
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.user_count() {
            return Err(Error::IdOutOfRange {
                kind: "user",
                id: u,
                len: self.user_count(),
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.item_count() {
            return Err(Error::IdOutOfRange {
                kind: "item",
                id: i,
                len: self.item_count(),
            });
        }
        Ok(())
    }
}

/// Embeddings ~ N(0, 0.1^2), GNN weights Glorot-uniform; deterministic in `seed`.
pub fn init_params(
    users: usize,
    items: usize,
    dim: usize,
    variant: GnnVariant,
    seed: u64,
) -> Result<ModelParams> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[purpose::INIT]);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    let mut table = |rows: usize| Matrix {
        rows,
        cols: dim,
        data: (0..rows * dim).map(|_| normal.sample(&mut rng)).collect(),
    };
    let user_embeddings = table(users);
    let item_embeddings = table(items);
    let tensors = variant
        .weight_shapes(dim)
        .into_iter()
        .map(|(name, rows, cols)| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            NamedTensor {
                name,
                value: Matrix {
                    rows,
                    cols,
                    data: (0..rows * cols)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect(),
                },
            }
        })
        .collect();
    Ok(ModelParams {
        dim,
        user_embeddings,
        item_embeddings,
        gnn: GnnWeights { variant, tensors },
    })
}

/// Output of one message-passing hop over a local graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRepresentations {
    pub h_user: Vec<f64>,
    pub h_items: Vec<Vec<f64>>,
    pub h_neighbors: Vec<Vec<f64>>,
}

struct Dropout<'r, R: Rng> {
    rate: f64,
    rng: &'r mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }
}

/// Handles to the trainable leaves and outputs of one forward pass.
struct Forward {
    weights: Vec<Var>,
    user: Var,
    items: Vec<Var>,
    h_user: Var,
    h_items: Vec<Var>,
    h_neighbors: Vec<Var>,
}

struct Layer<'t> {
    tape: &'t mut Tape,
    variant: GnnVariant,
    dim: usize,
    weights: Vec<Var>,
}

impl<'t> Layer<'t> {
    fn new(tape: &'t mut Tape, params: &ModelParams) -> Self {
        let weights = params
            .gnn
            .tensors
            .iter()
            .map(|t| tape.matrix(t.value.data.clone(), t.value.rows, t.value.cols))
            .collect();
        Self {
            tape,
            variant: params.variant(),
            dim: params.dim,
            weights,
        }
    }

    /// Weighted attention over `members`; `center` is the receiving node.
    /// Members' transformed embeddings are passed in pre-computed.
    fn gat_node<R: Rng>(
        &mut self,
        center: Var,
        members: &[Var],
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Var {
        let a = self.weights[1];
        let a_src = self.tape.slice(a, 0, self.dim);
        let a_dst = self.tape.slice(a, self.dim, self.dim);
        let src = self.tape.dot(a_src, center);
        let logits: Vec<Var> = members
            .iter()
            .map(|&z| {
                let dst = self.tape.dot(a_dst, z);
                let s = self.tape.add(src, dst);
                self.tape.leaky_relu(s, LEAKY_SLOPE)
            })
            .collect();
        let stacked = self.tape.stack(&logits);
        let mut alpha = self.tape.softmax(stacked);
        if let Some(d) = dropout {
            let mask = d.mask(members.len());
            alpha = self.tape.mul_const(alpha, mask);
        }
        let terms: Vec<Var> = members
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let c = self.tape.pick(alpha, j);
                self.tape.scale_by(c, z)
            })
            .collect();
        let agg = self.tape.sum(&terms);
        self.tape.elu(agg)
    }

    /// Mean of `members` with dropped edges removed by inverted-dropout weights.
    fn mean<R: Rng>(&mut self, members: &[Var], dropout: &mut Option<Dropout<'_, R>>) -> Var {
        if members.is_empty() {
            return self.tape.vector(vec![0.0; self.dim]);
        }
        let n = members.len() as f64;
        let weights = match dropout {
            Some(d) => d.mask(members.len()),
            None => vec![1.0; members.len()],
        };
        if members.len() == 1 && weights[0] == 1.0 {
            return members[0];
        }
        let terms: Vec<Var> = members
            .iter()
            .zip(&weights)
            .map(|(&m, &w)| self.tape.affine(m, w / n, 0.0))
            .collect();
        self.tape.sum(&terms)
    }

    fn gru(&mut self, message: Var, state: Var) -> Var {
        let w = &self.weights;
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (w[1], w[2], w[3], w[4], w[5], w[6]);
        let t = &mut *self.tape;
        let zm = t.matvec(w_z, message);
        let zs = t.matvec(u_z, state);
        let zsum = t.add(zm, zs);
        let z = t.sigmoid(zsum);
        let rm = t.matvec(w_r, message);
        let rs = t.matvec(u_r, state);
        let rsum = t.add(rm, rs);
        let r = t.sigmoid(rsum);
        let gated = t.mul(r, state);
        let cm = t.matvec(w_h, message);
        let cs = t.matvec(u_h, gated);
        let csum = t.add(cm, cs);
        let cand = t.tanh(csum);
        let keep = t.affine(z, -1.0, 1.0);
        let old = t.mul(keep, state);
        let new = t.mul(z, cand);
        t.add(old, new)
    }

    /// Representation of a leaf node (item or neighbor user) whose only
    /// neighbor besides itself is the center user.
    fn leaf_node<R: Rng>(
        &mut self,
        own: Var,
        own_z: Option<Var>,
        user: Var,
        user_z: Option<Var>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Var {
        match self.variant {
            GnnVariant::Gat => {
                let (zi, zu) = (own_z.expect("gat z"), user_z.expect("gat z"));
                self.gat_node(zi, &[zi, zu], dropout)
            }
            GnnVariant::Gcn => {
                let m = self.mean(&[own, user], dropout);
                let z = self.tape.matvec(self.weights[0], m);
                self.tape.elu(z)
            }
            GnnVariant::Ggnn => {
                let msg = user_z.expect("ggnn message");
                self.gru(msg, own)
            }
        }
    }
}

/// Builds the one-hop computation for `user_emb` over `items` and `neighbors`.
/// `extra` items are scored as if attached to the user but do not enter the
/// user's aggregation.
#[allow(clippy::too_many_arguments)]
fn build<R: Rng>(
    tape: &mut Tape,
    params: &ModelParams,
    user_emb: &[f64],
    items: &[usize],
    extra: &[usize],
    neighbors: &[Vec<f64>],
    neighbor_outputs: bool,
    mut dropout: Option<Dropout<'_, R>>,
) -> Forward {
    let mut layer = Layer::new(tape, params);
    let user = layer.tape.vector(user_emb.to_vec());
    let item_leaves: Vec<Var> = items
        .iter()
        .chain(extra)
        .map(|&i| layer.tape.vector(params.item_embeddings.row(i).to_vec()))
        .collect();
    let nb_leaves: Vec<Var> = neighbors
        .iter()
        .map(|e| layer.tape.vector(e.clone()))
        .collect();
    let k = items.len();

    let (h_user, h_items, h_neighbors) = match layer.variant {
        GnnVariant::Gat => {
            let w = layer.weights[0];
            let zu = layer.tape.matvec(w, user);
            let zi: Vec<Var> = item_leaves.iter().map(|&e| layer.tape.matvec(w, e)).collect();
            let zn: Vec<Var> = nb_leaves.iter().map(|&e| layer.tape.matvec(w, e)).collect();
            let members: Vec<Var> = std::iter::once(zu)
                .chain(zi[..k].iter().copied())
                .chain(zn.iter().copied())
                .collect();
            let hu = layer.gat_node(zu, &members, &mut dropout);
            let hi = item_leaves
                .iter()
                .zip(&zi)
                .map(|(&e, &z)| layer.leaf_node(e, Some(z), user, Some(zu), &mut dropout))
                .collect();
            let hn = if neighbor_outputs {
                nb_leaves
                    .iter()
                    .zip(&zn)
                    .map(|(&e, &z)| layer.leaf_node(e, Some(z), user, Some(zu), &mut dropout))
                    .collect()
            } else {
                Vec::new()
            };
            (hu, hi, hn)
        }
        GnnVariant::Gcn => {
            let members: Vec<Var> = std::iter::once(user)
                .chain(item_leaves[..k].iter().copied())
                .chain(nb_leaves.iter().copied())
                .collect();
            let m = layer.mean(&members, &mut dropout);
            let z = layer.tape.matvec(layer.weights[0], m);
            let hu = layer.tape.elu(z);
            let hi = item_leaves
                .iter()
                .map(|&e| layer.leaf_node(e, None, user, None, &mut dropout))
                .collect();
            let hn = if neighbor_outputs {
                nb_leaves
                    .iter()
                    .map(|&e| layer.leaf_node(e, None, user, None, &mut dropout))
                    .collect()
            } else {
                Vec::new()
            };
            (hu, hi, hn)
        }
        GnnVariant::Ggnn => {
            let w_msg = layer.weights[0];
            let incoming: Vec<Var> = item_leaves[..k]
                .iter()
                .chain(&nb_leaves)
                .copied()
                .collect();
            let m = layer.mean(&incoming, &mut dropout);
            let msg = layer.tape.matvec(w_msg, m);
            let hu = layer.gru(msg, user);
            // every leaf receives the same message from the user
            let user_msg = layer.tape.matvec(w_msg, user);
            let hi = item_leaves
                .iter()
                .map(|&e| layer.leaf_node(e, None, user, Some(user_msg), &mut dropout))
                .collect();
            let hn = if neighbor_outputs {
                nb_leaves
                    .iter()
                    .map(|&e| layer.leaf_node(e, None, user, Some(user_msg), &mut dropout))
                    .collect()
            } else {
                Vec::new()
            };
            (hu, hi, hn)
        }
    };

    Forward {
        weights: layer.weights,
        user,
        items: item_leaves,
        h_user,
        h_items,
        h_neighbors,
    }
}

fn check_graph(params: &ModelParams, graph: &LocalGraph, items: &[usize]) -> Result<()> {
    params.check_user(graph.user_id)?;
    for &i in items {
        params.check_item(i)?;
    }
    for n in &graph.neighbor_users {
        if n.len() != params.dim {
            return Err(Error::ShapeMismatch(format!(
                "neighbor embedding has length {}, expected {}",
                n.len(),
                params.dim
            )));
        }
    }
    Ok(())
}

/// One message-passing hop over `graph` (user, interacted items, neighbors).
/// Dropout acts on aggregation coefficients and only when `train_mode` is set.
pub fn gnn_forward<R: Rng>(
    params: &ModelParams,
    graph: &LocalGraph,
    train_mode: bool,
    dropout: f64,
    rng: &mut R,
) -> Result<NodeRepresentations> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!("dropout {dropout} not in [0, 1)")));
    }
    let items: Vec<usize> = graph.item_ids().collect();
    check_graph(params, graph, &items)?;
    let mut tape = Tape::new();
    let drop = (train_mode && dropout > 0.0).then_some(Dropout { rate: dropout, rng });
    let f = build(
        &mut tape,
        params,
        params.user_embeddings.row(graph.user_id),
        &items,
        &[],
        &graph.neighbor_users,
        true,
        drop,
    );
    Ok(NodeRepresentations {
        h_user: tape.value(f.h_user).to_vec(),
        h_items: f.h_items.iter().map(|&v| tape.value(v).to_vec()).collect(),
        h_neighbors: f.h_neighbors.iter().map(|&v| tape.value(v).to_vec()).collect(),
    })
}

/// Eval-mode scores (normalized space, unclamped) of arbitrary `candidates`
/// for the owner of `graph`; each candidate attaches to the user node only.
pub fn score_items(params: &ModelParams, graph: &LocalGraph, candidates: &[usize]) -> Result<Vec<f64>> {
    let items: Vec<usize> = graph.item_ids().collect();
    check_graph(params, graph, &items)?;
    for &c in candidates {
        params.check_item(c)?;
    }
    let mut tape = Tape::new();
    let f = build::<rand_chacha::ChaCha8Rng>(
        &mut tape,
        params,
        params.user_embeddings.row(graph.user_id),
        &items,
        candidates,
        &graph.neighbor_users,
        false,
        None,
    );
    let hu = tape.value(f.h_user);
    Ok(f.h_items[items.len()..]
        .iter()
        .map(|&h| dot(hu, tape.value(h)))
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `h_user . h_item` for every item row.
pub fn predict_ratings(reps: &NodeRepresentations) -> Vec<f64> {
    reps.h_items.iter().map(|h| dot(&reps.h_user, h)).collect()
}

/// Mean squared error over rated items.
pub fn local_loss(preds: &[f64], golds: &[f64]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} gold ratings",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("loss over zero items".into()));
    }
    let k = preds.len() as f64;
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradients {
    /// Flattened in `GnnVariant::weight_shapes` order.
    pub model_grads: Vec<f64>,
    pub user_grad: Vec<f64>,
    pub item_grads: BTreeMap<usize, Vec<f64>>,
}

/// Exact gradients of the mean squared error over a mini-batch of
/// `min(minibatch_size, K)` rated items. The forward pass runs on the subgraph
/// of the user, the batch items and (when `use_neighbors`) the fixed neighbor
/// embeddings, which receive no gradient.
pub fn local_gradients<R: Rng>(
    params: &ModelParams,
    graph: &LocalGraph,
    use_neighbors: bool,
    dropout: f64,
    rng: &mut R,
    minibatch_size: usize,
) -> Result<(LocalGradients, f64)> {
    let user_emb = params
        .user_embeddings
        .data
        .get(graph.user_id * params.dim..(graph.user_id + 1) * params.dim)
        .ok_or(Error::IdOutOfRange {
            kind: "user",
            id: graph.user_id,
            len: params.user_count(),
        })?;
    local_gradients_with_user(params, graph, user_emb, use_neighbors, dropout, rng, minibatch_size)
}

/// As [`local_gradients`], with the user's own embedding supplied explicitly.
pub fn local_gradients_with_user<R: Rng>(
    params: &ModelParams,
    graph: &LocalGraph,
    user_emb: &[f64],
    use_neighbors: bool,
    dropout: f64,
    rng: &mut R,
    minibatch_size: usize,
) -> Result<(LocalGradients, f64)> {
    let k = graph.k();
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "user {} has no rated items",
            graph.user_id
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!("dropout {dropout} not in [0, 1)")));
    }
    if user_emb.len() != params.dim {
        return Err(Error::ShapeMismatch("user embedding length".into()));
    }
    let all: Vec<usize> = graph.item_ids().collect();
    check_graph(params, graph, &all)?;

    let batch: Vec<usize> = if minibatch_size == 0 || minibatch_size >= k {
        (0..k).collect()
    } else {
        let mut idx = index::sample(rng, k, minibatch_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let items: Vec<usize> = batch.iter().map(|&b| graph.interacted_items[b].0).collect();
    let golds: Vec<f64> = batch.iter().map(|&b| graph.interacted_items[b].1).collect();
    let neighbors: &[Vec<f64>] = if use_neighbors { &graph.neighbor_users } else { &[] };

    let mut tape = Tape::new();
    let drop = (dropout > 0.0).then_some(Dropout { rate: dropout, rng });
    let f = build(&mut tape, params, user_emb, &items, &[], neighbors, false, drop);

    let mut sq_terms = Vec::with_capacity(items.len());
    for (&h, &gold) in f.h_items.iter().zip(&golds) {
        let pred = tape.dot(f.h_user, h);
        let err = tape.affine(pred, 1.0, -gold);
        sq_terms.push(tape.square(err));
    }
    let errs = tape.stack(&sq_terms);
    let ones = tape.vector(vec![1.0 / items.len() as f64; items.len()]);
    let loss = tape.dot(errs, ones);
    let grads = tape.backward(loss);

    let zeros = |n: usize| vec![0.0; n];
    let model_grads = f
        .weights
        .iter()
        .flat_map(|&w| {
            grads
                .get(w)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| zeros(tape.len_of(w)))
        })
        .collect();
    let user_grad = grads.get(f.user).map_or_else(|| zeros(params.dim), <[f64]>::to_vec);
    let item_grads = items
        .iter()
        .zip(&f.items)
        .map(|(&id, &v)| (id, grads.get(v).map_or_else(|| zeros(params.dim), <[f64]>::to_vec)))
        .collect();
    Ok((
        LocalGradients {
            model_grads,
            user_grad,
            item_grads,
        },
        tape.scalar(loss),
    ))
}

/// Gradient step `theta -= lr * g`: dense on the GNN weights, sparse on
/// user and item rows (rows absent from the maps are left untouched).
pub fn apply_update(
    params: &mut ModelParams,
    model_grads: &[f64],
    user_grads: &BTreeMap<usize, Vec<f64>>,
    item_grads: &BTreeMap<usize, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    if model_grads.len() != params.gnn.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} model gradients for {} GNN parameters",
            model_grads.len(),
            params.gnn.param_count()
        )));
    }
    for (table, grads, kind) in [
        (&params.user_embeddings, user_grads, "user"),
        (&params.item_embeddings, item_grads, "item"),
    ] {
        for (&id, g) in grads {
            if id >= table.rows {
                return Err(Error::IdOutOfRange {
                    kind,
                    id,
                    len: table.rows,
                });
            }
            if g.len() != table.cols {
                return Err(Error::ShapeMismatch(format!(
                    "{kind} {id} gradient has length {}, expected {}",
                    g.len(),
                    table.cols
                )));
            }
        }
    }
    for (p, g) in params.gnn.flat_values_mut().zip(model_grads) {
        *p -= lr * g;
    }
    for (table, grads) in [
        (&mut params.user_embeddings, user_grads),
        (&mut params.item_embeddings, item_grads),
    ] {
        for (&id, g) in grads {
            for (p, gi) in table.row_mut(id).iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_rng() -> rand_chacha::ChaCha8Rng {
        rng::stream(0, &[])
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(943, 1682, 256, GnnVariant::Gat, 1).unwrap();
        let b = init_params(943, 1682, 256, GnnVariant::Gat, 1).unwrap();
        let c = init_params(943, 1682, 256, GnnVariant::Gat, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.user_embeddings.rows, a.user_embeddings.cols), (943, 256));
        assert_eq!((a.item_embeddings.rows, a.item_embeddings.cols), (1682, 256));
        assert_eq!(a.gnn.param_count(), 256 * 256 + 512);
        assert!(a.is_finite());
        assert!(init_params(3, 3, 0, GnnVariant::Gcn, 0).is_err());
    }

    #[test]
    fn init_statistics() {
        let p = init_params(400, 400, 16, GnnVariant::Gat, 3).unwrap();
        let e = &p.item_embeddings.data;
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let std = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
        assert!(mean.abs() < 0.005 && (std - 0.1).abs() < 0.005, "{mean} {std}");
        let limit = (6.0f64 / 32.0).sqrt();
        assert!(p.gnn.get("w").unwrap().data.iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn item_with_identical_embeddings_is_elu_of_transform() {
        let mut p = init_params(1, 1, 3, GnnVariant::Gat, 5).unwrap();
        let e = vec![0.3, -0.8, 0.5];
        p.user_embeddings.row_mut(0).copy_from_slice(&e);
        p.item_embeddings.row_mut(0).copy_from_slice(&e);
        let g = LocalGraph::new(0, vec![(0, 1.0)]);
        let reps = gnn_forward(&p, &g, false, 0.0, &mut no_rng()).unwrap();
        let w = p.gnn.get("w").unwrap();
        for (r, h) in reps.h_items[0].iter().enumerate() {
            let z = dot(w.row(r), &e);
            let expect = if z > 0.0 { z } else { z.exp_m1() };
            assert!((h - expect).abs() < 1e-12);
        }
    }

    // Hand-computed fixture: d=2, one item.
    // W = [[1,0],[0,2]], a = [1,0, 0,1], e_u = [1,0], e_i = [0,1].
    // z_u = [1,0], z_i = [0,2]. a_src.z_u = 1, a_src.z_i = 0, a_dst.z_u = 0, a_dst.z_i = 2.
    // user logits: self 1+0=1, item 1+2=3 -> alpha = [1/(1+e^2), e^2/(1+e^2)]
    //   h_u = [alpha0, 2*alpha1] (both positive, ELU identity)
    // item logits: self 0+2=2, user 0+0=0 -> beta = [e^2/(1+e^2), 1/(1+e^2)]
    //   h_i = [beta1, 2*beta0]
    #[test]
    fn hand_computed_gat_fixture() {
        let mut p = init_params(1, 1, 2, GnnVariant::Gat, 0).unwrap();
        p.gnn.tensors[0].value.data = vec![1.0, 0.0, 0.0, 2.0];
        p.gnn.tensors[1].value.data = vec![1.0, 0.0, 0.0, 1.0];
        p.user_embeddings.data = vec![1.0, 0.0];
        p.item_embeddings.data = vec![0.0, 1.0];
        let g = LocalGraph::new(0, vec![(0, 0.5)]);
        let reps = gnn_forward(&p, &g, false, 0.0, &mut no_rng()).unwrap();
        let e2 = 2f64.exp();
        let (a0, a1) = (1.0 / (1.0 + e2), e2 / (1.0 + e2));
        let expect_u = [a0, 2.0 * a1];
        let expect_i = [a0, 2.0 * a1];
        for (h, e) in reps.h_user.iter().zip(expect_u) {
            assert!((h - e).abs() < 1e-12);
        }
        for (h, e) in reps.h_items[0].iter().zip(expect_i) {
            assert!((h - e).abs() < 1e-12);
        }
        let pred = predict_ratings(&reps)[0];
        assert!((pred - (a0 * a0 + 4.0 * a1 * a1)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let p = init_params(2, 5, 4, GnnVariant::Gat, 9).unwrap();
        let g = LocalGraph::new(1, vec![(0, 0.2), (3, 0.9)]);
        let a = gnn_forward(&p, &g, false, 0.5, &mut rng::stream(1, &[])).unwrap();
        let b = gnn_forward(&p, &g, false, 0.5, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(a, b);
        let c = gnn_forward(&p, &g, true, 0.5, &mut rng::stream(1, &[])).unwrap();
        let d = gnn_forward(&p, &g, true, 0.5, &mut rng::stream(2, &[])).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn forward_rejects_bad_ids_and_dropout() {
        let p = init_params(2, 2, 4, GnnVariant::Gcn, 9).unwrap();
        let g = LocalGraph::new(0, vec![(7, 0.2)]);
        assert!(matches!(
            gnn_forward(&p, &g, false, 0.0, &mut no_rng()),
            Err(Error::IdOutOfRange { kind: "item", .. })
        ));
        let g = LocalGraph::new(0, vec![(1, 0.2)]);
        assert!(gnn_forward(&p, &g, false, 1.0, &mut no_rng()).is_err());
    }

    #[test]
    fn score_items_agrees_with_forward_on_graph_items() {
        for variant in GnnVariant::ALL {
            let p = init_params(3, 6, 5, variant, 4).unwrap();
            let mut g = LocalGraph::new(2, vec![(1, 0.2), (4, 0.9), (5, 0.1)]);
            g.neighbor_users = vec![p.user_embeddings.row(0).to_vec()];
            let reps = gnn_forward(&p, &g, false, 0.0, &mut no_rng()).unwrap();
            let preds = predict_ratings(&reps);
            let scored = score_items(&p, &g, &[1, 4, 5]).unwrap();
            for (a, b) in preds.iter().zip(&scored) {
                assert!((a - b).abs() < 1e-12, "{variant}");
            }
            assert_eq!(reps.h_neighbors.len(), 1);
        }
    }

    #[test]
    fn predictor_and_loss() {
        let reps = NodeRepresentations {
            h_user: vec![1.0, 0.0],
            h_items: vec![vec![0.5, 2.0], vec![0.0, 3.0]],
            h_neighbors: vec![],
        };
        assert_eq!(predict_ratings(&reps), vec![0.5, 0.0]);
        let zero = NodeRepresentations {
            h_user: vec![0.0, 0.0],
            ..reps
        };
        assert_eq!(predict_ratings(&zero), vec![0.0, 0.0]);
        assert_eq!(local_loss(&[0.1, 0.9], &[0.1, 0.9]).unwrap(), 0.0);
        assert_eq!(local_loss(&[3.0, 4.0], &[3.0, 5.0]).unwrap(), 0.5);
        assert!((local_loss(&[0.2], &[0.7]).unwrap() - 0.25).abs() < 1e-15);
        assert!(local_loss(&[0.2], &[0.7, 0.1]).is_err());
    }

    #[test]
    fn gradient_keys_follow_minibatch() {
        let p = init_params(1, 10, 4, GnnVariant::Gat, 4).unwrap();
        let g = LocalGraph::new(0, (0..8).map(|i| (i, 0.5)).collect());
        let (full, _) = local_gradients(&p, &g, false, 0.0, &mut no_rng(), 100).unwrap();
        assert_eq!(full.item_grads.len(), 8);
        let (part, _) = local_gradients(&p, &g, false, 0.0, &mut no_rng(), 3).unwrap();
        assert_eq!(part.item_grads.len(), 3);
        assert!(part.item_grads.keys().all(|k| *k < 8));
        assert_eq!(part.model_grads.len(), p.gnn.param_count());
    }

    #[test]
    fn loss_matches_forward() {
        let p = init_params(2, 6, 4, GnnVariant::Ggnn, 4).unwrap();
        let g = LocalGraph::new(1, vec![(0, 0.3), (2, 0.8)]);
        let reps = gnn_forward(&p, &g, false, 0.0, &mut no_rng()).unwrap();
        let expect = local_loss(&predict_ratings(&reps), &[0.3, 0.8]).unwrap();
        let (_, loss) = local_gradients(&p, &g, false, 0.0, &mut no_rng(), 0).unwrap();
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn apply_update_rules() {
        let mut p = init_params(2, 3, 2, GnnVariant::Gcn, 1).unwrap();
        let before = p.clone();
        let zeros = vec![0.0; p.gnn.param_count()];
        let mut items = BTreeMap::new();
        items.insert(1, vec![1.0, -2.0]);
        apply_update(&mut p, &zeros, &BTreeMap::new(), &items, 0.0).unwrap();
        assert_eq!(p, before);

        let ones = vec![1.0; p.gnn.param_count()];
        apply_update(&mut p, &ones, &BTreeMap::new(), &items, 1.0).unwrap();
        assert_eq!(p.item_embeddings.row(0), before.item_embeddings.row(0));
        assert_eq!(p.item_embeddings.row(2), before.item_embeddings.row(2));
        assert_eq!(p.item_embeddings.row(1)[0], before.item_embeddings.row(1)[0] - 1.0);
        assert_eq!(p.item_embeddings.row(1)[1], before.item_embeddings.row(1)[1] + 2.0);
        assert_eq!(p.gnn.flat()[0], before.gnn.flat()[0] - 1.0);
        assert_eq!(p.user_embeddings, before.user_embeddings);

        assert!(apply_update(&mut p, &ones[1..], &BTreeMap::new(), &items, 1.0).is_err());
        items.insert(9, vec![0.0, 0.0]);
        assert!(apply_update(&mut p, &ones, &BTreeMap::new(), &items, 1.0).is_err());
    }
}

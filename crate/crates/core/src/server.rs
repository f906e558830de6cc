//! Round orchestration: client sampling, FedAvg aggregation, update dispatch,
//! the one-shot graph expansion trigger and RMSE evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::client::{ClientState, GradientPacket, RoundSettings};
use crate::data::{build_local_graphs, LocalGraph, RatingDataset, RatingScale};
use crate::error::{Error, Result};
use crate::expansion::{self, NeighborAssignment, PrfEncryptor, DEFAULT_NEIGHBOR_CAP};
use crate::model::{self, init_params, GnnVariant, ModelParams};
use crate::privacy::LdpConfig;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Clients per round, |S|.
    pub round_size: usize,
    pub epochs: usize,
    /// Epochs before graph expansion, T.
    pub epoch_threshold: usize,
    pub learning_rate: f64,
    pub dim: usize,
    /// Pseudo interacted items per client, M.
    pub pseudo_items: usize,
    pub ldp: LdpConfig,
    pub variant: GnnVariant,
    pub dropout: f64,
    pub neighbor_cap: usize,
    pub expansion: bool,
    /// Local mini-batch size; 0 means the full local graph.
    pub minibatch_size: usize,
    /// Stop after this many epochs without validation improvement.
    pub early_stopping: Option<usize>,
    /// Give every client a private parameter copy instead of reading the
    /// shared canonical one. Results are identical; memory is not.
    pub full_replicas: bool,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            round_size: 128,
            epochs: 3,
            epoch_threshold: 2,
            learning_rate: 0.01,
            dim: 256,
            pseudo_items: 1000,
            ldp: LdpConfig::default(),
            variant: GnnVariant::Gat,
            dropout: 0.2,
            neighbor_cap: DEFAULT_NEIGHBOR_CAP,
            expansion: true,
            minibatch_size: 0,
            early_stopping: None,
            full_replicas: false,
            threads: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.round_size == 0 {
            return bad("round size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} is invalid", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        LdpConfig::new(self.ldp.clip_delta, self.ldp.noise_lambda)?;
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        Ok(())
    }

    fn round_settings(&self, include_neighbors: bool) -> RoundSettings {
        RoundSettings {
            ldp: self.ldp,
            pseudo_items: self.pseudo_items,
            include_neighbors,
            minibatch_size: self.minibatch_size,
            dropout: self.dropout,
        }
    }
}

/// Server-side aggregate of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedGradients {
    pub round: u64,
    pub model_grads: Vec<f64>,
    pub item_grads: BTreeMap<usize, Vec<f64>>,
    /// Each client's own protected user gradient, echoed back un-averaged.
    pub user_grads: BTreeMap<usize, Vec<f64>>,
}

/// Uniform sample of `size` distinct users.
pub fn select_round_users(users: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if size > users {
        return Err(Error::InvalidArgument(format!(
            "cannot select {size} of {users} users"
        )));
    }
    Ok(index::sample(rng, users, size).into_vec())
}

/// FedAvg over one round: every sum is divided by the number of packets,
/// including item rows that only some packets touch. Packets are summed in
/// ascending user id order regardless of arrival order.
pub fn aggregate(packets: &[GradientPacket], round: u64) -> Result<AggregatedGradients> {
    let first = packets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no packets to aggregate".into()))?;
    let n_model = first.model_grads.len();
    let dim = first.user_grad.len();
    let mut order: Vec<&GradientPacket> = packets.iter().collect();
    order.sort_by_key(|p| p.user_id);

    let mut model_grads = vec![0.0; n_model];
    let mut item_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut user_grads = BTreeMap::new();
    for p in order {
        if p.model_grads.len() != n_model || p.user_grad.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "packet from user {} has inconsistent gradient shapes",
                p.user_id
            )));
        }
        for (s, g) in model_grads.iter_mut().zip(&p.model_grads) {
            *s += g;
        }
        for (&id, g) in &p.item_grads {
            if g.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "item {id} gradient from user {} has length {}",
                    p.user_id,
                    g.len()
                )));
            }
            let row = item_grads.entry(id).or_insert_with(|| vec![0.0; dim]);
            for (s, x) in row.iter_mut().zip(g) {
                *s += x;
            }
        }
        if user_grads.insert(p.user_id, p.user_grad.clone()).is_some() {
            return Err(Error::Protocol(format!("two packets from user {}", p.user_id)));
        }
    }
    let n = packets.len() as f64;
    model_grads.iter_mut().for_each(|x| *x /= n);
    item_grads.values_mut().flatten().for_each(|x| *x /= n);
    Ok(AggregatedGradients {
        round,
        model_grads,
        item_grads,
        user_grads,
    })
}

/// RMSE on the original rating scale. Users with a local graph are scored
/// through the eval-mode GNN over that graph; others fall back to the raw
/// embedding dot product.
pub fn evaluate_rmse<'g>(
    params: &ModelParams,
    graph_of: impl Fn(usize) -> Option<&'g LocalGraph> + Sync,
    eval: &RatingDataset,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Empty);
    }
    let mut by_user: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &eval.ratings {
        by_user.entry(r.user).or_default().push((r.item, r.value));
    }
    let scale = eval.scale;
    let per_user: Vec<f64> = by_user
        .par_iter()
        .map(|(&user, rows)| {
            let items: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let scores = match graph_of(user) {
                Some(g) => model::score_items(params, g, &items)?,
                None => cold_scores(params, user, &items)?,
            };
            Ok(scores
                .iter()
                .zip(rows)
                .map(|(&s, &(_, gold))| (scale.denormalize_clamped(s) - gold).powi(2))
                .sum())
        })
        .collect::<Result<_>>()?;
    Ok((per_user.iter().sum::<f64>() / eval.len() as f64).sqrt())
}

fn cold_scores(params: &ModelParams, user: usize, items: &[usize]) -> Result<Vec<f64>> {
    let check = |id: usize, len: usize, kind| {
        if id >= len {
            Err(Error::IdOutOfRange { kind, id, len })
        } else {
            Ok(())
        }
    };
    check(user, params.user_count(), "user")?;
    let e = params.user_embeddings.row(user);
    items
        .iter()
        .map(|&i| {
            check(i, params.item_count(), "item")?;
            Ok(model::dot(e, params.item_embeddings.row(i)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub train_loss: f64,
    pub used_neighbors: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rounds: Vec<RoundRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Round index at which graph expansion ran, if it did.
    pub expansion_round: Option<u64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub aggregated: AggregatedGradients,
    pub selected: Vec<usize>,
    pub record: RoundRecord,
    pub expanded: bool,
}

/// The whole federation: canonical parameters plus every client.
pub struct Simulator {
    config: TrainConfig,
    canonical: ModelParams,
    /// Indexed by position; `client_index` maps user id to position.
    clients: Vec<ClientState>,
    client_index: BTreeMap<usize, usize>,
    round: u64,
    expanded: bool,
    scale: RatingScale,
    pool: Option<rayon::ThreadPool>,
}

impl Simulator {
    pub fn new(config: TrainConfig, train: &RatingDataset) -> Result<Self> {
        config.validate()?;
        let graphs = build_local_graphs(train)?;
        let canonical = init_params(
            train.user_count,
            train.item_count,
            config.dim,
            config.variant,
            config.seed,
        )?;
        let clients: Vec<ClientState> = graphs
            .into_values()
            .map(|g| {
                if config.full_replicas {
                    ClientState::with_replica(g, canonical.clone(), config.seed)
                } else {
                    ClientState::new(g, config.seed)
                }
            })
            .collect();
        if config.round_size > clients.len() {
            return Err(Error::InvalidArgument(format!(
                "round size {} exceeds {} clients",
                config.round_size,
                clients.len()
            )));
        }
        let client_index = clients
            .iter()
            .enumerate()
            .map(|(i, c)| (c.user_id(), i))
            .collect();
        let pool = match config.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
            None => None,
        };
        Ok(Self {
            config,
            canonical,
            clients,
            client_index,
            round: 0,
            expanded: false,
            scale: train.scale,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.canonical
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn client(&self, user: usize) -> Option<&ClientState> {
        self.client_index.get(&user).map(|&i| &self.clients[i])
    }

    pub fn graph(&self, user: usize) -> Option<&LocalGraph> {
        self.client(user).map(|c| &c.graph)
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn has_expanded(&self) -> bool {
        self.expanded
    }

    /// Number of clients, P.
    pub fn population(&self) -> usize {
        self.clients.len()
    }

    /// Total rounds for the configured epochs: floor(epochs * P / |S|).
    pub fn total_rounds(&self) -> u64 {
        (self.config.epochs * self.population() / self.config.round_size) as u64
    }

    /// Rounds `c` with `c * |S| >= T * P` use neighbors; expansion runs at the
    /// first of them.
    fn neighbors_gate(&self, round: u64) -> bool {
        self.config.expansion
            && round as usize * self.config.round_size
                >= self.config.epoch_threshold * self.population()
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    /// Key distribution, encrypted upload, third-party matching and local
    /// graph extension. Runs at most once per simulator.
    pub fn run_expansion(&mut self) -> Result<NeighborAssignment> {
        if self.expanded {
            return Err(Error::Protocol("graph expansion already ran".into()));
        }
        let seed = self.config.seed;
        let key = expansion::keygen(&mut rng::stream(seed, &[purpose::KEYGEN]));
        let encryptor = PrfEncryptor::new(key);
        let pseudonyms: Vec<u64> = self
            .clients
            .iter()
            .map(|c| rng::derive_seed(seed, &[purpose::PSEUDONYM, c.user_id() as u64]))
            .collect();
        let uploads: Vec<_> = self
            .clients
            .iter()
            .zip(&pseudonyms)
            .map(|(c, &p)| c.expansion_upload(&self.canonical, &encryptor, p))
            .collect();
        let assignment = expansion::match_neighbors(
            &uploads,
            self.config.neighbor_cap,
            &mut rng::stream(seed, &[purpose::MATCH]),
        );
        for (c, p) in self.clients.iter_mut().zip(&pseudonyms) {
            expansion::expand_graph(&mut c.graph, assignment.for_user(*p), self.config.dim)?;
        }
        self.expanded = true;
        Ok(assignment)
    }

    /// One synchronous round: sample, compute packets, aggregate, dispatch.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.round;
        let use_neighbors = self.neighbors_gate(round);
        let mut expanded = false;
        if use_neighbors && !self.expanded {
            self.run_expansion()?;
            expanded = true;
        }

        let mut select_rng = rng::stream(self.config.seed, &[purpose::SELECT, round]);
        let picks = select_round_users(self.population(), self.config.round_size, &mut select_rng)?;
        let mut selected: Vec<usize> = picks.iter().map(|&i| self.clients[i].user_id()).collect();
        selected.sort_unstable();
        let chosen: BTreeSet<usize> = picks.into_iter().collect();

        let settings = self.config.round_settings(use_neighbors);
        let canonical = &self.canonical;
        let active: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| chosen.contains(i))
            .map(|(_, c)| c)
            .collect();
        let compute = move || {
            active
                .into_par_iter()
                .map(|c| c.local_round(canonical, &settings))
                .collect::<Result<Vec<_>>>()
        };
        let packets = match &self.pool {
            Some(pool) => pool.install(compute),
            None => compute(),
        }?;

        let aggregated = aggregate(&packets, round)?;
        let train_loss =
            packets.iter().map(|p| p.local_loss).sum::<f64>() / packets.len() as f64;

        let lr = self.config.learning_rate;
        for c in &mut self.clients {
            c.receive_update(&aggregated, lr)?;
        }
        model::apply_update(
            &mut self.canonical,
            &aggregated.model_grads,
            &aggregated.user_grads,
            &aggregated.item_grads,
            lr,
        )?;
        self.round += 1;

        Ok(RoundOutcome {
            aggregated,
            selected,
            record: RoundRecord {
                round,
                train_loss,
                used_neighbors: use_neighbors,
            },
            expanded,
        })
    }

    pub fn evaluate(&self, eval: &RatingDataset) -> Result<f64> {
        self.install(|| evaluate_rmse(&self.canonical, |u| self.graph(u), eval))
    }

    /// Runs all configured rounds, scoring `val` (when given) at each epoch end.
    pub fn train(&mut self, val: Option<&RatingDataset>) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        let total = self.total_rounds();
        let p = self.population();
        let s = self.config.round_size;
        let mut best = f64::INFINITY;
        let mut stale = 0;
        while self.round < total {
            let outcome = self.step()?;
            if outcome.expanded {
                history.expansion_round = Some(outcome.record.round);
            }
            history.rounds.push(outcome.record);
            let done = self.round as usize * s;
            let last = self.round == total;
            if last || done / p > (done - s) / p {
                let val_rmse = val.map(|v| self.evaluate(v)).transpose()?;
                // rounding down the round count can leave the final epoch short
                let epoch = if last { self.config.epochs } else { done / p };
                history.epochs.push(EpochRecord { epoch, val_rmse });
                if let (Some(patience), Some(rmse)) = (self.config.early_stopping, val_rmse) {
                    if rmse < best {
                        best = rmse;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= patience {
                            history.stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }
        Ok(history)
    }

    /// Local graphs of every client, including pseudo items and neighbors.
    pub fn graphs(&self) -> BTreeMap<usize, LocalGraph> {
        self.clients
            .iter()
            .map(|c| (c.user_id(), c.graph.clone()))
            .collect()
    }
}

/// Trained model plus the client graphs needed to score it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub graphs: BTreeMap<usize, LocalGraph>,
    pub history: TrainHistory,
}

impl TrainedModel {
    pub fn evaluate(&self, eval: &RatingDataset) -> Result<f64> {
        evaluate_rmse(&self.params, |u| self.graphs.get(&u), eval)
    }
}

pub fn train(
    config: &TrainConfig,
    train_ds: &RatingDataset,
    val_ds: Option<&RatingDataset>,
) -> Result<TrainedModel> {
    let mut sim = Simulator::new(config.clone(), train_ds)?;
    let history = sim.train(val_ds)?;
    Ok(TrainedModel {
        params: sim.canonical.clone(),
        graphs: sim.graphs(),
        history,
    })
}

//! Per-user client: owns a local graph (and optionally a full parameter
//! replica), produces protected gradient packets and applies server updates.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::LocalGraph;
use crate::error::{Error, Result};
use crate::expansion::{self, ExpansionUpload, ItemEncryptor};
use crate::model::{self, ModelParams};
use crate::privacy::{self, LdpConfig};
use crate::rng::{self, purpose, SimRng};
use crate::server::AggregatedGradients;

/// One client's protected upload for a round.
///
/// Item keys cover the mini-batch items and the pseudo items; nothing in the
/// packet marks which is which, and keys iterate in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    pub user_id: usize,
    pub round: u64,
    pub model_grads: Vec<f64>,
    pub user_grad: Vec<f64>,
    pub item_grads: BTreeMap<usize, Vec<f64>>,
    /// Unprotected local loss, for diagnostics only.
    pub local_loss: f64,
}

impl GradientPacket {
    /// Every value in upload order: model, user, then items by id.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.model_grads
            .iter()
            .chain(&self.user_grad)
            .chain(self.item_grads.values().flatten())
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub ldp: LdpConfig,
    pub pseudo_items: usize,
    pub include_neighbors: bool,
    /// 0 means the full local batch.
    pub minibatch_size: usize,
    pub dropout: f64,
}

/// Where a client reads parameters from.
///
/// `Owned` keeps a private full copy. `Shared` reads the server's canonical
/// copy, which the server updates once per round with exactly the update every
/// owned replica would apply; the observable behavior is the same.
#[derive(Debug, Clone)]
pub enum Replica {
    Owned(Box<ModelParams>),
    Shared,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub graph: LocalGraph,
    replica: Replica,
    seed: u64,
    round: u64,
}

impl ClientState {
    /// Client reading the shared canonical parameters.
    pub fn new(graph: LocalGraph, seed: u64) -> Self {
        Self {
            graph,
            replica: Replica::Shared,
            seed,
            round: 0,
        }
    }

    /// Client holding its own copy of `params`.
    pub fn with_replica(graph: LocalGraph, params: ModelParams, seed: u64) -> Self {
        Self {
            graph,
            replica: Replica::Owned(Box::new(params)),
            seed,
            round: 0,
        }
    }

    pub fn user_id(&self) -> usize {
        self.graph.user_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn replica(&self) -> Option<&ModelParams> {
        match &self.replica {
            Replica::Owned(p) => Some(p),
            Replica::Shared => None,
        }
    }

    fn params<'a>(&'a self, canonical: &'a ModelParams) -> &'a ModelParams {
        match &self.replica {
            Replica::Owned(p) => p,
            Replica::Shared => canonical,
        }
    }

    /// Independent stream per (run seed, user, round).
    fn round_rng(&self) -> SimRng {
        rng::stream(
            self.seed,
            &[purpose::CLIENT, self.graph.user_id as u64, self.round],
        )
    }

    /// Computes gradients on a local mini-batch, adds freshly sampled pseudo
    /// items with moment-matched gradients, then clips and noises the whole
    /// packet. The pseudo item count is capped at the number of items this
    /// user has not rated.
    pub fn local_round(
        &mut self,
        canonical: &ModelParams,
        settings: &RoundSettings,
    ) -> Result<GradientPacket> {
        let mut rng = self.round_rng();
        let params = self.params(canonical);
        let (grads, loss) = model::local_gradients(
            params,
            &self.graph,
            settings.include_neighbors,
            settings.dropout,
            &mut rng,
            settings.minibatch_size,
        )?;

        let real: BTreeSet<usize> = self.graph.item_ids().collect();
        let item_count = params.item_count();
        let m = settings.pseudo_items.min(item_count.saturating_sub(real.len()));
        let pseudo = privacy::sample_pseudo_items(&real, item_count, m, &mut rng)?;
        let fake = privacy::pseudo_gradients(&grads.item_grads, &pseudo, &mut rng)?;

        let mut item_grads = grads.item_grads;
        item_grads.extend(fake);
        let mut packet = GradientPacket {
            user_id: self.graph.user_id,
            round: self.round,
            model_grads: grads.model_grads,
            user_grad: grads.user_grad,
            item_grads,
            local_loss: loss,
        };
        self.graph.pseudo_items = pseudo;

        let mut flat: Vec<f64> = packet.values().collect();
        privacy::protect(&mut flat, &settings.ldp, &mut rng);
        let mut it = flat.into_iter();
        for v in packet
            .model_grads
            .iter_mut()
            .chain(packet.user_grad.iter_mut())
            .chain(packet.item_grads.values_mut().flatten())
        {
            *v = it.next().expect("flat view covers the packet");
        }
        Ok(packet)
    }

    /// Applies the round's aggregate. An owned replica takes the model
    /// gradient, every aggregated item row, and this user's own echoed user
    /// gradient; other users' rows are never touched.
    pub fn receive_update(&mut self, aggregated: &AggregatedGradients, lr: f64) -> Result<()> {
        if aggregated.round != self.round {
            return Err(Error::Protocol(format!(
                "client {} expects round {}, got update for round {}",
                self.graph.user_id, self.round, aggregated.round
            )));
        }
        if let Replica::Owned(params) = &mut self.replica {
            let own: BTreeMap<usize, Vec<f64>> = aggregated
                .user_grads
                .get(&self.graph.user_id)
                .map(|g| (self.graph.user_id, g.clone()))
                .into_iter()
                .collect();
            model::apply_update(
                params,
                &aggregated.model_grads,
                &own,
                &aggregated.item_grads,
                lr,
            )?;
        }
        self.round += 1;
        Ok(())
    }

    /// Copy of this user's current embedding.
    pub fn snapshot_user_embedding(&self, canonical: &ModelParams) -> Vec<f64> {
        self.params(canonical)
            .user_embeddings
            .row(self.graph.user_id)
            .to_vec()
    }

    /// Encrypted real item ids plus the current user embedding, tagged with
    /// `pseudonym`. Pseudo items are not included.
    pub fn expansion_upload(
        &self,
        canonical: &ModelParams,
        encryptor: &dyn ItemEncryptor,
        pseudonym: u64,
    ) -> ExpansionUpload {
        let ids: BTreeSet<usize> = self.graph.item_ids().collect();
        ExpansionUpload {
            pseudonym,
            tokens: expansion::encrypt_item_ids(&ids, encryptor).into_iter().collect(),
            embedding: self.snapshot_user_embedding(canonical),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, GnnVariant};
    use crate::server::aggregate;

    fn setup() -> (ModelParams, LocalGraph) {
        let p = init_params(3, 20, 4, GnnVariant::Gat, 2).unwrap();
        let g = LocalGraph::new(1, vec![(0, 0.5), (4, 0.25), (9, 1.0)]);
        (p, g)
    }

    fn settings(ldp: LdpConfig, m: usize) -> RoundSettings {
        RoundSettings {
            ldp,
            pseudo_items: m,
            include_neighbors: false,
            minibatch_size: 0,
            dropout: 0.0,
        }
    }

    #[test]
    fn identity_pipeline_matches_raw_gradients() {
        let (p, g) = setup();
        let mut c = ClientState::new(g.clone(), 5);
        let packet = c.local_round(&p, &settings(LdpConfig::disabled(), 0)).unwrap();
        let (raw, loss) =
            model::local_gradients(&p, &g, false, 0.0, &mut rng::stream(0, &[]), 0).unwrap();
        assert_eq!(packet.model_grads, raw.model_grads);
        assert_eq!(packet.user_grad, raw.user_grad);
        assert_eq!(packet.item_grads, raw.item_grads);
        assert_eq!(packet.local_loss, loss);
    }

    #[test]
    fn packet_key_count_and_order() {
        let (p, g) = setup();
        let mut c = ClientState::new(g, 5);
        let s = RoundSettings {
            minibatch_size: 2,
            ..settings(LdpConfig::default(), 6)
        };
        let packet = c.local_round(&p, &s).unwrap();
        assert_eq!(packet.item_grads.len(), 2 + 6);
        let keys: Vec<usize> = packet.item_grads.keys().copied().collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert_eq!(c.graph.pseudo_items.len(), 6);
        assert!(c.graph.pseudo_items.iter().all(|i| ![0, 4, 9].contains(i)));
    }

    #[test]
    fn pseudo_count_is_capped_by_unrated_items() {
        let (p, g) = setup();
        let mut c = ClientState::new(g, 5);
        let packet = c.local_round(&p, &settings(LdpConfig::disabled(), 1000)).unwrap();
        assert_eq!(packet.item_grads.len(), 20);
    }

    #[test]
    fn clipped_packet_is_bounded_without_noise() {
        let (p, g) = setup();
        let mut c = ClientState::new(g, 5);
        let ldp = LdpConfig::new(1e-3, 0.0).unwrap();
        let packet = c.local_round(&p, &settings(ldp, 4)).unwrap();
        assert!(packet.values().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn same_seed_same_packet() {
        let (p, g) = setup();
        let s = settings(LdpConfig::default(), 5);
        let a = ClientState::new(g.clone(), 8).local_round(&p, &s).unwrap();
        let b = ClientState::new(g, 8).local_round(&p, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pseudo_items_resampled_each_round() {
        let (p, g) = setup();
        let mut c = ClientState::new(g, 8);
        let s = settings(LdpConfig::default(), 5);
        let first = c.local_round(&p, &s).unwrap();
        let agg = aggregate(&[first], 0).unwrap();
        c.receive_update(&agg, 0.0).unwrap();
        let before = c.graph.pseudo_items.clone();
        c.local_round(&p, &s).unwrap();
        assert_ne!(before, c.graph.pseudo_items);
    }

    #[test]
    fn update_rules_for_owned_replica() {
        let (p, g) = setup();
        let mut c = ClientState::with_replica(g, p.clone(), 1);
        let packet = c.local_round(&p, &settings(LdpConfig::disabled(), 0)).unwrap();
        let mut agg = aggregate(&[packet.clone()], 0).unwrap();
        agg.model_grads.iter_mut().for_each(|x| *x = 0.0);
        agg.item_grads.clear();
        c.receive_update(&agg, 0.5).unwrap();
        let r = c.replica().unwrap();
        assert_eq!(r.gnn, p.gnn);
        assert_eq!(r.item_embeddings, p.item_embeddings);
        let expect: Vec<f64> = p
            .user_embeddings
            .row(1)
            .iter()
            .zip(&packet.user_grad)
            .map(|(e, g)| e - 0.5 * g)
            .collect();
        assert_eq!(c.snapshot_user_embedding(&p), expect);
        assert_eq!(r.user_embeddings.row(0), p.user_embeddings.row(0));
    }

    #[test]
    fn round_mismatch_is_a_protocol_error() {
        let (p, g) = setup();
        let mut c = ClientState::new(g, 1);
        let packet = c.local_round(&p, &settings(LdpConfig::disabled(), 0)).unwrap();
        let agg = aggregate(&[packet], 3).unwrap();
        assert!(matches!(c.receive_update(&agg, 0.1), Err(Error::Protocol(_))));
    }

    #[test]
    fn snapshot_is_a_copy() {
        let (p, g) = setup();
        let c = ClientState::with_replica(g, p.clone(), 1);
        let mut snap = c.snapshot_user_embedding(&p);
        assert_eq!(snap, p.user_embeddings.row(1));
        snap[0] += 1.0;
        assert_eq!(c.snapshot_user_embedding(&p), p.user_embeddings.row(1));
    }
}

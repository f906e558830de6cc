//! Privacy-preserving graph expansion.
//!
//! The recommendation server hands every client one shared matching key.
//! Clients turn their rated item ids into keyed pseudorandom tokens and send
//! them, together with their current user embedding, to a third-party matcher.
//! The matcher links users whose token sets intersect and returns to each
//! user the embeddings of (at most `neighbor_cap`) anonymous neighbors. It
//! never sees item ids, ratings or the key.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use hmac::{Hmac, KeyInit, Mac};
use rand::seq::index;
use rand::{Rng, RngCore};
use sha2::Sha256;

use crate::data::LocalGraph;
use crate::error::{Error, Result};

pub const KEY_BYTES: usize = 32;
pub const TOKEN_BYTES: usize = 32;
pub const DEFAULT_NEIGHBOR_CAP: usize = 32;

/// Shared secret for item-id tokenization.
#[derive(Clone, PartialEq, Eq)]
pub struct MatchKey(Vec<u8>);

impl MatchKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for MatchKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MatchKey({} bytes)", self.0.len())
    }
}

pub fn keygen(rng: &mut impl RngCore) -> MatchKey {
    let mut key = vec![0u8; KEY_BYTES];
    rng.fill_bytes(&mut key);
    MatchKey(key)
}

pub type Token = [u8; TOKEN_BYTES];

/// Deterministic, equality-preserving encryption of item ids.
pub trait ItemEncryptor: Send + Sync {
    fn encrypt(&self, item: usize) -> Token;
}

/// HMAC-SHA256 over the little-endian item id.
pub struct PrfEncryptor {
    key: MatchKey,
}

impl PrfEncryptor {
    pub fn new(key: MatchKey) -> Self {
        Self { key }
    }
}

impl ItemEncryptor for PrfEncryptor {
    fn encrypt(&self, item: usize) -> Token {
        let mut mac =
            Hmac::<Sha256>::new_from_slice(self.key.as_bytes()).expect("hmac accepts any key length");
        mac.update(&(item as u64).to_le_bytes());
        mac.finalize().into_bytes().into()
    }
}

pub fn encrypt_item_ids(ids: &BTreeSet<usize>, encryptor: &dyn ItemEncryptor) -> BTreeSet<Token> {
    ids.iter().map(|&i| encryptor.encrypt(i)).collect()
}

/// Client -> matcher message.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionUpload {
    pub pseudonym: u64,
    pub tokens: Vec<Token>,
    pub embedding: Vec<f64>,
}

/// Matcher -> client message.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResponse {
    pub pseudonym: u64,
    pub embeddings: Vec<Vec<f64>>,
}

/// Neighbor embeddings per pseudonym; users without neighbors are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborAssignment {
    pub neighbors: BTreeMap<u64, Vec<Vec<f64>>>,
}

impl NeighborAssignment {
    pub fn for_user(&self, pseudonym: u64) -> &[Vec<f64>] {
        self.neighbors.get(&pseudonym).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn responses(&self) -> Vec<NeighborResponse> {
        self.neighbors
            .iter()
            .map(|(&pseudonym, e)| NeighborResponse {
                pseudonym,
                embeddings: e.clone(),
            })
            .collect()
    }
}

/// Uncapped co-interaction relation over tokens: pseudonym -> other pseudonyms
/// sharing at least one token.
pub fn candidate_relation(uploads: &[ExpansionUpload]) -> BTreeMap<u64, BTreeSet<u64>> {
    let mut by_token: HashMap<&Token, Vec<u64>> = HashMap::new();
    for up in uploads {
        for t in &up.tokens {
            by_token.entry(t).or_default().push(up.pseudonym);
        }
    }
    let mut relation: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for up in uploads {
        let entry = relation.entry(up.pseudonym).or_default();
        for t in &up.tokens {
            entry.extend(by_token[t].iter().copied().filter(|&p| p != up.pseudonym));
        }
    }
    relation
}

/// Links users with intersecting token sets, keeping a uniform random subset
/// of `neighbor_cap` candidates where there are more.
pub fn match_neighbors(
    uploads: &[ExpansionUpload],
    neighbor_cap: usize,
    rng: &mut impl Rng,
) -> NeighborAssignment {
    let embedding_of: BTreeMap<u64, &Vec<f64>> =
        uploads.iter().map(|u| (u.pseudonym, &u.embedding)).collect();
    let mut neighbors = BTreeMap::new();
    for (pseudonym, candidates) in candidate_relation(uploads) {
        if candidates.is_empty() || neighbor_cap == 0 {
            continue;
        }
        let candidates: Vec<u64> = candidates.into_iter().collect();
        let chosen: Vec<u64> = if candidates.len() > neighbor_cap {
            let mut idx = index::sample(rng, candidates.len(), neighbor_cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i]).collect()
        } else {
            candidates
        };
        let embeddings = chosen.iter().map(|p| embedding_of[p].clone()).collect();
        neighbors.insert(pseudonym, embeddings);
    }
    NeighborAssignment { neighbors }
}

/// Replaces the graph's neighbor set; neighbors attach to the user node only.
pub fn expand_graph(graph: &mut LocalGraph, neighbors: &[Vec<f64>], dim: usize) -> Result<()> {
    if let Some(bad) = neighbors.iter().find(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "neighbor embedding has length {}, expected {dim}",
            bad.len()
        )));
    }
    graph.neighbor_users = neighbors.to_vec();
    Ok(())
}

const UPLOAD_MAGIC: &[u8; 4] = b"FGXU";
const RESPONSE_MAGIC: &[u8; 4] = b"FGXR";
const WIRE_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Decode(format!(
                "truncated message: need {n} bytes, have {}",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Decode("bad magic".into()));
        }
        let v = self.take(1)?[0];
        if v != WIRE_VERSION {
            return Err(Error::Decode(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Decode("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::Decode(format!("{} trailing bytes", self.buf.len())));
        }
        Ok(())
    }
}

impl ExpansionUpload {
    /// `magic | version | pseudonym u64 | n_tokens u32 | tokens | dim u32 | f64 bits`, little endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.tokens.len() * TOKEN_BYTES + self.embedding.len() * 8);
        out.extend_from_slice(UPLOAD_MAGIC);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&self.pseudonym.to_le_bytes());
        put_u32(&mut out, self.tokens.len());
        for t in &self.tokens {
            out.extend_from_slice(t);
        }
        put_u32(&mut out, self.embedding.len());
        put_f64s(&mut out, &self.embedding);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        r.header(UPLOAD_MAGIC)?;
        let pseudonym = r.u64()?;
        let n = r.u32()?;
        let tokens = (0..n)
            .map(|_| Ok(r.take(TOKEN_BYTES)?.try_into().unwrap()))
            .collect::<Result<Vec<Token>>>()?;
        let dim = r.u32()?;
        let embedding = r.f64s(dim)?;
        r.finish()?;
        Ok(Self {
            pseudonym,
            tokens,
            embedding,
        })
    }
}

impl NeighborResponse {
    /// `magic | version | pseudonym u64 | count u32 | dim u32 | f64 bits`, little endian.
    pub fn encode(&self) -> Vec<u8> {
        let dim = self.embeddings.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(17 + self.embeddings.len() * dim * 8);
        out.extend_from_slice(RESPONSE_MAGIC);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&self.pseudonym.to_le_bytes());
        put_u32(&mut out, self.embeddings.len());
        put_u32(&mut out, dim);
        for e in &self.embeddings {
            assert_eq!(e.len(), dim, "ragged neighbor embeddings");
            put_f64s(&mut out, e);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        r.header(RESPONSE_MAGIC)?;
        let pseudonym = r.u64()?;
        let count = r.u32()?;
        let dim = r.u32()?;
        let embeddings = (0..count).map(|_| r.f64s(dim)).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self {
            pseudonym,
            embeddings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn enc(seed: u64) -> PrfEncryptor {
        PrfEncryptor::new(keygen(&mut rng::stream(seed, &[])))
    }

    fn upload(p: u64, items: &[usize], e: &PrfEncryptor) -> ExpansionUpload {
        let ids: BTreeSet<usize> = items.iter().copied().collect();
        ExpansionUpload {
            pseudonym: p,
            tokens: encrypt_item_ids(&ids, e).into_iter().collect(),
            embedding: vec![p as f64, -(p as f64)],
        }
    }

    #[test]
    fn keygen_contract() {
        let a = keygen(&mut rng::stream(1, &[]));
        let b = keygen(&mut rng::stream(1, &[]));
        let c = keygen(&mut rng::stream(2, &[]));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.as_bytes().len() >= 16);
    }

    #[test]
    fn tokens_preserve_equality() {
        let e = enc(3);
        let once = encrypt_item_ids(&[5].into(), &e);
        assert_eq!(once, encrypt_item_ids(&[5].into(), &e));
        assert_eq!(once.len(), 1);
        let a = encrypt_item_ids(&[1, 2].into(), &e);
        let b = encrypt_item_ids(&[2, 3].into(), &e);
        assert_eq!(a.intersection(&b).count(), 1);
        // a different key yields unrelated tokens
        assert!(encrypt_item_ids(&[5].into(), &enc(4)).is_disjoint(&once));
    }

    #[test]
    fn matching_examples() {
        let e = enc(1);
        let ups = vec![upload(0, &[1, 2], &e), upload(1, &[2, 3], &e), upload(2, &[4], &e)];
        let a = match_neighbors(&ups, 32, &mut rng::stream(0, &[]));
        assert_eq!(a.for_user(0), &[vec![1.0, -1.0]]);
        assert_eq!(a.for_user(1), &[vec![0.0, -0.0]]);
        assert!(a.for_user(2).is_empty());

        let disjoint = vec![upload(0, &[1], &e), upload(1, &[2], &e), upload(2, &[3], &e)];
        assert!(match_neighbors(&disjoint, 32, &mut rng::stream(0, &[])).is_empty());
    }

    #[test]
    fn cap_limits_neighbor_count() {
        let e = enc(1);
        let ups: Vec<_> = (0..10).map(|p| upload(p, &[7], &e)).collect();
        let a = match_neighbors(&ups, 3, &mut rng::stream(0, &[]));
        for p in 0..10 {
            let n = a.for_user(p);
            assert_eq!(n.len(), 3);
            assert!(!n.contains(&vec![p as f64, -(p as f64)]));
        }
    }

    #[test]
    fn expand_graph_replaces() {
        let mut g = LocalGraph::new(0, vec![(1, 0.5)]);
        expand_graph(&mut g, &[], 2).unwrap();
        assert!(g.neighbor_users.is_empty());
        let n = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        expand_graph(&mut g, &n, 2).unwrap();
        let once = g.clone();
        expand_graph(&mut g, &n, 2).unwrap();
        assert_eq!(g, once);
        assert_eq!(g.neighbor_users.len(), 2);
        assert!(expand_graph(&mut g, &[vec![1.0]], 2).is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        let up = upload(9, &[1, 2], &enc(0));
        let bytes = up.encode();
        assert!(ExpansionUpload::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ExpansionUpload::decode(&extra).is_err());
        assert!(NeighborResponse::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn upload_round_trips(
            p in any::<u64>(),
            tokens in prop::collection::vec(any::<[u8; 32]>(), 0..8),
            emb in prop::collection::vec(any::<f64>(), 0..8),
        ) {
            let up = ExpansionUpload { pseudonym: p, tokens, embedding: emb };
            let back = ExpansionUpload::decode(&up.encode()).unwrap();
            prop_assert_eq!(back.encode(), up.encode());
        }

        #[test]
        fn response_round_trips(
            p in any::<u64>(),
            dim in 0usize..5,
            raw in prop::collection::vec(any::<f64>(), 0..20),
        ) {
            let embeddings: Vec<Vec<f64>> = if dim == 0 {
                Vec::new()
            } else {
                raw.chunks_exact(dim).map(<[f64]>::to_vec).collect()
            };
            let r = NeighborResponse { pseudonym: p, embeddings };
            let back = NeighborResponse::decode(&r.encode()).unwrap();
            prop_assert_eq!(back.encode(), r.encode());
        }
    }
}

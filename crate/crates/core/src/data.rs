//! Rating datasets, train/validation/test splits and per-user local graphs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Closed interval of admissible rating values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const FIVE_STAR: RatingScale = RatingScale { min: 1.0, max: 5.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::InvalidArgument(format!(
                "rating scale [{min}, {max}] must be a finite, non-empty interval"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.min && r <= self.max
    }

    /// Maps a rating into `[0, 1]`.
    pub fn normalize(&self, r: f64) -> f64 {
        (r - self.min) / (self.max - self.min)
    }

    /// Maps a normalized prediction back to the rating scale, clamping to `[0, 1]` first.
    pub fn denormalize_clamped(&self, p: f64) -> f64 {
        self.min + p.clamp(0.0, 1.0) * (self.max - self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    pub user_count: usize,
    pub item_count: usize,
    pub ratings: Vec<Rating>,
    pub scale: RatingScale,
}

impl RatingDataset {
    /// Builds a dataset and checks ids, scale and pair uniqueness.
    pub fn new(
        user_count: usize,
        item_count: usize,
        ratings: Vec<Rating>,
        scale: RatingScale,
    ) -> Result<Self> {
        let ds = Self {
            user_count,
            item_count,
            ratings,
            scale,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ratings.len());
        for r in &self.ratings {
            if r.user >= self.user_count {
                return Err(Error::IdOutOfRange {
                    kind: "user",
                    id: r.user,
                    len: self.user_count,
                });
            }
            if r.item >= self.item_count {
                return Err(Error::IdOutOfRange {
                    kind: "item",
                    id: r.item,
                    len: self.item_count,
                });
            }
            if !self.scale.contains(r.value) {
                return Err(Error::InvalidArgument(format!(
                    "rating {} for ({}, {}) outside [{}, {}]",
                    r.value, r.user, r.item, self.scale.min, self.scale.max
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::DuplicatePair {
                    user: r.user,
                    item: r.item,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    fn with_ratings(&self, ratings: Vec<Rating>) -> Self {
        Self {
            user_count: self.user_count,
            item_count: self.item_count,
            ratings,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetFormat {
    /// `user \t item \t rating \t timestamp`, 1-based ids, ratings 1..=5.
    Ml100k,
    /// `user \t item \t rating`, 0-based ids, caller-supplied scale.
    GenericTsv(RatingScale),
}

impl DatasetFormat {
    fn scale(&self) -> RatingScale {
        match self {
            DatasetFormat::Ml100k => RatingScale::FIVE_STAR,
            DatasetFormat::GenericTsv(s) => *s,
        }
    }
}

pub fn load_ratings(path: impl AsRef<Path>, format: DatasetFormat) -> Result<RatingDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ratings(&text, format)
}

pub fn parse_ratings(text: &str, format: DatasetFormat) -> Result<RatingDataset> {
    let (min_fields, id_offset) = match format {
        DatasetFormat::Ml100k => (4, 1),
        DatasetFormat::GenericTsv(_) => (3, 0),
    };
    let scale = format.scale();
    let mut ratings = Vec::new();
    let mut seen = HashSet::new();
    let (mut max_user, mut max_item) = (0usize, 0usize);

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < min_fields {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {min_fields} fields, found {}", fields.len()),
            });
        }
        let parse_id = |s: &str, what: &str| -> Result<usize> {
            let raw: usize = s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid {what} id {s:?}"),
            })?;
            raw.checked_sub(id_offset).ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("{what} id {raw} is below {id_offset}"),
            })
        };
        let user = parse_id(fields[0], "user")?;
        let item = parse_id(fields[1], "item")?;
        let value: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid rating {:?}", fields[2]),
        })?;
        if !scale.contains(value) {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "rating {value} outside scale [{}, {}]",
                    scale.min, scale.max
                ),
            });
        }
        if !seen.insert((user, item)) {
            return Err(Error::DuplicatePair { user, item });
        }
        max_user = max_user.max(user);
        max_item = max_item.max(item);
        ratings.push(Rating { user, item, value });
    }

    if ratings.is_empty() {
        return Err(Error::Empty);
    }
    Ok(RatingDataset {
        user_count: max_user + 1,
        item_count: max_item + 1,
        ratings,
        scale,
    })
}

const SPLIT_RETRIES: usize = 8;

/// Seeded random per-rating split into (train, validation, test).
///
/// Sizes are `round(n * train_frac)` and `round(n * val_frac)`, the rest goes
/// to test. A user left without a training rating gets one of its held-out
/// ratings swapped with a training rating of a user that can spare one; if no
/// such swap is found after a few draws, all of that user's ratings go to train.
pub fn split_dataset(
    ds: &RatingDataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset, RatingDataset)> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(train_frac) || !in_unit(val_frac) || train_frac + val_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions ({train_frac}, {val_frac}) must lie in (0,1) and sum below 1"
        )));
    }
    let n = ds.ratings.len();
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train);

    let mut rng = rng::stream(seed, &[purpose::SPLIT]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    // 0 = train, 1 = val, 2 = test
    let mut part = vec![2u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        part[idx] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }

    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, r) in ds.ratings.iter().enumerate() {
        by_user.entry(r.user).or_default().push(idx);
    }
    let mut train_count: HashMap<usize, usize> = HashMap::new();
    for (idx, r) in ds.ratings.iter().enumerate() {
        if part[idx] == 0 {
            *train_count.entry(r.user).or_default() += 1;
        }
    }

    let starving: Vec<usize> = by_user
        .keys()
        .copied()
        .filter(|u| train_count.get(u).copied().unwrap_or(0) == 0)
        .collect();
    for user in starving {
        let held_out = &by_user[&user];
        let mut fixed = false;
        for _ in 0..SPLIT_RETRIES {
            let candidate = order[rng.random_range(0..n_train.max(1))];
            if n_train == 0 || part[candidate] != 0 {
                continue;
            }
            let donor = ds.ratings[candidate].user;
            if donor == user || train_count[&donor] < 2 {
                continue;
            }
            let mine = held_out[rng.random_range(0..held_out.len())];
            part.swap(candidate, mine);
            *train_count.get_mut(&donor).unwrap() -= 1;
            *train_count.entry(user).or_default() += 1;
            fixed = true;
            break;
        }
        if !fixed {
            for &idx in held_out {
                part[idx] = 0;
            }
            train_count.insert(user, held_out.len());
        }
    }

    let mut buckets: [Vec<Rating>; 3] = Default::default();
    for (idx, r) in ds.ratings.iter().enumerate() {
        buckets[part[idx] as usize].push(*r);
    }
    let [train, val, test] = buckets;
    Ok((ds.with_ratings(train), ds.with_ratings(val), ds.with_ratings(test)))
}

/// One user's star graph: the user, its rated items, sampled pseudo items and
/// anonymous neighbor users that attach to the user node only.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    pub user_id: usize,
    /// `(item_id, rating)` with the rating normalized to `[0, 1]`.
    pub interacted_items: Vec<(usize, f64)>,
    pub pseudo_items: Vec<usize>,
    /// Fixed embeddings of co-interacting users. Carries no identity.
    pub neighbor_users: Vec<Vec<f64>>,
}

impl LocalGraph {
    pub fn new(user_id: usize, interacted_items: Vec<(usize, f64)>) -> Self {
        Self {
            user_id,
            interacted_items,
            pseudo_items: Vec::new(),
            neighbor_users: Vec::new(),
        }
    }

    pub fn item_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.interacted_items.iter().map(|&(i, _)| i)
    }

    pub fn k(&self) -> usize {
        self.interacted_items.len()
    }
}

pub fn build_local_graphs(train: &RatingDataset) -> Result<BTreeMap<usize, LocalGraph>> {
    if train.is_empty() {
        return Err(Error::Empty);
    }
    let mut graphs: BTreeMap<usize, LocalGraph> = BTreeMap::new();
    for r in &train.ratings {
        graphs
            .entry(r.user)
            .or_insert_with(|| LocalGraph::new(r.user, Vec::new()))
            .interacted_items
            .push((r.item, train.scale.normalize(r.value)));
    }
    Ok(graphs)
}

/// Dense `rows x cols` matrix `U V^T + noise` with standard-normal factors.
pub fn low_rank_matrix(
    rows: usize,
    cols: usize,
    rank: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..rank).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect()
    };
    let u = draw(rows);
    let v = draw(cols);
    factor_product(&u, &v, noise_std, rng)
}

fn factor_product(
    u: &[Vec<f64>],
    v: &[Vec<f64>],
    noise_std: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    u.iter()
        .map(|ui| {
            v.iter()
                .map(|vj| {
                    let clean: f64 = ui.iter().zip(vj).map(|(a, b)| a * b).sum();
                    if noise_std > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        clean + noise_std * z
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect()
}

/// Synthetic ratings from explicit factors: rescaled into [1, 5], each cell kept
/// with probability `density`. Users left without ratings are dropped and the
/// remaining users renumbered contiguously.
pub fn synth_from_factors(
    user_factors: &[Vec<f64>],
    item_factors: &[Vec<f64>],
    density: f64,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<RatingDataset> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density {density} must lie in (0, 1]"
        )));
    }
    let dense = factor_product(user_factors, item_factors, noise_std, rng);
    sample_dense(&dense, density, rng)
}

fn sample_dense(dense: &[Vec<f64>], density: f64, rng: &mut impl Rng) -> Result<RatingDataset> {
    let scale = RatingScale::FIVE_STAR;
    let (lo, hi) = dense
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let rescale = |x: f64| {
        if hi > lo {
            scale.min + (x - lo) / (hi - lo) * (scale.max - scale.min)
        } else {
            0.5 * (scale.min + scale.max)
        }
    };
    let item_count = dense.first().map_or(0, Vec::len);
    let mut ratings = Vec::new();
    let mut next_user = 0;
    for row in dense {
        let before = ratings.len();
        for (item, &x) in row.iter().enumerate() {
            if density >= 1.0 || rng.random::<f64>() < density {
                ratings.push(Rating {
                    user: next_user,
                    item,
                    value: rescale(x).clamp(scale.min, scale.max),
                });
            }
        }
        if ratings.len() > before {
            next_user += 1;
        }
    }
    if ratings.is_empty() {
        return Err(Error::Empty);
    }
    RatingDataset::new(next_user, item_count, ratings, scale)
}

pub fn synth_low_rank(
    users: usize,
    items: usize,
    rank: usize,
    density: f64,
    noise_std: f64,
    seed: u64,
) -> Result<RatingDataset> {
    if rank == 0 || rank > users.min(items) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} must lie in [1, min({users}, {items})]"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density {density} must lie in (0, 1]"
        )));
    }
    let mut rng = rng::stream(seed, &[purpose::SYNTH]);
    let dense = low_rank_matrix(users, items, rank, noise_std, &mut rng);
    sample_dense(&dense, density, &mut rng)
}

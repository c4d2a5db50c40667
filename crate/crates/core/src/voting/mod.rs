//! Multi-view consistency voting.
//!
//! Each record is clustered at several levels: three same-granularity
//! ("horizontal") clusterings of the spatial, temporal and fused views with
//! one cluster per class, then coarser ("vertical") clusterings of the fused
//! view with the cluster count halved per level. Pairs that land together on
//! more levels receive a larger consistency weight.

pub mod kmeans;

use std::io::Write;

use rayon::prelude::*;

pub use kmeans::{kmeans, KMeansParams, KMeansResult};

use crate::features::Dataset;
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VotingError {
    #[error("k-means needs at least k points (n={n}, k={k})")]
    TooFewPoints { n: usize, k: usize },
    #[error("k-means input contains non-finite values")]
    NonFinite,
    #[error("invalid vote levels: {0}")]
    Levels(String),
    #[error("assignment vectors have different lengths")]
    LengthMismatch,
    #[error("consistency scores need at least two records, got {0}")]
    TooFewRecords(usize),
    #[error("eta must lie in [0, 1], got {0}")]
    Eta(String),
}

/// Which labeled pairs count as positives in the consistency score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairLabelMode {
    /// Both records labeled and sharing a class.
    #[default]
    SameClass,
    /// Both records labeled, regardless of class.
    BothLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteConfig {
    /// Total number of clustering levels (three horizontal plus vertical ones).
    pub levels: usize,
    pub eta: f64,
    pub pair_mode: PairLabelMode,
    pub kmeans: KMeansParams,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            eta: 0.5,
            pair_mode: PairLabelMode::SameClass,
            kmeans: KMeansParams::default(),
        }
    }
}

impl VoteConfig {
    pub fn validate(&self, n_total: usize) -> Result<(), VotingError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(VotingError::Eta(self.eta.to_string()));
        }
        level_cluster_counts(n_total, self.levels).map(|_| ())
    }
}

/// Cluster count per level: `n_total` for the three horizontal levels, then
/// `floor(n_total / 2^(k-2))` for level `k >= 3`.
pub fn level_cluster_counts(n_total: usize, levels: usize) -> Result<Vec<usize>, VotingError> {
    if levels < 3 {
        return Err(VotingError::Levels(format!(
            "need at least 3 levels, got {levels}"
        )));
    }
    let counts: Vec<usize> = (0..levels)
        .map(|k| {
            if k < 3 {
                n_total
            } else {
                n_total.checked_shr((k - 2) as u32).unwrap_or(0)
            }
        })
        .collect();
    if let Some((k, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(VotingError::Levels(format!(
            "level {k} would have {n} cluster(s); every level needs at least 2"
        )));
    }
    Ok(counts)
}

/// Distinct, well-mixed seed per level.
pub fn level_seed(seed: u64, level: usize) -> u64 {
    let mut z = seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Levels 0 and 1: horizontal clusterings of the stored spatial and temporal views.
pub fn raw_view_levels<T: Scalar>(
    f_s: &Mat<T>,
    f_t: &Mat<T>,
    n_total: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<Vec<Vec<usize>>, VotingError> {
    [f_s, f_t]
        .iter()
        .enumerate()
        .map(|(lvl, pts)| Ok(kmeans(pts, n_total, level_seed(seed, lvl), params)?.assignments))
        .collect()
}

/// Levels 2..K: the horizontal clustering of the fused view and the vertical ones.
pub fn fused_view_levels<T: Scalar>(
    f_stf: &Mat<T>,
    n_total: usize,
    levels: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<Vec<Vec<usize>>, VotingError> {
    let counts = level_cluster_counts(n_total, levels)?;
    (2..levels)
        .map(|lvl| Ok(kmeans(f_stf, counts[lvl], level_seed(seed, lvl), params)?.assignments))
        .collect()
}

pub fn build_vote_levels<T: Scalar>(
    f_s: &Mat<T>,
    f_t: &Mat<T>,
    f_stf: &Mat<T>,
    n_total: usize,
    levels: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<Vec<Vec<usize>>, VotingError> {
    level_cluster_counts(n_total, levels)?;
    let mut out = raw_view_levels(f_s, f_t, n_total, seed, params)?;
    out.extend(fused_view_levels(f_stf, n_total, levels, seed, params)?);
    Ok(out)
}

/// Symmetric agreement counts `w[i][j]` = number of levels where `i` and `j` share a cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCounts {
    n: usize,
    levels: u16,
    data: Vec<u16>,
}

impl VoteCounts {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> usize {
        self.levels as usize
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Off-diagonal vote mass of row `i`.
    pub fn off_diagonal_sum(&self, i: usize) -> u64 {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &w)| w as u64)
            .sum()
    }

    pub fn from_raw(n: usize, levels: u16, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, levels, data }
    }
}

pub fn vote_counts(levels: &[Vec<usize>]) -> Result<VoteCounts, VotingError> {
    let n = levels.first().map_or(0, Vec::len);
    if levels.iter().any(|l| l.len() != n) {
        return Err(VotingError::LengthMismatch);
    }
    let k = u16::try_from(levels.len())
        .map_err(|_| VotingError::Levels("too many levels".into()))?;
    let mut data = vec![0u16; n * n];
    data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for lvl in levels {
            let ci = lvl[i];
            for (w, &cj) in row.iter_mut().zip(lvl) {
                *w += (cj == ci) as u16;
            }
        }
    });
    Ok(VoteCounts { n, levels: k, data })
}

/// `c_ij = (1 - eta) * y_ij + eta * w_ij / sum_{k != i} w_ik` for `i != j`.
///
/// `labels[i]` is the training-visible label (`None` for unlabeled records).
/// The diagonal is set to zero: a record is never paired with itself. Rows
/// with no off-diagonal votes get a zero vote term.
pub fn consistency_scores<T: Scalar>(
    w: &VoteCounts,
    labels: &[Option<usize>],
    eta: f64,
    mode: PairLabelMode,
) -> Result<Mat<T>, VotingError> {
    let n = w.n();
    if n < 2 {
        return Err(VotingError::TooFewRecords(n));
    }
    if labels.len() != n {
        return Err(VotingError::LengthMismatch);
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(VotingError::Eta(eta.to_string()));
    }
    let eta_t = T::c(eta);
    let label_weight = T::one() - eta_t;
    let mut c = Mat::zeros(n, n);
    c.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let mass = w.off_diagonal_sum(i);
            let norm = if mass > 0 {
                eta_t / T::c(mass as f64)
            } else {
                T::zero()
            };
            for (j, cv) in row.iter_mut().enumerate() {
                if j == i {
                    continue;
                }
                let positive = match (labels[i], labels[j]) {
                    (Some(a), Some(b)) => mode == PairLabelMode::BothLabeled || a == b,
                    _ => false,
                };
                let y = if positive { label_weight } else { T::zero() };
                *cv = y + norm * T::c(w.get(i, j) as f64);
            }
        });
    Ok(c)
}

/// One epoch's voting state over the whole training set.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTable<T> {
    pub levels: Vec<Vec<usize>>,
    pub w: VoteCounts,
    pub c: Mat<T>,
    pub eta: f64,
}

impl<T: Scalar> VoteTable<T> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Consistency submatrix for a batch, in batch order.
    pub fn batch_scores(&self, batch: &[usize]) -> Mat<T> {
        self.c.submatrix(batch)
    }
}

/// Caches the raw-view levels (their inputs never change) and rebuilds the
/// fused-view levels plus `w` and `c` whenever embeddings change.
#[derive(Debug, Clone)]
pub struct VoteRefresher {
    raw_levels: Vec<Vec<usize>>,
    labels: Vec<Option<usize>>,
    n_total: usize,
    seed: u64,
    cfg: VoteConfig,
}

impl VoteRefresher {
    pub fn new<T: Scalar>(ds: &Dataset, cfg: VoteConfig, seed: u64) -> Result<Self, VotingError> {
        cfg.validate(ds.num_classes_total)?;
        let to_mat = |f: fn(&crate::features::FeatureRecord) -> &Vec<f32>| {
            Mat::from_vec(
                ds.len(),
                ds.dim,
                ds.records
                    .iter()
                    .flat_map(|r| f(r).iter().map(|&x| T::widen(x)))
                    .collect(),
            )
        };
        let f_s: Mat<T> = to_mat(|r| &r.f_s);
        let f_t: Mat<T> = to_mat(|r| &r.f_t);
        let raw_levels = raw_view_levels(&f_s, &f_t, ds.num_classes_total, seed, &cfg.kmeans)?;
        Ok(Self {
            raw_levels,
            labels: (0..ds.len()).map(|i| ds.train_label(i)).collect(),
            n_total: ds.num_classes_total,
            seed,
            cfg,
        })
    }

    pub fn refresh<T: Scalar>(&self, fused: &Mat<T>) -> Result<VoteTable<T>, VotingError> {
        if fused.rows() != self.labels.len() {
            return Err(VotingError::LengthMismatch);
        }
        let mut levels = self.raw_levels.clone();
        levels.extend(fused_view_levels(
            fused,
            self.n_total,
            self.cfg.levels,
            self.seed,
            &self.cfg.kmeans,
        )?);
        let w = vote_counts(&levels)?;
        let c = consistency_scores(&w, &self.labels, self.cfg.eta, self.cfg.pair_mode)?;
        Ok(VoteTable {
            levels,
            w,
            c,
            eta: self.cfg.eta,
        })
    }
}

/// Writes a square matrix as CSV: a header of record ids, then one row per record.
pub fn write_matrix_csv<W: Write>(
    mut out: W,
    ids: &[u64],
    n: usize,
    cell: impl Fn(usize, usize) -> String,
) -> std::io::Result<()> {
    let header: Vec<String> = ids.iter().map(u64::to_string).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| cell(i, j)).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

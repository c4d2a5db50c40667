//! Clustering accuracy: k-means on embeddings, Hungarian cluster→class
//! matching, All/Old/New ACC and semi-supervised K estimation.

pub mod hungarian;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::features::Dataset;
use crate::fusion::{FusionConfig, FusionError};
use crate::linalg::Mat;
use crate::scalar::{squared_distance, Scalar};
use crate::trainer::model::{ModelParams, ViewBatch};
use crate::voting::kmeans::{kmeans, KMeansParams};
use crate::voting::VotingError;

pub use hungarian::{assignment_cost, hungarian, Assignment};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cost matrix is empty")]
    EmptyCost,
    #[error("cost matrix has non-finite entries")]
    NonFiniteCost,
    #[error("predictions ({pred}) and labels ({gt}) differ in length")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("record {0} has no ground-truth label")]
    MissingLabel(usize),
    #[error("k grid is empty")]
    EmptyGrid,
    #[error("k = {k} is below the number of known classes ({known})")]
    KBelowKnown { k: usize, known: usize },
    #[error("k = {k} must be at least 2 and at most the number of records ({n})")]
    BadK { k: usize, n: usize },
    #[error("no labeled records to score k against")]
    NoLabeled,
    #[error(transparent)]
    Voting(#[from] VotingError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Embedding space clustered at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSpace {
    /// Stored spatiotemporal features as-is.
    RawSt,
    /// Normalised projection of the fused features.
    #[default]
    ProjStf,
}

impl fmt::Display for EvalSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSpace::RawSt => "raw_st",
            EvalSpace::ProjStf => "proj_stf",
        })
    }
}

impl FromStr for EvalSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw_st" => Ok(EvalSpace::RawSt),
            "proj_stf" => Ok(EvalSpace::ProjStf),
            other => Err(format!("unknown eval space `{other}` (raw_st | proj_stf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccMetrics {
    pub all_acc: f64,
    pub old_acc: f64,
    pub new_acc: f64,
    /// Matched (cluster, class) pairs, ascending by cluster.
    pub mapping: Vec<(usize, usize)>,
    pub matched_old: usize,
    pub matched_new: usize,
    pub n_old: usize,
    pub n_new: usize,
}

impl AccMetrics {
    pub fn n_eval(&self) -> usize {
        self.n_old + self.n_new
    }
}

fn dense_ids(xs: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut uniq = xs.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let dense = xs
        .iter()
        .map(|x| uniq.binary_search(x).expect("present"))
        .collect();
    (uniq, dense)
}

/// Hungarian-matched clustering accuracy. One mapping is fitted on the whole
/// set; Old and New ACC condition on it. A subgroup with no records scores 0.
///
/// Among mappings with the most matched records, the one matching the most
/// known-class records wins, so all three scores are invariant to cluster
/// relabeling and record order.
pub fn acc_metrics(
    pred: &[usize],
    gt: &[usize],
    known_classes: &[u32],
) -> Result<AccMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let (clusters, pd) = dense_ids(pred);
    let (classes, gd) = dense_ids(gt);
    let is_known: Vec<bool> = classes
        .iter()
        .map(|&c| known_classes.contains(&(c as u32)))
        .collect();
    // each record is worth n + 1, plus 1 when its class is known
    let hit_weight = (pred.len() + 1) as f64;
    let mut cost = Mat::<f64>::zeros(clusters.len(), classes.len());
    for (&p, &g) in pd.iter().zip(&gd) {
        let w = hit_weight + if is_known[g] { 1.0 } else { 0.0 };
        cost.set(p, g, cost.get(p, g) - w);
    }
    let assignment = hungarian(&cost)?;
    let mut cluster_to_class = vec![None; clusters.len()];
    for (p, g) in assignment.pairs() {
        cluster_to_class[p] = Some(g);
    }

    let (mut matched_old, mut matched_new, mut n_old, mut n_new) = (0, 0, 0, 0);
    for (&p, &g) in pd.iter().zip(&gd) {
        let hit = cluster_to_class[p] == Some(g);
        if is_known[g] {
            n_old += 1;
            matched_old += hit as usize;
        } else {
            n_new += 1;
            matched_new += hit as usize;
        }
    }
    let frac = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    Ok(AccMetrics {
        all_acc: frac(matched_old + matched_new, pred.len()),
        old_acc: frac(matched_old, n_old),
        new_acc: frac(matched_new, n_new),
        mapping: assignment
            .pairs()
            .into_iter()
            .map(|(p, g)| (clusters[p], classes[g]))
            .collect(),
        matched_old,
        matched_new,
        n_old,
        n_new,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip)]
    pub cluster_assignments: Vec<usize>,
    pub all_acc: f64,
    pub old_acc: f64,
    pub new_acc: f64,
    pub k_used: usize,
    pub space: EvalSpace,
    pub mapping: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Evaluation settings shared by `evaluate` and `estimate_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub space: EvalSpace,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub kmeans: KMeansParams,
}

/// Restarts used when clustering for evaluation.
pub const EVAL_KMEANS_RESTARTS: usize = 10;

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            space: EvalSpace::default(),
            seed: 0,
            fusion: FusionConfig::default(),
            kmeans: KMeansParams {
                n_init: EVAL_KMEANS_RESTARTS,
                ..KMeansParams::default()
            },
        }
    }
}

pub fn dataset_views<T: Scalar>(ds: &Dataset, idx: &[usize]) -> ViewBatch<T> {
    let gather = |f: fn(&crate::features::FeatureRecord) -> &Vec<f32>| {
        Mat::from_vec(
            idx.len(),
            ds.dim,
            idx.iter()
                .flat_map(|&i| f(&ds.records[i]).iter().map(|&x| T::widen(x)))
                .collect(),
        )
    };
    ViewBatch {
        f_s: gather(|r| &r.f_s),
        f_t: gather(|r| &r.f_t),
        f_st: gather(|r| &r.f_st),
    }
}

const EMBED_CHUNK: usize = 512;

/// Per-record embeddings of the whole dataset in `space`.
pub fn embed_dataset<T: Scalar>(
    ds: &Dataset,
    params: &ModelParams<T>,
    space: EvalSpace,
    fusion: &FusionConfig,
) -> Result<Mat<T>, FusionError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    match space {
        EvalSpace::RawSt => Ok(dataset_views::<T>(ds, &all).f_st),
        EvalSpace::ProjStf => {
            let d = params.dims().embed;
            let mut out = Vec::with_capacity(ds.len() * d);
            for chunk in all.chunks(EMBED_CHUNK) {
                let fwd = params.forward(&dataset_views(ds, chunk), fusion)?;
                out.extend_from_slice(fwd.embeddings.as_slice());
            }
            Ok(Mat::from_vec(ds.len(), d, out))
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<(), EvalError> {
    if k < 2 || k > n {
        return Err(EvalError::BadK { k, n });
    }
    Ok(())
}

/// Clusters all records into `k` groups and scores the unlabeled ones.
pub fn evaluate<T: Scalar>(
    ds: &Dataset,
    params: &ModelParams<T>,
    k: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let emb = embed_dataset(ds, params, cfg.space, &cfg.fusion)?;
    evaluate_embeddings(ds, &emb, k, cfg)
}

pub fn evaluate_embeddings<T: Scalar>(
    ds: &Dataset,
    emb: &Mat<T>,
    k: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_k(k, ds.len())?;
    let km = kmeans(emb, k, cfg.seed, &cfg.kmeans)?;
    let eval_idx = ds.unlabeled_indices();
    if eval_idx.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let pred: Vec<usize> = eval_idx.iter().map(|&i| km.assignments[i]).collect();
    let gt = ground_truth(ds, &eval_idx)?;
    let m = acc_metrics(&pred, &gt, &ds.known_classes)?;
    Ok(EvalReport {
        cluster_assignments: km.assignments,
        all_acc: m.all_acc,
        old_acc: m.old_acc,
        new_acc: m.new_acc,
        k_used: k,
        space: cfg.space,
        mapping: m.mapping,
    })
}

fn ground_truth(ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>, EvalError> {
    idx.iter()
        .map(|&i| {
            let g = ds.records[i].gt_label;
            if g < 0 {
                Err(EvalError::MissingLabel(i))
            } else {
                Ok(g as usize)
            }
        })
        .collect()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster contribute 0.
pub fn silhouette<T: Scalar>(points: &Mat<T>, assignments: &[usize], k: usize) -> f64 {
    let n = points.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; k];
            for j in 0..n {
                if j != i {
                    sums[assignments[j]] +=
                        squared_distance(points.row(i), points.row(j)).to_f64_lossy().sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    scores.iter().sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct KCandidate {
    pub k: usize,
    /// Matched accuracy on the labeled records.
    pub labeled_acc: f64,
    /// Only computed for candidates tied on `labeled_acc`.
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KEstimate {
    pub k: usize,
    pub candidates: Vec<KCandidate>,
}

/// Picks the grid value whose clustering of all records best matches the
/// labeled ground truth. Ties go to the higher mean silhouette, then the
/// smaller k.
pub fn estimate_k<T: Scalar>(
    ds: &Dataset,
    params: &ModelParams<T>,
    k_grid: &[usize],
    cfg: &EvalConfig,
) -> Result<KEstimate, EvalError> {
    let emb = embed_dataset(ds, params, cfg.space, &cfg.fusion)?;
    estimate_k_embeddings(ds, &emb, k_grid, cfg)
}

pub fn estimate_k_embeddings<T: Scalar>(
    ds: &Dataset,
    emb: &Mat<T>,
    k_grid: &[usize],
    cfg: &EvalConfig,
) -> Result<KEstimate, EvalError> {
    if k_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let known = ds.known_classes.len();
    for &k in k_grid {
        if k < known {
            return Err(EvalError::KBelowKnown { k, known });
        }
        check_k(k, ds.len())?;
    }
    let labeled = ds.labeled_indices();
    if labeled.is_empty() {
        return Err(EvalError::NoLabeled);
    }
    let gt = ground_truth(ds, &labeled)?;

    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut candidates = Vec::with_capacity(grid.len());
    let mut assignments = Vec::with_capacity(grid.len());
    for &k in &grid {
        let km = kmeans(emb, k, cfg.seed, &cfg.kmeans)?;
        let pred: Vec<usize> = labeled.iter().map(|&i| km.assignments[i]).collect();
        let m = acc_metrics(&pred, &gt, &ds.known_classes)?;
        candidates.push(KCandidate {
            k,
            labeled_acc: m.all_acc,
            silhouette: None,
        });
        assignments.push(km.assignments);
    }
    let best = candidates
        .iter()
        .map(|c| c.labeled_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..grid.len())
        .filter(|&i| candidates[i].labeled_acc == best)
        .collect();
    if tied.len() > 1 {
        for &i in &tied {
            candidates[i].silhouette = Some(silhouette(emb, &assignments[i], grid[i]));
        }
    }
    // strict comparison keeps the smallest k among exact ties
    let mut pick = tied[0];
    for &i in &tied[1..] {
        if candidates[i].silhouette > candidates[pick].silhouette {
            pick = i;
        }
    }
    Ok(KEstimate {
        k: grid[pick],
        candidates,
    })
}

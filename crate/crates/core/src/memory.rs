//! Category-level memory: a fixed labeled subset per known class, its
//! feature prototypes in the projected space, and sharpened logit prototypes.
//!
//! Everything in the bank is a teacher-side constant: losses read it but no
//! gradient is ever routed back into it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::Dataset;
use crate::linalg::Mat;
use crate::losses::sharpen;
use crate::scalar::{l2_norm, Scalar};
use crate::trainer::model::{Mlp, ModelParams};

/// Pre-normalisation norm below which a prototype counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("no labeled records to build the memory from")]
    NoLabeledRecords,
    #[error("memory fraction must lie in (0, 1], got {0}")]
    Fraction(String),
    #[error("class {0} has no memory members")]
    EmptyClass(usize),
    #[error("prototype width {proto} does not match classifier input {input}")]
    Shape { proto: usize, input: usize },
}

/// Sampled member indices, one list per stored class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySubset {
    /// Stored class ids, ascending.
    pub classes: Vec<usize>,
    /// Record indices per stored class, ascending.
    pub members: Vec<Vec<usize>>,
}

impl MemorySubset {
    pub fn total_members(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Samples `max(1, ceil(fraction * n_c))` labeled records from every known
/// class that has labeled data.
pub fn sample_memory_subset(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<MemorySubset, MemoryError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MemoryError::Fraction(fraction.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    let mut members = Vec::new();
    for &c in &ds.known_classes {
        let mut pool: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.train_label(i) == Some(c as usize))
            .collect();
        if pool.is_empty() {
            continue;
        }
        let take = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
        pool.shuffle(&mut rng);
        let mut chosen = pool[..take].to_vec();
        chosen.sort_unstable();
        classes.push(c as usize);
        members.push(chosen);
    }
    if classes.is_empty() {
        return Err(MemoryError::NoLabeledRecords);
    }
    Ok(MemorySubset { classes, members })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePrototypes<T> {
    /// Unit-norm mean embedding per class.
    pub protos: Mat<T>,
    /// Classes whose mean embedding collapsed and fell back to the first member.
    pub degenerate: Vec<usize>,
}

/// Normalised mean of each class's member embeddings.
///
/// `embeddings` holds one row per member in `subset` order (class by class).
pub fn compute_feature_prototypes<T: Scalar>(
    subset: &MemorySubset,
    embeddings: &Mat<T>,
) -> Result<FeaturePrototypes<T>, MemoryError> {
    let d = embeddings.cols();
    let mut protos = Mat::zeros(subset.classes.len(), d);
    let mut degenerate = Vec::new();
    let mut row = 0;
    for (k, members) in subset.members.iter().enumerate() {
        if members.is_empty() {
            return Err(MemoryError::EmptyClass(subset.classes[k]));
        }
        let mut mean = vec![T::zero(); d];
        for r in row..row + members.len() {
            for (m, &x) in mean.iter_mut().zip(embeddings.row(r)) {
                *m += x;
            }
        }
        let inv = T::from_usize_lossy(members.len());
        mean.iter_mut().for_each(|m| *m /= inv);
        let mut norm = l2_norm(&mean);
        if norm.to_f64_lossy() < DEGENERATE_NORM {
            degenerate.push(subset.classes[k]);
            mean = embeddings.row(row).to_vec();
            norm = l2_norm(&mean);
        }
        for (p, &m) in protos.row_mut(k).iter_mut().zip(&mean) {
            *p = m / norm;
        }
        row += members.len();
    }
    Ok(FeaturePrototypes { protos, degenerate })
}

/// Classifier outputs on the prototypes and their sharpened distributions.
pub fn compute_logit_prototypes<T: Scalar>(
    protos: &Mat<T>,
    classifier: &Mlp<T>,
    tau_tl: f64,
) -> Result<(Mat<T>, Mat<T>), MemoryError> {
    if protos.cols() != classifier.input_dim() {
        return Err(MemoryError::Shape {
            proto: protos.cols(),
            input: classifier.input_dim(),
        });
    }
    let logits = classifier.infer(protos);
    let mut sharp = Mat::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        sharp.row_mut(r).copy_from_slice(&sharpen(logits.row(r), tau_tl));
    }
    Ok((logits, sharp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    pub subset: MemorySubset,
    /// Unit-norm projected prototypes, `|C_M| × d`.
    pub feat_protos: Mat<T>,
    /// Mean stored spatiotemporal feature per class, `|C_M| × C`; the
    /// classifier input for the logit prototypes.
    pub input_protos: Mat<T>,
    pub logit_protos: Mat<T>,
    pub sharpened: Mat<T>,
    pub degenerate: Vec<usize>,
    pub epoch_tag: usize,
}

impl<T: Scalar> MemoryBank<T> {
    /// Builds the bank for `subset` from the current parameters.
    pub fn build(
        subset: MemorySubset,
        params: &ModelParams<T>,
        ds: &Dataset,
        tau_tl: f64,
        epoch: usize,
    ) -> Result<Self, MemoryError> {
        let idx: Vec<usize> = subset.members.iter().flatten().copied().collect();
        let f_st = Mat::from_vec(
            idx.len(),
            ds.dim,
            idx.iter()
                .flat_map(|&i| ds.records[i].f_st.iter().map(|&x| T::widen(x)))
                .collect(),
        );
        let feats = compute_feature_prototypes(&subset, &params.project(&f_st))?;

        let mut input_protos = Mat::zeros(subset.classes.len(), ds.dim);
        let mut row = 0;
        for (k, members) in subset.members.iter().enumerate() {
            let inv = T::from_usize_lossy(members.len());
            for r in row..row + members.len() {
                for (m, &x) in input_protos.row_mut(k).iter_mut().zip(f_st.row(r)) {
                    *m += x;
                }
            }
            input_protos.row_mut(k).iter_mut().for_each(|m| *m /= inv);
            row += members.len();
        }
        let (logit_protos, sharpened) =
            compute_logit_prototypes(&input_protos, &params.classifier, tau_tl)?;
        Ok(Self {
            subset,
            feat_protos: feats.protos,
            input_protos,
            logit_protos,
            sharpened,
            degenerate: feats.degenerate,
            epoch_tag: epoch,
        })
    }

    /// Recomputes all prototypes for `epoch`, keeping the member set.
    pub fn refresh(
        &self,
        params: &ModelParams<T>,
        ds: &Dataset,
        tau_tl: f64,
        epoch: usize,
    ) -> Result<Self, MemoryError> {
        Self::build(self.subset.clone(), params, ds, tau_tl, epoch)
    }

    /// Bank row holding `class`, if stored.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.subset.classes.binary_search(&class).ok()
    }

    pub fn num_classes(&self) -> usize {
        self.subset.classes.len()
    }
}

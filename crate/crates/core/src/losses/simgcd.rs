//! Parametric classification losses over two augmented views: supervised
//! cross-entropy on labeled records, cross-view self-distillation on every
//! record, and a mean-entropy regulariser.

use crate::linalg::Mat;
use crate::scalar::{softmax, softmax_backward, Scalar};

use super::LossError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGcdParams {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub entropy_weight: f64,
}

impl Default for SimGcdParams {
    fn default() -> Self {
        Self {
            tau_student: 0.1,
            tau_teacher: 0.05,
            entropy_weight: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsOutput<T> {
    pub cls_s: T,
    pub cls_u: T,
    /// Cross-view cross-entropy part of `cls_u`.
    pub cross_entropy: T,
    /// Entropy of the batch-mean student distribution.
    pub mean_entropy: T,
    pub labeled: usize,
    /// Gradients of `cls_s` with respect to each view's logits.
    pub grad_s: [Mat<T>; 2],
    /// Gradients of `cls_u` with respect to each view's logits.
    pub grad_u: [Mat<T>; 2],
}

/// Teacher targets for the cross-view term: sharpened softmax of each view's
/// logits, treated as constants by the backward pass.
pub fn teacher_targets<T: Scalar>(logits: &Mat<T>, tau_teacher: f64) -> Mat<T> {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i)
            .copy_from_slice(&softmax(logits.row(i), T::c(tau_teacher)));
    }
    out
}

pub fn simgcd_cls_losses<T: Scalar>(
    views: [&Mat<T>; 2],
    labels: &[Option<usize>],
    params: &SimGcdParams,
) -> Result<ClsOutput<T>, LossError> {
    let teachers = [
        teacher_targets(views[0], params.tau_teacher),
        teacher_targets(views[1], params.tau_teacher),
    ];
    simgcd_cls_losses_with_teachers(views, [&teachers[0], &teachers[1]], labels, params)
}

/// Same as [`simgcd_cls_losses`] with explicit (detached) teacher targets;
/// `teachers[v]` supervises the student of the other view.
pub fn simgcd_cls_losses_with_teachers<T: Scalar>(
    views: [&Mat<T>; 2],
    teachers: [&Mat<T>; 2],
    labels: &[Option<usize>],
    params: &SimGcdParams,
) -> Result<ClsOutput<T>, LossError> {
    let (b, n) = (views[0].rows(), views[0].cols());
    if views[1].rows() != b || views[1].cols() != n {
        return Err(LossError::MissingView);
    }
    if teachers.iter().any(|t| t.rows() != b || t.cols() != n) || labels.len() != b {
        return Err(LossError::Shape("teacher or label shape".into()));
    }
    if b == 0 {
        return Err(LossError::TooFewSamples { needed: 1, got: 0 });
    }
    let ts = T::c(params.tau_student);
    let probs: [Vec<Vec<T>>; 2] = [0, 1].map(|v| {
        (0..b)
            .map(|i| softmax(views[v].row(i), ts))
            .collect::<Vec<_>>()
    });
    let tiny = T::min_positive_value();

    // supervised cross-entropy, averaged over labeled records and both views
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    let mut cls_s = T::zero();
    let mut grad_s = [Mat::zeros(b, n), Mat::zeros(b, n)];
    if labeled > 0 {
        let w = T::one() / T::from_usize_lossy(2 * labeled);
        for v in 0..2 {
            for (i, l) in labels.iter().enumerate() {
                let Some(y) = *l else { continue };
                if y >= n {
                    return Err(LossError::UnknownClass(y));
                }
                let q = &probs[v][i];
                cls_s -= w * q[y].max(tiny).ln();
                for (c, g) in grad_s[v].row_mut(i).iter_mut().enumerate() {
                    let onehot = if c == y { T::one() } else { T::zero() };
                    *g = w * (q[c] - onehot) / ts;
                }
            }
        }
    }

    // cross-view self-distillation over every record
    let w = T::one() / T::from_usize_lossy(2 * b);
    let mut ce = T::zero();
    let mut grad_u = [Mat::zeros(b, n), Mat::zeros(b, n)];
    for v in 0..2 {
        let teacher = teachers[1 - v];
        for i in 0..b {
            let q = &probs[v][i];
            let t = teacher.row(i);
            for c in 0..n {
                if t[c] > T::zero() {
                    ce -= w * t[c] * q[c].max(tiny).ln();
                }
            }
            for (c, g) in grad_u[v].row_mut(i).iter_mut().enumerate() {
                *g = w * (q[c] - t[c]) / ts;
            }
        }
    }

    // mean-entropy regulariser over both views' student distributions
    let mut mean = vec![T::zero(); n];
    for v in 0..2 {
        for q in &probs[v] {
            for (m, &p) in mean.iter_mut().zip(q) {
                *m += w * p;
            }
        }
    }
    let entropy: T = -mean
        .iter()
        .map(|&p| if p > T::zero() { p * p.ln() } else { T::zero() })
        .sum::<T>();
    let eh = T::c(params.entropy_weight);
    // d(-eh * H)/d mean_c = eh * (ln mean_c + 1)
    let d_mean: Vec<T> = mean
        .iter()
        .map(|&p| eh * (p.max(tiny).ln() + T::one()))
        .collect();
    let d_q: Vec<T> = d_mean.iter().map(|&g| g * w).collect();
    for v in 0..2 {
        for i in 0..b {
            let dz = softmax_backward(&probs[v][i], &d_q, ts);
            for (g, d) in grad_u[v].row_mut(i).iter_mut().zip(dz) {
                *g += d;
            }
        }
    }

    Ok(ClsOutput {
        cls_s,
        cls_u: ce - eh * entropy,
        cross_entropy: ce,
        mean_entropy: entropy,
        labeled,
        grad_s,
        grad_u,
    })
}

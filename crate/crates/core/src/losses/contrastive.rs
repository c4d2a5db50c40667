//! Consistency-weighted batch contrastive loss and the prototype
//! contrastive loss.

use crate::linalg::Mat;
use crate::scalar::{dot, l2_norm, log_sum_exp, softmax, Scalar};

use super::LossError;

const NORM_TOLERANCE: f64 = 1e-4;

fn check_unit_rows<T: Scalar>(m: &Mat<T>, what: &'static str) -> Result<(), LossError> {
    for (row, r) in m.iter_rows().enumerate() {
        let norm = l2_norm(r).to_f64_lossy();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(LossError::NotNormalized { what, row, norm });
        }
    }
    Ok(())
}

/// `L = -Σ_i Σ_{j≠i} c_ij · (f_i·f_j / τ_H − log Σ_{k≠i} exp(f_i·f_k / τ_HI))`.
///
/// Returns the loss and its gradient with respect to the embeddings. `c` is
/// read row-wise with row `i` as the anchor; it need not be symmetric.
pub fn hcl_loss<T: Scalar>(
    embeddings: &Mat<T>,
    c: &Mat<T>,
    tau_h: f64,
    tau_h_i: f64,
) -> Result<(T, Mat<T>), LossError> {
    let b = embeddings.rows();
    if b < 2 {
        return Err(LossError::TooFewSamples { needed: 2, got: b });
    }
    if (c.rows(), c.cols()) != (b, b) {
        return Err(LossError::Shape(format!(
            "consistency matrix is {}x{}, batch has {b} rows",
            c.rows(),
            c.cols()
        )));
    }
    check_unit_rows(embeddings, "embedding")?;
    let (th, thi) = (T::c(tau_h), T::c(tau_h_i));

    let mut sim = Mat::zeros(b, b);
    for i in 0..b {
        for j in i..b {
            let s = dot(embeddings.row(i), embeddings.row(j));
            sim.set(i, j, s);
            sim.set(j, i, s);
        }
    }

    let mut loss = T::zero();
    // dL/ds_ij for the anchor-row view of the similarity matrix
    let mut ds = Mat::zeros(b, b);
    for i in 0..b {
        let others = (0..b).filter(move |&k| k != i);
        let row = sim.row(i);
        let lse = log_sum_exp(others.clone().map(|k| row[k]), thi);
        let weight: T = others.clone().map(|j| c.get(i, j)).sum();
        if weight == T::zero() {
            continue;
        }
        for j in others.clone() {
            loss -= c.get(i, j) * (row[j] / th - lse);
        }
        for k in others {
            let p = (row[k] / thi - lse).exp();
            ds.set(i, k, weight * p / thi - c.get(i, k) / th);
        }
    }

    let mut grad = Mat::zeros(b, embeddings.cols());
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let g = ds.get(i, j);
            if g == T::zero() {
                continue;
            }
            // s_ij = f_i · f_j feeds both endpoints
            for (d, &x) in grad.row_mut(i).iter_mut().zip(embeddings.row(j)) {
                *d += g * x;
            }
            for (d, &x) in grad.row_mut(j).iter_mut().zip(embeddings.row(i)) {
                *d += g * x;
            }
        }
    }
    Ok((loss, grad))
}

/// Denominator convention for the prototype contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProtoMode {
    /// Softmax cross-entropy over all prototypes, positive included.
    #[default]
    Standard,
    /// Positive excluded from the denominator.
    Literal,
}

/// Contrastive alignment of one embedding with its class prototype.
///
/// `target` is the row of `prototypes` holding the record's class. Returns the
/// loss and its gradient with respect to `embedding`; prototypes are treated
/// as constants.
pub fn proto_contrastive_loss<T: Scalar>(
    embedding: &[T],
    target: usize,
    prototypes: &Mat<T>,
    tau: f64,
    mode: ProtoMode,
) -> Result<(T, Vec<T>), LossError> {
    let m = prototypes.rows();
    if m < 2 {
        return Err(LossError::TooFewPrototypes(m));
    }
    if target >= m {
        return Err(LossError::UnknownClass(target));
    }
    if embedding.len() != prototypes.cols() {
        return Err(LossError::Shape(format!(
            "embedding has length {}, prototypes have width {}",
            embedding.len(),
            prototypes.cols()
        )));
    }
    let norm = l2_norm(embedding).to_f64_lossy();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(LossError::NotNormalized {
            what: "embedding",
            row: 0,
            norm,
        });
    }
    check_unit_rows(prototypes, "prototype")?;

    let t = T::c(tau);
    let sims: Vec<T> = prototypes.iter_rows().map(|p| dot(embedding, p)).collect();
    let (members, sims_used): (Vec<usize>, Vec<T>) = match mode {
        ProtoMode::Standard => ((0..m).collect(), sims.clone()),
        ProtoMode::Literal => (0..m)
            .filter(|&k| k != target)
            .map(|k| (k, sims[k]))
            .unzip(),
    };
    let probs = softmax(&sims_used, t);
    let lse = log_sum_exp(sims_used.iter().copied(), t);
    let loss = lse - sims[target] / t;

    let mut grad: Vec<T> = prototypes.row(target).iter().map(|&p| -p / t).collect();
    for (&k, &q) in members.iter().zip(&probs) {
        for (g, &p) in grad.iter_mut().zip(prototypes.row(k)) {
            *g += q * p / t;
        }
    }
    Ok((loss, grad))
}

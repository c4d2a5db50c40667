//! Teacher sharpening and prototype logit distillation.

use crate::linalg::Mat;
use crate::scalar::{softmax, Scalar};

use super::LossError;

/// `softmax(mu / tau)`.
pub fn sharpen<T: Scalar>(mu: &[T], tau: f64) -> Vec<T> {
    softmax(mu, T::c(tau))
}

/// Argument order of the KL divergence in the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlOrder {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherFirst,
    /// `KL(student ‖ teacher)`.
    StudentFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput<T> {
    pub loss: T,
    /// Gradient with respect to the student logits; zero rows for
    /// non-contributing records.
    pub grad: Mat<T>,
    /// Records that had a teacher distribution; zero means the loss is
    /// vacuous for this batch.
    pub contributing: usize,
}

fn xlogy<T: Scalar>(x: T, y: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x * y.ln()
    }
}

/// `(1/B) Σ_i τ_SL · KL(...)` over records whose `teacher_rows[i]` is `Some`.
///
/// `teachers` holds one sharpened distribution per stored class; `teacher_rows`
/// maps each batch record to its row (or `None` if it has no teacher).
pub fn logit_distill_loss<T: Scalar>(
    logits: &Mat<T>,
    teacher_rows: &[Option<usize>],
    teachers: &Mat<T>,
    tau_sl: f64,
    order: KlOrder,
) -> Result<DistillOutput<T>, LossError> {
    if teacher_rows.len() != logits.rows() {
        return Err(LossError::Shape("one teacher slot per logit row".into()));
    }
    if teachers.rows() > 0 && teachers.cols() != logits.cols() {
        return Err(LossError::Shape(format!(
            "teacher width {} vs logit width {}",
            teachers.cols(),
            logits.cols()
        )));
    }
    let contributing = teacher_rows.iter().filter(|t| t.is_some()).count();
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    if contributing == 0 {
        return Ok(DistillOutput {
            loss: T::zero(),
            grad,
            contributing,
        });
    }
    let scale = T::c(tau_sl) / T::from_usize_lossy(contributing);
    let tiny = T::min_positive_value();
    let mut loss = T::zero();
    for (i, slot) in teacher_rows.iter().enumerate() {
        let Some(row) = *slot else { continue };
        if row >= teachers.rows() {
            return Err(LossError::UnknownClass(row));
        }
        let target = teachers.row(row);
        let q = softmax(logits.row(i), T::one());
        let g = grad.row_mut(i);
        match order {
            KlOrder::TeacherFirst => {
                let kl: T = target
                    .iter()
                    .zip(&q)
                    .map(|(&t, &p)| xlogy(t, t) - xlogy(t, p.max(tiny)))
                    .sum();
                loss += scale * kl;
                for ((gv, &p), &t) in g.iter_mut().zip(&q).zip(target) {
                    *gv = scale * (p - t);
                }
            }
            KlOrder::StudentFirst => {
                let v: Vec<T> = q
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| p.max(tiny).ln() - t.max(tiny).ln())
                    .collect();
                let kl: T = q.iter().zip(&v).map(|(&p, &d)| p * d).sum();
                loss += scale * kl;
                for ((gv, &p), &d) in g.iter_mut().zip(&q).zip(&v) {
                    *gv = scale * p * (d - kl);
                }
            }
        }
    }
    Ok(DistillOutput {
        loss,
        grad,
        contributing,
    })
}

//! Training objectives and their analytic gradients.

mod contrastive;
mod distill;
mod simgcd;

pub use contrastive::{hcl_loss, proto_contrastive_loss, ProtoMode};
pub use distill::{logit_distill_loss, sharpen, DistillOutput, KlOrder};
pub use simgcd::{
    simgcd_cls_losses, simgcd_cls_losses_with_teachers, teacher_targets, ClsOutput, SimGcdParams,
};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("{what} row {row} is not unit-norm (norm {norm})")]
    NotNormalized {
        what: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("class index {0} has no prototype")]
    UnknownClass(usize),
    #[error("need at least 2 prototypes, got {0}")]
    TooFewPrototypes(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("second augmented view is missing or has a different shape")]
    MissingView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub lambda_unsup: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::with_sup(0.45, 0.5)
    }
}

impl LossWeights {
    /// Convex pairing: `lambda_unsup = 1 - lambda_sup`.
    pub fn with_sup(lambda_sup: f64, lambda_s: f64) -> Self {
        Self {
            lambda_sup,
            lambda_unsup: 1.0 - lambda_sup,
            lambda_s,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_unsup", self.lambda_unsup),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss.{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// Multiplier each component's gradient receives in the total.
    pub fn coefficients(&self) -> LossComponents<f64> {
        LossComponents {
            cls_s: self.lambda_sup,
            proto: self.lambda_sup,
            distill: self.lambda_sup * self.lambda_s,
            cls_u: self.lambda_unsup,
            hcl: self.lambda_unsup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau_h: f64,
    pub tau_h_i: f64,
    pub tau_cl: f64,
    pub tau_tl: f64,
    pub tau_sl: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_h: 1.0,
            tau_h_i: 1.0,
            tau_cl: 0.05,
            tau_tl: 0.1,
            tau_sl: 1.0,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("tau_h", self.tau_h),
            ("tau_h_i", self.tau_h_i),
            ("tau_cl", self.tau_cl),
            ("tau_tl", self.tau_tl),
            ("tau_sl", self.tau_sl),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("loss.{name} must be positive, got {v}"));
            }
        }
        if self.tau_tl >= 1.0 {
            return Err(format!("loss.tau_tl must be below 1, got {}", self.tau_tl));
        }
        Ok(())
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents<T> {
    pub cls_s: T,
    pub cls_u: T,
    pub proto: T,
    pub distill: T,
    pub hcl: T,
}

impl<T: Scalar> LossComponents<T> {
    pub fn zero() -> Self {
        Self {
            cls_s: T::zero(),
            cls_u: T::zero(),
            proto: T::zero(),
            distill: T::zero(),
            hcl: T::zero(),
        }
    }

    pub fn named(&self) -> [(&'static str, T); 5] {
        [
            ("l_cls_s", self.cls_s),
            ("l_cls_u", self.cls_u),
            ("l_c", self.proto),
            ("l_s", self.distill),
            ("l_hcl", self.hcl),
        ]
    }
}

/// `λ_sup·(cls_s + proto + λ_s·distill) + λ_unsup·(cls_u + hcl)`.
///
/// The gradient of the total is the component gradients scaled by
/// [`LossWeights::coefficients`].
pub fn total_loss<T: Scalar>(parts: &LossComponents<T>, weights: &LossWeights) -> T {
    let k = weights.coefficients();
    T::c(k.cls_s) * parts.cls_s
        + T::c(k.proto) * parts.proto
        + T::c(k.distill) * parts.distill
        + T::c(k.cls_u) * parts.cls_u
        + T::c(k.hcl) * parts.hcl
}

//! Central finite-difference check of every parameter gradient of the batch
//! objective.
//!
//! The analytic gradient is computed at the working precision `T`. Finite
//! differences are always taken in binary64 on the exactly widened
//! parameters and batch constants, so a binary32 check measures the error of
//! the binary32 gradient rather than the cancellation noise of binary32
//! differencing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::{generate_synthetic, SyntheticConfig};
use crate::fusion::GateParams;
use crate::linalg::Mat;
use crate::memory::{sample_memory_subset, MemoryBank};
use crate::scalar::Scalar;
use crate::voting::{VoteConfig, VoteRefresher};

use super::model::{ModelDims, ModelParams, ViewBatch};
use super::{
    augment_views, batch_objective, mix_seed, stage2_coefficients, teacher_targets, Ablation,
    BatchContext, ObjectiveConfig, TrainConfig, TrainError,
};

/// Central-difference step; balances truncation against rounding in binary64.
pub const DEFAULT_STEP: f64 = 3e-5;

/// Size of the synthetic instance built by [`grad_check_instance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub batch: usize,
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            batch: 8,
            dim: 16,
            hidden: 32,
            embed: 16,
            classes: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Element with the largest absolute discrepancy.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradcheck {} (tol {:e}, step {:e})", self.precision, self.tolerance, self.step)?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<16} rel {:.3e}  abs {:.3e}  {}",
                t.name,
                t.max_rel_err,
                t.max_abs_err,
                if t.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "max rel err {:.3e}: {}",
            self.max_rel_err(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn cast_mat<T: Scalar>(m: &Mat<T>) -> Mat<f64> {
    m.cast()
}

pub fn cast_context<T: Scalar>(ctx: &BatchContext<T>) -> BatchContext<f64> {
    let view = |v: &ViewBatch<T>| ViewBatch {
        f_s: cast_mat(&v.f_s),
        f_t: cast_mat(&v.f_t),
        f_st: cast_mat(&v.f_st),
    };
    BatchContext {
        views: [view(&ctx.views[0]), view(&ctx.views[1])],
        labels: ctx.labels.clone(),
        consistency: ctx.consistency.as_ref().map(cast_mat),
        bank_rows: ctx.bank_rows.clone(),
        feat_protos: ctx.feat_protos.as_ref().map(cast_mat),
        sharpened: ctx.sharpened.as_ref().map(cast_mat),
        teachers: ctx.teachers.as_ref().map(|[a, b]| [cast_mat(a), cast_mat(b)]),
    }
}

/// Random parameters and a fully populated batch context over a small
/// synthetic dataset. Votes, the memory bank and the cross-view teachers are
/// computed once at these parameters and then frozen.
pub fn grad_check_instance<T: Scalar>(
    setup: &GradCheckSetup,
) -> Result<(ModelParams<T>, BatchContext<T>, ObjectiveConfig), TrainError> {
    let per_class = setup.batch.div_ceil(setup.classes).max(2);
    let ds = generate_synthetic(&SyntheticConfig {
        n_spatial_protos: setup.classes / 2,
        temporal_per_spatial: 2,
        dim: setup.dim,
        noise_sigma: 0.1,
        samples_per_class: per_class,
        labeled_fraction: 0.5,
        seed: setup.seed,
        ..SyntheticConfig::default()
    })?;
    let cfg = TrainConfig {
        hidden: setup.hidden,
        embed: setup.embed,
        vote: VoteConfig {
            levels: 3 + (setup.classes / 2).max(1).ilog2() as usize,
            ..VoteConfig::default()
        },
        memory_fraction: 1.0,
        ..TrainConfig::default()
    };
    let dims = ModelDims {
        input: setup.dim,
        hidden: setup.hidden,
        embed: setup.embed,
        classes: ds.num_classes_total,
    };
    let mut params = ModelParams::<T>::init(dims, setup.seed);
    params.gate = GateParams::random(setup.dim, 0.5, &mut ChaCha8Rng::seed_from_u64(mix_seed(setup.seed, 1)));

    // spread the batch over every class so each loss term sees data
    let mut batch: Vec<usize> = Vec::with_capacity(setup.batch);
    for j in 0..per_class {
        for c in 0..ds.num_classes_total {
            if batch.len() < setup.batch {
                batch.push(c * per_class + j);
            }
        }
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let whole = crate::eval::dataset_views::<T>(&ds, &all);
    let emb = params.forward(&whole, &cfg.fusion)?.embeddings;
    let votes = VoteRefresher::new::<T>(&ds, cfg.vote, setup.seed)?.refresh(&emb)?;
    let subset = sample_memory_subset(&ds, cfg.memory_fraction, setup.seed)?;
    let bank = MemoryBank::build(subset, &params, &ds, cfg.temperatures.tau_tl, 0)?;

    let labels: Vec<Option<usize>> = batch.iter().map(|&i| ds.train_label(i)).collect();
    let views = augment_views::<T>(&ds, &batch, 0.05, 0.1, setup.seed);
    let teachers = [0, 1].map(|v| {
        params
            .forward(&views[v], &cfg.fusion)
            .map(|o| teacher_targets(&o.logits, cfg.simgcd.tau_teacher))
    });
    let [ta, tb] = teachers;
    let ctx = BatchContext {
        bank_rows: labels.iter().map(|l| l.and_then(|c| bank.row_of(c))).collect(),
        labels,
        views,
        consistency: Some(votes.batch_scores(&batch)),
        feat_protos: Some(bank.feat_protos.clone()),
        sharpened: Some(bank.sharpened.clone()),
        teachers: Some([ta?, tb?]),
    };
    let obj = ObjectiveConfig::from_train(&cfg, stage2_coefficients(&cfg.weights, &Ablation::default()));
    Ok((params, ctx, obj))
}

/// Compares the analytic gradient of [`batch_objective`] to central
/// differences with step `step`. Per tensor the error is
/// `max|a − n| / max(‖a‖∞, ‖n‖∞, √ε)`. With `corrupt` set, the analytic
/// gradient of `projector.1.w` is perturbed before comparison.
pub fn grad_check<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &BatchContext<T>,
    obj: &ObjectiveConfig,
    step: f64,
    tol: f64,
    corrupt: bool,
) -> Result<GradCheckReport, TrainError> {
    let mut analytic = batch_objective(params, ctx, obj)?.grads;
    if corrupt {
        if let Some(t) = analytic.tensors_mut().into_iter().find(|t| t.name == "projector.1.w") {
            let bump = T::c(0.05) * t.data.iter().fold(T::zero(), |m, x| m.max(x.abs())).max(T::one());
            t.data[0] += bump;
        }
    }
    let wide_ctx = cast_context(ctx);
    let mut probe: ModelParams<f64> = params.cast();
    let floor = T::epsilon().to_f64_lossy().sqrt();
    let n_tensors = probe.tensors().len();
    let mut tensors = Vec::with_capacity(n_tensors);
    for (ti, a) in analytic.tensors().into_iter().enumerate() {
        let mut numeric = vec![0.0f64; a.data.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let base = probe.tensors()[ti].data[k];
            let eval = |probe: &mut ModelParams<f64>, x: f64| -> Result<f64, TrainError> {
                probe.tensors_mut()[ti].data[k] = x;
                Ok(batch_objective(probe, &wide_ctx, obj)?.total)
            };
            let plus = eval(&mut probe, base + step)?;
            let minus = eval(&mut probe, base - step)?;
            probe.tensors_mut()[ti].data[k] = base;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a64: Vec<f64> = a.data.iter().map(|x| x.to_f64_lossy()).collect();
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (mut max_abs, mut worst) = (0.0f64, 0usize);
        for (k, (x, y)) in a64.iter().zip(&numeric).enumerate() {
            let d = (x - y).abs();
            if d > max_abs || d.is_nan() {
                max_abs = d;
                worst = k;
            }
        }
        let rel = max_abs / inf(&a64).max(inf(&numeric)).max(floor);
        tensors.push(TensorCheck {
            name: a.name,
            max_rel_err: rel,
            max_abs_err: max_abs,
            worst_index: worst,
            passed: rel < tol,
        });
    }
    Ok(GradCheckReport {
        precision: T::NAME,
        tolerance: tol,
        step,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GradCheckSetup {
        GradCheckSetup {
            batch: 8,
            dim: 5,
            hidden: 6,
            embed: 4,
            classes: 4,
            seed: 3,
        }
    }

    #[test]
    fn binary64_gradients_agree() {
        let (p, ctx, obj) = grad_check_instance::<f64>(&tiny()).unwrap();
        let report = grad_check(&p, &ctx, &obj, 1e-6, 1e-6, false).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.tensors.len(), 14);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (p, ctx, obj) = grad_check_instance::<f64>(&tiny()).unwrap();
        let report = grad_check(&p, &ctx, &obj, 1e-6, 1e-6, true).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing(), vec!["projector.1.w"]);
    }
}

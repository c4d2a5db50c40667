//! Feature-view augmentation, SGD, the per-batch objective and the two-stage
//! training schedule.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eval::{evaluate, EvalConfig, EvalError, EvalSpace};
use crate::features::{make_batches, Dataset, FeatureError};
use crate::fusion::{FusionConfig, FusionError};
use crate::linalg::Mat;
use crate::losses::{
    hcl_loss, logit_distill_loss, proto_contrastive_loss, simgcd_cls_losses_with_teachers,
    teacher_targets, KlOrder, LossComponents, LossError, LossWeights, ProtoMode, SimGcdParams,
    Temperatures,
};
use crate::memory::{sample_memory_subset, MemoryBank, MemoryError};
use crate::scalar::Scalar;
use crate::voting::{level_seed, VoteConfig, VoteRefresher, VotingError};

use model::{ModelDims, ModelParams, ViewBatch};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite loss component `{component}` (epoch {epoch})")]
    NonFiniteLoss { component: &'static str, epoch: usize },
    #[error("dataset has no labeled records")]
    NoLabeled,
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Voting(#[from] VotingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which optional loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub proto: bool,
    pub distill: bool,
    pub hcl: bool,
    pub cls_u: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            proto: true,
            distill: true,
            hcl: true,
            cls_u: true,
        }
    }
}

impl Ablation {
    /// Parametric classification losses only.
    pub fn baseline() -> Self {
        Self {
            proto: false,
            distill: false,
            hcl: false,
            cls_u: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero over each stage.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(format!("unknown lr schedule `{other}` (constant | cosine)")),
        }
    }
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if epochs == 0 => base,
            LrSchedule::Cosine => {
                0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub aug_sigma: f64,
    pub aug_drop: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed: usize,
    pub fusion: FusionConfig,
    pub temperatures: Temperatures,
    pub weights: LossWeights,
    pub simgcd: SimGcdParams,
    pub proto_mode: ProtoMode,
    pub kl_order: KlOrder,
    pub vote: VoteConfig,
    pub memory_fraction: f64,
    pub ablation: Ablation,
    /// Space scored after every epoch.
    pub eval_space: EvalSpace,
    /// Cluster count for per-epoch scoring; `None` uses the true class count.
    pub eval_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch_size: 128,
            epochs_stage1: 30,
            epochs_stage2: 50,
            aug_sigma: 0.05,
            aug_drop: 0.1,
            seed: 0,
            hidden: 128,
            embed: 64,
            fusion: FusionConfig::default(),
            temperatures: Temperatures::default(),
            weights: LossWeights::default(),
            simgcd: SimGcdParams::default(),
            proto_mode: ProtoMode::default(),
            kl_order: KlOrder::default(),
            vote: VoteConfig::default(),
            memory_fraction: 0.2,
            ablation: Ablation::default(),
            eval_space: EvalSpace::default(),
            eval_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.aug_sigma >= 0.0 && self.aug_sigma.is_finite()) {
            return bad(format!("train.aug_sigma must be nonnegative, got {}", self.aug_sigma));
        }
        if !(0.0..=1.0).contains(&self.aug_drop) {
            return bad(format!("train.aug_drop must lie in [0, 1], got {}", self.aug_drop));
        }
        if self.hidden == 0 || self.embed == 0 {
            return bad("model widths must be positive".into());
        }
        if !(self.memory_fraction > 0.0 && self.memory_fraction <= 1.0) {
            return bad(format!("memory.fraction must lie in (0, 1], got {}", self.memory_fraction));
        }
        self.fusion.validate().map_err(TrainError::Config)?;
        self.temperatures.validate().map_err(TrainError::Config)?;
        self.weights.validate().map_err(TrainError::Config)?;
        if !(self.vote.eta >= 0.0 && self.vote.eta <= 1.0) {
            return bad(format!("vote.eta must lie in [0, 1], got {}", self.vote.eta));
        }
        Ok(())
    }

    pub fn model_dims(&self, ds: &Dataset) -> ModelDims {
        ModelDims {
            input: ds.dim,
            hidden: self.hidden,
            embed: self.embed,
            classes: ds.num_classes_total,
        }
    }

    fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            space: self.eval_space,
            seed,
            fusion: self.fusion,
            ..EvalConfig::default()
        }
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    mix_seed(mix_seed(seed, stage), epoch as u64)
}

/// One augmented copy of a record's three views. Noise is drawn per channel
/// and view; the dropout mask is shared by the three views.
#[allow(clippy::too_many_arguments)]
pub fn augment_record<T: Scalar>(
    f_s: &[f32],
    f_t: &[f32],
    f_st: &[f32],
    sigma: f64,
    drop: f64,
    seed: u64,
    record_id: u64,
    view: u64,
) -> [Vec<T>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, record_id), view));
    let c = f_st.len();
    let keep: Vec<bool> = (0..c).map(|_| !rng.random_bool(drop)).collect();
    [f_s, f_t, f_st].map(|src| {
        src.iter()
            .zip(&keep)
            .map(|(&x, &k)| {
                let z: f64 = rng.sample(StandardNormal);
                if k {
                    T::widen(x) + T::c(sigma * z)
                } else {
                    T::zero()
                }
            })
            .collect()
    })
}

/// Two augmented views of the records `idx`.
pub fn augment_views<T: Scalar>(
    ds: &Dataset,
    idx: &[usize],
    sigma: f64,
    drop: f64,
    seed: u64,
) -> [ViewBatch<T>; 2] {
    [0u64, 1].map(|view| {
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for &i in idx {
            let r = &ds.records[i];
            let aug = augment_record::<T>(&r.f_s, &r.f_t, &r.f_st, sigma, drop, seed, r.id, view);
            for (p, a) in parts.iter_mut().zip(aug) {
                p.extend(a);
            }
        }
        let [f_s, f_t, f_st] = parts.map(|p| Mat::from_vec(idx.len(), ds.dim, p));
        ViewBatch { f_s, f_t, f_st }
    })
}

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelParams<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ModelParams<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn reset(&mut self) {
        for t in self.velocity.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`. Nothing is updated if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<(), TrainError> {
        if let Some(t) = grads
            .tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
        {
            return Err(TrainError::NonFiniteGrad(t.name));
        }
        let (lr, mu, wd) = (T::c(self.lr), T::c(self.momentum), T::c(self.weight_decay));
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((p, &g), v) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Per-term multipliers for one objective evaluation. A zero coefficient
/// skips the term entirely.
pub fn stage1_coefficients() -> LossComponents<f64> {
    LossComponents {
        cls_s: 1.0,
        ..LossComponents::zero()
    }
}

pub fn stage2_coefficients(weights: &LossWeights, ablation: &Ablation) -> LossComponents<f64> {
    let k = weights.coefficients();
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    LossComponents {
        cls_s: k.cls_s,
        cls_u: on(ablation.cls_u, k.cls_u),
        proto: on(ablation.proto, k.proto),
        distill: on(ablation.distill, k.distill),
        hcl: on(ablation.hcl, k.hcl),
    }
}

/// Everything an objective evaluation treats as constant: the augmented
/// views, labels, the batch's consistency scores, the memory bank and
/// (optionally) the cross-view teacher targets.
#[derive(Debug, Clone)]
pub struct BatchContext<T> {
    pub views: [ViewBatch<T>; 2],
    pub labels: Vec<Option<usize>>,
    pub consistency: Option<Mat<T>>,
    /// Bank row of each record's class, for labeled records of stored classes.
    pub bank_rows: Vec<Option<usize>>,
    pub feat_protos: Option<Mat<T>>,
    pub sharpened: Option<Mat<T>>,
    /// When `None`, targets come from the current logits (detached).
    pub teachers: Option<[Mat<T>; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub coefficients: LossComponents<f64>,
    pub temperatures: Temperatures,
    pub simgcd: SimGcdParams,
    pub proto_mode: ProtoMode,
    pub kl_order: KlOrder,
    pub fusion: FusionConfig,
}

impl ObjectiveConfig {
    pub fn from_train(cfg: &TrainConfig, coefficients: LossComponents<f64>) -> Self {
        Self {
            coefficients,
            temperatures: cfg.temperatures,
            simgcd: cfg.simgcd,
            proto_mode: cfg.proto_mode,
            kl_order: cfg.kl_order,
            fusion: cfg.fusion,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub parts: LossComponents<T>,
    pub total: T,
    pub grads: ModelParams<T>,
}

/// Loss components, weighted total and parameter gradients for one batch.
///
/// Per-view terms are averaged over the two views; HCL is averaged over
/// anchors.
pub fn batch_objective<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &BatchContext<T>,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput<T>, TrainError> {
    let k = &cfg.coefficients;
    let temps = &cfg.temperatures;
    let outs = [
        params.forward(&ctx.views[0], &cfg.fusion)?,
        params.forward(&ctx.views[1], &cfg.fusion)?,
    ];
    let b = ctx.labels.len();
    let (n_emb, n_cls) = (outs[0].embeddings.cols(), outs[0].logits.cols());
    let mut grad_emb = [Mat::zeros(b, n_emb), Mat::zeros(b, n_emb)];
    let mut grad_logit = [Mat::zeros(b, n_cls), Mat::zeros(b, n_cls)];
    let mut parts = LossComponents::<T>::zero();
    let half = T::c(0.5);

    if k.cls_s != 0.0 || k.cls_u != 0.0 {
        let teachers = match &ctx.teachers {
            Some(t) => t.clone(),
            None => [0, 1].map(|v| teacher_targets(&outs[v].logits, cfg.simgcd.tau_teacher)),
        };
        let cls = simgcd_cls_losses_with_teachers(
            [&outs[0].logits, &outs[1].logits],
            [&teachers[0], &teachers[1]],
            &ctx.labels,
            &cfg.simgcd,
        )?;
        parts.cls_s = cls.cls_s;
        parts.cls_u = cls.cls_u;
        for v in 0..2 {
            if k.cls_s != 0.0 {
                grad_logit[v].add_scaled(&cls.grad_s[v], T::c(k.cls_s));
            }
            if k.cls_u != 0.0 {
                grad_logit[v].add_scaled(&cls.grad_u[v], T::c(k.cls_u));
            }
        }
    }

    if k.hcl != 0.0 {
        let c = ctx
            .consistency
            .as_ref()
            .ok_or_else(|| TrainError::Config("consistency scores missing".into()))?;
        let scale = half / T::from_usize_lossy(b);
        for v in 0..2 {
            let (l, g) = hcl_loss(&outs[v].embeddings, c, temps.tau_h, temps.tau_h_i)?;
            parts.hcl += scale * l;
            grad_emb[v].add_scaled(&g, scale * T::c(k.hcl));
        }
    }

    let with_proto: Vec<(usize, usize)> = ctx
        .bank_rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .collect();

    if k.proto != 0.0 && !with_proto.is_empty() {
        let protos = ctx
            .feat_protos
            .as_ref()
            .ok_or_else(|| TrainError::Config("feature prototypes missing".into()))?;
        let scale = half / T::from_usize_lossy(with_proto.len());
        for v in 0..2 {
            for &(i, row) in &with_proto {
                let (l, g) = proto_contrastive_loss(
                    outs[v].embeddings.row(i),
                    row,
                    protos,
                    temps.tau_cl,
                    cfg.proto_mode,
                )?;
                parts.proto += scale * l;
                for (d, &x) in grad_emb[v].row_mut(i).iter_mut().zip(&g) {
                    *d += scale * T::c(k.proto) * x;
                }
            }
        }
    }

    if k.distill != 0.0 && !with_proto.is_empty() {
        let teachers = ctx
            .sharpened
            .as_ref()
            .ok_or_else(|| TrainError::Config("sharpened prototypes missing".into()))?;
        for v in 0..2 {
            let d = logit_distill_loss(&outs[v].logits, &ctx.bank_rows, teachers, temps.tau_sl, cfg.kl_order)?;
            parts.distill += half * d.loss;
            grad_logit[v].add_scaled(&d.grad, half * T::c(k.distill));
        }
    }

    let total = T::c(k.cls_s) * parts.cls_s
        + T::c(k.cls_u) * parts.cls_u
        + T::c(k.proto) * parts.proto
        + T::c(k.distill) * parts.distill
        + T::c(k.hcl) * parts.hcl;

    let mut grads = params.zeros_like();
    for v in 0..2 {
        let ge = (k.hcl != 0.0 || k.proto != 0.0).then_some(&grad_emb[v]);
        params.backward(&outs[v].cache, ge, Some(&grad_logit[v]), &mut grads)?;
    }
    Ok(ObjectiveOutput { parts, total, grads })
}

fn check_finite<T: Scalar>(parts: &LossComponents<T>, total: T, epoch: usize) -> Result<(), TrainError> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss { component: name, epoch });
        }
    }
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { component: "total", epoch });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub stage: u8,
    /// Batch means of each term.
    pub losses: LossComponents<f64>,
    pub total: f64,
    pub all_acc: f64,
    pub old_acc: f64,
    pub new_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_cls_s,l_cls_u,l_c,l_s,l_hcl,total,all_acc,old_acc,new_acc";

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in rows {
        write!(out, "{}", m.epoch)?;
        for (_, v) in m.losses.named() {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{},{},{}", m.total, m.all_acc, m.old_acc, m.new_acc)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub metrics: Vec<EpochMetrics>,
}

struct EpochAccumulator<T> {
    sum: LossComponents<T>,
    total: T,
    batches: usize,
}

impl<T: Scalar> EpochAccumulator<T> {
    fn new() -> Self {
        Self {
            sum: LossComponents::zero(),
            total: T::zero(),
            batches: 0,
        }
    }

    fn add(&mut self, parts: &LossComponents<T>, total: T) {
        self.sum.cls_s += parts.cls_s;
        self.sum.cls_u += parts.cls_u;
        self.sum.proto += parts.proto;
        self.sum.distill += parts.distill;
        self.sum.hcl += parts.hcl;
        self.total += total;
        self.batches += 1;
    }

    fn finish(&self) -> (LossComponents<f64>, f64) {
        let n = self.batches.max(1) as f64;
        let m = |x: T| x.to_f64_lossy() / n;
        (
            LossComponents {
                cls_s: m(self.sum.cls_s),
                cls_u: m(self.sum.cls_u),
                proto: m(self.sum.proto),
                distill: m(self.sum.distill),
                hcl: m(self.sum.hcl),
            },
            m(self.total),
        )
    }
}

fn score_epoch<T: Scalar>(
    ds: &Dataset,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    epoch: usize,
    stage: u8,
    acc: &EpochAccumulator<T>,
) -> Result<EpochMetrics, TrainError> {
    let k = cfg.eval_k.unwrap_or(ds.num_classes_total);
    let report = evaluate(ds, params, k, &cfg.eval_config(cfg.seed))?;
    let (losses, total) = acc.finish();
    Ok(EpochMetrics {
        epoch,
        stage,
        losses,
        total,
        all_acc: report.all_acc,
        old_acc: report.old_acc,
        new_acc: report.new_acc,
    })
}

/// Supervised warm-up: labeled batches, `cls_s` only.
pub fn train_stage1<T: Scalar>(
    ds: &Dataset,
    params: ModelParams<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if ds.labeled_indices().is_empty() {
        return Err(TrainError::NoLabeled);
    }
    let mut params = params;
    let mut sgd = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let obj = ObjectiveConfig::from_train(cfg, stage1_coefficients());
    let mut metrics = Vec::with_capacity(cfg.epochs_stage1);
    for epoch in 0..cfg.epochs_stage1 {
        sgd.lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs_stage1);
        let seed = epoch_seed(cfg.seed, 1, epoch);
        let mut acc = EpochAccumulator::new();
        for batch in make_batches(ds, cfg.batch_size, seed, true)? {
            let ctx = BatchContext {
                views: augment_views(ds, &batch, cfg.aug_sigma, cfg.aug_drop, seed),
                labels: batch.iter().map(|&i| ds.train_label(i)).collect(),
                consistency: None,
                bank_rows: vec![None; batch.len()],
                feat_protos: None,
                sharpened: None,
                teachers: None,
            };
            let out = batch_objective(&params, &ctx, &obj)?;
            check_finite(&out.parts, out.total, epoch + 1)?;
            sgd.step(&mut params, &out.grads)?;
            acc.add(&out.parts, out.total);
        }
        metrics.push(score_epoch(ds, &params, cfg, epoch + 1, 1, &acc)?);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Semi-supervised stage over labeled and unlabeled records. Votes and the
/// memory bank are refreshed at the start of every epoch; `epoch_offset`
/// numbers the logged epochs after stage 1.
pub fn train_stage2<T: Scalar>(
    ds: &Dataset,
    params: ModelParams<T>,
    cfg: &TrainConfig,
    epoch_offset: usize,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let mut params = params;
    let mut metrics = Vec::with_capacity(cfg.epochs_stage2);
    if cfg.epochs_stage2 == 0 {
        return Ok(TrainOutcome { params, metrics });
    }
    let coefficients = stage2_coefficients(&cfg.weights, &cfg.ablation);
    let obj = ObjectiveConfig::from_train(cfg, coefficients);
    let needs_votes = coefficients.hcl != 0.0;
    let needs_bank = coefficients.proto != 0.0 || coefficients.distill != 0.0;

    let refresher = if needs_votes {
        Some(VoteRefresher::new::<T>(ds, cfg.vote, level_seed(cfg.seed, 0))?)
    } else {
        None
    };
    let subset = if needs_bank {
        Some(sample_memory_subset(ds, cfg.memory_fraction, mix_seed(cfg.seed, 0x6d656d))?)
    } else {
        None
    };

    let mut sgd = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs_stage2 {
        sgd.lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs_stage2);
        let seed = epoch_seed(cfg.seed, 2, epoch);
        let votes = match &refresher {
            Some(r) => {
                let emb = crate::eval::embed_dataset(ds, &params, EvalSpace::ProjStf, &cfg.fusion)?;
                Some(r.refresh(&emb)?)
            }
            None => None,
        };
        let bank = match &subset {
            Some(s) => Some(MemoryBank::build(
                s.clone(),
                &params,
                ds,
                cfg.temperatures.tau_tl,
                epoch,
            )?),
            None => None,
        };
        let mut acc = EpochAccumulator::new();
        for batch in make_batches(ds, cfg.batch_size, seed, false)? {
            let labels: Vec<Option<usize>> = batch.iter().map(|&i| ds.train_label(i)).collect();
            let bank_rows = match &bank {
                Some(bk) => labels.iter().map(|l| l.and_then(|c| bk.row_of(c))).collect(),
                None => vec![None; batch.len()],
            };
            let ctx = BatchContext {
                views: augment_views(ds, &batch, cfg.aug_sigma, cfg.aug_drop, seed),
                labels,
                consistency: votes.as_ref().map(|v| v.batch_scores(&batch)),
                bank_rows,
                feat_protos: bank.as_ref().map(|b| b.feat_protos.clone()),
                sharpened: bank.as_ref().map(|b| b.sharpened.clone()),
                teachers: None,
            };
            let out = batch_objective(&params, &ctx, &obj)?;
            check_finite(&out.parts, out.total, epoch_offset + epoch + 1)?;
            sgd.step(&mut params, &out.grads)?;
            acc.add(&out.parts, out.total);
        }
        metrics.push(score_epoch(ds, &params, cfg, epoch_offset + epoch + 1, 2, &acc)?);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Fraction of `idx` whose classifier argmax on the unaugmented views equals
/// the ground-truth label.
pub fn classifier_accuracy<T: Scalar>(
    ds: &Dataset,
    params: &ModelParams<T>,
    idx: &[usize],
    fusion: &FusionConfig,
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let logits = params.forward(&crate::eval::dataset_views(ds, idx), fusion)?.logits;
    let hits = idx
        .iter()
        .enumerate()
        .filter(|&(r, &i)| {
            let row = logits.row(r);
            let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            arg as i32 == ds.records[i].gt_label
        })
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// The parameters [`train_two_stage`] starts from.
pub fn initial_params<T: Scalar>(ds: &Dataset, cfg: &TrainConfig) -> ModelParams<T> {
    ModelParams::init(cfg.model_dims(ds), mix_seed(cfg.seed, 0x696e6974))
}

/// Seeded initialisation, stage 1, then stage 2 with fresh momentum.
pub fn train_two_stage<T: Scalar>(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    ds.validate()?;
    let init = initial_params(ds, cfg);
    let s1 = train_stage1(ds, init, cfg)?;
    let s2 = train_stage2(ds, s1.params, cfg, cfg.epochs_stage1)?;
    let mut metrics = s1.metrics;
    metrics.extend(s2.metrics);
    Ok(TrainOutcome {
        params: s2.params,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic, SyntheticConfig};

    fn one_param(p: f64) -> (ModelParams<f64>, ModelParams<f64>) {
        let dims = ModelDims {
            input: 1,
            hidden: 1,
            embed: 1,
            classes: 1,
        };
        let mut params = ModelParams::zeros(dims);
        params.gate.b[0] = p;
        (params.clone(), ModelParams::zeros(dims))
    }

    #[test]
    fn sgd_single_step() {
        let (mut p, mut g) = one_param(1.0);
        g.gate.b[0] = 1.0;
        let mut sgd = Sgd::new(&p, 0.005, 0.0, 0.0);
        sgd.step(&mut p, &g).unwrap();
        assert!((p.gate.b[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        let (mut p, mut g) = one_param(0.0);
        g.gate.b[0] = 1.0;
        let mut sgd = Sgd::new(&p, 0.005, 0.9, 0.0);
        sgd.step(&mut p, &g).unwrap();
        sgd.step(&mut p, &g).unwrap();
        assert!((p.gate.b[0] + 0.0145).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let (mut p, g) = one_param(0.3);
        let before = p.clone();
        Sgd::new(&p, 0.005, 0.9, 0.0).step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_names_the_bad_tensor() {
        let (mut p, mut g) = one_param(0.3);
        g.classifier.layers[1].w.set(0, 0, f64::NAN);
        let err = Sgd::new(&p, 0.005, 0.9, 0.0).step(&mut p, &g).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGrad(ref n) if n == "classifier.1.w"), "{err}");
        assert_eq!(p.gate.b[0], 0.3);
    }

    #[test]
    fn augmentation_boundaries() {
        let x = [0.5_f32, -1.0, 2.0];
        let id = augment_record::<f64>(&x, &x, &x, 0.0, 0.0, 1, 7, 0);
        for v in &id {
            assert_eq!(v, &[0.5, -1.0, 2.0]);
        }
        let dropped = augment_record::<f64>(&x, &x, &x, 0.3, 1.0, 1, 7, 1);
        for v in &dropped {
            assert!(v.iter().all(|&y| y == 0.0));
        }
        let a = augment_record::<f32>(&x, &x, &x, 0.3, 0.4, 9, 3, 1);
        let b = augment_record::<f32>(&x, &x, &x, 0.3, 0.4, 9, 3, 1);
        assert_eq!(a, b);
        let other_view = augment_record::<f32>(&x, &x, &x, 0.3, 0.4, 9, 3, 0);
        assert_ne!(a, other_view);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(0.01, 0, 10), 0.01);
        assert!((LrSchedule::Cosine.rate(0.01, 5, 10) - 0.005).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.01, 7, 10), 0.01);
    }

    fn small() -> (Dataset, TrainConfig) {
        let ds = generate_synthetic(&SyntheticConfig {
            n_spatial_protos: 2,
            temporal_per_spatial: 2,
            dim: 8,
            noise_sigma: 0.05,
            samples_per_class: 20,
            labeled_fraction: 0.5,
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs_stage1: 2,
            epochs_stage2: 2,
            hidden: 16,
            embed: 8,
            vote: VoteConfig {
                levels: 4,
                ..VoteConfig::default()
            },
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_epochs_return_the_input() {
        let (ds, mut cfg) = small();
        cfg.epochs_stage1 = 0;
        cfg.epochs_stage2 = 0;
        let init = ModelParams::<f64>::init(cfg.model_dims(&ds), 1);
        let s1 = train_stage1(&ds, init.clone(), &cfg).unwrap();
        assert_eq!(s1.params, init);
        assert!(s1.metrics.is_empty());
        let s2 = train_stage2(&ds, init.clone(), &cfg, 0).unwrap();
        assert_eq!(s2.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = small();
        let a = train_two_stage::<f32>(&ds, &cfg).unwrap();
        let b = train_two_stage::<f32>(&ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 4);
        assert!(a.metrics.iter().all(|m| m.total.is_finite()));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = EpochMetrics {
            epoch: 3,
            stage: 2,
            losses: LossComponents {
                cls_s: 1.0,
                cls_u: 2.0,
                proto: 3.0,
                distill: 4.0,
                hcl: 5.0,
            },
            total: 6.0,
            all_acc: 0.5,
            old_acc: 0.25,
            new_acc: 0.75,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[m]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\n3,1,2,3,4,5,6,0.5,0.25,0.75\n")
        );
    }
}

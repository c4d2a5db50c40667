//! Run configuration: dotted `key = value` lines with `#` comments.
//!
//! Every key has a default; a file only lists overrides. Unknown and repeated
//! keys are errors. [`RunConfig::dump`] writes every key and reloads to an
//! identical value.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::eval::{EvalConfig, EvalSpace};
use crate::features::{ClassSplit, SyntheticConfig};
use crate::losses::{KlOrder, ProtoMode};
use crate::trainer::TrainConfig;
use crate::voting::PairLabelMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cluster count used by `eval` when none is given on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalK {
    /// The class count recorded in the feature file.
    #[default]
    Classes,
    /// Estimated over `eval.k_grid`.
    Auto,
    Fixed(usize),
}

impl Display for EvalK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalK::Classes => f.write_str("classes"),
            EvalK::Auto => f.write_str("auto"),
            EvalK::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for EvalK {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classes" => Ok(EvalK::Classes),
            "auto" => Ok(EvalK::Auto),
            n => n
                .parse()
                .map(EvalK::Fixed)
                .map_err(|_| "expected `classes`, `auto` or an integer".into()),
        }
    }
}

/// Candidate cluster counts, written `a..b` (inclusive) or `a,b,c`.
/// `None` means `|known|..=2·|classes|` of the dataset at hand.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KGrid(pub Option<Vec<usize>>);

impl KGrid {
    pub fn resolve(&self, known: usize, total: usize) -> Vec<usize> {
        match &self.0 {
            Some(g) => g.clone(),
            None => (known.max(2)..=2 * total).collect(),
        }
    }
}

impl Display for KGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.0 {
            None => f.write_str("default"),
            Some(g) => {
                let contiguous = g.windows(2).all(|w| w[1] == w[0] + 1);
                if g.len() > 2 && contiguous {
                    write!(f, "{}..{}", g[0], g[g.len() - 1])
                } else {
                    let parts: Vec<String> = g.iter().map(usize::to_string).collect();
                    f.write_str(&parts.join(","))
                }
            }
        }
    }
}

impl FromStr for KGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "default" {
            return Ok(KGrid(None));
        }
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("`{t}` is not an integer"));
        let grid = if let Some((a, b)) = s.split_once("..") {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty range {a}..{b}"));
            }
            (a..=b).collect()
        } else {
            s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        if grid.is_empty() {
            return Err("empty grid".into());
        }
        Ok(KGrid(Some(grid)))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub eval_k: EvalK,
    pub k_grid: KGrid,
}

fn split_name(s: ClassSplit) -> &'static str {
    match s {
        ClassSplit::EvenOdd => "even_odd",
        ClassSplit::FirstHalf => "first_half",
    }
}

fn pair_mode_name(m: PairLabelMode) -> &'static str {
    match m {
        PairLabelMode::SameClass => "same_class",
        PairLabelMode::BothLabeled => "both_labeled",
    }
}

fn proto_mode_name(m: ProtoMode) -> &'static str {
    match m {
        ProtoMode::Standard => "standard",
        ProtoMode::Literal => "literal",
    }
}

fn kl_order_name(k: KlOrder) -> &'static str {
    match k {
        KlOrder::TeacherFirst => "teacher_first",
        KlOrder::StudentFirst => "student_first",
    }
}

fn pick<T: Copy>(value: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}", names.join(", "))
        })
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// Keys in dump order.
    pub const KEYS: &'static [&'static str] = &[
        "data.dim",
        "data.classes_spatial",
        "data.temporal_per_spatial",
        "data.samples_per_class",
        "data.noise_sigma",
        "data.labeled_fraction",
        "data.split",
        "data.seed",
        "model.hidden",
        "model.embed_dim",
        "fusion.tau_attn",
        "fusion.epsilon",
        "vote.levels",
        "vote.eta",
        "vote.pair_mode",
        "loss.tau_h",
        "loss.tau_h_i",
        "loss.tau_cl",
        "loss.tau_tl",
        "loss.tau_sl",
        "loss.lambda_sup",
        "loss.lambda_unsup",
        "loss.lambda_s",
        "loss.proto_mode",
        "loss.kl_order",
        "loss.use_proto",
        "loss.use_distill",
        "loss.use_hcl",
        "loss.use_cls_u",
        "memory.fraction",
        "train.lr",
        "train.lr_schedule",
        "train.momentum",
        "train.weight_decay",
        "train.batch_size",
        "train.epochs_stage1",
        "train.epochs_stage2",
        "train.aug_sigma",
        "train.aug_drop",
        "train.seed",
        "eval.space",
        "eval.k",
        "eval.k_grid",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let t = &self.train;
        let s = |v: &dyn Display| v.to_string();
        Some(match key {
            "data.dim" => s(&d.dim),
            "data.classes_spatial" => s(&d.n_spatial_protos),
            "data.temporal_per_spatial" => s(&d.temporal_per_spatial),
            "data.samples_per_class" => s(&d.samples_per_class),
            "data.noise_sigma" => s(&d.noise_sigma),
            "data.labeled_fraction" => s(&d.labeled_fraction),
            "data.split" => split_name(d.split).into(),
            "data.seed" => s(&d.seed),
            "model.hidden" => s(&t.hidden),
            "model.embed_dim" => s(&t.embed),
            "fusion.tau_attn" => s(&t.fusion.tau_attn),
            "fusion.epsilon" => s(&t.fusion.epsilon),
            "vote.levels" => s(&t.vote.levels),
            "vote.eta" => s(&t.vote.eta),
            "vote.pair_mode" => pair_mode_name(t.vote.pair_mode).into(),
            "loss.tau_h" => s(&t.temperatures.tau_h),
            "loss.tau_h_i" => s(&t.temperatures.tau_h_i),
            "loss.tau_cl" => s(&t.temperatures.tau_cl),
            "loss.tau_tl" => s(&t.temperatures.tau_tl),
            "loss.tau_sl" => s(&t.temperatures.tau_sl),
            "loss.lambda_sup" => s(&t.weights.lambda_sup),
            "loss.lambda_unsup" => s(&t.weights.lambda_unsup),
            "loss.lambda_s" => s(&t.weights.lambda_s),
            "loss.proto_mode" => proto_mode_name(t.proto_mode).into(),
            "loss.kl_order" => kl_order_name(t.kl_order).into(),
            "loss.use_proto" => s(&t.ablation.proto),
            "loss.use_distill" => s(&t.ablation.distill),
            "loss.use_hcl" => s(&t.ablation.hcl),
            "loss.use_cls_u" => s(&t.ablation.cls_u),
            "memory.fraction" => s(&t.memory_fraction),
            "train.lr" => s(&t.lr),
            "train.lr_schedule" => s(&t.lr_schedule),
            "train.momentum" => s(&t.momentum),
            "train.weight_decay" => s(&t.weight_decay),
            "train.batch_size" => s(&t.batch_size),
            "train.epochs_stage1" => s(&t.epochs_stage1),
            "train.epochs_stage2" => s(&t.epochs_stage2),
            "train.aug_sigma" => s(&t.aug_sigma),
            "train.aug_drop" => s(&t.aug_drop),
            "train.seed" => s(&t.seed),
            "eval.space" => s(&t.eval_space),
            "eval.k" => s(&self.eval_k),
            "eval.k_grid" => s(&self.k_grid),
            _ => return None,
        })
    }

    /// Sets one key from its textual value. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason,
        };
        let d = &mut self.data;
        let t = &mut self.train;
        macro_rules! num {
            ($field:expr) => {
                $field = parse(value).map_err(bad)?
            };
        }
        match key {
            "data.dim" => num!(d.dim),
            "data.classes_spatial" => num!(d.n_spatial_protos),
            "data.temporal_per_spatial" => num!(d.temporal_per_spatial),
            "data.samples_per_class" => num!(d.samples_per_class),
            "data.noise_sigma" => num!(d.noise_sigma),
            "data.labeled_fraction" => num!(d.labeled_fraction),
            "data.split" => {
                d.split = pick(
                    value,
                    &[("even_odd", ClassSplit::EvenOdd), ("first_half", ClassSplit::FirstHalf)],
                )
                .map_err(bad)?
            }
            "data.seed" => num!(d.seed),
            "model.hidden" => num!(t.hidden),
            "model.embed_dim" => num!(t.embed),
            "fusion.tau_attn" => num!(t.fusion.tau_attn),
            "fusion.epsilon" => num!(t.fusion.epsilon),
            "vote.levels" => num!(t.vote.levels),
            "vote.eta" => num!(t.vote.eta),
            "vote.pair_mode" => {
                t.vote.pair_mode = pick(
                    value,
                    &[
                        ("same_class", PairLabelMode::SameClass),
                        ("both_labeled", PairLabelMode::BothLabeled),
                    ],
                )
                .map_err(bad)?
            }
            "loss.tau_h" => num!(t.temperatures.tau_h),
            "loss.tau_h_i" => num!(t.temperatures.tau_h_i),
            "loss.tau_cl" => num!(t.temperatures.tau_cl),
            "loss.tau_tl" => num!(t.temperatures.tau_tl),
            "loss.tau_sl" => num!(t.temperatures.tau_sl),
            "loss.lambda_sup" => num!(t.weights.lambda_sup),
            "loss.lambda_unsup" => num!(t.weights.lambda_unsup),
            "loss.lambda_s" => num!(t.weights.lambda_s),
            "loss.proto_mode" => {
                t.proto_mode = pick(
                    value,
                    &[("standard", ProtoMode::Standard), ("literal", ProtoMode::Literal)],
                )
                .map_err(bad)?
            }
            "loss.kl_order" => {
                t.kl_order = pick(
                    value,
                    &[
                        ("teacher_first", KlOrder::TeacherFirst),
                        ("student_first", KlOrder::StudentFirst),
                    ],
                )
                .map_err(bad)?
            }
            "loss.use_proto" => num!(t.ablation.proto),
            "loss.use_distill" => num!(t.ablation.distill),
            "loss.use_hcl" => num!(t.ablation.hcl),
            "loss.use_cls_u" => num!(t.ablation.cls_u),
            "memory.fraction" => num!(t.memory_fraction),
            "train.lr" => num!(t.lr),
            "train.lr_schedule" => num!(t.lr_schedule),
            "train.momentum" => num!(t.momentum),
            "train.weight_decay" => num!(t.weight_decay),
            "train.batch_size" => num!(t.batch_size),
            "train.epochs_stage1" => num!(t.epochs_stage1),
            "train.epochs_stage2" => num!(t.epochs_stage2),
            "train.aug_sigma" => num!(t.aug_sigma),
            "train.aug_drop" => num!(t.aug_drop),
            "train.seed" => num!(t.seed),
            "eval.space" => num!(t.eval_space),
            "eval.k" => num!(self.eval_k),
            "eval.k_grid" => num!(self.k_grid),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses overrides on top of the defaults and validates the result.
    /// Unless `loss.lambda_unsup` is given, it follows `1 - loss.lambda_sup`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.trim().into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.trim().into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            if !cfg.set(key, value)? {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
        }
        if seen.contains("loss.lambda_sup") && !seen.contains("loss.lambda_unsup") {
            cfg.train.weights.lambda_unsup = 1.0 - cfg.train.weights.lambda_sup;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.vote.levels < 3 {
            return Err(ConfigError::Invalid(format!(
                "vote.levels must be at least 3, got {}",
                self.train.vote.levels
            )));
        }
        if let EvalK::Fixed(k) = self.eval_k {
            if k < 2 {
                return Err(ConfigError::Invalid(format!("eval.k must be at least 2, got {k}")));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            space: self.train.eval_space,
            seed: self.train.seed,
            fusion: self.train.fusion,
            ..EvalConfig::default()
        }
    }

    pub fn eval_space(&self) -> EvalSpace {
        self.train.eval_space
    }
}

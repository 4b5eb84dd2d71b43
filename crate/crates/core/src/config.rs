//! Plain-text run configuration.
//!
//! One `key = value` per line, keys namespaced by a dotted section
//! (`align.tau`, `policy.sigma`, `data.n_labeled`). `#` starts a comment.
//! Unknown keys, malformed values and keys without a value are rejected
//! with the offending line number. Keys not mentioned keep their defaults;
//! [`Config::to_text`] writes every key back out in a fixed order.

use sha2::{Digest, Sha256};

use crate::align::{AlignConfig, Objective};
use crate::encoders::PretrainConfig;
use crate::error::{Error, Result};
use crate::optim::Schedule;
use crate::policy::{PolicyConfig, TrainMode};
use crate::sim::{DataConfig, EVAL_HORIZON};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoStartMode {
    /// `(g, g)` through the transition encoder.
    Duplicate,
    /// `g` through the single-image encoder.
    Single,
}

impl NoStartMode {
    pub fn name(self) -> &'static str {
        match self {
            NoStartMode::Duplicate => "duplicate",
            NoStartMode::Single => "single",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSection {
    pub n_scenes: usize,
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    pub lr: f64,
    pub warmup: u64,
    pub decay: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignSection {
    pub tau: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: u64,
    pub decay: u64,
    pub pretrained_lr: f64,
    pub objective: Objective,
    pub max_shift: usize,
    /// Name prefixes trained at `pretrained_lr` when starting from
    /// pretrained encoders.
    pub pretrained: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySection {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch: usize,
    pub sigma: f64,
    pub lr: f64,
    pub warmup: u64,
    pub decay: u64,
    pub encoder_lr: f64,
    pub task_loss_weight: f64,
    pub explicit_weights: bool,
    pub trunk_lr_scale: f64,
    pub max_shift: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub retrieval_batch: usize,
    pub trials: usize,
    pub horizon: usize,
    pub in_distribution_tasks: usize,
    pub in_distribution_trials: usize,
    pub no_start_mode: NoStartMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSection {
    pub variants: Vec<String>,
    pub sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Policy steps for variants that train encoders with the policy;
    /// 0 means `policy.steps`.
    pub joint_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub align: AlignSection,
    pub policy: PolicySection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for Config {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let a = AlignConfig::default();
        let pol = PolicyConfig::default();
        Config {
            data: DataConfig::default(),
            pretrain: PretrainSection {
                n_scenes: 4000,
                steps: p.steps,
                batch: p.batch,
                tau: p.tau,
                lr: p.schedule.peak,
                warmup: p.schedule.warmup,
                decay: p.schedule.decay,
            },
            align: AlignSection {
                tau: a.tau,
                batch: a.batch,
                steps: a.steps,
                lr: a.schedule.peak,
                warmup: a.schedule.warmup,
                decay: a.schedule.decay,
                pretrained_lr: a.pretrained_peak,
                objective: a.objective,
                max_shift: a.max_shift,
                pretrained: vec!["text.".into(), "transition.".into()],
            },
            policy: PolicySection {
                mode: pol.mode,
                steps: pol.steps,
                batch: pol.batch,
                sigma: pol.sigma,
                lr: pol.schedule.peak,
                warmup: pol.schedule.warmup,
                decay: pol.schedule.decay,
                encoder_lr: pol.encoder_peak,
                task_loss_weight: pol.task_loss_weight,
                explicit_weights: pol.explicit_weights,
                trunk_lr_scale: pol.trunk_lr_scale,
                max_shift: pol.max_shift,
            },
            eval: EvalSection {
                retrieval_batch: 64,
                trials: 10,
                horizon: EVAL_HORIZON,
                in_distribution_tasks: 20,
                in_distribution_trials: 5,
                no_start_mode: NoStartMode::Duplicate,
            },
            ablation: AblationSection {
                variants: crate::eval::ablation::Variant::ALL
                    .iter()
                    .map(|v| v.name().to_string())
                    .collect(),
                sweep: vec![50, 150, 300, 500],
                seeds: vec![0, 1, 2],
                joint_steps: 0,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v, "a real number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite real, got `{v}`"))
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, what))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::InfoNce => "infonce",
        Objective::CosinePositive => "cosine",
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("missing value for `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        const INT: &str = "a non-negative integer";
        match key {
            "data.n_labeled" => self.data.n_labeled = parse_num(v, INT)?,
            "data.n_unlabeled" => self.data.n_unlabeled = parse_num(v, INT)?,
            "data.ratio_mode" => self.data.ratio_mode = parse_bool(v)?,
            "data.per_scene" => self.data.per_scene = parse_num(v, INT)?,
            "data.n_eval" => self.data.n_eval = parse_num(v, INT)?,
            "data.action_noise" => self.data.action_noise = parse_real(v)?,
            "pretrain.n_scenes" => self.pretrain.n_scenes = parse_num(v, INT)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(v, INT)?,
            "pretrain.batch" => self.pretrain.batch = parse_num(v, INT)?,
            "pretrain.tau" => self.pretrain.tau = parse_real(v)?,
            "pretrain.lr" => self.pretrain.lr = parse_real(v)?,
            "pretrain.warmup" => self.pretrain.warmup = parse_num(v, INT)?,
            "pretrain.decay" => self.pretrain.decay = parse_num(v, INT)?,
            "align.tau" => self.align.tau = parse_real(v)?,
            "align.batch" => self.align.batch = parse_num(v, INT)?,
            "align.steps" => self.align.steps = parse_num(v, INT)?,
            "align.lr" => self.align.lr = parse_real(v)?,
            "align.warmup" => self.align.warmup = parse_num(v, INT)?,
            "align.decay" => self.align.decay = parse_num(v, INT)?,
            "align.pretrained_lr" => self.align.pretrained_lr = parse_real(v)?,
            "align.objective" => {
                self.align.objective = match v {
                    "infonce" => Objective::InfoNce,
                    "cosine" => Objective::CosinePositive,
                    _ => return Err(format!("expected infonce or cosine, got `{v}`")),
                }
            }
            "align.max_shift" => self.align.max_shift = parse_num(v, INT)?,
            "align.pretrained" => {
                self.align.pretrained = if v == "none" { "" } else { v }
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "policy.mode" => {
                self.policy.mode = TrainMode::from_name(v)
                    .ok_or_else(|| format!("expected frozen or joint, got `{v}`"))?
            }
            "policy.steps" => self.policy.steps = parse_num(v, INT)?,
            "policy.batch" => self.policy.batch = parse_num(v, INT)?,
            "policy.sigma" => self.policy.sigma = parse_real(v)?,
            "policy.lr" => self.policy.lr = parse_real(v)?,
            "policy.warmup" => self.policy.warmup = parse_num(v, INT)?,
            "policy.decay" => self.policy.decay = parse_num(v, INT)?,
            "policy.encoder_lr" => self.policy.encoder_lr = parse_real(v)?,
            "policy.task_loss_weight" => self.policy.task_loss_weight = parse_real(v)?,
            "policy.explicit_weights" => self.policy.explicit_weights = parse_bool(v)?,
            "policy.trunk_lr_scale" => self.policy.trunk_lr_scale = parse_real(v)?,
            "policy.max_shift" => self.policy.max_shift = parse_num(v, INT)?,
            "eval.retrieval_batch" => self.eval.retrieval_batch = parse_num(v, INT)?,
            "eval.trials" => self.eval.trials = parse_num(v, INT)?,
            "eval.horizon" => self.eval.horizon = parse_num(v, INT)?,
            "eval.in_distribution_tasks" => self.eval.in_distribution_tasks = parse_num(v, INT)?,
            "eval.in_distribution_trials" => self.eval.in_distribution_trials = parse_num(v, INT)?,
            "eval.no_start_mode" => {
                self.eval.no_start_mode = match v {
                    "duplicate" => NoStartMode::Duplicate,
                    "single" => NoStartMode::Single,
                    _ => return Err(format!("expected duplicate or single, got `{v}`")),
                }
            }
            "ablation.variants" => {
                let names: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if let Some(bad) = names
                    .iter()
                    .find(|n| crate::eval::ablation::Variant::from_name(n).is_none())
                {
                    return Err(format!("unknown variant `{bad}`"));
                }
                self.ablation.variants = names;
            }
            "ablation.sweep" => self.ablation.sweep = parse_list(v, "integers")?,
            "ablation.seeds" => self.ablation.seeds = parse_list(v, "integers")?,
            "ablation.joint_steps" => self.ablation.joint_steps = parse_num(v, INT)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.align.tau <= 0.0 || self.pretrain.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.policy.sigma <= 0.0 {
            return bad("policy.sigma must be positive");
        }
        if self.align.batch % 2 != 0 || self.align.batch < 2 {
            return bad("align.batch must be even and at least 2");
        }
        if self.align.warmup == 0 || self.policy.warmup == 0 || self.pretrain.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if self.align.decay == 0 || self.policy.decay == 0 || self.pretrain.decay == 0 {
            return bad("decay must be at least 1");
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let p = &self.pretrain;
        let a = &self.align;
        let pol = &self.policy;
        let e = &self.eval;
        let ab = &self.ablation;
        vec![
            ("data.n_labeled", d.n_labeled.to_string()),
            ("data.n_unlabeled", d.n_unlabeled.to_string()),
            ("data.ratio_mode", d.ratio_mode.to_string()),
            ("data.per_scene", d.per_scene.to_string()),
            ("data.n_eval", d.n_eval.to_string()),
            ("data.action_noise", format!("{:?}", d.action_noise)),
            ("pretrain.n_scenes", p.n_scenes.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch", p.batch.to_string()),
            ("pretrain.tau", format!("{:?}", p.tau)),
            ("pretrain.lr", format!("{:?}", p.lr)),
            ("pretrain.warmup", p.warmup.to_string()),
            ("pretrain.decay", p.decay.to_string()),
            ("align.tau", format!("{:?}", a.tau)),
            ("align.batch", a.batch.to_string()),
            ("align.steps", a.steps.to_string()),
            ("align.lr", format!("{:?}", a.lr)),
            ("align.warmup", a.warmup.to_string()),
            ("align.decay", a.decay.to_string()),
            ("align.pretrained_lr", format!("{:?}", a.pretrained_lr)),
            ("align.objective", objective_name(a.objective).to_string()),
            ("align.max_shift", a.max_shift.to_string()),
            (
                "align.pretrained",
                if a.pretrained.is_empty() { "none".into() } else { a.pretrained.join(",") },
            ),
            ("policy.mode", pol.mode.name().to_string()),
            ("policy.steps", pol.steps.to_string()),
            ("policy.batch", pol.batch.to_string()),
            ("policy.sigma", format!("{:?}", pol.sigma)),
            ("policy.lr", format!("{:?}", pol.lr)),
            ("policy.warmup", pol.warmup.to_string()),
            ("policy.decay", pol.decay.to_string()),
            ("policy.encoder_lr", format!("{:?}", pol.encoder_lr)),
            ("policy.task_loss_weight", format!("{:?}", pol.task_loss_weight)),
            ("policy.explicit_weights", pol.explicit_weights.to_string()),
            ("policy.trunk_lr_scale", format!("{:?}", pol.trunk_lr_scale)),
            ("policy.max_shift", pol.max_shift.to_string()),
            ("eval.retrieval_batch", e.retrieval_batch.to_string()),
            ("eval.trials", e.trials.to_string()),
            ("eval.horizon", e.horizon.to_string()),
            ("eval.in_distribution_tasks", e.in_distribution_tasks.to_string()),
            ("eval.in_distribution_trials", e.in_distribution_trials.to_string()),
            ("eval.no_start_mode", e.no_start_mode.name().to_string()),
            ("ablation.variants", ab.variants.join(",")),
            ("ablation.sweep", join(&ab.sweep)),
            ("ablation.seeds", join(&ab.seeds)),
            ("ablation.joint_steps", ab.joint_steps.to_string()),
        ]
    }

    /// The resolved configuration; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch: p.batch,
            tau: p.tau,
            schedule: Schedule {
                peak: p.lr,
                warmup: p.warmup,
                decay: p.decay,
            },
        }
    }

    /// Alignment settings for encoders that start from pretraining.
    pub fn align_config(&self) -> AlignConfig {
        let a = &self.align;
        AlignConfig {
            tau: a.tau,
            batch: a.batch,
            steps: a.steps,
            schedule: Schedule {
                peak: a.lr,
                warmup: a.warmup,
                decay: a.decay,
            },
            pretrained_peak: a.pretrained_lr,
            pretrained: a.pretrained.clone(),
            objective: a.objective,
            goal_only: false,
            max_shift: a.max_shift,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            mode: p.mode,
            steps: p.steps,
            batch: p.batch,
            sigma: p.sigma,
            schedule: Schedule {
                peak: p.lr,
                warmup: p.warmup,
                decay: p.decay,
            },
            encoder_peak: p.encoder_lr,
            task_loss_weight: p.task_loss_weight,
            explicit_weights: p.explicit_weights,
            trunk_lr_scale: p.trunk_lr_scale,
            max_shift: p.max_shift,
            align: self.align_config(),
            ..PolicyConfig::default()
        }
    }
}

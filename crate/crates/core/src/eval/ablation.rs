//! The ablation matrix: variant recipes, shared per-seed inputs, and the
//! runner that trains and scores every enabled variant.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    embed_eval_set, in_distribution_tasks, retrieval_from_embeddings, rollout_eval,
    PolicyController,
};
use crate::align::{train_align, AlignData, AlignLog, Objective};
use crate::config::{Config, NoStartMode};
use crate::encoders::{embed_images, goal_tower, init_encoders, pretrain_clip_style, surgery};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::policy::{train_policy, PolicyData, PolicyLog, TrainMode};
use crate::rng::SeedRng;
use crate::sim::{generate_caption_scenes, generate_datasets, Dataset, Datasets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    GrifFrozen,
    GrifJoint,
    GrifLabeledOnly,
    NoAlign,
    NoStart,
    NoPretrain,
    Lcbc,
    LlfpStyle,
    /// Positive-pair cosine alignment without negatives.
    BcZ,
}

/// Switches that define a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Recipe {
    /// Start from caption-pretrained encoders rather than random ones.
    pub pretrained: bool,
    /// Objective of the separate alignment stage; `None` skips the stage.
    pub align: Option<Objective>,
    /// Transition encoder sees `(s0, g)`; otherwise `(g, g)`.
    pub start_input: bool,
    pub unlabeled: bool,
    pub mode: TrainMode,
    /// Joint training also minimizes the alignment loss.
    pub joint_align: bool,
    /// Train on goal-conditioned terms; off means language only.
    pub goal_terms: bool,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::GrifFrozen,
        Variant::GrifJoint,
        Variant::GrifLabeledOnly,
        Variant::NoAlign,
        Variant::NoStart,
        Variant::NoPretrain,
        Variant::Lcbc,
        Variant::LlfpStyle,
        Variant::BcZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GrifFrozen => "GRIF-frozen",
            Variant::GrifJoint => "GRIF-joint",
            Variant::GrifLabeledOnly => "GRIF-labeled-only",
            Variant::NoAlign => "No-Align",
            Variant::NoStart => "No-Start",
            Variant::NoPretrain => "No-Pretrain",
            Variant::Lcbc => "LCBC",
            Variant::LlfpStyle => "LLfP-style",
            Variant::BcZ => "BC-Z",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn recipe(self) -> Recipe {
        let grif = Recipe {
            pretrained: true,
            align: Some(Objective::InfoNce),
            start_input: true,
            unlabeled: true,
            mode: TrainMode::Frozen,
            joint_align: false,
            goal_terms: true,
        };
        match self {
            Variant::GrifFrozen => grif,
            Variant::GrifJoint => Recipe {
                mode: TrainMode::Joint,
                joint_align: true,
                ..grif
            },
            Variant::GrifLabeledOnly => Recipe {
                unlabeled: false,
                ..grif
            },
            Variant::NoAlign => Recipe {
                align: None,
                mode: TrainMode::Joint,
                ..grif
            },
            Variant::NoStart => Recipe {
                start_input: false,
                ..grif
            },
            Variant::NoPretrain => Recipe {
                pretrained: false,
                ..grif
            },
            Variant::Lcbc => Recipe {
                align: None,
                unlabeled: false,
                goal_terms: false,
                ..grif
            },
            Variant::LlfpStyle => Recipe {
                pretrained: false,
                align: None,
                mode: TrainMode::Joint,
                ..grif
            },
            Variant::BcZ => Recipe {
                align: Some(Objective::CosinePositive),
                ..grif
            },
        }
    }
}

/// Inputs shared by every variant at one seed.
pub struct SeedInputs {
    pub seed: u64,
    pub data: Datasets,
    /// Caption-pretrained encoders after surgery.
    pub pretrained: ParamStore,
    /// Randomly initialized encoders after surgery.
    pub scratch: ParamStore,
    pub pretrain_log: Vec<AlignLog>,
}

pub fn prepare_seed(cfg: &Config, seed: u64) -> Result<SeedInputs> {
    let data = generate_datasets(&cfg.data, seed)?;
    let scenes = generate_caption_scenes(cfg.pretrain.n_scenes, seed)?;
    let (pre, pretrain_log) = pretrain_clip_style(&scenes, &cfg.pretrain_config(), seed)?;
    let scratch = init_encoders(&mut SeedRng::new(seed).named("scratch-encoders"))?;
    Ok(SeedInputs {
        seed,
        data,
        pretrained: surgery(&pre)?,
        scratch: surgery(&scratch)?,
        pretrain_log,
    })
}

/// Identifies one alignment run; variants with equal keys share it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlignKey {
    pub pretrained: bool,
    pub objective: Objective,
    pub start_input: bool,
    /// Labeled trajectories used, from the front of D_A.
    pub n_labeled: usize,
}

pub fn align_encoders(
    cfg: &Config,
    inputs: &SeedInputs,
    key: AlignKey,
) -> Result<(ParamStore, Vec<AlignLog>)> {
    let data = AlignData::from_dataset(&inputs.data.labeled)?.prefix(key.n_labeled);
    let mut acfg = cfg.align_config();
    acfg.objective = key.objective;
    acfg.goal_only = !key.start_input;
    // Small annotation counts train on every trajectory at once.
    acfg.batch = acfg.batch.min(data.len() / 2 * 2);
    let init = if key.pretrained {
        &inputs.pretrained
    } else {
        acfg.pretrained.clear();
        &inputs.scratch
    };
    train_align(&data, &acfg, init, inputs.seed)
}

/// Top-1 and top-5 retrieval on the evaluation set.
pub fn retrieval_scores(
    encoders: &ParamStore,
    eval: &Dataset,
    batch: usize,
    start_input: bool,
    no_start_mode: NoStartMode,
) -> Result<(f64, f64)> {
    let (lang, mut z) = embed_eval_set(encoders, eval, !start_input)?;
    if !start_input && no_start_mode == NoStartMode::Single {
        let tower = goal_tower(encoders)?;
        z.clear();
        for chunk in eval.trajectories.chunks(256) {
            let g: Vec<Vec<f32>> = chunk.iter().map(|t| t.last().render_vec()).collect();
            let gr: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
            z.extend(embed_images(&tower, &gr)?);
        }
    }
    let top1 = retrieval_from_embeddings(&lang, &z, 1, batch)?.mean;
    let top5 = retrieval_from_embeddings(&lang, &z, 5, batch)?.mean;
    Ok((top1, top5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub top1: f64,
    pub top5: f64,
    pub heldout_successes: usize,
    pub heldout_trials: usize,
    pub indist_successes: usize,
    pub indist_trials: usize,
}

impl Scores {
    pub fn heldout_rate(&self) -> f64 {
        self.heldout_successes as f64 / self.heldout_trials.max(1) as f64
    }

    pub fn indist_rate(&self) -> f64 {
        self.indist_successes as f64 / self.indist_trials.max(1) as f64
    }
}

/// One row of the ablation table. A failed variant keeps its error text.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: std::result::Result<Scores, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub align: Vec<AlignLog>,
    pub policy: Vec<PolicyLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub seed: u64,
    pub n_labeled: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub config_hash: String,
    pub retrieval_batch: usize,
    pub rows: Vec<Row>,
    pub curves: BTreeMap<(Variant, u64), Curves>,
    pub sweep: Vec<SweepPoint>,
}

impl AblationReport {
    /// Pooled held-out `(successes, trials)` of a variant over its
    /// successful rows.
    pub fn pooled_heldout(&self, v: Variant) -> (usize, usize) {
        self.rows
            .iter()
            .filter(|r| r.variant == v)
            .filter_map(|r| r.outcome.as_ref().ok())
            .fold((0, 0), |(s, n), x| (s + x.heldout_successes, n + x.heldout_trials))
    }
}

/// Everything one variant produced.
pub struct VariantRun {
    pub scores: Scores,
    pub curves: Curves,
    /// Final parameters: encoders plus `policy.*`.
    pub params: ParamStore,
}

/// Train and score one variant. `aligned` supplies alignment results
/// already computed for this seed.
pub fn run_variant(
    cfg: &Config,
    inputs: &SeedInputs,
    variant: Variant,
    aligned: &BTreeMap<AlignKey, (ParamStore, Vec<AlignLog>)>,
) -> Result<VariantRun> {
    let r = variant.recipe();
    let (encoders, align_log) = match r.align {
        Some(objective) => {
            let key = variant_align_key(cfg, variant, objective);
            match aligned.get(&key) {
                Some((ps, log)) => (ps.clone(), log.clone()),
                None => align_encoders(cfg, inputs, key)?,
            }
        }
        None if r.pretrained => (inputs.pretrained.clone(), Vec::new()),
        None => (inputs.scratch.clone(), Vec::new()),
    };
    let mut pc = cfg.policy_config();
    pc.mode = r.mode;
    pc.use_unlabeled = r.unlabeled;
    pc.goal_terms = r.goal_terms;
    pc.goal_only = !r.start_input;
    pc.task_loss_weight = if r.joint_align { cfg.policy.task_loss_weight } else { 0.0 };
    pc.align.objective = r.align.unwrap_or(Objective::InfoNce);
    if !r.pretrained {
        pc.align.pretrained.clear();
        // The slow encoder rate is for pretrained weights only.
        pc.encoder_peak = pc.schedule.peak;
    }
    // Only the joint alignment loss makes steps expensive enough to cap.
    if r.joint_align && cfg.ablation.joint_steps > 0 {
        let scale = cfg.ablation.joint_steps as f64 / cfg.policy.steps.max(1) as f64;
        pc.steps = cfg.ablation.joint_steps;
        pc.schedule.decay = ((pc.schedule.decay as f64 * scale).round() as u64).max(1);
    }
    let pd = PolicyData::new(&inputs.data.labeled, &inputs.data.unlabeled)?;
    let (params, policy_log) = train_policy(&pd, &encoders, &pc, inputs.seed)?;
    let (top1, top5) = retrieval_scores(
        &params,
        &inputs.data.eval,
        cfg.eval.retrieval_batch,
        r.start_input,
        cfg.eval.no_start_mode,
    )?;
    let mut ctl = PolicyController::new(&params);
    let held = rollout_eval(
        &mut ctl,
        &cfg.data.held_out.tasks(),
        cfg.eval.trials,
        cfg.eval.horizon,
        inputs.seed,
    )?;
    let indist_tasks =
        in_distribution_tasks(&cfg.data.held_out, cfg.eval.in_distribution_tasks, inputs.seed);
    let indist = rollout_eval(
        &mut ctl,
        &indist_tasks,
        cfg.eval.in_distribution_trials,
        cfg.eval.horizon,
        inputs.seed,
    )?;
    Ok(VariantRun {
        scores: Scores {
            top1,
            top5,
            heldout_successes: held.successes,
            heldout_trials: held.trials,
            indist_successes: indist.successes,
            indist_trials: indist.trials,
        },
        curves: Curves {
            align: align_log,
            policy: policy_log,
        },
        params,
    })
}

fn variant_align_key(cfg: &Config, v: Variant, objective: Objective) -> AlignKey {
    let r = v.recipe();
    AlignKey {
        pretrained: r.pretrained,
        objective,
        start_input: r.start_input,
        n_labeled: cfg.data.n_labeled,
    }
}

/// Map `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

/// Retrieval after aligning on the first `n` labeled trajectories, for
/// each `n` in `counts`.
pub fn annotation_sweep(
    cfg: &Config,
    inputs: &SeedInputs,
    counts: &[usize],
    threads: usize,
    aligned: &BTreeMap<AlignKey, (ParamStore, Vec<AlignLog>)>,
) -> Result<Vec<SweepPoint>> {
    let results = parallel_map(counts, threads, |&n| -> Result<SweepPoint> {
        if n > inputs.data.labeled.len() {
            return Err(Error::InvalidArgument(format!(
                "sweep count {n} exceeds {} labeled trajectories",
                inputs.data.labeled.len()
            )));
        }
        let key = AlignKey {
            pretrained: true,
            objective: Objective::InfoNce,
            start_input: true,
            n_labeled: n,
        };
        let enc = match aligned.get(&key) {
            Some((ps, _)) => ps.clone(),
            None => align_encoders(cfg, inputs, key)?.0,
        };
        let (top1, top5) = retrieval_scores(
            &enc,
            &inputs.data.eval,
            cfg.eval.retrieval_batch,
            true,
            cfg.eval.no_start_mode,
        )?;
        Ok(SweepPoint {
            seed: inputs.seed,
            n_labeled: n,
            top1,
            top5,
        })
    });
    results.into_iter().collect()
}

/// Run every enabled variant at every configured seed, plus the
/// annotation sweep. A failing variant becomes a failed row; failures in
/// the shared per-seed inputs abort.
pub fn run_ablation(
    cfg: &Config,
    threads: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<AblationReport> {
    let variants: Vec<Variant> = cfg
        .ablation
        .variants
        .iter()
        .map(|n| {
            Variant::from_name(n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{n}`")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut curves = BTreeMap::new();
    let mut sweep = Vec::new();
    for &seed in &cfg.ablation.seeds {
        progress(&format!("seed {seed}: data and pretraining"));
        let inputs = prepare_seed(cfg, seed)?;
        let mut keys: Vec<AlignKey> = variants
            .iter()
            .filter_map(|&v| v.recipe().align.map(|o| variant_align_key(cfg, v, o)))
            .collect();
        keys.sort();
        keys.dedup();
        progress(&format!("seed {seed}: {} alignment runs", keys.len()));
        let done = parallel_map(&keys, threads, |&k| align_encoders(cfg, &inputs, k));
        let mut aligned = BTreeMap::new();
        for (k, r) in keys.iter().zip(done) {
            // A failed alignment resurfaces as the owning variant's error.
            if let Ok(x) = r {
                aligned.insert(*k, x);
            }
        }
        let runs = parallel_map(&variants, threads, |&v| {
            progress(&format!("seed {seed}: {}", v.name()));
            run_variant(cfg, &inputs, v, &aligned)
        });
        for (&v, run) in variants.iter().zip(runs) {
            match run {
                Ok(run) => {
                    rows.push(Row {
                        variant: v,
                        seed,
                        outcome: Ok(run.scores),
                    });
                    curves.insert((v, seed), run.curves);
                }
                Err(e) => rows.push(Row {
                    variant: v,
                    seed,
                    outcome: Err(e.to_string()),
                }),
            }
        }
        if !cfg.ablation.sweep.is_empty() {
            progress(&format!("seed {seed}: annotation sweep"));
            sweep.extend(annotation_sweep(cfg, &inputs, &cfg.ablation.sweep, threads, &aligned)?);
        }
    }
    Ok(AblationReport {
        config_hash: cfg.hash(),
        retrieval_batch: cfg.eval.retrieval_batch,
        rows,
        curves,
        sweep,
    })
}

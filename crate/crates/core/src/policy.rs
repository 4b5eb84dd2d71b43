//! FiLM-conditioned Gaussian policy and its behavioral-cloning trainer.

use crate::align::{batch_task_loss, AlignConfig, AlignData};
use crate::autodiff::{Graph, Var};
use crate::encoders::{embed_texts, encode_text, encode_transition, tokenize, D_Z};
use crate::error::{Error, Result};
use crate::optim::{Adam, Schedule};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::rng::SeedRng;
use crate::sim::{
    paraphrases, translate_render, Action, Dataset, Trajectory, CHANNELS, GRID_H, GRID_W, IMAGE_LEN,
    NUM_TYPES,
};
use crate::tensor::Tensor;

pub const HIDDEN: usize = 256;
pub const COND_HIDDEN: usize = 128;
pub const ACTION_DIM: usize = 3;

/// Initialize `policy.*`. FiLM scale heads start near 1 and shift heads
/// near 0 so the untrained policy is close to its unconditioned trunk.
pub fn init_policy(ps: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
    ps.insert("policy.l1.weight", coordinate_init(rng))?;
    ps.insert("policy.l1.bias", Tensor::zeros(vec![HIDDEN]))?;
    init_linear(ps, rng, "policy.l2", HIDDEN, HIDDEN, 1.0)?;
    init_linear(ps, rng, "policy.head", HIDDEN, ACTION_DIM, 0.1)?;
    init_linear(ps, rng, "policy.cond", D_Z, COND_HIDDEN, 1.0)?;
    for l in 1..=2 {
        init_linear(ps, rng, &format!("policy.film{l}_scale"), COND_HIDDEN, HIDDEN, 0.1)?;
        init_linear(ps, rng, &format!("policy.film{l}_shift"), COND_HIDDEN, HIDDEN, 0.1)?;
        ps.set(
            format!("policy.film{l}_scale.bias"),
            Tensor::full(vec![HIDDEN], 1.0),
        );
    }
    Ok(())
}

/// First-layer weights where each unit reads a projected position: unit
/// `j` sees object type `j mod 10` relative to the gripper, the gripper
/// itself, or the held flag. One-hot cells carry no notion of distance, so
/// a randomly initialized trunk only memorizes layouts it has seen.
fn coordinate_init(rng: &mut SeedRng) -> Tensor {
    let mut w = vec![0.0f32; IMAGE_LEN * HIDDEN];
    let cells = (GRID_W * GRID_H) as f32;
    for j in 0..HIDDEN {
        let theta = rng.uniform() * std::f64::consts::TAU;
        let (ux, uy) = (theta.cos(), theta.sin());
        let k = j % CHANNELS;
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        for y in 0..GRID_H {
            for x in 0..GRID_W {
                let proj = ((ux * (x as f64 - 5.5) + uy * (y as f64 - 5.5)) / 6.0) as f32;
                let base = (y * GRID_W + x) * CHANNELS;
                if k < NUM_TYPES {
                    w[(base + k) * HIDDEN + j] = proj;
                    w[(base + NUM_TYPES) * HIDDEN + j] = -proj;
                } else if k == NUM_TYPES {
                    w[(base + k) * HIDDEN + j] = proj;
                } else {
                    w[(base + k) * HIDDEN + j] = sign / cells;
                }
            }
        }
    }
    Tensor::new(vec![IMAGE_LEN, HIDDEN], w).expect("l1 shape")
}

/// Action mean `[batch, 3]` for rendered states `[batch, 1440]` and task
/// embeddings `[batch, 32]`.
pub fn policy_forward(g: &mut Graph, p: &Bound, s_img: Var, z: Var) -> Result<Var> {
    let (ss, sz) = (g.shape(s_img).to_vec(), g.shape(z).to_vec());
    if ss.len() != 2 || ss[1] != IMAGE_LEN || sz.len() != 2 || sz[1] != D_Z || ss[0] != sz[0] {
        return Err(Error::shape("policy_forward", &ss, &sz));
    }
    let c = linear(g, p, "policy.cond", z)?;
    let c = g.relu(c)?;
    let mut h = s_img;
    for (l, layer) in ["policy.l1", "policy.l2"].into_iter().enumerate() {
        let pre = linear(g, p, layer, h)?;
        let act = g.relu(pre)?;
        let gamma = linear(g, p, &format!("policy.film{}_scale", l + 1), c)?;
        let beta = linear(g, p, &format!("policy.film{}_shift", l + 1), c)?;
        h = g.scale_shift(act, gamma, beta)?;
    }
    linear(g, p, "policy.head", h)
}

/// Mean over rows of `||a - mu||^2 / (2 sigma^2) + 3 ln(sigma sqrt(2 pi))`.
pub fn gaussian_nll(g: &mut Graph, mu: Var, a: Var, sigma: f64) -> Result<Var> {
    let rows = g.shape(mu)[0];
    weighted_nll(g, mu, a, sigma, &vec![1.0 / rows as f64; rows])
}

/// `sum_i w_i * nll_i` over rows.
fn weighted_nll(g: &mut Graph, mu: Var, a: Var, sigma: f64, w: &[f64]) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let d = g.sub(mu, a)?;
    let uniform = w.iter().all(|&x| x == w[0]);
    let d = if uniform {
        d
    } else {
        let cols = g.shape(d)[1];
        let sw: Vec<f32> = w
            .iter()
            .flat_map(|&x| std::iter::repeat(x.sqrt() as f32).take(cols))
            .collect();
        let sw = g.constant(Tensor::new(g.shape(d).to_vec(), sw)?)?;
        g.mul(d, sw)?
    };
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    let scale = if uniform { w[0] } else { 1.0 } / (2.0 * sigma * sigma);
    let quad = g.scale(s, scale as f32)?;
    let log_norm = ACTION_DIM as f64 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let c = g.constant(Tensor::scalar((log_norm * w.iter().sum::<f64>()) as f32))?;
    g.add(quad, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

/// Outcome of goal selection for transition `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GoalDraw {
    pub goal_index: usize,
    /// Whether the final state was chosen on purpose (always for labeled
    /// trajectories, half the time for unlabeled ones).
    pub final_branch: bool,
}

/// Goal index for transition `t` of a trajectory with `horizon` actions.
///
/// Labeled: always the final state. Unlabeled: the final state with
/// probability 0.5, otherwise a uniform intermediate state after `t`
/// (the final state when no intermediate state exists).
pub fn sample_goal(horizon: usize, t: usize, origin: Origin, rng: &mut SeedRng) -> GoalDraw {
    debug_assert!(t < horizon);
    match origin {
        Origin::Labeled => GoalDraw {
            goal_index: horizon,
            final_branch: true,
        },
        Origin::Unlabeled => {
            if rng.bernoulli(0.5) {
                GoalDraw {
                    goal_index: horizon,
                    final_branch: true,
                }
            } else {
                let lo = t + 1;
                let goal_index = if lo < horizon {
                    lo + rng.below(horizon - lo)
                } else {
                    horizon
                };
                GoalDraw {
                    goal_index,
                    final_branch: false,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Only `policy.*` learns.
    Frozen,
    /// `policy.*` and `transition.*` learn; `text.*` stays fixed.
    Joint,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Frozen => "frozen",
            TrainMode::Joint => "joint",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(TrainMode::Frozen),
            "joint" => Some(TrainMode::Joint),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch: usize,
    pub sigma: f64,
    pub schedule: Schedule,
    /// Peak rate for encoder parameters when they are trained.
    pub encoder_peak: f64,
    /// Draw from the unlabeled set as well as the labeled one.
    pub use_unlabeled: bool,
    /// Include the language-conditioned term for labeled items.
    pub language_terms: bool,
    /// Include the goal-conditioned term.
    pub goal_terms: bool,
    /// Weight of the alignment loss added in joint mode (0 disables it).
    pub task_loss_weight: f64,
    /// Sample labeled and unlabeled items half and half and reweight by
    /// dataset size instead of pooling.
    pub explicit_weights: bool,
    /// Condition on `(g, g)` instead of `(s0, g)`.
    pub goal_only: bool,
    /// Multiplier on the policy rate for `policy.l1`, which starts from
    /// coordinate features.
    pub trunk_lr_scale: f64,
    /// Largest random shift, in cells, applied to the state image `s_t`.
    /// Motion is relative, so the recorded action stays valid. 0 disables it.
    pub max_shift: usize,
    pub align: AlignConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            mode: TrainMode::Frozen,
            steps: 3000,
            batch: 64,
            sigma: 0.1,
            schedule: Schedule {
                peak: 3e-4,
                warmup: 2000,
                decay: 2_000_000,
            },
            encoder_peak: 3e-5,
            use_unlabeled: true,
            language_terms: true,
            goal_terms: true,
            task_loss_weight: 1.0,
            explicit_weights: false,
            goal_only: false,
            trunk_lr_scale: 0.01,
            max_shift: 0,
            align: AlignConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub labeled_fraction: f32,
}

/// One sampled training transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub origin: Origin,
    pub traj: usize,
    pub t: usize,
    pub goal: GoalDraw,
}

/// Draws pooled (or explicitly split) batches of transitions.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    horizons_a: Vec<usize>,
    horizons_b: Vec<usize>,
    explicit: bool,
    rng: SeedRng,
}

impl BatchSampler {
    pub fn new(labeled: &[usize], unlabeled: &[usize], explicit: bool, rng: SeedRng) -> Result<Self> {
        if labeled.is_empty() && unlabeled.is_empty() {
            return Err(Error::Dataset("no trajectories to sample".into()));
        }
        if labeled.iter().chain(unlabeled).any(|&h| h == 0) {
            return Err(Error::Dataset("trajectory without actions".into()));
        }
        Ok(BatchSampler {
            horizons_a: labeled.to_vec(),
            horizons_b: unlabeled.to_vec(),
            explicit: explicit && !labeled.is_empty() && !unlabeled.is_empty(),
            rng,
        })
    }

    fn item(&mut self, origin: Origin, traj: usize) -> BatchItem {
        let h = match origin {
            Origin::Labeled => self.horizons_a[traj],
            Origin::Unlabeled => self.horizons_b[traj],
        };
        let t = self.rng.below(h);
        let goal = sample_goal(h, t, origin, &mut self.rng);
        BatchItem {
            origin,
            traj,
            t,
            goal,
        }
    }

    pub fn sample(&mut self, batch: usize) -> Vec<BatchItem> {
        let (na, nb) = (self.horizons_a.len(), self.horizons_b.len());
        (0..batch)
            .map(|i| {
                let (origin, traj) = if self.explicit {
                    if i % 2 == 0 {
                        (Origin::Labeled, self.rng.below(na))
                    } else {
                        (Origin::Unlabeled, self.rng.below(nb))
                    }
                } else {
                    let j = self.rng.below(na + nb);
                    if j < na {
                        (Origin::Labeled, j)
                    } else {
                        (Origin::Unlabeled, j - na)
                    }
                };
                self.item(origin, traj)
            })
            .collect()
    }

    /// Per-term loss weights for items of each origin in a batch.
    fn weights(&self, items: &[BatchItem]) -> (f64, f64) {
        let b = items.len() as f64;
        if !self.explicit {
            return (1.0 / b, 1.0 / b);
        }
        let (na, nb) = (self.horizons_a.len() as f64, self.horizons_b.len() as f64);
        let ca = items.iter().filter(|i| i.origin == Origin::Labeled).count().max(1) as f64;
        let cb = (items.len() as f64 - ca).max(1.0);
        (na / (na + nb) / ca, nb / (na + nb) / cb)
    }
}

/// Training data for the policy.
#[derive(Clone, Debug)]
pub struct PolicyData<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: &'a Dataset,
    /// Tokenized instruction variants per labeled trajectory.
    variants: Vec<Vec<Vec<usize>>>,
    /// Variant strings, used to precompute frozen text embeddings.
    variant_text: Vec<Vec<String>>,
}

impl<'a> PolicyData<'a> {
    pub fn new(labeled: &'a Dataset, unlabeled: &'a Dataset) -> Result<Self> {
        let mut variants = Vec::with_capacity(labeled.len());
        let mut variant_text = Vec::with_capacity(labeled.len());
        for t in labeled.iter() {
            let instr = t.instruction.as_deref().ok_or_else(|| {
                Error::Dataset(format!("labeled trajectory {} has no instruction", t.id))
            })?;
            let texts: Vec<String> = std::iter::once(instr.to_string())
                .chain(paraphrases(instr))
                .collect();
            variants.push(texts.iter().map(|s| tokenize(s)).collect::<Result<_>>()?);
            variant_text.push(texts);
        }
        Ok(PolicyData {
            labeled,
            unlabeled,
            variants,
            variant_text,
        })
    }

    fn traj(&self, item: &BatchItem) -> &Trajectory {
        match item.origin {
            Origin::Labeled => &self.labeled.trajectories[item.traj],
            Origin::Unlabeled => &self.unlabeled.trajectories[item.traj],
        }
    }
}

/// Frozen-encoder cache: every embedding the policy can be conditioned on.
struct FrozenCache {
    text: Vec<Vec<Vec<f32>>>,
    /// `goals[origin][traj][j]` embeds `(s0, s_j)`; index 0 unused.
    goals_a: Vec<Vec<Vec<f32>>>,
    goals_b: Vec<Vec<Vec<f32>>>,
}

fn embed_goal_sets(
    ps: &ParamStore,
    d: &Dataset,
    goal_only: bool,
    all_states: bool,
) -> Result<Vec<Vec<Vec<f32>>>> {
    const CHUNK: usize = 256;
    let enc = ps.subset("transition.");
    let mut out: Vec<Vec<Vec<f32>>> = d
        .iter()
        .map(|t| vec![Vec::new(); t.states.len()])
        .collect();
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (i, t) in d.iter().enumerate() {
        let h = t.horizon();
        let js: Vec<usize> = if all_states { (1..=h).collect() } else { vec![h] };
        pending.extend(js.into_iter().map(|j| (i, j)));
    }
    for chunk in pending.chunks(CHUNK) {
        let s0: Vec<Vec<f32>> = chunk
            .iter()
            .map(|&(i, j)| {
                let t = &d.trajectories[i];
                if goal_only { t.states[j].render_vec() } else { t.initial().render_vec() }
            })
            .collect();
        let goal: Vec<Vec<f32>> = chunk
            .iter()
            .map(|&(i, j)| d.trajectories[i].states[j].render_vec())
            .collect();
        let s0r: Vec<&[f32]> = s0.iter().map(Vec::as_slice).collect();
        let gr: Vec<&[f32]> = goal.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let p = enc.bind(&mut g, |_| false)?;
        let z = encode_transition(&mut g, &p, &s0r, &gr)?;
        for (&(i, j), row) in chunk.iter().zip(g.value(z).chunks(D_Z)) {
            out[i][j] = row.to_vec();
        }
    }
    Ok(out)
}

impl FrozenCache {
    fn build(ps: &ParamStore, data: &PolicyData, cfg: &PolicyConfig) -> Result<Self> {
        let text = if cfg.language_terms {
            data.variant_text
                .iter()
                .map(|v| {
                    let refs: Vec<&str> = v.iter().map(String::as_str).collect();
                    embed_texts(ps, &refs)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (goals_a, goals_b) = if cfg.goal_terms {
            (
                embed_goal_sets(ps, data.labeled, cfg.goal_only, false)?,
                if cfg.use_unlabeled {
                    embed_goal_sets(ps, data.unlabeled, cfg.goal_only, true)?
                } else {
                    Vec::new()
                },
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(FrozenCache {
            text,
            goals_a,
            goals_b,
        })
    }
}

fn shifted_state(img: &[f32], max_shift: usize, rng: &mut SeedRng) -> Vec<f32> {
    if max_shift == 0 {
        return img.to_vec();
    }
    let span = 2 * max_shift + 1;
    for _ in 0..4 {
        let dx = rng.below(span) as i32 - max_shift as i32;
        let dy = rng.below(span) as i32 - max_shift as i32;
        if let Some(v) = translate_render(img, dx, dy) {
            return v;
        }
    }
    img.to_vec()
}

/// Behavioral-cloning loss for a batch. Returns the loss node.
///
/// Labeled items contribute a language-conditioned and a goal-conditioned
/// term, unlabeled items only the goal term; every term is weighted by its
/// origin's weight so pooled sampling averages over the batch size.
fn bc_loss_inner(
    g: &mut Graph,
    p: &Bound,
    data: &PolicyData,
    items: &[BatchItem],
    weights: (f64, f64),
    cfg: &PolicyConfig,
    cache: Option<&FrozenCache>,
    rng: &mut SeedRng,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty policy batch".into()));
    }
    // Rows: (item index, language?) pairs, language rows first.
    let mut lang_rows: Vec<usize> = Vec::new();
    let mut goal_rows: Vec<usize> = Vec::new();
    for (k, it) in items.iter().enumerate() {
        if cfg.language_terms && it.origin == Origin::Labeled {
            lang_rows.push(k);
        }
        if cfg.goal_terms {
            goal_rows.push(k);
        }
    }
    let mut zs: Vec<Var> = Vec::new();
    if !lang_rows.is_empty() {
        let choice: Vec<usize> = lang_rows
            .iter()
            .map(|&k| rng.below(data.variants[items[k].traj].len()))
            .collect();
        let z = match cache {
            Some(c) => {
                let mut flat = Vec::with_capacity(lang_rows.len() * D_Z);
                for (&k, &v) in lang_rows.iter().zip(&choice) {
                    flat.extend_from_slice(&c.text[items[k].traj][v]);
                }
                g.constant(Tensor::new(vec![lang_rows.len(), D_Z], flat)?)?
            }
            None => {
                let toks: Vec<Vec<usize>> = lang_rows
                    .iter()
                    .zip(&choice)
                    .map(|(&k, &v)| data.variants[items[k].traj][v].clone())
                    .collect();
                encode_text(g, p, &toks)?
            }
        };
        zs.push(z);
    }
    if !goal_rows.is_empty() {
        let z = match cache {
            Some(c) => {
                let mut flat = Vec::with_capacity(goal_rows.len() * D_Z);
                for &k in &goal_rows {
                    let it = &items[k];
                    let set = match it.origin {
                        Origin::Labeled => &c.goals_a,
                        Origin::Unlabeled => &c.goals_b,
                    };
                    flat.extend_from_slice(&set[it.traj][it.goal.goal_index]);
                }
                g.constant(Tensor::new(vec![goal_rows.len(), D_Z], flat)?)?
            }
            None => {
                let goal: Vec<Vec<f32>> = goal_rows
                    .iter()
                    .map(|&k| data.traj(&items[k]).states[items[k].goal.goal_index].render_vec())
                    .collect();
                let s0: Vec<Vec<f32>> = if cfg.goal_only {
                    goal.clone()
                } else {
                    goal_rows
                        .iter()
                        .map(|&k| data.traj(&items[k]).initial().render_vec())
                        .collect()
                };
                let s0r: Vec<&[f32]> = s0.iter().map(Vec::as_slice).collect();
                let gr: Vec<&[f32]> = goal.iter().map(Vec::as_slice).collect();
                encode_transition(g, p, &s0r, &gr)?
            }
        };
        zs.push(z);
    }
    if zs.is_empty() {
        return Err(Error::InvalidArgument(
            "batch produced no loss terms".into(),
        ));
    }
    let z = if zs.len() == 1 { zs[0] } else { g.concat(&zs, 0)? };
    let rows: Vec<usize> = lang_rows.iter().chain(&goal_rows).copied().collect();
    let mut states = Vec::with_capacity(rows.len() * IMAGE_LEN);
    let mut actions = Vec::with_capacity(rows.len() * 3);
    let mut w = Vec::with_capacity(rows.len());
    for &k in &rows {
        let it = &items[k];
        let tr = data.traj(it);
        states.extend_from_slice(&shifted_state(&tr.states[it.t].render_vec(), cfg.max_shift, rng));
        actions.extend_from_slice(&tr.actions[it.t].to_array());
        w.push(match it.origin {
            Origin::Labeled => weights.0,
            Origin::Unlabeled => weights.1,
        });
    }
    let n = rows.len();
    let s = g.constant(Tensor::new(vec![n, IMAGE_LEN], states)?)?;
    let a = g.constant(Tensor::new(vec![n, 3], actions)?)?;
    let mu = policy_forward(g, p, s, z)?;
    weighted_nll(g, mu, a, cfg.sigma, &w)
}

/// Pooled-batch behavioral-cloning loss with encoders evaluated in the
/// graph. Exposed for tests and tools; training uses the same path.
pub fn bc_loss(
    g: &mut Graph,
    p: &Bound,
    data: &PolicyData,
    items: &[BatchItem],
    cfg: &PolicyConfig,
    rng: &mut SeedRng,
) -> Result<Var> {
    let b = items.len().max(1) as f64;
    bc_loss_inner(g, p, data, items, (1.0 / b, 1.0 / b), cfg, None, rng)
}

/// Train `policy.*` (and `transition.*` in joint mode) on top of `encoders`.
/// Returns the full parameter set.
pub fn train_policy(
    data: &PolicyData,
    encoders: &ParamStore,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<PolicyLog>)> {
    let root = SeedRng::new(seed).named("policy");
    let mut ps = encoders.clone();
    init_policy(&mut ps, &mut root.named("init"))?;
    let ha: Vec<usize> = data.labeled.iter().map(Trajectory::horizon).collect();
    let hb: Vec<usize> = if cfg.use_unlabeled {
        data.unlabeled.iter().map(Trajectory::horizon).collect()
    } else {
        Vec::new()
    };
    let mut sampler = BatchSampler::new(&ha, &hb, cfg.explicit_weights, root.named("batches"))?;
    let mut aug = root.named("paraphrase");
    let cache = match cfg.mode {
        TrainMode::Frozen => Some(FrozenCache::build(&ps, data, cfg)?),
        TrainMode::Joint => None,
    };
    let joint_align = cfg.mode == TrainMode::Joint && cfg.task_loss_weight > 0.0;
    let align_data = if joint_align {
        Some(AlignData::from_dataset(data.labeled)?)
    } else {
        None
    };
    let mut align_batches = match &align_data {
        Some(d) => Some(crate::align::SceneGroupedBatches::new(
            d.len(),
            cfg.align.batch.min(d.len() & !1),
            root.named("align-batches"),
        )?),
        None => None,
    };
    let trainable = |n: &str| match cfg.mode {
        TrainMode::Frozen => n.starts_with("policy."),
        TrainMode::Joint => n.starts_with("policy.") || n.starts_with("transition."),
    };
    let mut opt = Adam::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items = sampler.sample(cfg.batch);
        let weights = sampler.weights(&items);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, trainable)?;
        let mut loss = bc_loss_inner(
            &mut g,
            &p,
            data,
            &items,
            weights,
            cfg,
            cache.as_ref(),
            &mut aug,
        )?;
        if let (Some(d), Some(it)) = (&align_data, align_batches.as_mut()) {
            let idx = it.next().expect("endless iterator");
            let mut acfg = cfg.align.clone();
            acfg.goal_only = cfg.goal_only;
            let (task, _) = batch_task_loss(&mut g, &p, d, &idx, &acfg, &mut aug)?;
            let task = g.scale(task, cfg.task_loss_weight as f32)?;
            loss = g.add(loss, task)?;
        }
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = g.backward(loss)?;
        let lr = cfg.schedule.lr(step);
        let enc_lr = lr * cfg.encoder_peak / cfg.schedule.peak;
        opt.step(&mut ps, p.collect_grads(&grads), |n| {
            if n.starts_with("policy.l1.") {
                lr * cfg.trunk_lr_scale
            } else if n.starts_with("policy.") {
                lr
            } else {
                enc_lr
            }
        })?;
        log.push(PolicyLog {
            step,
            loss: value,
            lr,
            labeled_fraction: items.iter().filter(|i| i.origin == Origin::Labeled).count() as f32
                / items.len() as f32,
        });
    }
    Ok((ps, log))
}

/// Mean actions for a batch of rendered states and task embeddings.
pub fn act(ps: &ParamStore, states: &[f32], z: &[f32]) -> Result<Vec<Action>> {
    let n = states.len() / IMAGE_LEN;
    let mut g = Graph::new();
    let p = ps.subset("policy.").bind(&mut g, |_| false)?;
    let s = g.constant(Tensor::new(vec![n, IMAGE_LEN], states.to_vec())?)?;
    let zv = g.constant(Tensor::new(vec![z.len() / D_Z, D_Z], z.to_vec())?)?;
    let mu = policy_forward(&mut g, &p, s, zv)?;
    Ok(g
        .value(mu)
        .chunks(3)
        .map(|r| Action::new(r[0], r[1], r[2]).clamped())
        .collect())
}

//! Contrastive alignment of instruction embeddings with transition
//! embeddings.

use std::borrow::Cow;

use crate::autodiff::{Graph, Var};
use crate::encoders::{encode_text, encode_transition, tokenize, D_Z};
use crate::error::{Error, Result};
use crate::optim::{Adam, Schedule};
use crate::params::{Bound, ParamStore};
use crate::rng::SeedRng;
use crate::sim::{paraphrases, translate_render, Dataset};
use crate::tensor::{Real, Tensor};

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    /// In-batch language-to-transition top-1 accuracy.
    pub top1: f32,
}

/// Loss node plus its two directional terms.
#[derive(Clone, Copy, Debug)]
pub struct InfoNce {
    pub total: Var,
    pub lang_to_goal: f64,
    pub goal_to_lang: f64,
    pub top1: f32,
}

fn check_unit_rows<T: Real>(g: &Graph<T>, z: Var) -> Result<()> {
    let d = *g.shape(z).last().unwrap_or(&1);
    for row in g.value(z).chunks(d) {
        let n: f64 = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "embedding rows must be unit norm, found norm {n}"
            )));
        }
    }
    Ok(())
}

/// Bidirectional InfoNCE with in-batch negatives.
///
/// `C = z_lang z_goal^T / tau`; the loss is the mean negative log-softmax of
/// the diagonal taken along rows plus the same along columns.
pub fn infonce_task_loss<T: Real>(
    g: &mut Graph<T>,
    z_lang: Var,
    z_goal: Var,
    tau: f64,
) -> Result<InfoNce> {
    let (sl, sg) = (g.shape(z_lang).to_vec(), g.shape(z_goal).to_vec());
    if sl.len() != 2 || sl != sg {
        return Err(Error::shape("infonce_task_loss", &sl, &sg));
    }
    let k = sl[0];
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "infonce needs at least 2 pairs, got {k}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    check_unit_rows(g, z_lang)?;
    check_unit_rows(g, z_goal)?;

    let gt = g.transpose(z_goal)?;
    let c = g.matmul(z_lang, gt)?;
    let c = g.scale(c, T::from_f64(1.0 / tau))?;
    let top1 = g
        .value(c)
        .chunks(k)
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == *i
        })
        .count() as f32
        / k as f32;

    let mut eye = vec![T::ZERO; k * k];
    (0..k).for_each(|i| eye[i * k + i] = T::ONE);
    let eye = g.constant(Tensor::new(vec![k, k], eye)?)?;
    let rows = g.log_softmax(c)?;
    let ct = g.transpose(c)?;
    let cols = g.log_softmax(ct)?;
    let inv = T::from_f64(-1.0 / k as f64);
    let d_row = g.mul(rows, eye)?;
    let d_row = g.sum(d_row)?;
    let l_lg = g.scale(d_row, inv)?;
    let d_col = g.mul(cols, eye)?;
    let d_col = g.sum(d_col)?;
    let l_gl = g.scale(d_col, inv)?;
    let total = g.add(l_lg, l_gl)?;
    Ok(InfoNce {
        total,
        lang_to_goal: g.value(l_lg)[0].to_f64(),
        goal_to_lang: g.value(l_gl)[0].to_f64(),
        top1,
    })
}

/// Positive-pair cosine loss `mean(1 - cos)` without negatives.
pub fn cosine_positive_loss(g: &mut Graph, z_lang: Var, z_goal: Var) -> Result<Var> {
    let prod = g.mul(z_lang, z_goal)?;
    let cos_mean = g.mean(prod)?;
    // mean over k*d entries; rescale to a mean over rows.
    let d = g.shape(z_lang)[1] as f32;
    let neg = g.scale(cos_mean, -d)?;
    let one = g.constant(Tensor::scalar(1.0))?;
    g.add(one, neg)
}

/// Index batches made of a shuffled half and a sequential half.
///
/// The shuffled half walks fresh permutations of the whole set; the
/// sequential half walks storage order and wraps, so consecutive batches
/// take contiguous runs and neighbors from the same scene land together.
#[derive(Clone, Debug)]
pub struct SceneGroupedBatches {
    n: usize,
    half: usize,
    perm: Vec<usize>,
    perm_pos: usize,
    seq_pos: usize,
    rng: SeedRng,
}

impl SceneGroupedBatches {
    pub fn new(n: usize, batch: usize, rng: SeedRng) -> Result<Self> {
        if batch < 2 || batch % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be even and at least 2, got {batch}"
            )));
        }
        if n < batch {
            return Err(Error::Dataset(format!(
                "dataset of {n} trajectories is smaller than batch {batch}"
            )));
        }
        Ok(SceneGroupedBatches {
            n,
            half: batch / 2,
            perm: Vec::new(),
            perm_pos: n,
            seq_pos: 0,
            rng,
        })
    }
}

impl Iterator for SceneGroupedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(2 * self.half);
        for _ in 0..self.half {
            if self.perm_pos == self.n {
                self.perm = self.rng.permutation(self.n);
                self.perm_pos = 0;
            }
            out.push(self.perm[self.perm_pos]);
            self.perm_pos += 1;
        }
        for _ in 0..self.half {
            out.push(self.seq_pos);
            self.seq_pos = (self.seq_pos + 1) % self.n;
        }
        Some(out)
    }
}

/// Which loss aligns the two encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    InfoNce,
    /// `1 - cos` on positive pairs only.
    CosinePositive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub tau: f64,
    pub batch: usize,
    pub steps: usize,
    pub schedule: Schedule,
    /// Peak rate for parameters named in `pretrained`.
    pub pretrained_peak: f64,
    /// Name prefixes of parameters that came from pretraining.
    pub pretrained: Vec<String>,
    pub objective: Objective,
    /// Feed `(g, g)` instead of `(s0, g)`.
    pub goal_only: bool,
    /// Largest random shift, in cells, applied jointly to `s0` and `g` of
    /// each example. 0 disables it.
    pub max_shift: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tau: 0.1,
            batch: 128,
            steps: 3000,
            schedule: Schedule {
                peak: 3e-4,
                warmup: 2000,
                decay: 2_000_000,
            },
            pretrained_peak: 3e-5,
            pretrained: Vec::new(),
            objective: Objective::InfoNce,
            goal_only: false,
            max_shift: 3,
        }
    }
}

impl AlignConfig {
    /// Learning rate for `name` at `step`.
    pub fn lr_for(&self, name: &str, step: usize) -> f64 {
        let base = self.schedule.lr(step);
        if self.pretrained.iter().any(|p| name.starts_with(p.as_str())) {
            base * self.pretrained_peak / self.schedule.peak
        } else {
            base
        }
    }
}

/// Labeled trajectories prepared for alignment: rendered start and final
/// states plus tokenized instruction variants (canonical first).
#[derive(Clone, Debug)]
pub struct AlignData {
    pub s0: Vec<Vec<f32>>,
    pub goal: Vec<Vec<f32>>,
    pub variants: Vec<Vec<Vec<usize>>>,
    pub scene_ids: Vec<u32>,
}

impl AlignData {
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let mut out = AlignData {
            s0: Vec::with_capacity(d.len()),
            goal: Vec::with_capacity(d.len()),
            variants: Vec::with_capacity(d.len()),
            scene_ids: Vec::with_capacity(d.len()),
        };
        for t in d.iter() {
            let instr = t.instruction.as_deref().ok_or_else(|| {
                Error::Dataset(format!("trajectory {} has no instruction", t.id))
            })?;
            let mut v = vec![tokenize(instr)?];
            for p in paraphrases(instr) {
                v.push(tokenize(&p)?);
            }
            out.s0.push(t.initial().render_vec());
            out.goal.push(t.last().render_vec());
            out.variants.push(v);
            out.scene_ids.push(t.scene_id);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.s0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s0.is_empty()
    }

    /// First `n` trajectories in storage order.
    pub fn prefix(&self, n: usize) -> AlignData {
        let n = n.min(self.len());
        AlignData {
            s0: self.s0[..n].to_vec(),
            goal: self.goal[..n].to_vec(),
            variants: self.variants[..n].to_vec(),
            scene_ids: self.scene_ids[..n].to_vec(),
        }
    }
}

/// Draw one shift that keeps both renders on the grid; a few rejected
/// draws fall back to no shift.
fn shifted_pair<'a>(
    s0: &'a [f32],
    goal: &'a [f32],
    max_shift: usize,
    rng: &mut SeedRng,
) -> (Cow<'a, [f32]>, Cow<'a, [f32]>) {
    const TRIES: usize = 4;
    if max_shift == 0 {
        return (Cow::Borrowed(s0), Cow::Borrowed(goal));
    }
    let span = 2 * max_shift + 1;
    for _ in 0..TRIES {
        let dx = rng.below(span) as i32 - max_shift as i32;
        let dy = rng.below(span) as i32 - max_shift as i32;
        if let (Some(a), Some(b)) = (translate_render(s0, dx, dy), translate_render(goal, dx, dy)) {
            return (Cow::Owned(a), Cow::Owned(b));
        }
    }
    (Cow::Borrowed(s0), Cow::Borrowed(goal))
}

/// Alignment loss for a batch of trajectory indices, drawing one
/// instruction variant per example from `rng`.
pub fn batch_task_loss(
    g: &mut Graph,
    p: &Bound,
    data: &AlignData,
    idx: &[usize],
    cfg: &AlignConfig,
    rng: &mut SeedRng,
) -> Result<(Var, f32)> {
    let tokens: Vec<Vec<usize>> = idx
        .iter()
        .map(|&i| {
            let v = &data.variants[i];
            v[rng.below(v.len())].clone()
        })
        .collect();
    let mut starts = Vec::with_capacity(idx.len());
    let mut goals = Vec::with_capacity(idx.len());
    for &i in idx {
        let (s, g) = shifted_pair(&data.s0[i], &data.goal[i], cfg.max_shift, rng);
        starts.push(s);
        goals.push(g);
    }
    let goal: Vec<&[f32]> = goals.iter().map(|g| g.as_ref()).collect();
    let s0: Vec<&[f32]> = if cfg.goal_only {
        goal.clone()
    } else {
        starts.iter().map(|s| s.as_ref()).collect()
    };
    let zl = encode_text(g, p, &tokens)?;
    let zg = encode_transition(g, p, &s0, &goal)?;
    debug_assert_eq!(g.shape(zl), &[idx.len(), D_Z]);
    match cfg.objective {
        Objective::InfoNce => {
            let l = infonce_task_loss(g, zl, zg, cfg.tau)?;
            Ok((l.total, l.top1))
        }
        Objective::CosinePositive => Ok((cosine_positive_loss(g, zl, zg)?, f32::NAN)),
    }
}

/// Train `text.*` and `transition.*` of `init` on the labeled set.
pub fn train_align(
    data: &AlignData,
    cfg: &AlignConfig,
    init: &ParamStore,
    seed: u64,
) -> Result<(ParamStore, Vec<AlignLog>)> {
    let root = SeedRng::new(seed).named("align");
    let mut batches = SceneGroupedBatches::new(data.len(), cfg.batch, root.named("batches"))?;
    let mut aug = root.named("paraphrase");
    let mut ps = init.clone();
    let trainable = |n: &str| n.starts_with("text.") || n.starts_with("transition.");
    let mut opt = Adam::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next().expect("endless iterator");
        let mut g = Graph::new();
        let p = ps.bind(&mut g, trainable)?;
        let (loss, top1) = batch_task_loss(&mut g, &p, data, &idx, cfg, &mut aug)?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = g.backward(loss)?;
        opt.step(&mut ps, p.collect_grads(&grads), |n| cfg.lr_for(n, step))?;
        log.push(AlignLog {
            step,
            loss: value,
            lr: cfg.schedule.lr(step),
            top1,
        });
    }
    Ok((ps, log))
}

//! Language encoder, single-image encoder, transition encoder, the
//! duplicate-and-halve surgery that turns the second into the third, and
//! caption pretraining for the first two.
//!
//! Images are `(12, 12, 10)` renders cut into 16 non-overlapping 3x3
//! patches. A patch's features are ordered `(channel, py, px)`, so when two
//! renders are stacked along the channel axis the first image's features
//! occupy the first 90 rows of the patch-embedding matrix and the second's
//! the next 90.

use crate::align::{infonce_task_loss, AlignLog};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, Schedule};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::rng::SeedRng;
use crate::sim::{CaptionScene, CHANNELS, GRID_H, GRID_W, IMAGE_LEN, OBJECT_NAMES};
use crate::tensor::Tensor;

pub const PATCH: usize = 3;
pub const PATCHES: usize = (GRID_W / PATCH) * (GRID_H / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;
pub const D_MODEL: usize = 64;
pub const D_Z: usize = 32;
pub const D_TOKEN: usize = 32;
pub const TEXT_HIDDEN: usize = 64;
pub const TRUNK_BLOCKS: usize = 2;

pub const UNK: usize = 0;

const BASE_WORDS: &[&str] = &[
    "put", "the", "on", "move", "to", "place", "next", "in", "front", "of", "left", "right",
    "back", "a", "scene", "with", "at", "and",
];
const SYNONYM_WORDS: &[&str] = &[
    "set", "position", "push", "slide", "onto", "atop", "capsicum", "chili", "skillet", "wok",
    "blade", "cutter", "rag", "fabric", "saucepan", "kettle", "fungus", "champignon", "ladle",
    "scoop", "napkin", "washcloth",
];

/// Vocabulary in id order; id 0 is the unknown-word token.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<unk>"];
    v.extend(BASE_WORDS);
    v.extend(OBJECT_NAMES);
    v.extend(SYNONYM_WORDS);
    v
}

pub fn vocab_size() -> usize {
    1 + BASE_WORDS.len() + OBJECT_NAMES.len() + SYNONYM_WORDS.len()
}

/// Lowercase whitespace tokenization; unknown words map to [`UNK`].
pub fn tokenize(instruction: &str) -> Result<Vec<usize>> {
    let vocab = vocabulary();
    let ids: Vec<usize> = instruction
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            vocab.iter().position(|&v| v == w).unwrap_or(UNK)
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyInstruction);
    }
    Ok(ids)
}

fn init_tower(ps: &mut ParamStore, rng: &mut SeedRng, prefix: &str, in_dim: usize) -> Result<()> {
    init_linear(ps, rng, &format!("{prefix}.patch_embed"), in_dim, D_MODEL, 1.0)?;
    let pos: Vec<f32> = (0..PATCHES * D_MODEL)
        .map(|_| (0.02 * rng.normal()) as f32)
        .collect();
    ps.insert(format!("{prefix}.pos"), Tensor::new(vec![PATCHES, D_MODEL], pos)?)?;
    for b in 0..TRUNK_BLOCKS {
        init_linear(ps, rng, &format!("{prefix}.block{b}"), D_MODEL, D_MODEL, 0.5)?;
    }
    init_linear(ps, rng, &format!("{prefix}.proj"), D_MODEL, D_Z, 1.0)
}

pub fn init_text(ps: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
    let emb: Vec<f32> = (0..vocab_size() * D_TOKEN)
        .map(|_| rng.normal() as f32)
        .collect();
    ps.insert("text.embed", Tensor::new(vec![vocab_size(), D_TOKEN], emb)?)?;
    init_linear(ps, rng, "text.hidden", D_TOKEN, TEXT_HIDDEN, 1.0)?;
    init_linear(ps, rng, "text.out", TEXT_HIDDEN, D_Z, 1.0)
}

pub fn init_image(ps: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
    init_tower(ps, rng, "image", PATCH_DIM)
}

pub fn init_transition(ps: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
    init_tower(ps, rng, "transition", 2 * PATCH_DIM)
}

/// Randomly initialized text, image and transition encoders.
pub fn init_encoders(rng: &mut SeedRng) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    init_text(&mut ps, &mut rng.named("text"))?;
    init_image(&mut ps, &mut rng.named("image"))?;
    init_transition(&mut ps, &mut rng.named("transition"))?;
    Ok(ps)
}

/// Append the patch features of one or more channel-stacked renders.
///
/// `images` are HWC renders of identical shape; the stacked channel axis
/// runs over them in order. Output rows are patches in raster order.
pub fn patchify_into(images: &[&[f32]], out: &mut Vec<f32>) -> Result<()> {
    for img in images {
        if img.len() != IMAGE_LEN {
            return Err(Error::shape(
                "patchify",
                &[img.len()],
                &[GRID_H, GRID_W, CHANNELS],
            ));
        }
    }
    for py0 in (0..GRID_H).step_by(PATCH) {
        for px0 in (0..GRID_W).step_by(PATCH) {
            for img in images {
                for c in 0..CHANNELS {
                    for py in 0..PATCH {
                        for px in 0..PATCH {
                            let (y, x) = (py0 + py, px0 + px);
                            out.push(img[(y * GRID_W + x) * CHANNELS + c]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Patch tower: patch embedding, positional table, residual ReLU blocks,
/// mean over patches, projection, L2 normalization. `patches` is `[batch * 16, in_dim]`.
fn tower(g: &mut Graph, p: &Bound, prefix: &str, patches: Var, batch: usize) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.patch_embed"), patches)?;
    let h = g.reshape(h, &[batch, PATCHES * D_MODEL])?;
    let h = g.add_row(h, p.var(&format!("{prefix}.pos"))?)?;
    let h = g.relu(h)?;
    let mut h = g.reshape(h, &[batch * PATCHES, D_MODEL])?;
    for b in 0..TRUNK_BLOCKS {
        let u = linear(g, p, &format!("{prefix}.block{b}"), h)?;
        let u = g.relu(u)?;
        h = g.add(h, u)?;
    }
    let h = g.reshape(h, &[batch, PATCHES, D_MODEL])?;
    let h = g.mean_axis(h, 1)?;
    let z = linear(g, p, &format!("{prefix}.proj"), h)?;
    g.l2_normalize(z)
}

pub fn encode_image(g: &mut Graph, p: &Bound, images: &[&[f32]]) -> Result<Var> {
    let mut feats = Vec::with_capacity(images.len() * PATCHES * PATCH_DIM);
    for img in images {
        patchify_into(&[img], &mut feats)?;
    }
    let x = g.constant(Tensor::new(vec![images.len() * PATCHES, PATCH_DIM], feats)?)?;
    tower(g, p, "image", x, images.len())
}

/// `h(s0, g)` for each pair: channel-stack, patchify, transition tower.
pub fn encode_transition(g: &mut Graph, p: &Bound, s0: &[&[f32]], goal: &[&[f32]]) -> Result<Var> {
    if s0.len() != goal.len() || s0.is_empty() {
        return Err(Error::shape("encode_transition", &[s0.len()], &[goal.len()]));
    }
    let mut feats = Vec::with_capacity(s0.len() * PATCHES * 2 * PATCH_DIM);
    for (a, b) in s0.iter().zip(goal) {
        patchify_into(&[a, b], &mut feats)?;
    }
    let x = g.constant(Tensor::new(vec![s0.len() * PATCHES, 2 * PATCH_DIM], feats)?)?;
    tower(g, p, "transition", x, s0.len())
}

/// Mean-pooled token embeddings through a two-layer head.
pub fn encode_text(g: &mut Graph, p: &Bound, tokens: &[Vec<usize>]) -> Result<Var> {
    if tokens.iter().any(Vec::is_empty) || tokens.is_empty() {
        return Err(Error::EmptyInstruction);
    }
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    let mut pool = vec![0.0f32; tokens.len() * flat.len()];
    let mut col = 0;
    for (row, t) in tokens.iter().enumerate() {
        let w = 1.0 / t.len() as f32;
        for _ in t {
            pool[row * flat.len() + col] = w;
            col += 1;
        }
    }
    let pool = g.constant(Tensor::new(vec![tokens.len(), flat.len()], pool)?)?;
    let emb = g.gather_rows(p.var("text.embed")?, &flat)?;
    let x = g.matmul(pool, emb)?;
    let h = linear(g, p, "text.hidden", x)?;
    let h = g.relu(h)?;
    let z = linear(g, p, "text.out", h)?;
    g.l2_normalize(z)
}

/// Inference helper: unit-norm text embeddings, one row per instruction.
pub fn embed_texts(ps: &ParamStore, instructions: &[&str]) -> Result<Vec<Vec<f32>>> {
    let tokens = instructions
        .iter()
        .map(|s| tokenize(s))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let p = ps.subset("text.").bind(&mut g, |_| false)?;
    let z = encode_text(&mut g, &p, &tokens)?;
    Ok(g.value(z).chunks(D_Z).map(<[f32]>::to_vec).collect())
}

/// Inference helper: unit-norm transition embeddings.
pub fn embed_transitions(ps: &ParamStore, s0: &[&[f32]], goal: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new();
    let p = ps.subset("transition.").bind(&mut g, |_| false)?;
    let z = encode_transition(&mut g, &p, s0, goal)?;
    Ok(g.value(z).chunks(D_Z).map(<[f32]>::to_vec).collect())
}

/// Inference helper: unit-norm single-image embeddings.
pub fn embed_images(ps: &ParamStore, images: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new();
    let p = ps.subset("image.").bind(&mut g, |_| false)?;
    let z = encode_image(&mut g, &p, images)?;
    Ok(g.value(z).chunks(D_Z).map(<[f32]>::to_vec).collect())
}

/// Build `transition.*` from `image.*`: the patch-embedding weight `W`
/// becomes `[W/2; W/2]`, everything else is copied verbatim. Any existing
/// `transition.*` entries are replaced; the image encoder is untouched.
pub fn surgery(ps: &ParamStore) -> Result<ParamStore> {
    let image = ps.subset("image.");
    if image.is_empty() {
        return Err(Error::MissingTensor("image.*".into()));
    }
    let mut out: ParamStore = ParamStore::new();
    for (name, t) in ps.iter().filter(|(n, _)| !n.starts_with("transition.")) {
        out.set(name, t.clone());
    }
    for (name, t) in image.iter() {
        let new_name = name.replacen("image.", "transition.", 1);
        let t = if name == "image.patch_embed.weight" {
            let half: Vec<f32> = t.data().iter().map(|v| v * 0.5).collect();
            let mut data = half.clone();
            data.extend_from_slice(&half);
            Tensor::new(vec![2 * t.shape()[0], t.shape()[1]], data)?
        } else {
            t.clone()
        };
        out.set(new_name, t);
    }
    Ok(out)
}

/// `transition.*` as a single-image tower named `image.*`. The two halves
/// of the patch embedding are summed, so the tower on `x` computes the
/// transition encoder on `(x, x)`.
pub fn goal_tower(ps: &ParamStore) -> Result<ParamStore> {
    let tr = ps.subset("transition.");
    if tr.is_empty() {
        return Err(Error::MissingTensor("transition.*".into()));
    }
    let mut out = ParamStore::new();
    for (name, t) in tr.iter() {
        let new_name = name.replacen("transition.", "image.", 1);
        let t = if name == "transition.patch_embed.weight" {
            let rows = t.shape()[0] / 2;
            let cols = t.shape()[1];
            let (a, b) = t.data().split_at(rows * cols);
            Tensor::new(vec![rows, cols], a.iter().zip(b).map(|(x, y)| x + y).collect())?
        } else {
            t.clone()
        };
        out.insert(new_name, t)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    pub schedule: Schedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch: 64,
            tau: 0.1,
            schedule: Schedule {
                peak: 1e-3,
                warmup: 100,
                decay: 1400,
            },
        }
    }
}

/// Caption/scene contrastive pretraining of `text.*` and `image.*`.
///
/// Every step draws a batch of distinct scenes uniformly without
/// replacement and minimizes the symmetric InfoNCE between caption and
/// render embeddings.
pub fn pretrain_clip_style(
    scenes: &[CaptionScene],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<AlignLog>)> {
    if scenes.len() < 2 {
        return Err(Error::Dataset("caption pretraining needs at least 2 scenes".into()));
    }
    let root = SeedRng::new(seed).named("pretrain");
    let mut ps = ParamStore::new();
    init_text(&mut ps, &mut root.named("text"))?;
    init_image(&mut ps, &mut root.named("image"))?;
    let tokens: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| tokenize(&s.caption))
        .collect::<Result<_>>()?;
    let images: Vec<Vec<f32>> = scenes.iter().map(|s| s.state.render_vec()).collect();
    let batch = cfg.batch.min(scenes.len()).max(2);
    let mut opt = Adam::default();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut rng = root.named("batches");
    for step in 0..cfg.steps {
        let idx: Vec<usize> = rng.permutation(scenes.len()).into_iter().take(batch).collect();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| true)?;
        let toks: Vec<Vec<usize>> = idx.iter().map(|&i| tokens[i].clone()).collect();
        let imgs: Vec<&[f32]> = idx.iter().map(|&i| images[i].as_slice()).collect();
        let zt = encode_text(&mut g, &p, &toks)?;
        let zi = encode_image(&mut g, &p, &imgs)?;
        let loss = infonce_task_loss(&mut g, zt, zi, cfg.tau)?;
        let value = g.value(loss.total)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = g.backward(loss.total)?;
        let lr = cfg.schedule.lr(step);
        opt.step(&mut ps, p.collect_grads(&grads), |_| lr)?;
        log.push(AlignLog {
            step,
            loss: value,
            lr,
            top1: loss.top1,
        });
    }
    Ok((ps, log))
}

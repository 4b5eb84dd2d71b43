//! Demonstration datasets and their on-disk format.
//!
//! A dataset directory holds two files:
//!
//! * `trajectories.bin`: `GRIFDATA\0`, u32 version, then one record per
//!   trajectory, each prefixed by its u32 byte length.
//! * `index`: the same magic and version, a u32 count, then per trajectory
//!   `id u32, scene_id u32, offset u64, len u64, has_instruction u8`.
//!   `offset` points at the record's length prefix.
//!
//! A record is `id u32, scene_id u32, task (kind u8, subject u8, arg u8,
//! relation u8), n_objects u8, type ids, n_states u16`, then per state
//! `gripper f32 x2, held u8 (255 = none), t u32, (x u8, y u8) per object`,
//! then `n_states - 1` action triples of f32, then `has_instruction u8` and,
//! if set, a u32 length and UTF-8 bytes. States are stored structurally and
//! rendered on demand.
//!
//! Records appear in generation order, which groups trajectories by scene.
//! Contrastive batching reads that order directly, so it is part of the
//! format.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{
    expert::{rollout_expert, ExpertPlan}, is_container, language::caption, language::make_instruction,
    reset_with_id, Action, Cell, Direction, ObjectInstance, Relation, Scene, SceneSpec, SimState,
    TaskKind, TaskSpec, GRID_H, GRID_W, NUM_TYPES,
};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::wire::{put_f32, put_u16, put_u32, put_u64, Reader};

pub const DATASET_MAGIC: &[u8; 9] = b"GRIFDATA\0";
pub const DATASET_VERSION: u32 = 1;

const SCENE_ID_STRIDE: u32 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub scene_id: u32,
    pub task: TaskSpec,
    pub states: Vec<SimState>,
    pub actions: Vec<Action>,
    pub instruction: Option<String>,
}

impl Trajectory {
    /// Number of actions, H.
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn initial(&self) -> &SimState {
        &self.states[0]
    }

    pub fn last(&self) -> &SimState {
        self.states.last().expect("non-empty trajectory")
    }
}

/// Held-out (task kind, subject) combinations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeldOut {
    pub combos: Vec<(TaskKind, u8)>,
}

impl Default for HeldOut {
    fn default() -> Self {
        HeldOut {
            combos: vec![
                (TaskKind::PlaceOn, 2),      // knife
                (TaskKind::MoveDir, 0),      // pepper
                (TaskKind::MoveDir, 1),      // pan
                (TaskKind::MoveRelative, 5), // mushroom
            ],
        }
    }
}

impl HeldOut {
    pub fn contains(&self, task: &TaskSpec) -> bool {
        self.combos.contains(&(task.kind(), task.subject()))
    }

    /// Every well-formed task in a held-out combination.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        TaskSpec::enumerate_all()
            .into_iter()
            .filter(|t| self.contains(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Derive `n_unlabeled` from `n_labeled` at the 7:47 ratio.
    pub ratio_mode: bool,
    /// Trajectories sharing one start state, each with a different task.
    pub per_scene: usize,
    pub n_eval: usize,
    pub held_out: HeldOut,
    /// Std of Gaussian noise on expert motion in the unlabeled set.
    pub action_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_labeled: 500,
            n_unlabeled: 3000,
            ratio_mode: false,
            per_scene: 8,
            n_eval: 1024,
            held_out: HeldOut::default(),
            action_noise: 0.0,
        }
    }
}

impl DataConfig {
    pub fn unlabeled_count(&self) -> usize {
        if self.ratio_mode {
            (self.n_labeled as f64 * 47.0 / 7.0).round() as usize
        } else {
            self.n_unlabeled
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    /// Labeled demonstrations with instructions.
    pub labeled: Dataset,
    /// Unlabeled demonstrations, every task kind including held-out ones.
    pub unlabeled: Dataset,
    /// Labeled demonstrations never used for training, over every task
    /// including the held-out ones.
    pub eval: Dataset,
}

#[derive(Clone, Copy)]
enum Split {
    Labeled,
    Unlabeled,
    Eval,
}

impl Split {
    fn scene_base(self) -> u32 {
        match self {
            Split::Labeled => 0,
            Split::Unlabeled => SCENE_ID_STRIDE,
            Split::Eval => 2 * SCENE_ID_STRIDE,
        }
    }
}

/// Tasks valid in a scene with the given object types.
fn tasks_in_scene(types: &[u8]) -> Vec<TaskSpec> {
    TaskSpec::enumerate_all()
        .into_iter()
        .filter(|t| {
            types.contains(&t.subject()) && t.other_object().map_or(true, |o| types.contains(&o))
        })
        .collect()
}

/// Kind first, then uniform over the remaining candidates of that kind.
fn sample_task(candidates: &[TaskSpec], rng: &mut SeedRng) -> Option<TaskSpec> {
    let kinds: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|k| candidates.iter().any(|t| t.kind() == *k))
        .collect();
    let kind = *rng.choose(&kinds)?;
    let of_kind: Vec<&TaskSpec> = candidates.iter().filter(|t| t.kind() == kind).collect();
    rng.choose(&of_kind).map(|t| **t)
}

fn generate_split(
    split: Split,
    n: usize,
    per_scene: usize,
    allowed: impl Fn(&TaskSpec) -> bool,
    noise: f64,
    root: &SeedRng,
) -> Result<Dataset> {
    const MAX_SCENE_ATTEMPTS: u64 = 1000;
    let per_scene = per_scene.max(1);
    let mut out = Vec::with_capacity(n);
    let mut group = 0u64;
    let mut scene_attempts = 0u64;
    while out.len() < n {
        let mut scene_rng = root.child(group);
        let scene_id = split.scene_base() + group as u32;
        group += 1;
        let spec = SceneSpec::sample(&mut scene_rng);
        let candidates: Vec<TaskSpec> = tasks_in_scene(&spec.types)
            .into_iter()
            .filter(|t| allowed(t))
            .collect();
        if candidates.is_empty() {
            scene_attempts += 1;
            if scene_attempts > MAX_SCENE_ATTEMPTS {
                return Err(Error::Dataset("no scene admits an allowed task".into()));
            }
            continue;
        }
        let want = per_scene.min(n - out.len());
        let start = reset_with_id(&spec, scene_rng.next_u64(), scene_id)?;
        let mut candidates = candidates;
        let mut k = 0u64;
        let mut made = 0;
        while made < want {
            let mut rng = scene_rng.child(k);
            k += 1;
            let Some(task) = sample_task(&candidates, &mut rng) else {
                break;
            };
            candidates.retain(|t| *t != task);
            let Ok((states, actions)) = rollout_expert(&start, &task, noise, &mut rng) else {
                continue;
            };
            let instruction = match split {
                Split::Unlabeled => None,
                Split::Labeled | Split::Eval => Some(make_instruction(&task)),
            };
            out.push(Trajectory {
                id: out.len() as u32,
                scene_id,
                task,
                states,
                actions,
                instruction,
            });
            made += 1;
        }
        if made == 0 {
            scene_attempts += 1;
            if scene_attempts > MAX_SCENE_ATTEMPTS {
                return Err(Error::Dataset("no scene admits a feasible task".into()));
            }
        }
    }
    Ok(Dataset { trajectories: out })
}

/// Generate the labeled, unlabeled and held-out evaluation sets.
///
/// Each split draws scenes from its own child stream. A scene is one start
/// state; its trajectories carry distinct tasks, each drawn from a child of
/// the scene's stream.
pub fn generate_datasets(cfg: &DataConfig, seed: u64) -> Result<Datasets> {
    let all = TaskSpec::enumerate_all();
    if all.iter().all(|t| cfg.held_out.contains(t)) {
        return Err(Error::Dataset(
            "held-out set covers every task; no instructions left to train on".into(),
        ));
    }
    let root = SeedRng::new(seed);
    let held = &cfg.held_out;
    let labeled = generate_split(
        Split::Labeled,
        cfg.n_labeled,
        cfg.per_scene,
        |t| !held.contains(t),
        0.0,
        &root.named("labeled"),
    )?;
    let unlabeled = generate_split(
        Split::Unlabeled,
        cfg.unlabeled_count(),
        cfg.per_scene,
        |_| true,
        cfg.action_noise,
        &root.named("unlabeled"),
    )?;
    let eval = generate_split(
        Split::Eval,
        cfg.n_eval,
        cfg.per_scene,
        |_| true,
        0.0,
        &root.named("eval"),
    )?;
    Ok(Datasets {
        labeled,
        unlabeled,
        eval,
    })
}

/// A rendered-scene caption pair for encoder pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionScene {
    pub state: SimState,
    pub caption: String,
}

pub fn generate_caption_scenes(n: usize, seed: u64) -> Result<Vec<CaptionScene>> {
    let root = SeedRng::new(seed).named("captions");
    (0..n)
        .map(|i| {
            let mut rng = root.child(i as u64);
            let spec = SceneSpec::sample(&mut rng);
            let mut state = reset_with_id(&spec, rng.next_u64(), i as u32)?;
            // Half the scenes get one object placed on or beside a container
            // so relations show up in the captions.
            if rng.bernoulli(0.5) {
                let relational: Vec<TaskSpec> = tasks_in_scene(&spec.types)
                    .into_iter()
                    .filter(|t| t.kind() != TaskKind::MoveDir)
                    .collect();
                if let Some(task) = rng.choose(&relational) {
                    if let Ok(plan) = ExpertPlan::new(&state, task) {
                        state.scene.objects[plan.subject_idx].pos = plan.destination;
                    }
                }
            }
            let caption = caption(&state);
            Ok(CaptionScene { state, caption })
        })
        .collect()
}

fn task_code(t: &TaskSpec) -> [u8; 4] {
    match *t {
        TaskSpec::PlaceOn { subject, target } => [0, subject, target, 0],
        TaskSpec::MoveDir { subject, dir } => [1, subject, dir.code(), 0],
        TaskSpec::MoveRelative {
            subject,
            reference,
            relation,
        } => [2, subject, reference, relation as u8],
    }
}

fn task_from_code(c: [u8; 4]) -> Result<TaskSpec> {
    let bad = || Error::Dataset(format!("invalid task code {c:?}"));
    let task = match c[0] {
        0 => TaskSpec::PlaceOn {
            subject: c[1],
            target: c[2],
        },
        1 => TaskSpec::MoveDir {
            subject: c[1],
            dir: Direction::from_code(c[2]).ok_or_else(bad)?,
        },
        2 => TaskSpec::MoveRelative {
            subject: c[1],
            reference: c[2],
            relation: *Relation::ALL.get(c[3] as usize).ok_or_else(bad)?,
        },
        _ => return Err(bad()),
    };
    if (task.subject() as usize) >= NUM_TYPES || !task.is_well_formed() {
        return Err(bad());
    }
    Ok(task)
}

fn encode_record(t: &Trajectory, out: &mut Vec<u8>) {
    put_u32(out, t.id);
    put_u32(out, t.scene_id);
    out.extend_from_slice(&task_code(&t.task));
    let objects = &t.states[0].scene.objects;
    out.push(objects.len() as u8);
    out.extend(objects.iter().map(|o| o.type_id));
    put_u16(out, t.states.len() as u16);
    for s in &t.states {
        put_f32(out, s.gripper.0);
        put_f32(out, s.gripper.1);
        out.push(s.held.map_or(255, |h| h as u8));
        put_u32(out, s.t);
        for o in &s.scene.objects {
            out.push(o.pos.x as u8);
            out.push(o.pos.y as u8);
        }
    }
    for a in &t.actions {
        for v in a.to_array() {
            put_f32(out, v);
        }
    }
    match &t.instruction {
        Some(s) => {
            out.push(1);
            put_u32(out, s.len() as u32);
            out.extend_from_slice(s.as_bytes());
        }
        None => out.push(0),
    }
}

fn decode_record(r: &mut Reader) -> Result<Trajectory> {
    let id = r.u32()?;
    let scene_id = r.u32()?;
    let task = task_from_code(r.bytes(4)?.try_into().expect("4 bytes"))?;
    let n_obj = r.u8()? as usize;
    let types = r.bytes(n_obj)?.to_vec();
    if types.iter().any(|&t| t as usize >= NUM_TYPES) {
        return Err(Error::Dataset(format!("trajectory {id}: bad object type")));
    }
    let n_states = r.u16()? as usize;
    if n_states == 0 {
        return Err(Error::Dataset(format!("trajectory {id}: no states")));
    }
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let gripper = (r.f32()?, r.f32()?);
        let held = match r.u8()? {
            255 => None,
            h if (h as usize) < n_obj => Some(h as usize),
            h => return Err(Error::Dataset(format!("trajectory {id}: held index {h}"))),
        };
        let t = r.u32()?;
        let mut objects = Vec::with_capacity(n_obj);
        for &type_id in &types {
            let (x, y) = (r.u8()?, r.u8()?);
            if x as usize >= GRID_W || y as usize >= GRID_H {
                return Err(Error::Dataset(format!("trajectory {id}: object off grid")));
            }
            objects.push(ObjectInstance {
                type_id,
                pos: Cell::new(x as i32, y as i32),
                is_container: is_container(type_id),
            });
        }
        states.push(SimState {
            scene: Scene {
                grid_w: GRID_W,
                grid_h: GRID_H,
                objects,
                scene_id,
            },
            gripper,
            held,
            t,
        });
    }
    let mut actions = Vec::with_capacity(n_states - 1);
    for _ in 1..n_states {
        actions.push(Action::new(r.f32()?, r.f32()?, r.f32()?));
    }
    let instruction = match r.u8()? {
        0 => None,
        1 => {
            let len = r.u32()? as usize;
            let bytes = r.bytes(len)?;
            Some(
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::Dataset(format!("trajectory {id}: instruction not UTF-8")))?,
            )
        }
        f => return Err(Error::Dataset(format!("trajectory {id}: flag {f}"))),
    };
    Ok(Trajectory {
        id,
        scene_id,
        task,
        states,
        actions,
        instruction,
    })
}

fn check_header(r: &mut Reader) -> Result<()> {
    if r.bytes(DATASET_MAGIC.len()).map_err(|_| Error::BadMagic)? != DATASET_MAGIC {
        return Err(Error::BadMagic);
    }
    match r.u32()? {
        DATASET_VERSION => Ok(()),
        v => Err(Error::UnsupportedVersion(v)),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    /// Distinct instructions present in the set.
    pub fn instructions(&self) -> BTreeSet<&str> {
        self.iter().filter_map(|t| t.instruction.as_deref()).collect()
    }

    /// Serialized `(trajectories.bin, index)` contents.
    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut bin = Vec::new();
        bin.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut bin, DATASET_VERSION);
        let mut index = Vec::new();
        index.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut index, DATASET_VERSION);
        put_u32(&mut index, self.len() as u32);
        let mut rec = Vec::new();
        for t in &self.trajectories {
            rec.clear();
            encode_record(t, &mut rec);
            put_u32(&mut index, t.id);
            put_u32(&mut index, t.scene_id);
            put_u64(&mut index, bin.len() as u64);
            put_u64(&mut index, rec.len() as u64 + 4);
            index.push(t.instruction.is_some() as u8);
            put_u32(&mut bin, rec.len() as u32);
            bin.extend_from_slice(&rec);
        }
        (bin, index)
    }

    pub fn from_bytes(bin: &[u8], index: &[u8]) -> Result<Dataset> {
        check_header(&mut Reader::new(bin, "trajectory data"))?;
        let mut ix = Reader::new(index, "dataset index");
        check_header(&mut ix)?;
        let count = ix.u32()? as usize;
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let (id, scene_id) = (ix.u32()?, ix.u32()?);
            let (offset, len) = (ix.u64()? as usize, ix.u64()? as usize);
            let has_instruction = ix.u8()? != 0;
            let end = offset.checked_add(len).filter(|&e| e <= bin.len()).ok_or_else(|| {
                Error::Truncated(format!("trajectory {id} extends past end of data"))
            })?;
            let mut r = Reader::new(&bin[offset..end], "trajectory record");
            let rec_len = r.u32()? as usize;
            if rec_len + 4 != len {
                return Err(Error::Truncated(format!(
                    "trajectory {id}: record length {rec_len} disagrees with index"
                )));
            }
            let t = decode_record(&mut r)?;
            if t.id != id || t.scene_id != scene_id || t.instruction.is_some() != has_instruction {
                return Err(Error::Dataset(format!("trajectory {id}: index mismatch")));
            }
            if r.remaining() != 0 {
                return Err(Error::Dataset(format!("trajectory {id}: trailing bytes")));
            }
            trajectories.push(t);
        }
        Ok(Dataset { trajectories })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (bin, index) = self.to_bytes();
        let p = dir.join("trajectories.bin");
        fs::write(&p, bin).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("index");
        fs::write(&p, index).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        Dataset::from_bytes(&read("trajectories.bin")?, &read("index")?)
    }
}

impl Datasets {
    pub const DIRS: [&'static str; 3] = ["D_A", "D_B", "eval"];

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.labeled.save(&dir.join(Self::DIRS[0]))?;
        self.unlabeled.save(&dir.join(Self::DIRS[1]))?;
        self.eval.save(&dir.join(Self::DIRS[2]))
    }

    pub fn load(dir: &Path) -> Result<Datasets> {
        Ok(Datasets {
            labeled: Dataset::load(&dir.join(Self::DIRS[0]))?,
            unlabeled: Dataset::load(&dir.join(Self::DIRS[1]))?,
            eval: Dataset::load(&dir.join(Self::DIRS[2]))?,
        })
    }
}

//! Deterministic 2-D tabletop: a grid of objects, a point gripper that can
//! hold one object, and per-task success judgment.
//!
//! Coordinates: `x` grows to the right, `y` grows toward the front (toward
//! the robot). Renders are `(height, width, channel)` row-major.

mod dataset;
mod expert;
mod language;

pub use dataset::{
    generate_datasets, generate_caption_scenes, CaptionScene, DataConfig, Dataset, Datasets,
    HeldOut, Trajectory, DATASET_MAGIC, DATASET_VERSION,
};
pub use expert::{rollout_expert, scripted_expert, ExpertPlan};
pub use language::{
    caption, make_instruction, paraphrase, paraphrases, parse_instruction, NUM_PARAPHRASES,
};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const GRID_W: usize = 12;
pub const GRID_H: usize = 12;
pub const NUM_TYPES: usize = 8;
/// 8 object one-hot channels, gripper mask, held flag.
pub const CHANNELS: usize = NUM_TYPES + 2;
pub const IMAGE_LEN: usize = GRID_W * GRID_H * CHANNELS;
/// Horizon for generated demonstrations.
pub const DEMO_HORIZON: usize = 40;
/// Horizon for evaluation rollouts.
pub const EVAL_HORIZON: usize = 60;

pub const OBJECT_NAMES: [&str; NUM_TYPES] = [
    "pepper", "pan", "knife", "cloth", "pot", "mushroom", "spoon", "towel",
];
const CONTAINERS: [bool; NUM_TYPES] = [false, true, false, true, true, false, false, true];

pub fn is_container(type_id: u8) -> bool {
    CONTAINERS[type_id as usize]
}

pub fn object_name(type_id: u8) -> &'static str {
    OBJECT_NAMES[type_id as usize]
}

pub fn type_by_name(name: &str) -> Option<u8> {
    OBJECT_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub type_id: u8,
    pub pos: Cell,
    pub is_container: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid_w: usize,
    pub grid_h: usize,
    pub objects: Vec<ObjectInstance>,
    pub scene_id: u32,
}

impl Scene {
    pub fn empty(scene_id: u32) -> Self {
        Scene {
            grid_w: GRID_W,
            grid_h: GRID_H,
            objects: Vec::new(),
            scene_id,
        }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.grid_w && (c.y as usize) < self.grid_h
    }

    pub fn find(&self, type_id: u8) -> Option<usize> {
        self.objects.iter().position(|o| o.type_id == type_id)
    }
}

/// Object types in a scene, 2 to 5 distinct ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub types: Vec<u8>,
}

impl SceneSpec {
    pub fn new(types: Vec<u8>) -> Self {
        SceneSpec { types }
    }

    /// Random spec of `2..=5` distinct types.
    pub fn sample(rng: &mut SeedRng) -> Self {
        let n = 2 + rng.below(4);
        let mut types: Vec<u8> = rng
            .permutation(NUM_TYPES)
            .into_iter()
            .take(n)
            .map(|t| t as u8)
            .collect();
        types.sort_unstable();
        SceneSpec { types }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub dx: f32,
    pub dy: f32,
    pub grip: f32,
}

impl Action {
    pub const NOOP: Action = Action {
        dx: 0.0,
        dy: 0.0,
        grip: 0.0,
    };

    pub fn new(dx: f32, dy: f32, grip: f32) -> Self {
        Action { dx, dy, grip }
    }

    /// Clamp each component to `[-1, 1]`; non-finite components become 0.
    pub fn clamped(self) -> Self {
        let c = |v: f32| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        Action::new(c(self.dx), c(self.dy), c(self.grip))
    }

    pub fn to_array(self) -> [f32; 3] {
        [self.dx, self.dy, self.grip]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
    Front,
    Back,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Front,
        Direction::Back,
    ];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Front => (0, 1),
            Direction::Back => (0, -1),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Front => "front",
            Direction::Back => "back",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Direction::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    NextTo,
    InFrontOf,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::NextTo, Relation::InFrontOf];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::NextTo => "next to",
            Relation::InFrontOf => "in front of",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    PlaceOn,
    MoveDir,
    MoveRelative,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PlaceOn, TaskKind::MoveDir, TaskKind::MoveRelative];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PlaceOn => "place_on",
            TaskKind::MoveDir => "move_dir",
            TaskKind::MoveRelative => "move_relative",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        TaskKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether `type_id` may be the subject of this kind of task.
    pub fn allows_subject(self, type_id: u8) -> bool {
        match self {
            TaskKind::MoveDir => true,
            TaskKind::PlaceOn | TaskKind::MoveRelative => !is_container(type_id),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskSpec {
    PlaceOn { subject: u8, target: u8 },
    MoveDir { subject: u8, dir: Direction },
    MoveRelative { subject: u8, reference: u8, relation: Relation },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::PlaceOn { .. } => TaskKind::PlaceOn,
            TaskSpec::MoveDir { .. } => TaskKind::MoveDir,
            TaskSpec::MoveRelative { .. } => TaskKind::MoveRelative,
        }
    }

    pub fn subject(&self) -> u8 {
        match *self {
            TaskSpec::PlaceOn { subject, .. }
            | TaskSpec::MoveDir { subject, .. }
            | TaskSpec::MoveRelative { subject, .. } => subject,
        }
    }

    /// Second object involved in the task, if any.
    pub fn other_object(&self) -> Option<u8> {
        match *self {
            TaskSpec::PlaceOn { target, .. } => Some(target),
            TaskSpec::MoveRelative { reference, .. } => Some(reference),
            TaskSpec::MoveDir { .. } => None,
        }
    }

    /// Structural validity independent of any scene.
    pub fn is_well_formed(&self) -> bool {
        let kind_ok = self.kind().allows_subject(self.subject());
        match self.other_object() {
            Some(o) => kind_ok && o != self.subject() && is_container(o),
            None => kind_ok,
        }
    }

    /// Every well-formed task over the 8-type vocabulary.
    pub fn enumerate_all() -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for s in 0..NUM_TYPES as u8 {
            for t in 0..NUM_TYPES as u8 {
                out.push(TaskSpec::PlaceOn { subject: s, target: t });
                for relation in Relation::ALL {
                    out.push(TaskSpec::MoveRelative {
                        subject: s,
                        reference: t,
                        relation,
                    });
                }
            }
            for dir in Direction::ALL {
                out.push(TaskSpec::MoveDir { subject: s, dir });
            }
        }
        out.retain(TaskSpec::is_well_formed);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub scene: Scene,
    pub gripper: (f32, f32),
    pub held: Option<usize>,
    pub t: u32,
}

/// Seeded placement of the spec's objects on distinct cells.
pub fn reset(spec: &SceneSpec, seed: u64) -> Result<SimState> {
    reset_with_id(spec, seed, 0)
}

pub fn reset_with_id(spec: &SceneSpec, seed: u64, scene_id: u32) -> Result<SimState> {
    let n = spec.types.len();
    let cells = GRID_W * GRID_H;
    if n > cells {
        return Err(Error::Scene(format!("{n} objects do not fit on {cells} cells")));
    }
    if !(2..=5).contains(&n) {
        return Err(Error::Scene(format!("scene needs 2 to 5 objects, got {n}")));
    }
    if let Some(bad) = spec.types.iter().find(|&&t| t as usize >= NUM_TYPES) {
        return Err(Error::Scene(format!("unknown object type {bad}")));
    }
    let mut sorted = spec.types.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::Scene("object types must be distinct".into()));
    }
    let mut rng = SeedRng::new(seed);
    let slots = rng.permutation(cells);
    let objects = spec
        .types
        .iter()
        .zip(slots)
        .map(|(&type_id, slot)| ObjectInstance {
            type_id,
            pos: Cell::new((slot % GRID_W) as i32, (slot / GRID_W) as i32),
            is_container: is_container(type_id),
        })
        .collect();
    Ok(SimState {
        scene: Scene {
            grid_w: GRID_W,
            grid_h: GRID_H,
            objects,
            scene_id,
        },
        gripper: ((GRID_W / 2) as f32, (GRID_H / 2) as f32),
        held: None,
        t: 0,
    })
}

impl SimState {
    pub fn gripper_cell(&self) -> Cell {
        Cell::new(self.gripper.0.round() as i32, self.gripper.1.round() as i32)
    }

    pub fn object(&self, type_id: u8) -> Option<&ObjectInstance> {
        self.scene.objects.iter().find(|o| o.type_id == type_id)
    }

    pub fn held_type(&self) -> Option<u8> {
        self.held.map(|i| self.scene.objects[i].type_id)
    }

    /// Indices of objects resting (not held) at `cell`.
    pub fn resting_at(&self, cell: Cell) -> impl Iterator<Item = usize> + '_ {
        self.scene
            .objects
            .iter()
            .enumerate()
            .filter(move |(i, o)| o.pos == cell && Some(*i) != self.held)
            .map(|(i, _)| i)
    }

    /// Whether object `idx` could come to rest at `cell` without breaking
    /// the one-object-per-cell rule (a container may carry one
    /// non-container).
    pub fn can_rest_at(&self, idx: usize, cell: Cell) -> bool {
        if !self.scene.in_bounds(cell) {
            return false;
        }
        let others: Vec<usize> = self.resting_at(cell).filter(|&i| i != idx).collect();
        match others.as_slice() {
            [] => true,
            [only] => {
                let o = &self.scene.objects[*only];
                o.is_container && !self.scene.objects[idx].is_container
            }
            _ => false,
        }
    }

    /// Deterministic transition.
    pub fn step(&self, action: Action) -> SimState {
        let a = action.clamped();
        let mut next = self.clone();
        let max_x = (self.scene.grid_w - 1) as f32;
        let max_y = (self.scene.grid_h - 1) as f32;
        next.gripper = (
            (self.gripper.0 + a.dx).clamp(0.0, max_x),
            (self.gripper.1 + a.dy).clamp(0.0, max_y),
        );
        let cell = next.gripper_cell();
        if let Some(h) = next.held {
            next.scene.objects[h].pos = cell;
        }
        if a.grip > 0.0 {
            if next.held.is_none() {
                // Prefer the object on top (a non-container) when stacked.
                let mut here: Vec<usize> = next.resting_at(cell).collect();
                here.sort_by_key(|&i| next.scene.objects[i].is_container);
                next.held = here.first().copied();
            }
        } else if let Some(h) = next.held {
            if next.can_rest_at(h, cell) {
                next.held = None;
            }
        }
        next.t += 1;
        next
    }

    /// Feature-channel image of shape `(12, 12, 10)`.
    pub fn render(&self) -> Tensor {
        Tensor::new(
            vec![self.scene.grid_h, self.scene.grid_w, CHANNELS],
            self.render_vec(),
        )
        .expect("render shape")
    }

    pub fn render_vec(&self) -> Vec<f32> {
        let (w, h) = (self.scene.grid_w, self.scene.grid_h);
        let mut img = vec![0.0f32; w * h * CHANNELS];
        let at = |c: Cell, ch: usize| ((c.y as usize) * w + c.x as usize) * CHANNELS + ch;
        for o in &self.scene.objects {
            img[at(o.pos, o.type_id as usize)] = 1.0;
        }
        img[at(self.gripper_cell(), NUM_TYPES)] = 1.0;
        if self.held.is_some() {
            for cell in img.chunks_mut(CHANNELS) {
                cell[NUM_TYPES + 1] = 1.0;
            }
        }
        img
    }
}

/// Shift a render by `(dx, dy)` cells. `None` when anything drawn would
/// leave the grid. The held flag fills the whole plane and is kept as is.
pub fn translate_render(img: &[f32], dx: i32, dy: i32) -> Option<Vec<f32>> {
    let (w, h) = (GRID_W as i32, GRID_H as i32);
    let mut out = vec![0.0f32; img.len()];
    for (i, cell) in img.chunks(CHANNELS).enumerate() {
        let (x, y) = (i as i32 % w, i as i32 / w);
        let (nx, ny) = (x + dx, y + dy);
        let inside = (0..w).contains(&nx) && (0..h).contains(&ny);
        if cell[..=NUM_TYPES].iter().any(|&v| v != 0.0) {
            if !inside {
                return None;
            }
            let j = (ny * w + nx) as usize * CHANNELS;
            out[j..j + NUM_TYPES + 1].copy_from_slice(&cell[..=NUM_TYPES]);
        }
        out[i * CHANNELS + NUM_TYPES + 1] = cell[NUM_TYPES + 1];
    }
    Some(out)
}

/// Success of `task` given the episode's first and last state.
///
/// Any non-subject object that ends away from its starting cell fails the
/// episode, even when the goal relation holds.
pub fn judge_success(initial: &SimState, last: &SimState, task: &TaskSpec) -> bool {
    let subject = task.subject();
    let (Some(s0), Some(s1)) = (initial.object(subject), last.object(subject)) else {
        return false;
    };
    let bystander_moved = initial
        .scene
        .objects
        .iter()
        .zip(&last.scene.objects)
        .any(|(a, b)| a.type_id != subject && a.pos != b.pos);
    if bystander_moved {
        return false;
    }
    match *task {
        TaskSpec::PlaceOn { target, .. } => last.object(target).is_some_and(|t| t.pos == s1.pos),
        TaskSpec::MoveDir { dir, .. } => {
            let (ux, uy) = dir.delta();
            let along = (s1.pos.x - s0.pos.x) * ux + (s1.pos.y - s0.pos.y) * uy;
            along >= 2
        }
        TaskSpec::MoveRelative {
            reference,
            relation,
            ..
        } => {
            let Some(r) = last.object(reference) else {
                return false;
            };
            relation_holds(s1.pos, r.pos, relation)
        }
    }
}

pub(crate) fn relation_holds(subject: Cell, reference: Cell, relation: Relation) -> bool {
    let (dx, dy) = (subject.x - reference.x, subject.y - reference.y);
    match relation {
        Relation::NextTo => dy == 0 && (1..=2).contains(&dx.abs()),
        Relation::InFrontOf => dx == 0 && (1..=2).contains(&dy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::new(vec![0, 1, 2, 3, 4])
    }

    #[test]
    fn reset_is_deterministic() {
        assert_eq!(reset(&spec(), 9).unwrap(), reset(&spec(), 9).unwrap());
    }

    #[test]
    fn five_objects_on_distinct_cells() {
        let s = reset(&spec(), 1).unwrap();
        let mut cells: Vec<Cell> = s.scene.objects.iter().map(|o| o.pos).collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 5);
    }

    #[test]
    fn seed_sweep_stays_in_bounds() {
        for seed in 0..100 {
            let s = reset(&spec(), seed).unwrap();
            assert!(s.scene.objects.iter().all(|o| s.scene.in_bounds(o.pos)));
        }
    }

    #[test]
    fn reset_rejects_bad_specs() {
        assert!(reset(&SceneSpec::new(vec![0, 1, 2, 3, 4, 5]), 0).is_err());
        assert!(reset(&SceneSpec::new(vec![0, 0]), 0).is_err());
        assert!(reset(&SceneSpec::new(vec![0, 9]), 0).is_err());
    }

    #[test]
    fn noop_only_advances_time() {
        let s = reset(&spec(), 3).unwrap();
        let n = s.step(Action::NOOP);
        assert_eq!(n.t, 1);
        assert_eq!(n.scene, s.scene);
        assert_eq!(n.gripper, s.gripper);
        assert_eq!(n.held, None);
    }

    #[test]
    fn displacement_is_clamped() {
        let s = reset(&spec(), 3).unwrap();
        let n = s.step(Action::new(5.0, 0.0, 0.0));
        assert_eq!(n.gripper.0, s.gripper.0 + 1.0);
    }

    #[test]
    fn grab_move_release_shifts_object_one_cell() {
        let mut s = reset(&SceneSpec::new(vec![0, 1]), 0).unwrap();
        s.scene.objects[0].pos = Cell::new(6, 6);
        s.scene.objects[1].pos = Cell::new(0, 0);
        let s1 = s.step(Action::new(0.0, 0.0, 1.0));
        assert_eq!(s1.held, Some(0));
        let s2 = s1.step(Action::new(1.0, 0.0, 1.0));
        let s3 = s2.step(Action::new(0.0, 0.0, -1.0));
        assert_eq!(s3.held, None);
        assert_eq!(s3.scene.objects[0].pos, Cell::new(7, 6));
    }

    #[test]
    fn gripper_stays_on_grid() {
        let mut s = reset(&spec(), 2).unwrap();
        for _ in 0..20 {
            s = s.step(Action::new(-1.0, 1.0, 0.0));
        }
        assert_eq!(s.gripper, (0.0, 11.0));
    }

    #[test]
    fn empty_scene_renders_no_objects() {
        let s = SimState {
            scene: Scene::empty(0),
            gripper: (6.0, 6.0),
            held: None,
            t: 0,
        };
        let img = s.render_vec();
        assert!(img
            .chunks(CHANNELS)
            .all(|cell| cell[..NUM_TYPES].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn render_one_hot_counts_objects() {
        let s = reset(&spec(), 4).unwrap();
        let img = s.render_vec();
        let total: f32 = img.chunks(CHANNELS).map(|c| c[..NUM_TYPES].iter().sum::<f32>()).sum();
        assert_eq!(total, 5.0);
        assert_eq!(s.render(), s.render());
    }

    #[test]
    fn zero_length_move_dir_fails() {
        let s = reset(&spec(), 4).unwrap();
        let task = TaskSpec::MoveDir {
            subject: 0,
            dir: Direction::Left,
        };
        assert!(!judge_success(&s, &s, &task));
    }

    #[test]
    fn translation_moves_every_channel_but_the_held_flag() {
        let mut s = reset(&spec(), 6).unwrap();
        s.held = Some(0);
        let img = s.render_vec();
        assert_eq!(translate_render(&img, 0, 0).unwrap(), img);
        let mut moved = s.clone();
        let fits = s.scene.objects.iter().all(|o| o.pos.x < 11) && s.gripper.0 < 11.0;
        if fits {
            moved.gripper.0 += 1.0;
            for o in &mut moved.scene.objects {
                o.pos.x += 1;
            }
            assert_eq!(translate_render(&img, 1, 0).unwrap(), moved.render_vec());
        }
        assert!(translate_render(&img, 12, 0).is_none());
    }

    #[test]
    fn task_enumeration_is_well_formed() {
        let all = TaskSpec::enumerate_all();
        // place_on: 4 non-containers x 4 containers; move_relative doubles
        // that over two relations; move_dir: 8 subjects x 4 directions.
        assert_eq!(all.len(), 16 + 32 + 32);
    }
}

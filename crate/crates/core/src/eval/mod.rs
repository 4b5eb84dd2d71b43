//! Retrieval accuracy, rollout success, and the ablation study.

pub mod ablation;
pub mod report;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::encoders::{embed_texts, embed_transitions, tokenize, D_Z, UNK};
use crate::error::{Error, Result};
use crate::policy::act;
use crate::params::ParamStore;
use crate::rng::SeedRng;
use crate::sim::{
    judge_success, make_instruction, reset_with_id, Action, Dataset, ExpertPlan,
    SceneSpec, SimState, TaskSpec, NUM_TYPES,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub k: usize,
    pub batch: usize,
    pub per_batch: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Top-k retrieval over fixed consecutive batches of paired embeddings.
///
/// Row `i` of `lang` is a success when row `i` of `goal` is among its `k`
/// most similar goal rows within the batch. Ties count against the query:
/// a rival with equal score ranks ahead. A trailing partial batch is
/// dropped.
pub fn retrieval_from_embeddings(
    lang: &[Vec<f32>],
    goal: &[Vec<f32>],
    k: usize,
    batch: usize,
) -> Result<RetrievalReport> {
    if lang.len() != goal.len() {
        return Err(Error::shape("retrieval", &[lang.len()], &[goal.len()]));
    }
    if batch == 0 || k == 0 {
        return Err(Error::InvalidArgument("batch and k must be positive".into()));
    }
    if batch > lang.len() {
        return Err(Error::InvalidArgument(format!(
            "retrieval batch {batch} larger than eval set {}",
            lang.len()
        )));
    }
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
    let mut per_batch = Vec::new();
    for start in (0..=lang.len() - batch).step_by(batch) {
        let range = start..start + batch;
        let mut hits = 0usize;
        for i in range.clone() {
            let own = dot(&lang[i], &goal[i]);
            let better = range
                .clone()
                .filter(|&j| j != i && dot(&lang[i], &goal[j]) >= own)
                .count();
            if better < k {
                hits += 1;
            }
        }
        per_batch.push(hits as f64 / batch as f64);
    }
    let (mean, se) = mean_se(&per_batch);
    Ok(RetrievalReport {
        k,
        batch,
        per_batch,
        mean,
        se,
    })
}

/// Language and transition embeddings of a labeled set, canonical
/// instructions, storage order.
pub fn embed_eval_set(
    encoders: &ParamStore,
    eval: &Dataset,
    goal_only: bool,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    const CHUNK: usize = 256;
    let mut lang = Vec::with_capacity(eval.len());
    let mut goal = Vec::with_capacity(eval.len());
    for chunk in eval.trajectories.chunks(CHUNK) {
        let instr: Vec<&str> = chunk
            .iter()
            .map(|t| {
                t.instruction
                    .as_deref()
                    .ok_or_else(|| Error::Dataset(format!("trajectory {} unlabeled", t.id)))
            })
            .collect::<Result<_>>()?;
        lang.extend(embed_texts(encoders, &instr)?);
        let g: Vec<Vec<f32>> = chunk.iter().map(|t| t.last().render_vec()).collect();
        let s: Vec<Vec<f32>> = if goal_only {
            g.clone()
        } else {
            chunk.iter().map(|t| t.initial().render_vec()).collect()
        };
        let sr: Vec<&[f32]> = s.iter().map(Vec::as_slice).collect();
        let gr: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
        goal.extend(embed_transitions(encoders, &sr, &gr)?);
    }
    Ok((lang, goal))
}

pub fn retrieval_accuracy(
    encoders: &ParamStore,
    eval: &Dataset,
    k: usize,
    batch: usize,
    goal_only: bool,
) -> Result<RetrievalReport> {
    if batch > eval.len() {
        return Err(Error::InvalidArgument(format!(
            "retrieval batch {batch} larger than eval set {}",
            eval.len()
        )));
    }
    let (lang, goal) = embed_eval_set(encoders, eval, goal_only)?;
    retrieval_from_embeddings(&lang, &goal, k, batch)
}

/// Something that picks actions for a batch of parallel episodes.
pub trait Controller {
    /// Prepare for episodes; returns a failure reason for any episode that
    /// cannot be run.
    fn begin(&mut self, starts: &[SimState], tasks: &[TaskSpec], instructions: &[String])
        -> Result<Vec<Option<String>>>;

    fn act(&mut self, states: &[SimState]) -> Result<Vec<Action>>;
}

/// The scripted expert as a controller.
#[derive(Default)]
pub struct ExpertController {
    plans: Vec<Option<ExpertPlan>>,
}

impl Controller for ExpertController {
    fn begin(
        &mut self,
        starts: &[SimState],
        tasks: &[TaskSpec],
        _instructions: &[String],
    ) -> Result<Vec<Option<String>>> {
        self.plans.clear();
        let mut reasons = Vec::with_capacity(starts.len());
        for (s, t) in starts.iter().zip(tasks) {
            match ExpertPlan::new(s, t) {
                Ok(p) => {
                    self.plans.push(Some(p));
                    reasons.push(None);
                }
                Err(e) => {
                    self.plans.push(None);
                    reasons.push(Some(e.to_string()));
                }
            }
        }
        Ok(reasons)
    }

    fn act(&mut self, states: &[SimState]) -> Result<Vec<Action>> {
        Ok(states
            .iter()
            .zip(&self.plans)
            .map(|(s, p)| p.as_ref().map_or(Action::NOOP, |p| p.action(s)))
            .collect())
    }
}

/// Instruction-conditioned policy executing mean actions.
pub struct PolicyController<'a> {
    params: &'a ParamStore,
    z: Vec<f32>,
}

impl<'a> PolicyController<'a> {
    /// `params` holds `text.*` and `policy.*`.
    pub fn new(params: &'a ParamStore) -> Self {
        PolicyController {
            params,
            z: Vec::new(),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn begin(
        &mut self,
        _starts: &[SimState],
        _tasks: &[TaskSpec],
        instructions: &[String],
    ) -> Result<Vec<Option<String>>> {
        let mut reasons = Vec::with_capacity(instructions.len());
        let mut ok: Vec<&str> = Vec::new();
        for s in instructions {
            match tokenize(s) {
                Ok(ids) if ids.contains(&UNK) => {
                    reasons.push(Some(format!("unknown word in `{s}`")));
                    ok.push("the");
                }
                Ok(_) => {
                    reasons.push(None);
                    ok.push(s);
                }
                Err(e) => {
                    reasons.push(Some(e.to_string()));
                    ok.push("the");
                }
            }
        }
        self.z = embed_texts(self.params, &ok)?.concat();
        Ok(reasons)
    }

    fn act(&mut self, states: &[SimState]) -> Result<Vec<Action>> {
        let mut imgs = Vec::with_capacity(states.len() * crate::sim::IMAGE_LEN);
        for s in states {
            imgs.extend_from_slice(&s.render_vec());
        }
        debug_assert_eq!(self.z.len(), states.len() * D_Z);
        act(self.params, &imgs, &self.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub task: TaskSpec,
    pub instruction: String,
    pub trials: usize,
    pub successes: usize,
    /// Reasons for episodes that could not run, if any.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub per_task: Vec<TaskOutcome>,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    /// Binomial standard error of `rate`.
    pub se: f64,
}

/// Seeded start state for `(task, trial)`: the task's objects plus random
/// extras, redrawn until the expert can solve it.
pub fn eval_start(task: &TaskSpec, rng: &SeedRng) -> Result<SimState> {
    for attempt in 0..256u64 {
        let mut r = rng.child(attempt);
        let mut types = vec![task.subject()];
        types.extend(task.other_object());
        let total = (2 + r.below(4)).max(types.len());
        let mut pool: Vec<u8> = (0..NUM_TYPES as u8).filter(|t| !types.contains(t)).collect();
        r.shuffle(&mut pool);
        types.extend(pool.into_iter().take(total - types.len()));
        types.sort_unstable();
        let s = reset_with_id(&SceneSpec::new(types), r.next_u64(), 0)?;
        if ExpertPlan::new(&s, task).is_ok() {
            return Ok(s);
        }
    }
    Err(Error::InfeasibleTask(format!("{task:?}: no feasible start found")))
}

/// Run every `(task, trial)` episode for `horizon` steps and judge the
/// final state.
pub fn rollout_eval(
    controller: &mut dyn Controller,
    tasks: &[TaskSpec],
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<RolloutReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let root = SeedRng::new(seed).named("rollout");
    let mut starts = Vec::new();
    let mut ep_tasks = Vec::new();
    let mut instructions = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let instr = make_instruction(task);
        for trial in 0..trials {
            starts.push(eval_start(task, &root.child(ti as u64).child(trial as u64))?);
            ep_tasks.push(*task);
            instructions.push(instr.clone());
        }
    }
    let reasons = controller.begin(&starts, &ep_tasks, &instructions)?;
    let mut states = starts.clone();
    for _ in 0..horizon {
        let actions = controller.act(&states)?;
        if actions.len() != states.len() {
            return Err(Error::shape("rollout actions", &[actions.len()], &[states.len()]));
        }
        states = states.iter().zip(&actions).map(|(s, &a)| s.step(a)).collect();
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (ti, task) in tasks.iter().enumerate() {
        let mut out = TaskOutcome {
            task: *task,
            instruction: make_instruction(task),
            trials,
            successes: 0,
            failures: Vec::new(),
        };
        for e in ti * trials..(ti + 1) * trials {
            match &reasons[e] {
                Some(r) => out.failures.push(r.clone()),
                None => {
                    if judge_success(&starts[e], &states[e], &ep_tasks[e]) {
                        out.successes += 1;
                    }
                }
            }
        }
        per_task.push(out);
    }
    let successes: usize = per_task.iter().map(|t| t.successes).sum();
    let n = tasks.len() * trials;
    let rate = successes as f64 / n as f64;
    Ok(RolloutReport {
        per_task,
        successes,
        trials: n,
        rate,
        se: (rate * (1.0 - rate) / n as f64).sqrt(),
    })
}

/// One-sided two-proportion z-test of `p1 > p2`. Returns `(z, p_value)`.
pub fn two_proportion_z(s1: usize, n1: usize, s2: usize, n2: usize) -> (f64, f64) {
    let (p1, p2) = (s1 as f64 / n1 as f64, s2 as f64 / n2 as f64);
    let pool = (s1 + s2) as f64 / (n1 + n2) as f64;
    let se = (pool * (1.0 - pool) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        let z = if p1 > p2 { f64::INFINITY } else { 0.0 };
        return (z, if p1 > p2 { 0.0 } else { 0.5 });
    }
    let z = (p1 - p2) / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (z, 1.0 - normal.cdf(z))
}

/// `n` seeded tasks outside the held-out combinations.
pub fn in_distribution_tasks(
    held_out: &crate::sim::HeldOut,
    n: usize,
    seed: u64,
) -> Vec<TaskSpec> {
    let mut pool: Vec<TaskSpec> = TaskSpec::enumerate_all()
        .into_iter()
        .filter(|t| !held_out.contains(t))
        .collect();
    let mut rng = SeedRng::new(seed).named("in-distribution");
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool.sort();
    pool
}

//! Greedy scripted demonstrator.

use super::{relation_holds, Action, Cell, Relation, SimState, TaskSpec, DEMO_HORIZON, GRID_H, GRID_W};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Destination fixed when the plan is made; the subject's position changes
/// once it is carried, so the plan has to remember where it is going.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertPlan {
    pub task: TaskSpec,
    pub subject_idx: usize,
    pub destination: Cell,
}

impl ExpertPlan {
    pub fn new(state: &SimState, task: &TaskSpec) -> Result<Self> {
        let infeasible = |why: &str| Error::InfeasibleTask(format!("{task:?}: {why}"));
        if !task.is_well_formed() {
            return Err(infeasible("malformed task"));
        }
        let subject_idx = state
            .scene
            .find(task.subject())
            .ok_or_else(|| infeasible("subject not in scene"))?;
        let start = state.scene.objects[subject_idx].pos;
        let free = |c: Cell| c != start && state.can_rest_at(subject_idx, c);

        let destination = match *task {
            TaskSpec::PlaceOn { target, .. } => {
                let t = state
                    .object(target)
                    .ok_or_else(|| infeasible("target not in scene"))?;
                if !free(t.pos) {
                    return Err(infeasible("target is occupied"));
                }
                t.pos
            }
            TaskSpec::MoveDir { dir, .. } => {
                // As far as the table allows, so the stopping point is
                // visible in the current state rather than remembered.
                let (ux, uy) = dir.delta();
                (2..GRID_W.max(GRID_H) as i32)
                    .map(|k| start.offset(k * ux, k * uy))
                    .take_while(|&c| state.scene.in_bounds(c))
                    .filter(|&c| free(c))
                    .last()
                    .ok_or_else(|| infeasible("no room in that direction"))?
            }
            TaskSpec::MoveRelative {
                reference,
                relation,
                ..
            } => {
                let r = state
                    .object(reference)
                    .ok_or_else(|| infeasible("reference not in scene"))?
                    .pos;
                if relation_holds(start, r, relation) {
                    return Err(infeasible("relation already holds"));
                }
                let candidates: Vec<Cell> = match relation {
                    Relation::NextTo => vec![r.offset(-1, 0), r.offset(1, 0)],
                    Relation::InFrontOf => vec![r.offset(0, 1), r.offset(0, 2)],
                };
                let mut ok: Vec<Cell> = candidates.into_iter().filter(|&c| free(c)).collect();
                if relation == Relation::NextTo {
                    ok.sort_by_key(|c| c.manhattan(start));
                }
                *ok.first().ok_or_else(|| infeasible("no free cell by reference"))?
            }
        };
        Ok(ExpertPlan {
            task: *task,
            subject_idx,
            destination,
        })
    }

    /// Next action: approach the subject, grasp, carry to the destination,
    /// release, then return the gripper to its rest cell. Both axes move by
    /// at most one cell per step.
    pub fn action(&self, state: &SimState) -> Action {
        let toward = |from: (f32, f32), to: Cell| {
            (
                (to.x as f32 - from.0).clamp(-1.0, 1.0),
                (to.y as f32 - from.1).clamp(-1.0, 1.0),
            )
        };
        let g = state.gripper_cell();
        match state.held {
            Some(h) if h != self.subject_idx => Action::new(0.0, 0.0, -1.0),
            Some(_) => {
                if g == self.destination {
                    Action::new(0.0, 0.0, -1.0)
                } else {
                    let (dx, dy) = toward(state.gripper, self.destination);
                    Action::new(dx, dy, 1.0)
                }
            }
            None => {
                let subject = state.scene.objects[self.subject_idx].pos;
                if subject == self.destination {
                    let (dx, dy) = toward(state.gripper, rest_cell());
                    Action::new(dx, dy, -1.0)
                } else if g == subject {
                    Action::new(0.0, 0.0, 1.0)
                } else {
                    let (dx, dy) = toward(state.gripper, subject);
                    Action::new(dx, dy, -1.0)
                }
            }
        }
    }

    pub fn is_done(&self, state: &SimState) -> bool {
        state.held.is_none()
            && state.scene.objects[self.subject_idx].pos == self.destination
            && state.gripper_cell() == rest_cell()
    }
}

/// Where the gripper starts and where the expert parks it afterwards.
pub fn rest_cell() -> Cell {
    Cell::new((GRID_W / 2) as i32, (GRID_H / 2) as i32)
}

/// Expert action for a state in which the subject has not been picked up.
pub fn scripted_expert(state: &SimState, task: &TaskSpec) -> Result<Action> {
    Ok(ExpertPlan::new(state, task)?.action(state))
}

/// Run the expert from `start` until the subject rests at its destination.
/// Gaussian noise of scale `noise` perturbs the executed (and recorded)
/// motion components.
pub fn rollout_expert(
    start: &SimState,
    task: &TaskSpec,
    noise: f64,
    rng: &mut SeedRng,
) -> Result<(Vec<SimState>, Vec<Action>)> {
    let plan = ExpertPlan::new(start, task)?;
    let mut states = vec![start.clone()];
    let mut actions = Vec::new();
    while actions.len() < DEMO_HORIZON {
        let s = states.last().expect("non-empty");
        if plan.is_done(s) {
            break;
        }
        let mut a = plan.action(s);
        if noise > 0.0 {
            a.dx += (noise * rng.normal()) as f32;
            a.dy += (noise * rng.normal()) as f32;
            a = a.clamped();
        }
        states.push(s.step(a));
        actions.push(a);
    }
    if !plan.is_done(states.last().expect("non-empty")) {
        return Err(Error::InfeasibleTask(format!(
            "{task:?}: expert did not finish within {DEMO_HORIZON} steps"
        )));
    }
    Ok((states, actions))
}

//! Sample a scene, let the scripted expert solve every feasible task in it,
//! and print the instruction, episode length and judged outcome.

use goal_align::rng::SeedRng;
use goal_align::sim::{
    caption, judge_success, make_instruction, object_name, reset, rollout_expert, SceneSpec, TaskSpec,
};

fn main() -> goal_align::Result<()> {
    let mut rng = SeedRng::new(3);
    let spec = SceneSpec::sample(&mut rng);
    let start = reset(&spec, 3)?;
    println!("scene: {}", caption(&start));
    for o in &start.scene.objects {
        println!("  {:>12} at ({}, {})", object_name(o.type_id), o.pos.x, o.pos.y);
    }
    let tasks: Vec<TaskSpec> = TaskSpec::enumerate_all()
        .into_iter()
        .filter(|t| start.object(t.subject()).is_some())
        .filter(|t| t.other_object().map_or(true, |o| start.object(o).is_some()))
        .collect();
    for task in tasks {
        match rollout_expert(&start, &task, 0.0, &mut rng) {
            Ok((states, actions)) => println!(
                "{:<45} {:>2} steps  success={}",
                make_instruction(&task),
                actions.len(),
                judge_success(&start, states.last().unwrap(), &task)
            ),
            Err(e) => println!("{:<45} skipped: {e}", make_instruction(&task)),
        }
    }
    Ok(())
}

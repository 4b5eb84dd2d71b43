//! Train the FiLM policy on frozen encoders with labeled and unlabeled
//! demonstrations, then roll it out on held-out and familiar instructions
//! next to the scripted expert.

use goal_align::encoders::{init_encoders, surgery};
use goal_align::eval::{in_distribution_tasks, rollout_eval, ExpertController, PolicyController};
use goal_align::optim::Schedule;
use goal_align::policy::{train_policy, PolicyConfig, PolicyData};
use goal_align::rng::SeedRng;
use goal_align::sim::{generate_datasets, DataConfig, EVAL_HORIZON};

fn main() -> goal_align::Result<()> {
    let dc = DataConfig {
        n_labeled: 200,
        n_unlabeled: 2000,
        per_scene: 4,
        n_eval: 64,
        ..DataConfig::default()
    };
    let data = generate_datasets(&dc, 0)?;
    let enc = surgery(&init_encoders(&mut SeedRng::new(0))?)?;
    let cfg = PolicyConfig {
        steps: 1500,
        schedule: Schedule {
            peak: 1e-3,
            warmup: 100,
            decay: 1500,
        },
        ..PolicyConfig::default()
    };
    let (ps, log) = train_policy(&PolicyData::new(&data.labeled, &data.unlabeled)?, &enc, &cfg, 0)?;
    for l in log.iter().step_by(300) {
        println!("step {:>4}  loss {:>8.2}  labeled share {:.2}", l.step, l.loss, l.labeled_fraction);
    }
    let held = dc.held_out.tasks();
    let familiar = in_distribution_tasks(&dc.held_out, 10, 0);
    let mut policy = PolicyController::new(&ps);
    let mut expert = ExpertController::default();
    for (name, tasks) in [("held-out", &held), ("familiar", &familiar)] {
        let p = rollout_eval(&mut policy, tasks, 3, EVAL_HORIZON, 0)?;
        let e = rollout_eval(&mut expert, tasks, 3, EVAL_HORIZON, 0)?;
        println!(
            "{name:<9} policy {:.2} +/- {:.2}   expert {:.2}",
            p.rate, p.se, e.rate
        );
    }
    Ok(())
}

//! Align instructions with `(s0, g)` transitions on a small labeled set and
//! report text-to-transition retrieval before and after, with and without
//! the start state.

use goal_align::align::{train_align, AlignConfig, AlignData};
use goal_align::encoders::{init_encoders, surgery};
use goal_align::eval::retrieval_accuracy;
use goal_align::optim::Schedule;
use goal_align::rng::SeedRng;
use goal_align::sim::{generate_datasets, DataConfig};

fn main() -> goal_align::Result<()> {
    let data = generate_datasets(
        &DataConfig {
            n_labeled: 300,
            n_unlabeled: 0,
            n_eval: 256,
            per_scene: 4,
            ..DataConfig::default()
        },
        1,
    )?;
    let init = surgery(&init_encoders(&mut SeedRng::new(1))?)?;
    let ad = AlignData::from_dataset(&data.labeled)?;
    for goal_only in [false, true] {
        let cfg = AlignConfig {
            steps: 800,
            schedule: Schedule {
                peak: 1e-3,
                warmup: 50,
                decay: 800,
            },
            pretrained: Vec::new(),
            goal_only,
            ..AlignConfig::default()
        };
        let before = retrieval_accuracy(&init, &data.eval, 5, 64, goal_only)?;
        let (enc, _) = train_align(&ad, &cfg, &init, 1)?;
        let after = retrieval_accuracy(&enc, &data.eval, 5, 64, goal_only)?;
        println!(
            "{:<10} top-5 of 64: {:.3} -> {:.3} (+/- {:.3})",
            if goal_only { "(g, g)" } else { "(s0, g)" },
            before.mean,
            after.mean,
            after.se
        );
    }
    Ok(())
}

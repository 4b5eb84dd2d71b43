//! A reduced ablation over every variant at one seed, written as
//! `report.tsv`, `sweep.tsv` and per-variant curves.

use goal_align::config::Config;
use goal_align::eval::ablation::run_ablation;
use goal_align::eval::report::{report_tsv, write_report};

fn main() -> goal_align::Result<()> {
    let cfg = Config::parse(
        "data.n_labeled = 200\n\
         data.n_unlabeled = 1000\n\
         data.n_eval = 256\n\
         data.per_scene = 4\n\
         pretrain.n_scenes = 1000\n\
         pretrain.steps = 300\n\
         pretrain.warmup = 30\n\
         pretrain.decay = 300\n\
         align.steps = 300\n\
         align.warmup = 30\n\
         align.decay = 300\n\
         policy.steps = 300\n\
         policy.lr = 1e-3\n\
         policy.warmup = 30\n\
         policy.decay = 300\n\
         eval.trials = 2\n\
         ablation.sweep = 50,100,200\n\
         ablation.seeds = 0\n",
    )?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = run_ablation(&cfg, threads, &|m| eprintln!("{m}"))?;
    print!("{}", report_tsv(&report));
    let dir = std::env::temp_dir().join("goal-align-ablation");
    write_report(&report, &cfg.to_text(), &dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}

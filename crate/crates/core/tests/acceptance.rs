//! Acceptance criteria, one line of output each.
//!
//! Runs without the libtest harness so every criterion reports its measured
//! value. Pass substrings as arguments to run a subset:
//! `cargo test --release --test acceptance -- mixing schedule`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use goal_align::align::{infonce_task_loss, Objective};
use goal_align::autodiff::Graph;
use goal_align::checkpoint;
use goal_align::config::Config;
use goal_align::encoders::{embed_images, embed_transitions, init_encoders, surgery};
use goal_align::eval::ablation::{
    align_encoders, prepare_seed, run_ablation, AblationReport, AlignKey, Variant,
};
use goal_align::eval::report::write_report;
use goal_align::eval::two_proportion_z;
use goal_align::optim::lr_at;
use goal_align::policy::{sample_goal, BatchSampler, Origin};
use goal_align::rng::SeedRng;
use goal_align::sim::{generate_datasets, DataConfig, Datasets, IMAGE_LEN};
use goal_align::Tensor;

mod gradcheck;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

fn ensure(ok: bool, detail: String) -> Check {
    Ok((ok, detail))
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let report = gradcheck::run_all(100, 0);
    let secs = t.elapsed().as_secs_f64();
    let worst = report
        .iter()
        .fold(("", 0.0f64), |w, (op, e)| if *e > w.1 { (op, *e) } else { w });
    ensure(
        worst.1 < 1e-3 && secs < 60.0,
        format!(
            "{} ops x 100 cases, worst rel. error {:.2e} ({}), {secs:.1}s",
            report.len(),
            worst.1,
            worst.0
        ),
    )
}

fn surgery_identity() -> Check {
    let t = Instant::now();
    let root = SeedRng::new(7).named("surgery-acceptance");
    let mut worst = 0.0f32;
    for case in 0..100 {
        let mut rng = root.child(case);
        let mut enc = init_encoders(&mut rng.named("init"))?;
        // Random biases too, so every parameter takes part.
        let names: Vec<String> = enc.names().map(str::to_string).collect();
        for n in names {
            let p = enc.get_mut(&n).unwrap();
            for v in p.data_mut() {
                *v += 0.05 * rng.normal() as f32;
            }
        }
        let x: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..IMAGE_LEN).map(|_| rng.uniform() as f32).collect())
            .collect();
        let xs: Vec<&[f32]> = x.iter().map(Vec::as_slice).collect();
        let post = surgery(&enc)?;
        let a = embed_transitions(&post, &xs, &xs)?;
        let b = embed_images(&enc, &xs)?;
        for (ra, rb) in a.iter().zip(&b) {
            for (u, v) in ra.iter().zip(rb) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    ensure(
        worst <= 1e-5,
        format!("max |h(x,x) - f(x)| = {worst:.2e} over 100 cases, {:.1}s", t.elapsed().as_secs_f64()),
    )
}

fn infonce_value(zl: Vec<f64>, zg: Vec<f64>, k: usize, d: usize, tau: f64) -> goal_align::Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![k, d], zl)?)?;
    let b = g.constant(Tensor::new(vec![k, d], zg)?)?;
    let l = infonce_task_loss(&mut g, a, b, tau)?;
    Ok(g.value(l.total)[0])
}

fn infonce_analytics() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [2usize, 8, 64] {
        let d = 4;
        let row = [0.5f64, 0.5, 0.5, 0.5];
        let z: Vec<f64> = (0..k).flat_map(|_| row).collect();
        let got = infonce_value(z.clone(), z, k, d, 0.1)?;
        let want = 2.0 * (k as f64).ln();
        ok &= (got - want).abs() < 1e-4;
        lines.push(format!("k={k}: {got:.6} vs {want:.6}"));
    }
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let got = infonce_value(eye.clone(), eye, 2, 2, 1.0)?;
    let e = std::f64::consts::E;
    let want = 2.0 * -(e / (e + 1.0)).ln();
    ok &= (got - want).abs() < 1e-4 && (got - 0.6265).abs() < 1e-4;
    lines.push(format!("k=2 identity: {got:.6} vs {want:.6}"));
    ensure(ok, lines.join("; "))
}

fn relabeling_frequency() -> Check {
    let mut rng = SeedRng::new(0).named("relabel-acceptance");
    let draws = 10_000;
    let mut final_b = 0;
    let mut relabeled_a = 0;
    for _ in 0..draws {
        let h = 10 + rng.below(40);
        let t = rng.below(h);
        if sample_goal(h, t, Origin::Unlabeled, &mut rng).final_branch {
            final_b += 1;
        }
        let a = sample_goal(h, t, Origin::Labeled, &mut rng);
        if a.goal_index != h || !a.final_branch {
            relabeled_a += 1;
        }
    }
    let frac = final_b as f64 / draws as f64;
    ensure(
        (frac - 0.5).abs() <= 0.02 && relabeled_a == 0,
        format!("D_B final-state fraction {frac:.4}, D_A relabeled {relabeled_a}/{draws}"),
    )
}

fn schedule() -> Check {
    let vals = [
        lr_at(0, 3e-4, 2000, 2_000_000)?,
        lr_at(2000, 3e-4, 2000, 2_000_000)?,
        lr_at(2000 + 2_000_000, 3e-4, 2000, 2_000_000)?,
    ];
    ensure(
        vals == [0.0, 3e-4, 0.0],
        format!("lr(0) = {:e}, lr(2000) = {:e}, lr(warmup+decay) = {:e}", vals[0], vals[1], vals[2]),
    )
}

fn dataset_mixing() -> Check {
    let cfg = DataConfig {
        ratio_mode: true,
        ..DataConfig::default()
    };
    let (na, nb) = (cfg.n_labeled, cfg.unlabeled_count());
    let ha = vec![40; na];
    let hb = vec![40; nb];
    let mut s = BatchSampler::new(&ha, &hb, false, SeedRng::new(0).named("mixing"))?;
    let (batches, batch) = (10_000, 64);
    let mut from_a = 0usize;
    for _ in 0..batches {
        from_a += s.sample(batch).iter().filter(|i| i.origin == Origin::Labeled).count();
    }
    let n = (batches * batch) as f64;
    let p = na as f64 / (na + nb) as f64;
    let got = from_a as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    ensure(
        (got - p).abs() <= 3.0 * se,
        format!("{na}:{nb}, D_A fraction {got:.5} vs {p:.5} ({:.2} SE)", (got - p) / se),
    )
}

fn tiny_config() -> Config {
    Config::parse(
        "data.n_labeled = 64\n\
         data.n_unlabeled = 64\n\
         data.n_eval = 64\n\
         pretrain.n_scenes = 64\n\
         pretrain.steps = 5\n\
         pretrain.warmup = 2\n\
         align.steps = 5\n\
         align.warmup = 2\n\
         policy.steps = 5\n\
         policy.warmup = 2\n\
         eval.trials = 1\n\
         eval.in_distribution_tasks = 2\n\
         eval.in_distribution_trials = 1\n\
         ablation.sweep = 32,64\n\
         ablation.seeds = 3\n",
    )
    .expect("tiny config parses")
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn round_trips() -> Check {
    let tmp = tempfile::tempdir()?;
    let mut rng = SeedRng::new(11);
    let enc = init_encoders(&mut rng)?;
    let ck = tmp.path().join("enc.ckpt");
    checkpoint::save(&enc, &ck)?;
    let back = checkpoint::load(&ck)?;
    let bitwise = enc
        .iter()
        .zip(back.iter())
        .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && enc.len() == back.len();

    let cfg = tiny_config();
    let data = generate_datasets(&cfg.data, 5)?;
    let ddir = tmp.path().join("data");
    data.save(&ddir)?;
    let data_ok = Datasets::load(&ddir)? == data;

    let mut reports = Vec::new();
    for (i, threads) in [1usize, 2].into_iter().enumerate() {
        let t0 = Instant::now();
        let r = run_ablation(&cfg, threads, &|m| eprintln!("  [{:.1}s] {m}", t0.elapsed().as_secs_f64()))?;
        let dir = tmp.path().join(format!("run{i}"));
        write_report(&r, &cfg.to_text(), &dir)?;
        reports.push(read_tree(&dir));
    }
    let same = reports[0] == reports[1];
    ensure(
        bitwise && data_ok && same,
        format!(
            "checkpoint bitwise {bitwise}, dataset {data_ok}, {} report files identical across reruns {same}",
            reports[0].len()
        ),
    )
}

/// The shared desk-scale run behind the last three criteria.
struct Desk {
    report: AblationReport,
    minutes: f64,
    align_minutes: f64,
    cfg: Config,
}

fn desk_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let mut cfg = Config::load(&path).expect("configs/desk.conf");
    cfg.ablation.seeds = vec![0, 1, 2];
    cfg
}

fn run_desk() -> goal_align::Result<Desk> {
    let cfg = desk_config();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    // One alignment timed on its own; the ablation reuses the same recipe.
    let inputs = prepare_seed(&cfg, 0)?;
    let t = Instant::now();
    align_encoders(
        &cfg,
        &inputs,
        AlignKey {
            pretrained: true,
            objective: Objective::InfoNce,
            start_input: true,
            n_labeled: cfg.data.n_labeled,
        },
    )?;
    let align_minutes = t.elapsed().as_secs_f64() / 60.0;
    drop(inputs);
    let t = Instant::now();
    let report = run_ablation(&cfg, threads, &|m| eprintln!("  [desk] {m}"))?;
    Ok(Desk {
        report,
        minutes: t.elapsed().as_secs_f64() / 60.0,
        align_minutes,
        cfg,
    })
}

fn retrieval_counts(desk: &Desk, v: Variant, top5: bool) -> (usize, usize) {
    let per_seed = desk.cfg.data.n_eval / desk.cfg.eval.retrieval_batch * desk.cfg.eval.retrieval_batch;
    desk.report
        .rows
        .iter()
        .filter(|r| r.variant == v)
        .filter_map(|r| r.outcome.as_ref().ok())
        .fold((0, 0), |(s, n), x| {
            let acc = if top5 { x.top5 } else { x.top1 };
            (s + (acc * per_seed as f64).round() as usize, n + per_seed)
        })
}

fn grounding(desk: &Desk) -> Check {
    let chance = 1.0 / desk.cfg.eval.retrieval_batch as f64;
    let mut parts = Vec::new();
    let mut ok = desk.align_minutes < 15.0 && desk.cfg.align.steps <= 5000;
    for r in desk.report.rows.iter().filter(|r| r.variant == Variant::GrifFrozen) {
        match &r.outcome {
            Ok(s) => {
                ok &= s.top1 >= 10.0 * chance;
                parts.push(format!("seed {} top-1 {:.3}", r.seed, s.top1));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("seed {} failed: {e}", r.seed));
            }
        }
    }
    let (sg, ng) = retrieval_counts(desk, Variant::GrifFrozen, true);
    let (sn, nn) = retrieval_counts(desk, Variant::NoStart, true);
    let (pg, pn) = (sg as f64 / ng.max(1) as f64, sn as f64 / nn.max(1) as f64);
    let (z, p) = two_proportion_z(sg, ng, sn, nn);
    ok &= ng > 0 && nn > 0 && pg - pn >= 0.10 && p < 0.05;
    ensure(
        ok,
        format!(
            "{} (chance {chance:.4}); top-5 GRIF {pg:.3} vs No-Start {pn:.3} (+{:.1} pts, z {z:.2}, p {p:.1e}); align {:.1} min",
            parts.join(", "),
            100.0 * (pg - pn),
            desk.align_minutes
        ),
    )
}

fn control(desk: &Desk) -> Check {
    let r = &desk.report;
    let failed: Vec<String> = r
        .rows
        .iter()
        .filter(|x| x.outcome.is_err())
        .map(|x| format!("{}@{}", x.variant.name(), x.seed))
        .collect();
    let rate = |v: Variant| {
        let (s, n) = r.pooled_heldout(v);
        (s, n, s as f64 / n.max(1) as f64)
    };
    let (sg, ng, pg) = rate(Variant::GrifFrozen);
    let (sl, nl, pl) = rate(Variant::GrifLabeledOnly);
    let (_, _, plcbc) = rate(Variant::Lcbc);
    let (z, p) = two_proportion_z(sg, ng, sl, nl);
    let tasks = desk.cfg.data.held_out.tasks().len();
    let others: Vec<String> = Variant::ALL
        .iter()
        .map(|&v| format!("{} {:.3}", v.name(), rate(v).2))
        .collect();
    let lcbc_lowest = Variant::ALL
        .iter()
        .filter(|&&v| v != Variant::Lcbc)
        .all(|&v| plcbc <= rate(v).2);
    let ok = failed.is_empty()
        && tasks >= 15
        && desk.cfg.eval.trials >= 10
        && pg > pl
        && lcbc_lowest
        && desk.minutes < 120.0;
    ensure(
        ok,
        format!(
            "held-out success {}; GRIF vs labeled-only z {z:.2} p {p:.3}; {tasks} tasks x {} trials x 3 seeds; {:.1} min{}",
            others.join(", "),
            desk.cfg.eval.trials,
            desk.minutes,
            if failed.is_empty() { String::new() } else { format!("; failed rows {}", failed.join(" ")) }
        ),
    )
}

fn annotation_sweep(desk: &Desk) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for &seed in &desk.cfg.ablation.seeds {
        let mut pts: Vec<_> = desk.report.sweep.iter().filter(|p| p.seed == seed).collect();
        pts.sort_by_key(|p| p.n_labeled);
        let drops: Vec<f64> = pts
            .windows(2)
            .map(|w| w[0].top5 - w[1].top5)
            .filter(|&d| d > 0.0)
            .collect();
        ok &= pts.len() == desk.cfg.ablation.sweep.len()
            && drops.len() <= 1
            && drops.iter().all(|&d| d <= 0.02);
        parts.push(format!(
            "seed {seed}: {}",
            pts.iter()
                .map(|p| format!("{}={:.3}", p.n_labeled, p.top5))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    ensure(ok, format!("top-5 by annotation count; {}", parts.join("; ")))
}

fn run(name: &str, filters: &[String], failures: &mut usize, f: impl FnOnce() -> Check) {
    if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
        return;
    }
    let line = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok((true, d))) => format!("PASS {name}: {d}"),
        Ok(Ok((false, d))) => {
            *failures += 1;
            format!("FAIL {name}: {d}")
        }
        Ok(Err(e)) => {
            *failures += 1;
            format!("FAIL {name}: error: {e}")
        }
        Err(_) => {
            *failures += 1;
            format!("FAIL {name}: panicked")
        }
    };
    println!("{line}");
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let f = &filters;
    run("gradient-suite", f, &mut failures, gradient_suite);
    run("surgery-identity", f, &mut failures, surgery_identity);
    run("infonce-analytics", f, &mut failures, infonce_analytics);
    run("relabeling-frequency", f, &mut failures, relabeling_frequency);
    run("schedule", f, &mut failures, schedule);
    run("dataset-mixing", f, &mut failures, dataset_mixing);
    run("round-trips", f, &mut failures, round_trips);
    let desk_names = ["desk-grounding", "desk-control", "annotation-sweep"];
    if filters.is_empty() || desk_names.iter().any(|n| filters.iter().any(|x| n.contains(x.as_str()))) {
        match run_desk() {
            Ok(desk) => {
                run("desk-grounding", f, &mut failures, || grounding(&desk));
                run("desk-control", f, &mut failures, || control(&desk));
                run("annotation-sweep", f, &mut failures, || annotation_sweep(&desk));
            }
            Err(e) => {
                for n in desk_names {
                    failures += 1;
                    println!("FAIL {n}: desk run failed: {e}");
                }
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

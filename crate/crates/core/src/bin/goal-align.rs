use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use goal_align::align::{train_align, AlignData};
use goal_align::checkpoint;
use goal_align::config::Config;
use goal_align::encoders::{pretrain_clip_style, surgery};
use goal_align::eval::ablation::{retrieval_scores, run_ablation};
use goal_align::eval::report::write_report;
use goal_align::eval::{in_distribution_tasks, rollout_eval, PolicyController, RolloutReport};
use goal_align::policy::{train_policy, PolicyData};
use goal_align::sim::{generate_caption_scenes, generate_datasets, Datasets};
use goal_align::Error;

#[derive(Parser)]
#[command(name = "goal-align", version, about = "Instruction-to-transition alignment pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate labeled, unlabeled and evaluation trajectories.
    GenData {
        #[command(flatten)]
        c: Common,
    },
    /// Caption/render contrastive pretraining of text and image encoders.
    Pretrain {
        #[command(flatten)]
        c: Common,
    },
    /// Build the transition encoder from the image encoder.
    Surgery {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        encoders: PathBuf,
    },
    TrainAlign {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
    },
    TrainPolicy {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
    },
    EvalRetrieval {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        /// Score `(g, g)` instead of `(s0, g)`.
        #[arg(long)]
        goal_only: bool,
    },
    EvalRollout {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train and score every configured variant at `--seed` plus each
    /// `ablation.seeds` offset.
    Ablate {
        #[command(flatten)]
        c: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn json_str(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => write!(out, "\\u{:04x}", c as u32).unwrap(),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_config(c: &Common) -> Result<Config, Failure> {
    match &c.config {
        Some(p) => {
            require(p, "--config")?;
            Ok(Config::load(p)?)
        }
        None => Ok(Config::default()),
    }
}

fn prepare_out(c: &Common, cfg: &Config) -> Result<(), Failure> {
    fs::create_dir_all(&c.out).map_err(|e| Failure::Runtime(io_err(&c.out, e)))?;
    write(&c.out.join("config.txt"), &cfg.to_text())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Runtime(io_err(path, e)))
}

fn log_tsv<T>(rows: &[T], f: impl Fn(&T) -> String) -> String {
    let mut out = String::from("step\tloss\tlr\n");
    for r in rows {
        out.push_str(&f(r));
        out.push('\n');
    }
    out
}

fn rollout_tsv(label: &str, r: &RolloutReport, out: &mut String) {
    for t in &r.per_task {
        writeln!(out, "{label}\t{}\t{}\t{}", t.instruction, t.successes, t.trials).unwrap();
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { c } => {
            let cfg = load_config(&c)?;
            prepare_out(&c, &cfg)?;
            generate_datasets(&cfg.data, c.seed)?.save(&c.out)?;
        }
        Cmd::Pretrain { c } => {
            let cfg = load_config(&c)?;
            prepare_out(&c, &cfg)?;
            let scenes = generate_caption_scenes(cfg.pretrain.n_scenes, c.seed)?;
            let (ps, log) = pretrain_clip_style(&scenes, &cfg.pretrain_config(), c.seed)?;
            checkpoint::save(&ps, c.out.join("encoders.ckpt"))?;
            write(
                &c.out.join("pretrain_log.tsv"),
                &log_tsv(&log, |l| format!("{}\t{}\t{}", l.step, l.loss, l.lr)),
            )?;
        }
        Cmd::Surgery { c, encoders } => {
            require(&encoders, "--encoders")?;
            let cfg = load_config(&c)?;
            prepare_out(&c, &cfg)?;
            checkpoint::save(&surgery(&checkpoint::load(&encoders)?)?, c.out.join("encoders.ckpt"))?;
        }
        Cmd::TrainAlign { c, data, encoders } => {
            require(&data, "--data")?;
            require(&encoders, "--encoders")?;
            let cfg = load_config(&c)?;
            let ds = Datasets::load(&data)?;
            let init = checkpoint::load(&encoders)?;
            prepare_out(&c, &cfg)?;
            let ad = AlignData::from_dataset(&ds.labeled)?;
            let (ps, log) = train_align(&ad, &cfg.align_config(), &init, c.seed)?;
            checkpoint::save(&ps, c.out.join("encoders.ckpt"))?;
            write(
                &c.out.join("align_log.tsv"),
                &log_tsv(&log, |l| format!("{}\t{}\t{}", l.step, l.loss, l.lr)),
            )?;
        }
        Cmd::TrainPolicy { c, data, encoders } => {
            require(&data, "--data")?;
            require(&encoders, "--encoders")?;
            let cfg = load_config(&c)?;
            let ds = Datasets::load(&data)?;
            let enc = checkpoint::load(&encoders)?;
            prepare_out(&c, &cfg)?;
            let pd = PolicyData::new(&ds.labeled, &ds.unlabeled)?;
            let (ps, log) = train_policy(&pd, &enc, &cfg.policy_config(), c.seed)?;
            checkpoint::save(&ps, c.out.join("policy.ckpt"))?;
            write(
                &c.out.join("policy_log.tsv"),
                &log_tsv(&log, |l| format!("{}\t{}\t{}", l.step, l.loss, l.lr)),
            )?;
        }
        Cmd::EvalRetrieval {
            c,
            data,
            encoders,
            goal_only,
        } => {
            require(&data, "--data")?;
            require(&encoders, "--encoders")?;
            let cfg = load_config(&c)?;
            let ds = Datasets::load(&data)?;
            let enc = checkpoint::load(&encoders)?;
            prepare_out(&c, &cfg)?;
            let batch = cfg.eval.retrieval_batch;
            let (top1, top5) =
                retrieval_scores(&enc, &ds.eval, batch, !goal_only, cfg.eval.no_start_mode)?;
            write(
                &c.out.join("retrieval.tsv"),
                &format!("batch\ttop1\ttop5\n{batch}\t{top1:.6}\t{top5:.6}\n"),
            )?;
        }
        Cmd::EvalRollout { c, policy } => {
            require(&policy, "--policy")?;
            let cfg = load_config(&c)?;
            let ps = checkpoint::load(&policy)?;
            prepare_out(&c, &cfg)?;
            let mut ctl = PolicyController::new(&ps);
            let e = &cfg.eval;
            let held = rollout_eval(&mut ctl, &cfg.data.held_out.tasks(), e.trials, e.horizon, c.seed)?;
            let tasks = in_distribution_tasks(&cfg.data.held_out, e.in_distribution_tasks, c.seed);
            let indist = rollout_eval(&mut ctl, &tasks, e.in_distribution_trials, e.horizon, c.seed)?;
            let mut out = String::from("split\tinstruction\tsuccesses\ttrials\n");
            rollout_tsv("heldout", &held, &mut out);
            rollout_tsv("indist", &indist, &mut out);
            write(&c.out.join("rollout.tsv"), &out)?;
        }
        Cmd::Ablate { c } => {
            let mut cfg = load_config(&c)?;
            // `ablation.seeds` are offsets from `--seed`.
            for s in &mut cfg.ablation.seeds {
                *s += c.seed;
            }
            prepare_out(&c, &cfg)?;
            let report = run_ablation(&cfg, c.threads, &|m| eprintln!("{m}"))?;
            write_report(&report, &cfg.to_text(), &c.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{{\"error\":\"usage\",\"message\":{}}}", json_str(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("{{\"error\":\"usage\",\"message\":{}}}", json_str(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{{\"error\":\"{}\",\"message\":{}}}", e.kind(), json_str(&e.to_string()));
            ExitCode::from(1)
        }
    }
}

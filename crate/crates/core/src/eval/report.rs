//! Tab-separated ablation tables and per-run training curves.
//!
//! Output depends only on the config and seeds, never on timing or thread
//! count, so two runs of the same config produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ablation::{AblationReport, Curves, Row, Scores, SweepPoint, Variant};
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 14] = [
    "variant",
    "seed",
    "status",
    "config_hash",
    "retrieval_batch",
    "top1",
    "top5",
    "heldout_successes",
    "heldout_trials",
    "heldout_rate",
    "indist_successes",
    "indist_trials",
    "indist_rate",
    "error",
];

pub const SWEEP_COLUMNS: [&str; 4] = ["seed", "n_labeled", "top1", "top5"];

/// Every `CURVE_STRIDE`-th logged step goes into the curve files.
pub const CURVE_STRIDE: usize = 10;

fn clean(s: &str) -> String {
    s.chars()
        .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect()
}

pub fn report_tsv(report: &AblationReport) -> String {
    let mut out = REPORT_COLUMNS.join("\t");
    out.push('\n');
    for r in &report.rows {
        let head = format!(
            "{}\t{}\t{}\t{}\t{}",
            r.variant.name(),
            r.seed,
            if r.outcome.is_ok() { "ok" } else { "failed" },
            report.config_hash,
            report.retrieval_batch
        );
        match &r.outcome {
            Ok(s) => writeln!(
                out,
                "{head}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{}\t{}\t{:.6}\t",
                s.top1,
                s.top5,
                s.heldout_successes,
                s.heldout_trials,
                s.heldout_rate(),
                s.indist_successes,
                s.indist_trials,
                s.indist_rate(),
            ),
            Err(e) => writeln!(out, "{head}\t\t\t\t\t\t\t\t\t{}", clean(e)),
        }
        .expect("write to String");
    }
    out
}

/// Rows, config hash and retrieval batch of a `report.tsv`.
pub fn parse_report_tsv(text: &str) -> Result<(Vec<Row>, String, usize)> {
    let bad = |line: usize, msg: String| Error::InvalidArgument(format!("report.tsv:{line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty".into()))?;
    if header.split('\t').ne(REPORT_COLUMNS) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    let mut hash = String::new();
    let mut batch = 0;
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != REPORT_COLUMNS.len() {
            return Err(bad(ln, format!("{} fields", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse().map_err(|_| bad(ln, format!("{}: `{}`", REPORT_COLUMNS[k], f[k])))
        };
        let int = |k: usize| -> Result<usize> {
            f[k].parse().map_err(|_| bad(ln, format!("{}: `{}`", REPORT_COLUMNS[k], f[k])))
        };
        let variant =
            Variant::from_name(f[0]).ok_or_else(|| bad(ln, format!("unknown variant `{}`", f[0])))?;
        let seed = f[1].parse().map_err(|_| bad(ln, format!("seed `{}`", f[1])))?;
        hash = f[3].to_string();
        batch = int(4)?;
        let outcome = match f[2] {
            "ok" => Ok(Scores {
                top1: num(5)?,
                top5: num(6)?,
                heldout_successes: int(7)?,
                heldout_trials: int(8)?,
                indist_successes: int(10)?,
                indist_trials: int(11)?,
            }),
            "failed" => Err(f[13].to_string()),
            s => return Err(bad(ln, format!("status `{s}`"))),
        };
        rows.push(Row {
            variant,
            seed,
            outcome,
        });
    }
    Ok((rows, hash, batch))
}

pub fn sweep_tsv(points: &[SweepPoint]) -> String {
    let mut out = SWEEP_COLUMNS.join("\t");
    out.push('\n');
    for p in points {
        writeln!(out, "{}\t{}\t{:.6}\t{:.6}", p.seed, p.n_labeled, p.top1, p.top5)
            .expect("write to String");
    }
    out
}

pub fn parse_sweep_tsv(text: &str) -> Result<Vec<SweepPoint>> {
    let bad = |line: usize| Error::InvalidArgument(format!("sweep.tsv:{line}: malformed"));
    let mut lines = text.lines();
    if lines.next().map(|h| h.split('\t').eq(SWEEP_COLUMNS)) != Some(true) {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(i + 2));
            }
            Ok(SweepPoint {
                seed: f[0].parse().map_err(|_| bad(i + 2))?,
                n_labeled: f[1].parse().map_err(|_| bad(i + 2))?,
                top1: f[2].parse().map_err(|_| bad(i + 2))?,
                top5: f[3].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

/// One JSON object per line: `stage`, `step`, `loss`, `lr`.
pub fn curves_ndjson(curves: &[(u64, &Curves)]) -> String {
    let mut out = String::new();
    let num = |x: f64| {
        if x.is_finite() {
            format!("{x:.6}")
        } else {
            "null".to_string()
        }
    };
    for (seed, c) in curves {
        for l in c.align.iter().step_by(CURVE_STRIDE) {
            writeln!(
                out,
                "{{\"seed\":{seed},\"stage\":\"align\",\"step\":{},\"loss\":{},\"lr\":{}}}",
                l.step,
                num(l.loss as f64),
                num(l.lr)
            )
            .expect("write to String");
        }
        for l in c.policy.iter().step_by(CURVE_STRIDE) {
            writeln!(
                out,
                "{{\"seed\":{seed},\"stage\":\"policy\",\"step\":{},\"loss\":{},\"lr\":{}}}",
                l.step,
                num(l.loss as f64),
                num(l.lr)
            )
            .expect("write to String");
        }
    }
    out
}

/// Write `report.tsv`, `sweep.tsv`, `config.txt` and `curves/<variant>.ndjson`
/// under `dir`.
pub fn write_report(report: &AblationReport, config_text: &str, dir: &Path) -> Result<()> {
    let curves_dir = dir.join("curves");
    fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    let write = |name: &Path, body: &str| fs::write(name, body).map_err(|e| Error::io(name, e));
    write(&dir.join("report.tsv"), &report_tsv(report))?;
    write(&dir.join("sweep.tsv"), &sweep_tsv(&report.sweep))?;
    write(&dir.join("config.txt"), config_text)?;
    for v in Variant::ALL {
        let runs: Vec<(u64, &Curves)> = report
            .curves
            .iter()
            .filter(|((cv, _), _)| *cv == v)
            .map(|((_, seed), c)| (*seed, c))
            .collect();
        if !runs.is_empty() {
            write(&curves_dir.join(format!("{}.ndjson", v.name())), &curves_ndjson(&runs))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample() -> AblationReport {
        AblationReport {
            config_hash: "abc123".into(),
            retrieval_batch: 64,
            rows: vec![
                Row {
                    variant: Variant::GrifFrozen,
                    seed: 0,
                    outcome: Ok(Scores {
                        top1: 0.5,
                        top5: 0.8125,
                        heldout_successes: 13,
                        heldout_trials: 100,
                        indist_successes: 20,
                        indist_trials: 100,
                    }),
                },
                Row {
                    variant: Variant::Lcbc,
                    seed: 1,
                    outcome: Err("diverged\tat step 3".into()),
                },
            ],
            curves: BTreeMap::new(),
            sweep: vec![SweepPoint {
                seed: 0,
                n_labeled: 50,
                top1: 0.25,
                top5: 0.5,
            }],
        }
    }

    #[test]
    fn report_round_trips_byte_for_byte() {
        let text = report_tsv(&sample());
        let (rows, hash, batch) = parse_report_tsv(&text).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(batch, 64);
        assert_eq!(rows[0], sample().rows[0]);
        assert_eq!(rows[1].outcome, Err("diverged at step 3".to_string()));
        let again = AblationReport {
            rows,
            ..sample()
        };
        assert_eq!(report_tsv(&again), text);
    }

    #[test]
    fn sweep_round_trips() {
        let text = sweep_tsv(&sample().sweep);
        assert_eq!(parse_sweep_tsv(&text).unwrap(), sample().sweep);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        assert!(parse_report_tsv("variant\tseed\n").is_err());
        assert!(parse_sweep_tsv("").is_err());
    }
}

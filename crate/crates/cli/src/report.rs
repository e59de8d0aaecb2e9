use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use privfed::config::RunConfig;
use privfed::federation::{read_run_log, RoundRecord};

use crate::run::{SweepIndex, RESOLVED, RUN_LOG, SWEEP_INDEX};
use crate::Failure;

fn input_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn read_log(path: &Path) -> Result<Vec<RoundRecord>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input_err)?;
    read_run_log(&text)
        .with_context(|| format!("{}", path.display()))
        .map_err(input_err)
}

/// The target stored with a run, if its resolved config sits next to the log.
fn stored_target(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join(RESOLVED)).ok()?;
    RunConfig::from_json(&text).ok()?.target_metric
}

pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.metrics.kind.reached(r.metrics.value, target))
        .map(|r| r.round)
}

/// Text summary of one run log.
pub fn summarize(records: &[RoundRecord], target: Option<f64>) -> String {
    let mut s = String::new();
    let Some(last) = records.last() else {
        return "0 rounds\n".to_string();
    };
    let _ = writeln!(s, "{} rounds", records.len());
    let _ = write!(s, "final {:?}: {:.6}", last.metrics.kind, last.metrics.value);
    if let Some(v) = last.metrics.special {
        let _ = write!(s, " (special test set {v:.6})");
    }
    s.push('\n');
    if let Some(t) = target {
        match rounds_to_target(records, t) {
            Some(r) => writeln!(s, "target {t}: reached at round {r}"),
            None => writeln!(s, "target {t}: not reached"),
        }
        .ok();
    }
    match records.iter().rev().find_map(|r| r.privacy) {
        Some(p) => writeln!(
            s,
            "privacy: epsilon1 {} epsilon2 {}; per epoch {} over {} epochs, cumulative {}",
            p.epsilon1, p.epsilon2, p.per_epoch, p.epochs, p.cumulative
        ),
        None => writeln!(s, "privacy: none (baseline run)"),
    }
    .ok();

    let per_round: Vec<usize> = records.iter().map(|r| r.selected.len()).collect();
    let (lo, hi) = (per_round.iter().min().unwrap(), per_round.iter().max().unwrap());
    if lo == hi {
        let _ = writeln!(s, "selected per round: {lo}");
    } else {
        let _ = writeln!(s, "selected per round: {lo} to {hi}");
    }

    let mut table: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        for &u in &r.uploaders {
            table.entry(u).or_default().0 += 1;
        }
        for &p in &r.selected {
            table.entry(p).or_default().1 += 1;
        }
    }
    if !table.is_empty() {
        let _ = writeln!(
            s,
            "{:>11} {:>8} {:>8} {:>10}",
            "participant", "uploads", "selected", "frequency"
        );
        for (id, (up, sel)) in &table {
            let _ = writeln!(
                s,
                "{id:>11} {up:>8} {sel:>8} {:>10.3}",
                *sel as f64 / records.len() as f64
            );
        }
    }
    s
}

fn sweep_report(dir: &Path, target: Option<f64>) -> Result<String, Failure> {
    let text = fs::read_to_string(dir.join(SWEEP_INDEX))
        .with_context(|| format!("reading {}", dir.join(SWEEP_INDEX).display()))
        .map_err(input_err)?;
    let index: SweepIndex = serde_json::from_str(&text)
        .with_context(|| format!("{}", dir.join(SWEEP_INDEX).display()))
        .map_err(input_err)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>16} {:>8} {:>14} {:>16}",
        index.field, "rounds", "final metric", "rounds to target"
    );
    for point in &index.points {
        let run = dir.join(&point.dir);
        let log_path = run.join(RUN_LOG);
        if !log_path.exists() {
            let _ = writeln!(s, "{:>16} {:>8}", point.value.to_string(), "missing");
            continue;
        }
        let records = read_log(&log_path)?;
        let t = target.or_else(|| stored_target(&run));
        let last = records
            .last()
            .map_or("-".to_string(), |r| format!("{:.6}", r.metrics.value));
        let reached = match t {
            None => "no target".to_string(),
            Some(t) => rounds_to_target(&records, t).map_or("not reached".to_string(), |r| r.to_string()),
        };
        let _ = writeln!(
            s,
            "{:>16} {:>8} {:>14} {:>16}",
            point.value.to_string(),
            records.len(),
            last,
            reached
        );
    }
    Ok(s)
}

pub fn cmd_report(path: &Path, target: Option<f64>) -> Result<(), Failure> {
    let text = if path.is_dir() {
        if path.join(SWEEP_INDEX).exists() {
            sweep_report(path, target)?
        } else if path.join(RUN_LOG).exists() {
            summarize(&read_log(&path.join(RUN_LOG))?, target.or_else(|| stored_target(path)))
        } else {
            return Err(input_err(anyhow!(
                "{}: neither a run directory nor a sweep directory",
                path.display()
            )));
        }
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        summarize(&read_log(path)?, target.or_else(|| stored_target(dir)))
    };
    print!("{text}");
    Ok(())
}

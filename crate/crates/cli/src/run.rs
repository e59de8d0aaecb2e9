use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use privfed::config::{DataSource, RunConfig};
use privfed::datasets::DatasetManifest;
use privfed::federation::{
    baseline_centralized, baseline_standalone, build_environment, run_simulation, Environment, RoundRecord, RunLog,
};
use privfed::model::{save_checkpoint, Architecture, ModelParams, Task};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Failure, Which};

pub const RUN_LOG: &str = "run_log.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED: &str = "config.resolved.json";
pub const TIMINGS: &str = "timings.jsonl";
pub const SWEEP_INDEX: &str = "sweep.json";

const OUTPUT_ENV: &str = "PRIVFED_OUTPUT_DIR";

/// What the data looked like once loaded and split.
#[derive(Serialize)]
struct RunManifest<'a> {
    task: Task,
    source: &'a DataSource,
    rows: usize,
    feature_names: &'a [String],
    encodings: Option<&'a DatasetManifest>,
    shard_sizes: Vec<usize>,
    validation_rows: usize,
    test_rows: usize,
    special_test_rows: Option<usize>,
    architecture: &'a Architecture,
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    RunConfig::from_json(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(config_err)
}

/// `PRIVFED_OUTPUT_DIR` wins over the config's `output_dir`.
fn output_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        return Ok(PathBuf::from(dir));
    }
    cfg.output_dir
        .clone()
        .ok_or_else(|| config_err(anyhow!("output_dir: not set (set it in the config or {OUTPUT_ENV})")))
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<Environment, Failure> {
    let mut env = build_environment(cfg).map_err(config_err)?;
    env.config.output_dir = Some(out.to_path_buf());
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime_err)?;
    let manifest = RunManifest {
        task: env.task,
        source: &env.config.data,
        rows: env.data.len(),
        feature_names: &env.data.feature_names,
        encodings: env.manifest.as_ref(),
        shard_sizes: env.shards.iter().map(|s| s.len()).collect(),
        validation_rows: env.validation.len(),
        test_rows: env.test.len(),
        special_test_rows: env.special_test.as_ref().map(|d| d.len()),
        architecture: &env.arch,
    };
    write_json(&out.join(MANIFEST), &manifest).map_err(runtime_err)?;
    write_json(&out.join(RESOLVED), &env.config).map_err(runtime_err)?;
    Ok(env)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Streams records, timings and periodic checkpoints as rounds finish, so
/// a failed run still leaves everything up to the last good round.
struct Sink {
    log: BufWriter<File>,
    timings: BufWriter<File>,
    dir: PathBuf,
    arch: Architecture,
    interval: Option<usize>,
    last: Instant,
}

impl Sink {
    fn create(dir: &Path, env: &Environment) -> anyhow::Result<Self> {
        let open = |name: &str| -> anyhow::Result<BufWriter<File>> {
            let path = dir.join(name);
            Ok(BufWriter::new(
                File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            ))
        };
        Ok(Sink {
            log: open(RUN_LOG)?,
            timings: open(TIMINGS)?,
            dir: dir.to_path_buf(),
            arch: env.arch.clone(),
            interval: env.config.checkpoint_interval.filter(|&n| n > 0),
            last: Instant::now(),
        })
    }

    fn record(&mut self, r: &RoundRecord, params: &ModelParams) -> privfed::Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;

        let now = Instant::now();
        let seconds = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        writeln!(
            self.timings,
            "{}",
            serde_json::json!({ "round": r.round, "seconds": seconds })
        )?;
        self.timings.flush()?;

        if let Some(n) = self.interval {
            if r.round.is_multiple_of(n) {
                let dir = self.dir.join("checkpoints");
                fs::create_dir_all(&dir)?;
                save_checkpoint(&dir.join(format!("round_{:05}.ckpt", r.round)), params, &self.arch)?;
            }
        }
        Ok(())
    }
}

enum Mode {
    Protocol { threads: usize },
    Baseline { which: Which, participant: usize },
}

fn execute(cfg: &RunConfig, out: &Path, mode: Mode) -> Result<RunLog, Failure> {
    let env = prepare(cfg, out)?;
    if let Mode::Baseline {
        which: Which::Standalone,
        participant,
    } = mode
    {
        if participant >= env.shards.len() {
            return Err(config_err(anyhow!(
                "participant: {participant} out of range, the config has {} participants",
                env.shards.len()
            )));
        }
    }
    let mut sink = Sink::create(out, &env).map_err(runtime_err)?;
    let mut observer = |r: &RoundRecord, p: &ModelParams| sink.record(r, p);
    let log = match mode {
        Mode::Protocol { threads } => run_simulation(&env, threads, &mut observer),
        Mode::Baseline {
            which: Which::Centralized,
            ..
        } => baseline_centralized(&env, &mut observer),
        Mode::Baseline {
            which: Which::Standalone,
            participant,
        } => baseline_standalone(&env, participant, &mut observer),
    }
    .context("run aborted; the run log holds every completed round")
    .map_err(runtime_err)?;
    save_checkpoint(&out.join(CHECKPOINT), &log.params, &env.arch)
        .context("writing the final checkpoint")
        .map_err(runtime_err)?;
    Ok(log)
}

fn summary(log: &RunLog, out: &Path) {
    match log.records.last() {
        Some(r) => println!(
            "{} rounds, final {:?} {:.6}; artifacts in {}",
            log.records.len(),
            r.metrics.kind,
            r.metrics.value,
            out.display()
        ),
        None => println!("0 rounds; artifacts in {}", out.display()),
    }
}

pub fn cmd_run(config: &Path, threads: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let out = output_dir(&cfg)?;
    let log = execute(&cfg, &out, Mode::Protocol { threads })?;
    summary(&log, &out);
    Ok(())
}

pub fn cmd_baseline(config: &Path, which: Which, participant: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let out = output_dir(&cfg)?;
    let log = execute(&cfg, &out, Mode::Baseline { which, participant })?;
    summary(&log, &out);
    Ok(())
}

/// A sweep file: a base config (inline or a path relative to the sweep
/// file), a dotted field path such as `iterations` or
/// `participants.1.profile.unreliable`, and the values to try.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    base: Value,
    field: String,
    values: Vec<Value>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

/// Written at the sweep root; `report` reads it to order the points.
#[derive(Serialize, Deserialize)]
pub struct SweepIndex {
    pub field: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: Value,
    pub dir: String,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| anyhow!("field `{path}`: no key `{part}` in the base config"))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| anyhow!("field `{path}`: `{part}` is not an index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("field `{path}`: index {idx} out of range ({len} items)"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("field `{path}`: `{part}` does not name an object or array"),
        };
    }
    bail!("field: empty path")
}

fn point_dir(i: usize, field: &str, value: &Value) -> String {
    let name = field.rsplit('.').next().unwrap_or(field);
    let shown: String = value
        .to_string()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{i:02}_{name}={shown}")
}

pub fn cmd_sweep(path: &Path, threads: usize) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let spec: SweepSpec = serde_json::from_str(&text)
        .with_context(|| format!("sweep {}", path.display()))
        .map_err(config_err)?;
    let base = match spec.base {
        Value::String(rel) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = fs::read_to_string(&p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(config_err)?;
            serde_json::from_str(&text)
                .with_context(|| format!("config {}", p.display()))
                .map_err(config_err)?
        }
        v @ Value::Object(_) => v,
        _ => return Err(config_err(anyhow!("base: expected a config object or a path"))),
    };
    if spec.values.is_empty() {
        return Err(config_err(anyhow!("values: empty")));
    }
    let root = match std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => spec.output_dir.ok_or_else(|| {
            config_err(anyhow!(
                "output_dir: not set (set it in the sweep file or {OUTPUT_ENV})"
            ))
        })?,
    };

    // Validate every point before running any.
    let mut configs = Vec::new();
    for (i, value) in spec.values.iter().enumerate() {
        let mut v = base.clone();
        set_path(&mut v, &spec.field, value.clone()).map_err(config_err)?;
        let cfg: RunConfig = serde_json::from_value(v)
            .with_context(|| format!("point {i} ({} = {value})", spec.field))
            .map_err(config_err)?;
        build_environment(&cfg)
            .with_context(|| format!("point {i} ({} = {value})", spec.field))
            .map_err(config_err)?;
        configs.push((point_dir(i, &spec.field, value), cfg));
    }
    fs::create_dir_all(&root)
        .with_context(|| format!("creating {}", root.display()))
        .map_err(runtime_err)?;
    let index = SweepIndex {
        field: spec.field.clone(),
        points: spec
            .values
            .iter()
            .zip(&configs)
            .map(|(value, (dir, _))| SweepPoint {
                value: value.clone(),
                dir: dir.clone(),
            })
            .collect(),
    };
    write_json(&root.join(SWEEP_INDEX), &index).map_err(runtime_err)?;
    for ((dir, cfg), value) in configs.iter().zip(&spec.values) {
        let out = root.join(dir);
        let log = execute(cfg, &out, Mode::Protocol { threads })?;
        let last = log.records.last().map_or(f64::NAN, |r| r.metrics.value);
        println!(
            "{} = {value}: {} rounds, final metric {last:.6}",
            spec.field,
            log.records.len()
        );
    }
    println!("sweep written to {}", root.display());
    Ok(())
}

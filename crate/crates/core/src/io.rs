//! File formats: JSONL traces, CSV tables, TOML run configs, and parameter snapshots.
//!
//! Floats are written with Rust's shortest round-trip representation, so every
//! file parses back to bit-identical values.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::policy::{Matrix, TeacherState};
use crate::reward::RewardStats;
use crate::trainer::{RunConfig, StepMetrics, TrainState};
use crate::types::RolloutTrace;

pub const TRACE_VERSION: &str = "v1";

const TRACE_KEYS: &[&str] = &[
    "v",
    "prompt_id",
    "prompt",
    "reference",
    "tokens",
    "reward",
    "correct",
    "completion_length",
];
const TOKEN_KEYS: &[&str] = &[
    "token_id",
    "student_logprob",
    "teacher_logprob",
    "teacher_entropy",
    "mask",
    "teacher_dist",
    "student_dist",
    "train_gate",
];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    v: &'static str,
    #[serde(flatten)]
    trace: &'a RolloutTrace,
}

pub fn trace_to_line(trace: &RolloutTrace) -> String {
    serde_json::to_string(&TraceLine {
        v: TRACE_VERSION,
        trace,
    })
    .expect("traces always serialize")
}

/// Parses one JSONL record. Unknown fields are dropped with a warning.
pub fn trace_from_line(line: &str) -> Result<RolloutTrace> {
    let mut value: Value = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Parse("trace record must be a JSON object".into()))?;
    match obj.get("v").and_then(Value::as_str) {
        Some(TRACE_VERSION) | None => {}
        Some(other) => return Err(Error::Parse(format!("unsupported trace version {other:?}"))),
    }
    drop_unknown(obj, TRACE_KEYS, "trace");
    if let Some(Value::Array(tokens)) = obj.get_mut("tokens") {
        for tok in tokens.iter_mut().filter_map(Value::as_object_mut) {
            drop_unknown(tok, TOKEN_KEYS, "token");
        }
    }
    obj.remove("v");
    serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))
}

fn drop_unknown(obj: &mut serde_json::Map<String, Value>, known: &[&str], what: &str) {
    let unknown: Vec<String> = obj
        .keys()
        .filter(|k| !known.contains(&k.as_str()))
        .cloned()
        .collect();
    for k in unknown {
        log::warn!("ignoring unknown {what} field {k:?}");
        obj.remove(&k);
    }
}

pub fn write_traces(path: &Path, traces: &[RolloutTrace]) -> Result<()> {
    let mut w = create(path)?;
    for t in traces {
        writeln!(w, "{}", trace_to_line(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<RolloutTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = trace_from_line(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(trace);
    }
    Ok(out)
}

/// A CSV table held in memory; rendered with comma separators and LF endings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    /// Lines written before the header, e.g. `# tau_low=0.2`.
    pub preamble: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            preamble: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.preamble {
            s.push_str(p);
            s.push('\n');
        }
        s.push_str(&self.header.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        w.write_all(self.render().as_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Shortest round-trip float formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Appends per-step metric rows, writing the header only to a fresh file.
pub struct MetricsWriter {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let existing = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if !existing {
            writeln!(out, "{}", StepMetrics::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Keys accepted in a run config file.
pub fn config_keys() -> BTreeSet<String> {
    match toml::Value::try_from(RunConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to a table"),
    }
}

/// Parses a TOML run config, rejecting unknown keys, then validates it.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let known = config_keys();
    if let Some(k) = table.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Parse(format!("unknown config key {k:?}")));
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    cfg.validate()
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run configs serialize")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    step: u64,
    seed: u64,
    rows: usize,
    cols: usize,
    sections: Vec<String>,
    stats: RewardStats,
    optimizer_step: u64,
    optimizer: crate::optim::AdamWConfig,
    teacher_schedule: crate::types::TeacherSchedule,
    config: RunConfig,
}

const SNAPSHOT_FORMAT: &str = "egrsd-snapshot-1";
const SECTIONS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

/// One JSON header line followed by one line of space-separated numbers per matrix.
pub fn write_snapshot(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.into(),
        step: state.step,
        seed: state.seed,
        rows: state.student.rows,
        cols: state.student.cols,
        sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        stats: state.stats,
        optimizer_step: state.optimizer.step,
        optimizer: state.optimizer.hp,
        teacher_schedule: state.teacher.schedule,
        config: cfg.clone(),
    };
    let mut w = create(path)?;
    let mut put = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    put(&serde_json::to_string(&header).expect("header serializes"))?;
    put("\n")?;
    for m in [
        &state.student,
        &state.teacher.params,
        &state.optimizer.m,
        &state.optimizer.v,
    ] {
        let line: Vec<String> = m.data.iter().map(|x| fmt_f64(*x)).collect();
        put(&line.join(" "))?;
        put("\n")?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<(TrainState, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Parse(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header: SnapshotHeader =
        serde_json::from_str(lines.next().ok_or_else(|| bad("empty snapshot".into()))?)
            .map_err(|e| bad(e.to_string()))?;
    if header.format != SNAPSHOT_FORMAT {
        return Err(bad(format!("unknown snapshot format {:?}", header.format)));
    }
    let mut mats = Vec::with_capacity(SECTIONS.len());
    for name in SECTIONS {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing section {name}")))?;
        let data = line
            .split_ascii_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("{name}: {e}")))?;
        if data.len() != header.rows * header.cols {
            return Err(bad(format!(
                "{name}: expected {} values, found {}",
                header.rows * header.cols,
                data.len()
            )));
        }
        mats.push(Matrix {
            rows: header.rows,
            cols: header.cols,
            data,
        });
    }
    let v = mats.pop().unwrap();
    let m = mats.pop().unwrap();
    let teacher = mats.pop().unwrap();
    let student = mats.pop().unwrap();
    let state = TrainState {
        student,
        teacher: TeacherState::new(teacher, header.teacher_schedule),
        optimizer: OptimizerState {
            m,
            v,
            step: header.optimizer_step,
            hp: header.optimizer,
        },
        stats: header.stats,
        step: header.step,
        seed: header.seed,
    };
    Ok((state, header.config))
}

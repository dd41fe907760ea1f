//! Command-line surface: argument definitions and the subcommand drivers.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checks::{self, CheckOptions, CheckResult};
use crate::diagnostics::{self, RegimeThresholds};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{self, fmt_f64, Table};
use crate::policy::{self, TaskGenerator};
use crate::trainer::{self, RunConfig};
use crate::types::Method;

#[derive(Debug, Parser)]
#[command(
    name = "egrsd",
    version,
    about = "Entropy-gated self-distillation laboratory"
)]
pub struct Cli {
    /// Overrides the seed from any config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serial execution, fixed reduction order, zeroed wall-clock columns.
    #[arg(long, global = true)]
    pub reproducible: bool,
    /// Where artifacts and reports are written.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy policy from a TOML config.
    Train(TrainArgs),
    /// Gate the tokens of a trace file offline.
    Gate(GateArgs),
    /// Regime and entropy-decile reports for a trace file.
    Analyze(AnalyzeArgs),
    /// Train one run per (gamma, window) cell.
    Sweep(SweepArgs),
    /// Run the numerical property suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a snapshot written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct GateParams {
    #[arg(long, default_value_t = 0.3)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, default_value_t = 0.1)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[command(flatten)]
    pub params: GateParams,
    /// Normalize each group of this many consecutive records separately.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[command(flatten)]
    pub params: GateParams,
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.2)]
    pub tau_low: f64,
    #[arg(long, default_value_t = 0.6)]
    pub tau_high: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Runs the gate-bound check with this floor instead of 0.1.
    #[arg(long)]
    pub inject_gate_floor: Option<f64>,
}

/// Outcome of a subcommand: the process exit code and what to print on stdout.
#[derive(Debug, Default)]
pub struct Outcome {
    pub code: u8,
    pub stdout: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { code: 0, stdout }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Gate(a) => cmd_gate(cli, a),
        Command::Analyze(a) => cmd_analyze(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Check(a) => cmd_check(cli, a),
    }
}

fn apply_globals(cli: &Cli, mut cfg: RunConfig) -> RunConfig {
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.reproducible {
        cfg.train.reproducible = true;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg
}

fn exec_for(cli: &Cli) -> Execution {
    Execution::from_reproducible(cli.reproducible)
}

fn emit(cli: &Cli, file: &str, table: &Table) -> Result<String> {
    match &cli.output_dir {
        Some(dir) => {
            let path = dir.join(file);
            table.write(&path)?;
            Ok(format!("wrote {}\n", path.display()))
        }
        None => Ok(table.render()),
    }
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<Outcome> {
    let gen = TaskGenerator::default();
    let (state, base) = match (&a.resume, &a.config) {
        (Some(snap), cfg_path) => {
            let (state, snap_cfg) = io::read_snapshot(snap)?;
            let cfg = match cfg_path {
                Some(p) => io::read_config(p)?,
                None => snap_cfg,
            };
            (Some(state), cfg)
        }
        (None, Some(p)) => (None, io::read_config(p)?),
        (None, None) => return Err(Error::input("train needs --config or --resume")),
    };
    let mut cfg = apply_globals(cli, base);
    if let Some(n) = a.steps {
        cfg.total_steps = n;
    }
    let cfg = cfg.validate()?;
    let art = match state {
        Some(s) => {
            if s.seed != cfg.train.seed {
                return Err(Error::input(format!(
                    "snapshot seed {} differs from config seed {}",
                    s.seed, cfg.train.seed
                )));
            }
            trainer::run_from(s, &cfg, &gen)?
        }
        None => trainer::run(&cfg, &gen)?,
    };
    let last = art.metrics.last();
    Ok(Outcome::ok(format!(
        "steps={} eval_accuracy={} final_loss={} output_dir={}\n",
        art.state.step,
        fmt_f64(art.eval_accuracy),
        last.map_or("n/a".into(), |m| fmt_f64(m.loss)),
        cfg.output_dir.display()
    )))
}

fn load_traces(path: &Path) -> Result<Vec<crate::types::RolloutTrace>> {
    let traces = io::read_traces(path)?;
    if traces.is_empty() {
        return Err(Error::input(format!(
            "{}: no trace records",
            path.display()
        )));
    }
    Ok(traces)
}

pub fn cmd_gate(cli: &Cli, a: &GateArgs) -> Result<Outcome> {
    let traces = load_traces(&a.traces)?;
    let p = &a.params;
    let rows = diagnostics::offline_gate(&traces, p.gamma, p.window, p.floor, a.batch_size)?;
    Ok(Outcome::ok(emit(
        cli,
        "gate.csv",
        &diagnostics::gate_table(&rows),
    )?))
}

pub fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<Outcome> {
    let traces = load_traces(&a.traces)?;
    let th = RegimeThresholds::new(a.tau_low, a.tau_high)?;
    let p = &a.params;
    let bc = diagnostics::offline_credit(&traces, p.gamma, p.window, a.epsilon, p.floor)?;
    let tokens = diagnostics::token_diags(&bc, &traces);
    let regimes = diagnostics::regime_report(&tokens, p.gamma, p.floor, th, exec_for(cli))?;
    let mut out = emit(cli, "regimes.csv", &regimes.to_table())?;
    match diagnostics::decile_report(&tokens) {
        Ok(rows) => {
            let mut t = diagnostics::decile_table(&rows);
            t.preamble = regimes.to_table().preamble;
            if cli.output_dir.is_none() {
                out.push('\n');
            }
            out.push_str(&emit(cli, "deciles.csv", &t)?);
        }
        Err(e) => {
            log::warn!("decile report skipped: {e}");
            out.push_str(&format!("# decile report skipped: {e}\n"));
        }
    }
    Ok(Outcome::ok(out))
}

/// `(γ, W)` cells in first-seen order, duplicates removed.
pub fn sweep_cells(gammas: &[f64], windows: &[usize]) -> Vec<(f64, usize)> {
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for &g in gammas {
        for &w in windows {
            if !cells
                .iter()
                .any(|&(g2, w2)| g2.to_bits() == g.to_bits() && w2 == w)
            {
                cells.push((g, w));
            }
        }
    }
    cells
}

/// Method for a cell: a `cl_egrsd` base falls back to `egrsd` at `W = 0`;
/// any other base keeps its method.
pub fn cell_method(base: Method, window: usize) -> Method {
    match base {
        Method::ClEgrsd if window == 0 => Method::Egrsd,
        m => m,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub window: usize,
    pub method: Method,
    pub result: std::result::Result<(f64, f64), String>,
}

fn run_cell(base: &RunConfig, gamma: f64, window: usize, gen: &TaskGenerator) -> SweepRow {
    let method = cell_method(base.train.method, window);
    let mut cfg = base.clone();
    cfg.train.gamma = gamma;
    cfg.train.window = window;
    cfg.train.method = method;
    cfg.output_dir = base.output_dir.join(format!("cell_g{gamma}_w{window}"));
    let result = (|| {
        let art = trainer::run(&cfg, gen)?;
        let tasks = trainer::eval_tasks(gen, cfg.train.seed, cfg.eval_tasks);
        let total: usize = tasks
            .iter()
            .map(|t| {
                policy::greedy_decode(
                    &art.state.student,
                    t,
                    cfg.train.context_window,
                    cfg.train.max_len,
                )
                .len()
            })
            .sum();
        Ok::<_, Error>((art.eval_accuracy, total as f64 / tasks.len().max(1) as f64))
    })()
    .map_err(|e| e.to_string());
    SweepRow {
        gamma,
        window,
        method,
        result,
    }
}

pub fn sweep(base: &RunConfig, cells: &[(f64, usize)], exec: Execution) -> Vec<SweepRow> {
    let gen = TaskGenerator::default();
    exec.map(cells.len(), |i| {
        run_cell(base, cells[i].0, cells[i].1, &gen)
    })
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&[
        "gamma",
        "window",
        "method",
        "status",
        "accuracy",
        "mean_len",
        "token_efficiency",
        "error",
    ]);
    for r in rows {
        let mut row = vec![fmt_f64(r.gamma), r.window.to_string(), r.method.to_string()];
        match &r.result {
            Ok((acc, len)) => {
                let eff =
                    diagnostics::token_efficiency(acc * 100.0, *len).map_or(String::new(), fmt_f64);
                row.extend([
                    "ok".into(),
                    fmt_f64(*acc),
                    fmt_f64(*len),
                    eff,
                    String::new(),
                ]);
            }
            Err(e) => row.extend([
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                e.replace([',', '\n'], ";"),
            ]),
        }
        t.push(row);
    }
    t
}

pub fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<Outcome> {
    let base = apply_globals(cli, io::read_config(&a.config)?);
    let cells = sweep_cells(&a.gammas, &a.windows);
    let rows = sweep(&base, &cells, exec_for(cli));
    let table = sweep_table(&rows);
    let path = base.output_dir.join("sweep.csv");
    table.write(&path)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    Ok(Outcome::ok(format!(
        "{} cells, {failed} failed; wrote {}\n",
        rows.len(),
        path.display()
    )))
}

pub fn render_checks(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{} {:<20} {:>9.1} ms  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed_ms,
            r.detail
        ));
        if !r.passed {
            s.push_str(&format!("     violated invariant: {}\n", r.invariant));
        }
    }
    s
}

pub fn cmd_check(cli: &Cli, a: &CheckArgs) -> Result<Outcome> {
    let opts = CheckOptions {
        trials: a.trials,
        seed: cli.seed.unwrap_or(0),
        gate_floor: a.inject_gate_floor.unwrap_or(0.1),
        exec: exec_for(cli),
    };
    let results = checks::run_all(opts)?;
    let mut out = render_checks(&results);
    if let Some(dir) = &cli.output_dir {
        let path = dir.join("checks.csv");
        checks::results_table(&results).write(&path)?;
        out.push_str(&format!("wrote {}\n", path.display()));
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        out.push_str(&format!("all {} checks passed\n", results.len()));
        Ok(Outcome::ok(out))
    } else {
        out.push_str(&format!("{} failed: {}\n", failed.len(), failed.join(", ")));
        Ok(Outcome {
            code: 1,
            stdout: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_deduplicated() {
        let c = sweep_cells(&[0.0, 0.3, 0.0], &[0, 5, 5]);
        assert_eq!(c, vec![(0.0, 0), (0.0, 5), (0.3, 0), (0.3, 5)]);
    }

    #[test]
    fn method_resolution() {
        assert_eq!(cell_method(Method::ClEgrsd, 0), Method::Egrsd);
        assert_eq!(cell_method(Method::ClEgrsd, 5), Method::ClEgrsd);
        assert_eq!(cell_method(Method::Egrsd, 5), Method::Egrsd);
    }

    #[test]
    fn invalid_cells_fail_without_stopping_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = RunConfig {
            total_steps: 2,
            batch_size: 4,
            eval_tasks: 10,
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        base.train.reproducible = true;
        let rows = sweep(&base, &sweep_cells(&[0.0, 0.3], &[0, 2]), Execution::Serial);
        assert_eq!(rows.len(), 4);
        assert!(rows[0].result.is_ok());
        assert!(rows[1].result.as_ref().unwrap_err().contains("window"));
        let t = sweep_table(&rows);
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[1][3], "failed");
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "egrsd",
            "--seed",
            "7",
            "sweep",
            "--config",
            "c.toml",
            "--gammas",
            "0,0.3",
            "--windows",
            "0,5",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(7));
        match cli.command {
            Command::Sweep(a) => {
                assert_eq!(a.gammas, vec![0.0, 0.3]);
                assert_eq!(a.windows, vec![0, 5]);
            }
            _ => panic!(),
        }
        let cli =
            Cli::try_parse_from(["egrsd", "check", "--trials", "5", "--reproducible"]).unwrap();
        assert!(cli.reproducible);
    }
}

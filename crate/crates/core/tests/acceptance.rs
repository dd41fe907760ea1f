//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use egrsd::checks;
use egrsd::commands::{execute, Cli};
use egrsd::diagnostics::{self, Regime, RegimeThresholds};
use egrsd::gate::confidence_gate;
use egrsd::io;
use egrsd::policy::TaskGenerator;
use egrsd::theory::{self, FilterSpec};
use egrsd::trainer::{self, RunConfig};
use egrsd::{Execution, Method, TeacherSchedule};

const SEED: u64 = 7;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn from_check(r: checks::CheckResult) -> Outcome {
    outcome(r.passed, r.detail)
}

fn c01_gate_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut bad = 0usize;
    for _ in 0..1_000_000 {
        let h: f64 = rng.gen_range(0.0..=1.0);
        let g: f64 = rng.gen_range(0.0..=5.0);
        let w = confidence_gate(h, g, 0.1, 1.0);
        if !(0.1..=1.0).contains(&w) {
            bad += 1;
        }
    }
    let suite = checks::gate_bounds(1_000_000, 0.1, SEED, Execution::Parallel);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && suite.passed && secs < 5.0,
        format!("1e6 pairs twice, {bad} violations, {secs:.2}s"),
    )
}

fn c02_degeneracy() -> Outcome {
    from_check(checks::degeneracy_chain(100, SEED, Execution::Parallel))
}

fn c03_gradient() -> Outcome {
    from_check(checks::gradient_check(50, SEED, Execution::Parallel))
}

fn c04_window_audit() -> Outcome {
    let windows = [1, 3, 5, 7];
    let filters = [
        FilterSpec::CurrentOnly,
        FilterSpec::Mix(0.25),
        FilterSpec::Mix(0.5),
        FilterSpec::Mix(0.75),
        FilterSpec::WindowMin,
    ];
    let r =
        match theory::extremality_check(&filters, &windows, 10_000, 0.3, SEED, Execution::Parallel)
        {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("error: {e}")),
        };
    // constant windows: every filter returns the constant, bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut const_bad = 0;
    for w in windows {
        for _ in 0..1000 {
            let c: f64 = rng.gen_range(0.0..1.0);
            let h = vec![c; w + 1];
            const_bad += filters.iter().filter(|f| f.apply(&h, w) != c).count();
        }
    }
    outcome(
        r.passed() && const_bad == 0,
        format!(
            "lower_bound={} ordering={} constant={} worst_gaps=({:.1e},{:.1e})",
            r.lower_bound_violations,
            r.ordering_violations,
            r.constant_violations + const_bad,
            r.worst_lower_bound_gap,
            r.worst_ordering_gap
        ),
    )
}

fn c05_chord() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for a0 in [0.1, 0.5, 1.0, 3.0, 9.0] {
        let g = a0 / (1.0 + a0);
        match theory::chord_dominance_check(a0, 10_000) {
            Ok(r) => {
                ok &= r.passed
                    && r.min_gap >= -1e-12
                    && r.endpoint_gap <= 1e-12
                    && r.min_second_difference >= -1e-12
                    && (r.gamma - g).abs() <= 1e-15;
                parts.push(format!("a0={a0}:{:.1e}", r.min_gap));
            }
            Err(e) => return outcome(false, format!("error: {e}")),
        }
    }
    outcome(ok, parts.join(" "))
}

fn c06_whitening() -> Outcome {
    from_check(checks::whitening(1000, SEED))
}

fn c07_reward() -> Outcome {
    from_check(checks::reward_shaping())
}

fn c08_collapse() -> Outcome {
    from_check(checks::teacher_collapse(SEED))
}

fn acceptance_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.train.reproducible = true;
    cfg.train.method = Method::Egrsd;
    cfg.train.gamma = 0.3;
    cfg.train.teacher_schedule = TeacherSchedule::Frozen;
    cfg.train.privileged_teacher = true;
    cfg.total_steps = 500;
    cfg.batch_size = 32;
    cfg.eval_tasks = 200;
    cfg
}

fn c09_clip() -> Outcome {
    let short = checks::clip_discipline(SEED);
    let (_, metrics) =
        match trainer::train_in_memory(&acceptance_config(SEED), &TaskGenerator::default()) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("error: {e}")),
        };
    let worst = metrics
        .iter()
        .map(|m| m.grad_norm_postclip)
        .fold(0.0, f64::max);
    outcome(
        short.passed && worst <= 0.1 + 1e-12,
        format!("{}; 500-step run worst post-clip {worst:.6}", short.detail),
    )
}

fn c10_regimes() -> Outcome {
    let suite = checks::regime_partition(100_000, SEED, Execution::Parallel);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let fixture = diagnostics::pivot_fork_fixture(40, 3, &mut rng);
    let rep = diagnostics::offline_credit(&fixture, 0.3, 3, 0.2, 0.1).and_then(|bc| {
        diagnostics::regime_report(
            &diagnostics::token_diags(&bc, &fixture),
            0.3,
            0.1,
            RegimeThresholds::default(),
            Execution::Serial,
        )
    });
    match rep {
        Ok(r) => {
            let (p, f) = (
                r.row(Regime::Pivot).mean_delta_omega,
                r.row(Regime::Fork).mean_delta_omega,
            );
            outcome(
                suite.passed && p > f,
                format!("{}; second fixture pivot={p:.4} fork={f:.4}", suite.detail),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn c11_efficiency() -> Outcome {
    let cells = [(65.59, 11008.0, 5.96), (67.24, 11064.0, 6.08)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (acc, len, want) in cells {
        match diagnostics::token_efficiency(acc, len) {
            Ok(v) => {
                ok &= (v - want).abs() <= 0.01;
                parts.push(format!("{v:.4}"));
            }
            Err(e) => return outcome(false, format!("error: {e}")),
        }
    }
    outcome(ok, parts.join(" "))
}

fn c12_training() -> Outcome {
    let gen = TaskGenerator::default();
    let cfg = acceptance_config(SEED);
    let start = Instant::now();
    let first = trainer::train_in_memory(&cfg, &gen);
    let secs = start.elapsed().as_secs_f64();
    let second = trainer::train_in_memory(&cfg, &gen);
    let (Ok((a, ma)), Ok((b, mb))) = (first, second) else {
        return outcome(false, "training failed");
    };
    let acc = trainer::greedy_eval(&a, &gen, &cfg);
    let identical = a.student == b.student && ma == mb && a.stats == b.stats;
    let mut par = cfg.clone();
    par.train.reproducible = false;
    let parallel_same = trainer::train_in_memory(&par, &gen)
        .map(|(p, _)| p.student == a.student)
        .unwrap_or(false);
    outcome(
        acc >= 0.9 && identical && parallel_same && secs < 300.0,
        format!("greedy accuracy {acc:.3} on 200 tasks, identical rerun={identical}, parallel identical={parallel_same}, {secs:.2}s"),
    )
}

fn gate_csv_omegas(path: &Path, column: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let Some(header) = lines.next() else {
        return Vec::new();
    };
    let Some(col) = header.split(',').position(|h| h == column) else {
        return Vec::new();
    };
    lines
        .filter_map(|l| l.split(',').nth(col)?.parse().ok())
        .collect()
}

fn c13_offline_online() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("tempdir: {e}")),
    };
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for (method, window) in [(Method::Egrsd, 0usize), (Method::ClEgrsd, 3)] {
        let out = dir.path().join(method.as_str());
        let mut cfg = acceptance_config(SEED);
        cfg.train.method = method;
        cfg.train.window = window;
        cfg.total_steps = 1;
        cfg.checkpoint_interval = 1;
        cfg.output_dir = out.clone();
        let art = match trainer::run(&cfg, &TaskGenerator::default()) {
            Ok(a) => a,
            Err(e) => return outcome(false, format!("train: {e}")),
        };
        let traces_path = &art.trace_paths[0];
        let cli = Cli::parse_from([
            "egrsd".to_string(),
            "--output-dir".into(),
            out.display().to_string(),
            "gate".into(),
            "--traces".into(),
            traces_path.display().to_string(),
            "--gamma".into(),
            "0.3".into(),
            "--window".into(),
            window.to_string(),
        ]);
        if let Err(e) = execute(&cli) {
            return outcome(false, format!("gate: {e}"));
        }
        let column = if window == 0 { "omega" } else { "omega_cl" };
        let offline = gate_csv_omegas(&out.join("gate.csv"), column);
        let traces = match io::read_traces(traces_path) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("read traces: {e}")),
        };
        let online: Vec<f64> = traces
            .iter()
            .flat_map(|t| {
                t.tokens
                    .iter()
                    .filter(|k| k.mask)
                    .map(|k| k.train_gate.unwrap_or(f64::NAN))
            })
            .collect();
        if online.is_empty() || online.len() != offline.len() {
            return outcome(
                false,
                format!("token count mismatch {} vs {}", online.len(), offline.len()),
            );
        }
        for (a, b) in online.iter().zip(&offline) {
            worst = worst.max((a - b).abs());
        }
        compared += online.len();
    }
    outcome(
        worst <= 1e-12,
        format!("{compared} tokens, worst |diff| {worst:.1e}"),
    )
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("gate bounds", c01_gate_bounds),
        ("degeneracy chain", c02_degeneracy),
        ("gradient check", c03_gradient),
        ("lookahead filter audit", c04_window_audit),
        ("chord dominance", c05_chord),
        ("whitening", c06_whitening),
        ("reward shaping", c07_reward),
        ("teacher collapse", c08_collapse),
        ("clip discipline", c09_clip),
        ("regime diagnostics", c10_regimes),
        ("token efficiency", c11_efficiency),
        ("toy training", c12_training),
        ("offline/online gate consistency", c13_offline_online),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failures += usize::from(!o.passed);
        println!(
            "{tag} criterion {:02} {name}: {} ({:.0} ms)",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64() * 1e3
        );
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

//! The property suite run by `egrsd check`: each check draws its own random
//! inputs from seeded substreams and reports pass/fail with a short detail.

use std::time::Instant;

use rand::Rng;

use crate::credit::{self, CreditParams};
use crate::diagnostics::{self, classify_regime, weight_increment, Regime, RegimeThresholds};
use crate::error::Result;
use crate::exec::{chunk_ranges, Execution};
use crate::gate::confidence_gate;
use crate::io::{fmt_f64, Table};
use crate::policy::{substream, Features, Matrix, TaskGenerator};
use crate::reward::{self, RewardStats};
use crate::theory::{self, FilterSpec};
use crate::trainer::{self, GradSample, RunConfig, TrainState};
use crate::types::{Method, RolloutTrace, TeacherSchedule, TokenRecord, TrainConfig};

/// Stream kinds private to the check suite.
mod kind {
    pub const GATE: u8 = 10;
    pub const BATCH: u8 = 11;
    pub const GRAD: u8 = 12;
    pub const WELFORD: u8 = 13;
    pub const REGIME: u8 = 14;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// The invariant being asserted, named in failure output.
    pub invariant: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

fn timed(
    name: &'static str,
    invariant: &'static str,
    f: impl FnOnce() -> Result<(bool, String)>,
) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        invariant,
        passed,
        detail,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Floor actually used by the gate under test; anything but 0.1 is a fault.
    pub gate_floor: f64,
    pub exec: Execution,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            trials: 10_000,
            seed: 0,
            gate_floor: 0.1,
            exec: Execution::Parallel,
        }
    }
}

/// ω ∈ [0.1, 1] over `samples` random `(Ĥ, γ)` pairs, evaluated with `floor`.
pub fn gate_bounds(samples: usize, floor: f64, seed: u64, exec: Execution) -> CheckResult {
    timed("gate_bounds", "gate value within [0.1, 1.0]", || {
        let ranges = chunk_ranges(samples, 256);
        let bad = exec.map(ranges.len(), |c| {
            let mut rng = substream(seed, kind::GATE, 0, c as u64);
            let mut bad = 0usize;
            let mut example = None;
            for _ in ranges[c].clone() {
                let h = rng.gen_range(0.0..=1.0);
                let g = rng.gen_range(0.0..=3.0);
                let w = confidence_gate(h, g, floor, 1.0);
                if !(0.1..=1.0).contains(&w) {
                    bad += 1;
                    example.get_or_insert((h, g, w));
                }
            }
            (bad, example)
        });
        let total: usize = bad.iter().map(|b| b.0).sum();
        let first = bad.iter().find_map(|b| b.1);
        Ok(match first {
            None => (true, format!("{samples} pairs, 0 violations")),
            Some((h, g, w)) => (
                false,
                format!("{total} violations; e.g. h={h} gamma={g} -> omega={w}"),
            ),
        })
    })
}

/// A random credited batch: entropies, log-probabilities, masks, advantages.
pub fn random_batch<R: Rng>(rng: &mut R) -> (Vec<RolloutTrace>, Vec<f64>) {
    let n = rng.gen_range(1..6);
    let mut traces: Vec<RolloutTrace> = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..10);
            let tokens: Vec<TokenRecord> = (0..len)
                .map(|_| {
                    let mut t = TokenRecord::new(
                        rng.gen_range(0..20),
                        -rng.gen_range(0.0..4.0),
                        -rng.gen_range(0.0..4.0),
                        rng.gen_range(0.0..3.0),
                    );
                    t.mask = rng.gen_bool(0.85);
                    t
                })
                .collect();
            let correct = rng.gen_bool(0.5);
            RolloutTrace {
                prompt_id: format!("r{i}"),
                prompt: Vec::new(),
                reference: Vec::new(),
                completion_length: tokens.iter().filter(|t| t.mask).count(),
                tokens,
                reward: if correct {
                    rng.gen_range(1.0..1.5)
                } else {
                    0.0
                },
                correct,
            }
        })
        .collect();
    if traces.iter().all(|t| t.completion_length == 0) {
        traces[0].tokens[0].mask = true;
        traces[0].completion_length = 1;
    }
    let adv = (0..n)
        .map(|_| match rng.gen_range(0..5) {
            0 => 0.0,
            _ => rng.gen_range(-2.0..2.0),
        })
        .collect();
    (traces, adv)
}

fn params(method: Method, gamma: f64, window: usize) -> CreditParams {
    CreditParams {
        method,
        gamma,
        window,
        epsilon: 0.2,
        gate_floor: 0.1,
        gate_ceiling: 1.0,
    }
}

/// CL-EGRSD(W=0) ≡ EGRSD, EGRSD(γ=0) ≡ RLSD, RLSD(δ≡0) ≡ GRPO, bit for bit.
pub fn degeneracy_chain(batches: usize, seed: u64, exec: Execution) -> CheckResult {
    timed(
        "degeneracy_chain",
        "reduced methods produce identical credit",
        || {
            let outcomes = exec.try_map(batches, |b| {
                let mut rng = substream(seed, kind::BATCH, 0, b as u64);
                let (traces, adv) = random_batch(&mut rng);
                let gamma = rng.gen_range(0.0..2.0);
                let a = credit::assemble_batch(&traces, &adv, &params(Method::ClEgrsd, gamma, 0))?;
                let b_ = credit::assemble_batch(&traces, &adv, &params(Method::Egrsd, gamma, 0))?;
                let c = credit::assemble_batch(&traces, &adv, &params(Method::Egrsd, 0.0, 0))?;
                let d = credit::assemble_batch(&traces, &adv, &params(Method::Rlsd, 0.0, 0))?;
                let mut flat = traces.clone();
                for t in flat.iter_mut().flat_map(|t| t.tokens.iter_mut()) {
                    t.teacher_logprob = t.student_logprob;
                }
                let e = credit::assemble_batch(&flat, &adv, &params(Method::Rlsd, 0.0, 0))?;
                let f = credit::assemble_batch(&flat, &adv, &params(Method::Grpo, 0.0, 0))?;
                Ok::<_, crate::error::Error>([a == b_, c == d, e == f])
            })?;
            let fails: Vec<String> = outcomes
                .iter()
                .enumerate()
                .flat_map(|(i, o)| {
                    [
                        "cl_egrsd(W=0)=egrsd",
                        "egrsd(gamma=0)=rlsd",
                        "rlsd(delta=0)=grpo",
                    ]
                    .iter()
                    .zip(o)
                    .filter(|(_, ok)| !**ok)
                    .map(move |(n, _)| format!("batch {i}: {n}"))
                })
                .collect();
            Ok(if fails.is_empty() {
                (
                    true,
                    format!("{batches} batches identical across the chain"),
                )
            } else {
                (false, fails.join("; "))
            })
        },
    )
}

/// A random frozen-advantage instance with vocabulary ≤ 8 and feature dimension ≤ 64.
pub fn random_grad_instance<R: Rng>(rng: &mut R) -> (Matrix, Vec<GradSample>) {
    let vocab = rng.gen_range(2..=8);
    let dim = rng.gen_range(1..=64);
    let mut m = Matrix::zeros(dim, vocab);
    m.data
        .iter_mut()
        .for_each(|x| *x = rng.gen_range(-1.0..1.0));
    let n = rng.gen_range(1..6);
    let samples = (0..n)
        .map(|_| {
            let dense: Vec<f64> = (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            GradSample {
                features: Features::from_dense(&dense),
                token: rng.gen_range(0..vocab),
                advantage: rng.gen_range(-2.0..2.0),
            }
        })
        .collect();
    (m, samples)
}

/// Norm-wise relative error between the analytic gradient and central differences.
pub fn gradient_relative_error(params: &Matrix, samples: &[GradSample]) -> f64 {
    let g = trainer::frozen_loss_gradient(params, samples);
    let h = 1e-5;
    let mut p = params.clone();
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for k in 0..p.data.len() {
        let x = p.data[k];
        p.data[k] = x + h;
        let up = trainer::frozen_loss(&p, samples);
        p.data[k] = x - h;
        let dn = trainer::frozen_loss(&p, samples);
        p.data[k] = x;
        let fd = (up - dn) / (2.0 * h);
        err += (fd - g.data[k]).powi(2);
        norm += g.data[k].powi(2);
    }
    if norm == 0.0 {
        err.sqrt()
    } else {
        (err / norm).sqrt()
    }
}

pub fn gradient_check(instances: usize, seed: u64, exec: Execution) -> CheckResult {
    timed(
        "gradient_check",
        "analytic gradient matches finite differences (rel 1e-6)",
        || {
            let errs = exec.map(instances, |i| {
                let mut rng = substream(seed, kind::GRAD, 0, i as u64);
                let (m, s) = random_grad_instance(&mut rng);
                gradient_relative_error(&m, &s)
            });
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Ok((
                worst <= 1e-6,
                format!("{instances} instances, worst relative error {worst:.3e}"),
            ))
        },
    )
}

pub const AUDIT_WINDOWS: [usize; 4] = [1, 3, 5, 7];

pub fn filter_family(trials: usize, seed: u64, exec: Execution) -> CheckResult {
    timed(
        "filter_family",
        "family filters are monotone, conservative, idempotent, causal",
        || {
            let mut fails = Vec::new();
            for f in FilterSpec::family() {
                for w in AUDIT_WINDOWS {
                    let a = theory::filter_family_audit(f, w, trials, seed, exec)?;
                    if let Some(c) = a.first_counterexample {
                        fails.push(format!("{f} W={w}: {} ({})", c.condition, c.detail));
                    }
                }
            }
            Ok(if fails.is_empty() {
                (
                    true,
                    format!(
                        "5 filters x {} windows x {trials} trials",
                        AUDIT_WINDOWS.len()
                    ),
                )
            } else {
                (false, fails.join("; "))
            })
        },
    )
}

pub fn extremality(trials: usize, seed: u64, exec: Execution) -> CheckResult {
    timed(
        "extremality",
        "filter >= window min and recovery <= min-filter recovery",
        || {
            let r = theory::extremality_check(
                &FilterSpec::family(),
                &AUDIT_WINDOWS,
                trials,
                0.3,
                seed,
                exec,
            )?;
            Ok((
            r.passed(),
            format!(
                "lower_bound={} ordering={} constant={} strictness={} clipped_ordering(info)={} worst_lb_gap={:.3e} worst_order_gap={:.3e}",
                r.lower_bound_violations,
                r.ordering_violations,
                r.constant_violations,
                r.strictness_violations,
                r.clipped_ordering_violations,
                r.worst_lower_bound_gap,
                r.worst_ordering_gap
            ),
        ))
        },
    )
}

pub const NSR_VALUES: [f64; 5] = [0.1, 0.5, 1.0, 3.0, 9.0];

pub fn chord(grid: usize) -> CheckResult {
    timed(
        "chord_dominance",
        "linear gate on or above the reference curve, equal at endpoints",
        || {
            let mut parts = Vec::new();
            let mut ok = true;
            for a0 in NSR_VALUES {
                let r = theory::chord_dominance_check(a0, grid)?;
                ok &= r.passed;
                parts.push(format!(
                    "a0={a0}: min_gap={:.2e} endpoint={:.1e}",
                    r.min_gap, r.endpoint_gap
                ));
            }
            Ok((ok, parts.join("; ")))
        },
    )
}

pub fn whitening(streams: usize, seed: u64) -> CheckResult {
    timed(
        "whitening",
        "Welford matches two-pass; warm-up baseline r - 0.5",
        || {
            let mut worst = 0.0f64;
            for s in 0..streams {
                let mut rng = substream(seed, kind::WELFORD, 0, s as u64);
                let n = rng.gen_range(1..200);
                let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.5)).collect();
                let mut st = RewardStats::default();
                for chunk in xs.chunks(rng.gen_range(1..40)) {
                    st = reward::welford_update(st, chunk);
                }
                let mean = xs.iter().sum::<f64>() / n as f64;
                let m2: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
                let rel = |a: f64, b: f64| {
                    if b == 0.0 {
                        a.abs()
                    } else {
                        ((a - b) / b).abs()
                    }
                };
                worst = worst.max(rel(st.mean, mean)).max(if m2 < 1e-12 {
                    (st.m2 - m2).abs()
                } else {
                    rel(st.m2, m2)
                });
            }
            let mut warm_ok = true;
            let mut rng = substream(seed, kind::WELFORD, 1, 0);
            let stats = reward::welford_update(RewardStats::default(), &[0.1, 0.9, 1.4]);
            for step in 1..=reward::WARMUP_STEPS {
                let r = rng.gen_range(0.0..1.5);
                warm_ok &= reward::whiten(r, &stats, step) == r - 0.5;
            }
            warm_ok &= reward::whiten(1.0, &stats, reward::WARMUP_STEPS + 1) != 0.5;
            Ok((
                worst <= 1e-10 && warm_ok,
                format!(
                    "{streams} streams, worst relative error {worst:.2e}, warm-up exact: {warm_ok}"
                ),
            ))
        },
    )
}

pub fn reward_shaping() -> CheckResult {
    timed(
        "reward_shaping",
        "shaped reward equals closed form; incorrect gives 0",
        || {
            let mut cases = 0usize;
            for max_len in 1..=64usize {
                for len in 0..=max_len {
                    for beta in [0.0, 0.25, 0.5, 1.0] {
                        for correct in [false, true] {
                            let expect = if correct {
                                1.0 + beta * (1.0 - len as f64 / max_len as f64)
                            } else {
                                0.0
                            };
                            if reward::shaped_reward(correct, len, max_len, beta)? != expect {
                                return Ok((
                                    false,
                                    format!("mismatch at len={len} max_len={max_len} beta={beta}"),
                                ));
                            }
                            cases += 1;
                        }
                    }
                }
            }
            Ok((true, format!("{cases} cases exact")))
        },
    )
}

fn collapse_config(steps: u64, seed: u64) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            teacher_schedule: TeacherSchedule::HardCopy { period: 1 },
            privileged_teacher: false,
            reproducible: true,
            seed,
            ..TrainConfig::default()
        },
        total_steps: steps,
        batch_size: 16,
        ..RunConfig::default()
    }
}

/// Runs `steps` training steps and returns per-step (all δ = 0 and w = 1, post-clip norm).
pub fn collapse_run(steps: u64, seed: u64) -> Result<Vec<(bool, f64)>> {
    let cfg = collapse_config(steps, seed);
    let gen = TaskGenerator::default();
    let mut state = TrainState::new(&cfg.train);
    let mut out = Vec::new();
    for s in 1..=steps {
        let tasks = trainer::step_tasks(&gen, seed, s, cfg.batch_size);
        let step = trainer::train_step(&mut state, &tasks, &cfg.train, Execution::Serial)?;
        let collapsed = step
            .credit
            .as_ref()
            .map(|bc| {
                bc.tokens
                    .iter()
                    .flatten()
                    .all(|c| c.delta == 0.0 && c.magnitude == 1.0)
            })
            .unwrap_or(false);
        out.push((collapsed, step.metrics.grad_norm_postclip));
    }
    Ok(out)
}

pub fn teacher_collapse(seed: u64) -> CheckResult {
    timed(
        "teacher_collapse",
        "hard copy every step gives delta = 0 and w = 1",
        || {
            let run = collapse_run(10, seed)?;
            let bad: Vec<usize> = run
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.0)
                .map(|(i, _)| i + 1)
                .collect();
            Ok((
                bad.is_empty(),
                format!("10 steps, non-collapsed steps: {bad:?}"),
            ))
        },
    )
}

pub fn clip_discipline(seed: u64) -> CheckResult {
    timed(
        "clip_discipline",
        "post-clip gradient norm <= 0.1 + 1e-12",
        || {
            let mut cfg = RunConfig {
                total_steps: 20,
                batch_size: 16,
                ..RunConfig::default()
            };
            cfg.train.reproducible = true;
            cfg.train.seed = seed;
            let (_, metrics) = trainer::train_in_memory(&cfg, &TaskGenerator::default())?;
            let worst = metrics
                .iter()
                .map(|m| m.grad_norm_postclip)
                .fold(0.0, f64::max);
            Ok((
                worst <= 0.1 + 1e-12,
                format!("20 steps, worst post-clip norm {worst:.6}"),
            ))
        },
    )
}

pub fn regime_partition(tokens: usize, seed: u64, exec: Execution) -> CheckResult {
    timed(
        "regime_diagnostics",
        "regimes partition tokens; increment >= 0; pivot > fork on fixture",
        || {
            let th = RegimeThresholds::default();
            let ranges = chunk_ranges(tokens, 64);
            let results = exec.try_map(ranges.len(), |c| {
                let mut rng = substream(seed, kind::REGIME, 0, c as u64);
                let mut bad = 0usize;
                for _ in ranges[c].clone() {
                    let h: f64 = rng.gen_range(0.0..=1.0);
                    let hcl = h * rng.gen_range(0.0..=1.0);
                    let gamma = rng.gen_range(0.0..=2.0);
                    let r = classify_regime(h, hcl, th)?;
                    let lock = h <= th.tau_low;
                    let fork = !lock && h >= th.tau_high && hcl >= th.tau_high;
                    let pivot = !lock && !fork && h >= th.tau_high && hcl <= th.tau_low;
                    let labels = [lock, fork, pivot, !(lock || fork || pivot)];
                    let ok = labels.iter().filter(|b| **b).count() == 1 && labels[r as usize];
                    if !ok || weight_increment(h, hcl, gamma, 0.1) < 0.0 {
                        bad += 1;
                    }
                }
                Ok::<_, crate::error::Error>(bad)
            })?;
            let bad: usize = results.iter().sum();
            let mut rng = substream(seed, kind::REGIME, 1, 0);
            let fixture = diagnostics::pivot_fork_fixture(50, 3, &mut rng);
            let bc = diagnostics::offline_credit(&fixture, 0.3, 3, 0.2, 0.1)?;
            let rep = diagnostics::regime_report(
                &diagnostics::token_diags(&bc, &fixture),
                0.3,
                0.1,
                th,
                exec,
            )?;
            let (p, f) = (rep.row(Regime::Pivot), rep.row(Regime::Fork));
            let share: f64 = rep.rows.iter().map(|r| r.token_share).sum();
            let selective = p.count > 0 && f.count > 0 && p.mean_delta_omega > f.mean_delta_omega;
            Ok((
                bad == 0 && selective && (share - 1.0).abs() <= 1e-12,
                format!(
                    "{tokens} tokens, {bad} violations; fixture pivot={:.4} fork={:.4}",
                    p.mean_delta_omega, f.mean_delta_omega
                ),
            ))
        },
    )
}

pub const EFFICIENCY_CELLS: [(f64, f64, f64); 2] = [(65.59, 11008.0, 5.96), (67.24, 11064.0, 6.08)];

pub fn efficiency_cells() -> CheckResult {
    timed(
        "token_efficiency",
        "efficiency matches the reference cells within 0.01",
        || {
            let mut parts = Vec::new();
            let mut ok = true;
            for (acc, len, want) in EFFICIENCY_CELLS {
                let got = diagnostics::token_efficiency(acc, len)?;
                ok &= (got - want).abs() <= 0.01;
                parts.push(format!("({acc}, {len}) -> {got:.4}"));
            }
            Ok((ok, parts.join("; ")))
        },
    )
}

/// Every check, in a fixed order.
pub fn run_all(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    if opts.trials == 0 {
        return Err(crate::error::Error::input("trials must be ≥ 1"));
    }
    let CheckOptions {
        trials,
        seed,
        gate_floor,
        exec,
    } = opts;
    Ok(vec![
        gate_bounds(trials * 100, gate_floor, seed, exec),
        degeneracy_chain(100, seed, exec),
        gradient_check(50, seed, exec),
        filter_family(trials, seed, exec),
        extremality(trials, seed, exec),
        chord(10_000),
        whitening(1000, seed),
        reward_shaping(),
        teacher_collapse(seed),
        clip_discipline(seed),
        regime_partition(trials * 10, seed, exec),
        efficiency_cells(),
    ])
}

pub fn results_table(results: &[CheckResult]) -> Table {
    let mut t = Table::new(&["check", "invariant", "passed", "elapsed_ms", "detail"]);
    let clean = |s: &str| s.replace(',', ";");
    for r in results {
        t.push(vec![
            r.name.into(),
            clean(r.invariant),
            r.passed.to_string(),
            fmt_f64((r.elapsed_ms * 1000.0).round() / 1000.0),
            clean(&r.detail),
        ]);
    }
    t
}

//! Mechanism diagnostics: lock/fork/pivot regimes, lookahead weight increments,
//! entropy-decile tables, offline gating of trace files, and token efficiency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{self, BatchCredit, CreditParams};
use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, Execution};
use crate::gate::{self, BatchEntropyView};
use crate::io::{fmt_f64, Table};
use crate::types::{Method, RolloutTrace, TokenRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Lock,
    Fork,
    Pivot,
    Mid,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Lock, Regime::Fork, Regime::Pivot, Regime::Mid];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Lock => "lock",
            Regime::Fork => "fork",
            Regime::Pivot => "pivot",
            Regime::Mid => "mid",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub tau_low: f64,
    pub tau_high: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            tau_low: 0.2,
            tau_high: 0.6,
        }
    }
}

impl RegimeThresholds {
    pub fn new(tau_low: f64, tau_high: f64) -> Result<Self> {
        if !(0.0 < tau_low && tau_low < tau_high && tau_high < 1.0) {
            return Err(Error::input(format!(
                "thresholds must satisfy 0 < tau_low < tau_high < 1, got {tau_low}, {tau_high}"
            )));
        }
        Ok(RegimeThresholds { tau_low, tau_high })
    }
}

pub fn classify_regime(h_norm: f64, h_norm_cl: f64, th: RegimeThresholds) -> Result<Regime> {
    if h_norm_cl > h_norm {
        return Err(Error::input(format!(
            "lookahead entropy {h_norm_cl} exceeds current entropy {h_norm}"
        )));
    }
    Ok(if h_norm <= th.tau_low {
        Regime::Lock
    } else if h_norm >= th.tau_high && h_norm_cl >= th.tau_high {
        Regime::Fork
    } else if h_norm >= th.tau_high && h_norm_cl <= th.tau_low {
        Regime::Pivot
    } else {
        Regime::Mid
    })
}

/// `ω(Ĥ^CL) − ω(Ĥ)`; non-negative whenever `Ĥ^CL ≤ Ĥ`.
pub fn weight_increment(h_norm: f64, h_norm_cl: f64, gamma: f64, floor: f64) -> f64 {
    gate::confidence_gate(h_norm_cl, gamma, floor, 1.0)
        - gate::confidence_gate(h_norm, gamma, floor, 1.0)
}

/// `Acc / (AvgLen / 1000)`.
pub fn token_efficiency(accuracy_percent: f64, mean_len_tokens: f64) -> Result<f64> {
    if mean_len_tokens.is_nan() || mean_len_tokens <= 0.0 {
        return Err(Error::input("mean length must be positive"));
    }
    Ok(accuracy_percent / (mean_len_tokens / 1000.0))
}

/// The per-token quantities the reports consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenDiag {
    pub h_norm: f64,
    pub h_norm_cl: f64,
    pub delta: f64,
    /// `w·ω`, i.e. `|Â|/|A|`.
    pub weight: f64,
    pub omega: f64,
}

/// Mask-true tokens of a credited batch, in batch order.
pub fn token_diags(credit: &BatchCredit, traces: &[RolloutTrace]) -> Vec<TokenDiag> {
    credit
        .masked(traces)
        .map(|(_, c)| TokenDiag {
            h_norm: c.h_norm,
            h_norm_cl: c.h_norm_cl,
            delta: c.delta,
            weight: c.magnitude * c.gate,
            omega: c.gate,
        })
        .collect()
}

/// Credits a trace file offline. Sequence advantages use the constant
/// baseline `r − 0.5`; the gate is evaluated on the current-token entropy.
pub fn offline_credit(
    traces: &[RolloutTrace],
    gamma: f64,
    window: usize,
    epsilon: f64,
    floor: f64,
) -> Result<BatchCredit> {
    let advantages: Vec<f64> = traces
        .iter()
        .map(|t| t.reward - crate::reward::WARMUP_BASELINE)
        .collect();
    let params = CreditParams {
        method: if window > 0 {
            Method::ClEgrsd
        } else {
            Method::Egrsd
        },
        gamma,
        window,
        epsilon,
        gate_floor: floor,
        gate_ceiling: 1.0,
    };
    let mut bc = credit::assemble_batch(traces, &advantages, &params)?;
    if window > 0 {
        for (row, &a) in bc.tokens.iter_mut().zip(&advantages) {
            for c in row {
                c.gate = gate::confidence_gate(c.h_norm, gamma, floor, 1.0);
                c.advantage_token = credit::token_advantage(a, c.magnitude, c.gate);
            }
        }
    }
    Ok(bc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct RegimeAcc {
    count: usize,
    delta_omega: f64,
    h: f64,
    h_cl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeRow {
    pub regime: Regime,
    pub token_share: f64,
    pub mean_delta_omega: f64,
    pub mean_h: f64,
    pub mean_h_cl: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeReport {
    pub rows: Vec<RegimeRow>,
    pub thresholds: RegimeThresholds,
    pub gamma: f64,
    pub total: usize,
}

impl RegimeReport {
    pub fn row(&self, r: Regime) -> &RegimeRow {
        &self.rows[r.index()]
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "regime",
            "token_share",
            "mean_delta_omega",
            "mean_h",
            "mean_h_cl",
        ]);
        t.preamble.push(format!(
            "# tau_low={},tau_high={},gamma={}",
            fmt_f64(self.thresholds.tau_low),
            fmt_f64(self.thresholds.tau_high),
            fmt_f64(self.gamma)
        ));
        for r in &self.rows {
            t.push(vec![
                r.regime.as_str().into(),
                fmt_f64(r.token_share),
                fmt_f64(r.mean_delta_omega),
                fmt_f64(r.mean_h),
                fmt_f64(r.mean_h_cl),
            ]);
        }
        t
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-regime token share and mean lookahead weight increment.
pub fn regime_report(
    tokens: &[TokenDiag],
    gamma: f64,
    floor: f64,
    th: RegimeThresholds,
    exec: Execution,
) -> Result<RegimeReport> {
    if tokens.is_empty() {
        return Err(Error::input("regime report needs at least one token"));
    }
    let ranges = chunk_ranges(tokens.len(), 64);
    let partials = exec.try_map(ranges.len(), |c| {
        let mut acc = [RegimeAcc::default(); 4];
        for tok in &tokens[ranges[c].clone()] {
            let r = classify_regime(tok.h_norm, tok.h_norm_cl, th)?;
            let a = &mut acc[r.index()];
            a.count += 1;
            a.delta_omega += weight_increment(tok.h_norm, tok.h_norm_cl, gamma, floor);
            a.h += tok.h_norm;
            a.h_cl += tok.h_norm_cl;
        }
        Ok::<_, Error>(acc)
    })?;
    let mut acc = [RegimeAcc::default(); 4];
    for p in &partials {
        for (a, b) in acc.iter_mut().zip(p) {
            a.count += b.count;
            a.delta_omega += b.delta_omega;
            a.h += b.h;
            a.h_cl += b.h_cl;
        }
    }
    let total = tokens.len();
    let rows = Regime::ALL
        .iter()
        .map(|&r| {
            let a = acc[r.index()];
            RegimeRow {
                regime: r,
                token_share: a.count as f64 / total as f64,
                mean_delta_omega: mean(a.delta_omega, a.count),
                mean_h: mean(a.h, a.count),
                mean_h_cl: mean(a.h_cl, a.count),
                count: a.count,
            }
        })
        .collect();
    Ok(RegimeReport {
        rows,
        thresholds: th,
        gamma,
        total,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecileRow {
    pub decile: usize,
    pub mean_h: f64,
    pub mean_abs_delta: f64,
    pub mean_weight: f64,
    pub mean_omega: f64,
}

/// Ten equal-count buckets by `Ĥ`, ties kept in position order.
pub fn decile_report(tokens: &[TokenDiag]) -> Result<Vec<DecileRow>> {
    let n = tokens.len();
    if n < 10 {
        return Err(Error::input(format!(
            "decile report needs at least 10 tokens, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tokens[a].h_norm.total_cmp(&tokens[b].h_norm));
    Ok((0..10)
        .map(|d| {
            let bucket = &order[d * n / 10..(d + 1) * n / 10];
            let k = bucket.len();
            let sum = |f: fn(&TokenDiag) -> f64| {
                bucket.iter().map(|&i| f(&tokens[i])).sum::<f64>() / k as f64
            };
            DecileRow {
                decile: d + 1,
                mean_h: sum(|t| t.h_norm),
                mean_abs_delta: sum(|t| t.delta.abs()),
                mean_weight: sum(|t| t.weight),
                mean_omega: sum(|t| t.omega),
            }
        })
        .collect())
}

pub fn decile_table(rows: &[DecileRow]) -> Table {
    let mut t = Table::new(&[
        "decile",
        "mean_h",
        "mean_abs_delta",
        "mean_weight",
        "mean_omega",
    ]);
    for r in rows {
        t.push(vec![
            r.decile.to_string(),
            fmt_f64(r.mean_h),
            fmt_f64(r.mean_abs_delta),
            fmt_f64(r.mean_weight),
            fmt_f64(r.mean_omega),
        ]);
    }
    t
}

/// One row of offline gate output.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub rollout: usize,
    pub prompt_id: String,
    pub position: usize,
    pub h: f64,
    pub h_norm: f64,
    pub h_norm_cl: f64,
    pub omega: f64,
    pub omega_cl: f64,
}

/// Gates every mask-true token of `traces`. With `batch_size = None` the whole
/// input is normalized as one batch; otherwise consecutive groups of
/// `batch_size` records are normalized separately.
pub fn offline_gate(
    traces: &[RolloutTrace],
    gamma: f64,
    window: usize,
    floor: f64,
    batch_size: Option<usize>,
) -> Result<Vec<GateRow>> {
    if traces.is_empty() {
        return Err(Error::input("no traces"));
    }
    let size = match batch_size {
        Some(0) => return Err(Error::input("batch size must be at least 1")),
        Some(b) => b,
        None => traces.len(),
    };
    let mut rows = Vec::new();
    for (b, batch) in traces.chunks(size).enumerate() {
        let view = BatchEntropyView::from_traces(batch)?;
        let hn = gate::batch_normalize(&view);
        let hcl = gate::lookahead_normalize(&view, window);
        for (i, trace) in batch.iter().enumerate() {
            for (t, tok) in trace.tokens.iter().enumerate().filter(|(_, k)| k.mask) {
                rows.push(GateRow {
                    rollout: b * size + i,
                    prompt_id: trace.prompt_id.clone(),
                    position: t,
                    h: tok.teacher_entropy,
                    h_norm: hn[i][t],
                    h_norm_cl: hcl[i][t],
                    omega: gate::confidence_gate(hn[i][t], gamma, floor, 1.0),
                    omega_cl: gate::confidence_gate(hcl[i][t], gamma, floor, 1.0),
                });
            }
        }
    }
    Ok(rows)
}

pub fn gate_table(rows: &[GateRow]) -> Table {
    let mut t = Table::new(&[
        "rollout",
        "prompt_id",
        "position",
        "h",
        "h_norm",
        "h_norm_cl",
        "omega",
        "omega_cl",
    ]);
    for r in rows {
        t.push(vec![
            r.rollout.to_string(),
            r.prompt_id.replace(',', ";"),
            r.position.to_string(),
            fmt_f64(r.h),
            fmt_f64(r.h_norm),
            fmt_f64(r.h_norm_cl),
            fmt_f64(r.omega),
            fmt_f64(r.omega_cl),
        ]);
    }
    t
}

fn fixture_trace(id: String, entropies: &[f64]) -> RolloutTrace {
    let tokens: Vec<TokenRecord> = entropies
        .iter()
        .enumerate()
        .map(|(t, &h)| TokenRecord::new(15 + t % 5, -0.5 - 0.01 * t as f64, -0.5, h))
        .collect();
    RolloutTrace {
        prompt_id: id,
        prompt: Vec::new(),
        reference: Vec::new(),
        completion_length: tokens.len(),
        tokens,
        reward: 1.0,
        correct: true,
    }
}

/// Synthetic traces alternating low-entropy runs with high-entropy runs. Runs
/// longer than the window produce forks; short runs followed by a low token
/// produce pivots. Entropies are in nats with batch maximum exactly 2.
pub fn pivot_fork_fixture<R: Rng>(
    n_traces: usize,
    window: usize,
    rng: &mut R,
) -> Vec<RolloutTrace> {
    let w = window.max(1);
    let low = |rng: &mut R| rng.gen_range(0.0..0.2);
    let high = |rng: &mut R| rng.gen_range(1.6..2.0);
    let mut out = Vec::with_capacity(n_traces.max(1));
    let mut seeded = vec![0.05, 2.0];
    seeded.extend(std::iter::repeat_n(1.8, w + 1));
    seeded.extend([0.0, 1.9, 0.1]);
    out.push(fixture_trace("fixture-0".into(), &seeded));
    for i in 1..n_traces {
        let mut h = Vec::new();
        for _ in 0..rng.gen_range(2..5) {
            for _ in 0..rng.gen_range(1..3) {
                h.push(low(rng));
            }
            for _ in 0..rng.gen_range(1..=2 * w + 2) {
                h.push(high(rng));
            }
        }
        h.push(low(rng));
        out.push(fixture_trace(format!("fixture-{i}"), &h));
    }
    out
}

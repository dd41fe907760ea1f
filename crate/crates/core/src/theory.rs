//! Numerical audits of the gate's analytic justification: the shrinkage
//! reference curve and its endpoint chord, and the causal filter family with
//! its pointwise lower bound and extremal-recovery ordering.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gate::confidence_gate;
use crate::policy::{stream, substream};

/// `ω*(Ĥ) = 1 / (1 + a0·Ĥ)`.
pub fn reference_curve(h_norm: f64, a0: f64) -> f64 {
    1.0 / (1.0 + a0 * h_norm)
}

/// `γ = a0 / (1 + a0)`.
pub fn gamma_from_nsr(a0: f64) -> f64 {
    a0 / (1.0 + a0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChordReport {
    pub a0: f64,
    pub gamma: f64,
    pub grid_size: usize,
    /// Smallest `chord − curve` over the grid.
    pub min_gap: f64,
    pub max_gap: f64,
    pub argmax_gap: f64,
    pub endpoint_gap: f64,
    /// Smallest second difference of the reference curve over the grid.
    pub min_second_difference: f64,
    pub passed: bool,
}

pub const AUDIT_TOL: f64 = 1e-12;

/// Compares the linear gate `1 − γĤ` (with `γ` from [`gamma_from_nsr`]) to the
/// reference curve on a uniform grid over `[0, 1]`.
pub fn chord_dominance_check(a0: f64, grid_size: usize) -> Result<ChordReport> {
    chord_check_with_gamma(a0, gamma_from_nsr(a0), grid_size)
}

/// As [`chord_dominance_check`] with an arbitrary slope.
pub fn chord_check_with_gamma(a0: f64, gamma: f64, grid_size: usize) -> Result<ChordReport> {
    if grid_size < 3 {
        return Err(Error::input("grid_size must be at least 3"));
    }
    let step = 1.0 / (grid_size - 1) as f64;
    let xs: Vec<f64> = (0..grid_size)
        .map(|i| {
            if i + 1 == grid_size {
                1.0
            } else {
                i as f64 * step
            }
        })
        .collect();
    let curve: Vec<f64> = xs.iter().map(|&x| reference_curve(x, a0)).collect();
    let (mut min_gap, mut max_gap, mut argmax) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for (&x, &c) in xs.iter().zip(&curve) {
        let gap = (1.0 - gamma * x) - c;
        min_gap = min_gap.min(gap);
        if gap > max_gap {
            max_gap = gap;
            argmax = x;
        }
    }
    let endpoint_gap = [0, grid_size - 1]
        .iter()
        .map(|&i| ((1.0 - gamma * xs[i]) - curve[i]).abs())
        .fold(0.0, f64::max);
    let min_second_difference = curve
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    Ok(ChordReport {
        a0,
        gamma,
        grid_size,
        min_gap,
        max_gap,
        argmax_gap: argmax,
        endpoint_gap,
        min_second_difference,
        passed: min_gap >= -AUDIT_TOL
            && endpoint_gap <= AUDIT_TOL
            && min_second_difference >= -AUDIT_TOL,
    })
}

/// A causal smoothing filter over `[h_t, h_{t+1}, …, h_{t+W}]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterSpec {
    CurrentOnly,
    WindowMin,
    /// `α·h₀ + (1 − α)·min_j h_j`.
    Mix(f64),
    /// Window average. Not a member of the family; used to exercise the audit.
    WindowMean,
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterSpec::CurrentOnly => f.write_str("current_only"),
            FilterSpec::WindowMin => f.write_str("window_min"),
            FilterSpec::Mix(a) => write!(f, "mix({a})"),
            FilterSpec::WindowMean => f.write_str("window_mean"),
        }
    }
}

impl FilterSpec {
    /// The audited family members.
    pub fn family() -> Vec<FilterSpec> {
        vec![
            FilterSpec::CurrentOnly,
            FilterSpec::Mix(0.25),
            FilterSpec::Mix(0.5),
            FilterSpec::Mix(0.75),
            FilterSpec::WindowMin,
        ]
    }

    /// Applies the filter to the first `window + 1` entries of `h` (fewer at the sequence end).
    pub fn apply(&self, h: &[f64], window: usize) -> f64 {
        let win = &h[..h.len().min(window + 1)];
        let h0 = win[0];
        let min = || win.iter().copied().fold(f64::INFINITY, f64::min);
        match *self {
            FilterSpec::CurrentOnly => h0,
            FilterSpec::WindowMin => min(),
            // Written as an offset from h₀ so constant windows map to themselves exactly.
            FilterSpec::Mix(alpha) => h0 + (1.0 - alpha) * (min() - h0),
            FilterSpec::WindowMean => win.iter().sum::<f64>() / win.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterCondition {
    Monotone,
    Conservative,
    Idempotent,
    Causal,
}

impl fmt::Display for FilterCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterCondition::Monotone => "monotone",
            FilterCondition::Conservative => "conservative",
            FilterCondition::Idempotent => "idempotent",
            FilterCondition::Causal => "causal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub condition: FilterCondition,
    pub trial: usize,
    pub window: Vec<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterAudit {
    pub filter: FilterSpec,
    pub window: usize,
    pub trials: usize,
    pub violations: [usize; 4],
    pub first_counterexample: Option<Counterexample>,
}

impl FilterAudit {
    pub fn passed(&self) -> bool {
        self.violations.iter().all(|&v| v == 0)
    }

    pub fn holds(&self, c: FilterCondition) -> bool {
        self.violations[c as usize] == 0
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::input("trials must be ≥ 1"))
    } else {
        Ok(())
    }
}

fn random_window<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(0.0..=3.0)).collect()
}

fn audit_one(
    filter: FilterSpec,
    window: usize,
    h: &[f64],
    rng: &mut impl Rng,
) -> Vec<(FilterCondition, String)> {
    let mut bad = Vec::new();
    let phi = filter.apply(h, window);
    for j in 0..h.len() {
        let mut up = h.to_vec();
        up[j] += rng.gen_range(0.0..1.0);
        let phi_up = filter.apply(&up, window);
        if phi_up < phi - AUDIT_TOL {
            bad.push((
                FilterCondition::Monotone,
                format!("raising h[{j}] lowered φ from {phi} to {phi_up}"),
            ));
            break;
        }
    }
    if phi > h[0] + AUDIT_TOL {
        bad.push((
            FilterCondition::Conservative,
            format!("φ = {phi} > h0 = {}", h[0]),
        ));
    }
    let c = h[0];
    let constant = vec![c; h.len()];
    let phi_c = filter.apply(&constant, window);
    if phi_c != c {
        bad.push((
            FilterCondition::Idempotent,
            format!("φ(c,…,c) = {phi_c} for c = {c}"),
        ));
    }
    let mut extended = h.to_vec();
    extended.extend(random_window(rng, 3));
    if filter.apply(&extended, window) != phi {
        bad.push((
            FilterCondition::Causal,
            "entries beyond the window changed φ".into(),
        ));
    }
    bad
}

/// Randomized perturbation audit of the four family conditions.
pub fn filter_family_audit(
    filter: FilterSpec,
    window: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<FilterAudit> {
    check_trials(trials)?;
    let results = exec.map(trials, |i| {
        let mut rng = substream(seed, stream::AUDIT, window as u64, i as u64);
        let h = random_window(&mut rng, window + 1);
        let bad = audit_one(filter, window, &h, &mut rng);
        (h, bad)
    });
    let mut violations = [0usize; 4];
    let mut first = None;
    for (trial, (h, bad)) in results.into_iter().enumerate() {
        for (cond, detail) in bad {
            violations[cond as usize] += 1;
            first.get_or_insert_with(|| Counterexample {
                condition: cond,
                trial,
                window: h.clone(),
                detail,
            });
        }
    }
    Ok(FilterAudit {
        filter,
        window,
        trials,
        violations,
        first_counterexample: first,
    })
}

/// Pre-clip weight recovery `γ·(h₀ − φ(h)) / H_max`.
pub fn recovery(filter: FilterSpec, h: &[f64], window: usize, gamma: f64, h_max: f64) -> f64 {
    gamma * (h[0] - filter.apply(h, window)) / h_max
}

/// Post-clip weight recovery with the implemented gate (floor 0.1).
pub fn recovery_clipped(
    filter: FilterSpec,
    h: &[f64],
    window: usize,
    gamma: f64,
    h_max: f64,
) -> f64 {
    confidence_gate(filter.apply(h, window) / h_max, gamma, 0.1, 1.0)
        - confidence_gate(h[0] / h_max, gamma, 0.1, 1.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtremalityReport {
    pub trials: usize,
    pub windows: Vec<usize>,
    /// `φ(h) < min(h) − tol`.
    pub lower_bound_violations: usize,
    /// `Δ^φ > Δ^min + tol`.
    pub ordering_violations: usize,
    /// Some filter moved a constant window.
    pub constant_violations: usize,
    /// `h₀ > min(h)` but `Δ^min ≤ Δ^current_only`.
    pub strictness_violations: usize,
    /// Post-clip ordering failures; reported only.
    pub clipped_ordering_violations: usize,
    pub worst_lower_bound_gap: f64,
    pub worst_ordering_gap: f64,
}

impl ExtremalityReport {
    pub fn passed(&self) -> bool {
        self.lower_bound_violations == 0
            && self.ordering_violations == 0
            && self.constant_violations == 0
            && self.strictness_violations == 0
    }
}

/// Lower-bound and extremal-recovery audit over random windows of each size in `windows`.
pub fn extremality_check(
    filters: &[FilterSpec],
    windows: &[usize],
    trials: usize,
    gamma: f64,
    seed: u64,
    exec: Execution,
) -> Result<ExtremalityReport> {
    check_trials(trials)?;
    if !filters.contains(&FilterSpec::WindowMin) {
        return Err(Error::input("window_min must be among the audited filters"));
    }
    let mut report = ExtremalityReport {
        trials,
        windows: windows.to_vec(),
        worst_lower_bound_gap: f64::INFINITY,
        worst_ordering_gap: f64::NEG_INFINITY,
        ..Default::default()
    };
    for &w in windows {
        let per_trial = exec.map(trials, |i| {
            let mut rng = substream(seed, stream::AUDIT, 1000 + w as u64, i as u64);
            let h = random_window(&mut rng, w + 1);
            let h_max = h.iter().copied().fold(1.0, f64::max);
            let min = FilterSpec::WindowMin.apply(&h, w);
            let d_min = recovery(FilterSpec::WindowMin, &h, w, gamma, h_max);
            let d_min_clip = recovery_clipped(FilterSpec::WindowMin, &h, w, gamma, h_max);
            let mut r = ExtremalityReport {
                worst_lower_bound_gap: f64::INFINITY,
                worst_ordering_gap: f64::NEG_INFINITY,
                ..Default::default()
            };
            for &f in filters {
                let lb_gap = f.apply(&h, w) - min;
                r.worst_lower_bound_gap = r.worst_lower_bound_gap.min(lb_gap);
                r.lower_bound_violations += usize::from(lb_gap < -AUDIT_TOL);
                let ord_gap = recovery(f, &h, w, gamma, h_max) - d_min;
                r.worst_ordering_gap = r.worst_ordering_gap.max(ord_gap);
                r.ordering_violations += usize::from(ord_gap > AUDIT_TOL);
                r.clipped_ordering_violations +=
                    usize::from(recovery_clipped(f, &h, w, gamma, h_max) > d_min_clip + AUDIT_TOL);
                let c = vec![h[0]; w + 1];
                let c_max = h[0].max(1.0);
                r.constant_violations += usize::from(recovery(f, &c, w, gamma, c_max) != 0.0);
            }
            if h[0] > min && gamma > 0.0 {
                let d_cur = recovery(FilterSpec::CurrentOnly, &h, w, gamma, h_max);
                r.strictness_violations += usize::from(d_min <= d_cur);
            }
            r
        });
        for r in per_trial {
            report.lower_bound_violations += r.lower_bound_violations;
            report.ordering_violations += r.ordering_violations;
            report.constant_violations += r.constant_violations;
            report.strictness_violations += r.strictness_violations;
            report.clipped_ordering_violations += r.clipped_ordering_violations;
            report.worst_lower_bound_gap =
                report.worst_lower_bound_gap.min(r.worst_lower_bound_gap);
            report.worst_ordering_gap = report.worst_ordering_gap.max(r.worst_ordering_gap);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_examples() {
        assert_eq!(reference_curve(0.0, 7.0), 1.0);
        assert_eq!(reference_curve(1.0, 1.0), 0.5);
        assert_eq!(reference_curve(0.5, 3.0), 0.4);
        assert_eq!(gamma_from_nsr(1.0), 0.5);
        assert_eq!(gamma_from_nsr(0.0), 0.0);
        assert_eq!(gamma_from_nsr(9.0), 0.9);
    }

    #[test]
    fn gate_meets_curve_at_the_right_endpoint() {
        for a0 in [0.1, 0.5, 1.0, 3.0, 9.0] {
            let lhs = 1.0 - gamma_from_nsr(a0);
            assert!((lhs - reference_curve(1.0, a0)).abs() <= 1e-15, "a0={a0}");
        }
    }

    #[test]
    fn chord_dominates() {
        let r = chord_dominance_check(1.0, 1001).unwrap();
        assert!(r.passed);
        assert!((r.argmax_gap - (2f64.sqrt() - 1.0)).abs() < 1e-3);
        let small = chord_dominance_check(0.01, 1001).unwrap();
        assert!(small.passed && small.max_gap <= 0.01 * 0.01 / 4.0 + 1e-12);
        assert!(chord_dominance_check(1.0, 2).is_err());
    }

    #[test]
    fn steep_gate_falls_below_curve() {
        let r = chord_check_with_gamma(1.0, 0.8, 101).unwrap();
        assert!(!r.passed);
        assert!(r.min_gap < 0.0);
    }

    #[test]
    fn family_members_pass() {
        for f in FilterSpec::family() {
            for w in [1, 3] {
                let a = filter_family_audit(f, w, 500, 1, Execution::Serial).unwrap();
                assert!(a.passed(), "{f} W={w}: {:?}", a.first_counterexample);
            }
        }
    }

    #[test]
    fn mean_filter_is_not_conservative() {
        assert_eq!(FilterSpec::WindowMean.apply(&[0.1, 2.0], 1), 1.05);
        let a = filter_family_audit(FilterSpec::WindowMean, 1, 200, 2, Execution::Serial).unwrap();
        assert!(!a.holds(FilterCondition::Conservative));
        assert!(a.holds(FilterCondition::Monotone) && a.holds(FilterCondition::Causal));
        assert_eq!(
            a.first_counterexample.unwrap().condition,
            FilterCondition::Conservative
        );
    }

    #[test]
    fn zero_trials_rejected() {
        let e = filter_family_audit(FilterSpec::WindowMin, 1, 0, 0, Execution::Serial).unwrap_err();
        assert!(e.to_string().contains("trials must be ≥ 1"));
        assert!(
            extremality_check(&FilterSpec::family(), &[1], 0, 0.3, 0, Execution::Serial).is_err()
        );
        assert!(extremality_check(
            &[FilterSpec::CurrentOnly],
            &[1],
            5,
            0.3,
            0,
            Execution::Serial
        )
        .is_err());
    }

    #[test]
    fn extremality_holds() {
        let r = extremality_check(
            &FilterSpec::family(),
            &[1, 3],
            2000,
            0.3,
            4,
            Execution::Serial,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let p = extremality_check(
            &FilterSpec::family(),
            &[1, 3],
            2000,
            0.3,
            4,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(r, p);
    }

    #[test]
    fn constant_and_pivot_windows() {
        let c = [0.7; 4];
        for f in FilterSpec::family() {
            assert_eq!(recovery(f, &c, 3, 1.0, 1.0), 0.0);
        }
        let pivot = [2.0, 2.0, 0.1];
        assert!(
            recovery(FilterSpec::WindowMin, &pivot, 2, 0.3, 2.0)
                > recovery(FilterSpec::CurrentOnly, &pivot, 2, 0.3, 2.0)
        );
    }
}

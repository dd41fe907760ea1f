//! Teacher entropy, batch-global normalization, causal lookahead, and the
//! linear confidence gate.

use crate::error::{Error, Result};
use crate::types::RolloutTrace;

/// Lower bound on the normalization denominator, in nats.
pub const DENOMINATOR_FLOOR: f64 = 1.0;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Shannon entropy `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::input("empty distribution"));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::input(
            "distribution has negative or non-finite entries",
        ));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::input(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

/// Raw per-position entropies of a minibatch plus the maximum over completion positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEntropyView {
    pub entropies: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub batch_max: f64,
}

impl BatchEntropyView {
    pub fn new(entropies: Vec<Vec<f64>>, masks: Vec<Vec<bool>>) -> Result<Self> {
        if entropies.len() != masks.len()
            || entropies
                .iter()
                .zip(&masks)
                .any(|(h, m)| h.len() != m.len())
        {
            return Err(Error::input("entropy and mask shapes differ"));
        }
        let mut batch_max = f64::NEG_INFINITY;
        let mut any = false;
        for (h, m) in entropies.iter().zip(&masks) {
            for (&v, &keep) in h.iter().zip(m) {
                if keep {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::input(format!("invalid entropy {v}")));
                    }
                    any = true;
                    batch_max = batch_max.max(v);
                }
            }
        }
        if !any {
            return Err(Error::input("empty completion set"));
        }
        Ok(BatchEntropyView {
            entropies,
            masks,
            batch_max,
        })
    }

    /// All-mask-true view over plain entropy rows.
    pub fn unmasked(entropies: Vec<Vec<f64>>) -> Result<Self> {
        let masks = entropies.iter().map(|h| vec![true; h.len()]).collect();
        Self::new(entropies, masks)
    }

    pub fn from_traces(traces: &[RolloutTrace]) -> Result<Self> {
        let entropies = traces
            .iter()
            .map(|t| t.tokens.iter().map(|k| k.teacher_entropy).collect())
            .collect();
        let masks = traces
            .iter()
            .map(|t| t.tokens.iter().map(|k| k.mask).collect())
            .collect();
        Self::new(entropies, masks)
    }

    /// `max(batch_max, 1 nat)`.
    pub fn denominator(&self) -> f64 {
        self.batch_max.max(DENOMINATOR_FLOOR)
    }
}

/// `Ĥ = H / max(batch_max, 1)` on completion positions, 0 elsewhere.
pub fn batch_normalize(view: &BatchEntropyView) -> Vec<Vec<f64>> {
    let denom = view.denominator();
    view.entropies
        .iter()
        .zip(&view.masks)
        .map(|(h, m)| {
            h.iter()
                .zip(m)
                .map(|(&v, &keep)| if keep { v / denom } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Minimum raw entropy over positions `t ..= min(t + w, t_end - 1)`.
pub fn lookahead_min(entropies: &[f64], t: usize, w: usize, t_end: usize) -> Result<f64> {
    if t_end > entropies.len() || t >= t_end {
        return Err(Error::input(format!(
            "position {t} out of range for sequence of length {t_end}"
        )));
    }
    let last = t.saturating_add(w).min(t_end - 1);
    Ok(entropies[t..=last]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// Lookahead minimum at every position of one rollout, ignoring masked positions
/// inside each window. Masked positions themselves map to 0.
pub fn lookahead_row(entropies: &[f64], mask: &[bool], w: usize) -> Vec<f64> {
    let n = entropies.len();
    (0..n)
        .map(|t| {
            if !mask[t] {
                return 0.0;
            }
            let last = t.saturating_add(w).min(n - 1);
            (t..=last)
                .filter(|&j| mask[j])
                .map(|j| entropies[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `Ĥ^CL` for every position of the batch, sharing the instantaneous denominator.
pub fn lookahead_normalize(view: &BatchEntropyView, w: usize) -> Vec<Vec<f64>> {
    let denom = view.denominator();
    view.entropies
        .iter()
        .zip(&view.masks)
        .map(|(h, m)| {
            lookahead_row(h, m, w)
                .into_iter()
                .zip(m)
                .map(|(v, &keep)| if keep { v / denom } else { 0.0 })
                .collect()
        })
        .collect()
}

/// `ω = clip(1 − γ·Ĥ, floor, ceiling)`.
#[inline]
pub fn confidence_gate(h_norm: f64, gamma: f64, floor: f64, ceiling: f64) -> f64 {
    (1.0 - gamma * h_norm).clamp(floor, ceiling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        let u = token_entropy(&[0.25; 4]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1) summed term by term
        let h = token_entropy(&[0.7, 0.2, 0.1]).unwrap();
        assert!((h - 0.801_818_6).abs() < 1e-6, "{h}");
    }

    #[test]
    fn entropy_rejects_bad_input() {
        assert!(token_entropy(&[0.5, 0.6]).is_err());
        assert!(token_entropy(&[1.5, -0.5]).is_err());
        assert!(token_entropy(&[]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = BatchEntropyView::unmasked(vec![vec![0.5, 0.25]]).unwrap();
        assert_eq!(v.batch_max, 0.5);
        assert_eq!(batch_normalize(&v), vec![vec![0.5, 0.25]]);

        let v = BatchEntropyView::unmasked(vec![vec![2.0, 1.0]]).unwrap();
        assert_eq!(batch_normalize(&v), vec![vec![1.0, 0.5]]);

        let v = BatchEntropyView::unmasked(vec![vec![0.0, 0.0], vec![0.0]]).unwrap();
        assert_eq!(batch_normalize(&v), vec![vec![0.0, 0.0], vec![0.0]]);
    }

    #[test]
    fn masked_positions_excluded_from_max() {
        let v = BatchEntropyView::new(vec![vec![5.0, 2.0]], vec![vec![false, true]]).unwrap();
        assert_eq!(v.batch_max, 2.0);
        assert_eq!(batch_normalize(&v), vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn empty_completion_set_is_error() {
        assert!(BatchEntropyView::new(vec![vec![1.0]], vec![vec![false]]).is_err());
        assert!(BatchEntropyView::unmasked(vec![]).is_err());
    }

    #[test]
    fn lookahead_examples() {
        assert_eq!(lookahead_min(&[3.0, 0.2, 2.0], 0, 2, 3).unwrap(), 0.2);
        assert_eq!(lookahead_min(&[3.0, 0.2, 2.0], 0, 0, 3).unwrap(), 3.0);
        assert_eq!(lookahead_min(&[1.0, 0.5], 1, 5, 2).unwrap(), 0.5);
        assert!(lookahead_min(&[1.0, 0.5], 2, 1, 2).is_err());
    }

    #[test]
    fn gate_examples() {
        assert!((confidence_gate(1.0, 0.3, 0.1, 1.0) - 0.7).abs() < 1e-15);
        assert_eq!(confidence_gate(0.0, 7.0, 0.1, 1.0), 1.0);
        assert_eq!(confidence_gate(0.95, 1.0, 0.1, 1.0), 0.1);
        for h in [0.0, 0.3, 1.0, 2.5] {
            assert_eq!(confidence_gate(h, 0.0, 0.1, 1.0), 1.0);
        }
    }

    proptest! {
        #[test]
        fn gate_is_bounded_and_monotone(h in 0.0f64..5.0, dh in 0.0f64..1.0, g in 0.0f64..3.0) {
            let a = confidence_gate(h, g, 0.1, 1.0);
            prop_assert!((0.1..=1.0).contains(&a));
            prop_assert!(confidence_gate(h + dh, g, 0.1, 1.0) <= a);
            prop_assert!(confidence_gate(h, g + dh, 0.1, 1.0) <= a);
        }

        #[test]
        fn lookahead_conservative_and_monotone(
            h in prop::collection::vec(0.0f64..3.0, 1..20),
            w1 in 0usize..8,
            extra in 0usize..8,
            seed in any::<usize>(),
        ) {
            let t = seed % h.len();
            let a = lookahead_min(&h, t, w1, h.len()).unwrap();
            let b = lookahead_min(&h, t, w1 + extra, h.len()).unwrap();
            prop_assert!(a <= h[t]);
            prop_assert!(b <= a);
            prop_assert_eq!(lookahead_min(&h, t, 0, h.len()).unwrap(), h[t]);
            let row = lookahead_row(&h, &vec![true; h.len()], w1);
            prop_assert_eq!(row[t], a);
        }

        #[test]
        fn lookahead_gate_dominates(h in prop::collection::vec(0.0f64..3.0, 1..20), w in 0usize..8, g in 0.0f64..2.0) {
            let view = BatchEntropyView::unmasked(vec![h]).unwrap();
            let inst = batch_normalize(&view);
            let cl = lookahead_normalize(&view, w);
            for (a, b) in inst[0].iter().zip(&cl[0]) {
                prop_assert!(b <= a);
                prop_assert!(confidence_gate(*b, g, 0.1, 1.0) >= confidence_gate(*a, g, 0.1, 1.0));
            }
        }

        #[test]
        fn normalization_preserves_argmax(h in prop::collection::vec(0.0f64..3.0, 2..20), c in 1.0f64..4.0) {
            let mut h = h;
            h[0] = h[0].max(1.0);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let a = batch_normalize(&BatchEntropyView::unmasked(vec![h.clone()]).unwrap());
            let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
            let b = batch_normalize(&BatchEntropyView::unmasked(vec![scaled]).unwrap());
            prop_assert_eq!(argmax(&a[0]), argmax(&b[0]));
        }
    }
}

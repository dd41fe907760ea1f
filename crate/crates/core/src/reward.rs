//! Verifier reward with length shaping, running reward statistics, and
//! advantage whitening with a constant warm-up baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steps `1..=WARMUP_STEPS` use the constant baseline instead of running statistics.
pub const WARMUP_STEPS: u64 = 10;
pub const WARMUP_BASELINE: f64 = 0.5;
pub const STD_FLOOR: f64 = 1e-6;

/// `1[correct]·(1 + β_L·(1 − len/L_max))`.
pub fn shaped_reward(
    correct: bool,
    length: usize,
    max_len: usize,
    beta_length: f64,
) -> Result<f64> {
    if length > max_len {
        return Err(Error::input(format!(
            "length {length} exceeds max_len {max_len}"
        )));
    }
    if !correct {
        return Ok(0.0);
    }
    Ok(1.0 + beta_length * (1.0 - length as f64 / max_len as f64))
}

/// Running reward statistics (Welford accumulator).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    /// Number of batches folded in so far.
    pub step: u64,
}

impl RewardStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> Option<f64> {
        (self.count > 0).then(|| self.m2 / self.count as f64)
    }
}

/// Folds a batch into the statistics one element at a time, in order.
pub fn welford_update(stats: RewardStats, rewards: &[f64]) -> RewardStats {
    let mut next = stats;
    if rewards.is_empty() {
        return next;
    }
    for &r in rewards {
        next.push(r);
    }
    next.step += 1;
    next
}

/// Population standard deviation, floored at [`STD_FLOOR`].
pub fn reward_std(stats: &RewardStats) -> Result<f64> {
    let var = stats
        .variance()
        .ok_or_else(|| Error::input("reward_std requires at least one observation"))?;
    Ok(var.max(0.0).sqrt().max(STD_FLOOR))
}

/// Whitened advantage for a reward observed at `step` (1-indexed), using
/// statistics from strictly earlier steps.
pub fn whiten(reward: f64, stats: &RewardStats, step: u64) -> f64 {
    if step <= WARMUP_STEPS || stats.count == 0 {
        return reward - WARMUP_BASELINE;
    }
    // count > 0 checked above
    let std = reward_std(stats).unwrap_or(STD_FLOOR);
    (reward - stats.mean) / std
}

/// Strict sign with `sign(0) = 0`.
pub fn direction(a: f64) -> i8 {
    if a > 0.0 {
        1
    } else if a < 0.0 {
        -1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (mean, xs.iter().map(|x| (x - mean) * (x - mean)).sum())
    }

    #[test]
    fn shaped_reward_examples() {
        assert_eq!(shaped_reward(true, 16, 16, 0.5).unwrap(), 1.0);
        assert_eq!(shaped_reward(true, 0, 16, 0.5).unwrap(), 1.5);
        assert_eq!(shaped_reward(false, 3, 16, 0.5).unwrap(), 0.0);
        assert_eq!(shaped_reward(true, 8, 16, 0.5).unwrap(), 1.25);
        assert!(shaped_reward(true, 17, 16, 0.5).is_err());
    }

    #[test]
    fn welford_examples() {
        let s = welford_update(RewardStats::default(), &[1.0]);
        assert_eq!((s.count, s.mean, s.m2), (1, 1.0, 0.0));
        let s = welford_update(RewardStats::default(), &[1.0, 0.0]);
        assert_eq!((s.count, s.mean, s.m2), (2, 0.5, 0.5));
        assert_eq!(two_pass(&[1.0, 0.0]), (0.5, 0.5));
        assert_eq!(welford_update(s, &[]), s);
    }

    #[test]
    fn std_examples() {
        let s = RewardStats {
            count: 2,
            mean: 0.5,
            m2: 0.5,
            step: 1,
        };
        assert_eq!(reward_std(&s).unwrap(), 0.5);
        let same = welford_update(RewardStats::default(), &[0.7; 5]);
        assert_eq!(reward_std(&same).unwrap(), STD_FLOOR);
        let one = welford_update(RewardStats::default(), &[0.3]);
        assert_eq!(reward_std(&one).unwrap(), STD_FLOOR);
        assert!(reward_std(&RewardStats::default()).is_err());
    }

    #[test]
    fn whiten_examples() {
        let s = RewardStats::default();
        assert_eq!(whiten(1.0, &s, 5), 0.5);
        assert_eq!(whiten(0.0, &s, 5), -0.5);
        // m2/count = 0.04 -> std 0.2
        let s = RewardStats {
            count: 100,
            mean: 0.4,
            m2: 4.0,
            step: 49,
        };
        assert!((whiten(1.0, &s, 50) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn direction_examples() {
        assert_eq!(direction(3.0), 1);
        assert_eq!(direction(-0.5), -1);
        assert_eq!(direction(0.0), 0);
        assert_eq!(direction(-0.0), 0);
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(xs in prop::collection::vec(0.0f64..2.0, 1..200)) {
            let s = welford_update(RewardStats::default(), &xs);
            let (m, ssd) = two_pass(&xs);
            prop_assert!((s.mean - m).abs() <= 1e-10 * m.abs().max(1e-300) + 1e-15);
            prop_assert!((s.m2 - ssd).abs() <= 1e-10 * ssd.abs() + 1e-13);
        }

        #[test]
        fn batched_equals_single(xs in prop::collection::vec(0.0f64..2.0, 1..50)) {
            let batched = welford_update(RewardStats::default(), &xs);
            let mut single = RewardStats::default();
            for x in &xs {
                single.push(*x);
            }
            prop_assert_eq!(batched.mean, single.mean);
            prop_assert_eq!(batched.m2, single.m2);
        }

        #[test]
        fn shaping_monotone(len in 0usize..63, beta in 0.0f64..2.0) {
            let a = shaped_reward(true, len, 64, beta).unwrap();
            let b = shaped_reward(true, len + 1, 64, beta).unwrap();
            prop_assert!(b <= a);
            prop_assert_eq!(shaped_reward(false, len, 64, beta).unwrap(), 0.0);
        }
    }
}

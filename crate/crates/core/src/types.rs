//! Shared domain types, the training configuration, and their validation.
//!
//! Every probability is carried as a natural-log quantity (nats) and every
//! scalar is `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled completion token together with the teacher and student views of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: usize,
    pub student_logprob: f64,
    pub teacher_logprob: f64,
    pub teacher_entropy: f64,
    pub mask: bool,
    /// Full teacher distribution; only needed for the distribution-matching objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_dist: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_dist: Option<Vec<f64>>,
    /// Gate value used by the trainer when this token was consumed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_gate: Option<f64>,
}

impl TokenRecord {
    pub fn new(
        token_id: usize,
        student_logprob: f64,
        teacher_logprob: f64,
        teacher_entropy: f64,
    ) -> Self {
        TokenRecord {
            token_id,
            student_logprob,
            teacher_logprob,
            teacher_entropy,
            mask: true,
            teacher_dist: None,
            student_dist: None,
            train_gate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub prompt_id: String,
    #[serde(default)]
    pub prompt: Vec<usize>,
    #[serde(default)]
    pub reference: Vec<usize>,
    pub tokens: Vec<TokenRecord>,
    pub reward: f64,
    pub correct: bool,
    pub completion_length: usize,
}

impl RolloutTrace {
    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.mask).count()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }
}

/// Per-token quantities derived while assembling the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCredit {
    pub delta: f64,
    pub direction: i8,
    pub magnitude: f64,
    pub h_norm: f64,
    pub h_norm_cl: f64,
    pub gate: f64,
    pub advantage_token: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Egrsd,
    ClEgrsd,
    Rlsd,
    Grpo,
    Opsd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Egrsd => "egrsd",
            Method::ClEgrsd => "cl_egrsd",
            Method::Rlsd => "rlsd",
            Method::Grpo => "grpo",
            Method::Opsd => "opsd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "egrsd" => Ok(Method::Egrsd),
            "cl_egrsd" => Ok(Method::ClEgrsd),
            "rlsd" => Ok(Method::Rlsd),
            "grpo" => Ok(Method::Grpo),
            "opsd" => Ok(Method::Opsd),
            other => Err(Error::config("method", format!("unknown method {other:?}"))),
        }
    }
}

/// How the teacher's weights evolve during training.
///
/// Serialized as `frozen`, `ema:<alpha>` or `hardcopy:<period>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TeacherSchedule {
    Frozen,
    Ema { alpha: f64 },
    HardCopy { period: u64 },
}

impl fmt::Display for TeacherSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSchedule::Frozen => f.write_str("frozen"),
            TeacherSchedule::Ema { alpha } => write!(f, "ema:{alpha}"),
            TeacherSchedule::HardCopy { period } => write!(f, "hardcopy:{period}"),
        }
    }
}

impl FromStr for TeacherSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("teacher_schedule", format!("cannot parse {s:?}"));
        match s.split_once(':') {
            None if s == "frozen" => Ok(TeacherSchedule::Frozen),
            Some(("ema", a)) => Ok(TeacherSchedule::Ema {
                alpha: a.parse().map_err(|_| bad())?,
            }),
            Some(("hardcopy", k)) => Ok(TeacherSchedule::HardCopy {
                period: k.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for TeacherSchedule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TeacherSchedule> for String {
    fn from(s: TeacherSchedule) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub window: usize,
    pub epsilon: f64,
    pub gate_floor: f64,
    pub gate_ceiling: f64,
    pub beta_length: f64,
    pub max_len: usize,
    pub method: Method,
    pub teacher_schedule: TeacherSchedule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Number of trailing prompt+history tokens visible to the policy.
    pub context_window: usize,
    /// Whether the teacher view carries the reference solution.
    pub privileged_teacher: bool,
    /// Serial execution and fixed-order reductions; wall-clock columns are zeroed.
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.3,
            window: 0,
            epsilon: 0.2,
            gate_floor: 0.1,
            gate_ceiling: 1.0,
            beta_length: 0.5,
            max_len: 16,
            method: Method::Egrsd,
            teacher_schedule: TeacherSchedule::Frozen,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            adam_eps: 1e-8,
            grad_clip_norm: 0.1,
            temperature: 1.0,
            seed: 0,
            context_window: 4,
            privileged_teacher: true,
            reproducible: false,
        }
    }
}

fn check_finite(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{field} must be finite")))
    }
}

/// Checks every configuration invariant, reporting the first violation.
pub fn validate_config(cfg: TrainConfig) -> Result<TrainConfig> {
    for (field, v) in [
        ("gamma", cfg.gamma),
        ("epsilon", cfg.epsilon),
        ("gate_floor", cfg.gate_floor),
        ("gate_ceiling", cfg.gate_ceiling),
        ("beta_length", cfg.beta_length),
        ("learning_rate", cfg.learning_rate),
        ("beta1", cfg.beta1),
        ("beta2", cfg.beta2),
        ("weight_decay", cfg.weight_decay),
        ("adam_eps", cfg.adam_eps),
        ("grad_clip_norm", cfg.grad_clip_norm),
        ("temperature", cfg.temperature),
    ] {
        check_finite(field, v)?;
    }
    if cfg.gamma < 0.0 {
        return Err(Error::config("gamma", "gamma must be non-negative"));
    }
    if cfg.gate_floor <= 0.0 {
        return Err(Error::config("gate_floor", "gate_floor must be positive"));
    }
    if cfg.gate_ceiling != 1.0 {
        return Err(Error::config("gate_ceiling", "gate_ceiling must equal 1"));
    }
    if cfg.gate_floor > cfg.gate_ceiling {
        return Err(Error::config(
            "gate_floor",
            "gate_floor must not exceed gate_ceiling",
        ));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::config("epsilon", "epsilon out of range"));
    }
    if cfg.beta_length < 0.0 {
        return Err(Error::config(
            "beta_length",
            "beta_length must be non-negative",
        ));
    }
    if cfg.max_len == 0 {
        return Err(Error::config("max_len", "max_len must be at least 1"));
    }
    match cfg.method {
        Method::ClEgrsd if cfg.window == 0 => {
            return Err(Error::config("window", "cl_egrsd requires window > 0"));
        }
        Method::ClEgrsd => {}
        m if cfg.window != 0 => {
            return Err(Error::config(
                "window",
                format!("window must be 0 for method {m}"),
            ));
        }
        _ => {}
    }
    match cfg.teacher_schedule {
        TeacherSchedule::Ema { alpha } if !(0.0..=1.0).contains(&alpha) => {
            return Err(Error::config(
                "teacher_schedule",
                "ema alpha must lie in [0, 1]",
            ));
        }
        TeacherSchedule::HardCopy { period: 0 } => {
            return Err(Error::config(
                "teacher_schedule",
                "hardcopy period must be >= 1",
            ));
        }
        _ => {}
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::config(
            "learning_rate",
            "learning_rate must be positive",
        ));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::config("beta1", "optimizer betas must lie in [0, 1)"));
    }
    if cfg.weight_decay < 0.0 || cfg.adam_eps <= 0.0 {
        return Err(Error::config(
            "weight_decay",
            "weight_decay >= 0 and adam_eps > 0 required",
        ));
    }
    if cfg.grad_clip_norm <= 0.0 {
        return Err(Error::config(
            "grad_clip_norm",
            "grad_clip_norm must be positive",
        ));
    }
    if cfg.temperature < 0.0 {
        return Err(Error::config(
            "temperature",
            "temperature must be non-negative",
        ));
    }
    if cfg.context_window == 0 {
        return Err(Error::config(
            "context_window",
            "context_window must be at least 1",
        ));
    }
    Ok(cfg)
}

fn trace_err(trace: &RolloutTrace, reason: impl Into<String>) -> Error {
    Error::Trace {
        prompt_id: trace.prompt_id.clone(),
        reason: reason.into(),
    }
}

fn check_dist(
    trace: &RolloutTrace,
    pos: usize,
    name: &str,
    dist: &[f64],
    vocab_size: usize,
) -> Result<()> {
    if dist.len() != vocab_size {
        return Err(trace_err(
            trace,
            format!(
                "token {pos}: {name} has {} entries, expected {vocab_size}",
                dist.len()
            ),
        ));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(trace_err(
            trace,
            format!("token {pos}: {name} has negative or non-finite entries"),
        ));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(trace_err(
            trace,
            format!("token {pos}: {name} sums to {total}"),
        ));
    }
    Ok(())
}

/// Checks token-level invariants and reward/correctness consistency.
pub fn validate_trace(trace: RolloutTrace, vocab_size: usize) -> Result<RolloutTrace> {
    if !trace.reward.is_finite() {
        return Err(trace_err(&trace, "reward must be finite"));
    }
    if trace.reward < 0.0 {
        return Err(trace_err(&trace, "reward must be non-negative"));
    }
    if !trace.correct && trace.reward > 0.0 {
        return Err(trace_err(&trace, "reward > 0 with correct = false"));
    }
    for (pos, tok) in trace.tokens.iter().enumerate() {
        if tok.token_id >= vocab_size {
            return Err(trace_err(
                &trace,
                format!(
                    "token {pos}: index {} out of vocabulary of size {vocab_size}",
                    tok.token_id
                ),
            ));
        }
        for (name, v) in [
            ("student_logprob", tok.student_logprob),
            ("teacher_logprob", tok.teacher_logprob),
            ("teacher_entropy", tok.teacher_entropy),
        ] {
            if !v.is_finite() {
                return Err(trace_err(
                    &trace,
                    format!("token {pos}: {name} is not finite"),
                ));
            }
        }
        if tok.teacher_entropy < 0.0 {
            return Err(trace_err(
                &trace,
                format!("token {pos}: negative teacher_entropy"),
            ));
        }
        if tok.student_logprob > 0.0 || tok.teacher_logprob > 0.0 {
            return Err(trace_err(
                &trace,
                format!("token {pos}: log-probability above zero"),
            ));
        }
        if let Some(g) = tok.train_gate {
            if !g.is_finite() {
                return Err(trace_err(
                    &trace,
                    format!("token {pos}: train_gate is not finite"),
                ));
            }
        }
        if let Some(d) = &tok.teacher_dist {
            check_dist(&trace, pos, "teacher_dist", d, vocab_size)?;
        }
        if let Some(d) = &tok.student_dist {
            check_dist(&trace, pos, "student_dist", d, vocab_size)?;
        }
    }
    let masked = trace.masked_count();
    if masked != trace.completion_length {
        return Err(trace_err(
            &trace,
            format!(
                "completion_length {} but {masked} mask-true tokens",
                trace.completion_length
            ),
        ));
    }
    if masked == 0 {
        return Err(trace_err(&trace, "no completion tokens"));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace3() -> RolloutTrace {
        RolloutTrace {
            prompt_id: "p0".into(),
            prompt: vec![3, 10, 4],
            reference: vec![12, 7],
            tokens: vec![
                TokenRecord::new(12, -0.1, -0.05, 0.3),
                TokenRecord::new(7, -2.3, -0.01, 0.1),
                TokenRecord::new(13, -0.2, -0.2, 0.0),
            ],
            reward: 1.0,
            correct: true,
            completion_length: 3,
        }
    }

    #[test]
    fn accepts_cl_config_from_sweep() {
        let cfg = TrainConfig {
            gamma: 0.3,
            window: 5,
            method: Method::ClEgrsd,
            ..TrainConfig::default()
        };
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
    }

    #[test]
    fn rejects_zero_floor() {
        let cfg = TrainConfig {
            gate_floor: 0.0,
            ..TrainConfig::default()
        };
        let msg = validate_config(cfg).unwrap_err().to_string();
        assert!(msg.contains("gate_floor must be positive"), "{msg}");
    }

    #[test]
    fn rejects_large_epsilon() {
        let cfg = TrainConfig {
            epsilon: 1.5,
            ..TrainConfig::default()
        };
        let msg = validate_config(cfg).unwrap_err().to_string();
        assert!(msg.contains("epsilon out of range"), "{msg}");
    }

    #[test]
    fn window_method_pairing() {
        let cl0 = TrainConfig {
            method: Method::ClEgrsd,
            window: 0,
            ..TrainConfig::default()
        };
        assert!(validate_config(cl0).is_err());
        let eg5 = TrainConfig {
            window: 5,
            ..TrainConfig::default()
        };
        assert!(validate_config(eg5).is_err());
    }

    #[test]
    fn nan_is_rejected() {
        let cfg = TrainConfig {
            gamma: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(validate_config(cfg).is_err());
    }

    #[test]
    fn schedule_strings() {
        for s in ["frozen", "ema:0.99", "hardcopy:20"] {
            let parsed: TeacherSchedule = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("ema:x".parse::<TeacherSchedule>().is_err());
        assert!("copy".parse::<TeacherSchedule>().is_err());
    }

    #[test]
    fn well_formed_trace_accepted() {
        assert!(validate_trace(trace3(), 20).is_ok());
    }

    #[test]
    fn negative_entropy_rejected() {
        let mut t = trace3();
        t.tokens[1].teacher_entropy = -0.1;
        assert!(validate_trace(t, 20).is_err());
    }

    #[test]
    fn reward_without_correctness_rejected() {
        let mut t = trace3();
        t.correct = false;
        t.reward = 0.5;
        let msg = validate_trace(t, 20).unwrap_err().to_string();
        assert!(msg.contains("correct = false"));
    }

    #[test]
    fn other_trace_violations() {
        let mut t = trace3();
        t.tokens[0].token_id = 20;
        assert!(validate_trace(t, 20).is_err());

        let mut t = trace3();
        t.tokens[2].student_logprob = f64::INFINITY;
        assert!(validate_trace(t, 20).is_err());

        let mut t = trace3();
        t.completion_length = 2;
        assert!(validate_trace(t, 20).is_err());

        let mut t = trace3();
        for tok in &mut t.tokens {
            tok.mask = false;
        }
        t.completion_length = 0;
        assert!(validate_trace(t, 20).is_err());

        let mut t = trace3();
        t.tokens[0].teacher_dist = Some(vec![0.5; 20]);
        assert!(validate_trace(t, 20).is_err());
    }
}

//! Token-level credit: direction, clipped teacher–student magnitude, confidence
//! gate, token advantage, and the masked-mean policy loss.
//!
//! Every quantity here is a plain scalar computed before differentiation; the
//! trainer differentiates only the `−Â·log p_θ` term.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gate::{self, BatchEntropyView};
use crate::reward::direction;
use crate::types::{Method, RolloutTrace, TokenCredit, TrainConfig};

/// `δ = log p_T − log p_S`.
pub fn log_ratio(teacher_logprob: f64, student_logprob: f64) -> Result<f64> {
    if !teacher_logprob.is_finite() || !student_logprob.is_finite() {
        return Err(Error::input("log_ratio: non-finite log-probability"));
    }
    Ok(teacher_logprob - student_logprob)
}

/// `w = clip(exp(D·δ), 1 − ε, 1 + ε)`.
#[inline]
pub fn magnitude(direction: i8, delta: f64, epsilon: f64) -> f64 {
    (f64::from(direction) * delta)
        .exp()
        .clamp(1.0 - epsilon, 1.0 + epsilon)
}

#[inline]
pub fn token_advantage(a_seq: f64, w: f64, omega: f64) -> f64 {
    a_seq * w * omega
}

/// Credits for a whole minibatch together with the loss they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCredit {
    pub tokens: Vec<Vec<TokenCredit>>,
    pub advantages: Vec<f64>,
    pub loss_value: f64,
    pub token_count: usize,
}

impl BatchCredit {
    /// Independent left-to-right fold of `−(1/N)·Σ m·Â·log p_S` over the stored credits.
    pub fn recompute_loss(&self, traces: &[RolloutTrace]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (trace, credits) in traces.iter().zip(&self.tokens) {
            for (tok, c) in trace.tokens.iter().zip(credits) {
                if tok.mask {
                    acc += c.advantage_token * tok.student_logprob;
                    n += 1;
                }
            }
        }
        -acc / n as f64
    }

    /// Mask-true credits in batch order.
    pub fn masked<'a>(
        &'a self,
        traces: &'a [RolloutTrace],
    ) -> impl Iterator<Item = (usize, &'a TokenCredit)> + 'a {
        traces
            .iter()
            .zip(&self.tokens)
            .enumerate()
            .flat_map(|(i, (t, cs))| {
                t.tokens
                    .iter()
                    .zip(cs)
                    .filter(|(k, _)| k.mask)
                    .map(move |(_, c)| (i, c))
            })
    }
}

/// The subset of [`TrainConfig`] that shapes token credit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditParams {
    pub method: Method,
    pub gamma: f64,
    pub window: usize,
    pub epsilon: f64,
    pub gate_floor: f64,
    pub gate_ceiling: f64,
}

impl From<&TrainConfig> for CreditParams {
    fn from(cfg: &TrainConfig) -> Self {
        CreditParams {
            method: cfg.method,
            gamma: cfg.gamma,
            window: cfg.window,
            epsilon: cfg.epsilon,
            gate_floor: cfg.gate_floor,
            gate_ceiling: cfg.gate_ceiling,
        }
    }
}

fn credit_row(
    trace: &RolloutTrace,
    a_seq: f64,
    h_norm: &[f64],
    h_norm_cl: &[f64],
    p: &CreditParams,
) -> Result<Vec<TokenCredit>> {
    let dir = direction(a_seq);
    trace
        .tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            let delta = log_ratio(tok.teacher_logprob, tok.student_logprob)?;
            let (w, omega) = match p.method {
                Method::Egrsd => (
                    magnitude(dir, delta, p.epsilon),
                    gate::confidence_gate(h_norm[t], p.gamma, p.gate_floor, p.gate_ceiling),
                ),
                Method::ClEgrsd => (
                    magnitude(dir, delta, p.epsilon),
                    gate::confidence_gate(h_norm_cl[t], p.gamma, p.gate_floor, p.gate_ceiling),
                ),
                Method::Rlsd => (magnitude(dir, delta, p.epsilon), 1.0),
                Method::Grpo => (1.0, 1.0),
                Method::Opsd => unreachable!("rejected before credit assembly"),
            };
            Ok(TokenCredit {
                delta,
                direction: dir,
                magnitude: w,
                h_norm: h_norm[t],
                h_norm_cl: h_norm_cl[t],
                gate: omega,
                advantage_token: token_advantage(a_seq, w, omega),
            })
        })
        .collect()
}

/// Assembles per-token credit for one minibatch.
///
/// `advantages[i]` is the whitened sequence advantage of `traces[i]`. The loss is
/// the mean of `−Â·log p_S` over every mask-true token in the batch.
pub fn assemble_batch(
    traces: &[RolloutTrace],
    advantages: &[f64],
    params: &CreditParams,
) -> Result<BatchCredit> {
    assemble_batch_with(Execution::Serial, traces, advantages, params)
}

pub fn assemble_batch_with(
    exec: Execution,
    traces: &[RolloutTrace],
    advantages: &[f64],
    params: &CreditParams,
) -> Result<BatchCredit> {
    if params.method == Method::Opsd {
        return Err(Error::Mismatch(
            "opsd is a distribution-matching objective; use opsd_loss".into(),
        ));
    }
    if params.window > 0 && params.method != Method::ClEgrsd {
        return Err(Error::Mismatch(format!(
            "window {} given for method {}",
            params.window, params.method
        )));
    }
    if traces.len() != advantages.len() {
        return Err(Error::Mismatch(format!(
            "{} traces but {} advantages",
            traces.len(),
            advantages.len()
        )));
    }
    if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
        return Err(Error::input(format!("non-finite advantage {a}")));
    }
    let view = BatchEntropyView::from_traces(traces)?;
    let h_norm = gate::batch_normalize(&view);
    let h_norm_cl = gate::lookahead_normalize(&view, params.window);

    let tokens = exec.try_map(traces.len(), |i| {
        credit_row(&traces[i], advantages[i], &h_norm[i], &h_norm_cl[i], params)
    })?;

    let mut acc = 0.0;
    let mut token_count = 0usize;
    for (trace, credits) in traces.iter().zip(&tokens) {
        for (tok, c) in trace.tokens.iter().zip(credits) {
            if tok.mask {
                acc += c.advantage_token * tok.student_logprob;
                token_count += 1;
            }
        }
    }
    Ok(BatchCredit {
        tokens,
        advantages: advantages.to_vec(),
        loss_value: -acc / token_count as f64,
        token_count,
    })
}

fn check_normalized(dist: &[f64], what: &str) -> Result<()> {
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::input(format!(
            "{what}: negative or non-finite probability"
        )));
    }
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("{what}: sums to {s}")));
    }
    Ok(())
}

/// `Σ_t m_t · KL(p_T ‖ p_S)` over completion positions.
pub fn opsd_loss(
    teacher_dists: &[Vec<f64>],
    student_dists: &[Vec<f64>],
    mask: &[bool],
) -> Result<f64> {
    if teacher_dists.len() != student_dists.len() || teacher_dists.len() != mask.len() {
        return Err(Error::Mismatch("opsd_loss: misaligned positions".into()));
    }
    let mut total = 0.0;
    for (pos, ((pt, ps), &m)) in teacher_dists
        .iter()
        .zip(student_dists)
        .zip(mask)
        .enumerate()
    {
        if !m {
            continue;
        }
        if pt.len() != ps.len() {
            return Err(Error::Mismatch(format!(
                "opsd_loss: vocabulary sizes differ at {pos}"
            )));
        }
        check_normalized(pt, "teacher distribution")?;
        check_normalized(ps, "student distribution")?;
        for (v, (&a, &b)) in pt.iter().zip(ps).enumerate() {
            if a > 0.0 {
                if b <= 0.0 {
                    return Err(Error::InfiniteKl {
                        position: pos,
                        token: v,
                    });
                }
                total += a * (a.ln() - b.ln());
            }
        }
    }
    Ok(total.max(0.0))
}

/// [`opsd_loss`] over the distributions stored on each trace token.
pub fn opsd_loss_traces(traces: &[RolloutTrace]) -> Result<f64> {
    let mut total = 0.0;
    for trace in traces {
        let mut t_d = Vec::with_capacity(trace.tokens.len());
        let mut s_d = Vec::with_capacity(trace.tokens.len());
        let mut mask = Vec::with_capacity(trace.tokens.len());
        for tok in &trace.tokens {
            match (&tok.teacher_dist, &tok.student_dist) {
                (Some(t), Some(s)) => {
                    t_d.push(t.clone());
                    s_d.push(s.clone());
                    mask.push(tok.mask);
                }
                _ => {
                    return Err(Error::input(format!(
                        "trace {} lacks full distributions required by opsd",
                        trace.prompt_id
                    )))
                }
            }
        }
        total += opsd_loss(&t_d, &s_d, &mask)?;
    }
    Ok(total)
}

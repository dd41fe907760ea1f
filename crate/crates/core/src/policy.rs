//! A linear-softmax autoregressive policy over one-hot context features.
//!
//! The same parameter matrix serves the student (prompt + history) and the
//! teacher (prompt + history + reference solution in dedicated privileged
//! slots). Gradients of `log p(token)` are closed-form, so no autodiff is needed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::shaped_reward;
use crate::types::{RolloutTrace, TeacherSchedule, TokenRecord, TrainConfig};

/// Token ids of the toy arithmetic language.
pub mod vocab {
    pub const PLUS: usize = 10;
    pub const MINUS: usize = 11;
    /// Answer marker.
    pub const EQ: usize = 12;
    pub const EOS: usize = 13;
    pub const PAD: usize = 14;
    /// First of the "thinking" tokens; `THINK..SIZE` are all thinking tokens.
    pub const THINK: usize = 15;
    pub const SIZE: usize = 20;

    pub fn is_digit(t: usize) -> bool {
        t < 10
    }

    pub fn is_think(t: usize) -> bool {
        (THINK..SIZE).contains(&t)
    }

    pub fn symbol(t: usize) -> String {
        match t {
            0..=9 => t.to_string(),
            PLUS => "+".into(),
            MINUS => "-".into(),
            EQ => "=".into(),
            EOS => "<eos>".into(),
            PAD => "<pad>".into(),
            THINK => "think".into(),
            t if is_think(t) => format!("hmm{}", t - THINK),
            t => format!("<{t}>"),
        }
    }
}

pub const PRIVILEGED_SLOTS: usize = 2;

/// Shape of the feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub vocab_size: usize,
    pub context_window: usize,
    pub privileged_slots: usize,
}

impl ContextSpec {
    pub fn toy(context_window: usize) -> Self {
        ContextSpec {
            vocab_size: vocab::SIZE,
            context_window,
            privileged_slots: PRIVILEGED_SLOTS,
        }
    }

    pub fn feature_dim(&self) -> usize {
        (self.context_window + self.privileged_slots) * self.vocab_size
    }
}

/// Sparse feature vector: `(index, value)` pairs, indices unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Features(pub Vec<(usize, f64)>);

impl Features {
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for &(i, x) in &self.0 {
            v[i] += x;
        }
        v
    }

    pub fn from_dense(v: &[f64]) -> Self {
        Features(
            v.iter()
                .copied()
                .enumerate()
                .filter(|(_, x)| *x != 0.0)
                .collect(),
        )
    }
}

/// One-hot features of the last `context_window` tokens of prompt+history (left
/// padded with `PAD`), plus the privileged slots when a reference is supplied.
pub fn encode_context(
    spec: &ContextSpec,
    prompt: &[usize],
    privileged: Option<&[usize]>,
    history: &[usize],
) -> Features {
    let v = spec.vocab_size;
    let w = spec.context_window;
    let total = prompt.len() + history.len();
    let at = |i: usize| {
        if i < prompt.len() {
            prompt[i]
        } else {
            history[i - prompt.len()]
        }
    };
    let mut out = Vec::with_capacity(w + spec.privileged_slots);
    for k in 0..w {
        let tok = (total + k).checked_sub(w).map_or(vocab::PAD, at);
        out.push((k * v + tok, 1.0));
    }
    if let Some(p) = privileged {
        for j in 0..spec.privileged_slots {
            let tok = p.get(j).copied().unwrap_or(vocab::PAD);
            out.push(((w + j) * v + tok, 1.0));
        }
    }
    Features(out)
}

/// Dense row-major matrix; policy weights are `feature_dim × vocab_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub type PolicyParams = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn for_spec(spec: &ContextSpec) -> Self {
        Self::zeros(spec.feature_dim(), spec.vocab_size)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Pretrained starting point shared by student and teacher.
    ///
    /// It knows the completion format (`=`, a digit, `<eos>`, with optional
    /// thinking tokens first) and how to read a digit out of the privileged
    /// reference. Its arithmetic is a noisy sum prior read from the operand
    /// slots, right on roughly two thirds of additions when decoding greedily,
    /// so RL has real headroom but is not learning from scratch.
    pub fn base(spec: &ContextSpec) -> Self {
        const PRIOR_CURVATURE: f64 = 2.0;
        const PRIOR_NOISE: f64 = 2.0;
        const PRIOR_SEED: u64 = 0x5eed;
        const FORMAT: f64 = 8.0;
        const STOP: f64 = 8.0;
        const COPY: f64 = 5.0;
        let v = spec.vocab_size;
        let w = spec.context_window;
        let mut m = Self::for_spec(spec);
        let slot = |k: usize, tok: usize| k * v + tok;
        let last = w - 1;
        if w >= 2 {
            for op in [vocab::PLUS, vocab::MINUS] {
                let r = slot(w - 2, op);
                *m.get_mut(r, vocab::EQ) += FORMAT;
                for t in vocab::THINK..vocab::SIZE {
                    *m.get_mut(r, t) += FORMAT;
                }
            }
            *m.get_mut(slot(w - 2, vocab::EQ), vocab::EOS) += STOP;
        }
        for t in vocab::THINK..vocab::SIZE {
            *m.get_mut(slot(last, t), vocab::EQ) += FORMAT;
        }
        for d in 0..10 {
            *m.get_mut(slot(last, vocab::EQ), d) += FORMAT;
        }
        if w >= 4 {
            // a + b peaks the quadratic -(d - a - b)^2 when both operand rows add up
            let mut rng = ChaCha8Rng::seed_from_u64(PRIOR_SEED);
            for x in 0..10usize {
                for d in 0..10usize {
                    let (xf, df) = (x as f64, d as f64);
                    *m.get_mut(slot(w - 4, x), d) += PRIOR_CURVATURE * (2.0 * xf * df - df * df)
                        + PRIOR_NOISE * rng.gen_range(-1.0..1.0);
                    *m.get_mut(slot(w - 2, x), d) +=
                        PRIOR_CURVATURE * 2.0 * xf * df + PRIOR_NOISE * rng.gen_range(-1.0..1.0);
                }
            }
        }
        if spec.privileged_slots >= 2 {
            for d in 0..10 {
                *m.get_mut(slot(w + 1, d), d) += COPY;
            }
        }
        m
    }
}

pub fn logits(params: &PolicyParams, features: &Features) -> Vec<f64> {
    let mut z = vec![0.0; params.cols];
    for &(i, x) in &features.0 {
        for (zj, wj) in z.iter_mut().zip(params.row(i)) {
            *zj += x * wj;
        }
    }
    z
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Log-probabilities of the next token.
pub fn log_softmax_dist(params: &PolicyParams, features: &Features) -> Vec<f64> {
    log_softmax(&logits(params, features))
}

/// Entropy in nats of the distribution given by log-probabilities.
pub fn entropy_from_logprobs(lp: &[f64]) -> f64 {
    lp.iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * l
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// `grad += scale · features ⊗ (onehot(token) − p)`.
pub fn accumulate_logprob_gradient(
    grad: &mut Matrix,
    params: &PolicyParams,
    features: &Features,
    token: usize,
    scale: f64,
) {
    let p: Vec<f64> = log_softmax_dist(params, features)
        .into_iter()
        .map(f64::exp)
        .collect();
    accumulate_score(grad, features, &p, token, scale);
}

fn accumulate_score(
    grad: &mut Matrix,
    features: &Features,
    probs: &[f64],
    token: usize,
    scale: f64,
) {
    let cols = grad.cols;
    for &(i, x) in &features.0 {
        let row = &mut grad.data[i * cols..(i + 1) * cols];
        for (j, g) in row.iter_mut().enumerate() {
            let e = if j == token { 1.0 } else { 0.0 };
            *g += scale * x * (e - probs[j]);
        }
    }
}

/// `∂ log p(token) / ∂ weights = features ⊗ (onehot(token) − p)`.
pub fn logprob_gradient(params: &PolicyParams, features: &Features, token: usize) -> Matrix {
    let mut g = Matrix::zeros(params.rows, params.cols);
    accumulate_logprob_gradient(&mut g, params, features, token, 1.0);
    g
}

/// `grad += scale · ∇ Σ_v target(v)·log p(v)` = `scale · features ⊗ (target − p)`.
pub fn accumulate_cross_entropy_gradient(
    grad: &mut Matrix,
    params: &PolicyParams,
    features: &Features,
    target: &[f64],
    scale: f64,
) {
    let p: Vec<f64> = log_softmax_dist(params, features)
        .into_iter()
        .map(f64::exp)
        .collect();
    let cols = grad.cols;
    for &(i, x) in &features.0 {
        let row = &mut grad.data[i * cols..(i + 1) * cols];
        for (j, g) in row.iter_mut().enumerate() {
            *g += scale * x * (target[j] - p[j]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
}

/// A single-digit arithmetic problem with a single-digit answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub id: String,
    pub prompt: Vec<usize>,
    /// Reference solution shown only to the teacher: `= d`.
    pub reference: Vec<usize>,
    pub answer: Vec<usize>,
}

impl ToyTask {
    pub fn new(a: usize, op: Op, b: usize) -> Result<Self> {
        let value = match op {
            Op::Add => a + b,
            Op::Sub => a
                .checked_sub(b)
                .ok_or_else(|| Error::input("negative difference"))?,
        };
        if a > 9 || b > 9 || value > 9 {
            return Err(Error::input(format!(
                "task {a} {op:?} {b} leaves single digits"
            )));
        }
        let op_tok = match op {
            Op::Add => vocab::PLUS,
            Op::Sub => vocab::MINUS,
        };
        Ok(ToyTask {
            id: format!("{a}{}{b}", vocab::symbol(op_tok)),
            prompt: vec![a, op_tok, b],
            reference: vec![vocab::EQ, value],
            answer: vec![value],
        })
    }

    pub fn value(&self) -> usize {
        self.answer[0]
    }
}

/// Decodes a digit sequence, ignoring non-digit tokens.
pub fn decode_value(tokens: &[usize]) -> Option<usize> {
    let digits: Vec<usize> = tokens
        .iter()
        .copied()
        .filter(|&t| vocab::is_digit(t))
        .collect();
    (!digits.is_empty()).then(|| digits.iter().fold(0, |acc, d| acc * 10 + d))
}

/// Draws tasks uniformly from the enabled operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenerator {
    pub ops: Vec<Op>,
}

impl Default for TaskGenerator {
    fn default() -> Self {
        TaskGenerator { ops: vec![Op::Add] }
    }
}

impl TaskGenerator {
    pub fn all_tasks(&self) -> Vec<ToyTask> {
        let mut out = Vec::new();
        for &op in &self.ops {
            for a in 0..10 {
                for b in 0..10 {
                    if let Ok(t) = ToyTask::new(a, op, b) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ToyTask {
        let op = self.ops[rng.gen_range(0..self.ops.len())];
        loop {
            let a = rng.gen_range(0..10);
            let b = rng.gen_range(0..10);
            if let Ok(t) = ToyTask::new(a, op, b) {
                return t;
            }
        }
    }

    pub fn batch<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<ToyTask> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// True iff the tokens after the first `=` (up to `<eos>`) spell the answer.
pub fn verify(tokens: &[usize], task: &ToyTask) -> bool {
    let Some(eq) = tokens.iter().position(|&t| t == vocab::EQ) else {
        return false;
    };
    let region: Vec<usize> = tokens[eq + 1..]
        .iter()
        .copied()
        .take_while(|&t| t != vocab::EOS)
        .collect();
    region == task.answer
}

/// Random-stream purposes; each (kind, step, index) triple gets its own stream.
pub mod stream {
    pub const ROLLOUT: u8 = 1;
    pub const TASKS: u8 = 2;
    pub const EVAL: u8 = 3;
    pub const AUDIT: u8 = 4;
}

/// Independent ChaCha stream for `(kind, step, index)` under one seed.
pub fn substream(seed: u64, kind: u8, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(kind) << 56) | ((step & 0xFFFF_FFFF) << 24) | (index & 0xFF_FFFF));
    rng
}

/// Index of the largest logit; ties go to the lowest index.
fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > z[best] { i } else { best })
}

fn sample_token<R: Rng>(logits_t1: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        return argmax(logits_t1);
    }
    let scaled: Vec<f64> = logits_t1.iter().map(|z| z / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    WeightedIndex::new(&probs)
        .expect("softmax weights are positive and finite")
        .sample(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: PolicyParams,
    pub schedule: TeacherSchedule,
}

impl TeacherState {
    pub fn new(params: PolicyParams, schedule: TeacherSchedule) -> Self {
        TeacherState { params, schedule }
    }

    pub fn update_in_place(&mut self, student: &PolicyParams, step: u64) {
        match self.schedule {
            TeacherSchedule::Frozen => {}
            TeacherSchedule::Ema { alpha } => {
                for (t, s) in self.params.data.iter_mut().zip(&student.data) {
                    *t = alpha * *t + (1.0 - alpha) * s;
                }
            }
            TeacherSchedule::HardCopy { period } => {
                if period > 0 && step.is_multiple_of(period) {
                    self.params.data.copy_from_slice(&student.data);
                }
            }
        }
    }
}

/// Applies the teacher schedule after optimizer step `step` (1-indexed).
pub fn teacher_update(mut state: TeacherState, student: &PolicyParams, step: u64) -> TeacherState {
    state.update_in_place(student, step);
    state
}

/// Samples one completion from the student and scores it with the teacher.
///
/// Recorded log-probabilities are temperature-1 evaluations regardless of the
/// sampling temperature.
pub fn sample_rollout<R: Rng>(
    student: &PolicyParams,
    teacher: &TeacherState,
    task: &ToyTask,
    cfg: &TrainConfig,
    record_dists: bool,
    rng: &mut R,
) -> RolloutTrace {
    let spec = ContextSpec::toy(cfg.context_window);
    let privileged = cfg.privileged_teacher.then_some(task.reference.as_slice());
    let mut history: Vec<usize> = Vec::with_capacity(cfg.max_len);
    let mut tokens = Vec::with_capacity(cfg.max_len);
    while history.len() < cfg.max_len {
        let s_feat = encode_context(&spec, &task.prompt, None, &history);
        let t_feat = encode_context(&spec, &task.prompt, privileged, &history);
        let s_logits = logits(student, &s_feat);
        let s_lp = log_softmax(&s_logits);
        let t_lp = log_softmax_dist(&teacher.params, &t_feat);
        let tok = sample_token(&s_logits, cfg.temperature, rng);
        let mut rec = TokenRecord::new(tok, s_lp[tok], t_lp[tok], entropy_from_logprobs(&t_lp));
        if record_dists {
            rec.teacher_dist = Some(t_lp.iter().map(|l| l.exp()).collect());
            rec.student_dist = Some(s_lp.iter().map(|l| l.exp()).collect());
        }
        tokens.push(rec);
        history.push(tok);
        if tok == vocab::EOS {
            break;
        }
    }
    let correct = verify(&history, task);
    let reward = shaped_reward(correct, history.len(), cfg.max_len, cfg.beta_length)
        .expect("completion never exceeds max_len");
    RolloutTrace {
        prompt_id: task.id.clone(),
        prompt: task.prompt.clone(),
        reference: task.reference.clone(),
        completion_length: tokens.len(),
        tokens,
        reward,
        correct,
    }
}

/// Greedy decode of the student only.
pub fn greedy_decode(
    student: &PolicyParams,
    task: &ToyTask,
    context_window: usize,
    max_len: usize,
) -> Vec<usize> {
    let spec = ContextSpec::toy(context_window);
    let mut history = Vec::with_capacity(max_len);
    while history.len() < max_len {
        let z = logits(
            student,
            &encode_context(&spec, &task.prompt, None, &history),
        );
        let tok = argmax(&z);
        history.push(tok);
        if tok == vocab::EOS {
            break;
        }
    }
    history
}

/// Fraction of tasks the student solves under greedy decoding.
pub fn greedy_accuracy(
    student: &PolicyParams,
    tasks: &[ToyTask],
    context_window: usize,
    max_len: usize,
) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    let solved = tasks
        .iter()
        .filter(|t| verify(&greedy_decode(student, t, context_window, max_len), t))
        .count();
    solved as f64 / tasks.len() as f64
}

//! The training step and the run loop.
//!
//! A step runs, in order: sample rollouts, score rewards, whiten with the
//! statistics of earlier steps, assemble token credit (lookahead, batch
//! normalization, gate, magnitude, token advantage), compute the loss gradient,
//! clip it, take an AdamW step, update the teacher, and finally fold this
//! step's rewards into the running statistics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::credit::{self, BatchCredit, CreditParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io;
use crate::optim::{self, AdamWConfig, OptimizerState};
use crate::policy::{
    self, accumulate_cross_entropy_gradient, accumulate_logprob_gradient, encode_context, stream,
    ContextSpec, Matrix, PolicyParams, TaskGenerator, TeacherState, ToyTask,
};
use crate::reward::{self, RewardStats};
use crate::types::{validate_config, Method, RolloutTrace, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub student: PolicyParams,
    pub teacher: TeacherState,
    pub optimizer: OptimizerState,
    pub stats: RewardStats,
    /// Number of completed optimizer steps.
    pub step: u64,
    /// Root seed; per-step random streams are derived from it.
    pub seed: u64,
}

impl TrainState {
    /// Student and teacher both start from the pretrained base weights.
    pub fn new(cfg: &TrainConfig) -> Self {
        let spec = ContextSpec::toy(cfg.context_window);
        let base = Matrix::base(&spec);
        TrainState {
            optimizer: OptimizerState::new(&base, adamw_config(cfg)),
            teacher: TeacherState::new(base.clone(), cfg.teacher_schedule),
            student: base,
            stats: RewardStats::default(),
            step: 0,
            seed: cfg.seed,
        }
    }
}

pub fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: cfg.adam_eps,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub grad_norm_postclip: f64,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_len: f64,
    pub mean_gate: f64,
    pub mean_magnitude: f64,
    pub wall_ms: f64,
    /// Reward observations in the statistics used for whitening this step.
    #[serde(skip)]
    pub whiten_count: u64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,grad_norm_preclip,grad_norm_postclip,mean_reward,accuracy,mean_len,mean_gate,mean_magnitude,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.loss,
            self.grad_norm_preclip,
            self.grad_norm_postclip,
            self.mean_reward,
            self.accuracy,
            self.mean_len,
            self.mean_gate,
            self.mean_magnitude,
            self.wall_ms
        )
    }
}

/// Everything a step produced, for diagnostics and trace dumps.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub traces: Vec<RolloutTrace>,
    pub advantages: Vec<f64>,
    pub credit: Option<BatchCredit>,
}

fn student_features(spec: &ContextSpec, trace: &RolloutTrace, t: usize) -> policy::Features {
    let history: Vec<usize> = trace.tokens[..t].iter().map(|k| k.token_id).collect();
    encode_context(spec, &trace.prompt, None, &history)
}

/// Gradient of `−(1/N)·Σ m·Â·log p_θ(token | context)` with every `Â` held constant.
pub fn compute_gradient(
    batch_credit: &BatchCredit,
    traces: &[RolloutTrace],
    student: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    compute_gradient_with(Execution::Serial, batch_credit, traces, student, cfg)
}

pub fn compute_gradient_with(
    exec: Execution,
    batch_credit: &BatchCredit,
    traces: &[RolloutTrace],
    student: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    if batch_credit.tokens.len() != traces.len()
        || batch_credit
            .tokens
            .iter()
            .zip(traces)
            .any(|(c, t)| c.len() != t.tokens.len())
    {
        return Err(Error::Mismatch("credit and traces are misaligned".into()));
    }
    if batch_credit.token_count == 0 {
        return Err(Error::input("no completion tokens"));
    }
    let spec = ContextSpec::toy(cfg.context_window);
    let n = batch_credit.token_count as f64;
    let partials = exec.map(traces.len(), |i| {
        let mut g = Matrix::zeros(student.rows, student.cols);
        for (t, (tok, c)) in traces[i]
            .tokens
            .iter()
            .zip(&batch_credit.tokens[i])
            .enumerate()
        {
            if tok.mask && c.advantage_token != 0.0 {
                let f = student_features(&spec, &traces[i], t);
                accumulate_logprob_gradient(
                    &mut g,
                    student,
                    &f,
                    tok.token_id,
                    -c.advantage_token / n,
                );
            }
        }
        g
    });
    Ok(sum_in_order(student, partials))
}

fn sum_in_order(like: &Matrix, partials: Vec<Matrix>) -> Matrix {
    let mut total = Matrix::zeros(like.rows, like.cols);
    for g in &partials {
        total.axpy(1.0, g);
    }
    total
}

/// One token of a frozen-advantage objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub features: policy::Features,
    pub token: usize,
    pub advantage: f64,
}

/// `−(1/N)·Σ Â·log p_θ(token | features)` over `samples`.
pub fn frozen_loss(params: &PolicyParams, samples: &[GradSample]) -> f64 {
    let acc: f64 = samples
        .iter()
        .map(|s| s.advantage * policy::log_softmax_dist(params, &s.features)[s.token])
        .sum();
    -acc / samples.len() as f64
}

/// Analytic gradient of [`frozen_loss`].
pub fn frozen_loss_gradient(params: &PolicyParams, samples: &[GradSample]) -> Matrix {
    let mut g = Matrix::zeros(params.rows, params.cols);
    let n = samples.len() as f64;
    for s in samples {
        accumulate_logprob_gradient(&mut g, params, &s.features, s.token, -s.advantage / n);
    }
    g
}

/// Gradient of `Σ_t KL(p_T ‖ p_θ)` using the teacher distributions stored on the traces.
pub fn opsd_gradient(
    exec: Execution,
    traces: &[RolloutTrace],
    student: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    let spec = ContextSpec::toy(cfg.context_window);
    let partials = exec.try_map(traces.len(), |i| {
        let mut g = Matrix::zeros(student.rows, student.cols);
        for (t, tok) in traces[i].tokens.iter().enumerate() {
            if !tok.mask {
                continue;
            }
            let target = tok.teacher_dist.as_ref().ok_or_else(|| {
                Error::input("opsd requires teacher distributions on every token")
            })?;
            let f = student_features(&spec, &traces[i], t);
            accumulate_cross_entropy_gradient(&mut g, student, &f, target, -1.0);
        }
        Ok(g)
    })?;
    Ok(sum_in_order(student, partials))
}

/// One optimizer step on a batch of tasks.
pub fn train_step(
    state: &mut TrainState,
    tasks: &[ToyTask],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<StepOutput> {
    if tasks.is_empty() {
        return Err(Error::input("empty task batch"));
    }
    let started = Instant::now();
    let step = state.step + 1;
    let record_dists = cfg.method == Method::Opsd;

    let mut traces = {
        let st = &*state;
        exec.map(tasks.len(), |i| {
            let mut rng = policy::substream(st.seed, stream::ROLLOUT, step, i as u64);
            policy::sample_rollout(
                &st.student,
                &st.teacher,
                &tasks[i],
                cfg,
                record_dists,
                &mut rng,
            )
        })
    };

    let rewards: Vec<f64> = traces.iter().map(|t| t.reward).collect();
    let whiten_count = state.stats.count;
    let advantages: Vec<f64> = rewards
        .iter()
        .map(|&r| reward::whiten(r, &state.stats, step))
        .collect();

    let (loss, mut grad, credit) = if cfg.method == Method::Opsd {
        let loss = credit::opsd_loss_traces(&traces)?;
        (
            loss,
            opsd_gradient(exec, &traces, &state.student, cfg)?,
            None,
        )
    } else {
        let bc = credit::assemble_batch_with(exec, &traces, &advantages, &CreditParams::from(cfg))?;
        let g = compute_gradient_with(exec, &bc, &traces, &state.student, cfg)?;
        (bc.loss_value, g, Some(bc))
    };

    let grad_norm_preclip = optim::clip_grad_norm(&mut grad, cfg.grad_clip_norm);
    let grad_norm_postclip = grad.norm();
    optim::optimizer_step(&mut state.optimizer, &mut state.student, &grad)?;
    state.teacher.update_in_place(&state.student, step);
    state.stats = reward::welford_update(state.stats, &rewards);
    state.step = step;

    let (mut gate_sum, mut mag_sum, mut n_tok) = (0.0, 0.0, 0usize);
    if let Some(bc) = &credit {
        for (trace, row) in traces.iter_mut().zip(&bc.tokens) {
            for (tok, c) in trace.tokens.iter_mut().zip(row) {
                tok.train_gate = Some(c.gate);
                if tok.mask {
                    gate_sum += c.gate;
                    mag_sum += c.magnitude;
                    n_tok += 1;
                }
            }
        }
    } else {
        n_tok = traces.iter().map(|t| t.masked_count()).sum();
        gate_sum = n_tok as f64;
        mag_sum = n_tok as f64;
    }
    let b = traces.len() as f64;
    let metrics = StepMetrics {
        step,
        loss,
        grad_norm_preclip,
        grad_norm_postclip,
        mean_reward: rewards.iter().sum::<f64>() / b,
        accuracy: traces.iter().filter(|t| t.correct).count() as f64 / b,
        mean_len: traces
            .iter()
            .map(|t| t.completion_length as f64)
            .sum::<f64>()
            / b,
        mean_gate: gate_sum / n_tok.max(1) as f64,
        mean_magnitude: mag_sum / n_tok.max(1) as f64,
        wall_ms: if cfg.reproducible {
            0.0
        } else {
            started.elapsed().as_secs_f64() * 1e3
        },
        whiten_count,
    };
    Ok(StepOutput {
        metrics,
        traces,
        advantages,
        credit,
    })
}

/// Training configuration plus run metadata, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    pub output_dir: PathBuf,
    pub eval_tasks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            total_steps: 500,
            batch_size: 32,
            checkpoint_interval: 25,
            output_dir: PathBuf::from("runs/default"),
            eval_tasks: 200,
        }
    }
}

impl RunConfig {
    pub fn validate(self) -> Result<Self> {
        let train = validate_config(self.train.clone())?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "batch_size must be at least 1"));
        }
        Ok(RunConfig { train, ..self })
    }
}

/// Tasks for a given step, drawn from their own stream.
pub fn step_tasks(gen: &TaskGenerator, seed: u64, step: u64, batch_size: usize) -> Vec<ToyTask> {
    gen.batch(
        batch_size,
        &mut policy::substream(seed, stream::TASKS, step, 0),
    )
}

/// Held-out evaluation tasks; independent of the training streams.
pub fn eval_tasks(gen: &TaskGenerator, seed: u64, n: usize) -> Vec<ToyTask> {
    gen.batch(n, &mut policy::substream(seed, stream::EVAL, 0, 0))
}

pub fn greedy_eval(state: &TrainState, gen: &TaskGenerator, cfg: &RunConfig) -> f64 {
    let tasks = eval_tasks(gen, cfg.train.seed, cfg.eval_tasks);
    policy::greedy_accuracy(
        &state.student,
        &tasks,
        cfg.train.context_window,
        cfg.train.max_len,
    )
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub eval_accuracy: f64,
    pub metrics_path: Option<PathBuf>,
    pub trace_paths: Vec<PathBuf>,
    pub snapshot_paths: Vec<PathBuf>,
}

pub fn trace_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("traces_step{step:05}.jsonl"))
}

pub fn snapshot_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("snapshot_step{step:05}.snap"))
}

pub const FINAL_SNAPSHOT: &str = "snapshot_final.snap";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs `cfg.total_steps` steps from scratch, writing artifacts to `cfg.output_dir`.
pub fn run(cfg: &RunConfig, gen: &TaskGenerator) -> Result<RunArtifacts> {
    run_from(TrainState::new(&cfg.train), cfg, gen)
}

/// Continues `state` up to `cfg.total_steps`, appending to any existing metrics file.
pub fn run_from(
    mut state: TrainState,
    cfg: &RunConfig,
    gen: &TaskGenerator,
) -> Result<RunArtifacts> {
    let cfg = cfg.clone().validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let exec = Execution::from_reproducible(cfg.train.reproducible);

    let mut metrics = Vec::new();
    let mut trace_paths = Vec::new();
    let mut snapshot_paths = Vec::new();
    let mut metrics_path = None;
    let mut csv = None;
    if state.step < cfg.total_steps {
        let path = dir.join(METRICS_FILE);
        csv = Some(io::MetricsWriter::open(&path, state.step > 0)?);
        metrics_path = Some(path);
    }

    while state.step < cfg.total_steps {
        let tasks = step_tasks(gen, state.seed, state.step + 1, cfg.batch_size);
        let out = train_step(&mut state, &tasks, &cfg.train, exec)?;
        log::debug!(
            "step {} loss {:.5} acc {:.3}",
            out.metrics.step,
            out.metrics.loss,
            out.metrics.accuracy
        );
        if let Some(w) = csv.as_mut() {
            w.write(&out.metrics)?;
        }
        if cfg.checkpoint_interval > 0 && state.step.is_multiple_of(cfg.checkpoint_interval) {
            let tp = trace_path(&dir, state.step);
            io::write_traces(&tp, &out.traces)?;
            trace_paths.push(tp);
            let sp = snapshot_path(&dir, state.step);
            io::write_snapshot(&sp, &state, &cfg)?;
            snapshot_paths.push(sp);
        }
        metrics.push(out.metrics);
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    let fin = dir.join(FINAL_SNAPSHOT);
    io::write_snapshot(&fin, &state, &cfg)?;
    snapshot_paths.push(fin);

    let eval_accuracy = greedy_eval(&state, gen, &cfg);
    Ok(RunArtifacts {
        state,
        metrics,
        eval_accuracy,
        metrics_path,
        trace_paths,
        snapshot_paths,
    })
}

/// Runs in memory only, without artifacts.
pub fn train_in_memory(
    cfg: &RunConfig,
    gen: &TaskGenerator,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    let cfg = cfg.clone().validate()?;
    let exec = Execution::from_reproducible(cfg.train.reproducible);
    let mut state = TrainState::new(&cfg.train);
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    while state.step < cfg.total_steps {
        let tasks = step_tasks(gen, state.seed, state.step + 1, cfg.batch_size);
        metrics.push(train_step(&mut state, &tasks, &cfg.train, exec)?.metrics);
    }
    Ok((state, metrics))
}

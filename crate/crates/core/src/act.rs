//! Adaptive computation time: Q-learning halting during training, the
//! deep-supervision training step, and the inference-time halting rules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    predictions, Batch, Bound, GradMap, GradMode, HrmModel, LatentState, ModelConfig, ModelError,
};
use crate::optim::AdamW;
use crate::tensor::gradcheck::finite_diff_check;
use crate::tensor::{sigmoid, Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ActError {
    #[error("invalid act config: {0}")]
    Config(String),
    #[error("unknown halting strategy {0:?}; expected fixed_steps, q_halt_threshold or q_diff_threshold")]
    UnknownStrategy(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for ActError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = ActError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltStrategy {
    /// Halt after exactly `fixed_steps` segments.
    FixedSteps,
    /// Halt once `σ(q_halt) > threshold`.
    QHaltThreshold,
    /// Halt once `σ(q_halt − q_continue) > threshold`.
    QDiffThreshold,
}

impl FromStr for HaltStrategy {
    type Err = ActError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_steps" | "fixed" => Ok(Self::FixedSteps),
            "q_halt_threshold" | "q_halt" => Ok(Self::QHaltThreshold),
            "q_diff_threshold" | "q_diff" => Ok(Self::QDiffThreshold),
            other => Err(ActError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for HaltStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FixedSteps => "fixed_steps",
            Self::QHaltThreshold => "q_halt_threshold",
            Self::QDiffThreshold => "q_diff_threshold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActConfig {
    pub m_max: usize,
    pub exploration_prob: f64,
    pub halt_strategy: HaltStrategy,
    pub threshold: f64,
    pub fixed_steps: usize,
}

impl Default for ActConfig {
    fn default() -> Self {
        Self {
            m_max: 8,
            exploration_prob: 0.1,
            halt_strategy: HaltStrategy::QDiffThreshold,
            threshold: 0.5,
            fixed_steps: 8,
        }
    }
}

impl ActConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.m_max == 0 {
            out.push("act.m_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.exploration_prob) {
            out.push("act.exploration_prob must lie in [0, 1]".into());
        } else if self.exploration_prob > 0.0 && self.m_max < 2 {
            out.push("act.exploration_prob > 0 requires act.m_max ≥ 2".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            out.push("act.threshold must lie in (0, 1)".into());
        }
        if self.fixed_steps == 0 || self.fixed_steps > self.m_max {
            out.push(format!(
                "act.fixed_steps {} must lie in [1, act.m_max = {}]",
                self.fixed_steps, self.m_max
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ActError::Config(p.join("; ")))
        }
    }

    pub fn policy(&self) -> HaltPolicy {
        HaltPolicy {
            strategy: self.halt_strategy,
            threshold: self.threshold,
            fixed_steps: self.fixed_steps,
            m_max: self.m_max,
        }
    }
}

/// With probability `exploration_prob` a uniform draw from `[2, m_max]`,
/// otherwise 1.
pub fn sample_m_min(config: &ActConfig, rng: &mut impl Rng) -> Result<usize> {
    if config.exploration_prob > 0.0 && config.m_max < 2 {
        return Err(ActError::Config(
            "a stochastic minimum needs m_max ≥ 2".into(),
        ));
    }
    if config.exploration_prob > 0.0 && rng.random_bool(config.exploration_prob.min(1.0)) {
        Ok(rng.random_range(2..=config.m_max))
    } else {
        Ok(1)
    }
}

/// Training-time halting: forced at the horizon, otherwise Q comparison once
/// the minimum is met.
pub fn train_halt_decision(q_halt: f64, q_continue: f64, m: usize, m_min: usize, m_max: usize) -> bool {
    m >= m_max || (q_halt > q_continue && m >= m_min)
}

/// Bootstrap targets for the Q head; plain numbers, never on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTargets {
    pub g_halt: f64,
    pub g_continue: f64,
}

pub fn compute_q_targets(
    next_q_halt: f64,
    next_q_continue: f64,
    prediction_exact: bool,
    m: usize,
    m_max: usize,
) -> QTargets {
    let g_continue = if m >= m_max {
        sigmoid(next_q_halt)
    } else {
        sigmoid(next_q_halt).max(sigmoid(next_q_continue))
    };
    QTargets {
        g_halt: if prediction_exact { 1.0 } else { 0.0 },
        g_continue,
    }
}

/// The two terms of the segment loss and their sum.
#[derive(Debug, Clone, Copy)]
pub struct SegmentLoss {
    pub prediction: Var,
    pub q: Var,
    pub total: Var,
}

/// `CE(ŷ, y) + BCE(Q̂, Ĝ)`: cross-entropy averaged over every cell plus
/// binary cross-entropy averaged over the `[batch, 2]` Q logits.
pub fn segment_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    q: Var,
    q_targets: &[QTargets],
) -> Result<SegmentLoss> {
    let prediction = g.cross_entropy(logits, targets, None)?;
    let flat: Vec<f64> = q_targets.iter().flat_map(|t| [t.g_halt, t.g_continue]).collect();
    let qt = Tensor::from_f64([q_targets.len(), 2], &flat)?;
    let q = g.bce_with_logits(q, &qt)?;
    let total = g.add(prediction, q)?;
    Ok(SegmentLoss { prediction, q, total })
}

/// How inference decides to stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaltPolicy {
    pub strategy: HaltStrategy,
    pub threshold: f64,
    pub fixed_steps: usize,
    pub m_max: usize,
}

impl HaltPolicy {
    pub fn fixed(steps: usize) -> Self {
        Self {
            strategy: HaltStrategy::FixedSteps,
            threshold: 0.5,
            fixed_steps: steps,
            m_max: steps,
        }
    }

    pub fn threshold(strategy: HaltStrategy, threshold: f64, m_max: usize) -> Self {
        Self {
            strategy,
            threshold,
            fixed_steps: m_max,
            m_max,
        }
    }

    /// Segments needed before a decision can fire, i.e. the guaranteed stop.
    pub fn horizon(&self) -> usize {
        match self.strategy {
            HaltStrategy::FixedSteps => self.fixed_steps,
            _ => self.m_max,
        }
    }
}

/// Inference-time halting; the stochastic minimum plays no part here.
pub fn infer_halt_decision(q_halt: f64, q_continue: f64, policy: &HaltPolicy, m: usize) -> bool {
    match policy.strategy {
        HaltStrategy::FixedSteps => m >= policy.fixed_steps,
        HaltStrategy::QHaltThreshold => sigmoid(q_halt) > policy.threshold || m >= policy.m_max,
        HaltStrategy::QDiffThreshold => {
            sigmoid(q_halt - q_continue) > policy.threshold || m >= policy.m_max
        }
    }
}

/// Segment (1-based) at which `policy` stops a logged `(q_halt, q_continue)`
/// trajectory. A trajectory shorter than the policy's horizon that never
/// triggers returns its length.
pub fn replay_halt_step(trajectory: &[(f64, f64)], policy: &HaltPolicy) -> usize {
    trajectory
        .iter()
        .enumerate()
        .find(|(i, &(h, c))| infer_halt_decision(h, c, policy, i + 1))
        .map_or(trajectory.len(), |(i, _)| i + 1)
}

/// What one deep-supervision batch did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// `(1/B) Σ_samples Σ_segments L^m`.
    pub loss: f64,
    pub prediction_loss: f64,
    pub q_loss: f64,
    /// Segments executed per sample.
    pub segments: Vec<usize>,
    /// Per-sample token accuracy of the halt-time prediction.
    pub token_accuracy: Vec<f64>,
    pub exact: Vec<bool>,
}

impl StepStats {
    pub fn mean_segments(&self) -> f64 {
        mean(self.segments.iter().map(|&s| s as f64))
    }

    pub fn mean_token_accuracy(&self) -> f64 {
        mean(self.token_accuracy.iter().copied())
    }

    pub fn exact_accuracy(&self) -> f64 {
        mean(self.exact.iter().map(|&e| if e { 1.0 } else { 0.0 }))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn row_accuracy(pred: &[usize], target: &[usize]) -> (f64, bool) {
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    (hits as f64 / target.len() as f64, hits == target.len())
}

/// Source of next-segment Q logits for the bootstrap targets: given the
/// model, the carry after segment `m` and the active rows, returns
/// `[rows, 2]` logits.
pub type NextQ<'a, T> = dyn FnMut(&HrmModel<T>, &LatentState<T>, &Batch) -> Result<Tensor<T>> + 'a;

/// The gradient-free extra forward used for Q targets.
pub fn next_q_forward<T: Scalar>(model: &HrmModel<T>, state: &LatentState<T>, batch: &Batch) -> Result<Tensor<T>> {
    Ok(model.forward_no_grad(state, batch)?.q)
}

/// Runs segments until every sample halts under the training rule and
/// accumulates the gradient of every segment loss into `model.params`
/// (existing gradients are kept). One graph and one backward per segment;
/// samples that halted drop out of later segments.
pub fn accumulate_deep_supervision<T: Scalar>(
    model: &mut HrmModel<T>,
    batch: &Batch,
    m_max: usize,
    m_min: &[usize],
    next_q: &mut NextQ<'_, T>,
) -> Result<StepStats> {
    let b = batch.size;
    if b == 0 {
        return Err(ActError::EmptyBatch);
    }
    assert_eq!(m_min.len(), b, "one minimum per sample");
    let mut state = model.init_state(b);
    let mut active: Vec<usize> = (0..b).collect();
    let mut stats = StepStats {
        loss: 0.0,
        prediction_loss: 0.0,
        q_loss: 0.0,
        segments: vec![0; b],
        token_accuracy: vec![0.0; b],
        exact: vec![false; b],
    };
    for m in 1..=m_max {
        let sub_batch = batch.select(&active);
        let sub_state = state.select(&active);
        let mut g = Graph::new();
        let (bound, out) = model.segment(&mut g, &sub_state, &sub_batch)?;
        let preds = predictions(g.value(out.logits));
        let q = g.value(out.q).clone();
        let nq = next_q(model, &out.next_state, &sub_batch)?;
        let mut targets = Vec::with_capacity(active.len());
        let mut halting = Vec::with_capacity(active.len());
        for (i, &row) in active.iter().enumerate() {
            let (acc, exact) = row_accuracy(&preds[i], sub_batch.target_row(i));
            stats.segments[row] = m;
            stats.token_accuracy[row] = acc;
            stats.exact[row] = exact;
            let (qh, qc) = (q.data()[2 * i].as_f64(), q.data()[2 * i + 1].as_f64());
            let (nh, nc) = (nq.data()[2 * i].as_f64(), nq.data()[2 * i + 1].as_f64());
            targets.push(compute_q_targets(nh, nc, exact, m, m_max));
            halting.push(train_halt_decision(qh, qc, m, m_min[row], m_max));
        }
        let loss = segment_loss(&mut g, out.logits, &sub_batch.targets, out.q, &targets)?;
        let weight = active.len() as f64 / b as f64;
        let scaled = g.scale(loss.total, weight)?;
        g.backward(scaled)?;
        model.params.accumulate(&mut g, &bound);
        stats.loss += g.value(scaled).item().as_f64();
        stats.prediction_loss += weight * g.value(loss.prediction).item().as_f64();
        stats.q_loss += weight * g.value(loss.q).item().as_f64();

        state.scatter(&active, &out.next_state);
        active = active
            .iter()
            .zip(&halting)
            .filter_map(|(&row, &h)| {
                state.halted[row] = h;
                (!h).then_some(row)
            })
            .collect();
        if active.is_empty() {
            break;
        }
    }
    Ok(stats)
}

/// One optimizer update for one batch: fresh state, per-sample `M_min`
/// draws, deep supervision over segments, then a single AdamW step.
pub fn train_step_deep_supervision<T: Scalar>(
    model: &mut HrmModel<T>,
    optimizer: &mut AdamW,
    batch: &Batch,
    act: &ActConfig,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    if batch.size == 0 {
        return Err(ActError::EmptyBatch);
    }
    let m_min = (0..batch.size)
        .map(|_| sample_m_min(act, rng))
        .collect::<Result<Vec<_>>>()?;
    model.params.zero_grad();
    let stats = accumulate_deep_supervision(model, batch, act.m_max, &m_min, &mut next_q_forward)?;
    optimizer.step(&mut model.params);
    Ok(stats)
}

/// Gradient of the first segment's loss from the initial state, under
/// `mode`. Q targets come from the gradient-free next forward, so both
/// modes see identical targets.
pub fn segment_gradient<T: Scalar>(model: &HrmModel<T>, batch: &Batch, mode: GradMode) -> Result<GradMap<T>> {
    let mut model = model.clone();
    model.set_grad_mode(mode);
    model.params.zero_grad();
    let state = model.init_state(batch.size);
    let mut g = Graph::new();
    let (bound, out) = model.segment(&mut g, &state, batch)?;
    let preds = predictions(g.value(out.logits));
    let nq = next_q_forward(&model, &out.next_state, batch)?;
    let m_max = model.config().m_max;
    let targets: Vec<QTargets> = (0..batch.size)
        .map(|i| {
            let (_, exact) = row_accuracy(&preds[i], batch.target_row(i));
            compute_q_targets(nq.data()[2 * i].as_f64(), nq.data()[2 * i + 1].as_f64(), exact, 1, m_max)
        })
        .collect();
    let loss = segment_loss(&mut g, out.logits, &batch.targets, out.q, &targets)?;
    g.backward(loss.total)?;
    model.params.accumulate(&mut g, &bound);
    Ok(model.params.grads())
}

/// Segment-loss gradient with every micro-step on the tape; a test oracle.
pub fn reference_bptt_gradient<T: Scalar>(model: &HrmModel<T>, batch: &Batch) -> Result<GradMap<T>> {
    segment_gradient(model, batch, GradMode::FullBptt)
}

pub fn one_step_gradient<T: Scalar>(model: &HrmModel<T>, batch: &Batch) -> Result<GradMap<T>> {
    segment_gradient(model, batch, GradMode::OneStep)
}

/// Finite-difference check of the whole segment loss — embedding, both
/// stacks over two micro-steps, both heads, cross-entropy and BCE — with
/// respect to every parameter of a small random 64-bit model. Returns the
/// worst relative error.
pub fn segment_loss_gradcheck(seed: u64, epsilon: f64) -> Result<f64> {
    let config = ModelConfig {
        vocab_size: 5,
        seq_len: 6,
        hidden_dim: 8,
        num_heads: 2,
        l_layers: 1,
        h_layers: 1,
        t: 1,
        cycles: 2,
        m_max: 2,
        grad_mode: GradMode::FullBptt,
        ..ModelConfig::default()
    };
    let mut model = HrmModel::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Random Q head and bias so the BCE term has a nontrivial gradient.
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    for p in model.params.iter_mut() {
        if p.name.starts_with("head.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    let rows = 2;
    let batch = Batch {
        size: rows,
        seq_len: config.seq_len,
        inputs: (0..rows * config.seq_len).map(|_| rng.random_range(0..5)).collect(),
        targets: (0..rows * config.seq_len).map(|_| rng.random_range(1..5)).collect(),
    };
    let targets: Vec<QTargets> = (0..rows)
        .map(|_| QTargets {
            g_halt: f64::from(rng.random_range(0..2u8)),
            g_continue: rng.random::<f64>(),
        })
        .collect();
    let state = model.init_state(rows);
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let unwrap_tensor = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            kernel: "segment_loss",
            reason: other.to_string(),
        },
    };
    let worst = finite_diff_check(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = model.embed_input(g, &p, &batch).map_err(unwrap_tensor)?;
            let out = model.recurrent_forward(g, &p, &state, x).map_err(unwrap_tensor)?;
            let loss = segment_loss(g, out.logits, &batch.targets, out.q, &targets).map_err(|e| match e {
                ActError::Model(m) => unwrap_tensor(m),
                other => TensorError::InvalidArgument {
                    kernel: "segment_loss",
                    reason: other.to_string(),
                },
            })?;
            Ok(loss.total)
        },
        &inputs,
        epsilon,
    )?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_parse() {
        assert_eq!("q_diff".parse::<HaltStrategy>().unwrap(), HaltStrategy::QDiffThreshold);
        assert_eq!("q_halt_threshold".parse::<HaltStrategy>().unwrap(), HaltStrategy::QHaltThreshold);
        assert_eq!("fixed_steps".parse::<HaltStrategy>().unwrap(), HaltStrategy::FixedSteps);
        assert!(matches!("nope".parse::<HaltStrategy>(), Err(ActError::UnknownStrategy(_))));
        for s in [HaltStrategy::FixedSteps, HaltStrategy::QHaltThreshold, HaltStrategy::QDiffThreshold] {
            assert_eq!(s.to_string().parse::<HaltStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn config_problems_are_listed() {
        assert!(ActConfig::default().problems().is_empty());
        let c = ActConfig {
            m_max: 1,
            exploration_prob: 0.5,
            threshold: 1.0,
            fixed_steps: 2,
            ..ActConfig::default()
        };
        assert_eq!(c.problems().len(), 3);
    }

    #[test]
    fn decision_examples() {
        assert!(train_halt_decision(-5.0, 5.0, 4, 1, 4));
        assert!(!train_halt_decision(0.3, 0.1, 1, 3, 8));
        assert!(train_halt_decision(0.3, 0.1, 3, 3, 8));
        let p = HaltPolicy::threshold(HaltStrategy::QHaltThreshold, 0.9, 8);
        assert!(!infer_halt_decision(0.0, -10.0, &p, 1));
        assert!(infer_halt_decision(0.0, -10.0, &p, 8));
        assert!(infer_halt_decision(-9.0, 9.0, &HaltPolicy::fixed(3), 3));
        assert!(!infer_halt_decision(9.0, -9.0, &HaltPolicy::fixed(3), 2));
    }

    #[test]
    fn target_examples() {
        let t = compute_q_targets(0.2, 0.7, true, 4, 4);
        assert_eq!(t.g_halt, 1.0);
        assert!((t.g_continue - 0.549834).abs() < 1e-6);
        let t = compute_q_targets(0.2, 0.7, false, 1, 4);
        assert_eq!(t.g_halt, 0.0);
        assert!((t.g_continue - 0.668188).abs() < 1e-6);
    }

    #[test]
    fn replay_stops_at_first_trigger_or_horizon() {
        let traj = [(-3.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        let p = HaltPolicy::threshold(HaltStrategy::QDiffThreshold, 0.5, 4);
        assert_eq!(replay_halt_step(&traj, &p), 2);
        let p = HaltPolicy::threshold(HaltStrategy::QDiffThreshold, 0.99, 4);
        assert_eq!(replay_halt_step(&traj, &p), 4);
        assert_eq!(replay_halt_step(&traj, &HaltPolicy::fixed(3)), 3);
    }
}

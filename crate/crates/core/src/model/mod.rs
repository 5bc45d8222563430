//! The hierarchical reasoning network.
//!
//! A segment runs `cycles · t` low-level micro-steps. At micro-step `i` the L
//! stack consumes `z_L + z_H + x̃`; whenever `i ≡ 0 (mod t)` the H stack
//! consumes `z_H + z_L` and replaces `z_H`. With `h_layers = 0` there is no H
//! stack and the L stack consumes `z_L + x̃`. The output and Q heads read the
//! slow state (`z_H`, or `z_L` when the H module is absent).
//!
//! In [`GradMode::OneStep`] only the last L update and the last H update of a
//! segment are recorded for backward; the earlier micro-steps run on
//! throw-away no-grad graphs, so tape size does not grow with `cycles · t`.

mod checkpoint;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use params::{Bound, GradMap, Param, ParamId, ParamStore};

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sudoku::EncodedExample;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input of {got} tokens; model expects {expected} per example")]
    SequenceLength { expected: usize, got: usize },
    #[error("state holds halted samples; only active rows may be advanced")]
    HaltedInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    OneStep,
    FullBptt,
}

/// Which low-level state the H update reads at a boundary micro-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HInput {
    /// `z_L^i`, the state the L stack has just produced.
    UpdatedL,
    /// `z_L^{i-1}`, the state the L stack consumed at the same micro-step.
    PreviousL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub l_layers: usize,
    /// 0 removes the H module.
    pub h_layers: usize,
    /// L micro-steps per H update.
    pub t: usize,
    /// H updates per segment.
    pub cycles: usize,
    pub m_max: usize,
    pub grad_mode: GradMode,
    pub h_input: HInput,
    /// Hidden width of the gated MLP as a multiple of `hidden_dim`.
    pub mlp_ratio: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            seq_len: 81,
            hidden_dim: 128,
            num_heads: 4,
            l_layers: 4,
            h_layers: 4,
            t: 2,
            cycles: 2,
            m_max: 8,
            grad_mode: GradMode::OneStep,
            h_input: HInput::UpdatedL,
            mlp_ratio: 4.0,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    /// The 8-layer L-module-only ablation.
    pub fn l_only(mut self, layers: usize) -> Self {
        self.l_layers = layers;
        self.h_layers = 0;
        self.cycles = 1;
        self.t = 1;
        self
    }

    pub fn has_h(&self) -> bool {
        self.h_layers > 0
    }

    pub fn micro_steps(&self) -> usize {
        self.cycles * self.t
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    /// SwiGLU inner width: two thirds of `mlp_ratio · hidden`, rounded up to
    /// a multiple of 8.
    pub fn mlp_dim(&self) -> usize {
        let raw = (self.mlp_ratio * self.hidden_dim as f64 * 2.0 / 3.0).ceil() as usize;
        raw.div_ceil(8).max(1) * 8
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab_size < 2 {
            out.push("model.vocab_size must be at least 2".into());
        }
        if self.seq_len == 0 {
            out.push("model.seq_len must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            out.push(format!(
                "model.hidden_dim {} must be divisible by model.num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        } else if self.head_dim() % 2 != 0 {
            out.push("model head dimension must be even for rotary embeddings".into());
        }
        if self.l_layers == 0 {
            out.push("model.l_layers must be positive".into());
        }
        if self.t == 0 {
            out.push("model.t must be at least 1".into());
        }
        if self.cycles == 0 {
            out.push("model.cycles must be at least 1".into());
        }
        if self.m_max == 0 {
            out.push("model.m_max must be at least 1".into());
        }
        if self.h_layers == 0 && self.cycles != 1 {
            out.push("model.cycles must be 1 when model.h_layers = 0".into());
        }
        if !(self.mlp_ratio > 0.0) {
            out.push("model.mlp_ratio must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            out.push("model.rope_base must exceed 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(p.join("; ")))
        }
    }
}

/// Recurrent carry for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T: Scalar> {
    /// `[batch, seq, hidden]`
    pub z_l: Tensor<T>,
    /// `[batch, seq, hidden]`
    pub z_h: Tensor<T>,
    /// Segments completed per sample.
    pub segment: Vec<usize>,
    pub halted: Vec<bool>,
}

impl<T: Scalar> LatentState<T> {
    pub fn batch(&self) -> usize {
        self.segment.len()
    }

    /// Rows `rows` as a smaller batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            z_l: self.z_l.select_rows(rows),
            z_h: self.z_h.select_rows(rows),
            segment: rows.iter().map(|&r| self.segment[r]).collect(),
            halted: rows.iter().map(|&r| self.halted[r]).collect(),
        }
    }

    /// Writes a sub-batch produced from `select(rows)` back in place.
    pub fn scatter(&mut self, rows: &[usize], sub: &Self) {
        self.z_l.scatter_rows(rows, &sub.z_l);
        self.z_h.scatter_rows(rows, &sub.z_h);
        for (i, &r) in rows.iter().enumerate() {
            self.segment[r] = sub.segment[i];
            self.halted[r] = sub.halted[i];
        }
    }
}

/// Draws from a unit normal truncated to ±2 by rejection.
pub fn truncated_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

/// The two initial state vectors for `seed`, each of length `hidden_dim`.
pub fn initial_vectors(hidden_dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_l = truncated_normal(&mut rng, hidden_dim, 1.0);
    let z_h = truncated_normal(&mut rng, hidden_dim, 1.0);
    (z_l, z_h)
}

fn broadcast<T: Scalar>(vector: &[T], batch: usize, seq: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * seq * vector.len());
    for _ in 0..batch * seq {
        data.extend_from_slice(vector);
    }
    Tensor::new(vec![batch, seq, vector.len()], data).expect("broadcast shape")
}

/// Fresh state: every row and position starts from the same seeded vectors.
pub fn init_state<T: Scalar>(batch: usize, config: &ModelConfig, seed: u64) -> LatentState<T> {
    let (l, h) = initial_vectors(config.hidden_dim, seed);
    let l: Vec<T> = l.into_iter().map(T::of).collect();
    let h: Vec<T> = h.into_iter().map(T::of).collect();
    LatentState {
        z_l: broadcast(&l, batch, config.seq_len),
        z_h: broadcast(&h, batch, config.seq_len),
        segment: vec![0; batch],
        halted: vec![false; batch],
    }
}

/// Token inputs and targets for a batch, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[EncodedExample]) -> Self {
        let seq_len = examples.first().map_or(0, |e| e.input.len());
        Self {
            size: examples.len(),
            seq_len,
            inputs: examples.iter().flat_map(|e| e.input.iter().copied()).collect(),
            targets: examples.iter().flat_map(|e| e.target.iter().copied()).collect(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let s = self.seq_len;
        let take = |v: &[usize]| rows.iter().flat_map(|&r| v[r * s..(r + 1) * s].iter().copied()).collect();
        Self {
            size: rows.len(),
            seq_len: s,
            inputs: take(&self.inputs),
            targets: take(&self.targets),
        }
    }

    pub fn input_row(&self, r: usize) -> &[usize] {
        &self.inputs[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn target_row(&self, r: usize) -> &[usize] {
        &self.targets[r * self.seq_len..(r + 1) * self.seq_len]
    }
}

/// Result of one segment on a graph.
pub struct SegmentOutcome<T: Scalar> {
    /// `[batch, seq, vocab]`
    pub logits: Var,
    /// `[batch, 2]`: halt logit then continue logit.
    pub q: Var,
    /// Carry for the next segment; plain values, never tracked.
    pub next_state: LatentState<T>,
}

/// Values of a segment computed without gradient.
#[derive(Debug, Clone)]
pub struct SegmentValues<T: Scalar> {
    pub logits: Tensor<T>,
    pub q: Tensor<T>,
    pub next_state: LatentState<T>,
}

impl<T: Scalar> SegmentValues<T> {
    pub fn q_halt(&self, row: usize) -> f64 {
        self.q.data()[2 * row].as_f64()
    }

    pub fn q_continue(&self, row: usize) -> f64 {
        self.q.data()[2 * row + 1].as_f64()
    }

    pub fn predictions(&self) -> Vec<Vec<usize>> {
        predictions(&self.logits)
    }
}

/// Per-row argmax token sequences of `[batch, seq, vocab]` logits.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<usize>> {
    let s = logits.shape();
    let (seq, vocab) = (s[1], s[2]);
    logits
        .data()
        .chunks(seq * vocab)
        .map(|row| {
            row.chunks(vocab)
                .map(|cell| {
                    let mut best = 0;
                    for (i, v) in cell.iter().enumerate() {
                        if *v > cell[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    l_blocks: Vec<BlockParams>,
    h_blocks: Vec<BlockParams>,
    out_w: ParamId,
    out_b: ParamId,
    q_w: ParamId,
    q_b: ParamId,
}

impl Layout {
    fn resolve(store: &ParamStore<impl Scalar>, config: &ModelConfig) -> Result<Self> {
        let id = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))
        };
        let block = |prefix: &str, i: usize| -> Result<BlockParams> {
            let p = |n: &str| id(format!("{prefix}.{i}.{n}"));
            Ok(BlockParams {
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                w_gate: p("mlp.w_gate")?,
                w_up: p("mlp.w_up")?,
                w_down: p("mlp.w_down")?,
            })
        };
        Ok(Self {
            embed: id("embed.tokens".into())?,
            l_blocks: (0..config.l_layers)
                .map(|i| block("l", i))
                .collect::<Result<_>>()?,
            h_blocks: (0..config.h_layers)
                .map(|i| block("h", i))
                .collect::<Result<_>>()?,
            out_w: id("head.out.weight".into())?,
            out_b: id("head.out.bias".into())?,
            q_w: id("head.q.weight".into())?,
            q_b: id("head.q.bias".into())?,
        })
    }
}

enum Init {
    /// Truncated normal with std `1/√fan_in`.
    Normal { fan_in: usize },
    Constant(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    decay: bool,
    init: Init,
}

/// Every parameter in creation order.
fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.hidden_dim;
    let mlp = config.mlp_dim();
    let normal = |name: String, shape: [usize; 2]| ParamSpec {
        name,
        shape: shape.to_vec(),
        decay: true,
        init: Init::Normal { fan_in: shape[0] },
    };
    let mut out = vec![ParamSpec {
        init: Init::Normal { fan_in: d },
        ..normal("embed.tokens".into(), [config.vocab_size, d])
    }];
    for (prefix, layers) in [("l", config.l_layers), ("h", config.h_layers)] {
        for i in 0..layers {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push(normal(format!("{prefix}.{i}.attn.{w}"), [d, d]));
            }
            out.push(normal(format!("{prefix}.{i}.mlp.w_gate"), [d, mlp]));
            out.push(normal(format!("{prefix}.{i}.mlp.w_up"), [d, mlp]));
            out.push(normal(format!("{prefix}.{i}.mlp.w_down"), [mlp, d]));
        }
    }
    out.push(normal("head.out.weight".into(), [d, config.vocab_size]));
    out.push(ParamSpec {
        name: "head.out.bias".into(),
        shape: vec![config.vocab_size],
        decay: false,
        init: Init::Constant(0.0),
    });
    // The Q head starts silent and strongly biased toward continuing.
    out.push(ParamSpec {
        name: "head.q.weight".into(),
        shape: vec![d, 2],
        decay: true,
        init: Init::Constant(0.0),
    });
    out.push(ParamSpec {
        name: "head.q.bias".into(),
        shape: vec![2],
        decay: false,
        init: Init::Constant(-5.0),
    });
    out
}

/// Rotary tables, `[seq, head_dim / 2]`.
#[derive(Debug, Clone)]
struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    fn new(seq: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Self { cos, sin }
    }
}

#[derive(Debug, Clone)]
pub struct HrmModel<T: Scalar> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    rope: Rope<T>,
    /// Seeded initial state vectors, `[hidden]` each.
    init_l: Vec<T>,
    init_h: Vec<T>,
}

impl<T: Scalar> HrmModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in param_specs(&config) {
            let n = spec.shape.iter().product();
            let value = match spec.init {
                Init::Normal { fan_in } => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_f64(spec.shape, &truncated_normal(&mut rng, n, std))?
                }
                Init::Constant(c) => Tensor::from_f64(spec.shape, &vec![c; n])?,
            };
            store.add(spec.name, value, spec.decay);
        }
        let state_seed = rng.random::<u64>();
        let (l, h) = initial_vectors(config.hidden_dim, state_seed);
        Self::assemble(
            config,
            store,
            l.into_iter().map(T::of).collect(),
            h.into_iter().map(T::of).collect(),
        )
    }

    /// Confirms every parameter has the shape the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(self.params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>, init_l: Vec<T>, init_h: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        if init_l.len() != config.hidden_dim || init_h.len() != config.hidden_dim {
            return Err(ModelError::Checkpoint("initial state width mismatch".into()));
        }
        let rope = Rope::new(config.seq_len, config.head_dim(), config.rope_base);
        Ok(Self {
            config,
            params,
            layout,
            rope,
            init_l,
            init_h,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_grad_mode(&mut self, mode: GradMode) {
        self.config.grad_mode = mode;
    }

    pub fn initial_state_vectors(&self) -> (&[T], &[T]) {
        (&self.init_l, &self.init_h)
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Scalar>(&self) -> HrmModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        HrmModel::assemble(
            self.config.clone(),
            self.params.cast(),
            conv(&self.init_l),
            conv(&self.init_h),
        )
        .expect("a valid model stays valid under cast")
    }

    pub fn init_state(&self, batch: usize) -> LatentState<T> {
        LatentState {
            z_l: broadcast(&self.init_l, batch, self.config.seq_len),
            z_h: broadcast(&self.init_h, batch, self.config.seq_len),
            segment: vec![0; batch],
            halted: vec![false; batch],
        }
    }

    /// `x̃`: token embeddings scaled by `√hidden_dim`, `[batch, seq, hidden]`.
    pub fn embed_input(&self, g: &mut Graph<T>, p: &Bound, batch: &Batch) -> Result<Var> {
        if batch.seq_len != self.config.seq_len {
            return Err(ModelError::SequenceLength {
                expected: self.config.seq_len,
                got: batch.seq_len,
            });
        }
        let e = g.embedding(p.get(self.layout.embed), &batch.inputs, &[batch.size, batch.seq_len])?;
        Ok(g.scale(e, (self.config.hidden_dim as f64).sqrt())?)
    }

    fn block(&self, g: &mut Graph<T>, p: &Bound, b: &BlockParams, h: Var) -> Result<Var> {
        let heads = self.config.num_heads;
        let q = g.linear(h, p.get(b.wq), None)?;
        let k = g.linear(h, p.get(b.wk), None)?;
        let v = g.linear(h, p.get(b.wv), None)?;
        let q = g.rope(q, heads, &self.rope.cos, &self.rope.sin)?;
        let k = g.rope(k, heads, &self.rope.cos, &self.rope.sin)?;
        let a = g.attention(q, k, v, heads)?;
        let a = g.linear(a, p.get(b.wo), None)?;
        let h = g.add(h, a)?;
        let h = g.rms_norm(h, RMS_EPS)?;
        let gate = g.linear(h, p.get(b.w_gate), None)?;
        let up = g.linear(h, p.get(b.w_up), None)?;
        let m = g.swiglu(gate, up)?;
        let m = g.linear(m, p.get(b.w_down), None)?;
        let h = g.add(h, m)?;
        Ok(g.rms_norm(h, RMS_EPS)?)
    }

    fn stack(&self, g: &mut Graph<T>, p: &Bound, blocks: &[BlockParams], mut h: Var) -> Result<Var> {
        for b in blocks {
            h = self.block(g, p, b, h)?;
        }
        Ok(h)
    }

    /// Applies the L stack alone to `h`; the L-only model's segment is this
    /// stack applied to `z_L + x̃`.
    pub fn l_stack(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        self.stack(g, p, &self.layout.l_blocks, h)
    }

    /// `f_L(z_L, z_H, x̃)`.
    pub fn l_step(&self, g: &mut Graph<T>, p: &Bound, z_l: Var, z_h: Var, x: Var) -> Result<Var> {
        let mut inp = g.add(z_l, x)?;
        if self.config.has_h() {
            inp = g.add(inp, z_h)?;
        }
        self.l_stack(g, p, inp)
    }

    /// `f_H(z_H, z_L)`.
    pub fn h_step(&self, g: &mut Graph<T>, p: &Bound, z_h: Var, z_l: Var) -> Result<Var> {
        let inp = g.add(z_h, z_l)?;
        self.stack(g, p, &self.layout.h_blocks, inp)
    }

    /// Output logits and Q logits read from a `[batch, seq, hidden]` state.
    pub fn heads(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let logits = g.linear(z, p.get(self.layout.out_w), Some(p.get(self.layout.out_b)))?;
        let first = g.select_seq(z, 0)?;
        let q = g.linear(first, p.get(self.layout.q_w), Some(p.get(self.layout.q_b)))?;
        Ok((logits, q))
    }

    /// Whether micro-step `i` (1-based) ends with an H update.
    pub fn updates_h_at(&self, i: usize) -> bool {
        self.config.has_h() && i % self.config.t == 0
    }

    fn unroll(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mut z_l: Var,
        mut z_h: Var,
        x: Var,
        steps: RangeInclusive<usize>,
    ) -> Result<(Var, Var)> {
        for i in steps {
            let next_l = self.l_step(g, p, z_l, z_h, x)?;
            if self.updates_h_at(i) {
                let l_in = match self.config.h_input {
                    HInput::UpdatedL => next_l,
                    HInput::PreviousL => z_l,
                };
                z_h = self.h_step(g, p, z_h, l_in)?;
            }
            z_l = next_l;
        }
        Ok((z_l, z_h))
    }

    /// One micro-step on a private no-grad graph; nothing is retained.
    fn untracked_step(&self, z_l: Tensor<T>, z_h: Tensor<T>, x: &Tensor<T>, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g);
        let (zl, zh, xv) = (g.constant(z_l), g.constant(z_h), g.constant(x.clone()));
        let (zl, zh) = self.unroll(&mut g, &p, zl, zh, xv, i..=i)?;
        Ok((g.value(zl).clone(), g.value(zh).clone()))
    }

    /// Runs one segment from `state` with the configured gradient mode.
    pub fn recurrent_forward(&self, g: &mut Graph<T>, p: &Bound, state: &LatentState<T>, x: Var) -> Result<SegmentOutcome<T>> {
        self.recurrent_forward_with(g, p, state, x, self.config.grad_mode)
    }

    pub fn recurrent_forward_with(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &LatentState<T>,
        x: Var,
        mode: GradMode,
    ) -> Result<SegmentOutcome<T>> {
        if state.halted.iter().any(|&h| h) {
            return Err(ModelError::HaltedInput);
        }
        let n = self.config.micro_steps();
        if n == 0 {
            return Err(ModelError::Config("cycles · t must be positive".into()));
        }
        let (z_l, z_h) = match mode {
            GradMode::FullBptt => {
                let zl = g.constant(state.z_l.clone());
                let zh = g.constant(state.z_h.clone());
                self.unroll(g, p, zl, zh, x, 1..=n)?
            }
            GradMode::OneStep => {
                let (mut zl, mut zh) = (state.z_l.clone(), state.z_h.clone());
                let xv = g.value(x).clone();
                for i in 1..n {
                    (zl, zh) = self.untracked_step(zl, zh, &xv, i)?;
                }
                let zl = g.constant(zl);
                let zh = g.constant(zh);
                self.unroll(g, p, zl, zh, x, n..=n)?
            }
        };
        let source = if self.config.has_h() { z_h } else { z_l };
        let (logits, q) = self.heads(g, p, source)?;
        let next_state = LatentState {
            z_l: g.value(z_l).clone(),
            z_h: g.value(z_h).clone(),
            segment: state.segment.iter().map(|m| m + 1).collect(),
            halted: state.halted.clone(),
        };
        Ok(SegmentOutcome {
            logits,
            q,
            next_state,
        })
    }

    /// Binds, embeds and runs one segment on `g`.
    pub fn segment(&self, g: &mut Graph<T>, state: &LatentState<T>, batch: &Batch) -> Result<(Bound, SegmentOutcome<T>)> {
        let p = self.params.bind(g);
        let x = self.embed_input(g, &p, batch)?;
        let out = self.recurrent_forward(g, &p, state, x)?;
        Ok((p, out))
    }

    /// One segment evaluated without recording gradients.
    pub fn forward_no_grad(&self, state: &LatentState<T>, batch: &Batch) -> Result<SegmentValues<T>> {
        let mut g = Graph::no_grad();
        let (_, out) = self.segment(&mut g, state, batch)?;
        Ok(SegmentValues {
            logits: g.value(out.logits).clone(),
            q: g.value(out.q).clone(),
            next_state: out.next_state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            seq_len: 4,
            hidden_dim: 8,
            num_heads: 2,
            l_layers: 1,
            h_layers: 1,
            t: 2,
            cycles: 2,
            m_max: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.h_layers = 0;
        assert!(c.validate().is_err());
        c.cycles = 1;
        assert!(c.validate().is_ok());
        let mut c = tiny();
        c.t = 0;
        assert!(c.problems().iter().any(|p| p.contains("model.t")));
    }

    #[test]
    fn mlp_width_rounds_up_to_eight() {
        let c = ModelConfig {
            hidden_dim: 64,
            ..ModelConfig::default()
        };
        assert_eq!(c.mlp_dim(), 176);
    }

    #[test]
    fn init_state_is_shared_and_deterministic() {
        let c = tiny();
        let a = init_state::<f32>(2, &c, 7);
        let b = init_state::<f32>(2, &c, 7);
        assert_eq!(a, b);
        let row = c.seq_len * c.hidden_dim;
        assert_eq!(a.z_l.data()[..row], a.z_l.data()[row..]);
        assert_eq!(a.segment, vec![0, 0]);
        assert!(a.halted.iter().all(|h| !h));
        assert_ne!(init_state::<f32>(1, &c, 8).z_l, init_state::<f32>(1, &c, 7).z_l);
    }

    #[test]
    fn h_updates_only_on_multiples_of_t() {
        let m = HrmModel::<f64>::new(tiny(), 0).unwrap();
        let steps: Vec<usize> = (1..=4).filter(|&i| m.updates_h_at(i)).collect();
        assert_eq!(steps, vec![2, 4]);
        let l_only = HrmModel::<f64>::new(tiny().l_only(2), 0).unwrap();
        assert!((1..=4).all(|i| !l_only.updates_h_at(i)));
        assert!(l_only.params.iter().all(|p| !p.name.starts_with("h.")));
    }

    #[test]
    fn segment_rejects_halted_rows_and_bad_lengths() {
        let m = HrmModel::<f32>::new(tiny(), 0).unwrap();
        let batch = Batch {
            size: 1,
            seq_len: 4,
            inputs: vec![0, 1, 2, 3],
            targets: vec![1, 1, 2, 3],
        };
        let mut s = m.init_state(1);
        s.halted[0] = true;
        assert!(matches!(m.forward_no_grad(&s, &batch), Err(ModelError::HaltedInput)));
        let short = Batch {
            seq_len: 3,
            inputs: vec![0, 1, 2],
            targets: vec![1, 1, 2],
            ..batch.clone()
        };
        assert!(matches!(
            m.forward_no_grad(&m.init_state(1), &short),
            Err(ModelError::SequenceLength { .. })
        ));
        let bad_token = Batch {
            inputs: vec![0, 1, 9, 3],
            ..batch
        };
        assert!(m.forward_no_grad(&m.init_state(1), &bad_token).is_err());
    }

    #[test]
    fn next_state_is_untracked_in_both_modes() {
        for mode in [GradMode::OneStep, GradMode::FullBptt] {
            let mut m = HrmModel::<f32>::new(tiny(), 3).unwrap();
            m.set_grad_mode(mode);
            let batch = Batch {
                size: 1,
                seq_len: 4,
                inputs: vec![0, 1, 2, 3],
                targets: vec![1, 1, 2, 3],
            };
            let mut g = Graph::new();
            let (_, out) = m.segment(&mut g, &m.init_state(1), &batch).unwrap();
            assert_eq!(out.next_state.segment, vec![1]);
            assert!(g.requires_grad(out.logits));
            // the carry comes back as values and re-enters only as constants
            let again = g.constant(out.next_state.z_h.clone());
            assert!(!g.requires_grad(again));
        }
    }
}

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    SwiGlu(Var, Var),
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SelectSeq {
        x: Var,
        index: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    L2Norm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Computation tape.
///
/// A graph built with [`Graph::no_grad`] records values only: every node it
/// produces is untracked, so no backward state is retained.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that participate in the backward pass.
    pub fn tracked_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Leaf that receives gradient (unless the graph is `no_grad`).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let tracked = self.grad_enabled;
        self.leaf(value, tracked)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, kernel: &'static str, inputs: &[Var]) -> Result<()> {
        if cfg!(debug_assertions) && inputs.iter().any(|v| !self.value(*v).all_finite()) {
            return Err(TensorError::NonFinite { kernel });
        }
        Ok(())
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                kernel,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Untracked copy of `v`; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.check_finite("add", &[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.check_finite("mul", &[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let s = T::of(factor);
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p * s).collect())?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, shape) = self.matmul_dims("matmul", a, b)?;
        self.check_finite("matmul", &[a, b])?;
        let mut out = vec![T::zero(); m * n];
        let (x, w) = (self.value(a).data(), self.value(b).data());
        gemm(m, k, n, T::one(), x, 0, k, 1, w, 0, n, 1, T::zero(), &mut out, 0, n, 1);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    fn matmul_dims(
        &self,
        kernel: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize, usize, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || TensorError::ShapeMismatch {
            kernel,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch());
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok((m, k, n, shape))
    }

    /// `x · w + bias` with `w: [in, out]` and `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (m, k, n, shape) = self.matmul_dims("linear", x, w)?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(TensorError::ShapeMismatch {
                    kernel: "linear",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
            inputs.push(b);
        }
        self.check_finite("linear", &inputs)?;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bd);
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        gemm(m, k, n, T::one(), xd, 0, k, 1, wd, 0, n, 1, T::one(), &mut out, 0, n, 1);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                bias,
                m,
                k,
                n,
            },
            &inputs,
        ))
    }

    /// Row lookup into `table: [vocab, dim]`; output shape is `lead ++ [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(TensorError::InvalidArgument {
                kernel: "embedding",
                reason: format!("table must be 2-d, got {ts:?}"),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(TensorError::InvalidArgument {
                kernel: "embedding",
                reason: format!("{} ids do not fill shape {lead:?}", ids.len()),
            });
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidArgument {
                kernel: "embedding",
                reason: format!("token id {bad} outside vocabulary of {vocab}"),
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", &[x])?;
        let v = self.value(x);
        let d = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check_finite("rms_norm", &[x])?;
        let v = self.value(x);
        let d = v.last_dim();
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut data = v.data().to_vec();
        let mut inv_rms = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|&a| a * a).sum::<T>() / dn;
            let inv = (ms + eps).sqrt().recip();
            row.iter_mut().for_each(|a| *a = *a * inv);
            inv_rms.push(inv);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RmsNorm { x, inv_rms }, &[x]))
    }

    /// `silu(gate) * up`, the gating of a SwiGLU feed-forward.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape("swiglu", gate, up)?;
        self.check_finite("swiglu", &[gate, up])?;
        let (g, u) = (self.value(gate), self.value(up));
        let data = g
            .data()
            .iter()
            .zip(u.data())
            .map(|(&a, &b)| a * sigmoid(a) * b)
            .collect();
        let out = Tensor::new(g.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SwiGlu(gate, up), &[gate, up]))
    }

    /// Rotary position embedding on `x: [batch, seq, heads * head_dim]`.
    ///
    /// `cos`/`sin` are `[seq, head_dim / 2]`; dimension `i` is rotated with
    /// dimension `i + head_dim / 2` inside each head.
    pub fn rope(&mut self, x: Var, heads: usize, cos: &[T], sin: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (seq, width) = match shape.as_slice() {
            [_, s, w] => (*s, *w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    kernel: "rope",
                    reason: format!("expected [batch, seq, width], got {shape:?}"),
                })
            }
        };
        if heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                kernel: "rope",
                reason: format!("width {width} not divisible into {heads} even-sized heads"),
            });
        }
        let half = width / heads / 2;
        if cos.len() != seq * half || sin.len() != seq * half {
            return Err(TensorError::InvalidArgument {
                kernel: "rope",
                reason: format!("tables must hold {} entries", seq * half),
            });
        }
        self.check_finite("rope", &[x])?;
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, seq, width, heads, cos, sin, false);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Rope {
                x,
                heads,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
            &[x],
        ))
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch, seq, heads * head_dim]`; the output has the
    /// same shape with heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        let (batch, seq, width) = match shape.as_slice() {
            [b, s, w] => (*b, *s, *w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    kernel: "attention",
                    reason: format!("expected [batch, seq, width], got {shape:?}"),
                })
            }
        };
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::InvalidArgument {
                kernel: "attention",
                reason: format!("width {width} not divisible by {heads} heads"),
            });
        }
        self.check_finite("attention", &[q, k, v])?;
        let hd = width / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * hd;
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(seq, hd, seq, scale, qd, base, width, 1, kd, base, 1, width, T::zero(), p, 0, seq, 1);
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(seq, seq, hd, T::one(), p, 0, seq, 1, vd, base, width, 1, T::zero(), &mut out, base, width, 1);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            kernel: "concat",
            reason: "no inputs".into(),
        })?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    kernel: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        self.check_finite("concat", parts)?;
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// `x[:, index, :]` for `x: [batch, seq, dim]`.
    pub fn select_seq(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, seq, dim) = match shape.as_slice() {
            [b, s, d] if index < *s => (*b, *s, *d),
            _ => {
                return Err(TensorError::InvalidArgument {
                    kernel: "select_seq",
                    reason: format!("position {index} invalid for shape {shape:?}"),
                })
            }
        };
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let off = (b * seq + index) * dim;
            data.extend_from_slice(&xd[off..off + dim]);
        }
        let out = Tensor::new(vec![batch, dim], data)?;
        Ok(self.push(out, Op::SelectSeq { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sum", &[x])?;
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_finite("mean", &[x])?;
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                kernel: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), &[x]))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.check_finite("l2_norm", &[x])?;
        let v = self.value(x);
        let d = v.last_dim();
        let data = v
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt())
            .collect();
        let shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::L2Norm(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the last axis, skipping positions equal to `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        self.check_finite("cross_entropy", &[logits])?;
        let v = self.value(logits);
        let vocab = v.last_dim();
        let rows = v.numel() / vocab.max(1);
        if targets.len() != rows {
            return Err(TensorError::InvalidArgument {
                kernel: "cross_entropy",
                reason: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        let mut resolved = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == ignore {
                resolved.push(None);
            } else if t < vocab {
                resolved.push(Some(t));
            } else {
                return Err(TensorError::InvalidArgument {
                    kernel: "cross_entropy",
                    reason: format!("target {t} outside vocabulary of {vocab}"),
                });
            }
        }
        let count = resolved.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::AllIgnored);
        }
        let mut probs = v.data().to_vec();
        let mut total = T::zero();
        for (row, t) in probs.chunks_mut(vocab).zip(&resolved) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&a| (a - max).exp()).sum::<T>().ln() + max;
            if let Some(t) = t {
                total = total + (lse - row[*t]);
            }
            row.iter_mut().for_each(|a| *a = (*a - lse).exp());
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: resolved,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                kernel: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(t) = targets
            .data()
            .iter()
            .find(|t| !(**t >= T::zero() && **t <= T::one()))
        {
            return Err(TensorError::InvalidArgument {
                kernel: "bce_with_logits",
                reason: format!("target {t} outside [0, 1]"),
            });
        }
        self.check_finite("bce_with_logits", &[logits])?;
        let x = self.value(logits);
        if x.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                kernel: "bce_with_logits",
                reason: "empty input".into(),
            });
        }
        let total = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&q, &t)| q.max(T::zero()) - q * t + (-q.abs()).exp().ln_1p())
            .sum::<T>();
        let loss = total / T::of(x.numel() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate into tracked leaves; call [`Graph::zero_grad`]
    /// to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a = *a + *b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect());
                }
                if tracked(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&d| d * *s).collect()),
            Op::MatMul { a, b, m, k, n } => {
                matmul_backward(*a, *b, *m, *k, *n, g, &val, &tracked, &mut send);
            }
            Op::Linear {
                x,
                w,
                bias,
                m,
                k,
                n,
            } => {
                matmul_backward(*x, *w, *m, *k, *n, g, &val, &tracked, &mut send);
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); *n];
                    for row in g.chunks(*n) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                    send(*b, db);
                }
            }
            Op::Embedding { table, ids } => {
                let ts = self.nodes[table.0].value.shape();
                let dim = ts[1];
                let mut dt = vec![T::zero(); ts[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    dst.iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(a, &d)| *a = *a + d);
                }
                send(*table, dt);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &yy), &gg) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                send(*x, dx);
            }
            Op::RmsNorm { x, inv_rms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (((dxr, yr), gr), &inv) in dx
                    .chunks_mut(d)
                    .zip(y.chunks(d))
                    .zip(g.chunks(d))
                    .zip(inv_rms)
                {
                    let mean = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for ((o, &yy), &gg) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = inv * (gg - yy * mean);
                    }
                }
                send(*x, dx);
            }
            Op::SwiGlu(gate, up) => {
                let (a, b) = (val(*gate), val(*up));
                if tracked(*gate) {
                    let da = g
                        .iter()
                        .zip(a)
                        .zip(b)
                        .map(|((&d, &x), &u)| {
                            let s = sigmoid(x);
                            d * u * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    send(*gate, da);
                }
                if tracked(*up) {
                    let du = g
                        .iter()
                        .zip(a)
                        .map(|(&d, &x)| d * x * sigmoid(x))
                        .collect();
                    send(*up, du);
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let s = node.value.shape();
                let mut dx = g.to_vec();
                rotate(&mut dx, s[1], s[2], *heads, cos, sin, true);
                send(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = node.value.shape();
                attention_backward(
                    (s[0], s[1], s[2], *heads),
                    (val(*q), val(*k), val(*v)),
                    probs,
                    g,
                )
                .into_iter()
                .zip([*q, *k, *v])
                .for_each(|(d, var)| send(var, d));
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> =
                    parts.iter().map(|p| self.nodes[p.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(*p, dp);
                    offset += w;
                }
            }
            Op::SelectSeq { x, index } => {
                let s = self.nodes[x.0].value.shape();
                let (batch, seq, dim) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); batch * seq * dim];
                for b in 0..batch {
                    let off = (b * seq + index) * dim;
                    dx[off..off + dim].copy_from_slice(&g[b * dim..(b + 1) * dim]);
                }
                send(*x, dx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                send(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::L2Norm(x) => {
                let xv = val(*x);
                let d = self.nodes[x.0].value.last_dim();
                let norms = node.value.data();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, (dxr, xr)) in dx.chunks_mut(d).zip(xv.chunks(d)).enumerate() {
                    if norms[r] > T::zero() {
                        let f = g[r] / norms[r];
                        dxr.iter_mut().zip(xr).for_each(|(o, &a)| *o = f * a);
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.nodes[logits.0].value.last_dim();
                let f = g[0] / T::of(*count as f64);
                let mut dx = vec![T::zero(); probs.len()];
                for ((dxr, pr), t) in dx.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    if let Some(t) = t {
                        dxr.iter_mut().zip(pr).for_each(|(o, &p)| *o = f * p);
                        dxr[*t] = dxr[*t] - f;
                    }
                }
                send(*logits, dx);
            }
            Op::Bce { logits, targets } => {
                let f = g[0] / T::of(targets.len() as f64);
                let dx = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&q, &t)| f * (sigmoid(q) - t))
                    .collect();
                send(*logits, dx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<'a, T: Scalar>(
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    g: &[T],
    val: &impl Fn(Var) -> &'a [T],
    tracked: &impl Fn(Var) -> bool,
    send: &mut impl FnMut(Var, Vec<T>),
) {
    if tracked(a) {
        let mut da = vec![T::zero(); m * k];
        gemm(m, n, k, T::one(), g, 0, n, 1, val(b), 0, 1, n, T::zero(), &mut da, 0, k, 1);
        send(a, da);
    }
    if tracked(b) {
        let mut db = vec![T::zero(); k * n];
        gemm(k, m, n, T::one(), val(a), 0, 1, k, g, 0, n, 1, T::zero(), &mut db, 0, n, 1);
        send(b, db);
    }
}

fn attention_backward<T: Scalar>(
    (batch, seq, width, heads): (usize, usize, usize, usize),
    (qd, kd, vd): (&[T], &[T], &[T]),
    probs: &[T],
    g: &[T],
) -> [Vec<T>; 3] {
    let hd = width / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * width + h * hd;
            let p_off = (b * heads + h) * seq * seq;
            let p = &probs[p_off..p_off + seq * seq];
            // dP = dO · Vᵀ
            gemm(seq, hd, seq, T::one(), g, base, width, 1, vd, base, 1, width, T::zero(), &mut dp, 0, seq, 1);
            // dV = Pᵀ · dO
            gemm(seq, seq, hd, T::one(), p, 0, 1, seq, g, base, width, 1, T::zero(), &mut dv, base, width, 1);
            // dS = P ∘ (dP − rowsum(dP ∘ P))
            for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                dr.iter_mut().zip(pr).for_each(|(d, &pp)| *d = pp * (*d - dot));
            }
            gemm(seq, seq, hd, scale, &dp, 0, seq, 1, kd, base, width, 1, T::zero(), &mut dq, base, width, 1);
            gemm(seq, seq, hd, scale, &dp, 0, 1, seq, qd, base, width, 1, T::zero(), &mut dk, base, width, 1);
        }
    }
    [dq, dk, dv]
}

fn rotate<T: Scalar>(
    data: &mut [T],
    seq: usize,
    width: usize,
    heads: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let hd = width / heads;
    let half = hd / 2;
    for (r, row) in data.chunks_mut(width).enumerate() {
        let s = r % seq;
        let (c, sn) = (&cos[s * half..(s + 1) * half], &sin[s * half..(s + 1) * half]);
        for head in row.chunks_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                let sv = if inverse { -sn[i] } else { sn[i] };
                head[i] = a * c[i] - b * sv;
                head[i + half] = b * c[i] + a * sv;
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        sum = sum + *a;
    }
    row.iter_mut().for_each(|a| *a = *a / sum);
}

/// Bounds-checked strided GEMM; `*_off` index the first element of each matrix.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[T],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, rows: usize, cols: usize, rs: usize, cs: usize| {
        off + (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
    };
    assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    if k > 0 {
        assert!(last(a_off, m, k, rsa, csa) < a.len());
        assert!(last(b_off, k, n, rsb, csb) < b.len());
    }
    // SAFETY: every index touched lies inside the slices (asserted above) and
    // `c` is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        )
    }
}

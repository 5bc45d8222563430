//! Independent oracles shared by the integration suites: a plain
//! transformer stack, the hand-unrolled halting rules and an exhaustive
//! 4×4 grid enumeration.
#![allow(dead_code)]

use std::collections::HashSet;

use hrm_core::model::{Batch, HrmModel, ParamStore};

/// A transformer stack written directly over `Vec<f64>`, sharing nothing
/// with the graph kernels but the parameter values.
pub struct Plain<'a> {
    pub store: &'a ParamStore<f64>,
    pub hidden: usize,
    pub heads: usize,
    pub seq: usize,
    pub rope_base: f64,
}

impl Plain<'_> {
    pub fn weight(&self, name: &str) -> (&[f64], usize) {
        let p = self.store.get(self.store.find(name).unwrap_or_else(|| panic!("{name}")));
        (p.value.data(), p.value.shape()[1])
    }

    pub fn matmul(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        let k = w.len() / cols;
        x.chunks(k)
            .flat_map(|row| (0..cols).map(move |j| (0..k).map(|i| row[i] * w[i * cols + j]).sum::<f64>()))
            .collect()
    }

    pub fn rms_norm(x: &mut [f64], d: usize) {
        for row in x.chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }

    pub fn rotary(&self, x: &mut [f64]) {
        let hd = self.hidden / self.heads;
        for (r, row) in x.chunks_mut(self.hidden).enumerate() {
            let pos = (r % self.seq) as f64;
            for head in row.chunks_mut(hd) {
                let original = head.to_vec();
                for i in 0..hd {
                    let pair = i % (hd / 2);
                    let theta = pos * self.rope_base.powf(-2.0 * pair as f64 / hd as f64);
                    let rotated = if i < hd / 2 { -original[i + hd / 2] } else { original[i - hd / 2] };
                    head[i] = original[i] * theta.cos() + rotated * theta.sin();
                }
            }
        }
    }

    pub fn attention(&self, q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
        let (s, d, hd) = (self.seq, self.hidden, self.hidden / self.heads);
        let mut out = vec![0.0; q.len()];
        for b in 0..q.len() / (s * d) {
            for h in 0..self.heads {
                for i in 0..s {
                    let qi = &q[(b * s + i) * d + h * hd..][..hd];
                    let scores: Vec<f64> = (0..s)
                        .map(|j| {
                            let kj = &k[(b * s + j) * d + h * hd..][..hd];
                            qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|x| (x - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..s {
                        for c in 0..hd {
                            out[(b * s + i) * d + h * hd + c] += e[j] / z * v[(b * s + j) * d + h * hd + c];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn block(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let d = self.hidden;
        let lin = |name: &str, input: &[f64]| {
            let (w, cols) = self.weight(&format!("{prefix}.{name}"));
            Self::matmul(input, w, cols)
        };
        let mut q = lin("attn.wq", x);
        let mut k = lin("attn.wk", x);
        let v = lin("attn.wv", x);
        self.rotary(&mut q);
        self.rotary(&mut k);
        let a = lin("attn.wo", &self.attention(&q, &k, &v));
        let mut h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        Self::rms_norm(&mut h, d);
        let gate = lin("mlp.w_gate", &h);
        let up = lin("mlp.w_up", &h);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        let m = lin("mlp.w_down", &act);
        let mut out: Vec<f64> = h.iter().zip(&m).map(|(p, q)| p + q).collect();
        Self::rms_norm(&mut out, d);
        out
    }
}

/// Final L state and logits of the L-only model after one micro-step,
/// computed with [`Plain`] from `z_L⁰ + x̃`.
pub fn plain_l_only_forward(model: &HrmModel<f64>, b: &Batch) -> (Vec<f64>, Vec<f64>) {
    let config = model.config();
    let plain = Plain {
        store: &model.params,
        hidden: config.hidden_dim,
        heads: config.num_heads,
        seq: config.seq_len,
        rope_base: config.rope_base,
    };
    let (embed, _) = plain.weight("embed.tokens");
    let d = config.hidden_dim;
    let (z0, _) = model.initial_state_vectors();
    let mut h: Vec<f64> = b
        .inputs
        .iter()
        .flat_map(|&tok| (0..d).map(move |c| embed[tok * d + c] * (d as f64).sqrt() + z0[c]))
        .collect();
    for layer in 0..config.l_layers {
        h = plain.block(&format!("l.{layer}"), &h);
    }
    let (w_out, vocab) = plain.weight("head.out.weight");
    let bias = model.params.get(model.params.find("head.out.bias").unwrap()).value.data().to_vec();
    let logits: Vec<f64> = Plain::matmul(&h, w_out, vocab)
        .chunks(vocab)
        .flat_map(|row| row.iter().zip(&bias).map(|(a, c)| a + c).collect::<Vec<_>>())
        .collect();
    (h, logits)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand-unrolled halting rule.
pub fn halt_oracle(q_halt: f64, q_continue: f64, m: usize, m_min: usize, m_max: usize) -> bool {
    if m == m_max {
        return true;
    }
    if m < m_min {
        return false;
    }
    if q_halt > q_continue {
        return true;
    }
    false
}

/// Hand-unrolled bootstrap targets.
pub fn target_oracle(next_halt: f64, next_continue: f64, exact: bool, m: usize, m_max: usize) -> (f64, f64) {
    let g_halt = if exact { 1.0 } else { 0.0 };
    let a = logistic(next_halt);
    let b = logistic(next_continue);
    let g_continue = if m == m_max {
        a
    } else if a >= b {
        a
    } else {
        b
    };
    (g_halt, g_continue)
}

/// Every solved 4×4 grid, built from row permutations and filtered with
/// set-based column/box checks. Sorted, so the first match is the
/// lexicographically smallest.
pub fn all_solved_4x4() -> Vec<Vec<u8>> {
    let mut perms = Vec::new();
    let base = [1u8, 2, 3, 4];
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let idx = [a, b, c, d];
                    if idx.iter().collect::<HashSet<_>>().len() == 4 {
                        perms.push(idx.map(|i| base[i]));
                    }
                }
            }
        }
    }
    let mut grids = Vec::new();
    for r0 in &perms {
        for r1 in &perms {
            for r2 in &perms {
                for r3 in &perms {
                    let rows = [r0, r1, r2, r3];
                    let cols_ok = (0..4).all(|c| rows.iter().map(|r| r[c]).collect::<HashSet<_>>().len() == 4);
                    let boxes_ok = (0..4).all(|bx| {
                        let (br, bc) = (bx / 2 * 2, bx % 2 * 2);
                        let cells: HashSet<u8> = (0..4).map(|k| rows[br + k / 2][bc + k % 2]).collect();
                        cells.len() == 4
                    });
                    if cols_ok && boxes_ok {
                        grids.push(rows.iter().flat_map(|r| r.iter().copied()).collect());
                    }
                }
            }
        }
    }
    grids.sort();
    grids
}


//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is (near) zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares backward-pass gradients of a scalar program with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` taken coordinate by coordinate over
/// every input, returning the worst relative error.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidEpsilon(epsilon));
    }
    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out)?)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut point = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..point[i].numel() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + epsilon;
            let up = eval(&point)?;
            point[i].data_mut()[j] = orig - epsilon;
            let down = eval(&point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output coordinate carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Result of checking one kernel over many random draws.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub max_relative_error: f64,
    pub cases: usize,
}

pub const KERNELS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "matmul",
    "linear",
    "embedding",
    "softmax",
    "rms_norm",
    "swiglu",
    "rope",
    "attention",
    "concat",
    "select_seq",
    "sum",
    "mean",
    "l2_norm",
    "cross_entropy",
    "bce_with_logits",
];

/// Checks one kernel on a random small problem (every axis ≤ 8) drawn from
/// `seed`.
pub fn check_kernel(kernel: &str, seed: u64, epsilon: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, s, d) = (dim(1, 3), dim(1, 6), dim(1, 8));
    let heads = dim(1, 2);
    let head_dim = 2 * dim(1, 2);
    let (k, n) = (dim(1, 8), dim(1, 8));
    let vocab = dim(2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = &mut rng;
    match kernel {
        "add" | "mul" | "swiglu" => {
            let x = random_tensor(r, &[b, s, d]);
            let y = random_tensor(r, &[b, s, d]);
            let w = random_tensor(r, &[b, s, d]);
            let name = kernel.to_string();
            finite_diff_check(
                |g, v| {
                    let o = match name.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "mul" => g.mul(v[0], v[1])?,
                        _ => g.swiglu(v[0], v[1])?,
                    };
                    project(g, o, &w)
                },
                &[x, y],
                epsilon,
            )
        }
        "scale" | "softmax" | "rms_norm" | "sum" | "mean" => {
            let x = random_tensor(r, &[b, s, d]);
            let w = random_tensor(r, &[b, s, d]);
            let name = kernel.to_string();
            finite_diff_check(
                |g, v| match name.as_str() {
                    "scale" => {
                        let o = g.scale(v[0], -1.7)?;
                        project(g, o, &w)
                    }
                    "softmax" => {
                        let o = g.softmax(v[0])?;
                        project(g, o, &w)
                    }
                    "rms_norm" => {
                        let o = g.rms_norm(v[0], 1e-6)?;
                        project(g, o, &w)
                    }
                    "sum" => g.sum(v[0]),
                    _ => g.mean(v[0]),
                },
                &[x],
                epsilon,
            )
        }
        "matmul" | "linear" => {
            let x = random_tensor(r, &[b, s, k]);
            let wt = random_tensor(r, &[k, n]);
            let bias = random_tensor(r, &[n]);
            let w = random_tensor(r, &[b, s, n]);
            if kernel == "matmul" {
                finite_diff_check(
                    |g, v| {
                        let o = g.matmul(v[0], v[1])?;
                        project(g, o, &w)
                    },
                    &[x, wt],
                    epsilon,
                )
            } else {
                finite_diff_check(
                    |g, v| {
                        let o = g.linear(v[0], v[1], Some(v[2]))?;
                        project(g, o, &w)
                    },
                    &[x, wt, bias],
                    epsilon,
                )
            }
        }
        "embedding" => {
            let table = random_tensor(r, &[vocab, d]);
            let ids: Vec<usize> = (0..b * s).map(|_| r.random_range(0..vocab)).collect();
            let w = random_tensor(r, &[b, s, d]);
            finite_diff_check(
                |g, v| {
                    let o = g.embedding(v[0], &ids, &[b, s])?;
                    project(g, o, &w)
                },
                &[table],
                epsilon,
            )
        }
        "rope" | "attention" => {
            let width = heads * head_dim;
            let half = head_dim / 2;
            let q = random_tensor(r, &[b, s, width]);
            let kk = random_tensor(r, &[b, s, width]);
            let vv = random_tensor(r, &[b, s, width]);
            let w = random_tensor(r, &[b, s, width]);
            let angles: Vec<f64> = (0..s * half).map(|_| r.random_range(-3.0..3.0)).collect();
            let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
            let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
            if kernel == "rope" {
                finite_diff_check(
                    |g, v| {
                        let o = g.rope(v[0], heads, &cos, &sin)?;
                        project(g, o, &w)
                    },
                    &[q],
                    epsilon,
                )
            } else {
                finite_diff_check(
                    |g, v| {
                        let o = g.attention(v[0], v[1], v[2], heads)?;
                        project(g, o, &w)
                    },
                    &[q, kk, vv],
                    epsilon,
                )
            }
        }
        "concat" => {
            let x = random_tensor(r, &[b, s, d]);
            let y = random_tensor(r, &[b, s, k]);
            let w = random_tensor(r, &[b, s, d + k]);
            finite_diff_check(
                |g, v| {
                    let o = g.concat(&[v[0], v[1]])?;
                    project(g, o, &w)
                },
                &[x, y],
                epsilon,
            )
        }
        "select_seq" => {
            let x = random_tensor(r, &[b, s, d]);
            let index = r.random_range(0..s);
            let w = random_tensor(r, &[b, d]);
            finite_diff_check(
                |g, v| {
                    let o = g.select_seq(v[0], index)?;
                    project(g, o, &w)
                },
                &[x],
                epsilon,
            )
        }
        "l2_norm" => {
            let x = random_tensor(r, &[b, s, d]);
            let w = random_tensor(r, &[b, s]);
            finite_diff_check(
                |g, v| {
                    let o = g.l2_norm(v[0])?;
                    project(g, o, &w)
                },
                &[x],
                epsilon,
            )
        }
        "cross_entropy" => {
            let logits = random_tensor(r, &[b, s, vocab]);
            let mut targets: Vec<usize> = (0..b * s).map(|_| r.random_range(0..vocab)).collect();
            // keep one position ignored when there is more than one
            if targets.len() > 1 {
                targets[0] = usize::MAX;
            }
            finite_diff_check(
                |g, v| g.cross_entropy(v[0], &targets, Some(usize::MAX)),
                &[logits],
                epsilon,
            )
        }
        "bce_with_logits" => {
            let mut logits = random_tensor(r, &[b, 2]);
            logits.data_mut().iter_mut().for_each(|x| *x *= 3.0);
            let t: Vec<f64> = (0..b * 2).map(|_| r.random_range(0.0..=1.0)).collect();
            let targets = Tensor::new(vec![b, 2], t)?;
            finite_diff_check(|g, v| g.bce_with_logits(v[0], &targets), &[logits], epsilon)
        }
        other => Err(TensorError::InvalidArgument {
            kernel: "gradcheck",
            reason: format!("unknown kernel {other}"),
        }),
    }
}

/// Runs [`check_kernel`] for every registered kernel over `seeds`.
pub fn kernel_suite(seeds: impl Iterator<Item = u64> + Clone, epsilon: f64) -> Result<Vec<KernelCheck>> {
    KERNELS
        .iter()
        .map(|&kernel| {
            let mut worst = 0.0f64;
            let mut cases = 0;
            for seed in seeds.clone() {
                worst = worst.max(check_kernel(kernel, seed, epsilon)?);
                cases += 1;
            }
            Ok(KernelCheck {
                kernel,
                max_relative_error: worst,
                cases,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::scalar(1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]);
        assert_eq!(
            finite_diff_check(f, &[x.clone()], 0.0),
            Err(TensorError::InvalidEpsilon(0.0))
        );
        assert!(finite_diff_check(f, &[x], -1e-5).is_err());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let err = finite_diff_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_layer_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[4, 5]);
        let w = random_tensor(&mut rng, &[5, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let err = finite_diff_check(
            |g, v| {
                let o = g.linear(v[0], v[1], Some(v[2]))?;
                let o = g.mul(o, o)?;
                g.sum(o)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // detach hides the dependency from backward but not from the
        // finite differences, so the check must report a large error
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let d = g.detach(v[0]);
                let p = g.mul(d, v[0])?;
                g.sum(p)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}

//! Central finite-difference verification of every differentiable op.
//!
//! Checks run in 64-bit. Each case builds a scalar loss from a set of leaf
//! tensors; the harness compares reverse-mode gradients against central
//! differences coordinate by coordinate.

use super::autodiff::{Graph, NnError, Var};
use super::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One named gradient-check case over fixed input tensors.
pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError> + Send + Sync>,
}

/// Relative error used throughout: |a − n| / max(1, |a|, |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Maximum pairwise [`rel_err`] over two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

fn forward_value(case: &GradCheckCase, inputs: &[Tensor<f64>]) -> Result<f64, NnError> {
    let mut g = Graph::<f64>::checked();
    let vars: Vec<Var> =
        inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
    let loss = (case.build)(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Run one case: reverse-mode gradients vs central differences with step `h`.
/// Returns the max relative error over every input coordinate.
pub fn grad_check_case(case: &GradCheckCase, h: f64) -> Result<f64, NnError> {
    let mut g = Graph::<f64>::checked();
    let vars: Vec<Var> =
        case.inputs.iter().map(|t| g.param(t.clone())).collect::<Result<_, _>>()?;
    let loss = (case.build)(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).expect("param gradient").clone()).collect();

    let mut worst: f64 = 0.0;
    let mut inputs = case.inputs.clone();
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ci];
            inputs[ti].data_mut()[ci] = orig + h;
            let plus = forward_value(case, &inputs)?;
            inputs[ti].data_mut()[ci] = orig - h;
            let minus = forward_value(case, &inputs)?;
            inputs[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti].data()[ci], numeric));
        }
    }
    Ok(worst)
}

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

/// Random tensor with coordinates kept away from zero, for kinked ops.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(-2.0..2.0);
        if v.abs() < 0.05 {
            v + 0.1 * v.signum().max(0.0).mul_add(2.0, -1.0)
        } else {
            v
        }
    })
}

fn case(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError> + Send + Sync + 'static,
) -> GradCheckCase {
    GradCheckCase { name: name.to_string(), inputs, build: Box::new(build) }
}

/// Pin the loss to a fixed random target so upstream gradients are
/// non-uniform; a plain `sum` would hide many transposition bugs.
fn mse_against(
    g: &mut Graph<f64>,
    out: Var,
    rng_seed: u64,
) -> Result<Var, NnError> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let target = g.constant(rand_tensor(&mut rng, &shape))?;
    g.mse(out, target)
}

/// The core-op gradient-check registry; composites from the model layers are
/// appended by `crate::gradcheck_registry`.
pub fn core_cases(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let t = seed ^ 0x9e37_79b9_7f4a_7c15;

    cases.push(case(
        "matmul",
        vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])],
        move |g, v| {
            let c = g.matmul(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "bmm",
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 4, 2])],
        move |g, v| {
            let c = g.bmm(v[0], v[1], false)?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "bmm_transposed",
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 5, 4])],
        move |g, v| {
            let c = g.bmm(v[0], v[1], true)?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "matmul_lshared",
        vec![rand_tensor(&mut rng, &[3, 3]), rand_tensor(&mut rng, &[4, 3, 2])],
        move |g, v| {
            let c = g.matmul_lshared(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "add",
        vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
        move |g, v| {
            let c = g.add(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "add_broadcast",
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4])],
        move |g, v| {
            let c = g.add(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "sub",
        vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
        move |g, v| {
            let c = g.sub(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "mul",
        vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
        move |g, v| {
            let c = g.mul(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case(
        "mul_broadcast",
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[3, 4])],
        move |g, v| {
            let c = g.mul(v[0], v[1])?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case("scale", vec![rand_tensor(&mut rng, &[5])], move |g, v| {
        let c = g.scale(v[0], -1.7)?;
        mse_against(g, c, t)
    }));
    cases.push(case(
        "concat",
        vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 2])],
        move |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case("slice", vec![rand_tensor(&mut rng, &[3, 5])], move |g, v| {
        let c = g.slice(v[0], 1, 1, 4)?;
        mse_against(g, c, t)
    }));
    cases.push(case("permute", vec![rand_tensor(&mut rng, &[2, 3, 4])], move |g, v| {
        let c = g.permute(v[0], &[2, 0, 1])?;
        mse_against(g, c, t)
    }));
    cases.push(case("transpose", vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        let c = g.transpose(v[0])?;
        mse_against(g, c, t)
    }));
    cases.push(case("reshape", vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        let c = g.reshape(v[0], &[2, 6])?;
        mse_against(g, c, t)
    }));
    cases.push(case("relu", vec![rand_tensor_off_zero(&mut rng, &[3, 4])], move |g, v| {
        let c = g.relu(v[0])?;
        mse_against(g, c, t)
    }));
    cases.push(case("sigmoid", vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        let c = g.sigmoid(v[0])?;
        mse_against(g, c, t)
    }));
    cases.push(case("tanh", vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        let c = g.tanh(v[0])?;
        mse_against(g, c, t)
    }));
    cases.push(case("softmax_axis1", vec![rand_tensor(&mut rng, &[3, 5])], move |g, v| {
        let c = g.softmax(v[0], 1)?;
        mse_against(g, c, t)
    }));
    cases.push(case("softmax_axis0", vec![rand_tensor(&mut rng, &[3, 5])], move |g, v| {
        let c = g.softmax(v[0], 0)?;
        mse_against(g, c, t)
    }));
    cases.push(case(
        "layer_norm",
        vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ],
        move |g, v| {
            let c = g.layer_norm(v[0], v[1], v[2], 1e-8)?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case("dropout", vec![rand_tensor(&mut rng, &[4, 5])], move |g, v| {
        let c = g.dropout(v[0], 0.3, 1234)?;
        mse_against(g, c, t)
    }));
    cases.push(case("embedding_lookup", vec![rand_tensor(&mut rng, &[5, 3])], move |g, v| {
        let c = g.embedding_lookup(v[0], &[4, 0, 2, 2])?;
        mse_against(g, c, t)
    }));
    cases.push(case(
        "mse",
        vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
        |g, v| g.mse(v[0], v[1]),
    ));
    cases.push(case("sum", vec![rand_tensor(&mut rng, &[3, 4])], |g, v| g.sum(v[0])));
    cases.push(case("mean_axis", vec![rand_tensor(&mut rng, &[2, 4, 3])], move |g, v| {
        let c = g.mean_axis(v[0], 1)?;
        mse_against(g, c, t)
    }));
    cases.push(case("gather_rows", vec![rand_tensor(&mut rng, &[2, 4, 3])], move |g, v| {
        let c = g.gather_rows(v[0], &[3, 1, 0, 2], 2)?;
        mse_against(g, c, t)
    }));
    cases.push(case(
        "scatter_rows",
        vec![rand_tensor(&mut rng, &[2, 4, 3]), rand_tensor(&mut rng, &[2, 2, 3])],
        move |g, v| {
            let c = g.scatter_rows(v[0], v[1], &[3, 1, 0, 2], 2)?;
            mse_against(g, c, t)
        },
    ));
    cases.push(case("broadcast_axis1", vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        let c = g.broadcast_axis1(v[0], 5)?;
        mse_against(g, c, t)
    }));
    cases.push(case("max_pool_axis1", vec![rand_tensor(&mut rng, &[2, 7, 3])], move |g, v| {
        let c = g.max_pool_axis1(v[0])?;
        mse_against(g, c, t)
    }));
    cases.push(case(
        "sigmoid_chain",
        vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[3, 3])],
        move |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let s = g.sigmoid(h)?;
            let s2 = g.tanh(s)?;
            mse_against(g, s2, t)
        },
    ));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = case(
            "linear",
            vec![rand_tensor(&mut rng, &[3, 4])],
            |g, v| {
                let s = g.scale(v[0], 2.5)?;
                g.sum(s)
            },
        );
        let err = grad_check_case(&c, DEFAULT_H).unwrap();
        assert!(err < 1e-10, "linear map gradcheck error {err}");
    }

    #[test]
    fn sigmoid_chain_within_tolerance() {
        let cases = core_cases(11);
        let chain = cases.iter().find(|c| c.name == "sigmoid_chain").unwrap();
        let err = grad_check_case(chain, DEFAULT_H).unwrap();
        assert!(err < DEFAULT_TOLERANCE, "sigmoid chain error {err}");
    }

    #[test]
    fn broken_gradient_detected() {
        // Doubling the analytic gradient must produce a relative error near
        // 0.5 and fail the tolerance.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![2], vec![3.0, -4.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        let broken: Vec<f64> = analytic.iter().map(|v| v * 2.0).collect();
        let err = max_rel_err(&broken, &analytic);
        assert!((err - 0.5).abs() < 1e-9, "expected ~0.5, got {err}");
        assert!(err > DEFAULT_TOLERANCE);
    }

    #[test]
    fn all_core_cases_pass_across_seeds() {
        for seed in 0..3u64 {
            for c in core_cases(seed) {
                let err = grad_check_case(&c, DEFAULT_H).unwrap();
                assert!(
                    err < DEFAULT_TOLERANCE,
                    "op {} failed gradcheck at seed {seed}: {err}",
                    c.name
                );
            }
        }
    }
}

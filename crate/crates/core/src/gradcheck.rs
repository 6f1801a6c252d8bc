//! Finite-difference verification of backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Set when the check could not run cleanly (non-finite values).
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to round-off are compared absolutely.
    pub abs_floor: f64,
    /// Compare at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Corrupts the backward pass of this op in the analytic graph only.
    pub corrupt: Option<&'static str>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
            corrupt: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the backward gradient of the scalar function `f` with respect to
/// every input against central differences `(f(x+eps) − f(x−eps)) / 2eps`.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(cfg.eps > 0.0 && cfg.eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference eps must lie in (0, 1e-2], got {}",
            cfg.eps
        )));
    }
    let mut report = GradReport {
        op_name: name.to_string(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        passed: false,
        checked: 0,
        failure: None,
    };

    let mut g = Graph::new();
    if let Some(op) = cfg.corrupt {
        g.corrupt_backward(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    if !g.value(out).item().is_finite() {
        report.failure = Some("non-finite function value at the base point".into());
        return Ok(report);
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shifted = inputs.to_vec();
    for (input_idx, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < input.len() => {
                let mut c = rand::seq::index::sample(&mut rng, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for coord in coords {
            let x0 = input.data()[coord];
            shifted[input_idx].data_mut()[coord] = x0 + cfg.eps;
            let plus = evaluate(&f, &shifted)?;
            shifted[input_idx].data_mut()[coord] = x0 - cfg.eps;
            let minus = evaluate(&f, &shifted)?;
            shifted[input_idx].data_mut()[coord] = x0;

            let a = analytic[input_idx].data()[coord];
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                report.failure = Some(format!("non-finite value at input {input_idx}, coordinate {coord}"));
                return Ok(report);
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}

/// Differentiable ops covered by [`run_suite`], plus the composite
/// convolution and the full model loss.
pub const SUITE_CASES: &[&str] = &[
    "add", "sub", "mul", "scale", "relu", "gelu", "abs", "matmul", "transpose", "reshape", "softmax_rows",
    "layernorm", "im2col3x3", "conv2d_3x3", "avg_pool2d", "concat", "slice", "sum", "mean", MODEL_CASE,
];

/// Name of the full tiny-model gated loss case.
pub const MODEL_CASE: &str = "tiny_model_loss";

/// Uniform values bounded away from zero, so kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Reduces `out` to a scalar through fixed random weights, so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(Tensor::uniform(g.shape(out), 1.0, &mut rng));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn op_inputs(op: &str, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, rng);
    Ok(match op {
        "add" => vec![u(&[3, 4], rng), u(&[4], rng)],
        "sub" | "mul" => vec![u(&[3, 4], rng), u(&[3, 4], rng)],
        "relu" | "abs" => vec![away_from_zero(&[3, 4], rng)],
        "scale" | "gelu" | "transpose" | "reshape" | "sum" | "mean" => vec![u(&[3, 4], rng)],
        "matmul" => vec![u(&[3, 4], rng), u(&[4, 2], rng)],
        "softmax_rows" => vec![u(&[3, 5], rng)],
        "layernorm" => vec![u(&[3, 6], rng), u(&[6], rng), u(&[6], rng)],
        "im2col3x3" => vec![u(&[4, 3, 2], rng)],
        "conv2d_3x3" => vec![u(&[4, 3, 2], rng), u(&[18, 3], rng), u(&[3], rng)],
        "avg_pool2d" => vec![u(&[5, 5, 2], rng)],
        "concat" => vec![u(&[2, 3], rng), u(&[2, 2], rng)],
        "slice" => vec![u(&[4, 5], rng)],
        _ => return Err(Error::InvalidArgument(format!("no gradient check case for op {op}"))),
    })
}

fn op_forward(op: &str, g: &mut Graph, x: &[Var]) -> Result<Var> {
    Ok(match op {
        "add" => g.add(x[0], x[1])?,
        "sub" => g.sub(x[0], x[1])?,
        "mul" => g.mul(x[0], x[1])?,
        "scale" => g.scale(x[0], -1.7),
        "relu" => g.relu(x[0]),
        "gelu" => g.gelu(x[0]),
        "abs" => g.abs(x[0]),
        "matmul" => g.matmul(x[0], x[1])?,
        "transpose" => g.transpose(x[0])?,
        "reshape" => g.reshape(x[0], &[2, 6])?,
        "softmax_rows" => g.softmax_rows(x[0], 1.7)?,
        "layernorm" => g.layernorm(x[0], x[1], x[2], 1e-5)?,
        "im2col3x3" => g.im2col3x3(x[0])?,
        "conv2d_3x3" => g.conv2d_3x3(x[0], x[1], x[2])?,
        "avg_pool2d" => g.avg_pool2d(x[0], 3, 2)?,
        "concat" => g.concat(&[x[0], x[1]], 1)?,
        "slice" => g.slice(x[0], 1, 1, 3)?,
        "sum" => g.sum(x[0]),
        "mean" => g.mean(x[0]),
        _ => return Err(Error::InvalidArgument(format!("no gradient check case for op {op}"))),
    })
}

/// Checks one op on random inputs drawn from `cfg.seed`.
pub fn check_op(op: &'static str, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs = op_inputs(op, &mut rng)?;
    let seed = cfg.seed;
    grad_check(
        op,
        move |g, x| {
            let out = op_forward(op, g, x)?;
            weighted_sum(g, out, seed)
        },
        &inputs,
        cfg,
    )
}

/// Checks the gated training loss of a randomly initialised tiny model on a
/// synthetic scene, against every parameter tensor. Unless `cfg` limits it,
/// two coordinates per tensor are compared.
pub fn check_model(cfg: &GradCheckConfig) -> Result<GradReport> {
    use crate::config::ModelConfig;
    use crate::model::TasselModel;
    use crate::synth::{synth_scene, SynthConfig};
    use crate::train::{prepare, sample_loss_with, TrainConfig};

    let model_cfg = ModelConfig::tiny();
    let model = TasselModel::new(model_cfg.clone(), cfg.seed)?;
    let scene = synth_scene(
        &SynthConfig {
            width: model_cfg.image_size,
            height: model_cfg.image_size,
            seed: cfg.seed,
            ..SynthConfig::default()
        },
        0,
    )?;
    let (sample, exemplars) = prepare(&scene, &model_cfg)?;
    let train_cfg = TrainConfig::default();
    let inputs = model.params().tensors().to_vec();
    let cfg = GradCheckConfig {
        max_coords_per_input: cfg.max_coords_per_input.or(Some(2)),
        ..cfg.clone()
    };
    grad_check(
        MODEL_CASE,
        |g, params| {
            let (loss, _) = sample_loss_with(
                &model,
                g,
                params.to_vec(),
                &train_cfg,
                &sample.raster,
                &sample.ann.points,
                &exemplars,
            )?;
            Ok(loss)
        },
        &inputs,
        &cfg,
    )
}

/// One case over several seeds, keeping the worst errors.
pub fn check_case(case: &'static str, cfg: &GradCheckConfig, seeds: &[u64]) -> Result<GradReport> {
    let mut worst: Option<GradReport> = None;
    for &seed in seeds {
        let cfg = GradCheckConfig { seed, ..cfg.clone() };
        let r = if case == MODEL_CASE { check_model(&cfg)? } else { check_op(case, &cfg)? };
        worst = Some(match worst {
            None => r,
            Some(w) => GradReport {
                op_name: w.op_name,
                max_abs_error: w.max_abs_error.max(r.max_abs_error),
                max_rel_error: w.max_rel_error.max(r.max_rel_error),
                passed: w.passed && r.passed,
                checked: w.checked + r.checked,
                failure: w.failure.or(r.failure.map(|f| format!("seed {seed}: {f}"))),
            },
        });
    }
    worst.ok_or_else(|| Error::InvalidArgument("gradient check needs at least one seed".into()))
}

/// Every case in [`SUITE_CASES`], each over `seeds`.
pub fn run_suite(cfg: &GradCheckConfig, seeds: &[u64]) -> Result<Vec<GradReport>> {
    SUITE_CASES.iter().map(|&c| check_case(c, cfg, seeds)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(g: &mut Graph, x: &[Var]) -> Result<Var> {
        let sq = g.mul(x[0], x[0])?;
        Ok(g.sum(sq))
    }

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[4, 3], 2.0, &mut rng);
        let report = grad_check("sum_sq", sum_of_squares, &[x], &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform(&[5], 2.0, &mut rng);
        let f = |g: &mut Graph, x: &[Var]| {
            g.corrupt_backward("mul");
            sum_of_squares(g, x)
        };
        let report = grad_check("sum_sq", f, &[x], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.01);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let report = grad_check("sum_sq", sum_of_squares, &[x], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed);
        assert!(report.failure.is_some());
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        let cfg = GradCheckConfig {
            eps: 0.1,
            ..Default::default()
        };
        assert!(grad_check("sum_sq", sum_of_squares, &[x], &cfg).is_err());
    }

    #[test]
    fn every_op_passes() {
        let cfg = GradCheckConfig {
            tol: 1e-4,
            ..Default::default()
        };
        for &case in SUITE_CASES.iter().filter(|&&c| c != MODEL_CASE) {
            let r = check_case(case, &cfg, &[0, 1]).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn injected_bug_names_the_op() {
        let cfg = GradCheckConfig {
            tol: 1e-4,
            corrupt: Some("softmax_rows"),
            ..Default::default()
        };
        assert!(!check_op("softmax_rows", &cfg).unwrap().passed);
        assert!(check_op("matmul", &cfg).unwrap().passed);
    }
}

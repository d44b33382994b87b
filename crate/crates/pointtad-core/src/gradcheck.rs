//! Finite-difference gradient checking for every registered graph op.
//!
//! The check is independent of the backward pass by construction: it
//! re-evaluates the forward computation with perturbed inputs and compares
//! the central difference against the analytic gradient. The same machinery
//! backs the `gradcheck` CLI subcommand and the test suites.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default op-level relative-error tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A collection of check outcomes with a combined verdict.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn push(&mut self, outcome: CheckOutcome) {
        self.checks.push(outcome);
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-4);
    (a - n).abs() / denom
}

/// Checks the gradient of a scalar-valued function of several tensors.
///
/// `build` must construct the full forward computation (including any fixed
/// projection used to scalarize a tensor output) from the provided leaves
/// and return the scalar loss node. It is re-invoked for every perturbed
/// evaluation, so it must be deterministic given the leaf values.
pub fn check_scalar_fn(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    step: f64,
    tolerance: f64,
) -> CheckOutcome {
    check_scalar_fn_corrupted(name, inputs, build, step, tolerance, 0.0)
}

/// Same as [`check_scalar_fn`] but adds `corruption` to the first analytic
/// gradient entry; used as a negative control for the harness itself.
pub fn check_scalar_fn_corrupted(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    step: f64,
    tolerance: f64,
    corruption: f64,
) -> CheckOutcome {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars).expect("gradcheck forward failed");
        g.value(loss).item().expect("gradcheck loss must be scalar")
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).expect("gradcheck forward failed");
    g.backward(loss).expect("gradcheck backward failed");
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    if corruption != 0.0 {
        if let Some(first) = analytic.first_mut().and_then(|g0| g0.first_mut()) {
            *first += corruption;
        }
    }

    // Central differences.
    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = eval(&work);
            work[ti].data_mut()[e] = orig - step;
            let minus = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[ti][e], numeric));
        }
    }

    CheckOutcome {
        name: String::from(name),
        max_rel_err: max_err,
        tolerance,
        passed: max_err < tolerance,
    }
}

fn random_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Pushes values away from zero so kinked ops (relu, abs) are checked at
/// differentiable points.
fn away_from_zero(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

fn away_from_value(t: &mut Tensor, value: f64, margin: f64) {
    for v in t.data_mut() {
        if (*v - value).abs() < margin {
            *v = value + if *v >= value { margin } else { -margin };
        }
    }
}

/// Guarantees all elements pairwise distinct (for argmin/argmax stability
/// under the finite-difference step).
fn make_distinct(t: &mut Tensor) {
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-3;
    }
}

/// Scalarizes a tensor output with a fixed random projection so every
/// output element participates in the checked loss.
fn project(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var, TensorError> {
    let flat_proj = Tensor::from_vec(vec![proj.numel()], proj.data().to_vec())?;
    let p = g.constant(flat_proj);
    let flat_out = g.reshape(out, &[proj.numel()])?;
    let prod = g.mul(flat_out, p)?;
    Ok(g.sum(prod))
}

fn worst_of(report: &mut CheckReport, name: &str, errs: &[f64]) {
    let worst = errs.iter().cloned().fold(0.0f64, f64::max);
    report.push(CheckOutcome {
        name: String::from(name),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        passed: worst < OP_TOLERANCE,
    });
}

/// Runs the finite-difference check over every registered graph operation,
/// each on at least three input shapes. Deterministic given the seed.
pub fn standard_op_suite(seed: u64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    let shapes3: [&[usize]; 3] = [&[5], &[2, 3], &[2, 2, 3]];

    // Elementwise binary ops.
    for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3)] {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let a = random_tensor(&mut rng, shape);
            let mut b = random_tensor(&mut rng, shape);
            if which == 3 {
                away_from_zero(&mut b, 0.5);
            }
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                name,
                &[a, b],
                &|g, vars| {
                    let r = match which {
                        0 => g.add(vars[0], vars[1])?,
                        1 => g.sub(vars[0], vars[1])?,
                        2 => g.mul(vars[0], vars[1])?,
                        _ => g.div(vars[0], vars[1])?,
                    };
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, name, &errs);
    }

    // Unary elementwise ops.
    for name in ["neg", "scale", "offset", "relu", "abs", "clamp"] {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let mut x = random_tensor(&mut rng, shape);
            match name {
                "relu" | "abs" => away_from_zero(&mut x, 0.2),
                "clamp" => {
                    // cover both the pass-through and the saturated regime
                    for v in x.data_mut() {
                        *v *= 2.0;
                    }
                    away_from_value(&mut x, -1.0, 0.1);
                    away_from_value(&mut x, 1.0, 0.1);
                }
                _ => {}
            }
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                name,
                &[x],
                &|g, vars| {
                    let r = match name {
                        "neg" => g.neg(vars[0]),
                        "scale" => g.scale(vars[0], -1.7),
                        "offset" => g.offset(vars[0], 0.9),
                        "relu" => g.relu(vars[0]),
                        "abs" => g.abs(vars[0]),
                        _ => g.clamp(vars[0], -1.0, 1.0),
                    };
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, name, &errs);
    }

    // Matmul and transpose.
    {
        let mut errs = Vec::new();
        for (m, k, n) in [(2usize, 3usize, 2usize), (1, 4, 1), (3, 3, 3)] {
            let a = random_tensor(&mut rng, &[m, k]);
            let b = random_tensor(&mut rng, &[k, n]);
            let proj = random_tensor(&mut rng, &[m, n]);
            let out = check_scalar_fn(
                "matmul",
                &[a, b],
                &|g, vars| {
                    let r = g.matmul(vars[0], vars[1])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "matmul", &errs);

        let mut errs = Vec::new();
        for shape in [[2usize, 3usize], [4, 1], [3, 3]] {
            let x = random_tensor(&mut rng, &shape);
            let proj = random_tensor(&mut rng, &[shape[1], shape[0]]);
            let out = check_scalar_fn(
                "transpose",
                &[x],
                &|g, vars| {
                    let r = g.transpose(vars[0])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "transpose", &errs);
    }

    // Softmax family over several axes.
    for name in ["softmax", "log_softmax"] {
        let cases: [(&[usize], usize); 4] =
            [(&[5], 0), (&[3, 4], 1), (&[3, 4], 0), (&[2, 3, 2], 2)];
        let mut errs = Vec::new();
        for (shape, axis) in cases {
            let x = random_tensor(&mut rng, shape);
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                name,
                &[x],
                &|g, vars| {
                    let r = if name == "softmax" {
                        g.softmax(vars[0], axis)?
                    } else {
                        g.log_softmax(vars[0], axis)?
                    };
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, name, &errs);
    }

    // LayerNorm with gain and bias.
    {
        let cases: [(&[usize], usize); 3] = [(&[6], 0), (&[3, 5], 1), (&[2, 3, 4], 2)];
        let mut errs = Vec::new();
        for (shape, axis) in cases {
            let x = random_tensor(&mut rng, shape);
            let gain = random_tensor(&mut rng, &[shape[axis]]);
            let bias = random_tensor(&mut rng, &[shape[axis]]);
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                "layer_norm",
                &[x, gain, bias],
                &|g, vars| {
                    let r = g.layer_norm(vars[0], vars[1], vars[2], axis, 1e-5)?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "layer_norm", &errs);
    }

    // Concat.
    {
        let cases: [(&[usize], &[usize], usize); 3] =
            [(&[2, 3], &[2, 2], 1), (&[2], &[3], 0), (&[2, 2, 2], &[2, 1, 2], 1)];
        let mut errs = Vec::new();
        for (sa, sb, axis) in cases {
            let a = random_tensor(&mut rng, sa);
            let b = random_tensor(&mut rng, sb);
            let n = a.numel() + b.numel();
            let proj = random_tensor(&mut rng, &[n]);
            let out = check_scalar_fn(
                "concat",
                &[a, b],
                &|g, vars| {
                    let r = g.concat(&[vars[0], vars[1]], axis)?;
                    let flat = g.reshape(r, &[n])?;
                    project(g, flat, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "concat", &errs);
    }

    // Gather (with duplicate indices) and reshape.
    {
        let cases: [(&[usize], &[usize]); 3] =
            [(&[6], &[0, 3, 3, 5]), (&[2, 3], &[1, 4, 2]), (&[8], &[7, 0, 7])];
        let mut errs = Vec::new();
        for (shape, idx) in cases {
            let x = random_tensor(&mut rng, shape);
            let proj = random_tensor(&mut rng, &[idx.len()]);
            let out = check_scalar_fn(
                "gather",
                &[x],
                &|g, vars| {
                    let r = g.gather(vars[0], idx)?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "gather", &errs);

        let mut errs = Vec::new();
        for shape in shapes3 {
            let x = random_tensor(&mut rng, shape);
            let n = x.numel();
            let proj = random_tensor(&mut rng, &[n]);
            let out = check_scalar_fn(
                "reshape",
                &[x],
                &|g, vars| {
                    let r = g.reshape(vars[0], &[n])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "reshape", &errs);
    }

    // Reductions.
    for name in ["sum", "mean", "min_all", "max_all"] {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let mut x = random_tensor(&mut rng, shape);
            if name == "min_all" || name == "max_all" {
                make_distinct(&mut x);
            }
            let out = check_scalar_fn(
                name,
                &[x],
                &|g, vars| {
                    Ok(match name {
                        "sum" => g.sum(vars[0]),
                        "mean" => g.mean(vars[0]),
                        "min_all" => g.min_all(vars[0])?,
                        _ => g.max_all(vars[0])?,
                    })
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, name, &errs);
    }

    // Binary min/max with separated operands.
    for name in ["min2", "max2"] {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let a = random_tensor(&mut rng, shape);
            let mut b = random_tensor(&mut rng, shape);
            for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
                if (*bv - av).abs() < 0.1 {
                    *bv = av + 0.15;
                }
            }
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                name,
                &[a, b],
                &|g, vars| {
                    let r = if name == "min2" {
                        g.min2(vars[0], vars[1])?
                    } else {
                        g.max2(vars[0], vars[1])?
                    };
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, name, &errs);
    }

    // Broadcast helpers.
    {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let x = random_tensor(&mut rng, shape);
            let s = random_tensor(&mut rng, &[]);
            let proj = random_tensor(&mut rng, shape);
            let out = check_scalar_fn(
                "mul_scalar",
                &[x, s],
                &|g, vars| {
                    let r = g.mul_scalar(vars[0], vars[1])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "mul_scalar", &errs);

        let mut errs = Vec::new();
        for (m, n) in [(2usize, 3usize), (3, 1), (4, 2)] {
            let x = random_tensor(&mut rng, &[m, n]);
            let row = random_tensor(&mut rng, &[n]);
            let proj = random_tensor(&mut rng, &[m, n]);
            let out = check_scalar_fn(
                "add_row",
                &[x, row],
                &|g, vars| {
                    let r = g.add_row(vars[0], vars[1])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "add_row", &errs);
    }

    // Interpolation: interior fractional, near-lattice, and clamped samples.
    {
        let mut errs = Vec::new();
        for t_val in [1.45, 2.7, 0.35, -2.0, 7.5] {
            let x = random_tensor(&mut rng, &[5, 3]);
            let t = Tensor::scalar(t_val);
            let proj = random_tensor(&mut rng, &[3]);
            let out = check_scalar_fn(
                "bilinear_interp_1d",
                &[x, t],
                &|g, vars| {
                    let r = g.bilinear_interp_1d(vars[0], vars[1])?;
                    project(g, r, &proj)
                },
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "bilinear_interp_1d", &errs);
    }

    // Fused binary cross-entropy.
    {
        let mut errs = Vec::new();
        for shape in shapes3 {
            let z = random_tensor(&mut rng, shape);
            let mut y = random_tensor(&mut rng, shape);
            for v in y.data_mut() {
                *v = (*v + 1.5) / 3.0; // into [0, 1]
            }
            let out = check_scalar_fn(
                "bce_with_logits_mean",
                &[z],
                &|g, vars| g.bce_with_logits_mean(vars[0], &y),
                FD_STEP,
                OP_TOLERANCE,
            );
            errs.push(out.max_rel_err);
        }
        worst_of(&mut report, "bce_with_logits_mean", &errs);
    }

    report
}

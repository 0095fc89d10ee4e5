//! Central finite-difference verification of recorded backward rules.
//!
//! [`check_gradients`] compares the tape's analytic gradients of a scalar
//! function against `(f(x+ε) − f(x−ε)) / 2ε`, entry by entry. The error
//! measure is relative with a small floor so that near-zero gradients are
//! compared on the scale of the finite-difference noise instead of blowing
//! up the quotient.

use super::{Tape, TensorError, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default perturbation.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default acceptance threshold on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-3;

/// One perturbable input: values plus `(rows, cols)`.
pub type Input = (Vec<f64>, (usize, usize));

/// Scalar-producing graph builder. Invoked on a fresh tape per evaluation;
/// the slice holds the leaves for the perturbable inputs, in order.
pub type BuildFn<'a> = dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError> + 'a;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub max_err: f64,
    pub checks: usize,
}

impl CheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_err < tol
    }
}

fn eval(
    build: &mut BuildFn,
    inputs: &[Input],
) -> Result<(Tape, Vec<TensorId>, TensorId), TensorError> {
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|(v, (r, c))| tape.leaf(v.clone(), *r, *c))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut tape, &ids)?;
    Ok((tape, ids, loss))
}

/// Compare analytic and finite-difference gradients of `build` with respect
/// to every entry of every input. `build` must be deterministic: it is
/// re-invoked on a fresh tape for each perturbed evaluation.
pub fn check_gradients(
    build: &mut BuildFn,
    inputs: &[Input],
    eps: f64,
) -> Result<CheckOutcome, TensorError> {
    let (mut tape, ids, loss) = eval(build, inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].0.len() {
            let mut plus = inputs.to_vec();
            plus[ti].0[j] += eps;
            let (t, _, l) = eval(build, &plus)?;
            let fp = t.scalar_value(l)?;

            let mut minus = inputs.to_vec();
            minus[ti].0[j] -= eps;
            let (t, _, l) = eval(build, &minus)?;
            let fm = t.scalar_value(l)?;

            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            max_err = max_err.max(err);
            checks += 1;
        }
    }
    Ok(CheckOutcome { max_err, checks })
}

/// Outcome of checking one op over many random shapes.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub checks: usize,
    pub max_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_err < DEFAULT_TOL
    }
}

type Case = (
    Vec<Input>,
    Box<dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>>,
);

fn run_cases(
    name: &'static str,
    cases: usize,
    rng: &mut ChaCha8Rng,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> Case,
) -> OpReport {
    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..cases {
        let (inputs, mut build) = gen(rng);
        let out = check_gradients(&mut *build, &inputs, DEFAULT_EPS)
            .expect("op suite case must evaluate");
        max_err = max_err.max(out.max_err);
        checks += out.checks;
    }
    OpReport {
        op: name,
        cases,
        checks,
        max_err,
    }
}

fn rand_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked or singular ops.
fn rand_vals_off_zero(rng: &mut ChaCha8Rng, n: usize, min_abs: f64, max_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..max_abs)
        })
        .collect()
}

/// Reduce an op output to a scalar through a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn readout(tape: &mut Tape, x: TensorId, w: &[f64]) -> Result<TensorId, TensorError> {
    let (r, c) = tape.shape(x);
    let wt = tape.leaf(w.to_vec(), r, c)?;
    let p = tape.mul(x, wt)?;
    tape.sum_all(p)
}

/// Run the finite-difference suite over every registered op, `cases` random
/// small shapes per op.
pub fn run_op_suite(seed: u64, cases: usize) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    reports.push(run_cases("matmul", cases, &mut rng, |rng| {
        let (r, k, c) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let a = (rand_vals(rng, r * k, -2.0, 2.0), (r, k));
        let b = (rand_vals(rng, k * c, -2.0, 2.0), (k, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.matmul(ids[0], ids[1])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("matmul_t", cases, &mut rng, |rng| {
        let (r, k, s) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let a = (rand_vals(rng, r * k, -2.0, 2.0), (r, k));
        let b = (rand_vals(rng, s * k, -2.0, 2.0), (s, k));
        let w = rand_vals(rng, r * s, -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.matmul_t(ids[0], ids[1])?;
                readout(t, m, &w)
            }),
        )
    }));

    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2), ("div", 3)] {
        reports.push(run_cases(name, cases, &mut rng, |rng| {
            let (r, c) = (rand_dim(rng), rand_dim(rng));
            let a = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
            let b = if which == 3 {
                (rand_vals_off_zero(rng, r * c, 0.5, 2.0), (r, c))
            } else {
                (rand_vals(rng, r * c, -2.0, 2.0), (r, c))
            };
            let w = rand_vals(rng, r * c, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                    let m = match which {
                        0 => t.add(ids[0], ids[1])?,
                        1 => t.sub(ids[0], ids[1])?,
                        2 => t.mul(ids[0], ids[1])?,
                        _ => t.div(ids[0], ids[1])?,
                    };
                    readout(t, m, &w)
                }),
            )
        }));
    }

    reports.push(run_cases("add_row", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let v = (rand_vals(rng, c, -2.0, 2.0), (1, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x, v],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.add_row(ids[0], ids[1])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("sub_col", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let v = (rand_vals(rng, r, -2.0, 2.0), (r, 1));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x, v],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.sub_col(ids[0], ids[1])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("scale", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let factor = rng.gen_range(-3.0..3.0);
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.scale(ids[0], factor)?;
                readout(t, m, &w)
            }),
        )
    }));

    // Kinked and singular maps keep their inputs away from the kink so the
    // finite difference stays valid.
    reports.push(run_cases("relu", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals_off_zero(rng, r * c, 0.05, 2.0), (r, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.relu(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("exp", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.exp(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("log", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, 0.2, 3.0), (r, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.log(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("clamp_min", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals_off_zero(rng, r * c, 0.05, 2.0), (r, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.clamp_min(ids[0], 0.0)?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("gather_rows", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng).max(2), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let m = rng.gen_range(1..=2 * r);
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..r)).collect();
        let w = rand_vals(rng, m * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let g = t.gather_rows(ids[0], &idx)?;
                readout(t, g, &w)
            }),
        )
    }));

    reports.push(run_cases("scatter_mean", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng).max(2), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let out_rows = rng.gen_range(1..=r + 1);
        let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..out_rows)).collect();
        let w = rand_vals(rng, out_rows * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let s = t.scatter_mean(ids[0], &idx, out_rows)?;
                readout(t, s, &w)
            }),
        )
    }));

    reports.push(run_cases("concat_rows", cases, &mut rng, |rng| {
        let c = rand_dim(rng);
        let (r1, r2) = (rand_dim(rng), rand_dim(rng));
        let a = (rand_vals(rng, r1 * c, -2.0, 2.0), (r1, c));
        let b = (rand_vals(rng, r2 * c, -2.0, 2.0), (r2, c));
        let w = rand_vals(rng, (r1 + r2) * c, -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.concat_rows(&[ids[0], ids[1]])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("concat_cols", cases, &mut rng, |rng| {
        let r = rand_dim(rng);
        let (c1, c2) = (rand_dim(rng), rand_dim(rng));
        let a = (rand_vals(rng, r * c1, -2.0, 2.0), (r, c1));
        let b = (rand_vals(rng, r * c2, -2.0, 2.0), (r, c2));
        let w = rand_vals(rng, r * (c1 + c2), -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.concat_cols(&[ids[0], ids[1]])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("l2_normalize_rows", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let mut vals = rand_vals_off_zero(rng, r * c, 0.3, 2.0);
        for i in 0..r {
            vals[i * c] += 1.0;
        }
        let x = (vals, (r, c));
        let w = rand_vals(rng, r * c, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.l2_normalize_rows(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("dot_rows", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let a = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let b = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let w = rand_vals(rng, r, -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.dot_rows(ids[0], ids[1])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("sum_rows", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let w = rand_vals(rng, r, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.sum_rows(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("sum_all", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -2.0, 2.0), (r, c));
        let w = rand_vals(rng, 1, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.sum_all(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases("log_sum_exp_rows", cases, &mut rng, |rng| {
        let (r, c) = (rand_dim(rng), rand_dim(rng));
        let x = (rand_vals(rng, r * c, -3.0, 3.0), (r, c));
        let w = rand_vals(rng, r, -1.0, 1.0);
        (
            vec![x],
            Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                let m = t.log_sum_exp_rows(ids[0])?;
                readout(t, m, &w)
            }),
        )
    }));

    reports.push(run_cases(
        "log_sum_exp_with_prior",
        cases,
        &mut rng,
        |rng| {
            let m = rand_dim(rng).max(2);
            let x = (rand_vals(rng, m, -3.0, 3.0), (1, m));
            let priors: Vec<f64> = (0..m).map(|_| rng.gen_range(1.0..50.0f64).ln()).collect();
            (
                vec![x],
                Box::new(move |t: &mut Tape, ids: &[TensorId]| {
                    t.log_sum_exp_with_prior(ids[0], &priors)
                }),
            )
        },
    ));

    reports
}

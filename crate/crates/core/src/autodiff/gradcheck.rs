//! Central-difference gradient verification in double precision.
//!
//! For every input element the analytic gradient `a` is compared with
//! `n = (f(x + h e_i) - f(x - h e_i)) / 2h` through the relative error
//! `|a - n| / max(|a|, |n|, 1e-8)`. The function under test must be
//! deterministic; a function whose value differs between two evaluations at
//! the same point is rejected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Outcome of a gradient check over one or more inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_relative_error: f64,
    /// `(input, element, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Relative error of every element, indexed by input then element.
    pub element_errors: Vec<Vec<f64>>,
}

/// Gradient checker with a fixed step size.
#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    h: f64,
    fault: Option<OpKind>,
}

impl GradChecker {
    /// `h` must lie in `[1e-6, 1e-3]`.
    pub fn new(h: f64) -> Result<Self> {
        if !(1e-6..=1e-3).contains(&h) {
            return Err(Error::Contract(format!(
                "finite-difference step {h} outside [1e-6, 1e-3]"
            )));
        }
        Ok(Self { h, fault: None })
    }

    /// Run the analytic pass with a corrupted backward rule for `kind`.
    #[doc(hidden)]
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn check<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let ids: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &ids)?;
            scalar_value(&g, out)
        };

        let mut g = Graph::new();
        if let Some(kind) = self.fault {
            g.inject_backward_fault(kind);
        }
        let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let base = scalar_value(&g, out)?;
        g.backward(out)?;

        if evaluate(inputs)?.to_bits() != base.to_bits() {
            return Err(Error::Contract(
                "function under gradient check is not deterministic".into(),
            ));
        }

        let mut report = GradCheckReport {
            per_input: Vec::with_capacity(inputs.len()),
            max_relative_error: 0.0,
            worst: None,
            element_errors: Vec::with_capacity(inputs.len()),
        };
        let mut point = inputs.to_vec();
        for (which, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).expect("inputs are parameters").to_vec();
            let mut input_max = 0.0f64;
            let mut errors = Vec::with_capacity(analytic.len());
            for (k, &a) in analytic.iter().enumerate() {
                let original = point[which].data()[k];
                point[which].data_mut()[k] = original + self.h;
                let plus = evaluate(&point)?;
                point[which].data_mut()[k] = original - self.h;
                let minus = evaluate(&point)?;
                point[which].data_mut()[k] = original;

                let numeric = (plus - minus) / (2.0 * self.h);
                let err = relative_error(a, numeric);
                errors.push(err);
                if err > input_max {
                    input_max = err;
                }
                if report.worst.is_none() || err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst = Some((which, k, a, numeric));
                }
            }
            report.per_input.push(input_max);
            report.element_errors.push(errors);
        }
        Ok(report)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Maximum relative error between the analytic and central-difference
/// gradients of the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let report = GradChecker::new(h)?.check(|g, ids| f(g, ids[0]), std::slice::from_ref(x))?;
    Ok(report.max_relative_error)
}

/// Gradient check with respect to several inputs at once.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    GradChecker::new(h)?.check(f, inputs)
}

fn scalar_value(g: &Graph<f64>, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Tensor of `shape` with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// `sum(y * c)` with fixed pseudo-random `c`, so every element of `y`
/// carries a distinct weight in the scalar.
pub fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let c = g.constant(random_tensor(g.shape(y), seed));
    let p = g.mul(y, c)?;
    g.sum(p)
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |g, i| g.matmul(i[0], i[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, i| {
            g.matmul(i[0], i[1])
        }),
        ("transpose", vec![vec![2, 3, 4]], |g, i| g.transpose(i[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, i| g.add(i[0], i[1])),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], |g, i| g.add(i[0], i[1])),
        ("mul_token_axis", vec![vec![2, 3, 4], vec![2, 1, 4]], |g, i| {
            g.mul(i[0], i[1])
        }),
        ("mul_column", vec![vec![3, 4], vec![3, 1]], |g, i| g.mul(i[0], i[1])),
        ("scale", vec![vec![5]], |g, i| g.scale(i[0], -1.7)),
        ("relu", vec![vec![4, 4]], |g, i| g.relu(i[0])),
        ("sigmoid", vec![vec![4, 4]], |g, i| g.sigmoid(i[0])),
        ("softmax_last", vec![vec![3, 5]], |g, i| g.softmax(i[0], -1)),
        ("softmax_first", vec![vec![3, 5]], |g, i| g.softmax(i[0], 0)),
        ("log_softmax", vec![vec![3, 5]], |g, i| g.log_softmax(i[0], -1)),
        ("concat", vec![vec![2, 3], vec![2, 1]], |g, i| {
            g.concat(&[i[0], i[1]], -1)
        }),
        ("slice", vec![vec![2, 5, 3]], |g, i| g.slice(i[0], 1, 1, 3)),
        ("mean", vec![vec![3, 4, 2]], |g, i| g.mean(i[0], 1)),
        ("sum", vec![vec![3, 4]], |g, i| g.sum(i[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, i| {
            g.layer_norm(i[0], i[1], i[2], 1e-5)
        }),
        ("gather", vec![vec![5, 3]], |g, i| g.gather_rows(i[0], &[4, 0, 4, 2])),
        ("reshape", vec![vec![2, 6]], |g, i| g.reshape(i[0], &[3, 4])),
        ("exp", vec![vec![3, 4]], |g, i| g.exp(i[0])),
        // Denominators are exponentiated to keep them away from zero.
        ("div", vec![vec![3, 4], vec![3, 4]], |g, i| {
            let d = g.exp(i[1])?;
            g.div(i[0], d)
        }),
        ("div_column", vec![vec![2, 3, 4], vec![2, 3, 1]], |g, i| {
            let d = g.exp(i[1])?;
            g.div(i[0], d)
        }),
    ]
}

/// Checks every differentiable operation on small random inputs, each
/// reduced by [`weighted_sum`]. Returns one report per case.
pub fn op_suite(checker: &GradChecker) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, shapes, op))| {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(j, s)| random_tensor(s, 1000 + 10 * k as u64 + j as u64))
                .collect();
            let report = checker.check(
                |g, ids| {
                    let y = op(g, ids)?;
                    weighted_sum(g, y, 77)
                },
                &inputs,
            )?;
            Ok((name, report))
        })
        .collect()
}

//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks a scalar function of a single tensor at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        step,
        tol,
        None,
    )
}

/// Checks a scalar function of several tensors. With `sample_per_input =
/// Some((n, seed))`, at most `n` coordinates of each input are perturbed.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = sample_per_input.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which], input.numel());
        let coords: Vec<usize> = match (sample_per_input, rng.as_mut()) {
            (Some((n, _)), Some(rng)) if n < input.numel() => {
                sample(rng, input.numel(), n).into_vec()
            }
            _ => (0..input.numel()).collect(),
        };
        for idx in coords {
            let orig = input.values()[idx];
            work[which].values_mut()[idx] = orig + step;
            let up = eval(&work)?;
            work[which].values_mut()[idx] = orig - step;
            let down = eval(&work)?;
            work[which].values_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((which, idx));
                }
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

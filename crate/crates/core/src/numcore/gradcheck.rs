//! Finite-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::NumError;

/// Denominator floor for the relative error, so elements whose true
/// gradient is ~0 are judged on absolute error instead of blowing up.
/// Central differences at `h = 1e-5` on an O(1) loss carry roughly `1e-10`
/// of rounding noise, which this floor keeps below the default tolerance.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub pairs: Vec<GradPair>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&GradPair> {
        self.pairs
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Folds another report in, keeping the larger error.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.pairs.extend(other.pairs);
    }
}

/// Compares `analytic` against central differences of `eval` around `x`.
pub fn finite_difference_check<F>(mut eval: F, x: &[f64], analytic: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "analytic gradient length");
    let mut probe = x.to_vec();
    let mut pairs = Vec::with_capacity(x.len());
    let mut max_rel_error: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = eval(&probe);
        probe[i] = x[i] - h;
        let down = eval(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let rel_error = relative_error(analytic[i], numeric);
        // NaN must fail the check, so fold with a comparison that keeps it.
        if rel_error.is_nan() || rel_error > max_rel_error {
            max_rel_error = if rel_error.is_nan() { f64::INFINITY } else { rel_error };
        }
        pairs.push(GradPair {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error,
        });
    }
    GradCheckReport {
        pairs,
        max_rel_error,
        tol,
    }
}

/// Checks the tape gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh tape and the node for `x` and must return a scalar
/// node built from it.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape<'_>, NodeId) -> Result<NodeId, NumError>,
{
    let mut tape = Tape::new();
    let input = tape.input(x.clone().with_grad(true));
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let shape = x.shape().to_vec();
    let mut failure = None;
    let report = finite_difference_check(
        |probe| {
            let mut tape = Tape::inference();
            let t = Tensor::new(shape.clone(), probe.to_vec()).expect("probe has x's shape");
            let node = tape.input(t);
            match f(&mut tape, node) {
                Ok(out) => tape.scalar(out),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        x.data(),
        &analytic,
        h,
        tol,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

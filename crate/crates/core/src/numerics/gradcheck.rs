//! Central-difference gradient checking.

use crate::error::{Error, Result};

use super::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates to probe; all of them when `None` or larger than the
    /// parameter count.
    pub samples: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: Some(256),
        }
    }
}

/// Compare the analytic gradient returned by `f` against central
/// differences of its value. `f` maps a flat parameter vector to
/// `(value, gradient)` and must be deterministic.
pub fn grad_check<F>(mut f: F, params: &[f64], rng: &mut Rng, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, analytic) = f(params)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let n = params.len();
    let indices: Vec<usize> = match opts.samples {
        Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
        _ => (0..n).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: indices.len(),
    };
    let mut p = params.to_vec();
    for &i in &indices {
        let orig = p[i];
        p[i] = orig + opts.step;
        let (fp, _) = f(&p)?;
        p[i] = orig - opts.step;
        let (fm, _) = f(&p)?;
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_essentially_exact() {
        // Central differences have no truncation error on a quadratic, so a
        // wide step only trims roundoff.
        let p: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = grad_check(
            |x| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())),
            &p,
            &mut Rng::new(0, "gc"),
            GradCheckOptions { step: 1e-2, samples: None },
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let r = grad_check(
            |x| Ok((3.0, vec![0.0; x.len()])),
            &[1.0, 2.0],
            &mut Rng::new(0, "gc"),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(
            |x| Ok((x[0] * x[0], vec![x[0]])),
            &[1.0],
            &mut Rng::new(0, "gc"),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = grad_check(|_| Ok((f64::NAN, vec![0.0])), &[1.0], &mut Rng::new(0, "gc"), GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}

//! Central finite-difference gradient checking.
//!
//! Used by the test suite to validate every backward pass against the loss
//! function itself. A coordinate passes if the relative error is within
//! `rel_tol` *or* the absolute error is within `abs_tol`; the absolute floor
//! covers coordinates whose true gradient is exactly zero (e.g. behind a dead
//! ReLU), where relative error is meaningless.

use super::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check every `stride`-th scalar (1 = all).
    pub stride: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            rel_tol: 1e-3,
            abs_tol: 1e-8,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (flat index, analytic, finite-difference) of the worst offender.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `analytic` (flat, in `ParamStore` order) against central
/// differences of `loss` over the parameters.
pub fn check_grads<F>(
    params: &ParamStore,
    analytic: &[f64],
    settings: GradCheckSettings,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let n = params.num_scalars();
    assert_eq!(analytic.len(), n, "gradient length mismatch");
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut scratch = params.clone();
    let mut i = 0;
    while i < n {
        scratch.nudge_scalar(i, settings.step);
        let up = loss(&scratch);
        scratch.nudge_scalar(i, -2.0 * settings.step);
        let down = loss(&scratch);
        scratch.nudge_scalar(i, settings.step); // restore
        let fd = (up - down) / (2.0 * settings.step);
        let a = analytic[i];
        let abs_err = (a - fd).abs();
        let denom = a.abs().max(fd.abs());
        let rel_err = if denom > 0.0 { abs_err / denom } else { 0.0 };
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs_err);
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some((i, a, fd));
        }
        if rel_err > settings.rel_tol && abs_err > settings.abs_tol {
            report.failures += 1;
        }
        i += settings.stride;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn quadratic_passes_and_corrupted_grad_fails() {
        let mut ps = ParamStore::new();
        let id = ps.add(
            "x",
            Array1::from(vec![0.3, -1.2, 2.5]).into_dyn(),
        );
        // loss = sum(x^2), grad = 2x
        let loss = |ps: &ParamStore| ps.get(id).iter().map(|v| v * v).sum::<f64>();
        let good: Vec<f64> = ps.get(id).iter().map(|v| 2.0 * v).collect();
        let rep = check_grads(&ps, &good, GradCheckSettings::default(), loss);
        assert!(rep.ok(), "{rep:?}");
        assert!(rep.max_rel_err < 1e-6);

        let mut bad = good.clone();
        bad[1] *= 1.01;
        let rep = check_grads(&ps, &bad, GradCheckSettings::default(), loss);
        assert_eq!(rep.failures, 1);
    }

    #[test]
    fn zero_gradient_passes_via_absolute_floor() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Array1::from(vec![1.0, 2.0]).into_dyn());
        // loss ignores x entirely
        let _ = id;
        let loss = |_: &ParamStore| 3.5_f64;
        let rep = check_grads(&ps, &[0.0, 0.0], GradCheckSettings::default(), loss);
        assert!(rep.ok());
    }
}

//! Central finite-difference verification of analytic gradients.

use super::scalar::{lit, to_f64, Scalar};
use super::tensor::Tensor;
use super::NumericsError;

/// Perturbation step used throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Worst coordinate for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter with the worst relative error.
    pub worst: String,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare `analytic` gradients of a scalar function against central finite
/// differences at `params`. Per coordinate the error is
/// `|analytic - numeric| / max(1, |numeric|)`; the report carries the max
/// over coordinates per tensor and overall.
///
/// `eval` must be a pure function of the parameter list. A non-finite loss
/// at any perturbed point is an error.
pub fn grad_check<S: Scalar>(
    mut eval: impl FnMut(&[Tensor<S>]) -> Result<S, NumericsError>,
    names: &[String],
    params: &[Tensor<S>],
    analytic: &[Tensor<S>],
    step: f64,
) -> Result<GradCheckReport, NumericsError> {
    assert_eq!(names.len(), params.len());
    assert_eq!(params.len(), analytic.len());
    let h = lit::<S>(step);
    let two_h = 2.0 * step;

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();

    for (k, name) in names.iter().enumerate() {
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..params[k].len() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let f_plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let f_minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(NumericsError::NonFinite {
                    context: format!("grad_check perturbation of {name}[{idx}]"),
                });
            }
            let numeric = (to_f64(f_plus) - to_f64(f_minus)) / two_h;
            let a = to_f64(analytic[k].data()[idx]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.coord = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if entry.max_rel_err >= max_rel_err {
            max_rel_err = entry.max_rel_err;
            worst = name.clone();
        }
        entries.push(entry);
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic_slope() {
        // f(x) = x^2 at x = 3: analytic 6, numeric 6
        let params = vec![Tensor::scalar(3.0f64)];
        let analytic = vec![Tensor::scalar(6.0f64)];
        let report = grad_check(
            |p: &[Tensor<f64>]| Ok(p[0].item() * p[0].item()),
            &["x".to_string()],
            &params,
            &analytic,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        assert_eq!(report.worst, "x");
    }

    #[test]
    fn flags_wrong_gradient() {
        let params = vec![Tensor::scalar(3.0f64)];
        let analytic = vec![Tensor::scalar(5.0f64)]; // wrong on purpose
        let report = grad_check(
            |p: &[Tensor<f64>]| Ok(p[0].item() * p[0].item()),
            &["x".to_string()],
            &params,
            &analytic,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let params = vec![Tensor::scalar(0.0f64)];
        let analytic = vec![Tensor::scalar(0.0f64)];
        let err = grad_check(
            |p: &[Tensor<f64>]| Ok(1.0 / p[0].item()),
            &["x".to_string()],
            &params,
            &analytic,
            0.0, // h = 0 forces division by zero at the unperturbed point
        );
        // with h=0 both evals hit 1/0 = inf
        assert!(err.is_err());
    }
}

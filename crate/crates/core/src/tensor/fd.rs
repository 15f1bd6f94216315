use super::Tensor;

/// Differences at or below this magnitude count as agreement regardless of
/// relative error.
pub const ABS_FLOOR: f64 = 1e-7;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// # Panics
/// If `eps` is not strictly positive.
pub fn finite_diff_grad<F>(f: F, at: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive, got {eps}");
    let mut probe = at.clone();
    let mut grad = at.zeros_like();
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = x - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    /// Largest relative error over entries whose absolute error exceeds
    /// [`ABS_FLOOR`].
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
    pub count: usize,
}

impl GradError {
    pub fn merge(self, other: GradError) -> GradError {
        if other.max_rel > self.max_rel {
            GradError {
                count: self.count + other.count,
                max_abs: self.max_abs.max(other.max_abs),
                ..other
            }
        } else {
            GradError {
                count: self.count + other.count,
                max_abs: self.max_abs.max(other.max_abs),
                ..self
            }
        }
    }

    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

pub fn grad_error(analytic: &[f64], numeric: &[f64]) -> GradError {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut err = GradError {
        count: analytic.len(),
        ..GradError::default()
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        err.max_abs = err.max_abs.max(diff);
        let rel = if diff <= ABS_FLOOR {
            0.0
        } else if !diff.is_finite() {
            f64::INFINITY
        } else {
            diff / a.abs().max(n.abs())
        };
        if rel > err.max_rel || rel.is_nan() {
            err.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            err.worst_index = i;
        }
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.3);
        let g = finite_diff_grad(|t| t.sum_sq(), &x, 1e-5);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let g = finite_diff_grad(|_| 3.0, &x, 1e-5);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    #[should_panic]
    fn rejects_non_positive_step() {
        finite_diff_grad(|t| t.sum(), &Tensor::zeros(&[1]), 0.0);
    }

    #[test]
    fn error_uses_absolute_floor() {
        let e = grad_error(&[1e-9, 1.0], &[-1e-9, 1.0 + 1e-6]);
        assert!(e.max_rel < 2e-6);
        let e = grad_error(&[1.0], &[2.0]);
        assert_eq!(e.max_rel, 0.5);
        assert!(!e.within(1e-4));
        let e = grad_error(&[f64::NAN], &[1.0]);
        assert!(!e.within(1e-4));
    }
}

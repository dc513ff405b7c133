//! Dense Levenberg-Marquardt for small least-squares problems.
//!
//! Minimizes `F(x) = ½‖r(x)‖²` with Nielsen's damping update. The damping
//! matrix is `μ·diag(JᵀJ)` floored at a small positive value, so parameters
//! the residuals do not depend on simply stay where they start.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquares {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct LmSettings {
    /// Converged once ‖∇‖r‖²‖₂ = ‖2Jᵀr‖₂ falls below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone)]
pub enum LmOutcome {
    Finished {
        x: DVector<f64>,
        /// ‖r‖², i.e. 2F.
        cost: f64,
        gradient_norm: f64,
        iterations: usize,
    },
    Diverged {
        last_x: DVector<f64>,
        iterations: usize,
    },
}

const DIAG_FLOOR: f64 = 1e-12;

pub fn minimize<P: LeastSquares>(
    problem: &P,
    x0: DVector<f64>,
    settings: &LmSettings,
) -> LmOutcome {
    let mut x = x0;
    let mut r = problem.residuals(&x);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return LmOutcome::Diverged {
            last_x: x,
            iterations: 0,
        };
    }
    let mut jac = problem.jacobian(&x);
    let mut g = jac.tr_mul(&r);
    let mut a = jac.tr_mul(&jac);
    let mut mu = 1e-3 * a.diagonal().max().max(DIAG_FLOOR);
    let mut nu = 2.0;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        if 2.0 * g.norm() < settings.gradient_tolerance {
            break;
        }
        iterations += 1;

        let mut damped = a.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu * a[(i, i)].max(DIAG_FLOOR);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
        };
        if step.norm() <= 1e-15 * (x.norm() + 1e-15) {
            break;
        }

        let x_new = &x + &step;
        let r_new = problem.residuals(&x_new);
        let cost_new = r_new.norm_squared();
        if !cost_new.is_finite() {
            return LmOutcome::Diverged {
                last_x: x,
                iterations,
            };
        }
        // predicted decrease of F = ½‖r‖²
        let mut damping_term = 0.0;
        for i in 0..step.len() {
            damping_term += mu * a[(i, i)].max(DIAG_FLOOR) * step[i] * step[i];
        }
        let predicted = 0.5 * (damping_term - step.dot(&g));
        let rho = if predicted > 0.0 {
            0.5 * (cost - cost_new) / predicted
        } else {
            -1.0
        };

        if rho > 0.0 {
            x = x_new;
            r = r_new;
            cost = cost_new;
            jac = problem.jacobian(&x);
            g = jac.tr_mul(&r);
            a = jac.tr_mul(&jac);
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
        } else {
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() {
                break;
            }
        }
    }

    LmOutcome::Finished {
        gradient_norm: 2.0 * g.norm(),
        x,
        cost,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquares for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let settings = LmSettings {
            gradient_tolerance: 1e-10,
            max_iterations: 200,
        };
        match minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &settings) {
            LmOutcome::Finished {
                x, gradient_norm, ..
            } => {
                assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
                assert!(gradient_norm < 1e-10);
            }
            other => panic!("{other:?}"),
        }
    }

    struct Blowup;

    impl LeastSquares for Blowup {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![(x[0] - 1.0).exp().powi(400)])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 400.0 * (x[0] - 1.0).exp().powi(400))
        }
    }

    #[test]
    fn reports_non_finite_start() {
        let settings = LmSettings {
            gradient_tolerance: 1e-8,
            max_iterations: 10,
        };
        assert!(matches!(
            minimize(&Blowup, DVector::from_vec(vec![10.0]), &settings),
            LmOutcome::Diverged { .. }
        ));
    }

    struct PartlyFree;

    impl LeastSquares for PartlyFree {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] - 3.0])
        }
        fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
        }
    }

    #[test]
    fn unconstrained_parameters_stay_put() {
        let settings = LmSettings {
            gradient_tolerance: 1e-12,
            max_iterations: 50,
        };
        let LmOutcome::Finished { x, .. } =
            minimize(&PartlyFree, DVector::from_vec(vec![0.0, 0.7]), &settings)
        else {
            panic!()
        };
        assert!((x[0] - 3.0).abs() < 1e-12);
        assert_eq!(x[1], 0.7);
    }
}

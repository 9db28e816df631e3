//! Line-search SQP with damped BFGS updates of the Lagrangian Hessian and an
//! ℓ1 merit function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::WorkCounters;
use crate::linalg::{dot, norm_1, norm_inf, Matrix};
use crate::nlp::{evaluate, DecisionVector, Evaluation, NlpError, OcpProblem};
use crate::qp::{solve_qp, BoundStatus, QpProblem, QpStatus, ShootingLayout};
use crate::sensitivity::SensitivityMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpSettings {
    pub tol_kkt: f64,
    pub tol_qp: f64,
    /// Smallest line-search step length before giving up.
    pub tol_step: f64,
    pub max_sqp_iter: usize,
    pub max_qp_iter: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    /// Rescale the identity initial Hessian by `yᵀy / sᵀy` before the first
    /// BFGS update.
    #[serde(default)]
    pub scale_initial_hessian: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-3,
            tol_qp: 1e-8,
            tol_step: 1e-8,
            max_sqp_iter: 200,
            max_qp_iter: crate::qp::DEFAULT_MAX_ITER,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            scale_initial_hessian: false,
        }
    }
}

impl SqpSettings {
    pub fn validate(&self) -> Result<(), SqpError> {
        let ok = self.tol_kkt > 0.0
            && self.tol_qp > 0.0
            && self.tol_step > 0.0
            && self.armijo_c1 > 0.0
            && self.armijo_c1 < 0.5
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.max_qp_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(SqpError::InvalidSettings(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SqpError {
    #[error("invalid SQP settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Problem(#[from] NlpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SqpFailure {
    StepLengthBelowTolerance,
    IterationLimit,
    EvaluationFailure,
    /// The QP subproblem hit its iteration limit or could not be factorized.
    QpFailure,
}

/// Per-iteration log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpIteration {
    pub kkt: f64,
    pub merit: f64,
    pub step_length: f64,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub w_star: DecisionVector,
    pub converged: bool,
    pub kkt: f64,
    pub sqp_iterations: usize,
    pub qp_iterations_total: usize,
    pub counters: WorkCounters,
    pub failure_reason: Option<SqpFailure>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub history: Vec<SqpIteration>,
}

/// Composite KKT measure: max of `‖∇φ + Jᵀλ + μ‖∞`, `‖c‖∞`, the largest
/// input bound violation and the largest `|μ_i|·gap_i` with the gap to the
/// bound indicated by the sign of `μ_i`.
pub fn kkt_violation(
    p: &OcpProblem,
    w: &DecisionVector,
    ev: &Evaluation,
    lambda: &[f64],
    mu: &[f64],
) -> f64 {
    let mut stat = ev.jacobian_tr_vec(p, lambda);
    for (i, s) in stat.iter_mut().enumerate() {
        *s += ev.grad[i] + mu[i];
    }
    let mut v = norm_inf(&stat).max(norm_inf(&ev.c));
    for (n, u) in w.u.iter().enumerate() {
        for k in 0..p.nu() {
            let lo = u[k] - p.u_min[k];
            let hi = p.u_max[k] - u[k];
            v = v.max(-lo).max(-hi);
            let m = mu[p.u_offset(n) + k];
            if m > 0.0 {
                v = v.max(m * hi.abs());
            } else if m < 0.0 {
                v = v.max(-m * lo.abs());
            }
        }
    }
    v
}

/// Powell-damped BFGS update. Skipped when `‖s‖` or `‖y‖` is below 1e-14.
pub fn bfgs_update(h: &Matrix, s: &[f64], y: &[f64]) -> Matrix {
    if crate::linalg::norm_2(s) < 1e-14 || crate::linalg::norm_2(y) < 1e-14 {
        return h.clone();
    }
    let hs = h.matvec(s);
    let shs = dot(s, &hs);
    if !(shs > 0.0) {
        return h.clone();
    }
    let sy = dot(s, y);
    let r: Vec<f64> = if sy >= 0.2 * shs {
        y.to_vec()
    } else {
        let theta = 0.8 * shs / (shs - sy);
        y.iter()
            .zip(&hs)
            .map(|(yi, hi)| theta * yi + (1.0 - theta) * hi)
            .collect()
    };
    let sr = dot(s, &r);
    let n = s.len();
    let mut out = h.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] += r[i] * r[j] / sr - hs[i] * hs[j] / shs;
        }
    }
    out.symmetrize();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LineSearchOutcome {
    Accepted {
        alpha: f64,
    },
    /// No acceptable step down to the tolerance; `all_trials_failed` when
    /// every trial point could not be evaluated.
    Failed {
        all_trials_failed: bool,
    },
}

/// Backtracking over `α ∈ {1, β, β², …}` with the Armijo condition
/// `M(α) ≤ M(0) + c₁ α D`. `merit_at` returns `None` for trial points that
/// cannot be evaluated; those count as infinite merit.
pub fn line_search<F: FnMut(f64) -> Option<f64>>(
    mut merit_at: F,
    merit0: f64,
    directional_derivative: f64,
    c1: f64,
    beta: f64,
    tol_step: f64,
) -> LineSearchOutcome {
    let mut alpha = 1.0;
    let mut all_failed = true;
    while alpha >= tol_step {
        if let Some(m) = merit_at(alpha) {
            all_failed = false;
            if m <= merit0 + c1 * alpha * directional_derivative {
                return LineSearchOutcome::Accepted { alpha };
            }
        }
        alpha *= beta;
    }
    LineSearchOutcome::Failed {
        all_trials_failed: all_failed,
    }
}

fn lagrangian_gradient(p: &OcpProblem, ev: &Evaluation, lambda: &[f64]) -> Vec<f64> {
    let mut g = ev.jacobian_tr_vec(p, lambda);
    for (gi, v) in g.iter_mut().zip(&ev.grad) {
        *gi += v;
    }
    g
}

fn step_to(w: &DecisionVector, dir: &[f64], alpha: f64, nx: usize, nu: usize) -> DecisionVector {
    let flat: Vec<f64> = w
        .flatten()
        .iter()
        .zip(dir)
        .map(|(a, d)| a + alpha * d)
        .collect();
    DecisionVector::unflatten(&flat, nx, nu).expect("same layout")
}

/// Solves the transcribed OCP from `w0`.
///
/// Every model evaluation, including rejected line-search trials, adds to
/// the returned counters.
pub fn solve_ocp(
    p: &OcpProblem,
    settings: &SqpSettings,
    w0: DecisionVector,
) -> Result<SqpResult, SqpError> {
    settings.validate()?;
    p.validate()?;
    if p.mode == SensitivityMode::None {
        return Err(SqpError::Problem(NlpError::InvalidProblem(
            "the SQP needs constraint Jacobians; choose a sensitivity mode".into(),
        )));
    }
    let (nx, nu) = (p.nx(), p.nu());
    let nw = p.n_decision();
    let layout = ShootingLayout { nx, nu, nc: p.nc };
    let mut counters = WorkCounters::default();
    let mut w = w0;
    let mut lambda = vec![0.0; p.nc * nx];
    let mut mu = vec![0.0; nw];
    let result = |w: DecisionVector,
                  converged: bool,
                  kkt: f64,
                  sqp_iterations: usize,
                  qp_total: usize,
                  counters: WorkCounters,
                  failure: Option<SqpFailure>,
                  lambda: Vec<f64>,
                  mu: Vec<f64>,
                  history: Vec<SqpIteration>| SqpResult {
        w_star: w,
        converged,
        kkt,
        sqp_iterations,
        qp_iterations_total: qp_total,
        counters,
        failure_reason: failure,
        lambda,
        mu,
        history,
    };

    let mut ev = match evaluate(p, &w) {
        Ok(ev) => ev,
        Err(NlpError::EvaluationError { .. }) => {
            return Ok(result(
                w,
                false,
                f64::INFINITY,
                0,
                0,
                counters,
                Some(SqpFailure::EvaluationFailure),
                lambda,
                mu,
                vec![],
            ))
        }
        Err(e) => return Err(e.into()),
    };
    counters += ev.counters;

    let mut h = Matrix::identity(nw);
    let mut penalty = 0.0_f64;
    let mut hint: Option<Vec<BoundStatus>> = None;
    let mut qp_total = 0;
    let mut history = Vec::new();
    let mut iter = 0;
    loop {
        let kkt = kkt_violation(p, &w, &ev, &lambda, &mu);
        if kkt <= settings.tol_kkt {
            return Ok(result(
                w, true, kkt, iter, qp_total, counters, None, lambda, mu, history,
            ));
        }
        if iter >= settings.max_sqp_iter {
            return Ok(result(
                w,
                false,
                kkt,
                iter,
                qp_total,
                counters,
                Some(SqpFailure::IterationLimit),
                lambda,
                mu,
                history,
            ));
        }

        let flat = w.flatten();
        let (mut lb, mut ub) = (vec![f64::NEG_INFINITY; nw], vec![f64::INFINITY; nw]);
        for n in 0..p.nc {
            for k in 0..nu {
                let i = p.u_offset(n) + k;
                lb[i] = p.u_min[k] - flat[i];
                ub[i] = p.u_max[k] - flat[i];
            }
        }
        let qp = QpProblem {
            h: h.clone(),
            g: ev.grad.clone(),
            e_mat: ev.constraint_jacobian(p),
            e_vec: ev.c.iter().map(|c| -c).collect(),
            lb,
            ub,
            layout: Some(layout),
            working_set_hint: hint.take(),
        };
        let sol = match solve_qp(&qp, settings.tol_qp, settings.max_qp_iter) {
            Ok(s) if s.status == QpStatus::Optimal => s,
            Ok(s) => {
                qp_total += s.iterations;
                return Ok(result(
                    w,
                    false,
                    kkt,
                    iter,
                    qp_total,
                    counters,
                    Some(SqpFailure::QpFailure),
                    lambda,
                    mu,
                    history,
                ));
            }
            Err(_) => {
                return Ok(result(
                    w,
                    false,
                    kkt,
                    iter,
                    qp_total,
                    counters,
                    Some(SqpFailure::QpFailure),
                    lambda,
                    mu,
                    history,
                ));
            }
        };
        qp_total += sol.iterations;
        iter += 1;

        penalty = penalty.max(1.1 * norm_inf(&sol.lambda_eq) + 1e-3);
        let c_norm = norm_1(&ev.c);
        let merit0 = ev.phi + penalty * c_norm;
        let dd = dot(&ev.grad, &sol.p) - penalty * c_norm;

        let mut accepted: Option<Evaluation> = None;
        let mut trial_counters = WorkCounters::default();
        let outcome = line_search(
            |alpha| {
                let trial = step_to(&w, &sol.p, alpha, nx, nu);
                match evaluate(p, &trial) {
                    Ok(tev) => {
                        trial_counters += tev.counters;
                        let m = tev.phi + penalty * norm_1(&tev.c);
                        accepted = Some(tev);
                        Some(m)
                    }
                    Err(_) => None,
                }
            },
            merit0,
            dd,
            settings.armijo_c1,
            settings.backtrack_factor,
            settings.tol_step,
        );
        counters += trial_counters;
        let alpha = match outcome {
            LineSearchOutcome::Accepted { alpha } => alpha,
            LineSearchOutcome::Failed { all_trials_failed } => {
                let reason = if all_trials_failed {
                    SqpFailure::EvaluationFailure
                } else {
                    SqpFailure::StepLengthBelowTolerance
                };
                history.push(SqpIteration {
                    kkt,
                    merit: merit0,
                    step_length: 0.0,
                    qp_iterations: sol.iterations,
                });
                return Ok(result(
                    w,
                    false,
                    kkt,
                    iter,
                    qp_total,
                    counters,
                    Some(reason),
                    lambda,
                    mu,
                    history,
                ));
            }
        };
        let new_ev = accepted.expect("accepted step was evaluated");
        let w_new = step_to(&w, &sol.p, alpha, nx, nu);
        history.push(SqpIteration {
            kkt,
            merit: merit0,
            step_length: alpha,
            qp_iterations: sol.iterations,
        });

        let s: Vec<f64> = sol.p.iter().map(|v| alpha * v).collect();
        let g_new = lagrangian_gradient(p, &new_ev, &sol.lambda_eq);
        let g_old = lagrangian_gradient(p, &ev, &sol.lambda_eq);
        let y: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
        if iter == 1 && settings.scale_initial_hessian {
            let sy = dot(&s, &y);
            if sy > 0.0 {
                h = Matrix::identity(nw).scaled(dot(&y, &y) / sy);
            }
        }
        h = bfgs_update(&h, &s, &y);

        w = w_new;
        ev = new_ev;
        lambda = sol.lambda_eq;
        mu = sol.mu_bounds;
        hint = Some(sol.working_set);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn min_eigen_positive(m: &Matrix) -> bool {
        crate::linalg::Cholesky::factor(m).is_ok()
    }

    #[test]
    fn bfgs_fixed_point_and_secant() {
        let h = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let s = [0.3, -0.7];
        let y = h.matvec(&s);
        let h2 = bfgs_update(&h, &s, &y);
        assert!(h2.sub(&h).max_abs() < 1e-14);

        let y = [1.0, -0.2];
        let h3 = bfgs_update(&h, &s, &y);
        let hs = h3.matvec(&s);
        assert!((hs[0] - y[0]).abs() < 1e-10 && (hs[1] - y[1]).abs() < 1e-10);
    }

    #[test]
    fn bfgs_damping_keeps_positive_definite() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut a = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                a[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut h = a.tr_matmul(&a);
        for i in 0..5 {
            h[(i, i)] += 0.1;
        }
        let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = h.matvec(&s).iter().map(|v| -v).collect();
        assert!(dot(&s, &y) < 0.0);
        let h2 = bfgs_update(&h, &s, &y);
        assert!(min_eigen_positive(&h2));
    }

    #[test]
    fn bfgs_skips_tiny_steps() {
        let h = Matrix::identity(2);
        assert_eq!(bfgs_update(&h, &[1e-15, 0.0], &[1.0, 0.0]), h);
        assert_eq!(bfgs_update(&h, &[1.0, 0.0], &[0.0, 1e-15]), h);
    }

    #[test]
    fn line_search_accepts_full_step() {
        // M(α) = (1 − α)², D = −2
        let out = line_search(|a| Some((1.0 - a) * (1.0 - a)), 1.0, -2.0, 1e-4, 0.5, 1e-8);
        assert_eq!(out, LineSearchOutcome::Accepted { alpha: 1.0 });
    }

    #[test]
    fn line_search_fails_on_increasing_merit() {
        let out = line_search(|a| Some(1.0 + a), 1.0, -1.0, 1e-4, 0.5, 1e-8);
        assert_eq!(
            out,
            LineSearchOutcome::Failed {
                all_trials_failed: false
            }
        );
        let out = line_search(|_| None, 1.0, -1.0, 1e-4, 0.5, 1e-8);
        assert_eq!(
            out,
            LineSearchOutcome::Failed {
                all_trials_failed: true
            }
        );
    }

    #[test]
    fn line_search_backtracks_past_failures() {
        let out = line_search(
            |a| if a > 0.3 { None } else { Some(1.0 - a) },
            1.0,
            -1.0,
            1e-4,
            0.5,
            1e-8,
        );
        assert_eq!(out, LineSearchOutcome::Accepted { alpha: 0.25 });
    }

    #[test]
    fn settings_validation() {
        assert!(SqpSettings::default().validate().is_ok());
        let bad = SqpSettings {
            armijo_c1: 0.6,
            ..SqpSettings::default()
        };
        assert!(bad.validate().is_err());
    }
}

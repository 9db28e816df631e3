//! Fixed-step ESDIRK integration with an inexact Newton method.
//!
//! Each implicit stage `i = 2..s` solves
//! `R_i(X) = X − hγ f(T_i, X, u, d) − ψ_i = 0` with
//! `ψ_i = x_k + h Σ_{j<i} a_ij f(T_j, X_j, u, d)`. The Newton iteration either
//! reuses one factorization of `M_k = I − hγ ∂f/∂x(x_k)` for the whole step
//! ([`NewtonStrategy::ReusePerStep`]) or refactorizes the exact stage
//! Jacobian at every iterate ([`NewtonStrategy::RefactorizeEveryIteration`]).
//!
//! Iterate numbering: a stage that needs `w` Newton updates produces
//! `X^0, ..., X^w`; the converged stage is `X^w` and the residual is evaluated
//! `w + 1` times. At least one update is always performed.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, lu_factorize, LinalgError, LuFactors, Matrix};
use crate::model::{ModelError, OdeModel};
use crate::sensitivity::{self, SensitivityMode, SensitivityPair};
use crate::tableau::{predict_stages, svp_coefficients, ButcherTableau, SvpCoefficients};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("Newton iteration for stage {stage} did not converge in {iterations} iterations (scaled residual {residual:e})")]
    NewtonDivergence {
        stage: usize,
        iterations: usize,
        residual: f64,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

/// How the Newton iteration matrix is maintained within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NewtonStrategy {
    /// Factorize `M_k = I − hγ ∂f/∂x(x_k)` once per integration step.
    ReusePerStep,
    /// Re-evaluate the Jacobian and refactorize at every Newton iterate.
    RefactorizeEveryIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
    /// Convergence constant: a stage converges once the scaled residual is `< tau`.
    pub tau: f64,
    pub abs: f64,
    pub rel: f64,
    pub max_iterations: usize,
    pub min_iterations: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tau: 0.1,
            abs: 1e-8,
            rel: 1e-8,
            max_iterations: 20,
            min_iterations: 1,
        }
    }
}

impl NewtonSettings {
    pub fn with_tolerances(abs: f64, rel: f64) -> Self {
        Self {
            abs,
            rel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), IntegratorError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(IntegratorError::ContractViolation(format!(
                "tau = {} not in (0, 1]",
                self.tau
            )));
        }
        if !(self.abs > 0.0 && self.rel > 0.0) {
            return Err(IntegratorError::ContractViolation(
                "abs and rel must be positive".into(),
            ));
        }
        if self.min_iterations < 1 || self.max_iterations < self.min_iterations {
            return Err(IntegratorError::ContractViolation(
                "need 1 <= min_iterations <= max_iterations".into(),
            ));
        }
        Ok(())
    }
}

/// Work done by the integrator. Counters only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounters {
    pub f_evals: u64,
    pub jac_x_evals: u64,
    pub jac_u_evals: u64,
    pub lu_factorizations: u64,
    pub newton_iterations: u64,
}

impl AddAssign for WorkCounters {
    fn add_assign(&mut self, o: Self) {
        self.f_evals += o.f_evals;
        self.jac_x_evals += o.jac_x_evals;
        self.jac_u_evals += o.jac_u_evals;
        self.lu_factorizations += o.lu_factorizations;
        self.newton_iterations += o.newton_iterations;
    }
}

impl Add for WorkCounters {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for WorkCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Newton iterates of one stage and the Jacobians evaluated at them. Kept only
/// for iterated sensitivities, which replay exactly these updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageHistory {
    /// `X^0, ..., X^{w-1}`: the points at which updates were computed.
    pub iterates: Vec<Vec<f64>>,
    pub jac_x: Vec<Matrix>,
    pub jac_u: Vec<Matrix>,
}

/// Everything one ESDIRK step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_start: f64,
    pub h: f64,
    pub x_start: Vec<f64>,
    pub x_next: Vec<f64>,
    /// Converged implicit stages `X_2..X_s`; the last equals `x_next`.
    pub stages: Vec<Vec<f64>>,
    /// `f` at all `s` converged stages (stage 1 is `x_start`).
    pub stage_rhs: Vec<Vec<f64>>,
    /// Per implicit stage, only populated for [`SensitivityMode::Iterated`].
    pub iterate_history: Vec<StageHistory>,
    /// `w_{i,k}` for each implicit stage.
    pub newton_counts: Vec<usize>,
    /// `x_{k+1} − x̂_{k+1}` from the embedded weights.
    pub embedded_error: Vec<f64>,
    /// `∂f/∂x(x_k)`; doubles as the explicit-stage Jacobian.
    pub jac_x_start: Matrix,
    /// Factors of `M_k` under [`NewtonStrategy::ReusePerStep`].
    pub iteration_matrix: Option<LuFactors>,
    /// Under [`NewtonStrategy::RefactorizeEveryIteration`], the last iterate
    /// at which each stage's Jacobian was evaluated together with it.
    pub last_newton_jacobian: Vec<Option<(Vec<f64>, Matrix)>>,
    /// `[∂x_k/∂x₀ | ∂x_k/∂u]`.
    pub sens_start: Option<Matrix>,
    /// `[∂X_i/∂x₀ | ∂X_i/∂u]` for the implicit stages.
    pub stage_sens: Vec<Matrix>,
    /// `[∂x_{k+1}/∂x₀ | ∂x_{k+1}/∂u]`.
    pub sens_next: Option<Matrix>,
}

/// Terminal state, sensitivities and per-step data of one interval.
#[derive(Debug, Clone)]
pub struct IntervalResult {
    pub x_final: Vec<f64>,
    pub sensitivities: Option<SensitivityPair>,
    /// `(t, x)` at every step boundary including the start.
    pub trajectory: Vec<(f64, Vec<f64>)>,
    pub records: Vec<StepRecord>,
}

/// `R = X − hγ f(X) − ψ`.
#[allow(clippy::too_many_arguments)]
pub fn residual(
    model: &dyn OdeModel,
    t: f64,
    stage_value: &[f64],
    psi: &[f64],
    u: &[f64],
    d: &[f64],
    h: f64,
    gamma: f64,
    counters: &mut WorkCounters,
) -> Result<Vec<f64>, IntegratorError> {
    let f = model.rhs(t, stage_value, u, d)?;
    counters.f_evals += 1;
    Ok(residual_from_rhs(stage_value, &f, psi, h * gamma))
}

fn residual_from_rhs(x: &[f64], f: &[f64], psi: &[f64], hg: f64) -> Vec<f64> {
    x.iter()
        .zip(f)
        .zip(psi)
        .map(|((x, f), p)| x - hg * f - p)
        .collect()
}

/// `ψ_i = x_k + h Σ_{j<i} a_ij f(X_j)` from cached stage derivatives.
///
/// `stage` is the zero-based stage index (so `1` is the first implicit stage)
/// and `stage_rhs` must hold `f` for stages `0..stage`.
pub fn psi(
    stage_rhs: &[Vec<f64>],
    x_k: &[f64],
    h: f64,
    tableau: &ButcherTableau,
    stage: usize,
) -> Vec<f64> {
    assert!(stage >= 1 && stage < tableau.s && stage_rhs.len() >= stage);
    let mut out = x_k.to_vec();
    for (j, fj) in stage_rhs.iter().enumerate().take(stage) {
        let a = tableau.a[(stage, j)];
        if a != 0.0 {
            axpy(h * a, fj, &mut out);
        }
    }
    out
}

/// `max_j |r_j| / max(abs, rel·|x_j|)`.
pub fn scaled_residual_norm(r: &[f64], x_iterate: &[f64], abs: f64, rel: f64) -> f64 {
    r.iter()
        .zip(x_iterate)
        .map(|(ri, xi)| ri.abs() / abs.max(rel * xi.abs()))
        .fold(0.0, f64::max)
}

/// `I − hγ J`.
pub(crate) fn shifted_identity(j: &Matrix, hg: f64) -> Matrix {
    let mut m = j.scaled(-hg);
    for i in 0..m.rows() {
        m[(i, i)] += 1.0;
    }
    m
}

/// Fixed-step ESDIRK integrator bound to a model and configuration.
#[derive(Clone, Copy)]
pub struct Esdirk<'a> {
    pub model: &'a dyn OdeModel,
    pub tableau: &'a ButcherTableau,
    pub strategy: NewtonStrategy,
    pub settings: NewtonSettings,
    pub mode: SensitivityMode,
}

impl<'a> Esdirk<'a> {
    pub fn new(
        model: &'a dyn OdeModel,
        tableau: &'a ButcherTableau,
        strategy: NewtonStrategy,
        settings: NewtonSettings,
        mode: SensitivityMode,
    ) -> Result<Self, IntegratorError> {
        settings.validate()?;
        mode.check_strategy(strategy)?;
        Ok(Self {
            model,
            tableau,
            strategy,
            settings,
            mode,
        })
    }

    /// One ESDIRK step from `(t_k, x_k)` with step size `h`.
    ///
    /// `warm` carries the previous step of the same interval and the SVP
    /// coefficients; without it the trivial predictor `X_i^[0] = x_k` is used.
    /// When sensitivities are requested `sens_k` must hold
    /// `[∂x_k/∂x₀ | ∂x_k/∂u]`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        x_k: &[f64],
        sens_k: Option<&Matrix>,
        u: &[f64],
        d: &[f64],
        t_k: f64,
        h: f64,
        warm: Option<(&StepRecord, &SvpCoefficients)>,
        counters: &mut WorkCounters,
    ) -> Result<StepRecord, IntegratorError> {
        if !(h > 0.0) {
            return Err(IntegratorError::ContractViolation(format!(
                "step size {h} must be positive"
            )));
        }
        let tab = self.tableau;
        let s = tab.s;
        let hg = h * tab.gamma;
        let model = self.model;
        let iterated = self.mode == SensitivityMode::Iterated;

        let f1 = model.rhs(t_k, x_k, u, d)?;
        counters.f_evals += 1;
        let jac_x_start = model.jac_x(t_k, x_k, u, d)?;
        counters.jac_x_evals += 1;
        let iteration_matrix = match self.strategy {
            NewtonStrategy::ReusePerStep => {
                let f = lu_factorize(&shifted_identity(&jac_x_start, hg))?;
                counters.lu_factorizations += 1;
                Some(f)
            }
            NewtonStrategy::RefactorizeEveryIteration => None,
        };

        let predictions = match warm {
            Some((prev, svp)) => predict_stages(svp, &prev.x_start, &prev.stages),
            None => vec![x_k.to_vec(); s - 1],
        };

        let mut stage_rhs = Vec::with_capacity(s);
        stage_rhs.push(f1);
        let mut stages = Vec::with_capacity(s - 1);
        let mut newton_counts = Vec::with_capacity(s - 1);
        let mut iterate_history = Vec::new();
        let mut last_newton_jacobian = Vec::new();

        for (i, mut x) in predictions.into_iter().enumerate().map(|(k, p)| (k + 1, p)) {
            let t_i = t_k + tab.c[i] * h;
            let psi_i = psi(&stage_rhs, x_k, h, tab, i);
            let mut history = StageHistory::default();
            let mut last_jac = None;
            let mut w = 0usize;
            let f_conv = loop {
                let f = model.rhs(t_i, &x, u, d)?;
                counters.f_evals += 1;
                let r = residual_from_rhs(&x, &f, &psi_i, hg);
                let norm = scaled_residual_norm(&r, &x, self.settings.abs, self.settings.rel);
                if !norm.is_finite() {
                    return Err(IntegratorError::NewtonDivergence {
                        stage: i + 1,
                        iterations: w,
                        residual: norm,
                    });
                }
                if w >= self.settings.min_iterations && norm < self.settings.tau {
                    break f;
                }
                if w >= self.settings.max_iterations {
                    return Err(IntegratorError::NewtonDivergence {
                        stage: i + 1,
                        iterations: w,
                        residual: norm,
                    });
                }
                let fresh;
                let factors = match self.strategy {
                    NewtonStrategy::ReusePerStep => {
                        iteration_matrix.as_ref().expect("factored above")
                    }
                    NewtonStrategy::RefactorizeEveryIteration => {
                        let j = model.jac_x(t_i, &x, u, d)?;
                        counters.jac_x_evals += 1;
                        fresh = lu_factorize(&shifted_identity(&j, hg))?;
                        counters.lu_factorizations += 1;
                        last_jac = Some((x.clone(), j));
                        &fresh
                    }
                };
                if iterated {
                    history.jac_x.push(model.jac_x(t_i, &x, u, d)?);
                    counters.jac_x_evals += 1;
                    history.jac_u.push(model.jac_u(t_i, &x, u, d)?);
                    counters.jac_u_evals += 1;
                    history.iterates.push(x.clone());
                }
                let dx = factors.solve_vec(&r)?;
                for (xi, di) in x.iter_mut().zip(&dx) {
                    *xi -= di;
                }
                w += 1;
                counters.newton_iterations += 1;
            };
            stages.push(x);
            stage_rhs.push(f_conv);
            newton_counts.push(w);
            if iterated {
                iterate_history.push(history);
            }
            if self.strategy == NewtonStrategy::RefactorizeEveryIteration {
                last_newton_jacobian.push(last_jac);
            }
        }

        let x_next = stages.last().expect("s >= 2").clone();
        let mut x_hat = x_k.to_vec();
        for (bh, f) in tab.b_hat.iter().zip(&stage_rhs) {
            axpy(h * bh, f, &mut x_hat);
        }
        let embedded_error = x_next.iter().zip(&x_hat).map(|(a, b)| a - b).collect();

        let mut record = StepRecord {
            t_start: t_k,
            h,
            x_start: x_k.to_vec(),
            x_next,
            stages,
            stage_rhs,
            iterate_history,
            newton_counts,
            embedded_error,
            jac_x_start,
            iteration_matrix,
            last_newton_jacobian,
            sens_start: sens_k.cloned(),
            stage_sens: Vec::new(),
            sens_next: None,
        };

        if self.mode != SensitivityMode::None {
            let sens_k = sens_k.ok_or_else(|| {
                IntegratorError::ContractViolation(
                    "sensitivity mode requires incoming sensitivities".into(),
                )
            })?;
            sensitivity::propagate(self, &mut record, sens_k, u, d, warm, counters)?;
        }
        Ok(record)
    }

    /// Integrates `[t_0, t_f]` in `n_steps` equal steps with constant `u`, `d`.
    ///
    /// Sensitivities (if requested) start from `∂x₀/∂x₀ = I`, `∂x₀/∂u = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn integrate_interval(
        &self,
        x0: &[f64],
        u: &[f64],
        d: &[f64],
        t0: f64,
        tf: f64,
        n_steps: usize,
        counters: &mut WorkCounters,
    ) -> Result<IntervalResult, IntegratorError> {
        if n_steps == 0 {
            return Err(IntegratorError::ContractViolation(
                "need at least one step".into(),
            ));
        }
        if !(tf > t0) {
            return Err(IntegratorError::ContractViolation(format!(
                "empty interval [{t0}, {tf}]"
            )));
        }
        if x0.len() != self.model.nx() || u.len() != self.model.nu() {
            return Err(IntegratorError::ContractViolation(
                "state or input dimension mismatch".into(),
            ));
        }
        let h = (tf - t0) / n_steps as f64;
        let svp = svp_coefficients(self.tableau, 1.0);
        let nx = self.model.nx();
        let nu = self.model.nu();

        let mut sens = (self.mode != SensitivityMode::None).then(|| {
            let mut m = Matrix::zeros(nx, nx + nu);
            for i in 0..nx {
                m[(i, i)] = 1.0;
            }
            m
        });
        let mut x = x0.to_vec();
        let mut trajectory = Vec::with_capacity(n_steps + 1);
        trajectory.push((t0, x.clone()));
        let mut records: Vec<StepRecord> = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let t_k = t0 + k as f64 * h;
            let warm = records.last().map(|r| (r, &svp));
            let rec = self.step(&x, sens.as_ref(), u, d, t_k, h, warm, counters)?;
            x.clone_from(&rec.x_next);
            sens.clone_from(&rec.sens_next);
            trajectory.push((t0 + (k + 1) as f64 * h, x.clone()));
            records.push(rec);
        }
        Ok(IntervalResult {
            x_final: x,
            sensitivities: sens.map(|m| SensitivityPair::from_combined(&m, nx)),
            trajectory,
            records,
        })
    }
}

//! Multiple-shooting transcription of the tracking OCP.
//!
//! Decision vector `w = [u₀, x₁, u₁, x₂, …, u_{Nc−1}, x_{Nc}]`, continuity
//! residuals `c_n = x_{n+1} − F_n(x_n, u_n)` with `x₀` fixed, and objective
//!
//! ```text
//! φ = (Ts/2) Σ_{n=1}^{Nc} ‖z(x_n) − z̄(n·Ts)‖²_{Qz} + ½ Σ_{j=0}^{Nc−1} ‖Δu_j‖²_{Qdu/Ts}
//! ```

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{Esdirk, IntegratorError, NewtonSettings, NewtonStrategy, WorkCounters};
use crate::linalg::{dot, Matrix};
use crate::model::OdeModel;
use crate::sensitivity::SensitivityMode;
use crate::tableau::ButcherTableau;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlpError {
    #[error("integration of control interval {interval} failed: {source}")]
    EvaluationError {
        interval: usize,
        #[source]
        source: IntegratorError,
    },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Output reference `z̄(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Setpoint {
    Constant(Vec<f64>),
    /// `before` for `t < switch_time`, `after` from `switch_time` on.
    Switch {
        before: Vec<f64>,
        after: Vec<f64>,
        switch_time: f64,
    },
}

impl Setpoint {
    pub fn at(&self, t: f64) -> Vec<f64> {
        match self {
            Setpoint::Constant(z) => z.clone(),
            Setpoint::Switch {
                before,
                after,
                switch_time,
            } => {
                if t < *switch_time {
                    before.clone()
                } else {
                    after.clone()
                }
            }
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Setpoint::Constant(z) => Some(z.len()),
            Setpoint::Switch { before, after, .. } => {
                (before.len() == after.len()).then_some(before.len())
            }
        }
    }
}

/// The benchmark reference: `[20, 30]` cm before `T/2`, `[30, 20]` cm after.
pub fn setpoint_profile(t: f64, horizon: f64) -> Vec<f64> {
    benchmark_setpoint(horizon).at(t)
}

pub fn benchmark_setpoint(horizon: f64) -> Setpoint {
    Setpoint::Switch {
        before: vec![20.0, 30.0],
        after: vec![30.0, 20.0],
        switch_time: horizon / 2.0,
    }
}

#[derive(Clone)]
pub struct OcpProblem {
    pub model: Arc<dyn OdeModel>,
    pub x0: Vec<f64>,
    pub ts: f64,
    pub nc: usize,
    /// Integration steps per control interval.
    pub n_steps: usize,
    pub qz: Matrix,
    /// Rate weight; the objective uses `Qdu / Ts`.
    pub qdu: Matrix,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub setpoint: Setpoint,
    pub u_prev: Vec<f64>,
    /// Disturbance, constant over the horizon.
    pub d: Vec<f64>,
    pub tableau: ButcherTableau,
    pub strategy: NewtonStrategy,
    pub mode: SensitivityMode,
    pub newton: NewtonSettings,
}

impl std::fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("x0", &self.x0)
            .field("ts", &self.ts)
            .field("nc", &self.nc)
            .field("n_steps", &self.n_steps)
            .field("method", &self.tableau.method)
            .field("strategy", &self.strategy)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

fn is_symmetric_psd(m: &Matrix) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m.max_abs()) {
                return false;
            }
        }
    }
    // Shifted Cholesky as a semidefiniteness test.
    let mut shifted = m.clone();
    let eps = 1e-12 * (1.0 + m.max_abs());
    for i in 0..n {
        shifted[(i, i)] += eps;
    }
    crate::linalg::Cholesky::factor(&shifted).is_ok()
}

impl OcpProblem {
    pub fn nx(&self) -> usize {
        self.model.nx()
    }
    pub fn nu(&self) -> usize {
        self.model.nu()
    }
    pub fn horizon(&self) -> f64 {
        self.ts * self.nc as f64
    }
    /// `nc · (nu + nx)`.
    pub fn n_decision(&self) -> usize {
        self.nc * (self.nu() + self.nx())
    }
    pub fn u_offset(&self, n: usize) -> usize {
        n * (self.nu() + self.nx())
    }
    /// Offset of the shooting state `x_n`, `n ≥ 1`.
    pub fn x_offset(&self, n: usize) -> usize {
        assert!(n >= 1 && n <= self.nc);
        (n - 1) * (self.nu() + self.nx()) + self.nu()
    }

    pub fn validate(&self) -> Result<(), NlpError> {
        let bad = |m: &str| Err(NlpError::InvalidProblem(m.to_string()));
        let (nx, nu) = (self.nx(), self.nu());
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad("Ts must be positive");
        }
        if self.nc == 0 || self.n_steps == 0 {
            return bad("Nc and N must be at least 1");
        }
        if self.x0.len() != nx || self.d.len() != self.model.nd() {
            return bad("x0 or d has the wrong dimension");
        }
        if self.u_min.len() != nu || self.u_max.len() != nu || self.u_prev.len() != nu {
            return bad("input bounds or u_prev have the wrong dimension");
        }
        if self.u_min.iter().zip(&self.u_max).any(|(l, u)| !(l <= u)) {
            return bad("u_min must not exceed u_max");
        }
        if self.qz.rows() != self.model.nz() || !is_symmetric_psd(&self.qz) {
            return bad("Qz must be a symmetric positive semidefinite nz x nz matrix");
        }
        if self.qdu.rows() != nu || !is_symmetric_psd(&self.qdu) {
            return bad("Qdu must be a symmetric positive semidefinite nu x nu matrix");
        }
        if self.setpoint.dim() != Some(self.model.nz()) {
            return bad("setpoint dimension must match the output dimension");
        }
        self.newton
            .validate()
            .and_then(|_| self.mode.check_strategy(self.strategy))
            .map_err(|e| NlpError::InvalidProblem(e.to_string()))
    }

    fn integrator(&self, mode: SensitivityMode) -> Result<Esdirk<'_>, NlpError> {
        Esdirk::new(
            self.model.as_ref(),
            &self.tableau,
            self.strategy,
            self.newton,
            mode,
        )
        .map_err(|e| NlpError::InvalidProblem(e.to_string()))
    }
}

/// Inputs `u₀..u_{Nc−1}` and shooting states `x₁..x_{Nc}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub u: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

impl DecisionVector {
    pub fn flatten(&self) -> Vec<f64> {
        let mut w = Vec::new();
        for (u, x) in self.u.iter().zip(&self.x) {
            w.extend_from_slice(u);
            w.extend_from_slice(x);
        }
        w
    }

    pub fn unflatten(w: &[f64], nx: usize, nu: usize) -> Result<Self, NlpError> {
        let block = nx + nu;
        if block == 0 || !w.len().is_multiple_of(block) {
            return Err(NlpError::InvalidProblem(format!(
                "decision vector length {} is not a multiple of {block}",
                w.len()
            )));
        }
        let (u, x) = w
            .chunks(block)
            .map(|c| (c[..nu].to_vec(), c[nu..].to_vec()))
            .unzip();
        Ok(Self { u, x })
    }

    fn check(&self, p: &OcpProblem) -> Result<(), NlpError> {
        let ok = self.u.len() == p.nc
            && self.x.len() == p.nc
            && self.u.iter().all(|u| u.len() == p.nu())
            && self.x.iter().all(|x| x.len() == p.nx());
        if ok {
            Ok(())
        } else {
            Err(NlpError::InvalidProblem(
                "decision vector does not match the problem dimensions".into(),
            ))
        }
    }
}

/// Everything the SQP needs at one point `w`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub phi: f64,
    pub phi_z: f64,
    pub phi_du: f64,
    pub grad: Vec<f64>,
    /// `c_n = x_{n+1} − F_n`, stacked.
    pub c: Vec<f64>,
    /// `F_n(x_n, u_n)`.
    pub f_end: Vec<Vec<f64>>,
    /// `∂F_n/∂x_n`; empty when sensitivities were not requested.
    pub a_blocks: Vec<Matrix>,
    /// `∂F_n/∂u_n`; empty when sensitivities were not requested.
    pub b_blocks: Vec<Matrix>,
    pub counters: WorkCounters,
}

impl Evaluation {
    pub fn has_jacobian(&self) -> bool {
        !self.a_blocks.is_empty()
    }

    /// Dense `∂c/∂w` with blocks `(−A_n, −B_n, I)`.
    pub fn constraint_jacobian(&self, p: &OcpProblem) -> Matrix {
        assert!(self.has_jacobian(), "evaluation carries no sensitivities");
        let nx = p.nx();
        let mut j = Matrix::zeros(p.nc * nx, p.n_decision());
        for n in 0..p.nc {
            let r0 = n * nx;
            if n >= 1 {
                j.set_block(r0, p.x_offset(n), &self.a_blocks[n].scaled(-1.0));
            }
            j.set_block(r0, p.u_offset(n), &self.b_blocks[n].scaled(-1.0));
            j.set_block(r0, p.x_offset(n + 1), &Matrix::identity(nx));
        }
        j
    }

    /// `(∂c/∂w)ᵀ λ` without forming the Jacobian.
    pub fn jacobian_tr_vec(&self, p: &OcpProblem, lambda: &[f64]) -> Vec<f64> {
        let nx = p.nx();
        let mut out = vec![0.0; p.n_decision()];
        for n in 0..p.nc {
            let l = &lambda[n * nx..(n + 1) * nx];
            let xo = p.x_offset(n + 1);
            for i in 0..nx {
                out[xo + i] += l[i];
            }
            let bt = self.b_blocks[n].tr_matvec(l);
            let uo = p.u_offset(n);
            for (k, v) in bt.iter().enumerate() {
                out[uo + k] -= v;
            }
            if n >= 1 {
                let at = self.a_blocks[n].tr_matvec(l);
                let xo = p.x_offset(n);
                for (k, v) in at.iter().enumerate() {
                    out[xo + k] -= v;
                }
            }
        }
        out
    }
}

/// Objective value, its two parts and its gradient. Integrator sensitivities
/// never enter: outputs depend on the shooting states directly.
pub fn objective(p: &OcpProblem, w: &DecisionVector) -> (f64, f64, f64, Vec<f64>) {
    let mut grad = vec![0.0; p.n_decision()];
    let mut phi_z = 0.0;
    for n in 1..=p.nc {
        let t = n as f64 * p.ts;
        let x = &w.x[n - 1];
        let u = &w.u[n - 1];
        let e: Vec<f64> = p
            .model
            .output(t, x, u, &p.d)
            .iter()
            .zip(p.setpoint.at(t))
            .map(|(z, zb)| z - zb)
            .collect();
        let qe = p.qz.matvec(&e);
        phi_z += 0.5 * p.ts * dot(&e, &qe);
        let g = p.model.output_jac_x(t, x, u, &p.d).tr_matvec(&qe);
        let xo = p.x_offset(n);
        for (k, v) in g.iter().enumerate() {
            grad[xo + k] += p.ts * v;
        }
    }
    let qbar = p.qdu.scaled(1.0 / p.ts);
    let mut phi_du = 0.0;
    let mut prev = &p.u_prev;
    for j in 0..p.nc {
        let du: Vec<f64> = w.u[j].iter().zip(prev).map(|(a, b)| a - b).collect();
        let qdu = qbar.matvec(&du);
        phi_du += 0.5 * dot(&du, &qdu);
        for (k, v) in qdu.iter().enumerate() {
            grad[p.u_offset(j) + k] += v;
            if j >= 1 {
                grad[p.u_offset(j - 1) + k] -= v;
            }
        }
        prev = &w.u[j];
    }
    (phi_z + phi_du, phi_z, phi_du, grad)
}

struct IntervalOutput {
    x_end: Vec<f64>,
    a: Option<Matrix>,
    b: Option<Matrix>,
    counters: WorkCounters,
}

fn integrate_all(
    p: &OcpProblem,
    w: &DecisionVector,
    mode: SensitivityMode,
) -> Result<Vec<IntervalOutput>, NlpError> {
    let esdirk = p.integrator(mode)?;
    (0..p.nc)
        .into_par_iter()
        .map(|n| {
            let x_start = if n == 0 { &p.x0 } else { &w.x[n - 1] };
            let t0 = n as f64 * p.ts;
            let mut counters = WorkCounters::default();
            let res = esdirk
                .integrate_interval(
                    x_start,
                    &w.u[n],
                    &p.d,
                    t0,
                    t0 + p.ts,
                    p.n_steps,
                    &mut counters,
                )
                .map_err(|source| NlpError::EvaluationError {
                    interval: n,
                    source,
                })?;
            let (a, b) = match res.sensitivities {
                Some(s) => (Some(s.wrt_x0), Some(s.wrt_u)),
                None => (None, None),
            };
            Ok(IntervalOutput {
                x_end: res.x_final,
                a,
                b,
                counters,
            })
        })
        .collect()
}

/// Objective, gradient, continuity residuals and, unless the problem's
/// sensitivity mode is `None`, the Jacobian blocks.
///
/// Work counters of every interval are summed in interval order, so the
/// result does not depend on scheduling.
pub fn evaluate(p: &OcpProblem, w: &DecisionVector) -> Result<Evaluation, NlpError> {
    evaluate_with_mode(p, w, p.mode)
}

pub fn evaluate_with_mode(
    p: &OcpProblem,
    w: &DecisionVector,
    mode: SensitivityMode,
) -> Result<Evaluation, NlpError> {
    w.check(p)?;
    let outs = integrate_all(p, w, mode)?;
    let (phi, phi_z, phi_du, grad) = objective(p, w);
    let mut c = Vec::with_capacity(p.nc * p.nx());
    let mut counters = WorkCounters::default();
    let mut a_blocks = Vec::new();
    let mut b_blocks = Vec::new();
    let mut f_end = Vec::with_capacity(p.nc);
    for (n, out) in outs.into_iter().enumerate() {
        c.extend(w.x[n].iter().zip(&out.x_end).map(|(x, f)| x - f));
        counters += out.counters;
        if let (Some(a), Some(b)) = (out.a, out.b) {
            a_blocks.push(a);
            b_blocks.push(b);
        }
        f_end.push(out.x_end);
    }
    Ok(Evaluation {
        phi,
        phi_z,
        phi_du,
        grad,
        c,
        f_end,
        a_blocks,
        b_blocks,
        counters,
    })
}

/// Constant inputs `u_value` with shooting states from forward simulation,
/// so the continuity residuals vanish.
pub fn initial_guess(
    p: &OcpProblem,
    u_value: &[f64],
) -> Result<(DecisionVector, WorkCounters), NlpError> {
    let u = vec![u_value.to_vec(); p.nc];
    let mut w = DecisionVector {
        u,
        x: Vec::with_capacity(p.nc),
    };
    let esdirk = p.integrator(SensitivityMode::None)?;
    let mut counters = WorkCounters::default();
    let mut x = p.x0.clone();
    for n in 0..p.nc {
        let t0 = n as f64 * p.ts;
        x = esdirk
            .integrate_interval(&x, &w.u[n], &p.d, t0, t0 + p.ts, p.n_steps, &mut counters)
            .map_err(|source| NlpError::EvaluationError {
                interval: n,
                source,
            })?
            .x_final;
        w.x.push(x.clone());
    }
    Ok((w, counters))
}

/// One sample of a simulated solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub z_ref: Vec<f64>,
    pub u: Vec<f64>,
}

/// Integrates each interval from its shooting state and samples every
/// integration step. The input recorded at an interval's end node is the
/// one applied over that interval; the final node repeats the last input.
pub fn simulate_trajectory(
    p: &OcpProblem,
    w: &DecisionVector,
) -> Result<Vec<TrajectoryPoint>, NlpError> {
    w.check(p)?;
    let esdirk = p.integrator(SensitivityMode::None)?;
    let mut pts = Vec::new();
    let mut counters = WorkCounters::default();
    for n in 0..p.nc {
        let x_start = if n == 0 { &p.x0 } else { &w.x[n - 1] };
        let t0 = n as f64 * p.ts;
        let res = esdirk
            .integrate_interval(
                x_start,
                &w.u[n],
                &p.d,
                t0,
                t0 + p.ts,
                p.n_steps,
                &mut counters,
            )
            .map_err(|source| NlpError::EvaluationError {
                interval: n,
                source,
            })?;
        let skip_end = n + 1 < p.nc;
        let len = res.trajectory.len() - usize::from(skip_end);
        for (t, x) in res.trajectory.into_iter().take(len) {
            pts.push(TrajectoryPoint {
                z: p.model.output(t, &x, &w.u[n], &p.d),
                z_ref: p.setpoint.at(t),
                u: w.u[n].clone(),
                t,
                x,
            });
        }
    }
    Ok(pts)
}

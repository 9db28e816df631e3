//! Sensitivities `∂x/∂x₀` and `∂x/∂u` of the ESDIRK step.
//!
//! Three engines are available:
//!
//! * **Iterated**: differentiates the Newton scheme that was actually
//!   executed. The stage sensitivity starts from the differentiated predictor
//!   and receives exactly `w_{i,k}` updates
//!   `S ← S − M_k⁻¹ [(I − hγ J(X^l)) S − ∂ψ_i − hγ [0 | ∂f/∂u(X^l)]]`,
//!   reusing the step's factorization of `M_k`.
//! * **Direct**: assumes the stage equations are solved exactly and solves
//!   the linearized stage equation once, with `M_k` standing in for the exact
//!   stage Jacobian.
//! * **BaseDirect**: like direct, but factorizes `J_i = I − hγ ∂f/∂x(X_i)` at
//!   the converged stage.
//!
//! Sensitivities are stored as combined `n_x × (n_x + n_u)` matrices
//! `[∂·/∂x₀ | ∂·/∂u]` so every solve handles all right-hand sides at once.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::integrator::{
    shifted_identity, Esdirk, IntegratorError, NewtonSettings, NewtonStrategy, StepRecord,
    WorkCounters,
};
use crate::linalg::{lu_factorize, lu_solve, LuFactors, Matrix};
use crate::model::OdeModel;
use crate::tableau::{ButcherTableau, SvpCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    Iterated,
    Direct,
    #[serde(rename = "base", alias = "basedirect")]
    BaseDirect,
    None,
}

impl SensitivityMode {
    /// Iterated and direct sensitivities reuse `M_k`; the base case needs the
    /// refactorizing Newton strategy.
    pub fn check_strategy(self, strategy: NewtonStrategy) -> Result<(), IntegratorError> {
        let ok = match self {
            SensitivityMode::Iterated | SensitivityMode::Direct => {
                strategy == NewtonStrategy::ReusePerStep
            }
            SensitivityMode::BaseDirect => strategy == NewtonStrategy::RefactorizeEveryIteration,
            SensitivityMode::None => true,
        };
        if ok {
            Ok(())
        } else {
            Err(IntegratorError::ContractViolation(format!(
                "sensitivity mode {self:?} cannot be combined with {strategy:?}"
            )))
        }
    }

    /// The Newton strategy each sensitivity mode is run with.
    pub fn natural_strategy(self) -> NewtonStrategy {
        match self {
            SensitivityMode::BaseDirect => NewtonStrategy::RefactorizeEveryIteration,
            _ => NewtonStrategy::ReusePerStep,
        }
    }
}

impl fmt::Display for SensitivityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensitivityMode::Iterated => "iterated",
            SensitivityMode::Direct => "direct",
            SensitivityMode::BaseDirect => "base",
            SensitivityMode::None => "none",
        })
    }
}

impl FromStr for SensitivityMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iterated" => Ok(SensitivityMode::Iterated),
            "direct" => Ok(SensitivityMode::Direct),
            "base" | "basedirect" | "base_direct" => Ok(SensitivityMode::BaseDirect),
            "none" => Ok(SensitivityMode::None),
            other => Err(format!(
                "unknown sensitivity mode '{other}' (expected iterated, direct or base)"
            )),
        }
    }
}

/// `(∂x/∂x₀, ∂x/∂u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPair {
    pub wrt_x0: Matrix,
    pub wrt_u: Matrix,
}

impl SensitivityPair {
    /// `(I, 0)`.
    pub fn initial(nx: usize, nu: usize) -> Self {
        Self {
            wrt_x0: Matrix::identity(nx),
            wrt_u: Matrix::zeros(nx, nu),
        }
    }

    pub fn from_combined(m: &Matrix, nx: usize) -> Self {
        let nu = m.cols() - nx;
        Self {
            wrt_x0: m.block(0, 0, m.rows(), nx),
            wrt_u: m.block(0, nx, m.rows(), nu),
        }
    }

    pub fn combined(&self) -> Matrix {
        let (r, nx, nu) = (self.wrt_x0.rows(), self.wrt_x0.cols(), self.wrt_u.cols());
        let mut m = Matrix::zeros(r, nx + nu);
        m.set_block(0, 0, &self.wrt_x0);
        m.set_block(0, nx, &self.wrt_u);
        m
    }

    /// Largest blockwise relative deviation `max|A−B| / max(max|B|, floor)`
    /// over the two blocks.
    pub fn max_relative_deviation(&self, reference: &SensitivityPair) -> f64 {
        let rel = |a: &Matrix, b: &Matrix| a.sub(b).max_abs() / b.max_abs().max(1e-300);
        rel(&self.wrt_x0, &reference.wrt_x0).max(rel(&self.wrt_u, &reference.wrt_u))
    }
}

/// Lazily evaluated Jacobians at the converged stages of one step.
struct StageJacobians<'m> {
    model: &'m dyn OdeModel,
    jx: Vec<Option<Matrix>>,
    ju: Vec<Option<Matrix>>,
}

impl<'m> StageJacobians<'m> {
    fn new(model: &'m dyn OdeModel, record: &StepRecord, s: usize) -> Self {
        let mut jx = vec![None; s];
        jx[0] = Some(record.jac_x_start.clone());
        for (i, last) in record.last_newton_jacobian.iter().enumerate() {
            // Reusable only if Newton stopped exactly on the evaluated iterate.
            if let Some((x, j)) = last {
                if *x == record.stages[i] {
                    jx[i + 1] = Some(j.clone());
                }
            }
        }
        Self {
            model,
            jx,
            ju: vec![None; s],
        }
    }

    fn stage_point<'r>(record: &'r StepRecord, tab: &ButcherTableau, j: usize) -> (f64, &'r [f64]) {
        let t = record.t_start + tab.c[j] * record.h;
        let x = if j == 0 {
            &record.x_start
        } else {
            &record.stages[j - 1]
        };
        (t, x)
    }

    fn jac_x(
        &mut self,
        record: &StepRecord,
        tab: &ButcherTableau,
        u: &[f64],
        d: &[f64],
        j: usize,
        c: &mut WorkCounters,
    ) -> Result<&Matrix, IntegratorError> {
        if self.jx[j].is_none() {
            let (t, x) = Self::stage_point(record, tab, j);
            self.jx[j] = Some(self.model.jac_x(t, x, u, d)?);
            c.jac_x_evals += 1;
        }
        Ok(self.jx[j].as_ref().unwrap())
    }

    fn jac_u(
        &mut self,
        record: &StepRecord,
        tab: &ButcherTableau,
        u: &[f64],
        d: &[f64],
        j: usize,
        c: &mut WorkCounters,
    ) -> Result<&Matrix, IntegratorError> {
        if self.ju[j].is_none() {
            let (t, x) = Self::stage_point(record, tab, j);
            self.ju[j] = Some(self.model.jac_u(t, x, u, d)?);
            c.jac_u_evals += 1;
        }
        Ok(self.ju[j].as_ref().unwrap())
    }
}

/// Adds `scale · block` to the `∂/∂u` columns of a combined matrix.
fn add_to_input_columns(m: &mut Matrix, nx: usize, scale: f64, block: &Matrix) {
    for r in 0..m.rows() {
        for k in 0..block.cols() {
            m[(r, nx + k)] += scale * block[(r, k)];
        }
    }
}

/// `[∂ψ_i/∂x₀ | ∂ψ_i/∂u]` from the sensitivities of the stages before `i`.
#[allow(clippy::too_many_arguments)]
fn psi_sensitivity(
    jacs: &mut StageJacobians<'_>,
    record: &StepRecord,
    tab: &ButcherTableau,
    u: &[f64],
    d: &[f64],
    stage: usize,
    stage_sens: &[Matrix],
    nx: usize,
    counters: &mut WorkCounters,
) -> Result<Matrix, IntegratorError> {
    let h = record.h;
    let mut dpsi = stage_sens[0].clone();
    for j in 0..stage {
        let a = tab.a[(stage, j)];
        if a == 0.0 {
            continue;
        }
        let term = jacs
            .jac_x(record, tab, u, d, j, counters)?
            .matmul(&stage_sens[j]);
        dpsi.add_scaled_assign(h * a, &term);
        let ju = jacs.jac_u(record, tab, u, d, j, counters)?;
        add_to_input_columns(&mut dpsi, nx, h * a, ju);
    }
    Ok(dpsi)
}

/// Replays the recorded Newton updates of one stage on its sensitivity.
pub fn iterated_stage_update(
    initial: &Matrix,
    dpsi: &Matrix,
    iteration_matrix: &LuFactors,
    jac_x_iterates: &[Matrix],
    jac_u_iterates: &[Matrix],
    hg: f64,
) -> Result<Matrix, IntegratorError> {
    let nx = initial.rows();
    let mut sens = initial.clone();
    for (jx, ju) in jac_x_iterates.iter().zip(jac_u_iterates) {
        let mut r = shifted_identity(jx, hg).matmul(&sens).sub(dpsi);
        add_to_input_columns(&mut r, nx, -hg, ju);
        let delta = lu_solve(iteration_matrix, &r)?;
        sens.add_scaled_assign(-1.0, &delta);
    }
    Ok(sens)
}

/// Differentiated stage value predictor: `α_i ∂x_{k−1} + Σ_j β_ij ∂X̂_j`.
fn predicted_stage_sensitivity(
    prev: &StepRecord,
    svp: &SvpCoefficients,
    stage: usize,
) -> Result<Matrix, IntegratorError> {
    let start = prev.sens_start.as_ref().ok_or_else(|| {
        IntegratorError::ContractViolation("previous step carries no sensitivities".into())
    })?;
    if prev.stage_sens.len() != svp.alpha.len() {
        return Err(IntegratorError::ContractViolation(
            "previous step carries no stage sensitivities".into(),
        ));
    }
    let i = stage - 1;
    let mut m = start.scaled(svp.alpha[i]);
    for (j, sj) in prev.stage_sens.iter().enumerate() {
        m.add_scaled_assign(svp.beta[(i, j)], sj);
    }
    Ok(m)
}

/// Propagates sensitivities through a completed step, filling
/// `record.stage_sens` and `record.sens_next`.
pub(crate) fn propagate(
    integrator: &Esdirk<'_>,
    record: &mut StepRecord,
    sens_k: &Matrix,
    u: &[f64],
    d: &[f64],
    warm: Option<(&StepRecord, &SvpCoefficients)>,
    counters: &mut WorkCounters,
) -> Result<(), IntegratorError> {
    match integrator.mode {
        SensitivityMode::Iterated => {
            iterated_propagate(integrator, record, sens_k, u, d, warm, counters)
        }
        SensitivityMode::Direct | SensitivityMode::BaseDirect => {
            direct_propagate(integrator, record, sens_k, u, d, counters)
        }
        SensitivityMode::None => Ok(()),
    }
}

/// Iterated IND: replays each stage's `w_{i,k}` Newton updates.
pub fn iterated_propagate(
    integrator: &Esdirk<'_>,
    record: &mut StepRecord,
    sens_k: &Matrix,
    u: &[f64],
    d: &[f64],
    warm: Option<(&StepRecord, &SvpCoefficients)>,
    counters: &mut WorkCounters,
) -> Result<(), IntegratorError> {
    let tab = integrator.tableau;
    let nx = integrator.model.nx();
    let hg = record.h * tab.gamma;
    if record.iterate_history.len() != tab.s - 1 {
        return Err(IntegratorError::ContractViolation(
            "iterate history missing for iterated sensitivities".into(),
        ));
    }
    let m_k = record.iteration_matrix.clone().ok_or_else(|| {
        IntegratorError::ContractViolation(
            "iterated sensitivities need the step's iteration matrix".into(),
        )
    })?;

    let mut jacs = StageJacobians::new(integrator.model, record, tab.s);
    let mut stage_sens = vec![sens_k.clone()];
    for i in 1..tab.s {
        let hist = &record.iterate_history[i - 1];
        let w = record.newton_counts[i - 1];
        if hist.jac_x.len() != w || hist.jac_u.len() != w {
            return Err(IntegratorError::ContractViolation(format!(
                "stage {} recorded {} Jacobians for {} Newton updates",
                i + 1,
                hist.jac_x.len(),
                w
            )));
        }
        let dpsi = psi_sensitivity(&mut jacs, record, tab, u, d, i, &stage_sens, nx, counters)?;
        let initial = match warm {
            Some((prev, svp)) => predicted_stage_sensitivity(prev, svp, i)?,
            None => sens_k.clone(),
        };
        let hist = &record.iterate_history[i - 1];
        let si = iterated_stage_update(&initial, &dpsi, &m_k, &hist.jac_x, &hist.jac_u, hg)?;
        stage_sens.push(si);
    }
    stage_sens.remove(0);
    record.sens_next = stage_sens.last().cloned();
    record.stage_sens = stage_sens;
    Ok(())
}

/// Direct IND from the converged stages. `Direct` solves with `M_k`,
/// `BaseDirect` factorizes the stage Jacobian at each converged stage.
pub fn direct_propagate(
    integrator: &Esdirk<'_>,
    record: &mut StepRecord,
    sens_k: &Matrix,
    u: &[f64],
    d: &[f64],
    counters: &mut WorkCounters,
) -> Result<(), IntegratorError> {
    let tab = integrator.tableau;
    let nx = integrator.model.nx();
    let hg = record.h * tab.gamma;
    let mode = integrator.mode;
    let m_k = match mode {
        SensitivityMode::Direct => Some(record.iteration_matrix.clone().ok_or_else(|| {
            IntegratorError::ContractViolation(
                "direct sensitivities need the step's iteration matrix".into(),
            )
        })?),
        SensitivityMode::BaseDirect => None,
        other => {
            return Err(IntegratorError::ContractViolation(format!(
                "direct_propagate called in mode {other:?}"
            )))
        }
    };

    let mut jacs = StageJacobians::new(integrator.model, record, tab.s);
    let mut stage_sens = vec![sens_k.clone()];
    for i in 1..tab.s {
        let mut rhs = psi_sensitivity(&mut jacs, record, tab, u, d, i, &stage_sens, nx, counters)?;
        let ju = jacs.jac_u(record, tab, u, d, i, counters)?;
        add_to_input_columns(&mut rhs, nx, hg, ju);
        let si = match &m_k {
            Some(f) => lu_solve(f, &rhs)?,
            None => {
                let jx = jacs.jac_x(record, tab, u, d, i, counters)?;
                let f = lu_factorize(&shifted_identity(jx, hg))?;
                counters.lu_factorizations += 1;
                lu_solve(&f, &rhs)?
            }
        };
        stage_sens.push(si);
    }
    stage_sens.remove(0);
    record.sens_next = stage_sens.last().cloned();
    record.stage_sens = stage_sens;
    Ok(())
}

/// Central finite differences of the integrated terminal state with respect
/// to `x₀` and `u`, using tight Newton tolerances. Perturbations are
/// `scale · (1 + |v|)` for each component `v`.
#[allow(clippy::too_many_arguments)]
pub fn fd_sensitivity_oracle(
    model: &dyn OdeModel,
    tableau: &ButcherTableau,
    x0: &[f64],
    u: &[f64],
    d: &[f64],
    t0: f64,
    tf: f64,
    n_steps: usize,
    scale: f64,
) -> Result<SensitivityPair, IntegratorError> {
    let settings = NewtonSettings {
        abs: 1e-12,
        rel: 1e-12,
        max_iterations: 100,
        ..NewtonSettings::default()
    };
    let e = Esdirk::new(
        model,
        tableau,
        NewtonStrategy::ReusePerStep,
        settings,
        SensitivityMode::None,
    )?;
    let mut scratch = WorkCounters::default();
    let mut run = |x: &[f64], v: &[f64]| -> Result<Vec<f64>, IntegratorError> {
        Ok(
            e.integrate_interval(x, v, d, t0, tf, n_steps, &mut scratch)?
                .x_final,
        )
    };
    let nx = x0.len();
    let nu = u.len();
    let mut out = SensitivityPair {
        wrt_x0: Matrix::zeros(nx, nx),
        wrt_u: Matrix::zeros(nx, nu),
    };
    for k in 0..nx {
        let delta = scale * (1.0 + x0[k].abs());
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[k] += delta;
        xm[k] -= delta;
        let fp = run(&xp, u)?;
        let fm = run(&xm, u)?;
        for i in 0..nx {
            out.wrt_x0[(i, k)] = (fp[i] - fm[i]) / (2.0 * delta);
        }
    }
    for k in 0..nu {
        let delta = scale * (1.0 + u[k].abs());
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        up[k] += delta;
        um[k] -= delta;
        let fp = run(x0, &up)?;
        let fm = run(x0, &um)?;
        for i in 0..nx {
            out.wrt_u[(i, k)] = (fp[i] - fm[i]) / (2.0 * delta);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_test_model, scalar_linear_flow, LinearModel};
    use crate::tableau::{make_tableau, Method};

    fn tight() -> NewtonSettings {
        NewtonSettings {
            abs: 1e-12,
            rel: 1e-12,
            max_iterations: 50,
            ..NewtonSettings::default()
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        model: &dyn OdeModel,
        m: Method,
        mode: SensitivityMode,
        settings: NewtonSettings,
        x0: &[f64],
        u: &[f64],
        tf: f64,
        n: usize,
    ) -> (SensitivityPair, WorkCounters) {
        let t = make_tableau(m);
        let e = Esdirk::new(model, &t, mode.natural_strategy(), settings, mode).unwrap();
        let mut c = WorkCounters::default();
        let r = e
            .integrate_interval(x0, u, &[], 0.0, tf, n, &mut c)
            .unwrap();
        (r.sensitivities.unwrap(), c)
    }

    #[test]
    fn zero_field_propagates_identity_in_every_mode() {
        let model = LinearModel::zero(2, 3);
        for m in Method::ALL {
            for mode in [
                SensitivityMode::Iterated,
                SensitivityMode::Direct,
                SensitivityMode::BaseDirect,
            ] {
                let (s, _) = run(
                    &model,
                    m,
                    mode,
                    NewtonSettings::default(),
                    &[1.0, 2.0],
                    &[0.0; 3],
                    1.0,
                    4,
                );
                assert_eq!(s, SensitivityPair::initial(2, 3), "{m} {mode}");
            }
        }
    }

    #[test]
    fn implicit_euler_state_sensitivity() {
        let model = linear_test_model(-2.0, 0.0);
        let h = 0.1;
        let (s, _) = run(
            &model,
            Method::Esdirk12,
            SensitivityMode::Iterated,
            tight(),
            &[1.0],
            &[0.0],
            h,
            1,
        );
        assert!((s.wrt_x0[(0, 0)] - 1.0 / (1.0 + 2.0 * h)).abs() < 1e-12);
        assert!((s.wrt_u[(0, 0)] - h / (1.0 + 2.0 * h)).abs() < 1e-12);
    }

    #[test]
    fn direct_and_base_coincide_on_linear_models() {
        let model = LinearModel::new(
            Matrix::from_rows(&[&[-1.0, 0.3], &[0.2, -2.0]]),
            Matrix::from_rows(&[&[1.0], &[0.5]]),
            vec![0.1, 0.0],
        );
        for m in Method::ALL {
            let (a, _) = run(
                &model,
                m,
                SensitivityMode::Direct,
                tight(),
                &[1.0, -1.0],
                &[0.5],
                2.0,
                6,
            );
            let (b, _) = run(
                &model,
                m,
                SensitivityMode::BaseDirect,
                tight(),
                &[1.0, -1.0],
                &[0.5],
                2.0,
                6,
            );
            assert!(a.max_relative_deviation(&b) < 1e-13, "{m}");
        }
    }

    #[test]
    fn oracle_on_constant_field_and_linear_flow() {
        let t = make_tableau(Method::Esdirk23);
        let constant = LinearModel::new(Matrix::zeros(1, 1), Matrix::identity(1), vec![0.0]);
        let s =
            fd_sensitivity_oracle(&constant, &t, &[1.0], &[0.3], &[], 0.0, 2.5, 5, 1e-6).unwrap();
        assert!((s.wrt_u[(0, 0)] - 2.5).abs() < 1e-8);

        let lambda = -0.7;
        let model = linear_test_model(lambda, 0.0);
        let t34 = make_tableau(Method::Esdirk34);
        let s =
            fd_sensitivity_oracle(&model, &t34, &[1.2], &[0.4], &[], 0.0, 1.0, 200, 1e-6).unwrap();
        let (_, ex0, eu) = scalar_linear_flow(lambda, 1.2, 0.4, 1.0);
        assert!((s.wrt_x0[(0, 0)] - ex0).abs() < 1e-6);
        assert!((s.wrt_u[(0, 0)] - eu).abs() < 1e-6);
    }

    #[test]
    fn iterated_replays_recorded_counts() {
        let model = crate::model::Qts::default();
        let t = make_tableau(Method::Esdirk23);
        let e = Esdirk::new(
            &model,
            &t,
            NewtonStrategy::ReusePerStep,
            NewtonSettings::default(),
            SensitivityMode::Iterated,
        )
        .unwrap();
        let mut c = WorkCounters::default();
        let r = e
            .integrate_interval(
                &[7602.7, 11404.0, 1000.0, 1000.0],
                &[300.0, 300.0],
                &[0.0, 0.0, 100.0, 100.0],
                0.0,
                10.0,
                5,
                &mut c,
            )
            .unwrap();
        for rec in &r.records {
            for (hist, &w) in rec.iterate_history.iter().zip(&rec.newton_counts) {
                assert!(w >= 1);
                assert_eq!(hist.iterates.len(), w);
                assert_eq!(hist.jac_x.len(), w);
            }
        }
        assert_eq!(c.lu_factorizations, 5);
    }

    #[test]
    fn missing_history_is_contract_violation() {
        let model = linear_test_model(-1.0, 0.0);
        let t = make_tableau(Method::Esdirk12);
        let e_none = Esdirk::new(
            &model,
            &t,
            NewtonStrategy::ReusePerStep,
            NewtonSettings::default(),
            SensitivityMode::None,
        )
        .unwrap();
        let e_it = Esdirk::new(
            &model,
            &t,
            NewtonStrategy::ReusePerStep,
            NewtonSettings::default(),
            SensitivityMode::Iterated,
        )
        .unwrap();
        let mut c = WorkCounters::default();
        let mut rec = e_none
            .step(&[1.0], None, &[0.0], &[], 0.0, 0.1, None, &mut c)
            .unwrap();
        let sens = SensitivityPair::initial(1, 1).combined();
        let err =
            iterated_propagate(&e_it, &mut rec, &sens, &[0.0], &[], None, &mut c).unwrap_err();
        assert!(matches!(err, IntegratorError::ContractViolation(_)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "base".parse::<SensitivityMode>().unwrap(),
            SensitivityMode::BaseDirect
        );
        assert_eq!(SensitivityMode::BaseDirect.to_string(), "base");
        assert!("adjoint".parse::<SensitivityMode>().is_err());
    }
}

//! ODE models `ẋ = f(t, x, u, d)` with output map `z = h(t, x, u, d)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("state component {index} is outside the model domain (value {value:e})")]
    DomainError { index: usize, value: f64 },
    #[error("invalid model parameters: {0}")]
    InvalidParameters(String),
}

/// Evaluation interface used by the integrator and the transcription.
///
/// Jacobians are returned as dense matrices: `jac_x` is `n_x × n_x`,
/// `jac_u` is `n_x × n_u` and `output_jac_x` is `n_z × n_x`.
pub trait OdeModel: Send + Sync {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn nd(&self) -> usize;
    fn nz(&self) -> usize;

    fn rhs(&self, t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError>;
    fn jac_x(&self, t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Result<Matrix, ModelError>;
    fn jac_u(&self, t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Result<Matrix, ModelError>;

    fn output(&self, t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Vec<f64>;
    fn output_jac_x(&self, t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Matrix;
}

/// Physical parameters of the quadruple tank system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QtsParameters {
    /// Outlet areas [cm²].
    pub a: [f64; 4],
    /// Tank cross sections [cm²].
    pub area: [f64; 4],
    /// Valve flow splits.
    pub gamma_valves: [f64; 2],
    /// Density [g/cm³].
    pub rho: f64,
    /// Gravity [cm/s²].
    pub g: f64,
}

impl Default for QtsParameters {
    fn default() -> Self {
        Self {
            a: [1.2272; 4],
            area: [380.1327; 4],
            gamma_valves: [0.6, 0.7],
            rho: 1.0,
            g: 981.0,
        }
    }
}

impl QtsParameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = self.a.iter().chain(&self.area).chain([&self.rho, &self.g]);
        if positive.into_iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::InvalidParameters(
                "outlet areas, cross sections, density and gravity must be positive".into(),
            ));
        }
        if self.gamma_valves.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(ModelError::InvalidParameters(
                "valve splits must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Masses below this value drain with zero outflow.
pub const QTS_MASS_FLOOR: f64 = 1e-9;

/// Quadruple tank system: states are tank masses [g], inputs the two pump
/// flows [cm³/s], disturbances additive inflows [cm³/s] to each tank, and
/// outputs the levels [cm] of the two bottom tanks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Qts {
    pub params: QtsParameters,
}

impl Qts {
    pub fn new(params: QtsParameters) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params })
    }

    fn check_state(x: &[f64]) -> Result<(), ModelError> {
        for (index, &value) in x.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ModelError::DomainError { index, value });
            }
        }
        Ok(())
    }

    /// Outflow `q_i = a_i sqrt(2 g x_i / (ρ A_i))` [cm³/s] and its derivative
    /// with respect to the mass `x_i`.
    fn outflow(&self, i: usize, xi: f64) -> (f64, f64) {
        if xi < QTS_MASS_FLOOR {
            return (0.0, 0.0);
        }
        let p = &self.params;
        let k = p.g / (p.rho * p.area[i]);
        let root = (2.0 * k * xi).sqrt();
        (p.a[i] * root, p.a[i] * k / root)
    }
}

/// `f` of the quadruple tank system.
pub fn qts_f(x: &[f64], u: &[f64], d: &[f64], p: &QtsParameters) -> Result<Vec<f64>, ModelError> {
    Qts { params: p.clone() }.rhs(0.0, x, u, d)
}

/// `(∂f/∂x, ∂f/∂u)` of the quadruple tank system.
pub fn qts_jacobians(
    x: &[f64],
    u: &[f64],
    d: &[f64],
    p: &QtsParameters,
) -> Result<(Matrix, Matrix), ModelError> {
    let m = Qts { params: p.clone() };
    Ok((m.jac_x(0.0, x, u, d)?, m.jac_u(0.0, x, u, d)?))
}

/// Bottom tank levels `z_i = x_i / (ρ A_i)`.
pub fn qts_output(x: &[f64], p: &QtsParameters) -> Vec<f64> {
    vec![x[0] / (p.rho * p.area[0]), x[1] / (p.rho * p.area[1])]
}

impl OdeModel for Qts {
    fn nx(&self) -> usize {
        4
    }
    fn nu(&self) -> usize {
        2
    }
    fn nd(&self) -> usize {
        4
    }
    fn nz(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_state(x)?;
        let p = &self.params;
        let [g1, g2] = p.gamma_valves;
        let q: Vec<f64> = (0..4).map(|i| self.outflow(i, x[i]).0).collect();
        Ok(vec![
            p.rho * (g1 * u[0] + q[2] + d[0] - q[0]),
            p.rho * (g2 * u[1] + q[3] + d[1] - q[1]),
            p.rho * ((1.0 - g2) * u[1] + d[2] - q[2]),
            p.rho * ((1.0 - g1) * u[0] + d[3] - q[3]),
        ])
    }

    fn jac_x(&self, _t: f64, x: &[f64], _u: &[f64], _d: &[f64]) -> Result<Matrix, ModelError> {
        Self::check_state(x)?;
        let rho = self.params.rho;
        let dq: Vec<f64> = (0..4).map(|i| self.outflow(i, x[i]).1).collect();
        let mut j = Matrix::zeros(4, 4);
        j[(0, 0)] = -rho * dq[0];
        j[(0, 2)] = rho * dq[2];
        j[(1, 1)] = -rho * dq[1];
        j[(1, 3)] = rho * dq[3];
        j[(2, 2)] = -rho * dq[2];
        j[(3, 3)] = -rho * dq[3];
        Ok(j)
    }

    fn jac_u(&self, _t: f64, x: &[f64], _u: &[f64], _d: &[f64]) -> Result<Matrix, ModelError> {
        Self::check_state(x)?;
        let p = &self.params;
        let [g1, g2] = p.gamma_valves;
        let mut j = Matrix::zeros(4, 2);
        j[(0, 0)] = p.rho * g1;
        j[(1, 1)] = p.rho * g2;
        j[(2, 1)] = p.rho * (1.0 - g2);
        j[(3, 0)] = p.rho * (1.0 - g1);
        Ok(j)
    }

    fn output(&self, _t: f64, x: &[f64], _u: &[f64], _d: &[f64]) -> Vec<f64> {
        qts_output(x, &self.params)
    }

    fn output_jac_x(&self, _t: f64, _x: &[f64], _u: &[f64], _d: &[f64]) -> Matrix {
        let p = &self.params;
        let mut c = Matrix::zeros(2, 4);
        c[(0, 0)] = 1.0 / (p.rho * p.area[0]);
        c[(1, 1)] = 1.0 / (p.rho * p.area[1]);
        c
    }
}

/// Linear time-invariant model `ẋ = A x + B u + w` with output `z = x`.
///
/// Used as an analytic oracle for the integrator and sensitivity code.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub forcing: Vec<f64>,
}

impl LinearModel {
    pub fn new(a: Matrix, b: Matrix, forcing: Vec<f64>) -> Self {
        assert!(a.is_square() && a.rows() == b.rows() && forcing.len() == a.rows());
        Self { a, b, forcing }
    }

    /// `ẋ ≡ 0` in `nx` states with `nu` (ignored) inputs.
    pub fn zero(nx: usize, nu: usize) -> Self {
        Self::new(Matrix::zeros(nx, nx), Matrix::zeros(nx, nu), vec![0.0; nx])
    }
}

/// Scalar `ẋ = λ x + u + forcing`.
pub fn linear_test_model(lambda: f64, forcing: f64) -> LinearModel {
    LinearModel::new(
        Matrix::from_diag(&[lambda]),
        Matrix::from_diag(&[1.0]),
        vec![forcing],
    )
}

/// Exact solution of `ẋ = λ x + v` after time `t` with its sensitivities
/// `(x(t), ∂x(t)/∂x₀, ∂x(t)/∂v)`.
pub fn scalar_linear_flow(lambda: f64, x0: f64, v: f64, t: f64) -> (f64, f64, f64) {
    let e = (lambda * t).exp();
    let phi = if lambda == 0.0 {
        t
    } else {
        (lambda * t).exp_m1() / lambda
    };
    (e * x0 + phi * v, e, phi)
}

impl OdeModel for LinearModel {
    fn nx(&self) -> usize {
        self.a.rows()
    }
    fn nu(&self) -> usize {
        self.b.cols()
    }
    fn nd(&self) -> usize {
        0
    }
    fn nz(&self) -> usize {
        self.a.rows()
    }

    fn rhs(&self, _t: f64, x: &[f64], u: &[f64], _d: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut f = self.a.matvec(x);
        let bu = self.b.matvec(u);
        for ((fi, bi), wi) in f.iter_mut().zip(bu).zip(&self.forcing) {
            *fi += bi + wi;
        }
        Ok(f)
    }

    fn jac_x(&self, _t: f64, _x: &[f64], _u: &[f64], _d: &[f64]) -> Result<Matrix, ModelError> {
        Ok(self.a.clone())
    }

    fn jac_u(&self, _t: f64, _x: &[f64], _u: &[f64], _d: &[f64]) -> Result<Matrix, ModelError> {
        Ok(self.b.clone())
    }

    fn output(&self, _t: f64, x: &[f64], _u: &[f64], _d: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn output_jac_x(&self, _t: f64, x: &[f64], _u: &[f64], _d: &[f64]) -> Matrix {
        Matrix::identity(x.len())
    }
}

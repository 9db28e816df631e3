//! Butcher tableaus for the stiffly accurate ESDIRK12/23/34 family, order
//! condition checks, and stage value predictor coefficients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Tolerance used when checking order conditions.
pub const ORDER_CONDITION_TOL: f64 = 1e-12;

/// The three ESDIRK methods supported by the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Esdirk12,
    Esdirk23,
    Esdirk34,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Esdirk12, Method::Esdirk23, Method::Esdirk34];

    pub fn name(self) -> &'static str {
        match self {
            Method::Esdirk12 => "esdirk12",
            Method::Esdirk23 => "esdirk23",
            Method::Esdirk34 => "esdirk34",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "esdirk12" => Ok(Method::Esdirk12),
            "esdirk23" => Ok(Method::Esdirk23),
            "esdirk34" => Ok(Method::Esdirk34),
            other => Err(format!(
                "unknown method '{other}' (expected esdirk12, esdirk23 or esdirk34)"
            )),
        }
    }
}

/// Coefficients of one ESDIRK method.
///
/// Stage indices are zero based in code: stage `0` is the explicit stage
/// `X_1 = x_k`, stage `s - 1` is the last (implicit) stage whose value is the
/// step result because the methods are stiffly accurate.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub method: Method,
    pub s: usize,
    pub a: Matrix,
    pub b: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub c: Vec<f64>,
    pub gamma: f64,
    pub advancing_order: usize,
    pub embedded_order: usize,
}

// ESDIRK34 coefficients: the stiffly accurate solution with c2 = 2γ, advancing
// order 3 and embedded order 4, γ the root near 0.4359 of γ³ − 3γ² + 3γ/2 − 1/6.
const E34_GAMMA: f64 = 0.435_866_521_508_458_999_42;
const E34_A31: f64 = 0.140_737_774_724_706_196_19;
const E34_A32: f64 = -0.108_365_551_381_320_799_98;
const E34_B: [f64; 3] = [
    0.102_399_400_619_910_997_68,
    -0.376_878_452_255_556_106_09,
    0.838_612_530_127_186_108_99,
];
const E34_B_HAT: [f64; 4] = [
    0.157_024_897_860_324_937_1,
    0.117_330_441_370_438_848_7,
    0.616_678_030_392_121_464_35,
    0.108_966_630_377_114_749_85,
];

/// Builds the tableau of `method`.
pub fn make_tableau(method: Method) -> ButcherTableau {
    let (gamma, a, b, b_hat, orders) = match method {
        Method::Esdirk12 => {
            // Implicit Euler advancing, trapezoidal embedded weights.
            let gamma = 1.0;
            let a = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, gamma]]);
            (gamma, a, vec![0.0, 1.0], vec![0.5, 0.5], (1, 2))
        }
        Method::Esdirk23 => {
            let gamma = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
            let b1 = 0.5 * (1.0 - gamma);
            let a = Matrix::from_rows(&[&[0.0, 0.0, 0.0], &[gamma, gamma, 0.0], &[b1, b1, gamma]]);
            let b_hat = vec![
                (6.0 * gamma - 1.0) / (12.0 * gamma),
                1.0 / (12.0 * gamma * (1.0 - 2.0 * gamma)),
                (1.0 - 3.0 * gamma) / (3.0 * (1.0 - 2.0 * gamma)),
            ];
            (gamma, a, vec![b1, b1, gamma], b_hat, (2, 3))
        }
        Method::Esdirk34 => {
            let g = E34_GAMMA;
            let a = Matrix::from_rows(&[
                &[0.0, 0.0, 0.0, 0.0],
                &[g, g, 0.0, 0.0],
                &[E34_A31, E34_A32, g, 0.0],
                &[E34_B[0], E34_B[1], E34_B[2], g],
            ]);
            let b = vec![E34_B[0], E34_B[1], E34_B[2], g];
            (g, a, b, E34_B_HAT.to_vec(), (3, 4))
        }
    };
    let s = b.len();
    let c = (0..s).map(|i| a.row(i).iter().sum()).collect();
    ButcherTableau {
        method,
        s,
        a,
        b,
        b_hat,
        c,
        gamma,
        advancing_order: orders.0,
        embedded_order: orders.1,
    }
}

impl ButcherTableau {
    /// Copy of this tableau with the embedded weights used as advancing weights.
    pub fn with_embedded_weights(&self) -> ButcherTableau {
        let mut t = self.clone();
        t.b = self.b_hat.clone();
        t.advancing_order = self.embedded_order;
        t
    }

    /// Checks the structural invariants shared by every ESDIRK tableau:
    /// explicit first stage, singly diagonal, stiffly accurate, row-sum
    /// abscissae and unit weight sums. Returns a description of the first
    /// violation.
    pub fn check_structure(&self) -> Result<(), String> {
        let s = self.s;
        let tol = ORDER_CONDITION_TOL;
        if self.a.rows() != s
            || self.a.cols() != s
            || self.b.len() != s
            || self.b_hat.len() != s
            || self.c.len() != s
        {
            return Err("inconsistent coefficient dimensions".into());
        }
        if self.a[(0, 0)] != 0.0 || self.c[0] != 0.0 {
            return Err("first stage is not explicit".into());
        }
        for i in 0..s {
            for j in (i + 1)..s {
                if self.a[(i, j)] != 0.0 {
                    return Err(format!("a[{i}][{j}] above the diagonal is nonzero"));
                }
            }
        }
        for i in 1..s {
            if self.a[(i, i)] != self.gamma {
                return Err(format!("a[{i}][{i}] differs from gamma"));
            }
        }
        for j in 0..s {
            if self.a[(s - 1, j)] != self.b[j] {
                return Err(format!("not stiffly accurate at column {j}"));
            }
        }
        for i in 0..s {
            let row_sum: f64 = self.a.row(i).iter().sum();
            if (row_sum - self.c[i]).abs() > tol {
                return Err(format!("c[{i}] is not the row sum of a"));
            }
        }
        if (self.b.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err("advancing weights do not sum to one".into());
        }
        if (self.b_hat.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err("embedded weights do not sum to one".into());
        }
        Ok(())
    }
}

/// Residuals of the rooted-tree order conditions through order `p` (1..=4)
/// for weights `b` on the stage matrix `a` with abscissae `c`.
pub fn order_condition_residuals(a: &Matrix, b: &[f64], c: &[f64], p: usize) -> Vec<f64> {
    assert!(
        (1..=4).contains(&p),
        "order conditions implemented for 1 <= p <= 4"
    );
    let s = b.len();
    let wsum = |v: &[f64]| -> f64 { b.iter().zip(v).map(|(x, y)| x * y).sum() };
    let ac = a.matvec(c);
    let mut res = vec![b.iter().sum::<f64>() - 1.0];
    if p >= 2 {
        res.push(wsum(c) - 0.5);
    }
    if p >= 3 {
        let c2: Vec<f64> = c.iter().map(|x| x * x).collect();
        res.push(wsum(&c2) - 1.0 / 3.0);
        res.push(wsum(&ac) - 1.0 / 6.0);
    }
    if p >= 4 {
        let c3: Vec<f64> = c.iter().map(|x| x * x * x).collect();
        let cac: Vec<f64> = (0..s).map(|i| c[i] * ac[i]).collect();
        let c2: Vec<f64> = c.iter().map(|x| x * x).collect();
        let ac2 = a.matvec(&c2);
        let aac = a.matvec(&ac);
        res.push(wsum(&c3) - 0.25);
        res.push(wsum(&cac) - 0.125);
        res.push(wsum(&ac2) - 1.0 / 12.0);
        res.push(wsum(&aac) - 1.0 / 24.0);
    }
    res
}

/// True iff the advancing weights of `t` satisfy every order condition
/// through order `p` to [`ORDER_CONDITION_TOL`].
pub fn verify_order_conditions(t: &ButcherTableau, p: usize) -> bool {
    order_condition_residuals(&t.a, &t.b, &t.c, p)
        .iter()
        .all(|r| r.abs() <= ORDER_CONDITION_TOL)
}

/// Stage value predictor coefficients for the implicit stages `2..=s`.
///
/// Row `i` of `beta` (and entry `i` of `alpha`) belongs to stage `i + 2` in
/// one-based stage numbering; column `j` multiplies the previous step's
/// converged stage `j + 2`, the last of which is `x_k` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SvpCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Matrix,
}

impl SvpCoefficients {
    /// Largest deviation of `alpha_i + sum_j beta_ij` from one.
    pub fn consistency_defect(&self) -> f64 {
        self.alpha
            .iter()
            .enumerate()
            .map(|(i, a)| (a + self.beta.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Lagrange extrapolation weights through the previous step's nodes
/// `{0, c_2, ..., c_s}` (in units of the previous step size), evaluated at
/// `1 + r·c_i` for each implicit stage `i`.
pub fn svp_coefficients(t: &ButcherTableau, r: f64) -> SvpCoefficients {
    assert!(r > 0.0, "step-size ratio must be positive");
    let m = t.s - 1;
    let mut nodes = Vec::with_capacity(t.s);
    nodes.push(0.0);
    nodes.extend_from_slice(&t.c[1..]);

    let mut alpha = vec![0.0; m];
    let mut beta = Matrix::zeros(m, m);
    for i in 0..m {
        let x = 1.0 + r * t.c[i + 1];
        for (k, &node) in nodes.iter().enumerate() {
            let mut w = 1.0;
            for (l, &other) in nodes.iter().enumerate() {
                if l != k {
                    w *= (x - other) / (node - other);
                }
            }
            if k == 0 {
                alpha[i] = w;
            } else {
                beta[(i, k - 1)] = w;
            }
        }
    }
    SvpCoefficients { alpha, beta }
}

/// Predicted initial Newton iterates `X_i^[0]` for the implicit stages.
///
/// `stage_values_prev` holds the previous step's converged stages
/// `X̂_2, ..., X̂_s`; the last one equals `x_k`.
pub fn predict_stages(
    coeffs: &SvpCoefficients,
    x_prev: &[f64],
    stage_values_prev: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let m = coeffs.alpha.len();
    assert_eq!(stage_values_prev.len(), m, "need s-1 previous stage values");
    (0..m)
        .map(|i| {
            let mut x: Vec<f64> = x_prev.iter().map(|v| coeffs.alpha[i] * v).collect();
            for (j, stage) in stage_values_prev.iter().enumerate() {
                crate::linalg::axpy(coeffs.beta[(i, j)], stage, &mut x);
            }
            x
        })
        .collect()
}

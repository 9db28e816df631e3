//! Dense convex QP with equality constraints and simple bounds:
//!
//! ```text
//! min ½ pᵀHp + gᵀp   s.t.   E p = e,   lb ≤ p ≤ ub
//! ```
//!
//! Multipliers follow `H p + g + Eᵀλ + μ = 0`, so a bound multiplier is
//! positive at an active upper bound and negative at an active lower bound.
//!
//! With a multiple-shooting layout the state components are eliminated
//! (condensing) and a primal active-set method runs on the remaining box
//! constrained problem in the inputs. Without a layout a KKT-based active set
//! is used, which needs a starting point that satisfies the bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, lu_factorize, Cholesky, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Block sizes of a multiple-shooting QP with variables ordered
/// `[u₀, x₁, u₁, x₂, …]` and constraint rows
/// `x_{n+1} − A_n x_n − B_n u_n = e_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShootingLayout {
    pub nx: usize,
    pub nu: usize,
    pub nc: usize,
}

impl ShootingLayout {
    fn block(&self) -> usize {
        self.nx + self.nu
    }
    pub fn n_vars(&self) -> usize {
        self.nc * self.block()
    }
    pub fn u_offset(&self, n: usize) -> usize {
        n * self.block()
    }
    /// Offset of `x_{n+1}`.
    pub fn x_offset(&self, n: usize) -> usize {
        n * self.block() + self.nu
    }
    pub fn is_input(&self, i: usize) -> bool {
        i % self.block() < self.nu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundStatus {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Matrix,
    pub g: Vec<f64>,
    pub e_mat: Matrix,
    pub e_vec: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub layout: Option<ShootingLayout>,
    /// Working set to start from, one entry per variable.
    pub working_set_hint: Option<Vec<BoundStatus>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub p: Vec<f64>,
    pub lambda_eq: Vec<f64>,
    pub mu_bounds: Vec<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    pub working_set: Vec<BoundStatus>,
}

pub const DEFAULT_MAX_ITER: usize = 500;

impl QpProblem {
    fn check(&self) -> Result<(), QpError> {
        let n = self.g.len();
        let bad = |m: String| Err(QpError::ContractViolation(m));
        if self.h.rows() != n || self.h.cols() != n {
            return bad(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.rows(),
                self.h.cols()
            ));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return bad("bound vectors have the wrong length".into());
        }
        if self.e_mat.rows() != self.e_vec.len()
            || (self.e_mat.rows() > 0 && self.e_mat.cols() != n)
        {
            return bad("equality constraints have inconsistent dimensions".into());
        }
        let scale = 1.0 + self.h.max_abs();
        for i in 0..n {
            for j in 0..i {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-12 * scale {
                    return bad(format!("H is not symmetric at ({i}, {j})"));
                }
            }
        }
        if self.lb.iter().zip(&self.ub).any(|(l, u)| !(l <= u)) {
            return bad("lb must not exceed ub".into());
        }
        if let Some(h) = &self.working_set_hint {
            if h.len() != n {
                return bad("working set hint has the wrong length".into());
            }
        }
        Ok(())
    }
}

/// Solves the QP to `qp_tol`, reporting the number of active-set iterations.
pub fn solve_qp(q: &QpProblem, qp_tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    q.check()?;
    match q.layout {
        Some(layout) => solve_condensed(q, layout, qp_tol, max_iter),
        None => solve_general(q, qp_tol, max_iter),
    }
}

/// Bound-constrained QP in the inputs only, with the map back to full space
/// `p = Z p_u + z0`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub layout: ShootingLayout,
    pub g_mat: Matrix,
    pub g_vec: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub z: Matrix,
    pub z0: Vec<f64>,
    a_blocks: Vec<Matrix>,
    b_blocks: Vec<Matrix>,
}

impl CondensedQp {
    pub fn expand(&self, p_u: &[f64]) -> Vec<f64> {
        let mut p = self.z.matvec(p_u);
        for (pi, zi) in p.iter_mut().zip(&self.z0) {
            *pi += zi;
        }
        p
    }

    /// `(λ, μ)` of the full problem at `p`.
    pub fn multipliers(&self, q: &QpProblem, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ShootingLayout { nx, nu, nc } = self.layout;
        let mut r = q.h.matvec(p);
        for (ri, gi) in r.iter_mut().zip(&q.g) {
            *ri += gi;
        }
        let mut lambda = vec![0.0; nc * nx];
        for n in (0..nc).rev() {
            let xo = self.layout.x_offset(n);
            let mut l: Vec<f64> = r[xo..xo + nx].iter().map(|v| -v).collect();
            if n + 1 < nc {
                let next = self.a_blocks[n + 1].tr_matvec(&lambda[(n + 1) * nx..(n + 2) * nx]);
                for (li, v) in l.iter_mut().zip(&next) {
                    *li += v;
                }
            }
            lambda[n * nx..(n + 1) * nx].copy_from_slice(&l);
        }
        let mut mu = vec![0.0; p.len()];
        for n in 0..nc {
            let bt = self.b_blocks[n].tr_matvec(&lambda[n * nx..(n + 1) * nx]);
            let uo = self.layout.u_offset(n);
            for k in 0..nu {
                mu[uo + k] = -(r[uo + k] - bt[k]);
            }
        }
        (lambda, mu)
    }
}

/// Eliminates the state components through the shooting constraints.
pub fn condense(q: &QpProblem) -> Result<CondensedQp, QpError> {
    let layout = q
        .layout
        .ok_or_else(|| QpError::ContractViolation("condensing needs a shooting layout".into()))?;
    let ShootingLayout { nx, nu, nc } = layout;
    let nw = layout.n_vars();
    let mismatch =
        |m: String| QpError::ContractViolation(format!("not a multiple-shooting QP: {m}"));
    if q.g.len() != nw || q.e_mat.rows() != nc * nx || q.e_mat.cols() != nw {
        return Err(mismatch("dimensions".into()));
    }

    // Extract A_n, B_n and check that nothing else is populated.
    let mut a_blocks = Vec::with_capacity(nc);
    let mut b_blocks = Vec::with_capacity(nc);
    for n in 0..nc {
        let r0 = n * nx;
        let ident = q.e_mat.block(r0, layout.x_offset(n), nx, nx);
        if ident.sub(&Matrix::identity(nx)).max_abs() != 0.0 {
            return Err(mismatch(format!(
                "row block {n} lacks the identity on x_{}",
                n + 1
            )));
        }
        b_blocks.push(q.e_mat.block(r0, layout.u_offset(n), nx, nu).scaled(-1.0));
        a_blocks.push(if n >= 1 {
            q.e_mat
                .block(r0, layout.x_offset(n - 1), nx, nx)
                .scaled(-1.0)
        } else {
            Matrix::zeros(nx, nx)
        });
        let allowed = |c: usize| {
            (c >= layout.u_offset(n) && c < layout.x_offset(n) + nx)
                || (n >= 1 && c >= layout.x_offset(n - 1) && c < layout.x_offset(n - 1) + nx)
        };
        for r in r0..r0 + nx {
            for c in 0..nw {
                if !allowed(c) && q.e_mat[(r, c)] != 0.0 {
                    return Err(mismatch(format!("unexpected coupling at ({r}, {c})")));
                }
            }
        }
    }
    for i in 0..nw {
        if !layout.is_input(i) && (q.lb[i] != f64::NEG_INFINITY || q.ub[i] != f64::INFINITY) {
            return Err(QpError::ContractViolation(format!(
                "state component {i} carries a finite bound"
            )));
        }
    }

    // p_x_{n+1} = A_n p_x_n + B_n p_u_n + e_n, p_x_0 = 0.
    let nr = nc * nu;
    let mut z = Matrix::zeros(nw, nr);
    let mut z0 = vec![0.0; nw];
    let mut dx = Matrix::zeros(nx, nr);
    let mut x0 = vec![0.0; nx];
    for n in 0..nc {
        let mut next = a_blocks[n].matmul(&dx);
        for r in 0..nx {
            for k in 0..nu {
                next[(r, n * nu + k)] += b_blocks[n][(r, k)];
            }
        }
        let mut xn = a_blocks[n].matvec(&x0);
        for (xi, ei) in xn.iter_mut().zip(&q.e_vec[n * nx..(n + 1) * nx]) {
            *xi += ei;
        }
        for k in 0..nu {
            z[(layout.u_offset(n) + k, n * nu + k)] = 1.0;
        }
        z.set_block(layout.x_offset(n), 0, &next);
        z0[layout.x_offset(n)..layout.x_offset(n) + nx].copy_from_slice(&xn);
        dx = next;
        x0 = xn;
    }

    let hz = q.h.matmul(&z);
    let mut g_mat = z.tr_matmul(&hz);
    g_mat.symmetrize();
    let mut hz0 = q.h.matvec(&z0);
    for (v, gi) in hz0.iter_mut().zip(&q.g) {
        *v += gi;
    }
    let g_vec = z.tr_matvec(&hz0);
    let pick = |v: &[f64]| {
        (0..nw)
            .filter(|&i| layout.is_input(i))
            .map(|i| v[i])
            .collect::<Vec<_>>()
    };
    Ok(CondensedQp {
        layout,
        g_mat,
        g_vec,
        lb: pick(&q.lb),
        ub: pick(&q.ub),
        z,
        z0,
        a_blocks,
        b_blocks,
    })
}

/// Result of the box-constrained active set.
#[derive(Debug, Clone)]
pub struct BoxQpResult {
    pub x: Vec<f64>,
    pub working_set: Vec<BoundStatus>,
    pub iterations: usize,
    pub status: QpStatus,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
}

fn quad_value(g: &Matrix, c: &[f64], x: &[f64]) -> f64 {
    0.5 * dot(x, &g.matvec(x)) + dot(c, x)
}

/// Primal active set for `min ½xᵀGx + cᵀx, lb ≤ x ≤ ub` with `G` positive
/// definite. Each iteration either adds a blocking bound, drops a bound with
/// a wrong-signed multiplier, or certifies optimality; ties go to the lowest
/// index.
pub fn solve_box_qp(
    g: &Matrix,
    c: &[f64],
    lb: &[f64],
    ub: &[f64],
    hint: Option<&[BoundStatus]>,
    tol: f64,
    max_iter: usize,
) -> Result<BoxQpResult, QpError> {
    let n = c.len();
    let mut ws: Vec<BoundStatus> = match hint {
        Some(h) => h
            .iter()
            .enumerate()
            .map(|(i, &s)| match s {
                BoundStatus::Lower if lb[i].is_finite() => BoundStatus::Lower,
                BoundStatus::Upper if ub[i].is_finite() => BoundStatus::Upper,
                _ => BoundStatus::Free,
            })
            .collect(),
        None => vec![BoundStatus::Free; n],
    };
    let mut x: Vec<f64> = (0..n)
        .map(|i| match ws[i] {
            BoundStatus::Lower => lb[i],
            BoundStatus::Upper => ub[i],
            BoundStatus::Free => 0.0_f64.clamp(lb[i], ub[i]),
        })
        .collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let free: Vec<usize> = (0..n).filter(|&i| ws[i] == BoundStatus::Free).collect();
        // Minimizer over the free variables with the others held.
        let mut target = x.clone();
        if !free.is_empty() {
            let mut gff = Matrix::zeros(free.len(), free.len());
            let mut rhs = vec![0.0; free.len()];
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    gff[(a, b)] = g[(i, j)];
                }
                let mut r = -c[i];
                for j in 0..n {
                    if ws[j] != BoundStatus::Free {
                        r -= g[(i, j)] * x[j];
                    }
                }
                rhs[a] = r;
            }
            let sol = Cholesky::factor(&gff)?.solve_vec(&rhs);
            for (a, &i) in free.iter().enumerate() {
                target[i] = sol[a];
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let d = target[i] - x[i];
            let (limit, side) = if d < 0.0 {
                ((lb[i] - x[i]) / d, BoundStatus::Lower)
            } else if d > 0.0 {
                ((ub[i] - x[i]) / d, BoundStatus::Upper)
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, side));
            }
        }
        if let Some((i, side)) = blocking {
            for &j in &free {
                x[j] += alpha * (target[j] - x[j]);
            }
            x[i] = if side == BoundStatus::Lower {
                lb[i]
            } else {
                ub[i]
            };
            ws[i] = side;
            trace.push(quad_value(g, c, &x));
            continue;
        }
        x = target;
        trace.push(quad_value(g, c, &x));
        // Multiplier check: at a lower bound the gradient must be >= 0, at an
        // upper bound <= 0.
        let grad = g.matvec(&x);
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            let r = grad[i] + c[i];
            let nu = match ws[i] {
                BoundStatus::Lower => r,
                BoundStatus::Upper => -r,
                BoundStatus::Free => continue,
            };
            if nu < -tol && worst.is_none_or(|(_, w)| nu < w) {
                worst = Some((i, nu));
            }
        }
        match worst {
            Some((i, _)) => ws[i] = BoundStatus::Free,
            None => {
                return Ok(BoxQpResult {
                    x,
                    working_set: ws,
                    iterations,
                    status: QpStatus::Optimal,
                    objective_trace: trace,
                })
            }
        }
    }
    Ok(BoxQpResult {
        x,
        working_set: ws,
        iterations,
        status: QpStatus::IterationLimit,
        objective_trace: trace,
    })
}

fn solve_condensed(
    q: &QpProblem,
    layout: ShootingLayout,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    let cq = condense(q)?;
    let inputs: Vec<usize> = (0..layout.n_vars())
        .filter(|&i| layout.is_input(i))
        .collect();
    let hint: Option<Vec<BoundStatus>> = q
        .working_set_hint
        .as_ref()
        .map(|h| inputs.iter().map(|&i| h[i]).collect());
    let res = solve_box_qp(
        &cq.g_mat,
        &cq.g_vec,
        &cq.lb,
        &cq.ub,
        hint.as_deref(),
        tol,
        max_iter,
    )?;
    let p = cq.expand(&res.x);
    let (lambda_eq, mut mu_bounds) = cq.multipliers(q, &p);
    let mut working_set = vec![BoundStatus::Free; p.len()];
    for (k, &i) in inputs.iter().enumerate() {
        working_set[i] = res.working_set[k];
        if working_set[i] == BoundStatus::Free {
            mu_bounds[i] = 0.0;
        }
    }
    Ok(QpSolution {
        p,
        lambda_eq,
        mu_bounds,
        iterations: res.iterations,
        status: res.status,
        working_set,
    })
}

/// Solves the equality-constrained subproblem with the bounded variables in
/// `fixed` held at `x`: returns the free values and `λ`.
fn kkt_subproblem(
    q: &QpProblem,
    ws: &[BoundStatus],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), QpError> {
    let n = q.g.len();
    let m = q.e_vec.len();
    let free: Vec<usize> = (0..n).filter(|&i| ws[i] == BoundStatus::Free).collect();
    let nf = free.len();
    let mut k = Matrix::zeros(nf + m, nf + m);
    let mut rhs = vec![0.0; nf + m];
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = q.h[(i, j)];
        }
        for r in 0..m {
            k[(a, nf + r)] = q.e_mat[(r, i)];
            k[(nf + r, a)] = q.e_mat[(r, i)];
        }
        rhs[a] = -q.g[i]
            - (0..n)
                .filter(|&j| ws[j] != BoundStatus::Free)
                .map(|j| q.h[(i, j)] * x[j])
                .sum::<f64>();
    }
    for r in 0..m {
        rhs[nf + r] = q.e_vec[r]
            - (0..n)
                .filter(|&j| ws[j] != BoundStatus::Free)
                .map(|j| q.e_mat[(r, j)] * x[j])
                .sum::<f64>();
    }
    let f = lu_factorize(&k).map_err(|e| {
        QpError::ContractViolation(format!("KKT matrix of the working set is singular ({e})"))
    })?;
    let sol = f.solve_vec(&rhs)?;
    let mut target = x.to_vec();
    for (a, &i) in free.iter().enumerate() {
        target[i] = sol[a];
    }
    Ok((target, sol[nf..].to_vec()))
}

fn solve_general(q: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let n = q.g.len();
    let m = q.e_vec.len();
    // Least-norm point of E p = e as the start.
    let mut x = if m > 0 {
        let eet = q.e_mat.matmul(&q.e_mat.transpose());
        let y = lu_factorize(&eet)?.solve_vec(&q.e_vec)?;
        q.e_mat.tr_matvec(&y)
    } else {
        vec![0.0; n]
    };
    if m == 0 {
        for i in 0..n {
            x[i] = x[i].clamp(q.lb[i], q.ub[i]);
        }
    }
    if (0..n).any(|i| x[i] < q.lb[i] - tol || x[i] > q.ub[i] + tol) {
        return Err(QpError::ContractViolation(
            "least-norm point violates the bounds; a feasible start is required".into(),
        ));
    }
    let mut ws = vec![BoundStatus::Free; n];
    let mut iterations = 0;
    let mut lambda = vec![0.0; m];
    while iterations < max_iter {
        iterations += 1;
        let (target, lam) = kkt_subproblem(q, &ws, &x)?;
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n {
            if ws[i] != BoundStatus::Free {
                continue;
            }
            let d = target[i] - x[i];
            let (limit, side) = if d < 0.0 {
                ((q.lb[i] - x[i]) / d, BoundStatus::Lower)
            } else if d > 0.0 {
                ((q.ub[i] - x[i]) / d, BoundStatus::Upper)
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, side));
            }
        }
        if let Some((i, side)) = blocking {
            for j in 0..n {
                x[j] += alpha * (target[j] - x[j]);
            }
            x[i] = if side == BoundStatus::Lower {
                q.lb[i]
            } else {
                q.ub[i]
            };
            ws[i] = side;
            continue;
        }
        x = target;
        lambda = lam;
        let mu = bound_multipliers(q, &x, &lambda, &ws);
        let worst = (0..n)
            .filter_map(|i| {
                let v = match ws[i] {
                    BoundStatus::Lower => -mu[i],
                    BoundStatus::Upper => mu[i],
                    BoundStatus::Free => return None,
                };
                (v < -tol).then_some((i, v))
            })
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, w)) if w <= v => acc,
                _ => Some((i, v)),
            });
        match worst {
            Some((i, _)) => ws[i] = BoundStatus::Free,
            None => {
                return Ok(QpSolution {
                    p: x,
                    lambda_eq: lambda,
                    mu_bounds: mu,
                    iterations,
                    status: QpStatus::Optimal,
                    working_set: ws,
                })
            }
        }
    }
    let mu = bound_multipliers(q, &x, &lambda, &ws);
    Ok(QpSolution {
        p: x,
        lambda_eq: lambda,
        mu_bounds: mu,
        iterations,
        status: QpStatus::IterationLimit,
        working_set: ws,
    })
}

fn bound_multipliers(q: &QpProblem, p: &[f64], lambda: &[f64], ws: &[BoundStatus]) -> Vec<f64> {
    let r = stationarity(q, p, lambda, &vec![0.0; p.len()]);
    r.iter()
        .zip(ws)
        .map(|(v, s)| if *s == BoundStatus::Free { 0.0 } else { -v })
        .collect()
}

/// `H p + g + Eᵀλ + μ`.
pub fn stationarity(q: &QpProblem, p: &[f64], lambda: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut r = q.h.matvec(p);
    let et = if q.e_vec.is_empty() {
        vec![0.0; p.len()]
    } else {
        q.e_mat.tr_matvec(lambda)
    };
    for i in 0..p.len() {
        r[i] += q.g[i] + et[i] + mu[i];
    }
    r
}

/// Largest violation among feasibility, bounds, stationarity, multiplier
/// sign and complementarity.
pub fn kkt_residual(q: &QpProblem, s: &QpSolution) -> f64 {
    let n = s.p.len();
    let mut worst = crate::linalg::norm_inf(&stationarity(q, &s.p, &s.lambda_eq, &s.mu_bounds));
    if !q.e_vec.is_empty() {
        let ep = q.e_mat.matvec(&s.p);
        for (a, b) in ep.iter().zip(&q.e_vec) {
            worst = worst.max((a - b).abs());
        }
    }
    for i in 0..n {
        let (p, mu) = (s.p[i], s.mu_bounds[i]);
        worst = worst.max(q.lb[i] - p).max(p - q.ub[i]);
        if mu > 0.0 && q.ub[i].is_finite() {
            worst = worst.max(mu * (q.ub[i] - p).abs());
        } else if mu < 0.0 && q.lb[i].is_finite() {
            worst = worst.max(-mu * (p - q.lb[i]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn unconstrained(h: Matrix, g: Vec<f64>, lb: Vec<f64>, ub: Vec<f64>) -> QpProblem {
        QpProblem {
            h,
            g,
            e_mat: Matrix::zeros(0, 0),
            e_vec: vec![],
            lb,
            ub,
            layout: None,
            working_set_hint: None,
        }
    }

    #[test]
    fn scalar_newton_step() {
        let q = unconstrained(
            Matrix::identity(1),
            vec![-1.0],
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
        );
        let s = solve_qp(&q, 1e-10, 50).unwrap();
        assert_eq!(s.p, vec![1.0]);
        assert_eq!(s.iterations, 1);
        assert_eq!(s.status, QpStatus::Optimal);
    }

    #[test]
    fn scalar_clipped() {
        let q = unconstrained(
            Matrix::identity(1),
            vec![-1.0],
            vec![f64::NEG_INFINITY],
            vec![0.5],
        );
        let s = solve_qp(&q, 1e-10, 50).unwrap();
        assert!((s.p[0] - 0.5).abs() < 1e-15);
        assert!((s.mu_bounds[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.working_set, vec![BoundStatus::Upper]);
        assert!(kkt_residual(&q, &s) < 1e-12);
    }

    #[test]
    fn equality_two_variables() {
        let q = QpProblem {
            e_mat: Matrix::from_rows(&[&[1.0, 1.0]]),
            e_vec: vec![0.0],
            ..unconstrained(
                Matrix::identity(2),
                vec![-1.0, 0.0],
                vec![f64::NEG_INFINITY; 2],
                vec![f64::INFINITY; 2],
            )
        };
        let s = solve_qp(&q, 1e-12, 50).unwrap();
        assert!((s.p[0] - 0.5).abs() < 1e-14 && (s.p[1] + 0.5).abs() < 1e-14);
        // H p + g + Eᵀλ = 0 gives λ = 0.5 with this sign convention.
        assert!((s.lambda_eq[0] - 0.5).abs() < 1e-14);
        assert!(kkt_residual(&q, &s) < 1e-12);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let q = QpProblem {
            e_mat: Matrix::from_rows(&[&[1.0, 0.0]]),
            e_vec: vec![2.0],
            ..unconstrained(
                Matrix::identity(2),
                vec![0.0; 2],
                vec![0.0; 2],
                vec![1.0; 2],
            )
        };
        assert!(matches!(
            solve_qp(&q, 1e-10, 50),
            Err(QpError::ContractViolation(_))
        ));
    }

    pub(crate) fn random_shooting_qp(
        rng: &mut StdRng,
        layout: ShootingLayout,
        bounded: bool,
    ) -> QpProblem {
        let n = layout.n_vars();
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut h = r.tr_matmul(&r);
        for i in 0..n {
            h[(i, i)] += 0.5;
        }
        h.symmetrize();
        let g = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ShootingLayout { nx, nu, nc } = layout;
        let mut e = Matrix::zeros(nc * nx, n);
        for k in 0..nc {
            for i in 0..nx {
                e[(k * nx + i, layout.x_offset(k) + i)] = 1.0;
                for j in 0..nu {
                    e[(k * nx + i, layout.u_offset(k) + j)] = -rng.gen_range(-1.0..1.0);
                }
                if k >= 1 {
                    for j in 0..nx {
                        e[(k * nx + i, layout.x_offset(k - 1) + j)] = -rng.gen_range(-0.8..0.8);
                    }
                }
            }
        }
        let e_vec = (0..nc * nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lb, ub): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                if bounded && layout.is_input(i) {
                    (-0.3, 0.3)
                } else {
                    (f64::NEG_INFINITY, f64::INFINITY)
                }
            })
            .unzip();
        QpProblem {
            h,
            g,
            e_mat: e,
            e_vec,
            lb,
            ub,
            layout: Some(layout),
            working_set_hint: None,
        }
    }

    #[test]
    fn condensed_matches_full_space_kkt() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..50 {
            let layout = ShootingLayout {
                nx: rng.gen_range(1..4),
                nu: rng.gen_range(1..3),
                nc: rng.gen_range(1..6),
            };
            let q = random_shooting_qp(&mut rng, layout, false);
            let condensed = solve_qp(&q, 1e-10, 100).unwrap();
            let full = solve_qp(
                &QpProblem {
                    layout: None,
                    ..q.clone()
                },
                1e-10,
                100,
            )
            .unwrap();
            for (a, b) in condensed.p.iter().zip(&full.p) {
                assert!((a - b).abs() <= 1e-8, "trial {trial}");
            }
            for (a, b) in condensed.lambda_eq.iter().zip(&full.lambda_eq) {
                assert!((a - b).abs() <= 1e-7, "trial {trial}");
            }
            assert!(kkt_residual(&q, &condensed) < 1e-8);
        }
    }

    #[test]
    fn bounded_shooting_kkt_certificate_and_monotone_objective() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..30 {
            let layout = ShootingLayout {
                nx: 3,
                nu: 2,
                nc: 4,
            };
            let q = random_shooting_qp(&mut rng, layout, true);
            let s = solve_qp(&q, 1e-10, 200).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!(kkt_residual(&q, &s) < 1e-8, "{}", kkt_residual(&q, &s));
            let cq = condense(&q).unwrap();
            let r = solve_box_qp(&cq.g_mat, &cq.g_vec, &cq.lb, &cq.ub, None, 1e-10, 200).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn warm_start_saves_iterations() {
        let mut rng = StdRng::seed_from_u64(3);
        let layout = ShootingLayout {
            nx: 2,
            nu: 2,
            nc: 5,
        };
        let q = random_shooting_qp(&mut rng, layout, true);
        let cold = solve_qp(&q, 1e-10, 200).unwrap();
        let warm = solve_qp(
            &QpProblem {
                working_set_hint: Some(cold.working_set.clone()),
                ..q.clone()
            },
            1e-10,
            200,
        )
        .unwrap();
        assert_eq!(warm.iterations, 1);
        for (a, b) in warm.p.iter().zip(&cold.p) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_interval_reduces_to_inputs() {
        let mut rng = StdRng::seed_from_u64(5);
        let layout = ShootingLayout {
            nx: 3,
            nu: 2,
            nc: 1,
        };
        let q = random_shooting_qp(&mut rng, layout, false);
        let cq = condense(&q).unwrap();
        assert_eq!(cq.g_mat.rows(), 2);
        let s = solve_qp(&q, 1e-10, 10).unwrap();
        assert!(kkt_residual(&q, &s) < 1e-9);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let mut rng = StdRng::seed_from_u64(9);
        let layout = ShootingLayout {
            nx: 2,
            nu: 1,
            nc: 3,
        };
        let mut q = random_shooting_qp(&mut rng, layout, false);
        q.e_mat[(0, layout.x_offset(2))] = 1.0;
        assert!(matches!(condense(&q), Err(QpError::ContractViolation(_))));
        let mut q = random_shooting_qp(&mut rng, layout, false);
        q.lb[layout.x_offset(0)] = -1.0;
        assert!(matches!(condense(&q), Err(QpError::ContractViolation(_))));
    }

    #[test]
    fn iteration_limit_reported() {
        let mut rng = StdRng::seed_from_u64(21);
        let layout = ShootingLayout {
            nx: 2,
            nu: 2,
            nc: 5,
        };
        let mut q = random_shooting_qp(&mut rng, layout, true);
        for i in 0..q.g.len() {
            q.g[i] *= 50.0;
        }
        let s = solve_qp(&q, 1e-10, 1).unwrap();
        assert_eq!(s.status, QpStatus::IterationLimit);
    }
}

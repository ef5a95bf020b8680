//! Dense convex QP solver.
//!
//! ```text
//!     minimize     1/2 x' H x + g' x
//!     subject to   A x  = b
//!                  C x <= d
//! ```
//!
//! Equalities are eliminated with a null-space basis from a Householder QR
//! of `A'`; the reduced problem (whose Hessian must be positive definite) is
//! solved with the dual active-set method of Goldfarb and Idnani, which needs
//! no feasible starting point and yields the multipliers directly.

use thiserror::Error;

use crate::linalg::{Cholesky, Mat, Qr};
use crate::scalar::{dot, lit, norm_inf, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("equality constraints are rank deficient")]
    RankDeficientEqualities,
    #[error("reduced Hessian is not positive definite")]
    NotConvex,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpProblem<T> {
    pub hessian: Mat<T>,
    pub gradient: Vec<T>,
    pub eq_matrix: Mat<T>,
    pub eq_rhs: Vec<T>,
    pub ineq_matrix: Mat<T>,
    pub ineq_rhs: Vec<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn unconstrained(hessian: Mat<T>, gradient: Vec<T>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: Mat::zeros(0, n),
            eq_rhs: Vec::new(),
            ineq_matrix: Mat::zeros(0, n),
            ineq_rhs: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.mul_vec(x);
        lit::<T>(0.5) * dot(x, &hx) + dot(&self.gradient, x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.hessian.rows() != n || self.hessian.cols() != n {
            return bad("hessian must be n x n");
        }
        if self.eq_matrix.cols() != n || self.eq_matrix.rows() != self.eq_rhs.len() {
            return bad("equality block");
        }
        if self.ineq_matrix.cols() != n || self.ineq_matrix.rows() != self.ineq_rhs.len() {
            return bad("inequality block");
        }
        if self.eq_matrix.rows() > n {
            return Err(QpError::RankDeficientEqualities);
        }
        Ok(())
    }

    /// First-order optimality residuals of a primal/dual pair.
    pub fn kkt_residual(&self, x: &[T], eq_mult: &[T], ineq_mult: &[T]) -> KktResidual<T> {
        let mut grad = self.hessian.mul_vec(x);
        for (gi, &ci) in grad.iter_mut().zip(&self.gradient) {
            *gi += ci;
        }
        let ct = self.ineq_matrix.tr_mul_vec(ineq_mult);
        let at = self.eq_matrix.tr_mul_vec(eq_mult);
        for i in 0..grad.len() {
            grad[i] += ct[i] + at[i];
        }
        let eq_res = self.eq_matrix.mul_vec(x);
        let primal_eq = eq_res
            .iter()
            .zip(&self.eq_rhs)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        let cx = self.ineq_matrix.mul_vec(x);
        let mut primal = primal_eq;
        let mut compl = T::zero();
        for ((&c, &d), &l) in cx.iter().zip(&self.ineq_rhs).zip(ineq_mult) {
            primal = primal.max(c - d);
            compl = compl.max((l * (c - d)).abs());
        }
        let dual = ineq_mult
            .iter()
            .fold(T::zero(), |m, &l| m.max(-l));
        KktResidual {
            stationarity: norm_inf(&grad),
            primal,
            dual,
            complementarity: compl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual<T> {
    pub stationarity: T,
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings<T> {
    /// Relative violation above which an inequality is considered broken.
    pub feasibility_tol: T,
    /// Hard cap on add/drop steps; `None` scales with problem size.
    pub max_iterations: Option<usize>,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            feasibility_tol: T::epsilon() * lit(64.0),
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    pub eq_multipliers: Vec<T>,
    pub ineq_multipliers: Vec<T>,
    pub objective: T,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktResidual<T>,
}

/// Null-space reduction of the equality block.
struct Reduction<T> {
    qr: Option<Qr<T>>,
    x_p: Vec<T>,
    /// n x (n - m) basis of the null space of A.
    z: Mat<T>,
}

fn reduce<T: Real>(p: &QpProblem<T>) -> Result<Reduction<T>, QpError> {
    let n = p.dim();
    let m = p.eq_matrix.rows();
    if m == 0 {
        return Ok(Reduction {
            qr: None,
            x_p: vec![T::zero(); n],
            z: Mat::identity(n),
        });
    }
    let qr = Qr::new(&p.eq_matrix.transpose());
    if qr.rank_ratio() < T::epsilon() * lit(1e3) {
        return Err(QpError::RankDeficientEqualities);
    }
    // A x = b with A' = Q1 R  =>  x_p = Q1 R^-T b
    let y = qr.solve_rt(&p.eq_rhs);
    let mut x_p = vec![T::zero(); n];
    for i in 0..n {
        x_p[i] = (0..m).map(|k| qr.q[(i, k)] * y[k]).sum();
    }
    let mut z = Mat::zeros(n, n - m);
    for i in 0..n {
        for j in m..n {
            z[(i, j - m)] = qr.q[(i, j)];
        }
    }
    Ok(Reduction {
        qr: Some(qr),
        x_p,
        z,
    })
}

/// Solves a convex QP to first-order optimality.
/// Re-solves the equality-constrained problem on the final active set with
/// an orthogonal factorization. The dual iteration accumulates round-off when
/// multipliers are large; the result is kept only if its multipliers stay
/// non-negative and it violates no row by more than the unpolished point.
fn polish<T: Real>(
    h: &Mat<T>,
    g: &[T],
    c: &Mat<T>,
    d: &[T],
    active: &[usize],
    w0: &[T],
    settings: &QpSettings<T>,
) -> Option<(Vec<T>, Vec<T>)> {
    let n = h.rows();
    let a = active.len();
    if a == 0 || a > n {
        return None;
    }
    let mut ct = Mat::zeros(n, a);
    for (k, &j) in active.iter().enumerate() {
        for i in 0..n {
            ct[(i, k)] = c[(j, i)];
        }
    }
    let qr = Qr::new(&ct);
    if qr.rank_ratio() <= T::epsilon() * lit(1e4) {
        return None;
    }
    // w = Q1 R^-T d_A + Q2 y
    let d_a: Vec<T> = active.iter().map(|&j| d[j]).collect();
    let t = qr.solve_rt(&d_a);
    let mut w = vec![T::zero(); n];
    for i in 0..n {
        w[i] = (0..a).map(|k| qr.q[(i, k)] * t[k]).sum();
    }
    let nz = n - a;
    if nz > 0 {
        let mut q2 = Mat::zeros(n, nz);
        for i in 0..n {
            for k in 0..nz {
                q2[(i, k)] = qr.q[(i, a + k)];
            }
        }
        let hq2 = h.mul(&q2);
        let red = q2.transpose().mul(&hq2);
        let chol = Cholesky::new(&red)?;
        let mut gr = h.mul_vec(&w);
        for (gi, &v) in gr.iter_mut().zip(g) {
            *gi += v;
        }
        let rhs: Vec<T> = q2.tr_mul_vec(&gr).into_iter().map(|v| -v).collect();
        let y = chol.solve(&rhs);
        let step = q2.mul_vec(&y);
        for (wi, si) in w.iter_mut().zip(step) {
            *wi += si;
        }
    }
    // C_A' u = -(H w + g)
    let mut grad = h.mul_vec(&w);
    for (gi, &v) in grad.iter_mut().zip(g) {
        *gi = -(*gi + v);
    }
    let q1t: Vec<T> = (0..a).map(|k| (0..n).map(|i| qr.q[(i, k)] * grad[i]).sum()).collect();
    let u = qr.solve_r(&q1t);
    let umax = u.iter().fold(T::one(), |m, &v| m.max(v.abs()));
    if u.iter().any(|&v| v < -lit::<T>(1e-9) * umax) || !w.iter().all(|v| v.is_finite()) {
        return None;
    }
    let violation = |x: &[T]| {
        (0..c.rows()).fold(T::zero(), |m, i| m.max(dot(c.row(i), x) - d[i]))
    };
    let allowed = violation(w0).max(settings.feasibility_tol);
    if violation(&w) > allowed {
        return None;
    }
    Some((w, u))
}

pub fn solve_qp<T: Real>(p: &QpProblem<T>, settings: &QpSettings<T>) -> Result<QpSolution<T>, QpError> {
    p.validate()?;
    let n = p.dim();
    let red = reduce(p)?;
    let nr = red.z.cols();
    let mi = p.ineq_matrix.rows();

    // reduced data
    let zt = red.z.transpose();
    let hz = p.hessian.mul(&red.z);
    let h_r = zt.mul(&hz);
    let mut g_full = p.hessian.mul_vec(&red.x_p);
    for (gi, &ci) in g_full.iter_mut().zip(&p.gradient) {
        *gi += ci;
    }
    let g_r = zt.mul_vec(&g_full);
    let c_r = p.ineq_matrix.mul(&red.z);
    let cx_p = p.ineq_matrix.mul_vec(&red.x_p);
    let d_r: Vec<T> = p.ineq_rhs.iter().zip(&cx_p).map(|(&d, &c)| d - c).collect();
    let row_norm: Vec<T> = (0..mi).map(|i| dot(c_r.row(i), c_r.row(i)).sqrt()).collect();

    let mut u_full = vec![T::zero(); mi];
    let mut active: Vec<usize> = Vec::new();
    let mut iterations = 0usize;

    let w = if nr == 0 {
        for i in 0..mi {
            if -d_r[i] > settings.feasibility_tol * (T::one() + p.ineq_rhs[i].abs()) {
                return Err(QpError::Infeasible);
            }
        }
        Vec::new()
    } else {
        let chol = Cholesky::new(&h_r).ok_or(QpError::NotConvex)?;
        let max_iter = settings.max_iterations.unwrap_or(10 * (mi + nr) + 50);
        let mut w: Vec<T> = chol.solve(&g_r).into_iter().map(|v| -v).collect();
        // cached L^-1 c_i
        let mut lc: Vec<Option<Vec<T>>> = vec![None; mi];
        let lc_of = |i: usize, lc: &mut Vec<Option<Vec<T>>>| -> Vec<T> {
            if lc[i].is_none() {
                let mut y = c_r.row(i).to_vec();
                chol.solve_lower_in_place(&mut y);
                lc[i] = Some(y);
            }
            lc[i].clone().unwrap()
        };
        let mut u: Vec<T> = Vec::new();
        let mut is_active = vec![false; mi];
        let tiny = T::epsilon() * lit(1e2);

        loop {
            // most violated constraint (scaled)
            let mut best: Option<(usize, T)> = None;
            for i in 0..mi {
                if is_active[i] {
                    continue;
                }
                let s = dot(c_r.row(i), &w) - d_r[i];
                if row_norm[i] <= tiny {
                    if s > settings.feasibility_tol * (T::one() + p.ineq_rhs[i].abs()) {
                        return Err(QpError::Infeasible);
                    }
                    continue;
                }
                if s > settings.feasibility_tol * (T::one() + d_r[i].abs() + row_norm[i]) {
                    let score = s / row_norm[i];
                    if best.map_or(true, |(_, b)| score > b) {
                        best = Some((i, score));
                    }
                }
            }
            let Some((p_idx, _)) = best else { break };
            let yp = lc_of(p_idx, &mut lc);
            let mut u_p = T::zero();

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpError::IterationLimit);
                }
                let a = active.len();
                let cols: Vec<Vec<T>> = active.iter().map(|&j| lc_of(j, &mut lc)).collect();
                // r = (W'W)^-1 W' y_p
                let mut r = vec![T::zero(); a];
                let mut dependent = false;
                if a > 0 {
                    let mut m = Mat::zeros(a, a);
                    for i in 0..a {
                        for j in 0..=i {
                            let v = dot(&cols[i], &cols[j]);
                            m[(i, j)] = v;
                            m[(j, i)] = v;
                        }
                    }
                    let rhs: Vec<T> = cols.iter().map(|c| dot(c, &yp)).collect();
                    match Cholesky::new(&m) {
                        Some(mc) => r = mc.solve(&rhs),
                        None => dependent = true,
                    }
                }
                // v = W r - y_p, z = L^-T v
                let mut v: Vec<T> = yp.iter().map(|&y| -y).collect();
                for (c, &rj) in cols.iter().zip(&r) {
                    for (vi, &ci) in v.iter_mut().zip(c) {
                        *vi += rj * ci;
                    }
                }
                let vv = dot(&v, &v);
                let full_step_possible = !dependent && vv > tiny * tiny * dot(&yp, &yp).max(T::one());

                // partial step: keep active multipliers non-negative
                let mut t1 = T::infinity();
                let mut block = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > T::zero() {
                        let ratio = u[k] / rk;
                        if ratio < t1 {
                            t1 = ratio;
                            block = Some(k);
                        }
                    }
                }
                let s_p = dot(c_r.row(p_idx), &w) - d_r[p_idx];
                let t2 = if full_step_possible {
                    (s_p / vv).max(T::zero())
                } else {
                    T::infinity()
                };

                if t1.is_infinite() && t2.is_infinite() {
                    return Err(QpError::Infeasible);
                }
                if t2.is_infinite() {
                    // dual step only
                    for (uk, &rk) in u.iter_mut().zip(&r) {
                        *uk -= t1 * rk;
                    }
                    u_p += t1;
                    let k = block.unwrap();
                    is_active[active[k]] = false;
                    active.remove(k);
                    u.remove(k);
                    continue;
                }
                let t = t1.min(t2);
                let mut zvec = v.clone();
                chol.solve_upper_in_place(&mut zvec);
                for (wi, &zi) in w.iter_mut().zip(&zvec) {
                    *wi += t * zi;
                }
                for (uk, &rk) in u.iter_mut().zip(&r) {
                    *uk -= t * rk;
                }
                u_p += t;
                if t2 <= t1 {
                    active.push(p_idx);
                    u.push(u_p);
                    is_active[p_idx] = true;
                    break;
                }
                let k = block.unwrap();
                is_active[active[k]] = false;
                active.remove(k);
                u.remove(k);
            }
        }
        for (&j, &uj) in active.iter().zip(&u) {
            u_full[j] = uj.max(T::zero());
        }
        match polish(&h_r, &g_r, &c_r, &d_r, &active, &w, settings) {
            Some((wp, up)) => {
                for (&j, &uj) in active.iter().zip(&up) {
                    u_full[j] = uj.max(T::zero());
                }
                wp
            }
            None => w,
        }
    };

    let mut x = red.x_p.clone();
    if nr > 0 {
        let zw = red.z.mul_vec(&w);
        for (xi, zi) in x.iter_mut().zip(zw) {
            *xi += zi;
        }
    }

    // equality multipliers from A' nu = -(H x + g + C' lambda)
    let eq_mult = match &red.qr {
        None => Vec::new(),
        Some(qr) => {
            let m = p.eq_matrix.rows();
            let mut rho = p.hessian.mul_vec(&x);
            let ct = p.ineq_matrix.tr_mul_vec(&u_full);
            for i in 0..n {
                rho[i] = -(rho[i] + p.gradient[i] + ct[i]);
            }
            let q1t_rho: Vec<T> = (0..m)
                .map(|k| (0..n).map(|i| qr.q[(i, k)] * rho[i]).sum())
                .collect();
            qr.solve_r(&q1t_rho)
        }
    };
    let kkt = p.kkt_residual(&x, &eq_mult, &u_full);
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        eq_multipliers: eq_mult,
        ineq_multipliers: u_full,
        active_set: active,
        iterations,
        kkt,
    })
}

//! Multiple-shooting trajectory optimization for both MPC phases.
//!
//! Decision vector layout: `[X_0 .. X_N, U_0 .. U_{N-1}, eps_0 .. eps_{N-1}]`,
//! slacks only present in the planning phase. Constraint groups:
//!
//! * I   dynamics `X_{k+1} = A X_k + B U_k` and the pinned initial state
//! * II  `|X_k| <= X_limit`, `|U_k| <= U_limit`, `eps_k >= 0`
//! * III `|U_{k+1} - U_k| / dt <= accel_limit` (also against the previously applied control)
//! * IV  body-frame velocity limits (tracking)
//! * V   slacked disc collision constraints on `X_{k+1}` (planning)
//!
//! The SQP keeps the exact quadratic cost Hessian and re-linearizes the
//! collision constraints each iteration. Because the negated distance is
//! concave, each linearization is an inner approximation of the feasible set.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{collision_margin, Obstacle};
use crate::linalg::Mat;
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings};
use crate::scalar::{dot, lit, to_f64, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("limit `{0}` must be non-negative")]
    NegativeLimit(&'static str),
    #[error("cost matrix `{0}` must be symmetric with non-negative diagonal")]
    BadCostMatrix(&'static str),
    #[error("non-finite iterate at SQP iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("QP subproblem failed at SQP iteration {iteration}: {source}")]
    Qp { iteration: usize, source: QpError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Planning,
    Tracking,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    /// Planning: every predicted state is pulled toward one goal.
    Goal(Vec<T>),
    /// Tracking: `states` has N+1 entries, `controls` N.
    Reference {
        states: Vec<Vec<T>>,
        controls: Vec<Vec<T>>,
    },
}

/// Body-frame velocity limits with the rotation angle used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyLimits<T> {
    pub vx: T,
    pub vy: T,
    /// One heading per control step.
    pub headings: Vec<T>,
}

/// Everything needed to assemble one phase's optimization problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec<T> {
    pub phase: Phase,
    pub horizon: usize,
    pub dt: T,
    pub initial_state: Vec<T>,
    pub q: Mat<T>,
    /// Control weight; in the planning phase the last row/column weights the slack.
    pub r: Mat<T>,
    pub target: Target<T>,
    pub state_limit: Option<Vec<T>>,
    pub control_limit: Option<Vec<T>>,
    pub accel_limit: Option<Vec<T>>,
    pub previous_control: Option<Vec<T>>,
    pub body_limits: Option<BodyLimits<T>>,
    pub obstacles: Vec<Obstacle<T>>,
    /// Collision-boundary radius per horizon state (N+1 entries).
    pub r_sigma: Vec<T>,
}

/// A validated problem instance.
#[derive(Debug, Clone)]
pub struct NlpProblem<T> {
    spec: ProblemSpec<T>,
    nx: usize,
    nu: usize,
    a: Mat<T>,
    b: Mat<T>,
}

impl<T: Real> NlpProblem<T> {
    pub fn phase(&self) -> Phase {
        self.spec.phase
    }
    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }
    pub fn state_dim(&self) -> usize {
        self.nx
    }
    pub fn control_dim(&self) -> usize {
        self.nu
    }
    pub fn spec(&self) -> &ProblemSpec<T> {
        &self.spec
    }
    pub fn dynamics(&self) -> (&Mat<T>, &Mat<T>) {
        (&self.a, &self.b)
    }
    pub fn obstacles(&self) -> &[Obstacle<T>] {
        &self.spec.obstacles
    }
    pub fn has_slack(&self) -> bool {
        self.spec.phase == Phase::Planning
    }
    pub fn collision_constraint_count(&self) -> usize {
        self.spec.obstacles.len() * self.spec.horizon
    }
    pub fn has_body_constraints(&self) -> bool {
        self.spec.body_limits.is_some()
    }
    /// No nonlinear constraints: one QP solves the problem.
    pub fn is_convex(&self) -> bool {
        self.spec.obstacles.is_empty()
    }

    fn n_states(&self) -> usize {
        (self.spec.horizon + 1) * self.nx
    }
    fn n_controls(&self) -> usize {
        self.spec.horizon * self.nu
    }
    fn n_vars(&self) -> usize {
        self.n_states() + self.n_controls() + if self.has_slack() { self.spec.horizon } else { 0 }
    }
    fn xi(&self, k: usize, i: usize) -> usize {
        k * self.nx + i
    }
    fn ui(&self, k: usize, i: usize) -> usize {
        self.n_states() + k * self.nu + i
    }
    fn ei(&self, k: usize) -> usize {
        self.n_states() + self.n_controls() + k
    }

    /// Cost Hessian `H` and linear term `c` with `f(z) = 1/2 z'Hz + c'z + const`.
    fn cost_terms(&self) -> (Mat<T>, Vec<T>, T) {
        let n = self.n_vars();
        let (nx, nu, nn) = (self.nx, self.nu, self.spec.horizon);
        let two = lit::<T>(2.0);
        let mut h = Mat::zeros(n, n);
        let mut c = vec![T::zero(); n];
        let mut k0 = T::zero();
        let q = &self.spec.q;
        let r = &self.spec.r;
        let add_state = |k: usize, target: &[T], h: &mut Mat<T>, c: &mut Vec<T>, k0: &mut T| {
            for i in 0..nx {
                for j in 0..nx {
                    h[(self.xi(k, i), self.xi(k, j))] += two * q[(i, j)];
                    c[self.xi(k, i)] -= two * q[(i, j)] * target[j];
                    *k0 += target[i] * q[(i, j)] * target[j];
                }
            }
        };
        match &self.spec.target {
            Target::Goal(g) => {
                for k in 1..=nn {
                    add_state(k, g, &mut h, &mut c, &mut k0);
                }
                // [U_k; eps_k]' R [U_k; eps_k]
                for k in 0..nn {
                    let idx: Vec<usize> = (0..nu).map(|i| self.ui(k, i)).chain([self.ei(k)]).collect();
                    for (a, &ia) in idx.iter().enumerate() {
                        for (b, &ib) in idx.iter().enumerate() {
                            h[(ia, ib)] += two * r[(a, b)];
                        }
                    }
                }
            }
            Target::Reference { states, controls } => {
                for k in 0..=nn {
                    add_state(k, &states[k], &mut h, &mut c, &mut k0);
                }
                for k in 0..nn {
                    for i in 0..nu {
                        for j in 0..nu {
                            h[(self.ui(k, i), self.ui(k, j))] += two * r[(i, j)];
                            c[self.ui(k, i)] -= two * r[(i, j)] * controls[k][j];
                            k0 += controls[k][i] * r[(i, j)] * controls[k][j];
                        }
                    }
                }
            }
        }
        (h, c, k0)
    }

    /// Constraint I: pinned initial state and dynamics defects.
    fn equalities(&self) -> (Mat<T>, Vec<T>) {
        let (nx, nu, nn) = (self.nx, self.nu, self.spec.horizon);
        let mut a_eq = Mat::zeros(nx * (nn + 1), self.n_vars());
        let mut b_eq = vec![T::zero(); nx * (nn + 1)];
        for i in 0..nx {
            a_eq[(i, self.xi(0, i))] = T::one();
            b_eq[i] = self.spec.initial_state[i];
        }
        for k in 0..nn {
            for i in 0..nx {
                let row = nx * (k + 1) + i;
                a_eq[(row, self.xi(k + 1, i))] = T::one();
                for j in 0..nx {
                    a_eq[(row, self.xi(k, j))] -= self.a[(i, j)];
                }
                for j in 0..nu {
                    a_eq[(row, self.ui(k, j))] -= self.b[(i, j)];
                }
            }
        }
        (a_eq, b_eq)
    }

    /// Constraints II, III and IV as rows `C z <= d`.
    fn linear_inequalities(&self, relaxed: bool) -> (Mat<T>, Vec<T>) {
        let (nx, nu, nn) = (self.nx, self.nu, self.spec.horizon);
        let n = self.n_vars();
        let mut rows: Vec<Vec<(usize, T)>> = Vec::new();
        let mut rhs: Vec<T> = Vec::new();
        let push_abs = |terms: Vec<(usize, T)>, bound: T, rows: &mut Vec<Vec<(usize, T)>>, rhs: &mut Vec<T>| {
            if !bound.is_finite() {
                return;
            }
            rows.push(terms.clone());
            rhs.push(bound);
            rows.push(terms.into_iter().map(|(i, v)| (i, -v)).collect());
            rhs.push(bound);
        };
        if let (Some(lim), false) = (&self.spec.state_limit, relaxed) {
            for k in 1..=nn {
                for i in 0..nx {
                    push_abs(vec![(self.xi(k, i), T::one())], lim[i], &mut rows, &mut rhs);
                }
            }
        }
        if let Some(lim) = &self.spec.control_limit {
            for k in 0..nn {
                for i in 0..nu {
                    push_abs(vec![(self.ui(k, i), T::one())], lim[i], &mut rows, &mut rhs);
                }
            }
        }
        if self.has_slack() {
            for k in 0..nn {
                rows.push(vec![(self.ei(k), -T::one())]);
                rhs.push(T::zero());
            }
        }
        if let Some(alpha) = &self.spec.accel_limit {
            let dt = self.spec.dt;
            for k in 0..nn.saturating_sub(1) {
                for i in 0..nu {
                    push_abs(
                        vec![(self.ui(k + 1, i), T::one()), (self.ui(k, i), -T::one())],
                        alpha[i] * dt,
                        &mut rows,
                        &mut rhs,
                    );
                }
            }
            if let (Some(prev), false) = (&self.spec.previous_control, relaxed) {
                for i in 0..nu {
                    let bound = alpha[i] * dt;
                    if bound.is_finite() {
                        rows.push(vec![(self.ui(0, i), T::one())]);
                        rhs.push(bound + prev[i]);
                        rows.push(vec![(self.ui(0, i), -T::one())]);
                        rhs.push(bound - prev[i]);
                    }
                }
            }
        }
        if let Some(body) = &self.spec.body_limits {
            for k in 0..nn {
                let (s, c) = body.headings[k].sin_cos();
                push_abs(
                    vec![(self.ui(k, 0), c), (self.ui(k, 1), s)],
                    body.vx,
                    &mut rows,
                    &mut rhs,
                );
                push_abs(
                    vec![(self.ui(k, 0), -s), (self.ui(k, 1), c)],
                    body.vy,
                    &mut rows,
                    &mut rhs,
                );
            }
        }
        let mut c = Mat::zeros(rows.len(), n);
        for (r, terms) in rows.iter().enumerate() {
            for &(i, v) in terms {
                c[(r, i)] += v;
            }
        }
        (c, rhs)
    }

    /// Collision constraint values and their gradients at `z`.
    fn collision_terms(&self, z: &[T]) -> Vec<(T, Vec<(usize, T)>, bool)> {
        let mut out = Vec::with_capacity(self.collision_constraint_count());
        for k in 0..self.spec.horizon {
            let (ix, iy) = (self.xi(k + 1, 0), self.xi(k + 1, 1));
            for obs in &self.spec.obstacles {
                let lin = linearize_collision(z[ix], z[iy], obs, self.spec.r_sigma[k + 1]);
                let e = self.ei(k);
                out.push((
                    lin.value - z[e],
                    vec![(ix, lin.gradient[0]), (iy, lin.gradient[1]), (e, -T::one())],
                    lin.degenerate,
                ));
            }
        }
        out
    }

    /// Evaluates the objective at a decision vector.
    pub fn objective(&self, z: &[T]) -> T {
        let (h, c, k0) = self.cost_terms();
        lit::<T>(0.5) * dot(z, &h.mul_vec(z)) + dot(&c, z) + k0
    }

    /// Cold start: every state at the initial state, zero controls and slack.
    pub fn cold_start(&self) -> Vec<T> {
        let mut z = vec![T::zero(); self.n_vars()];
        for k in 0..=self.spec.horizon {
            for i in 0..self.nx {
                z[self.xi(k, i)] = self.spec.initial_state[i];
            }
        }
        z
    }

    fn pack(&self, sol: &NlpSolution<T>) -> Option<Vec<T>> {
        let nn = self.spec.horizon;
        if sol.states.len() != nn + 1
            || sol.controls.len() != nn
            || sol.states.iter().any(|s| s.len() != self.nx)
            || sol.controls.iter().any(|u| u.len() != self.nu)
        {
            return None;
        }
        let mut z = vec![T::zero(); self.n_vars()];
        for k in 0..=nn {
            for i in 0..self.nx {
                z[self.xi(k, i)] = sol.states[k][i];
            }
        }
        for k in 0..nn {
            for i in 0..self.nu {
                z[self.ui(k, i)] = sol.controls[k][i];
            }
            if self.has_slack() {
                z[self.ei(k)] = sol.slacks.get(k).copied().unwrap_or(T::zero()).max(T::zero());
            }
        }
        Some(z)
    }

    fn unpack(&self, z: &[T]) -> (Vec<Vec<T>>, Vec<Vec<T>>, Vec<T>) {
        let nn = self.spec.horizon;
        let states = (0..=nn)
            .map(|k| (0..self.nx).map(|i| z[self.xi(k, i)]).collect())
            .collect();
        let controls = (0..nn)
            .map(|k| (0..self.nu).map(|i| z[self.ui(k, i)]).collect())
            .collect();
        let slacks = if self.has_slack() {
            (0..nn).map(|k| z[self.ei(k)]).collect()
        } else {
            Vec::new()
        };
        (states, controls, slacks)
    }

    /// Largest dynamics defect `|X_{k+1} - A X_k - B U_k|_inf` of a trajectory.
    pub fn max_defect(&self, states: &[Vec<T>], controls: &[Vec<T>]) -> T {
        let mut worst = T::zero();
        for k in 0..self.spec.horizon {
            let ax = self.a.mul_vec(&states[k]);
            let bu = self.b.mul_vec(&controls[k]);
            for i in 0..self.nx {
                worst = worst.max((states[k + 1][i] - ax[i] - bu[i]).abs());
            }
        }
        for i in 0..self.nx {
            worst = worst.max((states[0][i] - self.spec.initial_state[i]).abs());
        }
        worst
    }

    /// Collision margins `(k, obstacle index, value)` including slack, for `X_{k+1}`.
    pub fn collision_margins(&self, states: &[Vec<T>], slacks: &[T]) -> Vec<T> {
        let mut out = Vec::new();
        for k in 0..self.spec.horizon {
            for obs in &self.spec.obstacles {
                let eps = slacks.get(k).copied().unwrap_or(T::zero());
                out.push(collision_margin(
                    states[k + 1][0],
                    states[k + 1][1],
                    obs,
                    self.spec.r_sigma[k + 1],
                    eps,
                ));
            }
        }
        out
    }
}

fn check_cost<T: Real>(m: &Mat<T>, dim: usize, name: &'static str) -> Result<(), NlpError> {
    if m.rows() != dim || m.cols() != dim {
        return Err(NlpError::DimensionMismatch(format!("{name} must be {dim}x{dim}")));
    }
    if !m.is_symmetric(T::epsilon() * lit(16.0)) || (0..dim).any(|i| m[(i, i)] < T::zero()) {
        return Err(NlpError::BadCostMatrix(name));
    }
    Ok(())
}

fn check_limits<T: Real>(lim: &Option<Vec<T>>, dim: usize, name: &'static str) -> Result<(), NlpError> {
    if let Some(l) = lim {
        if l.len() != dim {
            return Err(NlpError::DimensionMismatch(format!("{name} needs {dim} entries")));
        }
        if l.iter().any(|&v| v < T::zero() || v.is_nan()) {
            return Err(NlpError::NegativeLimit(name));
        }
    }
    Ok(())
}

/// Validates a spec and assembles the point-mass dynamics `A = I`, `B = dt I`.
///
/// The planning phase keeps constraints I, II, III and V; the tracking
/// phase keeps I, II, III and IV.
pub fn build_problem<T: Real>(mut spec: ProblemSpec<T>) -> Result<NlpProblem<T>, NlpError> {
    let nx = spec.initial_state.len();
    let nu = nx;
    let nn = spec.horizon;
    if nn == 0 {
        return Err(NlpError::DimensionMismatch("horizon must be >= 1".into()));
    }
    if !(spec.dt > T::zero()) {
        return Err(NlpError::DimensionMismatch("dt must be positive".into()));
    }
    match spec.phase {
        Phase::Planning => {
            if nx != 2 {
                return Err(NlpError::DimensionMismatch("planning uses a 2-state model".into()));
            }
            spec.body_limits = None;
            if spec.r_sigma.len() != nn + 1 {
                return Err(NlpError::DimensionMismatch(format!(
                    "r_sigma needs {} entries, got {}",
                    nn + 1,
                    spec.r_sigma.len()
                )));
            }
            if spec.r_sigma.iter().any(|&r| r < T::zero()) {
                return Err(NlpError::NegativeLimit("r_sigma"));
            }
            if spec.obstacles.iter().any(|o| o.radius < T::zero()) {
                return Err(NlpError::NegativeLimit("obstacle radius"));
            }
            check_cost(&spec.q, nx, "Q")?;
            check_cost(&spec.r, nu + 1, "R")?;
            match &spec.target {
                Target::Goal(g) if g.len() == nx => {}
                _ => return Err(NlpError::DimensionMismatch("planning needs a goal of state size".into())),
            }
        }
        Phase::Tracking => {
            if nx < 2 {
                return Err(NlpError::DimensionMismatch("tracking needs planar states".into()));
            }
            spec.obstacles.clear();
            if spec.r_sigma.len() != nn + 1 {
                spec.r_sigma = vec![T::zero(); nn + 1];
            }
            check_cost(&spec.q, nx, "Q")?;
            check_cost(&spec.r, nu, "R")?;
            match &spec.target {
                Target::Reference { states, controls }
                    if states.len() == nn + 1
                        && controls.len() == nn
                        && states.iter().all(|s| s.len() == nx)
                        && controls.iter().all(|u| u.len() == nu) => {}
                _ => {
                    return Err(NlpError::DimensionMismatch(
                        "tracking needs N+1 reference states and N reference controls".into(),
                    ))
                }
            }
            if let Some(body) = &spec.body_limits {
                if body.vx < T::zero() || body.vy < T::zero() {
                    return Err(NlpError::NegativeLimit("body velocity"));
                }
                if body.headings.len() != nn {
                    return Err(NlpError::DimensionMismatch("one body heading per step".into()));
                }
            }
        }
    }
    check_limits(&spec.state_limit, nx, "state_limit")?;
    check_limits(&spec.control_limit, nu, "control_limit")?;
    check_limits(&spec.accel_limit, nu, "accel_limit")?;
    if let Some(p) = &spec.previous_control {
        if p.len() != nu {
            return Err(NlpError::DimensionMismatch("previous_control size".into()));
        }
    }
    let mut b = Mat::zeros(nx, nu);
    for i in 0..nx {
        b[(i, i)] = spec.dt;
    }
    Ok(NlpProblem {
        spec,
        nx,
        nu,
        a: Mat::identity(nx),
        b,
    })
}

/// First-order expansion of the collision margin about a robot position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionLinearization<T> {
    /// Gradient with respect to `(x, y)`.
    pub gradient: [T; 2],
    /// Margin value (zero slack) at the expansion point.
    pub value: T,
    /// Set when the robot sits on the obstacle center and the +x fallback was used.
    pub degenerate: bool,
}

pub fn linearize_collision<T: Real>(x: T, y: T, obs: &Obstacle<T>, r_sigma: T) -> CollisionLinearization<T> {
    let (dx, dy) = (x - obs.cx, y - obs.cy);
    let dist = dx.hypot(dy);
    let value = collision_margin(x, y, obs, r_sigma, T::zero());
    if dist <= T::min_positive_value().sqrt() {
        CollisionLinearization {
            gradient: [-T::one(), T::zero()],
            value,
            degenerate: true,
        }
    } else {
        CollisionLinearization {
            gradient: [-dx / dist, -dy / dist],
            value,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SqpSettings<T> {
    pub kkt_tol: T,
    pub max_iterations: usize,
    pub line_search_contraction: T,
    pub armijo: T,
    pub merit_factor: T,
    pub min_step: T,
    pub record_trace: bool,
    pub qp: QpSettings<T>,
}

impl<T: Real> Default for SqpSettings<T> {
    /// 1e-6 KKT tolerance, loosened to 1000 ulp where the scalar cannot reach it.
    fn default() -> Self {
        Self {
            kkt_tol: lit::<T>(1e-6).max(T::epsilon() * lit(1000.0)),
            max_iterations: 50,
            line_search_contraction: lit(0.5),
            armijo: lit(1e-4),
            merit_factor: lit(10.0),
            min_step: lit(1e-10),
            record_trace: false,
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Bounds coupling the first step to the past were dropped to regain feasibility.
    InfeasibleRelaxed,
}

/// One line of the optional solver trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SqpIterate {
    pub iteration: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_margin: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct NlpSolution<T> {
    pub states: Vec<Vec<T>>,
    pub controls: Vec<Vec<T>>,
    pub slacks: Vec<T>,
    pub objective: T,
    pub kkt_residual: T,
    pub max_defect: T,
    pub status: SolveStatus,
    pub iterations: usize,
    pub trace: Vec<SqpIterate>,
}

impl<T: Real> NlpSolution<T> {
    pub fn total_slack(&self) -> T {
        self.slacks.iter().copied().sum()
    }
}

/// Writes a solver trace as line-delimited JSON records.
pub fn write_trace<W: Write>(trace: &[SqpIterate], mut out: W) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

struct Residuals<T> {
    kkt: T,
    violation: T,
}

struct Evaluator<'a, T> {
    p: &'a NlpProblem<T>,
    h: Mat<T>,
    c: Vec<T>,
    k0: T,
    a_eq: Mat<T>,
    b_eq: Vec<T>,
    c_lin: Mat<T>,
    d_lin: Vec<T>,
    scaling: Vec<T>,
}

impl<'a, T: Real> Evaluator<'a, T> {
    fn new(p: &'a NlpProblem<T>, relaxed: bool) -> Self {
        let (h, c, k0) = p.cost_terms();
        let (a_eq, b_eq) = p.equalities();
        let (c_lin, d_lin) = p.linear_inequalities(relaxed);
        let scaling = (0..h.rows())
            .map(|i| if h[(i, i)] > T::one() { T::one() / h[(i, i)].sqrt() } else { T::one() })
            .collect();
        Self {
            scaling,
            p,
            h,
            c,
            k0,
            a_eq,
            b_eq,
            c_lin,
            d_lin,
        }
    }

    fn objective(&self, z: &[T]) -> T {
        lit::<T>(0.5) * dot(z, &self.h.mul_vec(z)) + dot(&self.c, z) + self.k0
    }

    fn gradient(&self, z: &[T]) -> Vec<T> {
        let mut g = self.h.mul_vec(z);
        for (gi, &ci) in g.iter_mut().zip(&self.c) {
            *gi += ci;
        }
        g
    }

    /// Sum of constraint violations (L1) and the largest single violation.
    fn violation(&self, z: &[T]) -> (T, T) {
        let mut sum = T::zero();
        let mut max = T::zero();
        for (v, &b) in self.a_eq.mul_vec(z).into_iter().zip(&self.b_eq) {
            let e = (v - b).abs();
            sum += e;
            max = max.max(e);
        }
        for (v, &d) in self.c_lin.mul_vec(z).into_iter().zip(&self.d_lin) {
            let e = (v - d).max(T::zero());
            sum += e;
            max = max.max(e);
        }
        for (val, _, _) in self.p.collision_terms(z) {
            let e = val.max(T::zero());
            sum += e;
            max = max.max(e);
        }
        (sum, max)
    }

    fn merit(&self, z: &[T], penalty: T) -> T {
        self.objective(z) + penalty * self.violation(z).0
    }

    fn qp_at(&self, z: &[T]) -> (QpProblem<T>, usize) {
        let coll = self.p.collision_terms(z);
        let n = z.len();
        let m_lin = self.c_lin.rows();
        let mut cm = Mat::zeros(m_lin + coll.len(), n);
        let mut dm = Vec::with_capacity(m_lin + coll.len());
        for i in 0..m_lin {
            cm.row_mut(i).copy_from_slice(self.c_lin.row(i));
            dm.push(self.d_lin[i]);
        }
        // c(z) + J (z' - z) <= 0  =>  J z' <= J z - c(z)
        for (j, (val, grad, _)) in coll.iter().enumerate() {
            let mut jz = T::zero();
            for &(i, g) in grad {
                cm[(m_lin + j, i)] = g;
                jz += g * z[i];
            }
            dm.push(jz - *val);
        }
        // Solve in y = z / d so that every Hessian diagonal is O(1).
        let d = &self.scaling;
        let mut h = self.h.clone();
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        let scale_cols = |m: &Mat<T>| {
            let mut out = m.clone();
            for r in 0..out.rows() {
                for (v, &dj) in out.row_mut(r).iter_mut().zip(d) {
                    *v *= dj;
                }
            }
            out
        };
        (
            QpProblem {
                hessian: h,
                gradient: self.c.iter().zip(d).map(|(&c, &di)| c * di).collect(),
                eq_matrix: scale_cols(&self.a_eq),
                eq_rhs: self.b_eq.clone(),
                ineq_matrix: scale_cols(&cm),
                ineq_rhs: dm,
            },
            m_lin,
        )
    }

    /// KKT residual of the NLP at `z` for the given multiplier estimates.
    fn residuals(&self, z: &[T], eq_mult: &[T], lin_mult: &[T], coll_mult: &[T]) -> Residuals<T> {
        let mut stat = self.gradient(z);
        let scale = stat.iter().fold(T::one(), |m, &g| m.max(g.abs()));
        let at = self.a_eq.tr_mul_vec(eq_mult);
        let ct = self.c_lin.tr_mul_vec(lin_mult);
        for i in 0..stat.len() {
            stat[i] += at[i] + ct[i];
        }
        let coll = self.p.collision_terms(z);
        let mut compl = T::zero();
        for ((val, grad, _), &l) in coll.iter().zip(coll_mult) {
            for &(i, g) in grad {
                stat[i] += l * g;
            }
            compl = compl.max((l * *val).abs());
        }
        for ((v, &d), &l) in self.c_lin.mul_vec(z).into_iter().zip(&self.d_lin).zip(lin_mult) {
            compl = compl.max((l * (v - d)).abs());
        }
        let dual = lin_mult
            .iter()
            .chain(coll_mult)
            .fold(T::zero(), |m, &l| m.max(-l));
        let stationarity = stat.iter().fold(T::zero(), |m, &s| m.max(s.abs())) / scale;
        let (_, violation) = self.violation(z);
        Residuals {
            kkt: stationarity.max(violation).max(dual).max(compl / scale),
            violation,
        }
    }
}

fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Solves the problem by SQP with an L1-merit backtracking line search.
pub fn solve_sqp<T: Real>(
    p: &NlpProblem<T>,
    warm_start: Option<&NlpSolution<T>>,
    settings: &SqpSettings<T>,
) -> Result<NlpSolution<T>, NlpError> {
    let mut z = warm_start
        .and_then(|w| p.pack(w))
        .unwrap_or_else(|| p.cold_start());
    let mut relaxed = false;
    let mut ev = Evaluator::new(p, relaxed);
    let mut penalty = T::zero();
    let mut trace = Vec::new();
    let mut kkt = T::infinity();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=settings.max_iterations {
        iterations = iter;
        if !all_finite(&z) {
            return Err(NlpError::NonFinite { iteration: iter });
        }
        let (qp, m_lin) = ev.qp_at(&z);
        let sol = match solve_qp(&qp, &settings.qp) {
            Ok(s) => s,
            Err(QpError::Infeasible) if !relaxed => {
                log::warn!("planning QP infeasible; relaxing state limits and rate coupling");
                relaxed = true;
                ev = Evaluator::new(p, relaxed);
                let (qp, _) = ev.qp_at(&z);
                solve_qp(&qp, &settings.qp).map_err(|source| NlpError::Qp { iteration: iter, source })?
            }
            Err(source) => return Err(NlpError::Qp { iteration: iter, source }),
        };
        if !all_finite(&sol.x) {
            return Err(NlpError::NonFinite { iteration: iter });
        }
        let z_qp: Vec<T> = sol.x.iter().zip(&ev.scaling).map(|(&y, &di)| y * di).collect();
        let m_lin = if relaxed { ev.c_lin.rows() } else { m_lin };
        let lin_mult = &sol.ineq_multipliers[..m_lin];
        let coll_mult = &sol.ineq_multipliers[m_lin..];

        let max_mult = sol
            .ineq_multipliers
            .iter()
            .chain(&sol.eq_multipliers)
            .fold(T::zero(), |m, &l| m.max(l.abs()));
        penalty = penalty.max(settings.merit_factor * max_mult);

        let d: Vec<T> = z_qp.iter().zip(&z).map(|(&a, &b)| a - b).collect();
        let grad = ev.gradient(&z);
        let (viol_sum, _) = ev.violation(&z);
        let slope = dot(&grad, &d) - penalty * viol_sum;
        let phi0 = ev.merit(&z, penalty);
        let mut alpha = T::one();
        let mut trial: Vec<T>;
        loop {
            trial = z.iter().zip(&d).map(|(&zi, &di)| zi + alpha * di).collect();
            if slope >= T::zero() || alpha <= settings.min_step {
                break;
            }
            // allow for round-off in the merit value near the solution
            let noise = lit::<T>(64.0) * T::epsilon() * (T::one() + phi0.abs());
            if ev.merit(&trial, penalty) <= phi0 + settings.armijo * alpha * slope + noise {
                break;
            }
            alpha *= settings.line_search_contraction;
        }
        z = trial;

        let res = ev.residuals(&z, &sol.eq_multipliers, lin_mult, coll_mult);
        kkt = res.kkt;
        if settings.record_trace {
            let max_margin = ev
                .p
                .collision_terms(&z)
                .iter()
                .fold(f64::NEG_INFINITY, |m, (v, _, _)| m.max(to_f64(*v)));
            trace.push(SqpIterate {
                iteration: iter,
                objective: to_f64(ev.objective(&z)),
                kkt_residual: to_f64(kkt),
                max_margin,
                step: to_f64(alpha),
            });
        }
        log::trace!("sqp iter {iter}: kkt {kkt:?} step {alpha:?} viol {:?}", res.violation);
        if kkt <= settings.kkt_tol {
            status = if relaxed {
                SolveStatus::InfeasibleRelaxed
            } else {
                SolveStatus::Converged
            };
            break;
        }
    }
    if !all_finite(&z) {
        return Err(NlpError::NonFinite { iteration: iterations });
    }
    if status == SolveStatus::MaxIterations {
        log::debug!("SQP stopped after {iterations} iterations, kkt {kkt:?}");
    }
    let (states, controls, slacks) = p.unpack(&z);
    let max_defect = p.max_defect(&states, &controls);
    Ok(NlpSolution {
        objective: ev.objective(&z),
        states,
        controls,
        slacks,
        kkt_residual: kkt,
        max_defect,
        status,
        iterations,
        trace,
    })
}

//! Two-phase controller: waypoint planning toward the goal and reference
//! tracking at the finer control period.

use serde::{Deserialize, Serialize};

use crate::geometry::{Control2, Control3, Obstacle, State2, State3};
use crate::linalg::Mat;
use crate::nlp::{
    build_problem, solve_sqp, BodyLimits, NlpError, NlpSolution, Phase, ProblemSpec, SolveStatus,
    SqpSettings, Target,
};
use crate::scalar::{lit, Real};
use crate::spline::unwrap_near;

/// Planning-phase weights and limits. The slack is penalized quadratically
/// with `slack_weight` (the last diagonal entry of the control weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PlannerConfig<T> {
    pub horizon: usize,
    pub dt: T,
    pub q: [T; 2],
    pub r: [T; 2],
    pub slack_weight: T,
    pub state_limit: [T; 2],
    pub control_limit: [T; 2],
    pub accel_limit: Option<[T; 2]>,
}

impl<T: Real> Default for PlannerConfig<T> {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: lit(0.1),
            q: [T::one(), T::one()],
            r: [lit(0.1), lit(0.1)],
            slack_weight: lit(1e9),
            state_limit: [lit(50.0), lit(50.0)],
            control_limit: [lit(1.5), lit(1.5)],
            accel_limit: Some([lit(4.0), lit(4.0)]),
        }
    }
}

impl<T: Real> PlannerConfig<T> {
    pub fn validate(&self) -> Result<(), NlpError> {
        if self.horizon < 2 {
            return Err(NlpError::DimensionMismatch("planner horizon must be >= 2".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(NlpError::DimensionMismatch("planner dt must be positive".into()));
        }
        Ok(())
    }
}

/// Tracking-phase weights and limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct TrackerConfig<T> {
    pub horizon: usize,
    pub dt: T,
    pub q: [T; 3],
    pub r: [T; 3],
    /// Body-frame forward and lateral speed limits.
    pub body_vx_limit: T,
    pub body_vy_limit: T,
    pub yaw_rate_limit: T,
    pub accel_limit: Option<[T; 3]>,
}

impl<T: Real> Default for TrackerConfig<T> {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: lit(0.005),
            q: [lit(100.0), lit(100.0), lit(10.0)],
            r: [lit(1.0), lit(1.0), lit(0.1)],
            body_vx_limit: lit(1.5),
            body_vy_limit: lit(0.5),
            yaw_rate_limit: lit(3.0),
            accel_limit: None,
        }
    }
}

/// Solves the planning problem from `current` toward `goal`.
///
/// `r_sigma_horizon[k]` is the collision radius used for planned state `k`
/// (states 1..=N are constrained; entry 0 belongs to the current state).
pub fn plan_step<T: Real>(
    current: State2<T>,
    goal: State2<T>,
    obstacles: &[Obstacle<T>],
    r_sigma_horizon: &[T],
    cfg: &PlannerConfig<T>,
    previous_control: Option<Control2<T>>,
    warm: Option<&NlpSolution<T>>,
    settings: &SqpSettings<T>,
) -> Result<NlpSolution<T>, NlpError> {
    cfg.validate()?;
    let spec = ProblemSpec {
        phase: Phase::Planning,
        horizon: cfg.horizon,
        dt: cfg.dt,
        initial_state: vec![current.x, current.y],
        q: Mat::from_diag(&cfg.q),
        r: Mat::from_diag(&[cfg.r[0], cfg.r[1], cfg.slack_weight]),
        target: Target::Goal(vec![goal.x, goal.y]),
        state_limit: Some(cfg.state_limit.to_vec()),
        control_limit: Some(cfg.control_limit.to_vec()),
        accel_limit: cfg.accel_limit.map(|a| a.to_vec()),
        previous_control: previous_control.map(|u| vec![u.vx, u.vy]),
        body_limits: None,
        obstacles: obstacles.to_vec(),
        r_sigma: r_sigma_horizon.to_vec(),
    };
    let problem = build_problem(spec)?;
    let sol = solve_sqp(&problem, warm, settings)?;
    if sol.status == SolveStatus::MaxIterations {
        log::warn!(
            "planner hit the iteration limit (kkt {:?}); using best iterate",
            sol.kkt_residual
        );
    }
    Ok(sol)
}

#[derive(Debug, Clone)]
pub struct TrackOutput<T> {
    pub command: Control3<T>,
    pub solution: NlpSolution<T>,
}

/// Pads or truncates a reference to `n + 1` samples by holding the last one.
pub fn pad_reference<T: Real>(refs: &[(State3<T>, Control3<T>)], n: usize) -> Vec<(State3<T>, Control3<T>)> {
    assert!(!refs.is_empty(), "empty reference");
    let last = *refs.last().unwrap();
    (0..=n).map(|k| refs.get(k).copied().unwrap_or(last)).collect()
}

/// Solves the tracking problem and returns the first control.
///
/// Reference headings are unwrapped next to the current heading so the
/// quadratic heading error never sees a 2π jump. Body-frame limits rotate by
/// the current heading at step 0 and the reference heading afterwards.
pub fn track_step<T: Real>(
    current: State3<T>,
    refs: &[(State3<T>, Control3<T>)],
    cfg: &TrackerConfig<T>,
    previous_control: Option<Control3<T>>,
    warm: Option<&NlpSolution<T>>,
    settings: &SqpSettings<T>,
) -> Result<TrackOutput<T>, NlpError> {
    let n = cfg.horizon;
    if n == 0 {
        return Err(NlpError::DimensionMismatch("tracker horizon must be >= 1".into()));
    }
    if refs.is_empty() {
        return Err(NlpError::DimensionMismatch("empty tracking reference".into()));
    }
    let refs = pad_reference(refs, n);
    let mut psi = current.psi;
    let mut states = Vec::with_capacity(n + 1);
    for (x, _) in &refs {
        psi = unwrap_near(x.psi, psi);
        states.push(vec![x.x, x.y, psi]);
    }
    let controls: Vec<Vec<T>> = refs[..n]
        .iter()
        .map(|(_, u)| vec![u.vx, u.vy, u.psi_dot])
        .collect();
    let mut headings: Vec<T> = states[..n].iter().map(|s| s[2]).collect();
    headings[0] = current.psi;
    let inf = T::infinity();
    let spec = ProblemSpec {
        phase: Phase::Tracking,
        horizon: n,
        dt: cfg.dt,
        initial_state: vec![current.x, current.y, current.psi],
        q: Mat::from_diag(&cfg.q),
        r: Mat::from_diag(&cfg.r),
        target: Target::Reference { states, controls },
        state_limit: None,
        control_limit: Some(vec![inf, inf, cfg.yaw_rate_limit]),
        accel_limit: cfg.accel_limit.map(|a| a.to_vec()),
        previous_control: previous_control.map(|u| vec![u.vx, u.vy, u.psi_dot]),
        body_limits: Some(BodyLimits {
            vx: cfg.body_vx_limit,
            vy: cfg.body_vy_limit,
            headings,
        }),
        obstacles: Vec::new(),
        r_sigma: Vec::new(),
    };
    let problem = build_problem(spec)?;
    let warm = warm.filter(|w| w.states.first().map_or(false, |s| s.len() == 3));
    let solution = solve_sqp(&problem, warm, settings)?;
    let u = &solution.controls[0];
    Ok(TrackOutput {
        command: Control3::new(u[0], u[1], u[2]),
        solution,
    })
}

/// Shifts a solution one step forward in time, duplicating the final entries.
pub fn shift_warm_start<T: Real>(prev: &NlpSolution<T>) -> NlpSolution<T> {
    fn shift<V: Clone>(v: &[V]) -> Vec<V> {
        if v.is_empty() {
            return Vec::new();
        }
        let mut out: Vec<V> = v[1..].to_vec();
        out.push(v[v.len() - 1].clone());
        out
    }
    NlpSolution {
        states: shift(&prev.states),
        controls: shift(&prev.controls),
        slacks: shift(&prev.slacks),
        trace: Vec::new(),
        ..prev.clone()
    }
}

/// Planned waypoints of a planning solution.
pub fn planned_states<T: Real>(sol: &NlpSolution<T>) -> Vec<State2<T>> {
    sol.states.iter().map(|s| State2::new(s[0], s[1])).collect()
}

/// Planned velocities of a planning solution.
pub fn planned_controls<T: Real>(sol: &NlpSolution<T>) -> Vec<Control2<T>> {
    sol.controls.iter().map(|u| Control2::new(u[0], u[1])).collect()
}

/// Smallest `distance - obstacle radius` over planned states 1..=N.
pub fn min_plan_clearance<T: Real>(sol: &NlpSolution<T>, obstacles: &[Obstacle<T>]) -> T {
    let mut best = T::infinity();
    for s in &sol.states[1..] {
        for o in obstacles {
            best = best.min((s[0] - o.cx).hypot(s[1] - o.cy) - o.radius);
        }
    }
    best
}

/// Planner with warm-start memory across cycles.
#[derive(Debug, Clone)]
pub struct Planner<T> {
    pub cfg: PlannerConfig<T>,
    pub settings: SqpSettings<T>,
    last: Option<NlpSolution<T>>,
}

impl<T: Real> Planner<T> {
    pub fn new(cfg: PlannerConfig<T>) -> Self {
        Self {
            cfg,
            settings: SqpSettings::default(),
            last: None,
        }
    }

    pub fn last_solution(&self) -> Option<&NlpSolution<T>> {
        self.last.as_ref()
    }

    pub fn plan(
        &mut self,
        current: State2<T>,
        goal: State2<T>,
        obstacles: &[Obstacle<T>],
        r_sigma_horizon: &[T],
        previous_control: Option<Control2<T>>,
    ) -> Result<&NlpSolution<T>, NlpError> {
        let warm = self.last.as_ref().map(shift_warm_start);
        let sol = plan_step(
            current,
            goal,
            obstacles,
            r_sigma_horizon,
            &self.cfg,
            previous_control,
            warm.as_ref(),
            &self.settings,
        )?;
        self.last = Some(sol);
        Ok(self.last.as_ref().unwrap())
    }
}

/// Tracker with warm-start memory across control steps.
#[derive(Debug, Clone)]
pub struct Tracker<T> {
    pub cfg: TrackerConfig<T>,
    pub settings: SqpSettings<T>,
    last: Option<NlpSolution<T>>,
    last_command: Option<Control3<T>>,
}

impl<T: Real> Tracker<T> {
    pub fn new(cfg: TrackerConfig<T>) -> Self {
        Self {
            cfg,
            settings: SqpSettings::default(),
            last: None,
            last_command: None,
        }
    }

    pub fn track(&mut self, current: State3<T>, refs: &[(State3<T>, Control3<T>)]) -> Result<Control3<T>, NlpError> {
        let warm = self.last.as_ref().map(shift_warm_start);
        let out = track_step(current, refs, &self.cfg, self.last_command, warm.as_ref(), &self.settings)?;
        self.last_command = Some(out.command);
        self.last = Some(out.solution);
        Ok(out.command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(
        current: (f64, f64),
        goal: (f64, f64),
        obstacles: &[Obstacle<f64>],
        r_sigma: f64,
        cfg: &PlannerConfig<f64>,
    ) -> NlpSolution<f64> {
        plan_step(
            State2::new(current.0, current.1),
            State2::new(goal.0, goal.1),
            obstacles,
            &vec![r_sigma; cfg.horizon + 1],
            cfg,
            None,
            None,
            &SqpSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn at_goal_stays_put() {
        let cfg = PlannerConfig::default();
        let s = plan((3.0, -1.0), (3.0, -1.0), &[], 0.7, &cfg);
        assert!(s.controls.iter().flatten().all(|u| u.abs() < 1e-12));
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn saturates_toward_far_goal() {
        let cfg = PlannerConfig {
            q: [10.0, 10.0],
            r: [0.01, 0.01],
            ..PlannerConfig::default()
        };
        let s = plan((0.0, 0.0), (8.0, 0.0), &[], 0.7, &cfg);
        assert!((s.controls[0][0] - 1.5).abs() < 1e-8, "{:?}", s.controls[0]);
        assert!(s.controls[0][1].abs() < 1e-9);
        for u in &s.controls {
            assert!(u[0].abs() <= 1.5 + 1e-8);
        }
    }

    #[test]
    fn detours_around_obstacle() {
        let cfg = PlannerConfig {
            horizon: 15,
            ..PlannerConfig::default()
        };
        let obs = [Obstacle::new(1.5, 0.02, 0.5)];
        let s = plan((0.0, 0.0), (8.0, 0.0), &obs, 0.7, &cfg);
        assert_eq!(s.status, SolveStatus::Converged);
        let eps = s.slacks.iter().cloned().fold(0.0, f64::max);
        for x in &s.states[1..] {
            let d = (x[0] - 1.5).hypot(x[1] - 0.02);
            assert!(d >= 1.2 - eps - 1e-6, "{d}");
        }
        assert!(s.states.iter().any(|x| x[1].abs() > 0.5));
    }

    #[test]
    fn larger_radius_never_plans_closer() {
        let cfg = PlannerConfig {
            horizon: 15,
            ..PlannerConfig::default()
        };
        let obs = [Obstacle::new(1.4, -0.1, 0.5)];
        let mut last = f64::NEG_INFINITY;
        for r in [0.5, 0.7, 0.9, 1.1] {
            let s = plan((0.0, 0.0), (6.0, 0.0), &obs, r, &cfg);
            let c = min_plan_clearance(&s, &obs);
            assert!(c >= last - 1e-6, "r {r}: {c} < {last}");
            last = c;
        }
    }

    #[test]
    fn rejects_short_horizon() {
        let cfg = PlannerConfig {
            horizon: 1,
            ..PlannerConfig::default()
        };
        let r = plan_step(
            State2::new(0.0, 0.0),
            State2::new(1.0, 0.0),
            &[],
            &[0.7, 0.7],
            &cfg,
            None,
            None,
            &SqpSettings::default(),
        );
        assert!(r.is_err());
    }

    fn straight_ref(u: Control3<f64>, start: State3<f64>, n: usize, dt: f64) -> Vec<(State3<f64>, Control3<f64>)> {
        (0..=n)
            .map(|k| {
                let t = dt * k as f64;
                (
                    State3 {
                        x: start.x + u.vx * t,
                        y: start.y + u.vy * t,
                        psi: start.psi + u.psi_dot * t,
                    },
                    u,
                )
            })
            .collect()
    }

    #[test]
    fn zero_reference_zero_command() {
        let cfg = TrackerConfig::default();
        let x = State3::new(1.0_f64, 2.0, 0.3);
        let refs = vec![(x, Control3::default()); 11];
        let out = track_step(x, &refs, &cfg, None, None, &SqpSettings::default()).unwrap();
        assert!(out.command.vx.abs() < 1e-12 && out.command.vy.abs() < 1e-12 && out.command.psi_dot.abs() < 1e-12);
    }

    #[test]
    fn follows_dynamics_feasible_reference() {
        let cfg = TrackerConfig::default();
        let start = State3::new(0.5, -0.2, 0.2);
        let u = Control3::new(1.2, 0.3, 0.1);
        let refs = straight_ref(u, start, 10, cfg.dt);
        let out = track_step(start, &refs, &cfg, None, None, &SqpSettings::default()).unwrap();
        assert!((out.command.vx - 1.2).abs() < 1e-6);
        assert!((out.command.vy - 0.3).abs() < 1e-6);
        assert!((out.command.psi_dot - 0.1).abs() < 1e-6);
    }

    #[test]
    fn lateral_body_speed_is_clamped() {
        let cfg = TrackerConfig::default();
        let start = State3::new(0.0, 0.0, 0.0);
        // pure sideways motion at heading 0
        let u = Control3::new(0.0, 1.5, 0.0);
        let refs = straight_ref(u, start, 10, cfg.dt);
        let out = track_step(start, &refs, &cfg, None, None, &SqpSettings::default()).unwrap();
        let (_, vy) = out.command.body_velocity(0.0);
        assert!((vy - cfg.body_vy_limit).abs() < 1e-8, "{vy}");
    }

    #[test]
    fn reference_is_padded_by_holding_last() {
        let x = State3::new(1.0, 0.0, 0.0);
        let refs = vec![(x, Control3::new(1.0, 0.0, 0.0))];
        let p = pad_reference(&refs, 4);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|r| *r == refs[0]));
    }

    #[test]
    fn heading_wraparound_is_handled() {
        let cfg = TrackerConfig::default();
        let start = State3::new(0.0, 0.0, std::f64::consts::PI - 0.01);
        let u = Control3::new(-1.0, 0.0, 0.5);
        let refs: Vec<_> = straight_ref(u, start, 10, cfg.dt)
            .into_iter()
            .map(|(x, u)| (State3::new(x.x, x.y, x.psi), u))
            .collect();
        assert!(refs.last().unwrap().0.psi < 0.0);
        let out = track_step(start, &refs, &cfg, None, None, &SqpSettings::default()).unwrap();
        assert!((out.command.psi_dot - 0.5).abs() < 1e-6);
    }

    #[test]
    fn shift_semantics() {
        let sol = NlpSolution {
            states: vec![vec![0.0], vec![1.0], vec![2.0]],
            controls: vec![vec![10.0], vec![20.0]],
            slacks: vec![0.1, 0.2],
            objective: 0.0,
            kkt_residual: 0.0,
            max_defect: 0.0,
            status: SolveStatus::Converged,
            iterations: 1,
            trace: Vec::new(),
        };
        let once = shift_warm_start(&sol);
        assert_eq!(once.states, vec![vec![1.0], vec![2.0], vec![2.0]]);
        assert_eq!(once.controls, vec![vec![20.0], vec![20.0]]);
        assert_eq!(once.slacks, vec![0.2, 0.2]);
        let twice = shift_warm_start(&once);
        assert_ne!(twice.states, once.states);
    }

    #[test]
    fn planner_wrapper_warm_starts() {
        let mut p = Planner::new(PlannerConfig::default());
        let obs = [Obstacle::new(3.0, 0.1, 0.5)];
        let r = vec![0.7; 11];
        let a = p.plan(State2::new(0.0, 0.0), State2::new(8.0, 0.0), &obs, &r, None).unwrap().clone();
        let b = p
            .plan(State2::new(a.states[1][0], a.states[1][1]), State2::new(8.0, 0.0), &obs, &r, Some(Control2::new(a.controls[0][0], a.controls[0][1])))
            .unwrap();
        assert_eq!(b.status, SolveStatus::Converged);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn tracking_is_offset_equivariant(
            ox in -20.0..20.0f64, oy in -20.0..20.0f64,
            ex in -0.05..0.05f64, ey in -0.05..0.05f64, epsi in -0.2..0.2f64,
            vx in -1.5..1.5f64, vy in -1.5..1.5f64, w in -1.0..1.0f64, psi0 in -3.0..3.0f64,
        ) {
            let cfg = TrackerConfig::default();
            let start = State3::new(0.0, 0.0, psi0);
            let refs = straight_ref(Control3::new(vx, vy, w), start, 10, cfg.dt);
            let cur = State3::new(ex, ey, psi0 + epsi);
            let a = track_step(cur, &refs, &cfg, None, None, &SqpSettings::default()).unwrap();
            let moved: Vec<_> = refs.iter().map(|(x, u)| (State3 { x: x.x + ox, y: x.y + oy, psi: x.psi }, *u)).collect();
            let cur2 = State3 { x: ex + ox, y: ey + oy, psi: cur.psi };
            let b = track_step(cur2, &moved, &cfg, None, None, &SqpSettings::default()).unwrap();
            prop_assert!((a.command.vx - b.command.vx).abs() < 1e-9);
            prop_assert!((a.command.vy - b.command.vy).abs() < 1e-9);
            prop_assert!((a.command.psi_dot - b.command.psi_dot).abs() < 1e-9);
            for (sa, sb) in a.solution.states.iter().zip(&b.solution.states) {
                prop_assert!((sa[0] + ox - sb[0]).abs() < 1e-9);
                prop_assert!((sa[1] + oy - sb[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn plans_respect_bounds(gx in -10.0..10.0f64, gy in -10.0..10.0f64) {
            let cfg = PlannerConfig::default();
            let s = plan((0.0, 0.0), (gx, gy), &[Obstacle::new(1.0, 1.0, 0.4)], 0.7, &cfg);
            for u in &s.controls {
                prop_assert!(u[0].abs() <= 1.5 + 1e-8 && u[1].abs() <= 1.5 + 1e-8);
            }
            for w in s.controls.windows(2) {
                prop_assert!((w[1][0] - w[0][0]).abs() <= 0.4 + 1e-8);
            }
        }
    }
}

//! Closed-loop simulation: periodic planning, cubic references, fast
//! tracking against a noisy point-mass plant, and episode metrics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covpred::{predict_horizon, Hidden, Model};
use crate::geometry::{major_axis_radius, Control2, Control3, Covariance2, Obstacle, RobotGeometry, State2, State3};
use crate::mpc::{planned_controls, planned_states, shift_warm_start, Planner, PlannerConfig, Tracker, TrackerConfig};
use crate::nlp::{NlpError, NlpSolution};
use crate::perception::{
    cube_corners, filter_range, frame_detections, render_frame, to_obstacle, BodyPose, CameraModel, PerceptionError,
};
use crate::scalar::{lit, to_f64, Real};
use crate::spline::{fit_tracking_segment, sample_tracking_ref, SplineError};
use crate::viosim::{ekf_step, visible_features, EkfParams, EkfState, Landmark};

pub const LOG_SCHEMA: &str = "# riskmpc-episode-log v1";
pub const SUMMARY_SCHEMA: &str = "# riskmpc-episode-summary v1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("risk-averse mode needs a trained model")]
    MissingModel,
    #[error("empty episode log")]
    EmptyLog,
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Naive,
    RiskAverse,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Naive, Mode::RiskAverse];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Naive => "naive",
            Mode::RiskAverse => "risk-averse",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "naive" => Ok(Mode::Naive),
            "risk-averse" => Ok(Mode::RiskAverse),
            other => Err(format!("unknown mode `{other}` (baseline, naive, risk-averse)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Reached,
    Collided,
    Timeout,
    SolverFailure,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Collided => "collided",
            Outcome::Timeout => "timeout",
            Outcome::SolverFailure => "solver-failure",
        }
    }
}

/// Axis-aligned cube seen by the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cube<T> {
    pub center: [T; 3],
    pub side: T,
}

impl<T: Real> Cube<T> {
    pub fn corners(&self) -> Vec<[T; 3]> {
        cube_corners(self.center, self.side)
    }

    /// Ground-truth disc: the same rule perception applies to all corners.
    pub fn disc(&self) -> Obstacle<T> {
        to_obstacle(&self.corners()).expect("a cube has corners")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct Scenario<T> {
    pub start: State3<T>,
    pub goal: State2<T>,
    /// Extra ground-truth discs, always known to the planner.
    pub obstacles: Vec<Obstacle<T>>,
    /// Cubes; the planner learns about them through the camera.
    pub cubes: Vec<Cube<T>>,
    /// Scene landmarks besides the cube corners, which always count.
    pub landmarks: Vec<[T; 3]>,
    pub planner: PlannerConfig<T>,
    pub tracker: TrackerConfig<T>,
    pub geometry: RobotGeometry<T>,
    pub mode: Mode,
    /// Radius multiplier used by the naive mode.
    pub inflation: T,
    pub goal_tolerance: T,
    pub max_time: T,
    /// Plant displacement noise, m/s.
    pub sigma_w: T,
    pub ekf: EkfParams<T>,
    pub initial_sigma: T,
    /// Feed the controller the true state instead of the filter mean.
    pub exact_estimates: bool,
    pub camera_height: T,
    /// Obstacles farther than this from the robot are ignored.
    pub perception_range: T,
    pub seed: u64,
}

/// Scene landmarks scattered around the default corridor.
pub fn default_landmarks<T: Real>(seed: u64) -> Vec<[T; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..24)
        .map(|_| {
            [
                lit(rng.gen_range(-1.0..11.0)),
                lit(rng.gen_range(-5.0..5.0)),
                lit(rng.gen_range(0.0..2.0)),
            ]
        })
        .collect()
}

impl<T: Real> Default for Scenario<T> {
    fn default() -> Self {
        Self {
            start: State3::new(T::zero(), T::zero(), T::zero()),
            goal: State2::new(lit(8.0), T::zero()),
            obstacles: Vec::new(),
            cubes: vec![Cube {
                center: [lit(4.0), lit(0.25), lit(0.5)],
                side: T::one(),
            }],
            landmarks: default_landmarks(11),
            planner: PlannerConfig::default(),
            tracker: TrackerConfig::default(),
            geometry: RobotGeometry::new(lit(0.7), lit(2.0)),
            mode: Mode::RiskAverse,
            inflation: lit(2.0),
            goal_tolerance: lit(0.15),
            max_time: lit(30.0),
            sigma_w: lit(0.05),
            ekf: EkfParams::default(),
            initial_sigma: lit(0.01),
            exact_estimates: false,
            camera_height: lit(0.5),
            perception_range: lit(5.0),
            seed: 0,
        }
    }
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if !(self.goal_tolerance > T::zero()) {
            return bad("goal tolerance must be positive");
        }
        if !(self.max_time > T::zero()) {
            return bad("max time must be positive");
        }
        if !(self.geometry.body_radius > T::zero()) || self.geometry.confidence_scale < T::zero() {
            return bad("body radius must be positive and the confidence scale non-negative");
        }
        if !(self.inflation > T::zero()) {
            return bad("inflation must be positive");
        }
        if self.sigma_w < T::zero() {
            return bad("plant noise must be non-negative");
        }
        if !self.exact_estimates {
            self.ekf.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        }
        self.planner.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        let ratio = to_f64(self.planner.dt) / to_f64(self.tracker.dt);
        if !(self.tracker.dt > T::zero()) || ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-6 {
            return bad("planning period must be a whole multiple of the tracking period");
        }
        Ok(())
    }

    /// Every obstacle used for collision checks.
    pub fn true_obstacles(&self) -> Vec<Obstacle<T>> {
        let mut out = self.obstacles.clone();
        out.extend(self.cubes.iter().map(Cube::disc));
        out
    }

    /// Scene landmarks plus cube corners.
    pub fn all_landmarks(&self) -> Vec<Landmark<T>> {
        self.landmarks
            .iter()
            .copied()
            .chain(self.cubes.iter().flat_map(Cube::corners))
            .enumerate()
            .map(|(id, position)| Landmark { id, position })
            .collect()
    }

    /// Constant collision radius of the non-learning modes.
    pub fn fixed_radius(&self) -> T {
        match self.mode {
            Mode::Naive => self.inflation * self.geometry.body_radius,
            _ => self.geometry.body_radius,
        }
    }

    /// Largest amount a straight chord between two planned states can cut
    /// into a circle of the body radius at full speed.
    pub fn chord_margin(&self) -> T {
        let [ux, uy] = self.planner.control_limit;
        let step = ux.hypot(uy) * self.planner.dt;
        step * step / (lit::<T>(8.0) * self.geometry.body_radius)
    }

    pub fn tracking_steps_per_cycle(&self) -> usize {
        (to_f64(self.planner.dt) / to_f64(self.tracker.dt)).round() as usize
    }
}

/// Integrates `command` over `dt` and adds displacement noise with standard
/// deviation `sigma_w * dt` per axis.
pub fn plant_step<T: Real, R: Rng>(state: &State3<T>, command: &Control3<T>, dt: T, sigma_w: T, rng: &mut R) -> State3<T> {
    let nx: T = lit::<T>(rng.sample::<f64, _>(StandardNormal));
    let ny: T = lit::<T>(rng.sample::<f64, _>(StandardNormal));
    State3 {
        x: state.x + command.vx * dt + sigma_w * dt * nx,
        y: state.y + command.vy * dt + sigma_w * dt * ny,
        psi: state.psi + command.psi_dot * dt,
    }
}

/// Obstacles seen so far. A new detection replaces a remembered one when
/// their centers are within `merge_distance` and the new one is supported
/// by at least as many features.
#[derive(Debug, Clone, Default)]
pub struct ObstacleMap<T> {
    entries: Vec<(Obstacle<T>, usize)>,
}

impl<T: Real> ObstacleMap<T> {
    pub fn update(&mut self, detections: &[(Obstacle<T>, usize)], merge_distance: T) {
        for &(obs, support) in detections {
            let near = self.entries.iter_mut().find(|(o, _)| o.center().distance(&obs.center()) <= merge_distance);
            match near {
                Some(entry) if support >= entry.1 => *entry = (obs, support),
                Some(_) => {}
                None => self.entries.push((obs, support)),
            }
        }
    }

    pub fn obstacles(&self) -> Vec<Obstacle<T>> {
        self.entries.iter().map(|(o, _)| *o).collect()
    }
}

/// One tracking step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub t: T,
    pub truth: State3<T>,
    pub estimate: State2<T>,
    pub command: Control3<T>,
    pub r_sigma0: T,
    pub min_clearance: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog<T> {
    pub mode: Mode,
    pub seed: u64,
    pub records: Vec<StepRecord<T>>,
    pub outcome: Outcome,
    pub cycles: usize,
    pub solver_failures: usize,
    /// Radius the non-learning modes plan with.
    pub effective_radius: T,
    /// Wall-clock seconds inside the solvers; not written to files.
    pub solver_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub outcome: Outcome,
    pub collided: bool,
    pub path_length: f64,
    pub time_to_goal: Option<f64>,
    pub min_clearance: f64,
    pub effective_radius: f64,
    pub steps: usize,
}

pub fn metrics<T: Real>(log: &EpisodeLog<T>) -> Result<Summary, SimError> {
    if log.records.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let path_length = log
        .records
        .windows(2)
        .map(|w| to_f64((w[1].truth.x - w[0].truth.x).hypot(w[1].truth.y - w[0].truth.y)))
        .sum();
    let min_clearance = log
        .records
        .iter()
        .map(|r| to_f64(r.min_clearance))
        .fold(f64::INFINITY, f64::min);
    Ok(Summary {
        mode: log.mode,
        seed: log.seed,
        outcome: log.outcome,
        collided: log.outcome == Outcome::Collided,
        path_length,
        time_to_goal: (log.outcome == Outcome::Reached).then(|| to_f64(log.records.last().unwrap().t)),
        min_clearance,
        effective_radius: to_f64(log.effective_radius),
        steps: log.records.len(),
    })
}

fn clearance<T: Real>(p: &State3<T>, obstacles: &[Obstacle<T>], body: T) -> T {
    obstacles
        .iter()
        .map(|o| (p.x - o.cx).hypot(p.y - o.cy) - o.radius - body)
        .fold(T::infinity(), |a, b| a.min(b))
}

/// Samples the cubic reference through every planned state at the tracking
/// period. The last control is held past the final state.
fn plan_reference<T: Real>(
    sol: &NlpSolution<T>,
    dt_plan: T,
    dt_track: T,
    psi: T,
) -> Result<Vec<(State3<T>, Control3<T>)>, SimError> {
    let xs = planned_states(sol);
    let us = planned_controls(sol);
    let mut out = Vec::new();
    let mut hint = psi;
    for k in 0..us.len() {
        let u_end = *us.get(k + 1).unwrap_or(&us[k]);
        let seg = fit_tracking_segment(xs[k], us[k], xs[k + 1], u_end, dt_plan, hint)?;
        let samples = sample_tracking_ref(&seg, dt_track)?;
        hint = samples.last().map_or(hint, |s| s.0.psi);
        let keep = if k + 1 == us.len() { samples.len() } else { samples.len() - 1 };
        out.extend_from_slice(&samples[..keep]);
    }
    Ok(out)
}

struct Solvers<T: Real> {
    planner: Planner<T>,
    tracker: Tracker<T>,
    seconds: f64,
}

impl<T: Real> Solvers<T> {
    fn plan(
        &mut self,
        current: State2<T>,
        goal: State2<T>,
        obstacles: &[Obstacle<T>],
        r_sigma: &[T],
        previous: Option<Control2<T>>,
    ) -> Result<NlpSolution<T>, NlpError> {
        let t = std::time::Instant::now();
        let r = self.planner.plan(current, goal, obstacles, r_sigma, previous).cloned();
        self.seconds += t.elapsed().as_secs_f64();
        r
    }

    fn track(&mut self, current: State3<T>, refs: &[(State3<T>, Control3<T>)]) -> Result<Control3<T>, NlpError> {
        let t = std::time::Instant::now();
        let r = self.tracker.track(current, refs);
        self.seconds += t.elapsed().as_secs_f64();
        r
    }
}

/// Runs one closed-loop episode.
///
/// Each planning cycle: perceive the cubes from the true camera pose, build
/// the collision radius horizon, plan from the current estimate, fit the
/// cubic reference, then run the tracker for one planning period against
/// the plant. The estimate is the filter mean, whose error is held fixed
/// within a cycle; the filter is updated once per cycle with the average
/// command and the landmarks visible from the true pose.
pub fn run_episode<T: Real>(s: &Scenario<T>, model: Option<&Model<T>>) -> Result<EpisodeLog<T>, SimError> {
    s.validate()?;
    if s.mode == Mode::RiskAverse && model.is_none() {
        return Err(SimError::MissingModel);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let n = s.planner.horizon;
    let steps = s.tracking_steps_per_cycle();
    let truth_obstacles = s.true_obstacles();
    let landmarks = s.all_landmarks();
    let cam = CameraModel::forward_facing(s.camera_height);
    let groups: Vec<(String, Vec<[T; 3]>)> =
        s.cubes.iter().enumerate().map(|(i, c)| (format!("cube{i}"), c.corners())).collect();
    let body = s.geometry.body_radius;

    let mut solvers = Solvers {
        planner: Planner::new(s.planner.clone()),
        tracker: Tracker::new(s.tracker.clone()),
        seconds: 0.0,
    };
    let mut map = ObstacleMap::default();
    let mut truth = s.start;
    let mut ekf = EkfState::new(
        s.start.position(),
        Covariance2::isotropic(s.initial_sigma * s.initial_sigma),
        s.ekf,
    );
    let mut hidden = model.map(|m| Hidden::zeros(m.spec()));
    let mut last_plan: Option<NlpSolution<T>> = None;
    let mut previous_u: Option<Control2<T>> = None;
    let mut last_command = Control3::new(T::zero(), T::zero(), T::zero());
    let mut failures_in_row = 0;
    let mut solver_failures = 0;
    let mut t = T::zero();
    let mut cycles = 0;
    let mut records = vec![StepRecord {
        t,
        truth,
        estimate: truth.position(),
        command: last_command,
        r_sigma0: s.fixed_radius(),
        min_clearance: clearance(&truth, &truth_obstacles, body),
    }];
    let dt_track = s.tracker.dt;

    let outcome = 'episode: loop {
        if truth.position().distance(&s.goal) <= s.goal_tolerance {
            break Outcome::Reached;
        }
        if t >= s.max_time {
            break Outcome::Timeout;
        }
        cycles += 1;
        let error = if s.exact_estimates {
            State2::new(T::zero(), T::zero())
        } else {
            State2::new(ekf.mean.x - truth.x, ekf.mean.y - truth.y)
        };
        let estimate = State2::new(truth.x + error.x, truth.y + error.y);

        let pose = BodyPose::planar(truth.x, truth.y, truth.psi);
        if !groups.is_empty() {
            let frame = render_frame(cycles as u64, &groups, &cam, &pose, lit(2.0));
            map.update(&frame_detections(&frame, &cam, &pose)?, lit(1.0));
        }
        let mut planning_obstacles = s.obstacles.clone();
        planning_obstacles.extend(map.obstacles());
        let planning_obstacles = filter_range(&planning_obstacles, estimate, s.perception_range);

        let r_sigma: Vec<T> = match (s.mode, model, hidden.as_mut()) {
            (Mode::RiskAverse, Some(m), Some(h)) => {
                let mut horizon = last_plan
                    .as_ref()
                    .map(|p| planned_states(&shift_warm_start(p)))
                    .unwrap_or_else(|| vec![estimate; n + 1]);
                horizon[0] = estimate;
                let visible = visible_features(&truth, &landmarks, s.ekf.range, s.ekf.fov);
                let feats: Vec<[T; 3]> = visible.iter().map(|l| l.position).collect();
                let (covs, carried) =
                    predict_horizon(m, &horizon, truth.psi, s.camera_height, &feats, s.ekf.range, h);
                *h = carried;
                covs.iter().map(|c| major_axis_radius(c, &s.geometry)).collect()
            }
            _ => vec![s.fixed_radius(); n + 1],
        };
        let margin = s.chord_margin();
        let planning_radii: Vec<T> = r_sigma.iter().map(|&r| r + margin).collect();

        let reference = match solvers.plan(estimate, s.goal, &planning_obstacles, &planning_radii, previous_u) {
            Ok(sol) => {
                failures_in_row = 0;
                previous_u = planned_controls(&sol).first().copied();
                let refs = plan_reference(&sol, s.planner.dt, dt_track, truth.psi)?;
                last_plan = Some(sol);
                Some(refs)
            }
            Err(e) => {
                log::warn!("planner failed at t={}: {e}", to_f64(t));
                solver_failures += 1;
                failures_in_row += 1;
                if failures_in_row > 1 {
                    break Outcome::SolverFailure;
                }
                None
            }
        };

        let mut sum_u = Control2::new(T::zero(), T::zero());
        for j in 0..steps {
            let current = State3::new(truth.x + error.x, truth.y + error.y, truth.psi);
            let command = match &reference {
                Some(refs) => {
                    let window = &refs[j.min(refs.len() - 1)..];
                    match solvers.track(current, window) {
                        Ok(c) => c,
                        Err(e) => {
                            log::warn!("tracker failed at t={}: {e}", to_f64(t));
                            solver_failures += 1;
                            last_command
                        }
                    }
                }
                None => last_command,
            };
            last_command = command;
            truth = plant_step(&truth, &command, dt_track, s.sigma_w, &mut rng);
            t += dt_track;
            sum_u.vx += command.vx;
            sum_u.vy += command.vy;
            let c = clearance(&truth, &truth_obstacles, body);
            records.push(StepRecord {
                t,
                truth,
                estimate: State2::new(truth.x + error.x, truth.y + error.y),
                command,
                r_sigma0: r_sigma[0],
                min_clearance: c,
            });
            if c < T::zero() {
                break 'episode Outcome::Collided;
            }
            if truth.position().distance(&s.goal) <= s.goal_tolerance {
                break 'episode Outcome::Reached;
            }
        }

        if !s.exact_estimates {
            let k = T::from_usize(steps).unwrap();
            let u = Control2::new(sum_u.vx / k, sum_u.vy / k);
            let visible = visible_features(&truth, &landmarks, s.ekf.range, s.ekf.fov);
            ekf = ekf_step(&ekf, u, s.planner.dt, &visible, truth.position(), &mut rng);
        }
    };

    Ok(EpisodeLog {
        mode: s.mode,
        seed: s.seed,
        records,
        outcome,
        cycles,
        solver_failures,
        effective_radius: s.fixed_radius(),
        solver_seconds: solvers.seconds,
    })
}

/// Writes the per-step log as CSV after a schema line.
pub fn write_log<T: Real, W: Write>(log: &EpisodeLog<T>, mut out: W) -> Result<(), SimError> {
    writeln!(out, "{LOG_SCHEMA}")?;
    writeln!(
        out,
        "t,x_true,y_true,psi,x_est,y_est,vx_cmd,vy_cmd,psidot_cmd,r_sigma0,min_clearance"
    )?;
    for r in &log.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            to_f64(r.t),
            to_f64(r.truth.x),
            to_f64(r.truth.y),
            to_f64(r.truth.psi),
            to_f64(r.estimate.x),
            to_f64(r.estimate.y),
            to_f64(r.command.vx),
            to_f64(r.command.vy),
            to_f64(r.command.psi_dot),
            to_f64(r.r_sigma0),
            to_f64(r.min_clearance)
        )?;
    }
    Ok(())
}

/// Writes the summary as `key = value` lines after a schema line.
pub fn write_summary<W: Write>(s: &Summary, mut out: W) -> Result<(), SimError> {
    writeln!(out, "{SUMMARY_SCHEMA}")?;
    writeln!(out, "mode = {}", s.mode.name())?;
    writeln!(out, "seed = {}", s.seed)?;
    writeln!(out, "outcome = {}", s.outcome.name())?;
    writeln!(out, "collided = {}", s.collided)?;
    writeln!(out, "path_length = {}", s.path_length)?;
    match s.time_to_goal {
        Some(t) => writeln!(out, "time_to_goal = {t}")?,
        None => writeln!(out, "time_to_goal = none")?,
    }
    writeln!(out, "min_clearance = {}", s.min_clearance)?;
    writeln!(out, "effective_radius = {}", s.effective_radius)?;
    writeln!(out, "steps = {}", s.steps)?;
    Ok(())
}

//! Synthetic covariance oracle: a planar EKF over the point-mass plant with
//! noisy relative-position observations of point landmarks.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covpred::{build_input, TrainRecord, INPUT_DIM, OUTPUT_DIM};
use crate::geometry::{psd_correct, Control2, Covariance2, State2, State3};
use crate::mpc::{planned_controls, Planner, PlannerConfig};
use crate::nlp::NlpError;
use crate::scalar::{lit, to_f64, wrap_angle, Real};

pub const DATASET_SCHEMA: &str = "# riskmpc-dataset v1";

#[derive(Debug, Error)]
pub enum VioError {
    #[error("no maps given")]
    NoMaps,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid parameter: {0}")]
    BadParams(&'static str),
    #[error("planner failed: {0}")]
    Planner(#[from] NlpError),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark<T> {
    pub id: usize,
    pub position: [T; 3],
}

/// Noise and sensing parameters. `fov` is the full angular width of the
/// sensor cone centred on the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct EkfParams<T> {
    pub sigma_w: T,
    pub sigma_v: T,
    pub range: T,
    pub fov: T,
}

impl<T: Real> Default for EkfParams<T> {
    fn default() -> Self {
        Self {
            sigma_w: lit(0.05),
            sigma_v: lit(0.1),
            range: lit(5.0),
            fov: lit(std::f64::consts::PI),
        }
    }
}

impl<T: Real> EkfParams<T> {
    pub fn validate(&self) -> Result<(), VioError> {
        if !(self.sigma_w > T::zero()) || !(self.sigma_v > T::zero()) {
            return Err(VioError::BadParams("noise levels must be positive"));
        }
        if !(self.range > T::zero()) || !(self.fov > T::zero()) {
            return Err(VioError::BadParams("range and fov must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState<T> {
    pub mean: State2<T>,
    pub p: Covariance2<T>,
    pub params: EkfParams<T>,
}

impl<T: Real> EkfState<T> {
    pub fn new(mean: State2<T>, p: Covariance2<T>, params: EkfParams<T>) -> Self {
        Self { mean, p, params }
    }
}

/// Landmarks within `range` (inclusive) whose bearing from the heading is
/// at most `fov / 2`, sorted by planar distance (ties by list order).
pub fn visible_features<T: Real>(robot: &State3<T>, landmarks: &[Landmark<T>], range: T, fov: T) -> Vec<Landmark<T>> {
    let half = fov / lit(2.0);
    let mut out: Vec<(T, Landmark<T>)> = landmarks
        .iter()
        .filter_map(|l| {
            let dx = l.position[0] - robot.x;
            let dy = l.position[1] - robot.y;
            let d = dx.hypot(dy);
            if d > range {
                return None;
            }
            if d > T::zero() {
                let bearing = wrap_angle(dy.atan2(dx) - robot.psi);
                if bearing.abs() > half {
                    return None;
                }
            }
            Some((d, *l))
        })
        .collect();
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    out.into_iter().map(|(_, l)| l).collect()
}

fn symmetrize<T: Real>(p: &mut Covariance2<T>) {
    let off = (p.sxy + p.syx) / lit(2.0);
    p.sxy = off;
    p.syx = off;
}

/// Predict with `control` over `dt`, then fuse one relative-position
/// measurement `z = l - truth + v` per visible landmark. Measurement noise
/// is drawn from `rng`.
pub fn ekf_step<T: Real, R: Rng>(
    s: &EkfState<T>,
    control: Control2<T>,
    dt: T,
    visible: &[Landmark<T>],
    truth: State2<T>,
    rng: &mut R,
) -> EkfState<T> {
    let mut out = *s;
    out.mean.x += control.vx * dt;
    out.mean.y += control.vy * dt;
    let q = s.params.sigma_w * s.params.sigma_w * dt * dt;
    out.p.sxx += q;
    out.p.syy += q;
    let r = s.params.sigma_v * s.params.sigma_v;
    for l in visible {
        let nx: T = lit::<T>(rng.sample::<f64, _>(StandardNormal)) * s.params.sigma_v;
        let ny: T = lit::<T>(rng.sample::<f64, _>(StandardNormal)) * s.params.sigma_v;
        // z = l - p + v, H = -I
        let zx = l.position[0] - truth.x + nx;
        let zy = l.position[1] - truth.y + ny;
        let ix = zx - (l.position[0] - out.mean.x);
        let iy = zy - (l.position[1] - out.mean.y);
        let p = out.p;
        let sxx = p.sxx + r;
        let sxy = p.sxy;
        let syy = p.syy + r;
        let det = sxx * syy - sxy * sxy;
        if !(det > T::zero()) {
            continue;
        }
        let (ixx, ixy, iyy) = (syy / det, -sxy / det, sxx / det);
        // K = -P S^-1
        let kxx = -(p.sxx * ixx + p.sxy * ixy);
        let kxy = -(p.sxx * ixy + p.sxy * iyy);
        let kyx = -(p.syx * ixx + p.syy * ixy);
        let kyy = -(p.syx * ixy + p.syy * iyy);
        out.mean.x += kxx * ix + kxy * iy;
        out.mean.y += kyx * ix + kyy * iy;
        // Joseph form: (I - K H) P (I - K H)^T + K R K^T with H = -I
        let (axx, axy, ayx, ayy) = (T::one() + kxx, kxy, kyx, T::one() + kyy);
        let m = |a: [T; 4], b: [T; 4]| {
            [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ]
        };
        let a = [axx, axy, ayx, ayy];
        let at = [axx, ayx, axy, ayy];
        let apa = m(m(a, p.to_flat()), at);
        let k = [kxx, kxy, kyx, kyy];
        let kt = [kxx, kyx, kxy, kyy];
        let krk = m(k, kt);
        out.p = Covariance2::new(apa[0] + r * krk[0], apa[1] + r * krk[1], apa[2] + r * krk[2], apa[3] + r * krk[3]);
        symmetrize(&mut out.p);
    }
    out
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct GenConfig<T> {
    pub episodes_per_map: usize,
    pub episode_steps: usize,
    pub dt: T,
    pub camera_height: T,
    /// Half-width of the square region goals are drawn from.
    pub arena: T,
    pub goal_tolerance: T,
    pub initial_sigma: T,
    pub ekf: EkfParams<T>,
    pub seed: u64,
}

impl<T: Real> Default for GenConfig<T> {
    fn default() -> Self {
        Self {
            episodes_per_map: 1,
            episode_steps: 400,
            dt: lit(0.1),
            camera_height: lit(0.5),
            arena: lit(10.0),
            goal_tolerance: lit(0.3),
            initial_sigma: lit(0.01),
            ekf: EkfParams::default(),
            seed: 1,
        }
    }
}

/// One recorded step. `visible` is the number of landmarks the sensor saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<T> {
    pub episode: usize,
    pub step: usize,
    pub visible: usize,
    pub input: Vec<T>,
    pub target: [T; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub dt: T,
    pub ekf: EkfParams<T>,
    pub camera_height: T,
    pub episodes: Vec<Vec<Record<T>>>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn training_sequences(&self) -> Vec<Vec<TrainRecord<T>>> {
        self.episodes
            .iter()
            .map(|e| {
                e.iter()
                    .map(|r| TrainRecord {
                        input: r.input.clone(),
                        target: r.target,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Landmarks in a few clusters with open ground between them, so episodes
/// alternate between feature-rich and blind stretches.
pub fn random_map<T: Real>(seed: u64, arena: T, clusters: usize, per_cluster: usize, spread: T) -> Vec<Landmark<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = to_f64(arena);
    let spread = to_f64(spread);
    let mut out = Vec::with_capacity(clusters * per_cluster);
    for _ in 0..clusters {
        let cx = rng.gen_range(-a..a);
        let cy = rng.gen_range(-a..a);
        for _ in 0..per_cluster {
            let id = out.len();
            out.push(Landmark {
                id,
                position: [
                    lit(cx + rng.gen_range(-spread..spread)),
                    lit(cy + rng.gen_range(-spread..spread)),
                    lit(rng.gen_range(0.0..2.0)),
                ],
            });
        }
    }
    out
}

/// Four layouts of eight clusters with eight landmarks each.
pub fn default_maps<T: Real>(seed: u64, arena: T) -> Vec<Vec<Landmark<T>>> {
    (0..4).map(|i| random_map(seed.wrapping_mul(1000).wrapping_add(i), arena, 8, 8, lit(3.0))).collect()
}

fn random_goal<T: Real>(rng: &mut ChaCha8Rng, arena: T) -> State2<T> {
    let a = to_f64(arena);
    State2::new(lit(rng.gen_range(-a..a)), lit(rng.gen_range(-a..a)))
}

/// Drives the noisy plant between random goals with the obstacle-free
/// planner and records the EKF covariance along the way.
pub fn gen_dataset<T: Real>(maps: &[Vec<Landmark<T>>], cfg: &GenConfig<T>) -> Result<Dataset<T>, VioError> {
    if maps.is_empty() {
        return Err(VioError::NoMaps);
    }
    cfg.ekf.validate()?;
    if !(cfg.dt > T::zero()) {
        return Err(VioError::BadParams("dt must be positive"));
    }
    if cfg.episodes_per_map == 0 || cfg.episode_steps == 0 {
        return Err(VioError::EmptyDataset);
    }
    let mut episodes = Vec::new();
    for (m, map) in maps.iter().enumerate() {
        for e in 0..cfg.episodes_per_map {
            let index = episodes.len();
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add((m * 7919 + e) as u64);
            episodes.push(run_episode(map, cfg, index, seed)?);
        }
    }
    Ok(Dataset {
        dt: cfg.dt,
        ekf: cfg.ekf,
        camera_height: cfg.camera_height,
        episodes,
    })
}

fn run_episode<T: Real>(
    map: &[Landmark<T>],
    cfg: &GenConfig<T>,
    episode: usize,
    seed: u64,
) -> Result<Vec<Record<T>>, VioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planner_cfg = PlannerConfig {
        dt: cfg.dt,
        ..PlannerConfig::default()
    };
    let n = planner_cfg.horizon;
    let mut planner = Planner::new(planner_cfg);
    let mut truth = random_goal(&mut rng, cfg.arena);
    let mut heading = T::zero();
    let mut goal = random_goal(&mut rng, cfg.arena);
    let mut ekf = EkfState::new(truth, Covariance2::isotropic(cfg.initial_sigma * cfg.initial_sigma), cfg.ekf);
    let mut previous: Option<Control2<T>> = None;
    let radii = vec![T::zero(); n + 1];
    let mut out = Vec::with_capacity(cfg.episode_steps);
    for step in 0..cfg.episode_steps {
        if truth.distance(&goal) < cfg.goal_tolerance {
            goal = random_goal(&mut rng, cfg.arena);
        }
        let sol = planner.plan(truth, goal, &[], &radii, previous)?;
        let u = planned_controls(sol)[0];
        previous = Some(u);
        let wx: T = lit::<T>(rng.sample::<f64, _>(StandardNormal)) * cfg.ekf.sigma_w;
        let wy: T = lit::<T>(rng.sample::<f64, _>(StandardNormal)) * cfg.ekf.sigma_w;
        truth.x += (u.vx + wx) * cfg.dt;
        truth.y += (u.vy + wy) * cfg.dt;
        if u.vx.hypot(u.vy) > lit(1e-3) {
            heading = u.vy.atan2(u.vx);
        }
        let pose = State3::new(truth.x, truth.y, heading);
        let visible = visible_features(&pose, map, cfg.ekf.range, cfg.ekf.fov);
        ekf = ekf_step(&ekf, u, cfg.dt, &visible, truth, &mut rng);
        let positions: Vec<[T; 3]> = visible.iter().map(|l| l.position).collect();
        let input = build_input([truth.x, truth.y, cfg.camera_height], heading, &positions, cfg.ekf.range);
        out.push(Record {
            episode,
            step,
            visible: visible.len(),
            input,
            target: psd_correct(&ekf.p).to_flat(),
        });
    }
    Ok(out)
}

/// Writes the schema line, a parameter line, a column header and one CSV
/// row per record.
pub fn write_dataset<T: Real, W: Write>(ds: &Dataset<T>, mut out: W) -> Result<(), VioError> {
    writeln!(out, "{DATASET_SCHEMA}")?;
    writeln!(
        out,
        "# input_dim={INPUT_DIM} target_dim={OUTPUT_DIM} dt={} sigma_w={} sigma_v={} range={} fov={} camera_height={}",
        to_f64(ds.dt),
        to_f64(ds.ekf.sigma_w),
        to_f64(ds.ekf.sigma_v),
        to_f64(ds.ekf.range),
        to_f64(ds.ekf.fov),
        to_f64(ds.camera_height)
    )?;
    let mut header = String::from("episode,step,visible");
    for i in 0..INPUT_DIM {
        header.push_str(&format!(",in{i}"));
    }
    for i in 0..OUTPUT_DIM {
        header.push_str(&format!(",t{i}"));
    }
    writeln!(out, "{header}")?;
    for r in ds.episodes.iter().flatten() {
        let mut line = format!("{},{},{}", r.episode, r.step, r.visible);
        for v in r.input.iter().chain(r.target.iter()) {
            line.push_str(&format!(",{}", to_f64(*v)));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<T: Real, R: BufRead>(reader: R) -> Result<Dataset<T>, VioError> {
    let perr = |line: usize, msg: String| VioError::Parse { line, msg };
    let mut lines = reader.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), VioError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(perr(0, format!("missing {what}"))),
        }
    };
    let (_, schema) = next("schema line")?;
    if schema.trim_end() != DATASET_SCHEMA {
        return Err(perr(1, format!("unsupported schema `{}`", schema.trim_end())));
    }
    let (pl, params) = next("parameter line")?;
    let mut get = std::collections::HashMap::new();
    for kv in params.trim_start_matches('#').split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| perr(pl, format!("bad parameter `{kv}`")))?;
        let v: f64 = v.parse().map_err(|_| perr(pl, format!("bad value for `{k}`")))?;
        get.insert(k.to_string(), v);
    }
    let val = |k: &str| get.get(k).copied().ok_or_else(|| perr(pl, format!("missing `{k}`")));
    if val("input_dim")? as usize != INPUT_DIM || val("target_dim")? as usize != OUTPUT_DIM {
        return Err(perr(pl, "dimension mismatch".into()));
    }
    let ekf = EkfParams {
        sigma_w: lit(val("sigma_w")?),
        sigma_v: lit(val("sigma_v")?),
        range: lit(val("range")?),
        fov: lit(val("fov")?),
    };
    let dt = lit(val("dt")?);
    let camera_height = lit(val("camera_height")?);
    next("column header")?;
    let mut episodes: Vec<Vec<Record<T>>> = Vec::new();
    let width = 3 + INPUT_DIM + OUTPUT_DIM;
    for (i, line) in lines {
        let ln = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(perr(ln, format!("expected {width} fields, found {}", fields.len())));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| perr(ln, format!("bad integer `{s}`")));
        let episode = int(fields[0])?;
        let step = int(fields[1])?;
        let visible = int(fields[2])?;
        let mut vals = Vec::with_capacity(INPUT_DIM + OUTPUT_DIM);
        for f in &fields[3..] {
            let v: f64 = f.trim().parse().map_err(|_| perr(ln, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(perr(ln, "non-finite value".into()));
            }
            vals.push(lit::<T>(v));
        }
        let target = [vals[INPUT_DIM], vals[INPUT_DIM + 1], vals[INPUT_DIM + 2], vals[INPUT_DIM + 3]];
        vals.truncate(INPUT_DIM);
        if episode > episodes.len() {
            return Err(perr(ln, format!("episode {episode} out of order")));
        }
        if episode == episodes.len() {
            episodes.push(Vec::new());
        }
        episodes[episode].push(Record {
            episode,
            step,
            visible,
            input: vals,
            target,
        });
    }
    Ok(Dataset {
        dt,
        ekf,
        camera_height,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn lm(id: usize, x: f64, y: f64) -> Landmark<f64> {
        Landmark {
            id,
            position: [x, y, 1.0],
        }
    }

    #[test]
    fn visibility_rules() {
        let robot = State3::new(0.0, 0.0, 0.0);
        let behind = [lm(0, -2.0, 0.0)];
        assert!(visible_features(&robot, &behind, 5.0, PI / 2.0).is_empty());
        let edge = [lm(0, 5.0, 0.0)];
        assert_eq!(visible_features(&robot, &edge, 5.0, PI).len(), 1);
        let all = [lm(0, 3.0, 0.0), lm(1, 1.0, 0.5), lm(2, 2.0, -1.0)];
        let v = visible_features(&robot, &all, 5.0, 2.0 * PI);
        assert_eq!(v.iter().map(|l| l.id).collect::<Vec<_>>(), vec![1, 2, 0]);
        // forward hemisphere keeps a landmark just ahead of abeam
        let side = [lm(0, 0.01, 2.0), lm(1, -0.01, 2.0)];
        let v = visible_features(&robot, &side, 5.0, PI);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].id, 0);
    }

    #[test]
    fn dead_reckoning_growth_is_exact() {
        let params = EkfParams::<f64>::default();
        let p0 = Covariance2::isotropic(0.02);
        let mut s = EkfState::new(State2::new(0.0, 0.0), p0, params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dt = 0.1;
        let k = 37;
        for _ in 0..k {
            s = ekf_step(&s, Control2::new(0.3, -0.2), dt, &[], State2::new(0.0, 0.0), &mut rng);
        }
        let expect = 0.02 + k as f64 * 0.05f64.powi(2) * dt * dt;
        assert!((s.p.sxx - expect).abs() < 1e-15);
        assert!((s.p.syy - expect).abs() < 1e-15);
        assert_eq!(s.p.sxy, 0.0);
        assert!((s.mean.x - 0.3 * dt * k as f64).abs() < 1e-12);
    }

    #[test]
    fn stationary_updates_follow_scalar_recursion() {
        let params = EkfParams::<f64>::default();
        let mut s = EkfState::new(State2::new(0.0, 0.0), Covariance2::isotropic(0.5), params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, r) = (0.05f64.powi(2) * 0.01, 0.01);
        let mut p = 0.5;
        let mut last_trace = f64::INFINITY;
        for _ in 0..50 {
            s = ekf_step(&s, Control2::new(0.0, 0.0), 0.1, &[lm(0, 1.0, 0.0)], State2::new(0.0, 0.0), &mut rng);
            p = (p + q) * r / (p + q + r);
            assert!((s.p.sxx - p).abs() < 1e-14 && (s.p.syy - p).abs() < 1e-14);
            assert!(s.p.trace() < last_trace);
            last_trace = s.p.trace();
        }
        for _ in 0..400 {
            s = ekf_step(&s, Control2::new(0.0, 0.0), 0.1, &[lm(0, 1.0, 0.0)], State2::new(0.0, 0.0), &mut rng);
            p = (p + q) * r / (p + q + r);
        }
        assert!((s.p.sxx - p).abs() < 1e-14);
        // fixed point of the scalar recursion
        let floor = (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
        assert!((p - floor).abs() < 1e-6);
    }

    #[test]
    fn huge_measurement_noise_is_a_no_op() {
        let params = EkfParams {
            sigma_v: 1e12,
            ..EkfParams::default()
        };
        let s = EkfState::new(State2::new(1.0, 2.0), Covariance2::isotropic(0.1), params);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = ekf_step(&s, Control2::new(0.0, 0.0), 0.0, &[lm(0, 2.0, 2.0)], State2::new(1.0, 2.0), &mut rng);
        assert!((out.p.sxx - 0.1).abs() < 1e-12);
        assert!((out.mean.x - 1.0).abs() < 1e-9);
    }

    fn small_cfg() -> GenConfig<f64> {
        GenConfig {
            episode_steps: 60,
            ..GenConfig::default()
        }
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let maps = default_maps::<f64>(3, 10.0);
        let cfg = small_cfg();
        let a = gen_dataset(&maps, &cfg).unwrap();
        let b = gen_dataset(&maps, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes.len(), 4);
        assert_eq!(a.len(), 240);
        for r in a.episodes.iter().flatten() {
            assert_eq!(r.input.len(), INPUT_DIM);
            assert!(r.target.iter().all(|v| v.is_finite()));
            assert_eq!(r.input[2], 0.5);
        }
        assert!(matches!(gen_dataset::<f64>(&[], &cfg), Err(VioError::NoMaps)));
    }

    #[test]
    fn empty_map_gives_dead_reckoning_targets() {
        let cfg = small_cfg();
        let ds = gen_dataset(&[Vec::new()], &cfg).unwrap();
        let q = 0.05f64.powi(2) * 0.01;
        for (k, r) in ds.episodes[0].iter().enumerate() {
            let expect = 1e-4 + (k + 1) as f64 * q;
            assert!((r.target[0] - expect).abs() < 1e-15, "step {k}");
            assert!((r.target[3] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dataset_file_roundtrip() {
        let maps = default_maps::<f64>(4, 10.0);
        let ds = gen_dataset(&maps[..2], &small_cfg()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back: Dataset<f64> = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(buf).unwrap();
        let broken = text.replacen(",0,0,", ",0,zero,", 1);
        assert!(matches!(read_dataset::<f64, _>(broken.as_bytes()), Err(VioError::Parse { .. })));
    }

    proptest! {
        #[test]
        fn covariance_stays_symmetric_psd(
            p0 in 1e-4f64..1.0,
            pts in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 0..6),
            seed in 0u64..1000,
        ) {
            let params = EkfParams::<f64>::default();
            let mut s = EkfState::new(State2::new(0.0, 0.0), Covariance2::new(p0, 0.3 * p0, 0.3 * p0, 2.0 * p0), params);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lms: Vec<_> = pts.iter().enumerate().map(|(i, &(x, y))| lm(i, x, y)).collect();
            for _ in 0..5 {
                let before = s.p.trace();
                let predicted = ekf_step(&s, Control2::new(0.1, 0.0), 0.1, &[], State2::new(0.0, 0.0), &mut rng);
                prop_assert!(predicted.p.trace() >= before);
                let next = ekf_step(&s, Control2::new(0.1, 0.0), 0.1, &lms, State2::new(0.0, 0.0), &mut rng);
                prop_assert!(next.p.trace() <= predicted.p.trace() + 1e-15);
                prop_assert!((next.p.sxy - next.p.syx).abs() <= 1e-12);
                prop_assert!(next.p.min_eigenvalue() >= -1e-12);
                s = next;
            }
        }
    }
}

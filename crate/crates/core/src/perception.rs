//! Bounding boxes plus depth features to planar disc obstacles.
//!
//! Frames: camera (x right, y down, z forward), body (x forward, y left,
//! z up) and spatial/world.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Obstacle, State2};
use crate::scalar::{lit, Real};

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("focal lengths must be positive")]
    BadIntrinsics,
    #[error("rotation is not orthonormal with determinant +1")]
    BadRotation,
    #[error("cannot build an obstacle from an empty feature group")]
    EmptyGroup,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn mat_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_tr_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [0, 1, 2].map(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

fn check_rotation<T: Real>(r: &Mat3<T>) -> Result<(), PerceptionError> {
    let tol = lit::<T>(1e-9);
    for i in 0..3 {
        for j in 0..3 {
            let d: T = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let e = if i == j { T::one() } else { T::zero() };
            if (d - e).abs() > tol {
                return Err(PerceptionError::BadRotation);
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - T::one()).abs() > tol {
        return Err(PerceptionError::BadRotation);
    }
    Ok(())
}

/// Rotation about the vertical axis.
pub fn rot_z<T: Real>(psi: T) -> Mat3<T> {
    let (s, c) = psi.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

/// Pinhole intrinsics plus the camera-to-body transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub r_bc: Mat3<T>,
    pub t_bc: Vec3<T>,
}

impl<T: Real> CameraModel<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, r_bc: Mat3<T>, t_bc: Vec3<T>) -> Result<Self, PerceptionError> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(PerceptionError::BadIntrinsics);
        }
        check_rotation(&r_bc)?;
        Ok(Self { fx, fy, cx, cy, r_bc, t_bc })
    }

    /// Forward-looking camera at `height` above the body origin, 640x480
    /// with RealSense-like focal lengths.
    pub fn forward_facing(height: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            fx: lit(615.0),
            fy: lit(615.0),
            cx: lit(320.0),
            cy: lit(240.0),
            r_bc: [[z, z, o], [-o, z, z], [z, -o, z]],
            t_bc: [z, z, height],
        }
    }
}

/// Body-to-spatial transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPose<T> {
    pub r_sb: Mat3<T>,
    pub t_sb: Vec3<T>,
}

impl<T: Real> BodyPose<T> {
    pub fn new(r_sb: Mat3<T>, t_sb: Vec3<T>) -> Result<Self, PerceptionError> {
        check_rotation(&r_sb)?;
        Ok(Self { r_sb, t_sb })
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            r_sb: [[o, z, z], [z, o, z], [z, z, o]],
            t_sb: [z, z, z],
        }
    }

    /// Ground robot at `(x, y)` with heading `psi`.
    pub fn planar(x: T, y: T, psi: T) -> Self {
        Self {
            r_sb: rot_z(psi),
            t_sb: [x, y, T::zero()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation<T> {
    pub frame: u64,
    pub x_p: T,
    pub y_p: T,
    pub depth: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub frame: u64,
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
    pub label: String,
}

impl<T: Real> BoundingBox<T> {
    pub fn contains(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> (T, T) {
        let h = lit::<T>(0.5);
        (h * (self.x_min + self.x_max), h * (self.y_min + self.y_max))
    }
}

/// Pixel plus depth to a spatial point.
pub fn unproject<T: Real>(
    obs: &FeatureObservation<T>,
    cam: &CameraModel<T>,
    pose: &BodyPose<T>,
) -> Result<Vec3<T>, PerceptionError> {
    if !(obs.depth > T::zero()) {
        return Err(PerceptionError::NonPositiveDepth(obs.depth.to_f64().unwrap_or(f64::NAN)));
    }
    let z = obs.depth;
    let x_c = [(obs.x_p - cam.cx) / cam.fx * z, (obs.y_p - cam.cy) / cam.fy * z, z];
    let rb = mat_vec(&cam.r_bc, &x_c);
    let x_b = [0, 1, 2].map(|i| rb[i] + cam.t_bc[i]);
    let rs = mat_vec(&pose.r_sb, &x_b);
    Ok([0, 1, 2].map(|i| rs[i] + pose.t_sb[i]))
}

/// Spatial point to `(x_p, y_p, depth)`; `None` behind the image plane.
pub fn project<T: Real>(x_s: &Vec3<T>, cam: &CameraModel<T>, pose: &BodyPose<T>) -> Option<(T, T, T)> {
    let d = [0, 1, 2].map(|i| x_s[i] - pose.t_sb[i]);
    let x_b = mat_tr_vec(&pose.r_sb, &d);
    let db = [0, 1, 2].map(|i| x_b[i] - cam.t_bc[i]);
    let x_c = mat_tr_vec(&cam.r_bc, &db);
    if !(x_c[2] > T::zero()) {
        return None;
    }
    Some((cam.fx * x_c[0] / x_c[2] + cam.cx, cam.fy * x_c[1] / x_c[2] + cam.cy, x_c[2]))
}

/// Groups features by box. A feature inside several boxes goes to the box
/// whose center is nearest in pixels (lowest index on ties); features in no
/// box are dropped. Returns one index list per box.
pub fn assign_features<T: Real>(pixels: &[(T, T)], boxes: &[BoundingBox<T>]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); boxes.len()];
    for (i, &(x, y)) in pixels.iter().enumerate() {
        let mut best: Option<(usize, T)> = None;
        for (b, bb) in boxes.iter().enumerate() {
            if !bb.contains(x, y) {
                continue;
            }
            let (cx, cy) = bb.center();
            let d = (x - cx).hypot(y - cy);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((b, d));
            }
        }
        if let Some((b, _)) = best {
            groups[b].push(i);
        }
    }
    groups
}

/// Disc obstacle from a feature group: centroid in the plane, radius half
/// the largest pairwise 3D distance.
pub fn to_obstacle<T: Real>(group: &[Vec3<T>]) -> Result<Obstacle<T>, PerceptionError> {
    if group.is_empty() {
        return Err(PerceptionError::EmptyGroup);
    }
    let n = T::from_usize(group.len()).unwrap();
    let cx = group.iter().map(|p| p[0]).sum::<T>() / n;
    let cy = group.iter().map(|p| p[1]).sum::<T>() / n;
    let mut max_d2 = T::zero();
    for (i, a) in group.iter().enumerate() {
        for b in &group[i + 1..] {
            let d2 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<T>();
            max_d2 = max_d2.max(d2);
        }
    }
    Ok(Obstacle::new(cx, cy, lit::<T>(0.5) * max_d2.sqrt()))
}

/// Keeps obstacles whose center lies within `max_range` (inclusive).
pub fn filter_range<T: Real>(obstacles: &[Obstacle<T>], robot: State2<T>, max_range: T) -> Vec<Obstacle<T>> {
    obstacles
        .iter()
        .filter(|o| (o.cx - robot.x).hypot(o.cy - robot.y) <= max_range)
        .copied()
        .collect()
}

/// One frame of detector output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame<T> {
    pub id: u64,
    pub features: Vec<FeatureObservation<T>>,
    pub boxes: Vec<BoundingBox<T>>,
}

/// Full pipeline for one frame: unproject, group by box, build discs.
/// Boxes that receive no features produce no obstacle.
pub fn frame_obstacles<T: Real>(
    frame: &Frame<T>,
    cam: &CameraModel<T>,
    pose: &BodyPose<T>,
) -> Result<Vec<Obstacle<T>>, PerceptionError> {
    Ok(frame_detections(frame, cam, pose)?.into_iter().map(|(o, _)| o).collect())
}

/// Like [`frame_obstacles`], paired with the number of features behind
/// each disc.
pub fn frame_detections<T: Real>(
    frame: &Frame<T>,
    cam: &CameraModel<T>,
    pose: &BodyPose<T>,
) -> Result<Vec<(Obstacle<T>, usize)>, PerceptionError> {
    let pixels: Vec<(T, T)> = frame.features.iter().map(|f| (f.x_p, f.y_p)).collect();
    let points = frame
        .features
        .iter()
        .map(|f| unproject(f, cam, pose))
        .collect::<Result<Vec<_>, _>>()?;
    assign_features(&pixels, &frame.boxes)
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| Ok((to_obstacle(&g.iter().map(|&i| points[i]).collect::<Vec<_>>())?, g.len())))
        .collect()
}

/// Renders 3D point groups into a synthetic detector frame: each visible
/// point becomes a feature and each group gets the tight box around its
/// projections, padded by `pad` pixels.
pub fn render_frame<T: Real>(
    id: u64,
    groups: &[(String, Vec<Vec3<T>>)],
    cam: &CameraModel<T>,
    pose: &BodyPose<T>,
    pad: T,
) -> Frame<T> {
    let mut frame = Frame {
        id,
        ..Frame::default()
    };
    for (label, pts) in groups {
        let proj: Vec<_> = pts.iter().filter_map(|p| project(p, cam, pose)).collect();
        if proj.is_empty() {
            continue;
        }
        let mut bb = BoundingBox {
            frame: id,
            x_min: T::infinity(),
            y_min: T::infinity(),
            x_max: T::neg_infinity(),
            y_max: T::neg_infinity(),
            label: label.clone(),
        };
        for &(x, y, d) in &proj {
            bb.x_min = bb.x_min.min(x - pad);
            bb.y_min = bb.y_min.min(y - pad);
            bb.x_max = bb.x_max.max(x + pad);
            bb.y_max = bb.y_max.max(y + pad);
            frame.features.push(FeatureObservation { frame: id, x_p: x, y_p: y, depth: d });
        }
        frame.boxes.push(bb);
    }
    frame
}

/// The eight corners of an axis-aligned cube.
pub fn cube_corners<T: Real>(center: Vec3<T>, side: T) -> Vec<Vec3<T>> {
    let h = side * lit(0.5);
    let mut out = Vec::with_capacity(8);
    for sx in [-h, h] {
        for sy in [-h, h] {
            for sz in [-h, h] {
                out.push([center[0] + sx, center[1] + sy, center[2] + sz]);
            }
        }
    }
    out
}

/// Reads detector records. Blank lines and `#` comments are skipped;
/// 4-field rows are features `frame_id, x_p, y_p, Z_c` and 6-field rows are
/// boxes `frame_id, x_min, y_min, x_max, y_max, label`. Frames come back in
/// order of first appearance.
pub fn parse_frames<T: Real, R: BufRead>(reader: R) -> Result<Vec<Frame<T>>, PerceptionError> {
    let mut frames: Vec<Frame<T>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| PerceptionError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        let err = |msg: String| PerceptionError::Parse { line: lineno, msg };
        let frame: u64 = fields[0].parse().map_err(|_| err(format!("bad frame id `{}`", fields[0])))?;
        let num = |i: usize| -> Result<T, PerceptionError> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| err(format!("field {} is not a number: `{}`", i + 1, fields[i])))?;
            if !v.is_finite() {
                return Err(err(format!("field {} is not finite", i + 1)));
            }
            Ok(lit(v))
        };
        let pos = match frames.iter().position(|f| f.id == frame) {
            Some(p) => p,
            None => {
                frames.push(Frame {
                    id: frame,
                    ..Frame::default()
                });
                frames.len() - 1
            }
        };
        match fields.len() {
            4 => {
                let depth = num(3)?;
                if !(depth > T::zero()) {
                    return Err(err("depth must be positive".into()));
                }
                frames[pos].features.push(FeatureObservation {
                    frame,
                    x_p: num(1)?,
                    y_p: num(2)?,
                    depth,
                });
            }
            6 => {
                let bb = BoundingBox {
                    frame,
                    x_min: num(1)?,
                    y_min: num(2)?,
                    x_max: num(3)?,
                    y_max: num(4)?,
                    label: fields[5].to_string(),
                };
                if !(bb.x_min < bb.x_max && bb.y_min < bb.y_max) {
                    return Err(err("box needs x_min < x_max and y_min < y_max".into()));
                }
                frames[pos].boxes.push(bb);
            }
            n => return Err(err(format!("expected 4 or 6 fields, found {n}"))),
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k_identity() -> CameraModel<f64> {
        let i = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        CameraModel::new(1.0, 1.0, 0.0, 0.0, i, [0.0; 3]).unwrap()
    }

    #[test]
    fn principal_ray_examples() {
        let obs = FeatureObservation { frame: 0, x_p: 0.0, y_p: 0.0, depth: 5.0 };
        assert_eq!(unproject(&obs, &k_identity(), &BodyPose::identity()).unwrap(), [0.0, 0.0, 5.0]);
        let mut cam = k_identity();
        cam.fx = 600.0;
        cam.fy = 590.0;
        cam.cx = 320.0;
        cam.cy = 240.0;
        let obs = FeatureObservation { frame: 0, x_p: 320.0, y_p: 240.0, depth: 3.5 };
        assert_eq!(unproject(&obs, &cam, &BodyPose::identity()).unwrap(), [0.0, 0.0, 3.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let obs = FeatureObservation { frame: 0, x_p: 0.0, y_p: 0.0, depth: 0.0 };
        assert!(unproject(&obs, &k_identity(), &BodyPose::identity()).is_err());
        let i = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(CameraModel::new(0.0, 1.0, 0.0, 0.0, i, [0.0; 3]), Err(PerceptionError::BadIntrinsics));
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert_eq!(BodyPose::new(reflect, [0.0; 3]), Err(PerceptionError::BadRotation));
        assert_eq!(to_obstacle::<f64>(&[]), Err(PerceptionError::EmptyGroup));
    }

    #[test]
    fn forward_camera_sees_ahead() {
        let cam = CameraModel::forward_facing(0.5);
        let pose = BodyPose::planar(1.0, 2.0, std::f64::consts::FRAC_PI_2);
        // a point 3 m in front of a robot facing +y, at camera height
        let (x, y, d) = project(&[1.0, 5.0, 0.5], &cam, &pose).unwrap();
        assert!((x - 320.0).abs() < 1e-9 && (y - 240.0).abs() < 1e-9 && (d - 3.0).abs() < 1e-12);
        assert!(project(&[1.0, -1.0, 0.5], &cam, &pose).is_none());
    }

    #[test]
    fn cube_radius_and_center() {
        let o = to_obstacle(&cube_corners([4.0, 0.0, 0.5], 1.0)).unwrap();
        assert!((o.radius - 3.0_f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((o.cx - 4.0).abs() < 1e-12 && o.cy.abs() < 1e-12);
        let o = to_obstacle(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!((o.cx, o.cy, o.radius), (1.0, 2.0, 0.0));
        let o = to_obstacle(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!((o.cx, o.cy, o.radius), (1.0, 0.0, 1.0));
    }

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox<f64> {
        BoundingBox { frame: 0, x_min: x0, y_min: y0, x_max: x1, y_max: y1, label: "box".into() }
    }

    #[test]
    fn feature_assignment_rules() {
        let pix = [(1.0, 1.0), (5.0, 5.0), (10.0, 0.0)];
        assert_eq!(assign_features(&pix, &[bb(0.0, 0.0, 10.0, 10.0)]), vec![vec![0, 1, 2]]);
        // on the edge of the second box only
        let g = assign_features(&[(10.0, 3.0)], &[bb(0.0, 0.0, 9.0, 9.0), bb(10.0, 0.0, 20.0, 9.0)]);
        assert_eq!(g, vec![vec![], vec![0]]);
        // overlap: nearer to A's center
        let g = assign_features(&[(4.0, 5.0)], &[bb(0.0, 0.0, 10.0, 10.0), bb(3.0, 0.0, 13.0, 10.0)]);
        assert_eq!(g, vec![vec![0], vec![]]);
        // exact tie goes to the lower index
        let g = assign_features(&[(5.0, 5.0)], &[bb(0.0, 0.0, 10.0, 10.0), bb(0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(g, vec![vec![0], vec![]]);
    }

    #[test]
    fn range_filter() {
        let obs = [Obstacle::new(6.0, 0.0, 0.5), Obstacle::new(5.0, 0.0, 0.5), Obstacle::new(1.0, 1.0, 0.1)];
        let kept = filter_range(&obs, State2::new(0.0, 0.0), 5.0);
        assert_eq!(kept, vec![obs[1], obs[2]]);
        assert!(filter_range::<f64>(&[], State2::new(0.0, 0.0), 5.0).is_empty());
    }

    #[test]
    fn rendered_cube_recovers_obstacle() {
        let cam = CameraModel::forward_facing(0.5);
        let pose = BodyPose::planar(0.0, 0.0, 0.0);
        let corners = cube_corners([4.0, 0.25, 0.5], 1.0);
        let frame = render_frame(3, &[("cube".to_string(), corners)], &cam, &pose, 2.0);
        assert_eq!(frame.features.len(), 8);
        let obs = frame_obstacles(&frame, &cam, &pose).unwrap();
        assert_eq!(obs.len(), 1);
        assert!((obs[0].radius - 3.0_f64.sqrt() / 2.0).abs() < 1e-9);
        assert!((obs[0].cx - 4.0).abs() < 1e-9 && (obs[0].cy - 0.25).abs() < 1e-9);
    }

    #[test]
    fn parses_records_and_reports_errors() {
        let text = "# comment\n0, 100, 120, 4.5\n0, 90, 100, 200, 220, cube\n\n1, 5, 6, 2.0\n";
        let frames = parse_frames::<f64, _>(text.as_bytes()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].features.len(), 1);
        assert_eq!(frames[0].boxes[0].label, "cube");
        assert_eq!(frames[1].features[0].depth, 2.0);
        let bad = parse_frames::<f64, _>("0, 1, 2\n".as_bytes()).unwrap_err();
        assert!(matches!(bad, PerceptionError::Parse { line: 1, .. }));
        let bad = parse_frames::<f64, _>("0, 1, 2, -1\n".as_bytes()).unwrap_err();
        assert!(matches!(bad, PerceptionError::Parse { line: 1, .. }));
        let bad = parse_frames::<f64, _>("0, 5, 0, 1, 1, x\n".as_bytes()).unwrap_err();
        assert!(matches!(bad, PerceptionError::Parse { line: 1, .. }));
    }

    fn rotation(a: f64, b: f64, c: f64) -> Mat3<f64> {
        // Z-Y-X Euler angles
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            a in -3.0..3.0f64, b in -1.5..1.5f64, c in -3.0..3.0f64,
            px in -5.0..5.0f64, py in -5.0..5.0f64, pz in -2.0..2.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, depth in 0.2..20.0f64,
            fx in 100.0..1000.0f64, fy in 100.0..1000.0f64,
        ) {
            let cam = CameraModel::new(fx, fy, 320.0, 240.0, rotation(b, a, c), [0.1, -0.2, 0.5]).unwrap();
            let pose = BodyPose::new(rotation(a, c, b), [px, py, pz]).unwrap();
            // build a point in front of the camera, then go world -> pixel -> world
            let obs = FeatureObservation { frame: 0, x_p: 320.0 + dx * 300.0, y_p: 240.0 + dy * 200.0, depth };
            let p = unproject(&obs, &cam, &pose).unwrap();
            let (x, y, d) = project(&p, &cam, &pose).unwrap();
            let back = unproject(&FeatureObservation { frame: 0, x_p: x, y_p: y, depth: d }, &cam, &pose).unwrap();
            for k in 0..3 {
                prop_assert!((back[k] - p[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn radius_rotation_invariant(theta in -3.2..3.2f64, tx in -5.0..5.0f64, ty in -5.0..5.0f64,
                                     pts in proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64, 0.0..2.0f64), 1..12)) {
            let group: Vec<Vec3<f64>> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let r = rot_z(theta);
            let moved: Vec<Vec3<f64>> = group.iter().map(|p| {
                let q = mat_vec(&r, p);
                [q[0] + tx, q[1] + ty, q[2]]
            }).collect();
            let a = to_obstacle(&group).unwrap();
            let b = to_obstacle(&moved).unwrap();
            prop_assert!((a.radius - b.radius).abs() < 1e-9);
            let c = mat_vec(&r, &[a.cx, a.cy, 0.0]);
            prop_assert!((c[0] + tx - b.cx).abs() < 1e-9 && (c[1] + ty - b.cy).abs() < 1e-9);
        }

        #[test]
        fn assignment_partitions(pix in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64), 0..30),
                                 boxes in proptest::collection::vec((0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64), 1..5)) {
            let boxes: Vec<_> = boxes.iter().map(|&(x, y, w, h)| bb(x, y, x + w, y + h)).collect();
            let groups = assign_features(&pix, &boxes);
            let mut seen = vec![0; pix.len()];
            for g in &groups {
                for &i in g {
                    seen[i] += 1;
                }
            }
            for (i, &(x, y)) in pix.iter().enumerate() {
                let inside = boxes.iter().any(|b| b.contains(x, y));
                prop_assert_eq!(seen[i], usize::from(inside));
            }
        }
    }
}

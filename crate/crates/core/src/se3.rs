//! Rigid transforms stored as axis-angle rotation plus translation, and the
//! trajectory containers shared by the rest of the crate.
//!
//! Rotations are kept in canonical axis-angle form: the angle lies in
//! `[0, π]`, and at exactly `π` the sign of the vector is fixed so that its
//! first nonzero component is positive. Composition goes through unit
//! quaternions, which are renormalized on every call.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;

/// Rigid transform: `r` is the axis-angle rotation (radians times unit axis),
/// `p` the translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Vec3,
    pub p: Vec3,
}

const PI_TOL: f64 = 1e-12;

/// Flips `v` so its first component with magnitude above `tol` is positive.
pub(crate) fn sign_canonical(v: Vec3, tol: f64) -> (Vec3, f64) {
    for i in 0..3 {
        if v[i].abs() > tol {
            return if v[i] < 0.0 { (-v, -1.0) } else { (v, 1.0) };
        }
    }
    (v, 1.0)
}

/// Quaternion → canonical axis-angle vector.
pub fn quat_to_rotvec(q: &UnitQuaternion<f64>) -> Vec3 {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-300 {
        return Vec3::zeros();
    }
    let angle = 2.0 * s.atan2(w);
    // small-angle branch keeps full precision for tiny rotations
    let rv = if angle < 1e-8 { v * 2.0 } else { v * (angle / s) };
    canonical_rotvec(rv)
}

pub fn rotvec_to_quat(r: &Vec3) -> UnitQuaternion<f64> {
    let angle = r.norm();
    if angle < 1e-300 {
        return UnitQuaternion::identity();
    }
    let half = 0.5 * angle;
    let k = half.sin() / angle;
    UnitQuaternion::new_unchecked(Quaternion::new(half.cos(), r.x * k, r.y * k, r.z * k))
}

pub fn rotvec_to_matrix(r: &Vec3) -> Matrix3<f64> {
    rotvec_to_quat(r).to_rotation_matrix().into_inner()
}

pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> Vec3 {
    let rot = Rotation3::from_matrix_unchecked(*m);
    quat_to_rotvec(&UnitQuaternion::from_rotation_matrix(&rot))
}

/// Wraps an axis-angle vector into the canonical range.
pub fn canonical_rotvec(r: Vec3) -> Vec3 {
    let angle = r.norm();
    if angle <= PI - PI_TOL {
        return r;
    }
    let axis = r / angle;
    // reduce modulo 2π, then reflect angles above π onto the opposite axis
    let mut a = angle.rem_euclid(2.0 * PI);
    let mut ax = axis;
    if a > PI {
        a = 2.0 * PI - a;
        ax = -ax;
    }
    let out = ax * a;
    if (a - PI).abs() <= PI_TOL {
        sign_canonical(ax * PI, 0.0).0
    } else {
        out
    }
}

/// Rotation angle of `a⁻¹ b`, computed without the precision loss of `acos`.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let s = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
    let c = 0.5 * (m.trace() - 1.0);
    s.atan2(c)
}

impl Pose {
    pub fn new(r: Vec3, p: Vec3) -> Self {
        Pose { r, p }.canonicalize()
    }

    pub fn identity() -> Self {
        Pose { r: Vec3::zeros(), p: Vec3::zeros() }
    }

    pub fn from_translation(p: Vec3) -> Self {
        Pose { r: Vec3::zeros(), p }
    }

    pub fn from_rotvec(r: Vec3) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    /// Rotation by `angle` about the unit `axis`, no translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Pose::new(axis.normalize() * angle, Vec3::zeros())
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.r.x, self.r.y, self.r.z, self.p.x, self.p.y, self.p.z]
    }

    pub fn canonicalize(self) -> Self {
        Pose { r: canonical_rotvec(self.r), p: self.p }
    }

    pub fn is_canonical(&self) -> bool {
        canonical_rotvec(self.r) == self.r
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        rotvec_to_quat(&self.r)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotvec_to_matrix(&self.r)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, p: Vec3) -> Self {
        let q = UnitQuaternion::new_normalize(q.into_inner());
        Pose { r: quat_to_rotvec(&q), p }
    }

    pub fn from_matrix(m: &Matrix3<f64>, p: Vec3) -> Self {
        Pose { r: matrix_to_rotvec(m), p }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.quaternion() * x + self.p
    }

    pub fn rotate(&self, x: &Vec3) -> Vec3 {
        self.quaternion() * x
    }

    /// Largest absolute per-component difference of the 6-vector forms.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.r - other.r).amax().max((self.p - other.p).amax())
    }

    /// Rotation angle between the two poses plus the translation distance
    /// scaled separately; returns `(angle, distance)`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (
            rotation_distance(&self.rotation_matrix(), &other.rotation_matrix()),
            (self.p - other.p).norm(),
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let qa = a.quaternion();
    let qb = b.quaternion();
    let q = UnitQuaternion::new_normalize((qa * qb).into_inner());
    Pose { r: quat_to_rotvec(&q), p: qa * b.p + a.p }
}

pub fn inverse(a: &Pose) -> Pose {
    let q = a.quaternion().inverse();
    Pose { r: quat_to_rotvec(&q), p: -(q * a.p) }
}

/// `T_i^j` such that `compose(t0i, T_i^j) = t0j`.
pub fn relative_transform(t0i: &Pose, t0j: &Pose) -> Pose {
    compose(&inverse(t0i), t0j)
}

/// Per-body time series of world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTrajectory {
    pub body_id: usize,
    pub name: String,
    pub poses: Vec<Pose>,
    pub dt: f64,
}

impl BodyTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObservationError {
    #[error("observation set has no bodies")]
    Empty,
    #[error("trajectories need at least 2 frames, body {body} has {frames}")]
    TooShort { body: usize, frames: usize },
    #[error("body {body} has {frames} frames, expected {expected}")]
    LengthMismatch { body: usize, frames: usize, expected: usize },
    #[error("dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("body ids must be unique and contiguous from 0; position {index} holds id {id}")]
    BadBodyId { index: usize, id: usize },
    #[error("controls have {rows} rows, expected {expected}")]
    ControlsMismatch { rows: usize, expected: usize },
    #[error("non-finite value in pose {frame} of body {body}")]
    NonFinite { body: usize, frame: usize },
}

/// All observed bodies of one scene, plus optional applied generalized
/// forces (one row per frame) that drove the motion.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub bodies: Vec<BodyTrajectory>,
    pub scene: Option<String>,
    pub seed: Option<u64>,
    pub controls: Option<Vec<Vec<f64>>>,
}

impl ObservationSet {
    pub fn new(bodies: Vec<BodyTrajectory>) -> Self {
        ObservationSet { bodies, scene: None, seed: None, controls: None }
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn n_frames(&self) -> usize {
        self.bodies.first().map_or(0, |b| b.poses.len())
    }

    pub fn dt(&self) -> f64 {
        self.bodies.first().map_or(0.0, |b| b.dt)
    }

    pub fn validate(&self) -> Result<(), ObservationError> {
        let first = self.bodies.first().ok_or(ObservationError::Empty)?;
        let t = first.poses.len();
        let dt = first.dt;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ObservationError::BadDt(dt));
        }
        for (index, b) in self.bodies.iter().enumerate() {
            if b.body_id != index {
                return Err(ObservationError::BadBodyId { index, id: b.body_id });
            }
            if b.poses.len() < 2 {
                return Err(ObservationError::TooShort { body: b.body_id, frames: b.poses.len() });
            }
            if b.poses.len() != t {
                return Err(ObservationError::LengthMismatch { body: b.body_id, frames: b.poses.len(), expected: t });
            }
            if b.dt != dt {
                return Err(ObservationError::BadDt(b.dt));
            }
            for (frame, pose) in b.poses.iter().enumerate() {
                if !pose.to_array().iter().all(|x| x.is_finite()) {
                    return Err(ObservationError::NonFinite { body: b.body_id, frame });
                }
            }
        }
        if let Some(c) = &self.controls {
            if c.len() != t {
                return Err(ObservationError::ControlsMismatch { rows: c.len(), expected: t });
            }
        }
        Ok(())
    }

    /// Relative transform sequence `T_i^j[t]`.
    pub fn relative_sequence(&self, i: usize, j: usize) -> Vec<Pose> {
        self.bodies[i]
            .poses
            .iter()
            .zip(&self.bodies[j].poses)
            .map(|(a, b)| relative_transform(a, b))
            .collect()
    }

    /// Left-multiplies every world pose by `w`.
    pub fn transformed(&self, w: &Pose) -> ObservationSet {
        let mut out = self.clone();
        for b in &mut out.bodies {
            for p in &mut b.poses {
                *p = compose(w, p);
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyJson {
    id: usize,
    #[serde(default)]
    name: String,
    poses: Vec<[f64; 6]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryJson {
    dt: f64,
    bodies: Vec<BodyJson>,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controls: Option<Vec<Vec<f64>>>,
}

impl Serialize for ObservationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrajectoryJson {
            dt: self.dt(),
            bodies: self
                .bodies
                .iter()
                .map(|b| BodyJson {
                    id: b.body_id,
                    name: b.name.clone(),
                    poses: b.poses.iter().map(Pose::to_array).collect(),
                })
                .collect(),
            seed: self.seed,
            scene: self.scene.clone(),
            controls: self.controls.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObservationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = TrajectoryJson::deserialize(d)?;
        let bodies = raw
            .bodies
            .into_iter()
            .map(|b| BodyTrajectory {
                body_id: b.id,
                name: b.name,
                // poses are stored raw; validate() rejects non-canonical input
                poses: b.poses.into_iter().map(Pose::from_array).collect(),
                dt: raw.dt,
            })
            .collect();
        Ok(ObservationSet { bodies, scene: raw.scene, seed: raw.seed, controls: raw.controls })
    }
}

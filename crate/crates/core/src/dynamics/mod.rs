//! Articulated rigid-body simulation: forward kinematics, articulated-body
//! forward dynamics, semi-implicit Euler stepping, rollouts, the preset
//! scenes and the synthetic pose-observation generator.

mod aba;
pub mod observe;
pub mod presets;
pub mod spatial;

pub use aba::Model;
pub use observe::{generate_observations, NoiseConfig};
pub use presets::{preset, Scene, PRESET_NAMES};

use crate::joint_fit::{twist_angle, unwrap_angles};
use crate::se3::{compose, Pose, Vec3};
use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("articulated inertia of joint {joint} is not positive definite ({value})")]
    SingularInertia { joint: usize, value: f64 },
    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
    /// Six virtual joints (translation x, y, z then rotation z, y, x); only
    /// valid on a root link.
    Free,
}

impl JointKind {
    pub fn dof(self) -> usize {
        match self {
            JointKind::Revolute | JointKind::Prismatic => 1,
            JointKind::Fixed => 0,
            JointKind::Free => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub name: String,
    pub mass: f64,
    pub inertia_diag: [f64; 3],
    pub com: [f64; 3],
    #[serde(default)]
    pub geometry: String,
}

/// Joint connecting link `i` to its parent. The child link frame sits at
/// `mount ∘ J(q)` in the parent link frame, where `J` rotates about or
/// translates along `axis` (given in the mount frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    #[serde(rename = "type")]
    pub kind: JointKind,
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    #[serde(with = "pose_array", default)]
    pub mount: Pose,
    /// `None` attaches to the world.
    pub parent: Option<usize>,
    #[serde(default)]
    pub damping: f64,
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

mod pose_array {
    use crate::se3::Pose;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        p.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        Ok(Pose::from_array(<[f64; 6]>::deserialize(d)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Base {
    Fixed,
    Floating,
}

/// Links with one joint each (`joints[i]` attaches `links[i]`), listed in
/// topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mechanism {
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub gravity: [f64; 3],
    /// Internal integration substeps per `step` call.
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl SimState {
    pub fn zeros(n: usize) -> Self {
        SimState { q: vec![0.0; n], qd: vec![0.0; n] }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.q.iter().chain(&self.qd).copied().collect()
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let n = x.len() / 2;
        SimState { q: x[..n].to_vec(), qd: x[n..].to_vec() }
    }

    fn is_sane(&self) -> bool {
        self.q.iter().chain(&self.qd).all(|v| v.is_finite() && v.abs() <= 1e6)
    }
}

impl Mechanism {
    pub fn dof(&self) -> usize {
        self.joints.iter().map(|j| j.kind.dof()).sum()
    }

    pub fn base(&self) -> Base {
        if self.joints.iter().any(|j| j.kind == JointKind::Free) {
            Base::Floating
        } else {
            Base::Fixed
        }
    }

    /// Offset of each joint's coordinates in `q`.
    pub fn q_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.joints.len());
        let mut k = 0;
        for j in &self.joints {
            out.push(k);
            k += j.kind.dof();
        }
        out
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidMechanism(m));
        if self.links.len() != self.joints.len() {
            return bad(format!("{} links but {} joints", self.links.len(), self.joints.len()));
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        for (i, (l, j)) in self.links.iter().zip(&self.joints).enumerate() {
            if !(l.mass > 0.0) {
                return bad(format!("link {i} mass must be positive"));
            }
            let [a, b, c] = l.inertia_diag;
            if !(a > 0.0 && b > 0.0 && c > 0.0) {
                return bad(format!("link {i} inertia must be positive"));
            }
            let tol = 1e-12 * (a + b + c);
            if a > b + c + tol || b > a + c + tol || c > a + b + tol {
                return bad(format!("link {i} inertia violates the triangle inequality"));
            }
            if let Some(p) = j.parent {
                if p >= i {
                    return bad(format!("joint {i} parent {p} is not earlier in the list"));
                }
                if j.kind == JointKind::Free {
                    return bad(format!("joint {i}: free joints must attach to the world"));
                }
            }
            if matches!(j.kind, JointKind::Revolute | JointKind::Prismatic) {
                let n = Vec3::from(j.axis).norm();
                if (n - 1.0).abs() > 1e-9 {
                    return bad(format!("joint {i} axis must be unit length"));
                }
            }
        }
        Ok(())
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    /// World pose of every link.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<Pose>, DynamicsError> {
        let n = self.dof();
        if q.len() != n {
            return Err(DynamicsError::DimensionMismatch { what: "q", expected: n, got: q.len() });
        }
        let offsets = self.q_offsets();
        let mut out: Vec<Pose> = Vec::with_capacity(self.links.len());
        for (i, j) in self.joints.iter().enumerate() {
            let local = compose(&j.mount, &joint_transform(j, &q[offsets[i]..offsets[i] + j.kind.dof()]));
            let world = match j.parent {
                Some(p) => compose(&out[p], &local),
                None => local,
            };
            out.push(world);
        }
        Ok(out)
    }

    /// Joint coordinates reproducing the given link world poses, with revolute
    /// series unwrapped when applied frame by frame via
    /// [`Mechanism::joint_trajectory`].
    pub fn inverse_kinematics(&self, poses: &[Pose]) -> Result<Vec<f64>, DynamicsError> {
        if poses.len() != self.links.len() {
            return Err(DynamicsError::DimensionMismatch { what: "poses", expected: self.links.len(), got: poses.len() });
        }
        let mut q = Vec::with_capacity(self.dof());
        for (i, j) in self.joints.iter().enumerate() {
            let parent = j.parent.map_or(Pose::identity(), |p| poses[p]);
            let local = compose(&j.mount.inverse(), &compose(&parent.inverse(), &poses[i]));
            let axis = Vec3::from(j.axis);
            match j.kind {
                JointKind::Revolute => q.push(twist_angle(&local.quaternion(), &axis)),
                JointKind::Prismatic => q.push(axis.dot(&local.p)),
                JointKind::Fixed => {}
                JointKind::Free => {
                    let m = local.rotation_matrix();
                    let (rz, ry, rx) = zyx_angles(&m);
                    q.extend([local.p.x, local.p.y, local.p.z, rz, ry, rx]);
                }
            }
        }
        Ok(q)
    }

    /// Joint coordinate series from per-frame link poses (`frames[t][link]`),
    /// unwrapping angular coordinates over time.
    pub fn joint_trajectory(&self, frames: &[Vec<Pose>]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        let mut qs = frames.iter().map(|f| self.inverse_kinematics(f)).collect::<Result<Vec<_>, _>>()?;
        let angular = self.angular_coordinates();
        for k in angular {
            let mut col: Vec<f64> = qs.iter().map(|q| q[k]).collect();
            unwrap_angles(&mut col);
            for (q, v) in qs.iter_mut().zip(col) {
                q[k] = v;
            }
        }
        Ok(qs)
    }

    /// Indices of coordinates that are angles.
    pub fn angular_coordinates(&self) -> Vec<usize> {
        let offsets = self.q_offsets();
        let mut out = Vec::new();
        for (j, off) in self.joints.iter().zip(offsets) {
            match j.kind {
                JointKind::Revolute => out.push(off),
                JointKind::Free => out.extend(off + 3..off + 6),
                _ => {}
            }
        }
        out
    }

    pub fn model(&self) -> Model {
        Model::new(self)
    }

    pub fn forward_dynamics(&self, state: &SimState, tau: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.model().forward_dynamics(state, tau)
    }

    pub fn step(&self, state: &SimState, tau: &[f64], dt: f64) -> Result<SimState, DynamicsError> {
        self.model().step(state, tau, dt)
    }

    /// Kinetic plus gravitational potential energy.
    pub fn energy(&self, state: &SimState) -> Result<f64, DynamicsError> {
        self.model().energy(state)
    }
}

/// `R = Rz(a) Ry(b) Rx(c)` → `(a, b, c)`.
pub fn zyx_angles(m: &Matrix3<f64>) -> (f64, f64, f64) {
    let b = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    let a = m[(1, 0)].atan2(m[(0, 0)]);
    let c = m[(2, 1)].atan2(m[(2, 2)]);
    (a, b, c)
}

pub(crate) fn joint_transform(j: &Joint, q: &[f64]) -> Pose {
    let axis = Vec3::from(j.axis);
    match j.kind {
        JointKind::Revolute => Pose::from_rotvec(axis * q[0]),
        JointKind::Prismatic => Pose::from_translation(axis * q[0]),
        JointKind::Fixed => Pose::identity(),
        JointKind::Free => {
            let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), q[3])
                * Rotation3::from_axis_angle(&Vec3::y_axis(), q[4])
                * Rotation3::from_axis_angle(&Vec3::x_axis(), q[5]);
            Pose::from_matrix(rot.matrix(), Vec3::new(q[0], q[1], q[2]))
        }
    }
}

/// Result of [`rollout`]: `states[t]` and `poses[t][link]` for frames
/// `0..T`, starting at the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<SimState>,
    pub poses: Vec<Vec<Pose>>,
    pub dt: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Simulates `frames` frames from `x0`; `controls[t]` acts between frame `t`
/// and `t + 1`.
pub fn rollout(mech: &Mechanism, x0: &SimState, controls: &[Vec<f64>], frames: usize, dt: f64) -> Result<Rollout, DynamicsError> {
    let model = mech.model();
    rollout_model(&model, mech, x0, controls, frames, dt)
}

pub fn rollout_model(model: &Model, mech: &Mechanism, x0: &SimState, controls: &[Vec<f64>], frames: usize, dt: f64) -> Result<Rollout, DynamicsError> {
    if controls.len() != frames {
        return Err(DynamicsError::DimensionMismatch { what: "controls", expected: frames, got: controls.len() });
    }
    let mut states = Vec::with_capacity(frames);
    let mut poses = Vec::with_capacity(frames);
    let mut x = x0.clone();
    for t in 0..frames {
        if !x.is_sane() {
            return Err(DynamicsError::Diverged { step: t });
        }
        poses.push(mech.forward_kinematics(&x.q)?);
        states.push(x.clone());
        if t + 1 < frames {
            x = model.step(&x, &controls[t], dt)?;
        }
    }
    Ok(Rollout { states, poses, dt })
}

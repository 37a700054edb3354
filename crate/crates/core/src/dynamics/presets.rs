//! Built-in scenes. Every link frame sits on its joint (revolute pivots and
//! prismatic mounts), with the center of mass given as an offset.

use super::{generate_observations, rollout, DynamicsError, NoiseConfig, Joint, JointKind, Link, Mechanism, Rollout, SimState};
use crate::params::{ParamEntry, ParamSpec, ParamTarget};
use crate::se3::{ObservationSet, Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const PRESET_NAMES: [&str; 4] = ["cartpole", "double_pendulum", "three_link", "free_body"];

pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_FRAMES: usize = 200;

/// Sinusoidal reference tracked by a PD loop on one coordinate while a scene
/// is generated. The applied forces are recorded, so replaying them open-loop
/// reproduces the motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub dof: usize,
    pub kp: f64,
    pub kd: f64,
    pub offset: f64,
    /// `(amplitude, angular frequency, phase)` terms.
    pub terms: Vec<(f64, f64, f64)>,
    pub limit: f64,
}

impl Drive {
    fn reference(&self, t: f64) -> (f64, f64) {
        self.terms.iter().fold((self.offset, 0.0), |(x, v), &(a, w, ph)| {
            (x + a * (w * t + ph).sin(), v + a * w * (w * t + ph).cos())
        })
    }

    pub fn force(&self, t: f64, state: &SimState) -> f64 {
        let (r, rd) = self.reference(t);
        let f = self.kp * (r - state.q[self.dof]) + self.kd * (rd - state.qd[self.dof]);
        f.clamp(-self.limit, self.limit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub mechanism: Mechanism,
    pub x0: SimState,
    pub params: ParamSpec,
    pub drives: Vec<Drive>,
    pub dt: f64,
    pub frames: usize,
}

fn link(name: &str, mass: f64, inertia: [f64; 3], com: [f64; 3], geometry: &str) -> Link {
    Link { name: name.into(), mass, inertia_diag: inertia, com, geometry: geometry.into() }
}

fn joint(kind: JointKind, axis: [f64; 3], mount: [f64; 3], parent: Option<usize>, damping: f64) -> Joint {
    Joint { kind, axis, mount: Pose::from_translation(Vec3::from(mount)), parent, damping }
}

fn entry(name: &str, target: ParamTarget, lo: f64, hi: f64, truth: f64) -> ParamEntry {
    ParamEntry { name: name.into(), target, lo, hi, ground_truth: Some(truth) }
}

const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

/// Cart on a rail along x, pole hinged about y; `q = (x, θ)` with θ = 0
/// upright.
pub fn cartpole() -> Scene {
    let mechanism = Mechanism {
        links: vec![
            link("cart", 1.0, [0.004, 0.009, 0.011], [0.0, 0.0, 0.0], "box"),
            link("pole", 0.2, [0.0167, 0.0167, 0.0005], [0.0, 0.0, 0.5], "capsule"),
        ],
        joints: vec![
            joint(JointKind::Prismatic, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], None, 0.1),
            joint(JointKind::Revolute, [0.0, 1.0, 0.0], [0.0, 0.0, 0.1], Some(0), 0.01),
        ],
        gravity: GRAVITY,
        substeps: 1,
    };
    let params = ParamSpec {
        entries: vec![
            entry("cart_mass", ParamTarget::Mass { link: 0 }, 0.5, 2.0, 1.0),
            entry("pole_mass", ParamTarget::Mass { link: 1 }, 0.05, 0.5, 0.2),
            entry("pole_inertia_y", ParamTarget::Inertia { link: 1, axis: 1 }, 0.005, 0.05, 0.0167),
            entry("pole_damping", ParamTarget::Damping { joint: 1 }, 0.0, 0.05, 0.01),
        ],
    };
    Scene {
        name: "cartpole".into(),
        mechanism,
        x0: SimState { q: vec![0.0, PI - 0.6], qd: vec![0.0, 0.0] },
        params,
        drives: vec![Drive { dof: 0, kp: 40.0, kd: 8.0, offset: 0.0, terms: vec![(0.3, 2.3, 0.0), (0.1, 5.1, 1.0)], limit: 10.0 }],
        dt: DEFAULT_DT,
        frames: DEFAULT_FRAMES,
    }
}

/// Coupled pendulum: an offset-COM link on a fixed pivot carrying a short
/// pendulum; normal modes near 2:1.
pub fn double_pendulum() -> Scene {
    let mechanism = Mechanism {
        links: vec![
            link("l_link", 1.0, [0.03, 0.03, 0.005], [0.0, 0.0, -0.3], "l_shape"),
            link("bob", 0.15, [0.0005, 0.0005, 0.0001], [0.0, 0.0, -0.1], "cylinder"),
        ],
        joints: vec![
            joint(JointKind::Revolute, [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], None, 0.002),
            joint(JointKind::Revolute, [0.0, 1.0, 0.0], [0.15, 0.0, -0.45], Some(0), 0.0005),
        ],
        gravity: GRAVITY,
        substeps: 4,
    };
    let params = ParamSpec {
        entries: vec![
            entry("l_link_mass", ParamTarget::Mass { link: 0 }, 0.3, 3.0, 1.0),
            entry("bob_mass", ParamTarget::Mass { link: 1 }, 0.05, 0.5, 0.15),
        ],
    };
    Scene {
        name: "double_pendulum".into(),
        mechanism,
        x0: SimState { q: vec![1.2, -0.8], qd: vec![0.0, 0.0] },
        params,
        drives: vec![],
        dt: DEFAULT_DT,
        frames: DEFAULT_FRAMES,
    }
}

/// Hanging arm (revolute about y) with a slider along it (prismatic) and a
/// wrist link (revolute about x).
pub fn three_link() -> Scene {
    let mechanism = Mechanism {
        links: vec![
            link("arm", 0.8, [0.02, 0.02, 0.002], [0.0, 0.0, -0.25], "box"),
            link("slider", 0.3, [0.002, 0.002, 0.001], [0.0, 0.0, 0.0], "box"),
            link("wrist", 0.2, [0.001, 0.0015, 0.0012], [0.0, 0.08, -0.05], "box"),
        ],
        joints: vec![
            joint(JointKind::Revolute, [0.0, 1.0, 0.0], [0.0, 0.0, 1.2], None, 0.02),
            joint(JointKind::Prismatic, [0.0, 0.0, -1.0], [0.0, 0.0, -0.3], Some(0), 0.5),
            joint(JointKind::Revolute, [1.0, 0.0, 0.0], [0.0, 0.0, -0.05], Some(1), 0.01),
        ],
        gravity: GRAVITY,
        substeps: 4,
    };
    let params = ParamSpec {
        entries: vec![
            entry("arm_mass", ParamTarget::Mass { link: 0 }, 0.2, 2.0, 0.8),
            entry("slider_mass", ParamTarget::Mass { link: 1 }, 0.1, 1.0, 0.3),
            entry("wrist_mass", ParamTarget::Mass { link: 2 }, 0.05, 0.5, 0.2),
        ],
    };
    Scene {
        name: "three_link".into(),
        mechanism,
        x0: SimState { q: vec![0.2, 0.1, 0.0], qd: vec![0.0, 0.0, 0.0] },
        params,
        drives: vec![
            Drive { dof: 0, kp: 30.0, kd: 4.0, offset: 0.0, terms: vec![(0.5, 1.7, 0.0), (0.15, 4.3, 0.5)], limit: 40.0 },
            Drive { dof: 1, kp: 60.0, kd: 6.0, offset: 0.15, terms: vec![(0.08, 2.9, 1.0)], limit: 40.0 },
            Drive { dof: 2, kp: 2.0, kd: 0.2, offset: 0.0, terms: vec![(0.6, 3.7, 2.0)], limit: 10.0 },
        ],
        dt: DEFAULT_DT,
        frames: DEFAULT_FRAMES,
    }
}

/// Unconstrained body thrown upward, spinning mainly about its x axis.
pub fn free_body() -> Scene {
    let mechanism = Mechanism {
        links: vec![link("block", 1.0, [0.02, 0.05, 0.06], [0.0, 0.0, 0.0], "box")],
        joints: vec![Joint { kind: JointKind::Free, axis: [0.0, 0.0, 1.0], mount: Pose::identity(), parent: None, damping: 0.0 }],
        gravity: GRAVITY,
        substeps: 4,
    };
    let params = ParamSpec { entries: vec![entry("block_mass", ParamTarget::Mass { link: 0 }, 0.2, 5.0, 1.0)] };
    Scene {
        name: "free_body".into(),
        mechanism,
        x0: SimState { q: vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0], qd: vec![0.4, -0.3, 25.0, 0.3, 0.2, 3.0] },
        params,
        drives: vec![],
        dt: DEFAULT_DT,
        frames: DEFAULT_FRAMES,
    }
}

pub fn preset(name: &str) -> Result<Scene, DynamicsError> {
    match name {
        "cartpole" => Ok(cartpole()),
        "double_pendulum" => Ok(double_pendulum()),
        "three_link" => Ok(three_link()),
        "free_body" => Ok(free_body()),
        other => Err(DynamicsError::UnknownPreset(other.to_string())),
    }
}

impl Scene {
    /// Scene variant for `seed`: the initial state and drive phases are
    /// jittered so different seeds produce different motions. Seed 0 keeps
    /// the nominal scene.
    pub fn with_seed(&self, seed: u64) -> Scene {
        let mut s = self.clone();
        if seed == 0 {
            return s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angular = s.mechanism.angular_coordinates();
        for k in 0..s.x0.dof() {
            let scale = if angular.contains(&k) { 0.15 } else { 0.03 };
            s.x0.q[k] += scale * rng.random_range(-1.0..1.0);
        }
        for d in &mut s.drives {
            for term in &mut d.terms {
                term.1 *= 1.0 + 0.1 * rng.random_range(-1.0..1.0);
                term.2 += rng.random_range(0.0..2.0 * PI);
            }
        }
        s
    }

    /// Simulates the scene in closed loop with its drives and returns the
    /// rollout together with the applied forces (one row per frame).
    pub fn simulate(&self, frames: usize, dt: f64) -> Result<(Rollout, Vec<Vec<f64>>), DynamicsError> {
        let model = self.mechanism.model();
        let n = self.mechanism.dof();
        let mut controls = Vec::with_capacity(frames);
        let mut x = self.x0.clone();
        for t in 0..frames {
            let mut tau = vec![0.0; n];
            for d in &self.drives {
                tau[d.dof] = d.force(t as f64 * dt, &x);
            }
            if t + 1 < frames {
                x = model.step(&x, &tau, dt)?;
            }
            controls.push(tau);
        }
        let out = rollout(&self.mechanism, &self.x0, &controls, frames, dt)?;
        Ok((out, controls))
    }

    /// Closed-loop simulation of `frames` frames turned into (optionally
    /// noisy) pose observations that record the applied forces.
    pub fn observe(&self, noise: &NoiseConfig) -> Result<(Rollout, ObservationSet), DynamicsError> {
        let (out, controls) = self.simulate(self.frames, self.dt)?;
        let names: Vec<String> = self.mechanism.links.iter().map(|l| l.name.clone()).collect();
        let mut obs = generate_observations(&out, &names, noise);
        obs.scene = Some(self.name.clone());
        obs.controls = Some(controls);
        Ok((out, obs))
    }

    pub fn true_params(&self) -> Vec<f64> {
        self.params.read(&self.mechanism)
    }
}

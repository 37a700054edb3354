//! Pose observations from simulated motion, with optional Gaussian noise.

use super::Rollout;
use crate::se3::{compose, BodyTrajectory, ObservationSet, Pose, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_p: f64,
    pub sigma_r: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig { sigma_p: 0.0, sigma_r: 0.0, seed: 0 }
    }
}

/// Per-frame link poses of `rollout` as an observation set. Translations get
/// `N(0, σ_p²)` per axis; rotations are left-multiplied by a rotation about a
/// uniformly random axis with angle `|N(0, σ_r²)|`.
pub fn generate_observations(rollout: &Rollout, names: &[String], noise: &NoiseConfig) -> ObservationSet {
    let n_bodies = rollout.poses.first().map_or(names.len(), Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let pos_noise = Normal::new(0.0, noise.sigma_p.max(0.0)).expect("finite sigma");
    let rot_noise = Normal::new(0.0, noise.sigma_r.max(0.0)).expect("finite sigma");
    let mut bodies: Vec<BodyTrajectory> = (0..n_bodies)
        .map(|i| BodyTrajectory {
            body_id: i,
            name: names.get(i).cloned().unwrap_or_else(|| format!("body{i}")),
            poses: Vec::with_capacity(rollout.poses.len()),
            dt: rollout.dt,
        })
        .collect();
    for frame in &rollout.poses {
        for (b, pose) in bodies.iter_mut().zip(frame) {
            let mut out = *pose;
            if noise.sigma_p > 0.0 {
                out.p += Vec3::new(pos_noise.sample(&mut rng), pos_noise.sample(&mut rng), pos_noise.sample(&mut rng));
            }
            if noise.sigma_r > 0.0 {
                let axis: [f64; 3] = UnitSphere.sample(&mut rng);
                let angle = rot_noise.sample(&mut rng).abs();
                let perturb = Pose::from_rotvec(Vec3::from(axis) * angle);
                out = Pose { r: compose(&perturb, &out).r, p: out.p };
            }
            b.poses.push(out);
        }
    }
    ObservationSet::new(bodies)
}

//! Bounded parameter vectors and their mapping onto mechanism fields.

use crate::dynamics::{DynamicsError, Mechanism};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamTarget {
    Mass { link: usize },
    Inertia { link: usize, axis: usize },
    Com { link: usize, axis: usize },
    Damping { joint: usize },
    /// Joint mount translation, for kinematic fine-tuning of pivots.
    MountTranslation { joint: usize, axis: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub target: ParamTarget,
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub ground_truth: Option<f64>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    LimitViolation { name: String, value: f64, lo: f64, hi: f64 },
    #[error("parameter {name}: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub entries: Vec<ParamEntry>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.hi).collect()
    }

    pub fn ground_truth(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(|e| e.ground_truth).collect()
    }

    pub fn validate(&self, mech: &Mechanism) -> Result<(), ParamError> {
        for e in &self.entries {
            let invalid = |reason: &str| Err(ParamError::Invalid { name: e.name.clone(), reason: reason.into() });
            if !(e.lo < e.hi) || !e.lo.is_finite() || !e.hi.is_finite() {
                return invalid("limits must satisfy lo < hi");
            }
            let ok = match e.target {
                ParamTarget::Mass { link } => link < mech.links.len(),
                ParamTarget::Inertia { link, axis } | ParamTarget::Com { link, axis } => link < mech.links.len() && axis < 3,
                ParamTarget::Damping { joint } => joint < mech.joints.len(),
                ParamTarget::MountTranslation { joint, axis } => joint < mech.joints.len() && axis < 3,
            };
            if !ok {
                return invalid("target index out of range");
            }
            if let Some(g) = e.ground_truth {
                if !(e.lo..=e.hi).contains(&g) {
                    return invalid("ground truth outside limits");
                }
            }
        }
        Ok(())
    }

    pub fn check_dims(&self, theta: &[f64]) -> Result<(), ParamError> {
        if theta.len() != self.len() {
            return Err(ParamError::DimensionMismatch { expected: self.len(), got: theta.len() });
        }
        Ok(())
    }

    pub fn check_limits(&self, theta: &[f64]) -> Result<(), ParamError> {
        self.check_dims(theta)?;
        for (e, &v) in self.entries.iter().zip(theta) {
            if !(v >= e.lo && v <= e.hi) {
                return Err(ParamError::LimitViolation { name: e.name.clone(), value: v, lo: e.lo, hi: e.hi });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (e, v) in self.entries.iter().zip(theta.iter_mut()) {
            *v = v.clamp(e.lo, e.hi);
        }
    }

    /// Maps `theta` into `[0, 1]` per coordinate.
    pub fn normalize(&self, theta: &[f64]) -> Vec<f64> {
        self.entries.iter().zip(theta).map(|(e, v)| (v - e.lo) / (e.hi - e.lo)).collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        self.entries.iter().zip(unit).map(|(e, u)| e.lo + u * (e.hi - e.lo)).collect()
    }

    /// Copy of `mech` with `theta` written into the targeted fields.
    pub fn apply(&self, mech: &Mechanism, theta: &[f64]) -> Result<Mechanism, ParamError> {
        self.check_dims(theta)?;
        let mut m = mech.clone();
        for (e, &v) in self.entries.iter().zip(theta) {
            match e.target {
                ParamTarget::Mass { link } => m.links[link].mass = v,
                ParamTarget::Inertia { link, axis } => m.links[link].inertia_diag[axis] = v,
                ParamTarget::Com { link, axis } => m.links[link].com[axis] = v,
                ParamTarget::Damping { joint } => m.joints[joint].damping = v,
                ParamTarget::MountTranslation { joint, axis } => m.joints[joint].mount.p[axis] = v,
            }
        }
        for (i, l) in m.links.iter().enumerate() {
            if !(l.mass > 0.0) || l.inertia_diag.iter().any(|&x| !(x > 0.0)) {
                return Err(ParamError::Invalid { name: format!("link {i}"), reason: "mass and inertia must be positive".into() });
            }
        }
        Ok(m)
    }

    /// Same entries with link and joint indices moved to the slots of a
    /// reordered mechanism, where `order[k]` is the old index of slot `k`.
    pub fn remapped(&self, order: &[usize]) -> ParamSpec {
        let mut slot = vec![usize::MAX; order.len()];
        for (k, &old) in order.iter().enumerate() {
            slot[old] = k;
        }
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let target = match e.target {
                    ParamTarget::Mass { link } => ParamTarget::Mass { link: slot[link] },
                    ParamTarget::Inertia { link, axis } => ParamTarget::Inertia { link: slot[link], axis },
                    ParamTarget::Com { link, axis } => ParamTarget::Com { link: slot[link], axis },
                    ParamTarget::Damping { joint } => ParamTarget::Damping { joint: slot[joint] },
                    ParamTarget::MountTranslation { joint, axis } => ParamTarget::MountTranslation { joint: slot[joint], axis },
                };
                ParamEntry { target, ..e.clone() }
            })
            .collect();
        ParamSpec { entries }
    }

    /// Current values of the targeted fields in `mech`.
    pub fn read(&self, mech: &Mechanism) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| match e.target {
                ParamTarget::Mass { link } => mech.links[link].mass,
                ParamTarget::Inertia { link, axis } => mech.links[link].inertia_diag[axis],
                ParamTarget::Com { link, axis } => mech.links[link].com[axis],
                ParamTarget::Damping { joint } => mech.joints[joint].damping,
                ParamTarget::MountTranslation { joint, axis } => mech.joints[joint].mount.p[axis],
            })
            .collect()
    }
}

impl From<ParamError> for DynamicsError {
    fn from(e: ParamError) -> Self {
        DynamicsError::InvalidMechanism(e.to_string())
    }
}

/// Mean absolute error normalized by each parameter's range.
pub fn nmae(theta: &[f64], truth: &[f64], spec: &ParamSpec) -> Result<f64, ParamError> {
    spec.check_dims(theta)?;
    spec.check_dims(truth)?;
    if spec.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = spec.entries.iter().zip(theta.iter().zip(truth)).map(|(e, (a, b))| (a - b).abs() / (e.hi - e.lo)).sum();
    Ok(s / spec.len() as f64)
}

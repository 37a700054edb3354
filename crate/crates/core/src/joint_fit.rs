//! Joint hypotheses between two bodies from their relative-transform
//! sequence.
//!
//! Two consecutive relative transforms give a closed-form revolute or
//! prismatic hypothesis; a static hypothesis is the average pose. RANSAC
//! scores hypotheses by how many consecutive frame pairs they explain and
//! refits the winner on its inliers.
//!
//! Revolute and prismatic models carry a `zero` pose: the child pose at
//! `q = 0`. A revolute model maps `q` to `Rot(axis, pivot, q) ∘ zero`, a
//! prismatic model to `Trans(axis · q) ∘ zero` with `zero.p ⟂ axis`, so that
//! `q = axis · p` along the sequence.

use crate::se3::{compose, sign_canonical, Pose, Vec3};
use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
    Static,
    Free,
}

impl JointType {
    pub const FITTABLE: [JointType; 3] = [JointType::Revolute, JointType::Prismatic, JointType::Static];

    pub fn name(self) -> &'static str {
        match self {
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
            JointType::Static => "static",
            JointType::Free => "free",
        }
    }
}

impl std::fmt::Display for JointType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum JointModel {
    Revolute { axis: Vec3, pivot: Vec3, zero: Pose },
    Prismatic { axis: Vec3, zero: Pose },
    Static { pose: Pose },
    Free,
}

impl JointModel {
    pub fn revolute(axis: Vec3, pivot: Vec3) -> Self {
        JointModel::Revolute { axis: axis.normalize(), pivot, zero: Pose::identity() }
    }

    pub fn prismatic(axis: Vec3) -> Self {
        JointModel::Prismatic { axis: axis.normalize(), zero: Pose::identity() }
    }

    pub fn joint_type(&self) -> JointType {
        match self {
            JointModel::Revolute { .. } => JointType::Revolute,
            JointModel::Prismatic { .. } => JointType::Prismatic,
            JointModel::Static { .. } => JointType::Static,
            JointModel::Free => JointType::Free,
        }
    }

    pub fn axis(&self) -> Option<Vec3> {
        match self {
            JointModel::Revolute { axis, .. } | JointModel::Prismatic { axis, .. } => Some(*axis),
            _ => None,
        }
    }

    /// Child pose in the parent frame at joint coordinate `q`. `Free` has no
    /// coordinate and maps to the identity.
    pub fn pose_at(&self, q: f64) -> Pose {
        match self {
            JointModel::Revolute { axis, pivot, zero } => compose(&rotation_about(axis, pivot, q), zero),
            JointModel::Prismatic { axis, zero } => compose(&Pose::from_translation(axis * q), zero),
            JointModel::Static { pose } => *pose,
            JointModel::Free => Pose::identity(),
        }
    }

    /// The model of the inverse relation `T_j^i(q') = T_i^j(q)⁻¹`, with axis
    /// and pivot re-expressed in the new parent frame. Returns the model and
    /// the factor `k` with `q' = k · q` (the axis is negated and then
    /// re-canonicalized, so `k` is ±1).
    pub fn inverted(&self) -> (JointModel, f64) {
        match self {
            JointModel::Revolute { axis, pivot, zero } => {
                let zi = zero.inverse();
                let new_axis = -zi.rotate(axis);
                let new_pivot = zi.transform_point(pivot);
                // T⁻¹(q) = Rot(new_axis, new_pivot, q) ∘ zero⁻¹
                let (axis_c, sign) = canonical_axis(new_axis);
                (JointModel::Revolute { axis: axis_c, pivot: new_pivot, zero: zi }, sign)
            }
            JointModel::Prismatic { axis, zero } => {
                let zi = zero.inverse();
                let new_axis = -zi.rotate(axis);
                let (axis_c, sign) = canonical_axis(new_axis);
                (JointModel::Prismatic { axis: axis_c, zero: zi }, sign)
            }
            JointModel::Static { pose } => (JointModel::Static { pose: pose.inverse() }, 1.0),
            JointModel::Free => (JointModel::Free, 1.0),
        }
    }
}

fn canonical_axis(axis: Vec3) -> (Vec3, f64) {
    let (a, s) = sign_canonical(axis.normalize(), 1e-6);
    (a, s)
}

/// Rotation by `q` about the line through `pivot` with direction `axis`.
pub fn rotation_about(axis: &Vec3, pivot: &Vec3, q: f64) -> Pose {
    let rot = Pose::from_rotvec(axis * q);
    Pose { r: rot.r, p: pivot - rot.rotate(pivot) }
}

/// Signed rotation angle of `q` about `axis` from the swing-twist split
/// `q = twist · swing` with the twist on the left.
pub fn twist_angle(q: &UnitQuaternion<f64>, axis: &Vec3) -> f64 {
    let a = 2.0 * axis.dot(&q.imag()).atan2(q.w);
    wrap_angle(a)
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Adds multiples of 2π so consecutive values differ by at most π.
pub fn unwrap_angles(series: &mut [f64]) {
    for t in 1..series.len() {
        let d = wrap_angle(series[t] - series[t - 1]);
        series[t] = series[t - 1] + d;
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum JointFitError {
    #[error("rotation between the two poses is below {min_motion} rad")]
    DegenerateRotation { min_motion: f64 },
    #[error("translation between the two poses is below {min_motion} m")]
    DegenerateTranslation { min_motion: f64 },
    #[error("invalid RANSAC configuration: {0}")]
    ConfigError(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevolutePair {
    pub axis: Vec3,
    pub pivot: Vec3,
    pub q: f64,
}

/// Closed-form revolute hypothesis from two consecutive transforms.
pub fn fit_revolute_pair(t_a: &Pose, t_b: &Pose, min_motion: f64) -> Result<RevolutePair, JointFitError> {
    let dr = t_b.r - t_a.r;
    let dp = t_b.p - t_a.p;
    let n = dr.norm();
    if n <= min_motion {
        return Err(JointFitError::DegenerateRotation { min_motion });
    }
    Ok(RevolutePair { axis: dr / n, pivot: t_a.p + dr.cross(&dp) / (n * n), q: n })
}

/// Closed-form prismatic hypothesis from two consecutive transforms,
/// returning `(axis, q)`.
pub fn fit_prismatic_pair(t_a: &Pose, t_b: &Pose, min_motion: f64) -> Result<(Vec3, f64), JointFitError> {
    let dp = t_b.p - t_a.p;
    let n = dp.norm();
    if n <= min_motion {
        return Err(JointFitError::DegenerateTranslation { min_motion });
    }
    let s = dp / n;
    Ok((s, s.dot(&t_b.p)))
}

/// Chordal L2 mean of unit quaternions: principal eigenvector of `Σ q qᵀ`.
pub(crate) fn mean_rotation<'a>(quats: impl Iterator<Item = &'a UnitQuaternion<f64>>) -> UnitQuaternion<f64> {
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    let mut first: Option<Vector4<f64>> = None;
    let mut count = 0;
    for q in quats {
        let v = q.coords;
        first.get_or_insert(v);
        m += v * v.transpose();
        count += 1;
    }
    if count == 0 {
        return UnitQuaternion::identity();
    }
    let eig = SymmetricEigen::new(m);
    let idx = eig.eigenvalues.imax();
    let mut v: Vector4<f64> = eig.eigenvectors.column(idx).into_owned();
    if let Some(f) = first {
        if v.dot(&f) < 0.0 {
            v = -v;
        }
    }
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v))
}

/// Constant transform best explaining `seq`: component-wise mean translation
/// and the chordal mean rotation.
///
/// Panics if `seq` is empty.
pub fn fit_static(seq: &[Pose]) -> Pose {
    assert!(!seq.is_empty(), "fit_static needs at least one pose");
    if seq.windows(2).all(|w| w[0] == w[1]) {
        return seq[0];
    }
    let quats: Vec<_> = seq.iter().map(Pose::quaternion).collect();
    let q = mean_rotation(quats.iter());
    let p = seq.iter().fold(Vec3::zeros(), |acc, x| acc + x.p) / seq.len() as f64;
    Pose::from_quaternion(&q, p)
}

/// Per-frame residual: `λ · angle(a⁻¹b) + ‖a.p − b.p‖`.
pub fn pose_residual(a: &Pose, b: &Pose, rotation_weight: f64) -> f64 {
    let (ang, dist) = a.distance(b);
    rotation_weight * ang + dist
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub q: f64,
    pub reconstructed: Pose,
    pub residual: f64,
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Joint coordinate best explaining `t` under `model`, the model pose at that
/// coordinate, and the residual between the two.
pub fn project_to_joint(model: &JointModel, t: &Pose, rotation_weight: f64) -> Projection {
    let eval = |q: f64| {
        let rec = model.pose_at(q);
        (rec, pose_residual(&rec, t, rotation_weight))
    };
    let q = match model {
        JointModel::Revolute { axis, pivot, zero } => {
            let rel = t.quaternion() * zero.quaternion().inverse();
            let q_rot = twist_angle(&rel, axis);
            let arm0 = zero.p - pivot;
            let arm0 = arm0 - axis * axis.dot(&arm0);
            let arm = t.p - pivot;
            let arm = arm - axis * axis.dot(&arm);
            let mut best = q_rot;
            if arm0.norm() > 1e-9 && arm.norm() > 1e-9 {
                let q_pos = axis.dot(&arm0.cross(&arm)).atan2(arm0.dot(&arm));
                let q_pos = q_rot + wrap_angle(q_pos - q_rot);
                if (q_pos - q_rot).abs() > 1e-14 {
                    // same residual as `eval`, without the axis-angle round trips
                    let unit = nalgebra::Unit::new_unchecked(*axis);
                    let (qz, qt, lever) = (zero.quaternion(), t.quaternion(), zero.p - pivot);
                    let fast = |q: f64| {
                        let rq = UnitQuaternion::from_axis_angle(&unit, q);
                        let d = (rq * qz).inverse() * qt;
                        let ang = 2.0 * d.imag().norm().atan2(d.w.abs());
                        rotation_weight * ang + (pivot + rq * lever - t.p).norm()
                    };
                    let lo = q_rot.min(q_pos);
                    let hi = q_rot.max(q_pos);
                    let q_mid = golden_section(fast, lo, hi, 48);
                    for cand in [q_pos, q_mid] {
                        if fast(cand) < fast(best) {
                            best = cand;
                        }
                    }
                }
            }
            best
        }
        JointModel::Prismatic { axis, .. } => axis.dot(&t.p),
        JointModel::Static { .. } => 0.0,
        JointModel::Free => {
            return Projection { q: 0.0, reconstructed: *t, residual: 0.0 };
        }
    };
    let (reconstructed, residual) = eval(q);
    Projection { q, reconstructed, residual }
}

/// Mean per-frame residual of `seq` under `model`, plus the residuals.
pub fn model_error(model: &JointModel, seq: &[Pose], rotation_weight: f64) -> (f64, Vec<f64>) {
    let residuals: Vec<f64> = seq.iter().map(|t| project_to_joint(model, t, rotation_weight).residual).collect();
    let cost = if residuals.is_empty() { 0.0 } else { residuals.iter().sum::<f64>() / residuals.len() as f64 };
    (cost, residuals)
}

/// Joint coordinates of `seq` under `model`; revolute series are unwrapped.
pub fn joint_positions(model: &JointModel, seq: &[Pose], rotation_weight: f64) -> Vec<f64> {
    let mut q: Vec<f64> = seq.iter().map(|t| project_to_joint(model, t, rotation_weight).q).collect();
    if matches!(model, JointModel::Revolute { .. }) {
        unwrap_angles(&mut q);
    }
    q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    /// Minimum number of inlier frame pairs; `None` means half of `T − 1`.
    pub min_inliers: Option<usize>,
    pub rotation_weight: f64,
    pub min_motion: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 200,
            inlier_threshold: 0.01,
            min_inliers: None,
            rotation_weight: 1.0,
            min_motion: 1e-6,
            seed: 0,
        }
    }
}

impl RansacConfig {
    /// Default configuration with the inlier threshold widened to cover pose
    /// noise of the given scale on both bodies of a pair.
    pub fn for_noise(sigma_p: f64, sigma_r: f64) -> Self {
        let noise = 2.0 * (3f64.sqrt() * sigma_p + sigma_r);
        RansacConfig { inlier_threshold: 0.01f64.max(6.0 * noise), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), JointFitError> {
        if self.iterations < 1 {
            return Err(JointFitError::ConfigError("iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("inlier_threshold", self.inlier_threshold),
            ("rotation_weight", self.rotation_weight),
            ("min_motion", self.min_motion),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(JointFitError::ConfigError(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn min_inliers_for(&self, frames: usize) -> usize {
        self.min_inliers.unwrap_or_else(|| (0.5 * frames.saturating_sub(1) as f64).ceil() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointFitResult {
    pub model: JointModel,
    pub cost: f64,
    pub inlier_count: usize,
    pub q_series: Vec<f64>,
}

/// Stream index mixing so hypothesis `i` draws from its own RNG.
pub(crate) fn derived_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hypothesis(seq: &[Pose], k: usize, joint_type: JointType, min_motion: f64) -> Option<JointModel> {
    let (a, b) = (&seq[k], &seq[k + 1]);
    match joint_type {
        JointType::Revolute => {
            let pair = fit_revolute_pair(a, b, min_motion).ok()?;
            let (axis, _) = canonical_axis(pair.axis);
            let q_a = twist_angle(&a.quaternion(), &axis);
            let zero = compose(&rotation_about(&axis, &pair.pivot, -q_a), a);
            Some(JointModel::Revolute { axis, pivot: pair.pivot, zero })
        }
        JointType::Prismatic => {
            let (axis, _) = fit_prismatic_pair(a, b, min_motion).ok()?;
            let (axis, _) = canonical_axis(axis);
            Some(JointModel::Prismatic { axis, zero: Pose { r: a.r, p: a.p - axis * axis.dot(&a.p) } })
        }
        JointType::Static => Some(JointModel::Static { pose: fit_static(&seq[k..k + 2]) }),
        JointType::Free => None,
    }
}

fn inlier_pairs(residuals: &[f64], threshold: f64) -> Vec<usize> {
    (0..residuals.len().saturating_sub(1))
        .filter(|&k| residuals[k] < threshold && residuals[k + 1] < threshold)
        .collect()
}

fn principal_direction(m: &Matrix3<f64>) -> Option<Vec3> {
    let eig = SymmetricEigen::new(*m);
    let idx = eig.eigenvalues.imax();
    (eig.eigenvalues[idx] > 1e-300).then(|| eig.eigenvectors.column(idx).into_owned())
}

/// Refits `model` on the frames covered by `pairs`; `residuals` weight the
/// frames and `reference` is the frame the hypothesis was drawn from.
fn refit(model: &JointModel, seq: &[Pose], pairs: &[usize], residuals: &[f64], reference: usize, threshold: f64) -> JointModel {
    let mut frames: Vec<usize> = pairs.iter().flat_map(|&k| [k, k + 1]).collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.is_empty() {
        return model.clone();
    }
    let weight = |t: usize| 1.0 / (threshold + residuals[t]);
    let reference = if frames.binary_search(&reference).is_ok() { reference } else { frames[0] };
    match model {
        JointModel::Revolute { axis: hyp_axis, pivot: hyp_pivot, .. } => {
            let q_ref = seq[reference].quaternion();
            let mut m = Matrix3::zeros();
            for &t in &frames {
                let v = (seq[t].quaternion() * q_ref.inverse()).scaled_axis();
                m += weight(t) * v * v.transpose();
            }
            let mut axis = principal_direction(&m).unwrap_or(*hyp_axis);
            if axis.dot(hyp_axis) < 0.0 {
                axis = -axis;
            }
            let (axis, _) = canonical_axis(axis);

            // pivot: relative motions T_t ∘ T_ref⁻¹ are rotations about the axis line
            let inv_ref = seq[reference].inverse();
            let mut lhs = Matrix3::zeros();
            let mut rhs = Vec3::zeros();
            let mut mean_p = Vec3::zeros();
            let mut wsum = 0.0;
            for &t in &frames {
                let w = weight(t);
                let rel = compose(&seq[t], &inv_ref);
                let dq = twist_angle(&rel.quaternion(), &axis);
                let a = Matrix3::identity() - Pose::from_rotvec(axis * dq).rotation_matrix();
                lhs += w * a.transpose() * a;
                rhs += w * a.transpose() * rel.p;
                mean_p += w * seq[t].p;
                wsum += w;
            }
            mean_p /= wsum;
            let along = axis * axis.transpose();
            let has_rotation = lhs.norm() > 1e-12 * wsum;
            let pivot = if has_rotation {
                let scale = lhs.norm();
                let sys = lhs + scale * along;
                let b = rhs + scale * along * mean_p;
                sys.lu().solve(&b).unwrap_or(*hyp_pivot)
            } else {
                *hyp_pivot
            };
            let pivot = pivot - along * (pivot - mean_p);
            let unrotated: Vec<Pose> = frames
                .iter()
                .map(|&t| {
                    let q = twist_angle(&seq[t].quaternion(), &axis);
                    compose(&rotation_about(&axis, &pivot, -q), &seq[t])
                })
                .collect();
            JointModel::Revolute { axis, pivot, zero: fit_static(&unrotated) }
        }
        JointModel::Prismatic { axis: hyp_axis, .. } => {
            let wsum: f64 = frames.iter().map(|&t| weight(t)).sum();
            let mean = frames.iter().fold(Vec3::zeros(), |acc, &t| acc + weight(t) * seq[t].p) / wsum;
            let mut m = Matrix3::zeros();
            for &t in &frames {
                let d = seq[t].p - mean;
                m += weight(t) * d * d.transpose();
            }
            let mut axis = principal_direction(&m).unwrap_or(*hyp_axis);
            if axis.dot(hyp_axis) < 0.0 {
                axis = -axis;
            }
            let (axis, _) = canonical_axis(axis);
            let quats: Vec<_> = frames.iter().map(|&t| seq[t].quaternion()).collect();
            let rot = mean_rotation(quats.iter());
            let perp = mean - axis * axis.dot(&mean);
            JointModel::Prismatic { axis, zero: Pose::from_quaternion(&rot, perp) }
        }
        JointModel::Static { .. } => {
            let sub: Vec<Pose> = frames.iter().map(|&t| seq[t]).collect();
            JointModel::Static { pose: fit_static(&sub) }
        }
        JointModel::Free => JointModel::Free,
    }
}

struct Scored {
    model: JointModel,
    residuals: Vec<f64>,
    cost: f64,
    pairs: Vec<usize>,
    reference: usize,
}

impl Scored {
    fn new(model: JointModel, seq: &[Pose], reference: usize, cfg: &RansacConfig) -> Self {
        let (cost, residuals) = model_error(&model, seq, cfg.rotation_weight);
        let pairs = inlier_pairs(&residuals, cfg.inlier_threshold);
        Scored { model, residuals, cost, pairs, reference }
    }

    /// Inlier count descending, then cost ascending.
    fn better_than(&self, other: &Scored) -> bool {
        self.pairs.len() > other.pairs.len() || (self.pairs.len() == other.pairs.len() && self.cost < other.cost)
    }
}

/// RANSAC estimate of a `joint_type` joint explaining `seq`. `Ok(None)` means
/// no joint candidate was found.
pub fn ransac_fit(seq: &[Pose], joint_type: JointType, cfg: &RansacConfig) -> Result<Option<JointFitResult>, JointFitError> {
    cfg.validate()?;
    if seq.len() < 2 || joint_type == JointType::Free {
        return Ok(None);
    }
    let valid: Vec<usize> = (0..seq.len() - 1)
        .filter(|&k| match joint_type {
            JointType::Revolute => (seq[k + 1].r - seq[k].r).norm() > cfg.min_motion,
            JointType::Prismatic => (seq[k + 1].p - seq[k].p).norm() > cfg.min_motion,
            _ => true,
        })
        .collect();
    if valid.is_empty() {
        return Ok(None);
    }

    let scored: Vec<Option<Scored>> = (0..cfg.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, i as u64));
            let k = valid[rng.random_range(0..valid.len())];
            hypothesis(seq, k, joint_type, cfg.min_motion).map(|m| Scored::new(m, seq, k, cfg))
        })
        .collect();
    let mut best: Option<Scored> = None;
    for s in scored.into_iter().flatten() {
        if best.as_ref().map_or(true, |b| s.better_than(b)) {
            best = Some(s);
        }
    }
    let Some(mut best) = best else { return Ok(None) };

    // local optimization: refit on inliers while it does not lose support
    for _ in 0..4 {
        if best.pairs.is_empty() {
            break;
        }
        let model = refit(&best.model, seq, &best.pairs, &best.residuals, best.reference, cfg.inlier_threshold);
        let cand = Scored::new(model, seq, best.reference, cfg);
        if cand.pairs.len() >= best.pairs.len() && !(cand.pairs == best.pairs && cand.cost >= best.cost) {
            best = cand;
        } else {
            break;
        }
    }

    if best.pairs.len() < cfg.min_inliers_for(seq.len()) || !best.cost.is_finite() {
        return Ok(None);
    }
    let q_series = joint_positions(&best.model, seq, cfg.rotation_weight);
    Ok(Some(JointFitResult { model: best.model, cost: best.cost, inlier_count: best.pairs.len(), q_series }))
}

/// Runs RANSAC for every fittable joint type and returns the lowest-cost
/// result, if any.
pub fn best_joint(seq: &[Pose], cfg: &RansacConfig) -> Result<Option<JointFitResult>, JointFitError> {
    let mut best: Option<JointFitResult> = None;
    for jt in JointType::FITTABLE {
        if let Some(r) = ransac_fit(seq, jt, cfg)? {
            if best.as_ref().map_or(true, |b| r.cost < b.cost) {
                best = Some(r);
            }
        }
    }
    Ok(best)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointJson {
    #[serde(rename = "type")]
    kind: JointType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pivot: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<[f64; 6]>,
}

impl Serialize for JointModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let arr = |v: &Vec3| [v.x, v.y, v.z];
        let nonzero = |z: &Pose| (*z != Pose::identity()).then(|| z.to_array());
        let j = match self {
            JointModel::Revolute { axis, pivot, zero } => JointJson {
                kind: JointType::Revolute,
                axis: Some(arr(axis)),
                pivot: Some(arr(pivot)),
                zero: nonzero(zero),
                pose: None,
            },
            JointModel::Prismatic { axis, zero } => JointJson {
                kind: JointType::Prismatic,
                axis: Some(arr(axis)),
                pivot: None,
                zero: nonzero(zero),
                pose: None,
            },
            JointModel::Static { pose } => JointJson {
                kind: JointType::Static,
                axis: None,
                pivot: None,
                zero: None,
                pose: Some(pose.to_array()),
            },
            JointModel::Free => JointJson { kind: JointType::Free, axis: None, pivot: None, zero: None, pose: None },
        };
        j.serialize(s)
    }
}

impl<'de> Deserialize<'de> for JointModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = JointJson::deserialize(d)?;
        let unit = |a: Option<[f64; 3]>| -> Result<Vec3, D::Error> {
            let v = Vec3::from(a.ok_or_else(|| D::Error::missing_field("axis"))?);
            let n = v.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(D::Error::custom("axis must be a nonzero finite vector"));
            }
            Ok(v / n)
        };
        let zero = j.zero.map(Pose::from_array).unwrap_or_default();
        Ok(match j.kind {
            JointType::Revolute => JointModel::Revolute {
                axis: unit(j.axis)?,
                pivot: Vec3::from(j.pivot.ok_or_else(|| D::Error::missing_field("pivot"))?),
                zero,
            },
            JointType::Prismatic => JointModel::Prismatic { axis: unit(j.axis)?, zero },
            JointType::Static => {
                JointModel::Static { pose: Pose::from_array(j.pose.ok_or_else(|| D::Error::missing_field("pose"))?) }
            }
            JointType::Free => JointModel::Free,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z(a: f64) -> Pose {
        Pose::from_axis_angle(Vec3::z(), a)
    }

    /// Child frame displaced from a hinge: analytic circle motion.
    fn revolute_sequence(axis: Vec3, pivot: Vec3, zero: Pose, qs: &[f64]) -> Vec<Pose> {
        qs.iter().map(|&q| compose(&rotation_about(&axis.normalize(), &pivot, q), &zero)).collect()
    }

    #[test]
    fn revolute_pair_pure_rotation() {
        let a = Pose::new(Vec3::new(0.0, 0.0, 0.2), Vec3::zeros());
        let b = Pose::new(Vec3::new(0.0, 0.0, 0.3), Vec3::zeros());
        let r = fit_revolute_pair(&a, &b, 1e-6).unwrap();
        assert!((r.axis - Vec3::z()).norm() < 1e-9);
        assert!(r.pivot.norm() < 1e-9);
        assert!((r.q - 0.1).abs() < 1e-9);
    }

    #[test]
    fn revolute_pair_chord_offset() {
        // body circling the pivot (1,0,0) about z from θ = 0 to θ = 0.1
        let th: f64 = 0.1;
        let a = Pose::identity();
        let b = Pose::new(Vec3::new(0.0, 0.0, th), Vec3::new(1.0 - th.cos(), -th.sin(), 0.0));
        let r = fit_revolute_pair(&a, &b, 1e-6).unwrap();
        assert!((r.axis - Vec3::z()).norm() < 1e-9);
        // pivot from the pair formula, evaluated independently
        let expected = Vec3::new(th.sin() / th, (1.0 - th.cos()) / th, 0.0);
        assert!((r.pivot - expected).norm() < 1e-12);
        assert!((r.pivot - Vec3::new(0.9983, 0.0500, 0.0)).norm() < 1e-4);
        assert!((r.q - 0.1).abs() < 1e-9);
    }

    #[test]
    fn revolute_pair_degenerate() {
        let p = Pose::new(Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!(matches!(fit_revolute_pair(&p, &p, 1e-6), Err(JointFitError::DegenerateRotation { .. })));
    }

    #[test]
    fn prismatic_pair_examples() {
        let (s, q) = fit_prismatic_pair(&Pose::identity(), &Pose::from_translation(Vec3::new(0.05, 0.0, 0.0)), 1e-6).unwrap();
        assert!((s - Vec3::x()).norm() < 1e-9 && (q - 0.05).abs() < 1e-9);
        let (s, q) = fit_prismatic_pair(&Pose::identity(), &Pose::from_translation(Vec3::new(0.03, 0.04, 0.0)), 1e-6).unwrap();
        assert!((s - Vec3::new(0.6, 0.8, 0.0)).norm() < 1e-9 && (q - 0.05).abs() < 1e-9);
        let p = Pose::from_translation(Vec3::new(0.3, 0.1, 0.0));
        assert!(matches!(fit_prismatic_pair(&p, &p, 1e-6), Err(JointFitError::DegenerateTranslation { .. })));
    }

    #[test]
    fn static_fit_examples() {
        let p = Pose::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 0.0, -1.0));
        assert_eq!(fit_static(&[p, p, p]), p);
        let s = fit_static(&[Pose::identity(), Pose::from_translation(Vec3::new(0.02, 0.0, 0.0))]);
        assert!((s.p - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        assert!(s.r.norm() < 1e-15);
        // symmetric rotations about z average to the middle
        let s = fit_static(&[rot_z(0.1), rot_z(0.3)]);
        assert!((s.r - Vec3::new(0.0, 0.0, 0.2)).norm() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let m = JointModel::revolute(Vec3::z(), Vec3::zeros());
        let pr = project_to_joint(&m, &rot_z(0.7), 1.0);
        assert!((pr.q - 0.7).abs() < 1e-12 && pr.residual < 1e-12);

        let p = Pose::new(Vec3::new(0.2, 0.0, 0.1), Vec3::new(0.3, 0.2, 0.1));
        let pr = project_to_joint(&JointModel::Static { pose: p }, &p, 1.0);
        assert_eq!(pr.q, 0.0);
        assert!(pr.residual < 1e-12);

        let off = compose(&Pose::from_translation(Vec3::new(0.0, 0.0, 0.01)), &rot_z(0.7));
        let pr = project_to_joint(&m, &off, 1.0);
        assert!((pr.q - 0.7).abs() < 1e-12);
        let (ang, dist) = pr.reconstructed.distance(&off);
        assert!(ang < 1e-12);
        assert!((dist - 0.01).abs() < 1e-12);
        assert!((pr.residual - 0.01).abs() < 1e-12);
    }

    #[test]
    fn projection_with_offset_child_frame() {
        let zero = Pose::from_translation(Vec3::new(0.0, -0.5, 0.2));
        let m = JointModel::Revolute { axis: Vec3::x(), pivot: Vec3::new(0.0, 0.1, 0.0), zero };
        for q in [-2.5, -0.3, 0.0, 0.4, 3.0] {
            let pr = project_to_joint(&m, &m.pose_at(q), 1.0);
            assert!((pr.q - q).abs() < 1e-9, "q={q} got {}", pr.q);
            assert!(pr.residual < 1e-9);
        }
        let pm = JointModel::Prismatic { axis: Vec3::new(0.0, 0.6, 0.8), zero: Pose::new(Vec3::new(0.0, 0.0, 0.3), Vec3::x()) };
        let pr = project_to_joint(&pm, &pm.pose_at(0.42), 1.0);
        assert!((pr.q - 0.42).abs() < 1e-12 && pr.residual < 1e-12);
    }

    #[test]
    fn model_error_examples() {
        let qs: Vec<f64> = (0..100).map(|t| 0.8 * (0.07 * t as f64).sin()).collect();
        let zero = Pose::from_translation(Vec3::new(0.0, 0.0, -0.3));
        let seq = revolute_sequence(Vec3::y(), Vec3::new(0.1, 0.0, 0.0), zero, &qs);
        let truth = JointModel::Revolute { axis: Vec3::y(), pivot: Vec3::new(0.1, 0.0, 0.0), zero };
        let (cost, res) = model_error(&truth, &seq, 1.0);
        assert!(cost < 1e-9);
        assert_eq!(res.len(), seq.len());
        let (static_cost, _) = model_error(&JointModel::Static { pose: fit_static(&seq) }, &seq, 1.0);
        assert!(static_cost > 0.01);
        let one = [Pose::new(Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0))];
        let (c, _) = model_error(&JointModel::Static { pose: fit_static(&one) }, &one, 1.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn ransac_recovers_noiseless_revolute() {
        let qs: Vec<f64> = (0..200).map(|t| 0.6 * (0.1 * t as f64).sin() + 0.2).collect();
        let zero = Pose::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.4));
        let axis = Vec3::new(0.0, 1.0, 0.0);
        let pivot = Vec3::new(0.2, 0.0, 0.4);
        let seq = revolute_sequence(axis, pivot, zero, &qs);
        let r = ransac_fit(&seq, JointType::Revolute, &RansacConfig::default()).unwrap().unwrap();
        assert_eq!(r.inlier_count, 199);
        assert!(r.cost < 1e-6, "cost {}", r.cost);
        let a = r.model.axis().unwrap();
        assert!((a - axis).norm() < 1e-6);
        // q series equals truth up to a constant offset
        let off = r.q_series[0] - qs[0];
        for (q, t) in r.q_series.iter().zip(&qs) {
            assert!((q - t - off).abs() < 1e-6);
        }
    }

    #[test]
    fn ransac_constant_sequence() {
        let p = Pose::new(Vec3::new(0.0, 0.4, 0.0), Vec3::new(0.3, 0.0, 0.1));
        let seq = vec![p; 50];
        let cfg = RansacConfig::default();
        let s = ransac_fit(&seq, JointType::Static, &cfg).unwrap().unwrap();
        assert_eq!(s.cost, 0.0);
        assert!(ransac_fit(&seq, JointType::Revolute, &cfg).unwrap().is_none());
        assert!(ransac_fit(&seq, JointType::Prismatic, &cfg).unwrap().is_none());
    }

    #[test]
    fn ransac_prismatic_rejects_pure_rotation() {
        let qs: Vec<f64> = (0..100).map(|t| 0.02 * t as f64).collect();
        let seq = revolute_sequence(Vec3::z(), Vec3::new(0.5, 0.0, 0.0), Pose::identity(), &qs);
        let cfg = RansacConfig::default();
        let rev = ransac_fit(&seq, JointType::Revolute, &cfg).unwrap().unwrap();
        // brute force over every consecutive pair: no prismatic pair hypothesis
        // explains half the sequence
        let best_support = (0..seq.len() - 1)
            .filter_map(|k| hypothesis(&seq, k, JointType::Prismatic, cfg.min_motion))
            .map(|m| inlier_pairs(&model_error(&m, &seq, 1.0).1, cfg.inlier_threshold).len())
            .max()
            .unwrap();
        assert!(best_support < cfg.min_inliers_for(seq.len()));
        match ransac_fit(&seq, JointType::Prismatic, &cfg).unwrap() {
            None => {}
            Some(p) => assert!(p.cost > 100.0 * rev.cost.max(1e-9)),
        }
    }

    #[test]
    fn ransac_is_deterministic_and_validates_config() {
        let qs: Vec<f64> = (0..60).map(|t| 0.03 * t as f64).collect();
        let seq: Vec<Pose> = qs.iter().map(|&q| Pose::from_translation(Vec3::new(q, 0.5 * q, 0.0))).collect();
        let cfg = RansacConfig { seed: 7, ..Default::default() };
        let a = ransac_fit(&seq, JointType::Prismatic, &cfg).unwrap();
        let b = ransac_fit(&seq, JointType::Prismatic, &cfg).unwrap();
        assert_eq!(a, b);
        let bad = RansacConfig { iterations: 0, ..Default::default() };
        assert!(matches!(ransac_fit(&seq, JointType::Static, &bad), Err(JointFitError::ConfigError(_))));
        let bad = RansacConfig { inlier_threshold: 0.0, ..Default::default() };
        assert!(ransac_fit(&seq, JointType::Static, &bad).is_err());
    }

    #[test]
    fn inverted_models_reproduce_inverse_poses() {
        let models = [
            JointModel::Revolute {
                axis: Vec3::new(0.0, 0.6, 0.8),
                pivot: Vec3::new(0.1, -0.2, 0.3),
                zero: Pose::new(Vec3::new(0.0, 0.0, 0.3), Vec3::new(0.0, 0.5, 0.1)),
            },
            JointModel::Prismatic { axis: Vec3::x(), zero: Pose::new(Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.0)) },
            JointModel::Static { pose: Pose::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0)) },
        ];
        for m in &models {
            let (inv, sign) = m.inverted();
            for q in [-0.7, 0.0, 0.25, 1.3] {
                let expect = m.pose_at(q).inverse();
                let qq = if m.joint_type() == JointType::Static { 0.0 } else { sign * q };
                let got = inv.pose_at(qq);
                let (ang, dist) = got.distance(&expect);
                assert!(ang < 1e-12 && dist < 1e-12, "{m:?} q={q}");
            }
            if let JointModel::Static { pose } = m {
                let (back, _) = inv.inverted();
                let JointModel::Static { pose: p2 } = back else { unreachable!() };
                assert!(p2.max_abs_diff(pose) < 1e-12);
            }
        }
    }

    #[test]
    fn joint_json_schema() {
        let m = JointModel::revolute(Vec3::z(), Vec3::new(1.0, 0.0, 0.0));
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v, serde_json::json!({"type":"revolute","axis":[0.0,0.0,1.0],"pivot":[1.0,0.0,0.0]}));
        let back: JointModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        let f: JointModel = serde_json::from_str(r#"{"type":"free"}"#).unwrap();
        assert_eq!(f, JointModel::Free);
        let s: JointModel = serde_json::from_str(r#"{"type":"static","pose":[0,0,0,1,2,3]}"#).unwrap();
        assert_eq!(s, JointModel::Static { pose: Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)) });
        assert!(serde_json::from_str::<JointModel>(r#"{"type":"prismatic"}"#).is_err());
    }

    #[test]
    fn frame_invariance_of_fitted_cost() {
        // two bodies: parent tumbling, child hinged to it
        let parent: Vec<Pose> = (0..120)
            .map(|t| Pose::new(Vec3::new(0.01 * t as f64, 0.3, -0.2), Vec3::new(0.02 * t as f64, 0.0, 1.0)))
            .collect();
        let hinge = JointModel::Revolute { axis: Vec3::y(), pivot: Vec3::new(0.0, 0.0, 0.2), zero: Pose::from_translation(Vec3::new(0.0, 0.0, 0.2)) };
        let child: Vec<Pose> = parent
            .iter()
            .enumerate()
            .map(|(t, p)| compose(p, &hinge.pose_at(0.5 * (0.15 * t as f64).sin())))
            .collect();
        let w = Pose::new(Vec3::new(0.4, -1.0, 0.2), Vec3::new(3.0, -2.0, 0.5));
        let cfg = RansacConfig::default();
        let rel = |ps: &[Pose], cs: &[Pose]| -> Vec<Pose> {
            ps.iter().zip(cs).map(|(a, b)| crate::se3::relative_transform(a, b)).collect()
        };
        let seq1 = rel(&parent, &child);
        let pw: Vec<Pose> = parent.iter().map(|p| compose(&w, p)).collect();
        let cw: Vec<Pose> = child.iter().map(|p| compose(&w, p)).collect();
        let seq2 = rel(&pw, &cw);
        for jt in JointType::FITTABLE {
            let a = ransac_fit(&seq1, jt, &cfg).unwrap();
            let b = ransac_fit(&seq2, jt, &cfg).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => assert!((a.cost - b.cost).abs() < 1e-9, "{jt}"),
                (None, None) => {}
                _ => panic!("{jt}: candidate found in one frame only"),
            }
        }
    }
}

//! Parameter inference: multiple-shooting likelihood over pose observations,
//! finite-difference gradients, Adam, and SVGD with box projection.

use crate::dynamics::{DynamicsError, JointKind, Mechanism, Model, SimState};
use crate::joint_fit::derived_seed;
use crate::params::{ParamError, ParamSpec};
use crate::se3::{ObservationSet, Vec3};
use crate::topology::{TopologyError, WorldModel};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::params::nmae;

pub const DEFAULT_REL_STEP: f64 = 1e-5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("loss is not finite when probing coordinate {coord}")]
    NonFiniteLoss { coord: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("observations do not match the mechanism: {0}")]
    Mismatch(String),
}

impl From<TopologyError> for EstimationError {
    fn from(e: TopologyError) -> Self {
        EstimationError::Mismatch(e.to_string())
    }
}

/// Central differences with step `h · max(|x_i|, 1)`; coordinates whose
/// probe would leave `[lower, upper]` use a one-sided difference instead.
pub fn gradient_fd(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    bounds: Option<(&[f64], &[f64])>,
) -> Result<Vec<f64>, EstimationError> {
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(EstimationError::NonFiniteLoss { coord: 0 });
    }
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let d = h * x[i].abs().max(1.0);
        let (lo, hi) = bounds.map_or((f64::NEG_INFINITY, f64::INFINITY), |(l, u)| (l[i], u[i]));
        let mut eval = |v: f64| {
            probe[i] = v;
            let y = f(&probe);
            probe[i] = x[i];
            if y.is_finite() { Ok(y) } else { Err(EstimationError::NonFiniteLoss { coord: i }) }
        };
        let gi = if x[i] + d > hi {
            (f0 - eval(x[i] - d)?) / d
        } else if x[i] - d < lo {
            (eval(x[i] + d)? - f0) / d
        } else {
            (eval(x[i] + d)? - eval(x[i] - d)?) / (2.0 * d)
        };
        g.push(gi);
    }
    Ok(g)
}

/// A loss over a box-bounded vector (bounds may be infinite).
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn lower(&self) -> Vec<f64>;
    fn upper(&self) -> Vec<f64>;
    /// Negative log posterior up to a constant; `+∞` when undefined.
    fn loss(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EstimationError> {
        let (lo, hi) = (self.lower(), self.upper());
        gradient_fd(|y| self.loss(y), x, DEFAULT_REL_STEP, Some((&lo, &hi)))
    }

    /// Per-coordinate multiplier on the optimizer step.
    fn step_scale(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(self.lower()).zip(self.upper()) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Objective from a closure, with finite-difference gradients.
pub struct FnObjective<F> {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnObjective<F> {
    pub fn unbounded(dim: usize, f: F) -> Self {
        FnObjective { lower: vec![f64::NEG_INFINITY; dim], upper: vec![f64::INFINITY; dim], f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self) -> Vec<f64> {
        self.lower.clone()
    }
    fn upper(&self) -> Vec<f64> {
        self.upper.clone()
    }
    fn loss(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingConfig {
    pub window_length: usize,
    pub defect_weight: f64,
    pub sigma_obs: f64,
    pub rotation_weight: f64,
    pub learn_x0: bool,
    /// Optimizer step multiplier for window start states relative to the
    /// normalized parameters.
    pub state_step_scale: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig { window_length: 10, defect_weight: 100.0, sigma_obs: 0.01, rotation_weight: 1.0, learn_x0: true, state_step_scale: 0.2 }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.window_length < 2 {
            return Err(EstimationError::Config("window_length must be at least 2".into()));
        }
        for (name, v) in [("defect_weight", self.defect_weight), ("sigma_obs", self.sigma_obs), ("rotation_weight", self.rotation_weight)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EstimationError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

type Frame = Vec<(Matrix3<f64>, Vec3)>;

/// Multiple-shooting problem over one observed trajectory. The optimizer
/// works on the augmented vector `[u, s_0, s_1, ...]` where `u` is the
/// parameter vector normalized to `[0, 1]` and `s_w = (q, qd)` are window
/// start states (present when `learn_x0` is set).
pub struct ShootingProblem {
    mech: Mechanism,
    spec: ParamSpec,
    cfg: ShootingConfig,
    obs: Vec<Frame>,
    controls: Vec<Vec<f64>>,
    dt: f64,
    starts: Vec<usize>,
    init: Vec<SimState>,
}

fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let s = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
    let c = (m.trace() - 1.0) * 0.5;
    s.atan2(c)
}

impl ShootingProblem {
    /// `obs` bodies are matched to links through `order[k]` (body id of link
    /// `k`); `controls[t]` are generalized forces in the mechanism's
    /// coordinates acting from frame `t` to `t + 1`.
    pub fn new(
        mech: Mechanism,
        spec: ParamSpec,
        obs: &ObservationSet,
        order: &[usize],
        controls: Option<Vec<Vec<f64>>>,
        cfg: ShootingConfig,
    ) -> Result<Self, EstimationError> {
        cfg.validate()?;
        mech.validate()?;
        spec.validate(&mech)?;
        obs.validate().map_err(|e| EstimationError::Mismatch(e.to_string()))?;
        if order.len() != mech.links.len() || order.iter().any(|&b| b >= obs.n_bodies()) {
            return Err(EstimationError::Mismatch(format!("{} links but body order {order:?}", mech.links.len())));
        }
        let t_len = obs.n_frames();
        let dof = mech.dof();
        let controls = controls.unwrap_or_else(|| vec![vec![0.0; dof]; t_len]);
        if controls.len() != t_len || controls.iter().any(|c| c.len() != dof) {
            return Err(EstimationError::Mismatch(format!("controls must be {t_len} rows of {dof}")));
        }
        let frames: Vec<Vec<crate::se3::Pose>> = (0..t_len).map(|t| order.iter().map(|&b| obs.bodies[b].poses[t]).collect()).collect();
        let obs_frames = frames.iter().map(|f| f.iter().map(|p| (p.rotation_matrix(), p.p)).collect()).collect();
        let dt = obs.dt();
        let qs = mech.joint_trajectory(&frames)?;
        let starts: Vec<usize> = (0..t_len - 1).step_by(cfg.window_length).collect();
        let init = starts
            .iter()
            .map(|&s| {
                let (a, b) = if s == 0 { (0, 1) } else { (s - 1, s) };
                let qd = qs[b].iter().zip(&qs[a]).map(|(x, y)| (x - y) / dt).collect();
                SimState { q: qs[s].clone(), qd }
            })
            .collect();
        Ok(ShootingProblem { mech, spec, cfg, obs: obs_frames, controls, dt, starts, init })
    }

    pub fn mechanism(&self) -> &Mechanism {
        &self.mech
    }

    pub fn spec(&self) -> &ParamSpec {
        &self.spec
    }

    pub fn config(&self) -> &ShootingConfig {
        &self.cfg
    }

    pub fn n_windows(&self) -> usize {
        self.starts.len()
    }

    /// Window start frames.
    pub fn window_starts(&self) -> &[usize] {
        &self.starts
    }

    /// Start states from the observed poses with backward-difference
    /// velocities.
    pub fn initial_states(&self) -> &[SimState] {
        &self.init
    }

    fn n_theta(&self) -> usize {
        self.spec.len()
    }

    fn state_len(&self) -> usize {
        2 * self.mech.dof()
    }

    /// Augmented vector for parameters `theta` and the initial start states.
    pub fn pack(&self, theta: &[f64]) -> Vec<f64> {
        let mut x = self.spec.normalize(theta);
        if self.cfg.learn_x0 {
            for s in &self.init {
                x.extend(s.to_vec());
            }
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<SimState>) {
        let d = self.n_theta();
        let theta = self.spec.denormalize(&x[..d]);
        let states = if self.cfg.learn_x0 {
            x[d..].chunks(self.state_len()).map(SimState::from_slice).collect()
        } else {
            self.init.clone()
        };
        (theta, states)
    }

    fn model_for(&self, theta: &[f64]) -> Result<Model, EstimationError> {
        Ok(self.spec.apply(&self.mech, theta)?.model())
    }

    fn window_end(&self, w: usize) -> usize {
        self.starts.get(w + 1).copied().unwrap_or(self.obs.len() - 1)
    }

    /// Data cost of window `w` from `x0` and the simulated state at the next
    /// window start (`None` for the last window). Divergence costs `+∞`.
    fn window(&self, model: &Model, w: usize, x0: &SimState) -> (f64, Option<SimState>) {
        let (start, end) = (self.starts[w], self.window_end(w));
        let last = w + 1 == self.starts.len();
        let inv = 1.0 / (2.0 * self.cfg.sigma_obs * self.cfg.sigma_obs);
        let lam2 = self.cfg.rotation_weight * self.cfg.rotation_weight;
        let mut frames = Vec::with_capacity(self.mech.links.len());
        let mut x = x0.clone();
        let mut cost = 0.0;
        for t in start..=end {
            if t < end || last {
                model.link_frames(&x.q, &mut frames);
                for ((r, p), (ro, po)) in frames.iter().zip(&self.obs[t]) {
                    let a = rotation_angle(r, ro);
                    cost += (lam2 * a * a + (p - po).norm_squared()) * inv;
                }
            }
            if t == end {
                break;
            }
            let ok = model.step_mut(&mut x, &self.controls[t], self.dt).is_ok();
            if !ok || !x.q.iter().chain(&x.qd).all(|v| v.is_finite() && v.abs() < 1e6) {
                return (f64::INFINITY, None);
            }
        }
        (cost, (!last).then_some(x))
    }

    fn defect(&self, end: &Option<SimState>, next: &SimState) -> f64 {
        match end {
            Some(e) => self.cfg.defect_weight * e.to_vec().iter().zip(next.to_vec()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            None => f64::INFINITY,
        }
    }

    /// Negative log posterior and per-window defects `‖end_w − start_{w+1}‖²`
    /// at parameters `theta` and window start states `states`.
    pub fn shooting_loss(&self, theta: &[f64], states: &[SimState]) -> Result<(f64, Vec<f64>), EstimationError> {
        self.spec.check_limits(theta)?;
        if states.len() != self.n_windows() {
            return Err(EstimationError::Mismatch(format!("{} window states, expected {}", states.len(), self.n_windows())));
        }
        let model = self.model_for(theta)?;
        let mut total = 0.0;
        let mut defects = Vec::with_capacity(states.len().saturating_sub(1));
        for (w, s) in states.iter().enumerate() {
            let (cost, end) = self.window(&model, w, s);
            total += cost;
            if w + 1 < states.len() {
                let d = self.defect(&end, &states[w + 1]);
                defects.push(d / self.cfg.defect_weight);
                total += d;
            }
        }
        Ok((if total.is_nan() { f64::INFINITY } else { total }, defects))
    }

    /// Gradient by central differences that re-simulates only the windows a
    /// coordinate affects. Agrees with [`gradient_fd`] on [`Objective::loss`].
    pub fn gradient_with_step(&self, x: &[f64], h: f64) -> Result<Vec<f64>, EstimationError> {
        let d = self.n_theta();
        let (lo, hi) = (self.lower(), self.upper());
        let mut g = gradient_fd(
            |u| {
                let mut y = x.to_vec();
                y[..d].copy_from_slice(u);
                self.loss(&y)
            },
            &x[..d],
            h,
            Some((&lo[..d], &hi[..d])),
        )?;
        if !self.cfg.learn_x0 {
            return Ok(g);
        }
        let (theta, states) = self.unpack(x);
        let model = self.model_for(&theta)?;
        let windows: Vec<(f64, Option<SimState>)> = states.iter().enumerate().map(|(w, s)| self.window(&model, w, s)).collect();
        let n = self.state_len();
        for (w, s) in states.iter().enumerate() {
            let base = s.to_vec();
            // terms touched by s_w: window w data and defect, defect of w − 1
            let local = |v: &[f64]| -> f64 {
                let sw = SimState::from_slice(v);
                let (cost, end) = self.window(&model, w, &sw);
                let mut t = cost;
                if w + 1 < states.len() {
                    t += self.defect(&end, &states[w + 1]);
                }
                if w > 0 {
                    t += self.defect(&windows[w - 1].1, &sw);
                }
                t
            };
            let gw = gradient_fd(local, &base, h, None).map_err(|e| match e {
                EstimationError::NonFiniteLoss { coord } => EstimationError::NonFiniteLoss { coord: d + w * n + coord },
                other => other,
            })?;
            g.extend(gw);
        }
        Ok(g)
    }
}

impl Objective for ShootingProblem {
    fn dim(&self) -> usize {
        self.n_theta() + if self.cfg.learn_x0 { self.n_windows() * self.state_len() } else { 0 }
    }

    fn lower(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_theta()];
        v.resize(self.dim(), f64::NEG_INFINITY);
        v
    }

    fn upper(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.n_theta()];
        v.resize(self.dim(), f64::INFINITY);
        v
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let (theta, states) = self.unpack(x);
        self.shooting_loss(&theta, &states).map_or(f64::INFINITY, |(l, _)| l)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EstimationError> {
        self.gradient_with_step(x, DEFAULT_REL_STEP)
    }

    fn step_scale(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.n_theta()];
        v.resize(self.dim(), self.cfg.state_step_scale);
        v
    }
}

/// Generalized forces recorded for `template`'s joints, re-expressed for the
/// joints of `mech` (link `k` is body `order[k]`, and joint `i` of the
/// template attaches body `i`). Joint kinds must agree per body; revolute and
/// prismatic forces flip sign when the axes point opposite ways in the body
/// frame.
pub fn map_controls(template: &Mechanism, mech: &Mechanism, order: &[usize], controls: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EstimationError> {
    let t_off = template.q_offsets();
    let m_off = mech.q_offsets();
    let mut map = Vec::new(); // (template index, mech index, sign)
    for (k, &b) in order.iter().enumerate() {
        let (tj, mj) = (&template.joints[b], &mech.joints[k]);
        if tj.kind != mj.kind {
            return Err(EstimationError::Mismatch(format!("body {b}: template joint {:?} but inferred {:?}", tj.kind, mj.kind)));
        }
        match tj.kind {
            JointKind::Revolute | JointKind::Prismatic => {
                let s = Vec3::from(tj.axis).dot(&Vec3::from(mj.axis));
                map.push((t_off[b], m_off[k], if s < 0.0 { -1.0 } else { 1.0 }));
            }
            JointKind::Free => map.extend((0..6).map(|i| (t_off[b] + i, m_off[k] + i, 1.0))),
            JointKind::Fixed => {}
        }
    }
    controls
        .iter()
        .map(|row| {
            if row.len() != template.dof() {
                return Err(EstimationError::Mismatch(format!("control row has {} entries, expected {}", row.len(), template.dof())));
            }
            let mut out = vec![0.0; mech.dof()];
            for &(ti, mi, s) in &map {
                out[mi] = s * row[ti];
            }
            Ok(out)
        })
        .collect()
}

/// Shooting problem over the mechanism inferred in `world`, with inertial
/// properties and parameter targets taken from `template` (link `i` of the
/// template describes body `i`).
pub fn problem_from_world_model(
    world: &WorldModel,
    template: &Mechanism,
    spec: &ParamSpec,
    obs: &ObservationSet,
    cfg: ShootingConfig,
) -> Result<ShootingProblem, EstimationError> {
    let (mech, order) = world.to_mechanism(template)?;
    let spec = spec.remapped(&order);
    let controls = obs.controls.as_ref().map(|c| map_controls(template, &mech, &order, c)).transpose()?;
    ShootingProblem::new(mech, spec, obs, &order, controls, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    Adam,
    /// Plain (projected) gradient step.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`; the rate decays
    /// geometrically in between.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rule: StepRule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 0.05, lr_final: 0.02, beta1: 0.9, beta2: 0.999, eps: 1e-8, rule: StepRule::Adam }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        self.lr * self.lr_final.powf(step as f64 / (total - 1) as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }
}

/// One descent step along `g` under `cfg.rule`.
fn apply_step(x: &mut [f64], g: &[f64], state: &mut AdamState, lr: f64, scale: &[f64], cfg: &OptimConfig) {
    match cfg.rule {
        StepRule::Sgd => {
            for i in 0..x.len() {
                x[i] -= lr * scale[i] * g[i];
            }
        }
        StepRule::Adam => {
            state.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(state.t);
            let c2 = 1.0 - cfg.beta2.powi(state.t);
            for i in 0..x.len() {
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                x[i] -= lr * scale[i] * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamResult {
    pub best: Vec<f64>,
    pub best_loss: f64,
    /// Loss of every iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Projected Adam (or plain gradient descent, per `cfg.rule`) from `init`;
/// returns the best iterate seen.
pub fn optimize_adam(obj: &impl Objective, init: &[f64], steps: usize, cfg: &OptimConfig) -> Result<AdamResult, EstimationError> {
    let mut x = init.to_vec();
    obj.project(&mut x);
    let scale = obj.step_scale();
    let mut state = AdamState::new(x.len());
    let mut loss = obj.loss(&x);
    let (mut best, mut best_loss) = (x.clone(), loss);
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(loss);
    for k in 0..steps {
        let g = obj.gradient(&x)?;
        apply_step(&mut x, &g, &mut state, cfg.lr_at(k, steps), &scale, cfg);
        obj.project(&mut x);
        loss = obj.loss(&x);
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best.clone_from(&x);
        }
    }
    Ok(AdamResult { best, best_loss, trace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Vec<f64>>,
    pub log_posteriors: Vec<f64>,
    pub iteration: usize,
    optim: Vec<AdamState>,
}

impl ParticleSet {
    pub fn new(obj: &impl Objective, mut particles: Vec<Vec<f64>>) -> Self {
        for p in &mut particles {
            obj.project(p);
        }
        let log_posteriors = particles.par_iter().map(|p| -obj.loss(p)).collect();
        let optim = particles.iter().map(|p| AdamState::new(p.len())).collect();
        ParticleSet { particles, log_posteriors, iteration: 0, optim }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Index of the particle with the highest log posterior.
    pub fn best(&self) -> usize {
        (0..self.len()).max_by(|&a, &b| self.log_posteriors[a].total_cmp(&self.log_posteriors[b]).then(b.cmp(&a))).unwrap_or(0)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// One SVGD update with an RBF kernel (bandwidth = median squared pairwise
/// distance / ln(n + 1)); the direction `φ` is applied through `cfg.rule`
/// and the particles are projected back into the box.
pub fn svgd_step(set: &mut ParticleSet, obj: &impl Objective, lr: f64, cfg: &OptimConfig) -> Result<(), EstimationError> {
    let n = set.len();
    if n == 0 {
        return Err(EstimationError::Config("SVGD needs at least one particle".into()));
    }
    let scores: Vec<Vec<f64>> = set
        .particles
        .par_iter()
        .map(|p| obj.gradient(p).map(|g| g.into_iter().map(|v| -v).collect()))
        .collect::<Result<_, _>>()?;
    let dim = set.particles[0].len();
    let mut d2 = vec![0.0; n * n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = set.particles[i].iter().zip(&set.particles[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
            pairs.push(v);
        }
    }
    let mut bw = median(pairs) / ((n + 1) as f64).ln();
    if !(bw > 0.0) {
        bw = 1.0;
    }
    let scale = obj.step_scale();
    for i in 0..n {
        let mut phi = vec![0.0; dim];
        for j in 0..n {
            let k = (-d2[i * n + j] / bw).exp();
            for c in 0..dim {
                phi[c] += k * (scores[j][c] + 2.0 * (set.particles[i][c] - set.particles[j][c]) / bw);
            }
        }
        let g: Vec<f64> = phi.iter().map(|v| -v / n as f64).collect();
        apply_step(&mut set.particles[i], &g, &mut set.optim[i], lr, &scale, cfg);
        obj.project(&mut set.particles[i]);
    }
    set.log_posteriors = set.particles.par_iter().map(|p| -obj.loss(p)).collect();
    set.iteration += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Svgd,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(Method::Adam),
            "svgd" => Ok(Method::Svgd),
            other => Err(format!("unknown method {other:?} (expected adam or svgd)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub method: Method,
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig { method: Method::Svgd, particles: 16, steps: 2000, seed: 0, optim: OptimConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub method: Method,
    pub theta: Vec<f64>,
    pub loss: f64,
    /// Parameter vectors of all particles (SVGD only).
    pub particles: Option<Vec<Vec<f64>>>,
    pub nmae: Option<f64>,
    /// Best loss after each step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Parameter inference on `problem`. Initial parameters are drawn uniformly
/// in the box from `cfg.seed` (one draw per particle; Adam uses the first);
/// window states start from the observations.
pub fn estimate(problem: &ShootingProblem, cfg: &EstimateConfig) -> Result<EstimateResult, EstimationError> {
    let spec = problem.spec();
    let draw = |i: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, i));
        let theta: Vec<f64> = spec.entries.iter().map(|e| rng.random_range(e.lo..=e.hi)).collect();
        problem.pack(&theta)
    };
    let truth = spec.ground_truth();
    let score = |theta: &[f64]| truth.as_ref().map(|t| nmae(theta, t, spec)).transpose();
    match cfg.method {
        Method::Adam => {
            let r = optimize_adam(problem, &draw(0), cfg.steps, &cfg.optim)?;
            let (theta, _) = problem.unpack(&r.best);
            let mut best = f64::INFINITY;
            let trace = r.trace.iter().map(|&l| {
                best = best.min(l);
                best
            });
            Ok(EstimateResult { method: Method::Adam, nmae: score(&theta)?, theta, loss: r.best_loss, particles: None, trace: trace.collect() })
        }
        Method::Svgd => {
            if cfg.particles == 0 {
                return Err(EstimationError::Config("particles must be at least 1".into()));
            }
            let init = (0..cfg.particles as u64).map(draw).collect();
            let mut set = ParticleSet::new(problem, init);
            let mut best_x = set.particles[set.best()].clone();
            let mut best_lp = set.log_posteriors[set.best()];
            let mut trace = vec![-best_lp];
            for k in 0..cfg.steps {
                svgd_step(&mut set, problem, cfg.optim.lr_at(k, cfg.steps), &cfg.optim)?;
                let b = set.best();
                if set.log_posteriors[b] > best_lp {
                    best_lp = set.log_posteriors[b];
                    best_x.clone_from(&set.particles[b]);
                }
                trace.push(-best_lp);
                if k % 100 == 0 {
                    log::debug!("svgd step {k}: best loss {:.6e}", -best_lp);
                }
            }
            let (theta, _) = problem.unpack(&best_x);
            let particles = set.particles.iter().map(|p| problem.unpack(p).0).collect();
            Ok(EstimateResult { method: Method::Svgd, nmae: score(&theta)?, theta, loss: -best_lp, particles: Some(particles), trace })
        }
    }
}

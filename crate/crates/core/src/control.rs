//! MPPI model-predictive control and the cartpole swing-up / balance tasks
//! used to validate inferred parameters.

use crate::dynamics::{DynamicsError, Mechanism, Model, SimState};
use crate::joint_fit::derived_seed;
use crate::params::{ParamError, ParamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("every sampled rollout diverged")]
    AllRolloutsDiverged,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiConfig {
    pub samples: usize,
    pub horizon: usize,
    pub dt: f64,
    pub temperature: f64,
    /// Standard deviation of the control perturbation per DoF; zero marks an
    /// unactuated DoF.
    pub noise: Vec<f64>,
    /// Symmetric force limit per DoF.
    pub limits: Vec<f64>,
    /// Lag-one correlation of the perturbation along the horizon; the
    /// per-step standard deviation stays `noise`.
    pub correlation: f64,
    /// Per-step weight decay of the running cost along the horizon.
    pub discount: f64,
    /// Planning iterations at the initial state before the first action.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for MppiConfig {
    /// Cartpole setup: the cart is driven, the pole is not.
    fn default() -> Self {
        MppiConfig { samples: 200, horizon: 60, dt: 0.05, temperature: 1.0, noise: vec![2.0, 0.0], limits: vec![10.0, 0.0], correlation: 0.8, discount: 0.9, warmup: 10, seed: 0 }
    }
}

impl MppiConfig {
    pub fn validate(&self, dof: usize) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::Config(m.into()));
        if self.samples == 0 || self.horizon == 0 {
            return bad("samples and horizon must be at least 1");
        }
        if !(self.temperature > 0.0) || !(self.dt > 0.0) {
            return bad("temperature and dt must be positive");
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return bad("correlation must be in [0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must be in (0, 1]");
        }
        if self.noise.len() != dof || self.limits.len() != dof {
            return Err(ControlError::Config(format!("noise and limits need {dof} entries")));
        }
        if self.noise.iter().chain(&self.limits).any(|v| !(*v >= 0.0) || !v.is_finite()) || self.noise.iter().all(|&s| s == 0.0) {
            return bad("noise and limits must be nonnegative with at least one actuated DoF");
        }
        Ok(())
    }

    fn clip(&self, u: &mut [f64]) {
        for (v, l) in u.iter_mut().zip(&self.limits) {
            *v = v.clamp(-l, *l);
        }
    }
}

/// Normalized softmin weights `exp(−(S_k − min S)/β) / Z`. Infinite costs
/// get weight zero.
pub fn softmin_weights(costs: &[f64], temperature: f64) -> Result<Vec<f64>, ControlError> {
    let min = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(ControlError::AllRolloutsDiverged);
    }
    let mut w: Vec<f64> = costs.iter().map(|&c| if c.is_finite() { (-(c - min) / temperature).exp() } else { 0.0 }).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MppiStep {
    /// First action of the updated plan, within the control limits.
    pub action: Vec<f64>,
    /// Updated control sequence, starting with `action`.
    pub plan: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub costs: Vec<f64>,
}

/// One MPPI iteration at `state`. `cost(x, u)` is the running cost of
/// applying `u` and landing in `x`, weighted by `discount^t` at horizon
/// step `t`; `step` indexes the noise streams so that
/// sample `k` at step `t` is reproducible regardless of scheduling.
impl MppiStep {
    /// Nominal for the next control step: the plan advanced by one step with
    /// its last action repeated.
    pub fn shifted(&self) -> Vec<Vec<f64>> {
        let mut next = self.plan[1..].to_vec();
        next.push(self.plan[self.plan.len() - 1].clone());
        next
    }
}

pub fn mppi_plan(
    model: &Model,
    state: &SimState,
    nominal: &[Vec<f64>],
    cfg: &MppiConfig,
    step: u64,
    cost: &(impl Fn(&SimState, &[f64]) -> f64 + Sync),
) -> Result<MppiStep, ControlError> {
    let dof = model.dof();
    cfg.validate(dof)?;
    if nominal.len() != cfg.horizon || nominal.iter().any(|u| u.len() != dof) {
        return Err(ControlError::Config(format!("nominal must be {} rows of {dof}", cfg.horizon)));
    }
    let step_seed = derived_seed(cfg.seed, step);
    let rollouts: Vec<(f64, Vec<Vec<f64>>)> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(step_seed, k as u64));
            let mut x = state.clone();
            let mut total = 0.0;
            let mut eps = Vec::with_capacity(cfg.horizon);
            let mut diverged = false;
            let mut weight = 1.0;
            let mut z = vec![0.0; dof];
            let (rho, innov) = (cfg.correlation, (1.0 - cfg.correlation * cfg.correlation).sqrt());
            for (t, u0) in nominal.iter().enumerate() {
                for zk in z.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *zk = if t == 0 { n } else { rho * *zk + innov * n };
                }
                let mut u: Vec<f64> = u0.iter().zip(&cfg.noise).zip(&z).map(|((u, s), z)| u + s * z).collect();
                cfg.clip(&mut u);
                if !diverged {
                    let ok = model.step_mut(&mut x, &u, cfg.dt).is_ok() && x.q.iter().chain(&x.qd).all(|v| v.is_finite());
                    if ok {
                        total += weight * cost(&x, &u);
                        weight *= cfg.discount;
                    } else {
                        diverged = true;
                    }
                }
                eps.push(u.iter().zip(u0).map(|(a, b)| a - b).collect());
            }
            (if diverged || !total.is_finite() { f64::INFINITY } else { total }, eps)
        })
        .collect();
    let costs: Vec<f64> = rollouts.iter().map(|r| r.0).collect();
    let weights = softmin_weights(&costs, cfg.temperature)?;
    let mut plan = nominal.to_vec();
    for ((_, eps), &w) in rollouts.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        for (u, e) in plan.iter_mut().zip(eps) {
            for (a, b) in u.iter_mut().zip(e) {
                *a += w * b;
            }
        }
    }
    plan.iter_mut().for_each(|u| cfg.clip(u));
    Ok(MppiStep { action: plan[0].clone(), plan, weights, costs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SwingUp,
    Balance,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "swing_up" => Ok(Task::SwingUp),
            "balance" => Ok(Task::Balance),
            other => Err(format!("unknown task {other:?} (expected swing_up or balance)")),
        }
    }
}

/// Cartpole task: coordinate 0 is the cart, 1 the pole angle (0 upright).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub w_upright: f64,
    pub w_cart: f64,
    pub w_qd: f64,
    pub episode: usize,
    pub x0: SimState,
}

impl TaskSpec {
    /// Pole hanging at rest.
    pub fn swing_up() -> Self {
        TaskSpec { task: Task::SwingUp, w_upright: 1.0, w_cart: 0.05, w_qd: 0.005, episode: 200, x0: SimState { q: vec![0.0, PI], qd: vec![0.0, 0.0] } }
    }

    /// Cart moving at 0.1 m/s with the pole 20° off upright.
    pub fn balance() -> Self {
        TaskSpec { task: Task::Balance, x0: SimState { q: vec![0.0, 20f64.to_radians()], qd: vec![0.1, 0.0] }, ..Self::swing_up() }
    }

    pub fn new(task: Task) -> Self {
        match task {
            Task::SwingUp => Self::swing_up(),
            Task::Balance => Self::balance(),
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if [self.w_upright, self.w_cart, self.w_qd].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(ControlError::Config("task weights must be nonnegative".into()));
        }
        if self.episode == 0 || self.x0.dof() != 2 {
            return Err(ControlError::Config("task needs a positive episode length and a cartpole state".into()));
        }
        Ok(())
    }

    /// `−ln r` for the per-step reward `r`.
    pub fn cost(&self, x: &SimState) -> f64 {
        let up = 1.0 - x.q[1].cos();
        self.w_upright * up * up + self.w_cart * x.q[0] * x.q[0] + self.w_qd * (x.qd[0] * x.qd[0] + x.qd[1] * x.qd[1])
    }

    pub fn reward(&self, x: &SimState) -> f64 {
        (-self.cost(x)).exp()
    }
}

/// Pole angle wrapped to `(−π, π]`, zero upright.
pub fn pole_angle(x: &SimState) -> f64 {
    let a = x.q[1].rem_euclid(2.0 * PI);
    if a > PI { a - 2.0 * PI } else { a }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
    /// States from the initial state through the final one.
    pub states: Vec<SimState>,
    pub actions: Vec<Vec<f64>>,
}

impl Episode {
    /// Pole within `tol` of upright for each of the last `n` states.
    pub fn upright_dwell(&self, n: usize, tol: f64) -> bool {
        self.states.len() >= n && self.states[self.states.len() - n..].iter().all(|x| pole_angle(x).abs() < tol)
    }

    /// Pole never lower than horizontal.
    pub fn stayed_up(&self) -> bool {
        self.states.iter().all(|x| pole_angle(x).abs() <= PI / 2.0)
    }

    pub fn success(&self, task: Task) -> bool {
        match task {
            Task::SwingUp => self.upright_dwell(50, 0.2),
            Task::Balance => self.stayed_up(),
        }
    }
}

/// Noise stream offset for warm-up iterations, clear of episode steps.
const WARMUP_STREAM: u64 = 1 << 32;

/// Closed-loop episode: MPPI plans on `planner` and its actions drive
/// `plant`. The planner sees the plant's true state each step.
pub fn run_episode(planner: &Model, plant: &Model, task: &TaskSpec, cfg: &MppiConfig) -> Result<Episode, ControlError> {
    task.validate()?;
    cfg.validate(plant.dof())?;
    if planner.dof() != plant.dof() {
        return Err(ControlError::Config("planner and plant differ in DoF".into()));
    }
    let cost = |x: &SimState, _: &[f64]| task.cost(x);
    let mut nominal = vec![vec![0.0; plant.dof()]; cfg.horizon];
    let mut x = task.x0.clone();
    for k in 0..cfg.warmup {
        nominal = mppi_plan(planner, &x, &nominal, cfg, WARMUP_STREAM + k as u64, &cost)?.plan;
    }
    let mut states = vec![x.clone()];
    let (mut rewards, mut actions) = (Vec::with_capacity(task.episode), Vec::with_capacity(task.episode));
    for t in 0..task.episode {
        let plan = mppi_plan(planner, &x, &nominal, cfg, t as u64, &cost)?;
        plant.step_mut(&mut x, &plan.action, cfg.dt)?;
        rewards.push(task.reward(&x));
        states.push(x.clone());
        nominal = plan.shifted();
        actions.push(plan.action);
    }
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(Episode { rewards, mean_reward, states, actions })
}

/// Plans and executes on `mech` with parameters `theta`.
pub fn run_task(mech: &Mechanism, spec: &ParamSpec, theta: &[f64], task: &TaskSpec, cfg: &MppiConfig) -> Result<Episode, ControlError> {
    let model = spec.apply(mech, theta)?.model();
    run_episode(&model, &model, task, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim2SimResult {
    /// Planned with the inferred parameters, executed on the true ones.
    pub inferred: Episode,
    /// Planned and executed with the true parameters.
    pub ground_truth: Episode,
}

pub fn sim2sim_eval(
    mech: &Mechanism,
    spec: &ParamSpec,
    theta_inferred: &[f64],
    theta_true: &[f64],
    task: &TaskSpec,
    cfg: &MppiConfig,
) -> Result<Sim2SimResult, ControlError> {
    let planner = spec.apply(mech, theta_inferred)?.model();
    let plant = spec.apply(mech, theta_true)?.model();
    Ok(Sim2SimResult { inferred: run_episode(&planner, &plant, task, cfg)?, ground_truth: run_episode(&plant, &plant, task, cfg)? })
}

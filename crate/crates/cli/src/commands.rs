//! Pipeline stages. Each stage has an in-memory form used by `eval` and a
//! command form that reads and writes files.

use crate::error::CliError;
use crate::io::{read_json, write_csv, write_json};
use artik_core::control::{sim2sim_eval, Episode, MppiConfig, Task, TaskSpec};
use artik_core::dynamics::{preset, Mechanism, NoiseConfig, SimState};
use artik_core::estimation::{estimate, problem_from_world_model, EstimateConfig, EstimateResult, Method, OptimConfig, ShootingConfig};
use artik_core::params::ParamSpec;
use artik_core::topology::{compare_topology, extract_joint_positions, infer_articulation, JointSeries, TopologyReport, WorldModel};
use artik_core::{ObservationSet, RansacConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const MODEL_FILE: &str = "world_model.json";
pub const JOINTS_FILE: &str = "joints.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PARAMS_FILE: &str = "params.json";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const CONTROL_FILE: &str = "control.json";
pub const REWARDS_FILE: &str = "rewards.csv";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub scene: String,
    pub frames: usize,
    pub dt: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// Sidecar written next to generated observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub config: GenerateConfig,
    pub mechanism: Mechanism,
    pub params: ParamSpec,
    pub theta: Vec<f64>,
    pub states: Vec<SimState>,
}

pub fn generate(cfg: &GenerateConfig) -> Result<(ObservationSet, GroundTruth), CliError> {
    if cfg.frames < 2 {
        return Err(CliError::Usage("--frames must be at least 2".into()));
    }
    if !(cfg.dt > 0.0) || !(cfg.noise.sigma_p >= 0.0) || !(cfg.noise.sigma_r >= 0.0) {
        return Err(CliError::Usage("--dt must be positive and noise levels nonnegative".into()));
    }
    let mut scene = preset(&cfg.scene)?.with_seed(cfg.seed);
    scene.frames = cfg.frames;
    scene.dt = cfg.dt;
    let (out, obs) = scene.observe(&cfg.noise)?;
    let theta = scene.true_params();
    let truth = GroundTruth { config: cfg.clone(), mechanism: scene.mechanism, params: scene.params, theta, states: out.states };
    Ok((obs, truth))
}

pub fn cmd_generate(cfg: &GenerateConfig, out: &Path) -> Result<(), CliError> {
    let (obs, truth) = generate(cfg)?;
    write_json(&out.join(TRAJECTORY_FILE), &obs)?;
    write_json(&out.join(TRUTH_FILE), &truth)?;
    log::info!("wrote {} frames of {} bodies to {}", obs.n_frames(), obs.n_bodies(), out.display());
    Ok(())
}

pub fn load_observations(path: &Path) -> Result<ObservationSet, CliError> {
    let obs: ObservationSet = read_json(path)?;
    obs.validate().map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    Ok(obs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferOutput {
    pub config: RansacConfig,
    pub summary: String,
    pub model: WorldModel,
}

pub fn infer(obs: &ObservationSet, cfg: &RansacConfig) -> Result<(WorldModel, Vec<JointSeries>), CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = infer_articulation(obs, cfg)?;
    let series = extract_joint_positions(&model, obs, cfg.rotation_weight)?;
    Ok((model, series))
}

fn write_joint_csv(path: &Path, obs: &ObservationSet, series: &[JointSeries]) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("t".to_string()).chain(series.iter().map(|s| s.label.clone())).collect();
    let dt = obs.dt();
    let rows = (0..obs.n_frames()).map(|t| std::iter::once(t as f64 * dt).chain(series.iter().map(|s| s.q[t])).collect());
    write_csv(path, &header, rows)
}

pub fn cmd_infer(input: &Path, cfg: &RansacConfig, out: &Path) -> Result<String, CliError> {
    let obs = load_observations(input)?;
    let (model, series) = infer(&obs, cfg)?;
    let summary = model.summary();
    write_json(&out.join(MODEL_FILE), &InferOutput { config: cfg.clone(), summary: summary.clone(), model })?;
    write_joint_csv(&out.join(JOINTS_FILE), &obs, &series)?;
    crate::io::write_atomic(&out.join(SUMMARY_FILE), summary.as_bytes())?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub estimate: EstimateConfig,
    pub shooting: ShootingConfig,
}

impl FitConfig {
    pub fn new(method: Method, particles: usize, steps: usize, seed: u64) -> Self {
        FitConfig { estimate: EstimateConfig { method, particles, steps, seed, optim: OptimConfig::default() }, shooting: ShootingConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOutput {
    pub config: FitConfig,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// Normalized mean absolute error against the ground truth, when known.
    pub nmae: Option<f64>,
    pub loss: f64,
    pub particles: Option<Vec<Vec<f64>>>,
}

pub fn fit(obs: &ObservationSet, world: &WorldModel, template: &Mechanism, spec: &ParamSpec, cfg: &FitConfig) -> Result<EstimateResult, CliError> {
    let problem = problem_from_world_model(world, template, spec, obs, cfg.shooting.clone())?;
    Ok(estimate(&problem, &cfg.estimate)?)
}

fn fit_output(spec: &ParamSpec, cfg: &FitConfig, r: EstimateResult) -> FitOutput {
    FitOutput { config: cfg.clone(), names: spec.names(), theta: r.theta, nmae: r.nmae, loss: r.loss, particles: r.particles }
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    write_csv(path, &["step".into(), "loss".into()], trace.iter().enumerate().map(|(k, &l)| vec![k as f64, l]))
}

/// Template mechanism and parameter spec: from the sidecar when given
/// (with ground truth), otherwise from the named preset without it.
pub fn template_for(obs: &ObservationSet, truth: Option<&GroundTruth>, scene: Option<&str>) -> Result<(Mechanism, ParamSpec), CliError> {
    if let Some(t) = truth {
        return Ok((t.mechanism.clone(), t.params.clone()));
    }
    let name = scene.or(obs.scene.as_deref()).ok_or_else(|| CliError::Usage("observations name no scene; pass --scene or --truth".into()))?;
    let scene = preset(name)?;
    let mut spec = scene.params;
    spec.entries.iter_mut().for_each(|e| e.ground_truth = None);
    Ok((scene.mechanism, spec))
}

pub fn cmd_fit(input: &Path, model: &Path, truth: Option<&Path>, scene: Option<&str>, cfg: &FitConfig, out: &Path) -> Result<FitOutput, CliError> {
    let obs = load_observations(input)?;
    let world: InferOutput = read_json(model)?;
    let truth: Option<GroundTruth> = truth.map(read_json).transpose()?;
    let (template, spec) = template_for(&obs, truth.as_ref(), scene)?;
    let r = fit(&obs, &world.model, &template, &spec, cfg)?;
    write_trace(&out.join(TRACE_FILE), &r.trace)?;
    let output = fit_output(&spec, cfg, r);
    write_json(&out.join(PARAMS_FILE), &output)?;
    Ok(output)
}

/// Mechanism and parameters a controller plans on. Any file with these
/// fields works, in particular the ground-truth sidecar.
#[derive(Deserialize)]
pub struct ModelFile {
    pub mechanism: Mechanism,
    pub params: ParamSpec,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Deserialize)]
pub struct ParamsFile {
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub task: TaskSpec,
    pub mppi: MppiConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRun {
    pub seed: u64,
    pub success: bool,
    pub mean_reward: f64,
    pub ground_truth_success: bool,
    pub ground_truth_mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlOutput {
    pub config: ControlConfig,
    pub theta_plan: Vec<f64>,
    pub theta_true: Vec<f64>,
    pub runs: Vec<ControlRun>,
    pub successes: usize,
    pub mean_reward: f64,
    pub ground_truth_mean_reward: f64,
}

/// Plans on `theta_plan`, executes on `theta_true`, once per seed.
pub fn control(mech: &Mechanism, spec: &ParamSpec, theta_plan: &[f64], theta_true: &[f64], cfg: &ControlConfig) -> Result<(ControlOutput, Vec<(Episode, Episode)>), CliError> {
    for (what, theta) in [("theta", theta_plan), ("true theta", theta_true)] {
        if theta.len() != spec.len() {
            return Err(CliError::Parse(format!("{what} has {} values but the model has {} parameters ({})", theta.len(), spec.len(), spec.names().join(", "))));
        }
    }
    let mut runs = Vec::new();
    let mut episodes = Vec::new();
    for &seed in &cfg.seeds {
        let mppi = MppiConfig { seed, ..cfg.mppi.clone() };
        let r = sim2sim_eval(mech, spec, theta_plan, theta_true, &cfg.task, &mppi)?;
        runs.push(ControlRun {
            seed,
            success: r.inferred.success(cfg.task.task),
            mean_reward: r.inferred.mean_reward,
            ground_truth_success: r.ground_truth.success(cfg.task.task),
            ground_truth_mean_reward: r.ground_truth.mean_reward,
        });
        log::info!("{:?} seed {seed}: reward {:.3} (ground truth {:.3})", cfg.task.task, r.inferred.mean_reward, r.ground_truth.mean_reward);
        episodes.push((r.inferred, r.ground_truth));
    }
    let n = runs.len().max(1) as f64;
    let output = ControlOutput {
        config: cfg.clone(),
        theta_plan: theta_plan.to_vec(),
        theta_true: theta_true.to_vec(),
        successes: runs.iter().filter(|r| r.success).count(),
        mean_reward: runs.iter().map(|r| r.mean_reward).sum::<f64>() / n,
        ground_truth_mean_reward: runs.iter().map(|r| r.ground_truth_mean_reward).sum::<f64>() / n,
        runs,
    };
    Ok((output, episodes))
}

pub fn cmd_control(model: &Path, params: &Path, cfg: &ControlConfig, out: &Path) -> Result<ControlOutput, CliError> {
    let m: ModelFile = read_json(model)?;
    let p: ParamsFile = read_json(params)?;
    m.mechanism.validate()?;
    m.params.validate(&m.mechanism)?;
    let truth = m.theta.clone().or_else(|| m.params.ground_truth()).unwrap_or_else(|| p.theta.clone());
    if p.theta.len() != m.params.len() {
        return Err(CliError::Parse(format!("{}: theta has {} values but the model has {} parameters", params.display(), p.theta.len(), m.params.len())));
    }
    let (output, episodes) = control(&m.mechanism, &m.params, &p.theta, &truth, cfg)?;
    let rows = output.runs.iter().zip(&episodes).flat_map(|(run, (inf, gt))| {
        inf.rewards.iter().zip(&gt.rewards).enumerate().map(move |(t, (a, b))| vec![run.seed as f64, t as f64, *a, *b])
    });
    write_csv(&out.join(REWARDS_FILE), &["seed".into(), "step".into(), "reward".into(), "ground_truth_reward".into()], rows)?;
    write_json(&out.join(CONTROL_FILE), &output)?;
    Ok(output)
}

pub fn cmd_plot_data(input: &Path, model: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let obs = load_observations(input)?;
    let header: Vec<String> = ["t", "body", "x", "y", "z", "rx", "ry", "rz"].iter().map(|s| s.to_string()).collect();
    let dt = obs.dt();
    let rows = (0..obs.n_frames()).flat_map(|t| {
        obs.bodies.iter().map(move |b| {
            let a = b.poses[t].to_array();
            vec![t as f64 * dt, b.body_id as f64, a[3], a[4], a[5], a[0], a[1], a[2]]
        })
    });
    write_csv(&out.join("poses.csv"), &header, rows)?;
    if let Some(model) = model {
        let world: InferOutput = read_json(model)?;
        let series = extract_joint_positions(&world.model, &obs, world.config.rotation_weight)?;
        write_joint_csv(&out.join(JOINTS_FILE), &obs, &series)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scene: String,
    pub seeds: Vec<u64>,
    pub frames: usize,
    pub dt: f64,
    /// Noisy level of the noise grid; the other level is noiseless.
    pub noise_p: f64,
    pub noise_r: f64,
    pub methods: Vec<Method>,
    pub particles: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub theta: Vec<f64>,
    pub nmae: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub seed: u64,
    pub noise_p: f64,
    pub noise_r: f64,
    pub summary: String,
    pub topology: TopologyReport,
    pub fits: Vec<MethodResult>,
    /// Swing-up and balance planned on the first method's parameters and
    /// executed on the true ones.
    pub swing_up: Option<ControlRun>,
    pub balance: Option<ControlRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: EvalConfig,
    pub runs: Vec<EvalRun>,
    pub topology: Check,
    pub parameters: Check,
    pub control: Check,
    pub pass: bool,
}

fn count(runs: &[&EvalRun], f: impl Fn(&EvalRun) -> bool) -> usize {
    runs.iter().filter(|r| f(r)).count()
}

fn at_least(k: usize, n: usize, frac: f64) -> bool {
    k as f64 >= (frac * n as f64).ceil()
}

fn evaluate_run(cfg: &EvalConfig, seed: u64, noise: NoiseConfig, out: &Path) -> Result<EvalRun, CliError> {
    let gen = GenerateConfig { scene: cfg.scene.clone(), frames: cfg.frames, dt: cfg.dt, noise, seed };
    let (obs, truth) = generate(&gen)?;
    write_json(&out.join(TRAJECTORY_FILE), &obs)?;
    write_json(&out.join(TRUTH_FILE), &truth)?;

    let noisy = noise.sigma_p > 0.0 || noise.sigma_r > 0.0;
    let ransac = if noisy { RansacConfig::for_noise(noise.sigma_p, noise.sigma_r) } else { RansacConfig::default() };
    let (world, series) = infer(&obs, &ransac)?;
    let summary = world.summary();
    let poses0 = truth.mechanism.forward_kinematics(&truth.states[0].q)?;
    let topology = compare_topology(&world, &truth.mechanism, &poses0);
    write_json(&out.join(MODEL_FILE), &InferOutput { config: ransac, summary: summary.clone(), model: world.clone() })?;
    write_joint_csv(&out.join(JOINTS_FILE), &obs, &series)?;
    log::info!("seed {seed} noise {}: {} topology exact {}", noise.sigma_p, summary.trim(), topology.exact);

    let mut fits = Vec::new();
    if topology.exact {
        for &method in &cfg.methods {
            let fc = FitConfig::new(method, cfg.particles, cfg.steps, seed);
            let r = fit(&obs, &world, &truth.mechanism, &truth.params, &fc)?;
            let name = format!("{method:?}").to_lowercase();
            write_trace(&out.join(format!("loss_trace_{name}.csv")), &r.trace)?;
            log::info!("seed {seed} {name}: nmae {:?}", r.nmae);
            fits.push(MethodResult { method, theta: r.theta, nmae: r.nmae, loss: r.loss });
        }
    }
    let (mut swing_up, mut balance) = (None, None);
    if let (Some(first), true) = (fits.first(), cfg.scene == "cartpole") {
        for task in [Task::SwingUp, Task::Balance] {
            let cc = ControlConfig { task: TaskSpec::new(task), mppi: MppiConfig::default(), seeds: vec![seed] };
            let (o, _) = control(&truth.mechanism, &truth.params, &first.theta, &truth.theta, &cc)?;
            let run = o.runs.into_iter().next();
            match task {
                Task::SwingUp => swing_up = run,
                Task::Balance => balance = run,
            }
        }
    }
    Ok(EvalRun { seed, noise_p: noise.sigma_p, noise_r: noise.sigma_r, summary, topology, fits, swing_up, balance })
}

pub fn eval(cfg: &EvalConfig, out: &Path) -> Result<EvalSummary, CliError> {
    if cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(CliError::Usage("eval needs at least one seed and one method".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for (label, noise) in [("noiseless", NoiseConfig::none()), ("noisy", NoiseConfig { sigma_p: cfg.noise_p, sigma_r: cfg.noise_r, seed })] {
            runs.push(evaluate_run(cfg, seed, noise, &out.join(label).join(format!("seed{seed}")))?);
        }
    }
    let clean: Vec<&EvalRun> = runs.iter().filter(|r| r.noise_p == 0.0 && r.noise_r == 0.0).collect();
    let noisy: Vec<&EvalRun> = runs.iter().filter(|r| r.noise_p > 0.0 || r.noise_r > 0.0).collect();
    let n = cfg.seeds.len();

    let clean_exact = count(&clean, |r| r.topology.exact && r.topology.max_axis_error.is_none_or(|e| e < 1e-6));
    let noisy_exact = count(&noisy, |r| r.topology.exact);
    let noisy_axes = count(&noisy, |r| r.topology.exact && r.topology.max_revolute_axis_error.is_none_or(|e| e < 2f64.to_radians()));
    let topology = Check {
        pass: clean_exact == n && at_least(noisy_exact, n, 0.9) && noisy_axes == noisy_exact,
        detail: format!("noiseless exact {clean_exact}/{n}; noisy exact {noisy_exact}/{n}, axes within 2 deg on {noisy_axes}"),
    };

    let mut param_pass = true;
    let mut detail = Vec::new();
    for &m in &cfg.methods {
        let nmae_of = |r: &EvalRun| r.fits.iter().find(|f| f.method == m).and_then(|f| f.nmae);
        let c = count(&clean, |r| nmae_of(r).is_some_and(|e| e < 0.05));
        let d = count(&noisy, |r| nmae_of(r).is_some_and(|e| e <= 0.161));
        param_pass &= at_least(c, n, 0.8) && at_least(d, n, 0.8);
        detail.push(format!("{m:?}: noiseless NMAE < 0.05 in {c}/{n}, noisy NMAE <= 0.161 in {d}/{n}").to_lowercase());
    }
    let parameters = Check { pass: param_pass, detail: detail.join("; ") };

    let good = |r: &EvalRun| r.fits.first().and_then(|f| f.nmae).is_some_and(|e| e < 0.05);
    let swing = count(&clean, |r| good(r) && r.swing_up.as_ref().is_some_and(|c| c.success));
    let bal = count(&clean, |r| good(r) && r.balance.as_ref().is_some_and(|c| c.success));
    let control = Check {
        pass: at_least(swing, n, 0.8) && at_least(bal, n, 0.8),
        detail: format!("noiseless swing-up {swing}/{n}, balance {bal}/{n}"),
    };
    let pass = topology.pass && parameters.pass && control.pass;
    let summary = EvalSummary { config: cfg.clone(), runs, topology, parameters, control, pass };
    write_json(&out.join(EVAL_FILE), &summary)?;
    Ok(summary)
}

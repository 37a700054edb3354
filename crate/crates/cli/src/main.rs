mod commands;
mod error;
mod io;

use artik_core::control::{MppiConfig, Task, TaskSpec};
use artik_core::dynamics::presets::{DEFAULT_DT, DEFAULT_FRAMES};
use artik_core::dynamics::NoiseConfig;
use artik_core::estimation::Method;
use artik_core::RansacConfig;
use clap::{Parser, Subcommand};
use commands::*;
use error::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "artik", version, about = "Simulatable articulated mechanisms from 6-DoF pose trajectories")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a built-in scene and write its pose observations.
    Generate {
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_p: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer the kinematic structure of an observation file.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Expected translation noise; widens the inlier threshold.
        #[arg(long, default_value_t = 0.0)]
        noise_p: f64,
        /// Expected rotation noise in radians.
        #[arg(long, default_value_t = 0.0)]
        noise_r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate physical parameters over an inferred structure.
    FitParams {
        #[arg(long)]
        input: PathBuf,
        /// Output of `infer`.
        #[arg(long)]
        model: PathBuf,
        /// Ground-truth sidecar from `generate`; enables NMAE.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Preset supplying the parameter template when there is no sidecar.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long, default_value = "svgd")]
        method: Method,
        #[arg(long, default_value_t = 16)]
        particles: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run MPPI planned on fitted parameters against the true mechanism.
    Control {
        #[arg(long)]
        task: Task,
        /// Mechanism and parameter spec, e.g. a ground-truth sidecar.
        #[arg(long)]
        model: PathBuf,
        /// Output of `fit-params`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over seeds and noise levels with a pass/fail summary.
    Eval {
        #[arg(long, default_value = "cartpole")]
        scene: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = 0.005)]
        noise_p: f64,
        #[arg(long, default_value_t = 0.01)]
        noise_r: f64,
        /// One method only; both by default.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, default_value_t = 16)]
        particles: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export poses (and joint positions given a model) as CSV.
    PlotData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Generate { scene, frames, dt, noise_p, noise_r, seed, out } => {
            let cfg = GenerateConfig { scene, frames, dt, noise: NoiseConfig { sigma_p: noise_p, sigma_r: noise_r, seed }, seed };
            cmd_generate(&cfg, &out)
        }
        Command::Infer { input, noise_p, noise_r, seed, out } => {
            let cfg = RansacConfig { seed, ..RansacConfig::for_noise(noise_p, noise_r) };
            print!("{}", cmd_infer(&input, &cfg, &out)?);
            Ok(())
        }
        Command::FitParams { input, model, truth, scene, method, particles, steps, seed, out } => {
            let cfg = FitConfig::new(method, particles, steps, seed);
            let r = cmd_fit(&input, &model, truth.as_deref(), scene.as_deref(), &cfg, &out)?;
            for (n, v) in r.names.iter().zip(&r.theta) {
                println!("{n} = {v:.6}");
            }
            match r.nmae {
                Some(e) => println!("loss {:.6e}, nmae {e:.4}", r.loss),
                None => println!("loss {:.6e}", r.loss),
            }
            Ok(())
        }
        Command::Control { task, model, params, seeds, seed, out } => {
            let cfg = ControlConfig { task: TaskSpec::new(task), mppi: MppiConfig::default(), seeds: (seed..seed + seeds).collect() };
            let r = cmd_control(&model, &params, &cfg, &out)?;
            println!("{}/{} successful, mean reward {:.4} (ground truth {:.4})", r.successes, r.runs.len(), r.mean_reward, r.ground_truth_mean_reward);
            Ok(())
        }
        Command::Eval { scene, seeds, seed, frames, dt, noise_p, noise_r, method, particles, steps, out } => {
            let methods = method.map_or(vec![Method::Svgd, Method::Adam], |m| vec![m]);
            let cfg = EvalConfig { scene, seeds: (seed..seed + seeds).collect(), frames, dt, noise_p, noise_r, methods, particles, steps };
            let s = eval(&cfg, &out)?;
            for (name, c) in [("topology", &s.topology), ("parameters", &s.parameters), ("control", &s.control)] {
                println!("{} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
            }
            Ok(())
        }
        Command::PlotData { input, model, out } => cmd_plot_data(&input, model.as_deref(), &out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARTIK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

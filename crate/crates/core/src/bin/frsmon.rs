//! Command-line front end for scene generation, prediction, calibration,
//! monitoring, evaluation, and the mode-count ablation.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frsmon::conformal::CalibrationModel;
use frsmon::harness::{
    ablation_csv, calibrate_on_scenes, coverage_on_scenes, evaluate_methods, make_mixed_dataset,
    mode_ablation, rates_csv, run_monitor_scene, timing_csv, verdicts_jsonl, EvalConfig, PredIndex,
};
use frsmon::monitor::{Method, MethodConfig};
use frsmon::scenario::{
    gen_world, load_scene_dir, predict_scene, synthesize_unsafe, write_pred_jsonl, PredictorConfig,
    Scene, SynthConfig, SynthError, WorldConfig,
};

#[derive(Parser)]
#[command(name = "frsmon", version, about = "Calibrated reachable-set safety monitoring on synthetic traffic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PredictorArgs {
    /// Number of maneuver hypotheses (modes).
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Covariance shrink factor; < 1 is overconfident.
    #[arg(long, default_value_t = 1.0)]
    shrink: f64,
    /// Observation-noise standard deviation the predictor assumes.
    #[arg(long, default_value_t = 1.0)]
    sigma_w: f64,
    /// Mean offset (m) applied on scenes flagged out-of-distribution.
    #[arg(long, default_value_t = 0.0)]
    ood_bias: f64,
    /// History steps used to weight hypotheses.
    #[arg(long, default_value_t = 4)]
    history: usize,
    /// Forecast horizon in steps.
    #[arg(long, default_value_t = 6)]
    horizon: usize,
}

impl PredictorArgs {
    fn to_config(&self) -> PredictorConfig {
        PredictorConfig {
            k: self.k,
            shrink: self.shrink,
            sigma_w: self.sigma_w,
            ood_bias: self.ood_bias,
            history: self.history,
            horizon: self.horizon,
            ..PredictorConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct MonitorArgs {
    /// Mass target for the level solver.
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    /// Combined ego + contender footprint radius (m).
    #[arg(long, default_value_t = 2.0)]
    footprint: f64,
    #[arg(long, default_value_t = 0.3)]
    beta_low: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_high: f64,
    /// Confidence below which hybrid methods fall back.
    #[arg(long, default_value_t = 0.75)]
    beta_threshold: f64,
    /// Worst-case acceleration bound (m/s^2).
    #[arg(long, default_value_t = 4.0)]
    a_max: f64,
    /// Worst-case speed bound (m/s).
    #[arg(long, default_value_t = 15.0)]
    v_max: f64,
    /// Monitoring horizon in steps.
    #[arg(long, default_value_t = 6)]
    horizon: usize,
    /// First monitored frame (needs predictor history).
    #[arg(long, default_value_t = 4)]
    first_frame: usize,
}

impl MonitorArgs {
    fn to_config(&self, method: Method) -> MethodConfig {
        MethodConfig {
            method,
            tau: self.tau,
            footprint_radius: self.footprint,
            beta_low: self.beta_low,
            beta_high: self.beta_high,
            beta_threshold: self.beta_threshold,
            a_max: self.a_max,
            v_max: self.v_max,
            ..MethodConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directory of synthetic scenes.
    GenScenes {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Per-step standard deviation of the observation random walk.
        #[arg(long, default_value_t = 1.0)]
        sigma_w: f64,
        #[arg(long, default_value_t = 30)]
        n_steps: usize,
        #[arg(long, default_value_t = 1)]
        contenders_min: usize,
        #[arg(long, default_value_t = 4)]
        contenders_max: usize,
        /// Fraction of scenes flagged for the predictor's bias knob.
        #[arg(long, default_value_t = 0.0)]
        ood_fraction: f64,
        /// Convert up to this many scenes into synthesized near-collisions.
        #[arg(long = "unsafe", default_value_t = 0)]
        n_unsafe: usize,
    },
    /// Run the synthetic predictor over a scene directory.
    Predict {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Rewrite safe scenes into labeled near-collisions.
    SynthUnsafe {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Stop after this many conversions (default: all that succeed).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        pos_tol: f64,
    },
    /// Fit per-step conformal scales from scenes and predictions.
    Calibrate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        /// Calibrate on each scene's maneuver-onset frame only.
        #[arg(long)]
        onset_only: bool,
    },
    /// Monitor scenes with one method, writing a verdict stream.
    Monitor {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        monitor: MonitorArgs,
    },
    /// Compare methods on labeled scenes: verdicts, rates, coverage, timing.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated method list (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[command(flatten)]
        monitor: MonitorArgs,
    },
    /// Sweep the predictor's mode count; re-calibrate and re-evaluate per k.
    AblateModes {
        #[arg(long)]
        calib_scenes: PathBuf,
        #[arg(long)]
        eval_scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3, 4, 5])]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        monitor: MonitorArgs,
    },
    /// Time the per-frame monitoring cost of each method.
    Bench {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[command(flatten)]
        monitor: MonitorArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::GenScenes {
            out_dir,
            n,
            seed,
            sigma_w,
            n_steps,
            contenders_min,
            contenders_max,
            ood_fraction,
            n_unsafe,
        } => {
            let cfg = WorldConfig {
                n_scenes: n,
                n_steps,
                sigma_w,
                contenders_min,
                contenders_max,
                ood_fraction,
                ..WorldConfig::default()
            };
            let mut scenes = gen_world(&cfg, seed);
            if n_unsafe > 0 {
                scenes = make_mixed_dataset(scenes, &SynthConfig::default(), n_unsafe);
            }
            write_scenes(&out_dir, &scenes)?;
            let unsafe_count = scenes
                .iter()
                .filter(|s| s.meta.collision_step.is_some())
                .count();
            println!(
                "wrote {} scenes ({unsafe_count} unsafe) to {}",
                scenes.len(),
                out_dir.display()
            );
        }
        Command::Predict {
            scenes,
            out,
            predictor,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let cfg = predictor.to_config();
            let mut records = Vec::new();
            for scene in &scenes {
                records.extend(predict_scene(scene, &cfg)?);
            }
            write_pred_jsonl(&out, &records)?;
            println!("wrote {} prediction records to {}", records.len(), out.display());
        }
        Command::SynthUnsafe {
            scenes,
            out_dir,
            count,
            pos_tol,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let cfg = SynthConfig {
                pos_tol,
                ..SynthConfig::default()
            };
            let mut out = Vec::new();
            let limit = count.unwrap_or(usize::MAX);
            for scene in &scenes {
                if out.len() >= limit {
                    break;
                }
                match synthesize_unsafe(scene, &cfg) {
                    Ok(s) => out.push(s),
                    Err(SynthError::NoTarget | SynthError::Infeasible { .. }) => {
                        eprintln!("skipping {}: no feasible collision", scene.meta.id);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            write_scenes(&out_dir, &out)?;
            println!("wrote {} unsafe scenes to {}", out.len(), out_dir.display());
        }
        Command::Calibrate {
            scenes,
            preds,
            out,
            tau,
            gamma,
            onset_only,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let index = PredIndex::from_records(&frsmon::scenario::read_pred_jsonl(&preds)?)?;
            let model = calibrate_on_scenes(&scenes, &index, tau, gamma, onset_only)?;
            model.save(&out)?;
            for (t, s) in &model.per_step {
                println!("t={t}: eta={:.6} (n={})", s.eta, s.n);
            }
            println!("wrote calibration model to {}", out.display());
        }
        Command::Monitor {
            scenes,
            preds,
            method,
            model,
            out,
            monitor,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let index = PredIndex::from_records(&frsmon::scenario::read_pred_jsonl(&preds)?)?;
            let model = model.map(|p| CalibrationModel::load(&p)).transpose()?;
            let cfg = monitor.to_config(method);
            let mut lines = String::new();
            let mut flagged = 0usize;
            let mut total = 0usize;
            for scene in &scenes {
                let frames = run_monitor_scene(
                    scene,
                    &index,
                    &cfg,
                    model.as_ref(),
                    monitor.horizon,
                    monitor.first_frame,
                )?;
                for (frame, verdict) in frames {
                    total += 1;
                    flagged += verdict.is_unsafe as usize;
                    let row = serde_json::json!({
                        "scene": scene.meta.id,
                        "frame": frame,
                        "method": method.name(),
                        "verdict": verdict,
                    });
                    lines.push_str(&row.to_string());
                    lines.push('\n');
                }
            }
            fs::write(&out, lines)?;
            println!("{flagged}/{total} frames flagged; wrote {}", out.display());
        }
        Command::Eval {
            scenes,
            preds,
            model,
            out_dir,
            methods,
            monitor,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let index = PredIndex::from_records(&frsmon::scenario::read_pred_jsonl(&preds)?)?;
            let model = CalibrationModel::load(&model)?;
            let cfg = EvalConfig {
                methods: if methods.is_empty() {
                    Method::all().to_vec()
                } else {
                    methods
                },
                base: monitor.to_config(Method::ForceOpt),
                horizon: monitor.horizon,
                first_frame: monitor.first_frame,
            };
            let out = evaluate_methods(&scenes, &index, &cfg, Some(&model))?;
            let coverage = coverage_on_scenes(&scenes, &index, &model, cfg.base.tau, false)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("verdicts.jsonl"), verdicts_jsonl(&out.verdicts))?;
            fs::write(out_dir.join("metrics.csv"), rates_csv(&out.rates))?;
            fs::write(out_dir.join("timing.csv"), timing_csv(&out.timing))?;
            fs::write(
                out_dir.join("coverage.json"),
                serde_json::to_string_pretty(&coverage)? + "\n",
            )?;
            print!("{}", rates_csv(&out.rates));
            println!(
                "per-state coverage {:.4}, per-trajectory {:.4}; wrote {}",
                coverage.per_state,
                coverage.per_trajectory,
                out_dir.display()
            );
        }
        Command::AblateModes {
            calib_scenes,
            eval_scenes,
            out,
            ks,
            gamma,
            predictor,
            monitor,
        } => {
            let calib = load_scene_dir(&calib_scenes)?;
            let eval = load_scene_dir(&eval_scenes)?;
            let cfg = EvalConfig {
                methods: vec![Method::ForceOpt],
                base: monitor.to_config(Method::ForceOpt),
                horizon: monitor.horizon,
                first_frame: monitor.first_frame,
            };
            let rows = mode_ablation(&calib, &eval, &ks, &predictor.to_config(), gamma, &cfg)?;
            let csv = ablation_csv(&rows);
            fs::write(&out, &csv)?;
            print!("{csv}");
            println!("wrote {}", out.display());
        }
        Command::Bench {
            scenes,
            preds,
            model,
            out,
            methods,
            monitor,
        } => {
            let scenes = load_scene_dir(&scenes)?;
            let index = PredIndex::from_records(&frsmon::scenario::read_pred_jsonl(&preds)?)?;
            let model = CalibrationModel::load(&model)?;
            let cfg = EvalConfig {
                methods: if methods.is_empty() {
                    Method::all().to_vec()
                } else {
                    methods
                },
                base: monitor.to_config(Method::ForceOpt),
                horizon: monitor.horizon,
                first_frame: monitor.first_frame,
            };
            let run = evaluate_methods(&scenes, &index, &cfg, Some(&model))?;
            let csv = timing_csv(&run.timing);
            fs::write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn write_scenes(dir: &std::path::Path, scenes: &[Scene]) -> Result<(), Box<dyn std::error::Error>> {
    fs::create_dir_all(dir)?;
    for scene in scenes {
        scene.save(&dir.join(format!("{}.json", scene.meta.id)))?;
    }
    Ok(())
}

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dst_core::eval::{ablation_suite, baseline_detect, Arm, BaselineConfig, Prediction, Report};
use dst_core::io::{
    load_checkpoint, match_data, read_match_dir, read_predictions, save_checkpoint,
    write_match_dir, write_predictions, MatchPredictions, PredictionFile, FORMAT_VERSION,
};
use dst_core::model::{loss_gradcheck, DstModel, ModelConfig};
use dst_core::nn::gradcheck::op_suite;
use dst_core::noise::{corrupt_match, NoiseConfig};
use dst_core::pipeline::{
    infer_full_match, train, ConfidenceMode, InferConfig, PipelineError, TrainConfig, TrainState,
};
use dst_core::sim::{simulate_match, EventRecord, SimConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dst",
    version,
    about = "Synthetic soccer action detection: simulate, corrupt, train, infer, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Confidence {
    Joint,
    CategoryOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate matches and write ground truth.
    Simulate {
        #[arg(long)]
        games: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulator configuration JSON; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add detector logits to simulated matches.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        /// Noise configuration JSON, or `zero` for noiseless logits.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on corrupted matches, checkpointing every epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        game_state: Switch,
        #[arg(long = "L")]
        context: Option<usize>,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict actions for every match in a directory.
    Infer {
        /// Model checkpoint; omit together with `--baseline`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Peak picking on the raw logits instead of a model.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "joint")]
        confidence: Confidence,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 12)]
        delta: usize,
        #[arg(long, default_value_t = 0.15)]
        threshold: f32,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run every arm of an ablation plan and print both tables.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Finite-difference checks of every operation and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn pipeline(e: PipelineError) -> Failure {
    match e {
        PipelineError::NonFinite { .. } => Failure::Numeric(e.into()),
        PipelineError::Config(_) => Failure::Usage(e.into()),
        other => Failure::Data(other.into()),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Usage)
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn simulate(
    games: usize,
    frames: usize,
    seed: u64,
    config: Option<PathBuf>,
    out: &Path,
) -> Result<(), Failure> {
    let mut sim: SimConfig = match config {
        Some(p) => read_config(&p)?,
        None => SimConfig::default(),
    };
    sim.n_frames = frames;
    sim.validate().map_err(|e| Failure::Usage(e.into()))?;
    let matches = (0..games)
        .map(|i| simulate_match(&sim, seed + i as u64).map(|gt| (gt, None)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.into()))?;
    let names = write_match_dir(out, &matches).map_err(data)?;
    println!("wrote {} matches to {}", names.len(), out.display());
    Ok(())
}

fn corrupt(input: &Path, noise: Option<String>, seed: u64, out: &Path) -> Result<(), Failure> {
    let config = match noise.as_deref() {
        None | Some("default") => NoiseConfig::default(),
        Some("zero") => NoiseConfig::zero_noise(),
        Some(p) => read_config(Path::new(p))?,
    };
    config.validate().map_err(|e| Failure::Usage(anyhow!(e)))?;
    let stored = read_match_dir(input).map_err(data)?;
    let matches = stored
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let cube = corrupt_match(&m.truth, &config, seed.wrapping_add(i as u64))
                .map_err(|e| data(anyhow!(e)))?;
            Ok((m.truth, Some(cube)))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    write_match_dir(out, &matches).map_err(data)?;
    println!(
        "wrote {} corrupted matches to {}",
        matches.len(),
        out.display()
    );
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    config: Option<PathBuf>,
    game_state: Switch,
    context: Option<usize>,
    model_seed: u64,
    resume: bool,
    out: PathBuf,
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let stored = read_match_dir(&a.data).map_err(data)?;
    let matches = match_data(&a.data, &stored).map_err(data)?;
    let (mut model, tc, mut state) = if a.resume {
        load_checkpoint(&a.out).map_err(data)?
    } else {
        let run: RunConfig = match &a.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        let mut mc = run.model;
        if let Some(l) = a.context {
            mc.context = l;
        }
        let tc = TrainConfig {
            game_state: matches!(a.game_state, Switch::On),
            ..run.train
        };
        tc.validate().map_err(|e| Failure::Usage(e.into()))?;
        let model = DstModel::init(mc, a.model_seed).map_err(|e| Failure::Usage(e.into()))?;
        let state = TrainState::new(&model);
        (model, tc, state)
    };
    let out = a.out.clone();
    let config = tc.clone();
    train(&mut model, &mut state, &matches, &tc, |stats, m, st| {
        println!("{}", serde_json::to_string(stats).unwrap_or_default());
        save_checkpoint(&out, m, &config, st).map_err(|e| PipelineError::Config(e.to_string()))
    })
    .map_err(pipeline)?;
    Ok(())
}

fn infer_cmd(
    ckpt: Option<PathBuf>,
    baseline: bool,
    dir: &Path,
    confidence: Confidence,
    out: &Path,
) -> Result<(), Failure> {
    let stored = read_match_dir(dir).map_err(data)?;
    let file = match (ckpt, baseline) {
        (Some(_), true) | (None, false) => {
            return Err(Failure::Usage(anyhow!(
                "give exactly one of --ckpt and --baseline"
            )));
        }
        (None, true) => {
            let config = BaselineConfig::default();
            let matches = stored
                .iter()
                .map(|m| {
                    let cube = m
                        .cube
                        .as_ref()
                        .ok_or_else(|| data(anyhow!("{} has no detector logits", m.name)))?;
                    let predictions = baseline_detect(cube, &m.truth.pauses, &config)
                        .map_err(|e| data(anyhow!(e)))?;
                    Ok(MatchPredictions {
                        name: m.name.clone(),
                        predictions,
                        diagnostics: Default::default(),
                    })
                })
                .collect::<Result<_, Failure>>()?;
            PredictionFile {
                version: FORMAT_VERSION,
                source: "baseline".into(),
                context: None,
                matches,
            }
        }
        (Some(ckpt), false) => {
            let (model, tc, _) = load_checkpoint(&ckpt).map_err(data)?;
            let inputs = match_data(dir, &stored).map_err(data)?;
            let ic = InferConfig {
                game_state: tc.game_state,
                confidence: match confidence {
                    Confidence::Joint => ConfidenceMode::Joint,
                    Confidence::CategoryOnly => ConfidenceMode::CategoryOnly,
                },
            };
            let matches = stored
                .iter()
                .zip(&inputs)
                .map(|(m, d)| {
                    let (predictions, diagnostics) =
                        infer_full_match(&model, d, &ic).map_err(pipeline)?;
                    Ok(MatchPredictions {
                        name: m.name.clone(),
                        predictions,
                        diagnostics,
                    })
                })
                .collect::<Result<_, Failure>>()?;
            PredictionFile {
                version: FORMAT_VERSION,
                source: ckpt.display().to_string(),
                context: Some(model.config.context),
                matches,
            }
        }
    };
    write_predictions(out, &file).map_err(data)?;
    let n: usize = file.matches.iter().map(|m| m.predictions.len()).sum();
    println!(
        "wrote {n} predictions for {} matches to {}",
        file.matches.len(),
        out.display()
    );
    Ok(())
}

/// Predictions aligned to the ground-truth matches by name.
fn aligned(pred: &PredictionFile, gt_names: &[String]) -> Result<Vec<Vec<Prediction>>, Failure> {
    gt_names
        .iter()
        .map(|n| {
            pred.matches
                .iter()
                .find(|m| &m.name == n)
                .map(|m| m.predictions.clone())
                .ok_or_else(|| data(anyhow!("no predictions for match {n}")))
        })
        .collect()
}

fn truth(dir: &Path) -> Result<(Vec<String>, Vec<Vec<EventRecord>>), Failure> {
    let stored = read_match_dir(dir).map_err(data)?;
    Ok((
        stored.iter().map(|m| m.name.clone()).collect(),
        stored.into_iter().map(|m| m.truth.events).collect(),
    ))
}

fn write_report(report: &Report, json: Option<&Path>) -> Result<(), Failure> {
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&report.to_json()).map_err(data)?;
        std::fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(data)?;
    }
    Ok(())
}

fn evaluate(
    pred: &Path,
    gt: &Path,
    delta: usize,
    threshold: f32,
    json: Option<PathBuf>,
) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Usage(anyhow!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let file = read_predictions(pred).map_err(data)?;
    let (names, events) = truth(gt)?;
    let arm = Arm {
        name: file.source.clone(),
        context: file.context,
        predictions: Some(aligned(&file, &names)?),
    };
    let report = ablation_suite(&[arm], &events, threshold, &[delta]);
    print!("{}", report.table_one(delta));
    write_report(&report, json.as_deref())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanArm {
    name: String,
    /// One of `predictions`, `checkpoint` or `baseline`.
    #[serde(default)]
    predictions: Option<PathBuf>,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    baseline: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Plan {
    /// Corrupted test matches.
    test: PathBuf,
    arms: Vec<PlanArm>,
    #[serde(default = "default_threshold")]
    threshold: f32,
    #[serde(default = "default_deltas")]
    deltas: Vec<usize>,
    #[serde(default)]
    report: Option<PathBuf>,
}

fn default_threshold() -> f32 {
    0.15
}

fn default_deltas() -> Vec<usize> {
    vec![12, 25]
}

#[derive(Serialize)]
struct ArmNote<'a> {
    arm: &'a str,
    missing: String,
}

fn ablate(plan_path: &Path) -> Result<(), Failure> {
    let plan: Plan = read_config(plan_path)?;
    let base = plan_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    let test = resolve(&plan.test);
    let stored = read_match_dir(&test).map_err(data)?;
    let names: Vec<String> = stored.iter().map(|m| m.name.clone()).collect();
    let events: Vec<Vec<EventRecord>> = stored.iter().map(|m| m.truth.events.clone()).collect();
    let mut arms = Vec::with_capacity(plan.arms.len());
    for a in &plan.arms {
        let sources = usize::from(a.predictions.is_some())
            + usize::from(a.checkpoint.is_some())
            + usize::from(a.baseline);
        if sources != 1 {
            return Err(Failure::Usage(anyhow!(
                "arm {} needs exactly one of predictions, checkpoint, baseline",
                a.name
            )));
        }
        let (context, preds) = if a.baseline {
            let config = BaselineConfig::default();
            let preds = stored
                .iter()
                .map(|m| {
                    let cube = m
                        .cube
                        .as_ref()
                        .ok_or_else(|| data(anyhow!("{} has no detector logits", m.name)))?;
                    baseline_detect(cube, &m.truth.pauses, &config).map_err(|e| data(anyhow!(e)))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            (None, Some(preds))
        } else if let Some(p) = &a.predictions {
            match read_predictions(&resolve(p)) {
                Ok(f) => (f.context, Some(aligned(&f, &names)?)),
                Err(e) => {
                    eprintln!(
                        "{}",
                        serde_json::to_string(&ArmNote {
                            arm: &a.name,
                            missing: e.to_string()
                        })
                        .unwrap_or_default()
                    );
                    (None, None)
                }
            }
        } else {
            let ckpt = resolve(a.checkpoint.as_ref().expect("one source"));
            match load_checkpoint(&ckpt) {
                Ok((model, tc, _)) => {
                    let inputs = match_data(&test, &stored).map_err(data)?;
                    let ic = InferConfig {
                        game_state: tc.game_state,
                        confidence: ConfidenceMode::Joint,
                    };
                    let preds = inputs
                        .iter()
                        .map(|d| infer_full_match(&model, d, &ic).map(|(p, _)| p))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(pipeline)?;
                    (Some(model.config.context), Some(preds))
                }
                Err(e) => {
                    eprintln!(
                        "{}",
                        serde_json::to_string(&ArmNote {
                            arm: &a.name,
                            missing: e.to_string()
                        })
                        .unwrap_or_default()
                    );
                    (None, None)
                }
            }
        };
        arms.push(Arm {
            name: a.name.clone(),
            context,
            predictions: preds,
        });
    }
    let report = ablation_suite(&arms, &events, plan.threshold, &plan.deltas);
    for &d in &plan.deltas {
        print!("{}", report.table_one(d));
        println!();
        print!("{}", report.table_two(d));
        println!();
    }
    write_report(&report, plan.report.map(|p| resolve(&p)).as_deref())
}

fn gradcheck(instances: usize, seed: u64) -> Result<(), Failure> {
    let mut reports = op_suite(instances, 1e-3, seed).map_err(|e| Failure::Numeric(e.into()))?;
    reports.push(loss_gradcheck(instances, 5e-3, seed).map_err(|e| Failure::Numeric(e.into()))?);
    println!(
        "{:<22} {:>14} {:>10}  status",
        "check", "max rel error", "tolerance"
    );
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<22} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
        if let Some(f) = &r.failure {
            println!("    {f}");
        }
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!("gradient check failed")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            games,
            frames,
            seed,
            config,
            out,
        } => simulate(games, frames, seed, config, &out),
        Command::Corrupt {
            input,
            noise,
            seed,
            out,
        } => corrupt(&input, noise, seed, &out),
        Command::Train {
            data,
            config,
            game_state,
            context,
            model_seed,
            resume,
            out,
        } => train_cmd(TrainArgs {
            data,
            config,
            game_state,
            context,
            model_seed,
            resume,
            out,
        }),
        Command::Infer {
            ckpt,
            baseline,
            data,
            confidence,
            out,
        } => infer_cmd(ckpt, baseline, &data, confidence, &out),
        Command::Evaluate {
            pred,
            gt,
            delta,
            threshold,
            json,
        } => evaluate(&pred, &gt, delta, threshold, json),
        Command::Ablate { plan } => ablate(&plan),
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

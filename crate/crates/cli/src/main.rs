//! `scp`: dataset generation, training, evaluation, gradient checking, flow
//! inspection and the expert-count ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! The last line on stdout is always a one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scp_core::data::{self, GenSpec};
use scp_core::scpt::{self, ScptTensor};
use scp_core::train::{self, GradCheckConfig, Metrics, TrainRunConfig};
use scp_core::visual::{self, ClipPartition};
use scp_core::{Error, Tensor};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "scp", version, about = "Prompted video action recognition on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-sprite dataset.
    GenData {
        /// Generator spec (JSON). Missing keys take their defaults.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the manifest and tensor files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and report.json under the
    /// config's output_dir.
    Train {
        /// Training run config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split of a dataset.
    Eval {
        /// Checkpoint index file (the .json next to its .scpt blob).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Videos per forward pass.
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Compare analytic gradients of a tiny end-to-end model with central
    /// differences. Exits 3 if the tolerance is exceeded.
    Gradcheck {
        /// Gradient-check config (JSON); the built-in tiny model if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum allowed relative error (overrides the config).
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Estimate block-matching flow for one clip and write the flow fields
    /// and flow-prompted frames.
    Flow {
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Clip id.
        #[arg(long)]
        clip: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Clips per video (flow is estimated between clips).
        #[arg(long, default_value_t = 4)]
        clips: usize,
        /// Block edge in pixels.
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        /// Maximum displacement searched, in pixels.
        #[arg(long, default_value_t = 4)]
        search_radius: usize,
    },
    /// Train once per expert count and tabulate the results.
    AblateExperts {
        /// Base training config (JSON) with an scp prompt mode.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated expert counts, e.g. 4,8,16,32.
        #[arg(long = "l", value_delimiter = ',', num_args = 0..)]
        l: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Flow { .. } => "flow",
            Command::AblateExperts { .. } => "ablate-experts",
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
    /// Extra fields for the summary line.
    details: Option<Value>,
}

impl Failure {
    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
            details: None,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA },
            message: e.to_string(),
            details: None,
        }
    }
}

/// Prefix errors that do not carry a path with the file they came from.
fn in_file(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mentions_path = matches!(
            e,
            Error::Io { .. } | Error::Json { .. } | Error::Corrupt { .. } | Error::Checksum { .. } | Error::Version { .. }
        );
        let mut f = Failure::from(e);
        if !mentions_path {
            f.message = format!("{}: {}", path.display(), f.message);
        }
        f
    }
}

fn metrics_json(m: &Metrics) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure::data(format!("{}: {e}", spec_path.display())))?;
    let spec: GenSpec =
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", spec_path.display())))?;
    let set = data::generate(&spec).map_err(in_file(spec_path))?;
    data::save_set(&set, out)?;
    println!(
        "generated {} clips ({} train, {} val) into {}",
        set.clips.len(),
        spec.train_clips,
        spec.val_clips,
        out.display()
    );
    Ok(json!({
        "clips": set.clips.len(),
        "classes": set.num_classes(),
        "out": out.display().to_string(),
    }))
}

fn run_train(config_path: &Path) -> Result<Value, Failure> {
    let config = TrainRunConfig::load(config_path)?;
    let report = train::train(&config).map_err(in_file(config_path))?;
    print!("{}", report.table());
    println!("wall time {:.1}s", report.wall_time.as_secs_f64());
    Ok(json!({
        "epochs": report.epochs.len() - 1,
        "steps": report.steps,
        "final": metrics_json(report.final_metrics()),
        "wall_time_s": report.wall_time.as_secs_f64(),
        "output_dir": config.output_dir.display().to_string(),
    }))
}

fn run_eval(checkpoint: &Path, data_dir: &Path, batch_size: usize) -> Result<Value, Failure> {
    let ckpt = train::load_checkpoint(checkpoint)?;
    let set = data::load_set(data_dir)?;
    let metrics = train::evaluate_checkpoint(&ckpt, &set, batch_size).map_err(in_file(data_dir))?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(json!({
        "checkpoint": checkpoint.display().to_string(),
        "epoch": ckpt.epoch,
        "metrics": metrics_json(&metrics),
    }))
}

fn run_gradcheck(config_path: Option<&Path>, tolerance: Option<f64>) -> Result<Value, Failure> {
    let mut config = match config_path {
        Some(p) => GradCheckConfig::load(p)?,
        None => GradCheckConfig::default(),
    };
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(Failure {
                code: EXIT_USAGE,
                message: format!("--tolerance must be positive, got {t}"),
                details: None,
            });
        }
        config.tolerance = t;
    }
    let outcome = match config_path {
        Some(p) => train::run_gradcheck(&config).map_err(in_file(p))?,
        None => train::run_gradcheck(&config)?,
    };
    let r = &outcome.report;
    let worst = outcome.worst_parameter.clone().unwrap_or_default();
    println!(
        "checked {} scalars; max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        r.checked, r.max_relative_error, worst, r.worst_analytic, r.worst_numeric
    );
    let summary = json!({
        "max_relative_error": r.max_relative_error,
        "tolerance": config.tolerance,
        "worst_parameter": worst,
        "checked": r.checked,
        "pass": r.pass,
    });
    if !r.pass {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!(
                "gradient check failed: relative error {:.3e} > {:.1e} in parameter `{worst}`",
                r.max_relative_error, config.tolerance
            ),
            details: Some(summary),
        });
    }
    Ok(summary)
}

fn run_flow(
    input: &Path,
    clip_id: usize,
    out: &Path,
    clips: usize,
    block: usize,
    radius: usize,
) -> Result<Value, Failure> {
    let set = data::load_set(input)?;
    let clip = set
        .get(clip_id)
        .ok_or_else(|| Failure::data(format!("{}: no clip with id {clip_id}", input.display())))?;
    let partition = ClipPartition::new(clip.frame_count(), clips).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("--clips: {e}"),
        details: None,
    })?;
    let (prompted, fields) = visual::flow_prompt_video(&clip.frames, partition, block, radius).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("--block-size/--search-radius: {e}"),
        details: None,
    })?;
    fs::create_dir_all(out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;

    let stack = |f: fn(&visual::FlowField) -> &Tensor| -> Result<Tensor, Error> {
        Tensor::stack(&fields.iter().map(|x| f(x).clone()).collect::<Vec<_>>())
    };
    let dx = stack(|f| &f.dx)?;
    let dy = stack(|f| &f.dy)?;
    let write = |name: String, t: &Tensor| -> Result<(), Failure> {
        scpt::write_file(&out.join(name), &ScptTensor::from_tensor(t))?;
        Ok(())
    };
    write(format!("flow_dx_{clip_id}.scpt"), &dx)?;
    write(format!("flow_dy_{clip_id}.scpt"), &dy)?;
    write(format!("prompted_{clip_id}.scpt"), &prompted)?;

    let per_clip: Vec<Value> = fields
        .iter()
        .map(|f| {
            let mag = f.magnitude();
            let max = mag.data().iter().cloned().fold(0.0, f64::max);
            let moving = mag.data().iter().filter(|&&m| m > 0.0).count();
            json!({ "max_magnitude": max, "moving_blocks": moving, "degenerate": f.degenerate })
        })
        .collect();
    for (i, c) in per_clip.iter().enumerate() {
        println!("clip {i}: {c}");
    }
    let info = json!({
        "clip": clip_id,
        "label": clip.labels,
        "block_size": block,
        "search_radius": radius,
        "clips": per_clip,
    });
    let path = out.join(format!("flow_{clip_id}.json"));
    fs::write(&path, serde_json::to_string_pretty(&info).expect("json") + "\n")
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(json!({ "clip": clip_id, "fields": fields.len(), "out": out.display().to_string() }))
}

fn run_ablation(config_path: &Path, l: &[usize]) -> Result<Value, Failure> {
    let config = TrainRunConfig::load(config_path)?;
    let table = train::ablate_experts(&config, l).map_err(in_file(config_path))?;
    print!("{}", table.table());
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| json!({ "l": r.experts, "accuracy": r.accuracy }))
        .collect();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("{failed} of {} ablation rows failed", table.rows.len()),
            details: Some(json!({ "rows": rows })),
        });
    }
    Ok(json!({ "rows": rows }))
}

fn summary_line(command: &str, status: &str, code: u8, extra: Option<&Value>) -> String {
    let mut v = json!({ "command": command, "status": status, "exit_code": code });
    if let (Some(Value::Object(extra)), Value::Object(map)) = (extra, &mut v) {
        for (k, x) in extra {
            map.insert(k.clone(), x.clone());
        }
    }
    v.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            let status = if code == 0 { "ok" } else { "usage-error" };
            println!("{}", summary_line("scp", status, code, None));
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    let result = match &cli.command {
        Command::GenData { spec, out } => gen_data(spec, out),
        Command::Train { config } => run_train(config),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => run_eval(checkpoint, data, *batch_size),
        Command::Gradcheck { config, tolerance } => run_gradcheck(config.as_deref(), *tolerance),
        Command::Flow {
            input,
            clip,
            out,
            clips,
            block_size,
            search_radius,
        } => run_flow(input, *clip, out, *clips, *block_size, *search_radius),
        Command::AblateExperts { config, l } => run_ablation(config, l),
    };
    match result {
        Ok(summary) => {
            println!("{}", summary_line(name, "ok", 0, Some(&summary)));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            let mut details = f.details.unwrap_or_else(|| json!({}));
            details["error"] = Value::from(f.message);
            println!("{}", summary_line(name, "error", f.code, Some(&details)));
            ExitCode::from(f.code)
        }
    }
}

//! `trivd` command line: simulate synthetic scenarios, track them, evaluate
//! the tracks, and verify loss gradients.
//!
//! Exit codes: 0 success, 1 validation failure (arguments, configs, files),
//! 2 tolerance failure (gradient check above threshold). Log level comes
//! from the `TRIVD_LOG` environment variable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use trivd_core::harness::{
    self, generate_scenario, gradcheck_with, Scenario, ScenarioConfig, DEFAULT_IOU_THR,
};
use trivd_core::tracker::{
    outputs_from_csv, outputs_to_csv, run_sequence, TrackOutput, TrackerConfig,
};

#[derive(Parser)]
#[command(
    name = "trivd",
    version,
    about = "Synthetic detection-tracking pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario from a config file.
    Simulate {
        /// Scenario config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output scenario JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tracker over a scenario, writing CSV tracks plus a JSON mirror.
    Track {
        /// Scenario JSON produced by `simulate`.
        #[arg(long)]
        scenario: PathBuf,
        /// Tracker config JSON; defaults apply when omitted.
        #[arg(long)]
        tracker: Option<PathBuf>,
        /// Categories to track, space separated ("person car") or comma
        /// separated for multi-word names ("giant panda,zebra"). Defaults to
        /// every scenario category.
        #[arg(long)]
        prompt: Option<String>,
        /// Output CSV path; the JSON mirror lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a track file against a scenario's ground truth.
    Evaluate {
        #[arg(long)]
        scenario: PathBuf,
        /// Tracks CSV produced by `track`.
        #[arg(long)]
        tracks: PathBuf,
        /// Restrict evaluation to these categories (same syntax as `track`).
        #[arg(long)]
        prompt: Option<String>,
        /// Output metrics report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random fixtures per loss.
        #[arg(long, default_value_t = 50)]
        fixtures: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err)
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) =>
        {
            print!("{}", err);
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            eprint!("{}", err);
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRIVD_LOG", "warn")).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {}", message);
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Track {
            scenario,
            tracker,
            prompt,
            out,
        } => track(&scenario, tracker.as_deref(), prompt.as_deref(), &out),
        Command::Evaluate {
            scenario,
            tracks,
            prompt,
            out,
        } => evaluate(&scenario, &tracks, prompt.as_deref(), &out),
        Command::Gradcheck { seed, fixtures } => gradcheck(seed, fixtures),
    }
}

fn read_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {}", path.display(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("cannot write {}: {}", path.display(), e))
}

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    Scenario::from_json(&read_file(path)?).map_err(|e| e.to_string())
}

/// Comma-separated names when a comma is present (multi-word categories),
/// else whitespace-separated.
fn parse_prompt(prompt: &str) -> Vec<String> {
    let parts: Vec<String> = if prompt.contains(',') {
        prompt.split(',').map(|s| s.trim().to_string()).collect()
    } else {
        prompt.split_whitespace().map(str::to_string).collect()
    };
    parts.into_iter().filter(|s| !s.is_empty()).collect()
}

fn simulate(config_path: &Path, out: &Path) -> Result<u8, String> {
    let config: ScenarioConfig =
        serde_json::from_str(&read_file(config_path)?).map_err(|e| e.to_string())?;
    let scenario = generate_scenario(&config).map_err(|e| e.to_string())?;
    write_file(out, &scenario.to_json().map_err(|e| e.to_string())?)?;
    let detections: usize = scenario.detections.iter().map(|f| f.len()).sum();
    log::info!(
        "scenario seed {}: {} frames, {} trajectories, {} detections",
        config.seed,
        config.frames,
        scenario.gt.trajectories.len(),
        detections
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn track(
    scenario_path: &Path,
    tracker_path: Option<&Path>,
    prompt: Option<&str>,
    out: &Path,
) -> Result<u8, String> {
    let scenario = load_scenario(scenario_path)?;
    let tracker_cfg: TrackerConfig = match tracker_path {
        Some(path) => serde_json::from_str(&read_file(path)?).map_err(|e| e.to_string())?,
        None => TrackerConfig::default(),
    };
    tracker_cfg.validate().map_err(|e| e.to_string())?;
    let subset = prompt.map(parse_prompt);
    let active =
        harness::active_categories(&scenario, subset.as_deref()).map_err(|e| e.to_string())?;
    let detections = harness::filter_detections(&scenario, &active).map_err(|e| e.to_string())?;
    let outputs = run_sequence(&detections, &tracker_cfg).map_err(|e| e.to_string())?;

    write_file(out, &outputs_to_csv(&outputs))?;
    let mirror = out.with_extension("json");
    if mirror != out {
        let rows: Vec<&TrackOutput> = outputs.iter().flatten().collect();
        write_file(
            &mirror,
            &serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())?,
        )?;
    }
    let ids: std::collections::BTreeSet<u64> = outputs.iter().flatten().map(|o| o.id).collect();
    log::info!(
        "tracked {} identities over {} frames",
        ids.len(),
        outputs.len()
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn evaluate(
    scenario_path: &Path,
    tracks_path: &Path,
    prompt: Option<&str>,
    out: &Path,
) -> Result<u8, String> {
    let scenario = load_scenario(scenario_path)?;
    let rows = outputs_from_csv(&read_file(tracks_path)?).map_err(|e| e.to_string())?;
    let frames = scenario.config.frames;
    let mut outputs: Vec<Vec<TrackOutput>> = vec![Vec::new(); frames];
    for row in rows {
        if row.frame >= frames {
            return Err(format!(
                "track row at frame {} outside the scenario's {} frames",
                row.frame, frames
            ));
        }
        outputs[row.frame].push(row);
    }
    let subset = prompt.map(parse_prompt);
    let active =
        harness::active_categories(&scenario, subset.as_deref()).map_err(|e| e.to_string())?;
    let gt = harness::project_gt(&scenario, &active);
    let report = harness::evaluate_outputs(&gt, &outputs, &active, frames, DEFAULT_IOU_THR)
        .map_err(|e| e.to_string())?;
    write_file(
        out,
        &serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
    )?;
    println!(
        "MOTA {:.4}  IDF1 {:.4}  MT {}  ML {}  FP {}  FN {}  IDS {}  AP {}",
        report.mota,
        report.idf1,
        report.mt,
        report.ml,
        report.fp,
        report.fn_count,
        report.ids,
        report
            .ap
            .map_or_else(|| "n/a".to_string(), |ap| format!("{:.4}", ap)),
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn gradcheck(seed: u64, fixtures: usize) -> Result<u8, String> {
    if fixtures == 0 {
        return Err("fixtures must be >= 1".into());
    }
    let summary = gradcheck_with(seed, fixtures).map_err(|e| e.to_string())?;
    for check in &summary.checks {
        println!(
            "{:<28} max_rel_err {:.3e}  max_abs_err {:.3e}  ({} fixtures)",
            check.name, check.max_rel_err, check.max_abs_err, check.fixtures
        );
    }
    if summary.passes() {
        println!("all gradients within {:.0e}", summary.tolerance);
        Ok(0)
    } else {
        eprintln!(
            "gradient check exceeded tolerance {:.0e}",
            summary.tolerance
        );
        Ok(2)
    }
}

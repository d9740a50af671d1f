//! `qkdlink` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or input-schema problems,
//! 3 for failures while running a pipeline.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qkdlink::characterize::{
    characterize_trace, estimate_pc, intensity_stats, read_intensity_csv, QwpTrace, VisibilityCurve,
};
use qkdlink::config::{Config, Resolved};
use qkdlink::distill::{distill, KeyReport};
use qkdlink::optimize::{optimize, Objective, OptimizeResult, ProtocolParams};
use qkdlink::protocol::{run_analytic, run_monte_carlo, SimulationMode};
use qkdlink::tally::{TallySet, TALLY_SCHEMA_VERSION};
use qkdlink::QkdError;

/// Version tag carried by every JSON document the CLI writes.
const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "qkdlink",
    version,
    about = "Decoy-state three-state QKD link simulator and finite-key analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run and distill its key.
    Simulate(SimulateArgs),
    /// Compute the key report for a tally file (JSON or CSV).
    Distill(DistillArgs),
    /// Analyse characterization data.
    Characterize(CharacterizeArgs),
    /// Search protocol parameters maximizing the secret-key rate.
    Optimize(OptimizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mc,
    Analytic,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Override `simulation.pulses`.
    #[arg(long)]
    pulses: Option<u64>,
    /// Override `simulation.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `simulation.mode`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the tallies alone; `.csv` selects CSV, anything else JSON.
    #[arg(long)]
    tallies: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DistillArgs {
    /// Tally file; `.csv` is read as CSV, anything else as JSON.
    tallies: PathBuf,
    /// TOML run configuration supplying source, link and security settings.
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a results-table style summary row to this CSV.
    #[arg(long)]
    summary_csv: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CharacterizeInput {
    /// Polarimeter scan (`slot,state,intensity,angle_deg,value`).
    #[arg(long)]
    qwp: Option<PathBuf>,
    /// Per-slot intensities (`slot,intensity,value`).
    #[arg(long)]
    intensity: Option<PathBuf>,
    /// Interferometer visibilities (`delay_mm,v_cw,v_pulsed`).
    #[arg(long)]
    visibility: Option<PathBuf>,
}

#[derive(Args)]
struct CharacterizeArgs {
    #[command(flatten)]
    input: CharacterizeInput,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// TOML run configuration; the `[optimizer]` table sets the search box.
    config: PathBuf,
    /// Skip golden-section refinement.
    #[arg(long)]
    grid_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the evaluation trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Config,
    tally_schema_version: u32,
    tallies: serde_json::Value,
    report: &'a KeyReport,
}

#[derive(Serialize)]
struct DistillOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Config,
    tallies_path: String,
    report: &'a KeyReport,
}

#[derive(Serialize)]
struct CharacterizeOutput<T: Serialize> {
    schema_version: u32,
    command: &'static str,
    kind: &'static str,
    input_path: String,
    result: T,
}

#[derive(Serialize)]
struct PcResult {
    p_c_star: f64,
    delays: usize,
}

#[derive(Serialize)]
struct OptimizeOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a Config,
    grid_only: bool,
    reference_point: ProtocolParams,
    reference_point_skr_bps: f64,
    result: &'a OptimizeResult,
}

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<QkdError> for Failure {
    fn from(e: QkdError) -> Self {
        let code = match e {
            QkdError::Config(_) | QkdError::Schema { .. } | QkdError::EmptyFeasibleRegion(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Characterize(a) => characterize(a),
        Command::Optimize(a) => optimize_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<(Config, Resolved), Failure> {
    let cfg = Config::load(path)?;
    let resolved = cfg.resolve()?;
    Ok((cfg, resolved))
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, Failure> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(config_error("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure {
                    code: 3,
                    message: e.to_string(),
                })?;
            Ok(pool.install(f))
        }
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(QkdError::from)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).map_err(QkdError::from)?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(QkdError::from)?,
    }
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(n) = a.pulses {
        cfg.simulation.pulses = n;
    }
    if let Some(s) = a.seed {
        cfg.simulation.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.simulation.mode = match m {
            Mode::Mc => SimulationMode::Mc,
            Mode::Analytic => SimulationMode::Analytic,
        };
    }
    let r = cfg.resolve()?;
    let sim = &cfg.simulation;
    let tallies = with_threads(a.threads, || match sim.mode {
        SimulationMode::Mc => run_monte_carlo(&r.profile, &r.link, sim.pulses, sim.seed),
        SimulationMode::Analytic => run_analytic(&r.profile, &r.link, sim.pulses),
    })??;
    let report = distill(&tallies, &r.profile, &r.link, &r.security, r.p_c_star)?;
    if let Some(p) = &a.tallies {
        write_tallies(&tallies, p)?;
    }
    let tallies_json: serde_json::Value =
        serde_json::from_str(&tallies.to_json_string()?).map_err(QkdError::from)?;
    emit(
        &SimulateOutput {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "simulate",
            config: &cfg,
            tally_schema_version: TALLY_SCHEMA_VERSION,
            tallies: tallies_json,
            report: &report,
        },
        a.out.as_deref(),
    )
}

fn write_tallies(t: &TallySet, path: &Path) -> Result<(), Failure> {
    if is_csv(path) {
        let f = File::create(path).map_err(QkdError::from)?;
        t.write_csv(f)?;
    } else {
        let mut s = t.to_json_string()?;
        s.push('\n');
        std::fs::write(path, s).map_err(QkdError::from)?;
    }
    Ok(())
}

fn read_tallies(path: &Path) -> Result<TallySet, Failure> {
    let f = File::open(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let t = if is_csv(path) {
        TallySet::read_csv(BufReader::new(f))?
    } else {
        let text = std::io::read_to_string(f).map_err(QkdError::from)?;
        TallySet::from_json_str(&text).map_err(|e| match e {
            QkdError::Json(j) => QkdError::Schema {
                row: j.line(),
                message: j.to_string(),
            },
            other => other,
        })?
    };
    Ok(t)
}

fn distill_cmd(a: DistillArgs) -> Result<(), Failure> {
    let (cfg, r) = load_config(&a.config)?;
    let t = read_tallies(&a.tallies)?;
    let report = distill(&t, &r.profile, &r.link, &r.security, r.p_c_star)?;
    if let Some(p) = &a.summary_csv {
        let exists = p.exists();
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(QkdError::from)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(!exists)
            .from_writer(f);
        w.serialize(report.summary(&r.link))
            .map_err(QkdError::from)?;
        w.flush().map_err(QkdError::from)?;
    }
    emit(
        &DistillOutput {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "distill",
            config: &cfg,
            tallies_path: a.tallies.display().to_string(),
            report: &report,
        },
        a.out.as_deref(),
    )
}

fn open_input(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))
}

fn characterize(a: CharacterizeArgs) -> Result<(), Failure> {
    let out = a.out.as_deref();
    let wrap = |kind, path: &Path| (kind, path.display().to_string());
    if let Some(p) = &a.input.qwp {
        let trace = QwpTrace::read_csv(open_input(p)?)?;
        let report = characterize_trace(&trace)?;
        let (kind, input_path) = wrap("polarization", p);
        emit(
            &CharacterizeOutput {
                schema_version: OUTPUT_SCHEMA_VERSION,
                command: "characterize",
                kind,
                input_path,
                result: report,
            },
            out,
        )
    } else if let Some(p) = &a.input.intensity {
        let stats = intensity_stats(&read_intensity_csv(open_input(p)?)?)?;
        let (kind, input_path) = wrap("intensity", p);
        emit(
            &CharacterizeOutput {
                schema_version: OUTPUT_SCHEMA_VERSION,
                command: "characterize",
                kind,
                input_path,
                result: stats,
            },
            out,
        )
    } else if let Some(p) = &a.input.visibility {
        let curve = VisibilityCurve::read_csv(open_input(p)?)?;
        let result = PcResult {
            p_c_star: estimate_pc(&curve)?,
            delays: curve.delays_mm.len(),
        };
        let (kind, input_path) = wrap("phase_coherence", p);
        emit(
            &CharacterizeOutput {
                schema_version: OUTPUT_SCHEMA_VERSION,
                command: "characterize",
                kind,
                input_path,
                result,
            },
            out,
        )
    } else {
        Err(config_error(
            "one of --qwp, --intensity, --visibility is required".into(),
        ))
    }
}

fn optimize_cmd(a: OptimizeArgs) -> Result<(), Failure> {
    let (cfg, r) = load_config(&a.config)?;
    let objective = Objective {
        imperfections: &r.profile,
        model: &r.link,
        security: &r.security,
        block_bits: r.block_bits as f64,
        p_c_star: r.p_c_star,
    };
    let result = with_threads(a.threads, || {
        optimize(&objective, &cfg.optimizer, a.grid_only)
    })??;
    if let Some(p) = &a.trace {
        let f = File::create(p).map_err(QkdError::from)?;
        let mut w = csv::Writer::from_writer(f);
        for point in &result.trace {
            w.serialize(point).map_err(QkdError::from)?;
        }
        w.flush().map_err(QkdError::from)?;
    }
    let reference_point_skr_bps = objective.skr(&ProtocolParams::REFERENCE);
    emit(
        &OptimizeOutput {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "optimize",
            config: &cfg,
            grid_only: a.grid_only,
            reference_point: ProtocolParams::REFERENCE,
            reference_point_skr_bps,
            result: &result,
        },
        a.out.as_deref(),
    )
}

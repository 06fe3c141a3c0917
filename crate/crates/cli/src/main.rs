use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use granaudit::audit::{self, AuditConfig, AuditError, RunOptions, StageStatus};
use granaudit::synthgen::{self, ScenarioConfig};
use granaudit::{Error, ErrorKind, FeatureSchema};

#[derive(Parser)]
#[command(name = "granaudit", version, about = "Subgroup disparity audits for clinical risk scores")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a scenario file or preset.
    Synth {
        /// Scenario TOML.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in scenario: `standard` (26 groups, compact schema).
        #[arg(long)]
        preset: Option<String>,
        /// Patient scale for the preset.
        #[arg(long, default_value_t = 0.02)]
        scale: f64,
        /// Minimum patients per group for the preset.
        #[arg(long, default_value_t = 100)]
        min_patients: usize,
        /// `standard`, `compact`, or a schema file (scenario files only).
        #[arg(long, default_value = "compact")]
        schema: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full audit described by a config file.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Rerun every stage.
        #[arg(long)]
        force: bool,
    },
    /// Print figure data (performance, variation, variation_downsampled,
    /// outcome_freqs) from a finished report.
    Figure {
        id: String,
        #[arg(long)]
        config: PathBuf,
        /// Model name for per-model figures (default: first model).
        #[arg(long)]
        model: Option<String>,
    },
    /// Check a config and its inputs.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(kind: ErrorKind) -> ExitCode {
    ExitCode::from(match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    })
}

fn fail(stage: &str, e: Error) -> ExitCode {
    eprintln!("granaudit: stage {stage}: {e}");
    exit_code(e.kind())
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<AuditConfig, Error> {
    let mut cfg = AuditConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn synth(
    config: Option<PathBuf>,
    preset: Option<String>,
    scale: f64,
    min_patients: usize,
    schema: &str,
    seed: Option<u64>,
    out: &PathBuf,
) -> Result<(), Error> {
    let (mut scenario, schema) = match (config, preset.as_deref()) {
        (Some(p), _) => {
            let schema = match schema {
                "standard" => FeatureSchema::standard(),
                "compact" => FeatureSchema::standard().select(&synthgen::COMPACT_FEATURES)?,
                p => FeatureSchema::load(p)?,
            };
            (ScenarioConfig::load(p)?, std::sync::Arc::new(schema))
        }
        (None, Some("standard")) => {
            let (cfg, schema, _) = synthgen::standard_scenario(seed.unwrap_or(0), scale, min_patients);
            (cfg, schema)
        }
        (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        (None, None) => return Err(Error::Config("give --config or --preset".into())),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    audit::write_scenario(&scenario, schema, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("granaudit: cannot set up {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match cli.command {
        Command::Synth { config, preset, scale, min_patients, schema, seed, out } => {
            match synth(config, preset, scale, min_patients, &schema, seed, &out) {
                Ok(()) => {
                    eprintln!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail("synth", e),
            }
        }
        Command::Audit { config, seed, force } => {
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(e) => return fail("config", e),
            };
            match audit::run_audit(&cfg, &RunOptions { force }) {
                Ok(summary) => {
                    for s in &summary.stages {
                        let what = match s.status {
                            StageStatus::Ran => format!("ran in {:.2}s", s.seconds),
                            StageStatus::Skipped => "up to date".to_string(),
                        };
                        eprintln!("{:<28} {what}", s.name);
                    }
                    eprintln!("report: {}", summary.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(AuditError { stage, source }) => fail(&stage, source),
            }
        }
        Command::Figure { id, config, model } => {
            let cfg = match load_config(&config, None) {
                Ok(c) => c,
                Err(e) => return fail("config", e),
            };
            let model = model.or_else(|| cfg.models.first().map(|m| m.name.clone()));
            match audit::emit_figure(&cfg.output_path(), &id, model.as_deref()) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail("figure", e),
            }
        }
        Command::Validate { config } => {
            let cfg = match load_config(&config, None) {
                Ok(c) => c,
                Err(e) => return fail("config", e),
            };
            match audit::validate(&cfg) {
                Ok(notes) => {
                    for n in notes {
                        println!("{n}");
                    }
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Err(e) => fail("validate", e),
            }
        }
    }
}

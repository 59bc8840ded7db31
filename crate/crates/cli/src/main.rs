//! `offload`: run, compare and replay offloading scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use offload_core::profiling::{read_device_trace, read_net_trace, ProfilingError};
use offload_core::sim::compare::DEFAULT_SEEDS;
use offload_core::sim::config::{ConfigError, DynamicVariant, ScenarioConfig, Scheme};
use offload_core::sim::{compare_schemes, run_replay, run_scenario, MetricsReport, ReplayInputs};

const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Parser, Debug)]
#[command(name = "offload", version, about = "Utility- and consensus-based task offloading simulator")]
struct Cli {
    /// Print the paths of written files.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its metrics, decisions and summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the scheme, e.g. fixed:e1 or dyna_both.
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Run several schemes over several seeds and tabulate the results.
    Compare {
        /// Path to the scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated schemes; defaults to the three fixed and three dynamic schemes.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<String>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long, default_value = "out/compare")]
        out: PathBuf,
    },
    /// Run the scheduler against recorded device and network traces.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Device trace CSV: t,edge_id,cpu_max,cpu_used,mem_max,mem_used
        #[arg(long)]
        device_trace: PathBuf,
        /// Network trace CSV: t,robot_id,edge_id,rssi
        #[arg(long)]
        net_trace: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Path to the scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out/run")]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) | Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// 1-based line of byte offset `at` in `text`.
fn line_of(text: &str, at: usize) -> usize {
    text[..at.min(text.len())].matches('\n').count() + 1
}

/// Best-effort line of a dotted field path such as `edges[1].base_cpu`.
fn field_line(text: &str, field: &str) -> Option<usize> {
    let mut segments: Vec<&str> = field.split('.').collect();
    let key = segments.pop()?;
    let (key, _) = key.split_once('[').unwrap_or((key, ""));
    // Narrow the search to the addressed table, if any.
    let mut start = 0;
    let mut end = text.len();
    if let Some(table) = segments.last() {
        let (name, index) = match table.split_once('[') {
            Some((n, i)) => (n, i.trim_end_matches(']').parse::<usize>().ok()),
            None => (*table, None),
        };
        let header = match index {
            Some(_) => format!("[[{name}]]"),
            None => format!("[{name}]"),
        };
        let mut offset = 0;
        let mut found = None;
        let mut seen = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if found.is_some() && trimmed.starts_with('[') {
                end = offset;
                break;
            }
            if trimmed == header {
                if index.map_or(true, |i| i == seen) {
                    found = Some(offset + line.len());
                }
                seen += 1;
            }
            offset += line.len();
        }
        start = found?;
    } else {
        // top-level keys precede the first table header
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            if line.trim_start().starts_with('[') {
                end = offset;
                break;
            }
            offset += line.len();
        }
    }
    let mut offset = start;
    for line in text[start..end].split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(line_of(text, offset));
            }
        }
        offset += line.len();
    }
    Some(line_of(text, start.saturating_sub(1)))
}

fn config_error(path: &Path, text: &str, e: &ConfigError) -> CliError {
    let file = path.display();
    let line = match e {
        ConfigError::Parse(p) => p.span().map(|s| line_of(text, s.start)),
        ConfigError::Invalid { field, .. } => field_line(text, field),
        ConfigError::Serialize(_) => None,
    };
    let message = match e {
        ConfigError::Parse(p) => p.message().to_owned(),
        other => other.to_string(),
    };
    match line {
        Some(l) => CliError::Validation(format!("{file}:{l}: {message}")),
        None => CliError::Validation(format!("{file}: {message}")),
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let cfg = ScenarioConfig::from_toml_str(&text).map_err(|e| config_error(path, &text, &e))?;
    cfg.validate().map_err(|e| config_error(path, &text, &e))?;
    Ok(cfg)
}

fn valid_scheme_names(cfg: &ScenarioConfig) -> String {
    let mut names: Vec<String> = cfg.edge_ids().iter().map(|e| format!("fixed_{e}")).collect();
    names.extend(DynamicVariant::ALL.iter().map(|v| format!("dyna_{}", v.name())));
    names.join(", ")
}

fn parse_scheme(name: &str, cfg: &ScenarioConfig) -> Result<Scheme, CliError> {
    let scheme: Scheme = name.parse().map_err(|_| {
        CliError::Usage(format!(
            "unknown scheme `{name}`; valid schemes: {}",
            valid_scheme_names(cfg)
        ))
    })?;
    if let Scheme::Fixed(e) = &scheme {
        if !cfg.edge_ids().contains(e) {
            return Err(CliError::Usage(format!(
                "unknown scheme `{name}`: no edge `{e}`; valid schemes: {}",
                valid_scheme_names(cfg)
            )));
        }
    }
    Ok(scheme)
}

fn write_resolved(cfg: &ScenarioConfig, out: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let text = cfg
        .to_toml_string()
        .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
    let path = out.join(RESOLVED_CONFIG);
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn finish_run(report: &MetricsReport, cfg: &ScenarioConfig, out: &Path, verbose: bool) -> Result<(), CliError> {
    let mut written = report.write_to(out).map_err(|e| io_error(out, e))?;
    written.push(write_resolved(cfg, out)?);
    print!("{}", report.summary_text());
    if verbose {
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    if !report.messages.conserved() {
        return Err(CliError::Runtime(format!(
            "message accounting does not balance: {:?}",
            report.messages
        )));
    }
    Ok(())
}

fn trace_error(e: ProfilingError) -> CliError {
    match e {
        ProfilingError::Io { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Run { common, scheme } => {
            let mut cfg = load_config(&common.config)?;
            if let Some(name) = scheme {
                cfg = cfg.with_scheme(parse_scheme(&name, &cfg)?);
            }
            if let Some(seed) = common.seed {
                cfg = cfg.with_seed(seed);
            }
            let report = run_scenario(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
            finish_run(&report, &cfg, &common.out, verbose)
        }
        Command::Replay {
            common,
            device_trace,
            net_trace,
        } => {
            let mut cfg = load_config(&common.config)?;
            if let Some(seed) = common.seed {
                cfg = cfg.with_seed(seed);
            }
            let inputs = ReplayInputs {
                devices: read_device_trace(&device_trace).map_err(trace_error)?,
                links: read_net_trace(&net_trace).map_err(trace_error)?,
            };
            let report = run_replay(&cfg, &inputs).map_err(|e| CliError::Runtime(e.to_string()))?;
            finish_run(&report, &cfg, &common.out, verbose)
        }
        Command::Compare {
            config,
            schemes,
            seeds,
            out,
        } => {
            let cfg = load_config(&config)?;
            let names = schemes.unwrap_or_else(|| {
                let mut v: Vec<String> = cfg.edge_ids().iter().map(|e| format!("fixed_{e}")).collect();
                v.extend(
                    [DynamicVariant::Cpu, DynamicVariant::Mem, DynamicVariant::Both]
                        .iter()
                        .map(|d| format!("dyna_{}", d.name())),
                );
                v
            });
            let schemes = names
                .iter()
                .map(|n| parse_scheme(n, &cfg))
                .collect::<Result<Vec<_>, _>>()?;
            if schemes.len() < 2 {
                return Err(CliError::Usage(format!(
                    "compare needs at least two schemes; valid schemes: {}",
                    valid_scheme_names(&cfg)
                )));
            }
            let seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            if seeds.is_empty() {
                return Err(CliError::Usage("at least one seed is required".into()));
            }
            let cmp = compare_schemes(&cfg, &schemes, &seeds).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let mut written = vec![write_resolved(&cfg, &out)?];
            for (name, body) in [
                ("compare_runs.csv", cmp.runs_csv()),
                ("compare_deltas.csv", cmp.deltas_csv()),
                ("compare.txt", cmp.table()),
                ("compare.json", cmp.summary_json()),
            ] {
                let path = out.join(name);
                std::fs::write(&path, body).map_err(|e| io_error(&path, e))?;
                written.push(path);
            }
            print!("{}", cmp.table());
            if verbose {
                for p in written {
                    println!("wrote {}", p.display());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

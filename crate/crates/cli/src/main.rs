//! Batch front end: trace generation, layout planning, simulation, sharding
//! analytics and the exact-oracle gap report.

mod config;

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moe_relayout::cost::{comm_volume_ratio, memory_footprint, overlap_min_tokens};
use moe_relayout::oracle::compare_with_greedy;
use moe_relayout::planner::aggregate_history;
use moe_relayout::sim::{balance_metrics, parse_schedulers, plan_trace, run_simulation, SimSetup};
use moe_relayout::trace::{generate_trace, load_trace, save_trace};
use moe_relayout::util::to_json_sig9;
use moe_relayout::{RoutingMatrix, TraceGenSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::{resolve_path, RunConfig};

const EXIT_CONFIG: u8 = 3;
const EXIT_PRECONDITION: u8 = 4;

/// Failure split by cause so scripts can tell bad input files from
/// requests the models reject.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Precondition(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        CliError::Precondition(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Precondition(_) => EXIT_PRECONDITION,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "input error: {m}"),
            CliError::Precondition(m) => write!(f, "precondition failed: {m}"),
        }
    }
}

impl From<moe_relayout::Error> for CliError {
    fn from(e: moe_relayout::Error) -> Self {
        use moe_relayout::Error as E;
        match e {
            E::MalformedRecord { .. }
            | E::DimensionMismatch { .. }
            | E::NegativeCount { .. }
            | E::DuplicateRecord { .. }
            | E::Io(_) => CliError::Config(e.to_string()),
            other => CliError::Precondition(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "moe-relayout",
    version,
    about = "Load-adaptive MoE expert re-layout planner and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic routing trace from a generator spec.
    GenerateTrace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the generator file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plan layouts for every iteration that has routing history.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a trace under one or more schedulers.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "laer,static_ep,even_replication")]
        schedulers: String,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Communication volume, memory footprint and overlap threshold.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Bandwidth for the overlap threshold; defaults to the inter-node link.
        #[arg(long)]
        net_bandwidth: Option<f64>,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the heuristic planner with the exact optimum on a tiny instance.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moe-relayout: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateTrace { spec, out, seed } => generate(&spec, &out, seed),
        Command::Plan {
            config,
            trace,
            out,
            seed,
        } => plan(&config, trace, out, seed),
        Command::Simulate {
            config,
            trace,
            schedulers,
            out,
            seed,
        } => simulate(&config, trace, &schedulers, out, seed),
        Command::Analyze {
            config,
            net_bandwidth,
            out,
        } => analyze(&config, net_bandwidth, out),
        Command::Oracle {
            config,
            instance,
            out,
            seed,
        } => oracle(&config, &instance, out, seed),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&to_json_sig9(value)?)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::config(format!("{}: {e}", spec_path.display())))?;
    let mut spec: TraceGenSpec =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = generate_trace(&spec)?;
    save_trace(&records, out)?;
    Ok(())
}

const ITERATION_ZERO_NOTE: &str = "layouts start at the second observed iteration of each layer; the first runs on the default even-replication layout because no routing history exists yet";

fn plan(config: &Path, trace: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = cfg.model()?;
    let search = cfg.search(seed)?;
    let trace_path = resolve_path(trace, &cfg.paths.trace, "trace")?;
    let out_dir = resolve_path(out, &cfg.paths.out, "output")?;
    let records = load_trace(&trace_path)?;
    check_experts(&records, model.n_experts)?;
    let planned = plan_trace(&records, &cfg.topology, &cfg.cost, model.capacity, &search)?;

    let mut layouts = Vec::with_capacity(planned.len());
    for p in &planned {
        // Re-check what is about to be emitted against the history it came from.
        let history: Vec<RoutingMatrix> = records
            .iter()
            .filter(|r| r.layer == p.layer && r.iteration < p.iteration)
            .map(|r| r.routing.clone())
            .collect();
        let aggregated = aggregate_history(&history, search.history)?;
        p.choice.layout.validate()?;
        p.choice.plan.validate(&aggregated, &p.choice.layout)?;
        layouts.push(json!({
            "iteration": p.iteration,
            "layer": p.layer,
            "replicas": p.choice.replicas,
            "layout": p.choice.layout,
            "plan": p.choice.plan,
            "t_comm": p.choice.cost.t_comm,
            "t_comp": p.choice.cost.t_comp,
            "t_total": p.choice.cost.t_total,
        }));
    }
    fs::create_dir_all(&out_dir)?;
    let doc = json!({
        "note": ITERATION_ZERO_NOTE,
        "n_devices": cfg.topology.n_devices(),
        "n_experts": model.n_experts,
        "capacity": model.capacity,
        "layouts": layouts,
    });
    write_json(&doc, Some(&out_dir.join("plan.json")))
}

fn check_experts(records: &[moe_relayout::TraceRecord], n_experts: usize) -> Result<(), CliError> {
    match records.iter().find(|r| r.routing.n_experts() != n_experts) {
        Some(r) => Err(CliError::precondition(format!(
            "trace record (iter {}, layer {}) has {} experts, config says {n_experts}",
            r.iteration,
            r.layer,
            r.routing.n_experts()
        ))),
        None => Ok(()),
    }
}

fn simulate(
    config: &Path,
    trace: Option<PathBuf>,
    schedulers: &str,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = cfg.model()?;
    let search = cfg.search(seed)?;
    let kinds = parse_schedulers(schedulers)?;
    let trace_path = resolve_path(trace, &cfg.paths.trace, "trace")?;
    let out_dir = resolve_path(out, &cfg.paths.out, "output")?;
    let records = load_trace(&trace_path)?;
    check_experts(&records, model.n_experts)?;

    let setup = SimSetup {
        topology: &cfg.topology,
        params: &cfg.cost,
        capacity: model.capacity,
        search: &search,
        budget: &cfg.oracle,
    };
    let report = run_simulation(&records, &setup, &kinds)?;
    let balance = balance_metrics(&report)?;
    fs::create_dir_all(&out_dir)?;
    let doc = json!({
        "n_devices": report.n_devices,
        "n_experts": report.n_experts,
        "capacity": report.capacity,
        "seed": search.seed,
        "summaries": report.summaries,
        "speedups": report.speedups,
        "balance": balance,
        "records": report.records,
    });
    write_json(&doc, Some(&out_dir.join("report.json")))?;
    let mut csv = BufWriter::new(fs::File::create(out_dir.join("report.csv"))?);
    report.write_csv(&mut csv)?;
    csv.flush()?;
    Ok(())
}

fn analyze(config: &Path, net_bandwidth: Option<f64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let analysis = cfg
        .analysis
        .as_ref()
        .ok_or_else(|| CliError::config("config has no analysis block"))?;
    let bw = net_bandwidth.unwrap_or(cfg.topology.b_inter);
    if !(bw.is_finite() && bw > 0.0) {
        return Err(CliError::precondition(format!(
            "network bandwidth must be positive, got {bw}"
        )));
    }
    let volumes = comm_volume_ratio(analysis)?;
    let memory = memory_footprint(analysis)?;
    let threshold = overlap_min_tokens(analysis, bw, cfg.cost.b_comp)?;
    let doc = json!({
        "comm_volume": volumes,
        "memory": memory,
        "overlap": {
            "net_bandwidth": bw,
            "b_comp": cfg.cost.b_comp,
            "min_tokens_per_device": threshold,
            "tokens_per_device": analysis.tokens_per_device,
            "overlapped": analysis.tokens_per_device >= threshold,
        },
    });
    write_json(&doc, out.as_deref())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Instance {
    #[serde(rename = "R")]
    routing: RoutingMatrix,
}

fn oracle(config: &Path, instance: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = cfg.model()?;
    let search = cfg.search(seed)?;
    let text = fs::read_to_string(instance).map_err(|e| CliError::config(format!("{}: {e}", instance.display())))?;
    let inst: Instance =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", instance.display())))?;
    if inst.routing.n_experts() != model.n_experts {
        return Err(CliError::precondition(format!(
            "instance has {} experts, config says {}",
            inst.routing.n_experts(),
            model.n_experts
        )));
    }
    let report = compare_with_greedy(
        &inst.routing,
        &cfg.topology,
        &cfg.cost,
        model.capacity,
        &search,
        &cfg.oracle,
    )?;
    let doc = json!({
        "instance": inst,
        "greedy_cost": report.greedy_cost,
        "exact_cost": report.exact_cost,
        "gap": report.gap,
        "greedy_layout": report.greedy_layout,
        "exact_layout": report.exact.layout,
        "exact_plan": report.exact.plan,
        "budget_exceeded": report.exact.budget_exceeded,
        "coarsened": report.exact.coarsened,
        "layouts_enumerated": report.exact.layouts_enumerated,
        "layouts_solved": report.exact.layouts_solved,
    });
    write_json(&doc, out.as_deref())
}

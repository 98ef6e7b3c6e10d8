//! Trace-driven simulation of MoE-layer time under different schedulers.
//!
//! Every (iteration, layer) record of a trace is routed with
//! [`lite_routing`] through the layout the scheduler has active at that
//! point and scored with [`time_cost`]. The adaptive scheduler obeys a
//! one-iteration lag: its layout for iteration `t` is planned only from the
//! routing matrices of the same layer at iterations before `t`.
//!
//! Simulated time is the cost objective, not wall-clock time, so speedups are
//! ratios of objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{time_cost, CostParams};
use crate::error::{Error, Result};
use crate::oracle::{solve_exact, OracleBudget};
use crate::planner::{
    even_replication_layout, lite_routing, plan_layout, static_ep_layout, ExpertLayout, LayoutChoice, LayoutSearch,
};
use crate::topology::Topology;
use crate::trace::{generate_trace, RoutingMatrix, TraceGenSpec, TraceRecord};
use crate::util::{derive_seed, percentile, round_sig9};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Load-adaptive re-layout planned from the previous iterations.
    #[serde(rename = "laer")]
    Adaptive,
    StaticEp,
    EvenReplication,
    /// Exact layout for the current iteration's routing. Clairvoyant, so not
    /// causal; only a reference bound on tiny instances.
    OracleLayout,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Adaptive,
        SchedulerKind::StaticEp,
        SchedulerKind::EvenReplication,
        SchedulerKind::OracleLayout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Adaptive => "laer",
            SchedulerKind::StaticEp => "static_ep",
            SchedulerKind::EvenReplication => "even_replication",
            SchedulerKind::OracleLayout => "oracle_layout",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheduler {s:?}")))
    }
}

/// Parses a comma-separated scheduler list, rejecting empty lists and
/// duplicates.
pub fn parse_schedulers(list: &str) -> Result<Vec<SchedulerKind>> {
    let mut out: Vec<SchedulerKind> = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let k: SchedulerKind = part.parse()?;
        if out.contains(&k) {
            return Err(Error::invalid(format!("scheduler {k} listed twice")));
        }
        out.push(k);
    }
    if out.is_empty() {
        return Err(Error::Empty("scheduler list"));
    }
    Ok(out)
}

/// Cost of one (iteration, layer) under one scheduler.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRecord {
    pub iter: u32,
    pub layer: u32,
    pub scheduler: SchedulerKind,
    pub t_comm: f64,
    pub t_comp: f64,
    pub t_total: f64,
    pub max_recv: u64,
    /// Total tokens of the record divided by the device count.
    pub ideal: f64,
}

impl SimRecord {
    /// `max_recv / ideal`, defined as 1 for an empty record.
    pub fn balance_ratio(&self) -> f64 {
        if self.ideal > 0.0 {
            self.max_recv as f64 / self.ideal
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerSummary {
    pub scheduler: SchedulerKind,
    /// Mean over iterations of the per-iteration sum over layers.
    pub mean_iteration_time: f64,
    pub mean_t_comm: f64,
    pub mean_t_comp: f64,
    pub mean_balance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Speedup {
    pub scheduler: SchedulerKind,
    pub baseline: SchedulerKind,
    /// `mean_iteration_time(baseline) / mean_iteration_time(scheduler)`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub n_devices: usize,
    pub n_experts: usize,
    pub capacity: usize,
    pub summaries: Vec<SchedulerSummary>,
    pub speedups: Vec<Speedup>,
    pub records: Vec<SimRecord>,
}

impl SimReport {
    pub fn summary(&self, scheduler: SchedulerKind) -> Option<&SchedulerSummary> {
        self.summaries.iter().find(|s| s.scheduler == scheduler)
    }

    pub fn speedup(&self, scheduler: SchedulerKind, baseline: SchedulerKind) -> Option<f64> {
        self.speedups
            .iter()
            .find(|s| s.scheduler == scheduler && s.baseline == baseline)
            .map(|s| s.speedup)
    }

    pub fn records_for(&self, scheduler: SchedulerKind) -> impl Iterator<Item = &SimRecord> {
        self.records.iter().filter(move |r| r.scheduler == scheduler)
    }

    /// Per-record time series as CSV, floats at 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,layer,scheduler,t_comm,t_comp,t_total,max_recv,ideal")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.layer,
                r.scheduler,
                round_sig9(r.t_comm),
                round_sig9(r.t_comp),
                round_sig9(r.t_total),
                r.max_recv,
                round_sig9(r.ideal)
            )?;
        }
        Ok(())
    }
}

/// Seed used for the layout search of `layer`. Fixed across iterations, so a
/// stationary trace yields a stationary layout.
pub fn layer_search(search: &LayoutSearch, layer: u32) -> LayoutSearch {
    LayoutSearch {
        seed: derive_seed(search.seed, &[u64::from(layer)]),
        ..search.clone()
    }
}

/// Records grouped by layer, each in ascending iteration order.
struct LayerSeries<'a> {
    layers: BTreeMap<u32, Vec<(u32, &'a RoutingMatrix)>>,
    n_devices: usize,
    n_experts: usize,
}

fn group_trace<'a>(trace: &'a [TraceRecord], topology: &Topology) -> Result<LayerSeries<'a>> {
    let first = trace.first().ok_or(Error::Empty("trace"))?;
    let (n, e) = (first.routing.n_devices(), first.routing.n_experts());
    if n != topology.n_devices() {
        return Err(Error::ShapeMismatch(format!(
            "trace has {n} devices, topology {}",
            topology.n_devices()
        )));
    }
    let mut layers: BTreeMap<u32, Vec<(u32, &RoutingMatrix)>> = BTreeMap::new();
    for r in trace {
        if (r.routing.n_devices(), r.routing.n_experts()) != (n, e) {
            return Err(Error::ShapeMismatch(format!(
                "record (iter {}, layer {}) is {}x{}, expected {n}x{e}",
                r.iteration,
                r.layer,
                r.routing.n_devices(),
                r.routing.n_experts()
            )));
        }
        layers.entry(r.layer).or_default().push((r.iteration, &r.routing));
    }
    for (layer, series) in layers.iter_mut() {
        series.sort_by_key(|&(it, _)| it);
        if let Some(w) = series.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateRecord {
                line: 0,
                iter: w[0].0,
                layer: *layer,
            });
        }
    }
    Ok(LayerSeries {
        layers,
        n_devices: n,
        n_experts: e,
    })
}

/// Everything a simulation needs besides the trace.
#[derive(Debug, Clone)]
pub struct SimSetup<'a> {
    pub topology: &'a Topology,
    pub params: &'a CostParams,
    pub capacity: usize,
    pub search: &'a LayoutSearch,
    pub budget: &'a OracleBudget,
}

/// Simulates every scheduler in `schedulers` over `trace`.
pub fn run_simulation(trace: &[TraceRecord], setup: &SimSetup<'_>, schedulers: &[SchedulerKind]) -> Result<SimReport> {
    let SimSetup {
        topology,
        params,
        capacity,
        search,
        budget,
    } = *setup;
    topology.validate()?;
    params.validate()?;
    search.validate()?;
    if schedulers.is_empty() {
        return Err(Error::Empty("scheduler list"));
    }
    let series = group_trace(trace, topology)?;
    let (n, e) = (series.n_devices, series.n_experts);
    let static_layout = static_ep_layout(n, e, capacity)?;
    let even_layout = even_replication_layout(topology, e, capacity)?;

    let mut records = Vec::with_capacity(trace.len() * schedulers.len());
    for &kind in schedulers {
        for (&layer, rows) in &series.layers {
            let search = layer_search(search, layer);
            let history: Vec<RoutingMatrix> = rows.iter().map(|&(_, m)| m.clone()).collect();
            for (t, &(iter, routing)) in rows.iter().enumerate() {
                let planned;
                let layout: &ExpertLayout = match kind {
                    SchedulerKind::StaticEp => &static_layout,
                    SchedulerKind::EvenReplication => &even_layout,
                    SchedulerKind::Adaptive if t == 0 => &even_layout,
                    SchedulerKind::Adaptive => {
                        planned = plan_layout(&history[..t], &search, topology, params, capacity)?.layout;
                        &planned
                    }
                    SchedulerKind::OracleLayout => {
                        planned = solve_exact(routing, topology, params, capacity, budget)?.layout;
                        &planned
                    }
                };
                let plan = lite_routing(routing, layout, topology)?;
                plan.validate(routing, layout)
                    .map_err(|err| Error::InvariantViolation(format!("{kind} at iter {iter}, layer {layer}: {err}")))?;
                let cost = time_cost(&plan, topology, params)?;
                records.push(SimRecord {
                    iter,
                    layer,
                    scheduler: kind,
                    t_comm: cost.t_comm,
                    t_comp: cost.t_comp,
                    t_total: cost.t_total,
                    max_recv: cost.max_recv_tokens(),
                    ideal: routing.total() as f64 / n as f64,
                });
            }
        }
    }
    records.sort_by_key(|r| (r.iter, r.layer, schedulers.iter().position(|&k| k == r.scheduler)));

    let summaries: Vec<SchedulerSummary> = schedulers.iter().map(|&k| summarise(&records, k)).collect();
    let mut speedups = Vec::new();
    for a in &summaries {
        for b in &summaries {
            let speedup = if a.scheduler == b.scheduler {
                1.0
            } else if a.mean_iteration_time > 0.0 {
                b.mean_iteration_time / a.mean_iteration_time
            } else if b.mean_iteration_time > 0.0 {
                f64::INFINITY
            } else {
                1.0
            };
            speedups.push(Speedup {
                scheduler: a.scheduler,
                baseline: b.scheduler,
                speedup,
            });
        }
    }
    Ok(SimReport {
        n_devices: n,
        n_experts: e,
        capacity,
        summaries,
        speedups,
        records,
    })
}

fn summarise(records: &[SimRecord], kind: SchedulerKind) -> SchedulerSummary {
    let mine: Vec<&SimRecord> = records.iter().filter(|r| r.scheduler == kind).collect();
    let mut per_iter: BTreeMap<u32, f64> = BTreeMap::new();
    for r in &mine {
        *per_iter.entry(r.iter).or_default() += r.t_total;
    }
    let count = mine.len().max(1) as f64;
    SchedulerSummary {
        scheduler: kind,
        mean_iteration_time: per_iter.values().sum::<f64>() / per_iter.len().max(1) as f64,
        mean_t_comm: mine.iter().map(|r| r.t_comm).sum::<f64>() / count,
        mean_t_comp: mine.iter().map(|r| r.t_comp).sum::<f64>() / count,
        mean_balance_ratio: mine.iter().map(|r| r.balance_ratio()).sum::<f64>() / count,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceMetrics {
    pub scheduler: SchedulerKind,
    pub mean: f64,
    pub p95: f64,
}

/// Mean and 95th percentile of `max_recv / ideal` per scheduler.
pub fn balance_metrics(report: &SimReport) -> Result<Vec<BalanceMetrics>> {
    if report.records.is_empty() {
        return Err(Error::Empty("simulation report"));
    }
    Ok(report
        .summaries
        .iter()
        .map(|s| {
            let ratios: Vec<f64> = report.records_for(s.scheduler).map(SimRecord::balance_ratio).collect();
            BalanceMetrics {
                scheduler: s.scheduler,
                mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
                p95: percentile(&ratios, 0.95),
            }
        })
        .collect())
}

/// Layout the adaptive scheduler would apply at `iteration` of `layer`.
#[derive(Debug, Clone)]
pub struct PlannedLayout {
    pub iteration: u32,
    pub layer: u32,
    pub choice: LayoutChoice,
}

/// Plans the adaptive layout for every iteration that has history: for a
/// layer observed at iterations `t_0 < ... < t_m`, layouts are produced for
/// `t_1, ..., t_m` and `t_m + 1`. The first observed iteration of each layer
/// runs on the even-replication default.
pub fn plan_trace(
    trace: &[TraceRecord],
    topology: &Topology,
    params: &CostParams,
    capacity: usize,
    search: &LayoutSearch,
) -> Result<Vec<PlannedLayout>> {
    search.validate()?;
    let series = group_trace(trace, topology)?;
    let mut out = Vec::new();
    for (&layer, rows) in &series.layers {
        let search = layer_search(search, layer);
        let history: Vec<RoutingMatrix> = rows.iter().map(|&(_, m)| m.clone()).collect();
        for t in 1..=rows.len() {
            let iteration = rows.get(t).map_or(rows[t - 1].0 + 1, |r| r.0);
            let choice = plan_layout(&history[..t], &search, topology, params, capacity)?;
            choice.layout.validate()?;
            out.push(PlannedLayout {
                iteration,
                layer,
                choice,
            });
        }
    }
    out.sort_by_key(|p| (p.iteration, p.layer));
    Ok(out)
}

/// Parameters of the cluster-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub device_counts: Vec<usize>,
    pub devices_per_node: usize,
    pub b_intra: f64,
    pub b_inter: f64,
    /// Trace family; `n_devices` is overwritten per sweep point.
    pub trace: TraceGenSpec,
    pub capacity: usize,
    pub baseline: SchedulerKind,
}

impl SweepSpec {
    pub const DEFAULT_DEVICE_COUNTS: [usize; 5] = [8, 16, 32, 64, 128];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_devices: usize,
    pub laer_iteration_time: f64,
    pub baseline_iteration_time: f64,
    pub speedup: f64,
}

/// Speedup of the adaptive scheduler over `spec.baseline` at each cluster
/// size. Traces are regenerated per size with the same seed, per-device token
/// count, expert count and skew.
pub fn scalability_sweep(spec: &SweepSpec, params: &CostParams, search: &LayoutSearch) -> Result<Vec<SweepRow>> {
    if spec.baseline == SchedulerKind::Adaptive {
        return Err(Error::invalid("sweep baseline must differ from laer"));
    }
    spec.device_counts
        .iter()
        .map(|&n| {
            if n % spec.devices_per_node != 0 {
                return Err(Error::invalid(format!(
                    "{n} devices do not fill nodes of {}",
                    spec.devices_per_node
                )));
            }
            let topology = Topology::new(
                n / spec.devices_per_node,
                spec.devices_per_node,
                spec.b_intra,
                spec.b_inter,
            )?;
            let trace = generate_trace(&TraceGenSpec {
                n_devices: n,
                ..spec.trace.clone()
            })?;
            let setup = SimSetup {
                topology: &topology,
                params,
                capacity: spec.capacity,
                search,
                budget: &OracleBudget::default(),
            };
            let report = run_simulation(&trace, &setup, &[SchedulerKind::Adaptive, spec.baseline])?;
            let laer = report
                .summary(SchedulerKind::Adaptive)
                .expect("simulated")
                .mean_iteration_time;
            let base = report.summary(spec.baseline).expect("simulated").mean_iteration_time;
            Ok(SweepRow {
                n_devices: n,
                laer_iteration_time: laer,
                baseline_iteration_time: base,
                speedup: report
                    .speedup(SchedulerKind::Adaptive, spec.baseline)
                    .expect("simulated"),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "n_devices,laer_iteration_time,baseline_iteration_time,speedup")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.n_devices,
            round_sig9(r.laer_iteration_time),
            round_sig9(r.baseline_iteration_time),
            round_sig9(r.speedup)
        )?;
    }
    Ok(())
}

/// Population coefficient of variation (std / mean).
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_shape, even_replicas, expert_relocation, lite_cost, lite_routing, perturb_replicas, replica_allocation,
    ExpertLayout, ReplicaVector, RoutingPlan,
};
use crate::cost::{CostBreakdown, CostParams};
use crate::error::{Error, Result};
use crate::topology::Topology;
use crate::trace::RoutingMatrix;

/// How past routing matrices are folded into the one the planner optimises for.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum HistoryMode {
    /// The most recent iteration only.
    #[default]
    Latest,
    /// `m <- decay * m + (1 - decay) * R_t`, oldest first, rounded to integers.
    Ema { decay: f64 },
}

impl HistoryMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HistoryMode::Latest => Ok(()),
            HistoryMode::Ema { decay } if (0.0..1.0).contains(&decay) => Ok(()),
            HistoryMode::Ema { decay } => Err(Error::invalid(format!("EMA decay must be in [0, 1), got {decay}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSearch {
    /// Number of replica-count candidates scored; at least 2.
    #[serde(default = "default_epsilon")]
    pub epsilon: usize,
    pub seed: u64,
    #[serde(default)]
    pub history: HistoryMode,
}

fn default_epsilon() -> usize {
    2
}

impl LayoutSearch {
    pub fn new(seed: u64) -> Self {
        Self {
            epsilon: default_epsilon(),
            seed,
            history: HistoryMode::Latest,
        }
    }

    pub fn with_epsilon(mut self, epsilon: usize) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 2 {
            return Err(Error::invalid(format!("epsilon must be >= 2, got {}", self.epsilon)));
        }
        self.history.validate()
    }
}

pub fn aggregate_history(history: &[RoutingMatrix], mode: HistoryMode) -> Result<RoutingMatrix> {
    mode.validate()?;
    let last = history
        .last()
        .ok_or(Error::Empty("layout planning needs routing history"))?;
    if let Some(m) = history
        .iter()
        .find(|m| (m.n_devices(), m.n_experts()) != (last.n_devices(), last.n_experts()))
    {
        return Err(Error::ShapeMismatch(format!(
            "history mixes {}x{} and {}x{} matrices",
            m.n_devices(),
            m.n_experts(),
            last.n_devices(),
            last.n_experts()
        )));
    }
    match mode {
        HistoryMode::Latest => Ok(last.clone()),
        HistoryMode::Ema { decay } => {
            let mut acc: Vec<f64> = history[0].as_slice().iter().map(|&c| c as f64).collect();
            for m in &history[1..] {
                for (a, &c) in acc.iter_mut().zip(m.as_slice()) {
                    *a = decay * *a + (1.0 - decay) * c as f64;
                }
            }
            RoutingMatrix::new(
                last.n_devices(),
                last.n_experts(),
                acc.into_iter().map(|a| a.round() as u64).collect(),
            )
        }
    }
}

/// Outcome of the layout search.
#[derive(Debug, Clone)]
pub struct LayoutChoice {
    pub layout: ExpertLayout,
    pub replicas: ReplicaVector,
    /// Lite routing of the aggregated history through `layout`.
    pub plan: RoutingPlan,
    pub cost: CostBreakdown,
    /// Index of the winner in `candidates`.
    pub chosen: usize,
    pub candidates: Vec<ReplicaVector>,
    pub candidate_costs: Vec<f64>,
}

/// Chooses the next layout from routing history.
///
/// Candidates are the load-proportional allocation, the even allocation, and
/// seeded single-replica perturbations of uniformly drawn earlier candidates
/// until there are `epsilon`. Each candidate is relocated, lite-routed on the
/// aggregated history and scored by total time; the first minimum wins.
pub fn plan_layout(
    history: &[RoutingMatrix],
    search: &LayoutSearch,
    topology: &Topology,
    params: &CostParams,
    capacity: usize,
) -> Result<LayoutChoice> {
    search.validate()?;
    params.validate()?;
    let routing = aggregate_history(history, search.history)?;
    let n = topology.n_devices();
    if routing.n_devices() != n {
        return Err(Error::ShapeMismatch(format!(
            "routing has {} devices, topology {n}",
            routing.n_devices()
        )));
    }
    let e = routing.n_experts();
    check_shape(n, e, capacity)?;
    let loads = routing.expert_loads();

    let mut candidates = vec![replica_allocation(&loads, n, capacity)?, even_replicas(n, e, capacity)?];
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    while candidates.len() < search.epsilon {
        let base = &candidates[rng.random_range(0..candidates.len())];
        let next = perturb_replicas(base, n, &mut rng);
        candidates.push(next);
    }

    let mut best: Option<(usize, ExpertLayout, CostBreakdown)> = None;
    let mut candidate_costs = Vec::with_capacity(candidates.len());
    for (idx, reps) in candidates.iter().enumerate() {
        let layout = expert_relocation(reps, &loads, topology, capacity)?;
        let cost = lite_cost(&routing, &layout, topology, params)?;
        candidate_costs.push(cost.t_total);
        if best.as_ref().is_none_or(|b| cost.t_total < b.2.t_total) {
            best = Some((idx, layout, cost));
        }
    }
    let (chosen, layout, cost) = best.expect("at least two candidates");
    let plan = lite_routing(&routing, &layout, topology)?;
    Ok(LayoutChoice {
        layout,
        replicas: candidates[chosen].clone(),
        plan,
        cost,
        chosen,
        candidates,
        candidate_costs,
    })
}

//! Expert re-layout and token routing.
//!
//! A plan for one (layer, iteration) has two parts: an [`ExpertLayout`]
//! deciding which experts each device materialises, and a [`RoutingPlan`]
//! deciding which replica every token is sent to. The layout search
//! ([`plan_layout`]) scores a small set of replica-count candidates by
//! relocating each one, routing the observed load through it with
//! [`lite_routing`], and evaluating the time objective.

mod allocation;
mod baselines;
mod relocation;
mod routing;
mod search;

pub use allocation::{allocation_objective, even_replicas, perturb_replicas, replica_allocation, Ratio};
pub use baselines::{even_replication_layout, static_ep_layout};
pub use relocation::{expert_relocation, relocate_weighted};
pub use routing::{lite_cost, lite_routing};
pub use search::{aggregate_history, plan_layout, HistoryMode, LayoutChoice, LayoutSearch};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trace::RoutingMatrix;

/// Placement of expert replicas: `A[j][i] = 1` iff device `i` materialises
/// expert `j`. Every device holds exactly `capacity` distinct experts and
/// every expert is held somewhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExpertLayout {
    n_experts: usize,
    n_devices: usize,
    capacity: usize,
    placement: Vec<u32>,
}

impl ExpertLayout {
    pub(crate) fn empty(n_experts: usize, n_devices: usize, capacity: usize) -> Self {
        Self {
            n_experts,
            n_devices,
            capacity,
            placement: vec![0; n_experts * n_devices],
        }
    }

    /// Builds a layout from an E×N matrix and checks every invariant. The
    /// capacity is inferred from the first device's column.
    pub fn from_matrix(rows: Vec<Vec<u32>>) -> Result<Self> {
        let n_experts = rows.len();
        let n_devices = rows.first().map_or(0, Vec::len);
        if n_experts == 0 || n_devices == 0 || rows.iter().any(|r| r.len() != n_devices) {
            return Err(Error::ShapeMismatch("layout must be a non-empty E x N matrix".into()));
        }
        let capacity = rows.iter().map(|r| r[0] as usize).sum();
        let layout = Self {
            n_experts,
            n_devices,
            capacity,
            placement: rows.into_iter().flatten().collect(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    pub fn get(&self, expert: usize, device: usize) -> u32 {
        self.placement[expert * self.n_devices + device]
    }

    #[inline]
    pub fn hosts_on(&self, expert: usize, device: usize) -> bool {
        self.get(expert, device) > 0
    }

    pub(crate) fn set(&mut self, expert: usize, device: usize, value: u32) {
        self.placement[expert * self.n_devices + device] = value;
    }

    /// Devices hosting `expert`, ascending.
    pub fn hosts(&self, expert: usize) -> Vec<usize> {
        self.placement[expert * self.n_devices..(expert + 1) * self.n_devices]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0)
            .map(|(d, _)| d)
            .collect()
    }

    /// Experts materialised on `device`, ascending.
    pub fn experts_on(&self, device: usize) -> Vec<usize> {
        (0..self.n_experts).filter(|&j| self.hosts_on(j, device)).collect()
    }

    pub fn replica_counts(&self) -> Vec<u32> {
        self.placement
            .chunks_exact(self.n_devices)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u32>> {
        self.placement
            .chunks_exact(self.n_devices)
            .map(<[u32]>::to_vec)
            .collect()
    }

    /// Checks per-device capacity, expert coverage and binary placement.
    pub fn validate(&self) -> Result<()> {
        if let Some(&a) = self.placement.iter().find(|&&a| a > 1) {
            return Err(Error::InvariantViolation(format!(
                "layout entry {a} > 1: at most one replica of an expert per device"
            )));
        }
        for device in 0..self.n_devices {
            let held: usize = (0..self.n_experts).map(|j| self.get(j, device) as usize).sum();
            if held != self.capacity {
                return Err(Error::InvariantViolation(format!(
                    "device {device} holds {held} experts, capacity is {}",
                    self.capacity
                )));
            }
        }
        if let Some(j) = self.replica_counts().iter().position(|&r| r == 0) {
            return Err(Error::InvariantViolation(format!("expert {j} is hosted nowhere")));
        }
        Ok(())
    }
}

impl Serialize for ExpertLayout {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExpertLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u32>>::deserialize(d)?;
        ExpertLayout::from_matrix(rows).map_err(serde::de::Error::custom)
    }
}

/// `tokens` tokens resident on `src` and routed to `expert` are sent to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanEntry {
    pub src: usize,
    pub expert: usize,
    pub dst: usize,
    pub tokens: u64,
}

/// Sparse `S[i][j][k]`, entries sorted by `(src, expert, dst)` with
/// `tokens > 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPlan {
    n_devices: usize,
    n_experts: usize,
    entries: Vec<PlanEntry>,
}

impl RoutingPlan {
    /// Sorts and merges entries with equal `(src, expert, dst)`; drops zero
    /// entries.
    pub fn from_entries(n_devices: usize, n_experts: usize, mut entries: Vec<PlanEntry>) -> Result<Self> {
        if let Some(e) = entries
            .iter()
            .find(|e| e.src >= n_devices || e.dst >= n_devices || e.expert >= n_experts)
        {
            return Err(Error::ShapeMismatch(format!(
                "plan entry {e:?} out of range for N={n_devices}, E={n_experts}"
            )));
        }
        entries.retain(|e| e.tokens > 0);
        entries.sort_unstable_by_key(|e| (e.src, e.expert, e.dst));
        let mut merged: Vec<PlanEntry> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if (last.src, last.expert, last.dst) == (e.src, e.expert, e.dst) => {
                    last.tokens += e.tokens;
                }
                _ => merged.push(e),
            }
        }
        Ok(Self {
            n_devices,
            n_experts,
            entries: merged,
        })
    }

    /// Entries already sorted, unique and positive.
    pub(crate) fn from_sorted(n_devices: usize, n_experts: usize, entries: Vec<PlanEntry>) -> Self {
        debug_assert!(entries
            .windows(2)
            .all(|w| (w[0].src, w[0].expert, w[0].dst) < (w[1].src, w[1].expert, w[1].dst)));
        debug_assert!(entries.iter().all(|e| e.tokens > 0));
        Self {
            n_devices,
            n_experts,
            entries,
        }
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    /// Tokens each device receives for computation.
    pub fn recv_tokens(&self) -> Vec<u64> {
        let mut recv = vec![0; self.n_devices];
        for e in &self.entries {
            recv[e.dst] += e.tokens;
        }
        recv
    }

    /// Checks token conservation against `routing` and that every entry
    /// targets a device hosting its expert.
    pub fn validate(&self, routing: &RoutingMatrix, layout: &ExpertLayout) -> Result<()> {
        if routing.n_devices() != self.n_devices
            || routing.n_experts() != self.n_experts
            || layout.n_devices() != self.n_devices
            || layout.n_experts() != self.n_experts
        {
            return Err(Error::ShapeMismatch(
                "plan, routing matrix and layout disagree on N or E".into(),
            ));
        }
        let mut sums = vec![0u64; self.n_devices * self.n_experts];
        for e in &self.entries {
            if !layout.hosts_on(e.expert, e.dst) {
                return Err(Error::InvariantViolation(format!(
                    "{} tokens of expert {} sent to device {}, which does not host it",
                    e.tokens, e.expert, e.dst
                )));
            }
            sums[e.src * self.n_experts + e.expert] += e.tokens;
        }
        if let Some(pos) = sums.iter().zip(routing.as_slice()).position(|(s, r)| s != r) {
            let (i, j) = (pos / self.n_experts, pos % self.n_experts);
            return Err(Error::InvariantViolation(format!(
                "conservation broken at (device {i}, expert {j}): planned {} of {}",
                sums[pos],
                routing.get(i, j)
            )));
        }
        Ok(())
    }
}

impl Serialize for RoutingPlan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

/// Replica count per expert: each in `[1, N]`, summing to `N * C`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ReplicaVector(Vec<u32>);

impl ReplicaVector {
    pub fn new(counts: Vec<u32>, n_devices: usize, capacity: usize) -> Result<Self> {
        let v = Self(counts);
        v.validate(n_devices, capacity)?;
        Ok(v)
    }

    pub(crate) fn new_unchecked(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    pub fn validate(&self, n_devices: usize, capacity: usize) -> Result<()> {
        if let Some(j) = self.0.iter().position(|&r| r == 0 || r as usize > n_devices) {
            return Err(Error::InvariantViolation(format!(
                "expert {j} has {} replicas, must be in [1, {n_devices}]",
                self.0[j]
            )));
        }
        let total: usize = self.0.iter().map(|&r| r as usize).sum();
        if total != n_devices * capacity {
            return Err(Error::InvariantViolation(format!(
                "replica total {total} != N*C = {}",
                n_devices * capacity
            )));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

/// Shape preconditions shared by every layout producer: `C <= E <= N * C`.
pub(crate) fn check_shape(n_devices: usize, n_experts: usize, capacity: usize) -> Result<()> {
    if n_devices == 0 || n_experts == 0 || capacity == 0 {
        return Err(Error::invalid("N, E and C must be positive"));
    }
    if n_experts > n_devices * capacity {
        return Err(Error::Infeasible(format!(
            "E = {n_experts} experts cannot all be hosted with N*C = {} slots",
            n_devices * capacity
        )));
    }
    if capacity > n_experts {
        return Err(Error::Infeasible(format!(
            "capacity C = {capacity} exceeds E = {n_experts}: a device cannot hold C distinct experts"
        )));
    }
    Ok(())
}

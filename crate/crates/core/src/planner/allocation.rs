use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::Serialize;

use super::{check_shape, ReplicaVector};
use crate::error::{Error, Result};

/// Exact non-negative rational `num / den`, compared by cross-multiplication.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        debug_assert!(den > 0);
        Self { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

/// `max_j load_j / replicas_j`, the per-replica load of the hottest expert.
pub fn allocation_objective(expert_loads: &[u64], replicas: &[u32]) -> Ratio {
    expert_loads
        .iter()
        .zip(replicas)
        .map(|(&l, &r)| Ratio::new(l, r as u64))
        .max()
        .unwrap_or(Ratio::new(0, 1))
}

#[derive(PartialEq, Eq)]
struct Slot {
    avg: Ratio,
    reps: u32,
    expert: usize,
}

impl Ord for Slot {
    // Highest average load first; ties to fewer replicas, then lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.avg
            .cmp(&other.avg)
            .then_with(|| other.reps.cmp(&self.reps))
            .then_with(|| other.expert.cmp(&self.expert))
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Load-proportional replica counts.
///
/// Every expert starts with one replica; the expert with the highest
/// `load / replicas` repeatedly receives one more until `N * C` replicas are
/// handed out. An expert already replicated on all `N` devices leaves the
/// queue.
pub fn replica_allocation(expert_loads: &[u64], n_devices: usize, capacity: usize) -> Result<ReplicaVector> {
    let n_experts = expert_loads.len();
    check_shape(n_devices, n_experts, capacity)?;
    let target = n_devices * capacity;
    let cap = n_devices as u32;

    let mut reps = vec![1u32; n_experts];
    let mut heap: BinaryHeap<Slot> = expert_loads
        .iter()
        .enumerate()
        .filter(|_| cap > 1)
        .map(|(expert, &l)| Slot {
            avg: Ratio::new(l, 1),
            reps: 1,
            expert,
        })
        .collect();

    let mut assigned = n_experts;
    while assigned < target {
        let Slot { expert, .. } = heap
            .pop()
            .ok_or_else(|| Error::Infeasible("every expert is already replicated on all devices".into()))?;
        reps[expert] += 1;
        assigned += 1;
        if reps[expert] < cap {
            heap.push(Slot {
                avg: Ratio::new(expert_loads[expert], reps[expert] as u64),
                reps: reps[expert],
                expert,
            });
        }
    }
    Ok(ReplicaVector::new_unchecked(reps))
}

/// `floor(N*C/E)` replicas each; the first `N*C mod E` experts get one more.
pub fn even_replicas(n_devices: usize, n_experts: usize, capacity: usize) -> Result<ReplicaVector> {
    check_shape(n_devices, n_experts, capacity)?;
    let slots = n_devices * capacity;
    let (base, extra) = (slots / n_experts, slots % n_experts);
    Ok(ReplicaVector::new_unchecked(
        (0..n_experts).map(|j| (base + usize::from(j < extra)) as u32).collect(),
    ))
}

/// Moves one replica from a uniformly chosen expert holding more than one to
/// a uniformly chosen other expert holding fewer than `N`. Returns the input
/// unchanged when no such move exists.
pub fn perturb_replicas<R: Rng + ?Sized>(replicas: &ReplicaVector, n_devices: usize, rng: &mut R) -> ReplicaVector {
    let counts = replicas.as_slice();
    let donors: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 1).collect();
    if donors.is_empty() {
        return replicas.clone();
    }
    let donor = donors[rng.random_range(0..donors.len())];
    let receivers: Vec<usize> = (0..counts.len())
        .filter(|&j| j != donor && (counts[j] as usize) < n_devices)
        .collect();
    if receivers.is_empty() {
        return replicas.clone();
    }
    let receiver = receivers[rng.random_range(0..receivers.len())];
    let mut out = counts.to_vec();
    out[donor] -= 1;
    out[receiver] += 1;
    ReplicaVector::new_unchecked(out)
}

use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::{check_shape, ExpertLayout, ReplicaVector};
use crate::error::{Error, Result};
use crate::topology::Topology;

/// Topology-aware greedy placement of a replica vector.
///
/// Replicas are placed one at a time in descending order of per-replica load
/// (`load / replicas`). Each goes to a device with a free slot that does not
/// already hold the expert, restricted to the nodes holding the fewest
/// replicas of that expert among nodes with such a device, and within those
/// to the least-loaded device (lowest index on ties). If every free slot sits
/// on a device already holding the expert, a resident expert is moved off a
/// full device to make room.
pub fn expert_relocation(
    replicas: &ReplicaVector,
    expert_loads: &[u64],
    topology: &Topology,
    capacity: usize,
) -> Result<ExpertLayout> {
    let loads: Vec<f64> = expert_loads.iter().map(|&l| l as f64).collect();
    relocate_weighted(replicas, &loads, topology, capacity)
}

/// [`expert_relocation`] with real-valued expert loads.
pub fn relocate_weighted(
    replicas: &ReplicaVector,
    expert_loads: &[f64],
    topology: &Topology,
    capacity: usize,
) -> Result<ExpertLayout> {
    let n = topology.n_devices();
    let e = replicas.len();
    check_shape(n, e, capacity)?;
    replicas.validate(n, capacity)?;
    if expert_loads.len() != e {
        return Err(Error::ShapeMismatch(format!(
            "{} expert loads for {e} experts",
            expert_loads.len()
        )));
    }

    let reps = replicas.as_slice();
    let per_replica: Vec<f64> = expert_loads.iter().zip(reps).map(|(&l, &r)| l / r as f64).collect();
    let mut order: Vec<usize> = (0..e).flat_map(|j| std::iter::repeat_n(j, reps[j] as usize)).collect();
    // Stable: equal loads keep ascending expert order.
    order.sort_by(|&a, &b| per_replica[b].total_cmp(&per_replica[a]));

    let mut state = Placement {
        layout: ExpertLayout::empty(e, n, capacity),
        held: vec![0; n],
        device_load: vec![0.0; n],
        node_count: vec![0; e * topology.n_nodes],
        n_nodes: topology.n_nodes,
        topology,
        per_replica: &per_replica,
        free: (0..topology.n_nodes)
            .map(|node| topology.devices_on_node(node).map(|d| (Load(0.0), d)).collect())
            .collect(),
    };

    for expert in order {
        let device = match state.best_free_device(expert) {
            Some(d) => d,
            None => state.make_room(expert)?,
        };
        state.place(expert, device);
    }

    state.layout.validate()?;
    Ok(state.layout)
}

/// Device load ordered by `total_cmp`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Load(f64);

impl Eq for Load {}

impl PartialOrd for Load {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Load {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Placement<'a> {
    layout: ExpertLayout,
    held: Vec<usize>,
    device_load: Vec<f64>,
    node_count: Vec<u32>,
    n_nodes: usize,
    topology: &'a Topology,
    per_replica: &'a [f64],
    /// Per node, devices with a free slot keyed by (load, index).
    free: Vec<BTreeSet<(Load, usize)>>,
}

impl Placement<'_> {
    fn count(&self, expert: usize, device: usize) -> u32 {
        self.node_count[expert * self.n_nodes + self.topology.node(device)]
    }

    /// Minimum of (replicas of `expert` on the device's node, device load,
    /// device index) over devices passing `eligible` that do not hold `expert`.
    fn best_device(&self, expert: usize, eligible: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<(u32, f64, usize)> = None;
        for d in 0..self.layout.n_devices() {
            if !eligible(d) || self.layout.hosts_on(expert, d) {
                continue;
            }
            let key = (self.count(expert, d), self.device_load[d], d);
            let better = match best {
                None => true,
                Some(b) => key.0.cmp(&b.0).then(key.1.total_cmp(&b.1)).then(key.2.cmp(&b.2)) == Ordering::Less,
            };
            if better {
                best = Some(key);
            }
        }
        best.map(|b| b.2)
    }

    /// [`Placement::best_device`] restricted to devices with a free slot,
    /// scanning each node's free devices in (load, index) order.
    fn best_free_device(&self, expert: usize) -> Option<usize> {
        let mut best: Option<(u32, Load, usize)> = None;
        for (node, devices) in self.free.iter().enumerate() {
            let count = self.node_count[expert * self.n_nodes + node];
            if best.is_some_and(|b| count > b.0) {
                continue;
            }
            if let Some(&(load, d)) = devices.iter().find(|&&(_, d)| !self.layout.hosts_on(expert, d)) {
                let key = (count, load, d);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        best.map(|b| b.2)
    }

    fn update(&mut self, device: usize, held: usize, load: f64) {
        let node = self.topology.node(device);
        if self.held[device] < self.layout.capacity() {
            self.free[node].remove(&(Load(self.device_load[device]), device));
        }
        self.held[device] = held;
        self.device_load[device] = load;
        if held < self.layout.capacity() {
            self.free[node].insert((Load(load), device));
        }
    }

    fn place(&mut self, expert: usize, device: usize) {
        self.layout.set(expert, device, 1);
        self.update(
            device,
            self.held[device] + 1,
            self.device_load[device] + self.per_replica[expert],
        );
        self.node_count[expert * self.n_nodes + self.topology.node(device)] += 1;
    }

    fn remove(&mut self, expert: usize, device: usize) {
        self.layout.set(expert, device, 0);
        self.update(
            device,
            self.held[device] - 1,
            self.device_load[device] - self.per_replica[expert],
        );
        self.node_count[expert * self.n_nodes + self.topology.node(device)] -= 1;
    }

    /// Every free slot is on a device already holding `expert`. Pick such a
    /// device `f` and a full device `g` without `expert`; move one of `g`'s
    /// experts absent from `f` over to `f`, freeing a slot on `g`.
    fn make_room(&mut self, expert: usize) -> Result<usize> {
        let capacity = self.layout.capacity();
        let stuck = || Error::Infeasible(format!("no device can take another replica of expert {expert}"));
        let f = (0..self.layout.n_devices())
            .find(|&d| self.held[d] < capacity)
            .ok_or_else(stuck)?;
        let g = self.best_device(expert, |_| true).ok_or_else(stuck)?;
        let moved = (0..self.layout.n_experts())
            .find(|&y| self.layout.hosts_on(y, g) && !self.layout.hosts_on(y, f))
            .ok_or_else(stuck)?;
        self.remove(moved, g);
        self.place(moved, f);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: Vec<u32>, n: usize, c: usize) -> ReplicaVector {
        ReplicaVector::new(v, n, c).unwrap()
    }

    #[test]
    fn heavier_replica_first() {
        let t = Topology::single_node(2, 100.0).unwrap();
        let layout = expert_relocation(&rv(vec![1, 1], 2, 1), &[30, 10], &t, 1).unwrap();
        assert_eq!(layout.hosts(0), vec![0]);
        assert_eq!(layout.hosts(1), vec![1]);
    }

    #[test]
    fn replicas_spread_across_nodes() {
        let t = Topology::new(2, 2, 100.0, 10.0).unwrap();
        let layout = expert_relocation(&rv(vec![2, 2], 4, 1), &[10, 10], &t, 1).unwrap();
        for j in 0..2 {
            let nodes: Vec<usize> = layout.hosts(j).iter().map(|&d| t.node(d)).collect();
            assert_eq!(nodes, vec![0, 1], "expert {j}");
        }
    }

    #[test]
    fn capacity_per_device() {
        let t = Topology::new(2, 3, 100.0, 10.0).unwrap();
        let layout = expert_relocation(&rv(vec![4, 3, 2, 1, 1, 1], 6, 2), &[90, 40, 30, 5, 1, 0], &t, 2).unwrap();
        for d in 0..6 {
            assert_eq!(layout.experts_on(d).len(), 2);
        }
        assert_eq!(layout.replica_counts(), vec![4, 3, 2, 1, 1, 1]);
    }

    #[test]
    fn make_room_when_slots_collide() {
        let t = Topology::single_node(3, 100.0).unwrap();
        let per_replica = [1.0, 4.0, 3.0, 2.0];
        let mut st = Placement {
            layout: ExpertLayout::empty(4, 3, 2),
            held: vec![0; 3],
            device_load: vec![0.0; 3],
            node_count: vec![0; 4],
            n_nodes: 1,
            topology: &t,
            per_replica: &per_replica,
            free: vec![(0..3).map(|d| (Load(0.0), d)).collect()],
        };
        for (j, d) in [(1, 0), (2, 0), (0, 1), (3, 1), (0, 2)] {
            st.place(j, d);
        }
        // The only free slot is on device 2, which already holds expert 0.
        assert_eq!(st.best_device(0, |d| st.held[d] < 2), None);
        assert_eq!(st.best_free_device(0), None);
        let d = st.make_room(0).unwrap();
        assert_eq!(d, 0);
        st.place(0, d);
        st.layout.validate().unwrap();
        assert_eq!(st.layout.experts_on(0), vec![0, 2]);
        assert_eq!(st.layout.experts_on(2), vec![0, 1]);
        assert_eq!(st.device_load, vec![4.0, 3.0, 5.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = Topology::single_node(2, 1.0).unwrap();
        assert!(expert_relocation(&ReplicaVector::new_unchecked(vec![3, 1]), &[1, 1], &t, 2).is_err());
        assert!(expert_relocation(&rv(vec![2, 2], 2, 2), &[1], &t, 2).is_err());
    }
}

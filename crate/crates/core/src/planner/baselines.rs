use super::{check_shape, even_replicas, relocate_weighted, ExpertLayout};
use crate::error::Result;
use crate::topology::Topology;

/// Fixed expert-parallel placement: slot `c` of device `i` holds expert
/// `(i * C + c) mod E`, so with `E = N * C` device `i` holds experts
/// `i*C .. (i+1)*C`, and with fewer experts the block pattern wraps around.
pub fn static_ep_layout(n_devices: usize, n_experts: usize, capacity: usize) -> Result<ExpertLayout> {
    check_shape(n_devices, n_experts, capacity)?;
    let mut layout = ExpertLayout::empty(n_experts, n_devices, capacity);
    for i in 0..n_devices {
        for c in 0..capacity {
            layout.set((i * capacity + c) % n_experts, i, 1);
        }
    }
    layout.validate()?;
    Ok(layout)
}

/// Even replica counts placed by the relocation heuristic under uniform load.
pub fn even_replication_layout(topology: &Topology, n_experts: usize, capacity: usize) -> Result<ExpertLayout> {
    let n = topology.n_devices();
    let reps = even_replicas(n, n_experts, capacity)?;
    relocate_weighted(&reps, &vec![1.0; n_experts], topology, capacity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_block_assignment() {
        let l = static_ep_layout(4, 8, 2).unwrap();
        for i in 0..4 {
            assert_eq!(l.experts_on(i), vec![2 * i, 2 * i + 1]);
        }
    }

    #[test]
    fn static_wraps_when_replicated() {
        let l = static_ep_layout(4, 3, 1).unwrap();
        assert_eq!(l.replica_counts(), vec![2, 1, 1]);
        assert_eq!(l.hosts(0), vec![0, 3]);
    }

    #[test]
    fn static_infeasible() {
        assert!(static_ep_layout(2, 5, 2).is_err());
        assert!(static_ep_layout(4, 1, 2).is_err());
    }

    #[test]
    fn even_has_equal_counts() {
        let t = Topology::new(2, 2, 100.0, 10.0).unwrap();
        let l = even_replication_layout(&t, 4, 2).unwrap();
        assert_eq!(l.replica_counts(), vec![2, 2, 2, 2]);
        // Two replicas of each expert land on different nodes.
        for j in 0..4 {
            let nodes: Vec<usize> = l.hosts(j).iter().map(|&d| t.node(d)).collect();
            assert_eq!(nodes, vec![0, 1]);
        }
    }
}

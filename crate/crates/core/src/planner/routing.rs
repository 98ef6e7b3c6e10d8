use super::{ExpertLayout, PlanEntry, RoutingPlan};
use crate::cost::{breakdown, CostBreakdown, CostParams};
use crate::error::{Error, Result};
use crate::topology::{Link, Topology};
use crate::trace::RoutingMatrix;

/// Topology-aware even split of each device's tokens over expert replicas.
///
/// Tokens on device `i` for expert `j` are split evenly over the replicas of
/// `j` on `i`'s node if there are any, otherwise over all replicas of `j`.
/// The split is `floor(R / r)` each with the remainder handed out one token at
/// a time to the replicas in ascending device order.
pub fn lite_routing(routing: &RoutingMatrix, layout: &ExpertLayout, topology: &Topology) -> Result<RoutingPlan> {
    let mut entries = Vec::with_capacity(routing.n_devices() * routing.n_experts());
    lite_split(routing, layout, topology, |src, expert, dst, tokens| {
        entries.push(PlanEntry {
            src,
            expert,
            dst,
            tokens,
        });
    })?;
    Ok(RoutingPlan::from_sorted(
        routing.n_devices(),
        routing.n_experts(),
        entries,
    ))
}

/// Cost of [`lite_routing`] without materialising the plan.
pub fn lite_cost(
    routing: &RoutingMatrix,
    layout: &ExpertLayout,
    topology: &Topology,
    params: &CostParams,
) -> Result<CostBreakdown> {
    let mut intra = 0u64;
    let mut inter = 0u64;
    let mut recv = vec![0u64; topology.n_devices()];
    lite_split(routing, layout, topology, |src, _, dst, tokens| {
        match topology.link(src, dst) {
            Link::Local => {}
            Link::Intra => intra += tokens,
            Link::Inter => inter += tokens,
        }
        recv[dst] += tokens;
    })?;
    Ok(breakdown(intra, inter, recv, topology, params))
}

/// Emits `(src, expert, dst, tokens)` in ascending `(src, expert, dst)`
/// order, positive amounts only.
fn lite_split(
    routing: &RoutingMatrix,
    layout: &ExpertLayout,
    topology: &Topology,
    mut emit: impl FnMut(usize, usize, usize, u64),
) -> Result<()> {
    let n = topology.n_devices();
    let e = routing.n_experts();
    if routing.n_devices() != n || layout.n_devices() != n || layout.n_experts() != e {
        return Err(Error::ShapeMismatch(format!(
            "routing is {}x{}, layout is {}x{}, topology has {n} devices",
            routing.n_devices(),
            e,
            layout.n_experts(),
            layout.n_devices()
        )));
    }

    let hosts: Vec<Vec<usize>> = (0..e).map(|j| layout.hosts(j)).collect();
    for i in 0..n {
        let node = topology.devices_on_node(topology.node(i));
        for (j, host) in hosts.iter().enumerate() {
            let tokens = routing.get(i, j);
            if tokens == 0 {
                continue;
            }
            if host.is_empty() {
                return Err(Error::UnhostedExpert { expert: j, tokens });
            }
            // Hosts are ascending and node ranges contiguous.
            let lo = host.partition_point(|&d| d < node.start);
            let hi = host.partition_point(|&d| d < node.end);
            let targets = if lo < hi { &host[lo..hi] } else { &host[..] };

            let r = targets.len() as u64;
            let (base, extra) = (tokens / r, tokens % r);
            for (idx, &dst) in targets.iter().enumerate() {
                let t = base + u64::from((idx as u64) < extra);
                if t > 0 {
                    emit(i, j, dst, t);
                }
            }
        }
    }
    Ok(())
}

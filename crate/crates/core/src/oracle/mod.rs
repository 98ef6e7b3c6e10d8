//! Exact references for tiny instances.
//!
//! [`exact_allocation`] enumerates every replica vector. [`solve_exact`]
//! enumerates every feasible layout and, per layout, finds the optimal
//! integer routing: for a fixed cap `L` on tokens received per device, the
//! minimum communication time is a min-cost flow (integral because all
//! capacities are), and `comm(L) + comp(L)` is convex in `L`, so an integer
//! ternary search over `L` gives the joint optimum exactly.

mod flow;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cost::{time_cost, CostBreakdown, CostParams, ALL_TO_ALL_PASSES};
use crate::error::{Error, Result};
use crate::planner::{
    allocation_objective, check_shape, lite_routing, plan_layout, ExpertLayout, LayoutSearch, PlanEntry, Ratio,
    ReplicaVector, RoutingPlan,
};
use crate::topology::{Link, Topology};
use crate::trace::RoutingMatrix;
use crate::util::gcd;

use flow::MinCostFlow;

pub const MAX_ALLOC_EXPERTS: usize = 6;
pub const MAX_ALLOC_SLOTS: usize = 12;
pub const MAX_EXACT_DEVICES: usize = 4;
pub const MAX_EXACT_EXPERTS: usize = 4;
pub const MAX_EXACT_CAPACITY: usize = 2;
/// Per (device, expert) token bound, in units of the granularity.
pub const MAX_UNITS_PER_PAIR: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBudget {
    /// Layouts evaluated before giving up with the best found so far.
    #[serde(default = "default_max_layouts")]
    pub max_layout_candidates: usize,
    /// Tokens are routed in multiples of this; it must divide every entry.
    #[serde(default = "default_granularity")]
    pub max_token_granularity: u64,
}

fn default_max_layouts() -> usize {
    100_000
}

fn default_granularity() -> u64 {
    1
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_layout_candidates: default_max_layouts(),
            max_token_granularity: default_granularity(),
        }
    }
}

impl OracleBudget {
    /// Coarsest granularity the routing admits: the gcd of its non-zero
    /// entries. Only exact when the optimal routing happens to be a
    /// multiple of it.
    pub fn coarsest_granularity(routing: &RoutingMatrix) -> u64 {
        routing.as_slice().iter().fold(0, |g, &c| gcd(g, c)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactAllocation {
    pub replicas: ReplicaVector,
    pub objective: Ratio,
}

/// Enumerates every replica vector (each entry in `[1, N]`, summing to
/// `N * C`) and returns the first minimiser of `max_j load_j / rep_j`.
pub fn exact_allocation(expert_loads: &[u64], n_devices: usize, capacity: usize) -> Result<ExactAllocation> {
    let e = expert_loads.len();
    check_shape(n_devices, e, capacity)?;
    let slots = n_devices * capacity;
    if e > MAX_ALLOC_EXPERTS || slots > MAX_ALLOC_SLOTS {
        return Err(Error::BoundsExceeded(format!(
            "exact allocation needs E <= {MAX_ALLOC_EXPERTS} and N*C <= {MAX_ALLOC_SLOTS}, got E={e}, N*C={slots}"
        )));
    }

    fn walk(j: usize, left: usize, n: usize, loads: &[u64], cur: &mut Vec<u32>, best: &mut Option<(Ratio, Vec<u32>)>) {
        let e = loads.len();
        if j == e {
            if left == 0 {
                let obj = allocation_objective(loads, cur);
                if best.as_ref().is_none_or(|b| obj < b.0) {
                    *best = Some((obj, cur.clone()));
                }
            }
            return;
        }
        let rest = e - j - 1;
        for r in 1..=n.min(left) {
            // The remaining experts need between `rest` and `rest * n` slots.
            if left - r < rest || left - r > rest * n {
                continue;
            }
            cur.push(r as u32);
            walk(j + 1, left - r, n, loads, cur, best);
            cur.pop();
        }
    }

    let mut best = None;
    walk(0, slots, n_devices, expert_loads, &mut Vec::with_capacity(e), &mut best);
    let (objective, reps) = best.ok_or_else(|| Error::Infeasible("no replica vector exists".into()))?;
    Ok(ExactAllocation {
        replicas: ReplicaVector::new(reps, n_devices, capacity)?,
        objective,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactSolution {
    pub layout: ExpertLayout,
    pub plan: RoutingPlan,
    pub cost: CostBreakdown,
    pub t_total: f64,
    /// The layout budget ran out; the result is the best among those seen.
    pub budget_exceeded: bool,
    /// Routing was restricted to multiples of a granularity above one.
    pub coarsened: bool,
    pub layouts_enumerated: usize,
    pub layouts_solved: usize,
}

/// Jointly optimal layout and routing for a tiny instance.
pub fn solve_exact(
    routing: &RoutingMatrix,
    topology: &Topology,
    params: &CostParams,
    capacity: usize,
    budget: &OracleBudget,
) -> Result<ExactSolution> {
    params.validate()?;
    let n = topology.n_devices();
    let e = routing.n_experts();
    if routing.n_devices() != n {
        return Err(Error::ShapeMismatch(format!(
            "routing has {} devices, topology {n}",
            routing.n_devices()
        )));
    }
    check_shape(n, e, capacity)?;
    if n > MAX_EXACT_DEVICES || e > MAX_EXACT_EXPERTS || capacity > MAX_EXACT_CAPACITY {
        return Err(Error::BoundsExceeded(format!(
            "exact solve needs N <= {MAX_EXACT_DEVICES}, E <= {MAX_EXACT_EXPERTS}, C <= {MAX_EXACT_CAPACITY}; got N={n}, E={e}, C={capacity}"
        )));
    }
    let g = budget.max_token_granularity;
    if g == 0 || budget.max_layout_candidates == 0 {
        return Err(Error::invalid("oracle budget fields must be positive"));
    }
    if let Some(&bad) = routing.as_slice().iter().find(|&&c| c % g != 0) {
        return Err(Error::invalid(format!(
            "granularity {g} does not divide token count {bad}"
        )));
    }
    if let Some(&big) = routing.as_slice().iter().find(|&&c| c / g > MAX_UNITS_PER_PAIR) {
        return Err(Error::BoundsExceeded(format!(
            "token count {big} exceeds {MAX_UNITS_PER_PAIR} units of granularity {g}"
        )));
    }

    let problem = RoutingProblem::new(routing, topology, params, g);
    let masks = enumerate_layouts(routing, topology, e, capacity);
    let budget_exceeded = masks.len() > budget.max_layout_candidates;
    let mut masks: Vec<(f64, Vec<u32>)> = masks
        .into_iter()
        .take(budget.max_layout_candidates)
        .map(|m| (problem.lower_bound(&m), m))
        .collect();
    let layouts_enumerated = masks.len();
    masks.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Vec<u32>, Vec<PlanEntry>)> = None;
    let mut layouts_solved = 0;
    for (lb, mask) in &masks {
        if let Some((bt, ..)) = &best {
            if *lb > *bt * (1.0 + 1e-12) {
                break;
            }
        }
        layouts_solved += 1;
        let (t, entries) = problem.solve(mask);
        if best.as_ref().is_none_or(|b| t < b.0) {
            best = Some((t, mask.clone(), entries));
        }
    }
    let (_, mask, entries) = best.ok_or_else(|| Error::Infeasible("no feasible layout".into()))?;

    let mut layout = ExpertLayout::empty(e, n, capacity);
    for (d, &m) in mask.iter().enumerate() {
        for j in 0..e {
            if m >> j & 1 == 1 {
                layout.set(j, d, 1);
            }
        }
    }
    layout.validate()?;
    let plan = RoutingPlan::from_entries(n, e, entries)?;
    plan.validate(routing, &layout)?;
    let cost = time_cost(&plan, topology, params)?;
    Ok(ExactSolution {
        t_total: cost.t_total,
        layout,
        plan,
        cost,
        budget_exceeded,
        coarsened: g > 1,
        layouts_enumerated,
        layouts_solved,
    })
}

/// All per-device expert bitmasks with exactly `capacity` bits that cover
/// every expert. Devices on the same node with identical routing rows are
/// interchangeable, so their masks are kept non-decreasing.
fn enumerate_layouts(routing: &RoutingMatrix, topology: &Topology, e: usize, capacity: usize) -> Vec<Vec<u32>> {
    let n = topology.n_devices();
    let choices: Vec<u32> = (0u32..1 << e).filter(|m| m.count_ones() as usize == capacity).collect();
    let twin: Vec<Option<usize>> = (0..n)
        .map(|d| {
            (0..d)
                .rev()
                .find(|&p| topology.node(p) == topology.node(d) && routing.row(p) == routing.row(d))
        })
        .collect();
    let full = (1u32 << e) - 1;

    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    fn rec(
        d: usize,
        cover: u32,
        cur: &mut Vec<usize>,
        choices: &[u32],
        twin: &[Option<usize>],
        full: u32,
        out: &mut Vec<Vec<u32>>,
    ) {
        if d == cur.len() {
            if cover == full {
                out.push(cur.iter().map(|&c| choices[c]).collect());
            }
            return;
        }
        let start = twin[d].map_or(0, |p| cur[p]);
        for c in start..choices.len() {
            cur[d] = c;
            rec(d + 1, cover | choices[c], cur, choices, twin, full, out);
        }
    }
    rec(0, 0, &mut cur, &choices, &twin, full, &mut out);
    out
}

/// Routing subproblem in token units of the granularity.
struct RoutingProblem<'a> {
    topology: &'a Topology,
    n: usize,
    e: usize,
    granularity: u64,
    units: Vec<u64>,
    total: u64,
    /// Seconds per unit sent over each link class.
    unit_comm: [f64; 3],
    /// Seconds per unit of the busiest device's load.
    unit_comp: f64,
}

fn link_index(l: Link) -> usize {
    match l {
        Link::Local => 0,
        Link::Intra => 1,
        Link::Inter => 2,
    }
}

impl<'a> RoutingProblem<'a> {
    fn new(routing: &RoutingMatrix, topology: &'a Topology, params: &CostParams, granularity: u64) -> Self {
        let units: Vec<u64> = routing.as_slice().iter().map(|&c| c / granularity).collect();
        let g = granularity as f64;
        let per_byte = ALL_TO_ALL_PASSES * params.v_comm * g;
        Self {
            topology,
            n: routing.n_devices(),
            e: routing.n_experts(),
            granularity,
            total: units.iter().sum(),
            units,
            unit_comm: [0.0, per_byte / topology.b_intra, per_byte / topology.b_inter],
            unit_comp: params.compute_multiplier() * params.v_comp * g / params.b_comp,
        }
    }

    fn comm(&self, i: usize, k: usize) -> f64 {
        self.unit_comm[link_index(self.topology.link(i, k))]
    }

    fn hosts(&self, mask: &[u32], j: usize) -> Vec<usize> {
        (0..self.n).filter(|&k| mask[k] >> j & 1 == 1).collect()
    }

    /// Smallest feasible cap on per-device load ignoring hosting conflicts
    /// between experts.
    fn load_floor(&self, mask: &[u32]) -> u64 {
        let mut floor = self.total.div_ceil(self.n as u64);
        for j in 0..self.e {
            let load: u64 = (0..self.n).map(|i| self.units[i * self.e + j]).sum();
            let h = self.hosts(mask, j).len() as u64;
            floor = floor.max(load.div_ceil(h));
        }
        floor
    }

    /// Cheapest-host communication plus the balanced-load compute floor.
    fn lower_bound(&self, mask: &[u32]) -> f64 {
        let mut comm = 0.0;
        for j in 0..self.e {
            let hosts = self.hosts(mask, j);
            for i in 0..self.n {
                let u = self.units[i * self.e + j];
                if u > 0 {
                    let c = hosts.iter().map(|&k| self.comm(i, k)).fold(f64::INFINITY, f64::min);
                    comm += u as f64 * c;
                }
            }
        }
        comm + self.unit_comp * self.load_floor(mask) as f64
    }

    /// Min-cost flow with per-device cap `cap`. Returns `None` if the cap
    /// cannot absorb every token.
    fn flow(&self, mask: &[u32], cap: u64) -> Option<(f64, Vec<PlanEntry>, u64)> {
        let pairs: Vec<(usize, usize)> = (0..self.n)
            .flat_map(|i| (0..self.e).map(move |j| (i, j)))
            .filter(|&(i, j)| self.units[i * self.e + j] > 0)
            .collect();
        let src = 0;
        let sink = 1;
        let dev_node = |k: usize| 2 + pairs.len() + k;
        let mut g = MinCostFlow::new(2 + pairs.len() + self.n);
        let mut arcs = Vec::new();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            g.add_arc(src, 2 + p, self.units[i * self.e + j], 0.0);
            for k in self.hosts(mask, j) {
                arcs.push((g.add_arc(2 + p, dev_node(k), u64::MAX / 4, self.comm(i, k)), i, j, k));
            }
        }
        let dev_arcs: Vec<usize> = (0..self.n).map(|k| g.add_arc(dev_node(k), sink, cap, 0.0)).collect();
        let (sent, comm) = g.run(src, sink, self.total);
        if sent < self.total {
            return None;
        }
        let max_load = dev_arcs.iter().map(|&a| g.flow(a)).max().unwrap_or(0);
        let entries = arcs
            .into_iter()
            .filter_map(|(a, i, j, k)| {
                let f = g.flow(a);
                (f > 0).then(|| PlanEntry {
                    src: i,
                    expert: j,
                    dst: k,
                    tokens: f * self.granularity,
                })
            })
            .collect();
        Some((comm, entries, max_load))
    }

    /// Optimal routing for the layout `mask`: `(t_total, entries)`.
    fn solve(&self, mask: &[u32]) -> (f64, Vec<PlanEntry>) {
        if self.total == 0 {
            return (0.0, Vec::new());
        }
        let mut memo: HashMap<u64, Option<(f64, Vec<PlanEntry>)>> = HashMap::new();
        let mut eval = |cap: u64| -> f64 {
            memo.entry(cap)
                .or_insert_with(|| {
                    self.flow(mask, cap)
                        .map(|(comm, entries, _)| (comm + self.unit_comp * cap as f64, entries))
                })
                .as_ref()
                .map_or(f64::INFINITY, |s| s.0)
        };

        // Beyond the unconstrained optimum's max load the objective only grows.
        let (_, _, hi) = self.flow(mask, self.total).expect("uncapped flow routes everything");
        let mut lo = self.load_floor(mask);
        let mut hi_feas = hi;
        // Smallest feasible cap, by bisection.
        while lo < hi_feas {
            let mid = lo + (hi_feas - lo) / 2;
            if eval(mid).is_finite() {
                hi_feas = mid;
            } else {
                lo = mid + 1;
            }
        }
        let (mut a, mut b) = (lo, hi.max(lo));
        while b - a > 2 {
            let m1 = a + (b - a) / 3;
            let m2 = b - (b - a) / 3;
            if eval(m1) <= eval(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        let best_cap = (a..=b)
            .min_by(|&x, &y| eval(x).total_cmp(&eval(y)).then(x.cmp(&y)))
            .expect("non-empty range");
        eval(best_cap);
        let (t, entries) = memo.remove(&best_cap).flatten().expect("feasible cap");
        (t, entries)
    }
}

/// Heuristic-vs-exact comparison for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub greedy_cost: f64,
    pub exact_cost: f64,
    /// `greedy_cost / exact_cost - 1`; zero when both are zero.
    pub gap: f64,
    pub exact: ExactSolution,
    pub greedy_layout: ExpertLayout,
}

/// Runs the layout search (with `routing` as the only history) plus lite
/// routing against [`solve_exact`].
pub fn compare_with_greedy(
    routing: &RoutingMatrix,
    topology: &Topology,
    params: &CostParams,
    capacity: usize,
    search: &LayoutSearch,
    budget: &OracleBudget,
) -> Result<GapReport> {
    let exact = solve_exact(routing, topology, params, capacity, budget)?;
    let choice = plan_layout(std::slice::from_ref(routing), search, topology, params, capacity)?;
    let plan = lite_routing(routing, &choice.layout, topology)?;
    let greedy_cost = time_cost(&plan, topology, params)?.t_total;
    let gap = if exact.t_total > 0.0 {
        greedy_cost / exact.t_total - 1.0
    } else if greedy_cost > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(GapReport {
        greedy_cost,
        exact_cost: exact.t_total,
        gap,
        exact,
        greedy_layout: choice.layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CostParams {
        CostParams::new(1.0, 1.0, 10.0, 0).unwrap()
    }

    #[test]
    fn exact_allocation_examples() {
        let a = exact_allocation(&[100, 10, 10, 10], 4, 2).unwrap();
        // [5, 1, 1, 1] would reach 20 but exceeds one replica per device.
        assert_eq!(a.objective, Ratio::new(25, 1));
        assert_eq!(a.replicas.as_slice()[0], 4);
        let wide = exact_allocation(&[100, 10, 10, 10], 8, 1).unwrap();
        assert_eq!(wide.objective, Ratio::new(20, 1));
        assert_eq!(wide.replicas.as_slice(), &[5, 1, 1, 1]);

        let u = exact_allocation(&[30, 30, 30], 3, 2).unwrap();
        assert_eq!(u.objective, Ratio::new(15, 1));

        let single = exact_allocation(&[42], 4, 1).unwrap();
        assert_eq!(single.replicas.as_slice(), &[4]);
        assert_eq!(single.objective, Ratio::new(42, 4));

        assert!(matches!(exact_allocation(&[1; 7], 4, 2), Err(Error::BoundsExceeded(_))));
        assert!(matches!(
            exact_allocation(&[1; 2], 13, 1),
            Err(Error::BoundsExceeded(_))
        ));
    }

    #[test]
    fn layout_enumeration_counts() {
        // N=2 on one node, E=2, C=1: two layouts; rows differ so no folding.
        let t = Topology::single_node(2, 1.0).unwrap();
        let r = RoutingMatrix::from_rows(vec![vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(enumerate_layouts(&r, &t, 2, 1).len(), 2);
        // Identical rows fold the two device orders into one.
        let r = RoutingMatrix::from_rows(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(enumerate_layouts(&r, &t, 2, 1).len(), 1);
        // N=4 across 2 nodes, E=4, C=2, distinct rows: 6^4 minus the
        // non-covering ones. Count independently by filtering all tuples.
        let t = Topology::new(2, 2, 1.0, 1.0).unwrap();
        let r = RoutingMatrix::from_rows((0..4).map(|i| vec![i, 0, 0, 0]).collect()).unwrap();
        let masks: Vec<u32> = (0u32..16).filter(|m| m.count_ones() == 2).collect();
        let mut brute = 0;
        for a in &masks {
            for b in &masks {
                for c in &masks {
                    for d in &masks {
                        if a | b | c | d == 15 {
                            brute += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(enumerate_layouts(&r, &t, 4, 2).len(), brute);
    }

    #[test]
    fn uniform_routing_forces_one_replica_each() {
        let t = Topology::new(2, 2, 100.0, 10.0).unwrap();
        let r = RoutingMatrix::new(4, 4, vec![3; 16]).unwrap();
        let s = solve_exact(&r, &t, &params(), 1, &OracleBudget::default()).unwrap();
        assert_eq!(s.layout.replica_counts(), vec![1, 1, 1, 1]);
        for e in s.plan.entries() {
            assert_eq!(s.layout.hosts(e.expert), vec![e.dst]);
        }
    }

    #[test]
    fn hot_expert_two_devices_matches_lite_routing() {
        let t = Topology::single_node(2, 100.0).unwrap();
        let r = RoutingMatrix::from_rows(vec![vec![10, 0], vec![10, 0]]).unwrap();
        let s = solve_exact(&r, &t, &params(), 1, &OracleBudget::default()).unwrap();
        assert_eq!(s.layouts_enumerated, 1); // identical rows fold the two layouts
        let lite = lite_routing(&r, &s.layout, &t).unwrap();
        let lite_cost = time_cost(&lite, &t, &params()).unwrap().t_total;
        assert!((lite_cost - s.t_total).abs() < 1e-12);
        // 10 tokens cross one link: 4*10/100; 20 tokens on one device: 3*20/10.
        assert!((s.t_total - (0.4 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn full_replication_serves_locally() {
        let t = Topology::single_node(2, 100.0).unwrap();
        let r = RoutingMatrix::from_rows(vec![vec![7, 3], vec![2, 9]]).unwrap();
        let s = solve_exact(&r, &t, &params(), 2, &OracleBudget::default()).unwrap();
        assert_eq!(s.cost.t_comm, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                let local: u64 = s
                    .plan
                    .entries()
                    .iter()
                    .filter(|e| e.src == i && e.expert == j && e.dst == i)
                    .map(|e| e.tokens)
                    .sum();
                assert_eq!(local, r.get(i, j));
            }
        }
    }

    #[test]
    fn bounds_and_granularity_errors() {
        let t = Topology::single_node(5, 1.0).unwrap();
        let r = RoutingMatrix::zeros(5, 2).unwrap();
        assert!(matches!(
            solve_exact(&r, &t, &params(), 1, &OracleBudget::default()),
            Err(Error::BoundsExceeded(_))
        ));
        let t = Topology::single_node(2, 1.0).unwrap();
        let r = RoutingMatrix::from_rows(vec![vec![21, 0], vec![0, 0]]).unwrap();
        assert!(matches!(
            solve_exact(&r, &t, &params(), 1, &OracleBudget::default()),
            Err(Error::BoundsExceeded(_))
        ));
        let coarse = OracleBudget {
            max_token_granularity: 2,
            ..OracleBudget::default()
        };
        let r = RoutingMatrix::from_rows(vec![vec![3, 0], vec![0, 0]]).unwrap();
        assert!(solve_exact(&r, &t, &params(), 1, &coarse).is_err());
        let r = RoutingMatrix::from_rows(vec![vec![40, 0], vec![0, 2]]).unwrap();
        assert_eq!(OracleBudget::coarsest_granularity(&r), 2);
        assert!(solve_exact(&r, &t, &params(), 1, &coarse).unwrap().coarsened);
    }

    #[test]
    fn layout_budget_flag() {
        let t = Topology::new(2, 2, 100.0, 10.0).unwrap();
        let r = RoutingMatrix::from_rows((0..4).map(|i| vec![i + 1, 2, 0, 1]).collect()).unwrap();
        let tight = OracleBudget {
            max_layout_candidates: 5,
            ..OracleBudget::default()
        };
        let s = solve_exact(&r, &t, &params(), 2, &tight).unwrap();
        assert!(s.budget_exceeded);
        assert_eq!(s.layouts_enumerated, 5);
        s.layout.validate().unwrap();
    }

    /// Every integer routing of a micro instance, scored directly.
    fn brute_force_routing(r: &RoutingMatrix, layout: &ExpertLayout, t: &Topology, p: &CostParams) -> f64 {
        let (n, e) = (r.n_devices(), r.n_experts());
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..e).map(move |j| (i, j))).collect();
        let mut best = f64::INFINITY;
        let mut entries = Vec::new();
        fn splits(total: u64, parts: usize) -> Vec<Vec<u64>> {
            if parts == 1 {
                return vec![vec![total]];
            }
            (0..=total)
                .flat_map(|a| {
                    splits(total - a, parts - 1).into_iter().map(move |mut s| {
                        s.insert(0, a);
                        s
                    })
                })
                .collect()
        }
        #[allow(clippy::too_many_arguments)]
        fn rec(
            idx: usize,
            pairs: &[(usize, usize)],
            r: &RoutingMatrix,
            layout: &ExpertLayout,
            t: &Topology,
            p: &CostParams,
            entries: &mut Vec<PlanEntry>,
            best: &mut f64,
        ) {
            if idx == pairs.len() {
                let plan = RoutingPlan::from_entries(r.n_devices(), r.n_experts(), entries.clone()).unwrap();
                *best = best.min(time_cost(&plan, t, p).unwrap().t_total);
                return;
            }
            let (i, j) = pairs[idx];
            let hosts = layout.hosts(j);
            for split in splits(r.get(i, j), hosts.len()) {
                let before = entries.len();
                for (&k, &s) in hosts.iter().zip(&split) {
                    entries.push(PlanEntry {
                        src: i,
                        expert: j,
                        dst: k,
                        tokens: s,
                    });
                }
                rec(idx + 1, pairs, r, layout, t, p, entries, best);
                entries.truncate(before);
            }
        }
        rec(0, &pairs, r, layout, t, p, &mut entries, &mut best);
        best
    }

    #[test]
    fn flow_routing_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let topologies = [
            Topology::single_node(3, 100.0).unwrap(),
            Topology::new(3, 1, 100.0, 10.0).unwrap(),
            Topology::new(2, 2, 100.0, 10.0).unwrap(),
        ];
        // Comp-heavy and comm-heavy regimes.
        let regimes = [params(), CostParams::new(40.0, 1.0, 10.0, 1).unwrap()];
        for case in 0..40 {
            let t = &topologies[case % topologies.len()];
            let p = &regimes[case % 2];
            let n = t.n_devices();
            let e = 2;
            // Full replication on four devices makes the brute force too slow.
            let c = if n < 4 { 1 + case % 2 } else { 1 };
            let r = RoutingMatrix::new(n, e, (0..n * e).map(|_| rng.random_range(0..4)).collect()).unwrap();
            let exact = solve_exact(&r, t, p, c, &OracleBudget::default()).unwrap();
            let brute_best = enumerate_layouts(&r, t, e, c)
                .iter()
                .map(|mask| {
                    let mut layout = ExpertLayout::empty(e, n, c);
                    for (d, &m) in mask.iter().enumerate() {
                        for j in 0..e {
                            if m >> j & 1 == 1 {
                                layout.set(j, d, 1);
                            }
                        }
                    }
                    brute_force_routing(&r, &layout, t, p)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                (exact.t_total - brute_best).abs() <= 1e-9 * brute_best.max(1e-12),
                "case {case}: flow {} vs brute {}",
                exact.t_total,
                brute_best
            );
        }
    }
}

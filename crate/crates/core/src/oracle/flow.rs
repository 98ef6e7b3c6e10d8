//! Successive-shortest-path min-cost flow for the tiny routing subproblems of
//! the exact solver. Graphs have a few dozen nodes, so Bellman-Ford on the
//! residual graph is plenty.

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: u64,
    cost: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct MinCostFlow {
    adj: Vec<Vec<usize>>,
    arcs: Vec<Arc>,
    initial_cap: Vec<u64>,
}

impl MinCostFlow {
    pub(crate) fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            arcs: Vec::new(),
            initial_cap: Vec::new(),
        }
    }

    /// Adds `u -> v`; returns an id for [`MinCostFlow::flow`].
    pub(crate) fn add_arc(&mut self, u: usize, v: usize, cap: u64, cost: f64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to: v, cap, cost });
        self.arcs.push(Arc {
            to: u,
            cap: 0,
            cost: -cost,
        });
        self.initial_cap.extend([cap, 0]);
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
        id
    }

    pub(crate) fn flow(&self, arc: usize) -> u64 {
        self.initial_cap[arc] - self.arcs[arc].cap
    }

    /// Sends up to `limit` units from `s` to `t` at minimum cost. Returns
    /// `(flow, cost)`.
    pub(crate) fn run(&mut self, s: usize, t: usize, limit: u64) -> (u64, f64) {
        let n = self.adj.len();
        let (mut flow, mut cost) = (0u64, 0.0f64);
        while flow < limit {
            let mut dist = vec![f64::INFINITY; n];
            let mut via = vec![usize::MAX; n];
            dist[s] = 0.0;
            // At most n - 1 rounds; stops early once nothing relaxes.
            for _ in 0..n {
                let mut changed = false;
                for u in 0..n {
                    if dist[u].is_infinite() {
                        continue;
                    }
                    for &a in &self.adj[u] {
                        let arc = &self.arcs[a];
                        if arc.cap == 0 {
                            continue;
                        }
                        let d = dist[u] + arc.cost;
                        if d < dist[arc.to] - 1e-15 * d.abs().max(1e-300) {
                            dist[arc.to] = d;
                            via[arc.to] = a;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if dist[t].is_infinite() {
                break;
            }
            let mut push = limit - flow;
            let mut v = t;
            while v != s {
                let a = via[v];
                push = push.min(self.arcs[a].cap);
                v = self.arcs[a ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let a = via[v];
                self.arcs[a].cap -= push;
                self.arcs[a ^ 1].cap += push;
                v = self.arcs[a ^ 1].to;
            }
            flow += push;
            cost += push as f64 * dist[t];
        }
        (flow, cost)
    }
}

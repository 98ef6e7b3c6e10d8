//! Time objective for one MoE layer and closed-form sharding analyses.
//!
//! The objective charges every routed token its point-to-point transfer time
//! four times (dispatch and combine, forward and backward), summed over all
//! device pairs, plus `(3 + f_ckpt)` times the forward compute time of the
//! busiest device. Units: bytes, FLOPs, seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::RoutingPlan;
use crate::topology::{Link, Topology};

/// All-to-All operations per layer per training step.
pub const ALL_TO_ALL_PASSES: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Bytes moved per token per All-to-All.
    pub v_comm: f64,
    /// Forward FLOPs per routed token.
    pub v_comp: f64,
    /// Device compute rate, FLOPs/second.
    pub b_comp: f64,
    /// 1 when activation checkpointing recomputes the forward pass.
    #[serde(default)]
    pub f_ckpt: u8,
}

impl CostParams {
    pub fn new(v_comm: f64, v_comp: f64, b_comp: f64, f_ckpt: u8) -> Result<Self> {
        let p = Self {
            v_comm,
            v_comp,
            b_comp,
            f_ckpt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("v_comm", self.v_comm),
            ("v_comp", self.v_comp),
            ("b_comp", self.b_comp),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.f_ckpt > 1 {
            return Err(Error::invalid(format!("f_ckpt must be 0 or 1, got {}", self.f_ckpt)));
        }
        Ok(())
    }

    /// Multiplier on the busiest device's forward time: 1 forward + 2 backward
    /// (+1 recompute).
    pub fn compute_multiplier(&self) -> f64 {
        3.0 + f64::from(self.f_ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub t_comm: f64,
    pub t_comp: f64,
    pub t_total: f64,
    pub per_device_fw_comp: Vec<f64>,
    pub per_device_recv_tokens: Vec<u64>,
}

impl CostBreakdown {
    pub fn max_recv_tokens(&self) -> u64 {
        self.per_device_recv_tokens.iter().copied().max().unwrap_or(0)
    }
}

/// Evaluates the communication + computation objective of a routing plan.
pub fn time_cost(plan: &RoutingPlan, topology: &Topology, params: &CostParams) -> Result<CostBreakdown> {
    let n = topology.n_devices();
    if plan.n_devices() != n {
        return Err(Error::ShapeMismatch(format!(
            "plan has {} devices, topology {n}",
            plan.n_devices()
        )));
    }
    // Token counts per link class are summed as integers first, so the
    // result does not depend on entry order.
    let (mut intra, mut inter) = (0u64, 0u64);
    let mut recv = vec![0u64; n];
    for e in plan.entries() {
        match topology.link(e.src, e.dst) {
            Link::Local => {}
            Link::Intra => intra += e.tokens,
            Link::Inter => inter += e.tokens,
        }
        recv[e.dst] += e.tokens;
    }
    Ok(breakdown(intra, inter, recv, topology, params))
}

/// Objective from per-link-class token totals and per-device receive counts.
pub(crate) fn breakdown(
    intra: u64,
    inter: u64,
    recv: Vec<u64>,
    topology: &Topology,
    params: &CostParams,
) -> CostBreakdown {
    let t_comm =
        ALL_TO_ALL_PASSES * params.v_comm * (intra as f64 / topology.b_intra + inter as f64 / topology.b_inter);
    let per_device_fw_comp: Vec<f64> = recv.iter().map(|&t| params.v_comp * t as f64 / params.b_comp).collect();
    let max_fw = per_device_fw_comp.iter().copied().fold(0.0, f64::max);
    let t_comp = params.compute_multiplier() * max_fw;
    CostBreakdown {
        t_comm,
        t_comp,
        t_total: t_comm + t_comp,
        per_device_fw_comp,
        per_device_recv_tokens: recv,
    }
}

/// Parallel dimensions and model sizes for the sharding analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub p_fsep: u64,
    pub p_ep: u64,
    pub p_fsdp: u64,
    /// Bytes of one expert's parameters.
    pub psi_expert: f64,
    /// Bytes of one layer's non-expert parameters.
    pub psi_other: f64,
    /// Bytes of the whole model's parameters.
    pub psi_all: f64,
    /// Experts materialised per device.
    pub capacity: u64,
    pub hidden: u64,
    pub intermediate: u64,
    pub topk: u64,
    pub tokens_per_device: u64,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u64,
    /// When set, `capacity * p_ep` must equal it.
    #[serde(default)]
    pub n_experts: Option<u64>,
}

fn default_bytes_per_element() -> u64 {
    2
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_fsep", self.p_fsep),
            ("p_ep", self.p_ep),
            ("p_fsdp", self.p_fsdp),
            ("capacity", self.capacity),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("topk", self.topk),
            ("tokens_per_device", self.tokens_per_device),
            ("bytes_per_element", self.bytes_per_element),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("psi_expert", self.psi_expert),
            ("psi_other", self.psi_other),
            ("psi_all", self.psi_all),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a non-negative size, got {v}")));
            }
        }
        Ok(())
    }

    /// The FSEP and FSDP+EP configurations describe the same cluster only if
    /// `p_ep * p_fsdp = p_fsep` (and `C * p_ep = E` when E is given).
    pub fn check_equivalence(&self) -> Result<()> {
        if self.p_ep * self.p_fsdp != self.p_fsep {
            return Err(Error::invalid(format!(
                "p_ep * p_fsdp = {} but p_fsep = {}",
                self.p_ep * self.p_fsdp,
                self.p_fsep
            )));
        }
        if let Some(e) = self.n_experts {
            if self.capacity * self.p_ep != e {
                return Err(Error::invalid(format!(
                    "capacity * p_ep = {} but E = {e}",
                    self.capacity * self.p_ep
                )));
            }
        }
        Ok(())
    }
}

/// Smallest per-device token count `S` for which expert compute
/// `S * K * 6 H H' / b_comp` covers the parameter prefetch
/// `3 C H H' bytes_per_element / net_bandwidth`. `H` and `H'` cancel:
/// `S = ceil(C * bytes_per_element * b_comp / (2 K net_bandwidth))`.
pub fn overlap_min_tokens(config: &AnalysisConfig, net_bandwidth: f64, b_comp: f64) -> Result<u64> {
    config.validate()?;
    for (name, v) in [("net_bandwidth", net_bandwidth), ("b_comp", b_comp)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    let num = config.capacity as f64 * config.bytes_per_element as f64 * b_comp;
    let den = 2.0 * config.topk as f64 * net_bandwidth;
    let exact = num / den;
    // Absorb the last-ulp error of the division before rounding up, so an
    // exactly integral threshold is not pushed to the next integer.
    let s = (exact * (1.0 - 4.0 * f64::EPSILON)).ceil();
    Ok((s as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommVolumes {
    /// Bytes each device exchanges per shard (or reshard) All-to-All.
    pub v_fsep: f64,
    /// Bytes each device gathers per FSDP unshard.
    pub v_fsdp: f64,
    pub ratio: f64,
}

pub fn comm_volume_ratio(config: &AnalysisConfig) -> Result<CommVolumes> {
    config.validate()?;
    config.check_equivalence()?;
    if config.p_fsdp == 1 {
        return Err(Error::UndefinedRatio);
    }
    let c = config.capacity as f64;
    let fsep = config.p_fsep as f64;
    let fsdp = config.p_fsdp as f64;
    let v_fsep = c * (fsep - 1.0) / fsep * config.psi_expert;
    let v_fsdp = (fsdp - 1.0) / fsdp * c * config.psi_expert;
    let ratio = ((fsep - 1.0) * fsdp) / (fsep * (fsdp - 1.0));
    Ok(CommVolumes { v_fsep, v_fsdp, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryFootprint {
    /// Fraction of the full optimizer state held per device.
    pub optimizer_fraction: f64,
    pub parameter_bytes: f64,
    pub gradient_bytes: f64,
}

/// Per-device model-state footprint with next-layer prefetch and delayed
/// gradient reduction: `psi_all / p_fsep + psi_other + 2 C psi_expert` for
/// both parameters and gradients.
///
/// `capacity = 0` is accepted and yields the plain fully-sharded footprint.
pub fn memory_footprint(config: &AnalysisConfig) -> Result<MemoryFootprint> {
    if config.p_fsep == 0 {
        return Err(Error::invalid("p_fsep must be positive"));
    }
    for (name, v) in [
        ("psi_expert", config.psi_expert),
        ("psi_other", config.psi_other),
        ("psi_all", config.psi_all),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{name} must be a non-negative size, got {v}")));
        }
    }
    let fsep = config.p_fsep as f64;
    let parameter_bytes = config.psi_all / fsep + config.psi_other + 2.0 * config.capacity as f64 * config.psi_expert;
    Ok(MemoryFootprint {
        optimizer_fraction: 1.0 / fsep,
        parameter_bytes,
        gradient_bytes: parameter_bytes,
    })
}

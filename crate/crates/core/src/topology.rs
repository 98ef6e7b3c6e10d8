//! Two-tier cluster topology: `n_nodes` nodes of `devices_per_node` devices.
//! Devices are numbered node-major, so node `n` holds the contiguous range
//! `n * devices_per_node .. (n + 1) * devices_per_node`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub n_nodes: usize,
    pub devices_per_node: usize,
    /// Intra-node unidirectional bandwidth, bytes/second.
    pub b_intra: f64,
    /// Inter-node unidirectional per-device bandwidth, bytes/second.
    pub b_inter: f64,
}

/// Kind of link a transfer between two devices crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// Source and destination coincide; no network transfer.
    Local,
    Intra,
    Inter,
}

impl Topology {
    pub fn new(n_nodes: usize, devices_per_node: usize, b_intra: f64, b_inter: f64) -> Result<Self> {
        let t = Self {
            n_nodes,
            devices_per_node,
            b_intra,
            b_inter,
        };
        t.validate()?;
        Ok(t)
    }

    /// Single node holding every device.
    pub fn single_node(n_devices: usize, b_intra: f64) -> Result<Self> {
        Self::new(1, n_devices, b_intra, b_intra)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.devices_per_node == 0 {
            return Err(Error::invalid("n_nodes and devices_per_node must be positive"));
        }
        for (name, bw) in [("b_intra", self.b_intra), ("b_inter", self.b_inter)] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be a positive finite bandwidth, got {bw}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_devices(&self) -> usize {
        self.n_nodes * self.devices_per_node
    }

    fn check(&self, device: usize) -> Result<()> {
        if device >= self.n_devices() {
            return Err(Error::DeviceOutOfRange {
                index: device,
                n_devices: self.n_devices(),
            });
        }
        Ok(())
    }

    pub fn node_of(&self, device: usize) -> Result<usize> {
        self.check(device)?;
        Ok(self.node(device))
    }

    /// Unchecked variant of [`Topology::node_of`] for hot loops over known-valid indices.
    #[inline]
    pub fn node(&self, device: usize) -> usize {
        device / self.devices_per_node
    }

    pub fn devices_on_node(&self, node: usize) -> Range<usize> {
        node * self.devices_per_node..(node + 1) * self.devices_per_node
    }

    #[inline]
    pub fn link(&self, i: usize, k: usize) -> Link {
        if i == k {
            Link::Local
        } else if self.node(i) == self.node(k) {
            Link::Intra
        } else {
            Link::Inter
        }
    }

    /// Bandwidth between devices `i` and `k`; `f64::INFINITY` for `i == k`,
    /// so a local transfer takes zero time.
    pub fn link_bandwidth(&self, i: usize, k: usize) -> Result<f64> {
        self.check(i)?;
        self.check(k)?;
        Ok(self.bandwidth(self.link(i, k)))
    }

    #[inline]
    pub fn bandwidth(&self, link: Link) -> f64 {
        match link {
            Link::Local => f64::INFINITY,
            Link::Intra => self.b_intra,
            Link::Inter => self.b_inter,
        }
    }
}

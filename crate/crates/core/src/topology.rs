//! Cluster model: nodes, GPUs and the three bandwidth-annotated link classes
//! the simulator schedules onto.
//!
//! Bandwidth is a single effective scalar per link class. The `*-measured`
//! presets are calibrated from timed 16 GiB transfers (16 * 2^30 bytes), so
//! `transfer_time(16 GiB)` reproduces the measured latency exactly. Inter-node
//! measurements are taken as point-to-point effective bandwidth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Payload size of the calibration transfers, interpreted as binary gigabytes.
pub const CALIBRATION_PAYLOAD_BYTES: u64 = 16 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// GPU-to-GPU fabric inside a node (NVLink or PCIe peer), modeled as a ring.
    IntraGpu,
    /// Host memory to GPU channel, one per GPU.
    HostGpu,
    /// The single NIC shared by all GPUs of a node.
    InterNode,
}

impl LinkKind {
    pub const ALL: [LinkKind; 3] = [LinkKind::IntraGpu, LinkKind::HostGpu, LinkKind::InterNode];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::IntraGpu => "intra_gpu",
            LinkKind::HostGpu => "host_gpu",
            LinkKind::InterNode => "inter_node",
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duplex {
    #[default]
    #[serde(alias = "full")]
    FullDuplex,
    #[serde(alias = "half")]
    HalfDuplex,
}

/// Named bandwidth presets. Measured presets map a timed 16 GiB transfer to
/// `16 GiB / latency`; theoretical presets are nominal link rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BandwidthPreset {
    Pcie4Measured,
    Nvlink3Theoretical,
    Ib100RdmaMeasured,
    Ib100IpoibMeasured,
    Eth10gMeasured,
    Eth1gMeasured,
    Pcie4Theoretical,
    Eth100gTheoretical,
}

impl BandwidthPreset {
    pub const ALL: [BandwidthPreset; 8] = [
        BandwidthPreset::Pcie4Measured,
        BandwidthPreset::Nvlink3Theoretical,
        BandwidthPreset::Ib100RdmaMeasured,
        BandwidthPreset::Ib100IpoibMeasured,
        BandwidthPreset::Eth10gMeasured,
        BandwidthPreset::Eth1gMeasured,
        BandwidthPreset::Pcie4Theoretical,
        BandwidthPreset::Eth100gTheoretical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BandwidthPreset::Pcie4Measured => "pcie4-measured",
            BandwidthPreset::Nvlink3Theoretical => "nvlink3-theoretical",
            BandwidthPreset::Ib100RdmaMeasured => "ib100-rdma-measured",
            BandwidthPreset::Ib100IpoibMeasured => "ib100-ipoib-measured",
            BandwidthPreset::Eth10gMeasured => "eth10g-measured",
            BandwidthPreset::Eth1gMeasured => "eth1g-measured",
            BandwidthPreset::Pcie4Theoretical => "pcie4-theoretical",
            BandwidthPreset::Eth100gTheoretical => "eth100g-theoretical",
        }
    }

    /// Measured 16 GiB transfer latency, for calibrated presets.
    pub fn measured_latency_s(self) -> Option<f64> {
        match self {
            BandwidthPreset::Pcie4Measured => Some(0.613),
            BandwidthPreset::Ib100RdmaMeasured => Some(0.949),
            BandwidthPreset::Ib100IpoibMeasured => Some(3.963),
            BandwidthPreset::Eth10gMeasured => Some(6.745),
            BandwidthPreset::Eth1gMeasured => Some(67.66),
            _ => None,
        }
    }

    pub fn bandwidth_bytes_per_s(self) -> f64 {
        if let Some(latency) = self.measured_latency_s() {
            return CALIBRATION_PAYLOAD_BYTES as f64 / latency;
        }
        match self {
            BandwidthPreset::Nvlink3Theoretical => 200e9,
            BandwidthPreset::Pcie4Theoretical => 32e9,
            BandwidthPreset::Eth100gTheoretical => 12.5e9,
            _ => unreachable!("measured presets handled above"),
        }
    }

    /// The link class this preset describes.
    pub fn natural_kind(self) -> LinkKind {
        match self {
            BandwidthPreset::Pcie4Measured | BandwidthPreset::Pcie4Theoretical => LinkKind::HostGpu,
            BandwidthPreset::Nvlink3Theoretical => LinkKind::IntraGpu,
            _ => LinkKind::InterNode,
        }
    }
}

impl FromStr for BandwidthPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BandwidthPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset {
                what: "bandwidth preset",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for BandwidthPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkClass {
    pub kind: LinkKind,
    pub bandwidth_bytes_per_s: f64,
    pub duplex: Duplex,
    /// Fixed per-transfer offset, 0 by default.
    pub latency_s: f64,
}

impl LinkClass {
    pub fn new(kind: LinkKind, bandwidth_bytes_per_s: f64) -> Self {
        LinkClass {
            kind,
            bandwidth_bytes_per_s,
            duplex: Duplex::FullDuplex,
            latency_s: 0.0,
        }
    }

    pub fn from_preset(kind: LinkKind, preset: BandwidthPreset) -> Self {
        LinkClass::new(kind, preset.bandwidth_bytes_per_s())
    }

    pub fn with_duplex(mut self, duplex: Duplex) -> Self {
        self.duplex = duplex;
        self
    }

    pub fn with_latency(mut self, latency_s: f64) -> Self {
        self.latency_s = latency_s;
        self
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        self.latency_s + bytes as f64 / self.bandwidth_bytes_per_s
    }
}

/// Immutable cluster description. `G = num_nodes * gpus_per_node`; every GPU
/// has one host channel and each node's GPUs share one NIC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    num_nodes: usize,
    gpus_per_node: usize,
    links: Vec<LinkClass>,
}

impl ClusterTopology {
    /// Links are keyed by kind; at most one class per kind. The inter-node
    /// link is required for multi-node clusters and the intra-node fabric for
    /// nodes with more than one GPU.
    pub fn new(num_nodes: usize, gpus_per_node: usize, links: Vec<LinkClass>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::config("topology.num_nodes", "must be >= 1"));
        }
        if gpus_per_node == 0 {
            return Err(Error::config("topology.gpus_per_node", "must be >= 1"));
        }
        let mut sorted = links;
        sorted.sort_by_key(|l| l.kind);
        for pair in sorted.windows(2) {
            if pair[0].kind == pair[1].kind {
                return Err(Error::config(
                    format!("topology.{}", pair[0].kind),
                    "link class configured twice",
                ));
            }
        }
        for link in &sorted {
            if !(link.bandwidth_bytes_per_s > 0.0 && link.bandwidth_bytes_per_s.is_finite()) {
                return Err(Error::config(
                    format!("topology.{}.bandwidth_bytes_per_s", link.kind),
                    "must be positive and finite",
                ));
            }
            if !(link.latency_s >= 0.0 && link.latency_s.is_finite()) {
                return Err(Error::config(
                    format!("topology.{}.latency_s", link.kind),
                    "must be >= 0",
                ));
            }
        }
        let has = |k: LinkKind| sorted.iter().any(|l| l.kind == k);
        if num_nodes > 1 && !has(LinkKind::InterNode) {
            return Err(Error::config(
                "topology.inter_node",
                "multi-node cluster needs an inter-node link",
            ));
        }
        if gpus_per_node > 1 && !has(LinkKind::IntraGpu) {
            return Err(Error::config(
                "topology.intra_gpu",
                "nodes with several GPUs need an intra-node link",
            ));
        }
        Ok(ClusterTopology {
            num_nodes,
            gpus_per_node,
            links: sorted,
        })
    }

    /// NVLink 3 fabric, measured PCIe 4 host channel and the given NIC preset.
    pub fn commodity(num_nodes: usize, gpus_per_node: usize, nic: BandwidthPreset) -> Result<Self> {
        ClusterTopology::new(
            num_nodes,
            gpus_per_node,
            vec![
                LinkClass::from_preset(LinkKind::IntraGpu, BandwidthPreset::Nvlink3Theoretical),
                LinkClass::from_preset(LinkKind::HostGpu, BandwidthPreset::Pcie4Measured),
                LinkClass::from_preset(LinkKind::InterNode, nic),
            ],
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn gpus_per_node(&self) -> usize {
        self.gpus_per_node
    }

    pub fn total_gpus(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn links(&self) -> &[LinkClass] {
        &self.links
    }

    pub fn link(&self, kind: LinkKind) -> Result<&LinkClass> {
        self.links
            .iter()
            .find(|l| l.kind == kind)
            .ok_or(Error::UnknownLinkClass(kind))
    }

    pub fn effective_bandwidth(&self, kind: LinkKind) -> Result<f64> {
        Ok(self.link(kind)?.bandwidth_bytes_per_s)
    }

    pub fn transfer_time(&self, bytes: u64, kind: LinkKind) -> Result<f64> {
        Ok(self.link(kind)?.transfer_time(bytes))
    }

    /// Copy of this topology with one link class replaced (or added).
    pub fn with_link(&self, link: LinkClass) -> Result<Self> {
        let mut links: Vec<LinkClass> = self.links.iter().copied().filter(|l| l.kind != link.kind).collect();
        links.push(link);
        ClusterTopology::new(self.num_nodes, self.gpus_per_node, links)
    }

    pub fn with_nodes(&self, num_nodes: usize) -> Result<Self> {
        ClusterTopology::new(num_nodes, self.gpus_per_node, self.links.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GIB16: u64 = CALIBRATION_PAYLOAD_BYTES;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn measured_presets_match_reported_bandwidths() {
        let pcie = BandwidthPreset::Pcie4Measured.bandwidth_bytes_per_s();
        assert!((pcie / 1e9 - 28.0).abs() < 0.05, "{pcie}");
        let rdma = BandwidthPreset::Ib100RdmaMeasured.bandwidth_bytes_per_s();
        assert!((rdma / 1e9 - 18.1).abs() < 0.05, "{rdma}");
        let eth1g = BandwidthPreset::Eth1gMeasured.bandwidth_bytes_per_s();
        assert!((eth1g / 1e9 - 0.254).abs() < 0.0005, "{eth1g}");
    }

    #[test]
    fn calibration_round_trip_for_every_measured_preset() {
        for preset in BandwidthPreset::ALL {
            let Some(latency) = preset.measured_latency_s() else { continue };
            let link = LinkClass::from_preset(preset.natural_kind(), preset);
            assert!(rel(link.transfer_time(GIB16), latency) < 1e-9, "{preset}");
        }
    }

    #[test]
    fn transfer_time_examples() {
        let topo = ClusterTopology::commodity(2, 8, BandwidthPreset::Eth10gMeasured).unwrap();
        for kind in LinkKind::ALL {
            assert_eq!(topo.transfer_time(0, kind).unwrap(), 0.0);
        }
        assert!(rel(topo.transfer_time(GIB16, LinkKind::HostGpu).unwrap(), 0.613) < 1e-9);
        let t = topo.transfer_time(2 * GIB16, LinkKind::InterNode).unwrap();
        assert!(rel(t, 13.49) < 1e-9, "{t}");
    }

    #[test]
    fn latency_offset_applies_to_nonempty_transfers_only() {
        let link = LinkClass::new(LinkKind::InterNode, 1e9).with_latency(0.5);
        assert_eq!(link.transfer_time(0), 0.0);
        assert!((link.transfer_time(1_000_000_000) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn preset_topologies_are_ordered_like_commodity_clusters() {
        for nic in BandwidthPreset::ALL.into_iter().filter(|p| p.natural_kind() == LinkKind::InterNode) {
            let topo = ClusterTopology::commodity(2, 8, nic).unwrap();
            let intra = topo.effective_bandwidth(LinkKind::IntraGpu).unwrap();
            let host = topo.effective_bandwidth(LinkKind::HostGpu).unwrap();
            let inter = topo.effective_bandwidth(LinkKind::InterNode).unwrap();
            assert!(intra >= host && host > inter, "{nic}");
        }
        // nominal ratios against 100 Gbps Ethernet: 16x, 2.56x, 1x
        let eth = BandwidthPreset::Eth100gTheoretical.bandwidth_bytes_per_s();
        assert_eq!(BandwidthPreset::Nvlink3Theoretical.bandwidth_bytes_per_s() / eth, 16.0);
        assert!((BandwidthPreset::Pcie4Theoretical.bandwidth_bytes_per_s() / eth - 2.5).abs() < 0.1);
    }

    #[test]
    fn unknown_link_and_bad_config_are_errors() {
        let topo = ClusterTopology::new(1, 1, vec![LinkClass::new(LinkKind::HostGpu, 1e9)]).unwrap();
        assert!(matches!(
            topo.effective_bandwidth(LinkKind::InterNode),
            Err(Error::UnknownLinkClass(LinkKind::InterNode))
        ));
        assert!(ClusterTopology::new(0, 8, vec![]).is_err());
        assert!(ClusterTopology::new(2, 1, vec![LinkClass::new(LinkKind::HostGpu, 1e9)]).is_err());
        assert!(ClusterTopology::new(1, 1, vec![LinkClass::new(LinkKind::HostGpu, 0.0)]).is_err());
        assert!("eth400g".parse::<BandwidthPreset>().is_err());
        assert_eq!("eth1g-measured".parse::<BandwidthPreset>().unwrap(), BandwidthPreset::Eth1gMeasured);
    }

    #[test]
    fn total_gpus_is_product() {
        let topo = ClusterTopology::commodity(4, 8, BandwidthPreset::Ib100RdmaMeasured).unwrap();
        assert_eq!(topo.total_gpus(), 32);
    }

    proptest! {
        #[test]
        fn transfer_time_monotone(a in 0u64..1u64 << 40, b in 0u64..1u64 << 40, bw1 in 1e6f64..1e12, bw2 in 1e6f64..1e12) {
            let (small, large) = if a <= b { (a, b) } else { (b, a) };
            let link = LinkClass::new(LinkKind::InterNode, bw1);
            prop_assert!(link.transfer_time(small) <= link.transfer_time(large));
            let (slow, fast) = if bw1 <= bw2 { (bw1, bw2) } else { (bw2, bw1) };
            prop_assert!(
                LinkClass::new(LinkKind::InterNode, fast).transfer_time(large)
                    <= LinkClass::new(LinkKind::InterNode, slow).transfer_time(large)
            );
        }
    }
}

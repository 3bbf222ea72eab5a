//! Strategy plans, shard geometry and per-tier memory footprints.
//!
//! Every parameter tensor is sharded on its own and padded up to a multiple
//! of the number of ranks it is split across, the way real sharded-DP
//! runtimes flatten and pad. Both the simulator and the analytical model use
//! [`ShardGeometry`], so byte counts compare exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ClusterTopology, LinkKind};
use crate::workload::{ModelSpec, ParamId, ParamPart};

pub const DEFAULT_GPU_CAPACITY_BYTES: u64 = 48 << 30;
pub const DEFAULT_HOST_CAPACITY_BYTES: u64 = 512 << 30;
/// Gathered-layer buffers live at once: the layer being computed plus one prefetched.
pub const PREFETCH_SLOTS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Zero2,
    Zero3,
    #[serde(rename = "mics")]
    MiCS,
    #[serde(rename = "zeropp")]
    ZeroPP,
    Fcdp,
    FcdpComm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Zero2,
        StrategyKind::Zero3,
        StrategyKind::MiCS,
        StrategyKind::ZeroPP,
        StrategyKind::Fcdp,
        StrategyKind::FcdpComm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Zero2 => "zero2",
            StrategyKind::Zero3 => "zero3",
            StrategyKind::MiCS => "mics",
            StrategyKind::ZeroPP => "zeropp",
            StrategyKind::Fcdp => "fcdp",
            StrategyKind::FcdpComm => "fcdp-comm",
        }
    }

    /// Backed by the host-memory parameter cache.
    pub fn uses_host_cache(self) -> bool {
        matches!(self, StrategyKind::Fcdp | StrategyKind::FcdpComm)
    }

    /// Serves backward reconstruction without inter-node all-gather.
    pub fn caches_for_backward(self) -> bool {
        matches!(self, StrategyKind::ZeroPP | StrategyKind::Fcdp | StrategyKind::FcdpComm)
    }

    pub fn is_peft_aware(self) -> bool {
        self == StrategyKind::FcdpComm
    }

    /// Capability row for the strategy comparison matrix.
    pub fn traits(self) -> StrategyTraits {
        let (full_shard, cache_tier, gpu_memory, fwd_ag, bwd_ag) = match self {
            StrategyKind::Zero2 => ("no", "-", "W (Gx)", "0", "W (param sync)"),
            StrategyKind::Zero3 => ("yes", "-", "W/G (1x)", "W", "W"),
            StrategyKind::MiCS => ("subgroup", "-", "W/S", "W (subgroup scope)", "W (subgroup scope)"),
            StrategyKind::ZeroPP => ("yes", "gpu", "W/G + W/g", "W", "0"),
            StrategyKind::Fcdp => ("yes", "cpu", "W/G (1x)", "W", "0"),
            StrategyKind::FcdpComm => ("yes", "cpu", "W/G (1x)", "W_t", "0"),
        };
        StrategyTraits {
            strategy: self.name(),
            full_shard,
            cache_tier,
            peft_aware: self.is_peft_aware(),
            gpu_memory,
            fwd_ag_inter: fwd_ag,
            bwd_ag_inter: bwd_ag,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyTraits {
    pub strategy: &'static str,
    pub full_shard: &'static str,
    pub cache_tier: &'static str,
    pub peft_aware: bool,
    pub gpu_memory: &'static str,
    pub fwd_ag_inter: &'static str,
    pub bwd_ag_inter: &'static str,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let kind = match norm.as_str() {
            "zero2" | "zero-2" => StrategyKind::Zero2,
            "zero3" | "zero-3" => StrategyKind::Zero3,
            "mics" => StrategyKind::MiCS,
            "zeropp" | "zero++" => StrategyKind::ZeroPP,
            "fcdp" | "fcdp-sched" => StrategyKind::Fcdp,
            "fcdp-comm" | "fcdpcomm" => StrategyKind::FcdpComm,
            _ => {
                return Err(Error::UnknownPreset {
                    what: "strategy",
                    name: s.to_string(),
                })
            }
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub kind: StrategyKind,
    /// GPUs per sharding subgroup (MiCS only).
    pub subgroup_size: Option<usize>,
    /// GPU-cache admission threshold, as a fraction of capacity.
    pub tau: f64,
    pub host_cache_enabled: bool,
    pub gpu_capacity_bytes: u64,
    pub host_capacity_bytes: u64,
}

impl StrategyPlan {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyPlan {
            kind,
            subgroup_size: None,
            tau: 0.0,
            host_cache_enabled: kind.uses_host_cache(),
            gpu_capacity_bytes: DEFAULT_GPU_CAPACITY_BYTES,
            host_capacity_bytes: DEFAULT_HOST_CAPACITY_BYTES,
        }
    }

    pub fn mics(subgroup_size: usize) -> Self {
        StrategyPlan {
            subgroup_size: Some(subgroup_size),
            ..StrategyPlan::new(StrategyKind::MiCS)
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_gpu_capacity(mut self, bytes: u64) -> Self {
        self.gpu_capacity_bytes = bytes;
        self
    }

    pub fn with_host_capacity(mut self, bytes: u64) -> Self {
        self.host_capacity_bytes = bytes;
        self
    }

    /// Checks the plan against a topology: subgroup divisibility, `tau` range,
    /// host-cache requirements.
    pub fn validate(&self, topo: &ClusterTopology) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidPlan(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.kind.uses_host_cache() {
            if !self.host_cache_enabled {
                return Err(Error::InvalidPlan(format!("{} requires the host cache", self.kind)));
            }
            topo.link(LinkKind::HostGpu)?;
        }
        let g = topo.gpus_per_node();
        let total = topo.total_gpus();
        match (self.kind, self.subgroup_size) {
            (StrategyKind::MiCS, None) => Err(Error::InvalidPlan("mics needs subgroup_size".into())),
            (StrategyKind::MiCS, Some(s)) => {
                if s == 0 || !total.is_multiple_of(s) {
                    return Err(Error::InvalidPlan(format!("subgroup_size {s} does not divide G = {total}")));
                }
                if !s.is_multiple_of(g) && !g.is_multiple_of(s) {
                    return Err(Error::InvalidPlan(format!(
                        "subgroup_size {s} is neither a multiple nor a divisor of g = {g}"
                    )));
                }
                Ok(())
            }
            (_, Some(_)) => Err(Error::InvalidPlan(format!("subgroup_size is only meaningful for mics, not {}", self.kind))),
            _ => Ok(()),
        }
    }
}

pub fn pad_to(bytes: u64, ranks: u64) -> u64 {
    bytes.div_ceil(ranks) * ranks
}

/// How parameters and gradients are split for one (plan, topology) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardGeometry {
    pub num_nodes: u64,
    pub gpus_per_node: u64,
    pub total_gpus: u64,
    /// Ranks a parameter tensor is sharded across at rest.
    pub param_ranks: u64,
    /// Ranks gradients and optimizer state are sharded across.
    pub state_ranks: u64,
    pub dtype_bytes: u64,
}

impl ShardGeometry {
    pub fn new(plan: &StrategyPlan, topo: &ClusterTopology, model: &ModelSpec) -> Self {
        let total = topo.total_gpus() as u64;
        let (param_ranks, state_ranks) = match plan.kind {
            StrategyKind::MiCS => {
                let s = plan.subgroup_size.unwrap_or(total as usize) as u64;
                (s, s)
            }
            // replicas are synchronized by a global all-gather of G shards
            _ => (total, total),
        };
        ShardGeometry {
            num_nodes: topo.num_nodes() as u64,
            gpus_per_node: topo.gpus_per_node() as u64,
            total_gpus: total,
            param_ranks,
            state_ranks,
            dtype_bytes: model.param_bytes_per_element,
        }
    }

    /// Padded size of a parameter tensor as reconstructed by its all-gather.
    pub fn param_bytes(&self, model: &ModelSpec, id: ParamId) -> u64 {
        let raw = model.param_bytes(id);
        if raw == 0 {
            return 0;
        }
        pad_to(raw, self.param_ranks)
    }

    /// Padded gradient payload of a layer's trainable tensor, as reduce-scattered
    /// across the state-sharding group.
    pub fn grad_bytes(&self, model: &ModelSpec, layer: usize) -> u64 {
        let raw = model.param_bytes(ParamId::new(layer, ParamPart::Trainable));
        if raw == 0 {
            return 0;
        }
        pad_to(raw, self.state_ranks)
    }

    pub fn layer_bytes(&self, model: &ModelSpec, layer: usize) -> u64 {
        [ParamPart::Trainable, ParamPart::Frozen]
            .into_iter()
            .map(|p| self.param_bytes(model, ParamId::new(layer, p)))
            .sum()
    }

    /// Padded `bytes(W)`.
    pub fn model_bytes(&self, model: &ModelSpec) -> u64 {
        (0..model.num_layers()).map(|l| self.layer_bytes(model, l)).sum()
    }

    /// Padded `bytes(W_t)`, in the param geometry.
    pub fn trainable_bytes(&self, model: &ModelSpec) -> u64 {
        (0..model.num_layers())
            .map(|l| self.param_bytes(model, ParamId::new(l, ParamPart::Trainable)))
            .sum()
    }

    pub fn max_layer_bytes(&self, model: &ModelSpec) -> u64 {
        (0..model.num_layers()).map(|l| self.layer_bytes(model, l)).max().unwrap_or(0)
    }

    /// Trainable bytes padded for the optimizer-state sharding.
    pub fn state_trainable_bytes(&self, model: &ModelSpec) -> u64 {
        (0..model.num_layers()).map(|l| self.grad_bytes(model, l)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub param_shard_bytes: u64,
    pub grad_shard_bytes: u64,
    pub optimizer_shard_bytes: u64,
    /// Shards + gradients + optimizer state.
    pub gpu_persistent_bytes: u64,
    /// Strategy-owned parameter cache on the GPU.
    pub gpu_cache_bytes: u64,
    /// Reserved gathered-layer buffers plus activations at the configured batch.
    pub gpu_transient_peak_bytes: u64,
    pub host_cache_bytes_per_node: u64,
    pub gpu_capacity_bytes: u64,
    pub host_capacity_bytes: u64,
}

impl MemoryFootprint {
    pub fn gpu_total_bytes(&self) -> u64 {
        self.gpu_persistent_bytes + self.gpu_cache_bytes + self.gpu_transient_peak_bytes
    }

    pub fn gpu_feasible(&self) -> bool {
        self.gpu_total_bytes() <= self.gpu_capacity_bytes
    }

    pub fn host_feasible(&self) -> bool {
        self.host_cache_bytes_per_node <= self.host_capacity_bytes
    }

    pub fn feasible(&self) -> bool {
        self.gpu_feasible() && self.host_feasible()
    }
}

/// Bytes of the double-buffered gathered-layer pool (zero for replicated params).
pub fn gather_pool_bytes(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> u64 {
    if plan.kind == StrategyKind::Zero2 {
        return 0;
    }
    PREFETCH_SLOTS * ShardGeometry::new(plan, topo, model).max_layer_bytes(model)
}

/// Per-GPU persistent bytes: parameter shard, gradient shard, optimizer shard.
fn persistent_parts(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> (u64, u64, u64) {
    let geo = ShardGeometry::new(plan, topo, model);
    let param = match plan.kind {
        StrategyKind::Zero2 => geo.model_bytes(model),
        _ => geo.model_bytes(model) / geo.param_ranks,
    };
    let state_bytes = geo.state_trainable_bytes(model);
    let grad = state_bytes / geo.state_ranks;
    let opt = model.optimizer_state_multiplier * state_bytes / geo.state_ranks;
    (param, grad, opt)
}

pub fn memory_footprint(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<MemoryFootprint> {
    plan.validate(topo)?;
    Ok(footprint_at_batch(plan, model, topo, model.batch_per_gpu))
}

fn footprint_at_batch(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology, batch: u64) -> MemoryFootprint {
    let geo = ShardGeometry::new(plan, topo, model);
    let (param, grad, opt) = persistent_parts(plan, model, topo);
    let gpu_cache = match plan.kind {
        StrategyKind::ZeroPP => geo.model_bytes(model) / geo.gpus_per_node,
        _ => 0,
    };
    let host = if plan.kind.uses_host_cache() {
        geo.model_bytes(model)
    } else {
        0
    };
    MemoryFootprint {
        param_shard_bytes: param,
        grad_shard_bytes: grad,
        optimizer_shard_bytes: opt,
        gpu_persistent_bytes: param + grad + opt,
        gpu_cache_bytes: gpu_cache,
        gpu_transient_peak_bytes: gather_pool_bytes(plan, model, topo) + model.activation_bytes(batch),
        host_cache_bytes_per_node: host,
        gpu_capacity_bytes: plan.gpu_capacity_bytes,
        host_capacity_bytes: plan.host_capacity_bytes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFeasibility {
    /// Largest power-of-two per-GPU batch that fits; 0 when nothing fits.
    pub max_batch: u64,
    pub oom: bool,
}

/// Upper end of the power-of-two search.
pub const MAX_BATCH_SEARCH: u64 = 1 << 20;

/// Doubles the per-GPU batch from 1 while the GPU footprint fits.
pub fn max_feasible_batch(
    plan: &StrategyPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    gpu_capacity_bytes: u64,
) -> Result<BatchFeasibility> {
    plan.validate(topo)?;
    let fits = |b: u64| footprint_at_batch(plan, model, topo, b).gpu_total_bytes() <= gpu_capacity_bytes;
    if !fits(1) {
        return Ok(BatchFeasibility { max_batch: 0, oom: true });
    }
    let mut batch = 1;
    while batch < MAX_BATCH_SEARCH && fits(batch * 2) {
        batch *= 2;
    }
    Ok(BatchFeasibility { max_batch: batch, oom: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::BandwidthPreset;
    use crate::workload::{apply_lora_mask, model_preset, LayerSpec};
    use proptest::prelude::*;

    fn topo(n: usize, g: usize) -> ClusterTopology {
        ClusterTopology::commodity(n, g, BandwidthPreset::Ib100RdmaMeasured).unwrap()
    }

    #[test]
    fn zero3_shard_for_30b_on_32_gpus() {
        let m = model_preset("gpt30b").unwrap();
        let fp = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &topo(4, 8)).unwrap();
        assert_eq!(fp.param_shard_bytes / 2, 937_500_000);
        assert_eq!(fp.param_shard_bytes, 1_875_000_000);
        let fcdp = memory_footprint(&StrategyPlan::new(StrategyKind::Fcdp), &m, &topo(4, 8)).unwrap();
        assert_eq!(fcdp.param_shard_bytes, fp.param_shard_bytes);
        assert_eq!(fcdp.gpu_total_bytes(), fp.gpu_total_bytes());
    }

    #[test]
    fn zeropp_cache_and_mics_subgroup() {
        let m = model_preset("gpt30b").unwrap();
        let pp = memory_footprint(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &topo(4, 8)).unwrap();
        assert_eq!(pp.gpu_cache_bytes, 7_500_000_000);
        let mics = memory_footprint(&StrategyPlan::mics(8), &m, &topo(4, 8)).unwrap();
        assert_eq!(mics.param_shard_bytes / 2, 3_750_000_000);
    }

    #[test]
    fn fcdp_host_cache_is_model_bytes_per_node() {
        let m = model_preset("gpt10b").unwrap();
        let fp = memory_footprint(&StrategyPlan::new(StrategyKind::Fcdp), &m, &topo(2, 8)).unwrap();
        assert_eq!(fp.host_cache_bytes_per_node, 20_000_000_000);
        assert_eq!(fp.gpu_cache_bytes, 0);
    }

    #[test]
    fn zero2_replicates_params() {
        let m = model_preset("gpt10b").unwrap();
        let t = topo(2, 8);
        let z2 = memory_footprint(&StrategyPlan::new(StrategyKind::Zero2), &m, &t).unwrap();
        let z3 = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &t).unwrap();
        assert_eq!(z2.param_shard_bytes, 16 * z3.param_shard_bytes);
        assert_eq!(z2.grad_shard_bytes, z3.grad_shard_bytes);
    }

    #[test]
    fn mics_full_group_is_zero3() {
        let m = apply_lora_mask(&model_preset("gpt15b").unwrap(), 0.01).unwrap();
        let t = topo(4, 8);
        let z3 = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &t).unwrap();
        let mics = memory_footprint(&StrategyPlan::mics(32), &m, &t).unwrap();
        assert_eq!(z3, mics);
    }

    #[test]
    fn frozen_params_carry_no_state() {
        let m = apply_lora_mask(&model_preset("gpt10b").unwrap(), 0.01).unwrap();
        let fp = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &topo(2, 8)).unwrap();
        assert_eq!(fp.grad_shard_bytes, 200_000_000 / 16);
        assert_eq!(fp.optimizer_shard_bytes, 6 * 200_000_000 / 16);
    }

    #[test]
    fn plan_validation() {
        let t = topo(4, 8);
        assert!(StrategyPlan::mics(8).validate(&t).is_ok());
        assert!(StrategyPlan::mics(4).validate(&t).is_ok());
        assert!(StrategyPlan::mics(16).validate(&t).is_ok());
        assert!(StrategyPlan::mics(12).validate(&t).is_err());
        assert!(StrategyPlan::mics(64).validate(&t).is_err());
        assert!(StrategyPlan::new(StrategyKind::MiCS).validate(&t).is_err());
        assert!(StrategyPlan::new(StrategyKind::Fcdp).with_tau(1.5).validate(&t).is_err());
        let mut p = StrategyPlan::new(StrategyKind::FcdpComm);
        p.host_cache_enabled = false;
        assert!(p.validate(&t).is_err());
        let mut z3 = StrategyPlan::new(StrategyKind::Zero3);
        z3.subgroup_size = Some(8);
        assert!(z3.validate(&t).is_err());
        assert_eq!("zero++".parse::<StrategyKind>().unwrap(), StrategyKind::ZeroPP);
        assert_eq!("fcdp_comm".parse::<StrategyKind>().unwrap(), StrategyKind::FcdpComm);
        assert!("zero4".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn max_batch_oom_and_parity() {
        let m = model_preset("gpt30b").unwrap().with_coefficients(0.0, 0.0, 100_000_000);
        let t = topo(2, 8);
        let z3 = max_feasible_batch(&StrategyPlan::new(StrategyKind::Zero3), &m, &t, 48 << 30).unwrap();
        let fcdp = max_feasible_batch(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t, 48 << 30).unwrap();
        assert_eq!(z3, fcdp);
        assert!(!z3.oom && z3.max_batch >= 1);
        // a cache larger than the remaining headroom leaves nothing for batch 1
        let tight = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &t).unwrap();
        let capacity = tight.gpu_persistent_bytes + tight.gpu_transient_peak_bytes;
        let pp = max_feasible_batch(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &t, capacity).unwrap();
        assert_eq!(pp, BatchFeasibility { max_batch: 0, oom: true });
    }

    #[test]
    fn doubling_activations_halves_or_keeps_batch() {
        let t = topo(2, 8);
        let plan = StrategyPlan::new(StrategyKind::Zero3);
        for act in [10_000_000u64, 37_000_000, 123_456_789] {
            let m1 = model_preset("gpt10b").unwrap().with_coefficients(0.0, 0.0, act);
            let m2 = model_preset("gpt10b").unwrap().with_coefficients(0.0, 0.0, 2 * act);
            let b1 = max_feasible_batch(&plan, &m1, &t, 48 << 30).unwrap().max_batch;
            let b2 = max_feasible_batch(&plan, &m2, &t, 48 << 30).unwrap().max_batch;
            assert!(b2 == b1 || b2 * 2 == b1, "{b1} {b2}");
        }
    }

    proptest! {
        #[test]
        fn footprint_ordering(
            counts in prop::collection::vec(10_000u64..50_000_000, 1..8),
            n in 1usize..5,
            g_pow in 0u32..4,
            frac in 0.001f64..=1.0,
            act in 0u64..10_000_000,
        ) {
            let g = 1usize << g_pow;
            let t = topo(n, g);
            let layers = counts.iter().enumerate().map(|(i, &c)| LayerSpec::new(i, c)).collect();
            let m = apply_lora_mask(&ModelSpec::new("p", layers, 2).unwrap(), frac).unwrap()
                .with_coefficients(0.0, 0.0, act);
            let fp = |p: StrategyPlan| memory_footprint(&p, &m, &t).unwrap();
            let z3 = fp(StrategyPlan::new(StrategyKind::Zero3));
            let fcdp = fp(StrategyPlan::new(StrategyKind::Fcdp));
            let pp = fp(StrategyPlan::new(StrategyKind::ZeroPP));
            let mics_g = fp(StrategyPlan::mics(g));
            let mics_all = fp(StrategyPlan::mics(n * g));
            prop_assert_eq!(z3.gpu_total_bytes(), fcdp.gpu_total_bytes());
            prop_assert!(z3.gpu_total_bytes() <= pp.gpu_total_bytes());
            prop_assert_eq!(mics_all, z3);
            // with full fine-tuning the subgroup's replicated optimizer state dominates
            if n >= 2 && frac == 1.0 {
                prop_assert!(pp.gpu_total_bytes() <= mics_g.gpu_total_bytes());
            }
            let z2 = fp(StrategyPlan::new(StrategyKind::Zero2));
            prop_assert_eq!(z2.param_shard_bytes, (n * g) as u64 * z3.param_shard_bytes);

            let cap = 4 * z3.gpu_total_bytes() / 3 + 1;
            let bf = max_feasible_batch(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t, cap).unwrap();
            let bp = max_feasible_batch(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &t, cap).unwrap();
            prop_assert!(bf.max_batch >= bp.max_batch);
        }
    }
}

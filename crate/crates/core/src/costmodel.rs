//! Closed-form communication volumes and a perfect-overlap time bound.
//!
//! Volumes are per node, in bytes: a collective over `n` nodes of payload `S`
//! moves `(n-1)/n * S` into each node over its NIC. Padding follows
//! [`ShardGeometry`], so these numbers compare exactly with simulated bytes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::schedule::tau_admission;
use crate::strategy::{max_feasible_batch, memory_footprint, BatchFeasibility, MemoryFootprint, ShardGeometry, StrategyKind, StrategyPlan, StrategyTraits};
use crate::topology::{ClusterTopology, Duplex, LinkKind};
use crate::workload::{ModelSpec, ParamId, ParamPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommVolume {
    pub fwd_ag_inter: u64,
    pub bwd_ag_inter: u64,
    pub reduce_scatter_inter: u64,
    /// ZeRO-2 parameter broadcast after the step.
    pub param_sync_inter: u64,
    pub intra_node_total: u64,
    pub h2d_total: u64,
    pub d2h_total: u64,
}

impl CommVolume {
    pub fn inter_node_total(&self) -> u64 {
        self.fwd_ag_inter + self.bwd_ag_inter + self.reduce_scatter_inter + self.param_sync_inter
    }
}

/// Per-node span of the parameter gather and gradient reduce-scatter.
struct Spans {
    g: u64,
    ag_nodes: u64,
    ag_local: u64,
}

impl Spans {
    fn new(plan: &StrategyPlan, geo: &ShardGeometry) -> Self {
        let g = geo.gpus_per_node;
        let (ag_nodes, ag_local) = match plan.kind {
            StrategyKind::MiCS if geo.param_ranks <= g => (1, geo.param_ranks),
            StrategyKind::MiCS => (geo.param_ranks / g, g),
            _ => (geo.num_nodes, g),
        };
        Spans { g, ag_nodes, ag_local }
    }

    fn inter(&self, s: u64) -> u64 {
        (self.ag_nodes - 1) * s / self.ag_nodes
    }

    fn intra(&self, s: u64) -> u64 {
        self.g * (self.ag_local - 1) * s / self.ag_local
    }

    /// Reassembly inside a node from host shards or a node-local replica.
    fn node_intra(&self, s: u64) -> u64 {
        (self.g - 1) * s
    }
}

/// Volumes for iteration `iteration` (1-based) at `tau = 0`.
pub fn comm_volume(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology, iteration: u64) -> Result<CommVolume> {
    plan.validate(topo)?;
    Ok(volume(plan, model, topo, iteration, &vec![false; model.num_layers()]))
}

fn volume(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology, iteration: u64, admitted: &[bool]) -> CommVolume {
    let geo = ShardGeometry::new(plan, topo, model);
    let sp = Spans::new(plan, &geo);
    let mut v = CommVolume::default();
    let bytes = |l: usize, part: ParamPart| geo.param_bytes(model, ParamId::new(l, part));
    for l in 0..model.num_layers() {
        let s = geo.layer_bytes(model, l);
        let st = bytes(l, ParamPart::Trainable);
        let sf = bytes(l, ParamPart::Frozen);
        let grad = geo.grad_bytes(model, l);
        v.reduce_scatter_inter += sp.inter(grad);
        v.intra_node_total += sp.intra(grad);
        match plan.kind {
            StrategyKind::Zero2 => {
                v.param_sync_inter += sp.inter(s);
                v.intra_node_total += sp.intra(s);
            }
            StrategyKind::Zero3 | StrategyKind::MiCS => {
                v.fwd_ag_inter += sp.inter(s);
                v.bwd_ag_inter += sp.inter(s);
                v.intra_node_total += 2 * sp.intra(s);
            }
            StrategyKind::ZeroPP => {
                v.fwd_ag_inter += sp.inter(s);
                v.intra_node_total += sp.intra(s) + sp.node_intra(s);
            }
            StrategyKind::Fcdp | StrategyKind::FcdpComm => {
                // (dirty bytes gathered, clean bytes loaded from host, bytes written back)
                let (dirty, clean, written) = if iteration <= 1 {
                    let written = if admitted[l] && plan.kind == StrategyKind::FcdpComm {
                        sf
                    } else if admitted[l] && st > 0 {
                        0
                    } else {
                        s
                    };
                    (s, 0, written)
                } else if plan.kind == StrategyKind::Fcdp {
                    if st > 0 {
                        (s, 0, if admitted[l] { 0 } else { s })
                    } else {
                        (0, s, 0)
                    }
                } else {
                    (st, sf, if admitted[l] { 0 } else { st })
                };
                v.fwd_ag_inter += sp.inter(dirty);
                v.intra_node_total += sp.intra(dirty) + sp.node_intra(clean);
                v.h2d_total += clean;
                v.d2h_total += written;
                if !admitted[l] {
                    v.h2d_total += s;
                    v.intra_node_total += sp.node_intra(s);
                }
            }
        }
    }
    v
}

/// Lower bound on iteration time with perfect overlap: the largest of total
/// compute and each link class's busy time. Uses the `tau` admission of the
/// plan for host traffic. Not a prediction; the simulator refines it.
pub fn iteration_time_estimate(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<f64> {
    plan.validate(topo)?;
    let admitted = tau_admission(plan, model, topo)?;
    let v = volume(plan, model, topo, 2, &admitted);
    let g = topo.gpus_per_node() as f64;
    let batch = model.batch_per_gpu as f64;
    let compute: f64 = model
        .layers
        .iter()
        .map(|l| (l.fwd_compute_s_per_sample + l.bwd_compute_s_per_sample) * batch)
        .sum();
    let time = |bytes: f64, kind: LinkKind| -> f64 {
        if bytes == 0.0 {
            return 0.0;
        }
        topo.effective_bandwidth(kind).map(|bw| bytes / bw).unwrap_or(0.0)
    };
    let inter = time(v.inter_node_total() as f64, LinkKind::InterNode);
    let intra = time(v.intra_node_total as f64 / g, LinkKind::IntraGpu);
    let host_bytes = match topo.link(LinkKind::HostGpu).map(|l| l.duplex) {
        Ok(Duplex::HalfDuplex) => (v.h2d_total + v.d2h_total) as f64,
        _ => v.h2d_total.max(v.d2h_total) as f64,
    };
    let pcie = time(host_bytes / g, LinkKind::HostGpu);
    Ok(compute.max(inter).max(intra).max(pcie))
}

/// The constants the volume formulas were evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormulaConstants {
    /// `(n-1)/n` for the parameter gather span.
    pub f: f64,
    /// Padded `bytes(W)`.
    pub model_bytes: u64,
    /// Padded `bytes(W_t)`.
    pub trainable_bytes: u64,
    pub num_nodes: u64,
    pub gpus_per_node: u64,
    pub total_gpus: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub strategy: StrategyKind,
    pub constants: FormulaConstants,
    pub first_iteration: CommVolume,
    pub steady_state: CommVolume,
    pub inter_node_total_steady: u64,
    pub memory: MemoryFootprint,
    pub gpu_feasible: bool,
    pub host_feasible: bool,
    pub max_batch: BatchFeasibility,
    pub iteration_time_lower_bound_s: f64,
    pub traits: StrategyTraits,
}

pub fn cost_report(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<CostReport> {
    let geo = ShardGeometry::new(plan, topo, model);
    let sp = Spans::new(plan, &geo);
    let memory = memory_footprint(plan, model, topo)?;
    let steady = comm_volume(plan, model, topo, 2)?;
    Ok(CostReport {
        strategy: plan.kind,
        constants: FormulaConstants {
            f: (sp.ag_nodes - 1) as f64 / sp.ag_nodes as f64,
            model_bytes: geo.model_bytes(model),
            trainable_bytes: geo.trainable_bytes(model),
            num_nodes: geo.num_nodes,
            gpus_per_node: geo.gpus_per_node,
            total_gpus: geo.total_gpus,
        },
        first_iteration: comm_volume(plan, model, topo, 1)?,
        steady_state: steady,
        inter_node_total_steady: steady.inter_node_total(),
        memory,
        gpu_feasible: memory.gpu_feasible(),
        host_feasible: memory.host_feasible(),
        max_batch: max_feasible_batch(plan, model, topo, plan.gpu_capacity_bytes)?,
        iteration_time_lower_bound_s: iteration_time_estimate(plan, model, topo)?,
        traits: plan.kind.traits(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_programs, ScheduleOptions};
    use crate::topology::BandwidthPreset;
    use crate::workload::{apply_lora_mask, model_preset, LayerSpec};
    use proptest::prelude::*;

    fn topo(n: usize, g: usize) -> ClusterTopology {
        ClusterTopology::commodity(n, g, BandwidthPreset::Ib100RdmaMeasured).unwrap()
    }

    fn steady(kind: StrategyKind, m: &ModelSpec, t: &ClusterTopology) -> CommVolume {
        comm_volume(&StrategyPlan::new(kind), m, t, 3).unwrap()
    }

    #[test]
    fn three_w_two_w_two_wt() {
        let m = model_preset("gpt10b").unwrap();
        let t = topo(64, 8);
        let b = m.total_param_bytes() as f64;
        let z3 = steady(StrategyKind::Zero3, &m, &t).inter_node_total() as f64;
        assert!((z3 / b - 3.0).abs() < 0.05, "{}", z3 / b);
        let fcdp = steady(StrategyKind::Fcdp, &m, &t);
        assert_eq!(fcdp.bwd_ag_inter, 0);
        assert!((fcdp.inter_node_total() as f64 / b - 2.0).abs() < 0.05);
        let peft = apply_lora_mask(&m, 0.01).unwrap();
        let comm = steady(StrategyKind::FcdpComm, &peft, &t).inter_node_total() as f64;
        assert!((comm / (0.01 * b) - 2.0).abs() < 0.05);
        let first = comm_volume(&StrategyPlan::new(StrategyKind::FcdpComm), &peft, &t, 1).unwrap();
        assert_eq!(first.fwd_ag_inter, steady(StrategyKind::Fcdp, &peft, &t).fwd_ag_inter);
    }

    #[test]
    fn two_node_values_are_exact() {
        let m = model_preset("gpt10b").unwrap();
        let t = topo(2, 8);
        let fcdp = steady(StrategyKind::Fcdp, &m, &t);
        assert_eq!(fcdp.fwd_ag_inter, 10_000_000_000);
        assert_eq!(fcdp.inter_node_total(), 20_000_000_000);
        assert_eq!(fcdp.h2d_total, 20_000_000_000);
        assert_eq!(fcdp.d2h_total, 20_000_000_000);
        let z2 = steady(StrategyKind::Zero2, &m, &t);
        assert_eq!(z2.param_sync_inter, 10_000_000_000);
        assert_eq!(z2.fwd_ag_inter + z2.bwd_ag_inter, 0);
        let peft = apply_lora_mask(&m, 0.01).unwrap();
        let comm = steady(StrategyKind::FcdpComm, &peft, &t);
        assert_eq!(comm.inter_node_total(), 200_000_000);
        assert_eq!(comm.d2h_total, 200_000_000);
    }

    #[test]
    fn single_node_has_no_inter_traffic() {
        let m = apply_lora_mask(&model_preset("gpt10b").unwrap(), 0.1).unwrap();
        let t = topo(1, 8);
        for kind in StrategyKind::ALL {
            let plan = if kind == StrategyKind::MiCS { StrategyPlan::mics(4) } else { StrategyPlan::new(kind) };
            for it in 1..3 {
                assert_eq!(comm_volume(&plan, &m, &t, it).unwrap().inter_node_total(), 0, "{kind}");
            }
        }
    }

    #[test]
    fn bound_ratio_fcdp_over_zero3_is_two_thirds() {
        let m = model_preset("gpt10b").unwrap();
        let t = topo(2, 8);
        let z3 = iteration_time_estimate(&StrategyPlan::new(StrategyKind::Zero3), &m, &t).unwrap();
        let fcdp = iteration_time_estimate(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t).unwrap();
        assert!((fcdp / z3 - 2.0 / 3.0).abs() < 1e-9, "{}", fcdp / z3);
    }

    #[test]
    fn bound_without_communication_is_compute() {
        let m = ModelSpec::uniform("toy", 4, 1000, 2).unwrap().with_coefficients(0.5, 1.0, 0).with_batch(2);
        let t = ClusterTopology::commodity(1, 1, BandwidthPreset::Eth10gMeasured).unwrap();
        let plan = StrategyPlan::new(StrategyKind::Fcdp).with_tau(1.0);
        let est = iteration_time_estimate(&plan, &m, &t).unwrap();
        assert!((est - 12.0).abs() < 1e-12);
    }

    #[test]
    fn limits_agree() {
        let m = model_preset("gpt15b").unwrap();
        let t = topo(4, 8);
        for it in 1..4 {
            let fcdp = comm_volume(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t, it).unwrap();
            let comm = comm_volume(&StrategyPlan::new(StrategyKind::FcdpComm), &m, &t, it).unwrap();
            assert_eq!(fcdp, comm);
            let z3 = comm_volume(&StrategyPlan::new(StrategyKind::Zero3), &m, &t, it).unwrap();
            let mics = comm_volume(&StrategyPlan::mics(32), &m, &t, it).unwrap();
            assert_eq!(z3, mics);
        }
        let inside = comm_volume(&StrategyPlan::mics(8), &m, &t, 2).unwrap();
        assert_eq!(inside.inter_node_total(), 0);
    }

    #[test]
    fn report_serializes() {
        let m = model_preset("gpt10b").unwrap();
        let r = cost_report(&StrategyPlan::new(StrategyKind::FcdpComm), &m, &topo(2, 8)).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["constants"]["f"], 0.5);
        assert_eq!(json["strategy"], "fcdp_comm");
        assert!(json["memory"]["host_cache_bytes_per_node"].as_u64().unwrap() > 0);
    }

    proptest! {
        // the schedule's event bytes and the closed forms agree at tau = 0
        #[test]
        fn program_bytes_match_closed_forms(
            counts in prop::collection::vec(1u64..2_000_000, 1..6),
            n in 1usize..4,
            g_pow in 0u32..3,
            frac in 0.001f64..=1.0,
            kind_idx in 0usize..6,
            mics_pow in 0u32..4,
        ) {
            let g = 1usize << g_pow;
            let t = topo(n, g);
            let layers = counts.iter().enumerate().map(|(i, &c)| LayerSpec::new(i, c)).collect();
            let m = apply_lora_mask(&ModelSpec::new("p", layers, 2).unwrap(), frac).unwrap();
            let kind = StrategyKind::ALL[kind_idx];
            let plan = if kind == StrategyKind::MiCS {
                let s = 1usize << mics_pow;
                prop_assume!((n * g) % s == 0 && (s % g == 0 || g % s == 0));
                StrategyPlan::mics(s)
            } else {
                StrategyPlan::new(kind)
            };
            let programs = build_programs(&plan, &m, &t, 3, &ScheduleOptions::default()).unwrap();
            for p in &programs {
                let v = comm_volume(&plan, &m, &t, p.iteration_index).unwrap();
                let lb = p.link_bytes();
                let nodes = n as u64;
                prop_assert_eq!(lb.inter_node, nodes * v.inter_node_total());
                prop_assert_eq!(lb.intra_gpu, nodes * v.intra_node_total);
                prop_assert_eq!(lb.host_gpu, nodes * (v.h2d_total + v.d2h_total));
            }
        }
    }
}

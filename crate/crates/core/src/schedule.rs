//! Per-iteration event programs.
//!
//! A program is a DAG of cluster-wide events in program order: every event's
//! dependencies have smaller ids, and the simulator runs each channel's events
//! in that order. Events are SPMD: one `AgInter` stands for the collective on
//! every GPU, and its resource list names every link it occupies.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::{gather_pool_bytes, memory_footprint, ShardGeometry, StrategyKind, StrategyPlan};
use crate::topology::{ClusterTopology, Duplex, LinkKind};
use crate::workload::{ModelSpec, ParamId, ParamPart};

/// Declaration order is the tie-break order between simultaneously ready events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    AgInter,
    AgIntra,
    H2D,
    D2H,
    ComputeFwd,
    ComputeBwd,
    ReduceScatter,
    OptimizerStep,
    MaskDirty,
    Broadcast,
}

impl EventKind {
    pub fn is_compute(self) -> bool {
        matches!(self, EventKind::ComputeFwd | EventKind::ComputeBwd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamSet {
    All,
    TrainableOnly,
    FrozenOnly,
}

impl ParamSet {
    pub fn contains(self, part: ParamPart) -> bool {
        match self {
            ParamSet::All => true,
            ParamSet::TrainableOnly => part == ParamPart::Trainable,
            ParamSet::FrozenOnly => part == ParamPart::Frozen,
        }
    }

    fn covering(params: &[ParamId]) -> ParamSet {
        let t = params.iter().any(|p| p.part == ParamPart::Trainable);
        let f = params.iter().any(|p| p.part == ParamPart::Frozen);
        match (t, f) {
            (true, false) => ParamSet::TrainableOnly,
            (false, true) => ParamSet::FrozenOnly,
            _ => ParamSet::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Compute,
    IntraLink,
    HostToDevice,
    DeviceToHost,
    /// Shared host channel when the host link is half duplex.
    HostLink,
    Nic,
}

impl Channel {
    pub fn link_kind(self) -> Option<LinkKind> {
        match self {
            Channel::Compute => None,
            Channel::IntraLink => Some(LinkKind::IntraGpu),
            Channel::HostToDevice | Channel::DeviceToHost | Channel::HostLink => Some(LinkKind::HostGpu),
            Channel::Nic => Some(LinkKind::InterNode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceId {
    pub node: usize,
    /// `None` for node-level resources (the NIC).
    pub gpu: Option<usize>,
    pub channel: Channel,
}

/// Cluster-wide bytes moved per link class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinkBytes {
    pub intra_gpu: u64,
    pub host_gpu: u64,
    pub inter_node: u64,
}

impl LinkBytes {
    pub fn get(&self, kind: LinkKind) -> u64 {
        match kind {
            LinkKind::IntraGpu => self.intra_gpu,
            LinkKind::HostGpu => self.host_gpu,
            LinkKind::InterNode => self.inter_node,
        }
    }

    pub fn get_mut(&mut self, kind: LinkKind) -> &mut u64 {
        match kind {
            LinkKind::IntraGpu => &mut self.intra_gpu,
            LinkKind::HostGpu => &mut self.host_gpu,
            LinkKind::InterNode => &mut self.inter_node,
        }
    }

    pub fn total(&self) -> u64 {
        self.intra_gpu + self.host_gpu + self.inter_node
    }

    pub fn add(&mut self, other: &LinkBytes) {
        self.intra_gpu += other.intra_gpu;
        self.host_gpu += other.host_gpu;
        self.inter_node += other.inter_node;
    }
}

/// Span of a collective: `nodes` participating nodes times `local_ranks` GPUs
/// per node in each group. Groups tile the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub nodes: u64,
    pub local_ranks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub kind: EventKind,
    pub layer: Option<usize>,
    pub param_set: ParamSet,
    pub phase: Phase,
    pub params: Vec<ParamId>,
    /// Padded bytes of the full tensors the event moves or consumes.
    pub payload_bytes: u64,
    pub group: Option<Group>,
    /// Cluster-wide bytes on the event's links; `link_bytes.total()`.
    pub bytes_total: u64,
    pub link_bytes: LinkBytes,
    pub deps: Vec<usize>,
    pub resources: Vec<ResourceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamState {
    pub param_id: ParamId,
    pub version: u64,
    pub dirty: bool,
    pub frozen: bool,
    pub host_cached_version: Option<u64>,
    pub gpu_cached: bool,
}

/// Every parameter at version 0, dirty, with nothing cached.
pub fn initial_state(model: &ModelSpec) -> Vec<ParamState> {
    model
        .params()
        .map(|p| ParamState {
            param_id: p,
            version: 0,
            dirty: true,
            frozen: p.is_frozen(),
            host_cached_version: None,
            gpu_cached: false,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventProgram {
    pub iteration_index: u64,
    pub strategy: StrategyKind,
    pub num_layers: usize,
    pub events: Vec<Event>,
    /// Layers admitted to the GPU cache this iteration.
    pub gpu_cached_layers: Vec<usize>,
}

#[derive(Serialize)]
struct EventRecord<'a> {
    id: usize,
    kind: EventKind,
    layer: Option<usize>,
    param_set: ParamSet,
    bytes: u64,
    deps: &'a [usize],
}

impl EventProgram {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn count_in(&self, kind: EventKind, phase: Phase) -> usize {
        self.events.iter().filter(|e| e.kind == kind && e.phase == phase).count()
    }

    pub fn link_bytes(&self) -> LinkBytes {
        let mut total = LinkBytes::default();
        for e in &self.events {
            total.add(&e.link_bytes);
        }
        total
    }

    /// One JSON record per line: id, kind, layer, param_set, bytes, deps.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let rec = EventRecord {
                id: e.id,
                kind: e.kind,
                layer: e.layer,
                param_set: e.param_set,
                bytes: e.bytes_total,
                deps: &e.deps,
            };
            let line = serde_json::to_string(&rec).expect("event records serialize");
            writeln!(out, "{line}").unwrap();
        }
        out
    }
}

/// Fault injection for exercising the verifier end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Adds an inter-node all-gather to the first backward layer.
    BackwardAgInter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Depth-1 prefetch of the next layer's reconstruction.
    pub prefetch: bool,
    pub fault: Option<Fault>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            prefetch: true,
            fault: None,
        }
    }
}

/// Layers admitted to the GPU cache by `tau`, first fit in layer order. The
/// projection after layer `l`'s forward compute is persistent state, the
/// gather pool, activations at the configured batch, already admitted layers
/// and layer `l` itself.
pub fn tau_admission(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<Vec<bool>> {
    let mut admitted = vec![false; model.num_layers()];
    if !plan.kind.uses_host_cache() || plan.tau <= 0.0 {
        return Ok(admitted);
    }
    let fp = memory_footprint(plan, model, topo)?;
    let geo = ShardGeometry::new(plan, topo, model);
    let base = fp.gpu_persistent_bytes + gather_pool_bytes(plan, model, topo) + model.activation_bytes(model.batch_per_gpu);
    let budget = plan.tau * plan.gpu_capacity_bytes as f64;
    let mut cached = 0u64;
    for (l, slot) in admitted.iter_mut().enumerate() {
        let layer = geo.layer_bytes(model, l);
        if ((base + cached + layer) as f64) < budget {
            cached += layer;
            *slot = true;
        }
    }
    Ok(admitted)
}

/// Geometry shared by the schedule, the simulator and the cost model.
#[derive(Debug, Clone, Copy)]
pub struct CollectiveGeometry {
    pub geo: ShardGeometry,
    /// Parameter all-gather group.
    pub ag: Group,
    /// Gradient reduce-scatter group.
    pub rs: Group,
    /// Intra-node reassembly group.
    pub node: Group,
    /// MiCS with the subgroup inside one node gathers over the intra fabric only.
    pub ag_is_intra: bool,
}

impl CollectiveGeometry {
    pub fn new(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Self {
        let geo = ShardGeometry::new(plan, topo, model);
        let global = Group {
            nodes: geo.num_nodes,
            local_ranks: geo.gpus_per_node,
        };
        let node = Group {
            nodes: 1,
            local_ranks: geo.gpus_per_node,
        };
        let (ag, ag_is_intra) = match plan.kind {
            StrategyKind::MiCS if geo.param_ranks <= geo.gpus_per_node => (
                Group {
                    nodes: 1,
                    local_ranks: geo.param_ranks,
                },
                true,
            ),
            StrategyKind::MiCS => (
                Group {
                    nodes: geo.param_ranks / geo.gpus_per_node,
                    local_ranks: geo.gpus_per_node,
                },
                false,
            ),
            _ => (global, false),
        };
        let rs = if plan.kind == StrategyKind::MiCS { ag } else { global };
        CollectiveGeometry {
            geo,
            ag,
            rs,
            node,
            ag_is_intra,
        }
    }

    /// Cluster-wide bytes of a gather/reduce of `payload` bytes over `group`.
    /// Hierarchical: `(n-1)/n` of the payload enters each node over its NIC,
    /// then each GPU receives `(r-1)/r` of it over the intra fabric.
    pub fn collective_bytes(&self, group: Group, payload: u64) -> LinkBytes {
        let n = self.geo.num_nodes;
        let g = self.geo.gpus_per_node;
        LinkBytes {
            inter_node: n * (group.nodes - 1) * payload / group.nodes,
            intra_gpu: n * g * (group.local_ranks - 1) * payload / group.local_ranks,
            host_gpu: 0,
        }
    }

    /// Cluster-wide bytes of a host transfer: every node moves the whole payload,
    /// each GPU its `1/g` share.
    pub fn host_bytes(&self, payload: u64) -> LinkBytes {
        LinkBytes {
            host_gpu: self.geo.num_nodes * payload,
            ..LinkBytes::default()
        }
    }
}

/// One compute and the transfers around it, before ids are assigned.
struct Use {
    phase: Phase,
    layer: usize,
    recon: Vec<Step>,
    post: Vec<Step>,
}

enum Step {
    /// Inter-node (or subgroup) gather; `intra` for MiCS inside one node.
    Gather { params: Vec<ParamId>, intra: bool },
    /// Host-to-device load followed by the intra-node reassembly.
    FromHost(Vec<ParamId>),
    /// Intra-node reassembly from the node-local replica.
    FromReplica(Vec<ParamId>),
    D2H(Vec<ParamId>),
    ReduceScatter,
}

struct Builder<'a> {
    model: &'a ModelSpec,
    cg: CollectiveGeometry,
    duplex: Duplex,
    events: Vec<Event>,
}

impl Builder<'_> {
    fn push(&mut self, kind: EventKind, layer: Option<usize>, phase: Phase, params: Vec<ParamId>, deps: Vec<usize>) -> usize {
        let id = self.events.len();
        let geo = self.cg.geo;
        let payload: u64 = match kind {
            EventKind::ReduceScatter => layer.map(|l| geo.grad_bytes(self.model, l)).unwrap_or(0),
            _ => params.iter().map(|&p| geo.param_bytes(self.model, p)).sum(),
        };
        let (group, link_bytes) = match kind {
            EventKind::AgInter | EventKind::Broadcast => (Some(self.cg.ag), self.cg.collective_bytes(self.cg.ag, payload)),
            EventKind::AgIntra => {
                let group = if self.cg.ag_is_intra { self.cg.ag } else { self.cg.node };
                (Some(group), self.cg.collective_bytes(group, payload))
            }
            EventKind::ReduceScatter => (Some(self.cg.rs), self.cg.collective_bytes(self.cg.rs, payload)),
            EventKind::H2D | EventKind::D2H => (None, self.cg.host_bytes(payload)),
            _ => (None, LinkBytes::default()),
        };
        let resources = self.resources(kind, group, &link_bytes);
        let mut deps = deps;
        deps.sort_unstable();
        deps.dedup();
        self.events.push(Event {
            id,
            kind,
            layer,
            param_set: ParamSet::covering(&params),
            phase,
            params,
            payload_bytes: payload,
            group,
            bytes_total: link_bytes.total(),
            link_bytes,
            deps,
            resources,
        });
        id
    }

    fn resources(&self, kind: EventKind, group: Option<Group>, bytes: &LinkBytes) -> Vec<ResourceId> {
        let n = self.cg.geo.num_nodes as usize;
        let g = self.cg.geo.gpus_per_node as usize;
        let per_gpu = |channel: Channel| -> Vec<ResourceId> {
            (0..n)
                .flat_map(|node| (0..g).map(move |gpu| ResourceId { node, gpu: Some(gpu), channel }))
                .collect()
        };
        let mut out = Vec::new();
        match kind {
            EventKind::ComputeFwd | EventKind::ComputeBwd => out = per_gpu(Channel::Compute),
            EventKind::H2D | EventKind::D2H if bytes.host_gpu > 0 => {
                out = per_gpu(match (self.duplex, kind) {
                    (Duplex::HalfDuplex, _) => Channel::HostLink,
                    (_, EventKind::H2D) => Channel::HostToDevice,
                    _ => Channel::DeviceToHost,
                })
            }
            EventKind::AgInter | EventKind::AgIntra | EventKind::ReduceScatter | EventKind::Broadcast => {
                let group = group.expect("collectives carry a group");
                if group.nodes > 1 && bytes.inter_node > 0 {
                    out.extend((0..n).map(|node| ResourceId {
                        node,
                        gpu: None,
                        channel: Channel::Nic,
                    }));
                }
                if group.local_ranks > 1 && bytes.intra_gpu > 0 {
                    out.extend(per_gpu(Channel::IntraLink));
                }
            }
            _ => {}
        }
        out
    }
}

fn layer_params(model: &ModelSpec, layer: usize) -> Vec<ParamId> {
    [ParamPart::Trainable, ParamPart::Frozen]
        .into_iter()
        .map(|p| ParamId::new(layer, p))
        .filter(|&p| model.param_count(p) > 0)
        .collect()
}

fn check_state(plan: &StrategyPlan, model: &ModelSpec, state: &[ParamState]) -> Result<()> {
    let expected: Vec<ParamId> = model.params().collect();
    if state.len() != expected.len() {
        return Err(Error::Protocol(format!(
            "state has {} entries, model has {} parameters",
            state.len(),
            expected.len()
        )));
    }
    for (s, &id) in state.iter().zip(&expected) {
        if s.param_id != id {
            return Err(Error::Protocol(format!("state entry {} where {id} was expected", s.param_id)));
        }
        if s.frozen != id.is_frozen() {
            return Err(Error::Protocol(format!("{id}: frozen flag disagrees with the model")));
        }
        if s.frozen && s.version != 0 {
            return Err(Error::Protocol(format!("{id}: frozen parameter at version {}", s.version)));
        }
        if s.gpu_cached {
            return Err(Error::Protocol(format!("{id}: GPU cache entry survives an iteration boundary")));
        }
        if plan.kind.uses_host_cache() {
            let stale = s.host_cached_version != Some(s.version);
            if s.dirty != stale {
                let host = s.host_cached_version.map_or("empty".to_string(), |v| format!("version {v}"));
                return Err(Error::Protocol(format!(
                    "{id}: dirty = {} but host cache holds {host} at version {}",
                    s.dirty, s.version
                )));
            }
        }
    }
    Ok(())
}

/// Builds one iteration's event program from the current parameter state.
pub fn build_iteration(
    plan: &StrategyPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    state: &[ParamState],
    iteration: u64,
    opts: &ScheduleOptions,
) -> Result<EventProgram> {
    plan.validate(topo)?;
    model.validate()?;
    check_state(plan, model, state)?;
    let kind = plan.kind;
    let admitted = tau_admission(plan, model, topo)?;
    let dirty = |p: ParamId| state.iter().find(|s| s.param_id == p).map(|s| s.dirty).unwrap_or(true);
    let has_trainable = |l: usize| model.layers[l].trainable_params() > 0;
    // params whose host copy the coming step makes stale anyway
    let invalidated = |p: ParamId| match kind {
        StrategyKind::Fcdp => has_trainable(p.layer),
        _ => p.part == ParamPart::Trainable,
    };
    let cg = CollectiveGeometry::new(plan, model, topo);
    let num_layers = model.num_layers();

    let mut uses = Vec::with_capacity(2 * num_layers);
    for l in 0..num_layers {
        let params = layer_params(model, l);
        let mut recon = Vec::new();
        let mut post = Vec::new();
        match kind {
            StrategyKind::Zero2 => {}
            StrategyKind::Zero3 | StrategyKind::ZeroPP | StrategyKind::MiCS => recon.push(Step::Gather {
                params: params.clone(),
                intra: cg.ag_is_intra,
            }),
            StrategyKind::Fcdp | StrategyKind::FcdpComm => {
                let (d, c): (Vec<ParamId>, Vec<ParamId>) = if kind == StrategyKind::Fcdp {
                    if params.iter().any(|&p| dirty(p)) {
                        (params.clone(), Vec::new())
                    } else {
                        (Vec::new(), params.clone())
                    }
                } else {
                    params.iter().partition(|&&p| dirty(p))
                };
                let to_host: Vec<ParamId> = d.iter().copied().filter(|&p| !(admitted[l] && invalidated(p))).collect();
                if !d.is_empty() {
                    recon.push(Step::Gather { params: d, intra: false });
                }
                if !c.is_empty() {
                    recon.push(Step::FromHost(c));
                }
                if !to_host.is_empty() {
                    post.push(Step::D2H(to_host));
                }
            }
        }
        uses.push(Use {
            phase: Phase::Forward,
            layer: l,
            recon,
            post,
        });
    }
    for l in (0..num_layers).rev() {
        let params = layer_params(model, l);
        let mut recon = Vec::new();
        match kind {
            StrategyKind::Zero2 => {}
            StrategyKind::Zero3 | StrategyKind::MiCS => recon.push(Step::Gather {
                params: params.clone(),
                intra: cg.ag_is_intra,
            }),
            StrategyKind::ZeroPP => recon.push(Step::FromReplica(params.clone())),
            StrategyKind::Fcdp | StrategyKind::FcdpComm => {
                if !admitted[l] {
                    recon.push(Step::FromHost(params.clone()));
                }
            }
        }
        if opts.fault == Some(Fault::BackwardAgInter) && l + 1 == num_layers {
            let faulty = params.iter().copied().filter(|p| p.part == ParamPart::Trainable).collect::<Vec<_>>();
            let faulty = if faulty.is_empty() { params.clone() } else { faulty };
            recon.insert(0, Step::Gather { params: faulty, intra: false });
        }
        let post = if has_trainable(l) { vec![Step::ReduceScatter] } else { Vec::new() };
        uses.push(Use {
            phase: Phase::Backward,
            layer: l,
            recon,
            post,
        });
    }

    let mut b = Builder {
        model,
        cg,
        duplex: topo.link(LinkKind::HostGpu).map(|l| l.duplex).unwrap_or_default(),
        events: Vec::new(),
    };
    let slots = if opts.prefetch { 2 } else { 1 };
    // per use: compute id, completion set freeing its buffer slot, recon tail ids
    let mut computes: Vec<usize> = Vec::with_capacity(uses.len());
    let mut releases: Vec<Vec<usize>> = Vec::with_capacity(uses.len());
    let mut tails: Vec<Vec<usize>> = vec![Vec::new(); uses.len()];
    let mut d2h_of_layer: Vec<Option<usize>> = vec![None; num_layers];
    let mut fwd_gather_of_layer: Vec<Option<usize>> = vec![None; num_layers];
    let mut reduce_scatters = Vec::new();

    let emit_recon = |b: &mut Builder, k: usize, releases: &[Vec<usize>], tails: &mut [Vec<usize>], d2h: &[Option<usize>], fwd_gather: &mut [Option<usize>]| {
        let u = &uses[k];
        let mut slot_deps = if k >= slots { releases[k - slots].clone() } else { Vec::new() };
        if u.phase == Phase::Backward {
            slot_deps.extend(d2h[u.layer]);
            if kind == StrategyKind::ZeroPP {
                slot_deps.extend(fwd_gather[u.layer]);
            }
        }
        for step in &u.recon {
            match step {
                Step::Gather { params, intra } => {
                    let k_ev = if *intra { EventKind::AgIntra } else { EventKind::AgInter };
                    let id = b.push(k_ev, Some(u.layer), u.phase, params.clone(), slot_deps.clone());
                    if u.phase == Phase::Forward {
                        fwd_gather[u.layer] = Some(id);
                    }
                    tails[k].push(id);
                }
                Step::FromHost(params) => {
                    let h = b.push(EventKind::H2D, Some(u.layer), u.phase, params.clone(), slot_deps.clone());
                    let a = b.push(EventKind::AgIntra, Some(u.layer), u.phase, params.clone(), vec![h]);
                    tails[k].push(a);
                }
                Step::FromReplica(params) => {
                    let a = b.push(EventKind::AgIntra, Some(u.layer), u.phase, params.clone(), slot_deps.clone());
                    tails[k].push(a);
                }
                Step::D2H(_) | Step::ReduceScatter => unreachable!("post steps"),
            }
        }
    };

    if !uses.is_empty() {
        emit_recon(&mut b, 0, &releases, &mut tails, &d2h_of_layer, &mut fwd_gather_of_layer);
    }
    for k in 0..uses.len() {
        // at the forward/backward turnaround the reload must follow this layer's D2H
        let early = opts.prefetch && k + 1 < uses.len() && uses[k + 1].layer != uses[k].layer;
        if early {
            emit_recon(&mut b, k + 1, &releases, &mut tails, &d2h_of_layer, &mut fwd_gather_of_layer);
        }
        let u = &uses[k];
        let mut deps = tails[k].clone();
        deps.extend(computes.last().copied());
        let ck = if u.phase == Phase::Forward {
            EventKind::ComputeFwd
        } else {
            EventKind::ComputeBwd
        };
        let c = b.push(ck, Some(u.layer), u.phase, layer_params(model, u.layer), deps);
        computes.push(c);
        for step in &u.post {
            match step {
                Step::D2H(params) => {
                    let id = b.push(EventKind::D2H, Some(u.layer), u.phase, params.clone(), vec![c]);
                    // reads the intra-node shard staged by the gather, not the slot
                    d2h_of_layer[u.layer] = Some(id);
                }
                Step::ReduceScatter => {
                    let id = b.push(
                        EventKind::ReduceScatter,
                        Some(u.layer),
                        u.phase,
                        vec![ParamId::new(u.layer, ParamPart::Trainable)],
                        vec![c],
                    );
                    reduce_scatters.push(id);
                }
                _ => unreachable!("recon steps"),
            }
        }
        releases.push(vec![c]);
        if !early && k + 1 < uses.len() {
            emit_recon(&mut b, k + 1, &releases, &mut tails, &d2h_of_layer, &mut fwd_gather_of_layer);
        }
    }

    let trainable: Vec<ParamId> = model.params().filter(|p| p.part == ParamPart::Trainable).collect();
    let mut step_deps = reduce_scatters;
    step_deps.extend(computes.last().copied());
    let step = b.push(EventKind::OptimizerStep, None, Phase::Step, trainable.clone(), step_deps);
    match kind {
        StrategyKind::Zero2 => {
            b.push(EventKind::Broadcast, None, Phase::Step, model.params().collect(), vec![step]);
        }
        StrategyKind::ZeroPP => {}
        _ => {
            b.push(EventKind::MaskDirty, None, Phase::Step, trainable, vec![step]);
        }
    }

    let gpu_cached_layers = admitted.iter().enumerate().filter(|(_, &a)| a).map(|(l, _)| l).collect();
    Ok(EventProgram {
        iteration_index: iteration,
        strategy: kind,
        num_layers,
        events: b.events,
        gpu_cached_layers,
    })
}

/// Applies a program's effects to the parameter state: host writes at D2H,
/// version bumps at the optimizer step, dirty marking.
pub fn step_state(state: &[ParamState], program: &EventProgram) -> Vec<ParamState> {
    let mut next = state.to_vec();
    let host = program.strategy.uses_host_cache();
    let index = |next: &[ParamState], p: ParamId| next.iter().position(|s| s.param_id == p);
    for e in &program.events {
        match e.kind {
            EventKind::ComputeFwd if !host => {
                for &p in &e.params {
                    if let Some(i) = index(&next, p) {
                        next[i].dirty = false;
                    }
                }
            }
            EventKind::D2H => {
                for &p in &e.params {
                    if let Some(i) = index(&next, p) {
                        next[i].host_cached_version = Some(next[i].version);
                        next[i].dirty = false;
                    }
                }
            }
            EventKind::OptimizerStep | EventKind::MaskDirty => {
                for &p in &e.params {
                    if let Some(i) = index(&next, p) {
                        if !next[i].frozen {
                            if e.kind == EventKind::OptimizerStep {
                                next[i].version += 1;
                            }
                            next[i].dirty = true;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    for s in &mut next {
        s.gpu_cached = false;
    }
    next
}

/// Programs for `iterations` consecutive iterations starting from the initial state.
pub fn build_programs(
    plan: &StrategyPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    iterations: u64,
    opts: &ScheduleOptions,
) -> Result<Vec<EventProgram>> {
    let mut state = initial_state(model);
    let mut out = Vec::new();
    for it in 1..=iterations {
        let program = build_iteration(plan, model, topo, &state, it, opts)?;
        state = step_state(&state, &program);
        out.push(program);
    }
    Ok(out)
}

/// Parameters touched by events of `kind` in `phase`.
pub fn params_touched(program: &EventProgram, kind: EventKind, phase: Phase) -> BTreeSet<ParamId> {
    program
        .events
        .iter()
        .filter(|e| e.kind == kind && e.phase == phase)
        .flat_map(|e| e.params.iter().copied())
        .collect()
}

//! Deterministic discrete-event executor.
//!
//! Each iteration's program is list-scheduled in program order: an event
//! starts at the later of its dependencies' ends and the free time of every
//! resource it occupies, and runs for its transfer or compute time. Alongside
//! timing the engine moves versioned shard payloads through device, gathered,
//! replica and host stores, so every compute records exactly which shard
//! versions it consumed.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::{
    build_iteration, initial_state, step_state, tau_admission, CollectiveGeometry, Event, EventKind, EventProgram,
    LinkBytes, ParamSet, ParamState, Phase, ResourceId, ScheduleOptions,
};
use crate::strategy::{gather_pool_bytes, memory_footprint, StrategyKind, StrategyPlan};
use crate::topology::{ClusterTopology, LinkKind};
use crate::workload::{ModelSpec, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    pub schedule: ScheduleOptions,
}

/// One shard of one parameter at one version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub param_id: ParamId,
    pub shard_index: usize,
    pub version: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Index in the trace; dependencies refer to these.
    pub seq: usize,
    pub iteration: u64,
    /// Id within the iteration's program.
    pub event_id: usize,
    pub kind: EventKind,
    pub layer: Option<usize>,
    pub param_set: ParamSet,
    pub phase: Phase,
    pub params: Vec<ParamId>,
    pub start_s: f64,
    pub end_s: f64,
    pub resources: Vec<ResourceId>,
    pub link_bytes: LinkBytes,
    pub deps: Vec<usize>,
}

/// Shards a compute event found assembled on one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumption {
    pub seq: usize,
    pub iteration: u64,
    pub node: usize,
    pub param_id: ParamId,
    /// Version the engine held as current.
    pub expected_version: u64,
    /// `None` where the shard was missing.
    pub shard_versions: Vec<Option<u64>>,
    pub shard_bytes: u64,
}

impl Consumption {
    pub fn payloads(&self) -> impl Iterator<Item = Payload> + '_ {
        self.shard_versions.iter().enumerate().filter_map(|(i, v)| {
            v.map(|version| Payload {
                param_id: self.param_id,
                shard_index: i,
                version,
                bytes: self.shard_bytes,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Any one GPU; all GPUs follow the same series.
    Gpu,
    /// Host memory of any one node.
    Host,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Gpu => "gpu",
            Tier::Host => "host",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub time_s: f64,
    pub tier: Tier,
    pub bytes: u64,
    /// Event whose boundary produced the sample; `None` for the initial allocation.
    pub seq: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OomVerdict {
    pub tier: Tier,
    pub iteration: u64,
    pub event_id: Option<usize>,
    pub kind: Option<EventKind>,
    pub layer: Option<usize>,
    pub required_bytes: u64,
    pub capacity_bytes: u64,
}

impl fmt::Display for OomVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} tier needs {} of {} bytes", self.tier, self.required_bytes, self.capacity_bytes)?;
        match (self.event_id, self.kind) {
            (Some(id), Some(kind)) => {
                write!(f, " at iteration {} event {id} ({kind:?}", self.iteration)?;
                if let Some(l) = self.layer {
                    write!(f, ", layer {l}")?;
                }
                write!(f, ")")
            }
            _ => write!(f, " for resident state"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub link_bytes: LinkBytes,
    pub peak_gpu_bytes: u64,
}

impl IterationRecord {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub strategy: StrategyKind,
    /// Hash of the (plan, model, topology) the trace was produced from.
    pub fingerprint: String,
    pub options: SimOptions,
    pub gpu_capacity_bytes: u64,
    pub host_capacity_bytes: u64,
    pub samples_per_iteration: u64,
    pub events: Vec<TraceEvent>,
    pub consumptions: Vec<Consumption>,
    pub memory_samples: Vec<MemorySample>,
    pub iterations: Vec<IterationRecord>,
    /// Parameter state before each iteration, then after the last.
    pub snapshots: Vec<Vec<ParamState>>,
    pub link_byte_totals: LinkBytes,
    pub peak_gpu_bytes: u64,
    pub peak_host_bytes: u64,
}

impl SimTrace {
    pub fn last_iteration(&self) -> &IterationRecord {
        self.iterations.last().expect("at least one iteration")
    }

    /// Duration of the last (steady-state) iteration.
    pub fn iteration_time_s(&self) -> f64 {
        self.last_iteration().duration_s()
    }

    /// Samples per second across the cluster at steady state.
    pub fn throughput(&self) -> f64 {
        self.samples_per_iteration as f64 / self.iteration_time_s()
    }

    pub fn events_in(&self, iteration: u64) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.iteration == iteration)
    }

    /// Fraction of the last iteration during which node 0's NIC is busy.
    pub fn inter_node_busy_fraction(&self) -> f64 {
        let it = self.last_iteration();
        let busy: f64 = self
            .events_in(it.index)
            .filter(|e| e.resources.iter().any(|r| r.node == 0 && r.channel == crate::schedule::Channel::Nic))
            .map(|e| e.end_s - e.start_s)
            .sum();
        if it.duration_s() > 0.0 {
            busy / it.duration_s()
        } else {
            0.0
        }
    }

    /// Trace as line-delimited JSON, one event per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_memory_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp_s", "tier", "bytes"])?;
        for s in &self.memory_samples {
            w.write_record([s.time_s.to_string(), s.tier.to_string(), s.bytes.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hash identifying the inputs of a run.
pub fn fingerprint(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> String {
    let bytes = serde_json::to_vec(&(plan, model, topo)).expect("inputs serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Shard versions; `None` marks a missing shard.
type Shards = Vec<Option<u64>>;

/// Payload stores of one node.
#[derive(Default)]
struct NodeStore {
    gathered: HashMap<ParamId, Shards>,
    /// Intra-node shard left by the inter-node gather phase, read by D2H.
    d2h_stage: HashMap<ParamId, Shards>,
    h2d_stage: HashMap<ParamId, Shards>,
    /// ZeRO++ secondary partition or ZeRO-2 replica.
    replica: HashMap<ParamId, Shards>,
    host: HashMap<ParamId, Shards>,
}

struct Payloads {
    kind: StrategyKind,
    version: HashMap<ParamId, u64>,
    device: HashMap<ParamId, Vec<u64>>,
    nodes: Vec<NodeStore>,
    shard_bytes: HashMap<ParamId, u64>,
}

impl Payloads {
    fn new(plan: &StrategyPlan, model: &ModelSpec, cg: &CollectiveGeometry) -> Self {
        let ranks = cg.geo.param_ranks as usize;
        let mut nodes: Vec<NodeStore> = (0..cg.geo.num_nodes).map(|_| NodeStore::default()).collect();
        let mut version = HashMap::new();
        let mut device = HashMap::new();
        let mut shard_bytes = HashMap::new();
        for p in model.params() {
            version.insert(p, 0);
            device.insert(p, vec![0; ranks]);
            shard_bytes.insert(p, cg.geo.param_bytes(model, p) / cg.geo.param_ranks);
            if plan.kind == StrategyKind::Zero2 {
                for n in &mut nodes {
                    n.replica.insert(p, vec![Some(0); ranks]);
                }
            }
        }
        Payloads {
            kind: plan.kind,
            version,
            device,
            nodes,
            shard_bytes,
        }
    }

    fn device_shards(&self, p: ParamId) -> Shards {
        self.device[&p].iter().map(|&v| Some(v)).collect()
    }

    fn missing(&self, p: ParamId) -> Shards {
        vec![None; self.device[&p].len()]
    }

    /// Applies an event's data movement; returns what a compute consumed.
    fn apply(&mut self, e: &Event, seq: usize, iteration: u64, admitted: &[bool]) -> Vec<Consumption> {
        let mut consumed = Vec::new();
        for n in 0..self.nodes.len() {
            for &p in &e.params {
                match e.kind {
                    EventKind::AgInter => {
                        let shards = self.device_shards(p);
                        let node = &mut self.nodes[n];
                        if self.kind == StrategyKind::ZeroPP && e.phase == Phase::Forward {
                            node.replica.insert(p, shards.clone());
                        }
                        node.d2h_stage.insert(p, shards.clone());
                        node.gathered.insert(p, shards);
                    }
                    EventKind::AgIntra => {
                        let shards = match self.kind {
                            StrategyKind::MiCS => Some(self.device_shards(p)),
                            StrategyKind::ZeroPP => self.nodes[n].replica.get(&p).cloned(),
                            _ => self.nodes[n].h2d_stage.remove(&p),
                        };
                        let shards = shards.unwrap_or_else(|| self.missing(p));
                        self.nodes[n].gathered.insert(p, shards);
                    }
                    EventKind::H2D => {
                        let shards = self.nodes[n].host.get(&p).cloned().unwrap_or_else(|| self.missing(p));
                        self.nodes[n].h2d_stage.insert(p, shards);
                    }
                    EventKind::D2H => {
                        let shards = self.nodes[n].d2h_stage.remove(&p).unwrap_or_else(|| self.missing(p));
                        self.nodes[n].host.insert(p, shards);
                    }
                    EventKind::ComputeFwd | EventKind::ComputeBwd => {
                        let node = &mut self.nodes[n];
                        let shards = if self.kind == StrategyKind::Zero2 {
                            node.replica.get(&p).cloned()
                        } else {
                            node.gathered.get(&p).cloned()
                        };
                        let shards = shards.unwrap_or_else(|| vec![None; self.device[&p].len()]);
                        consumed.push(Consumption {
                            seq,
                            iteration,
                            node: n,
                            param_id: p,
                            expected_version: self.version[&p],
                            shard_versions: shards,
                            shard_bytes: self.shard_bytes[&p],
                        });
                        let layer = p.layer;
                        let keep = e.kind == EventKind::ComputeFwd && admitted[layer];
                        if !keep {
                            node.gathered.remove(&p);
                        }
                        if e.kind == EventKind::ComputeBwd && self.kind == StrategyKind::ZeroPP {
                            node.replica.remove(&p);
                        }
                    }
                    EventKind::Broadcast => {
                        let shards = self.device_shards(p);
                        self.nodes[n].replica.insert(p, shards);
                    }
                    EventKind::OptimizerStep if n == 0 => {
                        let v = self.version.get_mut(&p).expect("known param");
                        *v += 1;
                        let v = *v;
                        self.device.get_mut(&p).expect("known param").iter_mut().for_each(|s| *s = v);
                    }
                    _ => {}
                }
            }
        }
        consumed
    }
}

/// Bulk-synchronous duration of an event.
fn duration(e: &Event, model: &ModelSpec, topo: &ClusterTopology, g: u64) -> Result<f64> {
    let batch = model.batch_per_gpu as f64;
    Ok(match e.kind {
        EventKind::ComputeFwd => model.layers[e.layer.expect("layer compute")].fwd_compute_s_per_sample * batch,
        EventKind::ComputeBwd => model.layers[e.layer.expect("layer compute")].bwd_compute_s_per_sample * batch,
        EventKind::H2D | EventKind::D2H => topo.transfer_time(e.payload_bytes / g, LinkKind::HostGpu)?,
        EventKind::AgInter | EventKind::AgIntra | EventKind::ReduceScatter | EventKind::Broadcast => {
            let group = e.group.expect("collectives carry a group");
            let s = e.payload_bytes;
            let mut t = 0.0;
            if group.nodes > 1 {
                t += topo.transfer_time((group.nodes - 1) * s / group.nodes, LinkKind::InterNode)?;
            }
            if group.local_ranks > 1 {
                t += topo.transfer_time((group.local_ranks - 1) * s / group.local_ranks, LinkKind::IntraGpu)?;
            }
            t
        }
        EventKind::OptimizerStep | EventKind::MaskDirty => 0.0,
    })
}

struct MemOp {
    time: f64,
    seq: usize,
    /// Frees sort after allocations at the same event boundary.
    order: u8,
    delta: i64,
}

/// Runs `iterations` iterations with default options.
pub fn run(plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology, iterations: u64) -> Result<SimTrace> {
    run_with(plan, model, topo, iterations, &SimOptions::default())
}

pub fn run_with(
    plan: &StrategyPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    iterations: u64,
    opts: &SimOptions,
) -> Result<SimTrace> {
    if iterations == 0 {
        return Err(Error::config("run.iterations", "must be >= 1"));
    }
    plan.validate(topo)?;
    model.validate()?;
    let cg = CollectiveGeometry::new(plan, model, topo);
    let g = cg.geo.gpus_per_node;
    let admitted = tau_admission(plan, model, topo)?;
    let fp = memory_footprint(plan, model, topo)?;
    let resident = fp.gpu_persistent_bytes + gather_pool_bytes(plan, model, topo);

    let mut trace = SimTrace {
        strategy: plan.kind,
        fingerprint: fingerprint(plan, model, topo),
        options: *opts,
        gpu_capacity_bytes: plan.gpu_capacity_bytes,
        host_capacity_bytes: plan.host_capacity_bytes,
        samples_per_iteration: model.batch_per_gpu * cg.geo.total_gpus,
        events: Vec::new(),
        consumptions: Vec::new(),
        memory_samples: Vec::new(),
        iterations: Vec::new(),
        snapshots: Vec::new(),
        link_byte_totals: LinkBytes::default(),
        peak_gpu_bytes: 0,
        peak_host_bytes: 0,
    };

    let oom = |tier: Tier, iteration: u64, ev: Option<&TraceEvent>, required: u64, capacity: u64| {
        Error::OutOfMemory(Box::new(OomVerdict {
            tier,
            iteration,
            event_id: ev.map(|e| e.event_id),
            kind: ev.map(|e| e.kind),
            layer: ev.and_then(|e| e.layer),
            required_bytes: required,
            capacity_bytes: capacity,
        }))
    };

    // host pinned pool is allocated once, before the first iteration
    if fp.host_cache_bytes_per_node > 0 {
        if fp.host_cache_bytes_per_node > plan.host_capacity_bytes {
            return Err(oom(Tier::Host, 1, None, fp.host_cache_bytes_per_node, plan.host_capacity_bytes));
        }
        trace.memory_samples.push(MemorySample {
            time_s: 0.0,
            tier: Tier::Host,
            bytes: fp.host_cache_bytes_per_node,
            seq: None,
        });
        trace.peak_host_bytes = fp.host_cache_bytes_per_node;
    }
    if resident > plan.gpu_capacity_bytes {
        return Err(oom(Tier::Gpu, 1, None, resident, plan.gpu_capacity_bytes));
    }
    trace.memory_samples.push(MemorySample {
        time_s: 0.0,
        tier: Tier::Gpu,
        bytes: resident,
        seq: None,
    });
    trace.peak_gpu_bytes = resident;

    let mut payloads = Payloads::new(plan, model, &cg);
    let mut state = initial_state(model);
    let mut free_at: HashMap<ResourceId, f64> = HashMap::new();
    let mut clock = 0.0f64;
    let mut gpu_bytes = resident;

    for it in 1..=iterations {
        trace.snapshots.push(state.clone());
        let program: EventProgram = build_iteration(plan, model, topo, &state, it, &opts.schedule)?;
        let base = trace.events.len();
        let start = clock;
        let mut link_bytes = LinkBytes::default();
        let mut mem_ops = Vec::new();
        for e in &program.events {
            let seq = base + e.id;
            let deps: Vec<usize> = e.deps.iter().map(|&d| base + d).collect();
            let mut t0 = start;
            for &d in &deps {
                t0 = t0.max(trace.events[d].end_s);
            }
            for r in &e.resources {
                if let Some(&t) = free_at.get(r) {
                    t0 = t0.max(t);
                }
            }
            let t1 = t0 + duration(e, model, topo, g)?;
            for r in &e.resources {
                free_at.insert(*r, t1);
            }
            link_bytes.add(&e.link_bytes);
            trace.events.push(TraceEvent {
                seq,
                iteration: it,
                event_id: e.id,
                kind: e.kind,
                layer: e.layer,
                param_set: e.param_set,
                phase: e.phase,
                params: e.params.clone(),
                start_s: t0,
                end_s: t1,
                resources: e.resources.clone(),
                link_bytes: e.link_bytes,
                deps,
            });
            let consumed = payloads.apply(e, seq, it, &admitted);
            trace.consumptions.extend(consumed);
            mem_ops.extend(memory_ops(plan, model, &cg, e, seq, t0, t1, &admitted));
        }
        let end = trace.events[base..].iter().map(|e| e.end_s).fold(start, f64::max);

        mem_ops.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.seq.cmp(&b.seq)).then(a.order.cmp(&b.order)));
        let mut peak = gpu_bytes;
        for op in mem_ops {
            gpu_bytes = gpu_bytes
                .checked_add_signed(op.delta)
                .ok_or_else(|| Error::Protocol(format!("GPU memory below zero at event {}", op.seq)))?;
            if gpu_bytes > plan.gpu_capacity_bytes {
                return Err(oom(Tier::Gpu, it, Some(&trace.events[op.seq]), gpu_bytes, plan.gpu_capacity_bytes));
            }
            peak = peak.max(gpu_bytes);
            trace.memory_samples.push(MemorySample {
                time_s: op.time,
                tier: Tier::Gpu,
                bytes: gpu_bytes,
                seq: Some(op.seq),
            });
        }
        trace.peak_gpu_bytes = trace.peak_gpu_bytes.max(peak);
        trace.link_byte_totals.add(&link_bytes);
        trace.iterations.push(IterationRecord {
            index: it,
            start_s: start,
            end_s: end,
            link_bytes,
            peak_gpu_bytes: peak,
        });
        state = step_state(&state, &program);
        clock = end;
    }
    trace.snapshots.push(state);
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn memory_ops(
    plan: &StrategyPlan,
    model: &ModelSpec,
    cg: &CollectiveGeometry,
    e: &Event,
    seq: usize,
    t0: f64,
    t1: f64,
    admitted: &[bool],
) -> Vec<MemOp> {
    let Some(l) = e.layer else { return Vec::new() };
    let activations = (model.layers[l].activation_bytes_per_sample * model.batch_per_gpu) as i64;
    let layer_bytes = cg.geo.layer_bytes(model, l) as i64;
    let alloc = |time, delta| MemOp { time, seq, order: 0, delta };
    let free = |time, delta: i64| MemOp {
        time,
        seq,
        order: 1,
        delta: -delta,
    };
    let mut ops = Vec::new();
    match (e.kind, e.phase) {
        (EventKind::ComputeFwd, _) => {
            ops.push(alloc(t0, activations));
            if plan.kind.uses_host_cache() && admitted[l] {
                ops.push(alloc(t1, layer_bytes));
            }
        }
        (EventKind::ComputeBwd, _) => {
            ops.push(free(t1, activations));
            if plan.kind.uses_host_cache() && admitted[l] {
                ops.push(free(t1, layer_bytes));
            }
            if plan.kind == StrategyKind::ZeroPP {
                ops.push(free(t1, layer_bytes / cg.geo.gpus_per_node as i64));
            }
        }
        (EventKind::AgInter, Phase::Forward) if plan.kind == StrategyKind::ZeroPP => {
            ops.push(alloc(t1, layer_bytes / cg.geo.gpus_per_node as i64));
        }
        _ => {}
    }
    ops.retain(|op| op.delta != 0);
    ops
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    /// Window start.
    pub timestamp_s: f64,
    pub link_class: LinkKind,
    pub bytes_per_s: f64,
}

/// Windowed cluster-wide byte rate per link class.
pub fn bandwidth_profile(trace: &SimTrace, window_s: f64) -> Result<Vec<BandwidthSample>> {
    bandwidth_profile_filtered(trace, window_s, |_| true)
}

/// As [`bandwidth_profile`], counting only events accepted by `filter`.
pub fn bandwidth_profile_filtered(
    trace: &SimTrace,
    window_s: f64,
    filter: impl Fn(&TraceEvent) -> bool,
) -> Result<Vec<BandwidthSample>> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(Error::config("run.window_s", "must be > 0"));
    }
    let end = trace.events.iter().map(|e| e.end_s).fold(0.0, f64::max);
    if trace.events.is_empty() || end <= 0.0 {
        return Ok(Vec::new());
    }
    let windows = (end / window_s).ceil() as usize;
    let mut acc = vec![[0.0f64; 3]; windows];
    for e in trace.events.iter().filter(|e| filter(e)) {
        for (k, kind) in LinkKind::ALL.into_iter().enumerate() {
            let bytes = e.link_bytes.get(kind) as f64;
            if bytes == 0.0 {
                continue;
            }
            let span = e.end_s - e.start_s;
            if span <= 0.0 {
                let w = ((e.start_s / window_s) as usize).min(windows - 1);
                acc[w][k] += bytes;
                continue;
            }
            let first = (e.start_s / window_s) as usize;
            let last = ((e.end_s / window_s).ceil() as usize).min(windows);
            for (w, slot) in acc.iter_mut().enumerate().take(last).skip(first) {
                let lo = e.start_s.max(w as f64 * window_s);
                let hi = e.end_s.min((w + 1) as f64 * window_s);
                if hi > lo {
                    slot[k] += bytes * (hi - lo) / span;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(windows * 3);
    for (w, slot) in acc.iter().enumerate() {
        for (k, kind) in LinkKind::ALL.into_iter().enumerate() {
            out.push(BandwidthSample {
                timestamp_s: w as f64 * window_s,
                link_class: kind,
                bytes_per_s: slot[k] / window_s,
            });
        }
    }
    Ok(out)
}

pub fn write_bandwidth_csv(samples: &[BandwidthSample], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_s", "link_class", "bytes_per_s"])?;
    for s in samples {
        w.write_record([s.timestamp_s.to_string(), s.link_class.to_string(), s.bytes_per_s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One simulation in a batch.
#[derive(Debug, Clone)]
pub struct Job {
    pub plan: StrategyPlan,
    pub model: ModelSpec,
    pub topo: ClusterTopology,
    pub iterations: u64,
    pub options: SimOptions,
}

impl Job {
    pub fn run(&self) -> Result<SimTrace> {
        run_with(&self.plan, &self.model, &self.topo, self.iterations, &self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Rayon thread pool; sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

/// Runs independent simulations; results keep the input order.
pub fn run_all(jobs: &[Job], exec: Exec) -> Vec<Result<SimTrace>> {
    match exec {
        Exec::Sequential => jobs.iter().map(Job::run).collect(),
        Exec::Parallel => run_parallel(jobs),
    }
}

#[cfg(feature = "parallel")]
fn run_parallel(jobs: &[Job]) -> Vec<Result<SimTrace>> {
    use rayon::prelude::*;
    jobs.par_iter().map(Job::run).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(jobs: &[Job]) -> Vec<Result<SimTrace>> {
    jobs.iter().map(Job::run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::comm_volume;
    use crate::topology::BandwidthPreset;
    use crate::workload::{apply_lora_mask, model_preset, Calibration, LayerSpec};
    use proptest::prelude::*;

    fn topo(n: usize, g: usize) -> ClusterTopology {
        ClusterTopology::commodity(n, g, BandwidthPreset::Ib100RdmaMeasured).unwrap()
    }

    fn toy(layers: usize, frac: f64) -> ModelSpec {
        let m = ModelSpec::uniform("toy", layers, 4_000_000, 2).unwrap();
        apply_lora_mask(&m, frac).unwrap().with_coefficients(1e-4, 2e-4, 100_000).with_batch(4)
    }

    fn fresh(trace: &SimTrace) -> bool {
        trace
            .consumptions
            .iter()
            .all(|c| c.shard_versions.iter().all(|&v| v == Some(c.expected_version)))
    }

    #[test]
    fn single_node_moves_nothing_between_nodes() {
        let t = run(&StrategyPlan::new(StrategyKind::Zero3), &toy(4, 1.0), &topo(1, 4), 2).unwrap();
        assert_eq!(t.link_byte_totals.inter_node, 0);
        assert!(t.link_byte_totals.intra_gpu > 0);
    }

    #[test]
    fn fcdp_steady_state_matches_oracle() {
        let m = model_preset("gpt10b").unwrap().with_coefficients(1e-3, 2e-3, 0);
        let t = topo(2, 8);
        let plan = StrategyPlan::new(StrategyKind::Fcdp);
        let trace = run(&plan, &m, &t, 3).unwrap();
        let it2 = trace.iterations[1].link_bytes;
        let it3 = trace.iterations[2].link_bytes;
        assert_eq!(it2, it3);
        let oracle = comm_volume(&plan, &m, &t, 3).unwrap();
        assert_eq!(it3.inter_node, 2 * oracle.inter_node_total());
        assert_eq!(oracle.inter_node_total(), 20_000_000_000);
        assert!(fresh(&trace));
    }

    #[test]
    fn zeropp_runs_out_of_memory_where_fcdp_fits() {
        let m = Calibration::Table5A40.apply(&model_preset("gpt30b").unwrap()).with_batch(8);
        let t = topo(2, 8);
        let err = run(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &t, 1).unwrap_err();
        let Error::OutOfMemory(v) = err else { panic!("expected OOM, got {err}") };
        assert_eq!(v.tier, Tier::Gpu);
        assert_eq!(v.kind, Some(EventKind::AgInter));
        assert!(run(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t, 1).is_ok());
        assert!(run(&StrategyPlan::new(StrategyKind::Zero3), &m, &t, 1).is_ok());
    }

    #[test]
    fn fcdp_peak_equals_zero3_peak_and_analytic() {
        let m = toy(6, 0.1);
        let t = topo(2, 4);
        let z3 = run(&StrategyPlan::new(StrategyKind::Zero3), &m, &t, 2).unwrap();
        let fcdp = run(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t, 2).unwrap();
        assert_eq!(z3.peak_gpu_bytes, fcdp.peak_gpu_bytes);
        let fp = memory_footprint(&StrategyPlan::new(StrategyKind::Zero3), &m, &t).unwrap();
        assert_eq!(z3.peak_gpu_bytes, fp.gpu_total_bytes());
        let pp = run(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &t, 2).unwrap();
        let fp = memory_footprint(&StrategyPlan::new(StrategyKind::ZeroPP), &m, &t).unwrap();
        assert_eq!(pp.peak_gpu_bytes, fp.gpu_total_bytes());
    }

    #[test]
    fn traces_are_deterministic() {
        let m = toy(5, 0.05);
        let plan = StrategyPlan::new(StrategyKind::FcdpComm).with_tau(0.5).with_gpu_capacity(200_000_000);
        let a = run(&plan, &m, &topo(2, 4), 3).unwrap();
        let b = run(&plan, &m, &topo(2, 4), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn every_strategy_consumes_fresh_parameters() {
        let t = topo(2, 4);
        for frac in [1.0, 0.25] {
            let m = toy(4, frac);
            for kind in StrategyKind::ALL {
                let plan = if kind == StrategyKind::MiCS { StrategyPlan::mics(8) } else { StrategyPlan::new(kind) };
                let trace = run(&plan, &m, &t, 4).unwrap();
                assert!(fresh(&trace), "{kind} {frac}");
                assert_eq!(trace.snapshots.len(), 5);
                let mut sum = LinkBytes::default();
                for e in &trace.events {
                    sum.add(&e.link_bytes);
                }
                assert_eq!(sum, trace.link_byte_totals);
            }
        }
    }

    #[test]
    fn causality_and_channel_exclusivity() {
        let m = toy(4, 0.5);
        let trace = run(&StrategyPlan::new(StrategyKind::FcdpComm), &m, &topo(2, 2), 3).unwrap();
        for e in &trace.events {
            for &d in &e.deps {
                assert!(trace.events[d].end_s <= e.start_s);
            }
        }
        let mut by_res: HashMap<ResourceId, Vec<(f64, f64)>> = HashMap::new();
        for e in &trace.events {
            for r in &e.resources {
                by_res.entry(*r).or_default().push((e.start_s, e.end_s));
            }
        }
        for spans in by_res.values() {
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0);
            }
        }
    }

    #[test]
    fn bandwidth_profile_conserves_bytes() {
        let m = toy(4, 1.0);
        let trace = run(&StrategyPlan::new(StrategyKind::Zero3), &m, &topo(2, 4), 2).unwrap();
        let w = trace.iteration_time_s() / 17.0;
        let prof = bandwidth_profile(&trace, w).unwrap();
        for kind in LinkKind::ALL {
            let integral: f64 = prof.iter().filter(|s| s.link_class == kind).map(|s| s.bytes_per_s * w).sum();
            let total = trace.link_byte_totals.get(kind) as f64;
            assert!((integral - total).abs() <= 1e-6 * total.max(1.0), "{kind} {integral} {total}");
        }
        let mut empty = trace.clone();
        empty.events.clear();
        assert!(bandwidth_profile(&empty, 1.0).unwrap().is_empty());
        assert!(bandwidth_profile(&trace, 0.0).is_err());
    }

    #[test]
    fn fcdp_backward_gathers_nothing_across_nodes() {
        let m = toy(6, 1.0);
        let trace = run(&StrategyPlan::new(StrategyKind::Fcdp), &m, &topo(2, 4), 1).unwrap();
        let last_fwd_gather = trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::AgInter)
            .map(|e| e.end_s)
            .fold(0.0, f64::max);
        let w = trace.iteration_time_s() / 50.0;
        let prof = bandwidth_profile_filtered(&trace, w, |e| matches!(e.kind, EventKind::AgInter)).unwrap();
        for s in prof.iter().filter(|s| s.link_class == LinkKind::InterNode && s.timestamp_s >= last_fwd_gather) {
            assert_eq!(s.bytes_per_s, 0.0);
        }
    }

    #[test]
    fn prefetch_and_duplex_only_slow_things_down() {
        let m = toy(6, 1.0).with_coefficients(2e-3, 4e-3, 0);
        let t = topo(2, 4);
        let plan = StrategyPlan::new(StrategyKind::Fcdp);
        let on = run(&plan, &m, &t, 2).unwrap().iteration_time_s();
        let off_opts = SimOptions {
            schedule: ScheduleOptions {
                prefetch: false,
                fault: None,
            },
        };
        let off = run_with(&plan, &m, &t, 2, &off_opts).unwrap().iteration_time_s();
        assert!(off > on, "{off} {on}");
        let half = t
            .with_link(t.link(LinkKind::HostGpu).unwrap().with_duplex(crate::topology::Duplex::HalfDuplex))
            .unwrap();
        let slow = run(&plan, &m, &half, 2).unwrap().iteration_time_s();
        assert!(slow >= on);
    }

    #[test]
    fn parallel_matches_sequential() {
        let jobs: Vec<Job> = StrategyKind::ALL
            .into_iter()
            .filter(|k| *k != StrategyKind::MiCS)
            .map(|k| Job {
                plan: StrategyPlan::new(k),
                model: toy(3, 0.5),
                topo: topo(2, 2),
                iterations: 2,
                options: SimOptions::default(),
            })
            .collect();
        let a = run_all(&jobs, Exec::Sequential);
        let b = run_all(&jobs, Exec::Parallel);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref().unwrap(), y.as_ref().unwrap());
        }
    }

    #[test]
    fn host_tier_oom() {
        let m = model_preset("gpt10b").unwrap();
        let plan = StrategyPlan::new(StrategyKind::Fcdp).with_host_capacity(1 << 30);
        let err = run(&plan, &m, &topo(2, 8), 1).unwrap_err();
        assert!(matches!(err, Error::OutOfMemory(v) if v.tier == Tier::Host && v.event_id.is_none()));
    }

    #[test]
    fn csv_headers() {
        let trace = run(&StrategyPlan::new(StrategyKind::Zero3), &toy(2, 1.0), &topo(2, 2), 1).unwrap();
        let mut buf = Vec::new();
        trace.write_memory_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("timestamp_s,tier,bytes\n"));
        let mut buf = Vec::new();
        write_bandwidth_csv(&bandwidth_profile(&trace, 0.01).unwrap(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("timestamp_s,link_class,bytes_per_s\n"));
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), trace.events.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tau_peak_is_monotone_and_bounded(
            counts in prop::collection::vec(100_000u64..3_000_000, 1..6),
            frac in 0.01f64..=1.0,
            cap_scale in 1.0f64..3.0,
            taus in prop::collection::vec(0.0f64..=1.0, 2..5),
        ) {
            let t = topo(2, 2);
            let layers = counts.iter().enumerate().map(|(i, &c)| LayerSpec::new(i, c)).collect();
            let m = apply_lora_mask(&ModelSpec::new("p", layers, 2).unwrap(), frac).unwrap()
                .with_coefficients(1e-4, 1e-4, 10_000);
            let base = memory_footprint(&StrategyPlan::new(StrategyKind::Fcdp), &m, &t).unwrap().gpu_total_bytes();
            let cap = (base as f64 * cap_scale) as u64;
            let mut taus = taus;
            taus.sort_by(f64::total_cmp);
            let mut last = 0;
            for tau in taus {
                for kind in [StrategyKind::Fcdp, StrategyKind::FcdpComm] {
                    let plan = StrategyPlan::new(kind).with_tau(tau).with_gpu_capacity(cap);
                    let trace = run(&plan, &m, &t, 2).unwrap();
                    prop_assert!(trace.peak_gpu_bytes >= base);
                    prop_assert!(trace.peak_gpu_bytes as f64 <= (base as f64).max(tau * cap as f64));
                    prop_assert!(fresh(&trace));
                    if kind == StrategyKind::Fcdp {
                        prop_assert!(trace.peak_gpu_bytes >= last);
                        last = trace.peak_gpu_bytes;
                    }
                }
            }
        }
    }
}

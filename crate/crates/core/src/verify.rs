//! Post-hoc protocol checks over simulated traces, trace mutations that
//! exercise each rule, and reconciliation against the analytical model.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::costmodel::comm_volume;
use crate::error::{Error, Result};
use crate::schedule::{EventKind, LinkBytes, Phase, ResourceId};
use crate::simengine::{fingerprint, SimTrace, Tier, TraceEvent};
use crate::strategy::{memory_footprint, StrategyKind, StrategyPlan};
use crate::topology::ClusterTopology;
use crate::workload::{ModelSpec, ParamId, ParamPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Every compute consumed all shards of its layer at the current version.
    Freshness,
    /// Each frozen parameter crosses the network once (FCDP-Comm).
    FrozenGatherOnce,
    /// No inter-node gather in the backward pass (cache strategies).
    ZeroBackwardAgInter,
    /// `dirty` exactly when the host copy is stale (host-cache strategies).
    DirtyIffStale,
    MemoryCeiling,
    ByteConservation,
    Causality,
    /// No two events overlap on one channel.
    ChannelOverlap,
}

impl Rule {
    pub const ALL: [Rule; 8] = [
        Rule::Freshness,
        Rule::FrozenGatherOnce,
        Rule::ZeroBackwardAgInter,
        Rule::DirtyIffStale,
        Rule::MemoryCeiling,
        Rule::ByteConservation,
        Rule::Causality,
        Rule::ChannelOverlap,
    ];

    pub fn applies_to(self, kind: StrategyKind) -> bool {
        match self {
            Rule::FrozenGatherOnce => kind == StrategyKind::FcdpComm,
            Rule::ZeroBackwardAgInter => kind.caches_for_backward(),
            Rule::DirtyIffStale => kind.uses_host_cache(),
            _ => true,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("rule serializes");
        f.write_str(s.as_str().unwrap_or("rule"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// Trace sequence number of the offending event.
    pub event_id: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.event_id {
            Some(id) => write!(f, "[{}] event {id}: {}", self.rule, self.detail),
            None => write!(f, "[{}] {}", self.rule, self.detail),
        }
    }
}

/// Checks every applicable rule. A trace produced from other inputs is a
/// harness error, not a violation.
pub fn check_trace(trace: &SimTrace, plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<Vec<Violation>> {
    let expected = fingerprint(plan, model, topo);
    if trace.fingerprint != expected || trace.strategy != plan.kind {
        return Err(Error::Harness(format!(
            "trace {} was not produced from these inputs ({})",
            short(&trace.fingerprint),
            short(&expected)
        )));
    }
    let mut out = Vec::new();
    for rule in Rule::ALL {
        if rule.applies_to(plan.kind) {
            check_rule(rule, trace, model, topo, &mut out);
        }
    }
    Ok(out)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn check_rule(rule: Rule, trace: &SimTrace, model: &ModelSpec, topo: &ClusterTopology, out: &mut Vec<Violation>) {
    let mut v = |event_id: Option<usize>, detail: String| out.push(Violation { rule, event_id, detail });
    match rule {
        Rule::Freshness => {
            let mut seen: HashMap<(usize, usize, ParamId), &crate::simengine::Consumption> = HashMap::new();
            for c in &trace.consumptions {
                seen.insert((c.seq, c.node, c.param_id), c);
            }
            for e in trace.events.iter().filter(|e| e.kind.is_compute()) {
                let layer = e.layer.expect("layer compute");
                let Some(snapshot) = trace.snapshots.get(e.iteration as usize - 1) else {
                    v(Some(e.seq), "no parameter snapshot for the iteration".into());
                    continue;
                };
                for p in model.params().filter(|p| p.layer == layer) {
                    let want = snapshot.iter().find(|s| s.param_id == p).map(|s| s.version);
                    for node in 0..topo.num_nodes() {
                        match seen.get(&(e.seq, node, p)) {
                            None => v(Some(e.seq), format!("{p} never assembled on node {node}")),
                            Some(c) => {
                                if let Some(bad) = c.shard_versions.iter().position(|&s| s.is_none() || s != want) {
                                    v(
                                        Some(e.seq),
                                        format!(
                                            "{p} on node {node}: shard {bad} at {:?}, current version {:?}",
                                            c.shard_versions[bad], want
                                        ),
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        Rule::FrozenGatherOnce => {
            let mut count: HashMap<ParamId, Vec<usize>> = model.params().filter(|p| p.is_frozen()).map(|p| (p, Vec::new())).collect();
            for e in trace.events.iter().filter(|e| e.kind == EventKind::AgInter) {
                for p in &e.params {
                    if let Some(list) = count.get_mut(p) {
                        list.push(e.seq);
                    }
                }
            }
            let mut keys: Vec<_> = count.into_iter().collect();
            keys.sort();
            for (p, seqs) in keys {
                if seqs.len() != 1 {
                    v(seqs.get(1).copied(), format!("frozen {p} gathered across nodes {} times", seqs.len()));
                }
            }
        }
        Rule::ZeroBackwardAgInter => {
            for it in &trace.iterations {
                let events: Vec<&TraceEvent> = trace.events_in(it.index).collect();
                let last_fwd = events.iter().rposition(|e| e.kind == EventKind::ComputeFwd);
                for (i, e) in events.iter().enumerate() {
                    let after = last_fwd.is_some_and(|f| i > f);
                    if e.kind == EventKind::AgInter && (after || e.phase == Phase::Backward) {
                        v(Some(e.seq), format!("inter-node all-gather in the backward pass of iteration {}", it.index));
                    }
                }
            }
        }
        Rule::DirtyIffStale => {
            for (i, snap) in trace.snapshots.iter().enumerate() {
                for s in snap {
                    let stale = s.host_cached_version != Some(s.version);
                    if s.dirty != stale {
                        v(None, format!("snapshot {i}: {} dirty = {} with host copy {:?} at version {}", s.param_id, s.dirty, s.host_cached_version, s.version));
                    }
                    if s.frozen && s.version != 0 {
                        v(None, format!("snapshot {i}: frozen {} at version {}", s.param_id, s.version));
                    }
                }
            }
        }
        Rule::MemoryCeiling => {
            for s in &trace.memory_samples {
                let cap = match s.tier {
                    Tier::Gpu => trace.gpu_capacity_bytes,
                    Tier::Host => trace.host_capacity_bytes,
                };
                if s.bytes > cap {
                    v(s.seq, format!("{} tier at {} bytes over capacity {cap}", s.tier, s.bytes));
                }
            }
        }
        Rule::ByteConservation => {
            let mut total = LinkBytes::default();
            let mut per_iter: HashMap<u64, LinkBytes> = HashMap::new();
            for e in &trace.events {
                total.add(&e.link_bytes);
                per_iter.entry(e.iteration).or_default().add(&e.link_bytes);
            }
            if total != trace.link_byte_totals {
                v(None, format!("events sum to {total:?}, totals say {:?}", trace.link_byte_totals));
            }
            for it in &trace.iterations {
                let sum = per_iter.get(&it.index).copied().unwrap_or_default();
                if sum != it.link_bytes {
                    v(None, format!("iteration {}: events sum to {sum:?}, record says {:?}", it.index, it.link_bytes));
                }
            }
        }
        Rule::Causality => {
            for e in &trace.events {
                for &d in &e.deps {
                    match trace.events.get(d) {
                        Some(dep) if d < e.seq && dep.end_s <= e.start_s => {}
                        Some(dep) => v(Some(e.seq), format!("starts at {} before dependency {d} ends at {}", e.start_s, dep.end_s)),
                        None => v(Some(e.seq), format!("unknown dependency {d}")),
                    }
                }
                if e.end_s < e.start_s {
                    v(Some(e.seq), "ends before it starts".into());
                }
            }
        }
        Rule::ChannelOverlap => {
            let mut by_res: HashMap<ResourceId, Vec<(f64, f64, usize)>> = HashMap::new();
            for e in &trace.events {
                for r in &e.resources {
                    by_res.entry(*r).or_default().push((e.start_s, e.end_s, e.seq));
                }
            }
            let mut reported = BTreeSet::new();
            let mut keys: Vec<_> = by_res.keys().copied().collect();
            keys.sort();
            for r in keys {
                let spans = by_res.get_mut(&r).expect("key");
                spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                for w in spans.windows(2) {
                    if w[1].0 < w[0].1 && reported.insert(w[1].2) {
                        v(Some(w[1].2), format!("overlaps event {} on {:?}", w[0].2, r));
                    }
                }
            }
        }
    }
}

/// Inserts `event` at trace position `pos`, renumbering later events and
/// every reference to them.
fn insert_event(trace: &mut SimTrace, pos: usize, mut event: TraceEvent) {
    let shift = |s: usize| if s >= pos { s + 1 } else { s };
    for e in &mut trace.events {
        e.seq = shift(e.seq);
        e.deps.iter_mut().for_each(|d| *d = shift(*d));
    }
    for c in &mut trace.consumptions {
        c.seq = shift(c.seq);
    }
    for s in &mut trace.memory_samples {
        s.seq = s.seq.map(shift);
    }
    event.seq = pos;
    event.deps.iter_mut().for_each(|d| *d = shift(*d));
    let bytes = event.link_bytes;
    let iteration = event.iteration;
    trace.events.insert(pos, event);
    trace.link_byte_totals.add(&bytes);
    if let Some(it) = trace.iterations.iter_mut().find(|i| i.index == iteration) {
        it.link_bytes.add(&bytes);
    }
}

/// Corrupts a trace so that `rule`, and only `rule`, is violated. `None` when
/// the trace has nothing to corrupt for that rule (e.g. no frozen parameters).
pub fn mutate(trace: &SimTrace, rule: Rule) -> Option<SimTrace> {
    let mut t = trace.clone();
    match rule {
        Rule::Freshness => {
            let c = t.consumptions.first_mut()?;
            let s = c.shard_versions.first_mut()?;
            *s = Some(s.map_or(1, |v| v + 1));
        }
        Rule::FrozenGatherOnce => {
            let pos = t
                .events
                .iter()
                .position(|e| e.kind == EventKind::AgInter && e.params.iter().any(|p| p.part == ParamPart::Frozen))?;
            let mut dup = t.events[pos].clone();
            dup.resources.clear();
            insert_event(&mut t, pos + 1, dup);
        }
        Rule::ZeroBackwardAgInter => {
            let it = t.iterations.first()?.index;
            let last_fwd = t.events.iter().rposition(|e| e.iteration == it && e.kind == EventKind::ComputeFwd)?;
            let fwd = &t.events[last_fwd];
            let trainable = fwd.params.iter().copied().find(|p| p.part == ParamPart::Trainable)?;
            let bytes = LinkBytes {
                inter_node: 1,
                ..Default::default()
            };
            let injected = TraceEvent {
                seq: 0,
                iteration: it,
                event_id: usize::MAX,
                kind: EventKind::AgInter,
                layer: fwd.layer,
                param_set: crate::schedule::ParamSet::TrainableOnly,
                phase: Phase::Backward,
                params: vec![trainable],
                start_s: fwd.end_s,
                end_s: fwd.end_s,
                resources: Vec::new(),
                link_bytes: bytes,
                deps: vec![last_fwd],
            };
            insert_event(&mut t, last_fwd + 1, injected);
        }
        Rule::DirtyIffStale => {
            let s = t.snapshots.get_mut(1)?.first_mut()?;
            s.dirty = !s.dirty;
        }
        Rule::MemoryCeiling => {
            let cap = t.gpu_capacity_bytes;
            let s = t.memory_samples.iter_mut().find(|s| s.tier == Tier::Gpu)?;
            s.bytes = cap + 1;
        }
        Rule::ByteConservation => {
            t.link_byte_totals.inter_node += 1;
        }
        Rule::Causality => {
            let e = t.events.iter_mut().find(|e| e.kind == EventKind::OptimizerStep && !e.deps.is_empty() && e.resources.is_empty())?;
            e.start_s -= 1.0;
        }
        Rule::ChannelOverlap => {
            let n = t.events.len();
            let (victim, res) = (0..n).find_map(|i| {
                let a = &t.events[i];
                (0..n).find_map(|j| {
                    let b = &t.events[j];
                    let overlap = a.start_s.max(b.start_s) < a.end_s.min(b.end_s);
                    if i == j || !overlap {
                        return None;
                    }
                    a.resources.iter().find(|r| !b.resources.contains(r)).map(|r| (j, *r))
                })
            })?;
            t.events[victim].resources.push(res);
        }
    }
    Some(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    Exact,
    /// Simulated value must lie in `[lo, hi]`.
    Within { lo: u64, hi: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub quantity: String,
    pub iteration: Option<u64>,
    pub simulated: u64,
    pub analytical: u64,
    pub delta: i128,
    pub bound: Bound,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationReport {
    pub strategy: StrategyKind,
    pub tau: f64,
    pub rows: Vec<ReconRow>,
}

impl ReconciliationReport {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.ok)
    }

    pub fn row(&self, quantity: &str, iteration: Option<u64>) -> Option<&ReconRow> {
        self.rows.iter().find(|r| r.quantity == quantity && r.iteration == iteration)
    }
}

fn row(quantity: &str, iteration: Option<u64>, simulated: u64, analytical: u64, bound: Bound) -> ReconRow {
    let ok = match bound {
        Bound::Exact => simulated == analytical,
        Bound::Within { lo, hi } => (lo..=hi).contains(&simulated),
    };
    ReconRow {
        quantity: quantity.to_string(),
        iteration,
        simulated,
        analytical,
        delta: simulated as i128 - analytical as i128,
        bound,
        ok,
    }
}

/// Compares simulated bytes and memory peaks with the analytical model, for
/// the first and the last (steady-state) iteration. Simulated bytes are
/// cluster-wide, so the per-node oracle is scaled by the node count.
pub fn reconcile(trace: &SimTrace, plan: &StrategyPlan, model: &ModelSpec, topo: &ClusterTopology) -> Result<ReconciliationReport> {
    let nodes = topo.num_nodes() as u64;
    let exact = plan.tau == 0.0 || !plan.kind.uses_host_cache();
    let mut rows = Vec::new();
    let mut iters: Vec<u64> = trace.iterations.iter().map(|i| i.index).take(1).collect();
    if let Some(last) = trace.iterations.last() {
        if last.index != iters[0] {
            iters.push(last.index);
        }
    }
    for it in iters {
        let rec = trace.iterations.iter().find(|i| i.index == it).expect("listed iteration");
        let v = comm_volume(plan, model, topo, it)?;
        rows.push(row("inter_node_bytes", Some(it), rec.link_bytes.inter_node, nodes * v.inter_node_total(), Bound::Exact));
        let upto = |analytic: u64| if exact { Bound::Exact } else { Bound::Within { lo: 0, hi: analytic } };
        let intra = nodes * v.intra_node_total;
        rows.push(row("intra_node_bytes", Some(it), rec.link_bytes.intra_gpu, intra, upto(intra)));
        let host = nodes * (v.h2d_total + v.d2h_total);
        rows.push(row("host_gpu_bytes", Some(it), rec.link_bytes.host_gpu, host, upto(host)));
    }
    let fp = memory_footprint(plan, model, topo)?;
    let analytic = fp.gpu_total_bytes();
    let bound = if exact {
        Bound::Exact
    } else {
        Bound::Within {
            lo: analytic,
            hi: analytic.max((plan.tau * plan.gpu_capacity_bytes as f64) as u64),
        }
    };
    rows.push(row("peak_gpu_bytes", None, trace.peak_gpu_bytes, analytic, bound));
    rows.push(row("host_bytes_per_node", None, trace.peak_host_bytes, fp.host_cache_bytes_per_node, Bound::Exact));
    Ok(ReconciliationReport {
        strategy: plan.kind,
        tau: plan.tau,
        rows,
    })
}

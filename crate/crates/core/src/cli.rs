//! Run configs and the analyze / simulate / sweep / validate commands.
//!
//! Configs are TOML with explicit units in field names. Every output
//! directory gets a `manifest.json` naming the files written and the SHA-256
//! of the config text, and all outputs are deterministic functions of the
//! config.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::{cost_report, CostReport};
use crate::error::{Error, Result};
use crate::gate::{run_gate, CriterionResult, GateOptions};
use crate::schedule::{EventKind, ScheduleOptions};
use crate::simengine::{bandwidth_profile, run_all, write_bandwidth_csv, Exec, Job, SimOptions, SimTrace};
use crate::strategy::{StrategyKind, StrategyPlan, DEFAULT_GPU_CAPACITY_BYTES, DEFAULT_HOST_CAPACITY_BYTES};
use crate::topology::{BandwidthPreset, ClusterTopology, Duplex, LinkClass, LinkKind};
use crate::verify::{check_trace, reconcile, Violation};
use crate::workload::{apply_lora_mask, Calibration, ModelPreset, ModelSpec};

/// Bumped whenever a CSV column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    #[serde(rename = "strategy", default)]
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub gpus_per_node: usize,
    #[serde(default = "default_internode")]
    pub internode: String,
    #[serde(default = "default_intra")]
    pub intra_node: String,
    #[serde(default = "default_host")]
    pub host_link: String,
    /// Overrides the inter-node preset's bandwidth.
    pub internode_bandwidth_bytes_per_s: Option<f64>,
    #[serde(default)]
    pub internode_latency_s: f64,
    #[serde(default)]
    pub host_link_duplex: Duplex,
}

fn default_internode() -> String {
    BandwidthPreset::Ib100RdmaMeasured.name().into()
}

fn default_intra() -> String {
    BandwidthPreset::Nvlink3Theoretical.name().into()
}

fn default_host() -> String {
    BandwidthPreset::Pcie4Measured.name().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset name; otherwise `num_layers` and `params_per_layer` are required.
    pub preset: Option<String>,
    pub num_layers: Option<usize>,
    pub params_per_layer: Option<u64>,
    #[serde(default = "default_dtype")]
    pub dtype_bytes: u64,
    #[serde(default = "one")]
    pub trainable_fraction: f64,
    /// Attention LoRA rank; overrides `trainable_fraction` for presets.
    pub lora_rank: Option<u64>,
    #[serde(default = "one_u64")]
    pub batch_per_gpu: u64,
    pub calibration: Option<String>,
    pub fwd_compute_s_per_sample: Option<f64>,
    pub bwd_compute_s_per_sample: Option<f64>,
    pub activation_bytes_per_sample: Option<u64>,
}

fn default_dtype() -> u64 {
    2
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    /// MiCS only; defaults to the GPUs per node.
    pub subgroup_size: Option<usize>,
    #[serde(default = "default_gpu_capacity")]
    pub gpu_capacity_bytes: u64,
    #[serde(default = "default_host_capacity")]
    pub host_capacity_bytes: u64,
}

fn default_gpu_capacity() -> u64 {
    DEFAULT_GPU_CAPACITY_BYTES
}

fn default_host_capacity() -> u64 {
    DEFAULT_HOST_CAPACITY_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "yes")]
    pub prefetch: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            iterations: default_iterations(),
            tau: 0.0,
            window_s: default_window(),
            prefetch: true,
            output_dir: default_output(),
        }
    }
}

fn default_iterations() -> u64 {
    3
}

fn default_window() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Axis values; only the swept axis needs to be filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<String>,
    #[serde(default)]
    pub internode_bandwidth: Vec<String>,
    #[serde(default)]
    pub model_preset: Vec<String>,
    #[serde(default)]
    pub trainable_fraction: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub nodes: Vec<usize>,
    /// Run every point with prefetch both on and off.
    #[serde(default)]
    pub compare_prefetch: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    /// Criteria to run; empty runs all.
    #[serde(default)]
    pub criteria: Vec<u8>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    InternodeBandwidth,
    ModelPreset,
    TrainableFraction,
    Tau,
    Nodes,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::InternodeBandwidth,
        SweepAxis::ModelPreset,
        SweepAxis::TrainableFraction,
        SweepAxis::Tau,
        SweepAxis::Nodes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::InternodeBandwidth => "internode_bandwidth",
            SweepAxis::ModelPreset => "model_preset",
            SweepAxis::TrainableFraction => "trainable_fraction",
            SweepAxis::Tau => "tau",
            SweepAxis::Nodes => "nodes",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::UnknownPreset {
            what: "sweep axis",
            name: s.to_string(),
        })
    }
}

/// Resolves a preset-name field, reporting failures at `path`.
fn preset<T: FromStr<Err = Error>>(path: &str, name: &str) -> Result<T> {
    name.parse().map_err(|e: Error| Error::config(path, e.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string().trim_end()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.into_inner().to_string();
            let msg = msg.lines().last().unwrap_or_default().trim().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = fs::read_to_string(path)?;
        Ok((RunConfig::from_toml(&text)?, config_hash(&text)))
    }

    /// Checks presets, ranges and cross-field requirements.
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("strategy", "at least one [[strategy]] is required"));
        }
        if self.run.iterations == 0 {
            return Err(Error::config("run.iterations", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.run.tau) {
            return Err(Error::config("run.tau", "must be in [0, 1]"));
        }
        if !(self.run.window_s > 0.0 && self.run.window_s.is_finite()) {
            return Err(Error::config("run.window_s", "must be > 0"));
        }
        let topo = self.topology()?;
        self.model()?;
        for i in 0..self.strategies.len() {
            self.plan(i, &topo)?;
        }
        for (i, name) in self.sweep.internode_bandwidth.iter().enumerate() {
            preset::<BandwidthPreset>(&format!("sweep.internode_bandwidth[{i}]"), name)?;
        }
        for (i, name) in self.sweep.model_preset.iter().enumerate() {
            preset::<ModelPreset>(&format!("sweep.model_preset[{i}]"), name)?;
        }
        if let Some(axis) = &self.sweep.axis {
            preset::<SweepAxis>("sweep.axis", axis)?;
        }
        if let Some(bad) = self.validate.criteria.iter().position(|c| !(1..=8).contains(c)) {
            return Err(Error::config(format!("validate.criteria[{bad}]"), "criteria are numbered 1-8"));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<ClusterTopology> {
        let t = &self.topology;
        let intra: BandwidthPreset = preset("topology.intra_node", &t.intra_node)?;
        let host: BandwidthPreset = preset("topology.host_link", &t.host_link)?;
        let nic: BandwidthPreset = preset("topology.internode", &t.internode)?;
        let mut nic = LinkClass::from_preset(LinkKind::InterNode, nic).with_latency(t.internode_latency_s);
        if let Some(bw) = t.internode_bandwidth_bytes_per_s {
            nic.bandwidth_bytes_per_s = bw;
        }
        ClusterTopology::new(
            t.nodes,
            t.gpus_per_node,
            vec![
                LinkClass::from_preset(LinkKind::IntraGpu, intra),
                LinkClass::from_preset(LinkKind::HostGpu, host).with_duplex(t.host_link_duplex),
                nic,
            ],
        )
        .map_err(|e| match e {
            Error::Config { path, msg } => Error::config(path.replace("num_nodes", "nodes"), msg),
            e => e,
        })
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let base = match (&m.preset, m.num_layers, m.params_per_layer) {
            (Some(name), None, None) => {
                let p: ModelPreset = preset("model.preset", name)?;
                p.build().with_dtype_bytes(m.dtype_bytes)?
            }
            (Some(_), _, _) => return Err(Error::config("model.preset", "give either a preset or num_layers/params_per_layer, not both")),
            (None, Some(layers), Some(params)) => {
                if layers == 0 {
                    return Err(Error::config("model.num_layers", "must be >= 1"));
                }
                ModelSpec::uniform("custom", layers, params, m.dtype_bytes)?
            }
            (None, None, _) => return Err(Error::config("model.num_layers", "required without a preset")),
            (None, _, None) => return Err(Error::config("model.params_per_layer", "required without a preset")),
        };
        let fraction = match m.lora_rank {
            Some(rank) => {
                let p: ModelPreset = preset("model.preset", m.preset.as_deref().unwrap_or_default())
                    .map_err(|_| Error::config("model.lora_rank", "needs a model preset"))?;
                p.attention_lora_fraction(rank)
            }
            None => m.trainable_fraction,
        };
        let mut model = apply_lora_mask(&base, fraction)?;
        if let Some(name) = &m.calibration {
            let c: Calibration = preset("model.calibration", name)?;
            model = c.apply(&model);
        }
        for l in &mut model.layers {
            if let Some(v) = m.fwd_compute_s_per_sample {
                l.fwd_compute_s_per_sample = v;
            }
            if let Some(v) = m.bwd_compute_s_per_sample {
                l.bwd_compute_s_per_sample = v;
            }
            if let Some(v) = m.activation_bytes_per_sample {
                l.activation_bytes_per_sample = v;
            }
        }
        if m.batch_per_gpu == 0 {
            return Err(Error::config("model.batch_per_gpu", "must be >= 1"));
        }
        let model = model.with_batch(m.batch_per_gpu);
        model.validate()?;
        Ok(model)
    }

    /// Plan for `strategy[i]`, with `run.tau` applied.
    pub fn plan(&self, i: usize, topo: &ClusterTopology) -> Result<StrategyPlan> {
        let s = &self.strategies[i];
        let path = |field: &str| format!("strategy[{i}].{field}");
        let kind: StrategyKind = preset(&path("name"), &s.name)?;
        let mut plan = StrategyPlan::new(kind)
            .with_tau(self.run.tau)
            .with_gpu_capacity(s.gpu_capacity_bytes)
            .with_host_capacity(s.host_capacity_bytes);
        plan.subgroup_size = match (kind, s.subgroup_size) {
            (StrategyKind::MiCS, size) => Some(size.unwrap_or(topo.gpus_per_node())),
            (_, Some(_)) => return Err(Error::config(path("subgroup_size"), "only valid for mics")),
            (_, None) => None,
        };
        plan.validate(topo).map_err(|e| match e {
            Error::InvalidPlan(msg) => Error::config(path("name"), msg),
            e => e,
        })?;
        Ok(plan)
    }

    /// Plans to run: all configured strategies, or only those named in
    /// `filter` (strategies absent from the config get default settings).
    pub fn plans(&self, topo: &ClusterTopology, filter: &[String]) -> Result<Vec<StrategyPlan>> {
        let configured: Vec<StrategyPlan> = (0..self.strategies.len()).map(|i| self.plan(i, topo)).collect::<Result<_>>()?;
        if filter.is_empty() {
            return Ok(configured);
        }
        let mut out = Vec::new();
        for name in filter {
            let kind: StrategyKind = preset("--strategy", name)?;
            let plan = match configured.iter().find(|p| p.kind == kind) {
                Some(p) => p.clone(),
                None => {
                    let mut p = StrategyPlan::new(kind).with_tau(self.run.tau);
                    if kind == StrategyKind::MiCS {
                        p.subgroup_size = Some(topo.gpus_per_node());
                    }
                    p.validate(topo).map_err(|e| Error::config("--strategy", e.to_string()))?;
                    p
                }
            };
            if !out.iter().any(|p: &StrategyPlan| p.kind == kind) {
                out.push(plan);
            }
        }
        Ok(out)
    }

    fn sim_options(&self) -> SimOptions {
        SimOptions {
            schedule: ScheduleOptions {
                prefetch: self.run.prefetch,
                ..Default::default()
            },
        }
    }
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Where a command's outputs went and whether it should exit nonzero.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub failed: bool,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: &'a str,
    csv_schema_version: u32,
    files: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Writer> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn create(&mut self, rel: impl AsRef<Path>) -> Result<BufWriter<fs::File>> {
        let path = self.dir.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.as_ref().to_path_buf());
        Ok(BufWriter::new(fs::File::create(path)?))
    }

    fn json(&mut self, rel: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
        let mut f = self.create(rel)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        std::io::Write::write_all(&mut f, b"\n")?;
        Ok(())
    }

    fn finish(mut self, command: &str, hash: &str, failed: bool, summary: Vec<String>) -> Result<Outcome> {
        let mut names: Vec<String> = self.files.iter().map(|p| p.to_string_lossy().replace('\\', "/")).collect();
        names.sort();
        let manifest = Manifest {
            tool: "shardsim",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: hash,
            csv_schema_version: CSV_SCHEMA_VERSION,
            files: names,
        };
        self.json("manifest.json", &manifest)?;
        Ok(Outcome {
            out_dir: self.dir,
            files: self.files,
            failed,
            summary,
        })
    }
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_sha256: &'a str,
    #[serde(flatten)]
    body: T,
}

/// Modeling choices that the analytical numbers depend on.
pub const ASSUMPTIONS: [&str; 3] = [
    "measured inter-node presets are point-to-point effective bandwidth",
    "zero2 parameter sync is a broadcast of f * bytes(W) after the optimizer step",
    "mics gradient synchronization across subgroups is not modeled",
];

pub const ANALYSIS_COLUMNS: [&str; 21] = [
    "strategy",
    "param_shard_bytes",
    "grad_shard_bytes",
    "optimizer_shard_bytes",
    "gpu_cache_bytes",
    "gpu_transient_peak_bytes",
    "gpu_total_bytes",
    "gpu_capacity_bytes",
    "host_cache_bytes_per_node",
    "gpu_feasible",
    "host_feasible",
    "max_batch",
    "fwd_ag_inter_bytes",
    "bwd_ag_inter_bytes",
    "reduce_scatter_inter_bytes",
    "param_sync_inter_bytes",
    "inter_node_bytes_first_iteration",
    "inter_node_bytes_steady",
    "intra_node_bytes_steady",
    "h2d_bytes_steady",
    "iteration_time_lower_bound_s",
];

fn analysis_row(r: &CostReport) -> Vec<String> {
    let m = &r.memory;
    let v = &r.steady_state;
    vec![
        r.strategy.name().to_string(),
        m.param_shard_bytes.to_string(),
        m.grad_shard_bytes.to_string(),
        m.optimizer_shard_bytes.to_string(),
        m.gpu_cache_bytes.to_string(),
        m.gpu_transient_peak_bytes.to_string(),
        m.gpu_total_bytes().to_string(),
        m.gpu_capacity_bytes.to_string(),
        m.host_cache_bytes_per_node.to_string(),
        r.gpu_feasible.to_string(),
        r.host_feasible.to_string(),
        r.max_batch.max_batch.to_string(),
        v.fwd_ag_inter.to_string(),
        v.bwd_ag_inter.to_string(),
        v.reduce_scatter_inter.to_string(),
        v.param_sync_inter.to_string(),
        r.first_iteration.inter_node_total().to_string(),
        v.inter_node_total().to_string(),
        v.intra_node_total.to_string(),
        v.h2d_total.to_string(),
        format!("{:.6}", r.iteration_time_lower_bound_s),
    ]
}

/// Memory, communication and feasibility tables per strategy. Byte columns
/// are per node (communication) or per GPU (memory).
pub fn cmd_analyze(cfg: &RunConfig, hash: &str, out_dir: &Path, strategies: &[String]) -> Result<Outcome> {
    let topo = cfg.topology()?;
    let model = cfg.model()?;
    let plans = cfg.plans(&topo, strategies)?;
    let reports: Vec<CostReport> = plans.iter().map(|p| cost_report(p, &model, &topo)).collect::<Result<_>>()?;
    let mut w = Writer::new(out_dir)?;
    {
        let mut csv = csv::Writer::from_writer(w.create("analysis.csv")?);
        csv.write_record(ANALYSIS_COLUMNS)?;
        for r in &reports {
            csv.write_record(analysis_row(r))?;
        }
        csv.flush()?;
    }
    w.json(
        "analysis.json",
        &Tagged {
            config_sha256: hash,
            body: serde_json::json!({ "model": model.name, "assumptions": ASSUMPTIONS, "reports": reports }),
        },
    )?;
    let summary = reports
        .iter()
        .map(|r| {
            format!(
                "{:<10} gpu {:>15} B{} host/node {:>15} B  inter-node/iter {:>15} B  max batch {}",
                r.strategy.name(),
                r.memory.gpu_total_bytes(),
                if r.gpu_feasible { "" } else { " (OOM)" },
                r.memory.host_cache_bytes_per_node,
                r.inter_node_total_steady,
                r.max_batch.max_batch
            )
        })
        .collect();
    w.finish("analyze", hash, false, summary)
}

#[derive(Serialize)]
struct SimSummary {
    strategy: StrategyKind,
    status: &'static str,
    iteration_time_s: Option<f64>,
    throughput_samples_per_s: Option<f64>,
    peak_gpu_bytes: Option<u64>,
    violations: usize,
    reconciled: Option<bool>,
    oom: Option<String>,
}

/// Simulates each strategy, verifies the trace and reconciles it with the
/// analytical model. Fails on any violation, reconciliation mismatch or OOM.
pub fn cmd_simulate(cfg: &RunConfig, hash: &str, out_dir: &Path, strategies: &[String], exec: Exec) -> Result<Outcome> {
    let topo = cfg.topology()?;
    let model = cfg.model()?;
    let plans = cfg.plans(&topo, strategies)?;
    let jobs: Vec<Job> = plans
        .iter()
        .map(|plan| Job {
            plan: plan.clone(),
            model: model.clone(),
            topo: topo.clone(),
            iterations: cfg.run.iterations,
            options: cfg.sim_options(),
        })
        .collect();
    let results = run_all(&jobs, exec);
    let mut w = Writer::new(out_dir)?;
    let mut failed = false;
    let mut summaries = Vec::new();
    let mut lines = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        let dir = PathBuf::from(job.plan.kind.name());
        let s = match result {
            Ok(trace) => {
                let s = write_sim_outputs(&mut w, &dir, hash, job, &trace, cfg.run.window_s)?;
                failed |= s.violations > 0 || s.reconciled == Some(false);
                s
            }
            Err(Error::OutOfMemory(v)) => {
                failed = true;
                w.json(dir.join("oom.json"), &Tagged { config_sha256: hash, body: &*v })?;
                SimSummary {
                    strategy: job.plan.kind,
                    status: "oom",
                    iteration_time_s: None,
                    throughput_samples_per_s: None,
                    peak_gpu_bytes: None,
                    violations: 0,
                    reconciled: None,
                    oom: Some(v.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        lines.push(match (&s.oom, s.iteration_time_s, s.throughput_samples_per_s) {
            (Some(v), _, _) => format!("{:<10} OOM: {v}", s.strategy.name()),
            (None, Some(t), Some(tp)) => format!(
                "{:<10} {t:.4} s/iter  {tp:.2} samples/s  {} violations  reconciliation {}",
                s.strategy.name(),
                s.violations,
                if s.reconciled == Some(true) { "ok" } else { "MISMATCH" }
            ),
            _ => format!("{:<10} {}", s.strategy.name(), s.status),
        });
        summaries.push(s);
    }
    w.json("simulate.json", &Tagged { config_sha256: hash, body: serde_json::json!({ "runs": summaries }) })?;
    w.finish("simulate", hash, failed, lines)
}

fn write_sim_outputs(w: &mut Writer, dir: &Path, hash: &str, job: &Job, trace: &SimTrace, window_s: f64) -> Result<SimSummary> {
    trace.write_jsonl(w.create(dir.join("trace.jsonl"))?)?;
    trace.write_memory_csv(w.create(dir.join("memory.csv"))?)?;
    write_bandwidth_csv(&bandwidth_profile(trace, window_s)?, w.create(dir.join("bandwidth.csv"))?)?;
    let violations: Vec<Violation> = check_trace(trace, &job.plan, &job.model, &job.topo)?;
    let recon = reconcile(trace, &job.plan, &job.model, &job.topo)?;
    w.json(dir.join("violations.json"), &Tagged { config_sha256: hash, body: serde_json::json!({ "violations": violations }) })?;
    w.json(dir.join("reconciliation.json"), &Tagged { config_sha256: hash, body: &recon })?;
    Ok(SimSummary {
        strategy: job.plan.kind,
        status: if violations.is_empty() && recon.ok() { "ok" } else { "failed" },
        iteration_time_s: Some(trace.iteration_time_s()),
        throughput_samples_per_s: Some(trace.throughput()),
        peak_gpu_bytes: Some(trace.peak_gpu_bytes),
        violations: violations.len(),
        reconciled: Some(recon.ok()),
        oom: None,
    })
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "axis",
    "axis_value",
    "strategy",
    "prefetch",
    "iteration_time_s",
    "throughput_samples_per_s",
    "normalized_throughput",
    "inter_node_bytes_per_iteration",
    "h2d_bytes_per_iteration",
    "peak_gpu_bytes",
    "oom",
    "config_sha256",
];

/// One sweep point: the config with the axis value substituted.
fn sweep_points(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<(String, RunConfig)>> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    let mut push = |label: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        edit(&mut c);
        out.push((label, c));
    };
    match axis {
        SweepAxis::InternodeBandwidth => {
            for v in &s.internode_bandwidth {
                push(v.clone(), &|c| {
                    c.topology.internode = v.clone();
                    c.topology.internode_bandwidth_bytes_per_s = None;
                });
            }
        }
        SweepAxis::ModelPreset => {
            for v in &s.model_preset {
                push(v.clone(), &|c| {
                    c.model.preset = Some(v.clone());
                    c.model.num_layers = None;
                    c.model.params_per_layer = None;
                });
            }
        }
        SweepAxis::TrainableFraction => {
            for &v in &s.trainable_fraction {
                push(v.to_string(), &|c| {
                    c.model.trainable_fraction = v;
                    c.model.lora_rank = None;
                });
            }
        }
        SweepAxis::Tau => {
            for &v in &s.tau {
                push(v.to_string(), &|c| c.run.tau = v);
            }
        }
        SweepAxis::Nodes => {
            for &v in &s.nodes {
                push(v.to_string(), &|c| c.topology.nodes = v);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::config(format!("sweep.{axis}"), "axis has no values"));
    }
    Ok(out)
}

/// Runs every (axis value, strategy) point and writes `sweep_<axis>.csv`.
/// Normalized throughput is relative to the same strategy at the first value.
pub fn cmd_sweep(cfg: &RunConfig, hash: &str, out_dir: &Path, strategies: &[String], axis: Option<SweepAxis>, exec: Exec) -> Result<Outcome> {
    let axis = match (axis, &cfg.sweep.axis) {
        (Some(a), _) => a,
        (None, Some(name)) => preset("sweep.axis", name)?,
        (None, None) => return Err(Error::config("sweep.axis", "no axis given (use --axis or sweep.axis)")),
    };
    let points = sweep_points(cfg, axis)?;
    let mut labels = Vec::new();
    let mut jobs = Vec::new();
    for (label, c) in &points {
        c.validate().map_err(|e| match e {
            Error::Config { path, msg } => Error::config(format!("sweep.{axis}={label}: {path}"), msg),
            e => e,
        })?;
        let topo = c.topology()?;
        let model = c.model()?;
        let prefetch: &[bool] = if c.sweep.compare_prefetch { &[true, false] } else { std::slice::from_ref(&c.run.prefetch) };
        for plan in c.plans(&topo, strategies)? {
            for &on in prefetch {
                let mut options = c.sim_options();
                options.schedule.prefetch = on;
                labels.push(label.clone());
                jobs.push(Job {
                    plan: plan.clone(),
                    model: model.clone(),
                    topo: topo.clone(),
                    iterations: c.run.iterations,
                    options,
                });
            }
        }
    }
    let results = run_all(&jobs, exec);
    let mut baseline: Vec<((StrategyKind, bool), Option<f64>)> = Vec::new();
    let mut w = Writer::new(out_dir)?;
    let mut lines = Vec::new();
    {
        let mut csv = csv::Writer::from_writer(w.create(format!("sweep_{axis}.csv"))?);
        csv.write_record(SWEEP_COLUMNS)?;
        for ((label, job), result) in labels.iter().zip(&jobs).zip(&results) {
            let kind = job.plan.kind;
            let prefetch = job.options.schedule.prefetch;
            let key = (kind, prefetch);
            let row = match result {
                Ok(trace) => {
                    let tp = trace.throughput();
                    let base = match baseline.iter().find(|(k, _)| *k == key) {
                        Some((_, b)) => *b,
                        None => {
                            baseline.push((key, Some(tp)));
                            Some(tp)
                        }
                    };
                    let last = trace.last_iteration();
                    let h2d: u64 = trace.events_in(last.index).filter(|e| e.kind == EventKind::H2D).map(|e| e.link_bytes.host_gpu).sum();
                    let norm = base.map(|b| tp / b);
                    lines.push(format!(
                        "{axis}={label:<22} {:<10}{} {tp:>10.3} samples/s  normalized {}",
                        kind.name(),
                        if prefetch { "" } else { " (no prefetch)" },
                        norm.map_or("-".into(), |n| format!("{n:.3}"))
                    ));
                    vec![
                        axis.to_string(),
                        label.clone(),
                        kind.name().to_string(),
                        prefetch.to_string(),
                        format!("{:.6}", trace.iteration_time_s()),
                        format!("{tp:.6}"),
                        norm.map_or(String::new(), |n| format!("{n:.6}")),
                        last.link_bytes.inter_node.to_string(),
                        h2d.to_string(),
                        trace.peak_gpu_bytes.to_string(),
                        "false".into(),
                        hash.to_string(),
                    ]
                }
                Err(Error::OutOfMemory(v)) => {
                    if !baseline.iter().any(|(k, _)| *k == key) {
                        baseline.push((key, None));
                    }
                    lines.push(format!("{axis}={label:<22} {:<10} OOM: {v}", kind.name()));
                    let mut row = vec![axis.to_string(), label.clone(), kind.name().to_string(), prefetch.to_string()];
                    row.extend(std::iter::repeat_n(String::new(), 6));
                    row.extend(["true".to_string(), hash.to_string()]);
                    row
                }
                Err(e) => return Err(Error::config(format!("sweep.{axis}={label}"), e.to_string())),
            };
            csv.write_record(row)?;
        }
        csv.flush()?;
    }
    w.finish("sweep", hash, false, lines)
}

/// Runs the built-in acceptance matrix. `criteria` overrides the config's
/// `validate.criteria` when non-empty.
pub fn cmd_validate(cfg: &RunConfig, hash: &str, out_dir: &Path, criteria: &[u8], exec: Exec) -> Result<Outcome> {
    let only: BTreeSet<u8> = if criteria.is_empty() { cfg.validate.criteria.iter().copied().collect() } else { criteria.iter().copied().collect() };
    let results: Vec<CriterionResult> = run_gate(&GateOptions {
        only,
        fault: None,
        exec,
        seed: cfg.validate.seed,
    })?;
    let failed = results.iter().any(|r| !r.passed);
    let mut lines = Vec::new();
    for r in &results {
        lines.push(r.to_string());
        lines.extend(r.details.iter().map(|d| format!("    {d}")));
    }
    let mut w = Writer::new(out_dir)?;
    w.json("validate.json", &Tagged { config_sha256: hash, body: serde_json::json!({ "criteria": results }) })?;
    w.finish("validate", hash, failed, lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[topology]
nodes = 2
gpus_per_node = 2

[model]
num_layers = 4
params_per_layer = 2000000
trainable_fraction = 0.1
batch_per_gpu = 2
fwd_compute_s_per_sample = 0.0001
bwd_compute_s_per_sample = 0.0002
activation_bytes_per_sample = 10000

[[strategy]]
name = "zero3"

[[strategy]]
name = "fcdp-comm"

[run]
iterations = 3
window_s = 0.001

[sweep]
tau = [0.0, 0.5, 1.0]
internode_bandwidth = ["ib100-rdma-measured", "eth1g-measured"]
"#;

    fn cfg() -> RunConfig {
        RunConfig::from_toml(BASE).unwrap()
    }

    fn err_path(text: &str) -> String {
        match RunConfig::from_toml(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(err_path(&BASE.replace("nodes = 2", "nodes = \"two\"")), "topology.nodes");
        assert_eq!(err_path(&BASE.replace("name = \"zero3\"", "name = \"zero4\"")), "strategy[0].name");
        assert_eq!(err_path(&BASE.replace("iterations = 3", "iterations = 0")), "run.iterations");
        assert_eq!(err_path(&BASE.replace("[run]", "[run]\nspeed = 1")), "run.speed");
        assert_eq!(err_path(&BASE.replace("\"eth1g-measured\"", "\"eth2g\"")), "sweep.internode_bandwidth[1]");
        assert_eq!(err_path(&BASE.replace("batch_per_gpu = 2", "batch_per_gpu = 0")), "model.batch_per_gpu");
        let no_strategy: String = BASE.lines().filter(|l| !l.contains("strategy") && !l.starts_with("name")).collect::<Vec<_>>().join("\n");
        assert_eq!(err_path(&no_strategy), "strategy");
    }

    #[test]
    fn analyze_single_node_has_no_inter_node_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::from_toml(&BASE.replace("nodes = 2", "nodes = 1")).unwrap();
        cmd_analyze(&c, "h", dir.path(), &[]).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("analysis.csv")).unwrap();
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ANALYSIS_COLUMNS);
        for row in rd.records() {
            let row = row.unwrap();
            for col in ["fwd_ag_inter_bytes", "bwd_ag_inter_bytes", "reduce_scatter_inter_bytes", "inter_node_bytes_steady"] {
                let i = ANALYSIS_COLUMNS.iter().position(|c| *c == col).unwrap();
                assert_eq!(&row[i], "0");
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_and_clean() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let oa = cmd_simulate(&cfg(), "h", a.path(), &[], Exec::Parallel).unwrap();
        let ob = cmd_simulate(&cfg(), "h", b.path(), &[], Exec::Sequential).unwrap();
        assert!(!oa.failed && !ob.failed, "{:?}", oa.summary);
        assert_eq!(oa.files, ob.files);
        for f in &oa.files {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
        }
        assert!(a.path().join("fcdp-comm/trace.jsonl").exists());
    }

    #[test]
    fn simulate_reports_oom() {
        let dir = tempfile::tempdir().unwrap();
        let text = BASE.replace("name = \"zero3\"", "name = \"zero3\"\ngpu_capacity_bytes = 1000");
        let o = cmd_simulate(&RunConfig::from_toml(&text).unwrap(), "h", dir.path(), &["zero3".into()], Exec::Sequential).unwrap();
        assert!(o.failed);
        assert!(dir.path().join("zero3/oom.json").exists());
    }

    #[test]
    fn tau_sweep_h2d_nonincreasing() {
        let dir = tempfile::tempdir().unwrap();
        cmd_sweep(&cfg(), "h", dir.path(), &["fcdp-comm".into()], Some(SweepAxis::Tau), Exec::Parallel).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("sweep_tau.csv")).unwrap();
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), SWEEP_COLUMNS);
        let h2d: Vec<u64> = rd.records().map(|r| r.unwrap()[8].parse().unwrap()).collect();
        assert_eq!(h2d.len(), 3);
        assert!(h2d.windows(2).all(|w| w[1] <= w[0]), "{h2d:?}");
        assert!(h2d[2] < h2d[0]);
    }

    #[test]
    fn sweep_normalizes_to_first_value() {
        let dir = tempfile::tempdir().unwrap();
        cmd_sweep(&cfg(), "h", dir.path(), &[], Some(SweepAxis::InternodeBandwidth), Exec::Parallel).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("sweep_internode_bandwidth.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(&rows[0][6], "1.000000");
        assert_eq!(&rows[1][6], "1.000000");
        let slow: f64 = rows[2][6].parse().unwrap();
        assert!(slow < 1.0);
        let mut both = cfg();
        both.sweep.compare_prefetch = true;
        cmd_sweep(&both, "h", dir.path(), &["zero3".into()], Some(SweepAxis::InternodeBandwidth), Exec::Parallel).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("sweep_internode_bandwidth.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.iter().map(|r| r[3].to_string()).collect::<Vec<_>>(), ["true", "false", "true", "false"]);
        assert_eq!(&rows[1][6], "1.000000");
        let (on, off): (f64, f64) = (rows[0][5].parse().unwrap(), rows[1][5].parse().unwrap());
        assert!(on >= off);
        let empty = cmd_sweep(&cfg(), "h", dir.path(), &[], Some(SweepAxis::Nodes), Exec::Parallel);
        assert!(matches!(empty, Err(Error::Config { path, .. }) if path == "sweep.nodes"));
    }

    #[test]
    fn manifest_embeds_hash() {
        let dir = tempfile::tempdir().unwrap();
        let hash = config_hash(BASE);
        cmd_analyze(&cfg(), &hash, dir.path(), &["zeropp".into()]).unwrap();
        let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["config_sha256"], hash);
        assert_eq!(m["files"], serde_json::json!(["analysis.csv", "analysis.json"]));
        let a: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("analysis.json")).unwrap()).unwrap();
        assert_eq!(a["reports"][0]["strategy"], "zeropp");
    }
}

//! The model being trained: per-layer parameter counts, the trainable/frozen
//! split, dtype width and per-layer compute and activation coefficients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which half of a layer's parameters a value refers to. Every layer is
/// modeled as two tensors: the trainable part `W_t` and the frozen part `W_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPart {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub part: ParamPart,
}

impl ParamId {
    pub fn new(layer: usize, part: ParamPart) -> Self {
        ParamId { layer, part }
    }

    pub fn is_frozen(&self) -> bool {
        self.part == ParamPart::Frozen
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.part {
            ParamPart::Trainable => "t",
            ParamPart::Frozen => "f",
        };
        write!(f, "L{}{}", self.layer, tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: usize,
    pub param_count: u64,
    pub trainable_fraction: f64,
    #[serde(default)]
    pub fwd_compute_s_per_sample: f64,
    #[serde(default)]
    pub bwd_compute_s_per_sample: f64,
    #[serde(default)]
    pub activation_bytes_per_sample: u64,
}

impl LayerSpec {
    pub fn new(layer_id: usize, param_count: u64) -> Self {
        LayerSpec {
            layer_id,
            param_count,
            trainable_fraction: 1.0,
            fwd_compute_s_per_sample: 0.0,
            bwd_compute_s_per_sample: 0.0,
            activation_bytes_per_sample: 0,
        }
    }

    /// Trainable parameter count, rounded to a whole parameter.
    pub fn trainable_params(&self) -> u64 {
        let t = (self.trainable_fraction * self.param_count as f64).round() as u64;
        t.min(self.param_count)
    }

    pub fn frozen_params(&self) -> u64 {
        self.param_count - self.trainable_params()
    }

    pub fn part_params(&self, part: ParamPart) -> u64 {
        match part {
            ParamPart::Trainable => self.trainable_params(),
            ParamPart::Frozen => self.frozen_params(),
        }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let path = |f: &str| format!("model.layers[{idx}].{f}");
        if self.param_count == 0 {
            return Err(Error::config(path("param_count"), "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.trainable_fraction) {
            return Err(Error::config(path("trainable_fraction"), "must be in [0, 1]"));
        }
        for (name, v) in [
            ("fwd_compute_s_per_sample", self.fwd_compute_s_per_sample),
            ("bwd_compute_s_per_sample", self.bwd_compute_s_per_sample),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path(name), "must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Bytes of optimizer state per parameter byte: FP32 master copy plus two
/// Adam moments per half-precision parameter.
pub const DEFAULT_OPTIMIZER_STATE_MULTIPLIER: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub param_bytes_per_element: u64,
    pub optimizer_state_multiplier: u64,
    pub batch_per_gpu: u64,
    /// Hidden width, when known (presets carry it).
    #[serde(default)]
    pub hidden_size: Option<u64>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>, param_bytes_per_element: u64) -> Result<Self> {
        let model = ModelSpec {
            name: name.into(),
            layers,
            param_bytes_per_element,
            optimizer_state_multiplier: DEFAULT_OPTIMIZER_STATE_MULTIPLIER,
            batch_per_gpu: 1,
            hidden_size: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Uniform model with `num_layers` layers of `params_per_layer` each.
    pub fn uniform(name: impl Into<String>, num_layers: usize, params_per_layer: u64, dtype_bytes: u64) -> Result<Self> {
        let layers = (0..num_layers).map(|i| LayerSpec::new(i, params_per_layer)).collect();
        ModelSpec::new(name, layers, dtype_bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model.layers", "model needs at least one layer"));
        }
        if !matches!(self.param_bytes_per_element, 2 | 4) {
            return Err(Error::config("model.dtype_bytes", "must be 2 or 4"));
        }
        if self.batch_per_gpu == 0 {
            return Err(Error::config("model.batch_per_gpu", "must be >= 1"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_id != i {
                return Err(Error::config(format!("model.layers[{i}].layer_id"), "layer ids must be 0..L in order"));
            }
            layer.validate(i)?;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `W`: total parameter count.
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    /// `W_t`.
    pub fn trainable_params(&self) -> u64 {
        self.layers.iter().map(|l| l.trainable_params()).sum()
    }

    /// `W_f = W - W_t`.
    pub fn frozen_params(&self) -> u64 {
        self.total_params() - self.trainable_params()
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.total_params() * self.param_bytes_per_element
    }

    /// Parameters that exist (non-empty parts), in layer order, trainable first.
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| {
            [ParamPart::Trainable, ParamPart::Frozen]
                .into_iter()
                .filter(move |&p| l.part_params(p) > 0)
                .map(move |p| ParamId::new(l.layer_id, p))
        })
    }

    pub fn param_count(&self, id: ParamId) -> u64 {
        self.layers[id.layer].part_params(id.part)
    }

    pub fn param_bytes(&self, id: ParamId) -> u64 {
        self.param_count(id) * self.param_bytes_per_element
    }

    /// Activation bytes held across the whole forward pass at the configured batch.
    pub fn activation_bytes(&self, batch: u64) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes_per_sample * batch).sum()
    }

    pub fn with_batch(mut self, batch_per_gpu: u64) -> Self {
        self.batch_per_gpu = batch_per_gpu;
        self
    }

    pub fn with_dtype_bytes(mut self, dtype_bytes: u64) -> Result<Self> {
        self.param_bytes_per_element = dtype_bytes;
        self.validate()?;
        Ok(self)
    }

    /// Sets per-layer activation bytes and compute times uniformly.
    pub fn with_coefficients(mut self, fwd_s: f64, bwd_s: f64, activation_bytes: u64) -> Self {
        for l in &mut self.layers {
            l.fwd_compute_s_per_sample = fwd_s;
            l.bwd_compute_s_per_sample = bwd_s;
            l.activation_bytes_per_sample = activation_bytes;
        }
        self
    }
}

/// Sets every layer's trainable fraction, modeling LoRA as a uniform
/// per-layer `W_t`. `W`, `L` and dtype widths are untouched.
pub fn apply_lora_mask(model: &ModelSpec, trainable_fraction: f64) -> Result<ModelSpec> {
    if !(trainable_fraction > 0.0 && trainable_fraction <= 1.0) {
        return Err(Error::config("model.trainable_fraction", "must be in (0, 1]"));
    }
    let mut out = model.clone();
    for l in &mut out.layers {
        l.trainable_fraction = trainable_fraction;
    }
    Ok(out)
}

/// Trainable fraction of rank-`rank` LoRA adapters on `projections` square
/// `hidden x hidden` projections per layer: each adds `rank * 2 * hidden`.
pub fn lora_adapter_fraction(params_per_layer: u64, hidden: u64, rank: u64, projections: u64) -> f64 {
    (projections * rank * 2 * hidden) as f64 / params_per_layer as f64
}

/// GPT-2-XL-derived model family scaled by depth and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Gpt10b,
    Gpt15b,
    Gpt20b,
    Gpt25b,
    Gpt30b,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 5] = [
        ModelPreset::Gpt10b,
        ModelPreset::Gpt15b,
        ModelPreset::Gpt20b,
        ModelPreset::Gpt25b,
        ModelPreset::Gpt30b,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Gpt10b => "gpt10b",
            ModelPreset::Gpt15b => "gpt15b",
            ModelPreset::Gpt20b => "gpt20b",
            ModelPreset::Gpt25b => "gpt25b",
            ModelPreset::Gpt30b => "gpt30b",
        }
    }

    /// (parameters, layers, hidden)
    pub fn shape(self) -> (u64, usize, u64) {
        match self {
            ModelPreset::Gpt10b => (10_000_000_000, 40, 4800),
            ModelPreset::Gpt15b => (15_000_000_000, 40, 5760),
            ModelPreset::Gpt20b => (20_000_000_000, 40, 6656),
            ModelPreset::Gpt25b => (25_000_000_000, 39, 7168),
            ModelPreset::Gpt30b => (30_000_000_000, 40, 7936),
        }
    }

    /// Uniform per-layer split of the total, full fine-tuning, half precision.
    pub fn build(self) -> ModelSpec {
        let (params, layers, hidden) = self.shape();
        let per_layer = (params as f64 / layers as f64).round() as u64;
        let mut model = ModelSpec::uniform(self.name(), layers, per_layer, 2).expect("preset shapes are valid");
        model.hidden_size = Some(hidden);
        model
    }

    /// Trainable fraction of rank-8 LoRA on the four attention projections.
    pub fn attention_lora_fraction(self, rank: u64) -> f64 {
        let (params, layers, hidden) = self.shape();
        lora_adapter_fraction(params / layers as u64, hidden, rank, 4)
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset {
                what: "model preset",
                name: s.to_string(),
            })
    }
}

pub fn model_preset(name: &str) -> Result<ModelSpec> {
    Ok(name.parse::<ModelPreset>()?.build())
}

/// Fitted compute and activation coefficients. These are not measurements:
/// each bundle is chosen so that the reference strategy's communication share
/// (or memory headroom) matches an observed degradation pattern on the
/// measured-bandwidth presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Calibration {
    /// ZeRO-3 throughput falloff over RDMA / IPoIB / 10 GbE, 2 nodes.
    Fig3TwoNode,
    /// PEFT bandwidth-sensitivity sweep, 2 nodes.
    Fig9Peft,
    /// 48 GiB A40 activation footprint: ZeRO-3 fits gpt25b at batch 8.
    Table5A40,
}

/// Activation bytes per sample per hidden unit, per layer (fitted).
pub const ACTIVATION_BYTES_PER_HIDDEN: u64 = 6144;

impl Calibration {
    pub const ALL: [Calibration; 3] = [Calibration::Fig3TwoNode, Calibration::Fig9Peft, Calibration::Table5A40];

    pub fn name(self) -> &'static str {
        match self {
            Calibration::Fig3TwoNode => "fig3-2node",
            Calibration::Fig9Peft => "fig9-peft",
            Calibration::Table5A40 => "table5-a40",
        }
    }

    /// Forward and backward seconds per sample for the whole model, per
    /// billion parameters. Split uniformly over layers when applied.
    fn compute_s_per_sample_per_gparam(self) -> (f64, f64) {
        match self {
            Calibration::Fig3TwoNode => FIG3_COMPUTE,
            Calibration::Fig9Peft => FIG9_COMPUTE,
            Calibration::Table5A40 => (0.0, 0.0),
        }
    }

    pub fn apply(self, model: &ModelSpec) -> ModelSpec {
        let gparams = model.total_params() as f64 / 1e9;
        let (fwd, bwd) = self.compute_s_per_sample_per_gparam();
        let hidden = model.hidden_size.unwrap_or(0);
        let mut out = model.clone();
        for l in &mut out.layers {
            let share = l.param_count as f64 / model.total_params() as f64;
            l.fwd_compute_s_per_sample = fwd * gparams * share;
            l.bwd_compute_s_per_sample = bwd * gparams * share;
            l.activation_bytes_per_sample = ACTIVATION_BYTES_PER_HIDDEN * hidden;
        }
        out
    }
}

// Fitted against the simulator on gpt10b, 2x8 GPUs, batch 8, backward = 2x forward.
// fig3: ZeRO-3 normalized throughput 0.289 (IPoIB) and 0.172 (10 GbE).
// fig9: FCDP-Comm loses 9.6% from RDMA to 1 GbE, ZeRO-3 loses 98.2%.
const FIG3_COMPUTE: (f64, f64) = (0.0085, 0.017);
const FIG9_COMPUTE: (f64, f64) = (0.0047, 0.0094);

impl FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Calibration::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownPreset {
                what: "calibration preset",
                name: s.to_string(),
            })
    }
}

//! Parameter-efficient fine-tuning: inject, freeze, count and merge.
//!
//! Methods: low-rank pairs on the query/value projections of every
//! attention block (encoder self, decoder self, decoder cross), low-rank
//! pairs on both feed-forward matrices of every layer, residual adapter
//! bottlenecks after each sublayer (two per encoder layer, three per
//! decoder layer), and the feed-forward + adapter combination. Injection
//! freezes every base weight, so only the attachments train; low-rank
//! pairs start at `B = 0` and adapters at `W_up = b_up = 0`, which makes a
//! freshly injected model compute exactly the base function.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::tensor::{matmul_raw, Scalar, Tensor};
use std::fmt;

const INIT_STD: f64 = 0.02;

/// Fine-tuning method with its rank / bottleneck size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeftMethod {
    Full,
    Lora { r: usize },
    FfLora { r: usize },
    Adapter { r: usize },
    FfLoraPlusAdapter { r: usize },
}

impl PeftMethod {
    pub fn rank(&self) -> Option<usize> {
        match *self {
            PeftMethod::Full => None,
            PeftMethod::Lora { r }
            | PeftMethod::FfLora { r }
            | PeftMethod::Adapter { r }
            | PeftMethod::FfLoraPlusAdapter { r } => Some(r),
        }
    }

    pub fn name(&self) -> MethodName {
        match self {
            PeftMethod::Full => MethodName::Full,
            PeftMethod::Lora { .. } => MethodName::Lora,
            PeftMethod::FfLora { .. } => MethodName::FfLora,
            PeftMethod::Adapter { .. } => MethodName::Adapter,
            PeftMethod::FfLoraPlusAdapter { .. } => MethodName::FfLoraPlusAdapter,
        }
    }
}

/// Rank-free method tag; also the CLI / CSV spelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodName {
    Full,
    Lora,
    FfLora,
    Adapter,
    FfLoraPlusAdapter,
}

impl MethodName {
    pub const ALL: [MethodName; 5] = [
        MethodName::Full,
        MethodName::Lora,
        MethodName::FfLora,
        MethodName::Adapter,
        MethodName::FfLoraPlusAdapter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Full => "full",
            MethodName::Lora => "lora",
            MethodName::FfLora => "fflora",
            MethodName::Adapter => "adapter",
            MethodName::FfLoraPlusAdapter => "fflora_adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MethodName::Full),
            "lora" => Ok(MethodName::Lora),
            "fflora" => Ok(MethodName::FfLora),
            "adapter" => Ok(MethodName::Adapter),
            "fflora_adapter" => Ok(MethodName::FfLoraPlusAdapter),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }

    pub fn with_rank(&self, r: usize) -> PeftMethod {
        match self {
            MethodName::Full => PeftMethod::Full,
            MethodName::Lora => PeftMethod::Lora { r },
            MethodName::FfLora => PeftMethod::FfLora { r },
            MethodName::Adapter => PeftMethod::Adapter { r },
            MethodName::FfLoraPlusAdapter => PeftMethod::FfLoraPlusAdapter { r },
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One low-rank pair `ΔW = A·B` with `A [d_in×r]`, `B [r×d_out]`; `B`
/// starts at zero so the initial update is exactly zero.
#[derive(Clone, Debug)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// `A ~ N(0, 0.02²)` keyed by the seed, `B = 0`, no extra scaling factor.
pub fn lora_init<T: Scalar>(d_in: usize, d_out: usize, r: usize, seed: u64) -> Result<LoraPair<T>> {
    check_rank(r, d_in, d_out)?;
    let h = rng::hash_name("lora_a");
    let a = Tensor::from_fn(vec![d_in, r], |i| {
        T::from_f64(rng::normal_at(seed, h, i) * INIT_STD)
    });
    let b = Tensor::zeros(vec![r, d_out]);
    Ok(LoraPair { a, b })
}

fn check_rank(r: usize, d_in: usize, d_out: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    if r >= d_in.min(d_out) {
        return Err(Error::RankTooLarge { r, d_in, d_out });
    }
    Ok(())
}

/// Names of the attention weights targeted by the low-rank method: the
/// query and value projections of every block.
fn lora_targets(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let mut targets = Vec::new();
    for i in 0..config.n_enc_layers {
        targets.push((format!("enc.{i}.attn.q"), d, d));
        targets.push((format!("enc.{i}.attn.v"), d, d));
    }
    for i in 0..config.n_dec_layers {
        targets.push((format!("dec.{i}.self.q"), d, d));
        targets.push((format!("dec.{i}.self.v"), d, d));
        targets.push((format!("dec.{i}.cross.q"), d, d));
        targets.push((format!("dec.{i}.cross.v"), d, d));
    }
    targets
}

/// Both feed-forward matrices of every layer.
fn fflora_targets(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let dff = config.d_ff;
    let mut targets = Vec::new();
    for i in 0..config.n_enc_layers {
        targets.push((format!("enc.{i}.ff.w1"), d, dff));
        targets.push((format!("enc.{i}.ff.w2"), dff, d));
    }
    for i in 0..config.n_dec_layers {
        targets.push((format!("dec.{i}.ff.w1"), d, dff));
        targets.push((format!("dec.{i}.ff.w2"), dff, d));
    }
    targets
}

/// Adapter insertion points: after attention and feed-forward sublayers
/// (cross-attention included).
fn adapter_slots(config: &ModelConfig) -> Vec<String> {
    let mut slots = Vec::new();
    for i in 0..config.n_enc_layers {
        slots.push(format!("enc.{i}.adapter.attn"));
        slots.push(format!("enc.{i}.adapter.ff"));
    }
    for i in 0..config.n_dec_layers {
        slots.push(format!("dec.{i}.adapter.self"));
        slots.push(format!("dec.{i}.adapter.cross"));
        slots.push(format!("dec.{i}.adapter.ff"));
    }
    slots
}

fn attach_lora<T: Scalar>(
    model: &mut Model<T>,
    targets: &[(String, usize, usize)],
    r: usize,
    seed: u64,
) -> Result<()> {
    for (name, d_in, d_out) in targets {
        check_rank(r, *d_in, *d_out)?;
        let a_name = format!("{name}.lora_a");
        let h = rng::hash_name(&a_name);
        let a = Tensor::from_fn(vec![*d_in, r], |i| {
            T::from_f64(rng::normal_at(seed, h, i) * INIT_STD)
        });
        model.params.insert(a_name, a)?;
        model
            .params
            .insert(format!("{name}.lora_b"), Tensor::zeros(vec![r, *d_out]))?;
    }
    Ok(())
}

fn attach_adapters<T: Scalar>(model: &mut Model<T>, r: usize, seed: u64) -> Result<()> {
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let d = model.config.d_model;
    for slot in adapter_slots(&model.config) {
        let down_name = format!("{slot}.w_down");
        let h = rng::hash_name(&down_name);
        let w_down = Tensor::from_fn(vec![d, r], |i| {
            T::from_f64(rng::normal_at(seed, h, i) * INIT_STD)
        });
        model.params.insert(down_name, w_down)?;
        model
            .params
            .insert(format!("{slot}.b_down"), Tensor::zeros(vec![r]))?;
        model
            .params
            .insert(format!("{slot}.w_up"), Tensor::zeros(vec![r, d]))?;
        model
            .params
            .insert(format!("{slot}.b_up"), Tensor::zeros(vec![d]))?;
    }
    Ok(())
}

/// Install a fine-tuning method on a fresh model. For every non-Full
/// method the base weights are frozen and only the attachments (seeded by
/// `seed`) remain trainable. Injecting twice is an error.
pub fn inject<T: Scalar>(model: &mut Model<T>, method: PeftMethod, seed: u64) -> Result<()> {
    if model.method.is_some() {
        return Err(Error::State("model already injected".into()));
    }
    match method {
        PeftMethod::Full => {
            model.params.unfreeze_all();
        }
        PeftMethod::Lora { r } => {
            model.params.freeze_all();
            attach_lora(model, &lora_targets(&model.config), r, seed)?;
        }
        PeftMethod::FfLora { r } => {
            model.params.freeze_all();
            attach_lora(model, &fflora_targets(&model.config), r, seed)?;
        }
        PeftMethod::Adapter { r } => {
            model.params.freeze_all();
            attach_adapters(model, r, seed)?;
        }
        PeftMethod::FfLoraPlusAdapter { r } => {
            model.params.freeze_all();
            attach_lora(model, &fflora_targets(&model.config), r, seed)?;
            attach_adapters(model, r, seed)?;
        }
    }
    model.method = Some(method);
    Ok(())
}

/// The unfrozen parameters, in registry order.
pub fn trainable_params<T: Scalar>(model: &Model<T>) -> Vec<(&str, &Tensor<T>)> {
    model
        .params
        .iter()
        .filter(|e| !e.frozen)
        .map(|e| (e.name.as_str(), &e.tensor))
        .collect()
}

/// Total element count over the unfrozen parameters.
pub fn trainable_elems<T: Scalar>(model: &Model<T>) -> u64 {
    trainable_params(model)
        .iter()
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// Fold every low-rank pair into its target (`W ← W + A·B`) and drop the
/// pair entries. Adapters have no exact merge: a model whose only
/// attachments are adapters is rejected, while the combination keeps its
/// adapters attached and merges the rest. A pure low-rank model comes
/// back as a plain uninjected model.
pub fn merge_lora<T: Scalar>(mut model: Model<T>) -> Result<Model<T>> {
    match model.method {
        Some(PeftMethod::Lora { .. })
        | Some(PeftMethod::FfLora { .. })
        | Some(PeftMethod::FfLoraPlusAdapter { .. }) => {}
        Some(PeftMethod::Adapter { .. }) => {
            return Err(Error::UnsupportedMerge(
                "adapter bottlenecks cannot be folded into base weights".into(),
            ))
        }
        Some(PeftMethod::Full) | None => {
            return Err(Error::UnsupportedMerge(
                "model has no low-rank structures to merge".into(),
            ))
        }
    }

    fold_lora_pairs(&mut model)?;

    match model.method {
        Some(PeftMethod::FfLoraPlusAdapter { r }) => {
            model.method = Some(PeftMethod::Adapter { r });
        }
        _ => {
            model.params.unfreeze_all();
            model.method = None;
        }
    }
    Ok(model)
}

/// Fold every `<target>.lora_a` / `<target>.lora_b` pair present in the
/// registry into its target weight and drop the pair entries. Returns the
/// number of pairs folded.
pub(crate) fn fold_lora_pairs<T: Scalar>(model: &mut Model<T>) -> Result<usize> {
    let pair_targets: Vec<String> = model
        .params
        .iter()
        .filter_map(|e| e.name.strip_suffix(".lora_a").map(str::to_string))
        .collect();
    for target in &pair_targets {
        let a = model
            .params
            .remove(&format!("{target}.lora_a"))
            .expect("lora_a present");
        let b = model
            .params
            .remove(&format!("{target}.lora_b"))
            .ok_or_else(|| Error::Schema(format!("{target}.lora_b missing")))?;
        let (d_in, r) = (a.shape()[0], a.shape()[1]);
        let d_out = b.shape()[1];
        if b.shape()[0] != r {
            return Err(Error::Schema(format!(
                "{target}: pair ranks disagree ({} vs {r})",
                b.shape()[0]
            )));
        }
        let delta = matmul_raw(a.data(), b.data(), d_in, r, d_out);
        let w = model
            .params
            .get_mut(target)
            .ok_or_else(|| Error::Schema(format!("merge target {target} missing")))?;
        if w.numel() != delta.len() {
            return Err(Error::Schema(format!(
                "{target}: update shape [{d_in}×{d_out}] does not match the base weight"
            )));
        }
        for (wi, di) in w.data_mut().iter_mut().zip(delta) {
            *wi += di;
        }
    }
    Ok(pair_targets.len())
}

// ── Trainable-parameter accounting ───────────────────────────────────────

/// Layer/width description used for parameter accounting; reference shapes
/// carry the published totals, custom shapes the registry total.
#[derive(Clone, Debug)]
pub struct CountShape {
    pub name: String,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d: u64,
    pub d_ff: u64,
    pub total: u64,
}

impl CountShape {
    pub fn codet5_base() -> Self {
        CountShape {
            name: "codet5-base".into(),
            n_enc: 12,
            n_dec: 12,
            d: 768,
            d_ff: 3072,
            total: 223_000_000,
        }
    }

    pub fn plbart_base() -> Self {
        CountShape {
            name: "plbart-base".into(),
            n_enc: 6,
            n_dec: 6,
            d: 768,
            d_ff: 3072,
            total: 140_000_000,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "codet5-base" => Ok(Self::codet5_base()),
            "plbart-base" => Ok(Self::plbart_base()),
            other => Err(Error::Config(format!("unknown reference shape {other:?}"))),
        }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        CountShape {
            name: "custom".into(),
            n_enc: config.n_enc_layers,
            n_dec: config.n_dec_layers,
            d: config.d_model as u64,
            d_ff: config.d_ff as u64,
            total: config.param_count(),
        }
    }

    /// Attention blocks targeted by the low-rank method: encoder self plus
    /// decoder self and cross.
    pub fn attention_blocks(&self) -> u64 {
        (self.n_enc + 2 * self.n_dec) as u64
    }
}

/// Closed-form trainable-parameter count for a method on a shape, plus
/// the percentage of the shape's total.
pub fn count_trainable(shape: &CountShape, method: PeftMethod) -> (u64, f64) {
    let count = match method {
        PeftMethod::Full => shape.total,
        PeftMethod::Lora { r } => shape.attention_blocks() * 2 * 2 * shape.d * r as u64,
        PeftMethod::FfLora { r } => fflora_count(shape, r),
        PeftMethod::Adapter { r } => adapter_count(shape, r),
        PeftMethod::FfLoraPlusAdapter { r } => fflora_count(shape, r) + adapter_count(shape, r),
    };
    let percent = 100.0 * count as f64 / shape.total as f64;
    (count, percent)
}

fn fflora_count(shape: &CountShape, r: usize) -> u64 {
    (shape.n_enc + shape.n_dec) as u64 * 2 * r as u64 * (shape.d + shape.d_ff)
}

fn adapter_count(shape: &CountShape, r: usize) -> u64 {
    let slots = (2 * shape.n_enc + 3 * shape.n_dec) as u64;
    slots * (2 * shape.d * r as u64 + r as u64 + shape.d)
}

/// Table-style rendering of a count: millions to one decimal below 10M
/// (integer when the decimal collapses), percent to one decimal below 1%
/// and floored to one decimal above. Desk-scale counts that would round
/// to "0.0M" are printed verbatim.
pub fn format_count(count: u64, percent: f64) -> String {
    let millions = if count < 50_000 {
        count.to_string()
    } else if count >= 9_950_000 {
        format!("{}M", (count + 500_000) / 1_000_000)
    } else {
        // Two-stage rounding (hundredths, then tenths) mirrors the
        // reference tables this output is eyeballed against.
        let hundredths = (count + 5_000) / 10_000;
        let tenths = (hundredths + 5) / 10;
        if tenths.is_multiple_of(10) {
            format!("{}M", tenths / 10)
        } else {
            format!("{}.{}M", tenths / 10, tenths % 10)
        }
    };
    let pct_tenths = if percent < 1.0 {
        (percent * 10.0).round() as i64
    } else {
        (percent * 10.0 + 1e-9).floor() as i64
    };
    let pct = if pct_tenths % 10 == 0 {
        format!("{}%", pct_tenths / 10)
    } else {
        format!("{}.{}%", pct_tenths / 10, pct_tenths % 10)
    };
    format!("{millions} ({pct})")
}

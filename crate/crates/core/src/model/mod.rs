//! Compact pre-norm encoder-decoder transformer over a named parameter
//! registry.
//!
//! Canonical parameter names: `embed.tok`, `embed.pos`,
//! `enc.<i>.{ln1,ln2}.{g,b}`, `enc.<i>.attn.{q,k,v,o}`,
//! `enc.<i>.ff.{w1,b1,w2,b2}`, `enc.ln_f.{g,b}`, decoder analogues with
//! `self`/`cross` attention scopes and three layer norms, `head.out`, and
//! the pair-classification head `cls.{w,b}`. Fine-tuning attachments are
//! additional registry entries (`<target>.lora_a` / `<target>.lora_b`,
//! `<scope>.adapter.<slot>.*`) that the forward pass applies when present.

mod forward;

pub use forward::Forward;

use crate::error::{Error, Result};
use crate::peft::PeftMethod;
use crate::rng;
use crate::tensor::{NodeId, Scalar, Tape, Tensor};
use crate::TokenId;
use std::collections::HashMap;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
/// First token id available to task vocabularies.
pub const VOCAB_START: TokenId = 4;

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

/// Shape and seed of a model instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if (self.vocab_size as TokenId) <= VOCAB_START {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room above the special ids",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the base model (no attachments).
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let dff = self.d_ff as u64;
        let v = self.vocab_size as u64;
        let l = self.max_seq_len as u64;
        let attn = 4 * d * d;
        let ff = d * dff + dff + dff * d + d;
        let ln = 2 * d;
        let enc_layer = attn + ff + 2 * ln;
        let dec_layer = 2 * attn + ff + 3 * ln;
        v * d
            + l * d
            + self.n_enc_layers as u64 * enc_layer
            + ln
            + self.n_dec_layers as u64 * dec_layer
            + ln
            + d * v
            + 2 * d
            + 2
    }
}

/// One named parameter with its freeze flag.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered map of uniquely named parameters; iteration order is insertion
/// order and therefore deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            frozen: false,
        });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        let idx = self.index.remove(name)?;
        let entry = self.entries.remove(idx);
        for (i, e) in self.entries.iter().enumerate().skip(idx) {
            self.index.insert(e.name.clone(), i);
        }
        Some(entry.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.entries[i].frozen)
            .unwrap_or(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].frozen = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    /// Total element count across all entries.
    pub fn total_elems(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }
}

/// Encoder-decoder transformer with injectable fine-tuning attachments.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamRegistry<T>,
    /// Set once by `peft::inject`; `None` for a freshly initialized model.
    pub(crate) method: Option<PeftMethod>,
    pub(crate) adapter_gelu: bool,
}

impl<T: Scalar> Model<T> {
    /// Initialize a model with weights drawn `N(0, 0.02²)` from the
    /// counter-based generator keyed by `(seed, name)`; layer-norm scale 1
    /// and shift 0. The same config yields a bit-identical model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamRegistry::new();
        let d = config.d_model;
        let dff = config.d_ff;
        let v = config.vocab_size;
        let seed = config.seed;

        let normal = |name: &str, shape: Vec<usize>| -> Tensor<T> {
            let h = rng::hash_name(name);
            Tensor::from_fn(shape, |i| {
                T::from_f64(rng::normal_at(seed, h, i) * INIT_STD)
            })
        };
        let ones = |n: usize| Tensor::from_fn(vec![n], |_| T::ONE);
        let zeros = |n: usize| Tensor::<T>::zeros(vec![n]);

        params.insert("embed.tok", normal("embed.tok", vec![v, d]))?;
        params.insert(
            "embed.pos",
            normal("embed.pos", vec![config.max_seq_len, d]),
        )?;

        let attn_block = |params: &mut ParamRegistry<T>, scope: String| -> Result<()> {
            for w in ["q", "k", "v", "o"] {
                let name = format!("{scope}.{w}");
                let t = normal(&name, vec![d, d]);
                params.insert(name, t)?;
            }
            Ok(())
        };
        let ff_block = |params: &mut ParamRegistry<T>, scope: String| -> Result<()> {
            for (suffix, shape) in [
                ("w1", vec![d, dff]),
                ("b1", vec![dff]),
                ("w2", vec![dff, d]),
                ("b2", vec![d]),
            ] {
                let name = format!("{scope}.{suffix}");
                let t = normal(&name, shape);
                params.insert(name, t)?;
            }
            Ok(())
        };
        let ln_block = |params: &mut ParamRegistry<T>, scope: String| -> Result<()> {
            params.insert(format!("{scope}.g"), ones(d))?;
            params.insert(format!("{scope}.b"), zeros(d))?;
            Ok(())
        };

        for i in 0..config.n_enc_layers {
            ln_block(&mut params, format!("enc.{i}.ln1"))?;
            attn_block(&mut params, format!("enc.{i}.attn"))?;
            ln_block(&mut params, format!("enc.{i}.ln2"))?;
            ff_block(&mut params, format!("enc.{i}.ff"))?;
        }
        ln_block(&mut params, "enc.ln_f".to_string())?;
        for i in 0..config.n_dec_layers {
            ln_block(&mut params, format!("dec.{i}.ln1"))?;
            attn_block(&mut params, format!("dec.{i}.self"))?;
            ln_block(&mut params, format!("dec.{i}.ln2"))?;
            attn_block(&mut params, format!("dec.{i}.cross"))?;
            ln_block(&mut params, format!("dec.{i}.ln3"))?;
            ff_block(&mut params, format!("dec.{i}.ff"))?;
        }
        ln_block(&mut params, "dec.ln_f".to_string())?;
        params.insert("head.out", normal("head.out", vec![d, v]))?;
        params.insert("cls.w", normal("cls.w", vec![d, 2]))?;
        params.insert("cls.b", normal("cls.b", vec![2]))?;

        Ok(Model {
            config,
            params,
            method: None,
            adapter_gelu: false,
        })
    }

    pub fn method(&self) -> Option<PeftMethod> {
        self.method
    }

    /// Use gelu instead of relu inside adapter bottlenecks.
    pub fn set_adapter_gelu(&mut self, on: bool) {
        self.adapter_gelu = on;
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: id as usize,
                    bound: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Teacher-forcing loss graph. `tgt` must begin with BOS and end with
    /// EOS; decoder inputs are `tgt[..n-1]` and targets `tgt[1..]`, with
    /// PAD targets ignored.
    pub fn seq2seq_loss_graph(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<LossGraph<T>> {
        self.check_len(src.len())?;
        self.check_len(tgt.len().saturating_sub(1))?;
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        if tgt.len() < 2 || tgt[0] != BOS_ID || *tgt.last().unwrap() != EOS_ID {
            return Err(Error::Contract(
                "target must begin with BOS and end with EOS".into(),
            ));
        }
        let mut fwd = Forward::new(self, true);
        let enc = fwd.encode(src)?;
        let dec_in = &tgt[..tgt.len() - 1];
        let logits = fwd.decode_logits(enc, src, dec_in)?;
        let targets: Vec<usize> = tgt[1..].iter().map(|&t| t as usize).collect();
        let loss = fwd.tape.cross_entropy(logits, &targets, PAD_ID as usize)?;
        Ok(fwd.into_loss_graph(loss))
    }

    /// Loss value only.
    pub fn seq2seq_loss(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<T> {
        Ok(self.seq2seq_loss_graph(src, tgt)?.value())
    }

    /// Pair-classification loss graph against a binary label.
    pub fn pair_loss_graph(&self, a: &[TokenId], b: &[TokenId], label: u8) -> Result<LossGraph<T>> {
        let (mut fwd, logits) = self.pair_logits_graph(a, b, true)?;
        let loss = fwd
            .tape
            .cross_entropy(logits, &[label as usize], usize::MAX)?;
        Ok(fwd.into_loss_graph(loss))
    }

    fn pair_logits_graph(
        &self,
        a: &[TokenId],
        b: &[TokenId],
        grad: bool,
    ) -> Result<(Forward<'_, T>, NodeId)> {
        let combined_len = a.len() + b.len() + 1;
        self.check_len(combined_len)?;
        self.check_ids(a)?;
        self.check_ids(b)?;
        let mut seq = Vec::with_capacity(combined_len);
        seq.extend_from_slice(a);
        seq.push(SEP_ID);
        seq.extend_from_slice(b);
        let mut fwd = Forward::new(self, grad);
        let enc = fwd.encode(&seq)?;
        let logits = fwd.classify_head(enc, &seq)?;
        Ok((fwd, logits))
    }

    /// Two-way logits for the pair head: encoder output mean-pooled over
    /// non-pad positions, then the linear `cls` head.
    pub fn pair_classify(&self, a: &[TokenId], b: &[TokenId]) -> Result<[T; 2]> {
        let (fwd, logits) = self.pair_logits_graph(a, b, false)?;
        let v = fwd.tape.value(logits);
        Ok([v[0], v[1]])
    }

    /// Encoder output `[len(src) × d]`.
    pub fn forward_encoder(&self, src: &[TokenId]) -> Result<Tensor<T>> {
        self.check_len(src.len())?;
        self.check_ids(src)?;
        let mut fwd = Forward::new(self, false);
        let enc = fwd.encode(src)?;
        Tensor::new(fwd.tape.shape(enc).to_vec(), fwd.tape.value(enc).to_vec())
    }

    /// Encoder output plus every attention distribution (`[Tq × Tk]` row
    /// matrices, one per layer and head) produced along the way.
    pub fn forward_encoder_with_attention(
        &self,
        src: &[TokenId],
    ) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
        self.check_len(src.len())?;
        self.check_ids(src)?;
        let mut fwd = Forward::new(self, false);
        fwd.capture_attention = true;
        let enc = fwd.encode(src)?;
        let out = Tensor::new(fwd.tape.shape(enc).to_vec(), fwd.tape.value(enc).to_vec())?;
        Ok((out, fwd.attention))
    }

    /// Greedy argmax decoding from BOS until EOS or `max_len` generated
    /// tokens; ties break toward the lower token id. The returned ids
    /// exclude BOS and EOS.
    pub fn greedy_decode(&self, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        self.check_len(src.len())?;
        self.check_ids(src)?;
        // Encode once; decode steps reuse the encoder output as a constant.
        let mut fwd = Forward::new(self, false);
        let enc = fwd.encode(src)?;
        let enc_shape = fwd.tape.shape(enc).to_vec();
        let enc_out = fwd.tape.value(enc).to_vec();
        drop(fwd);

        let mut tgt_in: Vec<TokenId> = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len && tgt_in.len() <= self.config.max_seq_len {
            let mut step = Forward::new(self, false);
            let enc_node = step
                .tape
                .leaf_from(enc_shape.clone(), enc_out.clone(), false);
            let logits = step.decode_logits(enc_node, src, &tgt_in)?;
            let v = step.tape.value(logits);
            let vocab = self.config.vocab_size;
            let last = &v[(tgt_in.len() - 1) * vocab..tgt_in.len() * vocab];
            let mut best = 0usize;
            for (j, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = j;
                }
            }
            let next = best as TokenId;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            tgt_in.push(next);
        }
        Ok(out)
    }
}

/// A recorded loss computation: tape, scalar loss node, and the parameter
/// leaves that were touched.
pub struct LossGraph<T: Scalar> {
    pub tape: Tape<T>,
    pub loss: NodeId,
    leaves: Vec<(String, NodeId)>,
}

impl<T: Scalar> LossGraph<T> {
    pub(crate) fn new(tape: Tape<T>, loss: NodeId, leaves: Vec<(String, NodeId)>) -> Self {
        LossGraph { tape, loss, leaves }
    }

    pub fn value(&self) -> T {
        self.tape.scalar_value(self.loss)
    }

    /// Run the reverse sweep and collect `∂loss/∂param` for every
    /// gradient-tracked parameter leaf.
    pub fn backward(mut self) -> Result<GradMap<T>> {
        self.tape.backward(self.loss)?;
        let mut grads = HashMap::new();
        for (name, node) in &self.leaves {
            if let Some(g) = self.tape.grad(*node) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        Ok(grads)
    }
}

/// Parameter-name → gradient buffer map produced by a backward pass.
pub type GradMap<T> = HashMap<String, Vec<T>>;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            max_seq_len: 12,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::<f32>::new(toy_config(5)).unwrap();
        let b = Model::<f32>::new(toy_config(5)).unwrap();
        for (ea, eb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ea.name, eb.name);
            assert!(ea.tensor.bit_eq(&eb.tensor), "{} differs", ea.name);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = Model::<f32>::new(toy_config(1)).unwrap();
        let b = Model::<f32>::new(toy_config(2)).unwrap();
        let any_diff = a
            .params
            .iter()
            .zip(b.params.iter())
            .any(|(ea, eb)| !ea.tensor.bit_eq(&eb.tensor));
        assert!(any_diff);
    }

    #[test]
    fn registry_total_matches_closed_form() {
        let cfg = ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 16,
            seed: 0,
        };
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(m.params.total_elems(), cfg.param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config(0);
        c.n_heads = 3; // 16 % 3 != 0
        assert!(Model::<f32>::new(c).is_err());
        let mut c = toy_config(0);
        c.max_seq_len = 1;
        assert!(Model::<f32>::new(c).is_err());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let mut cfg = toy_config(11);
        cfg.vocab_size = 64;
        cfg.d_model = 32;
        cfg.d_ff = 64;
        let m = Model::<f32>::new(cfg).unwrap();
        let src = [4, 5, 6, 7];
        let tgt = [BOS_ID, 8, 9, 10, EOS_ID];
        let loss = m.seq2seq_loss(&src, &tgt).unwrap() as f64;
        let ln_v = 64f64.ln();
        assert!(
            (loss - ln_v).abs() <= 0.2 * ln_v,
            "loss {loss} not within 20% of ln64 {ln_v}"
        );
    }

    #[test]
    fn single_position_target() {
        let m = Model::<f32>::new(toy_config(3)).unwrap();
        let src = [4, 5];
        let tgt = [BOS_ID, EOS_ID];
        // One decoder position (BOS -> EOS); just has to be finite.
        let loss = m.seq2seq_loss(&src, &tgt).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn loss_rejects_malformed_target_and_long_input() {
        let m = Model::<f32>::new(toy_config(3)).unwrap();
        assert!(matches!(
            m.seq2seq_loss(&[4], &[4, 5]),
            Err(Error::Contract(_))
        ));
        let long = vec![4; 40];
        assert!(matches!(
            m.seq2seq_loss(&long, &[BOS_ID, EOS_ID]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let m = Model::<f32>::new(toy_config(9)).unwrap();
        let src = [4, 5, 6];
        let a = m.greedy_decode(&src, 8).unwrap();
        let b = m.greedy_decode(&src, 8).unwrap();
        assert_eq!(a, b);
        assert!(m.greedy_decode(&src, 1).unwrap().len() <= 1);
    }

    #[test]
    fn encoder_output_shape_and_seed_sensitivity() {
        let m1 = Model::<f32>::new(toy_config(1)).unwrap();
        let m2 = Model::<f32>::new(toy_config(2)).unwrap();
        let src = [4, 5, 6, 7, 8];
        let e1 = m1.forward_encoder(&src).unwrap();
        assert_eq!(e1.shape(), &[5, 16]);
        let e2 = m2.forward_encoder(&src).unwrap();
        assert!(e1.data().iter().zip(e2.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Model::<f32>::new(toy_config(21)).unwrap();
        let src = [4, 5, 6, 7];
        let (_, attn) = m.forward_encoder_with_attention(&src).unwrap();
        // 2 layers × 2 heads.
        assert_eq!(attn.len(), 4);
        for matrix in &attn {
            for row in matrix.chunks_exact(src.len()) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn pair_logits_are_finite() {
        let m = Model::<f32>::new(toy_config(4)).unwrap();
        let l = m.pair_classify(&[4, 5, 6], &[7, 8]).unwrap();
        assert!(l[0].is_finite() && l[1].is_finite());
        // Over-length pair is rejected.
        let long = vec![4; 7];
        assert!(m.pair_classify(&long, &long).is_err());
    }

    #[test]
    fn causality_changing_later_target_never_affects_earlier_logits() {
        let m = Model::<f32>::new(toy_config(8)).unwrap();
        let src = [4, 5, 6];
        let base_in: Vec<TokenId> = vec![BOS_ID, 7, 8, 9];
        let mut later: Vec<TokenId> = base_in.clone();
        later[3] = 12; // perturb position 3

        let logits_of = |tgt_in: &[TokenId]| -> Vec<f32> {
            let mut fwd = Forward::new(&m, false);
            let enc = fwd.encode(&src).unwrap();
            let l = fwd.decode_logits(enc, &src, tgt_in).unwrap();
            fwd.tape.value(l).to_vec()
        };
        let a = logits_of(&base_in);
        let b = logits_of(&later);
        let v = m.config.vocab_size;
        // Positions 0..3 must be bit-identical; position 3 must differ.
        assert_eq!(a[..3 * v], b[..3 * v]);
        assert!(a[3 * v..].iter().zip(&b[3 * v..]).any(|(x, y)| x != y));
    }

    #[test]
    fn pad_suffix_length_never_leaks_into_nonpad_outputs() {
        let m = Model::<f32>::new(toy_config(17)).unwrap();
        let src = [4, 5, 6];
        let with_pads = [4, 5, 6, PAD_ID, PAD_ID];
        let a = m.forward_encoder(&src).unwrap();
        let b = m.forward_encoder(&with_pads).unwrap();
        let d = m.config.d_model;
        for j in 0..3 * d {
            assert!(
                (a.data()[j] - b.data()[j]).abs() <= 1e-6,
                "position {j}: {} vs {}",
                a.data()[j],
                b.data()[j]
            );
        }
    }

    #[test]
    fn every_parameter_receives_gradient_when_nothing_is_frozen() {
        let m = Model::<f32>::new(toy_config(13)).unwrap();
        let mut touched: std::collections::HashSet<String> = std::collections::HashSet::new();

        let g1 = m
            .seq2seq_loss_graph(&[4, 5, 6, 7], &[BOS_ID, 8, 9, EOS_ID])
            .unwrap()
            .backward()
            .unwrap();
        let g2 = m
            .pair_loss_graph(&[4, 5], &[6, 7], 1)
            .unwrap()
            .backward()
            .unwrap();
        for (name, g) in g1.iter().chain(g2.iter()) {
            if g.iter().any(|&x| x != 0.0) {
                touched.insert(name.clone());
            }
        }
        for e in m.params.iter() {
            assert!(touched.contains(&e.name), "dead parameter {}", e.name);
        }
    }

    #[test]
    fn seq2seq_gradients_match_finite_differences() {
        // 64-bit gradient check on a small but complete model.
        let mut cfg = toy_config(7);
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.n_heads = 2;
        let m = Model::<f64>::new(cfg).unwrap();
        let src = [4, 5, 6];
        let tgt = [BOS_ID, 7, 8, EOS_ID];

        let grads = m
            .seq2seq_loss_graph(&src, &tgt)
            .unwrap()
            .backward()
            .unwrap();

        for entry in m.params.iter() {
            if !grads.contains_key(&entry.name) {
                continue;
            }
            let analytic = &grads[&entry.name];
            let numeric = crate::tensor::finite_diff_grad(
                |t: &Tensor<f64>| {
                    let mut probe = m.clone();
                    *probe.params.get_mut(&entry.name).unwrap() = t.clone();
                    probe.seq2seq_loss(&src, &tgt)
                },
                &entry.tensor,
                1e-3,
            )
            .unwrap();
            for (j, (&a, &n)) in analytic.iter().zip(numeric.data()).enumerate() {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(
                    err <= 1e-4,
                    "{}[{j}]: analytic {a} vs numeric {n} (err {err})",
                    entry.name
                );
            }
        }
    }
}

//! Tape-building forward pass: embeddings, multi-head attention with
//! additive masks, feed-forward blocks, and the fine-tuning attachments
//! (low-rank updates on projections, adapter bottlenecks after sublayers).

use super::{LossGraph, Model, LN_EPS, PAD_ID};
use crate::error::Result;
use crate::tensor::{NodeId, Scalar, Tape};
use crate::TokenId;
use std::collections::HashMap;

/// Additive mask value for blocked attention positions.
const MASK_NEG: f64 = -1e9;

pub struct Forward<'m, T: Scalar> {
    model: &'m Model<T>,
    pub tape: Tape<T>,
    leaves: HashMap<String, NodeId>,
    grad_enabled: bool,
    /// When set, every attention softmax output is copied out for
    /// inspection (encoder and decoder alike).
    pub capture_attention: bool,
    pub attention: Vec<Vec<T>>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn new(model: &'m Model<T>, grad_enabled: bool) -> Self {
        Forward {
            model,
            tape: Tape::new(),
            leaves: HashMap::new(),
            grad_enabled,
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    /// Leaf node for a registry parameter, cached so repeated uses share
    /// one node and gradients accumulate across uses.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let t = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let requires = self.grad_enabled && !self.model.params.is_frozen(name);
        let id = self
            .tape
            .leaf_from(t.shape().to_vec(), t.data().to_vec(), requires);
        self.leaves.insert(name.to_string(), id);
        id
    }

    fn has(&self, name: &str) -> bool {
        self.model.params.contains(name)
    }

    /// `x · W[name]`, plus the low-rank update `x·A·B` when a pair is
    /// attached to the weight.
    fn projection(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.param(name);
        let base = self.tape.matmul(x, w)?;
        let lora_a = format!("{name}.lora_a");
        if self.has(&lora_a) {
            let a = self.param(&lora_a);
            let b = self.param(&format!("{name}.lora_b"));
            let xa = self.tape.matmul(x, a)?;
            let xab = self.tape.matmul(xa, b)?;
            return self.tape.add(base, xab);
        }
        Ok(base)
    }

    /// Residual bottleneck when `<prefix>.w_down` exists, identity
    /// otherwise: `z + act(z·W_down + b_down)·W_up + b_up`.
    fn adapter(&mut self, z: NodeId, prefix: &str) -> Result<NodeId> {
        let w_down = format!("{prefix}.w_down");
        if !self.has(&w_down) {
            return Ok(z);
        }
        let wd = self.param(&w_down);
        let bd = self.param(&format!("{prefix}.b_down"));
        let wu = self.param(&format!("{prefix}.w_up"));
        let bu = self.param(&format!("{prefix}.b_up"));
        let down = self.tape.matmul(z, wd)?;
        let down = self.tape.add_bias(down, bd)?;
        let hidden = if self.model.adapter_gelu {
            self.tape.gelu(down)
        } else {
            self.tape.relu(down)
        };
        let up = self.tape.matmul(hidden, wu)?;
        let up = self.tape.add_bias(up, bu)?;
        self.tape.add(z, up)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
    }

    /// Multi-head attention. `mask`, when given, is an additive `[Tq×Tk]`
    /// buffer applied to every head's scores before the softmax.
    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        scope: &str,
        mask: Option<&[T]>,
    ) -> Result<NodeId> {
        let d = self.model.config.d_model;
        let heads = self.model.config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.projection(q_in, &format!("{scope}.q"))?;
        let k = self.projection(kv_in, &format!("{scope}.k"))?;
        let v = self.projection(kv_in, &format!("{scope}.v"))?;

        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => self.tape.add_const(scores, m)?,
                None => scores,
            };
            let probs = self.tape.softmax_lastdim(scores);
            if self.capture_attention {
                self.attention.push(self.tape.value(probs).to_vec());
            }
            outputs.push(self.tape.matmul(probs, vh)?);
        }
        let merged = self.tape.concat_cols(&outputs)?;
        self.projection(merged, &format!("{scope}.o"))
    }

    fn feed_forward(&mut self, x: NodeId, scope: &str) -> Result<NodeId> {
        let h = self.projection(x, &format!("{scope}.w1"))?;
        let b1 = self.param(&format!("{scope}.b1"));
        let h = self.tape.add_bias(h, b1)?;
        let h = self.tape.gelu(h);
        let out = self.projection(h, &format!("{scope}.w2"))?;
        let b2 = self.param(&format!("{scope}.b2"));
        self.tape.add_bias(out, b2)
    }

    fn embed(&mut self, ids: &[TokenId]) -> Result<NodeId> {
        let tok = self.param("embed.tok");
        let pos = self.param("embed.pos");
        let id_idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let pos_idx: Vec<usize> = (0..ids.len()).collect();
        let te = self.tape.embedding_gather(tok, &id_idx)?;
        let pe = self.tape.embedding_gather(pos, &pos_idx)?;
        self.tape.add(te, pe)
    }

    /// Additive mask blocking attention to pad key positions.
    fn pad_mask(&self, t_q: usize, keys: &[TokenId]) -> Option<Vec<T>> {
        if keys.iter().all(|&k| k != PAD_ID) {
            return None;
        }
        let neg = T::from_f64(MASK_NEG);
        let mut m = vec![T::ZERO; t_q * keys.len()];
        for row in m.chunks_exact_mut(keys.len()) {
            for (j, &k) in keys.iter().enumerate() {
                if k == PAD_ID {
                    row[j] = neg;
                }
            }
        }
        Some(m)
    }

    /// Pre-norm encoder stack: `x += Attn(LN(x)); x += FF(LN(x))` per
    /// layer, final layer norm applied.
    pub fn encode(&mut self, src: &[TokenId]) -> Result<NodeId> {
        let t = src.len();
        let mut x = self.embed(src)?;
        let mask = self.pad_mask(t, src);
        for i in 0..self.model.config.n_enc_layers {
            let normed = self.layer_norm(x, &format!("enc.{i}.ln1"))?;
            let attn = self.attention(normed, normed, &format!("enc.{i}.attn"), mask.as_deref())?;
            let attn = self.adapter(attn, &format!("enc.{i}.adapter.attn"))?;
            x = self.tape.add(x, attn)?;
            let normed = self.layer_norm(x, &format!("enc.{i}.ln2"))?;
            let ff = self.feed_forward(normed, &format!("enc.{i}.ff"))?;
            let ff = self.adapter(ff, &format!("enc.{i}.adapter.ff"))?;
            x = self.tape.add(x, ff)?;
        }
        self.layer_norm(x, "enc.ln_f")
    }

    /// Pre-norm decoder stack over `tgt_in`, attending to `enc` (masked by
    /// `src` pads), followed by the output projection to vocabulary logits.
    pub fn decode_logits(
        &mut self,
        enc: NodeId,
        src: &[TokenId],
        tgt_in: &[TokenId],
    ) -> Result<NodeId> {
        let t = tgt_in.len();
        let mut y = self.embed(tgt_in)?;

        let neg = T::from_f64(MASK_NEG);
        let mut causal = vec![T::ZERO; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                causal[i * t + j] = neg;
            }
        }
        let cross_mask = self.pad_mask(t, src);

        for i in 0..self.model.config.n_dec_layers {
            let normed = self.layer_norm(y, &format!("dec.{i}.ln1"))?;
            let attn = self.attention(normed, normed, &format!("dec.{i}.self"), Some(&causal))?;
            let attn = self.adapter(attn, &format!("dec.{i}.adapter.self"))?;
            y = self.tape.add(y, attn)?;

            let normed = self.layer_norm(y, &format!("dec.{i}.ln2"))?;
            let cross = self.attention(
                normed,
                enc,
                &format!("dec.{i}.cross"),
                cross_mask.as_deref(),
            )?;
            let cross = self.adapter(cross, &format!("dec.{i}.adapter.cross"))?;
            y = self.tape.add(y, cross)?;

            let normed = self.layer_norm(y, &format!("dec.{i}.ln3"))?;
            let ff = self.feed_forward(normed, &format!("dec.{i}.ff"))?;
            let ff = self.adapter(ff, &format!("dec.{i}.adapter.ff"))?;
            y = self.tape.add(y, ff)?;
        }
        let y = self.layer_norm(y, "dec.ln_f")?;
        let head = self.param("head.out");
        self.tape.matmul(y, head)
    }

    /// Mean-pool encoder output over non-pad positions and apply the
    /// two-way classification head.
    pub fn classify_head(&mut self, enc: NodeId, seq: &[TokenId]) -> Result<NodeId> {
        let t = seq.len();
        let non_pad = seq.iter().filter(|&&s| s != PAD_ID).count().max(1);
        let w = T::from_f64(1.0 / non_pad as f64);
        let pool_row: Vec<T> = seq
            .iter()
            .map(|&s| if s == PAD_ID { T::ZERO } else { w })
            .collect();
        let pool = self.tape.leaf_from(vec![1, t], pool_row, false);
        let pooled = self.tape.matmul(pool, enc)?;
        let cls_w = self.param("cls.w");
        let logits = self.tape.matmul(pooled, cls_w)?;
        let cls_b = self.param("cls.b");
        self.tape.add_bias(logits, cls_b)
    }

    /// Finish the pass, packaging the tape and touched parameter leaves.
    pub fn into_loss_graph(self, loss: NodeId) -> LossGraph<T> {
        let leaves = self.leaves.into_iter().collect();
        LossGraph::new(self.tape, loss, leaves)
    }
}

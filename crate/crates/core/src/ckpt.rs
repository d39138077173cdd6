//! Binary checkpoints of named tensors, plus the file-level low-rank
//! merge.
//!
//! Layout: magic `PEFT`, format version (u32 LE), entry count (u32 LE),
//! then per entry: name length (u32 LE), UTF-8 name bytes, dtype tag
//! (u8: 0 = f32, 1 = f64), rank (u32 LE), extents (u32 LE each), raw
//! little-endian element bytes. Round-trips are bitwise lossless; unknown
//! magic or version is rejected.
//!
//! A model checkpoint `<path>` is accompanied by a `<path>.meta` sidecar
//! (flat `key = value`) holding the model config and injected method so
//! the model can be reconstructed. All writes go to a temp file first and
//! rename into place, so failures never leave partial output.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::peft::{MethodName, PeftMethod};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"PEFT";
pub const VERSION: u32 = 1;

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialize named tensors in order.
pub fn encode_entries<'a, T, I>(entries: I) -> Vec<u8>
where
    T: Scalar + 'a,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Schema(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Deserialize a checkpoint written with the same element type.
pub fn decode_entries<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Schema(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Schema(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Schema(format!("{}: non-UTF-8 name", path.display())))?;
        let dtype = c.u8()?;
        if dtype != T::DTYPE as u8 {
            return Err(Error::Schema(format!(
                "{}: entry {name} has dtype tag {dtype}, expected {}",
                path.display(),
                T::DTYPE as u8
            )));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match T::DTYPE {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = c.take(numel * width)?;
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|ch| match T::DTYPE {
                Dtype::F32 => {
                    T::from_f64(f64::from(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]])))
                }
                Dtype::F64 => T::from_f64(f64::from_le_bytes([
                    ch[0], ch[1], ch[2], ch[3], ch[4], ch[5], ch[6], ch[7],
                ])),
            })
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Schema(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - c.pos
        )));
    }
    Ok(entries)
}

pub fn save_entries<'a, T, I>(entries: I, path: &Path) -> Result<()>
where
    T: Scalar + 'a,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    write_atomic(path, &encode_entries(entries))
}

pub fn load_entries<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes, path)
}

fn method_meta(method: Option<PeftMethod>) -> (String, usize) {
    match method {
        None => ("none".into(), 0),
        Some(m) => (m.name().as_str().into(), m.rank().unwrap_or(0)),
    }
}

/// Save a model: every registry entry in order, plus the `.meta` sidecar
/// with config, method and adapter activation.
pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    save_entries(
        model.params.iter().map(|e| (e.name.as_str(), &e.tensor)),
        path,
    )?;
    let c = &model.config;
    let (method, r) = method_meta(model.method());
    let meta = format!(
        "n_enc_layers = {}\nn_dec_layers = {}\nd_model = {}\nn_heads = {}\n\
         d_ff = {}\nvocab_size = {}\nmax_seq_len = {}\nseed = {}\n\
         method = {}\nr = {}\nadapter_gelu = {}\n",
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.vocab_size,
        c.max_seq_len,
        c.seed,
        method,
        r,
        model.adapter_gelu as u8,
    );
    write_atomic(&meta_path(path), meta.as_bytes())
}

/// Save only the unfrozen (trainable) entries: the fine-tuning deltas.
pub fn save_deltas<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    save_entries(
        model
            .params
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| (e.name.as_str(), &e.tensor)),
        path,
    )
}

pub fn load_model_config(path: &Path) -> Result<(ModelConfig, Option<PeftMethod>, bool)> {
    let meta = Config::from_file(&meta_path(path))?;
    let config = ModelConfig {
        n_enc_layers: meta.get_usize("n_enc_layers")?,
        n_dec_layers: meta.get_usize("n_dec_layers")?,
        d_model: meta.get_usize("d_model")?,
        n_heads: meta.get_usize("n_heads")?,
        d_ff: meta.get_usize("d_ff")?,
        vocab_size: meta.get_usize("vocab_size")?,
        max_seq_len: meta.get_usize("max_seq_len")?,
        seed: meta.get_u64_or("seed", 0)?,
    };
    let method = match meta.get_str_or("method", "none") {
        "none" => None,
        name => Some(MethodName::parse(name)?.with_rank(meta.get_usize_or("r", 0)?)),
    };
    let adapter_gelu = meta.get_usize_or("adapter_gelu", 0)? != 0;
    Ok((config, method, adapter_gelu))
}

/// Reconstruct a model from `<path>` and its `.meta` sidecar. Freeze flags
/// are rebuilt from the recorded method: non-attachment entries freeze for
/// every method except full.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (config, method, adapter_gelu) = load_model_config(path)?;
    config.validate()?;
    let entries = load_entries::<T>(path)?;
    let mut params = crate::model::ParamRegistry::new();
    for (name, tensor) in entries {
        params.insert(name, tensor)?;
    }
    if !params.contains("embed.tok") {
        return Err(Error::Schema(format!(
            "{}: not a model checkpoint (embed.tok missing)",
            path.display()
        )));
    }
    let mut model = Model {
        config,
        params,
        method,
        adapter_gelu,
    };
    if let Some(m) = method {
        if m != PeftMethod::Full {
            let attachment =
                |n: &str| n.contains(".lora_a") || n.contains(".lora_b") || n.contains(".adapter.");
            let names: Vec<String> = model.params.iter().map(|e| e.name.clone()).collect();
            for n in names {
                model.params.set_frozen(&n, !attachment(&n));
            }
        }
    }
    Ok(model)
}

/// Fold a delta checkpoint (low-rank pairs only) into a base model
/// checkpoint. Before anything is written, 16 random inputs are pushed
/// through the wrapped and the merged model; max-abs deviation above 1e-5
/// fails the merge. Errors never leave an output file behind.
pub fn merge_checkpoint_files<T: Scalar>(base: &Path, deltas: &Path, out: &Path) -> Result<()> {
    let base_model = load_model::<T>(base)?;
    let delta_entries = load_entries::<T>(deltas)?;

    for (name, _) in &delta_entries {
        if name.contains(".adapter.") {
            return Err(Error::UnsupportedMerge(format!(
                "delta entry {name} is an adapter; adapters cannot be merged"
            )));
        }
        let target = name
            .strip_suffix(".lora_a")
            .or_else(|| name.strip_suffix(".lora_b"))
            .ok_or_else(|| {
                Error::Schema(format!("delta entry {name} is not a low-rank pair member"))
            })?;
        if !base_model.params.contains(target) {
            return Err(Error::Schema(format!(
                "delta entry {name} has no base parameter {target}"
            )));
        }
    }

    // Wrapped model: base plus the delta entries as live attachments.
    let mut wrapped = base_model.clone();
    for (name, tensor) in &delta_entries {
        wrapped.params.insert(name.clone(), tensor.clone())?;
    }
    let mut merged = wrapped.clone();
    crate::peft::fold_lora_pairs(&mut merged)?;

    // Verification pass on random inputs.
    let mut s = crate::rng::Stream::new(0xC0FFEE);
    let cfg = &base_model.config;
    for _ in 0..16 {
        let len = s.gen_range(1, cfg.max_seq_len.min(8) + 1);
        let src: Vec<crate::TokenId> = (0..len)
            .map(|_| s.gen_range(crate::model::VOCAB_START as usize, cfg.vocab_size) as u32)
            .collect();
        let a = wrapped.forward_encoder(&src)?;
        let b = merged.forward_encoder(&src)?;
        let max_abs = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (*x - *y).abs().to_f64())
            .fold(0.0f64, f64::max);
        if max_abs > 1e-5 {
            return Err(Error::Schema(format!(
                "merge verification failed: wrapped vs merged deviates by {max_abs}"
            )));
        }
    }

    save_model(&merged, out)
}

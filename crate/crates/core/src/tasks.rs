//! Synthetic desk-scale sequence tasks with reproducible splits.
//!
//! Four task families stand in for real corpora: token copying, reversal,
//! a substitution-plus-reorder translation, and clone-pair classification.
//! A fifth kind, the 50/50 copy+reverse mixture, backs base-model
//! pretraining. Splits are generated from a seed, pairwise disjoint as
//! token sequences for the generative kinds, and serializable to tab-
//! separated text files.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, VOCAB_START};
use crate::rng::Stream;
use crate::tensor::Scalar;
use crate::train::{self, TrainConfig};
use crate::TokenId;
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    SubstTranslate,
    ClonePairs,
    /// 50/50 copy+reverse mixture used for pretraining.
    Mixture,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SubstTranslate => "subst_translate",
            TaskKind::ClonePairs => "clone_pairs",
            TaskKind::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "subst_translate" => Ok(TaskKind::SubstTranslate),
            "clone_pairs" => Ok(TaskKind::ClonePairs),
            "mixture" => Ok(TaskKind::Mixture),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }

    /// Default evaluation metric for the kind.
    pub fn metric(&self) -> MetricKind {
        match self {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Mixture => MetricKind::ExactMatch,
            TaskKind::SubstTranslate => MetricKind::Bleu4,
            TaskKind::ClonePairs => MetricKind::F1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Bleu4,
    ExactMatch,
    F1,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Bleu4 => "bleu4",
            MetricKind::ExactMatch => "exact_match",
            MetricKind::F1 => "f1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bleu4" => Ok(MetricKind::Bleu4),
            "exact_match" => Ok(MetricKind::ExactMatch),
            "f1" => Ok(MetricKind::F1),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub src: Vec<TokenId>,
    /// Task tokens only; BOS/EOS are added by the loss layer.
    pub tgt: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub enum SplitData {
    Seq {
        train: Vec<Seq2SeqExample>,
        dev: Vec<Seq2SeqExample>,
        test: Vec<Seq2SeqExample>,
    },
    Pair {
        train: Vec<PairExample>,
        dev: Vec<PairExample>,
        test: Vec<PairExample>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub metric: MetricKind,
    pub low_resource_fraction: f64,
    pub data: SplitData,
}

impl TaskSpec {
    pub fn split_len(&self, split: Split) -> usize {
        match (&self.data, split) {
            (SplitData::Seq { train, .. }, Split::Train) => train.len(),
            (SplitData::Seq { dev, .. }, Split::Dev) => dev.len(),
            (SplitData::Seq { test, .. }, Split::Test) => test.len(),
            (SplitData::Pair { train, .. }, Split::Train) => train.len(),
            (SplitData::Pair { dev, .. }, Split::Dev) => dev.len(),
            (SplitData::Pair { test, .. }, Split::Test) => test.len(),
        }
    }

    pub fn seq_split(&self, split: Split) -> Option<&[Seq2SeqExample]> {
        match (&self.data, split) {
            (SplitData::Seq { train, .. }, Split::Train) => Some(train),
            (SplitData::Seq { dev, .. }, Split::Dev) => Some(dev),
            (SplitData::Seq { test, .. }, Split::Test) => Some(test),
            _ => None,
        }
    }

    pub fn pair_split(&self, split: Split) -> Option<&[PairExample]> {
        match (&self.data, split) {
            (SplitData::Pair { train, .. }, Split::Train) => Some(train),
            (SplitData::Pair { dev, .. }, Split::Dev) => Some(dev),
            (SplitData::Pair { test, .. }, Split::Test) => Some(test),
            _ => None,
        }
    }
}

/// The token bijection used by `subst_translate` and clone positives: a
/// seeded permutation of the task vocabulary `[VOCAB_START, vocab)`.
pub fn task_bijection(seed: u64, vocab_size: usize) -> Vec<TokenId> {
    let n = vocab_size - VOCAB_START as usize;
    let mut map: Vec<TokenId> = (0..n).map(|i| VOCAB_START + i as TokenId).collect();
    let mut s = Stream::new(seed ^ 0xB17E_C7ED);
    s.shuffle(&mut map);
    map
}

fn apply_bijection(map: &[TokenId], seq: &[TokenId]) -> Vec<TokenId> {
    seq.iter()
        .map(|&t| map[(t - VOCAB_START) as usize])
        .collect()
}

/// Adjacent-pair swap at even positions (0↔1, 2↔3, …); a trailing odd
/// element stays in place.
pub fn even_swap(seq: &[TokenId]) -> Vec<TokenId> {
    let mut out = seq.to_vec();
    let mut i = 0;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += 2;
    }
    out
}

/// Generate a task with reproducible, disjoint splits.
#[allow(clippy::too_many_arguments)]
pub fn gen_task(
    kind: TaskKind,
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    low_resource_fraction: f64,
) -> Result<TaskSpec> {
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    if (vocab_size as TokenId) <= VOCAB_START {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no task tokens above the specials"
        )));
    }
    let (len_min, len_max) = len_range;
    if len_min == 0 || len_min > len_max {
        return Err(Error::Config(format!(
            "invalid length range {len_min}..={len_max}"
        )));
    }
    if !(low_resource_fraction > 0.0 && low_resource_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "low_resource_fraction {low_resource_fraction} not in (0, 1]"
        )));
    }

    let mut s = Stream::new(seed);
    let draw_seq = |s: &mut Stream| -> Vec<TokenId> {
        let len = s.gen_range(len_min, len_max + 1);
        (0..len)
            .map(|_| s.gen_range(VOCAB_START as usize, vocab_size) as TokenId)
            .collect()
    };

    let total = n_train + n_dev + n_test;
    let data = match kind {
        TaskKind::ClonePairs => {
            let map = task_bijection(seed, vocab_size);
            let mut pairs = Vec::with_capacity(total);
            for i in 0..total {
                let a = draw_seq(&mut s);
                if i % 2 == 0 {
                    pairs.push(PairExample {
                        b: apply_bijection(&map, &a),
                        a,
                        label: 1,
                    });
                } else {
                    let clone_of_a = apply_bijection(&map, &a);
                    let mut b = draw_seq(&mut s);
                    // Negatives must differ from the true clone in at
                    // least one token.
                    while b == clone_of_a {
                        b = draw_seq(&mut s);
                    }
                    pairs.push(PairExample { a, b, label: 0 });
                }
            }
            let mut test = pairs;
            let mut dev = test.split_off(n_train);
            let test2 = dev.split_off(n_dev);
            let mut train = test;
            train.truncate(subsampled_len(n_train, low_resource_fraction));
            SplitData::Pair {
                train,
                dev,
                test: test2,
            }
        }
        _ => {
            // Unique sources across all splits make them disjoint.
            let mut seen: std::collections::HashSet<Vec<TokenId>> =
                std::collections::HashSet::new();
            let mut sources = Vec::with_capacity(total);
            while sources.len() < total {
                let src = draw_seq(&mut s);
                if seen.insert(src.clone()) {
                    sources.push(src);
                }
            }
            let map = task_bijection(seed, vocab_size);
            let examples: Vec<Seq2SeqExample> = sources
                .into_iter()
                .enumerate()
                .map(|(i, src)| {
                    match kind {
                        TaskKind::Copy => Seq2SeqExample {
                            tgt: src.clone(),
                            src,
                        },
                        TaskKind::Reverse => Seq2SeqExample {
                            tgt: src.iter().rev().copied().collect(),
                            src,
                        },
                        TaskKind::SubstTranslate => Seq2SeqExample {
                            tgt: even_swap(&apply_bijection(&map, &src)),
                            src,
                        },
                        // The two mixture directions must stay
                        // distinguishable from the source alone, so
                        // reverse examples carry a leading separator and
                        // an unmarked source decodes as a copy.
                        TaskKind::Mixture => {
                            if i % 2 == 0 {
                                Seq2SeqExample {
                                    tgt: src.clone(),
                                    src,
                                }
                            } else {
                                let tgt: Vec<TokenId> = src.iter().rev().copied().collect();
                                let mut marked = Vec::with_capacity(src.len() + 1);
                                marked.push(crate::model::SEP_ID);
                                marked.extend_from_slice(&src);
                                Seq2SeqExample { src: marked, tgt }
                            }
                        }
                        TaskKind::ClonePairs => unreachable!(),
                    }
                })
                .collect();
            let mut test = examples;
            let mut dev = test.split_off(n_train);
            let test2 = dev.split_off(n_dev);
            let mut train = test;
            train.truncate(subsampled_len(n_train, low_resource_fraction));
            SplitData::Seq {
                train,
                dev,
                test: test2,
            }
        }
    };

    Ok(TaskSpec {
        kind,
        vocab_size,
        metric: kind.metric(),
        low_resource_fraction,
        data,
    })
}

fn subsampled_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).max(1)
}

// ── Task files ───────────────────────────────────────────────────────────

fn ids_to_str(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn ids_from_str(s: &str, line: usize) -> Result<Vec<TokenId>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<TokenId>().map_err(|_| Error::Parse {
                line,
                message: format!("bad token id {tok:?}"),
            })
        })
        .collect()
}

/// Write `train.tsv`, `dev.tsv`, `test.tsv` and `task.conf` under `dir`.
/// One example per line: tab-separated fields of space-separated token
/// ids, with a trailing integer label for pair tasks.
pub fn save_task(task: &TaskSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_split = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    match &task.data {
        SplitData::Seq { train, dev, test } => {
            for (name, split) in [("train.tsv", train), ("dev.tsv", dev), ("test.tsv", test)] {
                let mut body = String::new();
                for ex in split.iter() {
                    body.push_str(&ids_to_str(&ex.src));
                    body.push('\t');
                    body.push_str(&ids_to_str(&ex.tgt));
                    body.push('\n');
                }
                write_split(name, body)?;
            }
        }
        SplitData::Pair { train, dev, test } => {
            for (name, split) in [("train.tsv", train), ("dev.tsv", dev), ("test.tsv", test)] {
                let mut body = String::new();
                for ex in split.iter() {
                    body.push_str(&ids_to_str(&ex.a));
                    body.push('\t');
                    body.push_str(&ids_to_str(&ex.b));
                    body.push('\t');
                    body.push_str(&ex.label.to_string());
                    body.push('\n');
                }
                write_split(name, body)?;
            }
        }
    }
    let conf = format!(
        "kind = {}\nvocab_size = {}\nmetric = {}\nlow_resource_fraction = {}\n",
        task.kind, task.vocab_size, task.metric, task.low_resource_fraction
    );
    write_split("task.conf", conf)
}

/// Load a task directory written by [`save_task`].
pub fn load_task(dir: &Path) -> Result<TaskSpec> {
    let conf_path = dir.join("task.conf");
    let conf = crate::config::Config::from_file(&conf_path)?;
    let kind = TaskKind::parse(conf.get_str("kind")?)?;
    let vocab_size = conf.get_usize("vocab_size")?;
    let metric = MetricKind::parse(conf.get_str("metric")?)?;
    let low_resource_fraction = conf.get_f64_or("low_resource_fraction", 1.0)?;

    let read_lines = |name: &str| -> Result<Vec<String>> {
        let path = dir.join(name);
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(body.lines().map(str::to_string).collect())
    };

    let parse_seq = |lines: Vec<String>| -> Result<Vec<Seq2SeqExample>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut fields = l.split('\t');
                let src = ids_from_str(fields.next().unwrap_or(""), i + 1)?;
                let tgt = ids_from_str(
                    fields.next().ok_or(Error::Parse {
                        line: i + 1,
                        message: "missing target field".into(),
                    })?,
                    i + 1,
                )?;
                Ok(Seq2SeqExample { src, tgt })
            })
            .collect()
    };
    let parse_pair = |lines: Vec<String>| -> Result<Vec<PairExample>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fields: Vec<&str> = l.split('\t').collect();
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected 3 fields, got {}", fields.len()),
                    });
                }
                let label = fields[2].parse::<u8>().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad label {:?}", fields[2]),
                })?;
                Ok(PairExample {
                    a: ids_from_str(fields[0], i + 1)?,
                    b: ids_from_str(fields[1], i + 1)?,
                    label,
                })
            })
            .collect()
    };

    let data = if kind == TaskKind::ClonePairs {
        SplitData::Pair {
            train: parse_pair(read_lines("train.tsv")?)?,
            dev: parse_pair(read_lines("dev.tsv")?)?,
            test: parse_pair(read_lines("test.tsv")?)?,
        }
    } else {
        SplitData::Seq {
            train: parse_seq(read_lines("train.tsv")?)?,
            dev: parse_seq(read_lines("dev.tsv")?)?,
            test: parse_seq(read_lines("test.tsv")?)?,
        }
    };

    Ok(TaskSpec {
        kind,
        vocab_size,
        metric,
        low_resource_fraction,
        data,
    })
}

// ── Pretraining ──────────────────────────────────────────────────────────

/// Train a fresh model with everything unfrozen on a 50/50 copy+reverse
/// mixture, returning the final (not early-stopped) model as the shared
/// base for fine-tuning runs. Deterministic per `(config.seed, seed)`.
pub fn pretrain_base<T: Scalar>(config: &ModelConfig, seed: u64, steps: usize) -> Result<Model<T>> {
    if steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    let len_max = (config.max_seq_len - 2).clamp(1, 8);
    let task = gen_task(
        TaskKind::Mixture,
        seed.wrapping_add(0x5EED),
        2048.min(10 * steps),
        64,
        64,
        config.vocab_size,
        (1, len_max),
        1.0,
    )?;
    let mut model = Model::new(config.clone())?;
    crate::peft::inject(&mut model, crate::peft::PeftMethod::Full, seed)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        max_steps: steps,
        eval_interval: steps.max(1),
        patience: usize::MAX,
        seed,
        ..TrainConfig::default()
    };
    let result = train::train(model, &task, &cfg)?;
    let mut base = result.final_model;
    // Hand back a plain model so fine-tuning can inject its own method.
    base.params.unfreeze_all();
    base.method = None;
    Ok(base)
}

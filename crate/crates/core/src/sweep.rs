//! Experiment sweep: fine-tune a shared pretrained base over a
//! method × rank × seed grid and record the results as CSV.
//!
//! Cells are fully isolated (own model clone, own training seed) and run
//! data-parallel; output rows are ordered by (method, r, seed) regardless
//! of completion order. Full fine-tuning, when listed, runs once per seed
//! as the reference row (`r` column 0). After the data rows, per-cell
//! mean/std aggregate rows follow, with `mean` / `std` in the seed column.

use crate::ckpt;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel;
use crate::peft::{self, CountShape, MethodName, PeftMethod};
use crate::tasks::{self, Split, TaskSpec};
use crate::train::{self, TrainConfig};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub base_ckpt: PathBuf,
    pub task_dir: PathBuf,
    pub methods: Vec<MethodName>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub out_csv: PathBuf,
}

/// One completed fine-tuning cell.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub method: MethodName,
    /// Rank / bottleneck size; 0 for full fine-tuning.
    pub r: usize,
    pub trainable_count: u64,
    pub trainable_percent: f64,
    pub seed: u64,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub stop_step: usize,
}

pub const CSV_HEADER: &str =
    "method,r,trainable_params,trainable_pct,seed,dev_metric,test_metric,stop_step";

/// Run every (method, r, seed) cell and write the CSV. Returns the data
/// records in output order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<RunRecord>> {
    if cfg.methods.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs methods and seeds".into()));
    }
    if cfg.ranks.is_empty() && cfg.methods.iter().any(|&m| m != MethodName::Full) {
        return Err(Error::Config(
            "sweep needs ranks for non-full methods".into(),
        ));
    }
    let base: Model<f32> = ckpt::load_model(&cfg.base_ckpt)?;
    let task = tasks::load_task(&cfg.task_dir)?;
    if base.config.vocab_size != task.vocab_size {
        return Err(Error::Config(format!(
            "base model vocab {} does not match task vocab {}",
            base.config.vocab_size, task.vocab_size
        )));
    }

    // Cell grid in canonical method order, then rank, then seed.
    let mut cells: Vec<(PeftMethod, u64)> = Vec::new();
    for method in MethodName::ALL {
        if !cfg.methods.contains(&method) {
            continue;
        }
        if method == MethodName::Full {
            for &seed in &cfg.seeds {
                cells.push((PeftMethod::Full, seed));
            }
        } else {
            for &r in &cfg.ranks {
                for &seed in &cfg.seeds {
                    cells.push((method.with_rank(r), seed));
                }
            }
        }
    }

    let shape = CountShape::from_config(&base.config);
    let results: Vec<Result<RunRecord>> = parallel::map_indexed(cells.len(), |i| {
        let (method, seed) = cells[i];
        run_cell(&base, &task, &cfg.train, &shape, method, seed)
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    write_csv(&records, &cfg.out_csv)?;
    Ok(records)
}

fn run_cell(
    base: &Model<f32>,
    task: &TaskSpec,
    train_cfg: &TrainConfig,
    shape: &CountShape,
    method: PeftMethod,
    seed: u64,
) -> Result<RunRecord> {
    let mut model = base.clone();
    peft::inject(&mut model, method, seed)?;
    let (count, percent) = peft::count_trainable(shape, method);
    debug_assert_eq!(count, peft::trainable_elems(&model));
    let cell_cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let outcome = train::train(model, task, &cell_cfg)?;
    let test_metric = train::evaluate(&outcome.best, task, Split::Test)?;
    Ok(RunRecord {
        method: method.name(),
        r: method.rank().unwrap_or(0),
        trainable_count: count,
        trainable_percent: percent,
        seed,
        dev_metric: outcome.best_dev,
        test_metric,
        stop_step: outcome.stop_step,
    })
}

fn fmt_record(r: &RunRecord) -> String {
    format!(
        "{},{},{},{:.4},{},{:.6},{:.6},{}",
        r.method,
        r.r,
        r.trainable_count,
        r.trainable_percent,
        r.seed,
        r.dev_metric,
        r.test_metric,
        r.stop_step
    )
}

/// Data rows in input order, then mean/std aggregate rows per (method, r).
pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut body = format!("# generated_at = {stamp}\n{CSV_HEADER}\n");
    for r in records {
        body.push_str(&fmt_record(r));
        body.push('\n');
    }
    for group in group_cells(records) {
        let (mean_dev, _) = mean_std(group.iter().map(|r| r.dev_metric));
        let (mean_test, std_test) = mean_std(group.iter().map(|r| r.test_metric));
        let (mean_stop, _) = mean_std(group.iter().map(|r| r.stop_step as f64));
        let proto = group[0];
        body.push_str(&format!(
            "{},{},{},{:.4},mean,{:.6},{:.6},{}\n",
            proto.method,
            proto.r,
            proto.trainable_count,
            proto.trainable_percent,
            mean_dev,
            mean_test,
            mean_stop.round() as u64,
        ));
        let (_, std_dev) = mean_std(group.iter().map(|r| r.dev_metric));
        body.push_str(&format!(
            "{},{},{},{:.4},std,{:.6},{:.6},0\n",
            proto.method,
            proto.r,
            proto.trainable_count,
            proto.trainable_percent,
            std_dev,
            std_test,
        ));
    }
    ckpt::write_atomic(path, body.as_bytes())
}

/// Consecutive records sharing (method, r).
fn group_cells(records: &[RunRecord]) -> Vec<Vec<&RunRecord>> {
    let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
    for r in records {
        match groups.last_mut() {
            Some(g) if g[0].method == r.method && g[0].r == r.r => g.push(r),
            _ => groups.push(vec![r]),
        }
    }
    groups
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Human-readable wrap-up: dev-best rank per method, and whether full
/// fine-tuning's mean test metric dominates every fine-tuning cell (an
/// observation, not an assertion).
pub fn summarize(records: &[RunRecord]) -> String {
    let mut out = String::new();
    let groups = group_cells(records);
    let full_mean = groups
        .iter()
        .find(|g| g[0].method == MethodName::Full)
        .map(|g| mean_std(g.iter().map(|r| r.test_metric)).0);

    for method in MethodName::ALL {
        if method == MethodName::Full {
            continue;
        }
        let best = groups
            .iter()
            .filter(|g| g[0].method == method)
            .map(|g| {
                let (mean_dev, _) = mean_std(g.iter().map(|r| r.dev_metric));
                (
                    g[0].r,
                    mean_dev,
                    mean_std(g.iter().map(|r| r.test_metric)).0,
                )
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((r, dev, test)) = best {
            out.push_str(&format!(
                "{method}: dev-best r = {r} (mean dev {dev:.4}, mean test {test:.4})\n"
            ));
        }
    }
    if let Some(full) = full_mean {
        let peft_max = groups
            .iter()
            .filter(|g| g[0].method != MethodName::Full)
            .map(|g| mean_std(g.iter().map(|r| r.test_metric)).0)
            .fold(f64::NEG_INFINITY, f64::max);
        if peft_max.is_finite() {
            out.push_str(&format!(
                "full fine-tuning mean test = {full:.4}; best fine-tuning cell mean = {peft_max:.4}; full_dominates = {}\n",
                full >= peft_max
            ));
        }
    }
    out
}

/// Strip the timestamp header (the only non-deterministic line).
pub fn csv_without_timestamp(body: &str) -> String {
    body.lines()
        .filter(|l| !l.starts_with("# generated_at"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{gen_task, save_task, TaskKind};
    use std::fs;

    fn tiny_sweep_config(dir: &Path) -> SweepConfig {
        SweepConfig {
            base_ckpt: dir.join("base.ckpt"),
            task_dir: dir.join("task"),
            methods: vec![
                MethodName::Full,
                MethodName::Lora,
                MethodName::FfLora,
                MethodName::Adapter,
                MethodName::FfLoraPlusAdapter,
            ],
            ranks: vec![1, 2, 4, 8, 16],
            seeds: vec![1, 2, 3],
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 2,
                max_steps: 2,
                eval_interval: 2,
                patience: 2,
                ..TrainConfig::default()
            },
            out_csv: dir.join("results.csv"),
        }
    }

    #[test]
    fn sweep_cardinality_ordering_and_accounting() {
        let dir = std::env::temp_dir().join(format!("peft-lab-sweep-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let model = Model::<f32>::new(ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 32,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            max_seq_len: 10,
            seed: 5,
        })
        .unwrap();
        ckpt::save_model(&model, &dir.join("base.ckpt")).unwrap();
        let task = gen_task(TaskKind::Copy, 3, 8, 4, 4, 16, (2, 4), 1.0).unwrap();
        save_task(&task, &dir.join("task")).unwrap();

        let cfg = tiny_sweep_config(&dir);
        let records = run_sweep(&cfg).unwrap();
        // 4 methods × 5 ranks × 3 seeds + full × 3.
        assert_eq!(records.len(), 63);

        // Ordered by (method, r, seed) in canonical method order.
        let mut expected = Vec::new();
        for m in MethodName::ALL {
            if m == MethodName::Full {
                for s in [1u64, 2, 3] {
                    expected.push((m, 0usize, s));
                }
            } else {
                for r in [1usize, 2, 4, 8, 16] {
                    for s in [1u64, 2, 3] {
                        expected.push((m, r, s));
                    }
                }
            }
        }
        let got: Vec<(MethodName, usize, u64)> =
            records.iter().map(|r| (r.method, r.r, r.seed)).collect();
        assert_eq!(got, expected);

        // Accounting cross-check against the closed forms.
        let shape = CountShape::from_config(&model.config);
        for rec in &records {
            let method = rec.method.with_rank(rec.r.max(1));
            let method = if rec.method == MethodName::Full {
                PeftMethod::Full
            } else {
                method
            };
            let (count, pct) = peft::count_trainable(&shape, method);
            assert_eq!(rec.trainable_count, count);
            assert!((rec.trainable_percent - pct).abs() < 1e-9);
            assert!(rec.dev_metric.is_finite() && rec.test_metric.is_finite());
            assert!(rec.stop_step >= 1);
        }

        // Deterministic CSV modulo the timestamp line.
        let first = fs::read_to_string(&cfg.out_csv).unwrap();
        let records2 = run_sweep(&cfg).unwrap();
        assert_eq!(records2.len(), 63);
        let second = fs::read_to_string(&cfg.out_csv).unwrap();
        assert_eq!(
            csv_without_timestamp(&first),
            csv_without_timestamp(&second)
        );

        // CSV structure: header + 63 data + 2 per group (21 groups).
        let stripped = csv_without_timestamp(&first);
        let lines: Vec<&str> = stripped.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 63 + 2 * 21);
        assert!(lines[1 + 63].contains(",mean,"));

        let summary = summarize(&records);
        assert!(summary.contains("full_dominates"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std([1.0, 3.0].into_iter());
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        let (m, s) = mean_std([5.0].into_iter());
        assert_eq!((m, s), (5.0, 0.0));
    }
}

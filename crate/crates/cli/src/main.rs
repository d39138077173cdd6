//! Experiment command line: data generation, pretraining, fine-tuning
//! runs, method × rank sweeps, parameter accounting, checkpoint merging,
//! prediction dumps and plotting.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use peft_lab::ckpt;
use peft_lab::config::Config;
use peft_lab::model::{Model, ModelConfig};
use peft_lab::peft::{self, CountShape, MethodName};
use peft_lab::plot;
use peft_lab::sweep::{self, SweepConfig};
use peft_lab::tasks::{self, Split, TaskKind};
use peft_lab::train::{self, TrainConfig};
use peft_lab::Error;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
usage: peft-lab <command> [args]

commands:
  gen-data  <config>                      generate task files
  pretrain  <config>                      pretrain a base model checkpoint
  train     <config>                      fine-tune one (method, r) run
  sweep     <config>                      method × rank × seed grid -> CSV
  eval      <config>                      evaluate a checkpoint on a split
  params    <shape-name | config>         trainable-parameter table
  merge     <base> <deltas> <out>         fold low-rank deltas into a base
  dump-preds <task-dir> <split> <n> <ckpt>...  side-by-side predictions
  plot      <results.csv> <out.svg>       scatter of sweep results

configs are flat `key = value` files; see README for the key lists.";

enum CliError {
    Usage(String),
    Lab(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lab(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Lab(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(one_path(rest, "gen-data <config>")?),
        "pretrain" => cmd_pretrain(one_path(rest, "pretrain <config>")?),
        "train" => cmd_train(one_path(rest, "train <config>")?),
        "sweep" => cmd_sweep(one_path(rest, "sweep <config>")?),
        "eval" => cmd_eval(one_path(rest, "eval <config>")?),
        "params" => cmd_params(rest),
        "merge" => cmd_merge(rest),
        "dump-preds" => cmd_dump_preds(rest),
        "plot" => cmd_plot(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn one_path<'a>(args: &'a [String], usage: &str) -> Result<&'a Path, CliError> {
    match args {
        [p] => Ok(Path::new(p)),
        _ => Err(CliError::Usage(format!("expected: {usage}"))),
    }
}

fn model_config_from(cfg: &Config) -> Result<ModelConfig, Error> {
    Ok(ModelConfig {
        n_enc_layers: cfg.get_usize("n_enc_layers")?,
        n_dec_layers: cfg.get_usize("n_dec_layers")?,
        d_model: cfg.get_usize("d_model")?,
        n_heads: cfg.get_usize("n_heads")?,
        d_ff: cfg.get_usize("d_ff")?,
        vocab_size: cfg.get_usize("vocab_size")?,
        max_seq_len: cfg.get_usize("max_seq_len")?,
        seed: cfg.get_u64_or("model_seed", 0)?,
    })
}

fn train_config_from(cfg: &Config) -> Result<TrainConfig, Error> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        lr: cfg.get_f64_or("lr", defaults.lr)?,
        beta1: cfg.get_f64_or("beta1", defaults.beta1)?,
        beta2: cfg.get_f64_or("beta2", defaults.beta2)?,
        eps: cfg.get_f64_or("eps", defaults.eps)?,
        weight_decay: cfg.get_f64_or("weight_decay", defaults.weight_decay)?,
        batch_size: cfg.get_usize_or("batch_size", defaults.batch_size)?,
        max_steps: cfg.get_usize("max_steps")?,
        eval_interval: cfg.get_usize("eval_interval")?,
        patience: cfg.get_usize_or("patience", defaults.patience)?,
        seed: cfg.get_u64_or("seed", 0)?,
    })
}

fn echo(path: &Path) {
    println!("wrote {}", path.display());
}

fn cmd_gen_data(config_path: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let kind = TaskKind::parse(cfg.get_str("kind")?)?;
    let task = tasks::gen_task(
        kind,
        cfg.get_u64_or("seed", 0)?,
        cfg.get_usize("n_train")?,
        cfg.get_usize("n_dev")?,
        cfg.get_usize("n_test")?,
        cfg.get_usize("vocab_size")?,
        (cfg.get_usize("len_min")?, cfg.get_usize("len_max")?),
        cfg.get_f64_or("low_resource_fraction", 1.0)?,
    )?;
    let out_dir = PathBuf::from(cfg.get_str("out_dir")?);
    tasks::save_task(&task, &out_dir)?;
    for f in ["train.tsv", "dev.tsv", "test.tsv", "task.conf"] {
        echo(&out_dir.join(f));
    }
    Ok(())
}

fn cmd_pretrain(config_path: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let model_cfg = model_config_from(&cfg)?;
    let steps = cfg.get_usize("steps")?;
    let seed = cfg.get_u64_or("seed", 0)?;
    let out = PathBuf::from(cfg.get_str("out")?);
    let base: Model<f32> = tasks::pretrain_base(&model_cfg, seed, steps)?;
    ckpt::save_model(&base, &out)?;
    echo(&out);
    echo(&meta_of(&out));
    Ok(())
}

fn meta_of(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let task = tasks::load_task(Path::new(cfg.get_str("task_dir")?))?;
    let mut model: Model<f32> = if cfg.contains("base") {
        ckpt::load_model(Path::new(cfg.get_str("base")?))?
    } else {
        Model::new(model_config_from(&cfg)?)?
    };
    let method_name = MethodName::parse(cfg.get_str("method")?)?;
    let method = if method_name == MethodName::Full {
        method_name.with_rank(0)
    } else {
        method_name.with_rank(cfg.get_usize("r")?)
    };
    let train_cfg = train_config_from(&cfg)?;
    peft::inject(&mut model, method, train_cfg.seed)?;

    let outcome = train::train(model, &task, &train_cfg)?;
    let out = PathBuf::from(cfg.get_str("out")?);
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    ckpt::save_model(&outcome.best, &out)?;
    echo(&out);
    echo(&meta_of(&out));

    let curve_path = with_suffix(&out, ".curve.csv");
    let mut curve = String::from("step,train_loss,dev_metric\n");
    for p in &outcome.curve {
        curve.push_str(&format!(
            "{},{:.6},{:.6}\n",
            p.step, p.train_loss, p.dev_metric
        ));
    }
    std::fs::write(&curve_path, curve).map_err(|e| Error::io(&curve_path, e))?;
    echo(&curve_path);

    if method_name != MethodName::Full {
        let deltas_path = with_suffix(&out, ".deltas.ckpt");
        ckpt::save_deltas(&outcome.best, &deltas_path)?;
        echo(&deltas_path);
    }
    println!(
        "best dev {:.6} at step {}; stopped at step {}",
        outcome.best_dev, outcome.best_step, outcome.stop_step
    );
    Ok(())
}

fn cmd_sweep(config_path: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let methods = cfg
        .get_list("methods")?
        .iter()
        .map(|s| MethodName::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let ranks = cfg
        .get_list("ranks")?
        .iter()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad rank {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = cfg
        .get_list("seeds")?
        .iter()
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sweep_cfg = SweepConfig {
        base_ckpt: PathBuf::from(cfg.get_str("base")?),
        task_dir: PathBuf::from(cfg.get_str("task_dir")?),
        methods,
        ranks,
        seeds,
        train: train_config_from(&cfg)?,
        out_csv: PathBuf::from(cfg.get_str("out_csv")?),
    };
    let records = sweep::run_sweep(&sweep_cfg)?;
    echo(&sweep_cfg.out_csv);
    println!("{} runs completed", records.len());
    print!("{}", sweep::summarize(&records));
    Ok(())
}

fn cmd_eval(config_path: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let model: Model<f32> = ckpt::load_model(Path::new(cfg.get_str("ckpt")?))?;
    let task = tasks::load_task(Path::new(cfg.get_str("task_dir")?))?;
    let split = Split::parse(cfg.get_str_or("split", "test"))?;
    let value = train::evaluate(&model, &task, split)?;
    println!("{} = {:.6}", task.metric, value);
    if cfg.contains("out") {
        let out = PathBuf::from(cfg.get_str("out")?);
        let report = format!(
            "split = {}\nmetric = {}\nvalue = {:.6}\n",
            cfg.get_str_or("split", "test"),
            task.metric,
            value
        );
        std::fs::write(&out, report).map_err(|e| Error::io(&out, e))?;
        echo(&out);
    }
    Ok(())
}

fn cmd_params(args: &[String]) -> Result<(), CliError> {
    let [arg] = args else {
        return Err(CliError::Usage(
            "expected: params <shape-name | config>".into(),
        ));
    };
    let path = Path::new(arg);
    let shape = if path.is_file() {
        let cfg = Config::from_file(path)?;
        CountShape::from_config(&model_config_from(&cfg)?)
    } else {
        CountShape::by_name(arg)?
    };
    println!("shape: {} (total {})", shape.name, shape.total);
    println!("{:<16} {:>4} {:>12}  rounded", "method", "r", "params");
    let (full, full_pct) = peft::count_trainable(&shape, MethodName::Full.with_rank(0));
    println!(
        "{:<16} {:>4} {:>12}  {}",
        "full",
        "-",
        full,
        peft::format_count(full, full_pct)
    );
    for method in [
        MethodName::Lora,
        MethodName::FfLora,
        MethodName::Adapter,
        MethodName::FfLoraPlusAdapter,
    ] {
        for r in [1usize, 2, 4, 8, 16] {
            let (count, pct) = peft::count_trainable(&shape, method.with_rank(r));
            println!(
                "{:<16} {:>4} {:>12}  {}",
                method.as_str(),
                r,
                count,
                peft::format_count(count, pct)
            );
        }
    }
    Ok(())
}

fn cmd_merge(args: &[String]) -> Result<(), CliError> {
    let [base, deltas, out] = args else {
        return Err(CliError::Usage(
            "expected: merge <base> <deltas> <out>".into(),
        ));
    };
    ckpt::merge_checkpoint_files::<f32>(Path::new(base), Path::new(deltas), Path::new(out))?;
    echo(Path::new(out));
    Ok(())
}

fn cmd_dump_preds(args: &[String]) -> Result<(), CliError> {
    if args.len() < 4 {
        return Err(CliError::Usage(
            "expected: dump-preds <task-dir> <split> <n> <ckpt>...".into(),
        ));
    }
    let task = tasks::load_task(Path::new(&args[0]))?;
    let split = Split::parse(&args[1])?;
    let n: usize = args[2]
        .parse()
        .map_err(|_| CliError::Usage(format!("bad example count {:?}", args[2])))?;
    let Some(examples) = task.seq_split(split) else {
        return Err(Error::Config("dump-preds supports generative tasks only".into()).into());
    };

    let mut models = Vec::new();
    for ckpt_path in &args[3..] {
        let model: Model<f32> = ckpt::load_model(Path::new(ckpt_path))?;
        if model.config.vocab_size != task.vocab_size {
            return Err(Error::Config(format!(
                "{ckpt_path}: model vocab {} does not match task vocab {}",
                model.config.vocab_size, task.vocab_size
            ))
            .into());
        }
        let label = match model.method() {
            Some(m) => m.name().as_str().to_string(),
            None => "base".to_string(),
        };
        models.push((label, model));
    }

    println!("example\tlabel\ttokens");
    for (i, ex) in examples.iter().take(n).enumerate() {
        let gt = ex
            .tgt
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        println!("{i}\tgt\t{gt}");
        for (label, model) in &models {
            let pred = model.greedy_decode(&ex.src, model.config.max_seq_len - 1)?;
            let pred = pred
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            println!("{i}\t{label}\t{pred}");
        }
    }
    Ok(())
}

fn cmd_plot(args: &[String]) -> Result<(), CliError> {
    let [csv, svg] = args else {
        return Err(CliError::Usage(
            "expected: plot <results.csv> <out.svg>".into(),
        ));
    };
    plot::render_csv_to_svg(Path::new(csv), Path::new(svg))?;
    echo(Path::new(svg));
    Ok(())
}

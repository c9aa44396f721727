//! `weakmap`: generate synthetic data, train, evaluate, export heatmaps and
//! check gradients.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use weakmap::backbone::Model;
use weakmap::checkpoint::{write_atomic, Checkpoint};
use weakmap::config::RunConfig;
use weakmap::eval::{class_heatmaps, evaluate};
use weakmap::gradsuite;
use weakmap::synth::{generate_dataset, load_dataset, save_dataset, split_by_subject, DatasetFiles};
use weakmap::train::{check_compatible, train_with};
use weakmap::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "weakmap", version, about = "Weakly-supervised lesion classification and localization")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Replace SE gates by identity.
    #[arg(long, global = true)]
    no_se: bool,
    /// Maps per class.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    k_plus: Option<usize>,
    #[arg(long, global = true)]
    k_minus: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and split a synthetic dataset.
    Gen,
    /// Train on a generated dataset; writes model.ckpt, train.log and config.txt.
    Train,
    /// Evaluate a checkpoint on the evaluation split; writes report.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-class heatmaps as 8-bit PGM files.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sample ids (default: first four evaluation samples).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
    },
    /// Finite-difference check of every operator.
    Gradcheck,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.clone();
        }
        if let Some(out) = &self.out {
            match self.command {
                Command::Gen => cfg.data_dir = out.clone(),
                _ => cfg.out_dir = out.clone(),
            }
        }
        let head = &mut cfg.model.head;
        if self.no_se {
            cfg.model.backbone.use_se = false;
        }
        if let Some(m) = self.m {
            head.maps_per_class = m;
        }
        if let Some(k) = self.k_plus {
            head.k_plus = k;
        }
        if let Some(k) = self.k_minus {
            head.k_minus = k;
        }
        if let Some(a) = self.alpha {
            head.alpha = a;
        }
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn prepare_dir(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already holds {marker}; pass --force to overwrite",
            dir.display()
        )));
    }
    io(dir, fs::create_dir_all(dir))
}

fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.data_dir;
    prepare_dir(dir, "index.csv", force)?;
    let images = dir.join("images");
    if images.exists() {
        io(&images, fs::remove_dir_all(&images))?;
    }
    let samples = generate_dataset(&cfg.synth)?;
    let split = split_by_subject(&samples, cfg.split, cfg.seed)?;
    save_dataset(dir, &samples, &split)?;
    write_atomic(&dir.join("config.txt"), cfg.to_string().as_bytes())?;
    println!("samples={} train={} val={} eval={}", samples.len(), split.train.len(), split.val.len(), split.eval.len());
    for c in 0..cfg.synth.classes {
        let positives = samples.iter().filter(|s| s.labels[c] == 1).count();
        println!("class {c}: positives={positives}");
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<DatasetFiles> {
    load_dataset(&cfg.data_dir)
}

fn cmd_train(cfg: &RunConfig, force: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    check_compatible(&model, &data.samples, &cfg.train)?;
    let out = &cfg.out_dir;
    prepare_dir(out, "model.ckpt", force)?;
    let log_path = out.join("train.log");
    let mut log = io(&log_path, fs::File::create(&log_path))?;
    let outcome = train_with(model, &data.samples, &data.split, &cfg.train, |record| {
        io(&log_path, writeln!(log, "{record}").and_then(|_| log.flush()))?;
        eprintln!("epoch {} train {:.5} val {:.5} lr {}", record.epoch, record.train_loss, record.val_loss, record.lr);
        Ok(())
    })?;
    Checkpoint::new(cfg.clone(), outcome.norm, &outcome.model).save(&out.join("model.ckpt"))?;
    write_atomic(&out.join("config.txt"), cfg.to_string().as_bytes())?;
    if outcome.diverged {
        eprintln!("training diverged; kept the last finite snapshot");
    }
    println!("epochs={} best_epoch={} best_val_loss={}", outcome.log.len(), outcome.best_epoch, outcome.best_val_loss);
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"))
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_path(cfg, checkpoint))?;
    let model = ck.model()?;
    let data = load_data(cfg)?;
    let report = evaluate(&model, &ck.norm, &data.samples, &data.split.eval, ck.config.train.crop_size)?;
    io(&cfg.out_dir, fs::create_dir_all(&cfg.out_dir))?;
    write_atomic(&cfg.out_dir.join("report.csv"), report.to_string().as_bytes())?;
    print!("{report}");
    Ok(())
}

fn cmd_heatmap(cfg: &RunConfig, checkpoint: &Option<PathBuf>, ids: &[usize]) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_path(cfg, checkpoint))?;
    let model = ck.model()?;
    let data = load_data(cfg)?;
    let ids: Vec<usize> = if ids.is_empty() { data.split.eval.iter().take(4).copied().collect() } else { ids.to_vec() };
    let dir = cfg.out_dir.join("heatmaps");
    io(&dir, fs::create_dir_all(&dir))?;
    for id in ids {
        let sample = data
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("no sample with id {id}")))?;
        for (c, map) in class_heatmaps(&model, &ck.norm.apply(&sample.image))?.iter().enumerate() {
            let path = dir.join(format!("{id}_{c}.pgm"));
            map.write_pgm(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<bool> {
    let rows = gradsuite::run(&[1, 2, 3])?;
    println!("op,seed,max_relative_error,status");
    for r in &rows {
        println!("{},{},{:.3e},{}", r.op, r.seed, r.max_relative_error, if r.passed() { "ok" } else { "FAIL" });
    }
    Ok(rows.iter().all(|r| r.passed()))
}

fn run(cli: &Cli) -> Result<bool> {
    if let Ok(n) = std::env::var("WEAKMAP_THREADS") {
        let n: usize = n
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("WEAKMAP_THREADS must be a positive integer, got {n:?}")))?;
        weakmap::configure_threads(n)?;
    }
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, cli.force)?,
        Command::Train => cmd_train(&cfg, cli.force)?,
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint)?,
        Command::Heatmap { checkpoint, ids } => cmd_heatmap(&cfg, checkpoint, ids)?,
        Command::Gradcheck => return cmd_gradcheck(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[gradient] at least one operator exceeded the tolerance");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error[{}] {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

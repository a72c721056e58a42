use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use superand::data_io::{
    export_embeddings, gen_synthetic_blobs, load_checkpoint, load_cifar10, load_config, save_checkpoint, BlobSpec,
    Dataset, EmbeddingFormat, Split,
};
use superand::evaluator::{embed_images, knn_evaluate, neighborhood_consistency, LabeledEmbeddings};
use superand::neighborhood::{discover_neighbors, instance_entropies, round_ratio, select_curriculum};
use superand::trainer::{TrainConfig, TrainEvent, TrainState, Trainer};
use superand::{Error, Result};

#[derive(Parser)]
#[command(name = "superand", version, about = "Unsupervised embedding learning with neighborhood curricula")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Directory holding CIFAR-10 binary batches.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the synthetic blob dataset described by the config.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[command(flatten)]
        source: DataSource,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Weighted k-NN accuracy of held-out images against the memory bank.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: DataSource,
        #[arg(long, default_value_t = 200)]
        knn_k: usize,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        /// Per-query prediction file; defaults to predictions.csv beside the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Neighbors, entropies and curriculum selection from a checkpoint's memory.
    Discover {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the memory bank as CSV or raw f32.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: EmbeddingFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class consistency of the selected neighborhoods at every round's ratio.
    Consistency {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn parse_format(s: &str) -> std::result::Result<EmbeddingFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Training and held-out splits.
fn load_data(cfg: &TrainConfig, source: &DataSource) -> Result<(Dataset, Dataset)> {
    let (mut train, test) = match &source.data {
        Some(dir) => (load_cifar10(dir, Split::Train)?, load_cifar10(dir, Split::Test)?),
        None => {
            let d = &cfg.data;
            let all = gen_synthetic_blobs(BlobSpec {
                classes: d.synthetic_classes,
                per_class: d.synthetic_per_class,
                image_size: d.synthetic_image_size,
                noise_sigma: d.synthetic_noise,
                seed: d.synthetic_seed,
            })?;
            all.stratified_holdout(d.holdout_per_class)?
        }
    };
    if cfg.data.limit > 0 {
        train.truncate(cfg.data.limit);
    }
    Ok((train, test))
}

fn labels(ds: &Dataset) -> Result<&[u32]> {
    ds.labels_for_evaluation()
        .ok_or_else(|| Error::param(format!("dataset {} has no labels", ds.name)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn train(config: Option<PathBuf>, source: DataSource, out: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let state = match &resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let mut cfg = match (&state, &config) {
        (Some(s), _) => s.config.clone(),
        (None, Some(path)) => load_config(path)?,
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    if state.is_none() {
        if let Ok(seed) = std::env::var("SUPERAND_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("SUPERAND_SEED={seed:?} is not an integer")))?;
        }
    }
    let (train_set, _) = load_data(&cfg, &source)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = match state {
        Some(s) => Trainer::resume(train_set.images(), s)?,
        None => Trainer::new(train_set.images(), cfg)?,
    };
    let metrics_path = out.join("metrics.jsonl");
    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);
    let ckpt_path = out.join("checkpoint.bin");
    trainer.run(|event| {
        match event {
            TrainEvent::RoundStart { round, ratio } => println!("round {round}: selection ratio {ratio:.3}"),
            TrainEvent::Epoch(rec) => {
                let line = serde_json::to_string(rec).map_err(|e| Error::State(e.to_string()))?;
                writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
                println!(
                    "round {} epoch {:>3}  and {:.4}  ue {:.4}  aug {:.4}  total {:.4}  lr {:.2e}  w {:.2}",
                    rec.round, rec.epoch, rec.l_and, rec.l_ue, rec.l_aug, rec.l_total, rec.lr, rec.w
                );
            }
            TrainEvent::Checkpoint(state) => {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                save_checkpoint(&ckpt_path, state)?;
            }
        }
        Ok(())
    })?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn checked_state(ckpt: &Path, train_set: &Dataset) -> Result<TrainState> {
    let state = load_checkpoint(ckpt)?;
    if state.bank.len() != train_set.len() {
        return Err(Error::State(format!(
            "checkpoint memory has {} rows but the training split has {} images",
            state.bank.len(),
            train_set.len()
        )));
    }
    Ok(state)
}

fn eval(ckpt: PathBuf, source: DataSource, knn_k: usize, tau: f64, predictions: Option<PathBuf>) -> Result<()> {
    let cfg = load_checkpoint(&ckpt)?.config;
    let (train_set, test_set) = load_data(&cfg, &source)?;
    let state = checked_state(&ckpt, &train_set)?;
    let train = LabeledEmbeddings::new(&state.bank, labels(&train_set)?)?;
    let queries = embed_images(&state.params, test_set.images())?;
    let test_labels = labels(&test_set)?;
    let report = knn_evaluate(&train, &queries, test_labels, knn_k, tau)?;
    let path = predictions.unwrap_or_else(|| ckpt.with_file_name("predictions.csv"));
    let mut out = create(&path)?;
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "index,predicted,label")?;
        for (i, (p, l)) in report.predictions.iter().zip(test_labels).enumerate() {
            writeln!(out, "{i},{p},{l}")?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(&path, e))?;
    println!(
        "top-1 accuracy {:.4} ({} queries, k = {}, tau = {})",
        report.accuracy,
        queries.len(),
        knn_k.min(state.bank.len()),
        tau
    );
    Ok(())
}

fn discover(ckpt: PathBuf, k: usize, ratio: f64, tau: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let state = load_checkpoint(&ckpt)?;
    let tau = tau.unwrap_or(state.config.tau);
    let neighbors = discover_neighbors(&state.bank, k)?;
    let entropies = instance_entropies(&state.bank, tau)?;
    let (selected, _) = select_curriculum(&entropies, ratio)?;
    let mut flags = vec![false; entropies.len()];
    for &i in &selected {
        flags[i] = true;
    }
    let mut text = String::from("index,selected,entropy,neighbors\n");
    for (i, list) in neighbors.iter().enumerate() {
        let nb: Vec<String> = list.iter().map(|j| j.to_string()).collect();
        text.push_str(&format!("{i},{},{:.8e},{}\n", flags[i] as u8, entropies[i], nb.join(" ")));
    }
    match out {
        Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
        None => print!("{text}"),
    }
    eprintln!("selected {} of {} instances", selected.len(), entropies.len());
    Ok(())
}

fn export(ckpt: PathBuf, format: EmbeddingFormat, out: PathBuf) -> Result<()> {
    let state = load_checkpoint(&ckpt)?;
    export_embeddings(&state.bank, format, &out)?;
    println!("wrote {} x {} embeddings to {}", state.bank.len(), state.bank.dim(), out.display());
    Ok(())
}

fn consistency(ckpt: PathBuf, source: DataSource, k: Option<usize>) -> Result<()> {
    let cfg = load_checkpoint(&ckpt)?.config;
    let (train_set, _) = load_data(&cfg, &source)?;
    let state = checked_state(&ckpt, &train_set)?;
    let k = k.unwrap_or(cfg.k);
    let neighbors = discover_neighbors(&state.bank, k)?;
    let entropies = instance_entropies(&state.bank, cfg.tau)?;
    let lab = labels(&train_set)?;
    println!("round,ratio,consistency");
    for round in 1..=cfg.rounds {
        let ratio = round_ratio(round, cfg.rounds)?;
        let (selected, _) = select_curriculum(&entropies, ratio)?;
        let c = neighborhood_consistency(&neighbors, &selected, lab)?;
        println!("{round},{ratio:.4},{c:.6}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            source,
            out,
            resume,
        } => train(config, source, out, resume),
        Command::Eval {
            ckpt,
            source,
            knn_k,
            tau,
            predictions,
        } => eval(ckpt, source, knn_k, tau, predictions),
        Command::Discover { ckpt, k, ratio, tau, out } => discover(ckpt, k, ratio, tau, out),
        Command::Export { ckpt, format, out } => export(ckpt, format, out),
        Command::Consistency { ckpt, source, k } => consistency(ckpt, source, k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use stq_core::dataio::{self, Dataset, Split};
use stq_core::format;
use stq_core::inference::{self, InferenceModel};
use stq_core::nn::Model;
use stq_core::report::{self, LayerSummary};
use stq_core::trainer::{self, TrainingReport};

use crate::config::{DatasetName, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.stqw";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn load_dataset(name: DatasetName, dir: &Path) -> Result<(Dataset, Dataset)> {
    let sets = match name {
        DatasetName::Mnist => dataio::load_mnist(dir)?,
        DatasetName::Cifar10 => dataio::load_cifar10(dir)?,
    };
    Ok(sets)
}

/// `<timestamp>-<first 8 hex digits of the config hash>`, with a numeric
/// suffix if that directory already exists.
fn create_run_dir(parent: &Path, config_text: &str) -> Result<PathBuf> {
    let hash = Sha256::digest(config_text.as_bytes());
    let short: String = hash.iter().take(4).map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let base = format!("{stamp}-{short}");
    let mut dir = parent.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_histograms(dir: &Path, report: &TrainingReport) -> Result<()> {
    let hdir = dir.join("histograms");
    fs::create_dir_all(&hdir)?;
    for h in &report.histograms {
        write(
            &hdir.join(format!("layer{}_epoch{}.csv", h.layer, h.epoch)),
            h.histogram.to_csv(),
        )?;
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data_dir {
        cfg.data.dir = d;
    }
    if let Some(o) = args.out_dir {
        cfg.out_dir = o;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let spec = cfg.validate()?;
    let resolved = cfg.to_toml()?;

    let (mut train_set, mut test_set) = load_dataset(cfg.data.dataset, &cfg.data.dir)
        .with_context(|| format!("loading {:?} from {}", cfg.data.dataset, cfg.data.dir.display()))?;
    if let Some(n) = cfg.data.train_limit {
        train_set = train_set.take(n)?;
    }
    if let Some(n) = cfg.data.test_limit {
        test_set = test_set.take(n)?;
    }

    let run_dir = create_run_dir(&cfg.out_dir, &resolved)?;
    write(&run_dir.join(CONFIG_FILE), &resolved)?;
    log::info!(
        "training {} ({}) on {} images, validating on {}; run dir {}",
        spec.name,
        cfg.train.mode.as_str(),
        train_set.len(),
        test_set.len(),
        run_dir.display()
    );

    let mut model: Model<f32> = trainer::init_model(&spec, &cfg.train)?;
    let report = trainer::train(&mut model, &train_set, &test_set, &cfg.train, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  val {:.2}%",
            e.epoch + 1,
            e.train_loss,
            100.0 * e.val_accuracy
        );
    })?;

    let depths = trainer::decide_depths(&model, cfg.train.regularizer.delta);
    let exported = InferenceModel::from_model(&model, &depths)?;
    format::write_file(&exported, run_dir.join(MODEL_FILE))?;
    write(&run_dir.join(CHECKPOINT_FILE), serde_json::to_vec(&model)?)?;
    write(&run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    write(&run_dir.join("metrics.csv"), report.metrics_csv())?;
    write(&run_dir.join("beta_trajectory.csv"), report.beta_trajectory_csv())?;
    write(&run_dir.join("summary.txt"), report::summary_table(&report.layers))?;
    write(&run_dir.join("summary.csv"), report::summary_csv(&report.layers))?;
    write_histograms(&run_dir, &report)?;

    println!(
        "best accuracy {:.2}% (epoch {})",
        100.0 * report.best_val_accuracy,
        report.best_epoch + 1
    );
    println!("final accuracy {:.2}%", 100.0 * report.quantized_accuracy);
    println!("depths {}", report.depth_string);
    println!("compression ratio {:.2}", report.compression_ratio);
    println!("run dir {}", run_dir.display());
    Ok(run_dir)
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub data_dir: PathBuf,
    pub dataset: Option<DatasetName>,
    pub split: Split,
}

/// Dataset implied by the first layer's input channels.
fn infer_dataset(model: &InferenceModel) -> Result<DatasetName> {
    match model.weights().next().map(|w| w.shape.get(1).copied()) {
        Some(Some(1)) => Ok(DatasetName::Mnist),
        Some(Some(3)) => Ok(DatasetName::Cifar10),
        _ => bail!("cannot infer the dataset from the model; pass --dataset"),
    }
}

pub fn eval(args: EvalArgs) -> Result<f64> {
    let model = format::read_file(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let name = match args.dataset {
        Some(d) => d,
        None => infer_dataset(&model)?,
    };
    let (train_set, test_set) = load_dataset(name, &args.data_dir)?;
    let data = match args.split {
        Split::Train => train_set,
        Split::Test => test_set,
    };
    let correct = inference::count_correct(&model, &data, 500)?;
    let acc = correct as f64 / data.len() as f64;
    println!(
        "accuracy {:.2}% ({correct}/{}) on {} split, depths {}",
        100.0 * acc,
        data.len(),
        args.split,
        trainer::depth_string(&model.depths())
    );
    Ok(acc)
}

/// Regenerates final-weight histograms and the per-layer summary from a run
/// directory's checkpoint.
pub fn report(run_dir: &Path) -> Result<Vec<LayerSummary>> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = run_dir.join(name);
        if !p.is_file() {
            bail!("missing artifact {}", p.display());
        }
        Ok(p)
    };
    let cfg = RunConfig::load(&need(CONFIG_FILE)?)?;
    let model: Model<f32> = serde_json::from_slice(&fs::read(need(CHECKPOINT_FILE)?)?)
        .context("parsing checkpoint")?;
    let train_report: TrainingReport = serde_json::from_slice(&fs::read(need(REPORT_FILE)?)?)
        .context("parsing report")?;
    let depths = trainer::decide_depths(&model, cfg.train.regularizer.delta);

    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    let weight_layers = model.layers.iter().filter(|l| l.quant_state().is_some());
    for (i, (layer, depth)) in weight_layers.zip(&depths).enumerate() {
        let state = layer.quant_state().expect("weight layer");
        let kind = match layer {
            stq_core::nn::Layer::Conv2d { .. } => "conv2d",
            _ => "dense",
        };
        let hist = report::weight_histogram(state)?;
        write(&out.join(format!("layer{i}_hist.csv")), hist.to_csv())?;
        rows.push(report::summarize_layer(i, kind, state, *depth)?);
    }
    let table = report::summary_table(&rows);
    write(&out.join("summary.txt"), &table)?;
    write(&out.join("summary.csv"), report::summary_csv(&rows))?;
    write(&out.join("beta_trajectory.csv"), train_report.beta_trajectory_csv())?;
    print!("{table}");
    println!(
        "depths {}  compression ratio {:.2}  best accuracy {:.2}%",
        train_report.depth_string,
        train_report.compression_ratio,
        100.0 * train_report.best_val_accuracy
    );
    Ok(rows)
}

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Regime, RunConfig};
use super::train::{observed_tensor, stream, train, EpochReport, Generator, StepReport};
use crate::data::{
    extract_all, gen_synthetic, majority_action, read_jsonl, write_jsonl, LabelPolicy, TrajectoryRecord,
    TrajectoryWindow, Vocabulary, UNLABELED,
};
use crate::error::{Error, Result};
use crate::metrics::{predict_windows, score, silhouette_score, MetricsReport, PredictionMode};
use crate::model::{ModelConfig, TrajectoryModel};
use crate::nn::{load_checkpoint, save_checkpoint, ParamRegistry};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const MODEL_FILE: &str = "model.kv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation.txt";
pub const BETA_SWEEP_FILE: &str = "beta_sweep.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("reports always serialize"));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Records and the label vocabulary they were read with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    pub vocab: Vocabulary,
}

/// Reads the configured dataset, or generates the synthetic one. With
/// `vocab` given, labels outside it are mapped to [`UNLABELED`] instead of
/// failing, so inference runs on unlabeled data.
pub fn load_dataset(cfg: &RunConfig, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    match &cfg.data.path {
        None => {
            let (records, v) = gen_synthetic(&cfg.data.synthetic)?;
            Ok(Dataset {
                records,
                vocab: vocab.cloned().unwrap_or(v),
            })
        }
        Some(path) => {
            let (vocab, policy) = match (vocab, &cfg.data.vocab) {
                (Some(v), _) => (v.clone(), LabelPolicy::Lenient),
                (None, Some(p)) => (Vocabulary::read(p)?, LabelPolicy::Strict),
                (None, None) => (Vocabulary::infer(path)?, LabelPolicy::Strict),
            };
            let records = read_jsonl(path, &vocab, policy)?;
            if records.is_empty() {
                return Err(Error::Data(format!("{} holds no records", path.display())));
            }
            Ok(Dataset { records, vocab })
        }
    }
}

/// Which records of the split to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataPart {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for DataPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataPart::Train),
            "val" => Ok(DataPart::Val),
            "test" => Ok(DataPart::Test),
            "all" => Ok(DataPart::All),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val, test or all)"))),
        }
    }
}

pub fn windows_of(cfg: &RunConfig, records: &[TrajectoryRecord], part: DataPart) -> Result<Vec<TrajectoryWindow>> {
    let chosen = match part {
        DataPart::All => records.to_vec(),
        _ => {
            let split = cfg.data.split.apply(records, cfg.data.split_seed)?;
            match part {
                DataPart::Train => split.train,
                DataPart::Val => split.val,
                _ => split.test,
            }
        }
    };
    extract_all(&chosen, cfg.data.t_obs, cfg.data.t_pred, cfg.data.stride)
}

/// Per-class record counts, classes in vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub path: PathBuf,
    pub histogram: Vec<(String, usize)>,
}

/// Writes the synthetic dataset and its vocabulary into `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataSummary> {
    let (records, vocab) = gen_synthetic(&cfg.data.synthetic)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let path = out.join(DATASET_FILE);
    write_jsonl(&path, &records, &vocab)?;
    vocab.write(&out.join(VOCAB_FILE))?;
    let mut counts = vec![0usize; vocab.len()];
    for r in &records {
        counts[majority_action(&r.actions)] += 1;
    }
    Ok(GenDataSummary {
        path,
        histogram: vocab.labels().iter().cloned().zip(counts).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub best_epoch: usize,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
    pub train_windows: usize,
    pub val_windows: usize,
}

fn load_generator(path: &Path) -> Result<(TrajectoryModel, ParamRegistry)> {
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let cfg = read_model_config(dir)?;
    let ckpt = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let (model, mut params) = TrajectoryModel::init(cfg, 0)?;
    params.assign_from(&load_checkpoint(&ckpt)?)?;
    Ok((model, params))
}

fn read_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ModelConfig::from_kv(&text)
}

/// Trains on the train split, keeps the best validation checkpoint, and
/// writes the run directory `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg, None)?;
    let train_w = windows_of(cfg, &data.records, DataPart::Train)?;
    let val_w = windows_of(cfg, &data.records, DataPart::Val)?;
    if train_w.len() < 2 {
        return Err(Error::Data(format!(
            "the train split yields {} windows of {} frames; need at least 2",
            train_w.len(),
            cfg.data.t_obs + cfg.data.t_pred
        )));
    }
    let external = match &cfg.loss.generator_checkpoint {
        Some(p) if cfg.loss.regime == Regime::AbcPlus => {
            let gen = load_generator(p)?;
            if gen.0.config().t_obs != cfg.data.t_obs {
                return Err(Error::Config(format!(
                    "generator observes {} frames, this run {}",
                    gen.0.config().t_obs,
                    cfg.data.t_obs
                )));
            }
            Some(gen)
        }
        _ => None,
    };
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    data.vocab.write(&out.join(VOCAB_FILE))?;
    let outcome = train(
        cfg,
        &train_w,
        &val_w,
        external.as_ref().map(|(m, p)| Generator { model: m, params: p }),
        &mut |_| {},
    )?;
    write_text(&out.join(MODEL_FILE), &outcome.model.config().to_kv())?;
    save_checkpoint(&outcome.best, &out.join(CHECKPOINT_FILE))?;
    save_checkpoint(&outcome.last, &out.join(LAST_CHECKPOINT_FILE))?;
    write_lines(&out.join(TRAIN_LOG_FILE), &outcome.steps)?;
    write_lines(&out.join(EPOCH_LOG_FILE), &outcome.epochs)?;
    Ok(TrainSummary {
        out,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        epochs: outcome.epochs,
        train_windows: train_w.len(),
        val_windows: val_w.len(),
    })
}

/// A trained model read back from a run directory.
pub struct LoadedRun {
    pub model: TrajectoryModel,
    pub params: ParamRegistry,
    pub vocab: Vocabulary,
}

/// Loads `run/checkpoint.ckpt`, refusing a model config that disagrees
/// with `cfg`.
pub fn load_run(cfg: &RunConfig, run: &Path) -> Result<LoadedRun> {
    let stored = read_model_config(run)?;
    let wanted = cfg.model_config();
    let diff = stored.differences(&wanted);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint in {} does not match the config: {} (checkpoint vs config)",
            run.display(),
            diff.join(", ")
        )));
    }
    let (model, mut params) = TrajectoryModel::init(stored, 0)?;
    params.assign_from(&load_checkpoint(&run.join(CHECKPOINT_FILE))?)?;
    let vocab = Vocabulary::read(&run.join(VOCAB_FILE))?;
    Ok(LoadedRun { model, params, vocab })
}

/// Where a command reads its checkpoint and writes its outputs.
#[derive(Clone, Debug)]
pub struct InferenceArgs {
    /// Run directory written by `train`.
    pub run: PathBuf,
    pub out: PathBuf,
    pub part: DataPart,
}

impl InferenceArgs {
    pub fn for_run(cfg: &RunConfig) -> Self {
        InferenceArgs {
            run: cfg.out.clone(),
            out: cfg.out.clone(),
            part: DataPart::Test,
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Scores sampled predictions on the chosen split and writes the metrics
/// files, plus every sampled box when enabled. Never reads action labels.
pub fn cmd_eval(cfg: &RunConfig, args: &InferenceArgs) -> Result<MetricsReport> {
    let run = load_run(cfg, &args.run)?;
    let data = load_dataset(cfg, Some(&run.vocab))?;
    let windows = windows_of(cfg, &data.records, args.part)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("no {:?} windows to evaluate", args.part)));
    }
    let draws = match cfg.eval.mode {
        PredictionMode::BestOfL => cfg.eval.samples,
        PredictionMode::Single => 1,
    };
    let preds = predict_windows(
        &run.model,
        &run.params,
        &windows,
        draws,
        cfg.seed.wrapping_add(stream::EVAL),
        cfg.eval.batch_size,
    )?;
    let report = score(&windows, &preds, &cfg.eval.horizons, cfg.eval.mode)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("metrics serialize");
    write_text(&args.out.join(METRICS_JSON_FILE), &(json + "\n"))?;
    write_text(&args.out.join(METRICS_TEXT_FILE), &report.to_table())?;
    if cfg.eval.dump_predictions {
        let mut text = String::from("window_id,sample,frame,x1,y1,x2,y2\n");
        for (w, samples) in windows.iter().zip(&preds) {
            for (s, boxes) in samples.iter().enumerate() {
                for (t, b) in boxes.iter().enumerate() {
                    let _ = writeln!(
                        text,
                        "{},{s},{t},{},{},{},{}",
                        w.id,
                        fmt_f(b[0]),
                        fmt_f(b[1]),
                        fmt_f(b[2]),
                        fmt_f(b[3])
                    );
                }
            }
        }
        write_text(&args.out.join(PREDICTIONS_FILE), &text)?;
    }
    Ok(report)
}

/// Encoder embeddings of every window of the chosen split.
#[derive(Clone, Debug)]
pub struct EmbedSummary {
    pub ids: Vec<String>,
    /// Class ids as read from the dataset; [`UNLABELED`] for unknown labels.
    pub actions: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    /// Silhouette of the labeled rows grouped by action, when there are at
    /// least two classes.
    pub silhouette: Option<f64>,
}

/// Writes `embeddings.csv`: window id, dataset action label (empty when
/// unknown), then one column per embedding dimension.
pub fn cmd_embed(cfg: &RunConfig, args: &InferenceArgs) -> Result<EmbedSummary> {
    let run = load_run(cfg, &args.run)?;
    let data = load_dataset(cfg, Some(&run.vocab))?;
    let windows = windows_of(cfg, &data.records, args.part)?;
    let d = run.model.config().d_h;
    let mut embeddings = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(cfg.eval.batch_size) {
        let h = run.model.embed(&run.params, &observed_tensor(chunk)?)?;
        embeddings.extend(h.values().chunks_exact(d).map(<[f64]>::to_vec));
    }
    let mut text = String::from("window_id,action");
    for k in 0..d {
        let _ = write!(text, ",h{k}");
    }
    text.push('\n');
    for (w, e) in windows.iter().zip(&embeddings) {
        text.push_str(&w.id);
        text.push(',');
        text.push_str(run.vocab.label(w.action).unwrap_or(""));
        for v in e {
            text.push(',');
            text.push_str(&fmt_f(*v));
        }
        text.push('\n');
    }
    write_text(&args.out.join(EMBEDDINGS_FILE), &text)?;
    let actions: Vec<usize> = windows.iter().map(|w| w.action).collect();
    let labeled: Vec<usize> = (0..windows.len()).filter(|&i| actions[i] != UNLABELED).collect();
    let silhouette = silhouette_score(
        &labeled.iter().map(|&i| embeddings[i].clone()).collect::<Vec<_>>(),
        &labeled.iter().map(|&i| actions[i]).collect::<Vec<_>>(),
    );
    Ok(EmbedSummary {
        ids: windows.iter().map(|w| w.id.clone()).collect(),
        actions,
        embeddings,
        silhouette,
    })
}

/// One grid cell of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub regime: Regime,
    pub beta: f64,
    pub seed: u64,
    /// `Err` holds the failure message of a cell that did not finish.
    pub result: std::result::Result<CellResult, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub metrics: MetricsReport,
    pub single: MetricsReport,
    pub silhouette: Option<f64>,
    pub best_epoch: usize,
    /// Wall time of the whole cell; not written to any file.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub table: String,
}

/// Output directory of one ablation cell.
pub fn cell_dir(out: &Path, regime: Regime, beta: f64, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{regime}_beta{beta}_seed{seed}"))
}

fn run_cell(base: &RunConfig, regime: Regime, beta: f64, seed: u64) -> Result<CellResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.loss.regime = regime;
    cfg.loss.beta = beta;
    cfg.out = cell_dir(&base.out, regime, beta, seed);
    cfg.eval.mode = PredictionMode::BestOfL;
    let cfg = cfg.normalized()?;
    let started = std::time::Instant::now();
    let summary = cmd_train(&cfg)?;
    let args = InferenceArgs::for_run(&cfg);
    let metrics = cmd_eval(&cfg, &args)?;
    let mut single_cfg = cfg.clone();
    single_cfg.eval.mode = PredictionMode::Single;
    single_cfg.eval.dump_predictions = false;
    let single_dir = InferenceArgs {
        out: cfg.out.join("single"),
        ..args.clone()
    };
    let single = cmd_eval(&single_cfg, &single_dir)?;
    let embed = cmd_embed(&cfg, &args)?;
    Ok(CellResult {
        metrics,
        single,
        silhouette: embed.silhouette,
        best_epoch: summary.best_epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// The grid cells in run order. Regime `none` ignores beta, so it runs once
/// per seed with beta 0.
pub fn ablation_grid(betas: &[f64], regimes: &[Regime], seeds: &[u64]) -> Vec<(Regime, f64, u64)> {
    let mut cells = Vec::new();
    for &r in regimes {
        let bs: Vec<f64> = if r == Regime::None { vec![0.0] } else { betas.to_vec() };
        for &b in &bs {
            for &s in seeds {
                cells.push((r, b, s));
            }
        }
    }
    cells
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

/// Trains and evaluates every (regime, beta, seed) cell, each in its own
/// subdirectory of `base.out`, then writes the per-cell CSV, a
/// regime-by-metric table of medians over seeds, and a beta sweep CSV.
/// Failed cells are recorded and the grid continues.
pub fn cmd_ablate(base: &RunConfig, betas: &[f64], regimes: &[Regime], seeds: &[u64]) -> Result<AblationSummary> {
    use rayon::prelude::*;
    if betas.is_empty() || regimes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one beta, regime and seed".into()));
    }
    let cells = ablation_grid(betas, regimes, seeds);
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|&(regime, beta, seed)| {
            let result = run_cell(base, regime, beta, seed).map_err(|e| {
                log::warn!("cell {regime} beta {beta} seed {seed} failed: {e}");
                e.to_string()
            });
            AblationRow {
                regime,
                beta,
                seed,
                result,
            }
        })
        .collect();
    let horizons = {
        let mut hs = base.eval.horizons.clone();
        hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hs.dedup();
        hs
    };
    let names = crate::metrics::METRIC_NAMES;

    let mut csv = String::from("regime,beta,seed,status,best_epoch,silhouette");
    for h in &horizons {
        for n in names {
            let _ = write!(csv, ",{n}_{}", crate::metrics::horizon_label(*h));
        }
    }
    let last_h = *horizons.last().expect("validated non-empty");
    let _ = write!(csv, ",single_ade_sq_{}", crate::metrics::horizon_label(last_h));
    csv.push('\n');
    for r in &rows {
        let _ = write!(csv, "{},{},{}", r.regime, r.beta, r.seed);
        match &r.result {
            Ok(c) => {
                let sil = c.silhouette.map(fmt_f).unwrap_or_default();
                let _ = write!(csv, ",ok,{},{sil}", c.best_epoch);
                for h in &horizons {
                    for v in c.metrics.get(*h).expect("scored horizon").as_array() {
                        let _ = write!(csv, ",{}", fmt_f(v));
                    }
                }
                let _ = write!(csv, ",{}", fmt_f(c.single.get(last_h).expect("scored horizon").ade_sq));
            }
            Err(msg) => {
                let _ = write!(csv, ",\"failed: {}\",,", msg.replace('"', "'"));
                for _ in 0..horizons.len() * names.len() + 1 {
                    csv.push(',');
                }
            }
        }
        csv.push('\n');
    }
    write_text(&base.out.join(ABLATION_FILE), &csv)?;

    let table = ablation_table(&rows, &horizons);
    write_text(&base.out.join(ABLATION_TABLE_FILE), &table)?;

    let mut sweep = String::from("regime,beta,runs");
    for n in names {
        let _ = write!(sweep, ",{n}_{}", crate::metrics::horizon_label(last_h));
    }
    sweep.push('\n');
    let mut keys: Vec<(Regime, f64)> = rows.iter().map(|r| (r.regime, r.beta)).collect();
    keys.dedup();
    for (regime, beta) in keys {
        let ok: Vec<&CellResult> = rows
            .iter()
            .filter(|r| r.regime == regime && r.beta == beta)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        let _ = write!(sweep, "{regime},{beta},{}", ok.len());
        for k in 0..names.len() {
            let m = median(ok.iter().map(|c| c.metrics.get(last_h).unwrap().as_array()[k]).collect());
            let _ = write!(sweep, ",{}", m.map(fmt_f).unwrap_or_default());
        }
        sweep.push('\n');
    }
    write_text(&base.out.join(BETA_SWEEP_FILE), &sweep)?;
    Ok(AblationSummary { rows, table })
}

/// Regime-by-metric table of medians over seeds, one row per (regime, beta).
fn ablation_table(rows: &[AblationRow], horizons: &[f64]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<10} {:>6} {:>5}", "regime", "beta", "runs");
    for h in horizons {
        let l = crate::metrics::horizon_label(*h);
        let _ = write!(s, " {:>12} {:>12}", format!("ADE@{l}"), format!("C-FDE@{l}"));
    }
    let _ = writeln!(s, " {:>10}", "silhouette");
    let mut keys: Vec<(Regime, f64)> = rows.iter().map(|r| (r.regime, r.beta)).collect();
    keys.dedup();
    for (regime, beta) in keys {
        let ok: Vec<&CellResult> = rows
            .iter()
            .filter(|r| r.regime == regime && r.beta == beta)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        let _ = write!(s, "{:<10} {:>6} {:>5}", regime.name(), beta, ok.len());
        for h in horizons {
            let ade = median(ok.iter().map(|c| c.metrics.get(*h).unwrap().ade_sq).collect());
            let cfde = median(ok.iter().map(|c| c.metrics.get(*h).unwrap().c_fde_sq).collect());
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            let _ = write!(s, " {:>12} {:>12}", cell(ade), cell(cfde));
        }
        let sil = median(ok.iter().filter_map(|c| c.silhouette).collect());
        let _ = writeln!(s, " {:>10}", sil.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()));
    }
    s
}

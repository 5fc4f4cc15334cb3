use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use tprnn::baselines::{LinearMap, SeasonalNaive};
use tprnn::data::{gen_synthetic, load_csv, save_csv, write_csv, Scaler, SeriesDataset, Split};
use tprnn::model::{
    export_predictor_weights, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Model,
    ModelConfig, Variant,
};
use tprnn::training::{
    evaluate, fit, EpochRecord, ForecastReport, Forecaster, TrainState, Trainable,
};
use tprnn::{Error, Result};

use crate::config::RunConfig;
use crate::staging::Staging;

pub const CHECKPOINT_STEM: &str = "model";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT: &str = "report.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row boundaries, channel names and scaler of a prepared dataset.
pub fn dataset_meta(cfg: &RunConfig, ds: &SeriesDataset) -> Value {
    let splits = ds.splits().map(|s| {
        json!({
            "train": [s.train.start, s.train.end],
            "val": [s.val.start, s.val.end],
            "test": [s.test.start, s.test.end],
        })
    });
    json!({
        "source": cfg.source(),
        "rows": ds.len(),
        "channels": ds.channel_names(),
        "ratios": cfg.data.ratios,
        "splits": splits,
        "scaler": ds.scaler(),
    })
}

fn has_rows(ds: &SeriesDataset, split: Split) -> bool {
    ds.splits().is_some_and(|s| !s.range(split).is_empty())
}

/// Result of one training job.
pub struct Trained<M> {
    pub model: M,
    pub state: TrainState,
    pub val: ForecastReport,
    pub test: Option<ForecastReport>,
    pub seconds: f64,
}

impl<M> Trained<M> {
    pub fn summary(&self) -> Value {
        json!({
            "epochs": self.state.epoch,
            "best_epoch": self.state.best_epoch(),
            "best_val_loss": self.state.best_val_loss(),
            "seconds": self.seconds,
        })
    }
}

/// Fits `model`, then scores val and test with the weights rounded to the
/// checkpoint precision so reported numbers match a reloaded model.
pub fn train_and_score<M, E>(
    mut model: M,
    cfg: &RunConfig,
    ds: &SeriesDataset,
    on_epoch: E,
) -> Result<Trained<M>>
where
    M: Trainable + Sync,
    E: FnMut(&EpochRecord) -> Result<()>,
{
    let start = Instant::now();
    let state = fit(&mut model, ds, &cfg.train, on_epoch)?;
    model.params_mut().round_to_f32();
    let val = evaluate(&model, ds, Split::Val)?;
    let test = if has_rows(ds, Split::Test) {
        Some(evaluate(&model, ds, Split::Test)?)
    } else {
        None
    };
    Ok(Trained {
        model,
        state,
        val,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// JSONL sink for epoch records, echoing progress to stderr when asked.
struct EpochLog {
    out: BufWriter<File>,
    path: PathBuf,
    label: String,
    verbose: bool,
}

impl EpochLog {
    fn create(path: PathBuf, label: impl Into<String>, verbose: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        let file = File::create(&path).map_err(io(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
            label: label.into(),
            verbose,
        })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(io(&self.path))?;
        if self.verbose {
            eprintln!(
                "[{}] epoch {:>3}  train {:.5}  val {:.5}  {:.1}s",
                self.label, r.epoch, r.train_loss, r.val_loss, r.elapsed_s
            );
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io(&self.path))
    }
}

fn train_variant(
    cfg: &RunConfig,
    ds: &SeriesDataset,
    mcfg: ModelConfig,
    log_path: PathBuf,
    verbose: bool,
) -> Result<Trained<Model>> {
    let mut log = EpochLog::create(log_path, mcfg.variant.name(), verbose)?;
    let model = Model::new(mcfg)?;
    let trained = train_and_score(model, cfg, ds, |r| log.record(r))?;
    log.finish()?;
    Ok(trained)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(cfg: &RunConfig, verbose: bool) -> Result<Vec<PathBuf>> {
    let ds = cfg.dataset()?;
    let mcfg = cfg.model_config(ds.num_channels());
    mcfg.validate()?;

    let mut staging = Staging::new(&cfg.out)?;
    let log_path = staging.path(TRAIN_LOG);
    let trained = train_variant(cfg, &ds, mcfg, log_path, verbose)?;
    let model = &trained.model;

    let checkpoint_meta = json!({
        "scaler": ds.scaler(),
        "training": trained.summary(),
        "val": trained.val.normalized,
        "test": trained.test.as_ref().map(|r| r.normalized),
    });
    staging.path(&format!("{CHECKPOINT_STEM}.manifest.json"));
    staging.path(&format!("{CHECKPOINT_STEM}.params.bin"));
    save_checkpoint(
        model,
        &staging.dir().join(CHECKPOINT_STEM),
        Some(checkpoint_meta),
    )?;

    let report = json!({
        "command": "train",
        "variant": model.config().variant,
        "config": cfg,
        "model": model.config(),
        "param_count": model.param_count(),
        "dataset": dataset_meta(cfg, &ds),
        "training": trained.summary(),
        "stopped_early": trained.state.stopped_early(&cfg.train),
        "val": trained.val,
        "test": trained.test,
    });
    staging.write_json(REPORT, &report)?;
    staging.commit()
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
) -> Result<(Vec<PathBuf>, ForecastReport)> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let mc = model.config();
    let ds = cfg.dataset_for(mc.input_len, mc.horizon)?;
    model.ensure_channels(ds.num_channels())?;
    let report = evaluate(&model, &ds, split)?;

    let mut staging = Staging::new(&cfg.out)?;
    staging.write_json(
        &format!("eval_{split}.json"),
        &json!({
            "command": "evaluate",
            "checkpoint": checkpoint,
            "variant": manifest.config.variant,
            "config": cfg,
            "model": manifest.config,
            "dataset": dataset_meta(cfg, &ds),
            "report": report,
        }),
    )?;
    Ok((staging.commit()?, report))
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

/// Forecasts the `H` steps after the last `T` rows of `input`, in raw units.
pub fn forecast(checkpoint: &Path, input: &Path, output: &Path) -> Result<SeriesDataset> {
    let history = load_csv(input)?;
    let (model, manifest) = load_checkpoint_expecting(checkpoint, history.num_channels())?;
    let (t, h) = (model.input_len(), model.horizon());
    if history.len() < t {
        return Err(Error::Data(format!(
            "insufficient history: the model needs {t} rows but {} has {}",
            input.display(),
            history.len()
        )));
    }
    let scaler: Option<Scaler> = manifest
        .metrics
        .as_ref()
        .and_then(|m| m.get("scaler"))
        .filter(|v| !v.is_null())
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| Error::Data(format!("checkpoint scaler is malformed: {e}")))?;

    let mut x = history.slice(history.len() - t..history.len())?;
    if let Some(sc) = &scaler {
        x = sc.normalize(&x);
    }
    let mut y = model.forecast(&x)?;
    if let Some(sc) = &scaler {
        y = sc.denormalize(&y);
    }
    let steps = (1..=h).map(|k| format!("t+{k}")).collect();
    let out = SeriesDataset::new(
        history.channel_names().to_vec(),
        Some(steps),
        y.values().to_vec(),
    )?;

    let tmp = output.with_extension("csv.partial");
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let file = File::create(&tmp).map_err(io(&tmp))?;
    let written = write_csv(&out, BufWriter::new(file));
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, output).map_err(io(output))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub status: String,
    pub param_count: Option<usize>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineRow {
    pub model: String,
    pub mse: f64,
    pub mae: f64,
}

pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub baselines: Vec<BaselineRow>,
    pub artifacts: Vec<PathBuf>,
}

fn test_report(t: &Option<ForecastReport>) -> Result<&ForecastReport> {
    t.as_ref()
        .ok_or_else(|| Error::Config("comparisons need a non-empty test split".into()))
}

/// Trains every structural variant under the same seed and split, plus the
/// seasonal-repeat and linear-map baselines.
pub fn ablate(cfg: &RunConfig, season: usize, verbose: bool) -> Result<Ablation> {
    let ds = cfg.dataset()?;
    if !has_rows(&ds, Split::Test) {
        return Err(Error::Config(
            "ablation needs a non-empty test split".into(),
        ));
    }
    let mut staging = Staging::new(&cfg.out)?;

    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mcfg = ModelConfig {
            variant,
            ..cfg.model_config(ds.num_channels())
        };
        let outcome = mcfg
            .validate()
            .and_then(|_| {
                let log = staging.path(&format!("logs/{}.jsonl", variant.name()));
                train_variant(cfg, &ds, mcfg, log, verbose)
            })
            .and_then(|t| Ok((test_report(&t.test)?.normalized, t)));
        rows.push(match outcome {
            Ok((m, t)) => AblationRow {
                variant,
                mse: Some(m.mse),
                mae: Some(m.mae),
                status: "ok".into(),
                param_count: Some(t.model.param_count()),
                best_epoch: Some(t.state.best_epoch()),
                epochs: Some(t.state.epoch),
            },
            Err(e) => AblationRow {
                variant,
                mse: None,
                mae: None,
                status: format!("failed: {e}"),
                param_count: None,
                best_epoch: None,
                epochs: None,
            },
        });
    }

    let (t, h) = (cfg.model.input_len, cfg.model.horizon);
    let mut baselines = Vec::new();
    let naive = evaluate(&SeasonalNaive::new(t, h, season)?, &ds, Split::Test)?;
    baselines.push(BaselineRow {
        model: format!("seasonal_naive_{season}"),
        mse: naive.mse(),
        mae: naive.mae(),
    });
    let mut log = EpochLog::create(staging.path("logs/linear.jsonl"), "linear", verbose)?;
    let linear = train_and_score(LinearMap::new(t, h, cfg.seed)?, cfg, &ds, |r| log.record(r))?;
    log.finish()?;
    let lt = test_report(&linear.test)?;
    baselines.push(BaselineRow {
        model: "linear".into(),
        mse: lt.mse(),
        mae: lt.mae(),
    });

    let mut table = csv::Writer::from_writer(Vec::new());
    table
        .write_record(["variant", "mse", "mae", "status"])
        .map_err(csv_err)?;
    for r in &rows {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        table
            .write_record([
                r.variant.name().to_owned(),
                num(r.mse),
                num(r.mae),
                r.status.clone(),
            ])
            .map_err(csv_err)?;
    }
    staging.write(
        "ablation.csv",
        &table.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    staging.write("baselines.csv", &csv_bytes(&baselines)?)?;
    staging.write_json(
        "ablation.json",
        &json!({
            "command": "ablate",
            "seed": cfg.seed,
            "config": cfg,
            "dataset": dataset_meta(cfg, &ds),
            "rows": rows,
            "baselines": baselines,
        }),
    )?;
    let artifacts = staging.commit()?;
    Ok(Ablation {
        rows,
        baselines,
        artifacts,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv write failed: {e}"))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub global_len: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSkip {
    pub global_len: usize,
    pub reason: String,
}

pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SweepSkip>,
    pub artifacts: Vec<PathBuf>,
}

/// Trains once per global-information length; values are deduplicated and
/// visited in ascending order, and invalid ones are skipped with a reason.
pub fn sweep(cfg: &RunConfig, verbose: bool) -> Result<Sweep> {
    let ds = cfg.dataset()?;
    if !has_rows(&ds, Split::Test) {
        return Err(Error::Config("sweep needs a non-empty test split".into()));
    }
    let values: BTreeSet<usize> = cfg.sweep.values.iter().copied().collect();
    let mut staging = Staging::new(&cfg.out)?;
    let (mut rows, mut skipped) = (Vec::new(), Vec::new());
    for global_len in values {
        let mcfg = ModelConfig {
            global_len,
            ..cfg.model_config(ds.num_channels())
        };
        if let Err(e) = mcfg.validate() {
            skipped.push(SweepSkip {
                global_len,
                reason: e.to_string(),
            });
            continue;
        }
        let log = staging.path(&format!("logs/global_len_{global_len}.jsonl"));
        match train_variant(cfg, &ds, mcfg, log, verbose)
            .and_then(|t| Ok(test_report(&t.test)?.normalized))
        {
            Ok(m) => rows.push(SweepRow {
                global_len,
                mse: m.mse,
                mae: m.mae,
            }),
            Err(e) => skipped.push(SweepSkip {
                global_len,
                reason: format!("training failed: {e}"),
            }),
        }
    }
    staging.write("sweep.csv", &csv_bytes(&rows)?)?;
    staging.write_json(
        "sweep.json",
        &json!({
            "command": "sweep",
            "param": "global_len",
            "config": cfg,
            "dataset": dataset_meta(cfg, &ds),
            "rows": rows,
            "skipped": skipped,
        }),
    )?;
    let artifacts = staging.commit()?;
    Ok(Sweep {
        rows,
        skipped,
        artifacts,
    })
}

// ---------------------------------------------------------------------------
// synth and export-weights
// ---------------------------------------------------------------------------

pub fn synth(cfg: &RunConfig, output: &Path) -> Result<SeriesDataset> {
    let ds = gen_synthetic(&cfg.synthetic_spec())?;
    let tmp = output.with_extension("csv.partial");
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    save_csv(&ds, &tmp)?;
    std::fs::rename(&tmp, output).map_err(io(output))?;
    Ok(ds)
}

pub fn export_weights(checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let export = export_predictor_weights(&model);
    let mut staging = Staging::new(out)?;
    staging.write("predictor_weights.csv", &csv_bytes(&export.weights)?)?;
    staging.write("predictor_marginal.csv", &csv_bytes(&export.marginal)?)?;
    staging.commit()
}

//! The subcommands as library functions; `main` only parses flags.

use std::path::{Path, PathBuf};

use log::info;
use seco::networks::SeCoModel;
use seco::online_matching::{self, iteration_sweep, summarize, SweepRow, SweepSummary};
use seco::pipeline::{self, SpectrogramConfig};
use seco::synthdata::{self, build_test_set, Dataset, DatasetManifest};
use seco::trainer::{self, LogRow, CHECKPOINT_FILE};
use seco::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, RunConfig};

pub const PAIRS_FILE: &str = "pairs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot.json";
pub const REPORT_FILE: &str = "report.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Renders the synthetic dataset into `out_dir`.
pub fn gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let out = cfg.out_dir()?;
    let ds = synthdata::generate(&cfg.synth)?;
    ds.save(out)?;
    cfg.write_resolved()?;
    info!(
        "{} clips in {} train / {} test categories written to {}",
        ds.manifest.clips.len(),
        ds.manifest.train_categories.len(),
        ds.manifest.test_categories.len(),
        out.display()
    );
    Ok(ds.manifest)
}

/// Trains from scratch (or resumes an interrupted run in the same output
/// directory) and leaves `model.ckpt` and `train_log.csv` there.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let data = Dataset::load(cfg.data_dir()?)?;
    if data.manifest.config.sample_rate_hz == 0 {
        return Err(Error::Dataset("dataset has no sample rate".into()));
    }
    cfg.write_resolved()?;
    let model = SeCoModel::new(&cfg.model, cfg.train.seed)?;
    trainer::train(model, cfg.train.clone(), cfg.spectrogram.clone(), &data, out)?;
    Ok(out.join(CHECKPOINT_FILE))
}

/// Loads the checkpoint and reconciles it with the configuration: model and
/// spectrogram settings come from the checkpoint, and a config file that
/// states different ones is an error.
fn load_checkpoint(cfg: &mut RunConfig, loaded: &LoadedConfig) -> Result<SeCoModel> {
    let (model, ck) = trainer::load_model(cfg.model_path()?)?;
    let spec: SpectrogramConfig = serde_json::from_value(ck.meta["spectrogram"].clone())
        .map_err(|e| Error::Checkpoint(format!("spectrogram settings: {e}")))?;
    if loaded.is_explicit("model") && &cfg.model != model.config() {
        return Err(Error::Checkpoint("model section of the config differs from the checkpoint".into()));
    }
    if loaded.is_explicit("spectrogram") && cfg.spectrogram != spec {
        return Err(Error::Checkpoint("spectrogram section of the config differs from the checkpoint".into()));
    }
    cfg.model = model.config().clone();
    cfg.spectrogram = spec;
    Ok(model)
}

/// Scores the test pairs after each step count in `iters`, on
/// `cfg.eval.jobs` threads. Output does not depend on the thread count.
pub fn sweep_rows(cfg: &RunConfig, model: &SeCoModel, data: &Dataset, iters: &[usize]) -> Result<Vec<SweepRow>> {
    if iters.is_empty() {
        return Err(Error::InvalidArgument("no iteration counts given".into()));
    }
    cfg.online_matching.validate()?;
    let features = pipeline::dataset_features(data, &cfg.spectrogram, &model.net)?;
    let pairs = build_test_set(&data.manifest, cfg.eval.test_pairs, cfg.eval.test_seed)?;
    let jobs = cfg.eval.jobs.clamp(1, pairs.len().max(1));
    let chunk = pairs.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<SweepRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                let mut m = model.clone();
                let features = &features;
                s.spawn(move || {
                    iteration_sweep(
                        &mut m,
                        &cfg.online_matching,
                        data,
                        features,
                        part,
                        &cfg.spectrogram,
                        iters,
                        cfg.eval.filter_len,
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker panicked".into()))))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn write_plot(path: &Path, plots: &[Plot]) -> Result<()> {
    let text = serde_json::to_string_pretty(plots)?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn metric_plot(title: &str, summary: &[SweepSummary]) -> Plot {
    let x: Vec<f64> = summary.iter().map(|s| s.iterations as f64).collect();
    let series = [
        ("SDR", summary.iter().map(|s| s.sdr).collect()),
        ("SIR", summary.iter().map(|s| s.sir).collect()),
        ("SAR", summary.iter().map(|s| s.sar).collect()),
    ]
    .into_iter()
    .map(|(name, y)| Series {
        name: name.into(),
        x: x.clone(),
        y,
    })
    .collect();
    Plot {
        title: title.into(),
        x_label: "online matching iterations".into(),
        y_label: "dB".into(),
        series,
    }
}

/// Shared body of `eval`, `online-match` and `sweep`.
pub fn score(cfg: &mut RunConfig, loaded: &LoadedConfig, iters: &[usize]) -> Result<Vec<SweepSummary>> {
    let model = load_checkpoint(cfg, loaded)?;
    let data = Dataset::load(cfg.data_dir()?)?;
    cfg.write_resolved()?;
    let out = cfg.out_dir()?.to_path_buf();
    let rows = sweep_rows(cfg, &model, &data, iters)?;
    let summary = summarize(&rows);
    online_matching::write_csv(&out.join(PAIRS_FILE), &rows)?;
    online_matching::write_csv(&out.join(SUMMARY_FILE), &summary)?;
    write_plot(&out.join(PLOT_FILE), &[metric_plot("separation quality", &summary)])?;
    for s in &summary {
        info!(
            "T={}: SDR {:.3} SIR {:.3} SAR {:.3} dB over {} pairs",
            s.iterations, s.sdr, s.sir, s.sar, s.pairs
        );
    }
    Ok(summary)
}

/// Plain evaluation of the trained model.
pub fn eval(cfg: &mut RunConfig, loaded: &LoadedConfig) -> Result<Vec<SweepSummary>> {
    score(cfg, loaded, &[0])
}

/// Scores before (T=0) and after adaptation with the configured T.
pub fn online_match(cfg: &mut RunConfig, loaded: &LoadedConfig) -> Result<Vec<SweepSummary>> {
    let t = cfg.online_matching.iterations;
    let iters: Vec<usize> = if t == 0 { vec![0] } else { vec![0, t] };
    score(cfg, loaded, &iters)
}

pub fn sweep(cfg: &mut RunConfig, loaded: &LoadedConfig) -> Result<Vec<SweepSummary>> {
    let iters = cfg.eval.om_iters.clone();
    score(cfg, loaded, &iters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub iterations: usize,
    pub pairs: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Collects the summaries and training logs of several run directories
/// into one CSV table and one plot-data file.
pub fn report(cfg: &RunConfig, runs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    let out = cfg.out_dir()?.to_path_buf();
    cfg.write_resolved()?;
    let mut rows = Vec::new();
    let mut sdr_plot = Plot {
        title: "SDR by online matching iterations".into(),
        x_label: "online matching iterations".into(),
        y_label: "SDR (dB)".into(),
        series: Vec::new(),
    };
    let mut loss_plot = Plot {
        title: "training loss".into(),
        x_label: "iteration".into(),
        y_label: "loss".into(),
        series: Vec::new(),
    };
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let summary_path = dir.join(SUMMARY_FILE);
        let log_path = dir.join(trainer::LOG_FILE);
        if !summary_path.exists() && !log_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} has neither {SUMMARY_FILE} nor {}",
                dir.display(),
                trainer::LOG_FILE
            )));
        }
        if summary_path.exists() {
            let summary: Vec<SweepSummary> = read_csv(&summary_path)?;
            sdr_plot.series.push(Series {
                name: name.clone(),
                x: summary.iter().map(|s| s.iterations as f64).collect(),
                y: summary.iter().map(|s| s.sdr).collect(),
            });
            rows.extend(summary.into_iter().map(|s| ReportRow {
                run: name.clone(),
                iterations: s.iterations,
                pairs: s.pairs,
                sdr: s.sdr,
                sir: s.sir,
                sar: s.sar,
            }));
        }
        if log_path.exists() {
            let log: Vec<LogRow> = read_csv(&log_path)?;
            let x: Vec<f64> = log.iter().map(|r| r.iter as f64).collect();
            for (label, y) in [
                ("l_mask", log.iter().map(|r| r.l_mask).collect::<Vec<_>>()),
                ("l_cs", log.iter().map(|r| r.l_cs).collect()),
                ("l_total", log.iter().map(|r| r.l_total).collect()),
            ] {
                loss_plot.series.push(Series {
                    name: format!("{name}/{label}"),
                    x: x.clone(),
                    y,
                });
            }
        }
    }
    online_matching::write_csv(&out.join(REPORT_FILE), &rows)?;
    write_plot(&out.join(PLOT_FILE), &[sdr_plot, loss_plot])?;
    Ok(rows)
}

/// Process exit status for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

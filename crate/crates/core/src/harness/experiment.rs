//! Training runs, evaluation, sweeps and cross-run reports on disk.
//!
//! A run directory holds `config.toml`, `train_log.csv`, `metrics.json`,
//! `loss_curve.svg`, the `checkpoint` bundle and `timing.json`. Everything but
//! the timing file is a pure function of the config and the data.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{detector_topology, head_topology, BackboneTopology, CostReport, Convention, PyramidDims};
use crate::detection::{evaluate, LogRow, Sample, TrainingSet};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::read_dataset;
use crate::harness::plot::{line_chart, moving_average, Series};
use crate::harness::synth::generate_splits;
use crate::model::Detector;
use crate::nn::ParamStore;
use crate::pyramid::LEVELS;

pub const ARTIFACTS_ENV: &str = "TSCODE_ARTIFACTS";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "loss_curve.svg";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const TIMING_FILE: &str = "timing.json";
pub const LOG_HEADER: &str = "step,lr,loss_cls,loss_loc,loss_ctr,total";

/// `$TSCODE_ARTIFACTS`, or `./artifacts`.
pub fn artifacts_root() -> PathBuf {
    std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("artifacts"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub label: String,
    pub head: String,
    pub seed: u64,
    pub steps: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<f64>,
    /// Mean classification loss over the last tenth of training.
    pub final_loss_cls: f64,
    /// Per image at the training resolution.
    pub head_macs: u64,
    pub head_params: u64,
    pub detector_macs: u64,
    pub detector_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

pub fn log_line(r: &LogRow) -> String {
    format!("{},{},{},{},{},{}", r.step, r.lr, r.loss_cls, r.loss_loc, r.loss_ctr, r.total)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("{}: bad row {l:?}", path.display()));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: v(1)?,
                loss_cls: v(2)?,
                loss_loc: v(3)?,
                loss_ctr: v(4)?,
                total: v(5)?,
            })
        })
        .collect()
}

/// Mean of the last `max(1, n/10)` values.
pub fn tail_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let k = (values.len() / 10).max(1);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// Train and val splits: read from `data_dir` when given, else generated
/// from the config and seed.
pub fn load_data(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, val) = match data_dir {
        Some(d) => read_dataset(d, cfg.data.num_classes)?,
        None => generate_splits(&cfg.data, cfg.seed)?,
    };
    let s = cfg.data.image_size;
    if let Some(bad) = train.iter().chain(&val).find(|x| x.image.shape().h != s || x.image.shape().w != s) {
        return Err(Error::Config(format!("dataset image is {}, config expects {s}x{s}", bad.image.shape())));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("dataset has an empty split".into()));
    }
    Ok((train, val))
}

/// Head and whole-detector cost for one image at the configured resolution.
pub fn model_costs(cfg: &ExperimentConfig) -> Result<(CostReport, CostReport)> {
    let s = cfg.data.image_size;
    let variant = cfg.head_variant()?;
    let conv = Convention::new(s, s);
    let head = CostReport::from_layers(&head_topology(&variant, cfg.model.fpn_width, &PyramidDims::for_input(s, s), &LEVELS)?, conv)?;
    let topo = BackboneTopology::Toy(cfg.model.clone());
    let det = CostReport::from_layers(&detector_topology(&topo, cfg.model.fpn_width, &variant, s, s)?, conv)?;
    Ok((head, det))
}

fn loss_svg(series: &[(String, Vec<LogRow>)]) -> String {
    let s: Vec<Series> = series
        .iter()
        .map(|(label, rows)| {
            let window = (rows.len() / 50).max(1);
            let cls: Vec<f64> = rows.iter().map(|r| r.loss_cls).collect();
            Series {
                label: label.clone(),
                points: rows.iter().zip(moving_average(&cls, window)).map(|(r, v)| (r.step as f64, v)).collect(),
            }
        })
        .collect();
    line_chart("classification loss (moving average)", "step", "focal loss", &s)
}

/// Trains, evaluates and writes every artifact under `out`. On divergence
/// the log written so far stays on disk and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let (train, val) = load_data(cfg, data_dir)?;
    let set = TrainingSet::new(train, cfg.data.num_classes)?;
    let detector = Detector::new(&cfg.model_config()?)?;
    let mut params = detector.init_params(cfg.seed);

    let mut log = BufWriter::new(fs::File::create(out.join(LOG_FILE))?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_err = None;
    let result = crate::detection::train(&detector, &mut params, &set, &cfg.train_config(), &cfg.loss, cfg.seed, |r| {
        if let Err(e) = writeln!(log, "{}", log_line(r)) {
            io_err.get_or_insert(e);
        }
    });
    log.flush()?;
    drop(log);
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let rows = result?;
    log::info!("{}: trained {} steps", cfg.label(), rows.len());

    params.save(out.join(CHECKPOINT_STEM))?;
    let ap = evaluate(&detector, &params, &val, &cfg.eval)?;
    let (head_cost, det_cost) = model_costs(cfg)?;
    let metrics = RunMetrics {
        label: cfg.label(),
        head: cfg.head_variant()?.label(),
        seed: cfg.seed,
        steps: rows.len(),
        ap: ap.ap,
        ap50: ap.ap50,
        ap75: ap.ap75,
        per_threshold: ap.per_threshold.clone(),
        final_loss_cls: tail_mean(&rows.iter().map(|r| r.loss_cls).collect::<Vec<_>>()),
        head_macs: head_cost.total_macs,
        head_params: head_cost.total_params,
        detector_macs: det_cost.total_macs,
        detector_params: det_cost.total_params,
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    fs::write(out.join(CURVE_FILE), loss_svg(&[(metrics.label.clone(), rows)]))?;
    let timing = Timing { wall_time_s: start.elapsed().as_secs_f64() };
    fs::write(out.join(TIMING_FILE), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(metrics)
}

pub fn read_metrics(run_dir: &Path) -> Result<RunMetrics> {
    Ok(serde_json::from_str(&fs::read_to_string(run_dir.join(METRICS_FILE))?)?)
}

/// Reloads a run's config and checkpoint and re-scores the validation split.
/// Returns the stored and the recomputed metrics.
pub fn eval_run(run_dir: &Path, data_dir: Option<&Path>) -> Result<(RunMetrics, RunMetrics)> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE), &[])?;
    let stored = read_metrics(run_dir)?;
    let detector = Detector::new(&cfg.model_config()?)?;
    let params = ParamStore::load(run_dir.join(CHECKPOINT_STEM))?;
    detector.check_params(&params)?;
    let (_, val) = load_data(&cfg, data_dir)?;
    let ap = evaluate(&detector, &params, &val, &cfg.eval)?;
    let fresh = RunMetrics { ap: ap.ap, ap50: ap.ap50, ap75: ap.ap75, per_threshold: ap.per_threshold, ..stored.clone() };
    Ok((stored, fresh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub metrics: RunMetrics,
}

fn dir_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// One run per value of `key` under `out/<key>=<value>`, plus `sweep.csv`.
pub fn sweep(base: &ExperimentConfig, key: &str, values: &[String], data_dir: Option<&Path>, out: &Path) -> Result<Vec<SweepRow>> {
    let base_text = base.to_toml()?;
    let cfgs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| ExperimentConfig::parse(&base_text, &[(key.to_string(), v.clone())]))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&cfgs) {
        let dir = out.join(dir_name(&format!("{key}={v}")));
        let metrics = run_experiment(cfg, data_dir, &dir)?;
        rows.push(SweepRow { setting: v.clone(), metrics });
    }
    let mut csv = String::from("setting,ap,ap50,ap75,final_loss_cls,head_macs,head_params\n");
    for r in &rows {
        let m = &r.metrics;
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", csv_field(&r.setting), m.ap, m.ap50, m.ap75, m.final_loss_cls, m.head_macs, m.head_params);
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    /// `None` when the run directory has no metrics.
    pub metrics: Option<RunMetrics>,
    pub wall_time_s: Option<f64>,
}

/// Comparison table and overlaid loss curves for `(variant, run_dir)` pairs.
/// Writes `comparison.csv` and `loss_curves.svg` to `out`.
pub fn report(runs: &[(String, PathBuf)], out: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (variant, dir) in runs {
        let metrics = read_metrics(dir).ok();
        let wall = fs::read_to_string(dir.join(TIMING_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<Timing>(&t).ok())
            .map(|t| t.wall_time_s);
        if metrics.is_some() {
            if let Ok(log) = read_log(&dir.join(LOG_FILE)) {
                curves.push((variant.clone(), log));
            }
        }
        rows.push(ReportRow { variant: variant.clone(), metrics, wall_time_s: wall });
    }
    let mut csv = String::from("variant,status,ap,ap50,ap75,head_macs,head_params,wall_time_s\n");
    for r in &rows {
        let v = csv_field(&r.variant);
        match &r.metrics {
            Some(m) => {
                let wall = r.wall_time_s.map(|w| format!("{w:.1}")).unwrap_or_default();
                let _ = writeln!(csv, "{v},ok,{},{},{},{},{},{wall}", m.ap, m.ap50, m.ap75, m.head_macs, m.head_params);
            }
            None => {
                let _ = writeln!(csv, "{v},absent,,,,,,");
            }
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), csv)?;
    fs::write(out.join("loss_curves.svg"), loss_svg(&curves))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::DataConfig;
    use crate::pyramid::BackboneConfig;

    fn tiny() -> ExperimentConfig {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let mut cfg = ExperimentConfig::parse(
            "",
            &[
                o("optim.steps", "3"),
                o("optim.batch_size", "2"),
                o("head.cls_tower", "{ depth = 1, width = 8 }"),
                o("head.loc_tower", "{ depth = 1, width = 8 }"),
            ],
        )
        .unwrap();
        cfg.data = DataConfig { train_images: 4, val_images: 2, ..DataConfig::default() };
        cfg.model = BackboneConfig { widths: [8, 8, 16, 16], fpn_width: 8, blocks_per_stage: 1 };
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn run_writes_artifacts_and_eval_reproduces() {
        let d = tempfile::tempdir().unwrap();
        let run = d.path().join("run");
        let m = run_experiment(&tiny(), None, &run).unwrap();
        for f in [CONFIG_FILE, LOG_FILE, METRICS_FILE, CURVE_FILE, TIMING_FILE, "checkpoint.t4dp", "checkpoint.manifest"] {
            assert!(run.join(f).exists(), "{f}");
        }
        let log = read_log(&run.join(LOG_FILE)).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(read_metrics(&run).unwrap(), m);
        let (stored, fresh) = eval_run(&run, None).unwrap();
        assert_eq!(stored, fresh);
    }

    #[test]
    fn divergence_keeps_partial_log() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.optim.lr = 1e12;
        cfg.optim.grad_clip = 0.0;
        cfg.optim.steps = 6;
        let err = run_experiment(&cfg, None, d.path()).unwrap_err();
        let Error::Divergence { step, .. } = err else { panic!("{err}") };
        let log = read_log(&d.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.len(), step - 1);
        assert!(!d.path().join(METRICS_FILE).exists());
    }

    #[test]
    fn report_marks_missing_runs() {
        let d = tempfile::tempdir().unwrap();
        let run = d.path().join("a");
        run_experiment(&tiny(), None, &run).unwrap();
        let rows = report(&[("a".into(), run), ("b".into(), d.path().join("missing"))], d.path()).unwrap();
        assert!(rows[0].metrics.is_some());
        assert!(rows[1].metrics.is_none());
        let csv = fs::read_to_string(d.path().join("comparison.csv")).unwrap();
        assert!(csv.lines().nth(2).unwrap().starts_with("b,absent"));
        let svg = fs::read_to_string(d.path().join("loss_curves.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn tail_mean_uses_last_tenth() {
        let v: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(tail_mean(&v), 18.5);
        assert_eq!(tail_mean(&[3.0]), 3.0);
    }

    #[test]
    fn log_rows_roundtrip() {
        let r = LogRow { step: 7, lr: 0.01, loss_cls: 0.1 + 0.2, loss_loc: 1e-17, loss_ctr: 0.5, total: 2.0 / 3.0 };
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("log.csv");
        fs::write(&p, format!("{LOG_HEADER}\n{}\n", log_line(&r))).unwrap();
        assert_eq!(read_log(&p).unwrap(), vec![r]);
    }
}

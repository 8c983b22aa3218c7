use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use agt_core::checkpoint::Checkpoint;
use agt_core::data::{load_dataset, save_dataset, synthesize_dataset, VideoRecord};
use agt_core::diagnostics::check_all;
use agt_core::eval::{
    bin_errors, detect, evaluate, ground_truth, segmentation_error_analysis, Detection, EvalReport,
};
use agt_core::model::ActivityGraphTransformer;
use agt_core::train::Trainer;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.agt";

fn load_records(
    cfg: &RunConfig,
    explicit: Option<&Path>,
    fallbacks: &[&Option<PathBuf>],
) -> Result<Vec<VideoRecord>, CliError> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| fallbacks.iter().find_map(|p| (*p).clone()));
    let records = match path {
        Some(p) => load_dataset(&p).map_err(CliError::at(&p))?,
        None => synthesize_dataset(&cfg.data)?,
    };
    if let Some(r) = records
        .iter()
        .find(|r| r.features.cols() != cfg.model.input_dim)
    {
        return Err(CliError::Validation(format!(
            "record `{}` has {}-wide features, model expects {}",
            r.id,
            r.features.cols(),
            cfg.model.input_dim
        )));
    }
    Ok(records)
}

fn load_model(path: &Path) -> Result<ActivityGraphTransformer, CliError> {
    let ckpt = Checkpoint::load(path).map_err(CliError::at(path))?;
    Ok(ckpt.to_model()?)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.paths.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn print_csv<T: Serialize>(rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CorpusStats {
    videos: usize,
    instances: usize,
    /// Fraction of instances overlapping another instance of the same video.
    overlap_fraction: f64,
}

fn corpus_stats(records: &[VideoRecord]) -> CorpusStats {
    let mut instances = 0;
    let mut overlapping = 0;
    for r in records {
        let a = &r.annotations;
        instances += a.len();
        overlapping += (0..a.len())
            .filter(|&i| {
                (0..a.len()).any(|j| j != i && a[i].start < a[j].end && a[j].start < a[i].end)
            })
            .count();
    }
    CorpusStats {
        videos: records.len(),
        instances,
        overlap_fraction: if instances == 0 {
            0.0
        } else {
            overlapping as f64 / instances as f64
        },
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let records = synthesize_dataset(&cfg.data)?;
    save_dataset(&records, out).map_err(CliError::at(out))?;
    print_csv(&[corpus_stats(&records)])
}

#[derive(Debug, Serialize)]
struct MapRow {
    step: usize,
    threshold: f64,
    map: f64,
}

fn map_rows(step: usize, report: &EvalReport) -> Vec<MapRow> {
    report
        .thresholds
        .iter()
        .zip(&report.map)
        .map(|(&threshold, &map)| MapRow {
            step,
            threshold,
            map,
        })
        .collect()
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<(), CliError> {
    let records = load_records(cfg, data, &[&cfg.paths.train_data])?;
    let dir = out_dir(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).map_err(CliError::at(p))?;
            if ckpt.config != cfg.model {
                return Err(CliError::Validation(format!(
                    "model config of {} differs from the run config",
                    p.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt, cfg.train.clone())?
        }
        None => Trainer::new(
            ActivityGraphTransformer::new(cfg.model.clone(), cfg.train.seed)?,
            cfg.train.clone(),
        )?,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let interval = cfg.train.eval_interval;
    let mut evals = Vec::new();
    let outcome = trainer.run(&records, |t, r| {
        if interval > 0 && (r.step + 1) % interval == 0 {
            let report = agt_core::eval::evaluate_model(
                &t.model,
                &records,
                cfg.eval.score_threshold,
                &cfg.eval.thresholds,
            )?;
            evals.extend(map_rows(r.step + 1, &report));
            t.checkpoint().save(&ckpt_path)?;
            println!("step {} loss {:.5}", r.step + 1, r.loss);
        }
        Ok(())
    });
    // The failing step leaves parameters untouched, so this is the last good state.
    trainer
        .checkpoint()
        .save(&ckpt_path)
        .map_err(CliError::at(&ckpt_path))?;
    write_csv(&dir.join("loss.csv"), &trainer.history)?;
    outcome?;

    let report = agt_core::eval::evaluate_model(
        &trainer.model,
        &records,
        cfg.eval.score_threshold,
        &cfg.eval.thresholds,
    )?;
    evals.extend(map_rows(trainer.step(), &report));
    write_csv(&dir.join("train_map.csv"), &evals)?;
    let last = trainer.history.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps, final loss {last:.5}", trainer.step());
    print_map(&report);
    Ok(())
}

fn print_map(report: &EvalReport) {
    for (t, m) in report.thresholds.iter().zip(&report.map) {
        println!("mAP@{t:.2} {m:.4}");
    }
    println!("average mAP {:.4}", report.average_map);
}

#[derive(Debug, Serialize)]
struct ApRow {
    /// Class index, or `mean` for the mAP row.
    class: String,
    threshold: f64,
    ap: Option<f64>,
}

fn report_rows(report: &EvalReport) -> Vec<ApRow> {
    let mut rows = Vec::new();
    for (t, &threshold) in report.thresholds.iter().enumerate() {
        for (c, aps) in report.class_ap.iter().enumerate() {
            rows.push(ApRow {
                class: c.to_string(),
                threshold,
                ap: aps[t],
            });
        }
        rows.push(ApRow {
            class: "mean".into(),
            threshold,
            ap: Some(report.map[t]),
        });
    }
    rows
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let records = load_records(cfg, data, &[&cfg.paths.test_data, &cfg.paths.train_data])?;
    let (dets, num_classes) = match (checkpoint, detections) {
        (Some(p), _) => {
            let model = load_model(p)?;
            (
                detect(&model, &records, cfg.eval.score_threshold)?,
                model.config().num_classes,
            )
        }
        (None, Some(p)) => (read_detections(p)?, cfg.model.num_classes),
        (None, None) => {
            return Err(CliError::Validation(
                "eval needs --checkpoint or --detections".into(),
            ))
        }
    };
    let report = evaluate(
        &dets,
        &ground_truth(&records),
        num_classes,
        &cfg.eval.thresholds,
    )?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => out_dir(cfg)?.join("eval.csv"),
    };
    write_csv(&path, &report_rows(&report))?;
    print_map(&report);
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<Detection>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let dets = reader
        .deserialize()
        .collect::<Result<Vec<Detection>, _>>()?;
    Ok(dets)
}

pub fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let records = load_records(cfg, data, &[&cfg.paths.test_data, &cfg.paths.train_data])?;
    let dets = detect(&model, &records, cfg.eval.score_threshold)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => out_dir(cfg)?.join("detections.csv"),
    };
    write_csv(&path, &dets)?;
    println!(
        "{} detections over {} videos written to {}",
        dets.len(),
        records.len(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradRow {
    module: &'static str,
    max_rel_error: f64,
    draws: usize,
    coordinates: usize,
    passed: bool,
}

pub fn gradcheck(
    cfg: &RunConfig,
    seed: u64,
    draws: usize,
    tolerance: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if cfg.model.dropout != 0.0 {
        return Err(CliError::Validation(
            "gradient checks need model.dropout = 0".into(),
        ));
    }
    if draws == 0 {
        return Err(CliError::Validation("--draws must be at least 1".into()));
    }
    let rows: Vec<GradRow> = check_all(&cfg.model, seed, draws)?
        .into_iter()
        .map(|c| GradRow {
            module: c.module.name(),
            max_rel_error: c.max_rel_error,
            draws: c.draws,
            coordinates: c.coordinates,
            passed: c.passed(tolerance),
        })
        .collect();
    if let Some(p) = out {
        write_csv(p, &rows)?;
    }
    print_csv(&rows)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.module)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{} above {tolerance:e} or without smooth draws",
            failed.join(", ")
        )))
    }
}

pub fn analyze(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let records = load_records(cfg, data, &[&cfg.paths.test_data, &cfg.paths.train_data])?;
    let points = segmentation_error_analysis(&model, &records, &cfg.train.loss)?;
    let bins = bin_errors(&points, cfg.eval.error_bins);
    let dir = out_dir(cfg)?;
    write_csv(&dir.join("segment_errors.csv"), &points)?;
    write_csv(&dir.join("segment_error_bins.csv"), &bins)?;
    let mut stdout = std::io::stdout().lock();
    for b in &bins {
        let mean = b.mean_error.map_or("-".to_string(), |m| format!("{m:.4}"));
        writeln!(
            stdout,
            "duration [{:.2}, {:.2}] n={} mean L1 {mean}",
            b.lower, b.upper, b.count
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use strokedetect_core::dataset::{labeled_windows, FlowCacheConfig, SampleBuilder};
use strokedetect_core::detector::{
    detect, write_detection_batch, write_detections, DetectionFile,
};
use strokedetect_core::metrics::{
    evaluate, format_sig4, render_stats_table, stroke_stats, EvalReport, StrokeStats,
};
use strokedetect_core::model::{init_params, params_from_checkpoint};
use strokedetect_core::synth::generate_split;
use strokedetect_core::trainer::train;
use strokedetect_core::video_io::{
    load_checkpoint, read_annotations, read_frame_dir, save_checkpoint, write_annotations,
    write_frame_dir,
};
use strokedetect_core::{AnnotationSet, Sample, VideoEval};

use crate::config::RunConfig;
use crate::errors::{io_error, CliError};

/// Generates the configured number of videos per split and writes them as
/// `<out_dir>/{train,valid,test}/<video_id>/` frame directories, each with
/// its annotations. Prints the per-split stroke statistics table.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let split = &cfg.split;
    let (train, valid, test) = generate_split(
        &cfg.synth,
        split.train_videos,
        split.val_videos,
        split.test_videos,
        cfg.synth.seed,
    )?;

    let mut rows: Vec<(String, StrokeStats)> = Vec::new();
    for (name, videos) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if videos.is_empty() {
            continue;
        }
        let split_dir = out_dir.join(name);
        let mut anns: Vec<AnnotationSet> = Vec::new();
        for (seq, ann) in videos {
            let video_dir = split_dir.join(ann.video_id());
            write_frame_dir(seq, &video_dir)?;
            write_annotations(ann, &video_dir.join("annotations.json"))?;
            anns.push(ann.clone());
        }
        rows.push((name.to_string(), stroke_stats(&anns)?));
    }
    print!("{}", render_stats_table(&rows));
    Ok(())
}

/// Builds labeled samples from `<data_dir>/train` and `<data_dir>/valid`,
/// trains the classifier, and writes the best-epoch checkpoint plus the
/// per-epoch history CSV.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_checkpoint: &Path,
    history_path: Option<&Path>,
) -> Result<(), CliError> {
    if cfg.sampling.window_len != cfg.model.input_t {
        return Err(CliError::Config(format!(
            "sampling window_len {} must equal model input_t {}",
            cfg.sampling.window_len, cfg.model.input_t
        )));
    }
    if !data_dir.is_dir() {
        return Err(CliError::missing_path(data_dir));
    }

    let train_set = build_split_samples(cfg, &data_dir.join("train"))?;
    let val_set = build_split_samples(cfg, &data_dir.join("valid"))?;

    let mut params = init_params(&cfg.model)?;
    let outcome = train(&mut params, &train_set, &val_set, &cfg.train)?;

    let named = outcome.best_params.named();
    let refs: Vec<(&str, &strokedetect_core::Tensor)> =
        named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    save_checkpoint(out_checkpoint, &refs, None)?;

    let history_file = match history_path {
        Some(p) => p.to_path_buf(),
        None => default_history_path(out_checkpoint),
    };
    std::fs::write(&history_file, outcome.history.to_csv())
        .map_err(|e| io_error(&history_file, e))?;

    println!(
        "trained {} epochs on {} train / {} val samples; best epoch {} at val acc {}",
        outcome.history.records.len(),
        train_set.len(),
        val_set.len(),
        outcome.history.best_epoch,
        format_sig4(outcome.history.best_val_acc()),
    );
    Ok(())
}

/// Runs sliding-window detection with a saved checkpoint over one frame
/// directory or a directory of them, writing detection JSON.
pub fn cmd_detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    videos: &Path,
    out: &Path,
) -> Result<(), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::missing_path(checkpoint));
    }
    if !videos.is_dir() {
        return Err(CliError::missing_path(videos));
    }
    let data = load_checkpoint(checkpoint)?;
    let (params, _) = params_from_checkpoint(&cfg.model, &data)?;

    if videos.join("meta.json").is_file() {
        let file = detect_one(cfg, &params, videos)?;
        write_detections(out, &file)?;
        println!("{}: {} detections", file.video_id, file.detections.len());
        return Ok(());
    }

    let dirs = video_dirs(videos)?;
    if dirs.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no video directories found",
            videos.display()
        )));
    }
    let mut files = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let file = detect_one(cfg, &params, dir)?;
        println!("{}: {} detections", file.video_id, file.detections.len());
        files.push(file);
    }
    write_detection_batch(out, &files)?;
    Ok(())
}

/// Scores detection JSON against ground truth and writes the report JSON
/// plus precision/recall and per-video IoU CSVs beside it.
pub fn cmd_eval(
    cfg: &RunConfig,
    detections: &Path,
    annotations: &Path,
    out_report: &Path,
) -> Result<(), CliError> {
    if !detections.is_file() {
        return Err(CliError::missing_path(detections));
    }
    let det_files = strokedetect_core::detector::read_detection_batch(detections)?;
    let anns = collect_annotation_sets(annotations)?;

    let known: std::collections::HashSet<&str> =
        anns.iter().map(|a| a.video_id()).collect();
    for f in &det_files {
        if !known.contains(f.video_id.as_str()) {
            return Err(CliError::Config(format!(
                "detections reference video {} with no ground truth annotations",
                f.video_id
            )));
        }
    }

    let videos: Vec<VideoEval> = anns
        .iter()
        .map(|ann| {
            let dets = det_files
                .iter()
                .find(|f| f.video_id == ann.video_id())
                .map(|f| f.detections.clone())
                .unwrap_or_default();
            VideoEval {
                video_id: ann.video_id().to_string(),
                detections: dets,
                ground_truth: ann.strokes().to_vec(),
                total_frames: ann.total_frames(),
            }
        })
        .collect();

    let report = evaluate(&videos, &cfg.eval.thresholds)?;
    write_report(&report, out_report)?;
    print!("{}", render_report(&report));
    Ok(())
}

/// Prints the stroke statistics table with one row per argument path.
pub fn cmd_stats(paths: &[PathBuf]) -> Result<(), CliError> {
    let mut rows: Vec<(String, StrokeStats)> = Vec::new();
    for path in paths {
        let sets = collect_annotation_sets(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push((label, stroke_stats(&sets)?));
    }
    print!("{}", render_stats_table(&rows));
    Ok(())
}

/// Reads every annotated video under one split directory and cuts its
/// labeled windows into samples. Videos shorter than the window are
/// skipped with a warning.
fn build_split_samples(cfg: &RunConfig, split_dir: &Path) -> Result<Vec<Sample>, CliError> {
    if !split_dir.is_dir() {
        return Err(CliError::missing_path(split_dir));
    }
    let mut samples = Vec::new();
    for dir in video_dirs(split_dir)? {
        let seq = read_frame_dir(&dir)?;
        let ann = read_annotations(&dir.join("annotations.json"))?;
        let windows = labeled_windows(&ann, &cfg.sampling)?;
        if windows.video_too_short {
            eprintln!(
                "warning: {}: {} frames is shorter than one {}-frame window, skipping",
                ann.video_id(),
                ann.total_frames(),
                cfg.sampling.window_len
            );
            continue;
        }
        let builder = sample_builder(cfg, ann.video_id());
        for (window, label) in &windows.windows {
            samples.push(builder.build(&seq, *window, *label)?);
        }
    }
    Ok(samples)
}

fn detect_one(
    cfg: &RunConfig,
    params: &strokedetect_core::ModelParams,
    dir: &Path,
) -> Result<DetectionFile, CliError> {
    let video_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let seq = read_frame_dir(dir)?;
    let builder = sample_builder(cfg, &video_id);
    let run = detect(params, &seq, &builder, &cfg.detector)?;
    if run.video_too_short {
        eprintln!(
            "warning: {}: {} frames is shorter than one {}-frame window, no detections",
            video_id,
            seq.frame_count(),
            cfg.detector.window_len
        );
    }
    Ok(DetectionFile {
        video_id,
        detections: run.detections,
    })
}

fn sample_builder(cfg: &RunConfig, video_key: &str) -> SampleBuilder {
    let mut builder = SampleBuilder::new(cfg.flow.clone())
        .with_output_size(cfg.model.input_w, cfg.model.input_h);
    if let Some(dir) = &cfg.cache.flow_dir {
        builder = builder.with_cache(FlowCacheConfig {
            dir: dir.clone(),
            video_key: video_key.to_string(),
        });
    }
    builder
}

/// Sorted subdirectories of `dir` that hold a frame sequence.
fn video_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Resolves an annotations argument: a JSON file directly, a video
/// directory holding `annotations.json`, or a directory of such video
/// directories.
fn collect_annotation_sets(path: &Path) -> Result<Vec<AnnotationSet>, CliError> {
    if path.is_file() {
        return Ok(vec![read_annotations(path)?]);
    }
    if !path.is_dir() {
        return Err(CliError::missing_path(path));
    }
    let direct = path.join("annotations.json");
    if direct.is_file() {
        return Ok(vec![read_annotations(&direct)?]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| io_error(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(path, e))?;
        let sub = entry.path().join("annotations.json");
        if sub.is_file() {
            files.push(sub);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no annotations found",
            path.display()
        )));
    }
    files.iter().map(|f| Ok(read_annotations(f)?)).collect()
}

fn default_history_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());
    checkpoint.with_file_name(format!("{stem}_history.csv"))
}

fn write_report(report: &EvalReport, out_report: &Path) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(report).expect("serializable");
    body.push('\n');
    std::fs::write(out_report, body).map_err(|e| io_error(out_report, e))?;

    let pr_path = sibling_csv(out_report, "pr");
    let mut pr = String::from("confidence,precision,recall\n");
    for point in &report.pr_curve {
        pr.push_str(&format!(
            "{},{},{}\n",
            point.confidence, point.precision, point.recall
        ));
    }
    std::fs::write(&pr_path, pr).map_err(|e| io_error(&pr_path, e))?;

    let giou_path = sibling_csv(out_report, "giou");
    let mut giou = String::from("video_id,giou\n");
    for v in &report.per_video_giou {
        giou.push_str(&format!("{},{}\n", v.video_id, v.giou));
    }
    std::fs::write(&giou_path, giou).map_err(|e| io_error(&giou_path, e))
}

fn sibling_csv(report_path: &Path, suffix: &str) -> PathBuf {
    let stem = report_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".to_string());
    report_path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn render_report(report: &EvalReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("videos".into(), report.per_video_giou.len().to_string()),
        ("detections".into(), report.detection_count.to_string()),
        ("ground truth".into(), report.ground_truth_count.to_string()),
    ];
    for (t, ap) in report.thresholds.iter().zip(&report.ap_per_threshold) {
        rows.push((format!("AP@{t:.2}"), format_sig4(*ap)));
    }
    rows.push(("mAP".into(), format_sig4(report.map)));
    rows.push(("mean G-IoU".into(), format_sig4(report.mean_giou)));

    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in &rows {
        out.push_str(&format!("{k:<width$}  {v}\n"));
    }
    out
}

//! Dataset-driven operations behind the command line: batch fitting, toy
//! training, evaluation, overlay rendering, and a gradient audit.
//!
//! Every operation is deterministic given (inputs, config, seed). Record
//! work parallelizes with rayon; output ordering follows the manifest, so
//! results are byte-identical regardless of scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraIntrinsics, RigidPose};
use crate::config::RunConfig;
use crate::dataset::{load_manifest, read_record, DatasetConfig, DatasetRecord};
use crate::encodings::{soft_argmax, HeatmapStack, MaskImage, SkeletonHierarchy};
use crate::error::{Error, Result};
use crate::fit::{fit, FitState};
use crate::graph::{grad_check, Graph, NodeId, Values};
use crate::hand::{bone_directions, make_toy_model, rodrigues, skin_mesh, HandModelData, Mesh};
use crate::loss::{LossReport, LossWeights};
use crate::metrics::{
    auc, mask_iou, miou, pck_curve, per_vertex_error, Alignment, PckCurve, VertexError,
};
use crate::net::{
    forward, save_checkpoint, NetConfig, NetOptimizer, NetParams, TaskSet, TrainOptions,
    TrainSample, Trainer,
};
use crate::render::{render_silhouette, SoftRenderConfig};
use crate::tensor::Tensor;

/// Threshold for binarizing masks everywhere in the workbench.
const MASK_THRESHOLD: f64 = 0.5;

fn to_camera(pose: &RigidPose, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let r = rodrigues(pose.rotation);
    let t = pose.translation;
    pts.iter()
        .map(|p| {
            [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
            ]
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs `f` on a dedicated rayon pool when a thread count is given; 0 or
/// absent means rayon's default.
fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(value)?)?)
}

/// Everything the fitted state is measured by, per record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecordReport {
    pub name: String,
    /// Mean keypoint reprojection distance against the record's ground
    /// truth, image pixels.
    pub reproj_px: f64,
    /// Mean bone angular error in degrees.
    pub bone_deg: f64,
    /// Rendered-vs-ground-truth silhouette IoU at map resolution.
    pub mask_iou: f64,
    pub best_total: f64,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordFailure {
    pub name: String,
    pub error: String,
}

/// Per-record rows plus their means; failures keep the run going.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub records: Vec<FitRecordReport>,
    pub failures: Vec<RecordFailure>,
    pub mean_reproj_px: Option<f64>,
    pub mean_bone_deg: Option<f64>,
    pub mean_mask_iou: Option<f64>,
}

impl FitSummary {
    fn from_rows(records: Vec<FitRecordReport>, failures: Vec<RecordFailure>) -> Self {
        let col = |f: fn(&FitRecordReport) -> f64| -> Option<f64> {
            if records.is_empty() {
                None
            } else {
                Some(mean(&records.iter().map(f).collect::<Vec<_>>()))
            }
        };
        FitSummary {
            mean_reproj_px: col(|r| r.reproj_px),
            mean_bone_deg: col(|r| r.bone_deg),
            mean_mask_iou: col(|r| r.mask_iou),
            records,
            failures,
        }
    }
}

/// Measures a state against a record's ground truth: mean reprojection
/// distance (px), mean bone angle (deg), and map-resolution mask IoU.
pub fn measure_against_record(
    model: &HandModelData,
    state: &FitState,
    rec: &DatasetRecord,
    data: &DatasetConfig,
    skeleton: &SkeletonHierarchy,
) -> Result<(f64, f64, f64)> {
    let (mesh, kpts_hand) = skin_mesh(model, &state.params)?;
    let pose = RigidPose { rotation: state.rotation, translation: state.translation };
    let intr = CameraIntrinsics::from_image(data.image_width, data.image_height, state.focal)?;
    let pred_px = project(&kpts_hand, &pose, &intr)?;
    let reproj = mean(
        &pred_px
            .iter()
            .zip(&rec.kpts2d)
            .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .collect::<Vec<_>>(),
    );
    let pred_dirs = bone_directions(&to_camera(&pose, &kpts_hand), skeleton)?;
    let gt_dirs = rec.bone_dirs(skeleton)?;
    let bone_deg = mean(
        &pred_dirs
            .iter()
            .zip(&gt_dirs)
            .map(|(p, g)| {
                let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
                dot.acos().to_degrees()
            })
            .collect::<Vec<_>>(),
    );
    let scale = data.map_width as f64 / data.image_width as f64;
    let rendered = render_silhouette(
        &mesh,
        &pose,
        &intr.scaled(scale),
        data.map_width,
        data.map_height,
        &SoftRenderConfig::hard(),
    )?;
    let iou = mask_iou(&rendered, &rec.mask, MASK_THRESHOLD)?;
    Ok((reproj, bone_deg, iou))
}

fn fit_one(
    dataset_dir: &Path,
    out_dir: &Path,
    data: &DatasetConfig,
    model: &HandModelData,
    config: &RunConfig,
    skeleton: &SkeletonHierarchy,
    name: &str,
) -> Result<FitRecordReport> {
    let rec = read_record(dataset_dir, name, data)?;
    let obs = rec.observations();
    let init = FitState::default_init(data.image_width, data.image_height);
    let outcome = fit(&obs, model, &init, &config.weights, &config.optim)?;
    let (reproj_px, bone_deg, iou) =
        measure_against_record(model, &outcome.state, &rec, data, skeleton)?;

    let dir = out_dir.join(name);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("fit.json"), &outcome.state)?;
    let mut trace = String::from(LossReport::csv_header());
    trace.push('\n');
    for (step, report) in outcome.trace.iter().enumerate() {
        trace.push_str(&report.csv_rows(step));
    }
    fs::write(dir.join("trace.csv"), trace)?;

    Ok(FitRecordReport {
        name: name.to_string(),
        reproj_px,
        bone_deg,
        mask_iou: iou,
        best_total: outcome.best_total,
        converged: outcome.converged,
        diverged: outcome.diverged,
    })
}

/// Fits every record in the dataset from observations alone and writes
/// per-record `fit.json` + `trace.csv` plus `summary.json`. Failures are
/// collected, not fatal; the caller decides the exit code.
pub fn run_fit(
    dataset_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
    jobs: Option<usize>,
) -> Result<FitSummary> {
    config.validate()?;
    let manifest = load_manifest(dataset_dir)?;
    let model = config.model()?;
    let skeleton = SkeletonHierarchy::hand();
    fs::create_dir_all(out_dir)?;

    let results: Vec<(String, Result<FitRecordReport>)> = with_pool(jobs, || {
        manifest
            .records
            .par_iter()
            .map(|name| {
                let r = fit_one(dataset_dir, out_dir, &manifest.config, &model, config, &skeleton, name);
                (name.clone(), r)
            })
            .collect()
    })?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, result) in results {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(RecordFailure { name, error: e.to_string() }),
        }
    }
    let summary = FitSummary::from_rows(rows, failures);
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Network quality on a record set: pooled keypoint errors (image px,
/// final-stack soft-argmax) and mean segmentation mIoU.
pub struct NetworkEval {
    pub errors_px: Vec<f64>,
    pub mean_miou: f64,
}

impl NetworkEval {
    /// Fraction of keypoints within `threshold` pixels.
    pub fn pck_at(&self, threshold: f64) -> f64 {
        let hit = self.errors_px.iter().filter(|&&e| e <= threshold).count();
        hit as f64 / self.errors_px.len() as f64
    }
}

/// Runs the network on each record and scores the final stack against the
/// record's ground truth.
pub fn network_eval(
    config: &NetConfig,
    params: &NetParams<f64>,
    records: &[DatasetRecord],
) -> Result<NetworkEval> {
    if records.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    let sx = config.input_width as f64 / config.map_width as f64;
    let sy = config.input_height as f64 / config.map_height as f64;
    let mut errors = Vec::new();
    let mut mious = Vec::new();
    for rec in records {
        let outs = forward(&rec.image, config, params)?;
        let last = outs.last().expect("at least one stack");
        let decoded = soft_argmax(&HeatmapStack { data: last.heatmaps.clone(), sigma: 1.0 })?;
        for (p, g) in decoded.iter().zip(&rec.kpts2d) {
            let ix = (p[0] + 0.5) * sx - 0.5;
            let iy = (p[1] + 0.5) * sy - 0.5;
            errors.push(((ix - g[0]).powi(2) + (iy - g[1]).powi(2)).sqrt());
        }
        let (mh, mw) = (config.map_height, config.map_width);
        let logits = last.mask_logits.data();
        let fg: Vec<f64> = (0..mh * mw)
            .map(|i| if logits[mh * mw + i] > logits[i] { 1.0 } else { 0.0 })
            .collect();
        let pred = MaskImage::new(Tensor::new(&[mh, mw], fg)?)?;
        mious.push(miou(&pred, &rec.mask, MASK_THRESHOLD)?);
    }
    Ok(NetworkEval { errors_px: errors, mean_miou: mean(&mious) })
}

/// Train-toy knobs beyond the run config.
#[derive(Debug, Clone)]
pub struct TrainToyOptions {
    pub steps: usize,
    pub tasks: TaskSet,
    pub learning_rate: f64,
    /// Evaluate on the training set every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for TrainToyOptions {
    fn default() -> Self {
        TrainToyOptions {
            steps: 0,
            tasks: TaskSet::all(),
            learning_rate: 1e-3,
            eval_every: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEvalRow {
    pub step: usize,
    pub pck2px: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub requested_steps: usize,
    pub steps_run: usize,
    /// A step aborted on a non-finite loss; the checkpoint holds the last
    /// good parameters.
    pub diverged: bool,
    pub final_total: Option<f64>,
    pub evals: Vec<TrainEvalRow>,
}

/// Supervised training on every record of the dataset, full-batch. Writes
/// `checkpoint/`, `log.csv`, `eval.csv`, and `train.json` under `out_dir`.
pub fn run_train_toy(
    dataset_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
    opts: &TrainToyOptions,
) -> Result<TrainSummary> {
    let manifest = load_manifest(dataset_dir)?;
    config.validate_for_training(&manifest.config)?;
    let model = config.model()?;
    let skeleton = SkeletonHierarchy::hand();
    if manifest.records.is_empty() {
        return Err(Error::Dataset("dataset has no records to train on".into()));
    }
    let records: Vec<DatasetRecord> = manifest
        .records
        .iter()
        .map(|name| read_record(dataset_dir, name, &manifest.config))
        .collect::<Result<_>>()?;
    let batch: Vec<TrainSample> = records
        .iter()
        .map(|r| r.train_sample(true, &skeleton))
        .collect::<Result<_>>()?;

    let params = NetParams::init(&config.net, config.seed)?;
    let options = TrainOptions { tasks: opts.tasks, ..TrainOptions::default() };
    let mut trainer = Trainer::new(
        config.net.clone(),
        model,
        params,
        options,
        NetOptimizer::new(opts.learning_rate),
    )?;

    fs::create_dir_all(out_dir)?;
    let mut log = String::from(LossReport::csv_header());
    log.push('\n');
    let mut evals = Vec::new();
    let mut final_total = None;
    let mut diverged = false;
    let mut steps_run = 0;

    let eval_point = |trainer: &Trainer, step: usize| -> Result<TrainEvalRow> {
        let ev = network_eval(&config.net, trainer.params(), &records)?;
        Ok(TrainEvalRow { step, pck2px: ev.pck_at(2.0), miou: ev.mean_miou })
    };

    for step in 1..=opts.steps {
        match trainer.step(&batch, &config.weights) {
            Ok(report) => {
                log.push_str(&report.csv_rows(step));
                final_total = Some(report.total);
                steps_run = step;
            }
            Err(e) => {
                // parameters are untouched by a failed step; keep them
                log.push_str(&format!("{step},error,{}\n", e.to_string().replace(',', ";")));
                diverged = true;
                break;
            }
        }
        if opts.eval_every > 0 && step % opts.eval_every == 0 && step != opts.steps {
            evals.push(eval_point(&trainer, step)?);
        }
    }
    if !diverged && opts.steps > 0 {
        evals.push(eval_point(&trainer, steps_run)?);
    }

    save_checkpoint(&out_dir.join("checkpoint"), &config.net, trainer.params())?;
    fs::write(out_dir.join("log.csv"), log)?;
    let mut eval_csv = String::from("step,pck2px,miou\n");
    for row in &evals {
        eval_csv.push_str(&format!("{},{},{}\n", row.step, row.pck2px, row.miou));
    }
    fs::write(out_dir.join("eval.csv"), eval_csv)?;

    let summary = TrainSummary {
        requested_steps: opts.steps,
        steps_run,
        diverged,
        final_total,
        evals,
    };
    write_json(&out_dir.join("train.json"), &summary)?;
    Ok(summary)
}

/// Vertex reconstruction quality in millimeters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexSummary {
    pub mean_mm: f64,
    pub auc: f64,
    /// Thresholds in millimeters.
    pub curve: PckCurve,
}

/// Everything run_eval measures, ready for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBundle {
    pub records: usize,
    /// Mean keypoint reprojection distance, image pixels.
    pub mean_kpt_px: f64,
    pub auc_2d: f64,
    pub pck_2d: PckCurve,
    pub miou: f64,
    /// Alignment used for `vertex`.
    pub alignment: Alignment,
    pub vertex: VertexSummary,
    /// Root (centroid) alignment, always emitted.
    pub vertex_root: VertexSummary,
    /// Similarity-Procrustes alignment, always emitted.
    pub vertex_procrustes: VertexSummary,
}

fn mean_vertex_summary(per_record: &[VertexError]) -> Result<VertexSummary> {
    let thresholds_mm: Vec<f64> =
        per_record[0].curve.thresholds.iter().map(|t| t * 1000.0).collect();
    let mut fractions = vec![0.0; thresholds_mm.len()];
    for v in per_record {
        if v.curve.thresholds != per_record[0].curve.thresholds {
            return Err(Error::Config("vertex curves use different thresholds".into()));
        }
        for (acc, f) in fractions.iter_mut().zip(&v.curve.fractions) {
            *acc += f;
        }
    }
    for f in &mut fractions {
        *f /= per_record.len() as f64;
    }
    let curve = PckCurve { thresholds: thresholds_mm, fractions };
    curve.validate()?;
    Ok(VertexSummary {
        mean_mm: mean(&per_record.iter().map(|v| v.mean * 1000.0).collect::<Vec<_>>()),
        auc: auc(&curve)?,
        curve,
    })
}

/// Camera-frame mesh and projected keypoints of a state.
fn posed_geometry(
    model: &HandModelData,
    state: &FitState,
    data: &DatasetConfig,
) -> Result<(Mesh, Vec<[f64; 2]>)> {
    let (mesh, kpts) = skin_mesh(model, &state.params)?;
    let pose = RigidPose { rotation: state.rotation, translation: state.translation };
    let intr = CameraIntrinsics::from_image(data.image_width, data.image_height, state.focal)?;
    let px = project(&kpts, &pose, &intr)?;
    let cam = Mesh { vertices: to_camera(&pose, &mesh.vertices), faces: mesh.faces };
    Ok((cam, px))
}

/// Scores the predicted states in `pred_dir` (one `<record>/fit.json` per
/// record, as written by [`run_fit`]) against the dataset's ground truth.
/// The record sets must match exactly; nothing is written on error.
pub fn run_eval(
    pred_dir: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<EvalBundle> {
    config.validate()?;
    let manifest = load_manifest(dataset_dir)?;
    let model = config.model()?;
    if manifest.records.is_empty() {
        return Err(Error::Dataset("dataset has no records to evaluate".into()));
    }

    // strict pairing: every record needs a prediction, no extras allowed
    let mut predictions = Vec::new();
    for name in &manifest.records {
        let path = pred_dir.join(name).join("fit.json");
        if !path.is_file() {
            return Err(Error::Dataset(format!("record '{name}' has no prediction at {}", path.display())));
        }
        let state: FitState = serde_json::from_str(&fs::read_to_string(&path)?)?;
        state.validate()?;
        predictions.push(state);
    }
    if let Ok(entries) = fs::read_dir(pred_dir) {
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() && p.join("fit.json").is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if !manifest.records.contains(&name) {
                    return Err(Error::Dataset(format!(
                        "prediction '{name}' has no matching dataset record"
                    )));
                }
            }
        }
    }

    let grid_2d = config.metrics.grid_2d_px.thresholds()?;
    let grid_3d_m: Vec<f64> =
        config.metrics.grid_3d_mm.thresholds()?.iter().map(|t| t / 1000.0).collect();
    let data = &manifest.config;
    let skeleton = SkeletonHierarchy::hand();
    let _ = &skeleton;

    let mut kpt_errors = Vec::new();
    let mut mious = Vec::new();
    let mut v_cfg = Vec::new();
    let mut v_root = Vec::new();
    let mut v_proc = Vec::new();
    for (name, state) in manifest.records.iter().zip(&predictions) {
        let rec = read_record(dataset_dir, name, data)?;
        let (pred_mesh, pred_px) = posed_geometry(&model, state, data)?;
        let (gt_mesh, _) = posed_geometry(&model, &rec.state, data)?;
        for (p, g) in pred_px.iter().zip(&rec.kpts2d) {
            kpt_errors.push(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt());
        }
        let pose = RigidPose { rotation: state.rotation, translation: state.translation };
        let intr = CameraIntrinsics::from_image(data.image_width, data.image_height, state.focal)?;
        let scale = data.map_width as f64 / data.image_width as f64;
        let (mesh_hand, _) = skin_mesh(&model, &state.params)?;
        let rendered = render_silhouette(
            &mesh_hand,
            &pose,
            &intr.scaled(scale),
            data.map_width,
            data.map_height,
            &SoftRenderConfig::hard(),
        )?;
        mious.push(miou(&rendered, &rec.mask, MASK_THRESHOLD)?);
        v_cfg.push(per_vertex_error(&pred_mesh, &gt_mesh, config.metrics.alignment, &grid_3d_m)?);
        v_root.push(per_vertex_error(&pred_mesh, &gt_mesh, Alignment::Root, &grid_3d_m)?);
        v_proc.push(per_vertex_error(&pred_mesh, &gt_mesh, Alignment::Procrustes, &grid_3d_m)?);
    }

    let pck_2d = pck_curve(&kpt_errors, &grid_2d)?;
    let bundle = EvalBundle {
        records: manifest.records.len(),
        mean_kpt_px: mean(&kpt_errors),
        auc_2d: auc(&pck_2d)?,
        pck_2d,
        miou: mean(&mious),
        alignment: config.metrics.alignment,
        vertex: mean_vertex_summary(&v_cfg)?,
        vertex_root: mean_vertex_summary(&v_root)?,
        vertex_procrustes: mean_vertex_summary(&v_proc)?,
    };

    // all computation succeeded; only now touch the filesystem
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("metrics.json"), &bundle)?;
    write_curve_csv(&out_dir.join("pck_2d.csv"), "threshold_px", &bundle.pck_2d)?;
    write_curve_csv(&out_dir.join("vertex_root.csv"), "threshold_mm", &bundle.vertex_root.curve)?;
    write_curve_csv(
        &out_dir.join("vertex_procrustes.csv"),
        "threshold_mm",
        &bundle.vertex_procrustes.curve,
    )?;
    plot_curve_png(&out_dir.join("pck_2d.png"), &bundle.pck_2d)?;
    Ok(bundle)
}

fn write_curve_csv(path: &Path, x_name: &str, curve: &PckCurve) -> Result<()> {
    let mut s = format!("{x_name},fraction\n");
    for (t, f) in curve.thresholds.iter().zip(&curve.fractions) {
        s.push_str(&format!("{t},{f}\n"));
    }
    Ok(fs::write(path, s)?)
}

/// Files written by [`render_overlay`] plus the silhouette IoU against the
/// record's stored mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlayReport {
    pub mask_iou: f64,
    pub files: Vec<PathBuf>,
}

/// Writes `input.png`, `overlay.png` (rendered silhouette over the input),
/// and `skeleton.png` (heat-map argmax skeleton) for one record. The state
/// defaults to the record's own generating parameters.
pub fn render_overlay(
    dataset_dir: &Path,
    record: &str,
    state: Option<&FitState>,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<OverlayReport> {
    let manifest = load_manifest(dataset_dir)?;
    let data = &manifest.config;
    let rec = read_record(dataset_dir, record, data)?;
    let model = config.model()?;
    let state = state.unwrap_or(&rec.state);
    state.validate()?;

    let (mesh, _) = skin_mesh(&model, &state.params)?;
    let pose = RigidPose { rotation: state.rotation, translation: state.translation };
    let intr = CameraIntrinsics::from_image(data.image_width, data.image_height, state.focal)?;
    let full = render_silhouette(
        &mesh,
        &pose,
        &intr,
        data.image_width,
        data.image_height,
        &SoftRenderConfig::hard(),
    )?;
    let scale = data.map_width as f64 / data.image_width as f64;
    let at_map = render_silhouette(
        &mesh,
        &pose,
        &intr.scaled(scale),
        data.map_width,
        data.map_height,
        &SoftRenderConfig::hard(),
    )?;
    let iou = mask_iou(&at_map, &rec.mask, MASK_THRESHOLD)?;

    let input = tensor_rgb(&rec.image)?;
    let mut overlay = input.clone();
    for (i, &m) in full.data.data().iter().enumerate() {
        if m > MASK_THRESHOLD {
            let (x, y) = ((i % data.image_width) as u32, (i / data.image_width) as u32);
            let p = overlay.get_pixel(x, y).0;
            overlay.put_pixel(x, y, Rgb([p[0] / 2, p[1] / 2 + 127, p[2] / 2]));
        }
    }
    let skeleton_img = draw_skeleton(&input, &rec, data)?;

    fs::create_dir_all(out_dir)?;
    let files = vec![
        out_dir.join("input.png"),
        out_dir.join("overlay.png"),
        out_dir.join("skeleton.png"),
    ];
    save_png(&input, &files[0])?;
    save_png(&overlay, &files[1])?;
    save_png(&skeleton_img, &files[2])?;
    Ok(OverlayReport { mask_iou: iou, files })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Format(format!("png write failed: {e}")))
}

/// `[3,H,W]` values in [0,1] to 8-bit RGB.
fn tensor_rgb(image: &Tensor<f64>) -> Result<RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape {
            op: "tensor_rgb".into(),
            detail: format!("expected [3,H,W], got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (data[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

/// Integer argmax of one heat-map channel, map coordinates.
fn argmax_2d(data: &[f64], w: usize) -> [f64; 2] {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    [(best % w) as f64, (best / w) as f64]
}

fn draw_skeleton(input: &RgbImage, rec: &DatasetRecord, data: &DatasetConfig) -> Result<RgbImage> {
    let skeleton = SkeletonHierarchy::hand();
    let hm = rec.heatmaps.data.shape();
    let (k, mh, mw) = (hm[0], hm[1], hm[2]);
    let sx = data.image_width as f64 / mw as f64;
    let sy = data.image_height as f64 / mh as f64;
    let kpts: Vec<[f64; 2]> = (0..k)
        .map(|c| {
            let p = argmax_2d(&rec.heatmaps.data.data()[c * mh * mw..(c + 1) * mh * mw], mw);
            [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5]
        })
        .collect();

    // dimmed input as context
    let mut img = input.clone();
    for p in img.pixels_mut() {
        *p = Rgb([p.0[0] / 3, p.0[1] / 3, p.0[2] / 3]);
    }
    const FINGER_COLORS: [[u8; 3]; 5] =
        [[230, 80, 80], [230, 180, 60], [90, 200, 90], [80, 140, 230], [190, 90, 210]];
    for (b, &(p, c)) in skeleton.bones.iter().enumerate() {
        if p >= kpts.len() || c >= kpts.len() {
            continue;
        }
        draw_line(&mut img, kpts[p], kpts[c], Rgb(FINGER_COLORS[b / 4]));
    }
    for kp in &kpts {
        draw_dot(&mut img, *kp, Rgb([255, 255, 255]));
    }
    Ok(img)
}

fn draw_dot(img: &mut RgbImage, p: [f64; 2], color: Rgb<u8>) {
    let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Bresenham on rounded endpoints, clipped per pixel.
fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Minimal line chart of a PCK curve: white canvas, black axes, gray grid
/// lines at quarter fractions, blue curve. No text.
fn plot_curve_png(path: &Path, curve: &PckCurve) -> Result<()> {
    const W: u32 = 420;
    const H: u32 = 300;
    const ML: f64 = 40.0;
    const MR: f64 = 15.0;
    const MT: f64 = 15.0;
    const MB: f64 = 30.0;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (t0, t1) = (curve.thresholds[0], *curve.thresholds.last().unwrap());
    let span = (t1 - t0).max(f64::EPSILON);
    let to_px = |t: f64, f: f64| -> [f64; 2] {
        [
            ML + (t - t0) / span * (W as f64 - ML - MR),
            (H as f64 - MB) - f * (H as f64 - MT - MB),
        ]
    };
    for q in [0.25, 0.5, 0.75] {
        draw_line(&mut img, to_px(t0, q), to_px(t1, q), Rgb([220, 220, 220]));
    }
    draw_line(&mut img, to_px(t0, 0.0), to_px(t1, 0.0), Rgb([0, 0, 0]));
    draw_line(&mut img, to_px(t0, 0.0), to_px(t0, 1.0), Rgb([0, 0, 0]));
    for pair in curve.thresholds.iter().zip(&curve.fractions).collect::<Vec<_>>().windows(2) {
        let (&(t_a, f_a), &(t_b, f_b)) = (&pair[0], &pair[1]);
        draw_line(&mut img, to_px(*t_a, *f_a), to_px(*t_b, *f_b), Rgb([40, 80, 200]));
    }
    save_png(&img, path)
}

/// One row of the gradient audit.
#[derive(Debug, Clone, Serialize)]
pub struct GradAuditRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Central-difference step and tolerance of the audit.
pub const AUDIT_H: f64 = 1e-3;
pub const AUDIT_TOL: f64 = 1e-4;

struct Probe {
    name: &'static str,
    graph: Graph<f64>,
    values: Values<f64>,
    head: NodeId,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// `sum(expr * w)` with |w| >= 0.3 keeps every cotangent healthy.
fn weighted_head(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let w = g.constant(
        rand_tensor(rng, &g.shape(out).to_vec(), -1.0, 1.0)
            .map(|v| if v >= 0.0 { v + 0.3 } else { v - 0.3 }),
    );
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

/// A probe over randomly bound Param leaves in [lo, hi).
fn param_probe(
    name: &'static str,
    seed: u64,
    lo: f64,
    hi: f64,
    build: impl Fn(&mut Graph<f64>) -> Result<NodeId>,
) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let out = build(&mut g)?;
    let head = weighted_head(&mut g, out, &mut rng)?;
    let mut values = Values::new(&g);
    for (_, id) in g.leaves_of(crate::graph::LeafKind::Param) {
        let t = rand_tensor(&mut rng, &g.shape(id).to_vec(), lo, hi);
        values.bind(&g, id, t)?;
    }
    Ok(Probe { name, graph: g, values, head })
}

fn silhouette_probe(seed: u64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let verts = g.param("verts2d", &[6, 2]);
    let faces = [[0, 1, 2], [3, 4, 5]];
    let out = crate::render::silhouette_graph(&mut g, verts, &faces, 16, 16, 1.0)?;
    let head = weighted_head(&mut g, out, &mut rng)?;
    let mut values = Values::new(&g);
    // two triangles well inside the 16x16 frame
    let coords = vec![2.3, 2.1, 11.7, 3.4, 5.2, 12.6, 8.1, 6.3, 13.8, 12.9, 3.9, 9.4];
    values.bind(&g, verts, Tensor::new(&[6, 2], coords)?)?;
    Ok(Probe { name: "silhouette", graph: g, values, head })
}

/// The fitter's full stage-2 objective at a perturbed state: skinning,
/// projection, bone directions, soft silhouette, and regularizers composed
/// into one weighted total.
fn total_loss_probe(seed: u64) -> Result<Probe> {
    let model = make_toy_model(0);
    let data = DatasetConfig::default();
    let rec = crate::dataset::generate_record(&model, &data, "probe", seed)?;
    let skeleton = SkeletonHierarchy::hand();
    let gt_dirs = rec.bone_dirs(&skeleton)?;
    let mut state = rec.state.clone();
    for b in state.params.beta.iter_mut() {
        *b += 0.05;
    }
    for row in state.params.theta.iter_mut() {
        for v in row.iter_mut() {
            *v += 0.04;
        }
    }
    state.rotation[0] += 0.03;
    state.translation[2] += 0.01;
    state.focal *= 1.02;

    let obs = rec.observations();
    let stage = crate::fit::build_stage2(
        &model,
        &obs,
        &state,
        &LossWeights::default(),
        &gt_dirs,
        &skeleton,
        1.0,
    )?;
    Ok(Probe { name: "total_loss", graph: stage.graph, values: stage.values, head: stage.total })
}

/// Builds the audit probes: one per primitive family plus the composed
/// fitting objective.
fn probes(seed: u64) -> Result<Vec<Probe>> {
    let s = |i: u64| seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(i);
    let mut list = vec![
        param_probe("arithmetic", s(1), 0.3, 1.7, |g| {
            let a = g.param("a", &[2, 3, 4]);
            let b = g.param("b", &[3, 1]);
            let c = g.param("c", &[]);
            let s1 = g.add(a, b)?;
            let s2 = g.sub(s1, c)?;
            let s3 = g.mul(s2, b)?;
            let s4 = g.div(s3, a)?;
            Ok(g.neg(s4))
        })?,
        param_probe("transcendental", s(2), 0.2, 1.5, |g| {
            let x = g.param("x", &[3, 5]);
            let e = g.exp(x);
            let l = g.log(x);
            let q = g.sqrt(x);
            let sq = g.square(x);
            let sn = g.sin(x);
            let cs = g.cos(x);
            let t1 = g.add(e, l)?;
            let t2 = g.add(q, sq)?;
            let t3 = g.add(sn, cs)?;
            let t4 = g.add(t1, t2)?;
            g.add(t4, t3)
        })?,
        param_probe("activations", s(3), 0.2, 2.0, |g| {
            let x = g.param("x", &[4, 4]);
            let shift = g.constant(Tensor::full(&[4, 4], 1.1));
            let y = g.sub(x, shift)?;
            let r = g.relu(y);
            let sg = g.sigmoid(y);
            let sp = g.softplus(y);
            let a = g.add(r, sg)?;
            g.add(a, sp)
        })?,
        param_probe("softmax", s(4), -1.0, 1.0, |g| {
            let x = g.param("x", &[3, 4, 2]);
            let s0 = g.softmax(x, 0)?;
            let s1 = g.softmax(x, 1)?;
            let s2 = g.softmax(x, 2)?;
            let a = g.add(s0, s1)?;
            g.add(a, s2)
        })?,
        param_probe("matmul_linear", s(5), -1.0, 1.0, |g| {
            let a = g.param("a", &[3, 4]);
            let b = g.param("b", &[4, 2]);
            let x = g.param("x", &[4]);
            let w = g.param("w", &[3, 4]);
            let bias = g.param("bias", &[3]);
            let mm = g.matmul(a, b)?;
            let lin = g.linear(x, w, bias)?;
            let lin2 = g.reshape(lin, &[3, 1])?;
            let mm2 = g.slice(mm, 1, 0, 1)?;
            g.add(mm2, lin2)
        })?,
        param_probe("conv2d_s1p0", s(6), -1.0, 1.0, |g| {
            let x = g.param("x", &[2, 6, 5]);
            let w = g.param("w", &[3, 2, 3, 3]);
            let b = g.param("b", &[3]);
            g.conv2d(x, w, b, 1, 0)
        })?,
        param_probe("conv2d_s2p3", s(7), -1.0, 1.0, |g| {
            let x = g.param("x", &[2, 6, 5]);
            let w = g.param("w", &[3, 2, 3, 3]);
            let b = g.param("b", &[3]);
            g.conv2d(x, w, b, 2, 3)
        })?,
        param_probe("layout", s(8), -1.0, 1.0, |g| {
            let x = g.param("x", &[4, 3]);
            let y = g.param("y", &[2, 3]);
            let cat = g.concat(&[x, y], 0)?;
            let t = g.transpose2d(cat)?;
            let r = g.reshape(t, &[2, 9])?;
            let sl = g.slice(r, 1, 2, 5)?;
            g.gather_rows(sl, vec![1, 1, 0])
        })?,
        param_probe("pooling", s(9), -1.0, 1.0, |g| {
            let x = g.param("x", &[3, 4, 4]);
            let up = g.upsample_nearest(x, 2)?;
            let pool = g.global_avg_pool(up)?;
            let sa = g.sum_axis(x, 1)?;
            let ma = g.mean_axis(sa, 0)?;
            let p2 = g.reshape(pool, &[3, 1])?;
            let m2 = g.reshape(ma, &[1, 4])?;
            g.mul(p2, m2)
        })?,
        param_probe("reductions_losses", s(10), 0.1, 0.9, |g| {
            let x = g.param("x", &[3, 4]);
            let y = g.param("y", &[3, 4]);
            let s1 = g.sum_all(x);
            let m = g.mean_all(y);
            let e = g.mse(x, y)?;
            let logits = g.param("logits", &[2, 3, 3]);
            let flat = g.reshape(logits, &[18])?;
            let half = g.slice(flat, 0, 0, 9)?;
            let target = g.sigmoid(half);
            let target = g.reshape(target, &[3, 3])?;
            let target = g.detach(target);
            let ce = g.mask_cross_entropy(logits, target)?;
            let a = g.add(s1, m)?;
            let b = g.add(e, ce)?;
            let t = g.add(a, b)?;
            g.reshape(t, &[1])
        })?,
        param_probe("soft_argmax", s(11), 0.1, 1.0, |g| {
            let x = g.param("x", &[3, 12, 12]);
            crate::encodings::soft_argmax_graph(g, x)
        })?,
        silhouette_probe(s(12))?,
        total_loss_probe(s(13))?,
    ];
    list.shrink_to_fit();
    Ok(list)
}

/// Checks every differentiable primitive family and the composed fitting
/// objective against central differences (h = 1e-3, tolerance 1e-4).
pub fn gradient_audit(seed: u64) -> Result<Vec<GradAuditRow>> {
    probes(seed)?
        .into_iter()
        .map(|mut p| {
            let report =
                grad_check(&p.graph, &mut p.values, p.head, &[], AUDIT_H, AUDIT_TOL)?;
            Ok(GradAuditRow {
                name: p.name,
                max_rel_err: report.max_err(),
                passed: report.passed(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::loss::term;

    fn small_run_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.dataset.image_width = 64;
        config.dataset.image_height = 64;
        config.net.input_width = 64;
        config.net.input_height = 64;
        config.net.channels = 16;
        config.net.stacks = 1;
        config
    }

    #[test]
    fn gradient_audit_passes() {
        for row in gradient_audit(11).unwrap() {
            assert!(row.passed, "{}: max rel err {:.3e}", row.name, row.max_rel_err);
        }
    }

    #[test]
    fn fit_summary_on_empty_dataset_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 0, 3).unwrap();
        let summary = run_fit(dir.path(), out.path(), &config, None).unwrap();
        assert!(summary.records.is_empty());
        assert!(summary.failures.is_empty());
        assert_eq!(summary.mean_reproj_px, None);
        let text = fs::read_to_string(out.path().join("summary.json")).unwrap();
        assert!(text.contains("failures"));
    }

    #[test]
    fn corrupt_record_is_collected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut config = small_run_config();
        // one quick stage keeps the healthy record cheap
        config.optim.iterations = [40, 0];
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 2, 3).unwrap();
        fs::write(dir.path().join("rec_00001/heatmaps.hkt"), b"garbage").unwrap();
        let summary = run_fit(dir.path(), out.path(), &config, Some(2)).unwrap();
        assert_eq!(summary.records.len(), 1);
        assert_eq!(summary.failures.len(), 1);
        assert_eq!(summary.failures[0].name, "rec_00001");
    }

    #[test]
    fn train_toy_zero_steps_checkpoint_equals_init() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 1, 3).unwrap();
        let opts = TrainToyOptions { steps: 0, ..TrainToyOptions::default() };
        let summary = run_train_toy(dir.path(), out.path(), &config, &opts).unwrap();
        assert_eq!(summary.steps_run, 0);
        assert!(!summary.diverged);
        let (loaded_config, loaded) =
            crate::net::load_checkpoint(&out.path().join("checkpoint")).unwrap();
        assert_eq!(loaded_config, config.net);
        let init = NetParams::<f64>::init(&config.net, config.seed).unwrap();
        for (name, t) in init.iter() {
            assert_eq!(loaded.get(name).unwrap().data(), t.data(), "{name} changed");
        }
    }

    #[test]
    fn train_toy_runs_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 2, 3).unwrap();
        let opts = TrainToyOptions { steps: 3, eval_every: 2, ..TrainToyOptions::default() };
        let summary = run_train_toy(dir.path(), out.path(), &config, &opts).unwrap();
        assert_eq!(summary.steps_run, 3);
        assert_eq!(summary.evals.len(), 2);
        assert_eq!(summary.evals[0].step, 2);
        assert_eq!(summary.evals[1].step, 3);
        let log = fs::read_to_string(out.path().join("log.csv")).unwrap();
        assert!(log.starts_with("step,term,value\n"));
        assert!(log.contains(&format!("3,{},", term::TOTAL)));
        assert!(out.path().join("eval.csv").is_file());
        assert!(out.path().join("train.json").is_file());
    }

    #[test]
    fn eval_identity_predictions_score_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let pred = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 2, 3).unwrap();
        for name in ["rec_00000", "rec_00001"] {
            let src = fs::read_to_string(dir.path().join(name).join("params.json")).unwrap();
            fs::create_dir_all(pred.path().join(name)).unwrap();
            fs::write(pred.path().join(name).join("fit.json"), src).unwrap();
        }
        let bundle = run_eval(pred.path(), dir.path(), out.path(), &config).unwrap();
        assert_eq!(bundle.records, 2);
        assert!(bundle.mean_kpt_px < 1e-9);
        assert!(bundle.pck_2d.fractions.iter().all(|&f| f == 1.0));
        assert_eq!(bundle.auc_2d, 1.0);
        assert_eq!(bundle.miou, 1.0);
        assert!(bundle.vertex_root.mean_mm < 1e-9);
        assert!(bundle.vertex_procrustes.mean_mm < 1e-6);
        for f in ["metrics.json", "pck_2d.csv", "vertex_root.csv", "vertex_procrustes.csv", "pck_2d.png"] {
            assert!(out.path().join(f).is_file(), "{f} missing");
        }
    }

    #[test]
    fn eval_rejects_mismatched_record_sets_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let pred = tempfile::tempdir().unwrap();
        let out_root = tempfile::tempdir().unwrap();
        let out = out_root.path().join("eval");
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 2, 3).unwrap();
        // prediction for record 0 only, plus an unmatched extra
        let src = fs::read_to_string(dir.path().join("rec_00000/params.json")).unwrap();
        fs::create_dir_all(pred.path().join("rec_00000")).unwrap();
        fs::write(pred.path().join("rec_00000/fit.json"), &src).unwrap();
        assert!(run_eval(pred.path(), dir.path(), &out, &config).is_err());
        assert!(!out.exists(), "failed eval must not write partial output");

        fs::create_dir_all(pred.path().join("rec_00001")).unwrap();
        fs::write(pred.path().join("rec_00001/fit.json"), &src).unwrap();
        fs::create_dir_all(pred.path().join("rec_00099")).unwrap();
        fs::write(pred.path().join("rec_00099/fit.json"), &src).unwrap();
        assert!(run_eval(pred.path(), dir.path(), &out, &config).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn eval_matches_direct_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let pred = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 2, 3).unwrap();
        // predictions = record 1's params for both records: nonzero errors
        let src = fs::read_to_string(dir.path().join("rec_00001/params.json")).unwrap();
        for name in ["rec_00000", "rec_00001"] {
            fs::create_dir_all(pred.path().join(name)).unwrap();
            fs::write(pred.path().join(name).join("fit.json"), &src).unwrap();
        }
        let bundle = run_eval(pred.path(), dir.path(), out.path(), &config).unwrap();

        // recompute the pooled 2D curve by hand
        let data = &config.dataset;
        let state: FitState = serde_json::from_str(&src).unwrap();
        let mut errors = Vec::new();
        for name in ["rec_00000", "rec_00001"] {
            let rec = read_record(dir.path(), name, data).unwrap();
            let (_, px) = posed_geometry(&model, &state, data).unwrap();
            for (p, g) in px.iter().zip(&rec.kpts2d) {
                errors.push(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt());
            }
        }
        let grid = config.metrics.grid_2d_px.thresholds().unwrap();
        let direct = pck_curve(&errors, &grid).unwrap();
        assert_eq!(bundle.pck_2d, direct);
        assert_eq!(bundle.auc_2d, auc(&direct).unwrap());
        assert!((bundle.mean_kpt_px - mean(&errors)).abs() < 1e-12);
    }

    #[test]
    fn overlay_writes_three_pngs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let model = config.model().unwrap();
        synth_dataset(dir.path(), &model, &config.dataset, 1, 3).unwrap();
        let report =
            render_overlay(dir.path(), "rec_00000", None, &config, out_a.path()).unwrap();
        assert!(report.mask_iou > 0.99, "identity overlay IoU {}", report.mask_iou);
        assert_eq!(report.files.len(), 3);
        for f in &report.files {
            assert!(f.is_file());
        }
        render_overlay(dir.path(), "rec_00000", None, &config, out_b.path()).unwrap();
        for f in ["input.png", "overlay.png", "skeleton.png"] {
            let a = fs::read(out_a.path().join(f)).unwrap();
            let b = fs::read(out_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs across identical runs");
        }
        assert!(render_overlay(dir.path(), "rec_99999", None, &config, out_a.path()).is_err());
    }
}

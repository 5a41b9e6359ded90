//! Subcommand implementations shared by the binary and the tests.
//!
//! Dataset layout written by [`synth`]:
//!
//! ```text
//! <dir>/manifest.cfg              effective configuration
//! <dir>/measurements/NNNNNN.txt   one measurement file per frame
//! <dir>/label_gt/NNNNNN.txt       KITTI ground-truth labels
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::energy::Measurement;
use crate::error::{Error, Result};
use crate::geometry::{box3d_corners, project, BOX_EDGES};
use crate::metrics::{format_curves, format_table, full_report, Difficulty, EvalFrame, MetricRow};
use crate::refine::{refine_ablation, RefineResult, Variant};
use crate::scene::{
    clipped_box, emit_labels, generate_scene, label_to_pose, parse_labels, pose_to_label, read_measurements,
    write_measurements, LabelRecord,
};
use crate::shape::{learn_em, read_model, write_model, LandmarkObservations, MorphableModel};

pub const MANIFEST: &str = "manifest.cfg";
pub const MEASUREMENT_DIR: &str = "measurements";
pub const LABEL_DIR: &str = "label_gt";
pub const PREDICTION_DIR: &str = "pred";

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

/// Sorted frame names (file stems) of `*.txt` files in `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn file_error(path: &Path, err: Error) -> Error {
    match err {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

fn read_labels_file(path: &Path) -> Result<Vec<LabelRecord>> {
    let f = fs::File::open(path)?;
    parse_labels(BufReader::new(f)).map_err(|e| file_error(path, e))
}

fn read_measurements_file(path: &Path) -> Result<Vec<Measurement>> {
    let f = fs::File::open(path)?;
    read_measurements(BufReader::new(f)).map_err(|e| file_error(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub frames: usize,
    pub instances: usize,
}

/// Generate `cfg.scenes` frames into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let seed = cfg.seed.ok_or_else(|| Error::Config("synth requires a seed".into()))?;
    fs::create_dir_all(out.join(MEASUREMENT_DIR))?;
    fs::create_dir_all(out.join(LABEL_DIR))?;
    let counts = with_pool(cfg.jobs, || {
        (0..cfg.scenes)
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let frame = generate_scene(&cfg.scene, &cfg.noise, seed, i as u64)?;
                let name = frame_name(i);
                write_atomic(
                    &out.join(MEASUREMENT_DIR).join(format!("{name}.txt")),
                    &write_measurements(&frame.measurements, &frame.scene.camera, &frame.scene.ground),
                )?;
                write_atomic(&out.join(LABEL_DIR).join(format!("{name}.txt")), &emit_labels(&frame.labels))?;
                Ok(frame.labels.len())
            })
            .collect::<Result<Vec<_>>>()
    })??;
    write_atomic(&out.join(MANIFEST), &cfg.to_text())?;
    Ok(SynthSummary {
        frames: cfg.scenes,
        instances: counts.iter().sum(),
    })
}

/// One frame of a dataset on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub name: String,
    pub measurements: Vec<Measurement>,
    pub ground_truth: Vec<LabelRecord>,
}

/// Load measurements and, when present, ground-truth labels.
pub fn load_dataset(dir: &Path) -> Result<Vec<FrameData>> {
    let mdir = dir.join(MEASUREMENT_DIR);
    let gdir = dir.join(LABEL_DIR);
    let names = list_frames(&mdir)?;
    names
        .into_iter()
        .map(|name| {
            let measurements = read_measurements_file(&mdir.join(format!("{name}.txt")))?;
            let gt_path = gdir.join(format!("{name}.txt"));
            let ground_truth = if gt_path.exists() {
                read_labels_file(&gt_path)?
            } else {
                Vec::new()
            };
            Ok(FrameData {
                name,
                measurements,
                ground_truth,
            })
        })
        .collect()
}

/// Read the manifest stored with a dataset.
pub fn load_manifest(dir: &Path) -> Result<RunConfig> {
    RunConfig::from_text(&fs::read_to_string(dir.join(MANIFEST))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnSummary {
    pub model: MorphableModel,
    pub aligned: MorphableModel,
    pub report: String,
}

/// Learn a morphable model from the landmarks of a dataset and write
/// `model.txt` (learned frame), `model_box.txt` (box frame) and
/// `learn_report.txt` into `out`.
pub fn shape_learn(cfg: &RunConfig, data: &Path, out: &Path) -> Result<LearnSummary> {
    cfg.validate()?;
    let frames = load_dataset(data)?;
    let obs: Vec<LandmarkObservations> = frames
        .iter()
        .flat_map(|f| f.measurements.iter())
        .map(|m| LandmarkObservations {
            points: m.landmarks.clone(),
        })
        .collect();
    let result = with_pool(cfg.jobs, || learn_em(&obs, cfg.learn_basis, &cfg.learn))??;
    let aligned = result.model.aligned_to(&MorphableModel::car_template(cfg.learn_basis));
    fs::create_dir_all(out)?;
    write_atomic(&out.join("model.txt"), &write_model(&result.model))?;
    write_atomic(&out.join("model_box.txt"), &write_model(&aligned))?;
    let mut report = String::new();
    let _ = writeln!(report, "instances_total = {}", obs.len());
    let _ = writeln!(report, "instances_used = {}", result.used.len());
    let _ = writeln!(report, "basis = {}", cfg.learn_basis);
    let _ = writeln!(report, "iterations = {}", result.iterations);
    let _ = writeln!(report, "converged = {}", result.converged);
    let _ = writeln!(report, "final_log_likelihood = {}", result.final_log_likelihood());
    let _ = writeln!(report, "noise_variance = {}", result.noise_variance);
    let _ = writeln!(report, "reprojection_rmse = {}", result.reprojection_rmse);
    let _ = writeln!(report, "mean_reprojection_error = {}", result.mean_reprojection_error);
    write_atomic(&out.join("learn_report.txt"), &report)?;
    write_atomic(&out.join("config.cfg"), &cfg.to_text())?;
    Ok(LearnSummary {
        model: result.model,
        aligned,
        report,
    })
}

/// Outcome of refining one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFit {
    pub frame: String,
    pub index: usize,
    pub result: std::result::Result<(RefineResult, LabelRecord), String>,
}

/// Predictions for one frame, in measurement order.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub name: String,
    pub fits: Vec<InstanceFit>,
}

impl FramePrediction {
    pub fn labels(&self) -> Vec<LabelRecord> {
        self.fits
            .iter()
            .filter_map(|f| f.result.as_ref().ok().map(|(_, l)| l.clone()))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.fits.iter().filter(|f| f.result.is_err()).count()
    }
}

fn fit_one(
    cfg: &RunConfig,
    model: &MorphableModel,
    variant: Variant,
    meas: &Measurement,
) -> std::result::Result<(RefineResult, LabelRecord), String> {
    let r = refine_ablation(meas, model, &cfg.energy, variant, &cfg.solver).map_err(|e| e.to_string())?;
    let pose = r.vars.pose();
    let (bbox, truncation) = clipped_box(&meas.camera, &pose, cfg.scene.image_width, cfg.scene.image_height)
        .map_err(|e| e.to_string())?;
    if truncation >= 1.0 {
        return Err("predicted box lies outside the image".into());
    }
    let label = pose_to_label(&pose, "Car", bbox, truncation, 0, Some(meas.score));
    Ok((r, label))
}

/// Refine every measurement of `frames` with `variant`.
pub fn fit_frames(
    cfg: &RunConfig,
    frames: &[FrameData],
    model: &MorphableModel,
    variant: Variant,
) -> Result<Vec<FramePrediction>> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.measurements.len()).map(move |i| (f, i)))
        .collect();
    let results: Vec<InstanceFit> = with_pool(cfg.jobs, || {
        tasks
            .par_iter()
            .map(|&(f, i)| InstanceFit {
                frame: frames[f].name.clone(),
                index: i,
                result: fit_one(cfg, model, variant, &frames[f].measurements[i]),
            })
            .collect()
    })?;
    let mut out: Vec<FramePrediction> = frames
        .iter()
        .map(|f| FramePrediction {
            name: f.name.clone(),
            fits: Vec::with_capacity(f.measurements.len()),
        })
        .collect();
    for (fit, &(f, _)) in results.into_iter().zip(&tasks) {
        out[f].fits.push(fit);
    }
    Ok(out)
}

/// Per-instance diagnostics table.
pub fn format_diagnostics(preds: &[FramePrediction], variant: Variant) -> String {
    let mut out = String::from(
        "# frame instance variant status iterations termination energy box landmarks depth ground shape hull_tie\n",
    );
    for p in preds {
        for fit in &p.fits {
            match &fit.result {
                Ok((r, _)) => {
                    let b = &r.breakdown;
                    let _ = writeln!(
                        out,
                        "{} {} {} ok {} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {}",
                        fit.frame,
                        fit.index,
                        variant,
                        r.iterations,
                        r.termination.as_str(),
                        r.final_energy,
                        b.box2d3d,
                        b.landmarks,
                        b.depth,
                        b.ground,
                        b.shape,
                        r.hull_tie
                    );
                }
                Err(msg) => {
                    let _ = writeln!(out, "{} {} {} failed \"{}\"", fit.frame, fit.index, variant, msg);
                }
            }
        }
    }
    out
}

/// Load the model at `path`, or the built-in template when absent.
pub fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<MorphableModel> {
    match path {
        Some(p) => {
            let f = fs::File::open(p)?;
            read_model(BufReader::new(f)).map_err(|e| file_error(p, e))
        }
        None => Ok(MorphableModel::car_template(cfg.scene.n_basis)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub instances: usize,
    pub failures: usize,
}

/// Refine a dataset and write `pred/NNNNNN.txt`, `diagnostics.txt` and
/// `config.cfg` into `out`.
pub fn fit(cfg: &RunConfig, data: &Path, model_path: Option<&Path>, variant: Variant, out: &Path) -> Result<FitSummary> {
    cfg.validate()?;
    let model = load_model(cfg, model_path)?;
    let frames = load_dataset(data)?;
    let preds = fit_frames(cfg, &frames, &model, variant)?;
    write_predictions(&preds, out)?;
    write_atomic(&out.join("diagnostics.txt"), &format_diagnostics(&preds, variant))?;
    let mut echo = cfg.to_text();
    let _ = writeln!(echo, "# variant {variant}");
    write_atomic(&out.join("config.cfg"), &echo)?;
    Ok(FitSummary {
        instances: preds.iter().map(|p| p.fits.len()).sum(),
        failures: preds.iter().map(FramePrediction::failures).sum(),
    })
}

pub fn write_predictions(preds: &[FramePrediction], out: &Path) -> Result<()> {
    let dir = out.join(PREDICTION_DIR);
    fs::create_dir_all(&dir)?;
    for p in preds {
        write_atomic(&dir.join(format!("{}.txt", p.name)), &emit_labels(&p.labels()))?;
    }
    Ok(())
}

/// Pair predictions with ground truth; both sides must cover the same frames.
pub fn load_eval_frames(gt_dir: &Path, pred_dir: &Path) -> Result<Vec<EvalFrame>> {
    let gt = list_frames(gt_dir)?;
    let pred = list_frames(pred_dir)?;
    let mut missing: Vec<String> = gt
        .iter()
        .filter(|n| pred.binary_search(n).is_err())
        .map(|n| format!("{n} (predictions)"))
        .collect();
    missing.extend(
        pred.iter()
            .filter(|n| gt.binary_search(n).is_err())
            .map(|n| format!("{n} (ground truth)")),
    );
    if !missing.is_empty() {
        return Err(Error::MissingFrames(missing));
    }
    gt.iter()
        .map(|n| {
            Ok(EvalFrame {
                ground_truth: read_labels_file(&gt_dir.join(format!("{n}.txt")))?,
                detections: read_labels_file(&pred_dir.join(format!("{n}.txt")))?,
            })
        })
        .collect()
}

/// Metric table, PR curves, and plot data for an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub rows: Vec<MetricRow>,
    pub table: String,
    pub curves: String,
}

pub fn evaluate_frames(cfg: &RunConfig, frames: &[EvalFrame]) -> EvalOutput {
    let (rows, curves) = full_report(frames, &cfg.eval);
    EvalOutput {
        table: format_table(&rows),
        curves: format_curves(&curves),
        rows,
    }
}

/// Polyline data for external plotting: bird's-eye footprints and projected
/// wireframes of every ground-truth and predicted box.
pub fn plot_data(cfg: &RunConfig, names: &[String], frames: &[EvalFrame]) -> (String, String) {
    let mut bev = String::from("# frame source index x0 z0 x1 z1 x2 z2 x3 z3 x0 z0\n");
    let mut wire = String::from("# frame source index edge u0 v0 u1 v1\n");
    let cam = cfg.scene.camera;
    for (name, f) in names.iter().zip(frames) {
        for (source, labels) in [("gt", &f.ground_truth), ("det", &f.detections)] {
            for (i, l) in labels.iter().filter(|l| !l.is_dont_care()).enumerate() {
                let pose = label_to_pose(l);
                let fp = pose.footprint();
                let _ = write!(bev, "{name} {source} {i}");
                for p in fp.iter().chain(std::iter::once(&fp[0])) {
                    let _ = write!(bev, " {:.4} {:.4}", p.x, p.y);
                }
                bev.push('\n');
                let corners = box3d_corners(&pose);
                let Ok(uv) = corners.iter().map(|c| project(&cam, c)).collect::<Result<Vec<_>>>() else {
                    continue;
                };
                for (e, (a, b)) in BOX_EDGES.iter().enumerate() {
                    let _ = writeln!(
                        wire,
                        "{name} {source} {i} {e} {:.3} {:.3} {:.3} {:.3}",
                        uv[*a].x, uv[*a].y, uv[*b].x, uv[*b].y
                    );
                }
            }
        }
    }
    (bev, wire)
}

/// Evaluate `pred_dir` against `gt_dir`; with `out`, also write
/// `metrics.txt`, `curves.txt` and, when `plots`, the overlay files.
pub fn eval(cfg: &RunConfig, gt_dir: &Path, pred_dir: &Path, out: Option<&Path>, plots: bool) -> Result<EvalOutput> {
    cfg.validate()?;
    let frames = load_eval_frames(gt_dir, pred_dir)?;
    let result = evaluate_frames(cfg, &frames);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_atomic(&out.join("metrics.txt"), &result.table)?;
        write_atomic(&out.join("curves.txt"), &result.curves)?;
        write_atomic(&out.join("config.cfg"), &cfg.to_text())?;
        if plots {
            let names = list_frames(gt_dir)?;
            let (bev, wire) = plot_data(cfg, &names, &frames);
            write_atomic(&out.join("bev_footprints.txt"), &bev)?;
            write_atomic(&out.join("wireframes.txt"), &wire)?;
        }
    }
    Ok(result)
}

/// Metrics reported by the ablation table.
pub const ABLATION_METRICS: [&str; 3] = ["ALP@1m", "AP3D@0.25", "APbev@0.5"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per metric of [`ABLATION_METRICS`], per difficulty.
    pub values: [[Option<f64>; 3]; 3],
    pub failures: usize,
}

impl AblationRow {
    pub fn value(&self, metric: usize, difficulty: Difficulty) -> Option<f64> {
        self.values[metric][difficulty as usize]
    }
}

/// Run every variant on the same data and evaluate each.
pub fn ablate_frames(cfg: &RunConfig, frames: &[FrameData], model: &MorphableModel) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let preds = fit_frames(cfg, frames, model, variant)?;
        let eval_frames: Vec<EvalFrame> = frames
            .iter()
            .zip(&preds)
            .map(|(f, p)| EvalFrame {
                detections: p.labels(),
                ground_truth: f.ground_truth.clone(),
            })
            .collect();
        let report = evaluate_frames(cfg, &eval_frames);
        let mut values = [[None; 3]; 3];
        for (m, name) in ABLATION_METRICS.iter().enumerate() {
            if let Some(row) = report.rows.iter().find(|r| r.name == *name) {
                values[m] = row.values;
            }
        }
        rows.push(AblationRow {
            variant,
            values,
            failures: preds.iter().map(FramePrediction::failures).sum(),
        });
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for (m, name) in ABLATION_METRICS.iter().enumerate() {
        let _ = writeln!(out, "{name}");
        let _ = write!(out, "{:<8}", "variant");
        for d in Difficulty::ALL {
            let _ = write!(out, " {:>9}", d.as_str());
        }
        out.push('\n');
        for r in rows {
            let _ = write!(out, "{:<8}", r.variant.as_str());
            for v in r.values[m] {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {v:>9.2}");
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Ablation over a dataset on disk; writes `ablation.txt` and `config.cfg`.
pub fn ablate(cfg: &RunConfig, data: &Path, model_path: Option<&Path>, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let model = load_model(cfg, model_path)?;
    let frames = load_dataset(data)?;
    let rows = ablate_frames(cfg, &frames, &model)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("ablation.txt"), &format_ablation(&rows))?;
    write_atomic(&out.join("config.cfg"), &cfg.to_text())?;
    Ok(rows)
}

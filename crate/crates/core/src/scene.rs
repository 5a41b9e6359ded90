//! Synthetic scenes, KITTI object labels and per-frame measurement files.
//!
//! The generator stands in for the 2D detectors: it samples ground-resting
//! cars, renders exact boxes and landmarks through the camera, then corrupts
//! them with a [`NoiseSpec`].

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::energy::Measurement;
use crate::error::{Error, Result};
use crate::geometry::{
    box3d_corners, footprint_intersection, project, project_box3d, wrap_angle, wrap_pi, Box2D,
    CameraIntrinsics, GroundPlane, PoseBox3D,
};
use crate::shape::{instantiate, place_in_camera, Landmark, MorphableModel, ShapeCoefficients, LANDMARK_COUNT};

/// Corruption applied to exact pseudo-measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Landmark position noise (px).
    pub landmark_px_sigma: f64,
    /// Probability that a landmark is hidden by an external occluder.
    pub landmark_occlusion_rate: f64,
    /// Noise on each 2D box edge (px).
    pub box_px_sigma: f64,
    /// Yaw hypothesis noise (degrees).
    pub theta_sigma_deg: f64,
    /// Log-extent hypothesis noise.
    pub sigma_log_sigma: f64,
    /// Relative noise of the crop depth.
    pub depth_rel_sigma: f64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            landmark_px_sigma: 0.0,
            landmark_occlusion_rate: 0.0,
            box_px_sigma: 0.0,
            theta_sigma_deg: 0.0,
            sigma_log_sigma: 0.0,
            depth_rel_sigma: 0.0,
        }
    }

    /// The noisy benchmark used for ablations.
    pub fn standard() -> Self {
        Self {
            landmark_px_sigma: 2.0,
            landmark_occlusion_rate: 0.2,
            box_px_sigma: 3.0,
            theta_sigma_deg: 8.0,
            sigma_log_sigma: 0.05,
            depth_rel_sigma: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.landmark_px_sigma,
            self.landmark_occlusion_rate,
            self.box_px_sigma,
            self.theta_sigma_deg,
            self.sigma_log_sigma,
            self.depth_rel_sigma,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("noise parameters must be finite and non-negative".into()));
        }
        if self.landmark_occlusion_rate > 1.0 {
            return Err(Error::Config("occlusion rate must be at most 1".into()));
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::standard()
    }
}

/// Scene layout and object statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub camera: CameraIntrinsics,
    pub image_width: f64,
    pub image_height: f64,
    pub camera_height: f64,
    /// Cars placed per scene (fewer when placement keeps failing).
    pub instances_per_scene: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Mean extents `(L, H, W)` in meters.
    pub size_mean: Vector3<f64>,
    /// Standard deviation of the log extents.
    pub size_log_sd: f64,
    /// Standard deviation of the true shape coefficients.
    pub shape_variation: f64,
    /// Basis count of the generating car template.
    pub n_basis: usize,
    /// Largest truncated box fraction accepted.
    pub max_truncation: f64,
    /// Placement attempts per requested instance.
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics::kitti(),
            image_width: 1242.0,
            image_height: 375.0,
            camera_height: 1.65,
            instances_per_scene: 4,
            min_depth: 5.0,
            max_depth: 60.0,
            size_mean: Vector3::new(3.9, 1.6, 1.6),
            size_log_sd: 0.1,
            shape_variation: 1.0,
            n_basis: 5,
            max_truncation: 0.5,
            max_attempts: 50,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.camera_height > 0.0) {
            return bad("camera height must be positive");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("depth range must satisfy 0 < min < max");
        }
        if self.size_mean.iter().any(|v| !(*v > 0.0)) {
            return bad("mean size must be positive");
        }
        if !(self.size_log_sd >= 0.0 && self.shape_variation >= 0.0) {
            return bad("size and shape spreads must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_truncation) {
            return bad("max truncation must lie in [0, 1]");
        }
        if self.instances_per_scene == 0 || self.max_attempts == 0 {
            return bad("instance count and attempt budget must be positive");
        }
        Ok(())
    }

    pub fn ground(&self) -> GroundPlane {
        GroundPlane::from_camera_height(self.camera_height).expect("validated camera height")
    }

    pub fn model(&self) -> MorphableModel {
        MorphableModel::car_template(self.n_basis)
    }
}

/// One ground-truth car.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub pose: PoseBox3D,
    pub alpha: ShapeCoefficients,
    /// Landmarks facing away from the camera.
    pub self_occluded: Vec<bool>,
    /// Landmarks hidden by the random occluder.
    pub randomly_occluded: Vec<bool>,
    pub truncation: f64,
    pub occluded_level: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    pub instances: Vec<SceneInstance>,
    pub seed: u64,
    pub index: u64,
}

/// A generated frame: scene, one measurement and one label per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFrame {
    pub scene: SyntheticScene,
    pub measurements: Vec<Measurement>,
    pub labels: Vec<LabelRecord>,
}

/// Viewing-azimuth window in which a landmark faces the camera:
/// `(center, half_width)` in degrees, azimuth measured in the box frame from
/// `+x` towards `+z`.
const VISIBLE_AZIMUTH: [(f64, f64); LANDMARK_COUNT] = [
    (90.0, 95.0),
    (-90.0, 95.0),
    (90.0, 95.0),
    (-90.0, 95.0),
    (36.0, 90.0),
    (-36.0, 90.0),
    (144.0, 90.0),
    (-144.0, 90.0),
    (90.0, 105.0),
    (-90.0, 105.0),
    (47.0, 120.0),
    (-47.0, 120.0),
    (133.0, 120.0),
    (-133.0, 120.0),
];

/// Which landmarks face away from the camera for this pose.
pub fn self_occlusion(pose: &PoseBox3D) -> Vec<bool> {
    let to_camera = pose.rotation().transpose() * (-pose.center());
    let azimuth = to_camera.z.atan2(to_camera.x);
    VISIBLE_AZIMUTH
        .iter()
        .map(|(center, half)| wrap_pi(azimuth - center.to_radians()).abs() > half.to_radians())
        .collect()
}

/// Image box clipped to the image, and the fraction of the full projected
/// box lying outside.
pub fn clipped_box(cam: &CameraIntrinsics, pose: &PoseBox3D, width: f64, height: f64) -> Result<([f64; 4], f64)> {
    let b = project_box3d(cam, pose)?;
    let (l, t, r, btm) = b.edges();
    let cl = l.clamp(0.0, width);
    let cr = r.clamp(0.0, width);
    let ct = t.clamp(0.0, height);
    let cb = btm.clamp(0.0, height);
    let inside = (cr - cl).max(0.0) * (cb - ct).max(0.0);
    let truncation = (1.0 - inside / ((r - l) * (btm - t))).clamp(0.0, 1.0);
    Ok(([cl, ct, cr, cb], truncation))
}

fn occluded_level(fraction: f64) -> u8 {
    match fraction {
        f if f <= 0.25 => 0,
        f if f <= 0.5 => 1,
        f if f <= 0.75 => 2,
        _ => 3,
    }
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_instance(params: &SceneParams, model: &MorphableModel, rng: &mut ChaCha8Rng) -> Option<(PoseBox3D, ShapeCoefficients)> {
    let ground = params.ground();
    let z = rng.random_range(params.min_depth..params.max_depth);
    let u = rng.random_range(0.05 * params.image_width..0.95 * params.image_width);
    let x = (u - params.camera.cx) * z / params.camera.fx;
    let y = ground.y_at(x, z)?;
    let theta = rng.random_range(0.0..TAU);
    let sigma = params.size_mean.map(f64::ln) + Vector3::from_fn(|_, _| gauss(rng, params.size_log_sd));
    let alpha = DVector::from_fn(model.basis_count(), |_, _| gauss(rng, params.shape_variation).clamp(-3.0, 3.0));
    let pose = PoseBox3D::new(theta, Vector3::new(x, y, z), sigma);
    if box3d_corners(&pose).iter().any(|c| c.z < 1.0) {
        return None;
    }
    Some((pose, ShapeCoefficients(alpha)))
}

/// Generate frame `index` of the dataset identified by `seed`.
pub fn generate_scene(params: &SceneParams, noise: &NoiseSpec, seed: u64, index: u64) -> Result<GeneratedFrame> {
    params.validate()?;
    noise.validate()?;
    let model = params.model();
    let ground = params.ground();
    let cam = params.camera;
    let mut rng = scene_rng(seed, index);

    let mut instances = Vec::new();
    let mut measurements = Vec::new();
    let mut labels = Vec::new();
    let budget = params.max_attempts * params.instances_per_scene;
    let mut attempts = 0;
    while instances.len() < params.instances_per_scene && attempts < budget {
        attempts += 1;
        let Some((pose, alpha)) = sample_instance(params, &model, &mut rng) else {
            continue;
        };
        let Ok((bbox, truncation)) = clipped_box(&cam, &pose, params.image_width, params.image_height) else {
            continue;
        };
        if truncation > params.max_truncation {
            continue;
        }
        if instances
            .iter()
            .any(|o: &SceneInstance| footprint_intersection(&o.pose, &pose) > 0.0)
        {
            continue;
        }

        let points = place_in_camera(&instantiate(&model, &alpha)?, &pose);
        let self_occluded = self_occlusion(&pose);
        let mut randomly_occluded = vec![false; LANDMARK_COUNT];
        let mut landmarks = Vec::with_capacity(LANDMARK_COUNT);
        for k in 0..LANDMARK_COUNT {
            let p = project(&cam, &points[k])?;
            let hit = rng.random_bool(noise.landmark_occlusion_rate);
            randomly_occluded[k] = hit;
            let du = gauss(&mut rng, noise.landmark_px_sigma);
            let dv = gauss(&mut rng, noise.landmark_px_sigma);
            let in_image = (0.0..=params.image_width).contains(&p.x) && (0.0..=params.image_height).contains(&p.y);
            landmarks.push(if self_occluded[k] || hit || !in_image {
                Landmark::hidden()
            } else {
                Landmark::visible(p.x + du, p.y + dv)
            });
        }
        let facing = self_occluded.iter().filter(|s| !**s).count().max(1);
        let hidden_facing = (0..LANDMARK_COUNT)
            .filter(|&k| !self_occluded[k] && randomly_occluded[k])
            .count();
        let level = occluded_level(hidden_facing as f64 / facing as f64);

        let exact = project_box3d(&cam, &pose)?;
        let (l, t, r, b) = exact.edges();
        let noisy = Box2D::from_edges(
            l + gauss(&mut rng, noise.box_px_sigma),
            t + gauss(&mut rng, noise.box_px_sigma),
            r + gauss(&mut rng, noise.box_px_sigma),
            b + gauss(&mut rng, noise.box_px_sigma),
        )
        .unwrap_or(exact);
        let theta0 = wrap_angle(pose.theta + gauss(&mut rng, noise.theta_sigma_deg).to_radians());
        let sigma0 = pose.sigma + Vector3::from_fn(|_, _| gauss(&mut rng, noise.sigma_log_sigma));
        let depth = (pose.translation.z * (1.0 + gauss(&mut rng, noise.depth_rel_sigma))).max(0.5);
        // Synthetic detector confidence: larger and less occluded boxes
        // score higher, jittered to avoid exact ties.
        let size_term = 1.0 - (-(bbox[3] - bbox[1]) / 40.0).exp();
        let score = (0.2 + 0.7 * size_term * (1.0 - 0.5 * truncation) - 0.1 * level as f64
            + rng.random_range(0.0..0.05))
        .clamp(0.01, 1.0);

        measurements.push(Measurement {
            box2d: noisy,
            landmarks,
            depth: Some(depth),
            theta0,
            sigma0,
            ground,
            camera: cam,
            score,
        });
        labels.push(pose_to_label(&pose, "Car", bbox, truncation, level, None));
        instances.push(SceneInstance {
            pose,
            alpha,
            self_occluded,
            randomly_occluded,
            truncation,
            occluded_level: level,
        });
    }
    if instances.is_empty() {
        return Err(Error::NoInstancesInView { attempts });
    }
    Ok(GeneratedFrame {
        scene: SyntheticScene {
            camera: cam,
            ground,
            instances,
            seed,
            index,
        },
        measurements,
        labels,
    })
}

/// One KITTI object label line.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    /// Observation angle.
    pub alpha: f64,
    /// `(left, top, right, bottom)` in pixels.
    pub bbox: [f64; 4],
    /// `(h, w, l)` in meters.
    pub dimensions: [f64; 3],
    /// Bottom-face center in the camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn box2d(&self) -> Option<Box2D> {
        Box2D::from_edges(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// Observation angle of an object at `location` with yaw `rotation_y`.
pub fn observation_angle(rotation_y: f64, location: &Vector3<f64>) -> f64 {
    wrap_pi(rotation_y - location.x.atan2(location.z))
}

pub fn pose_to_label(
    pose: &PoseBox3D,
    kind: &str,
    bbox: [f64; 4],
    truncated: f64,
    occluded: u8,
    score: Option<f64>,
) -> LabelRecord {
    let e = pose.extents();
    let rotation_y = wrap_pi(pose.theta);
    LabelRecord {
        kind: kind.to_string(),
        truncated,
        occluded: occluded as i32,
        alpha: observation_angle(rotation_y, &pose.translation),
        bbox,
        dimensions: [e.y, e.z, e.x],
        location: [pose.translation.x, pose.translation.y, pose.translation.z],
        rotation_y,
        score,
    }
}

pub fn label_to_pose(label: &LabelRecord) -> PoseBox3D {
    let [h, w, l] = label.dimensions;
    PoseBox3D::new(
        wrap_angle(label.rotation_y),
        Vector3::from(label.location),
        Vector3::new(l.ln(), h.ln(), w.ln()),
    )
}

/// Exact measurement implied by a label: its box, pose hypotheses and crop
/// depth. No landmark is observed.
pub fn label_to_measurement(label: &LabelRecord, camera: CameraIntrinsics, ground: GroundPlane) -> Result<Measurement> {
    let pose = label_to_pose(label);
    Ok(Measurement {
        box2d: project_box3d(&camera, &pose)?,
        landmarks: vec![Landmark::hidden(); LANDMARK_COUNT],
        depth: Some(pose.translation.z),
        theta0: pose.theta,
        sigma0: pose.sigma,
        ground,
        camera,
        score: label.score.unwrap_or(1.0),
    })
}

fn parse_f64(tok: &str, line: usize, field: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {field} '{tok}'"),
    })
}

/// Parse KITTI label text; blank lines are skipped.
pub fn parse_labels<R: BufRead>(reader: R) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 15 && toks.len() != 16 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let num = |j: usize, field: &str| parse_f64(toks[j], line_no, field);
        let kind = toks[0].to_string();
        let truncated = num(1, "truncated")?;
        let occluded_raw = num(2, "occluded")?;
        let dont_care = kind == "DontCare";
        let sentinel = |v: f64| dont_care && v == -1.0;
        if !(sentinel(truncated) || (0.0..=1.0).contains(&truncated)) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("truncated {truncated} outside [0, 1]"),
            });
        }
        if occluded_raw.fract() != 0.0 || !(sentinel(occluded_raw) || (0.0..=3.0).contains(&occluded_raw)) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("occluded {occluded_raw} not in {{0, 1, 2, 3}}"),
            });
        }
        let record = LabelRecord {
            kind,
            truncated,
            occluded: occluded_raw as i32,
            alpha: num(3, "alpha")?,
            bbox: [num(4, "bbox")?, num(5, "bbox")?, num(6, "bbox")?, num(7, "bbox")?],
            dimensions: [num(8, "dimensions")?, num(9, "dimensions")?, num(10, "dimensions")?],
            location: [num(11, "location")?, num(12, "location")?, num(13, "location")?],
            rotation_y: num(14, "rotation_y")?,
            score: if toks.len() == 16 { Some(num(15, "score")?) } else { None },
        };
        if let Some(s) = record.score {
            if !s.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "score must be finite".into(),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    // Avoid "-0.000000" so emission is stable under round-trips.
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// KITTI label text; records with scores are sorted by descending score.
pub fn emit_labels(records: &[LabelRecord]) -> String {
    let mut order: Vec<&LabelRecord> = records.iter().collect();
    order.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let mut out = String::new();
    for r in order {
        let _ = write!(
            out,
            "{} {} {} {}",
            r.kind,
            fmt6(r.truncated),
            r.occluded,
            fmt6(r.alpha)
        );
        for v in r.bbox.iter().chain(&r.dimensions).chain(&r.location) {
            let _ = write!(out, " {}", fmt6(*v));
        }
        let _ = write!(out, " {}", fmt6(r.rotation_y));
        if let Some(s) = r.score {
            let _ = write!(out, " {}", fmt6(s));
        }
        out.push('\n');
    }
    out
}

/// Per-frame measurement file:
///
/// ```text
/// camera <fx> <fy> <cx> <cy>
/// ground <nx> <ny> <nz>
/// instance <tx> <ty> <w> <h> <depth|-> <theta0> <sL> <sH> <sW> <score> (<u> <v> <0|1>) x K
/// ```
pub fn write_measurements(measurements: &[Measurement], camera: &CameraIntrinsics, ground: &GroundPlane) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "camera {} {} {} {}", camera.fx, camera.fy, camera.cx, camera.cy);
    let n = ground.normal;
    let _ = writeln!(out, "ground {} {} {}", n.x, n.y, n.z);
    for m in measurements {
        let b = &m.box2d;
        let depth = m.depth.map_or_else(|| "-".to_string(), |d| d.to_string());
        let _ = write!(
            out,
            "instance {} {} {} {} {} {} {} {} {} {}",
            b.tx, b.ty, b.w, b.h, depth, m.theta0, m.sigma0.x, m.sigma0.y, m.sigma0.z, m.score
        );
        for lm in &m.landmarks {
            let _ = write!(out, " {} {} {}", lm.u, lm.v, u8::from(lm.visible));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`write_measurements`].
pub fn read_measurements<R: BufRead>(reader: R) -> Result<Vec<Measurement>> {
    let mut camera = None;
    let mut ground = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, rest)) = toks.split_first() else {
            continue;
        };
        if head.starts_with('#') {
            continue;
        }
        let nums = |toks: &[&str]| -> Result<Vec<f64>> {
            toks.iter().map(|t| parse_f64(t, line_no, "number")).collect()
        };
        let arity = |want: usize| -> Result<()> {
            if rest.len() != want {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("'{head}' expects {want} values, found {}", rest.len()),
                });
            }
            Ok(())
        };
        match head {
            "camera" => {
                arity(4)?;
                let v = nums(rest)?;
                camera = Some(CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?);
            }
            "ground" => {
                arity(3)?;
                let v = nums(rest)?;
                ground = Some(GroundPlane::new(Vector3::new(v[0], v[1], v[2])).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?);
            }
            "instance" => {
                let (Some(camera), Some(ground)) = (camera, ground) else {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "instance before camera and ground lines".into(),
                    });
                };
                if rest.len() < 10 || (rest.len() - 10) % 3 != 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("malformed instance with {} values", rest.len()),
                    });
                }
                let depth = if rest[4] == "-" {
                    None
                } else {
                    Some(parse_f64(rest[4], line_no, "depth")?)
                };
                let mut head_vals = nums(&rest[..4])?;
                head_vals.extend(nums(&rest[5..10])?);
                let lm_vals = nums(&rest[10..])?;
                let landmarks = lm_vals
                    .chunks(3)
                    .map(|c| Landmark {
                        u: c[0],
                        v: c[1],
                        visible: c[2] != 0.0,
                    })
                    .collect();
                out.push(Measurement {
                    box2d: Box2D::new(head_vals[0], head_vals[1], head_vals[2], head_vals[3]),
                    landmarks,
                    depth,
                    theta0: head_vals[4],
                    sigma0: Vector3::new(head_vals[5], head_vals[6], head_vals[7]),
                    ground,
                    camera,
                    score: head_vals[8],
                });
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown record '{other}'"),
                })
            }
        }
    }
    Ok(out)
}

/// Ground-truth height range check used by tests and the manifest.
pub fn on_ground(pose: &PoseBox3D, ground: &GroundPlane) -> bool {
    ground.residual(&pose.translation).abs() < 1e-12
}

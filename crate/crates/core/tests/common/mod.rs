//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::TAU;

use mono3d::energy::{linearize, EnergyConfig, Measurement, ShapePriorCenter, Variables};
use mono3d::geometry::{wrap_pi, project, project_box3d, CameraIntrinsics, GroundPlane, PoseBox3D};
use mono3d::metrics::{Bucket, Difficulty, EVAL_CLASS};
use mono3d::scene::LabelRecord;
use mono3d::shape::{
    instantiate, place_in_camera, similarity_fit, Landmark, LandmarkObservations, MorphableModel,
    ShapeCoefficients, LANDMARK_COUNT,
};
use nalgebra::{DMatrix, DVector, Matrix2x3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Jacobian oracle
// ---------------------------------------------------------------------------

/// A random, well-conditioned evaluation point: a car somewhere in front
/// of the camera, noisy measurements, random weights and random toggles of
/// the prior center.
pub fn random_energy_point(rng: &mut ChaCha8Rng) -> (Variables, Measurement, MorphableModel, EnergyConfig) {
    let n_basis = rng.random_range(0..6);
    let model = MorphableModel::car_template(n_basis);
    let cam = CameraIntrinsics::kitti();
    let z = rng.random_range(6.0..50.0);
    let x = rng.random_range(-0.4..0.4) * z;
    let vars = Variables {
        theta: rng.random_range(-TAU..2.0 * TAU),
        translation: Vector3::new(x, rng.random_range(1.0..2.2), z),
        sigma: Vector3::new(
            rng.random_range(1.0..1.6),
            rng.random_range(0.2..0.7),
            rng.random_range(0.2..0.7),
        ),
        alpha: DVector::from_fn(n_basis, |_, _| 1.5 * normal(rng)),
    };
    let pose = vars.pose();
    let truth = place_in_camera(&instantiate(&model, &ShapeCoefficients(vars.alpha.clone())).unwrap(), &pose);
    let landmarks = truth
        .iter()
        .map(|p| {
            let uv = project(&cam, p).unwrap();
            if rng.random_bool(0.25) {
                Landmark::hidden()
            } else {
                Landmark::visible(uv.x + 3.0 * normal(rng), uv.y + 3.0 * normal(rng))
            }
        })
        .collect();
    let mut box2d = project_box3d(&cam, &pose).unwrap();
    box2d.tx += 5.0 * normal(rng);
    box2d.ty += 5.0 * normal(rng);
    box2d.w += 0.05 * normal(rng);
    box2d.h += 0.05 * normal(rng);
    let meas = Measurement {
        box2d,
        landmarks,
        depth: Some(z * (1.0 + 0.1 * normal(rng))),
        theta0: 0.0,
        sigma0: Vector3::zeros(),
        ground: GroundPlane::new(Vector3::new(0.02 * normal(rng), 1.0 / 1.65, 0.02 * normal(rng))).unwrap(),
        camera: cam,
        score: 1.0,
    };
    let cfg = EnergyConfig {
        lambda_landmarks: rng.random_range(0.1..5.0),
        lambda_depth: rng.random_range(0.1..5.0),
        lambda_ground: rng.random_range(0.1..50.0),
        lambda_shape: rng.random_range(0.01..2.0),
        box_translation_scale: rng.random_range(0.5..2.0),
        box_log_scale_scale: rng.random_range(1.0..200.0),
        shape_prior_center: if rng.random_bool(0.5) {
            ShapePriorCenter::InstanceMean
        } else {
            ShapePriorCenter::Zero
        },
        ..EnergyConfig::default()
    };
    (vars, meas, model, cfg)
}

/// Central differences of the weighted residual stack.
pub fn finite_difference_jacobian(
    vars: &Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    step: f64,
) -> DMatrix<f64> {
    let x = vars.to_vector();
    let residual = |x: &DVector<f64>| {
        linearize(&Variables::from_vector(x), meas, model, cfg, false)
            .unwrap()
            .residuals
    };
    let m = residual(&x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for c in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += step;
        xm[c] -= step;
        let d = (residual(&xp) - residual(&xm)) / (2.0 * step);
        jac.set_column(c, &d);
    }
    jac
}

// ---------------------------------------------------------------------------
// Overlap oracle
// ---------------------------------------------------------------------------

fn local_coords(pose: &PoseBox3D, p: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = pose.theta.sin_cos();
    let d = p - pose.translation;
    // Inverse yaw rotation written out by hand.
    Vector3::new(c * d.x - s * d.z, d.y, s * d.x + c * d.z)
}

fn inside_footprint(pose: &PoseBox3D, p: &Vector3<f64>) -> bool {
    let e = pose.sigma.map(f64::exp);
    let l = local_coords(pose, p);
    l.x.abs() <= 0.5 * e.x && l.z.abs() <= 0.5 * e.z
}

fn inside_volume(pose: &PoseBox3D, p: &Vector3<f64>) -> bool {
    let e = pose.sigma.map(f64::exp);
    inside_footprint(pose, p) && p.y <= pose.translation.y && p.y >= pose.translation.y - e.y
}

fn sample_in(pose: &PoseBox3D, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let e = pose.sigma.map(f64::exp);
    let local = Vector3::new(
        rng.random_range(-0.5..0.5) * e.x,
        -rng.random::<f64>() * e.y,
        rng.random_range(-0.5..0.5) * e.z,
    );
    let (s, c) = pose.theta.sin_cos();
    pose.translation + Vector3::new(c * local.x + s * local.z, local.y, -s * local.x + c * local.z)
}

/// Monte-Carlo bird's-eye IoU: sample `a`'s footprint, count hits in `b`.
pub fn monte_carlo_iou_bev(a: &PoseBox3D, b: &PoseBox3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ea, eb) = (a.sigma.map(f64::exp), b.sigma.map(f64::exp));
    let (area_a, area_b) = (ea.x * ea.z, eb.x * eb.z);
    let hits = (0..samples).filter(|_| inside_footprint(b, &sample_in(a, rng))).count();
    let inter = area_a * hits as f64 / samples as f64;
    inter / (area_a + area_b - inter)
}

/// Monte-Carlo volumetric IoU.
pub fn monte_carlo_iou_3d(a: &PoseBox3D, b: &PoseBox3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ea, eb) = (a.sigma.map(f64::exp), b.sigma.map(f64::exp));
    let (va, vb) = (ea.x * ea.y * ea.z, eb.x * eb.y * eb.z);
    let hits = (0..samples).filter(|_| inside_volume(b, &sample_in(a, rng))).count();
    let inter = va * hits as f64 / samples as f64;
    inter / (va + vb - inter)
}

/// Random pair of ground-resting boxes whose overlap spans the full range.
pub fn random_box_pair(rng: &mut ChaCha8Rng) -> (PoseBox3D, PoseBox3D) {
    let sigma = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random_range(0.8f64..5.0).ln(),
            rng.random_range(0.8f64..2.5).ln(),
            rng.random_range(0.8f64..2.5).ln(),
        )
    };
    let a = PoseBox3D::new(rng.random_range(0.0..TAU), Vector3::new(0.0, 1.65, 20.0), sigma(rng));
    let offset = Vector3::new(
        rng.random_range(-2.5..2.5),
        rng.random_range(-1.0..1.0),
        rng.random_range(-2.5..2.5),
    );
    let b = PoseBox3D::new(rng.random_range(0.0..TAU), a.translation + offset, sigma(rng));
    (a, b)
}

// ---------------------------------------------------------------------------
// Metric oracle
// ---------------------------------------------------------------------------

/// Pair test used by the brute-force matcher: `Some(quality)` on a pass.
pub type PairTest<'a> = &'a dyn Fn(&LabelRecord, &LabelRecord) -> Option<f64>;

fn counts_at(gt: &LabelRecord, d: Difficulty) -> bool {
    let h = gt.bbox[3] - gt.bbox[1];
    let bucket = if gt.kind == "DontCare" || gt.occluded < 0 {
        Bucket::Ignored
    } else if h >= 40.0 && gt.occluded == 0 && gt.truncated <= 0.15 {
        Bucket::Easy
    } else if h >= 25.0 && gt.occluded <= 1 && gt.truncated <= 0.30 {
        Bucket::Moderate
    } else if h >= 25.0 && gt.occluded <= 2 && gt.truncated <= 0.50 {
        Bucket::Hard
    } else {
        Bucket::Ignored
    };
    match (bucket, d) {
        (Bucket::Easy, _) => true,
        (Bucket::Moderate, Difficulty::Moderate | Difficulty::Hard) => true,
        (Bucket::Hard, Difficulty::Hard) => true,
        _ => false,
    }
}

fn iou_boxes(a: &LabelRecord, b: &LabelRecord) -> f64 {
    let w = (a.bbox[2].min(b.bbox[2]) - a.bbox[0].max(b.bbox[0])).max(0.0);
    let h = (a.bbox[3].min(b.bbox[3]) - a.bbox[1].max(b.bbox[1])).max(0.0);
    let inter = w * h;
    let area = |r: &LabelRecord| (r.bbox[2] - r.bbox[0]) * (r.bbox[3] - r.bbox[1]);
    inter / (area(a) + area(b) - inter)
}

/// Lexicographic content key matching the documented tie-break.
fn content_key(r: &LabelRecord) -> Vec<f64> {
    let mut k: Vec<f64> = r.bbox.to_vec();
    k.extend(r.location);
    k.extend(r.dimensions);
    k.push(r.rotation_y);
    k.push(r.alpha);
    k
}

/// Kept detections `(score, true positive, similarity)` at one score
/// threshold, recomputed from scratch over the detections at or above it.
fn outcomes_above(
    frames: &[(Vec<LabelRecord>, Vec<LabelRecord>)],
    test: PairTest,
    d: Difficulty,
    threshold: f64,
) -> Vec<(f64, bool, f64)> {
    let mut kept = Vec::new();
    for (dets, gts) in frames {
        let mut order: Vec<&LabelRecord> = dets
            .iter()
            .filter(|x| x.kind == EVAL_CLASS && x.score.unwrap_or(0.0) >= threshold)
            .collect();
        order.sort_by(|a, b| {
            let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
            sb.partial_cmp(&sa).unwrap().then_with(|| {
                let (ka, kb) = (content_key(a), content_key(b));
                ka.partial_cmp(&kb).unwrap()
            })
        });
        let eligible: Vec<&LabelRecord> = gts.iter().filter(|g| g.kind == EVAL_CLASS || g.kind == "DontCare").collect();
        let mut used = vec![false; eligible.len()];
        for det in order {
            let score = det.score.unwrap_or(0.0);
            let candidates: Vec<(usize, f64)> = eligible
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.kind != "DontCare" && counts_at(g, d))
                .filter_map(|(j, g)| test(det, g).map(|q| (j, q)))
                .collect();
            // Best quality, first index among equals.
            let mut pick: Option<(usize, f64)> = None;
            for c in candidates {
                if pick.map_or(true, |p| c.1 > p.1) {
                    pick = Some(c);
                }
            }
            if let Some((j, _)) = pick {
                used[j] = true;
                kept.push((score, true, 0.5 * (1.0 + wrap_pi(det.alpha - eligible[j].alpha).cos())));
                continue;
            }
            let ignored_hit = eligible.iter().any(|g| {
                !counts_at(g, d) && (test(det, g).is_some() || (g.kind == "DontCare" && iou_boxes(det, g) >= 0.5))
            });
            let small = det.bbox[3] - det.bbox[1] < if d == Difficulty::Easy { 40.0 } else { 25.0 };
            if !ignored_hit && !small {
                kept.push((score, false, 0.0));
            }
        }
    }
    // Accumulate in global score order so sums round identically.
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    kept
}

/// AP and AOS in percent by exhaustive threshold enumeration, or `None`
/// without valid ground truth.
pub fn brute_force_ap(
    frames: &[(Vec<LabelRecord>, Vec<LabelRecord>)],
    test: PairTest,
    d: Difficulty,
    samples: usize,
) -> Option<(f64, f64)> {
    let n_gt: usize = frames
        .iter()
        .map(|(_, g)| g.iter().filter(|g| g.kind == EVAL_CLASS && counts_at(g, d)).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = frames
        .iter()
        .flat_map(|(dets, _)| dets.iter().map(|x| x.score.unwrap_or(0.0)))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = Vec::new();
    for t in thresholds {
        let kept = outcomes_above(frames, test, d, t);
        if kept.is_empty() {
            continue;
        }
        let (mut tp, mut fp, mut sim) = (0usize, 0usize, 0.0f64);
        for (_, hit, s) in &kept {
            if *hit {
                tp += 1;
                sim += s;
            } else {
                fp += 1;
            }
        }
        let n = (tp + fp) as f64;
        points.push((tp as f64 / n_gt as f64, tp as f64 / n, sim / n));
    }
    let (mut ap, mut aos) = (0.0, 0.0);
    for s in 0..samples {
        let r = s as f64 / (samples - 1) as f64;
        let mut best = (0.0f64, 0.0f64);
        for p in &points {
            if p.0 >= r - 1e-12 {
                best = (best.0.max(p.1), best.1.max(p.2));
            }
        }
        ap += best.0;
        aos += best.1;
    }
    Some((100.0 * ap / samples as f64, 100.0 * aos / samples as f64))
}

// ---------------------------------------------------------------------------
// Shape-learning oracle
// ---------------------------------------------------------------------------

/// The seven similarity gauge directions of a shape (translation, rotation,
/// scale), orthonormalized, as columns of a `3K x 7` matrix.
pub fn gauge_directions(mean: &DVector<f64>) -> DMatrix<f64> {
    let k = mean.len() / 3;
    let mut g = DMatrix::zeros(3 * k, 7);
    for i in 0..k {
        let p = Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]);
        for a in 0..3 {
            g[(3 * i + a, a)] = 1.0;
            let mut axis = Vector3::zeros();
            axis[a] = 1.0;
            let w = axis.cross(&p);
            for d in 0..3 {
                g[(3 * i + d, 3 + a)] = w[d];
            }
        }
        for d in 0..3 {
            g[(3 * i + d, 6)] = p[d];
        }
    }
    orthonormal_columns(&g)
}

pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * svd.singular_values[0]).count();
    u.columns(0, rank).into_owned()
}

/// Columns of `m` with the span of orthonormal `g` removed.
pub fn project_out(m: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    m - g * (g.transpose() * m)
}

/// Principal angles (degrees) between the column spans of `a` and `b`.
pub fn principal_angles_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    let s = (qa.transpose() * qb).singular_values();
    s.iter().map(|c| c.clamp(-1.0, 1.0).acos().to_degrees()).collect()
}

/// Ground-truth generative model for shape learning.
pub struct LearningProblem {
    pub mean: DVector<f64>,
    /// `3K x N`, orthogonal to the gauge directions of the mean.
    pub basis: DMatrix<f64>,
    pub observations: Vec<LandmarkObservations>,
}

/// Draw instances `c R (S + t)` of a known model with Gaussian pixel noise
/// and optional random landmark dropout.
pub fn learning_problem(
    n_basis: usize,
    instances: usize,
    noise_px: f64,
    dropout: f64,
    seed: u64,
) -> LearningProblem {
    let mut rng = rng(seed);
    let template = MorphableModel::car_template(0);
    let size = Vector3::new(3.9, 1.6, 1.6);
    let mut mean = DVector::zeros(3 * LANDMARK_COUNT);
    for k in 0..LANDMARK_COUNT {
        let p = template.mean_point(k).component_mul(&size);
        mean.fixed_rows_mut::<3>(3 * k).copy_from(&p);
    }
    let centroid: Vector3<f64> =
        (0..LANDMARK_COUNT).map(|k| mean.fixed_rows::<3>(3 * k).into_owned()).sum::<Vector3<f64>>() / LANDMARK_COUNT as f64;
    for k in 0..LANDMARK_COUNT {
        let mut p = mean.fixed_rows_mut::<3>(3 * k);
        p -= centroid;
    }
    let gauge = gauge_directions(&mean);
    let raw = DMatrix::from_fn(3 * LANDMARK_COUNT, n_basis, |_, _| normal(&mut rng));
    let free = orthonormal_columns(&project_out(&raw, &gauge));
    // Deformations of a few decimeters, decreasing per mode.
    let mut basis = DMatrix::zeros(3 * LANDMARK_COUNT, n_basis);
    for n in 0..n_basis {
        basis.set_column(n, &(free.column(n) * (0.8 / (n as f64 + 1.0))));
    }
    let mut observations = Vec::with_capacity(instances);
    for _ in 0..instances {
        let alpha = DVector::from_fn(n_basis, |_, _| normal(&mut rng));
        let shape = &mean + &basis * &alpha;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(Vector4::from_fn(|_, _| {
            normal(&mut rng)
        })));
        let r: Rotation3<f64> = q.to_rotation_matrix();
        let rows: Matrix2x3<f64> = r.matrix().fixed_rows::<2>(0).into_owned();
        let c = rng.random_range(20.0..60.0);
        let offset = Vector2::new(rng.random_range(100.0..1100.0), rng.random_range(50.0..300.0));
        let points = (0..LANDMARK_COUNT)
            .map(|k| {
                let p = rows * shape.fixed_rows::<3>(3 * k) * c + offset;
                if dropout > 0.0 && rng.random_bool(dropout) {
                    Landmark::hidden()
                } else {
                    Landmark::visible(p.x + noise_px * normal(&mut rng), p.y + noise_px * normal(&mut rng))
                }
            })
            .collect();
        observations.push(LandmarkObservations { points });
    }
    LearningProblem {
        mean,
        basis,
        observations,
    }
}

/// Largest principal angle between the true basis and a learned model's
/// basis, after mapping the learned model onto the true mean and removing
/// the similarity gauge.
pub fn basis_subspace_angle(problem: &LearningProblem, learned: &MorphableModel) -> f64 {
    let k = LANDMARK_COUNT;
    let src: Vec<Vector3<f64>> = (0..k).map(|i| learned.mean_point(i)).collect();
    let dst: Vec<Vector3<f64>> = (0..k).map(|i| problem.mean.fixed_rows::<3>(3 * i).into_owned()).collect();
    let sim = similarity_fit(&src, &dst, true);
    let n = learned.basis_count();
    let mut mapped = DMatrix::zeros(3 * k, n);
    for b in 0..n {
        for i in 0..k {
            let v = sim.rotation * learned.basis_point(b, i);
            for d in 0..3 {
                mapped[(3 * i + d, b)] = v[d];
            }
        }
    }
    let gauge = gauge_directions(&problem.mean);
    let a = project_out(&problem.basis, &gauge);
    let b = project_out(&mapped, &gauge);
    principal_angles_deg(&a, &b).into_iter().fold(0.0, f64::max)
}

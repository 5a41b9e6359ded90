//! Linear morphable wireframe model over 14 vehicle landmarks.
//!
//! A shape instance is `S = mean + sum_n alpha_n * V_n`, a set of `K` points
//! in a normalized frame. Models used for inference live in the unit-box
//! frame of [`crate::geometry::PoseBox3D`]; models produced by [`learn_em`]
//! live in an arbitrary zero-centered frame and are mapped onto a reference
//! with [`MorphableModel::aligned_to`].

use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PoseBox3D;

/// Number of wireframe landmarks per vehicle.
pub const LANDMARK_COUNT: usize = 14;

/// Landmark names in index order. "Left" is the `+z` side of the box frame,
/// "front" the `+x` end.
pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "front_left_wheel",
    "front_right_wheel",
    "rear_left_wheel",
    "rear_right_wheel",
    "left_headlight",
    "right_headlight",
    "left_taillight",
    "right_taillight",
    "left_mirror",
    "right_mirror",
    "front_left_roof",
    "front_right_roof",
    "rear_left_roof",
    "rear_right_roof",
];

/// Mean car wireframe in the unit-box frame (x forward, y down, z left).
const CAR_MEAN: [[f64; 3]; LANDMARK_COUNT] = [
    [0.30, -0.16, 0.40],
    [0.30, -0.16, -0.40],
    [-0.30, -0.16, 0.40],
    [-0.30, -0.16, -0.40],
    [0.44, -0.40, 0.32],
    [0.44, -0.40, -0.32],
    [-0.44, -0.46, 0.32],
    [-0.44, -0.46, -0.32],
    [0.10, -0.62, 0.43],
    [0.10, -0.62, -0.43],
    [0.02, -0.92, 0.30],
    [0.02, -0.92, -0.30],
    [-0.28, -0.92, 0.30],
    [-0.28, -0.92, -0.30],
];

/// Mean shape plus `N` basis shapes, each a `3K` vector `[x0 y0 z0 x1 ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean: DVector<f64>,
    /// `N x 3K`, one basis shape per row.
    pub basis: DMatrix<f64>,
}

/// Shape coefficients `alpha`, one per basis shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients(pub DVector<f64>);

impl ShapeCoefficients {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One observed 2D landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

impl Landmark {
    pub fn visible(u: f64, v: f64) -> Self {
        Self { u, v, visible: true }
    }

    pub fn hidden() -> Self {
        Self {
            u: 0.0,
            v: 0.0,
            visible: false,
        }
    }
}

/// The `K` landmark observations of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkObservations {
    pub points: Vec<Landmark>,
}

impl LandmarkObservations {
    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.visible).count()
    }
}

/// Weak-perspective camera: `p = c R (P + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCamPose {
    pub scale: f64,
    /// Row-orthonormal projection-rotation.
    pub rotation: Matrix2x3<f64>,
    pub translation: Vector3<f64>,
}

impl OrthoCamPose {
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.scale * self.rotation * (p + self.translation)
    }

    /// Image-plane offset `c R t`.
    pub fn image_offset(&self) -> Vector2<f64> {
        self.scale * self.rotation * self.translation
    }
}

impl MorphableModel {
    pub fn new(mean: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        let dim = 3 * LANDMARK_COUNT;
        if mean.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: mean.len(),
            });
        }
        if basis.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: basis.ncols(),
            });
        }
        Ok(Self { mean, basis })
    }

    /// Landmark count `K`.
    pub fn landmark_count(&self) -> usize {
        self.mean.len() / 3
    }

    /// Basis count `N`.
    pub fn basis_count(&self) -> usize {
        self.basis.nrows()
    }

    pub fn mean_point(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.mean[3 * k], self.mean[3 * k + 1], self.mean[3 * k + 2])
    }

    pub fn basis_point(&self, n: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.basis[(n, 3 * k)],
            self.basis[(n, 3 * k + 1)],
            self.basis[(n, 3 * k + 2)],
        )
    }

    /// Built-in car wireframe in the unit-box frame with `n_basis`
    /// deformation modes.
    ///
    /// The basis rows are orthogonal and scaled so that every instance with
    /// `|alpha_n| <= 3` stays inside the unit box.
    pub fn car_template(n_basis: usize) -> Self {
        let dim = 3 * LANDMARK_COUNT;
        let mean = DVector::from_iterator(dim, CAR_MEAN.iter().flatten().copied());
        let mut rows: Vec<DVector<f64>> = Vec::with_capacity(n_basis);
        for n in 0..n_basis {
            let mut v = template_mode(n);
            for r in &rows {
                let proj = v.dot(r);
                v -= r * proj;
            }
            let norm = v.norm();
            if norm > 1e-9 {
                rows.push(v / norm);
            } else {
                rows.push(DVector::zeros(dim));
            }
        }
        let mut basis = DMatrix::zeros(n_basis, dim);
        for (n, r) in rows.iter().enumerate() {
            basis.set_row(n, &r.transpose());
        }
        // Largest common scale keeping 3-sigma deformations inside the box.
        let mut scale = f64::INFINITY;
        for k in 0..LANDMARK_COUNT {
            let p = Vector3::from(CAR_MEAN[k]);
            let margins = [0.5 - p.x.abs(), (-p.y).min(1.0 + p.y), 0.5 - p.z.abs()];
            for (d, margin) in margins.iter().enumerate() {
                let spread: f64 = (0..n_basis).map(|n| basis[(n, 3 * k + d)].abs()).sum();
                if spread > 0.0 {
                    scale = scale.min(margin / (3.0 * spread));
                }
            }
        }
        if scale.is_finite() {
            basis *= scale;
        }
        Self { mean, basis }
    }

    /// Map this model onto `reference` by an orthogonal factor (reflections
    /// allowed), per-axis scales and a translation, matching mean shapes in
    /// least squares. The per-axis scales absorb the unit-box normalization
    /// of the reference frame.
    pub fn aligned_to(&self, reference: &MorphableModel) -> Self {
        let k_count = self.landmark_count();
        let src: Vec<Vector3<f64>> = (0..k_count).map(|k| self.mean_point(k)).collect();
        let dst: Vec<Vector3<f64>> = (0..k_count).map(|k| reference.mean_point(k)).collect();
        let n = k_count.max(1) as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut pp = Matrix3::zeros();
        let mut qp = Matrix3::zeros();
        for (p, q) in src.iter().zip(&dst) {
            pp += (p - cs) * (p - cs).transpose();
            qp += (q - cd) * (p - cs).transpose();
        }
        let general = qp * pp.try_inverse().unwrap_or_else(Matrix3::identity);
        let row_norms = Vector3::from_fn(|d, _| general.row(d).norm().max(f64::MIN_POSITIVE));
        let svd = (Matrix3::from_diagonal(&row_norms.map(|s| 1.0 / s)) * general).svd(true, true);
        let rotation = svd.u.unwrap() * svd.v_t.unwrap();
        let mut scale = Vector3::zeros();
        for d in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for (p, q) in src.iter().zip(&dst) {
                let r = (rotation * (p - cs))[d];
                num += r * (q - cd)[d];
                den += r * r;
            }
            scale[d] = if den > 0.0 { num / den } else { 0.0 };
        }
        let linear = Matrix3::from_diagonal(&scale) * rotation;
        let translation = cd - linear * cs;
        let mut mean = DVector::zeros(self.mean.len());
        for (k, p) in src.iter().enumerate() {
            mean.fixed_rows_mut::<3>(3 * k).copy_from(&(linear * p + translation));
        }
        let mut basis = self.basis.clone();
        for n in 0..self.basis_count() {
            for k in 0..k_count {
                let v = linear * self.basis_point(n, k);
                for d in 0..3 {
                    basis[(n, 3 * k + d)] = v[d];
                }
            }
        }
        Self { mean, basis }
    }
}

/// Hand-designed deformation directions for the car template; modes past
/// the fifth are deterministic pseudo-random symmetric perturbations.
fn template_mode(n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(3 * LANDMARK_COUNT);
    let mut set = |k: usize, d: usize, val: f64| v[3 * k + d] = val;
    match n {
        // roof height
        0 => {
            for k in 10..14 {
                set(k, 1, -1.0);
            }
            set(8, 1, -0.4);
            set(9, 1, -0.4);
        }
        // cabin position along the body
        1 => {
            for k in [8, 9, 10, 11, 12, 13] {
                set(k, 0, 1.0);
            }
        }
        // wheelbase
        2 => {
            for k in 0..2 {
                set(k, 0, 1.0);
            }
            for k in 2..4 {
                set(k, 0, -1.0);
            }
        }
        // rear deck height
        3 => {
            set(6, 1, -1.0);
            set(7, 1, -1.0);
            set(12, 1, 0.5);
            set(13, 1, 0.5);
        }
        // greenhouse taper
        4 => {
            for k in [10, 12] {
                set(k, 2, -1.0);
            }
            for k in [11, 13] {
                set(k, 2, 1.0);
            }
            for k in [4, 6] {
                set(k, 2, 0.5);
            }
            for k in [5, 7] {
                set(k, 2, -0.5);
            }
        }
        _ => {
            // Left/right symmetric: left landmarks are even, right are odd.
            let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ (n as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            for pair in 0..LANDMARK_COUNT / 2 {
                let (a, b) = (2 * pair, 2 * pair + 1);
                let dx = next();
                let dy = next();
                let dz = next();
                set(a, 0, dx);
                set(b, 0, dx);
                set(a, 1, dy);
                set(b, 1, dy);
                set(a, 2, dz);
                set(b, 2, -dz);
            }
        }
    }
    v
}

/// Shape points `mean + sum alpha_n V_n`, reshaped to `K` points.
pub fn instantiate(model: &MorphableModel, alpha: &ShapeCoefficients) -> Result<Vec<Vector3<f64>>> {
    if alpha.len() != model.basis_count() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_count(),
            got: alpha.len(),
        });
    }
    let flat = &model.mean + model.basis.tr_mul(&alpha.0);
    Ok((0..model.landmark_count())
        .map(|k| Vector3::new(flat[3 * k], flat[3 * k + 1], flat[3 * k + 2]))
        .collect())
}

/// Apply the box pose to normalized shape points: per-axis scale by the box
/// extents, rotate by yaw, translate.
pub fn place_in_camera(points: &[Vector3<f64>], pose: &PoseBox3D) -> Vec<Vector3<f64>> {
    let r = pose.rotation();
    let e = pose.extents();
    points
        .iter()
        .map(|p| r * p.component_mul(&e) + pose.translation)
        .collect()
}

/// Posterior-mean coefficient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFit {
    pub alpha: ShapeCoefficients,
    /// Set when fewer than `N/2` landmarks were visible and the prior mean
    /// was returned.
    pub low_confidence: bool,
}

/// Posterior mean of `alpha` under the unit Gaussian prior and isotropic
/// landmark noise of variance `noise_variance` (px^2), for a fixed pose.
pub fn fit_coefficients(
    model: &MorphableModel,
    obs: &LandmarkObservations,
    pose: &OrthoCamPose,
    noise_variance: f64,
) -> Result<CoefficientFit> {
    let k_count = model.landmark_count();
    if obs.points.len() != k_count {
        return Err(Error::DimensionMismatch {
            expected: k_count,
            got: obs.points.len(),
        });
    }
    let n = model.basis_count();
    let visible: Vec<usize> = (0..k_count).filter(|&k| obs.points[k].visible).collect();
    if visible.is_empty() || (visible.len() as f64) < n as f64 / 2.0 {
        return Ok(CoefficientFit {
            alpha: ShapeCoefficients::zeros(n),
            low_confidence: true,
        });
    }
    let cr = pose.scale * pose.rotation;
    let offset = pose.image_offset();
    let mut g = DMatrix::zeros(2 * visible.len(), n);
    let mut mu = DVector::zeros(2 * visible.len());
    for (j, &k) in visible.iter().enumerate() {
        let p = Vector2::new(obs.points[k].u, obs.points[k].v);
        let r = p - offset - cr * model.mean_point(k);
        mu[2 * j] = r.x;
        mu[2 * j + 1] = r.y;
        for b in 0..n {
            let col = cr * model.basis_point(b, k);
            g[(2 * j, b)] = col.x;
            g[(2 * j + 1, b)] = col.y;
        }
    }
    let mut normal = g.tr_mul(&g);
    for i in 0..n {
        normal[(i, i)] += noise_variance;
    }
    let rhs = g.tr_mul(&mu);
    let alpha = solve_spd(normal, &rhs);
    Ok(CoefficientFit {
        alpha: ShapeCoefficients(alpha),
        low_confidence: false,
    })
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => a
            .svd(true, true)
            .solve(b, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(b.len())),
    }
}

// ---------------------------------------------------------------------------
// Similarity alignment
// ---------------------------------------------------------------------------

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

/// Least-squares similarity taking `src` onto `dst` (Umeyama). With
/// `allow_reflection` the orthogonal factor may have determinant -1.
pub fn similarity_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>], allow_reflection: bool) -> Similarity {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        cov += b * a.transpose();
        var += a.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if !allow_reflection && (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * fix[(i, i)]).sum();
    let scale = if var > 0.0 { trace / var } else { 1.0 };
    Similarity {
        scale,
        rotation,
        translation: cd - scale * rotation * cs,
    }
}

// ---------------------------------------------------------------------------
// EM-Gaussian learning
// ---------------------------------------------------------------------------

/// Options for [`learn_em`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iterations: usize,
    /// Stop when the relative log-likelihood change drops below this.
    pub tolerance: f64,
    /// Rigid (N = 0) alternations run before the basis is initialized.
    pub rigid_iterations: usize,
    /// Instances with fewer visible landmarks are left out.
    pub min_visible: usize,
    /// Noise variance floor in normalized units.
    pub min_noise_variance: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-6,
            rigid_iterations: 100,
            min_visible: 6,
            min_noise_variance: 1e-18,
        }
    }
}

/// Outcome of [`learn_em`].
#[derive(Debug, Clone)]
pub struct EmResult {
    /// Learned model: zero-centered mean with unit RMS radius, orthogonal
    /// basis rows sorted by decreasing norm.
    pub model: MorphableModel,
    /// Indices (into the input) of the instances used for learning.
    pub used: Vec<usize>,
    /// Per used instance, pixel-unit pose.
    pub poses: Vec<OrthoCamPose>,
    /// Per used instance, posterior-mean coefficients.
    pub coefficients: Vec<ShapeCoefficients>,
    /// Learned landmark noise variance (px^2).
    pub noise_variance: f64,
    /// Observed-data log-likelihood (pixel units) at the start of each
    /// iteration, followed by the final value.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Root mean square landmark reprojection error (px).
    pub reprojection_rmse: f64,
    /// Mean Euclidean landmark reprojection error (px).
    pub mean_reprojection_error: f64,
}

impl EmResult {
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Visible landmarks of one instance in normalized image units.
struct Instance {
    points: Vec<(usize, Vector2<f64>)>,
    centroid: Vector2<f64>,
}

#[derive(Clone)]
struct CamState {
    scale: f64,
    rotation: Matrix2x3<f64>,
    offset: Vector2<f64>,
}

struct Params {
    mean: Vec<Vector3<f64>>,
    /// `basis[n][k]`
    basis: Vec<Vec<Vector3<f64>>>,
    noise: f64,
    cams: Vec<CamState>,
}

struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_likelihood: f64,
}

/// Learn mean shape, `n_basis` basis shapes, noise variance and per-instance
/// weak-perspective poses from 2D landmarks by EM, treating the shape
/// coefficients as latent unit Gaussians.
pub fn learn_em(obs: &[LandmarkObservations], n_basis: usize, opts: &EmOptions) -> Result<EmResult> {
    let k_count = LANDMARK_COUNT;
    if let Some(bad) = obs.iter().find(|o| o.points.len() != k_count) {
        return Err(Error::DimensionMismatch {
            expected: k_count,
            got: bad.points.len(),
        });
    }
    let used: Vec<usize> = (0..obs.len())
        .filter(|&i| obs[i].visible_count() >= opts.min_visible.max(3))
        .collect();
    let required = (10 * n_basis).max(3);
    if used.len() < required {
        return Err(Error::InsufficientData(format!(
            "{} usable instances (>= {} visible landmarks), need {}",
            used.len(),
            opts.min_visible,
            required
        )));
    }

    // Per-instance centering and one global scale.
    let mut instances: Vec<Instance> = used
        .iter()
        .map(|&i| {
            let pts: Vec<(usize, Vector2<f64>)> = obs[i]
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.visible)
                .map(|(k, p)| (k, Vector2::new(p.u, p.v)))
                .collect();
            let centroid = pts.iter().map(|(_, p)| p).sum::<Vector2<f64>>() / pts.len() as f64;
            Instance {
                points: pts,
                centroid,
            }
        })
        .collect();
    let (mut ss, mut count) = (0.0, 0usize);
    for inst in &instances {
        for (_, p) in &inst.points {
            ss += (p - inst.centroid).norm_squared();
            count += 1;
        }
    }
    let unit = (ss / count as f64).sqrt().max(f64::MIN_POSITIVE);
    for inst in &mut instances {
        for (_, p) in &mut inst.points {
            *p = (*p - inst.centroid) / unit;
        }
    }
    let n_obs = count;

    let mut params = best_rigid_start(&instances, k_count, opts);

    let rigid_budget = if n_basis == 0 {
        opts.max_iterations
    } else {
        opts.rigid_iterations
    };
    let rigid = run_em(&instances, &mut params, rigid_budget, opts);

    let run = if n_basis == 0 {
        rigid
    } else {
        init_basis_pca(&instances, &mut params, n_basis);
        params.noise = params.noise.max(opts.min_noise_variance);
        canonicalize(&mut params);
        run_em(&instances, &mut params, opts.max_iterations, opts)
    };

    // Final posterior for the reported coefficients.
    let posts: Vec<Posterior> = instances.iter().enumerate().map(|(m, inst)| e_step(inst, m, &params)).collect();

    // Pixel-unit outputs.
    let ll_offset = -(n_obs as f64) * 2.0 * unit.ln();
    let log_likelihood: Vec<f64> = run.history.iter().map(|ll| ll + ll_offset).collect();

    let dim = 3 * k_count;
    let mut mean = DVector::zeros(dim);
    for (k, p) in params.mean.iter().enumerate() {
        mean.fixed_rows_mut::<3>(3 * k).copy_from(p);
    }
    let mut basis = DMatrix::zeros(n_basis, dim);
    for n in 0..n_basis {
        for k in 0..k_count {
            for d in 0..3 {
                basis[(n, 3 * k + d)] = params.basis[n][k][d];
            }
        }
    }
    let model = MorphableModel { mean, basis };

    let mut poses = Vec::with_capacity(instances.len());
    let mut coefficients = Vec::with_capacity(instances.len());
    let (mut sq_err, mut abs_err) = (0.0, 0.0);
    for (m, inst) in instances.iter().enumerate() {
        let cam = &params.cams[m];
        let scale = cam.scale * unit;
        let offset = cam.offset * unit + inst.centroid;
        let translation = cam.rotation.transpose() * offset / scale;
        poses.push(OrthoCamPose {
            scale,
            rotation: cam.rotation,
            translation,
        });
        let alpha = posts[m].mean.clone();
        for (k, p) in &inst.points {
            let shape = shape_point(&params, *k, &alpha);
            let pred = cam.scale * cam.rotation * shape + cam.offset;
            let e = (pred - p).norm() * unit;
            sq_err += e * e;
            abs_err += e;
        }
        coefficients.push(ShapeCoefficients(alpha));
    }

    Ok(EmResult {
        model,
        used,
        poses,
        coefficients,
        noise_variance: params.noise * unit * unit,
        log_likelihood,
        iterations: run.iterations,
        converged: run.converged,
        reprojection_rmse: (sq_err / n_obs as f64).sqrt(),
        mean_reprojection_error: abs_err / n_obs as f64,
    })
}

fn shape_point(params: &Params, k: usize, alpha: &DVector<f64>) -> Vector3<f64> {
    let mut p = params.mean[k];
    for (n, b) in params.basis.iter().enumerate() {
        p += b[k] * alpha[n];
    }
    p
}

struct RunSummary {
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn run_em(instances: &[Instance], params: &mut Params, max_iterations: usize, opts: &EmOptions) -> RunSummary {
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut posts = e_step_all(instances, params);
    history.push(posts.iter().map(|p| p.log_likelihood).sum::<f64>());
    while iterations < max_iterations {
        iterations += 1;
        m_step_shape(instances, params, &posts);
        m_step_cameras(instances, params, &posts);
        m_step_noise(instances, params, &posts, opts.min_noise_variance);
        canonicalize(params);
        posts = e_step_all(instances, params);
        let ll = posts.iter().map(|p| p.log_likelihood).sum::<f64>();
        let prev = *history.last().unwrap();
        history.push(ll);
        if ((ll - prev) / prev.abs().max(1e-300)).abs() < opts.tolerance {
            converged = true;
            break;
        }
    }
    RunSummary {
        history,
        iterations,
        converged,
    }
}

fn e_step_all(instances: &[Instance], params: &Params) -> Vec<Posterior> {
    instances
        .par_iter()
        .enumerate()
        .map(|(m, inst)| e_step(inst, m, params))
        .collect()
}

/// Exact Gaussian posterior over the coefficients of one instance and its
/// marginal log-likelihood.
fn e_step(inst: &Instance, m: usize, params: &Params) -> Posterior {
    let n = params.basis.len();
    let cam = &params.cams[m];
    let cr = cam.scale * cam.rotation;
    let rows = 2 * inst.points.len();
    let mut g = DMatrix::zeros(rows, n);
    let mut mu = DVector::zeros(rows);
    for (j, (k, p)) in inst.points.iter().enumerate() {
        let r = p - cam.offset - cr * params.mean[*k];
        mu[2 * j] = r.x;
        mu[2 * j + 1] = r.y;
        for (b, basis) in params.basis.iter().enumerate() {
            let col = cr * basis[*k];
            g[(2 * j, b)] = col.x;
            g[(2 * j + 1, b)] = col.y;
        }
    }
    let s2 = params.noise;
    let mu_sq = mu.norm_squared();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    if n == 0 {
        let ll = -0.5 * (rows as f64 * (ln2pi + s2.ln()) + mu_sq / s2);
        return Posterior {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
            log_likelihood: ll,
        };
    }
    let mut precision = g.tr_mul(&g) / s2;
    for i in 0..n {
        precision[(i, i)] += 1.0;
    }
    let gt_mu = g.tr_mul(&mu);
    let (cov, logdet) = match precision.clone().cholesky() {
        Some(ch) => {
            let l = ch.l();
            let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
            (ch.inverse(), logdet)
        }
        None => {
            let eig = precision.symmetric_eigen();
            let logdet = eig.eigenvalues.iter().map(|v| v.max(1.0).ln()).sum::<f64>();
            let inv = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1.0)))
                * eig.eigenvectors.transpose();
            (inv, logdet)
        }
    };
    let mean = &cov * &gt_mu / s2;
    let quad = (mu_sq - gt_mu.dot(&mean)) / s2;
    let ll = -0.5 * (rows as f64 * (ln2pi + s2.ln()) + logdet + quad);
    Posterior {
        mean,
        cov,
        log_likelihood: ll,
    }
}

/// Second moment `E[a a^T]` of the augmented coefficients `a = [1; alpha]`.
fn augmented_moments(post: &Posterior) -> (DVector<f64>, DMatrix<f64>) {
    let n = post.mean.len();
    let mut first = DVector::zeros(n + 1);
    first[0] = 1.0;
    first.rows_mut(1, n).copy_from(&post.mean);
    let mut second = &first * first.transpose();
    let mut lower = second.view_mut((1, 1), (n, n));
    lower += &post.cov;
    (first, second)
}

/// Closed-form update of mean and basis, landmark by landmark.
fn m_step_shape(instances: &[Instance], params: &mut Params, posts: &[Posterior]) {
    let n = params.basis.len();
    let k_count = params.mean.len();
    let dim = 3 * (n + 1);
    let mut lhs = vec![DMatrix::<f64>::zeros(dim, dim); k_count];
    let mut rhs = vec![DVector::<f64>::zeros(dim); k_count];
    for (m, inst) in instances.iter().enumerate() {
        let cam = &params.cams[m];
        let rtr = DMatrix::from_fn(3, 3, |i, j| {
            (cam.rotation.transpose() * cam.rotation)[(i, j)]
        });
        let (first, second) = augmented_moments(&posts[m]);
        let block = second.kronecker(&rtr) * (cam.scale * cam.scale);
        for (k, p) in &inst.points {
            lhs[*k] += &block;
            let back = cam.rotation.transpose() * (p - cam.offset) * cam.scale;
            let back = DVector::from_column_slice(back.as_slice());
            rhs[*k] += first.kronecker(&back);
        }
    }
    for k in 0..k_count {
        let a = std::mem::replace(&mut lhs[k], DMatrix::zeros(0, 0));
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs[k]),
            None => match a.svd(true, true).solve(&rhs[k], 1e-12) {
                Ok(s) => s,
                Err(_) => continue,
            },
        };
        params.mean[k] = Vector3::new(sol[0], sol[1], sol[2]);
        for b in 0..n {
            params.basis[b][k] = Vector3::new(sol[3 * (b + 1)], sol[3 * (b + 1) + 1], sol[3 * (b + 1) + 2]);
        }
    }
}

/// Project a 2x3 matrix onto the row-orthonormal set.
fn nearest_row_orthonormal(m: &Matrix2x3<f64>) -> Option<Matrix2x3<f64>> {
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    r.iter().all(|v| v.is_finite()).then_some(r)
}

/// Weak-perspective camera update given the expected shape of each
/// instance. Each sub-step never increases the expected residual.
fn m_step_cameras(instances: &[Instance], params: &mut Params, posts: &[Posterior]) {
    let n = params.basis.len();
    let new_cams: Vec<CamState> = instances
        .par_iter()
        .enumerate()
        .map(|(m, inst)| {
            let post = &posts[m];
            let cnt = inst.points.len() as f64;
            let mut shapes = Vec::with_capacity(inst.points.len());
            let mut cov = Matrix3::zeros();
            for (k, _) in &inst.points {
                shapes.push(shape_point(params, *k, &post.mean));
                if n > 0 {
                    let vk = DMatrix::from_fn(3, n, |d, b| params.basis[b][*k][d]);
                    let ck = &vk * &post.cov * vk.transpose();
                    cov += Matrix3::from_fn(|i, j| ck[(i, j)]);
                }
            }
            let q_bar = shapes.iter().sum::<Vector3<f64>>() / cnt;
            let p_bar = inst.points.iter().map(|(_, p)| p).sum::<Vector2<f64>>() / cnt;
            let mut w = Matrix2x3::zeros();
            let mut b = cov;
            for ((_, p), q) in inst.points.iter().zip(&shapes) {
                let (pc, qc) = (p - p_bar, q - q_bar);
                w += pc * qc.transpose();
                b += qc * qc.transpose();
            }
            let gain = |r: &Matrix2x3<f64>| -> (f64, f64) {
                let num = (r * w.transpose()).trace();
                let den = (r * b * r.transpose()).trace();
                if den > 0.0 {
                    (num * num / den, num / den)
                } else {
                    (0.0, 0.0)
                }
            };
            let old = params.cams[m].clone();
            let mut rot = old.rotation;
            let (mut best, _) = gain(&rot);
            if let Some(inv) = b.try_inverse() {
                if let Some(cand) = nearest_row_orthonormal(&(w * inv)) {
                    let (g, _) = gain(&cand);
                    if g > best {
                        best = g;
                        rot = cand;
                    }
                }
            }
            // Majorize-minimize refinement of the rotation at fixed scale.
            let beta = b.symmetric_eigen().eigenvalues.max();
            if beta > 0.0 {
                for _ in 0..5 {
                    let (_, c) = gain(&rot);
                    if c <= 0.0 {
                        break;
                    }
                    let step = rot - rot * b / beta + w / (c * beta);
                    match nearest_row_orthonormal(&step) {
                        Some(cand) => {
                            let (g, _) = gain(&cand);
                            if g >= best {
                                best = g;
                                rot = cand;
                            } else {
                                break;
                            }
                        }
                        None => break,
                    }
                }
            }
            let (_, mut scale) = gain(&rot);
            if scale < 0.0 {
                rot = -rot;
                scale = -scale;
            }
            if !(scale > 0.0) {
                return old;
            }
            let offset = p_bar - scale * rot * q_bar;
            CamState {
                scale,
                rotation: rot,
                offset,
            }
        })
        .collect();
    params.cams = new_cams;
}

fn m_step_noise(instances: &[Instance], params: &mut Params, posts: &[Posterior], floor: f64) {
    let n = params.basis.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for (m, inst) in instances.iter().enumerate() {
        let cam = &params.cams[m];
        let cr = cam.scale * cam.rotation;
        for (k, p) in &inst.points {
            let pred = cr * shape_point(params, *k, &posts[m].mean) + cam.offset;
            total += (p - pred).norm_squared();
            if n > 0 {
                let proj = DMatrix::from_fn(2, n, |d, b| (cr * params.basis[b][*k])[d]);
                total += (&proj * &posts[m].cov * proj.transpose()).trace();
            }
            count += 2;
        }
    }
    params.noise = (total / count as f64).max(floor);
}

/// Likelihood-preserving gauge fixing: zero-centroid mean with unit RMS
/// radius, orthogonal basis rows sorted by decreasing norm.
fn canonicalize(params: &mut Params) {
    let k_count = params.mean.len() as f64;
    let centroid = params.mean.iter().sum::<Vector3<f64>>() / k_count;
    for p in &mut params.mean {
        *p -= centroid;
    }
    for cam in &mut params.cams {
        cam.offset += cam.scale * cam.rotation * centroid;
    }
    let rms = (params.mean.iter().map(|p| p.norm_squared()).sum::<f64>() / k_count).sqrt();
    if rms > 0.0 && rms.is_finite() {
        for p in &mut params.mean {
            *p /= rms;
        }
        for b in &mut params.basis {
            for v in b.iter_mut() {
                *v /= rms;
            }
        }
        for cam in &mut params.cams {
            cam.scale *= rms;
        }
    }
    let n = params.basis.len();
    if n > 1 {
        let k = params.mean.len();
        let flat = DMatrix::from_fn(n, 3 * k, |b, i| params.basis[b][i / 3][i % 3]);
        let gram = &flat * flat.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rotated = eig.eigenvectors.transpose() * flat;
        for (dst, &src) in order.iter().enumerate() {
            for i in 0..3 * k {
                params.basis[dst][i / 3][i % 3] = rotated[(src, i)];
            }
        }
    }
}

const IMPUTATION_SWEEPS: usize = 50;
const RIGID_SUBSET_STARTS: usize = 4;
const START_ITERATIONS: usize = 20;

/// Rigid starting point with the highest likelihood after a short EM run,
/// among factorizations of all instances and of random halves of them.
fn best_rigid_start(instances: &[Instance], k_count: usize, opts: &EmOptions) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut best: Option<(f64, Params)> = None;
    for start in 0..=RIGID_SUBSET_STARTS {
        let mut params = if start == 0 {
            let all: Vec<&Instance> = instances.iter().collect();
            rigid_factorization(&all, k_count)
        } else {
            order.shuffle(&mut rng);
            let half: Vec<&Instance> = order[..instances.len().div_ceil(2)].iter().map(|&m| &instances[m]).collect();
            let mean = rigid_factorization(&half, k_count).mean;
            let mut params = Params {
                mean,
                basis: Vec::new(),
                noise: 1.0,
                cams: instances
                    .iter()
                    .map(|_| CamState {
                        scale: 1.0,
                        rotation: Matrix2x3::identity(),
                        offset: Vector2::zeros(),
                    })
                    .collect(),
            };
            let posts = e_step_all(instances, &params);
            m_step_cameras(instances, &mut params, &posts);
            canonicalize(&mut params);
            params
        };
        params.noise = initial_noise(instances, &params).max(opts.min_noise_variance);
        let run = run_em(instances, &mut params, START_ITERATIONS.min(opts.max_iterations), opts);
        let ll = *run.history.last().unwrap();
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, params));
        }
    }
    best.unwrap().1
}

/// Rigid factorization with iterative rank-3 imputation of missing entries
/// and a weak-perspective metric upgrade.
fn rigid_factorization(instances: &[&Instance], k_count: usize) -> Params {
    let m_count = instances.len();
    let mut w = DMatrix::zeros(2 * m_count, k_count);
    let mut seen = vec![false; m_count * k_count];
    for (m, inst) in instances.iter().enumerate() {
        for (k, p) in &inst.points {
            w[(2 * m, *k)] = p.x;
            w[(2 * m + 1, *k)] = p.y;
            seen[m * k_count + k] = true;
        }
    }
    // Hidden entries start at each landmark's mean over the instances that
    // see it, then are refilled from the rank-3 reconstruction.
    for k in 0..k_count {
        for d in 0..2 {
            let vals: Vec<f64> = (0..m_count)
                .filter(|&m| seen[m * k_count + k])
                .map(|m| w[(2 * m + d, k)])
                .collect();
            let fill = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            for m in (0..m_count).filter(|&m| !seen[m * k_count + k]) {
                w[(2 * m + d, k)] = fill;
            }
        }
    }
    if seen.iter().any(|s| !s) {
        for _ in 0..IMPUTATION_SWEEPS {
            let offsets = DVector::from_fn(2 * m_count, |r, _| w.row(r).mean());
            let centered = DMatrix::from_fn(2 * m_count, k_count, |r, k| w[(r, k)] - offsets[r]);
            let svd = centered.svd(true, true);
            let (u, vt, s) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            let mut low = DMatrix::zeros(2 * m_count, k_count);
            for &i in idx.iter().take(3) {
                low += u.column(i) * vt.row(i) * s[i];
            }
            for m in 0..m_count {
                for k in (0..k_count).filter(|&k| !seen[m * k_count + k]) {
                    for d in 0..2 {
                        w[(2 * m + d, k)] = low[(2 * m + d, k)] + offsets[2 * m + d];
                    }
                }
            }
        }
        for r in 0..2 * m_count {
            let mean = w.row(r).mean();
            w.row_mut(r).add_scalar_mut(-mean);
        }
    }
    let svd = w.svd(true, true);
    let (u, vt, s) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let rank = 3.min(idx.len());
    let mut motion = DMatrix::zeros(2 * m_count, 3);
    let mut structure = DMatrix::zeros(3, k_count);
    for (j, &i) in idx.iter().take(rank).enumerate() {
        let root = s[i].sqrt();
        motion.set_column(j, &(u.column(i) * root));
        structure.set_row(j, &(vt.row(i) * root));
    }

    // Metric upgrade: find symmetric L with equal-norm orthogonal row pairs.
    let sym = |a: &[f64; 3], b: &[f64; 3]| -> [f64; 6] {
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    };
    let mut cons = DMatrix::zeros(2 * m_count, 6);
    for m in 0..m_count {
        let a1 = [motion[(2 * m, 0)], motion[(2 * m, 1)], motion[(2 * m, 2)]];
        let a2 = [motion[(2 * m + 1, 0)], motion[(2 * m + 1, 1)], motion[(2 * m + 1, 2)]];
        let s11 = sym(&a1, &a1);
        let s22 = sym(&a2, &a2);
        let s12 = sym(&a1, &a2);
        for c in 0..6 {
            cons[(2 * m, c)] = s11[c] - s22[c];
            cons[(2 * m + 1, c)] = s12[c];
        }
    }
    let upgrade = metric_upgrade(&cons).unwrap_or_else(Matrix3::identity);
    let motion3 = &motion * DMatrix::from_fn(3, 3, |i, j| upgrade[(i, j)]);
    let inv = upgrade.try_inverse().unwrap_or_else(Matrix3::identity);
    let structure3 = DMatrix::from_fn(3, 3, |i, j| inv[(i, j)]) * structure;

    let mean: Vec<Vector3<f64>> = (0..k_count)
        .map(|k| Vector3::new(structure3[(0, k)], structure3[(1, k)], structure3[(2, k)]))
        .collect();
    let cams = (0..m_count)
        .map(|m| {
            let raw = Matrix2x3::from_fn(|i, j| motion3[(2 * m + i, j)]);
            let svd = raw.svd(false, false);
            let scale = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
            let rotation = nearest_row_orthonormal(&raw).unwrap_or_else(Matrix2x3::identity);
            CamState {
                scale: if scale > 0.0 { scale } else { 1.0 },
                rotation,
                offset: Vector2::zeros(),
            }
        })
        .collect();
    let mut params = Params {
        mean,
        basis: Vec::new(),
        noise: 1.0,
        cams,
    };
    canonicalize(&mut params);
    params
}

fn metric_upgrade(cons: &DMatrix<f64>) -> Option<Matrix3<f64>> {
    let svd = cons.clone().svd(false, true);
    let vt = svd.v_t?;
    let s = &svd.singular_values;
    let imin = (0..s.len()).min_by(|&a, &b| s[a].total_cmp(&s[b]))?;
    let l = vt.row(imin);
    let mut big_l = Matrix3::new(l[0], l[1], l[2], l[1], l[3], l[4], l[2], l[4], l[5]);
    if big_l.trace() < 0.0 {
        big_l = -big_l;
    }
    let eig = big_l.symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return None;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(1e-6 * top).sqrt());
    let q = eig.eigenvectors * Matrix3::from_diagonal(&clamped);
    q.iter().all(|v| v.is_finite()).then_some(q)
}

fn initial_noise(instances: &[Instance], params: &Params) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for (m, inst) in instances.iter().enumerate() {
        let cam = &params.cams[m];
        for (k, p) in &inst.points {
            let pred = cam.scale * cam.rotation * params.mean[*k] + cam.offset;
            total += (p - pred).norm_squared();
            count += 2;
        }
    }
    (total / count.max(1) as f64).max(1e-6)
}

/// Basis from PCA of per-instance residual shapes, back-projected through
/// each camera's pseudo-inverse.
fn init_basis_pca(instances: &[Instance], params: &mut Params, n_basis: usize) {
    let k_count = params.mean.len();
    let dim = 3 * k_count;
    let m_count = instances.len();
    let mut residuals = DMatrix::zeros(dim, m_count);
    for (m, inst) in instances.iter().enumerate() {
        let cam = &params.cams[m];
        for (k, p) in &inst.points {
            let r = p - cam.offset - cam.scale * cam.rotation * params.mean[*k];
            let back = cam.rotation.transpose() * r / cam.scale;
            for d in 0..3 {
                residuals[(3 * k + d, m)] = back[d];
            }
        }
    }
    let cov = &residuals * residuals.transpose() / m_count as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    params.basis = (0..n_basis)
        .map(|n| {
            let i = order[n.min(dim - 1)];
            let sd = eig.eigenvalues[i].max(1e-12).sqrt();
            (0..k_count)
                .map(|k| {
                    Vector3::new(
                        eig.eigenvectors[(3 * k, i)],
                        eig.eigenvectors[(3 * k + 1, i)],
                        eig.eigenvectors[(3 * k + 2, i)],
                    ) * sd
                })
                .collect()
        })
        .collect();
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Serialize as text: a `K N` header, `K` mean rows `x y z`, then `N`
/// blocks of `K` rows, floats at 17 significant digits.
pub fn write_model(model: &MorphableModel) -> String {
    let k_count = model.landmark_count();
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", k_count, model.basis_count());
    let row = |out: &mut String, p: Vector3<f64>| {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
    };
    for k in 0..k_count {
        row(&mut out, model.mean_point(k));
    }
    for n in 0..model.basis_count() {
        for k in 0..k_count {
            row(&mut out, model.basis_point(n, k));
        }
    }
    out
}

/// Parse the format written by [`write_model`]. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_model<R: BufRead>(reader: R) -> Result<MorphableModel> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut header: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        if header.is_none() {
            if toks.len() != 2 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected header `K N`".into(),
                });
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad count {s:?}: {e}"),
                })
            };
            header = Some((parse(toks[0])?, parse(toks[1])?));
            continue;
        }
        if toks.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 values, found {}", toks.len()),
            });
        }
        let vals = toks
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad float {s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line_no, vals));
    }
    let (k_count, n) = header.ok_or(Error::Parse {
        line: 0,
        msg: "empty model file".into(),
    })?;
    if k_count != LANDMARK_COUNT {
        return Err(Error::DimensionMismatch {
            expected: LANDMARK_COUNT,
            got: k_count,
        });
    }
    if rows.len() != k_count * (n + 1) {
        return Err(Error::Parse {
            line: rows.last().map_or(0, |r| r.0),
            msg: format!("expected {} point rows, found {}", k_count * (n + 1), rows.len()),
        });
    }
    let dim = 3 * k_count;
    let mean = DVector::from_iterator(dim, rows[..k_count].iter().flat_map(|r| r.1.iter().copied()));
    let mut basis = DMatrix::zeros(n, dim);
    for b in 0..n {
        for k in 0..k_count {
            let vals = &rows[(b + 1) * k_count + k].1;
            for d in 0..3 {
                basis[(b, 3 * k + d)] = vals[d];
            }
        }
    }
    MorphableModel::new(mean, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn pose() -> OrthoCamPose {
        let r = crate::geometry::rot_y(0.6) * nalgebra::Rotation3::from_euler_angles(0.3, 0.0, 0.0).matrix();
        OrthoCamPose {
            scale: 80.0,
            rotation: Matrix2x3::from_fn(|i, j| r[(i, j)]),
            translation: Vector3::new(2.0, -1.0, 0.5),
        }
    }

    fn observe(model: &MorphableModel, alpha: &ShapeCoefficients, cam: &OrthoCamPose) -> LandmarkObservations {
        LandmarkObservations {
            points: instantiate(model, alpha)
                .unwrap()
                .iter()
                .map(|p| {
                    let q = cam.project(p);
                    Landmark::visible(q.x, q.y)
                })
                .collect(),
        }
    }

    #[test]
    fn instantiate_examples() {
        let m = MorphableModel::car_template(3);
        let zero = instantiate(&m, &ShapeCoefficients::zeros(3)).unwrap();
        for (k, p) in zero.iter().enumerate() {
            assert_eq!(*p, m.mean_point(k));
        }
        let one_hot = ShapeCoefficients(DVector::from_vec(vec![0.0, 1.0, 0.0]));
        let pts = instantiate(&m, &one_hot).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert_relative_eq!(*p, m.mean_point(k) + m.basis_point(1, k), epsilon = 1e-15);
        }
        assert!(matches!(
            instantiate(&m, &ShapeCoefficients::zeros(2)),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    proptest! {
        #[test]
        fn instantiate_is_affine(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let m = MorphableModel::car_template(4);
            let sa = instantiate(&m, &ShapeCoefficients(DVector::from_vec(a.clone()))).unwrap();
            let sb = instantiate(&m, &ShapeCoefficients(DVector::from_vec(b.clone()))).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let sab = instantiate(&m, &ShapeCoefficients(DVector::from_vec(sum))).unwrap();
            for k in 0..LANDMARK_COUNT {
                let lhs = sa[k] + sb[k] - m.mean_point(k);
                prop_assert!((lhs - sab[k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn template_basis_is_orthogonal() {
        let m = MorphableModel::car_template(7);
        let gram = &m.basis * m.basis.transpose();
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    assert!(gram[(i, j)].abs() < 1e-12);
                }
            }
            assert!(gram[(i, i)] > 0.0);
        }
    }

    #[test]
    fn identity_placement_and_inverse() {
        let m = MorphableModel::car_template(2);
        let pts = instantiate(&m, &ShapeCoefficients::zeros(2)).unwrap();
        let id = PoseBox3D::new(0.0, Vector3::zeros(), Vector3::zeros());
        assert_eq!(place_in_camera(&pts, &id), pts);
        let pose = PoseBox3D::new(2.1, Vector3::new(3.0, 1.65, 21.0), Vector3::new(1.36, 0.47, 0.47));
        for (p, q) in pts.iter().zip(place_in_camera(&pts, &pose)) {
            assert_relative_eq!(pose.inverse_transform(&q), *p, epsilon = 1e-10);
        }
    }

    #[test]
    fn placed_template_stays_in_box() {
        use rand::{Rng, SeedableRng};
        let m = MorphableModel::car_template(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pose = PoseBox3D::new(0.9, Vector3::new(-1.0, 1.65, 14.0), Vector3::new(1.36, 0.47, 0.47));
        for _ in 0..2000 {
            let alpha = DVector::from_fn(5, |_, _| rng.random_range(-3.0..=3.0));
            let pts = instantiate(&m, &ShapeCoefficients(alpha)).unwrap();
            for q in place_in_camera(&pts, &pose) {
                assert!(pose.contains(&q, 1e-9));
            }
        }
        // Corner deformation (every alpha at +-3) is the worst case.
        for signs in 0..32u32 {
            let alpha = DVector::from_fn(5, |i, _| if signs >> i & 1 == 1 { 3.0 } else { -3.0 });
            for q in place_in_camera(&instantiate(&m, &ShapeCoefficients(alpha)).unwrap(), &pose) {
                assert!(pose.contains(&q, 1e-9));
            }
        }
    }

    #[test]
    fn fit_recovers_noise_free_coefficients() {
        let m = MorphableModel::car_template(3);
        let truth = ShapeCoefficients(DVector::from_vec(vec![1.2, -0.7, 0.4]));
        let cam = pose();
        let obs = observe(&m, &truth, &cam);
        let fit = fit_coefficients(&m, &obs, &cam, 0.0).unwrap();
        assert!(!fit.low_confidence);
        assert_relative_eq!(fit.alpha.0, truth.0, epsilon = 1e-6);
    }

    #[test]
    fn fit_prior_and_ridge_limits() {
        let m = MorphableModel::car_template(3);
        let cam = pose();
        let hidden = LandmarkObservations {
            points: vec![Landmark::hidden(); LANDMARK_COUNT],
        };
        let fit = fit_coefficients(&m, &hidden, &cam, 1.0).unwrap();
        assert!(fit.low_confidence);
        assert_eq!(fit.alpha.0, DVector::zeros(3));

        let truth = ShapeCoefficients(DVector::from_vec(vec![2.0, -2.0, 1.0]));
        let obs = observe(&m, &truth, &cam);
        let mut last = f64::INFINITY;
        for s2 in [1e-2, 1e2, 1e6, 1e12] {
            let norm = fit_coefficients(&m, &obs, &cam, s2).unwrap().alpha.0.norm();
            assert!(norm < last);
            last = norm;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn fit_few_visible_is_low_confidence() {
        let m = MorphableModel::car_template(6);
        let cam = pose();
        let mut obs = observe(&m, &ShapeCoefficients::zeros(6), &cam);
        for p in obs.points.iter_mut().skip(2) {
            p.visible = false;
        }
        let fit = fit_coefficients(&m, &obs, &cam, 1.0).unwrap();
        assert!(fit.low_confidence);
        assert_eq!(fit.alpha.0, DVector::zeros(6));
    }

    #[test]
    fn persistence_round_trip() {
        let m = MorphableModel::car_template(4);
        let text = write_model(&m);
        assert!(text.starts_with("14 4\n"));
        assert_eq!(text.lines().count(), 1 + 14 * 5);
        let back = read_model(text.as_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn persistence_rejects_bad_input() {
        assert!(matches!(read_model("".as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(read_model("14 0\n1 2\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_model("3 0\n".as_bytes()), Err(Error::DimensionMismatch { .. })));
        let mut text = write_model(&MorphableModel::car_template(0));
        text.push_str("1 2 3\n");
        assert!(read_model(text.as_bytes()).is_err());
    }

    #[test]
    fn alignment_undoes_axis_scaling_and_rotation() {
        let m = MorphableModel::car_template(2);
        let r = nalgebra::Rotation3::from_euler_angles(0.2, -1.1, 0.4).into_inner()
            * Matrix3::from_diagonal(&Vector3::new(3.9, 1.6, 1.5));
        let mut moved = m.clone();
        for k in 0..LANDMARK_COUNT {
            let p = r * m.mean_point(k) + Vector3::new(1.0, 2.0, -3.0);
            moved.mean.fixed_rows_mut::<3>(3 * k).copy_from(&p);
            for n in 0..2 {
                let v: Vector3<f64> = r * m.basis_point(n, k);
                for d in 0..3 {
                    moved.basis[(n, 3 * k + d)] = v[d];
                }
            }
        }
        let back = moved.aligned_to(&m);
        assert_relative_eq!(back.mean, m.mean, epsilon = 1e-10);
        assert_relative_eq!(back.basis, m.basis, epsilon = 1e-10);
    }

    #[test]
    fn learn_rejects_insufficient_data() {
        let m = MorphableModel::car_template(2);
        let obs: Vec<_> = (0..15).map(|_| observe(&m, &ShapeCoefficients::zeros(2), &pose())).collect();
        assert!(matches!(learn_em(&obs, 2, &EmOptions::default()), Err(Error::InsufficientData(_))));
    }
}

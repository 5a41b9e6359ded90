//! Residuals of the joint pose/shape energy and their analytic Jacobian.
//!
//! Every term enters as a squared residual norm:
//!
//! ```text
//! E = |r_box|^2 + l_lp |r_lp|^2 + l_md r_md^2 + l_gp r_gp^2 + l_s |r_s|^2
//! ```
//!
//! The solver works on the stacked vector of weighted residuals, laid out as
//! `[box (4) | landmarks (2K) | depth (1) | ground (1) | shape (N)]`.
//! Disabled terms keep their rows but contribute zeros.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    self, project_hull, project_with_jacobian, rot_y_derivative, Box2D, CameraIntrinsics, GroundPlane,
    PoseBox3D, UNIT_BOX_CORNERS,
};
use crate::shape::{Landmark, MorphableModel};

/// Index of yaw in the parameter vector.
pub const PARAM_THETA: usize = 0;
/// First index of the translation block.
pub const PARAM_T: usize = 1;
/// First index of the log-scale block.
pub const PARAM_SIGMA: usize = 4;
/// First index of the shape coefficients.
pub const PARAM_ALPHA: usize = 7;

/// Reference for the shape prior residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapePriorCenter {
    /// Penalize the spread of the coefficients around their own mean.
    InstanceMean,
    /// Penalize the coefficients themselves.
    Zero,
}

/// Which energy terms take part, and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub lambda_landmarks: f64,
    pub lambda_depth: f64,
    pub lambda_ground: f64,
    pub lambda_shape: f64,
    /// Multiplier on the box-center residuals (pixels).
    pub box_translation_scale: f64,
    /// Multiplier on the box log-extent residuals.
    pub box_log_scale_scale: f64,
    pub shape_prior_center: ShapePriorCenter,
    pub enable_box: bool,
    pub enable_landmarks: bool,
    pub enable_depth: bool,
    pub enable_ground: bool,
    pub enable_shape: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda_landmarks: 1.0,
            lambda_depth: 1.0,
            lambda_ground: 1000.0,
            lambda_shape: 0.1,
            box_translation_scale: 1.0,
            box_log_scale_scale: 1.0,
            shape_prior_center: ShapePriorCenter::InstanceMean,
            enable_box: true,
            enable_landmarks: true,
            enable_depth: true,
            enable_ground: true,
            enable_shape: true,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_landmarks,
            self.lambda_depth,
            self.lambda_ground,
            self.lambda_shape,
            self.box_translation_scale,
            self.box_log_scale_scale,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("energy weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// 2D pseudo-measurements and hypotheses for one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub box2d: Box2D,
    pub landmarks: Vec<Landmark>,
    /// Average crop depth (meters), when available.
    pub depth: Option<f64>,
    /// Yaw hypothesis.
    pub theta0: f64,
    /// Log-extent hypothesis `(L, H, W)`.
    pub sigma0: Vector3<f64>,
    pub ground: GroundPlane,
    pub camera: CameraIntrinsics,
    /// Detection confidence, carried through to emitted labels.
    pub score: f64,
}

/// Optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub theta: f64,
    pub translation: Vector3<f64>,
    pub sigma: Vector3<f64>,
    pub alpha: DVector<f64>,
}

impl Variables {
    pub fn len(&self) -> usize {
        PARAM_ALPHA + self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        x[PARAM_THETA] = self.theta;
        x.fixed_rows_mut::<3>(PARAM_T).copy_from(&self.translation);
        x.fixed_rows_mut::<3>(PARAM_SIGMA).copy_from(&self.sigma);
        x.rows_mut(PARAM_ALPHA, self.alpha.len()).copy_from(&self.alpha);
        x
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        Self {
            theta: x[PARAM_THETA],
            translation: x.fixed_rows::<3>(PARAM_T).into_owned(),
            sigma: x.fixed_rows::<3>(PARAM_SIGMA).into_owned(),
            alpha: x.rows(PARAM_ALPHA, x.len() - PARAM_ALPHA).into_owned(),
        }
    }

    /// The box pose, with yaw wrapped into `[0, 2pi)`.
    pub fn pose(&self) -> PoseBox3D {
        PoseBox3D::new(self.theta, self.translation, self.sigma)
    }

    pub fn wrapped(mut self) -> Self {
        self.theta = geometry::wrap_angle(self.theta);
        self
    }
}

/// Unweighted box residual `(dtx, dty, dw, dh)`: projected hull minus the
/// measured box.
pub fn residual_2d3d(vars: &Variables, meas: &Measurement) -> Result<[f64; 4]> {
    let b = project_hull(&meas.camera, &vars.pose())?.to_box();
    let m = &meas.box2d;
    Ok([b.tx - m.tx, b.ty - m.ty, b.w - m.w, b.h - m.h])
}

fn check_landmarks(meas: &Measurement, model: &MorphableModel) -> Result<()> {
    if meas.landmarks.len() != model.landmark_count() {
        return Err(Error::DimensionMismatch {
            expected: model.landmark_count(),
            got: meas.landmarks.len(),
        });
    }
    Ok(())
}

fn check_alpha(vars: &Variables, model: &MorphableModel) -> Result<()> {
    if vars.alpha.len() != model.basis_count() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_count(),
            got: vars.alpha.len(),
        });
    }
    Ok(())
}

/// Unweighted landmark residuals (projected minus measured), two rows per
/// landmark; hidden landmarks give exact zeros.
pub fn residual_lp(vars: &Variables, meas: &Measurement, model: &MorphableModel) -> Result<DVector<f64>> {
    check_landmarks(meas, model)?;
    check_alpha(vars, model)?;
    let pose = vars.pose();
    let mut r = DVector::zeros(2 * model.landmark_count());
    for (k, lm) in meas.landmarks.iter().enumerate() {
        if !lm.visible {
            continue;
        }
        let x = pose.transform(&shape_point(model, &vars.alpha, k));
        let p = geometry::project(&meas.camera, &x)?;
        r[2 * k] = p.x - lm.u;
        r[2 * k + 1] = p.y - lm.v;
    }
    Ok(r)
}

/// `T_Z - Z_b`, or `None` when the measurement carries no depth.
pub fn residual_md(vars: &Variables, meas: &Measurement) -> Option<f64> {
    meas.depth.map(|z| vars.translation.z - z)
}

/// `N^T T - 1`.
pub fn residual_gp(vars: &Variables, meas: &Measurement) -> f64 {
    meas.ground.residual(&vars.translation)
}

/// Coefficient deviations from the prior center.
pub fn residual_s(vars: &Variables, center: ShapePriorCenter) -> DVector<f64> {
    let n = vars.alpha.len();
    match center {
        ShapePriorCenter::Zero => vars.alpha.clone(),
        ShapePriorCenter::InstanceMean if n > 0 => {
            let mean = vars.alpha.sum() / n as f64;
            vars.alpha.map(|a| a - mean)
        }
        ShapePriorCenter::InstanceMean => DVector::zeros(0),
    }
}

fn shape_point(model: &MorphableModel, alpha: &DVector<f64>, k: usize) -> Vector3<f64> {
    let mut p = model.mean_point(k);
    for n in 0..alpha.len() {
        p += model.basis_point(n, k) * alpha[n];
    }
    p
}

/// Weighted contribution of each term to the total energy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub box2d3d: f64,
    pub landmarks: f64,
    pub depth: f64,
    pub ground: f64,
    pub shape: f64,
    /// The depth term was enabled but the measurement had no depth.
    pub depth_missing: bool,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.box2d3d + self.landmarks + self.depth + self.ground + self.shape
    }
}

/// Row offsets of each term inside the stacked residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualLayout {
    pub landmarks: usize,
    pub depth: usize,
    pub ground: usize,
    pub shape: usize,
    pub len: usize,
}

impl ResidualLayout {
    pub fn new(landmark_count: usize, basis_count: usize) -> Self {
        let landmarks = 4;
        let depth = landmarks + 2 * landmark_count;
        let ground = depth + 1;
        let shape = ground + 1;
        Self {
            landmarks,
            depth,
            ground,
            shape,
            len: shape + basis_count,
        }
    }
}

/// Weighted residual stack with (optionally) its Jacobian.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residuals: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub layout: ResidualLayout,
    pub breakdown: EnergyBreakdown,
    /// Smallest gap (px) between an active hull corner and its runner-up.
    pub hull_tie_gap: f64,
    /// Per extreme (`umin, umax, vmin, vmax`), gap (px) to the runner-up.
    pub hull_gaps: [f64; 4],
}

/// Hull gaps below this (px) are reported as non-differentiable ties.
pub const HULL_TIE_TOLERANCE: f64 = 1e-6;

impl Linearization {
    pub fn energy(&self) -> f64 {
        self.residuals.norm_squared()
    }

    /// The box Jacobian was taken at a hull tie (a subgradient choice).
    pub fn hull_tie(&self) -> bool {
        self.hull_tie_gap < HULL_TIE_TOLERANCE
    }
}

/// Stack the weighted residuals and, when `with_jacobian`, their analytic
/// derivatives with respect to `(theta, T, sigma, alpha)`.
pub fn linearize(
    vars: &Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    with_jacobian: bool,
) -> Result<Linearization> {
    linearize_with_hull_choice(vars, meas, model, cfg, with_jacobian, [false; 4])
}

/// As [`linearize`], but the box Jacobian of every extreme flagged in
/// `use_runner_up` (order `umin, umax, vmin, vmax`) is taken at its
/// runner-up corner: the other one-sided derivative at a hull tie.
pub fn linearize_with_hull_choice(
    vars: &Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    with_jacobian: bool,
    use_runner_up: [bool; 4],
) -> Result<Linearization> {
    check_landmarks(meas, model)?;
    check_alpha(vars, model)?;
    let n_alpha = model.basis_count();
    let layout = ResidualLayout::new(model.landmark_count(), n_alpha);
    let n_params = PARAM_ALPHA + n_alpha;
    let mut r = DVector::zeros(layout.len);
    let mut jac = with_jacobian.then(|| DMatrix::zeros(layout.len, n_params));
    let mut breakdown = EnergyBreakdown::default();
    let mut hull_tie_gap = f64::INFINITY;
    let mut hull_gaps = [f64::INFINITY; 4];

    let pose = vars.pose();
    let rot = pose.rotation();
    let drot = rot_y_derivative(vars.theta);
    let ext = pose.extents();
    let cam = &meas.camera;

    // Derivatives of a box-frame point mapped to the camera frame:
    // columns theta, T (3), sigma (3).
    let point_jacobian = |local: &Vector3<f64>| -> [Vector3<f64>; 7] {
        let scaled = local.component_mul(&ext);
        let mut cols = [Vector3::zeros(); 7];
        cols[0] = drot * scaled;
        for i in 0..3 {
            cols[1 + i][i] = 1.0;
            let mut e = Vector3::zeros();
            e[i] = scaled[i];
            cols[4 + i] = rot * e;
        }
        cols
    };

    if cfg.enable_box {
        let hull = project_hull(cam, &pose)?;
        hull_tie_gap = hull.tie_gap;
        hull_gaps = hull.gaps;
        let b = hull.to_box();
        let m = &meas.box2d;
        let (st, ss) = (cfg.box_translation_scale, cfg.box_log_scale_scale);
        r[0] = st * (b.tx - m.tx);
        r[1] = st * (b.ty - m.ty);
        r[2] = ss * (b.w - m.w);
        r[3] = ss * (b.h - m.h);
        if let Some(j) = jac.as_mut() {
            let corners = box3d_corner_locals();
            // d(u or v)/dparams at each active corner
            let mut grads = [[0.0f64; 7]; 4];
            for (slot, &ci) in hull.active.iter().enumerate() {
                let ci = if use_runner_up[slot] { hull.runner_up[slot] } else { ci };
                let local = corners[ci];
                let x = pose.translation + rot * local.component_mul(&ext);
                let (_, pj) = project_with_jacobian(cam, &x)?;
                let row = if slot < 2 { 0 } else { 1 };
                let cols = point_jacobian(&local);
                for (c, col) in cols.iter().enumerate() {
                    grads[slot][c] = pj[row][0] * col.x + pj[row][1] * col.y + pj[row][2] * col.z;
                }
            }
            let width = hull.umax - hull.umin;
            let height = hull.vmax - hull.vmin;
            for c in 0..7 {
                j[(0, c)] = st * 0.5 * (grads[0][c] + grads[1][c]);
                j[(1, c)] = st * 0.5 * (grads[2][c] + grads[3][c]);
                j[(2, c)] = ss * (grads[1][c] - grads[0][c]) / width;
                j[(3, c)] = ss * (grads[3][c] - grads[2][c]) / height;
            }
        }
        breakdown.box2d3d = r.rows(0, 4).norm_squared();
    }

    if cfg.enable_landmarks {
        let w = cfg.lambda_landmarks.sqrt();
        for (k, lm) in meas.landmarks.iter().enumerate() {
            if !lm.visible {
                continue;
            }
            let local = shape_point(model, &vars.alpha, k);
            let x = pose.translation + rot * local.component_mul(&ext);
            let (p, pj) = project_with_jacobian(cam, &x)?;
            let row = layout.landmarks + 2 * k;
            r[row] = w * (p.x - lm.u);
            r[row + 1] = w * (p.y - lm.v);
            if let Some(j) = jac.as_mut() {
                let cols = point_jacobian(&local);
                for d in 0..2 {
                    for (c, col) in cols.iter().enumerate() {
                        j[(row + d, c)] = w * (pj[d][0] * col.x + pj[d][1] * col.y + pj[d][2] * col.z);
                    }
                    for n in 0..n_alpha {
                        let dx = rot * model.basis_point(n, k).component_mul(&ext);
                        j[(row + d, PARAM_ALPHA + n)] = w * (pj[d][0] * dx.x + pj[d][1] * dx.y + pj[d][2] * dx.z);
                    }
                }
            }
        }
        breakdown.landmarks = r.rows(layout.landmarks, 2 * model.landmark_count()).norm_squared();
    }

    if cfg.enable_depth {
        match residual_md(vars, meas) {
            Some(d) => {
                let w = cfg.lambda_depth.sqrt();
                r[layout.depth] = w * d;
                if let Some(j) = jac.as_mut() {
                    j[(layout.depth, PARAM_T + 2)] = w;
                }
                breakdown.depth = r[layout.depth].powi(2);
            }
            None => breakdown.depth_missing = true,
        }
    }

    if cfg.enable_ground {
        let w = cfg.lambda_ground.sqrt();
        r[layout.ground] = w * residual_gp(vars, meas);
        if let Some(j) = jac.as_mut() {
            for i in 0..3 {
                j[(layout.ground, PARAM_T + i)] = w * meas.ground.normal[i];
            }
        }
        breakdown.ground = r[layout.ground].powi(2);
    }

    if cfg.enable_shape && n_alpha > 0 {
        let w = cfg.lambda_shape.sqrt();
        let rs = residual_s(vars, cfg.shape_prior_center);
        for n in 0..n_alpha {
            r[layout.shape + n] = w * rs[n];
        }
        if let Some(j) = jac.as_mut() {
            let off = match cfg.shape_prior_center {
                ShapePriorCenter::InstanceMean => 1.0 / n_alpha as f64,
                ShapePriorCenter::Zero => 0.0,
            };
            for n in 0..n_alpha {
                for m in 0..n_alpha {
                    let delta = if n == m { 1.0 } else { 0.0 };
                    j[(layout.shape + n, PARAM_ALPHA + m)] = w * (delta - off);
                }
            }
        }
        breakdown.shape = rs.norm_squared() * cfg.lambda_shape;
    }

    Ok(Linearization {
        residuals: r,
        jacobian: jac,
        layout,
        breakdown,
        hull_tie_gap,
        hull_gaps,
    })
}

fn box3d_corner_locals() -> [Vector3<f64>; 8] {
    UNIT_BOX_CORNERS.map(Vector3::from)
}

/// Total energy and its per-term breakdown.
pub fn total_energy(
    vars: &Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
) -> Result<EnergyBreakdown> {
    Ok(linearize(vars, meas, model, cfg, false)?.breakdown)
}

/// Jacobian of the weighted residual stack.
pub fn jacobian(
    vars: &Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
) -> Result<Linearization> {
    linearize(vars, meas, model, cfg, true)
}

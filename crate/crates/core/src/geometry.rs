//! Camera model, box parameterizations and overlap measures.
//!
//! Axes follow the KITTI camera frame: X right, Y down (gravity), Z forward.
//! A 3D box is anchored at the center of its bottom face, so before rotation
//! its corners span `x in [-L/2, L/2]`, `y in [-H, 0]`, `z in [-W/2, W/2]`.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Minimum depth (meters) for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Polygon vertices closer than this are treated as coincident.
const COINCIDENT_EPS: f64 = 1e-9;

/// Wrap an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_pi(theta: f64) -> f64 {
    let w = wrap_angle(theta);
    if w > std::f64::consts::PI {
        w - TAU
    } else {
        w
    }
}

/// Rotation by `theta` about the camera Y (gravity) axis.
pub fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Derivative of [`rot_y`] with respect to `theta`.
pub fn rot_y_derivative(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!(
                "camera focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// KITTI-like defaults.
    pub fn kitti() -> Self {
        Self {
            fx: 721.5,
            fy: 721.5,
            cx: 609.6,
            cy: 172.9,
        }
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Central perspective projection of a camera-frame point.
pub fn project(cam: &CameraIntrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(x.z > MIN_DEPTH) {
        return Err(Error::PointBehindCamera { z: x.z });
    }
    Ok(Vector2::new(
        cam.fx * x.x / x.z + cam.cx,
        cam.fy * x.y / x.z + cam.cy,
    ))
}

/// Projection together with its 2x3 Jacobian with respect to the point.
pub fn project_with_jacobian(
    cam: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> Result<(Vector2<f64>, [[f64; 3]; 2])> {
    let p = project(cam, x)?;
    let iz = 1.0 / x.z;
    let jac = [
        [cam.fx * iz, 0.0, -cam.fx * x.x * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * x.y * iz * iz],
    ];
    Ok((p, jac))
}

/// Axis-aligned 2D box: center plus log-scale extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub tx: f64,
    pub ty: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(tx: f64, ty: f64, w: f64, h: f64) -> Self {
        Self { tx, ty, w, h }
    }

    /// Build from pixel edges. Returns `None` unless `right > left` and
    /// `bottom > top`.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64) -> Option<Self> {
        if !(right > left && bottom > top) {
            return None;
        }
        Some(Self {
            tx: 0.5 * (left + right),
            ty: 0.5 * (top + bottom),
            w: (right - left).ln(),
            h: (bottom - top).ln(),
        })
    }

    pub fn width(&self) -> f64 {
        self.w.exp()
    }

    pub fn height(&self) -> f64 {
        self.h.exp()
    }

    /// `(left, top, right, bottom)` in pixels.
    pub fn edges(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.width();
        let hh = 0.5 * self.height();
        (self.tx - hw, self.ty - hh, self.tx + hw, self.ty + hh)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Ground plane `{T : N^T T = 1}` given by its scaled normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
}

impl GroundPlane {
    pub fn new(normal: Vector3<f64>) -> Result<Self> {
        if !(normal.norm() > 0.0) || !normal.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("ground plane normal must be non-zero".into()));
        }
        Ok(Self { normal })
    }

    /// Level ground `height` meters below the optical center.
    pub fn from_camera_height(height: f64) -> Result<Self> {
        Self::new(Vector3::new(0.0, 1.0 / height, 0.0))
    }

    pub fn residual(&self, t: &Vector3<f64>) -> f64 {
        self.normal.dot(t) - 1.0
    }

    /// Y coordinate of the plane above/below `(x, z)`, if the plane is not
    /// vertical.
    pub fn y_at(&self, x: f64, z: f64) -> Option<f64> {
        let n = &self.normal;
        if n.y.abs() < 1e-12 {
            return None;
        }
        Some((1.0 - n.x * x - n.z * z) / n.y)
    }
}

/// Gravity-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseBox3D {
    /// Yaw about camera Y in `[0, 2pi)`.
    pub theta: f64,
    /// Bottom-face center in the camera frame (meters).
    pub translation: Vector3<f64>,
    /// Log extents `(L, H, W)`.
    pub sigma: Vector3<f64>,
}

/// Unit-box corners in the bottom-center convention.
///
/// Bottom face first, starting at `(+L/2, 0, +W/2)` and continuing through
/// `(+L/2, 0, -W/2)`, `(-L/2, 0, -W/2)`, `(-L/2, 0, +W/2)`; then the top
/// face (`y = -H`) in the same order.
pub const UNIT_BOX_CORNERS: [[f64; 3]; 8] = [
    [0.5, 0.0, 0.5],
    [0.5, 0.0, -0.5],
    [-0.5, 0.0, -0.5],
    [-0.5, 0.0, 0.5],
    [0.5, -1.0, 0.5],
    [0.5, -1.0, -0.5],
    [-0.5, -1.0, -0.5],
    [-0.5, -1.0, 0.5],
];

/// Corner index pairs forming the 12 box edges.
pub const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

impl PoseBox3D {
    pub fn new(theta: f64, translation: Vector3<f64>, sigma: Vector3<f64>) -> Self {
        Self {
            theta: wrap_angle(theta),
            translation,
            sigma,
        }
    }

    /// Metric extents `(L, H, W)`.
    pub fn extents(&self) -> Vector3<f64> {
        self.sigma.map(f64::exp)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_y(self.theta)
    }

    /// Map a point from the normalized box frame into the camera frame.
    pub fn transform(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local.component_mul(&self.extents()) + self.translation
    }

    /// Inverse of [`PoseBox3D::transform`].
    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation().transpose() * (p - self.translation)).component_div(&self.extents())
    }

    /// Geometric center of the box volume.
    pub fn center(&self) -> Vector3<f64> {
        self.translation - Vector3::new(0.0, 0.5 * self.extents().y, 0.0)
    }

    pub fn volume(&self) -> f64 {
        let e = self.extents();
        e.x * e.y * e.z
    }

    /// Whether `p` lies inside the box, with slack `tol` meters.
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let e = self.extents();
        let l = self.rotation().transpose() * (p - self.translation);
        l.x.abs() <= 0.5 * e.x + tol && l.z.abs() <= 0.5 * e.z + tol && l.y <= tol && l.y >= -e.y - tol
    }

    /// Ground footprint as `(x, z)` vertices in corner order.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let c = box3d_corners(self);
        [0, 1, 2, 3].map(|i| Vector2::new(c[i].x, c[i].z))
    }

    /// Vertical extent `(y_top, y_bottom)`; Y points down so `y_top < y_bottom`.
    pub fn y_range(&self) -> (f64, f64) {
        (self.translation.y - self.extents().y, self.translation.y)
    }
}

/// The 8 box corners in the documented order (see [`UNIT_BOX_CORNERS`]).
pub fn box3d_corners(pose: &PoseBox3D) -> [Vector3<f64>; 8] {
    let r = pose.rotation();
    let e = pose.extents();
    UNIT_BOX_CORNERS.map(|c| r * Vector3::new(c[0] * e.x, c[1] * e.y, c[2] * e.z) + pose.translation)
}

/// Projected corner hull with the corners attaining each extreme.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedHull {
    pub umin: f64,
    pub umax: f64,
    pub vmin: f64,
    pub vmax: f64,
    /// Corner indices attaining `umin, umax, vmin, vmax`.
    pub active: [usize; 4],
    /// Closest competing corner per extreme, and its gap (px) to the active one.
    pub runner_up: [usize; 4],
    pub gaps: [f64; 4],
    /// Smallest gap between an active extreme and the runner-up corner.
    pub tie_gap: f64,
}

impl ProjectedHull {
    pub fn to_box(&self) -> Box2D {
        Box2D {
            tx: 0.5 * (self.umin + self.umax),
            ty: 0.5 * (self.vmin + self.vmax),
            w: (self.umax - self.umin).ln(),
            h: (self.vmax - self.vmin).ln(),
        }
    }
}

/// Axis-aligned hull of the 8 projected corners.
pub fn project_hull(cam: &CameraIntrinsics, pose: &PoseBox3D) -> Result<ProjectedHull> {
    let corners = box3d_corners(pose);
    let mut uv = [Vector2::zeros(); 8];
    for (dst, c) in uv.iter_mut().zip(corners.iter()) {
        *dst = project(cam, c)?;
    }
    let mut active = [0usize; 4];
    let mut runner_up = [0usize; 4];
    let mut gaps = [f64::INFINITY; 4];
    // (coordinate, maximize?)
    for (slot, (axis, maximize)) in [(0, false), (0, true), (1, false), (1, true)].into_iter().enumerate() {
        let key = |i: usize| if maximize { uv[i][axis] } else { -uv[i][axis] };
        // Corners i and i + 4 share X and Z, hence the same u as a function
        // of every variable; only the bottom four are u candidates.
        let candidates = if axis == 0 { 4 } else { 8 };
        let mut best = 0;
        for i in 1..candidates {
            if key(i) > key(best) {
                best = i;
            }
        }
        for i in (0..candidates).filter(|&i| i != best) {
            let gap = key(best) - key(i);
            if gap < gaps[slot] {
                gaps[slot] = gap;
                runner_up[slot] = i;
            }
        }
        active[slot] = best;
    }
    let tie_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ProjectedHull {
        umin: uv[active[0]].x,
        umax: uv[active[1]].x,
        vmin: uv[active[2]].y,
        vmax: uv[active[3]].y,
        active,
        runner_up,
        gaps,
        tie_gap,
    })
}

/// Tight axis-aligned 2D box around the projected 3D box.
pub fn project_box3d(cam: &CameraIntrinsics, pose: &PoseBox3D) -> Result<Box2D> {
    Ok(project_hull(cam, pose)?.to_box())
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let (al, at, ar, ab) = a.edges();
    let (bl, bt, br, bb) = b.edges();
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Signed polygon area by the shoelace formula (positive when counterclockwise).
pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            p.x * q.y - q.x * p.y
        })
        .sum::<f64>()
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn ccw(poly: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut v = poly.to_vec();
    if polygon_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

fn push_distinct(out: &mut Vec<Vector2<f64>>, p: Vector2<f64>) {
    if out.last().is_none_or(|q| (q - p).norm() > COINCIDENT_EPS) {
        out.push(p);
    }
}

/// Sutherland-Hodgman clip of a convex `subject` polygon by a convex `clip`
/// polygon. Either winding is accepted; the result is counterclockwise.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let clip = ccw(clip);
    let mut output = ccw(subject);
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(&a, &b, &cur) >= 0.0;
            let prev_in = cross(&a, &b, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    push_distinct(&mut output, segment_line_intersection(&prev, &cur, &a, &b));
                }
                push_distinct(&mut output, cur);
            } else if prev_in {
                push_distinct(&mut output, segment_line_intersection(&prev, &cur, &a, &b));
            }
        }
        if output.len() > 1 && (output[0] - output[output.len() - 1]).norm() <= COINCIDENT_EPS {
            output.pop();
        }
    }
    if output.len() < 3 {
        output.clear();
    }
    output
}

fn segment_line_intersection(
    p: &Vector2<f64>,
    q: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
) -> Vector2<f64> {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < f64::MIN_POSITIVE {
        return *q;
    }
    let t = cp / denom;
    p + (q - p) * t
}

/// Area of the intersection of two ground footprints.
pub fn footprint_intersection(a: &PoseBox3D, b: &PoseBox3D) -> f64 {
    let clipped = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&clipped).abs()
}

/// Bird's-eye-view IoU of the two yaw-rotated footprints.
pub fn iou_bev(a: &PoseBox3D, b: &PoseBox3D) -> f64 {
    let (ea, eb) = (a.extents(), b.extents());
    let area_a = ea.x * ea.z;
    let area_b = eb.x * eb.z;
    if !(area_a > 0.0 && area_b > 0.0) {
        return 0.0;
    }
    let inter = footprint_intersection(a, b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU of two gravity-aligned boxes: footprint overlap times vertical
/// overlap over the union of volumes.
pub fn iou_3d(a: &PoseBox3D, b: &PoseBox3D) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return 0.0;
    }
    let (a_top, a_bot) = a.y_range();
    let (b_top, b_bot) = b.y_range();
    let dy = (a_bot.min(b_bot) - a_top.max(b_top)).max(0.0);
    if dy == 0.0 {
        return 0.0;
    }
    let inter = footprint_intersection(a, b) * dy;
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

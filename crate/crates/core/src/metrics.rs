//! KITTI-style detection metrics: ALP, 3D / bird's-eye-view AP, 2D AP and
//! AOS, with cumulative difficulty buckets.
//!
//! Matching runs per frame. Detections are visited by descending score (ties
//! broken by a content key, so input order never matters) and each claims
//! the best unmatched valid ground truth passing the criterion. A detection
//! that only passes against an ignored ground truth is discarded; anything
//! else is a false positive.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, iou_3d, iou_bev, wrap_pi};
use crate::scene::{label_to_pose, LabelRecord};

/// Object class scored by the evaluation.
pub const EVAL_CLASS: &str = "Car";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// Smallest box height (px) evaluated at this level.
    pub fn min_height(self) -> f64 {
        match self {
            Difficulty::Easy => 40.0,
            Difficulty::Moderate | Difficulty::Hard => 25.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
        }
    }
}

/// Tightest difficulty an object qualifies for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Bucket {
    /// Whether the object counts at difficulty `d` (buckets are cumulative).
    pub fn within(self, d: Difficulty) -> bool {
        match self {
            Bucket::Easy => true,
            Bucket::Moderate => d >= Difficulty::Moderate,
            Bucket::Hard => d >= Difficulty::Hard,
            Bucket::Ignored => false,
        }
    }
}

pub fn difficulty_bucket(gt: &LabelRecord, projected_height_px: f64) -> Bucket {
    let (occ, trunc, h) = (gt.occluded, gt.truncated, projected_height_px);
    if gt.is_dont_care() || occ < 0 {
        Bucket::Ignored
    } else if h >= 40.0 && occ == 0 && trunc <= 0.15 {
        Bucket::Easy
    } else if h >= 25.0 && occ <= 1 && trunc <= 0.30 {
        Bucket::Moderate
    } else if h >= 25.0 && occ <= 2 && trunc <= 0.50 {
        Bucket::Hard
    } else {
        Bucket::Ignored
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Eleven,
    FortyOne,
}

impl Interpolation {
    fn sample_count(self) -> usize {
        match self {
            Interpolation::Eleven => 11,
            Interpolation::FortyOne => 41,
        }
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11" => Ok(Self::Eleven),
            "41" => Ok(Self::FortyOne),
            other => Err(Error::Config(format!("interpolation must be 11 or 41, got '{other}'"))),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.sample_count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// 2D IoU a detection must reach for ALP credit; `None` disables the gate.
    pub alp_gate_iou: Option<f64>,
    pub interpolation: Interpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alp_gate_iou: Some(0.7),
            interpolation: Interpolation::Eleven,
        }
    }
}

/// How a detection is compared with a ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// 3D center distance below `threshold_m`, optionally gated by 2D IoU.
    CenterDistance { threshold_m: f64, gate_iou: Option<f64> },
    Iou3d(f64),
    IouBev(f64),
    Iou2d(f64),
}

impl Criterion {
    /// Match quality (larger is better) if the pair passes.
    pub fn score(&self, det: &LabelRecord, gt: &LabelRecord) -> Option<f64> {
        match *self {
            Criterion::CenterDistance { threshold_m, gate_iou } => {
                if let Some(g) = gate_iou {
                    if box_iou(det, gt) < g {
                        return None;
                    }
                }
                let d = center_distance(det, gt);
                (d < threshold_m).then_some(-d)
            }
            Criterion::Iou3d(t) => pass(iou_3d(&label_to_pose(det), &label_to_pose(gt)), t),
            Criterion::IouBev(t) => pass(iou_bev(&label_to_pose(det), &label_to_pose(gt)), t),
            Criterion::Iou2d(t) => pass(box_iou(det, gt), t),
        }
    }
}

fn pass(iou: f64, threshold: f64) -> Option<f64> {
    (iou >= threshold).then_some(iou)
}

fn box_iou(a: &LabelRecord, b: &LabelRecord) -> f64 {
    match (a.box2d(), b.box2d()) {
        (Some(x), Some(y)) => iou_2d(&x, &y),
        _ => 0.0,
    }
}

/// Distance between the volumetric centers of two labeled boxes.
pub fn center_distance(a: &LabelRecord, b: &LabelRecord) -> f64 {
    let center = |r: &LabelRecord| Vector3::new(r.location[0], r.location[1] - 0.5 * r.dimensions[0], r.location[2]);
    (center(a) - center(b)).norm()
}

/// Orientation similarity `(1 + cos(da)) / 2` of observation angles.
pub fn orientation_similarity(det: &LabelRecord, gt: &LabelRecord) -> f64 {
    0.5 * (1.0 + wrap_pi(det.alpha - gt.alpha).cos())
}

/// Detections and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub detections: Vec<LabelRecord>,
    pub ground_truth: Vec<LabelRecord>,
}

/// Ordering key making the sweep independent of input order: descending
/// score, then the label content.
pub fn detection_order(a: &LabelRecord, b: &LabelRecord) -> Ordering {
    let sa = a.score.unwrap_or(0.0);
    let sb = b.score.unwrap_or(0.0);
    sb.total_cmp(&sa).then_with(|| {
        let key = |r: &LabelRecord| {
            let mut k = Vec::with_capacity(12);
            k.extend_from_slice(&r.bbox);
            k.extend_from_slice(&r.location);
            k.extend_from_slice(&r.dimensions);
            k.push(r.rotation_y);
            k.push(r.alpha);
            k
        };
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.kind.cmp(&b.kind))
    })
}

/// Outcome of one scored detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub score: f64,
    pub true_positive: bool,
    /// Orientation similarity for true positives, 0 otherwise.
    pub similarity: f64,
}

/// Match one frame; returns kept detections and the count of valid GT.
pub fn match_frame(frame: &EvalFrame, criterion: &Criterion, difficulty: Difficulty) -> (Vec<ScoredDetection>, usize) {
    let gts: Vec<(&LabelRecord, bool)> = frame
        .ground_truth
        .iter()
        .filter(|g| g.kind == EVAL_CLASS || g.is_dont_care())
        .map(|g| (g, difficulty_bucket(g, g.bbox_height()).within(difficulty)))
        .collect();
    let n_valid = gts.iter().filter(|(_, v)| *v).count();
    let mut dets: Vec<&LabelRecord> = frame.detections.iter().filter(|d| d.kind == EVAL_CLASS).collect();
    dets.sort_by(|a, b| detection_order(a, b));

    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for det in dets {
        let score = det.score.unwrap_or(0.0);
        let mut best: Option<(usize, f64)> = None;
        for (j, (gt, valid)) in gts.iter().enumerate() {
            if !valid || taken[j] || gt.is_dont_care() {
                continue;
            }
            if let Some(q) = criterion.score(det, gt) {
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((j, q));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out.push(ScoredDetection {
                score,
                true_positive: true,
                similarity: orientation_similarity(det, gts[j].0),
            });
            continue;
        }
        let absorbed = gts.iter().any(|(gt, valid)| {
            !valid && (criterion.score(det, gt).is_some() || (gt.is_dont_care() && box_iou(det, gt) >= 0.5))
        });
        let too_small = det.bbox_height() < difficulty.min_height();
        if absorbed || too_small {
            continue;
        }
        out.push(ScoredDetection {
            score,
            true_positive: false,
            similarity: 0.0,
        });
    }
    (out, n_valid)
}

/// Precision/recall operating points and the interpolated averages.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision, orientation-weighted precision)`, one point per
    /// distinct score threshold, by decreasing threshold.
    pub points: Vec<(f64, f64, f64)>,
    /// Interpolated AP in percent.
    pub ap: f64,
    /// Interpolated AOS in percent.
    pub aos: f64,
}

/// Sweep the score threshold over matched detections.
pub fn pr_curve(mut dets: Vec<ScoredDetection>, n_gt: usize, interpolation: Interpolation) -> Option<PrCurve> {
    if n_gt == 0 {
        return None;
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut fp, mut sim) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < dets.len() {
        let s = dets[i].score;
        while i < dets.len() && dets[i].score == s {
            if dets[i].true_positive {
                tp += 1;
                sim += dets[i].similarity;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let n = (tp + fp) as f64;
        points.push((tp as f64 / n_gt as f64, tp as f64 / n, sim / n));
    }
    let samples = interpolation.sample_count();
    let mut ap = 0.0;
    let mut aos = 0.0;
    for s in 0..samples {
        let r = s as f64 / (samples - 1) as f64;
        let reach = points.iter().filter(|p| p.0 >= r - 1e-12);
        let (p, o) = reach.fold((0.0f64, 0.0f64), |(p, o), q| (p.max(q.1), o.max(q.2)));
        ap += p;
        aos += o;
    }
    Some(PrCurve {
        points,
        ap: 100.0 * ap / samples as f64,
        aos: 100.0 * aos / samples as f64,
    })
}

/// Full evaluation of `frames` under one criterion and difficulty.
pub fn evaluate(
    frames: &[EvalFrame],
    criterion: &Criterion,
    difficulty: Difficulty,
    interpolation: Interpolation,
) -> Option<PrCurve> {
    let mut all = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let (d, n) = match_frame(f, criterion, difficulty);
        all.extend(d);
        n_gt += n;
    }
    pr_curve(all, n_gt, interpolation)
}

/// Average localization precision at a center-distance threshold (m).
pub fn alp(frames: &[EvalFrame], threshold_m: f64, difficulty: Difficulty, opts: &EvalOptions) -> Option<f64> {
    let c = Criterion::CenterDistance {
        threshold_m,
        gate_iou: opts.alp_gate_iou,
    };
    evaluate(frames, &c, difficulty, opts.interpolation).map(|c| c.ap)
}

pub fn ap_3d(frames: &[EvalFrame], iou_threshold: f64, difficulty: Difficulty, opts: &EvalOptions) -> Option<f64> {
    evaluate(frames, &Criterion::Iou3d(iou_threshold), difficulty, opts.interpolation).map(|c| c.ap)
}

pub fn ap_bev(frames: &[EvalFrame], iou_threshold: f64, difficulty: Difficulty, opts: &EvalOptions) -> Option<f64> {
    evaluate(frames, &Criterion::IouBev(iou_threshold), difficulty, opts.interpolation).map(|c| c.ap)
}

/// 2D AP and AOS, both in percent.
pub fn ap_2d_aos(
    frames: &[EvalFrame],
    iou_threshold: f64,
    difficulty: Difficulty,
    opts: &EvalOptions,
) -> Option<(f64, f64)> {
    evaluate(frames, &Criterion::Iou2d(iou_threshold), difficulty, opts.interpolation).map(|c| (c.ap, c.aos))
}

/// One table row: a metric name and its value per difficulty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub values: [Option<f64>; 3],
}

/// Every metric of the evaluation suite, in report order, with PR curves.
pub fn full_report(frames: &[EvalFrame], opts: &EvalOptions) -> (Vec<MetricRow>, Vec<(String, Difficulty, PrCurve)>) {
    let mut specs: Vec<(String, Criterion, bool)> = Vec::new();
    for t in [1.0, 2.0, 3.0] {
        specs.push((
            format!("ALP@{t}m"),
            Criterion::CenterDistance {
                threshold_m: t,
                gate_iou: opts.alp_gate_iou,
            },
            false,
        ));
    }
    for t in [0.25, 0.5, 0.7] {
        specs.push((format!("AP3D@{t}"), Criterion::Iou3d(t), false));
    }
    for t in [0.5, 0.7] {
        specs.push((format!("APbev@{t}"), Criterion::IouBev(t), false));
    }
    specs.push(("AP2D@0.7".into(), Criterion::Iou2d(0.7), true));

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (name, crit, with_aos) in specs {
        let mut values = [None; 3];
        let mut aos = [None; 3];
        for (i, d) in Difficulty::ALL.into_iter().enumerate() {
            if let Some(c) = evaluate(frames, &crit, d, opts.interpolation) {
                values[i] = Some(c.ap);
                aos[i] = Some(c.aos);
                curves.push((name.clone(), d, c));
            }
        }
        rows.push(MetricRow { name, values });
        if with_aos {
            rows.push(MetricRow {
                name: "AOS@0.7".into(),
                values: aos,
            });
        }
    }
    (rows, curves)
}

/// Aligned plain-text table with one column per difficulty.
pub fn format_table(rows: &[MetricRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "metric");
    for d in Difficulty::ALL {
        let _ = write!(out, " {:>9}", d.as_str());
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.name);
        for v in r.values {
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
    out
}

/// PR curve points as `metric difficulty recall precision aos_precision`.
pub fn format_curves(curves: &[(String, Difficulty, PrCurve)]) -> String {
    let mut out = String::from("# metric difficulty recall precision orientation_precision\n");
    for (name, d, c) in curves {
        for (r, p, o) in &c.points {
            let _ = writeln!(out, "{name} {} {r:.6} {p:.6} {o:.6}", d.as_str());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn car(x: f64, z: f64, score: Option<f64>) -> LabelRecord {
        // 1 m cube resting on the ground, unit-area box rescaled to pixels.
        LabelRecord {
            kind: "Car".into(),
            truncated: 0.0,
            occluded: 0,
            alpha: 0.0,
            bbox: [100.0 + 50.0 * x, 100.0, 150.0 + 50.0 * x, 150.0],
            dimensions: [1.0, 1.0, 1.0],
            location: [x, 1.65, z],
            rotation_y: 0.0,
            score,
        }
    }

    #[test]
    fn buckets() {
        let mut g = car(0.0, 10.0, None);
        assert_eq!(difficulty_bucket(&g, 50.0), Bucket::Easy);
        g.occluded = 1;
        g.truncated = 0.2;
        assert_eq!(difficulty_bucket(&g, 30.0), Bucket::Moderate);
        assert_eq!(difficulty_bucket(&g, 20.0), Bucket::Ignored);
        g.occluded = 2;
        assert_eq!(difficulty_bucket(&g, 30.0), Bucket::Hard);
        assert!(Bucket::Easy.within(Difficulty::Hard));
        assert!(!Bucket::Hard.within(Difficulty::Moderate));
    }

    #[test]
    fn perfect_single_match() {
        let frames = vec![EvalFrame {
            detections: vec![car(0.0, 10.0, Some(0.9))],
            ground_truth: vec![car(0.0, 10.0, None)],
        }];
        let o = EvalOptions::default();
        assert_eq!(alp(&frames, 1.0, Difficulty::Easy, &o), Some(100.0));
        assert_eq!(ap_3d(&frames, 0.7, Difficulty::Easy, &o), Some(100.0));
        assert_eq!(ap_bev(&frames, 0.7, Difficulty::Easy, &o), Some(100.0));
        assert_eq!(ap_2d_aos(&frames, 0.7, Difficulty::Easy, &o), Some((100.0, 100.0)));
    }

    #[test]
    fn distant_detection_misses() {
        let mut det = car(0.0, 12.5, Some(0.9));
        det.bbox = car(0.0, 10.0, None).bbox;
        let frames = vec![EvalFrame {
            detections: vec![det],
            ground_truth: vec![car(0.0, 10.0, None)],
        }];
        assert_eq!(alp(&frames, 2.0, Difficulty::Easy, &EvalOptions::default()), Some(0.0));
        assert_eq!(alp(&frames, 3.0, Difficulty::Easy, &EvalOptions::default()), Some(100.0));
    }

    #[test]
    fn iou_straddle() {
        let mut det = car(0.0, 10.5, Some(0.9));
        det.bbox = car(0.0, 10.0, None).bbox;
        let frames = vec![EvalFrame {
            detections: vec![det],
            ground_truth: vec![car(0.0, 10.0, None)],
        }];
        let o = EvalOptions::default();
        assert_eq!(ap_3d(&frames, 0.5, Difficulty::Easy, &o), Some(0.0));
        assert_eq!(ap_3d(&frames, 0.25, Difficulty::Easy, &o), Some(100.0));
        assert_eq!(ap_bev(&frames, 0.5, Difficulty::Easy, &o), Some(0.0));
        assert_eq!(ap_bev(&frames, 0.25, Difficulty::Easy, &o), Some(100.0));
    }

    #[test]
    fn no_ground_truth_is_absent() {
        let frames = vec![EvalFrame {
            detections: vec![car(0.0, 10.0, Some(0.9))],
            ground_truth: vec![],
        }];
        assert_eq!(alp(&frames, 1.0, Difficulty::Easy, &EvalOptions::default()), None);
    }

    #[test]
    fn flipped_orientation_zeroes_aos() {
        let mut det = car(0.0, 10.0, Some(0.9));
        det.alpha = std::f64::consts::PI;
        let frames = vec![EvalFrame {
            detections: vec![det],
            ground_truth: vec![car(0.0, 10.0, None)],
        }];
        let (ap, aos) = ap_2d_aos(&frames, 0.7, Difficulty::Easy, &EvalOptions::default()).unwrap();
        assert_eq!(ap, 100.0);
        assert_relative_eq!(aos, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_computed_eleven_point_ap() {
        // Three frames, one GT each; detections at scores 0.9 (TP), 0.8 (FP)
        // and 0.7 (TP); the third GT is never detected. PR points: (1/3, 1),
        // (1/3, 1/2), (2/3, 2/3). Interpolated precision is 1 for r <= 0.3, 2/3 for
        // 0.4..=0.6 and 0 above.
        let frames = vec![
            EvalFrame {
                detections: vec![car(0.0, 10.0, Some(0.9)), car(4.0, 30.0, Some(0.8))],
                ground_truth: vec![car(0.0, 10.0, None)],
            },
            EvalFrame {
                detections: vec![car(0.0, 10.0, Some(0.7))],
                ground_truth: vec![car(0.0, 10.0, None)],
            },
            EvalFrame {
                detections: vec![],
                ground_truth: vec![car(0.0, 10.0, None)],
            },
        ];
        let expected = 100.0 * (4.0 * 1.0 + 3.0 * 2.0 / 3.0) / 11.0;
        let got = alp(&frames, 1.0, Difficulty::Easy, &EvalOptions::default()).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn dont_care_absorbs_detection() {
        let mut dc = car(4.0, 30.0, None);
        dc.kind = "DontCare".into();
        dc.occluded = -1;
        dc.truncated = -1.0;
        let frames = vec![EvalFrame {
            detections: vec![car(0.0, 10.0, Some(0.9)), car(4.0, 30.0, Some(0.95))],
            ground_truth: vec![car(0.0, 10.0, None), dc],
        }];
        assert_eq!(ap_2d_aos(&frames, 0.7, Difficulty::Easy, &EvalOptions::default()), Some((100.0, 100.0)));
    }

    #[test]
    fn forty_one_point_variant() {
        let frames = vec![EvalFrame {
            detections: vec![car(0.0, 10.0, Some(0.9))],
            ground_truth: vec![car(0.0, 10.0, None), car(8.0, 40.0, None)],
        }];
        let o = EvalOptions {
            interpolation: Interpolation::FortyOne,
            ..EvalOptions::default()
        };
        let v = ap_3d(&frames, 0.5, Difficulty::Easy, &o).unwrap();
        assert_relative_eq!(v, 100.0 * 21.0 / 41.0, epsilon = 1e-12);
    }

    #[test]
    fn table_layout() {
        let rows = vec![MetricRow {
            name: "ALP@1m".into(),
            values: [Some(12.345), None, Some(100.0)],
        }];
        let t = format_table(&rows);
        assert!(t.contains("12.35"));
        assert!(t.lines().nth(1).unwrap().contains('-'));
    }

    fn arb_frames() -> impl Strategy<Value = Vec<EvalFrame>> {
        let gt = (-4.0..4.0f64, 5.0..40.0f64);
        let det = (-4.0..4.0f64, 5.0..40.0f64, 0.01..1.0f64, -0.5..0.5f64);
        let frame = (proptest::collection::vec(gt, 0..4), proptest::collection::vec(det, 0..6)).prop_map(|(g, d)| EvalFrame {
            ground_truth: g.into_iter().map(|(x, z)| car(x, z, None)).collect(),
            detections: d
                .into_iter()
                .map(|(x, z, s, yaw)| {
                    let mut r = car(x, z, Some(s));
                    r.rotation_y = yaw;
                    r.alpha = yaw;
                    r
                })
                .collect(),
        });
        proptest::collection::vec(frame, 1..4)
    }

    fn all_metrics(frames: &[EvalFrame]) -> Vec<Option<f64>> {
        let o = EvalOptions::default();
        let d = Difficulty::Easy;
        let aos = ap_2d_aos(frames, 0.5, d, &o);
        vec![
            alp(frames, 1.0, d, &o),
            ap_3d(frames, 0.25, d, &o),
            ap_bev(frames, 0.5, d, &o),
            aos.map(|a| a.0),
            aos.map(|a| a.1),
        ]
    }

    proptest! {
        #[test]
        fn metrics_are_percentages_with_aos_below_ap(frames in arb_frames()) {
            for m in all_metrics(&frames).into_iter().flatten() {
                prop_assert!((0.0..=100.0).contains(&m));
            }
            if let Some((ap, aos)) = ap_2d_aos(&frames, 0.5, Difficulty::Easy, &EvalOptions::default()) {
                prop_assert!(aos <= ap + 1e-9);
            }
        }

        #[test]
        fn detection_order_is_irrelevant(frames in arb_frames(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = frames.clone();
            for f in &mut shuffled {
                f.detections.shuffle(&mut rng);
            }
            prop_assert_eq!(all_metrics(&frames), all_metrics(&shuffled));
        }

        #[test]
        fn zero_score_false_positive_never_helps(frames in arb_frames(), frame in any::<prop::sample::Index>()) {
            let mut more = frames.clone();
            let f = &mut more[frame.index(frames.len())];
            f.detections.push(car(-30.0, 90.0, Some(0.0)));
            for (a, b) in all_metrics(&frames).into_iter().zip(all_metrics(&more)) {
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!(b <= a + 1e-9, "{} -> {}", a, b);
                }
            }
        }
    }
}

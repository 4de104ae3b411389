//! Positive-sample quantity and quality per gt scale and angle bucket.
//!
//! Quantity is the number of positives each gt receives; quality is the
//! posterior score and rotated IoU of those positives' predicted boxes. With
//! [`PredictionField::Uniform`] the predicted box is the prior box, so the
//! quality columns measure prior IoU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{pt_score, AssignmentResult, GtInstance, PredictionField};
use crate::error::{Error, Result};
use crate::geom::{dataset_angle_deg, rotated_iou, OBox};
use crate::prior::PriorField;

pub const DEFAULT_SCALE_EDGES: [f64; 5] = [2.0, 8.0, 16.0, 32.0, 64.0];

pub fn default_angle_edges() -> Vec<f64> {
    (0..=9).map(|i| 10.0 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketKind {
    /// `[lo, hi)` on `sqrt(w * h)` in pixels.
    Scale,
    /// `(lo, hi]` on the dataset angle in degrees.
    Angle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub kind: BucketKind,
    pub lo: f64,
    pub hi: f64,
    pub gt_count: usize,
    pub mean_positives: Option<f64>,
    pub std_positives: Option<f64>,
    pub zero_positive_fraction: Option<f64>,
    pub mean_pt: Option<f64>,
    pub mean_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub notes: Vec<String>,
    pub gt_count: usize,
    pub scale: Vec<BucketStats>,
    pub angle: Vec<BucketStats>,
}

impl BiasReport {
    pub fn scale_bucket(&self, size: f64) -> Option<&BucketStats> {
        self.scale.iter().find(|b| b.lo <= size && size < b.hi)
    }

    /// Coefficient of variation of `mean_positives` over populated angle buckets.
    pub fn angle_count_cv(&self) -> Option<f64> {
        let means: Vec<f64> = self.angle.iter().filter_map(|b| b.mean_positives).collect();
        if means.len() < 2 {
            return None;
        }
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        (mean > 0.0)
            .then(|| var.sqrt() / mean)
            .or(Some(f64::INFINITY))
    }

    /// One CSV row per bucket.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in self.scale.iter().chain(&self.angle) {
            w.serialize(b).map_err(|e| Error::Shape(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scale buckets `[e_i, e_i+1)`, plus `[0, e_0)` and `[e_n, inf)` catch-alls
/// when they hold any gt.
fn scale_ranges(edges: &[f64], sizes: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if let (Some(&first), Some(&last)) = (edges.first(), edges.last()) {
        if sizes.iter().any(|s| *s < first) {
            out.push((0.0, first));
        }
        out.extend(edges.windows(2).map(|w| (w[0], w[1])));
        if sizes.iter().any(|s| *s >= last) {
            out.push((last, f64::INFINITY));
        }
    }
    out
}

fn angle_ranges(edges: &[f64], angles: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if let (Some(&first), Some(&last)) = (edges.first(), edges.last()) {
        if angles.iter().any(|a| *a <= first) {
            out.push((f64::NEG_INFINITY, first));
        }
        out.extend(edges.windows(2).map(|w| (w[0], w[1])));
        if angles.iter().any(|a| *a > last) {
            out.push((last, f64::INFINITY));
        }
    }
    out
}

struct GtQuality {
    count: usize,
    pt_sum: f64,
    iou_sum: f64,
}

fn aggregate(kind: BucketKind, lo: f64, hi: f64, members: &[&GtQuality]) -> BucketStats {
    let n = members.len();
    if n == 0 {
        return BucketStats {
            kind,
            lo,
            hi,
            gt_count: 0,
            mean_positives: None,
            std_positives: None,
            zero_positive_fraction: None,
            mean_pt: None,
            mean_iou: None,
        };
    }
    let counts: Vec<f64> = members.iter().map(|q| q.count as f64).collect();
    let mean = counts.iter().sum::<f64>() / n as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
    let zero = members.iter().filter(|q| q.count == 0).count() as f64 / n as f64;
    let positives: usize = members.iter().map(|q| q.count).sum();
    let (pt, iou) = if positives == 0 {
        (None, None)
    } else {
        let p = positives as f64;
        (
            Some(members.iter().map(|q| q.pt_sum).sum::<f64>() / p),
            Some(members.iter().map(|q| q.iou_sum).sum::<f64>() / p),
        )
    };
    BucketStats {
        kind,
        lo,
        hi,
        gt_count: n,
        mean_positives: Some(mean),
        std_positives: Some(var.sqrt()),
        zero_positive_fraction: Some(zero),
        mean_pt: pt,
        mean_iou: iou,
    }
}

/// Aggregates an assignment into scale and angle buckets.
pub fn bucket_stats(
    assignment: &AssignmentResult,
    priors: &PriorField,
    gts: &[GtInstance],
    predictions: &PredictionField,
    scale_edges: &[f64],
    angle_edges: &[f64],
) -> Result<BiasReport> {
    let scene = SceneAssignment {
        assignment,
        priors,
        gts,
        predictions,
    };
    bucket_stats_batch(&[scene], scale_edges, angle_edges)
}

/// One image's inputs to [`bucket_stats_batch`].
#[derive(Clone, Copy)]
pub struct SceneAssignment<'a> {
    pub assignment: &'a AssignmentResult,
    pub priors: &'a PriorField,
    pub gts: &'a [GtInstance],
    pub predictions: &'a PredictionField,
}

/// Pools the gts of many images into one report.
pub fn bucket_stats_batch(
    scenes: &[SceneAssignment<'_>],
    scale_edges: &[f64],
    angle_edges: &[f64],
) -> Result<BiasReport> {
    let mut gts = Vec::new();
    let mut quality = Vec::new();
    for s in scenes {
        if s.assignment.per_gt.len() != s.gts.len() {
            return Err(Error::Shape(format!(
                "assignment covers {} gts, scene has {}",
                s.assignment.per_gt.len(),
                s.gts.len()
            )));
        }
        s.predictions.check_len(s.priors.len())?;
        for (gt, a) in s.gts.iter().zip(&s.assignment.per_gt) {
            let mut q = GtQuality {
                count: a.positives.len(),
                pt_sum: 0.0,
                iou_sum: 0.0,
            };
            for &p in &a.positives {
                if p >= s.priors.len() {
                    return Err(Error::Shape(format!("positive prior {p} out of range")));
                }
                let pred = s.predictions.predicted_box(s.priors, p);
                q.pt_sum += pt_score(s.predictions.class_score(p, gt.class_id), &pred, gt);
                q.iou_sum += rotated_iou(&pred, &gt.obox);
            }
            quality.push(q);
            gts.push(*gt);
        }
    }
    let uniform = scenes
        .iter()
        .all(|s| matches!(s.predictions, PredictionField::Uniform));
    Ok(aggregate_report(
        &gts,
        &quality,
        scale_edges,
        angle_edges,
        uniform,
    ))
}

fn aggregate_report(
    gts: &[GtInstance],
    quality: &[GtQuality],
    scale_edges: &[f64],
    angle_edges: &[f64],
    uniform: bool,
) -> BiasReport {
    let sizes: Vec<f64> = gts.iter().map(|g| g.obox.size()).collect();
    let angles: Vec<f64> = gts.iter().map(|g| dataset_angle_deg(&g.obox)).collect();
    let scale = scale_ranges(scale_edges, &sizes)
        .into_iter()
        .map(|(lo, hi)| {
            let members: Vec<&GtQuality> = (0..gts.len())
                .filter(|&i| lo <= sizes[i] && sizes[i] < hi)
                .map(|i| &quality[i])
                .collect();
            aggregate(BucketKind::Scale, lo, hi, &members)
        })
        .collect();
    let angle = angle_ranges(angle_edges, &angles)
        .into_iter()
        .map(|(lo, hi)| {
            let members: Vec<&GtQuality> = (0..gts.len())
                .filter(|&i| lo < angles[i] && angles[i] <= hi)
                .map(|i| &quality[i])
                .collect();
            aggregate(BucketKind::Angle, lo, hi, &members)
        })
        .collect();
    let mut notes = vec!["angles in degrees over (0, 90]; scale is sqrt(w*h) in px".to_string()];
    notes.push(if uniform {
        "uniform predictions: quality columns are prior-box IoU against the gt".to_string()
    } else {
        "quality columns use the supplied prediction field (synthetic predictions are a stand-in for a trained detector)"
            .to_string()
    });
    BiasReport {
        notes,
        gt_count: gts.len(),
        scale,
        angle,
    }
}

/// One class of synthetic objects: side range, aspect range, and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleClass {
    /// Long side range `[min_side, max_side]` in px.
    pub min_side: f64,
    pub max_side: f64,
    /// `w / h` range, at least 1.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub count: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_w: f64,
    pub image_h: f64,
    pub classes: Vec<ScaleClass>,
    /// Dataset angle range `(lo, hi]` in degrees.
    pub angle_lo_deg: f64,
    pub angle_hi_deg: f64,
    pub seed: u64,
}

pub const MAX_PAIR_IOU: f64 = 0.05;
const MAX_ATTEMPTS: usize = 100_000;

impl SceneSpec {
    /// Squares of side 4, 16 and 64 px, `per_class` of each, on a 1536 px image.
    pub fn standard(per_class: usize, seed: u64) -> SceneSpec {
        let class = |side: f64, id: usize| ScaleClass {
            min_side: side,
            max_side: side,
            min_aspect: 1.0,
            max_aspect: 1.0,
            count: per_class,
            class_id: id,
        };
        SceneSpec {
            image_w: 1536.0,
            image_h: 1536.0,
            classes: vec![class(4.0, 0), class(16.0, 1), class(64.0, 2)],
            angle_lo_deg: 0.0,
            angle_hi_deg: 90.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::Config("scene image size must be positive".into()));
        }
        if !(self.angle_lo_deg < self.angle_hi_deg) {
            return Err(Error::Config("scene angle range is empty".into()));
        }
        for c in &self.classes {
            if !(c.min_side > 0.0 && c.min_side <= c.max_side) {
                return Err(Error::Config(format!(
                    "bad side range [{}, {}]",
                    c.min_side, c.max_side
                )));
            }
            if !(c.min_aspect >= 1.0 && c.min_aspect <= c.max_aspect) {
                return Err(Error::Config(format!(
                    "bad aspect range [{}, {}]",
                    c.min_aspect, c.max_aspect
                )));
            }
        }
        Ok(())
    }
}

fn sample_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Rejection-sampled gts with pairwise rotated IoU below [`MAX_PAIR_IOU`].
/// Larger classes are placed first; the output lists gts in placement order.
pub fn synth_scene(spec: &SceneSpec) -> Result<Vec<GtInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<&ScaleClass> = spec.classes.iter().collect();
    order.sort_by(|a, b| b.max_side.total_cmp(&a.max_side));
    let mut placed: Vec<GtInstance> = Vec::new();
    let mut attempts = 0usize;
    for class in order {
        for _ in 0..class.count {
            loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::Capacity(format!(
                        "placed {} gts before exhausting {MAX_ATTEMPTS} attempts",
                        placed.len()
                    )));
                }
                let w = sample_in(&mut rng, class.min_side, class.max_side);
                let h = w / sample_in(&mut rng, class.min_aspect, class.max_aspect);
                let deg = spec.angle_hi_deg
                    - sample_in(&mut rng, 0.0, spec.angle_hi_deg - spec.angle_lo_deg);
                let cx = sample_in(&mut rng, 0.0, spec.image_w);
                let cy = sample_in(&mut rng, 0.0, spec.image_h);
                let candidate = OBox::new(cx, cy, w, h, deg.to_radians())?;
                let (x0, y0, x1, y1) = candidate.aabb();
                if x0 < 0.0 || y0 < 0.0 || x1 > spec.image_w || y1 > spec.image_h {
                    continue;
                }
                if placed
                    .iter()
                    .all(|g| rotated_iou(&g.obox, &candidate) < MAX_PAIR_IOU)
                {
                    placed.push(GtInstance::new(candidate, class.class_id));
                    break;
                }
            }
        }
    }
    Ok(placed)
}

/// Synthetic detector outputs for stress runs.
///
/// Each prior looks at the gt whose center is nearest relative to the gt size.
/// Its score for that gt's class is `size / (size + 16)` damped by distance,
/// so confidence rises with object size; its box regresses halfway from the
/// prior toward the gt with mild size and angle jitter. Priors far from every
/// gt keep their own box and a near-zero score.
pub fn synth_predictions(
    priors: &PriorField,
    gts: &[GtInstance],
    num_classes: usize,
    seed: u64,
) -> Result<PredictionField> {
    let num_classes = num_classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = vec![0.0; priors.len() * num_classes];
    let mut boxes = Vec::with_capacity(priors.len());
    for i in 0..priors.len() {
        for s in &mut scores[i * num_classes..(i + 1) * num_classes] {
            *s = rng.gen_range(0.0..0.05);
        }
        let loc = priors.priors[i].location;
        let reach = priors.stride_of(i);
        let nearest = gts
            .iter()
            .map(|g| {
                let scale = g.obox.size().max(reach);
                (loc.distance(g.obox.center()) / scale, g)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match nearest {
            Some((d, g)) if d < 3.0 => {
                let size = g.obox.size();
                let base = size / (size + 16.0);
                let conf =
                    (base * (-0.5 * d * d).exp() + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                if g.class_id < num_classes {
                    scores[i * num_classes + g.class_id] = conf;
                }
                let jitter = rng.gen_range(0.85..1.15);
                let c = g.obox.center();
                boxes.push(OBox::new(
                    0.5 * (c.x + loc.x),
                    0.5 * (c.y + loc.y),
                    g.obox.w * jitter,
                    g.obox.h * jitter,
                    g.obox.theta + rng.gen_range(-0.1..0.1),
                )?);
            }
            _ => boxes.push(priors.prior_box(i)),
        }
    }
    PredictionField::dense(num_classes, scores, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{GtAssignment, Label};
    use crate::prior::build_prior_field;

    fn one_gt_result(positives: Vec<usize>, n_priors: usize) -> AssignmentResult {
        let mut labels = vec![Label::Negative; n_priors];
        for p in &positives {
            labels[*p] = Label::Positive(0);
        }
        AssignmentResult {
            per_gt: vec![GtAssignment {
                gt_index: 0,
                difficult: false,
                cps: positives.clone(),
                mps: positives.clone(),
                positives,
                dgmm_scores: Vec::new(),
                gjsd: Vec::new(),
            }],
            labels,
        }
    }

    #[test]
    fn single_gt_three_positives() {
        let f = build_prior_field(64.0, 64.0, &[8.0], 4.0).unwrap();
        let gts = [GtInstance::new(
            OBox::new(20.0, 20.0, 10.0, 10.0, 0.3).unwrap(),
            0,
        )];
        let r = one_gt_result(vec![0, 1, 2], f.len());
        let rep = bucket_stats(
            &r,
            &f,
            &gts,
            &PredictionField::Uniform,
            &DEFAULT_SCALE_EDGES,
            &default_angle_edges(),
        )
        .unwrap();
        let b = rep.scale_bucket(10.0).unwrap();
        assert_eq!(b.gt_count, 1);
        assert_eq!(b.mean_positives, Some(3.0));
        assert_eq!(b.zero_positive_fraction, Some(0.0));
        assert_eq!(b.std_positives, Some(0.0));
        let total: usize = rep.scale.iter().map(|b| b.gt_count).sum();
        assert_eq!(total, 1);
        let total: usize = rep.angle.iter().map(|b| b.gt_count).sum();
        assert_eq!(total, 1);
    }

    #[test]
    fn empty_scene_gives_empty_report() {
        let f = build_prior_field(64.0, 64.0, &[8.0], 4.0).unwrap();
        let r = AssignmentResult {
            per_gt: Vec::new(),
            labels: vec![Label::Negative; f.len()],
        };
        let rep = bucket_stats(
            &r,
            &f,
            &[],
            &PredictionField::Uniform,
            &DEFAULT_SCALE_EDGES,
            &default_angle_edges(),
        )
        .unwrap();
        assert_eq!(rep.gt_count, 0);
        assert!(rep.scale.iter().all(|b| b.gt_count == 0));
    }

    #[test]
    fn populations_partition_with_catch_alls() {
        let f = build_prior_field(256.0, 256.0, &[8.0], 4.0).unwrap();
        let gts: Vec<GtInstance> = [1.0, 5.0, 16.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                GtInstance::new(
                    OBox::new(40.0 * i as f64 + 30.0, 50.0, *s, *s, 0.2).unwrap(),
                    0,
                )
            })
            .collect();
        let r = AssignmentResult {
            per_gt: (0..4)
                .map(|i| GtAssignment {
                    gt_index: i,
                    difficult: false,
                    cps: vec![],
                    mps: vec![],
                    positives: vec![],
                    dgmm_scores: vec![],
                    gjsd: vec![],
                })
                .collect(),
            labels: vec![Label::Negative; f.len()],
        };
        let rep = bucket_stats(
            &r,
            &f,
            &gts,
            &PredictionField::Uniform,
            &DEFAULT_SCALE_EDGES,
            &default_angle_edges(),
        )
        .unwrap();
        assert_eq!(rep.scale.iter().map(|b| b.gt_count).sum::<usize>(), 4);
        assert_eq!(rep.scale.first().unwrap().hi, 2.0);
        assert!(rep.scale.last().unwrap().hi.is_infinite());
        assert_eq!(rep.scale_bucket(16.0).unwrap().lo, 16.0);
        assert!(rep.scale.iter().all(|b| b
            .zero_positive_fraction
            .is_none_or(|z| (0.0..=1.0).contains(&z))));
        let csv = rep.to_csv().unwrap();
        assert!(csv.starts_with("kind,lo,hi,gt_count"));
        assert_eq!(csv.lines().count(), 1 + rep.scale.len() + rep.angle.len());
    }

    #[test]
    fn scene_cases() {
        let empty = SceneSpec {
            classes: vec![],
            ..SceneSpec::standard(0, 1)
        };
        assert!(synth_scene(&empty).unwrap().is_empty());
        let spec = SceneSpec::standard(20, 3);
        let a = synth_scene(&spec).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, synth_scene(&spec).unwrap());
    }

    #[test]
    fn hundred_gts_pairwise_iou() {
        let spec = SceneSpec {
            image_w: 512.0,
            image_h: 512.0,
            classes: vec![ScaleClass {
                min_side: 6.0,
                max_side: 40.0,
                min_aspect: 1.0,
                max_aspect: 4.0,
                count: 100,
                class_id: 0,
            }],
            angle_lo_deg: 0.0,
            angle_hi_deg: 90.0,
            seed: 21,
        };
        let gts = synth_scene(&spec).unwrap();
        assert_eq!(gts.len(), 100);
        for i in 0..gts.len() {
            let deg = dataset_angle_deg(&gts[i].obox);
            assert!(deg > 0.0 && deg <= 90.0);
            for j in 0..i {
                assert!(rotated_iou(&gts[i].obox, &gts[j].obox) < MAX_PAIR_IOU);
            }
        }
    }

    #[test]
    fn overfull_scene_hits_capacity() {
        let spec = SceneSpec {
            image_w: 64.0,
            image_h: 64.0,
            classes: vec![ScaleClass {
                min_side: 60.0,
                max_side: 60.0,
                min_aspect: 1.0,
                max_aspect: 1.0,
                count: 3,
                class_id: 0,
            }],
            angle_lo_deg: 0.0,
            angle_hi_deg: 90.0,
            seed: 1,
        };
        assert!(matches!(synth_scene(&spec), Err(Error::Capacity(_))));
    }

    #[test]
    fn synthetic_confidence_grows_with_size() {
        let f = build_prior_field(512.0, 512.0, &[8.0, 16.0, 32.0], 4.0).unwrap();
        let gts = vec![
            GtInstance::new(OBox::new(100.0, 100.0, 4.0, 4.0, 0.0).unwrap(), 0),
            GtInstance::new(OBox::new(350.0, 350.0, 64.0, 64.0, 0.0).unwrap(), 0),
        ];
        let preds = synth_predictions(&f, &gts, 1, 5).unwrap();
        let best = |g: &GtInstance| {
            (0..f.len())
                .filter(|&i| f.priors[i].location.distance(g.obox.center()) < 8.0)
                .map(|i| preds.class_score(i, 0))
                .fold(0.0f64, f64::max)
        };
        assert!(best(&gts[1]) > best(&gts[0]));
    }
}

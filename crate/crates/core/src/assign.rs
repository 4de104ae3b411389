//! Coarse-to-fine label assignment and the MaxIoU baseline.
//!
//! The pipeline for one image:
//!
//! 1. coarse candidates: per gt, the `k` priors from any pyramid level with
//!    the smallest Gaussian divergence to the gt ([`select_cps`]);
//! 2. posterior ranking: the `q` candidates with the highest
//!    `0.5 (class score + rotated IoU)` ([`select_mps`]);
//! 3. mixture gate: candidates whose instance-mixture score falls below
//!    `exp(-g)` are dropped, then priors claimed by several gts are resolved
//!    ([`finalize_labels`]).
//!
//! Every ranking breaks ties by ascending flat prior index, and every gt
//! comparison by ascending gt index, so results are fully deterministic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{gaussian_from_box, Dgmm, Gaussian2, Measure};
use crate::geom::{rotated_iou, OBox, Point};
use crate::prior::{
    build_prior_field, update_priors, OffsetField, PriorField, DEFAULT_N_OFFSETS,
    DEFAULT_SCALE_FACTOR, DEFAULT_STRIDES,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    #[serde(rename = "box")]
    pub obox: OBox,
    pub class_id: usize,
    #[serde(default)]
    pub difficult: bool,
}

impl GtInstance {
    pub fn new(obox: OBox, class_id: usize) -> Self {
        GtInstance {
            obox,
            class_id,
            difficult: false,
        }
    }
}

/// Per-prior detector outputs consulted by the posterior ranking.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionField {
    /// Every class score is 0.5 and every predicted box is the prior box.
    Uniform,
    Dense {
        num_classes: usize,
        /// Row-major `[num_priors, num_classes]`.
        scores: Vec<f64>,
        boxes: Vec<OBox>,
    },
}

impl PredictionField {
    pub fn dense(num_classes: usize, scores: Vec<f64>, boxes: Vec<OBox>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Shape(
                "prediction field needs at least one class".into(),
            ));
        }
        if scores.len() != boxes.len() * num_classes {
            return Err(Error::Shape(format!(
                "{} scores for {} boxes x {num_classes} classes",
                scores.len(),
                boxes.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Shape(format!("class score {s} outside [0, 1]")));
        }
        Ok(PredictionField::Dense {
            num_classes,
            scores,
            boxes,
        })
    }

    pub fn check_len(&self, num_priors: usize) -> Result<()> {
        match self {
            PredictionField::Uniform => Ok(()),
            PredictionField::Dense { boxes, .. } if boxes.len() == num_priors => Ok(()),
            PredictionField::Dense { boxes, .. } => Err(Error::Shape(format!(
                "prediction field has {} entries, prior field has {num_priors}",
                boxes.len()
            ))),
        }
    }

    pub fn class_score(&self, prior: usize, class_id: usize) -> f64 {
        match self {
            PredictionField::Uniform => 0.5,
            PredictionField::Dense {
                num_classes,
                scores,
                ..
            } => {
                if class_id < *num_classes {
                    scores[prior * num_classes + class_id]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn predicted_box(&self, priors: &PriorField, prior: usize) -> OBox {
        match self {
            PredictionField::Uniform => priors.prior_box(prior),
            PredictionField::Dense { boxes, .. } => boxes[prior],
        }
    }
}

/// `0.5 * (class score + rotated IoU)`.
pub fn pt_score(class_score: f64, predicted: &OBox, gt: &GtInstance) -> f64 {
    0.5 * (class_score + rotated_iou(predicted, &gt.obox))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcflConfig {
    /// Coarse candidates kept per gt.
    pub k: usize,
    /// Posterior-ranked candidates kept per gt.
    pub q: usize,
    /// Mixture gate exponent; the gate is `exp(-g)`.
    pub g: f64,
    /// Weight of the geometry-center mixture component.
    pub w1: f64,
    /// Interpolation weight of the divergence.
    pub alpha: f64,
    pub strides: Vec<f64>,
    pub scale_factor: f64,
    pub n_offsets: usize,
    pub measure: Measure,
}

impl Default for DcflConfig {
    fn default() -> Self {
        DcflConfig {
            k: 16,
            q: 12,
            g: 0.8,
            w1: 0.7,
            alpha: 0.5,
            strides: DEFAULT_STRIDES.to_vec(),
            scale_factor: DEFAULT_SCALE_FACTOR,
            n_offsets: DEFAULT_N_OFFSETS,
            measure: Measure::Gjsd,
        }
    }
}

impl DcflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.q == 0 {
            return Err(Error::Config("k and q must be at least 1".into()));
        }
        if self.q > self.k {
            return Err(Error::Config(format!(
                "q ({}) must not exceed k ({})",
                self.q, self.k
            )));
        }
        if !(self.g > 0.0) || !self.g.is_finite() {
            return Err(Error::Config(format!("g must be positive, got {}", self.g)));
        }
        if !(self.w1 > 0.0 && self.w1 < 1.0) {
            return Err(Error::Config(format!(
                "w1 must lie in (0, 1), got {}",
                self.w1
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.n_offsets == 0 {
            return Err(Error::Config("n_offsets must be at least 1".into()));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::Config("scale_factor must be positive".into()));
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "strides must be non-empty and ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        (-self.g).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    /// Between the MaxIoU thresholds; the coarse-to-fine assigner never emits it.
    Ignored,
    Positive(usize),
}

impl Label {
    /// `-1` negative, `-2` ignored, otherwise the gt index.
    pub fn code(self) -> i64 {
        match self {
            Label::Negative => -1,
            Label::Ignored => -2,
            Label::Positive(g) => g as i64,
        }
    }

    pub fn from_code(code: i64) -> Result<Label> {
        match code {
            -1 => Ok(Label::Negative),
            -2 => Ok(Label::Ignored),
            g if g >= 0 => Ok(Label::Positive(g as usize)),
            other => Err(Error::Shape(format!("invalid label code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAssignment {
    pub gt_index: usize,
    pub difficult: bool,
    pub cps: Vec<usize>,
    pub mps: Vec<usize>,
    pub positives: Vec<usize>,
    /// Mixture score of each positive, parallel to `positives`.
    pub dgmm_scores: Vec<f64>,
    /// Divergence of each positive to the gt, parallel to `positives`.
    pub gjsd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub per_gt: Vec<GtAssignment>,
    #[serde(rename = "per_prior_labels", with = "rle")]
    pub labels: Vec<Label>,
}

impl AssignmentResult {
    pub fn positive_count(&self, gt: usize) -> usize {
        self.per_gt[gt].positives.len()
    }

    pub fn total_positives(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, Label::Positive(_)))
            .count()
    }
}

/// Run-length encoding of labels as `[[code, run], ...]`.
mod rle {
    use super::Label;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(labels: &[Label], s: S) -> Result<S::Ok, S::Error> {
        let mut runs: Vec<[i64; 2]> = Vec::new();
        for l in labels {
            let code = l.code();
            match runs.last_mut() {
                Some(r) if r[0] == code => r[1] += 1,
                _ => runs.push([code, 1]),
            }
        }
        runs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Label>, D::Error> {
        let runs = Vec::<[i64; 2]>::deserialize(d)?;
        let mut labels = Vec::new();
        for [code, run] in runs {
            let label = Label::from_code(code).map_err(serde::de::Error::custom)?;
            if run < 0 {
                return Err(serde::de::Error::custom("negative run length"));
            }
            labels.extend(std::iter::repeat_n(label, run as usize));
        }
        Ok(labels)
    }
}

fn by_value_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(value, index)` pairs in ascending order.
fn smallest_k(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_value_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_value_then_index);
    scored
}

/// Per gt, the `k` priors with the smallest divergence to the gt, across all
/// pyramid levels, in ascending divergence order.
pub fn select_cps(
    priors: &PriorField,
    gts: &[GtInstance],
    k: usize,
    measure: Measure,
    alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let prior_gaussians: Vec<Gaussian2> = (0..priors.len()).map(|i| priors.gaussian(i)).collect();
    gts.iter()
        .map(|gt| {
            let g = gaussian_from_box(&gt.obox);
            let scored = prior_gaussians
                .iter()
                .enumerate()
                .map(|(i, p)| Ok((measure.distance(p, &g, alpha)?, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(smallest_k(scored, k).into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

/// Per gt, the `q` coarse candidates with the highest posterior score, ties to
/// the lower prior index. Output is in descending score order.
pub fn select_mps(
    cps: &[Vec<usize>],
    priors: &PriorField,
    predictions: &PredictionField,
    gts: &[GtInstance],
    q: usize,
) -> Result<Vec<Vec<usize>>> {
    if q == 0 {
        return Err(Error::Config("q must be at least 1".into()));
    }
    if cps.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} candidate lists for {} gts",
            cps.len(),
            gts.len()
        )));
    }
    predictions.check_len(priors.len())?;
    Ok(cps
        .iter()
        .zip(gts)
        .map(|(cands, gt)| {
            // Negated score so the ascending selector yields the highest.
            let scored = cands
                .iter()
                .map(|&i| {
                    let pred = predictions.predicted_box(priors, i);
                    (
                        -pt_score(predictions.class_score(i, gt.class_id), &pred, gt),
                        i,
                    )
                })
                .collect();
            smallest_k(scored, q).into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

/// Mixture-gates the medium candidates and labels every prior.
///
/// Each gt's mixture has its geometry center and the mean location of its
/// medium candidates as components. A candidate survives when its own gt's
/// mixture scores it at least `exp(-g)`; a gt with no survivor keeps its
/// best-scoring candidate. A prior claimed by several gts goes to the gt with
/// the smallest divergence (lower gt index on ties). A gt left empty by that
/// resolution takes its best unclaimed medium candidate, or failing that one
/// from a gt holding two or more positives.
pub fn finalize_labels(
    cps: &[Vec<usize>],
    mps: &[Vec<usize>],
    priors: &PriorField,
    gts: &[GtInstance],
    config: &DcflConfig,
) -> Result<AssignmentResult> {
    if mps.len() != gts.len() || cps.len() != gts.len() {
        return Err(Error::Shape(
            "candidate lists do not match the gt count".into(),
        ));
    }
    let threshold = config.threshold();

    // Mixture score of every medium candidate under its own gt.
    let mut mps_scores: Vec<Vec<f64>> = Vec::with_capacity(gts.len());
    let mut claims: Vec<Vec<usize>> = Vec::with_capacity(gts.len());
    for (gt, members) in gts.iter().zip(mps) {
        if members.is_empty() {
            mps_scores.push(Vec::new());
            claims.push(Vec::new());
            continue;
        }
        let n = members.len() as f64;
        let (sx, sy) = members.iter().fold((0.0, 0.0), |(x, y), &i| {
            let l = priors.priors[i].location;
            (x + l.x, y + l.y)
        });
        let model = Dgmm::build(&gt.obox, Point::new(sx / n, sy / n), config.w1)?;
        let scores: Vec<f64> = members
            .iter()
            .map(|&i| model.eval(priors.priors[i].location))
            .collect();
        let mut kept: Vec<usize> = members
            .iter()
            .zip(&scores)
            .filter(|(_, s)| **s >= threshold)
            .map(|(i, _)| *i)
            .collect();
        if kept.is_empty() {
            kept.push(members[best_position(&scores, members)]);
        }
        mps_scores.push(scores);
        claims.push(kept);
    }

    let gt_gaussians: Vec<Gaussian2> = gts.iter().map(|g| gaussian_from_box(&g.obox)).collect();
    let divergence = |prior: usize, gt: usize| -> Result<f64> {
        config
            .measure
            .distance(&priors.gaussian(prior), &gt_gaussians[gt], config.alpha)
    };

    // owner[prior] = (divergence, gt)
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; priors.len()];
    for (gt, kept) in claims.iter().enumerate() {
        for &p in kept {
            let d = divergence(p, gt)?;
            match owner[p] {
                Some(current) if current <= (d, gt) => {}
                _ => owner[p] = Some((d, gt)),
            }
        }
    }

    let mut counts = vec![0usize; gts.len()];
    for (_, g) in owner.iter().flatten() {
        counts[*g] += 1;
    }
    for gt in 0..gts.len() {
        if counts[gt] > 0 || mps[gt].is_empty() {
            continue;
        }
        let members = &mps[gt];
        let scores = &mps_scores[gt];
        let free: Vec<usize> = (0..members.len())
            .filter(|&j| owner[members[j]].is_none())
            .collect();
        let donor_ok: Vec<usize> = (0..members.len())
            .filter(|&j| owner[members[j]].is_some_and(|(_, g)| counts[g] >= 2))
            .collect();
        let pool = if free.is_empty() { donor_ok } else { free };
        let Some(j) = pool.into_iter().min_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(members[a].cmp(&members[b]))
        }) else {
            continue;
        };
        let p = members[j];
        if let Some((_, prev)) = owner[p] {
            counts[prev] -= 1;
        }
        owner[p] = Some((divergence(p, gt)?, gt));
        counts[gt] += 1;
    }

    let mut per_gt: Vec<GtAssignment> = gts
        .iter()
        .enumerate()
        .map(|(i, gt)| GtAssignment {
            gt_index: i,
            difficult: gt.difficult,
            cps: cps[i].clone(),
            mps: mps[i].clone(),
            positives: Vec::new(),
            dgmm_scores: Vec::new(),
            gjsd: Vec::new(),
        })
        .collect();
    let mut labels = vec![Label::Negative; priors.len()];
    // Positives listed in medium-candidate order.
    for (gt, members) in mps.iter().enumerate() {
        for (j, &p) in members.iter().enumerate() {
            if let Some((d, g)) = owner[p] {
                if g == gt {
                    labels[p] = Label::Positive(gt);
                    let a = &mut per_gt[gt];
                    a.positives.push(p);
                    a.dgmm_scores.push(mps_scores[gt][j]);
                    a.gjsd.push(d);
                }
            }
        }
    }
    Ok(AssignmentResult { per_gt, labels })
}

fn best_position(scores: &[f64], members: &[usize]) -> usize {
    (0..scores.len())
        .min_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(members[a].cmp(&members[b]))
        })
        .expect("non-empty candidate list")
}

/// Full pipeline on an already-built (and possibly updated) prior field.
pub fn assign_on_field(
    priors: &PriorField,
    gts: &[GtInstance],
    predictions: &PredictionField,
    config: &DcflConfig,
) -> Result<AssignmentResult> {
    config.validate()?;
    if gts.is_empty() {
        return Ok(AssignmentResult {
            per_gt: Vec::new(),
            labels: vec![Label::Negative; priors.len()],
        });
    }
    if priors.is_empty() {
        return Err(Error::Config("prior field is empty".into()));
    }
    let cps = select_cps(priors, gts, config.k, config.measure, config.alpha)?;
    let mps = select_mps(&cps, priors, predictions, gts, config.q)?;
    finalize_labels(&cps, &mps, priors, gts, config)
}

/// Builds the prior field for the image, applies offsets, and runs the
/// coarse-to-fine pipeline. `None` offsets leave priors in place; `None`
/// predictions mean [`PredictionField::Uniform`].
pub fn assign(
    image: (f64, f64),
    gts: &[GtInstance],
    offsets: Option<&OffsetField>,
    predictions: Option<&PredictionField>,
    config: &DcflConfig,
) -> Result<AssignmentResult> {
    config.validate()?;
    let field = build_prior_field(image.0, image.1, &config.strides, config.scale_factor)?;
    let field = match offsets {
        Some(off) => update_priors(&field, off)?,
        None => field,
    };
    assign_on_field(
        &field,
        gts,
        predictions.unwrap_or(&PredictionField::Uniform),
        config,
    )
}

/// MaxIoU baseline: a prior is positive for its highest-IoU gt (lower index on
/// ties) when that IoU reaches `pos_thr`, negative below `neg_thr`, ignored in
/// between. No gt is guaranteed a positive.
pub fn maxiou_assign(
    priors: &PriorField,
    gts: &[GtInstance],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<AssignmentResult> {
    if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 <= neg ({neg_thr}) <= pos ({pos_thr}) <= 1"
        )));
    }
    let mut labels = vec![Label::Negative; priors.len()];
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); gts.len()];
    if !gts.is_empty() {
        let gt_bounds: Vec<_> = gts.iter().map(|g| g.obox.aabb()).collect();
        for (i, label) in labels.iter_mut().enumerate() {
            let pb = priors.prior_box(i);
            let (x0, y0, x1, y1) = pb.aabb();
            let mut best = (0.0f64, usize::MAX);
            for (g, gt) in gts.iter().enumerate() {
                let (gx0, gy0, gx1, gy1) = gt_bounds[g];
                if gx1 <= x0 || x1 <= gx0 || gy1 <= y0 || y1 <= gy0 {
                    continue;
                }
                let iou = rotated_iou(&pb, &gt.obox);
                if iou > best.0 {
                    best = (iou, g);
                }
            }
            let (iou, g) = best;
            if g != usize::MAX && iou >= pos_thr {
                *label = Label::Positive(g);
                positives[g].push(i);
            } else if iou >= neg_thr {
                *label = Label::Ignored;
            }
        }
    }
    let per_gt = gts
        .iter()
        .enumerate()
        .map(|(g, gt)| GtAssignment {
            gt_index: g,
            difficult: gt.difficult,
            cps: positives[g].clone(),
            mps: positives[g].clone(),
            positives: positives[g].clone(),
            dgmm_scores: Vec::new(),
            gjsd: Vec::new(),
        })
        .collect();
    Ok(AssignmentResult { per_gt, labels })
}

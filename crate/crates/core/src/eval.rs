//! Rotated-box AP with tiny-object scale buckets.
//!
//! Matching is greedy per image and class: detections in descending
//! confidence (input order on ties) take the unmatched gt with the highest
//! rotated IoU at or above the threshold. Difficult gts, and gts outside the
//! scale bucket under evaluation, are ignore regions: a detection that can
//! only match one of them is dropped rather than counted. AP is the 101-point
//! interpolated area under the precision envelope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assign::GtInstance;
use crate::geom::{rotated_iou, OBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub obox: OBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched an ignore region, or fell outside the evaluated size range.
    Ignored,
}

/// Half-open size interval `[lo, hi)` on `sqrt(w * h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl SizeBucket {
    pub fn contains(&self, size: f64) -> bool {
        self.lo <= size && size < self.hi
    }
}

pub const DEFAULT_SIZE_EDGES: [f64; 5] = [2.0, 8.0, 16.0, 32.0, 64.0];

/// `vt`, `t`, `s`, `m` for the default edges; `[lo,hi)` labels otherwise.
pub fn buckets_from_edges(edges: &[f64]) -> Vec<SizeBucket> {
    let named = edges == DEFAULT_SIZE_EDGES;
    edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| SizeBucket {
            name: if named {
                ["vt", "t", "s", "m"][i].to_string()
            } else {
                format!("[{},{})", w[0], w[1])
            },
            lo: w[0],
            hi: w[1],
        })
        .collect()
}

pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One-to-one greedy matching of single-class, single-image detections.
/// Flags are returned in input order; difficult gts act as ignore regions.
pub fn match_detections(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Vec<MatchFlag> {
    let boxes: Vec<(OBox, f64)> = dets.iter().map(|d| (d.obox, d.confidence)).collect();
    let ignore: Vec<bool> = gts.iter().map(|g| g.difficult).collect();
    match_boxes(&boxes, gts, &ignore, iou_thr, None)
}

fn match_boxes(
    dets: &[(OBox, f64)],
    gts: &[GtInstance],
    gt_ignore: &[bool],
    iou_thr: f64,
    size_range: Option<&SizeBucket>,
) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::Fp; dets.len()];
    for &d in &order {
        let det_box = &dets[d].0;
        let mut best: Option<(f64, usize)> = None;
        let mut hits_ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            let iou = rotated_iou(det_box, &gt.obox);
            if iou < iou_thr {
                continue;
            }
            if gt_ignore[g] {
                hits_ignored = true;
            } else if !taken[g] && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        flags[d] = match best {
            Some((_, g)) => {
                taken[g] = true;
                MatchFlag::Tp
            }
            None if hits_ignored => MatchFlag::Ignored,
            None if size_range.is_some_and(|b| !b.contains(det_box.size())) => MatchFlag::Ignored,
            None => MatchFlag::Fp,
        };
    }
    flags
}

/// 101-point interpolated AP from TP/FP flags already in descending
/// confidence order. `None` when there are no gts to recall.
pub fn average_precision(flags: &[MatchFlag], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in flags {
        match f {
            MatchFlag::Tp => tp += 1,
            MatchFlag::Fp => fp += 1,
            MatchFlag::Ignored => continue,
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..=100)
        .map(|t| {
            let r = t as f64 / 100.0;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// One entry per IoU threshold; `null` when the class has no gts.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAp {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub ap: Option<f64>,
    pub ap_per_threshold: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// Mean over thresholds of the class-mean AP.
    pub ap: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
    /// Class-mean AP at each threshold.
    pub map_per_threshold: Vec<Option<f64>>,
    pub per_class: Vec<ClassAp>,
    pub buckets: Vec<BucketAp>,
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class AP at one threshold, optionally restricted to a size bucket.
fn class_ap(
    images: &BTreeMap<String, Vec<GtInstance>>,
    dets_by_image: &BTreeMap<&str, Vec<(usize, &Detection)>>,
    class_id: usize,
    iou_thr: f64,
    bucket: Option<&SizeBucket>,
) -> Option<f64> {
    let mut n_gt = 0usize;
    // (confidence, global detection index, flag)
    let mut scored: Vec<(f64, usize, MatchFlag)> = Vec::new();
    let empty = Vec::new();
    let image_ids: std::collections::BTreeSet<&str> = images
        .keys()
        .map(String::as_str)
        .chain(dets_by_image.keys().copied())
        .collect();
    for image_id in image_ids {
        let gts: Vec<GtInstance> = images
            .get(image_id)
            .unwrap_or(&empty)
            .iter()
            .filter(|g| g.class_id == class_id)
            .copied()
            .collect();
        let ignore: Vec<bool> = gts
            .iter()
            .map(|g| g.difficult || bucket.is_some_and(|b| !b.contains(g.obox.size())))
            .collect();
        n_gt += ignore.iter().filter(|i| !**i).count();
        let dets: Vec<&(usize, &Detection)> = dets_by_image
            .get(image_id)
            .map(|v| v.iter().filter(|(_, d)| d.class_id == class_id).collect())
            .unwrap_or_default();
        let boxes: Vec<(OBox, f64)> = dets.iter().map(|(_, d)| (d.obox, d.confidence)).collect();
        let flags = match_boxes(&boxes, &gts, &ignore, iou_thr, bucket);
        scored.extend(
            dets.iter()
                .zip(flags)
                .map(|((idx, d), f)| (d.confidence, *idx, f)),
        );
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<MatchFlag> = scored.into_iter().map(|(_, _, f)| f).collect();
    average_precision(&flags, n_gt)
}

/// Full report: per-class AP at every threshold plus bucketed AP.
pub fn evaluate(
    dets: &[Detection],
    images: &BTreeMap<String, Vec<GtInstance>>,
    num_classes: usize,
    iou_thresholds: &[f64],
    buckets: &[SizeBucket],
) -> EvalReport {
    let mut dets_by_image: BTreeMap<&str, Vec<(usize, &Detection)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        dets_by_image
            .entry(d.image_id.as_str())
            .or_default()
            .push((i, d));
    }

    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|c| ClassAp {
            class_id: c,
            ap: iou_thresholds
                .iter()
                .map(|&t| class_ap(images, &dets_by_image, c, t, None))
                .collect(),
        })
        .collect();
    let map_per_threshold: Vec<Option<f64>> = (0..iou_thresholds.len())
        .map(|t| mean_defined(per_class.iter().map(|c| c.ap[t])))
        .collect();
    let at = |thr: f64| {
        iou_thresholds
            .iter()
            .position(|t| (t - thr).abs() < 1e-9)
            .and_then(|i| map_per_threshold[i])
    };

    let buckets = buckets
        .iter()
        .map(|b| {
            let ap_per_threshold: Vec<Option<f64>> = iou_thresholds
                .iter()
                .map(|&t| {
                    mean_defined(
                        (0..num_classes).map(|c| class_ap(images, &dets_by_image, c, t, Some(b))),
                    )
                })
                .collect();
            BucketAp {
                name: b.name.clone(),
                lo: b.lo,
                hi: b.hi,
                ap: mean_defined(ap_per_threshold.iter().copied()),
                ap_per_threshold,
            }
        })
        .collect();

    EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        ap: mean_defined(map_per_threshold.iter().copied()),
        ap_50: at(0.5),
        ap_75: at(0.75),
        map_per_threshold,
        per_class,
        buckets,
    }
}

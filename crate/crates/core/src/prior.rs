//! Multi-level prior grids and the dynamic prior update.
//!
//! Priors are stored flat in `(level, row, col)` order. Prior `(r, c)` on a
//! level with stride `st` starts at `((c + 0.5) st, (r + 0.5) st)` and carries
//! a square shape of side `st * scale_factor` with zero rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{gaussian_from_box, Gaussian2};
use crate::geom::{OBox, Point};

pub const DEFAULT_STRIDES: [f64; 5] = [8.0, 16.0, 32.0, 64.0, 128.0];
pub const DEFAULT_SCALE_FACTOR: f64 = 4.0;
pub const DEFAULT_N_OFFSETS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub stride: f64,
    pub rows: usize,
    pub cols: usize,
    pub prior_side: f64,
    /// Flat index of the level's first prior.
    pub start: usize,
}

impl Level {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub location: Point,
    pub level: usize,
    /// Row-major index within the level grid.
    pub grid_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorField {
    pub levels: Vec<Level>,
    pub priors: Vec<Prior>,
}

impl PriorField {
    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn stride_of(&self, idx: usize) -> f64 {
        self.levels[self.priors[idx].level].stride
    }

    pub fn side_of(&self, idx: usize) -> f64 {
        self.levels[self.priors[idx].level].prior_side
    }

    /// Square prior box at the prior's current location.
    pub fn prior_box(&self, idx: usize) -> OBox {
        let p = &self.priors[idx];
        let side = self.levels[p.level].prior_side;
        OBox {
            cx: p.location.x,
            cy: p.location.y,
            w: side,
            h: side,
            theta: 0.0,
        }
    }

    pub fn gaussian(&self, idx: usize) -> Gaussian2 {
        gaussian_from_box(&self.prior_box(idx))
    }

    pub fn flat_index(&self, level: usize, grid_index: usize) -> Option<usize> {
        let l = self.levels.get(level)?;
        (grid_index < l.len()).then_some(l.start + grid_index)
    }

    /// `(level, row, col)` of a flat index.
    pub fn grid_position(&self, idx: usize) -> (usize, usize, usize) {
        let p = &self.priors[idx];
        let cols = self.levels[p.level].cols;
        (p.level, p.grid_index / cols, p.grid_index % cols)
    }

    /// Multiplies locations, strides and prior sides by `factor`.
    pub fn scaled(&self, factor: f64) -> PriorField {
        PriorField {
            levels: self
                .levels
                .iter()
                .map(|l| Level {
                    stride: l.stride * factor,
                    prior_side: l.prior_side * factor,
                    ..l.clone()
                })
                .collect(),
            priors: self
                .priors
                .iter()
                .map(|p| Prior {
                    location: Point::new(p.location.x * factor, p.location.y * factor),
                    ..*p
                })
                .collect(),
        }
    }
}

/// One square prior per feature point on every pyramid level.
pub fn build_prior_field(
    image_w: f64,
    image_h: f64,
    strides: &[f64],
    scale_factor: f64,
) -> Result<PriorField> {
    if !(image_w > 0.0 && image_h > 0.0) || !image_w.is_finite() || !image_h.is_finite() {
        return Err(Error::Config(format!(
            "image size must be positive, got {image_w}x{image_h}"
        )));
    }
    if strides.is_empty() {
        return Err(Error::Config("at least one stride is required".into()));
    }
    if strides.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Config("strides must be positive".into()));
    }
    if strides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("strides must be strictly ascending".into()));
    }
    if !(scale_factor > 0.0) || !scale_factor.is_finite() {
        return Err(Error::Config(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }

    let mut levels = Vec::with_capacity(strides.len());
    let mut priors = Vec::new();
    for (level, &stride) in strides.iter().enumerate() {
        let rows = (image_h / stride).ceil() as usize;
        let cols = (image_w / stride).ceil() as usize;
        levels.push(Level {
            stride,
            rows,
            cols,
            prior_side: stride * scale_factor,
            start: priors.len(),
        });
        for r in 0..rows {
            for c in 0..cols {
                priors.push(Prior {
                    location: Point::new((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride),
                    level,
                    grid_index: r * cols + c,
                });
            }
        }
    }
    Ok(PriorField { levels, priors })
}

/// `n` offset vectors per prior, in feature-cell units, flat prior order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetField {
    n: usize,
    vectors: Vec<[f64; 2]>,
}

impl OffsetField {
    pub fn new(n: usize, vectors: Vec<[f64; 2]>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Shape(
                "offset count per prior must be at least 1".into(),
            ));
        }
        if !vectors.len().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "{} offset vectors do not divide into groups of {n}",
                vectors.len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite offset".into()));
        }
        Ok(OffsetField { n, vectors })
    }

    pub fn zeros(num_priors: usize, n: usize) -> Self {
        OffsetField {
            n: n.max(1),
            vectors: vec![[0.0; 2]; num_priors * n.max(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_priors(&self) -> usize {
        self.vectors.len() / self.n
    }

    pub fn of_prior(&self, idx: usize) -> &[[f64; 2]] {
        &self.vectors[idx * self.n..(idx + 1) * self.n]
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn scaled(&self, k: f64) -> OffsetField {
        OffsetField {
            n: self.n,
            vectors: self.vectors.iter().map(|v| [v[0] * k, v[1] * k]).collect(),
        }
    }
}

/// Moves every prior to `s + st * sum(offsets) / (2 n)`. Shapes and the level
/// structure are untouched, and locations are not clamped to the image.
pub fn update_priors(field: &PriorField, offsets: &OffsetField) -> Result<PriorField> {
    if offsets.num_priors() != field.len() {
        return Err(Error::Shape(format!(
            "offset field covers {} priors, prior field has {}",
            offsets.num_priors(),
            field.len()
        )));
    }
    let n = offsets.n() as f64;
    let priors = field
        .priors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let st = field.levels[p.level].stride;
            let (sx, sy) = offsets
                .of_prior(i)
                .iter()
                .fold((0.0, 0.0), |(x, y), o| (x + o[0], y + o[1]));
            Prior {
                location: Point::new(
                    p.location.x + st * sx / (2.0 * n),
                    p.location.y + st * sy / (2.0 * n),
                ),
                ..*p
            }
        })
        .collect();
    Ok(PriorField {
        levels: field.levels.clone(),
        priors,
    })
}

/// Stand-in for a learned offset head: one offset per prior pointing at the
/// nearest gt center (lowest index on ties) with length
/// `gain * min(distance / stride, 1)`.
///
/// After [`update_priors`] a prior moves `stride * |offset| / 2` pixels, so for
/// `gain <= 4` no prior ends up farther from its nearest gt center.
pub fn synth_offsets_toward_gt(field: &PriorField, gts: &[OBox], gain: f64) -> OffsetField {
    let mut vectors = vec![[0.0; 2]; field.len()];
    if gts.is_empty() || gain == 0.0 {
        return OffsetField { n: 1, vectors };
    }
    for (i, p) in field.priors.iter().enumerate() {
        let mut best = (f64::INFINITY, Point::default());
        for g in gts {
            let d = p.location.distance(g.center());
            if d < best.0 {
                best = (d, g.center());
            }
        }
        let (d, target) = best;
        if d > 0.0 {
            let st = field.levels[p.level].stride;
            let mag = gain * (d / st).min(1.0);
            vectors[i] = [
                mag * (target.x - p.location.x) / d,
                mag * (target.y - p.location.y) / d,
            ];
        }
    }
    OffsetField { n: 1, vectors }
}

//! Boxes as 2-D Gaussians and the divergences between them.
//!
//! A box `(cx, cy, w, h, theta)` maps to `N(mu, Sigma)` with `mu = (cx, cy)`
//! and `Sigma = R(theta) diag(w^2/4, h^2/4) R(theta)^T`. All 2x2 inverses go
//! through the adjugate; a determinant below [`DET_FLOOR`] is reported as a
//! conditioning error instead of being regularized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{OBox, Point};

/// Smallest covariance determinant (px^4) accepted by the divergence kernels.
pub const DET_FLOOR: f64 = 1e-12;

/// Symmetric-or-not 2x2 matrix, row major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2::new(1.0, 0.0, 0.0, 1.0);

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub const fn diag(x: f64, y: f64) -> Self {
        Mat2::new(x, 0.0, 0.0, y)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn scale(&self, k: f64) -> Mat2 {
        Mat2::new(self.a * k, self.b * k, self.c * k, self.d * k)
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        Mat2::new(
            self.a * o.a + self.b * o.c,
            self.a * o.b + self.b * o.d,
            self.c * o.a + self.d * o.c,
            self.c * o.b + self.d * o.d,
        )
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a * v[0] + self.b * v[1], self.c * v[0] + self.d * v[1]]
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.a, self.c, self.b, self.d)
    }

    /// Inverse via the adjugate.
    pub fn inverse(&self) -> Result<Mat2> {
        let det = self.det();
        if !(det >= DET_FLOOR) {
            return Err(Error::Conditioning { det });
        }
        let k = 1.0 / det;
        Ok(Mat2::new(self.d * k, -self.b * k, -self.c * k, self.a * k))
    }

    /// `v^T M v`.
    pub fn quad_form(&self, v: [f64; 2]) -> f64 {
        let mv = self.apply(v);
        v[0] * mv[0] + v[1] * mv[1]
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> [f64; 2] {
        let half_tr = 0.5 * self.trace();
        let off = 0.5 * (self.b + self.c);
        let r = (0.25 * (self.a - self.d).powi(2) + off * off).sqrt();
        [half_tr - r, half_tr + r]
    }
}

/// 2-D Gaussian with a symmetric positive-definite covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mu: [f64; 2],
    pub sigma: Mat2,
}

impl Gaussian2 {
    pub fn new(mu: [f64; 2], sigma: Mat2) -> Result<Self> {
        if mu
            .iter()
            .chain([sigma.a, sigma.b, sigma.c, sigma.d].iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidGaussian("non-finite parameter".into()));
        }
        if (sigma.b - sigma.c).abs() >= 1e-12 {
            return Err(Error::InvalidGaussian(format!(
                "covariance not symmetric: {} vs {}",
                sigma.b, sigma.c
            )));
        }
        if !(sigma.det() > 0.0 && sigma.trace() > 0.0) {
            return Err(Error::InvalidGaussian(
                "covariance not positive definite".into(),
            ));
        }
        Ok(Gaussian2 { mu, sigma })
    }

    /// Multiplies the mean by `c` and the covariance by `c^2`.
    pub fn scaled(&self, c: f64) -> Gaussian2 {
        Gaussian2 {
            mu: [self.mu[0] * c, self.mu[1] * c],
            sigma: self.sigma.scale(c * c),
        }
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis2(&self, x: [f64; 2]) -> Result<f64> {
        let inv = self.sigma.inverse()?;
        Ok(inv.quad_form([x[0] - self.mu[0], x[1] - self.mu[1]]))
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: [f64; 2]) -> Result<f64> {
        let m2 = self.mahalanobis2(x)?;
        Ok(-0.5 * m2 - (2.0 * std::f64::consts::PI).ln() - 0.5 * self.sigma.det().ln())
    }
}

/// Covariance `R diag(w^2/4, h^2/4) R^T` centered on the box.
pub fn gaussian_from_box(b: &OBox) -> Gaussian2 {
    let (s, c) = b.theta.sin_cos();
    let l1 = 0.25 * b.w * b.w;
    let l2 = 0.25 * b.h * b.h;
    let off = c * s * (l1 - l2);
    Gaussian2 {
        mu: [b.cx, b.cy],
        sigma: Mat2::new(c * c * l1 + s * s * l2, off, off, s * s * l1 + c * c * l2),
    }
}

/// Closed-form `KL(p || q)`.
pub fn kld(p: &Gaussian2, q: &Gaussian2) -> Result<f64> {
    let det_p = p.sigma.det();
    if !(det_p >= DET_FLOOR) {
        return Err(Error::Conditioning { det: det_p });
    }
    let q_inv = q.sigma.inverse()?;
    let dmu = [q.mu[0] - p.mu[0], q.mu[1] - p.mu[1]];
    let tr = q_inv.mul(&p.sigma).trace();
    let maha = q_inv.quad_form(dmu);
    let log_det = (q.sigma.det() / det_p).ln();
    Ok((0.5 * (tr + maha - 2.0 + log_det)).max(0.0))
}

/// Squared 2-Wasserstein distance.
///
/// For 2x2 SPD `M`, `tr(sqrt(M)) = sqrt(tr M + 2 sqrt(det M))`; with
/// `M = Sq^1/2 Sp Sq^1/2` this needs only `tr(Sp Sq)` and `det(Sp) det(Sq)`.
pub fn gwd(p: &Gaussian2, q: &Gaussian2) -> Result<f64> {
    for g in [p, q] {
        let det = g.sigma.det();
        if !(det >= DET_FLOOR) {
            return Err(Error::Conditioning { det });
        }
    }
    let dx = p.mu[0] - q.mu[0];
    let dy = p.mu[1] - q.mu[1];
    let cross_tr = p.sigma.mul(&q.sigma).trace();
    let root_det = (p.sigma.det() * q.sigma.det()).sqrt();
    let tr_sqrt = (cross_tr + 2.0 * root_det).max(0.0).sqrt();
    Ok((dx * dx + dy * dy + p.sigma.trace() + q.sigma.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Interpolated Gaussian `N_alpha`: precision-weighted blend of `p` and `q`.
pub fn interpolate(p: &Gaussian2, q: &Gaussian2, alpha: f64) -> Result<Gaussian2> {
    let p_inv = p.sigma.inverse()?;
    let q_inv = q.sigma.inverse()?;
    let wp = p_inv.scale(1.0 - alpha);
    let wq = q_inv.scale(alpha);
    let sigma = wp.add(&wq).inverse()?;
    let a = wp.apply(p.mu);
    let b = wq.apply(q.mu);
    let mu = sigma.apply([a[0] + b[0], a[1] + b[1]]);
    Ok(Gaussian2 { mu, sigma })
}

/// Generalized Jensen-Shannon divergence
/// `(1 - alpha) KL(N_alpha || p) + alpha KL(N_alpha || q)`.
pub fn gjsd(p: &Gaussian2, q: &Gaussian2, alpha: f64) -> Result<f64> {
    let n_alpha = interpolate(p, q, alpha)?;
    Ok((1.0 - alpha) * kld(&n_alpha, p)? + alpha * kld(&n_alpha, q)?)
}

/// Distribution distances selectable for coarse candidate ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Kld,
    Gwd,
    #[default]
    Gjsd,
}

impl Measure {
    /// Distance from a prior Gaussian to a gt Gaussian; smaller is closer.
    pub fn distance(self, prior: &Gaussian2, gt: &Gaussian2, alpha: f64) -> Result<f64> {
        match self {
            Measure::Kld => kld(prior, gt),
            Measure::Gwd => gwd(prior, gt),
            Measure::Gjsd => gjsd(prior, gt, alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DgmmComponent {
    pub weight: f64,
    pub mu: [f64; 2],
    pub sigma: Mat2,
    #[serde(skip)]
    precision: Mat2,
}

/// Two-component instance mixture: the gt geometry center and the semantic
/// center, both with the gt covariance.
///
/// Components are peak-normalized, `w * exp(-d^2 / 2)` with `d` the
/// Mahalanobis distance, so a lone unit-weight component evaluates to 1 at
/// its mean and the gate `exp(-g)` is the Mahalanobis radius `sqrt(2 g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dgmm {
    pub components: [DgmmComponent; 2],
}

impl Dgmm {
    pub fn build(gt: &OBox, semantic_center: Point, w1: f64) -> Result<Dgmm> {
        if !(w1 > 0.0 && w1 < 1.0) {
            return Err(Error::Config(format!("w1 must lie in (0, 1), got {w1}")));
        }
        let g = gaussian_from_box(gt);
        let precision = g.sigma.inverse()?;
        let component = |weight: f64, mu: [f64; 2]| DgmmComponent {
            weight,
            mu,
            sigma: g.sigma,
            precision,
        };
        Ok(Dgmm {
            components: [
                component(w1, g.mu),
                component(1.0 - w1, [semantic_center.x, semantic_center.y]),
            ],
        })
    }

    pub fn eval(&self, x: Point) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let d = [x.x - c.mu[0], x.y - c.mu[1]];
                c.weight * (-0.5 * c.precision.quad_form(d)).exp()
            })
            .sum()
    }
}

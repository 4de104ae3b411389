//! Oracle suites: exact geometry and closed forms against slow independent
//! estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;

use crate::assign::{select_cps, GtInstance};
use crate::gaussian::{gaussian_from_box, gjsd, kld, Gaussian2, Mat2, Measure};
use crate::geom::{mc_iou, rotated_iou, OBox};
use crate::prior::{build_prior_field, PriorField};

/// Deliberate corruption used to prove the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Adds 0.01 to every exact IoU.
    IouBias,
    /// Scales every closed-form KLD by 1.01.
    KldBias,
    /// Evaluates the reverse GJSD direction at alpha 0.51.
    GjsdSkew,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfCheckOptions {
    /// IoU pairs; the KLD suite uses `trials / 10` pairs and the GJSD
    /// symmetry check `10 * trials`.
    pub trials: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            trials: 1000,
            mc_samples: 1_000_000,
            seed: 0x5eed,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation metric seen (see each suite for its unit).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{:<5} {:<28} cases={:<6} failures={:<4} worst={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.failures,
            self.worst,
            self.tolerance
        )
    }
}

fn outcome(name: &str, cases: usize, failures: usize, worst: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: failures == 0 && cases > 0,
        cases,
        failures,
        worst,
        tolerance,
    }
}

/// A random box with long side in `[2, 100)` and aspect up to 8.
pub fn random_box(rng: &mut ChaCha8Rng) -> OBox {
    let w = rng.gen_range(2.0..100.0);
    let h = w / rng.gen_range(1.0..8.0f64);
    OBox::new(
        rng.gen_range(-200.0..200.0),
        rng.gen_range(-200.0..200.0),
        w,
        h,
        rng.gen_range(-PI..PI),
    )
    .expect("valid random box")
}

/// Pairs that mostly overlap: the second box is centred inside the first's
/// extent. Every tenth pair is independent and usually disjoint.
pub fn random_box_pair(rng: &mut ChaCha8Rng, index: usize) -> (OBox, OBox) {
    let a = random_box(rng);
    if index % 10 == 9 {
        return (a, random_box(rng));
    }
    let (s, c) = a.theta.sin_cos();
    let u = rng.gen_range(-0.5..0.5) * a.w;
    let v = rng.gen_range(-0.5..0.5) * a.h;
    let w = a.w * rng.gen_range(0.3..2.0);
    let h = (w / rng.gen_range(1.0..6.0f64)).max(0.5);
    let b = OBox::new(
        a.cx + u * c - v * s,
        a.cy + u * s + v * c,
        w,
        h,
        rng.gen_range(-PI..PI),
    )
    .expect("valid random box");
    (a, b)
}

/// `|exact - mc| <= 3 * stderr` for every pair; worst is the largest ratio.
pub fn iou_vs_monte_carlo(pairs: usize, samples: usize, seed: u64, fault: Fault) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for i in 0..pairs {
        let (a, b) = random_box_pair(&mut rng, i);
        let mut exact = rotated_iou(&a, &b);
        if fault == Fault::IouBias {
            exact += 0.01;
        }
        let mc = mc_iou(&a, &b, samples, seed.wrapping_add(i as u64 + 1));
        let diff = (exact - mc.estimate).abs();
        let ratio = if mc.stderr > 0.0 {
            diff / mc.stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(ratio);
        if ratio > 3.0 {
            failures += 1;
        }
    }
    outcome("iou_vs_monte_carlo", pairs, failures, worst, 3.0)
}

/// Random well-conditioned Gaussian: eigenvalues in `[0.5, 4]`, mean within
/// 2 units of the origin.
pub fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian2 {
    let l1: f64 = rng.gen_range(0.5..4.0);
    let l2: f64 = rng.gen_range(0.5..4.0);
    let (s, c) = rng.gen_range(0.0..PI).sin_cos();
    let a = c * c * l1 + s * s * l2;
    let d = s * s * l1 + c * c * l2;
    let b = c * s * (l1 - l2);
    Gaussian2::new(
        [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
        Mat2::new(a, b, b, d),
    )
    .expect("well-conditioned")
}

/// Lower Cholesky factor `(l11, l21, l22)` of a 2x2 SPD matrix.
fn cholesky(m: &Mat2) -> (f64, f64, f64) {
    let l11 = m.a.sqrt();
    let l21 = m.c / l11;
    (l11, l21, (m.d - l21 * l21).sqrt())
}

/// `KL(p || q)` by composite Simpson quadrature of `p log(p / q)` over the
/// `6 sigma` square of `p` in whitened coordinates `x = mu_p + L z`.
pub fn kld_quadrature(p: &Gaussian2, q: &Gaussian2, n: usize) -> f64 {
    let n = n + n % 2;
    let (l11, l21, l22) = cholesky(&p.sigma);
    let (m11, m21, m22) = cholesky(&q.sigma);
    let log_det_p = 2.0 * (l11 * l22).ln();
    let log_det_q = 2.0 * (m11 * m22).ln();
    let h = 12.0 / n as f64;
    let simpson = |i: usize| match i {
        0 => 1.0,
        i if i == n => 1.0,
        i if i % 2 == 1 => 4.0,
        _ => 2.0,
    };
    let mut total = 0.0;
    for i in 0..=n {
        let z1 = -6.0 + i as f64 * h;
        for j in 0..=n {
            let z2 = -6.0 + j as f64 * h;
            let x = p.mu[0] + l11 * z1 - q.mu[0];
            let y = p.mu[1] + l21 * z1 + l22 * z2 - q.mu[1];
            // Whiten against q by forward substitution.
            let u1 = x / m11;
            let u2 = (y - m21 * u1) / m22;
            let zz = z1 * z1 + z2 * z2;
            let log_ratio =
                -0.5 * zz - 0.5 * log_det_p + 0.5 * (u1 * u1 + u2 * u2) + 0.5 * log_det_q;
            let density = (-0.5 * zz).exp() / (2.0 * PI);
            total += simpson(i) * simpson(j) * density * log_ratio;
        }
    }
    total * h * h / 9.0
}

/// Closed-form KLD against [`kld_quadrature`]; worst is the absolute error.
pub fn kld_vs_quadrature(pairs: usize, seed: u64, fault: Fault) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..pairs {
        let p = random_gaussian(&mut rng);
        let q = random_gaussian(&mut rng);
        let mut closed = kld(&p, &q).expect("well-conditioned");
        if fault == Fault::KldBias {
            closed *= 1.01;
        }
        let err = (closed - kld_quadrature(&p, &q, 240)).abs();
        worst = worst.max(err);
        if !(err <= 1e-3) {
            failures += 1;
        }
    }
    outcome("kld_vs_quadrature", pairs, failures, worst, 1e-3)
}

fn gjsd_pair(rng: &mut ChaCha8Rng) -> (Gaussian2, Gaussian2) {
    let a = random_box(rng);
    let b = random_box(rng).translated(a.cx * 0.5, a.cy * 0.5);
    (gaussian_from_box(&a), gaussian_from_box(&b))
}

fn reverse(p: &Gaussian2, q: &Gaussian2, fault: Fault) -> f64 {
    let alpha = if fault == Fault::GjsdSkew { 0.51 } else { 0.5 };
    gjsd(q, p, alpha).expect("positive definite")
}

pub fn gjsd_identity(pairs: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..pairs {
        let p = gaussian_from_box(&random_box(&mut rng));
        let v = gjsd(&p, &p, 0.5).expect("positive definite").abs();
        worst = worst.max(v);
        if !(v < 1e-12) {
            failures += 1;
        }
    }
    outcome("gjsd_identity", pairs, failures, worst, 1e-12)
}

pub fn gjsd_symmetry(pairs: usize, seed: u64, fault: Fault) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..pairs {
        let (p, q) = gjsd_pair(&mut rng);
        let d = (gjsd(&p, &q, 0.5).expect("positive definite") - reverse(&p, &q, fault)).abs();
        worst = worst.max(d);
        if !(d < 1e-9) {
            failures += 1;
        }
    }
    outcome("gjsd_symmetry", pairs, failures, worst, 1e-9)
}

/// `GJSD(cP, cQ) = GJSD(P, Q)` for `c` in {0.1, 10}.
pub fn gjsd_scale(pairs: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..pairs {
        let (p, q) = gjsd_pair(&mut rng);
        let base = gjsd(&p, &q, 0.5).expect("positive definite");
        for c in [0.1, 10.0] {
            let v = gjsd(&p.scaled(c), &q.scaled(c), 0.5).expect("positive definite");
            let d = (v - base).abs();
            worst = worst.max(d);
            if !(d < 1e-6) {
                failures += 1;
            }
        }
    }
    outcome("gjsd_scale_invariance", 2 * pairs, failures, worst, 1e-6)
}

/// Random scene of at most 1344 priors and 50 gts. Every third gt is a
/// square with theta 0 on a stride-8 grid corner, where mirror-image priors
/// have bitwise-equal divergences.
pub fn random_cps_scene(rng: &mut ChaCha8Rng) -> (PriorField, Vec<GtInstance>) {
    let cells = rng.gen_range(4..=8);
    let size = cells as f64 * 32.0;
    let priors = build_prior_field(size, size, &[8.0, 16.0, 32.0], 4.0).expect("valid grid");
    let n = rng.gen_range(1..=50);
    let gts = (0..n)
        .map(|i| {
            let obox = if i % 3 == 0 {
                let side = [4.0, 8.0, 16.0, 32.0][rng.gen_range(0..4)];
                let cx = 8.0 * rng.gen_range(1..4 * cells) as f64;
                let cy = 8.0 * rng.gen_range(1..4 * cells) as f64;
                OBox::new(cx, cy, side, side, 0.0)
            } else {
                let w = rng.gen_range(2.0..80.0);
                OBox::new(
                    rng.gen_range(0.0..size),
                    rng.gen_range(0.0..size),
                    w,
                    w / rng.gen_range(1.0..5.0),
                    rng.gen_range(-1.6..1.6),
                )
            };
            GtInstance::new(obox.expect("valid random box"), 0)
        })
        .collect();
    (priors, gts)
}

/// Every divergence, fully sorted by `(value, index)`, first `k` kept.
pub fn cps_exhaustive(priors: &PriorField, gt: &GtInstance, k: usize) -> Vec<(f64, usize)> {
    let g = gaussian_from_box(&gt.obox);
    let mut all: Vec<(f64, usize)> = (0..priors.len())
        .map(|i| {
            (
                gjsd(&priors.gaussian(i), &g, 0.5).expect("positive definite"),
                i,
            )
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// `select_cps` set-equal to [`cps_exhaustive`] on random scenes with random
/// `k`. Also requires that no excluded prior beats the `k`-th divergence and
/// that at least one tie straddles the `k` boundary somewhere, so the tie path
/// is exercised. `worst` counts gts whose sets differ.
pub fn cps_vs_exhaustive(scenes: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut cases, mut straddling) = (0, 0, 0);
    for _ in 0..scenes {
        let (priors, gts) = random_cps_scene(&mut rng);
        let k = rng.gen_range(1..=24);
        let cps = select_cps(&priors, &gts, k, Measure::Gjsd, 0.5).expect("valid scene");
        for (gt, got) in gts.iter().zip(&cps) {
            cases += 1;
            let want = cps_exhaustive(&priors, gt, k);
            let mut got_set = got.clone();
            got_set.sort_unstable();
            let mut want_set: Vec<usize> = want.iter().map(|w| w.1).collect();
            want_set.sort_unstable();

            let g = gaussian_from_box(&gt.obox);
            let kth = want.last().map_or(f64::INFINITY, |w| w.0);
            let mut beaten = false;
            let mut tied_outside = false;
            for i in (0..priors.len()).filter(|i| !got.contains(i)) {
                let d = gjsd(&priors.gaussian(i), &g, 0.5).expect("positive definite");
                beaten |= d < kth;
                tied_outside |= d == kth;
            }
            straddling += usize::from(tied_outside);
            if got_set != want_set || beaten {
                failures += 1;
            }
        }
    }
    if straddling == 0 {
        failures += 1;
    }
    outcome("cps_vs_exhaustive", cases, failures, failures as f64, 0.0)
}

pub fn run_all(opts: &SelfCheckOptions) -> Vec<CheckOutcome> {
    let t = opts.trials.max(1);
    vec![
        iou_vs_monte_carlo(t, opts.mc_samples, opts.seed, opts.fault),
        kld_vs_quadrature((t / 10).max(1), opts.seed ^ 1, opts.fault),
        gjsd_identity(t, opts.seed ^ 2),
        gjsd_symmetry(10 * t, opts.seed ^ 3, opts.fault),
        gjsd_scale(t, opts.seed ^ 4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_known_values() {
        let p = Gaussian2::new([0.0, 0.0], Mat2::IDENTITY).unwrap();
        assert!(kld_quadrature(&p, &p, 120).abs() < 1e-9);
        let q = Gaussian2::new([1.0, 0.0], Mat2::IDENTITY).unwrap();
        assert!((kld_quadrature(&p, &q, 120) - 0.5).abs() < 1e-6);
        // KL(N(0,I) || N(0,2I)) = ln 2 - 1/2
        let q = Gaussian2::new([0.0, 0.0], Mat2::diag(2.0, 2.0)).unwrap();
        assert!((kld_quadrature(&p, &q, 120) - (2f64.ln() - 0.5)).abs() < 1e-6);
    }

    #[test]
    fn small_suites_pass() {
        let opts = SelfCheckOptions {
            trials: 20,
            mc_samples: 40_000,
            ..SelfCheckOptions::default()
        };
        for o in run_all(&opts) {
            assert!(o.passed, "{}", o.line());
        }
    }

    #[test]
    fn faults_are_caught() {
        assert!(!iou_vs_monte_carlo(20, 250_000, 1, Fault::IouBias).passed);
        assert!(!kld_vs_quadrature(5, 1, Fault::KldBias).passed);
        assert!(!gjsd_symmetry(20, 1, Fault::GjsdSkew).passed);
    }
}

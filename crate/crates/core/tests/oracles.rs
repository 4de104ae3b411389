use dcfl_core::selfcheck::{
    cps_vs_exhaustive, iou_vs_monte_carlo, kld_quadrature, kld_vs_quadrature, random_gaussian,
    Fault,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn kld_agrees_with_quadrature() {
    let o = kld_vs_quadrature(100, 11, Fault::None);
    assert!(o.passed, "{}", o.line());
}

#[test]
fn quadrature_resolution_is_converged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let p = random_gaussian(&mut rng);
        let q = random_gaussian(&mut rng);
        let coarse = kld_quadrature(&p, &q, 240);
        let fine = kld_quadrature(&p, &q, 480);
        assert!((coarse - fine).abs() < 1e-6, "{coarse} vs {fine}");
    }
}

#[test]
fn iou_agrees_with_monte_carlo_sample() {
    let o = iou_vs_monte_carlo(100, 250_000, 3, Fault::None);
    assert!(o.passed, "{}", o.line());
}

#[test]
fn cps_matches_exhaustive_sort() {
    let o = cps_vs_exhaustive(100, 2024);
    assert!(o.passed, "{}", o.line());
}

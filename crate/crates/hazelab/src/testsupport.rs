//! Helpers shared by the unit tests: deterministic data and a central
//! finite-difference oracle for gradient checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reproducible samples from `U(lo, hi)`.
pub fn seeded_data(len: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central finite differences of a scalar function, step 1e-5.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Asserts elementwise relative agreement, with an absolute floor so tiny
/// gradients do not blow up the ratio.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-3);
        let rel = (a - n).abs() / denom;
        assert!(
            rel < tol,
            "grad[{i}]: analytic {a} vs numeric {n} (rel err {rel:.2e})"
        );
    }
}

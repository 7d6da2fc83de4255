//! Cross-checks of the numeric kernels against an independent dense SVD
//! (nalgebra's Golub-Kahan implementation) on seeded random matrices.

use compressense::approx::{compress, CompressionConfig};
use compressense::groups::{ComponentType, CompressionGroup, MatrixId};
use compressense::linalg::{
    self, spectral_norm_default, split_by_mask, topk_magnitude_mask, Matrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn power_iteration_matches_oracle_sigma1() {
    let m = random_matrix(8, 8, 7);
    let oracle = oracle_singular_values(&m);
    let est = spectral_norm_default(&m).unwrap();
    assert!(est.converged);
    assert!(
        (est.value - oracle[0]).abs() <= 1e-8 * oracle[0],
        "power iteration {} vs oracle {}",
        est.value,
        oracle[0]
    );
}

#[test]
fn truncation_residual_matches_oracle_sigma3() {
    let m = random_matrix(6, 4, 3);
    let oracle = oracle_singular_values(&m);
    let f = linalg::truncated_svd(&m, 2).unwrap();
    let residual = m.sub(&f.reconstruct());
    let resid_norm = spectral_norm_default(&residual).unwrap().value;
    assert!(
        (resid_norm - oracle[2]).abs() <= 1e-8 * oracle[0],
        "residual {} vs oracle sigma3 {}",
        resid_norm,
        oracle[2]
    );
    assert!((f.sigma_next - oracle[2]).abs() <= 1e-8 * oracle[0]);
}

#[test]
fn jacobi_singular_values_match_oracle() {
    for seed in 20..30u64 {
        let rows = 3 + (seed as usize % 6);
        let cols = 3 + ((seed as usize * 7) % 6);
        let m = random_matrix(rows, cols, seed);
        let oracle = oracle_singular_values(&m);
        let (_, s, _) = linalg::full_svd(&m).unwrap();
        for (a, b) in s.iter().zip(&oracle) {
            assert!(
                (a - b).abs() <= 1e-10 * oracle[0].max(1.0),
                "seed {seed}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn compress_norm_r_matches_masked_oracle() {
    let m = random_matrix(8, 8, 5);
    let cfg = CompressionConfig::new(0.25, 2, 0.0);
    let id = MatrixId::new(CompressionGroup::new(0, ComponentType::AttnProj), None);
    let a = compress(id, &m, &cfg).unwrap();

    let mask = topk_magnitude_mask(&m, 0.25).unwrap();
    let (masked, _) = split_by_mask(&m, &mask);
    let oracle = oracle_singular_values(&masked);
    assert!(
        (a.norm_r - oracle[2]).abs() <= 1e-8 * oracle[0],
        "norm_r {} vs oracle sigma3(masked) {}",
        a.norm_r,
        oracle[2]
    );
}

#[test]
fn sym_sqrt_reconstructs_random_psd() {
    let b = random_matrix(5, 5, 11);
    let mut s = b.matmul(&b.transpose());
    for i in 0..5 {
        s[(i, i)] += 0.1;
    }
    let (sqrt_s, inv_sqrt_s) = linalg::sym_inv_sqrt(&s, 1e-10).unwrap();
    let err = sqrt_s.matmul(&sqrt_s).sub(&s).max_abs();
    assert!(err < 1e-8, "sqrt reconstruction error {err}");
    let proj = sqrt_s.matmul(&inv_sqrt_s).sub(&Matrix::identity(5)).max_abs();
    assert!(proj < 1e-8, "inverse mismatch {proj}");
}

#[test]
fn eckart_young_holds_on_random_sizes() {
    // The residual spectral norm is measured by a full SVD: power iteration
    // stalls on near-degenerate trailing spectra, the factorization does not.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let rows = rng.gen_range(2..=64);
        let cols = rng.gen_range(2..=64);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0));
        let p = rows.min(cols);
        let r = rng.gen_range(1..=p);
        let f = linalg::truncated_svd(&m, r).unwrap();
        let (_, resid_s, _) = linalg::full_svd(&m.sub(&f.reconstruct())).unwrap();
        let sigma1 = f.s[0].max(f.sigma_next);
        assert!(
            (resid_s[0] - f.sigma_next).abs() <= 1e-8 * sigma1.max(1e-300),
            "trial {trial} ({rows}x{cols}, r={r}): residual {} vs sigma_next {}",
            resid_s[0],
            f.sigma_next
        );
        // Independent route: sigma_next must be the oracle's sigma_{r+1}.
        let oracle = oracle_singular_values(&m);
        let expected = if r < p { oracle[r] } else { 0.0 };
        assert!(
            (f.sigma_next - expected).abs() <= 1e-8 * sigma1.max(1e-300),
            "trial {trial}: sigma_next {} vs oracle {}",
            f.sigma_next,
            expected
        );
    }
}

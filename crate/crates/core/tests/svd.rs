mod common;

use common::rng;
use mla_core::linalg::truncated_svd;
use mla_core::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn orthonormality_error(q: &Matrix) -> f64 {
    q.t_matmul(q).max_abs_diff(&Matrix::identity(q.cols()))
}

/// Seeded test matrices, including rank-deficient and badly scaled ones.
fn cases() -> Vec<Matrix> {
    let mut r = rng(42);
    let mut out = Vec::new();
    for &(m, n) in &[(5, 3), (3, 5), (16, 16), (64, 96), (96, 64), (64, 32), (1, 7)] {
        out.push(Matrix::random_normal(m, n, 1.0, &mut r));
    }
    let a = Matrix::random_normal(40, 6, 1.0, &mut r);
    let b = Matrix::random_normal(6, 50, 1.0, &mut r);
    out.push(a.matmul(&b));
    let graded = Matrix::from_fn(20, 12, |i, j| 10f64.powi(-(j as i32) / 2) * ((i * 7 + j * 3) % 11) as f64);
    out.push(graded);
    out
}

#[test]
fn singular_values_match_full_svd_oracle() {
    for m in cases() {
        let k = m.rows().min(m.cols());
        let ours = truncated_svd(&m, k).unwrap();
        let mut theirs: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in ours.s.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-8 * theirs[0].max(1.0), "{a} vs {b}");
        }
        let rec = ours.reconstruct();
        assert!(rec.max_abs_diff(&m) <= 1e-8 * theirs[0].max(1.0));
    }
}

#[test]
fn factors_orthonormal_and_sorted() {
    for m in cases() {
        let k = m.rows().min(m.cols());
        let f = truncated_svd(&m, k).unwrap();
        assert!(orthonormality_error(&f.u) <= 1e-10);
        assert!(orthonormality_error(&f.v) <= 1e-10);
        assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.s.iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn truncation_error_is_monotone_and_optimal() {
    for m in cases() {
        let k = m.rows().min(m.cols());
        let full = truncated_svd(&m, k).unwrap();
        let mut prev = f64::INFINITY;
        for r in 1..=k {
            let f = truncated_svd(&m, r).unwrap();
            let err = f.reconstruct().sub(&m).frobenius_norm();
            assert!(err <= prev + 1e-10, "rank {r}: {err} > {prev}");
            // Eckart–Young: the residual is the tail of the spectrum.
            let tail = full.s[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - tail).abs() <= 1e-8 * full.s[0].max(1.0));
            prev = err;
        }
    }
}

#[test]
fn subspaces_match_oracle_up_to_sign() {
    let mut r = rng(7);
    // Distinct, well-separated singular values make vectors unique up to sign.
    let q1 = truncated_svd(&Matrix::random_normal(30, 8, 1.0, &mut r), 8).unwrap().u;
    let q2 = truncated_svd(&Matrix::random_normal(8, 8, 1.0, &mut r), 8).unwrap().u;
    let s = Matrix::diag(&[9.0, 7.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5]);
    let m = q1.matmul(&s).matmul_t(&q2);
    let ours = truncated_svd(&m, 8).unwrap();
    let na = to_na(&m).svd(true, true);
    let u = na.u.unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| na.singular_values[b].partial_cmp(&na.singular_values[a]).unwrap());
    for (j, &o) in order.iter().enumerate() {
        let dot: f64 = (0..30).map(|i| ours.u[(i, j)] * u[(i, o)]).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-8, "column {j}: |dot| = {}", dot.abs());
    }
}

#[test]
fn random_shapes_stay_accurate() {
    let mut r = rng(99);
    for _ in 0..20 {
        let m = r.random_range(1..40);
        let n = r.random_range(1..40);
        let a = Matrix::random_normal(m, n, r.random_range(0.1..10.0), &mut r);
        let f = truncated_svd(&a, m.min(n)).unwrap();
        assert!(f.reconstruct().max_abs_diff(&a) <= 1e-9 * a.max_abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_invariants(m in 1usize..12, n in 1usize..12, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let a = Matrix::random_normal(m, n, 1.0, &mut rng(seed));
        let k = m.min(n);
        let r = 1 + ((k - 1) as f64 * frac) as usize;
        let f = truncated_svd(&a, r).unwrap();
        prop_assert_eq!(f.s.len(), r);
        prop_assert!(orthonormality_error(&f.u) <= 1e-10);
        prop_assert!(orthonormality_error(&f.v) <= 1e-10);
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        // A·v = σ·u for every kept pair.
        let av = a.matmul(&f.v);
        for j in 0..r {
            for i in 0..m {
                prop_assert!((av[(i, j)] - f.s[j] * f.u[(i, j)]).abs() <= 1e-9);
            }
        }
    }
}

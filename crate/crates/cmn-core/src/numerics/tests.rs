use super::*;

use proptest::prelude::*;

use super::Rng;

/// Naive triple-loop product, kept separate from `matmul` on purpose.
fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "entry {i}: {x} vs {y} differs by {}",
            (x - y).abs()
        );
    }
}

#[test]
fn matmul_identity() {
    let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = matmul(&Matrix::identity(2), &a).unwrap();
    assert_eq!(out, a);
}

#[test]
fn matmul_selector_row() {
    let sel = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let col = Matrix::from_vec(2, 1, vec![5.0, 7.0]).unwrap();
    let out = matmul(&sel, &col).unwrap();
    assert_eq!(out.data(), &[5.0]);
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = Rng::from_seed(42);
    let a = Matrix::from_vec(3, 4, gaussian(&mut rng, 12, 0.0, 1.0).unwrap()).unwrap();
    let b = Matrix::from_vec(4, 2, gaussian(&mut rng, 8, 0.0, 1.0).unwrap()).unwrap();
    let got = matmul(&a, &b).unwrap();
    let want = matmul_naive(&a, &b);
    assert_close(got.data(), want.data(), 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Matrix::zeros(2, 3);
    let b = Matrix::zeros(2, 2);
    let err = matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
}

#[test]
fn softmax_constant_scores_are_uniform() {
    let w = stable_softmax(&[3.7, 3.7, 3.7], 0.5).unwrap();
    assert_close(&w, &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_two_scores_at_low_temperature() {
    // Direct evaluation of exp(s_i / tau) / sum_j exp(s_j / tau), which is
    // safe here because the raw exponents are small.
    let tau = 0.1;
    let direct: Vec<f64> = {
        let e: Vec<f64> = [1.0f64, 0.0].iter().map(|s| (s / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    };
    let got = stable_softmax(&[1.0, 0.0], tau).unwrap();
    assert_close(&got, &direct, 1e-12);
    assert!((got[0] - 0.9999546021312976).abs() < 1e-12);
    assert!((got[1] - 4.5397868702434395e-5).abs() < 1e-17);
}

#[test]
fn softmax_single_element_is_one() {
    let w = stable_softmax(&[-123.4], 0.1).unwrap();
    assert_eq!(w, vec![1.0]);
}

#[test]
fn softmax_rejects_bad_input() {
    assert!(stable_softmax(&[], 1.0).is_err());
    assert!(stable_softmax(&[1.0, f64::NAN], 1.0).is_err());
    assert!(stable_softmax(&[1.0], 0.0).is_err());
    assert!(stable_softmax(&[1.0], -0.5).is_err());
}

#[test]
fn cosine_self_orthogonal_and_diagonal() {
    let v = vec![0.3, -1.2, 2.5];
    assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
    assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
}

#[test]
fn cosine_rejects_degenerate_vectors() {
    let err = cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::DegenerateVector { .. }));
    let err = cosine(&[1.0, 0.0], &[1e-13, 0.0]).unwrap_err();
    assert!(matches!(err, Error::DegenerateVector { .. }));
}

#[test]
fn gaussian_zero_std_is_constant() {
    let mut rng = Rng::from_seed(1);
    assert_eq!(
        gaussian(&mut rng, 3, 5.0, 0.0).unwrap(),
        vec![5.0, 5.0, 5.0]
    );
}

#[test]
fn gaussian_is_reproducible_from_seed() {
    let a = gaussian(&mut Rng::from_seed(7), 64, 1.0, 2.0).unwrap();
    let b = gaussian(&mut Rng::from_seed(7), 64, 1.0, 2.0).unwrap();
    assert_eq!(a, b);
    let c = gaussian(&mut Rng::substream(7, 1), 64, 1.0, 2.0).unwrap();
    assert_ne!(a, c, "distinct streams should differ");
}

#[test]
fn gaussian_sample_moments() {
    let n = 100_000;
    let (mean, std) = (2.0, 3.0);
    let draws = gaussian(&mut Rng::from_seed(99), n, mean, std).unwrap();
    let m: f64 = draws.iter().sum::<f64>() / n as f64;
    let var: f64 = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let se_mean = std / (n as f64).sqrt();
    let se_std = std / (2.0 * n as f64).sqrt();
    assert!((m - mean).abs() < 3.0 * se_mean, "mean {m} off");
    assert!((var.sqrt() - std).abs() < 3.0 * se_std, "std {} off", var.sqrt());
}

#[test]
fn choose_distinct_is_distinct_and_in_range() {
    let mut rng = Rng::from_seed(5);
    let picks = rng.choose_distinct(10, 10);
    let mut sorted = picks.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn matmul_agrees_with_naive_oracle(
        m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..1000
    ) {
        let mut rng = Rng::from_seed(seed);
        let a = Matrix::from_vec(m, k, gaussian(&mut rng, m * k, 0.0, 300.0).unwrap()).unwrap();
        let b = Matrix::from_vec(k, n, gaussian(&mut rng, k * n, 0.0, 300.0).unwrap()).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = matmul_naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant(
        scores in proptest::collection::vec(-5.0f64..5.0, 1..20),
        tau in 0.05f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let w = stable_softmax(&scores, tau).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));

        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let w2 = stable_softmax(&shifted, tau).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        v in proptest::collection::vec(-4.0f64..4.0, 2..12),
        alpha in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::from_seed(seed);
        let w = gaussian(&mut rng, v.len(), 0.0, 1.0).unwrap();
        prop_assume!(norm(&v) > 1e-6 && norm(&w) > 1e-6);
        let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let c1 = cosine(&v, &w).unwrap();
        let c2 = cosine(&scaled, &w).unwrap();
        prop_assert!((c1 - c2).abs() <= 1e-12);
        prop_assert!(c1.abs() <= 1.0 + 1e-12);
    }
}

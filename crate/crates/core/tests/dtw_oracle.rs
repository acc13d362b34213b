use atg_core::dtw::{dtw_distance, dtw_series, dtw_series_banded, Series};
use atg_core::entropy::Segment;
use atg_core::dtw::pairwise_similarity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Minimum over every monotone warping path, enumerated recursively.
fn brute(x: &[f64], y: &[f64]) -> f64 {
    fn walk(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (x[i] - y[j]).abs();
        if i + 1 == x.len() && j + 1 == y.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < x.len() {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < y.len() {
            walk(x, y, i, j + 1, acc, best);
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            walk(x, y, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

fn int_series(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(-5..=5) as f64).collect()
}

#[test]
fn matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..60 {
        let x = int_series(&mut rng, 8);
        let y = int_series(&mut rng, 8);
        let d = dtw_series(&Series::univariate(&x), &Series::univariate(&y)).unwrap();
        assert_eq!(d, brute(&x, &y), "{x:?} {y:?}");
    }
}

#[test]
fn band_never_below_exact_and_full_band_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let x = int_series(&mut rng, 15);
        let y = int_series(&mut rng, 15);
        let (sx, sy) = (Series::univariate(&x), Series::univariate(&y));
        let exact = dtw_series(&sx, &sy).unwrap();
        let r = x.len().abs_diff(y.len()) + rng.random_range(0..3);
        assert!(dtw_series_banded(&sx, &sy, r).unwrap() >= exact);
        assert_eq!(dtw_series_banded(&sx, &sy, x.len().max(y.len())).unwrap(), exact);
    }
}

#[test]
fn multichannel_uses_euclidean_cost() {
    let a = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let b = vec![vec![3.0, 3.0], vec![4.0, 4.0]];
    assert_eq!(dtw_distance(&a, &b).unwrap(), 10.0);
}

#[test]
fn similarity_matrix_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let segs: Vec<Segment> = (0..7)
        .map(|k| Segment { values: vec![(0..10).map(|_| rng.random::<f64>()).collect()], start_index: k * 5 })
        .collect();
    let m = pairwise_similarity(&segs, None).unwrap();
    for i in 0..7 {
        assert_eq!(m.get(i, i), 1.0);
        for j in 0..7 {
            assert_eq!(m.get(i, j), m.get(j, i));
            assert!(m.get(i, j) > 0.0 && m.get(i, j) <= 1.0);
        }
    }
}

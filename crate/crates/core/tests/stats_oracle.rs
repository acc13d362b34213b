//! Welch and two-sample KS against reference values computed with scipy
//! (`ttest_ind(equal_var=False)`, and `kstwobign.sf` on the KS statistic).

use atg_core::eval::stats::{ks_two_sample, welch_t_test};

const X: [f64; 25] = [
    0.0342, 1.3597, 1.2247, -0.5103, -0.298, -0.5274, 0.5697, -0.0561, 0.7469, -1.8473, 1.5665, -0.0964, 0.6804,
    -0.1366, -0.3791, 0.4631, 0.8245, -0.2025, -0.1528, 0.6857, -0.8703, -1.5144, 0.395, -0.6706, -1.9203,
];

const Y: [f64; 31] = [
    -0.9839, -0.3949, -1.6284, -2.1372, 0.4623, 1.9253, 0.0037, -0.8641, 1.0545, 1.6193, -0.11, 1.3259, 2.1729,
    0.0482, -0.983, 0.991, 0.8208, 2.268, -1.7838, -0.7247, -1.0249, -2.5478, 0.6149, 1.2973, -0.8559, 2.7556,
    1.7973, 1.4665, 1.0829, 2.0246, -1.8644,
];

#[test]
fn welch_matches_reference() {
    let r = welch_t_test(&X, &Y).unwrap();
    assert!((r.t - -0.864689199692596).abs() < 1e-12, "t = {}", r.t);
    assert!((r.p_value - 0.3912547052957478).abs() < 1e-9, "p = {}", r.p_value);
    let swapped = welch_t_test(&Y, &X).unwrap();
    assert!((swapped.t + r.t).abs() < 1e-12);
    assert!((swapped.p_value - r.p_value).abs() < 1e-12);
}

#[test]
fn ks_matches_reference() {
    let r = ks_two_sample(&X, &Y).unwrap();
    assert!((r.statistic - 0.2993548387096774).abs() < 1e-12, "D = {}", r.statistic);
    assert!((r.p_value - 0.1673264994413761).abs() < 1e-9, "p = {}", r.p_value);
}

//! Finite-difference oracle shared by unit tests.

/// Central difference of `f` with respect to each coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Asserts `|a - n| <= rtol · max(|a|, |n|)` with a small absolute floor for
/// gradients that are numerically zero.
pub fn assert_close(analytic: &[f64], numeric: &[f64], rtol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        assert!(
            (a - n).abs() <= rtol * scale + 1e-9,
            "{what}[{i}]: analytic {a} vs numeric {n}"
        );
    }
}

//! Exact per-pixel solvers for two stains.
//!
//! With only two unknowns the non-negative (optionally L1-penalized) least
//! squares problem has four possible active sets; the convex objective's
//! minimum is the best feasible KKT candidate among them.

use super::dot;

/// argmin over `c ≥ 0` of `‖od − D c‖² + lambda·(c0 + c1)`, where the
/// columns of `D` are `columns`.
pub fn nonneg_lasso_2(columns: &[[f64; 3]; 2], od: &[f64; 3], lambda: f64) -> [f64; 2] {
    let (d0, d1) = (&columns[0], &columns[1]);
    let g00 = dot(d0, d0);
    let g11 = dot(d1, d1);
    let g01 = dot(d0, d1);
    let h0 = dot(d0, od) - lambda / 2.0;
    let h1 = dot(d1, od) - lambda / 2.0;
    // objective up to a constant: cᵀGc − 2hᵀc
    let q = |c: [f64; 2]| g00 * c[0] * c[0] + 2.0 * g01 * c[0] * c[1] + g11 * c[1] * c[1] - 2.0 * (h0 * c[0] + h1 * c[1]);

    let mut best = [0.0, 0.0];
    let mut best_q = 0.0;
    let mut consider = |c: [f64; 2]| {
        let v = q(c);
        if v < best_q {
            best_q = v;
            best = c;
        }
    };
    if g00 > 0.0 && h0 > 0.0 {
        consider([h0 / g00, 0.0]);
    }
    if g11 > 0.0 && h1 > 0.0 {
        consider([0.0, h1 / g11]);
    }
    let det = g00 * g11 - g01 * g01;
    if det > 1e-14 * g00 * g11 {
        let c0 = (g11 * h0 - g01 * h1) / det;
        let c1 = (g00 * h1 - g01 * h0) / det;
        if c0 > 0.0 && c1 > 0.0 {
            consider([c0, c1]);
        }
    }
    best
}

/// Non-negative least squares fit of `od ≈ D c`.
pub fn nnls_2(columns: &[[f64; 3]; 2], od: &[f64; 3]) -> [f64; 2] {
    nonneg_lasso_2(columns, od, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::testdata::{unit, DAB, HEMATOXYLIN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(cols: &[[f64; 3]; 2], od: &[f64; 3], c: [f64; 2], lambda: f64) -> f64 {
        (0..3)
            .map(|k| {
                let r = od[k] - cols[0][k] * c[0] - cols[1][k] * c[1];
                r * r
            })
            .sum::<f64>()
            + lambda * (c[0] + c[1])
    }

    /// Projected gradient descent, run far past convergence.
    fn projected_gradient(cols: &[[f64; 3]; 2], od: &[f64; 3], lambda: f64) -> [f64; 2] {
        let g = [
            [dot(&cols[0], &cols[0]), dot(&cols[0], &cols[1])],
            [dot(&cols[0], &cols[1]), dot(&cols[1], &cols[1])],
        ];
        let h = [dot(&cols[0], od), dot(&cols[1], od)];
        let step = 0.5 / (g[0][0] + g[1][1]);
        let mut c = [0.0f64, 0.0];
        for _ in 0..20_000 {
            let grad = [
                2.0 * (g[0][0] * c[0] + g[0][1] * c[1] - h[0]) + lambda,
                2.0 * (g[1][0] * c[0] + g[1][1] * c[1] - h[1]) + lambda,
            ];
            c = [(c[0] - step * grad[0]).max(0.0), (c[1] - step * grad[1]).max(0.0)];
        }
        c
    }

    #[test]
    fn exact_mixture_recovered() {
        let cols = [unit(HEMATOXYLIN), unit(DAB)];
        let c0 = [0.37, 1.21];
        let od: [f64; 3] = std::array::from_fn(|k| cols[0][k] * c0[0] + cols[1][k] * c0[1]);
        let c = nnls_2(&cols, &od);
        assert!((c[0] - c0[0]).abs() < 1e-6 && (c[1] - c0[1]).abs() < 1e-6);
        assert_eq!(nnls_2(&cols, &[0.0; 3]), [0.0, 0.0]);
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let cols = [unit(HEMATOXYLIN), unit(DAB)];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..10_000 {
            let od = [rng.random_range(-0.2..1.5), rng.random_range(-0.2..1.5), rng.random_range(-0.2..1.5)];
            let lambda = if i % 2 == 0 { 0.0 } else { 0.1 };
            let fast = nonneg_lasso_2(&cols, &od, lambda);
            assert!(fast[0] >= 0.0 && fast[1] >= 0.0);
            if i < 300 {
                let slow = projected_gradient(&cols, &od, lambda);
                let (fo, so) = (objective(&cols, &od, fast, lambda), objective(&cols, &od, slow, lambda));
                assert!(fo <= so + 1e-9, "{od:?}: {fo} vs {so}");
            }
            // when the unconstrained solution is feasible the residuals agree
            if lambda == 0.0 {
                let g00 = dot(&cols[0], &cols[0]);
                let g11 = dot(&cols[1], &cols[1]);
                let g01 = dot(&cols[0], &cols[1]);
                let (h0, h1) = (dot(&cols[0], &od), dot(&cols[1], &od));
                let det = g00 * g11 - g01 * g01;
                let ls = [(g11 * h0 - g01 * h1) / det, (g00 * h1 - g01 * h0) / det];
                let ls_res = objective(&cols, &od, ls, 0.0);
                let nn_res = objective(&cols, &od, fast, 0.0);
                assert!(nn_res >= ls_res - 1e-12);
                if ls[0] >= 0.0 && ls[1] >= 0.0 {
                    assert!(nn_res <= ls_res + 1e-9);
                }
            }
        }
    }
}

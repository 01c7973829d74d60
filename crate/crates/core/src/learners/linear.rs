//! Weighted least squares with optional ridge or lasso penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest-to-largest singular value ratio below which a design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    #[default]
    None,
    /// Adds `alpha * ||theta||_2^2` to the weighted squared loss.
    L2 { alpha: f64 },
    /// Lasso on the normalized loss `(1 / 2W) * sum w_i r_i^2 + alpha * ||theta||_1`,
    /// with `W = sum w_i` (the scikit-learn convention for `alpha`).
    L1 { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub penalty: Penalty,
    /// Coordinate-descent sweeps used (lasso only).
    pub sweeps: Option<usize>,
}

impl LinearModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.coef.iter().zip(row).map(|(c, v)| c * v).sum()
    }
}

/// Weighted linear regression with a configurable penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegression {
    pub penalty: Penalty,
    /// Column left out of the penalty (typically the intercept).
    pub unpenalized_column: Option<usize>,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LinearRegression {
    fn default() -> Self {
        LinearRegression {
            penalty: Penalty::None,
            unpenalized_column: None,
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

impl LinearRegression {
    pub fn new(penalty: Penalty) -> Self {
        LinearRegression {
            penalty,
            ..Default::default()
        }
    }

    pub fn with_unpenalized(mut self, column: Option<usize>) -> Self {
        self.unpenalized_column = column;
        self
    }

    pub fn fit(
        &self,
        design: &DMatrix<f64>,
        target: &[f64],
        weights: &[f64],
    ) -> Result<LinearModel> {
        let (n, p) = design.shape();
        if target.len() != n || weights.len() != n {
            return Err(Error::invalid(format!(
                "design has {n} rows, target {} and weights {}",
                target.len(),
                weights.len()
            )));
        }
        if p == 0 {
            return Err(Error::invalid("design has no columns"));
        }
        if design.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite design or target entry"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if let Some(c) = self.unpenalized_column {
            if c >= p {
                return Err(Error::invalid(format!("unpenalized column {c} >= {p}")));
            }
        }
        match self.penalty {
            Penalty::None => solve_unpenalized(design, target, weights),
            Penalty::L2 { alpha } => {
                check_alpha(alpha)?;
                self.solve_ridge(design, target, weights, alpha)
            }
            Penalty::L1 { alpha } => {
                check_alpha(alpha)?;
                self.solve_lasso(design, target, weights, alpha)
            }
        }
    }

    fn solve_ridge(
        &self,
        design: &DMatrix<f64>,
        target: &[f64],
        weights: &[f64],
        alpha: f64,
    ) -> Result<LinearModel> {
        let (mut gram, rhs) = weighted_gram(design, target, weights);
        let p = gram.nrows();
        for j in 0..p {
            if Some(j) != self.unpenalized_column {
                gram[(j, j)] += alpha;
            }
        }
        let coef = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => return Err(Error::RankDeficient { ratio: 0.0 }),
        };
        Ok(LinearModel {
            coef: coef.iter().copied().collect(),
            penalty: self.penalty,
            sweeps: None,
        })
    }

    fn solve_lasso(
        &self,
        design: &DMatrix<f64>,
        target: &[f64],
        weights: &[f64],
        alpha: f64,
    ) -> Result<LinearModel> {
        let (n, p) = design.shape();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("all weights are zero"));
        }
        // Per-column curvature (1/W) * sum w x^2.
        let curvature: Vec<f64> = (0..p)
            .map(|j| {
                design
                    .column(j)
                    .iter()
                    .zip(weights)
                    .map(|(x, w)| w * x * x)
                    .sum::<f64>()
                    / total
            })
            .collect();
        let mut coef = vec![0.0; p];
        let mut resid: Vec<f64> = target.to_vec();
        let mut sweeps = 0;
        while sweeps < self.max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for j in 0..p {
                if curvature[j] == 0.0 {
                    continue;
                }
                let col = design.column(j);
                let old = coef[j];
                let mut rho = 0.0;
                for i in 0..n {
                    rho += weights[i] * col[i] * (resid[i] + col[i] * old);
                }
                rho /= total;
                let new = if Some(j) == self.unpenalized_column {
                    rho / curvature[j]
                } else {
                    soft_threshold(rho, alpha) / curvature[j]
                };
                let delta = new - old;
                if delta != 0.0 {
                    for i in 0..n {
                        resid[i] -= col[i] * delta;
                    }
                    coef[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            if max_change < self.tol {
                break;
            }
        }
        if sweeps == self.max_sweeps {
            log::warn!("lasso coordinate descent hit the {sweeps}-sweep cap");
        }
        Ok(LinearModel {
            coef,
            penalty: self.penalty,
            sweeps: Some(sweeps),
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "penalty alpha {alpha} must be >= 0"
        )));
    }
    Ok(())
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn weighted_gram(
    design: &DMatrix<f64>,
    target: &[f64],
    weights: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = design.shape();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            let wa = w * design[(i, a)];
            rhs[a] += wa * target[i];
            for b in a..p {
                gram[(a, b)] += wa * design[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    (gram, rhs)
}

fn solve_unpenalized(
    design: &DMatrix<f64>,
    target: &[f64],
    weights: &[f64],
) -> Result<LinearModel> {
    let (n, p) = design.shape();
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < p {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    // Solve the row-scaled problem sqrt(W) X theta = sqrt(W) t by SVD.
    let mut scaled = design.clone();
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        let s = weights[i].sqrt();
        for j in 0..p {
            scaled[(i, j)] *= s;
        }
        rhs[i] = s * target[i];
    }
    let svd = scaled.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let ratio = if max_sv > 0.0 { min_sv / max_sv } else { 0.0 };
    if ratio < RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    let coef = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::invalid(format!("svd solve failed: {e}")))?;
    Ok(LinearModel {
        coef: coef.iter().copied().collect(),
        penalty: Penalty::None,
        sweeps: None,
    })
}

/// Fits a weighted linear model with no special unpenalized column.
pub fn fit_linear(
    design: &DMatrix<f64>,
    target: &[f64],
    weights: &[f64],
    penalty: Penalty,
) -> Result<LinearModel> {
    LinearRegression::new(penalty).fit(design, target, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn intercept_only_mean() {
        let m = fit_linear(
            &mat(&[&[1.0], &[1.0]]),
            &[1.0, 3.0],
            &[1.0, 1.0],
            Penalty::None,
        )
        .unwrap();
        assert_abs_diff_eq!(m.coef[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_fit() {
        let m = fit_linear(
            &mat(&[&[1.0], &[2.0]]),
            &[2.0, 4.0],
            &[1.0, 1.0],
            Penalty::None,
        )
        .unwrap();
        assert_abs_diff_eq!(m.coef[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_three_by_two_matches_hand_solved_normal_equations() {
        // X^T W X = [[4, 4], [4, 6]], X^T W t = [9, 12]  =>  theta = [0.75, 1.5].
        let design = mat(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let m = fit_linear(&design, &[1.0, 2.0, 4.0], &[1.0, 2.0, 1.0], Penalty::None).unwrap();
        assert_abs_diff_eq!(m.coef[0], 0.75, epsilon = 1e-10);
        assert_abs_diff_eq!(m.coef[1], 1.5, epsilon = 1e-10);
    }

    #[test]
    fn singular_design_is_rank_deficient() {
        let design = mat(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let err = fit_linear(&design, &[1.0, 2.0, 3.0], &[1.0; 3], Penalty::None).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        // Zero weights leave too few informative rows.
        let design = mat(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let err =
            fit_linear(&design, &[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0], Penalty::None).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        // A small ridge recovers.
        assert!(fit_linear(
            &design,
            &[1.0, 2.0, 3.0],
            &[1.0, 0.0, 0.0],
            Penalty::L2 { alpha: 1e-3 }
        )
        .is_ok());
    }

    #[test]
    fn rejects_non_finite_and_negative_weights() {
        let design = mat(&[&[1.0], &[1.0]]);
        assert!(matches!(
            fit_linear(&design, &[1.0, f64::NAN], &[1.0, 1.0], Penalty::None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            fit_linear(&design, &[1.0, 2.0], &[1.0, -1.0], Penalty::None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ridge_leaves_intercept_unpenalized() {
        // With a huge penalty the slope vanishes and the intercept becomes the mean.
        let design = mat(&[&[1.0, -1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let m = LinearRegression::new(Penalty::L2 { alpha: 1e9 })
            .with_unpenalized(Some(0))
            .fit(&design, &[1.0, 2.0, 6.0], &[1.0; 3])
            .unwrap();
        assert_abs_diff_eq!(m.coef[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m.coef[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn lasso_orthogonal_design_soft_thresholds() {
        // Orthonormal columns under the (1/2W) loss: theta_j = S(x_j^T t / W, alpha) / (x_j^T x_j / W).
        let design = mat(&[&[1.0, 1.0], &[1.0, -1.0], &[-1.0, 1.0], &[-1.0, -1.0]]);
        let target = [3.0, 1.0, -1.0, -3.0];
        // x0^T t / 4 = 2, x1^T t / 4 = 1, curvature 1.
        let m = fit_linear(&design, &target, &[1.0; 4], Penalty::L1 { alpha: 0.5 }).unwrap();
        assert_abs_diff_eq!(m.coef[0], 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(m.coef[1], 0.5, epsilon = 1e-7);
        let m = fit_linear(&design, &target, &[1.0; 4], Penalty::L1 { alpha: 1.5 }).unwrap();
        assert_abs_diff_eq!(m.coef[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lasso_at_zero_alpha_matches_least_squares() {
        let design = mat(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 5.0]]);
        let target = [1.0, 2.0, 4.0, 3.0];
        let w = [1.0, 2.0, 1.0, 0.5];
        let ols = fit_linear(&design, &target, &w, Penalty::None).unwrap();
        let lasso = fit_linear(&design, &target, &w, Penalty::L1 { alpha: 0.0 }).unwrap();
        for (a, b) in ols.coef.iter().zip(&lasso.coef) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    fn problem() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>, Vec<f64>)> {
        (4usize..30, 1usize..4).prop_flat_map(|(n, p)| {
            (
                proptest::collection::vec(-3.0f64..3.0, n * p),
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(0.1f64..3.0, n),
            )
                .prop_map(move |(d, t, w)| (DMatrix::from_vec(n, p, d), t, w))
        })
    }

    proptest! {
        #[test]
        fn weight_scaling_leaves_coefficients_unchanged((design, target, w) in problem(), c in 0.01f64..100.0) {
            let base = match fit_linear(&design, &target, &w, Penalty::None) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            let scaled_w: Vec<f64> = w.iter().map(|v| v * c).collect();
            let scaled = fit_linear(&design, &target, &scaled_w, Penalty::None).unwrap();
            for (a, b) in base.coef.iter().zip(&scaled.coef) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn equal_weights_match_ordinary_least_squares((design, target, _w) in problem(), c in 0.5f64..2.0) {
            let n = target.len();
            let weighted = match fit_linear(&design, &target, &vec![c; n], Penalty::None) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            let ols = design.clone().svd(true, true).solve(&DVector::from_column_slice(&target), 0.0).unwrap();
            for (a, b) in weighted.coef.iter().zip(ols.iter()) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn vanishing_ridge_converges_to_least_squares((design, target, w) in problem()) {
            let base = match fit_linear(&design, &target, &w, Penalty::None) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            // Keep the check to well-conditioned draws so 1e-10 ridge is a small perturbation.
            let svd = design.clone().svd(false, false);
            prop_assume!(svd.singular_values.min() / svd.singular_values.max() > 1e-3);
            let ridge = fit_linear(&design, &target, &w, Penalty::L2 { alpha: 1e-10 }).unwrap();
            for (a, b) in base.coef.iter().zip(&ridge.coef) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}

//! Penalized least squares for mixed APC designs.
//!
//! The estimate minimizes `(y - Q theta)'(y - Q theta) + theta' D theta` with
//! `D` zero on fixed-effect columns and `lambda_b` on the columns of random
//! block `b`. A block with `lambda = +inf` is removed from the system and its
//! coefficients are exactly zero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::design::{DesignBundle, Factor, Parameterization};
use crate::effects::{decompose_effect, EffectDecomposition};
use crate::error::{ApcError, Result};

/// Largest accepted condition estimate of the penalized normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Variance ratios `sigma_e^2 / sigma_b^2` per random block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltySpec {
    lambdas: Vec<(Factor, f64)>,
}

impl PenaltySpec {
    pub fn new(lambdas: Vec<(Factor, f64)>) -> Result<Self> {
        for &(f, l) in &lambdas {
            if l.is_nan() || l <= 0.0 {
                return Err(ApcError::InvalidArgument(format!(
                    "lambda for the {f} block must be positive (got {l}); use the fixed-effect path for lambda = 0"
                )));
            }
        }
        Ok(PenaltySpec { lambdas })
    }

    /// Same ratio on every random block of `design`.
    pub fn uniform(design: &DesignBundle, lambda: f64) -> Result<Self> {
        Self::new(design.re_blocks.iter().map(|b| (b.factor, lambda)).collect())
    }

    pub fn lambda(&self, factor: Factor) -> Option<f64> {
        self.lambdas.iter().find(|(f, _)| *f == factor).map(|(_, l)| *l)
    }

    pub fn lambdas(&self) -> &[(Factor, f64)] {
        &self.lambdas
    }

    /// Diagonal of `D` over the combined columns of `design`. Infinite ratios
    /// are kept as `inf`; [`solve_penalized`] drops those columns.
    pub fn diagonal(&self, design: &DesignBundle) -> Result<DVector<f64>> {
        let mut d = DVector::zeros(design.n_columns());
        for (factor, range) in design.re_ranges() {
            let l = self
                .lambda(factor)
                .ok_or_else(|| ApcError::InvalidArgument(format!("no lambda given for the random {factor} block")))?;
            d.rows_mut(range.start, range.len()).fill(l);
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectBlock {
    pub factor: Factor,
    pub random: bool,
    /// One value per level (sum-to-zero blocks include the omitted level).
    pub values: Vec<f64>,
    pub decomposition: EffectDecomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub theta: Vec<f64>,
    pub intercept: f64,
    pub blocks: Vec<EffectBlock>,
}

impl EffectEstimate {
    pub fn block(&self, factor: Factor) -> Option<&EffectBlock> {
        self.blocks.iter().find(|b| b.factor == factor)
    }

    /// Maps a coefficient vector over the combined columns of `design` to
    /// per-level effect values.
    pub fn from_theta(design: &DesignBundle, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != design.n_columns() {
            return Err(ApcError::DimensionMismatch(format!(
                "theta has length {}, design has {} columns",
                theta.len(),
                design.n_columns()
            )));
        }
        if design.parameterization == Parameterization::OrthoPoly {
            return Err(ApcError::InvalidArgument(
                "effect values are defined for sum-to-zero / indicator coding only".into(),
            ));
        }
        let mut blocks = Vec::new();
        for (factor, range) in &design.fe_blocks {
            let coef = theta.rows(range.start, range.len());
            let mut values: Vec<f64> = coef.iter().copied().collect();
            values.push(-coef.sum());
            blocks.push(make_block(*factor, false, values)?);
        }
        for (factor, range) in design.re_ranges() {
            let values = theta.rows(range.start, range.len()).iter().copied().collect();
            blocks.push(make_block(factor, true, values)?);
        }
        blocks.sort_by_key(|b| b.factor);
        Ok(EffectEstimate {
            intercept: theta[0],
            theta: theta.iter().copied().collect(),
            blocks,
        })
    }
}

fn make_block(factor: Factor, random: bool, values: Vec<f64>) -> Result<EffectBlock> {
    let decomposition = decompose_effect(factor.name(), &values)?;
    Ok(EffectBlock {
        factor,
        random,
        values,
        decomposition,
    })
}

fn check_dims(q: &DMatrix<f64>, d: &DVector<f64>, y: Option<&DVector<f64>>) -> Result<()> {
    if d.len() != q.ncols() {
        return Err(ApcError::DimensionMismatch(format!(
            "penalty diagonal has length {}, Q has {} columns",
            d.len(),
            q.ncols()
        )));
    }
    if let Some(y) = y {
        if y.len() != q.nrows() {
            return Err(ApcError::DimensionMismatch(format!(
                "y has length {}, Q has {} rows",
                y.len(),
                q.nrows()
            )));
        }
    }
    Ok(())
}

/// Cholesky factor of `Q'Q + diag(d)` with a condition check.
///
/// The condition estimate is `(max L_ii / min L_ii)^2`, a lower bound on the
/// 2-norm condition number that is free once the factor exists.
pub fn penalized_factor(q: &DMatrix<f64>, d: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    check_dims(q, d, None)?;
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ApcError::InvalidArgument(
            "penalty diagonal must be finite and nonnegative".into(),
        ));
    }
    let mut normal = q.tr_mul(q);
    for (k, dk) in d.iter().enumerate() {
        normal[(k, k)] += dk;
    }
    let chol = Cholesky::new(normal).ok_or(ApcError::SingularSystem {
        condition: f64::INFINITY,
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
        (lo.min(v.abs()), hi.max(v.abs()))
    });
    let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(ApcError::SingularSystem { condition });
    }
    Ok(chol)
}

/// `(Q'Q + D)^{-1} Q'y` via a Cholesky factorization.
pub fn penalized_normal_solve(q: &DMatrix<f64>, d: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(q, d, Some(y))?;
    let chol = penalized_factor(q, d)?;
    Ok(chol.solve(&q.tr_mul(y)))
}

/// Influence matrix `M = (Q'Q + D)^{-1} Q'`, so that `theta_hat = M y`.
pub fn influence_matrix(q: &DMatrix<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>> {
    let chol = penalized_factor(q, d)?;
    Ok(chol.solve(&q.transpose()))
}

/// `(y - Q theta)'(y - Q theta) + theta' D theta`.
pub fn penalized_rss(q: &DMatrix<f64>, d: &DVector<f64>, theta: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    check_dims(q, d, Some(y))?;
    if theta.len() != q.ncols() {
        return Err(ApcError::DimensionMismatch(format!(
            "theta has length {}, Q has {} columns",
            theta.len(),
            q.ncols()
        )));
    }
    let resid = y - q * theta;
    let penalty: f64 = theta.iter().zip(d.iter()).map(|(t, dk)| dk * t * t).sum();
    Ok(resid.norm_squared() + penalty)
}

/// Penalized fit of `design` at the given variance ratios.
pub fn solve_penalized(design: &DesignBundle, penalty: &PenaltySpec, y: &DVector<f64>) -> Result<EffectEstimate> {
    if y.len() != design.n_rows() {
        return Err(ApcError::DimensionMismatch(format!(
            "y has length {}, design has {} rows",
            y.len(),
            design.n_rows()
        )));
    }
    let full_d = penalty.diagonal(design)?;
    let active: Vec<usize> = (0..design.n_columns()).filter(|&k| full_d[k].is_finite()).collect();
    let q = design.combined();
    let theta = if active.len() == q.ncols() {
        penalized_normal_solve(&q, &full_d, y)?
    } else {
        let q_active = q.select_columns(active.iter());
        let d_active = full_d.select_rows(active.iter());
        let sub = penalized_normal_solve(&q_active, &d_active, y)?;
        let mut theta = DVector::zeros(q.ncols());
        for (value, &k) in sub.iter().zip(&active) {
            theta[k] = *value;
        }
        theta
    };
    EffectEstimate::from_theta(design, theta)
}

/// Moves the level and linear parts of a random effect into the fixed
/// intercept and the age/period linear coefficients.
///
/// `beta_star` is ordered `(b0, b_LA, b_LP, nonlinear...)` over the columns
/// `(1, A_L, P_L, ...)`; `u_star` is `(u0, u_L, nonlinear...)` over the
/// orthonormal polynomial columns of a cohort block with `c` levels. The fit
/// is unchanged because the cohort level column is `1 / sqrt(c)` times the
/// intercept and `C_L = P_L - A_L`.
pub fn constraint_transfer(
    beta_star: &DVector<f64>,
    u_star: &DVector<f64>,
    c: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if beta_star.len() < 3 || u_star.len() < 2 {
        return Err(ApcError::DimensionMismatch(format!(
            "need at least 3 fixed and 2 random components, got {} and {}",
            beta_star.len(),
            u_star.len()
        )));
    }
    if c < 2 {
        return Err(ApcError::DimensionTooSmall {
            what: "c",
            value: c,
            min: 2,
        });
    }
    let k = 1.0 / (c as f64).sqrt();
    let q = crate::orthopoly::linear_scale(c);
    let (u0, ul) = (u_star[0], u_star[1]);

    let mut beta = beta_star.clone();
    beta[0] += k * u0;
    beta[1] -= q * ul;
    beta[2] += q * ul;
    let mut u = u_star.clone();
    u[0] = 0.0;
    u[1] = 0.0;
    Ok((beta, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{apc_model, build_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cohort_model(a: usize, p: usize) -> DesignBundle {
        apc_model(&build_grid(a, p).unwrap(), &[Factor::Cohort]).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_data_gives_zero_estimate() {
        let d = cohort_model(3, 3);
        let pen = PenaltySpec::uniform(&d, 1.0).unwrap();
        let est = solve_penalized(&d, &pen, &DVector::zeros(9)).unwrap();
        assert!(est.theta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cohort_level_and_slope_vanish() {
        let d = cohort_model(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for exp in -3..=3 {
            let pen = PenaltySpec::uniform(&d, 10f64.powi(exp)).unwrap();
            for _ in 0..5 {
                let y = random_vec(&mut rng, 9) * 10.0;
                let est = solve_penalized(&d, &pen, &y).unwrap();
                let c = &est.block(Factor::Cohort).unwrap().decomposition;
                assert!(c.level.abs() < 1e-9, "level {}", c.level);
                assert!(c.linear_slope.abs() < 1e-9, "slope {}", c.linear_slope);
            }
        }
    }

    /// Minimizes the penalized criterion through the augmented least-squares
    /// system `[Q; sqrt(D)] theta ~ [y; 0]` solved by QR.
    fn augmented_minimizer(q: &DMatrix<f64>, d: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let (n, k) = q.shape();
        let mut aug = DMatrix::zeros(n + k, k);
        aug.rows_mut(0, n).copy_from(q);
        for j in 0..k {
            aug[(n + j, j)] = d[j].sqrt();
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(y);
        let rhs = DMatrix::from_column_slice(n + k, 1, rhs.as_slice());
        crate::design::least_squares(&aug, &rhs).unwrap().column(0).into_owned()
    }

    #[test]
    fn matches_augmented_pseudoinverse_oracle() {
        let design = cohort_model(4, 3);
        let pen = PenaltySpec::uniform(&design, 10.0).unwrap();
        let q = design.combined();
        let d = pen.diagonal(&design).unwrap();
        for hot in 0..12 {
            let mut y = DVector::zeros(12);
            y[hot] = 1.0;
            let est = solve_penalized(&design, &pen, &y).unwrap();
            let oracle = augmented_minimizer(&q, &d, &y);
            let diff = (DVector::from_vec(est.theta.clone()) - oracle).amax();
            assert!(diff < 1e-8, "one-hot {hot}: {diff}");
        }
    }

    #[test]
    fn influence_reproduces_solve() {
        let design = cohort_model(3, 3);
        let pen = PenaltySpec::uniform(&design, 1.0).unwrap();
        let q = design.combined();
        let d = pen.diagonal(&design).unwrap();
        let m = influence_matrix(&q, &d).unwrap();
        assert_eq!(m.shape(), (10, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_vec(&mut rng, 10);
        let y = &q * &theta;
        let via_m = &m * &y;
        let via_solve = solve_penalized(&design, &pen, &y).unwrap();
        assert!((via_m - DVector::from_vec(via_solve.theta)).amax() < 1e-12);
    }

    #[test]
    fn influence_weights_vanish_3x3() {
        let design = cohort_model(3, 3);
        let q = design.combined();
        let d = PenaltySpec::uniform(&design, 1.0).unwrap().diagonal(&design).unwrap();
        let m = influence_matrix(&q, &d).unwrap();
        let c = 5;
        let x = crate::orthopoly::centered_index(c);
        let beta = &x / x.norm_squared();
        let alpha_m = m.rows(5, c).row_sum() / c as f64;
        let beta_m = beta.transpose() * m.rows(5, c);
        assert!(alpha_m.amax() < 1e-9);
        assert!(beta_m.amax() < 1e-9);
    }

    #[test]
    fn influence_columnwise_agrees() {
        let design = cohort_model(5, 7);
        let q = design.combined();
        let d = PenaltySpec::uniform(&design, 100.0).unwrap().diagonal(&design).unwrap();
        let m = influence_matrix(&q, &d).unwrap();
        for row in 0..q.nrows() {
            let mut e = DVector::zeros(q.nrows());
            e[row] = 1.0;
            let col = penalized_normal_solve(&q, &d, &e).unwrap();
            assert!((m.column(row) - col).amax() < 1e-10);
        }
    }

    #[test]
    fn rss_at_zero_theta() {
        let design = cohort_model(3, 3);
        let q = design.combined();
        let d = PenaltySpec::uniform(&design, 2.0).unwrap().diagonal(&design).unwrap();
        let y = DVector::from_fn(9, |i, _| i as f64 - 3.0);
        let v = penalized_rss(&q, &d, &DVector::zeros(10), &y).unwrap();
        assert_eq!(v, y.norm_squared());
    }

    #[test]
    fn rss_minimized_at_estimate() {
        let design = cohort_model(4, 4);
        let pen = PenaltySpec::uniform(&design, 0.5).unwrap();
        let q = design.combined();
        let d = pen.diagonal(&design).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_vec(&mut rng, 16);
        let theta = DVector::from_vec(solve_penalized(&design, &pen, &y).unwrap().theta);
        let best = penalized_rss(&q, &d, &theta, &y).unwrap();
        for _ in 0..100 {
            let perturbed = &theta + random_vec(&mut rng, theta.len()) * 0.1;
            assert!(best <= penalized_rss(&q, &d, &perturbed, &y).unwrap());
        }
    }

    #[test]
    fn rss_matches_scalar_loop() {
        let design = cohort_model(3, 3);
        let q = design.combined();
        let d = PenaltySpec::uniform(&design, 3.0).unwrap().diagonal(&design).unwrap();
        let theta = DVector::from_fn(10, |k, _| 0.1 * k as f64 - 0.3);
        let y = DVector::from_fn(9, |i, _| (i as f64).sin());
        let mut expected = 0.0;
        for i in 0..9 {
            let mut fit = 0.0;
            for k in 0..10 {
                fit += q[(i, k)] * theta[k];
            }
            expected += (y[i] - fit) * (y[i] - fit);
        }
        for k in 0..10 {
            expected += d[k] * theta[k] * theta[k];
        }
        let v = penalized_rss(&q, &d, &theta, &y).unwrap();
        assert!((v - expected).abs() < 1e-12 * expected);
        assert!(penalized_rss(&q, &d, &DVector::zeros(9), &y).is_err());
    }

    #[test]
    fn huge_lambda_shrinks_random_block() {
        let design = apc_model(&build_grid(6, 5).unwrap(), &[Factor::Period, Factor::Cohort]).unwrap();
        let pen = PenaltySpec::uniform(&design, 1e9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_vec(&mut rng, 30);
        let est = solve_penalized(&design, &pen, &y).unwrap();
        for b in est.blocks.iter().filter(|b| b.random) {
            assert!(b.values.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn infinite_lambda_zeroes_block_exactly() {
        let design = apc_model(&build_grid(6, 5).unwrap(), &[Factor::Period, Factor::Cohort]).unwrap();
        let pen = PenaltySpec::new(vec![(Factor::Period, f64::INFINITY), (Factor::Cohort, 0.1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_vec(&mut rng, 30);
        let est = solve_penalized(&design, &pen, &y).unwrap();
        assert!(est.block(Factor::Period).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(est.block(Factor::Cohort).unwrap().values.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_lambda_rejected() {
        assert!(PenaltySpec::new(vec![(Factor::Cohort, 0.0)]).is_err());
        assert!(PenaltySpec::new(vec![(Factor::Cohort, -1.0)]).is_err());
    }

    #[test]
    fn unpenalized_rank_deficient_system_is_singular() {
        let design = cohort_model(3, 3);
        let q = design.combined();
        let err = influence_matrix(&q, &DVector::zeros(10)).unwrap_err();
        assert!(matches!(err, ApcError::SingularSystem { .. }));
    }

    #[test]
    fn transfer_with_zero_level_and_slope_is_identity() {
        let beta = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let u = DVector::from_vec(vec![0.0, 0.0, 1.5, -0.2]);
        let (b2, u2) = constraint_transfer(&beta, &u, 5).unwrap();
        assert_eq!(b2, beta);
        assert_eq!(u2, u);
    }

    #[test]
    fn transfer_level_moves_into_intercept() {
        let beta = DVector::zeros(3);
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let (b2, u2) = constraint_transfer(&beta, &u, 10).unwrap();
        assert!((b2[0] - 1.0 / 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(u2.norm(), 0.0);
    }
}

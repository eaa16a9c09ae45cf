//! Numerical diagnostics of the constraints that random-effect APC models
//! impose on the unidentified linear components.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::design::{apc_model, fe_design, re_design, ApcGrid, Factor};
use crate::error::{ApcError, Result};
use crate::exec::Execution;
use crate::orthopoly::{centered_index, orthonormal_poly_basis, reparameterize_fe, reparameterize_re};
use crate::penalized::{constraint_transfer, influence_matrix, PenaltySpec};

pub const SWEEP_LAMBDAS: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3];
pub const SWEEP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationRow {
    pub a: usize,
    pub p: usize,
    pub lambda: f64,
    /// `max |alpha'M|`: weight of the data on the random block's mean.
    pub max_abs_intercept_weight: f64,
    /// `max |beta'M|`: weight of the data on the random block's linear slope.
    pub max_abs_linear_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub re_factor: Factor,
    pub tolerance: f64,
    pub rows: Vec<VerificationRow>,
    pub overall_max_intercept: f64,
    pub overall_max_linear: f64,
    pub pass: bool,
}

impl VerificationReport {
    /// CSV with columns `a,p,lambda,linear,intercept`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,p,lambda,linear,intercept\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:.6e},{:.6e}\n",
                r.a, r.p, r.lambda, r.max_abs_linear_weight, r.max_abs_intercept_weight
            ));
        }
        out
    }
}

/// `max |alpha'M|` and `max |beta'M|` for the model with `re_factor` as the
/// only random block, where `alpha` averages and `beta` takes the
/// least-squares slope of the block's coefficients.
pub fn influence_weights(grid: &ApcGrid, re_factor: Factor, lambda: f64) -> Result<(f64, f64)> {
    let design = apc_model(grid, &[re_factor])?;
    let penalty = PenaltySpec::uniform(&design, lambda)?;
    let m = influence_matrix(&design.combined(), &penalty.diagonal(&design)?)?;
    let (_, range) = design.re_ranges().into_iter().next().expect("one random block");
    let c = range.len();
    let block = m.rows(range.start, c);
    let x = centered_index(c);
    let alpha_m = block.row_sum() / c as f64;
    let beta_m = (&x / x.norm_squared()).transpose() * block;
    Ok((alpha_m.amax(), beta_m.amax()))
}

pub fn verify_1re_sweep(
    a_range: RangeInclusive<usize>,
    p_range: RangeInclusive<usize>,
    lambdas: &[f64],
    re_factor: Factor,
    tol: f64,
    exec: Execution,
) -> Result<VerificationReport> {
    for (name, r) in [("a", &a_range), ("p", &p_range)] {
        if r.is_empty() || *r.start() < 2 || *r.end() > 30 {
            return Err(ApcError::InvalidArgument(format!(
                "{name} range {}..={} must lie within 2..=30",
                r.start(),
                r.end()
            )));
        }
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(ApcError::InvalidArgument(format!(
            "lambdas must be positive and finite: {lambdas:?}"
        )));
    }
    let triples: Vec<(usize, usize, f64)> = a_range
        .flat_map(|a| {
            p_range
                .clone()
                .flat_map(move |p| lambdas.iter().map(move |&l| (a, p, l)))
        })
        .collect();
    let results = exec.map(&triples, |&(a, p, lambda)| {
        let weights = ApcGrid::new(a, p).and_then(|g| influence_weights(&g, re_factor, lambda));
        weights
            .map(|(ai, li)| VerificationRow {
                a,
                p,
                lambda,
                max_abs_intercept_weight: ai,
                max_abs_linear_weight: li,
            })
            .map_err(|e| ApcError::SweepFailed {
                a,
                p,
                lambda,
                source: Box::new(e),
            })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let overall_max_intercept = rows.iter().map(|r| r.max_abs_intercept_weight).fold(0.0, f64::max);
    let overall_max_linear = rows.iter().map(|r| r.max_abs_linear_weight).fold(0.0, f64::max);
    Ok(VerificationReport {
        re_factor,
        tolerance: tol,
        pass: overall_max_intercept <= tol && overall_max_linear <= tol,
        rows,
        overall_max_intercept,
        overall_max_linear,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadDecomposition {
    pub a: usize,
    pub p: usize,
    pub total_sq: f64,
    pub intercept_sq: f64,
    pub age_sq: f64,
    pub period_sq: f64,
    pub cohort_residual_sq: f64,
    /// Intercept plus age share of the total.
    pub fraction_intercept_age: f64,
    pub fraction_period: f64,
    pub fraction_cohort: f64,
}

impl QuadDecomposition {
    pub fn to_csv(&self) -> String {
        format!(
            "piece,squared_length,fraction\n\
             total,{:.10},1\n\
             intercept,{:.10},{:.10}\n\
             age,{:.10},{:.10}\n\
             period,{:.10},{:.10}\n\
             cohort_residual,{:.10},{:.10}\n",
            self.total_sq,
            self.intercept_sq,
            self.intercept_sq / self.total_sq,
            self.age_sq,
            self.age_sq / self.total_sq,
            self.period_sq,
            self.period_sq / self.total_sq,
            self.cohort_residual_sq,
            self.cohort_residual_sq / self.total_sq,
        )
    }
}

/// Splits the squared length of the cohort quadratic polynomial column
/// into what the intercept, the age effect and the period effect can absorb
/// and the part only the cohort effect can carry.
pub fn quadratic_decomposition(grid: &ApcGrid) -> Result<QuadDecomposition> {
    if grid.c() < 3 {
        return Err(ApcError::DimensionTooSmall {
            what: "c",
            value: grid.c(),
            min: 3,
        });
    }
    let n = grid.n_cells();
    let quad = reparameterize_re(&re_design(grid, Factor::Cohort), grid.c())?
        .transformed
        .column(2)
        .into_owned();
    let ga = orthonormal_poly_basis(grid.a())?;
    let gp = orthonormal_poly_basis(grid.p())?;
    let age = re_design(grid, Factor::Age) * ga.basis.columns(1, grid.a() - 1);
    let period = re_design(grid, Factor::Period) * gp.basis.columns(1, grid.p() - 1);

    let k = 1 + age.ncols() + period.ncols();
    let mut x = DMatrix::zeros(n, k);
    x.column_mut(0).fill(1.0);
    x.columns_mut(1, age.ncols()).copy_from(&age);
    x.columns_mut(1 + age.ncols(), period.ncols()).copy_from(&period);
    let coef = crate::design::least_squares(&x, &DMatrix::from_column_slice(n, 1, quad.as_slice()))?;
    let coef = coef.column(0);

    let fitted_intercept = DVector::from_element(n, coef[0]);
    let fitted_age = &age * coef.rows(1, age.ncols());
    let fitted_period = &period * coef.rows(1 + age.ncols(), period.ncols());
    let resid = &quad - &fitted_intercept - &fitted_age - &fitted_period;

    let total_sq = quad.norm_squared();
    let intercept_sq = fitted_intercept.norm_squared();
    let age_sq = fitted_age.norm_squared();
    let period_sq = fitted_period.norm_squared();
    let cohort_residual_sq = resid.norm_squared();
    Ok(QuadDecomposition {
        a: grid.a(),
        p: grid.p(),
        total_sq,
        intercept_sq,
        age_sq,
        period_sq,
        cohort_residual_sq,
        fraction_intercept_age: (intercept_sq + age_sq) / total_sq,
        fraction_period: period_sq / total_sq,
        fraction_cohort: cohort_residual_sq / total_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferTrial {
    pub trial: usize,
    pub beta_star: Vec<f64>,
    pub u_star: Vec<f64>,
    /// `max |fit before - fit after| / max |fit before|`.
    pub fit_rel_diff: f64,
    /// `|(penalty before - penalty after) - (u0^2 + uL^2)|`.
    pub penalty_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferCheck {
    pub trials: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub worst_fit_rel_diff: f64,
    pub worst_penalty_error: f64,
    pub first_failure: Option<TransferTrial>,
}

pub fn transfer_trial(
    w_star: &DMatrix<f64>,
    z_star: &DMatrix<f64>,
    beta_star: &DVector<f64>,
    u_star: &DVector<f64>,
    c: usize,
) -> Result<(f64, f64)> {
    let (beta, u) = constraint_transfer(beta_star, u_star, c)?;
    let before = w_star * beta_star + z_star * u_star;
    let after = w_star * &beta + z_star * &u;
    let fit_rel = (&before - &after).amax() / before.amax().max(f64::MIN_POSITIVE);
    let drop = u_star.norm_squared() - u.norm_squared();
    let expected = u_star[0].powi(2) + u_star[1].powi(2);
    Ok((fit_rel, (drop - expected).abs() / expected.max(1.0)))
}

/// Draws `n_trials` standard-normal `(beta*, u*)` pairs on the polynomial
/// coding of the cohort-random model and checks that moving the cohort
/// level and slope into the fixed part leaves the fit unchanged and lowers
/// `u'u` by exactly `u0^2 + uL^2`.
pub fn transfer_property_check(grid: &ApcGrid, n_trials: usize, seed: u64) -> Result<TransferCheck> {
    const TOL: f64 = 1e-10;
    if n_trials == 0 {
        return Err(ApcError::InvalidArgument("n_trials must be at least 1".into()));
    }
    let w = fe_design(grid, &[Factor::Age, Factor::Period])?.fe;
    let w_star = reparameterize_fe(&w, grid)?.transformed;
    let z_star = reparameterize_re(&re_design(grid, Factor::Cohort), grid.c())?.transformed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> DVector<f64> {
        DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
    };
    let mut check = TransferCheck {
        trials: n_trials,
        tolerance: TOL,
        passed: true,
        worst_fit_rel_diff: 0.0,
        worst_penalty_error: 0.0,
        first_failure: None,
    };
    for trial in 0..n_trials {
        let beta_star = draw(w_star.ncols());
        let u_star = draw(z_star.ncols());
        let (fit_rel, pen_err) = transfer_trial(&w_star, &z_star, &beta_star, &u_star, grid.c())?;
        check.worst_fit_rel_diff = check.worst_fit_rel_diff.max(fit_rel);
        check.worst_penalty_error = check.worst_penalty_error.max(pen_err);
        if (fit_rel > TOL || pen_err > TOL) && check.first_failure.is_none() {
            check.passed = false;
            check.first_failure = Some(TransferTrial {
                trial,
                beta_star: beta_star.iter().copied().collect(),
                u_star: u_star.iter().copied().collect(),
                fit_rel_diff: fit_rel,
                penalty_error: pen_err,
            });
        }
    }
    Ok(check)
}

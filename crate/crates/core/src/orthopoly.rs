//! Orthonormal polynomial contrasts and level/linear/nonlinear
//! reparameterizations of APC design blocks.

use nalgebra::{DMatrix, DVector};

use crate::design::{re_design, ApcGrid, Factor};
use crate::error::{ApcError, Result};

/// Columns are the constant, linear, quadratic, ... orthonormal polynomials
/// over the equally spaced levels `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    pub n: usize,
    pub basis: DMatrix<f64>,
}

impl OrthoBasis {
    pub fn column(&self, degree: usize) -> DVector<f64> {
        self.basis.column(degree).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReparamResult {
    pub transformed: DMatrix<f64>,
    pub transform: DMatrix<f64>,
    pub component_labels: Vec<String>,
}

/// Centered level index `k - (n + 1) / 2` for `k = 1..=n`.
pub fn centered_index(n: usize) -> DVector<f64> {
    let mid = 0.5 * (n as f64 + 1.0);
    DVector::from_fn(n, |k, _| (k + 1) as f64 - mid)
}

pub fn component_name(degree: usize) -> String {
    match degree {
        0 => "level".into(),
        1 => "linear".into(),
        2 => "quadratic".into(),
        3 => "cubic".into(),
        d => format!("degree{d}"),
    }
}

/// Orthonormal polynomial basis of size `n x n`.
///
/// Each new column starts from `x * q_{d-1}` (which has the same span as the
/// next power of the centered index `x` given the earlier columns), and is
/// orthogonalized twice against all previous columns before normalizing.
/// Leading coefficients stay positive, so the linear column increases with
/// the level index.
pub fn orthonormal_poly_basis(n: usize) -> Result<OrthoBasis> {
    if n < 2 {
        return Err(ApcError::DimensionTooSmall {
            what: "n",
            value: n,
            min: 2,
        });
    }
    let x = centered_index(n);
    let mut basis = DMatrix::zeros(n, n);
    basis.column_mut(0).fill(1.0 / (n as f64).sqrt());
    for d in 1..n {
        let mut v = x.component_mul(&basis.column(d - 1));
        for _pass in 0..2 {
            for j in 0..d {
                let qj = basis.column(j);
                let proj = qj.dot(&v);
                v.axpy(-proj, &qj, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= f64::EPSILON {
            return Err(ApcError::SingularTransform(format!(
                "degree {d} column vanished for n = {n}"
            )));
        }
        basis.column_mut(d).copy_from(&(v / norm));
    }
    Ok(OrthoBasis { n, basis })
}

/// Per-cell linear columns `A_L`, `P_L`, `C_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearColumns {
    pub age: DVector<f64>,
    pub period: DVector<f64>,
    pub cohort: DVector<f64>,
}

pub fn holford_linear_columns(grid: &ApcGrid) -> LinearColumns {
    let centered = |level: usize, n: usize| level as f64 - 0.5 * n as f64 - 0.5;
    let n = grid.n_cells();
    let cells = grid.cells();
    LinearColumns {
        age: DVector::from_fn(n, |r, _| centered(cells[r].age, grid.a())),
        period: DVector::from_fn(n, |r, _| centered(cells[r].period, grid.p())),
        cohort: DVector::from_fn(n, |r, _| centered(cells[r].cohort, grid.c())),
    }
}

/// `1 / sqrt(sum_k (k - (n + 1) / 2)^2)`, the scale of the orthonormal linear
/// contrast relative to the centered index.
pub fn linear_scale(n: usize) -> f64 {
    1.0 / centered_index(n).norm()
}

/// Target columns for the fixed intercept + age + period design:
/// `(1, A_L, P_L, age nonlinear..., period nonlinear...)`.
fn fe_target(grid: &ApcGrid) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = grid.n_cells();
    let lin = holford_linear_columns(grid);
    let ga = orthonormal_poly_basis(grid.a())?;
    let gp = orthonormal_poly_basis(grid.p())?;
    let age_nl = re_design(grid, Factor::Age) * ga.basis.columns(2, grid.a() - 2);
    let period_nl = re_design(grid, Factor::Period) * gp.basis.columns(2, grid.p() - 2);

    let ncols = 3 + age_nl.ncols() + period_nl.ncols();
    let mut target = DMatrix::zeros(n, ncols);
    target.column_mut(0).fill(1.0);
    target.column_mut(1).copy_from(&lin.age);
    target.column_mut(2).copy_from(&lin.period);
    target.columns_mut(3, age_nl.ncols()).copy_from(&age_nl);
    target
        .columns_mut(3 + age_nl.ncols(), period_nl.ncols())
        .copy_from(&period_nl);

    let mut labels = vec!["intercept".to_string(), "age_linear".into(), "period_linear".into()];
    labels.extend((2..grid.a()).map(|d| format!("age_{}", component_name(d))));
    labels.extend((2..grid.p()).map(|d| format!("period_{}", component_name(d))));
    Ok((target, labels))
}

/// Rewrites the intercept + age + period fixed design `W` as `W K` whose
/// first three columns are `1`, `A_L`, `P_L` and whose remaining columns are
/// the age and period nonlinear polynomial components.
pub fn reparameterize_fe(w: &DMatrix<f64>, grid: &ApcGrid) -> Result<ReparamResult> {
    let expected = 1 + (grid.a() - 1) + (grid.p() - 1);
    if w.nrows() != grid.n_cells() || w.ncols() != expected {
        return Err(ApcError::SingularTransform(format!(
            "expected a {}x{} intercept+age+period design, got {}x{}",
            grid.n_cells(),
            expected,
            w.nrows(),
            w.ncols()
        )));
    }
    let (target, labels) = fe_target(grid)?;

    let rank = crate::design::rank(w, crate::RANK_TOL);
    if rank < expected {
        return Err(ApcError::SingularTransform(format!("W has rank {rank} < {expected}")));
    }
    let transform = crate::design::least_squares(w, &target)?;
    let transformed = w * &transform;

    let residual = (&transformed - &target).norm();
    if residual > 1e-9 * target.norm() {
        return Err(ApcError::SingularTransform(format!(
            "W does not span the age+period space (residual {residual:.3e})"
        )));
    }
    let k_rank = crate::design::rank(&transform, crate::RANK_TOL);
    if k_rank < expected {
        return Err(ApcError::SingularTransform(format!("K has rank {k_rank} < {expected}")));
    }
    Ok(ReparamResult {
        transformed,
        transform,
        component_labels: labels,
    })
}

/// `Z* = Z B` with `B` the orthonormal polynomial basis over the block's levels.
pub fn reparameterize_re(z: &DMatrix<f64>, n_levels: usize) -> Result<ReparamResult> {
    if z.ncols() != n_levels {
        return Err(ApcError::DimensionMismatch(format!(
            "random block has {} columns, expected {n_levels}",
            z.ncols()
        )));
    }
    let basis = orthonormal_poly_basis(n_levels)?;
    Ok(ReparamResult {
        transformed: z * &basis.basis,
        component_labels: (0..n_levels).map(component_name).collect(),
        transform: basis.basis,
    })
}

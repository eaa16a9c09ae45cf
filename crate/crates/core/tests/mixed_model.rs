use apc_re::design::{apc_model, build_grid, Factor};
use apc_re::effects::{sensitivity_table, CellData, ModelSpec};
use apc_re::penalized::solve_penalized;
use apc_re::reml::{default_starts, fit_re_apc, restricted_loglik, VarianceComponents};
use apc_re::Execution;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
}

// Marginal covariance with dense algebra.
fn marginal_v(design: &apc_re::DesignBundle, vc: &VarianceComponents) -> DMatrix<f64> {
    let n = design.n_rows();
    let mut v = DMatrix::identity(n, n) * vc.sigma2_e;
    for b in &design.re_blocks {
        let s = vc.get(b.factor).unwrap();
        v += &b.matrix * b.matrix.transpose() * s;
    }
    v
}

#[test]
fn penalized_solution_is_gls_plus_blup() {
    let grid = build_grid(5, 6).unwrap();
    let design = apc_model(&grid, &[Factor::Period, Factor::Cohort]).unwrap();
    let y = noise(grid.n_cells(), 7);
    let vc = VarianceComponents::new(0.3, vec![(Factor::Period, 0.7), (Factor::Cohort, 1.9)]).unwrap();

    let v = marginal_v(&design, &vc);
    let vinv = v.clone().try_inverse().unwrap();
    let w = &design.fe;
    let beta = (w.transpose() * &vinv * w).try_inverse().unwrap() * w.transpose() * &vinv * &y;
    let r = &vinv * (&y - w * &beta);

    let est = solve_penalized(&design, &vc.penalty().unwrap(), &y).unwrap();
    for (i, b) in beta.iter().enumerate() {
        assert!((est.theta[i] - b).abs() < 1e-9, "fixed {i}: {} vs {b}", est.theta[i]);
    }
    for (f, range) in design.re_ranges() {
        let blk = design.re_blocks.iter().find(|b| b.factor == f).unwrap();
        let u = blk.matrix.transpose() * &r * vc.get(f).unwrap();
        for (k, idx) in range.enumerate() {
            assert!((est.theta[idx] - u[k]).abs() < 1e-9, "{f:?} {k}");
        }
    }
}

#[test]
fn restricted_loglik_matches_dense_formula() {
    let grid = build_grid(4, 5).unwrap();
    let design = apc_model(&grid, &[Factor::Age, Factor::Cohort]).unwrap();
    let y = noise(grid.n_cells(), 11);
    let vc = VarianceComponents::new(0.5, vec![(Factor::Age, 0.2), (Factor::Cohort, 1.3)]).unwrap();

    let v = marginal_v(&design, &vc);
    let vinv = v.clone().try_inverse().unwrap();
    let w = &design.fe;
    let wvw = w.transpose() * &vinv * w;
    let p = &vinv - &vinv * w * wvw.clone().try_inverse().unwrap() * w.transpose() * &vinv;
    let expected = -0.5
        * (v.determinant().ln() + wvw.determinant().ln() - (w.transpose() * w).determinant().ln()
            + (y.transpose() * p * &y)[0]);
    let got = restricted_loglik(&vc, &design, &y).unwrap();
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
}

#[test]
fn single_random_block_has_no_level_or_slope() {
    let grid = build_grid(7, 6).unwrap();
    let design = apc_model(&grid, &[Factor::Cohort]).unwrap();
    let mut y = noise(grid.n_cells(), 3);
    for (row, cell) in grid.cells().iter().enumerate() {
        let k = cell.level(Factor::Cohort) as f64;
        y[row] += 0.4 * k + 0.1 * (k - 6.0).powi(2);
    }
    let fit = fit_re_apc(&design, &y, &default_starts(1), Execution::Sequential).unwrap();
    let d = &fit.effects.block(Factor::Cohort).unwrap().decomposition;
    assert!(d.level.abs() < 1e-9, "level {}", d.level);
    assert!(d.linear_slope.abs() < 1e-9, "slope {}", d.linear_slope);
    assert!(fit.restricted_loglik.is_finite());
}

#[test]
fn sensitivity_table_is_execution_invariant() {
    let grid = build_grid(5, 5).unwrap();
    let y = noise(grid.n_cells(), 19);
    let records: Vec<(usize, usize, f64, Option<f64>)> = grid
        .cells()
        .iter()
        .zip(y.iter())
        .map(|(c, v)| (c.level(Factor::Age), c.level(Factor::Period), *v, None))
        .collect();
    let data = CellData::from_records(&records).unwrap();
    let specs = ModelSpec::all_six();
    let seq = sensitivity_table(&data, &specs, Execution::Sequential).unwrap();
    let par = sensitivity_table(&data, &specs, Execution::Parallel).unwrap();
    assert_eq!(seq.to_tsv(), par.to_tsv());
    assert_eq!(seq.fits.len(), 6);
}

//! Restricted (residual) likelihood for Gaussian APC mixed models.
//!
//! With fixed design `W` (`n x r`, full column rank), random blocks `Z_b` and
//! marginal covariance `V = s_e I + sum_b s_b Z_b Z_b'`, the value reported
//! everywhere in this module is
//!
//! ```text
//! RL = -1/2 [ log|V| + log|W'V^{-1}W| - log|W'W| + y'Py ]
//! P  = V^{-1} - V^{-1}W (W'V^{-1}W)^{-1} W'V^{-1}
//! ```
//!
//! which is the log-density of any orthonormal set of error contrasts `K'y`
//! (`K'K = I`, `K'W = 0`) without its `-(n - r)/2 log(2 pi)` term. Including
//! `log|W'W|` makes the value independent of how the fixed effects are coded.
//!
//! Boundary variances `s_b = 0` are the limit model with block `b` removed; the
//! formula above is finite there. The error variance is profiled out
//! numerically (see [`RemlProblem::profile`]), leaving a function of the
//! random-effect variances only.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::{DesignBundle, Factor};
use crate::error::{ApcError, Result};
use crate::exec::Execution;
use crate::penalized::{solve_penalized, EffectEstimate, PenaltySpec};

/// Evaluation cap per start.
pub const MAX_EVALUATIONS: usize = 10_000;
/// Log-scale step below which a coordinate search stops.
pub const MIN_LOG_STEP: f64 = 1e-6;
/// Relative tolerance for calling two maxima the same point.
pub const DEDUP_TOL: f64 = 1e-4;
/// Variances below this fraction of the error variance are snapped to zero.
pub const ZERO_SNAP: f64 = 1e-8;
const INITIAL_LOG_STEP: f64 = 1.386_294_361_119_890_6; // ln 4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_e: f64,
    pub sigma2_re: Vec<(Factor, f64)>,
}

impl VarianceComponents {
    pub fn new(sigma2_e: f64, sigma2_re: Vec<(Factor, f64)>) -> Result<Self> {
        if !(sigma2_e > 0.0 && sigma2_e.is_finite()) {
            return Err(ApcError::InvalidArgument(format!(
                "error variance must be positive, got {sigma2_e}"
            )));
        }
        if let Some((f, v)) = sigma2_re.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(ApcError::InvalidArgument(format!("{f} variance must be >= 0, got {v}")));
        }
        Ok(VarianceComponents { sigma2_e, sigma2_re })
    }

    pub fn get(&self, factor: Factor) -> Option<f64> {
        self.sigma2_re.iter().find(|(f, _)| *f == factor).map(|(_, v)| *v)
    }

    /// `lambda_b = s_e / s_b`, infinite for a zero variance.
    pub fn penalty(&self) -> Result<PenaltySpec> {
        PenaltySpec::new(
            self.sigma2_re
                .iter()
                .map(|&(f, v)| (f, if v > 0.0 { self.sigma2_e / v } else { f64::INFINITY }))
                .collect(),
        )
    }

    fn re_values(&self, design: &DesignBundle) -> Result<Vec<f64>> {
        design
            .re_blocks
            .iter()
            .map(|b| {
                self.get(b.factor)
                    .ok_or_else(|| ApcError::InvalidArgument(format!("no variance for the {} block", b.factor)))
            })
            .collect()
    }
}

fn check_fixed(design: &DesignBundle, y: &DVector<f64>) -> Result<()> {
    if y.len() != design.n_rows() {
        return Err(ApcError::DimensionMismatch(format!(
            "y has length {}, design has {} rows",
            y.len(),
            design.n_rows()
        )));
    }
    let r = crate::design::rank(&design.fe, crate::RANK_TOL);
    if r < design.n_fe() {
        return Err(ApcError::RankDeficientFixed {
            rank: r,
            cols: design.n_fe(),
        });
    }
    Ok(())
}

fn log_det_chol(m: DMatrix<f64>) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = nalgebra::Cholesky::new(m).ok_or(ApcError::NotPositiveDefinite)?;
    let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((ld, chol))
}

/// Restricted log-likelihood at `vc`, computed from the marginal covariance.
pub fn restricted_loglik(vc: &VarianceComponents, design: &DesignBundle, y: &DVector<f64>) -> Result<f64> {
    check_fixed(design, y)?;
    let n = design.n_rows();
    let mut v = DMatrix::identity(n, n) * vc.sigma2_e;
    for (block, s) in design.re_blocks.iter().zip(vc.re_values(design)?) {
        if s > 0.0 {
            v += &block.matrix * block.matrix.transpose() * s;
        }
    }
    let w = &design.fe;
    let (log_det_v, chol_v) = log_det_chol(v)?;
    let vinv_w = chol_v.solve(w);
    let vinv_y = chol_v.solve(y);
    let (log_det_wvw, chol_wvw) = log_det_chol(w.tr_mul(&vinv_w))?;
    let (log_det_ww, _) = log_det_chol(w.tr_mul(w))?;
    let beta = chol_wvw.solve(&w.tr_mul(&vinv_y));
    let ypy = y.dot(&vinv_y) - vinv_y.dot(&(w * beta));
    Ok(-0.5 * (log_det_v + log_det_wvw - log_det_ww + ypy))
}

/// Profiled value: restricted log-likelihood maximized over the error variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfiledPoint {
    pub value: f64,
    pub sigma2_e: f64,
}

/// Error contrasts of one `(design, y)` pair, reused across evaluations.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    factors: Vec<Factor>,
    /// `K'Z_b Z_b'K` per random block.
    grams: Vec<DMatrix<f64>>,
    ky: DVector<f64>,
}

impl RemlProblem {
    pub fn new(design: &DesignBundle, y: &DVector<f64>) -> Result<Self> {
        check_fixed(design, y)?;
        let n = design.n_rows();
        let r = design.n_fe();
        // K spans the orthogonal complement of col(W): eigenvectors of I - H
        // with eigenvalue 1.
        let q = design.fe.clone().qr().q();
        let resid_proj = DMatrix::identity(n, n) - &q * q.transpose();
        let eig = SymmetricEigen::new(resid_proj);
        let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
        if keep.len() != n - r {
            return Err(ApcError::RankDeficientFixed {
                rank: n - keep.len(),
                cols: r,
            });
        }
        let k = eig.eigenvectors.select_columns(keep.iter());
        let grams = design
            .re_blocks
            .iter()
            .map(|b| {
                let a = k.tr_mul(&b.matrix);
                &a * a.transpose()
            })
            .collect();
        Ok(RemlProblem {
            factors: design.random_factors(),
            grams,
            ky: k.tr_mul(y),
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_blocks(&self) -> usize {
        self.grams.len()
    }

    pub fn n_contrasts(&self) -> usize {
        self.ky.len()
    }

    /// Eigenvalues of `K'(V - s_e I)K` and the contrast data in that eigenbasis.
    fn spectrum(&self, sigma2_re: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.ky.len();
        let mut s = DMatrix::zeros(m, m);
        for (g, v) in self.grams.iter().zip(sigma2_re) {
            if *v > 0.0 {
                s += g * *v;
            }
        }
        let eig = SymmetricEigen::new(s);
        let z = eig.eigenvectors.tr_mul(&self.ky);
        let ev = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
        (ev, z.iter().map(|v| v * v).collect())
    }

    /// Restricted log-likelihood through the contrast representation.
    pub fn loglik(&self, sigma2_e: f64, sigma2_re: &[f64]) -> f64 {
        let (ev, z2) = self.spectrum(sigma2_re);
        contrast_loglik(sigma2_e, &ev, &z2)
    }

    /// Maximizes over the error variance for fixed random-effect variances.
    ///
    /// The maximizer lies below `max_i z_i^2` (the derivative is negative
    /// beyond it), so a log-spaced scan over twelve decades under that bound
    /// brackets it and a golden-section search refines the bracket.
    pub fn profile(&self, sigma2_re: &[f64]) -> ProfiledPoint {
        assert_eq!(sigma2_re.len(), self.grams.len(), "one variance per random block");
        let (ev, z2) = self.spectrum(sigma2_re);
        let hi = z2.iter().cloned().fold(f64::MIN_POSITIVE.sqrt(), f64::max).ln();
        let lo = hi - 12.0 * std::f64::consts::LN_10;
        let f = |u: f64| contrast_loglik(u.exp(), &ev, &z2);

        const SCAN: usize = 48;
        let grid: Vec<f64> = (0..=SCAN).map(|i| lo + (hi - lo) * i as f64 / SCAN as f64).collect();
        let (best, _) = grid
            .iter()
            .enumerate()
            .map(|(i, &u)| (i, f(u)))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(SCAN)];
        let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - inv_phi * (b - a);
        let mut x2 = a + inv_phi * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while b - a > 1e-11 {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + inv_phi * (b - a);
                f2 = f(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - inv_phi * (b - a);
                f1 = f(x1);
            }
        }
        let u = if f1 >= f2 { x1 } else { x2 };
        ProfiledPoint {
            value: f(u),
            sigma2_e: u.exp(),
        }
    }
}

fn contrast_loglik(sigma2_e: f64, ev: &[f64], z2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (s, z) in ev.iter().zip(z2) {
        let d = sigma2_e + s;
        acc += d.ln() + z / d;
    }
    -0.5 * acc
}

/// Profiled restricted log-likelihood at the given random-effect variances
/// (in the design's block order).
pub fn profiled_rl(sigma2_re: &[f64], design: &DesignBundle, y: &DVector<f64>) -> Result<ProfiledPoint> {
    let problem = RemlProblem::new(design, y)?;
    if sigma2_re.len() != problem.n_blocks() || sigma2_re.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(ApcError::InvalidArgument(format!(
            "need {} nonnegative variances, got {sigma2_re:?}",
            problem.n_blocks()
        )));
    }
    Ok(problem.profile(sigma2_re))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemlMaximum {
    /// Random-effect variances in design block order.
    pub sigma2_re: Vec<f64>,
    pub sigma2_e: f64,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

impl RemlMaximum {
    fn same_point(&self, other: &RemlMaximum) -> bool {
        let floor = DEDUP_TOL * self.sigma2_e.min(other.sigma2_e);
        self.sigma2_re
            .iter()
            .zip(&other.sigma2_re)
            .all(|(x, y)| (x - y).abs() <= DEDUP_TOL * x.abs().max(y.abs()) + floor)
            && (self.value - other.value).abs() <= DEDUP_TOL * (1.0 + self.value.abs())
    }

    pub fn variance_components(&self, factors: &[Factor]) -> VarianceComponents {
        VarianceComponents {
            sigma2_e: self.sigma2_e,
            sigma2_re: factors.iter().copied().zip(self.sigma2_re.iter().copied()).collect(),
        }
    }
}

/// Coordinate search on `log(s_b)` with an explicit zero arm.
///
/// Each sweep tries `s_b * e^{+h}` and `s_b * e^{-h}` per coordinate and keeps
/// stepping while the value improves. A decrease that falls below
/// `ZERO_SNAP * s_e` lands on zero, and after any successful decrease the
/// boundary value zero itself is tried. A coordinate at zero is revived by
/// probing `h * s_e`. When a sweep makes no move the step halves; the search
/// ends once it drops under [`MIN_LOG_STEP`] or the evaluation cap is hit.
pub fn climb(problem: &RemlProblem, start: &[f64]) -> RemlMaximum {
    let nb = problem.n_blocks();
    let mut x: Vec<f64> = start.iter().map(|v| v.max(0.0)).collect();
    let mut cur = problem.profile(&x);
    let mut evaluations = 1;
    let mut h = INITIAL_LOG_STEP;
    let mut converged = false;

    let try_value = |x: &mut Vec<f64>, b: usize, v: f64, cur: &mut ProfiledPoint, evals: &mut usize| -> bool {
        let old = x[b];
        x[b] = v;
        let p = problem.profile(x);
        *evals += 1;
        if p.value > cur.value {
            *cur = p;
            true
        } else {
            x[b] = old;
            false
        }
    };

    'outer: while evaluations < MAX_EVALUATIONS {
        let mut moved = false;
        for b in 0..nb {
            if x[b] == 0.0 {
                let probe = h * cur.sigma2_e;
                if try_value(&mut x, b, probe, &mut cur, &mut evaluations) {
                    moved = true;
                    while evaluations < MAX_EVALUATIONS {
                        let next = x[b] * h.exp();
                        if !try_value(&mut x, b, next, &mut cur, &mut evaluations) {
                            break;
                        }
                    }
                }
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut stepped = false;
                loop {
                    if evaluations >= MAX_EVALUATIONS {
                        break 'outer;
                    }
                    let mut next = x[b] * (dir * h).exp();
                    if dir < 0.0 && next < ZERO_SNAP * cur.sigma2_e {
                        next = 0.0;
                    }
                    if !try_value(&mut x, b, next, &mut cur, &mut evaluations) {
                        break;
                    }
                    stepped = true;
                    if x[b] == 0.0 {
                        break;
                    }
                }
                if stepped {
                    moved = true;
                    if dir < 0.0 && x[b] > 0.0 {
                        try_value(&mut x, b, 0.0, &mut cur, &mut evaluations);
                    }
                    break;
                }
            }
        }
        if !moved {
            h *= 0.5;
            if h < MIN_LOG_STEP {
                converged = true;
                break;
            }
        }
    }
    RemlMaximum {
        sigma2_re: x,
        sigma2_e: cur.sigma2_e,
        value: cur.value,
        converged,
        evaluations,
    }
}

/// Distinct maxima ordered by decreasing value, ties broken by coordinates.
fn merge_maxima(found: &[RemlMaximum]) -> Vec<RemlMaximum> {
    let mut sorted = found.to_vec();
    sorted.sort_by(|a, b| {
        b.value.total_cmp(&a.value).then_with(|| {
            a.sigma2_re
                .iter()
                .zip(&b.sigma2_re)
                .fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y)))
        })
    });
    let mut out: Vec<RemlMaximum> = Vec::new();
    for m in sorted {
        if !out.iter().any(|o| o.same_point(&m)) {
            out.push(m);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximizeResult {
    pub best: RemlMaximum,
    /// Distinct maxima over all starts, best first.
    pub all_maxima: Vec<RemlMaximum>,
    /// Start values (random-effect variances) and where each one ended.
    pub per_start: Vec<(Vec<f64>, RemlMaximum)>,
}

/// `{(1, 1, ...)}` plus, for each block, that block at `1e-4` and at `1`
/// with the others at zero.
pub fn default_starts(n_blocks: usize) -> Vec<Vec<f64>> {
    let mut starts = vec![vec![1.0; n_blocks]];
    for b in 0..n_blocks {
        for s in [1e-4, 1.0] {
            let mut v = vec![0.0; n_blocks];
            v[b] = s;
            if !starts.contains(&v) {
                starts.push(v);
            }
        }
    }
    starts
}

/// Runs [`climb`] from every start. Error variances in `starts` are ignored
/// because the error variance is profiled out.
pub fn maximize_reml(problem: &RemlProblem, starts: &[Vec<f64>], exec: Execution) -> Result<MaximizeResult> {
    if starts.is_empty() {
        return Err(ApcError::InvalidArgument("at least one start is required".into()));
    }
    if let Some(s) = starts
        .iter()
        .find(|s| s.len() != problem.n_blocks() || s.iter().any(|v| v.is_nan() || *v < 0.0))
    {
        return Err(ApcError::InvalidArgument(format!(
            "start {s:?} must hold {} nonnegative variances",
            problem.n_blocks()
        )));
    }
    let ends = exec.map(starts, |s| climb(problem, s));
    let all_maxima = merge_maxima(&ends);
    Ok(MaximizeResult {
        best: all_maxima[0].clone(),
        all_maxima,
        per_start: starts.iter().cloned().zip(ends).collect(),
    })
}

pub fn starts_from_components(design: &DesignBundle, starts: &[VarianceComponents]) -> Result<Vec<Vec<f64>>> {
    starts.iter().map(|vc| vc.re_values(design)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRecord {
    pub starts: Vec<Vec<f64>>,
    pub per_start: Vec<RemlMaximum>,
    pub distinct_maxima: Vec<RemlMaximum>,
    pub multiple_maxima: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModel {
    pub random: Vec<Factor>,
    pub variance: VarianceComponents,
    pub restricted_loglik: f64,
    pub effects: EffectEstimate,
    pub convergence: ConvergenceRecord,
}

/// Penalized fit at estimated variances (step two of the two-step fit).
pub fn fit_at(design: &DesignBundle, y: &DVector<f64>, variance: &VarianceComponents) -> Result<EffectEstimate> {
    solve_penalized(design, &variance.penalty()?, y)
}

/// Two-step fit: maximize the restricted likelihood over `starts`, then solve
/// the penalized system at `lambda_b = s_e / s_b` of the best maximum.
pub fn fit_re_apc(
    design: &DesignBundle,
    y: &DVector<f64>,
    starts: &[Vec<f64>],
    exec: Execution,
) -> Result<FittedModel> {
    if design.re_blocks.is_empty() {
        return Err(ApcError::InvalidArgument("the design has no random block".into()));
    }
    let problem = RemlProblem::new(design, y)?;
    let result = maximize_reml(&problem, starts, exec)?;
    fitted_from(design, y, &result, &result.best)
}

/// Step two at a chosen maximum of an existing step-one result.
pub fn fitted_from(
    design: &DesignBundle,
    y: &DVector<f64>,
    result: &MaximizeResult,
    chosen: &RemlMaximum,
) -> Result<FittedModel> {
    let factors = design.random_factors();
    let variance = chosen.variance_components(&factors);
    let effects = fit_at(design, y, &variance)?;
    Ok(FittedModel {
        random: factors,
        restricted_loglik: chosen.value,
        variance,
        effects,
        convergence: ConvergenceRecord {
            starts: result.per_start.iter().map(|(s, _)| s.clone()).collect(),
            per_start: result.per_start.iter().map(|(_, m)| m.clone()).collect(),
            multiple_maxima: result.all_maxima.len() > 1,
            distinct_maxima: result.all_maxima.clone(),
        },
    })
}

/// Axis values for a two-block surface scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub axis0: Vec<f64>,
    pub axis1: Vec<f64>,
}

impl SurfaceGrid {
    /// `0` followed by `n` log-spaced values from `lo` to `hi` on both axes.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && n >= 2) {
            return Err(ApcError::InvalidArgument(format!(
                "bad surface axis lo={lo}, hi={hi}, n={n}"
            )));
        }
        let (llo, lhi) = (lo.log10(), hi.log10());
        let axis: Vec<f64> = std::iter::once(0.0)
            .chain((0..n).map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / (n - 1) as f64)))
            .collect();
        Ok(SurfaceGrid {
            axis0: axis.clone(),
            axis1: axis,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceMaximum {
    pub sigma2_re: [f64; 2],
    pub sigma2_e: f64,
    pub value: f64,
    /// Grid cell the refinement started from.
    pub grid_index: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RLSurface {
    pub factors: [Factor; 2],
    pub grid: SurfaceGrid,
    /// `values[i][j]` at `(axis0[i], axis1[j])`.
    pub values: Vec<Vec<f64>>,
    pub sigma2_e: Vec<Vec<f64>>,
    pub local_maxima: Vec<SurfaceMaximum>,
}

impl RLSurface {
    /// Difference between the two highest local maxima, if there are two.
    pub fn top_gap(&self) -> Option<f64> {
        (self.local_maxima.len() >= 2).then(|| self.local_maxima[0].value - self.local_maxima[1].value)
    }

    fn neighbors(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (ni, nj) = (self.grid.axis0.len() as isize, self.grid.axis1.len() as isize);
        (-1isize..=1)
            .flat_map(move |di| (-1isize..=1).map(move |dj| (di, dj)))
            .filter_map(move |(di, dj)| {
                let (a, b) = (i as isize + di, j as isize + dj);
                ((di, dj) != (0, 0) && (0..ni).contains(&a) && (0..nj).contains(&b)).then_some((a as usize, b as usize))
            })
    }

    /// True when `(i, j)` is at least as high as its eight grid neighbors.
    pub fn is_grid_peak(&self, i: usize, j: usize) -> bool {
        self.neighbors(i, j)
            .all(|(a, b)| self.values[a][b] <= self.values[i][j])
    }
}

/// Evaluates the profiled likelihood on every grid point, hill-climbs on the
/// grid from every point to a grid peak, and refines each distinct peak with
/// [`climb`].
pub fn scan_rl_surface(problem: &RemlProblem, grid: &SurfaceGrid, exec: Execution) -> Result<RLSurface> {
    if problem.n_blocks() != 2 {
        return Err(ApcError::InvalidArgument(format!(
            "surface scans need exactly two random blocks, design has {}",
            problem.n_blocks()
        )));
    }
    let points: Vec<(usize, usize)> = (0..grid.axis0.len())
        .flat_map(|i| (0..grid.axis1.len()).map(move |j| (i, j)))
        .collect();
    let evaluated = exec.map(&points, |&(i, j)| problem.profile(&[grid.axis0[i], grid.axis1[j]]));
    let nj = grid.axis1.len();
    let values: Vec<Vec<f64>> = evaluated
        .chunks(nj)
        .map(|row| row.iter().map(|p| p.value).collect())
        .collect();
    let sigma2_e: Vec<Vec<f64>> = evaluated
        .chunks(nj)
        .map(|row| row.iter().map(|p| p.sigma2_e).collect())
        .collect();
    let factors = [problem.factors()[0], problem.factors()[1]];
    let mut surface = RLSurface {
        factors,
        grid: grid.clone(),
        values,
        sigma2_e,
        local_maxima: Vec::new(),
    };

    let mut peaks: Vec<(usize, usize)> = Vec::new();
    for &(i0, j0) in &points {
        let (mut i, mut j) = (i0, j0);
        loop {
            let best = surface.neighbors(i, j).max_by(|&(a, b), &(c, d)| {
                surface.values[a][b]
                    .total_cmp(&surface.values[c][d])
                    .then((c, d).cmp(&(a, b)))
            });
            match best {
                Some((a, b)) if surface.values[a][b] > surface.values[i][j] => (i, j) = (a, b),
                _ => break,
            }
        }
        if !peaks.contains(&(i, j)) {
            peaks.push((i, j));
        }
    }
    peaks.sort();

    let refined = exec.map(&peaks, |&(i, j)| climb(problem, &[grid.axis0[i], grid.axis1[j]]));
    let mut merged: Vec<(RemlMaximum, (usize, usize))> = Vec::new();
    let mut order: Vec<usize> = (0..refined.len()).collect();
    order.sort_by(|&a, &b| {
        refined[b]
            .value
            .total_cmp(&refined[a].value)
            .then(peaks[a].cmp(&peaks[b]))
    });
    for k in order {
        if !merged.iter().any(|(m, _)| m.same_point(&refined[k])) {
            merged.push((refined[k].clone(), peaks[k]));
        }
    }
    surface.local_maxima = merged
        .into_iter()
        .map(|(m, idx)| SurfaceMaximum {
            sigma2_re: [m.sigma2_re[0], m.sigma2_re[1]],
            sigma2_e: m.sigma2_e,
            value: m.value,
            grid_index: idx,
        })
        .collect();
    Ok(surface)
}

//! Two-random-effect shrinkage simulation.
//!
//! Data have a true cohort effect made of its orthonormal-polynomial linear
//! column plus `m` times its quadratic column, and no age or period signal.
//! Each replicate is fitted with fixed age and random period and cohort, and
//! the fitted period and cohort slopes are classified as shrunk or not.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::{apc_model, build_grid, re_design, DesignBundle, Factor};
use crate::error::{ApcError, Result};
use crate::exec::Execution;
use crate::orthopoly::reparameterize_re;
use crate::reml::{
    default_starts, fitted_from, maximize_reml, scan_rl_surface, FittedModel, RLSurface, RemlProblem, SurfaceGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub a: usize,
    pub p: usize,
    pub m_grid: Vec<f64>,
    pub n_reps: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub shrink_threshold: f64,
    /// Also fit `-m` for every `m` and record its period count.
    pub check_symmetry: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            a: 6,
            p: 5,
            m_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            n_reps: 100,
            noise_sd: 0.01,
            seed: 20_190_601,
            shrink_threshold: 1e-2,
            check_symmetry: false,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(ApcError::InvalidArgument(format!(
                "noise sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if self.n_reps == 0 {
            return Err(ApcError::InvalidArgument("n_reps must be at least 1".into()));
        }
        if let Some(m) = self.m_grid.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(ApcError::InvalidArgument(format!("m = {m} is outside [0, 1]")));
        }
        if self.shrink_threshold.is_nan() || self.shrink_threshold <= 0.0 {
            return Err(ApcError::InvalidArgument("shrink threshold must be positive".into()));
        }
        build_grid(self.a, self.p).map(|_| ())
    }

    /// Polynomial-coded cohort block `Zc * Gc`.
    pub fn cohort_poly_columns(&self) -> Result<DMatrix<f64>> {
        let grid = build_grid(self.a, self.p)?;
        if grid.c() < 3 {
            return Err(ApcError::DimensionTooSmall {
                what: "cohorts",
                value: grid.c(),
                min: 3,
            });
        }
        Ok(reparameterize_re(&re_design(&grid, Factor::Cohort), grid.c())?.transformed)
    }

    pub fn design(&self) -> Result<DesignBundle> {
        apc_model(&build_grid(self.a, self.p)?, &[Factor::Period, Factor::Cohort])
    }
}

/// Stream for one replicate: the ChaCha key holds the seed, the bits of `m`
/// and the replicate index, so streams do not depend on execution order.
pub fn replicate_rng(seed: u64, m: f64, replicate: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&m.to_bits().to_le_bytes());
    key[16..24].copy_from_slice(&(replicate as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `Zc*[,2] + m Zc*[,3] + N(0, sd^2)` noise, with `Zc* = Zc Gc`.
pub fn generate_dataset(m: f64, replicate: usize, spec: &SimSpec) -> Result<DVector<f64>> {
    let zc = spec.cohort_poly_columns()?;
    Ok(generate_with(&zc, m, replicate, spec))
}

fn generate_with(zc: &DMatrix<f64>, m: f64, replicate: usize, spec: &SimSpec) -> DVector<f64> {
    let mut rng = replicate_rng(spec.seed, m, replicate);
    let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
    let signal = zc.column(1) + zc.column(2) * m;
    DVector::from_fn(zc.nrows(), |i, _| signal[i] + noise.sample(&mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPolicy {
    /// Keep the maximum reached from all variances equal to one.
    DefaultOnes,
    /// Keep the best maximum over the full default start set.
    MultistartGlobal,
}

impl std::str::FromStr for StartPolicy {
    type Err = ApcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default_ones" => Ok(StartPolicy::DefaultOnes),
            "multistart_global" => Ok(StartPolicy::MultistartGlobal),
            other => Err(ApcError::InvalidArgument(format!(
                "unknown start policy '{other}' (default_ones, multistart_global)"
            ))),
        }
    }
}

impl std::fmt::Display for StartPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StartPolicy::DefaultOnes => "default_ones",
            StartPolicy::MultistartGlobal => "multistart_global",
        })
    }
}

/// `(period_shrunk, cohort_shrunk)`: a block counts as shrunk when the
/// absolute slope of its fitted values on the level index is below the
/// threshold.
pub fn classify_shrinkage(fit: &FittedModel, spec: &SimSpec) -> (bool, bool) {
    let shrunk = |f: Factor| {
        fit.effects
            .block(f)
            .map(|b| b.decomposition.linear_slope.abs() < spec.shrink_threshold)
            .unwrap_or(true)
    };
    (shrunk(Factor::Period), shrunk(Factor::Cohort))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub m: f64,
    pub replicate: usize,
    pub sigma2_period: f64,
    pub sigma2_cohort: f64,
    pub sigma2_e: f64,
    pub restricted_loglik: f64,
    pub slopes: [f64; 3],
    pub period_shrunk: bool,
    pub cohort_shrunk: bool,
    pub n_maxima: usize,
    /// The policy kept a maximum lower than the best one found.
    pub non_global_selected: bool,
}

/// Fits one dataset; the full default start set always runs so the number
/// of distinct maxima is known whatever the policy.
pub fn fit_replicate(design: &DesignBundle, y: &DVector<f64>, policy: StartPolicy) -> Result<(FittedModel, bool)> {
    let problem = RemlProblem::new(design, y)?;
    let starts = default_starts(problem.n_blocks());
    let result = maximize_reml(&problem, &starts, Execution::Sequential)?;
    let chosen = match policy {
        StartPolicy::MultistartGlobal => &result.best,
        StartPolicy::DefaultOnes => &result.per_start[0].1,
    };
    let non_global = chosen.value < result.best.value - crate::reml::DEDUP_TOL * (1.0 + result.best.value.abs());
    Ok((fitted_from(design, y, &result, chosen)?, non_global))
}

fn run_one(
    design: &DesignBundle,
    zc: &DMatrix<f64>,
    spec: &SimSpec,
    m: f64,
    rep: usize,
    policy: StartPolicy,
) -> Result<ReplicateOutcome> {
    let y = generate_with(zc, m, rep, spec);
    let (fit, non_global) = fit_replicate(design, &y, policy)?;
    let (period_shrunk, cohort_shrunk) = classify_shrinkage(&fit, spec);
    let slope = |f: Factor| {
        fit.effects
            .block(f)
            .map(|b| b.decomposition.linear_slope)
            .unwrap_or(0.0)
    };
    Ok(ReplicateOutcome {
        m,
        replicate: rep,
        sigma2_period: fit.variance.get(Factor::Period).unwrap_or(0.0),
        sigma2_cohort: fit.variance.get(Factor::Cohort).unwrap_or(0.0),
        sigma2_e: fit.variance.sigma2_e,
        restricted_loglik: fit.restricted_loglik,
        slopes: [slope(Factor::Age), slope(Factor::Period), slope(Factor::Cohort)],
        period_shrunk,
        cohort_shrunk,
        n_maxima: fit.convergence.distinct_maxima.len(),
        non_global_selected: non_global,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShrinkageRow {
    pub m: f64,
    pub n_reps: usize,
    pub count_period_shrunk: usize,
    pub count_cohort_shrunk: usize,
    /// Mean fitted slopes (age, period, cohort) over successful fits.
    pub mean_slopes: [f64; 3],
    pub count_multiple_maxima: usize,
    pub count_non_global_selected: usize,
    pub failures: Vec<(usize, String)>,
    /// Period count at `-m` when the symmetry check is on.
    pub count_period_shrunk_neg_m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShrinkageRun {
    pub rows: Vec<ShrinkageRow>,
    pub replicates: Vec<ReplicateOutcome>,
}

pub fn run_shrinkage(spec: &SimSpec, policy: StartPolicy, exec: Execution) -> Result<ShrinkageRun> {
    spec.validate()?;
    let design = spec.design()?;
    let zc = spec.cohort_poly_columns()?;
    let mut signs = vec![1.0];
    if spec.check_symmetry {
        signs.push(-1.0);
    }
    let jobs: Vec<(f64, f64, usize)> = spec
        .m_grid
        .iter()
        .flat_map(|&m| {
            signs
                .iter()
                .flat_map(move |&s| (0..spec.n_reps).map(move |r| (m, s, r)))
        })
        .collect();
    let outcomes = exec.map(&jobs, |&(m, s, rep)| run_one(&design, &zc, spec, s * m, rep, policy));

    let mut rows = Vec::with_capacity(spec.m_grid.len());
    let mut replicates = Vec::new();
    let mut it = jobs.iter().zip(outcomes);
    for &m in &spec.m_grid {
        let mut row = ShrinkageRow {
            m,
            n_reps: spec.n_reps,
            count_period_shrunk: 0,
            count_cohort_shrunk: 0,
            mean_slopes: [0.0; 3],
            count_multiple_maxima: 0,
            count_non_global_selected: 0,
            failures: Vec::new(),
            count_period_shrunk_neg_m: spec.check_symmetry.then_some(0),
        };
        let mut ok = 0usize;
        for _ in 0..signs.len() * spec.n_reps {
            let (&(_, s, rep), outcome) = it.next().expect("one outcome per job");
            match outcome {
                Ok(o) if s > 0.0 => {
                    ok += 1;
                    row.count_period_shrunk += o.period_shrunk as usize;
                    row.count_cohort_shrunk += o.cohort_shrunk as usize;
                    row.count_multiple_maxima += (o.n_maxima > 1) as usize;
                    row.count_non_global_selected += o.non_global_selected as usize;
                    for k in 0..3 {
                        row.mean_slopes[k] += o.slopes[k];
                    }
                    replicates.push(o);
                }
                Ok(o) => {
                    if let Some(c) = row.count_period_shrunk_neg_m.as_mut() {
                        *c += o.period_shrunk as usize;
                    }
                }
                Err(e) => row.failures.push((rep, format!("m={}: {e}", s * m))),
            }
        }
        if ok > 0 {
            for v in row.mean_slopes.iter_mut() {
                *v /= ok as f64;
            }
        }
        rows.push(row);
    }
    Ok(ShrinkageRun { rows, replicates })
}

impl ShrinkageRun {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "m\tcount_period_shrunk\tcount_cohort_shrunk\tmean_slope_age\tmean_slope_period\tmean_slope_cohort\tcount_multiple_maxima\tcount_non_global_selected\tfailures",
        );
        let sym = self.rows.iter().any(|r| r.count_period_shrunk_neg_m.is_some());
        if sym {
            out.push_str("\tcount_period_shrunk_neg_m");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:.2}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}\t{}",
                r.m,
                r.count_period_shrunk,
                r.count_cohort_shrunk,
                r.mean_slopes[0],
                r.mean_slopes[1],
                r.mean_slopes[2],
                r.count_multiple_maxima,
                r.count_non_global_selected,
                r.failures.len()
            ));
            if sym {
                out.push_str(&format!("\t{}", r.count_period_shrunk_neg_m.unwrap_or(0)));
            }
            out.push('\n');
        }
        out
    }

    pub fn replicates_tsv(&self) -> String {
        let mut out = String::from(
            "m\treplicate\tsigma2_period\tsigma2_cohort\tsigma2_e\trestricted_loglik\tslope_age\tslope_period\tslope_cohort\tperiod_shrunk\tcohort_shrunk\tn_maxima\tnon_global_selected\n",
        );
        for o in &self.replicates {
            out.push_str(&format!(
                "{:.2}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}\t{}\t{}\n",
                o.m,
                o.replicate,
                o.sigma2_period,
                o.sigma2_cohort,
                o.sigma2_e,
                o.restricted_loglik,
                o.slopes[0],
                o.slopes[1],
                o.slopes[2],
                o.period_shrunk as u8,
                o.cohort_shrunk as u8,
                o.n_maxima,
                o.non_global_selected as u8
            ));
        }
        out
    }
}

/// Default axes for replicate surfaces: `0` and 33 log-spaced values from
/// `1e-7` to `10`.
pub fn default_surface_grid() -> SurfaceGrid {
    SurfaceGrid::log_spaced(1e-7, 10.0, 33).expect("valid axis")
}

/// Profiled restricted-likelihood surface of one simulated replicate over
/// (period variance, cohort variance).
pub fn replicate_surface(
    spec: &SimSpec,
    m: f64,
    replicate: usize,
    grid: &SurfaceGrid,
    exec: Execution,
) -> Result<RLSurface> {
    let y = generate_dataset(m, replicate, spec)?;
    let problem = RemlProblem::new(&spec.design()?, &y)?;
    scan_rl_surface(&problem, grid, exec)
}

//! Level / linear / nonlinear decompositions of effect vectors and
//! cross-specification comparison reports.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{apc_model, ApcGrid, DesignBundle, Factor};
use crate::error::{ApcError, Result};
use crate::exec::Execution;
use crate::orthopoly::centered_index;
use crate::reml::{default_starts, fit_re_apc, FittedModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectDecomposition {
    pub block: String,
    /// Mean of the effect values.
    pub level: f64,
    /// Least-squares slope on the centered level index.
    pub linear_slope: f64,
    pub nonlinear: Vec<f64>,
    pub level_norm: f64,
    pub linear_norm: f64,
    pub nonlinear_norm: f64,
}

impl EffectDecomposition {
    /// `level + slope * centered_index + nonlinear`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let x = centered_index(self.nonlinear.len());
        self.nonlinear
            .iter()
            .zip(x.iter())
            .map(|(r, xi)| self.level + self.linear_slope * xi + r)
            .collect()
    }
}

/// Slope of `values` regressed on the centered level index.
pub fn linear_slope(values: &[f64]) -> f64 {
    let x = centered_index(values.len());
    x.iter().zip(values).map(|(a, b)| a * b).sum::<f64>() / x.norm_squared()
}

pub fn decompose_effect(name: &str, values: &[f64]) -> Result<EffectDecomposition> {
    let n = values.len();
    if n < 2 {
        return Err(ApcError::DimensionTooSmall {
            what: "effect levels",
            value: n,
            min: 2,
        });
    }
    let x = centered_index(n);
    let level = values.iter().sum::<f64>() / n as f64;
    let slope = linear_slope(values);
    let nonlinear: Vec<f64> = values
        .iter()
        .zip(x.iter())
        .map(|(v, xi)| v - level - slope * xi)
        .collect();
    Ok(EffectDecomposition {
        block: name.to_string(),
        level,
        linear_slope: slope,
        level_norm: level.abs() * (n as f64).sqrt(),
        linear_norm: slope.abs() * x.norm(),
        nonlinear_norm: nonlinear.iter().map(|v| v * v).sum::<f64>().sqrt(),
        nonlinear,
    })
}

/// Which of age, period and cohort are random.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ModelSpec {
    pub random: Vec<Factor>,
}

#[derive(Deserialize)]
struct RawSpec {
    random: Vec<Factor>,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = ApcError;

    fn try_from(raw: RawSpec) -> Result<Self> {
        ModelSpec::new(raw.random)
    }
}

impl ModelSpec {
    pub fn new(mut random: Vec<Factor>) -> Result<Self> {
        random.sort();
        random.dedup();
        match random.len() {
            0 => Err(ApcError::InvalidArgument(
                "all-fixed APC model is unidentified; make at least one factor random".into(),
            )),
            3 => Err(ApcError::InvalidArgument(
                "at least one factor must stay fixed to anchor the linear components".into(),
            )),
            _ => Ok(ModelSpec { random }),
        }
    }

    /// The six choices with one or two random factors.
    pub fn all_six() -> Vec<ModelSpec> {
        use Factor::*;
        [
            vec![Age],
            vec![Period],
            vec![Cohort],
            vec![Age, Period],
            vec![Age, Cohort],
            vec![Period, Cohort],
        ]
        .into_iter()
        .map(|r| ModelSpec { random: r })
        .collect()
    }

    /// Short label such as `re:pc`.
    pub fn label(&self) -> String {
        format!(
            "re:{}",
            self.random
                .iter()
                .map(|f| f.short().to_ascii_lowercase())
                .collect::<String>()
        )
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = ApcError;

    /// Comma-separated factor names, e.g. `period,cohort` or `p,c`.
    fn from_str(s: &str) -> Result<Self> {
        let random = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Factor>>>()?;
        ModelSpec::new(random)
    }
}

/// APC cell means with optional weights, one row per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub grid: ApcGrid,
    /// Values in grid row order.
    pub y: DVector<f64>,
    pub weights: Option<DVector<f64>>,
}

impl CellData {
    /// From `(age_index, period_index, value, weight)` records with 1-based
    /// indices. Every cell must appear exactly once.
    pub fn from_records(records: &[(usize, usize, f64, Option<f64>)]) -> Result<Self> {
        let a = records.iter().map(|r| r.0).max().unwrap_or(0);
        let p = records.iter().map(|r| r.1).max().unwrap_or(0);
        let grid = ApcGrid::new(a, p)?;
        let mut y = vec![None; grid.n_cells()];
        let mut w = vec![1.0; grid.n_cells()];
        let has_weights = records.iter().any(|r| r.3.is_some());
        if has_weights && records.iter().any(|r| r.3.is_none()) {
            return Err(ApcError::InvalidArgument(
                "weights must be given for every row or none".into(),
            ));
        }
        for &(i, j, v, wt) in records {
            let row = grid
                .row_of(i, j)
                .ok_or_else(|| ApcError::InvalidArgument(format!("cell ({i}, {j}) is outside the grid")))?;
            if !v.is_finite() {
                return Err(ApcError::InvalidArgument(format!(
                    "cell ({i}, {j}) has non-finite value"
                )));
            }
            if y[row].replace(v).is_some() {
                return Err(ApcError::InvalidArgument(format!("cell ({i}, {j}) appears twice")));
            }
            if let Some(wt) = wt {
                if !(wt > 0.0 && wt.is_finite()) {
                    return Err(ApcError::InvalidArgument(format!("cell ({i}, {j}) has weight {wt}")));
                }
                w[row] = wt;
            }
        }
        if let Some(row) = y.iter().position(Option::is_none) {
            let c = &grid.cells()[row];
            return Err(ApcError::InvalidArgument(format!(
                "cell ({}, {}) is missing",
                c.age, c.period
            )));
        }
        Ok(CellData {
            y: DVector::from_iterator(y.len(), y.into_iter().flatten()),
            weights: has_weights.then(|| DVector::from_vec(w)),
            grid,
        })
    }

    /// Design and response for `spec`, rows scaled by `sqrt(weight)`.
    pub fn weighted_problem(&self, spec: &ModelSpec) -> Result<(DesignBundle, DVector<f64>)> {
        let design = apc_model(&self.grid, &spec.random)?;
        match &self.weights {
            None => Ok((design, self.y.clone())),
            Some(w) => {
                let s = w.map(f64::sqrt);
                Ok((design.scale_rows(&s)?, self.y.component_mul(&s)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecFit {
    pub spec: ModelSpec,
    pub fit: FittedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub fits: Vec<SpecFit>,
}

/// Fits every spec with the two-step REML fit from the default start set.
pub fn sensitivity_table(data: &CellData, specs: &[ModelSpec], exec: Execution) -> Result<SensitivityReport> {
    if specs.is_empty() {
        return Err(ApcError::InvalidArgument("no model specifications given".into()));
    }
    let fits = exec.map(specs, |spec| {
        let (design, y) = data.weighted_problem(spec)?;
        let fit = fit_re_apc(&design, &y, &default_starts(spec.random.len()), Execution::Sequential)?;
        Ok(SpecFit {
            spec: spec.clone(),
            fit,
        })
    });
    Ok(SensitivityReport {
        fits: fits.into_iter().collect::<Result<_>>()?,
    })
}

impl SensitivityReport {
    /// Group rows by model columns: effect values per level, then the
    /// level, slope and nonlinear norm of each block.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("factor\trow");
        for f in &self.fits {
            let _ = write!(out, "\t{}", f.spec.label());
        }
        out.push('\n');
        for factor in Factor::ALL {
            let blocks: Vec<_> = self
                .fits
                .iter()
                .map(|f| f.fit.effects.block(factor).expect("every block is reported"))
                .collect();
            let n = blocks[0].values.len();
            let mut row = |label: String, get: &dyn Fn(usize) -> f64| {
                let _ = write!(out, "{}\t{label}", factor.name());
                for k in 0..blocks.len() {
                    let _ = write!(out, "\t{}", fmt(get(k)));
                }
                out.push('\n');
            };
            for lvl in 0..n {
                row(format!("{}", lvl + 1), &|k| blocks[k].values[lvl]);
            }
            row("level".into(), &|k| blocks[k].decomposition.level);
            row("linear_slope".into(), &|k| blocks[k].decomposition.linear_slope);
            row("nonlinear_norm".into(), &|k| blocks[k].decomposition.nonlinear_norm);
        }
        out
    }

    /// Largest relative disagreement of any block's nonlinear component
    /// between any spec and the first spec.
    pub fn max_nonlinear_disagreement(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for factor in Factor::ALL {
            let nl =
                |f: &SpecFit| DVector::from_vec(f.fit.effects.block(factor).unwrap().decomposition.nonlinear.clone());
            let reference = nl(&self.fits[0]);
            let scale = reference.norm().max(f64::MIN_POSITIVE);
            for other in &self.fits[1..] {
                worst = worst.max((nl(other) - &reference).norm() / scale);
            }
        }
        worst
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

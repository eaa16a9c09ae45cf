//! Lexis grids and APC design matrices.
//!
//! Rows are ordered age-major, period-minor: the cell for age group `i` and
//! period `j` (both 1-based) sits in row `(i - 1) * p + (j - 1)`. Its cohort is
//! `k = a + j - i`, so cohort 1 is the oldest age group seen in period 1.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Age,
    Period,
    Cohort,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Age, Factor::Period, Factor::Cohort];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Age => "age",
            Factor::Period => "period",
            Factor::Cohort => "cohort",
        }
    }

    pub fn short(self) -> char {
        match self {
            Factor::Age => 'A',
            Factor::Period => 'P',
            Factor::Cohort => 'C',
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = ApcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" | "a" => Ok(Factor::Age),
            "period" | "p" => Ok(Factor::Period),
            "cohort" | "c" => Ok(Factor::Cohort),
            other => Err(ApcError::InvalidArgument(format!("unknown factor '{other}'"))),
        }
    }
}

/// One age-by-period cell. All indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub age: usize,
    pub period: usize,
    pub cohort: usize,
}

impl Cell {
    pub fn level(&self, factor: Factor) -> usize {
        match factor {
            Factor::Age => self.age,
            Factor::Period => self.period,
            Factor::Cohort => self.cohort,
        }
    }
}

/// The `a x p` Lexis table with the cohort diagonal of every cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApcGrid {
    a: usize,
    p: usize,
    c: usize,
    cells: Vec<Cell>,
}

impl ApcGrid {
    pub fn new(a: usize, p: usize) -> Result<Self> {
        if a < 2 {
            return Err(ApcError::DimensionTooSmall {
                what: "a",
                value: a,
                min: 2,
            });
        }
        if p < 2 {
            return Err(ApcError::DimensionTooSmall {
                what: "p",
                value: p,
                min: 2,
            });
        }
        let c = a + p - 1;
        let cells = (1..=a)
            .flat_map(|i| {
                (1..=p).map(move |j| Cell {
                    age: i,
                    period: j,
                    cohort: a + j - i,
                })
            })
            .collect();
        Ok(ApcGrid { a, p, c, cells })
    }

    pub fn a(&self) -> usize {
        self.a
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn levels(&self, factor: Factor) -> usize {
        match factor {
            Factor::Age => self.a,
            Factor::Period => self.p,
            Factor::Cohort => self.c,
        }
    }

    /// Row index of cell `(age, period)`, both 1-based.
    pub fn row_of(&self, age: usize, period: usize) -> Option<usize> {
        if (1..=self.a).contains(&age) && (1..=self.p).contains(&period) {
            Some((age - 1) * self.p + (period - 1))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Every factor block is a fixed effect with sum-to-zero coding.
    SumToZero,
    /// Fixed blocks use sum-to-zero coding, random blocks one indicator per level.
    Identity,
    /// Blocks have been rotated onto orthonormal polynomial components.
    OrthoPoly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReBlock {
    pub factor: Factor,
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

/// Fixed-effect matrix plus one matrix per random effect, rows in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub fe: DMatrix<f64>,
    pub fe_labels: Vec<String>,
    /// Column range of each fixed factor inside `fe` (the intercept is column 0).
    pub fe_blocks: Vec<(Factor, Range<usize>)>,
    pub re_blocks: Vec<ReBlock>,
    pub parameterization: Parameterization,
}

impl DesignBundle {
    pub fn n_rows(&self) -> usize {
        self.fe.nrows()
    }

    pub fn n_fe(&self) -> usize {
        self.fe.ncols()
    }

    pub fn n_columns(&self) -> usize {
        self.n_fe() + self.re_blocks.iter().map(|b| b.matrix.ncols()).sum::<usize>()
    }

    pub fn random_factors(&self) -> Vec<Factor> {
        self.re_blocks.iter().map(|b| b.factor).collect()
    }

    pub fn fixed_factors(&self) -> Vec<Factor> {
        self.fe_blocks.iter().map(|(f, _)| *f).collect()
    }

    /// Column range of each random block inside the combined `(W | Z)` matrix.
    pub fn re_ranges(&self) -> Vec<(Factor, Range<usize>)> {
        let mut start = self.n_fe();
        self.re_blocks
            .iter()
            .map(|b| {
                let r = start..start + b.matrix.ncols();
                start = r.end;
                (b.factor, r)
            })
            .collect()
    }

    /// `(W | Z_1 | Z_2 ...)`.
    pub fn combined(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n_rows(), self.n_columns());
        q.columns_mut(0, self.n_fe()).copy_from(&self.fe);
        for ((_, range), block) in self.re_ranges().into_iter().zip(&self.re_blocks) {
            q.columns_mut(range.start, range.len()).copy_from(&block.matrix);
        }
        q
    }

    pub fn combined_labels(&self) -> Vec<String> {
        let mut labels = self.fe_labels.clone();
        for b in &self.re_blocks {
            labels.extend(b.labels.iter().cloned());
        }
        labels
    }

    /// Multiplies every row by `scale[row]`; used for weighted cell means.
    pub fn scale_rows(&self, scale: &DVector<f64>) -> Result<DesignBundle> {
        if scale.len() != self.n_rows() {
            return Err(ApcError::DimensionMismatch(format!(
                "row scale has length {}, design has {} rows",
                scale.len(),
                self.n_rows()
            )));
        }
        let scale_matrix = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for (mut row, s) in out.row_iter_mut().zip(scale.iter()) {
                row *= *s;
            }
            out
        };
        let mut out = self.clone();
        out.fe = scale_matrix(&self.fe);
        for b in &mut out.re_blocks {
            b.matrix = scale_matrix(&b.matrix);
        }
        Ok(out)
    }
}

pub fn build_grid(a: usize, p: usize) -> Result<ApcGrid> {
    ApcGrid::new(a, p)
}

/// Sum-to-zero block for one factor: `levels - 1` columns, the last level
/// coded as -1 in every column.
pub fn sum_to_zero_block(grid: &ApcGrid, factor: Factor) -> DMatrix<f64> {
    let levels = grid.levels(factor);
    let mut m = DMatrix::zeros(grid.n_cells(), levels - 1);
    for (row, cell) in grid.cells().iter().enumerate() {
        let k = cell.level(factor);
        if k == levels {
            m.row_mut(row).fill(-1.0);
        } else {
            m[(row, k - 1)] = 1.0;
        }
    }
    m
}

fn sorted_unique(factors: &[Factor]) -> Vec<Factor> {
    let mut v = factors.to_vec();
    v.sort();
    v.dedup();
    v
}

type FixedPart = (DMatrix<f64>, Vec<String>, Vec<(Factor, Range<usize>)>);

fn fixed_part(grid: &ApcGrid, fixed: &[Factor]) -> FixedPart {
    let blocks: Vec<(Factor, DMatrix<f64>)> = fixed.iter().map(|&f| (f, sum_to_zero_block(grid, f))).collect();
    let ncols = 1 + blocks.iter().map(|(_, m)| m.ncols()).sum::<usize>();
    let mut w = DMatrix::zeros(grid.n_cells(), ncols);
    w.column_mut(0).fill(1.0);
    let mut labels = vec!["(Intercept)".to_string()];
    let mut ranges = Vec::with_capacity(blocks.len());
    let mut start = 1;
    for (factor, m) in blocks {
        w.columns_mut(start, m.ncols()).copy_from(&m);
        labels.extend((1..=m.ncols()).map(|k| format!("{}{k}", factor.name())));
        ranges.push((factor, start..start + m.ncols()));
        start += m.ncols();
    }
    (w, labels, ranges)
}

/// Fixed-effect-only design: intercept followed by sum-to-zero blocks in
/// age, period, cohort order.
pub fn fe_design(grid: &ApcGrid, factors: &[Factor]) -> Result<DesignBundle> {
    if factors.is_empty() {
        return Err(ApcError::InvalidArgument("at least one factor is required".into()));
    }
    let fixed = sorted_unique(factors);
    let (fe, fe_labels, fe_blocks) = fixed_part(grid, &fixed);
    Ok(DesignBundle {
        fe,
        fe_labels,
        fe_blocks,
        re_blocks: Vec::new(),
        parameterization: Parameterization::SumToZero,
    })
}

/// Indicator matrix with one column per level of `factor`.
pub fn re_design(grid: &ApcGrid, factor: Factor) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(grid.n_cells(), grid.levels(factor));
    for (row, cell) in grid.cells().iter().enumerate() {
        z[(row, cell.level(factor) - 1)] = 1.0;
    }
    z
}

/// Mixed APC design: factors listed in `random` get indicator blocks, the
/// others are sum-to-zero fixed effects next to the intercept. An empty
/// `random` gives the all-fixed design.
pub fn apc_model(grid: &ApcGrid, random: &[Factor]) -> Result<DesignBundle> {
    let random = sorted_unique(random);
    let fixed: Vec<Factor> = Factor::ALL.into_iter().filter(|f| !random.contains(f)).collect();
    mixed_design(grid, &fixed, &random)
}

/// Intercept plus sum-to-zero blocks for `fixed` and indicator blocks for
/// `random`. A factor may not be both.
pub fn mixed_design(grid: &ApcGrid, fixed: &[Factor], random: &[Factor]) -> Result<DesignBundle> {
    let fixed = sorted_unique(fixed);
    let random = sorted_unique(random);
    if let Some(f) = fixed.iter().find(|f| random.contains(f)) {
        return Err(ApcError::InvalidArgument(format!(
            "{f} cannot be both fixed and random"
        )));
    }
    if random.is_empty() {
        return fe_design(grid, &fixed);
    }
    let (fe, fe_labels, fe_blocks) = fixed_part(grid, &fixed);
    let re_blocks = random
        .iter()
        .map(|&factor| ReBlock {
            factor,
            matrix: re_design(grid, factor),
            labels: (1..=grid.levels(factor))
                .map(|k| format!("{}[{k}]", factor.name()))
                .collect(),
        })
        .collect();
    Ok(DesignBundle {
        fe,
        fe_labels,
        fe_blocks,
        re_blocks,
        parameterization: Parameterization::Identity,
    })
}

fn numerical_rank(singular: &DVector<f64>, tol: f64) -> usize {
    let smax = singular.max();
    if smax <= 0.0 {
        return 0;
    }
    singular.iter().filter(|&&s| s > tol * smax).count()
}

/// Orthonormal basis of the right null space of `m`.
///
/// The dimension comes from the singular values; the basis is the
/// eigenvectors of `m'm` with the smallest eigenvalues. nalgebra's singular
/// vectors can be mispaired on clustered spectra, so they are not used.
pub fn null_space_basis(m: &DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let cols = m.ncols();
    let dim = cols - rank(m, tol);
    let eig = SymmetricEigen::new(m.tr_mul(m));
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    order
        .into_iter()
        .take(dim)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect()
}

/// Least-squares solution of `a x = b` for full-column-rank `a`, by QR.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() < a.ncols() || a.nrows() != b.nrows() {
        return Err(ApcError::DimensionMismatch(format!(
            "least squares needs a tall system, got {}x{} with {} rhs rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let qr = a.clone().qr();
    let rhs = qr.q().tr_mul(b);
    qr.r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| ApcError::SingularTransform("rank-deficient least-squares system".into()))
}

pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    numerical_rank(&m.singular_values(), tol)
}

/// Column count minus numerical rank.
pub fn rank_deficiency(m: &DMatrix<f64>, tol: f64) -> usize {
    m.ncols() - rank(m, tol)
}

/// True when the columns of `z` add up to the all-ones column exactly.
pub fn intercept_redundancy_check(z: &DMatrix<f64>) -> bool {
    z.nrows() > 0 && z.row_iter().all(|row| row.sum() == 1.0)
}

/// Headerless comma-separated dump, one matrix row per line.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> std::io::Result<()> {
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format_number(*v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Integers print without a decimal point so indicator matrices diff cleanly.
pub fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

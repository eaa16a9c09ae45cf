use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use apc_re::constraint_lab::{quadratic_decomposition, verify_1re_sweep};
use apc_re::design::{build_grid, format_number, mixed_design, null_space_basis, rank, write_matrix_csv};
use apc_re::effects::{sensitivity_table, CellData, ModelSpec};
use apc_re::reml::SurfaceGrid;
use apc_re::simulation::{replicate_surface, run_shrinkage, SimSpec};
use apc_re::{Execution, Factor, RANK_TOL};
use serde::{Deserialize, Serialize};

use crate::cli::{DecomposeArgs, DesignArgs, FitArgs, ProfileArgs, SimulateArgs, VerifyArgs};
use crate::output::OutDir;
use crate::CliError;

/// Outcome of a command: `Err(message)` in `check` means a requested check
/// failed after all outputs were written.
pub struct Outcome {
    pub check: std::result::Result<(), String>,
}

impl Outcome {
    fn ok() -> Self {
        Outcome { check: Ok(()) }
    }

    fn check(pass: bool, message: impl FnOnce() -> String) -> Self {
        Outcome {
            check: if pass { Ok(()) } else { Err(message()) },
        }
    }
}

fn args_error(msg: impl Into<String>) -> anyhow::Error {
    CliError::Args(msg.into()).into()
}

#[derive(Serialize)]
struct DesignReport<'a> {
    a: usize,
    p: usize,
    fixed: Vec<Factor>,
    random: Vec<Factor>,
    rows: usize,
    columns: Vec<String>,
    rank: usize,
    deficiency: usize,
    /// Unit vectors spanning the null space, largest entry positive.
    null_space: Vec<Vec<f64>>,
    tolerance: &'a str,
}

pub fn design(args: &DesignArgs, out: &mut OutDir) -> Result<Outcome> {
    let grid = build_grid(args.a, args.p)?;
    if let Some(f) = args.random.iter().find(|f| !args.factors.contains(f)) {
        return Err(args_error(format!("random factor {f} is not among --factors")));
    }
    let fixed: Vec<Factor> = args
        .factors
        .iter()
        .copied()
        .filter(|f| !args.random.contains(f))
        .collect();
    let design = mixed_design(&grid, &fixed, &args.random)?;
    let q = design.combined();

    let mut csv = Vec::new();
    write_matrix_csv(&q, &mut csv)?;
    out.write("design.csv", &csv)?;

    let r = rank(&q, RANK_TOL);
    let null_space = null_space_basis(&q, RANK_TOL)
        .into_iter()
        .map(|v| {
            let k = v.iamax();
            let sign = if v[k] < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| clean(sign * x)).collect()
        })
        .collect();
    let report = DesignReport {
        a: args.a,
        p: args.p,
        fixed: design.fixed_factors(),
        random: design.random_factors(),
        rows: q.nrows(),
        columns: design.combined_labels(),
        rank: r,
        deficiency: q.ncols() - r,
        null_space,
        tolerance: "1e-10 relative singular value",
    };
    out.write_json("design.json", &report)?;
    println!("rank: {}", report.rank);
    println!("deficiency: {}", report.deficiency);
    Ok(Outcome::ok())
}

/// Rounds away last-bit noise so null vectors print stably.
fn clean(x: f64) -> f64 {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn verify(args: &VerifyArgs, out: &mut OutDir, exec: Execution) -> Result<Outcome> {
    if args.a_min < 3 || args.p_min < 3 || args.a_max < 3 || args.p_max < 3 {
        return Err(args_error("the sweep needs a >= 3 and p >= 3"));
    }
    if args.a_min > args.a_max || args.p_min > args.p_max || args.a_max > 30 || args.p_max > 30 {
        return Err(args_error("ranges must satisfy 3 <= min <= max <= 30"));
    }
    let report = verify_1re_sweep(
        args.a_min..=args.a_max,
        args.p_min..=args.p_max,
        &args.lambdas,
        args.re_factor,
        args.tol,
        exec,
    )?;
    out.write("verify.csv", report.to_csv().as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        re_factor: Factor,
        designs: usize,
        tolerance: f64,
        overall_max_intercept: f64,
        overall_max_linear: f64,
        pass: bool,
    }
    out.write_json(
        "verify.json",
        &Summary {
            re_factor: report.re_factor,
            designs: report.rows.len(),
            tolerance: report.tolerance,
            overall_max_intercept: report.overall_max_intercept,
            overall_max_linear: report.overall_max_linear,
            pass: report.pass,
        },
    )?;
    println!(
        "{} designs, max |alpha'M| = {:.3e}, max |beta'M| = {:.3e}: {}",
        report.rows.len(),
        report.overall_max_intercept,
        report.overall_max_linear,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(Outcome::check(report.pass, || {
        format!("influence weights exceed {}", args.tol)
    }))
}

fn sim_spec(args: &SimulateArgs) -> SimSpec {
    let defaults = SimSpec::default();
    SimSpec {
        a: args.a,
        p: args.p,
        m_grid: if args.m.is_empty() {
            defaults.m_grid
        } else {
            args.m.clone()
        },
        n_reps: args.reps,
        noise_sd: args.sd,
        seed: args.seed,
        shrink_threshold: args.threshold,
        check_symmetry: args.check_symmetry,
    }
}

pub fn simulate(args: &SimulateArgs, out: &mut OutDir, exec: Execution) -> Result<Outcome> {
    let spec = sim_spec(args);
    spec.validate().map_err(|e| args_error(e.to_string()))?;
    let run = run_shrinkage(&spec, args.policy, exec)?;
    out.write("shrinkage.tsv", run.to_tsv().as_bytes())?;
    out.write("replicates.tsv", run.replicates_tsv().as_bytes())?;
    out.write_json("shrinkage.json", &run.rows)?;
    print!("{}", run.to_tsv());

    if !args.check_endpoints {
        return Ok(Outcome::ok());
    }
    let mut problems = Vec::new();
    for r in &run.rows {
        if r.m == 0.0 && r.count_period_shrunk != 0 {
            problems.push(format!(
                "m = 0: {} of {} period-shrunk",
                r.count_period_shrunk, r.n_reps
            ));
        }
        if r.m >= 0.7 && r.count_period_shrunk != r.n_reps {
            problems.push(format!(
                "m = {}: {} of {} period-shrunk",
                r.m, r.count_period_shrunk, r.n_reps
            ));
        }
    }
    Ok(Outcome::check(problems.is_empty(), || problems.join("; ")))
}

pub fn profile(args: &ProfileArgs, out: &mut OutDir, exec: Execution) -> Result<Outcome> {
    let spec = SimSpec {
        a: args.a,
        p: args.p,
        m_grid: vec![args.m.abs()],
        noise_sd: args.sd,
        seed: args.seed,
        ..SimSpec::default()
    };
    spec.validate().map_err(|e| args_error(e.to_string()))?;
    let grid = SurfaceGrid::log_spaced(args.lo, args.hi, args.n).map_err(|e| args_error(e.to_string()))?;
    let surface = replicate_surface(&spec, args.m, args.replicate, &grid, exec)?;

    let mut csv = String::from("sigma2_period,sigma2_cohort,restricted_loglik,sigma2_e\n");
    for (i, sp) in surface.grid.axis0.iter().enumerate() {
        for (j, sc) in surface.grid.axis1.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{sp:e},{sc:e},{:.10},{:e}",
                surface.values[i][j], surface.sigma2_e[i][j]
            );
        }
    }
    out.write("surface.csv", csv.as_bytes())?;
    let mut maxima = String::from("sigma2_period,sigma2_cohort,sigma2_e,restricted_loglik\n");
    for m in &surface.local_maxima {
        let _ = writeln!(
            maxima,
            "{:e},{:e},{:e},{:.10}",
            m.sigma2_re[0], m.sigma2_re[1], m.sigma2_e, m.value
        );
    }
    out.write("maxima.csv", maxima.as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        factors: [Factor; 2],
        local_maxima: &'a [apc_re::reml::SurfaceMaximum],
        top_gap: Option<f64>,
    }
    out.write_json(
        "surface.json",
        &Summary {
            factors: surface.factors,
            local_maxima: &surface.local_maxima,
            top_gap: surface.top_gap(),
        },
    )?;
    print!("{maxima}");
    if let Some(g) = surface.top_gap() {
        println!("gap between top maxima: {g:.4}");
    }
    Ok(match args.min_gap {
        None => Outcome::ok(),
        Some(min) => Outcome::check(surface.top_gap().is_some_and(|g| g > min), || {
            format!(
                "{} maxima, gap {:?} (need > {min})",
                surface.local_maxima.len(),
                surface.top_gap()
            )
        }),
    })
}

#[derive(Debug, Deserialize)]
struct CellRecord {
    age_index: usize,
    period_index: usize,
    value: f64,
    #[serde(default)]
    weight: Option<f64>,
}

pub fn read_cells(path: &Path) -> Result<CellData> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| args_error(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| args_error(format!("{}: {e}", path.display())))?
        .clone();
    for required in ["age_index", "period_index", "value"] {
        if !headers.iter().any(|h| h == required) {
            return Err(args_error(format!("{} lacks the '{required}' column", path.display())));
        }
    }
    let mut records = Vec::new();
    for (k, row) in reader.deserialize::<CellRecord>().enumerate() {
        let r = row.map_err(|e| args_error(format!("{} row {}: {e}", path.display(), k + 2)))?;
        records.push((r.age_index, r.period_index, r.value, r.weight));
    }
    CellData::from_records(&records).map_err(|e| args_error(format!("{}: {e}", path.display())))
}

pub fn fit(args: &FitArgs, out: &mut OutDir, exec: Execution) -> Result<Outcome> {
    let data = read_cells(&args.data)?;
    let specs = if args.specs.is_empty() {
        ModelSpec::all_six()
    } else {
        args.specs.clone()
    };
    let report = sensitivity_table(&data, &specs, exec)?;
    out.write("sensitivity.tsv", report.to_tsv().as_bytes())?;
    out.write_json("fits.json", &report)?;
    let disagreement = (report.fits.len() > 1).then(|| report.max_nonlinear_disagreement());
    for f in &report.fits {
        let v = &f.fit.variance;
        let vars: Vec<String> = v
            .sigma2_re
            .iter()
            .map(|(f, s)| format!("{f}={}", format_number(*s)))
            .collect();
        println!(
            "{}: sigma2_e={} {} RL={:.6}",
            f.spec.label(),
            format_number(v.sigma2_e),
            vars.join(" "),
            f.fit.restricted_loglik
        );
    }
    if let Some(d) = disagreement {
        println!("max relative nonlinear disagreement: {d:.3e}");
    }
    Ok(match args.check_nonlinear {
        None => Outcome::ok(),
        Some(tol) => Outcome::check(disagreement.unwrap_or(0.0) <= tol, || {
            format!(
                "nonlinear components differ by {:.3e} > {tol}",
                disagreement.unwrap_or(0.0)
            )
        }),
    })
}

pub fn decompose(args: &DecomposeArgs, out: &mut OutDir) -> Result<Outcome> {
    let grid = build_grid(args.a, args.p).map_err(|e| args_error(e.to_string()))?;
    let q = quadratic_decomposition(&grid).map_err(|e| args_error(e.to_string()))?;
    out.write("decompose.csv", q.to_csv().as_bytes())?;
    out.write_json("decompose.json", &q)?;
    print!("{}", q.to_csv());
    let sum = q.intercept_sq + q.age_sq + q.period_sq + q.cohort_residual_sq;
    Ok(Outcome::check((sum - q.total_sq).abs() <= 1e-8 * q.total_sq, || {
        format!("pieces sum to {sum}, total is {}", q.total_sq)
    }))
}

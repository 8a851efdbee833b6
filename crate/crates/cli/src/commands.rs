//! The subcommand runners. Each resolves its target out of the problem file,
//! runs the library operation, prints a human-readable summary to stdout, and
//! writes the machine-readable artifacts into the output directory.
//!
//! Outcome mapping: `Ok(true)` means every check passed (exit 0), `Ok(false)`
//! is a negative analysis result (exit 1), `CliError::Usage` covers bad
//! files, flags, and unresolved references (exit 2), and `CliError::Analysis`
//! covers machinery that failed on well-formed input (exit 1).

use crate::output::{write_atomic, MachineReport};
use crate::problem::{ProblemFile, SystemSection};
use quadratura::family::{
    check_admissible, check_equivalence_matched, effective_parameter_test,
    fundamental_equality_residual, Family, QuadratureIntegral, WorkingBox,
};
use quadratura::odelab::{
    nonconstancy_obstruction, prufer_forward, restricted_integrability_witness,
    solve_linear_first_order, LinearFirstOrder, SecondOrderEq,
};
use quadratura::reduction::{
    reduce_to_normal_form, NormalForm, NormalFormReport, ReductionOptions, ReductionTrace,
    StepRecord,
};
use quadratura::sampling::linspace;
use quadratura::system::{check_independence, QuadratureSystem};
use quadratura::ToleranceConfig;
use serde::Serialize;
use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};
use std::fmt::Write as _;
use std::path::PathBuf;

/// How many constant candidates the independence search may try.
const INDEPENDENCE_BUDGET: usize = 48;

/// Grid length when no `--grid` is given: the whole declared interval.
const DEFAULT_GRID_POINTS: usize = 101;

/// Half-width of the default working box on every parameter axis.
const DEFAULT_BOX_HALF: f64 = 2.0;

/// Obstruction determinants below this do not certify anything.
const DETERMINANT_FLOOR: f64 = 0.5;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or bad problem file; exit code 2.
    Usage(String),
    /// The analysis machinery failed on resolvable input; exit code 1.
    Analysis(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Analysis(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn analysis<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Analysis(e.to_string())
}

/// Everything resolved from flags and the file before dispatch.
pub struct Ctx {
    pub problem: ProblemFile,
    pub tol: ToleranceConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub box_override: Option<Vec<(f64, f64)>>,
    pub grid_override: Option<(f64, f64, usize)>,
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    command: &'static str,
    targets: Vec<&'a str>,
    seed: u64,
    tolerances: &'a ToleranceConfig,
}

impl Ctx {
    fn header<'a>(&'a self, command: &'static str, targets: Vec<&'a str>) -> ReportHeader<'a> {
        ReportHeader {
            command,
            targets,
            seed: self.seed,
            tolerances: &self.tol,
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Flag box, then the file's `[box]`, then a symmetric default.
    fn working_box(&self, dim: usize, what: &str) -> Result<WorkingBox, CliError> {
        let ranges = self
            .box_override
            .clone()
            .or_else(|| self.problem.box_ranges.clone());
        match ranges {
            Some(r) => {
                if r.len() != dim {
                    return Err(usage(format!(
                        "the working box has {} axes but {what} has {dim} quadratures",
                        r.len()
                    )));
                }
                WorkingBox::new(r).map_err(|e| usage(format!("invalid working box: {e}")))
            }
            None => Ok(WorkingBox::symmetric(dim, DEFAULT_BOX_HALF)),
        }
    }

    fn grid_for(&self, interval: (f64, f64), what: &str) -> Result<Vec<f64>, CliError> {
        let (lo, hi) = interval;
        match self.grid_override {
            Some((a, b, n)) => {
                if a < lo || b > hi {
                    return Err(usage(format!(
                        "--grid {a}:{b} leaves the declared interval {lo} {hi} of {what}"
                    )));
                }
                Ok(linspace(a, b, n))
            }
            None => Ok(linspace(lo, hi, DEFAULT_GRID_POINTS)),
        }
    }
}

fn build_system(sec: &SystemSection) -> Result<QuadratureSystem, CliError> {
    let sys = QuadratureSystem::new(sec.x0, sec.interval, sec.integrands.clone())
        .map_err(|e| usage(format!("line {}: [system {}]: {e}", sec.line, sec.name)))?;
    Ok(if sec.breakpoints.is_empty() {
        sys
    } else {
        sys.with_breakpoints(sec.breakpoints.clone())
    })
}

fn no_such_target(kind: &str, name: &str, declared: Vec<&str>) -> CliError {
    if declared.is_empty() {
        usage(format!(
            "no [{kind} {name}] section; the file declares no [{kind}] sections at all"
        ))
    } else {
        usage(format!(
            "no [{kind} {name}] section; declared: {}",
            declared.join(", ")
        ))
    }
}

fn build_integral(problem: &ProblemFile, name: &str) -> Result<QuadratureIntegral, CliError> {
    let sec = problem.integral(name).ok_or_else(|| {
        no_such_target(
            "integral",
            name,
            problem.integrals.iter().map(|s| s.name.as_str()).collect(),
        )
    })?;
    let sys_sec = problem.system(&sec.system).ok_or_else(|| {
        usage(format!(
            "line {}: [integral {}] references unknown system `{}`",
            sec.system_line, sec.name, sec.system
        ))
    })?;
    let sys = build_system(sys_sec)?;
    QuadratureIntegral::new(sys, sec.outer.clone(), sec.theta.clone())
        .map_err(|e| usage(format!("line {}: [integral {}]: {e}", sec.line, sec.name)))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Serialize)]
struct CheckRow<T: Serialize> {
    check: &'static str,
    pass: bool,
    threshold: f64,
    report: T,
}

/// Independence, admissibility, the gradient identity, and the
/// effective-parameter probe, each against its own threshold.
pub fn cmd_check(ctx: &Ctx, target: &str) -> Result<bool, CliError> {
    let fam = build_integral(&ctx.problem, target)?;
    let bx = ctx.working_box(fam.param_dim(), &format!("[integral {target}]"))?;
    let mut report = MachineReport::new(&ctx.header("check", vec![target]));
    println!("check [integral {target}]");

    let indep = check_independence(fam.system(), &ctx.tol, ctx.seed, INDEPENDENCE_BUDGET)
        .map_err(analysis)?;
    let indep_pass = indep.independent;
    println!(
        "  independence:         {}  smallest singular value {:.3e} (threshold {:.3e})",
        verdict(indep_pass),
        indep.smallest_singular_value,
        indep.threshold
    );
    report.push(&CheckRow {
        check: "independence",
        pass: indep_pass,
        threshold: indep.threshold,
        report: &indep,
    });

    let adm = check_admissible(&fam, &bx, &ctx.tol, ctx.seed).map_err(analysis)?;
    let adm_pass = adm.admissible;
    println!(
        "  admissibility:        {}  min slopes {:.3e} / {:.3e} (floor {:.3e})",
        verdict(adm_pass),
        adm.min_last_slope,
        adm.min_readout_slope,
        adm.floor
    );
    report.push(&CheckRow {
        check: "admissibility",
        pass: adm_pass,
        threshold: adm.floor,
        report: &adm,
    });

    let fe = fundamental_equality_residual(&fam, &bx, &ctx.tol, ctx.seed).map_err(analysis)?;
    let fe_pass = fe.max_residual <= ctx.tol.constancy_tol;
    println!(
        "  fundamental equality: {}  max residual {:.3e} (tolerance {:.3e})",
        verdict(fe_pass),
        fe.max_residual,
        ctx.tol.constancy_tol
    );
    report.push(&CheckRow {
        check: "fundamental_equality",
        pass: fe_pass,
        threshold: ctx.tol.constancy_tol,
        report: &fe,
    });

    let ep = effective_parameter_test(&fam, &bx, &ctx.tol, ctx.seed).map_err(analysis)?;
    let ep_pass = ep.max_reconstruction_gap <= ctx.tol.equiv_tol && ep.reconstructions > 0;
    println!(
        "  effective parameter:  {}  max reconstruction gap {:.3e} over {} matches, {} skipped (tolerance {:.3e})",
        verdict(ep_pass),
        ep.max_reconstruction_gap,
        ep.reconstructions,
        ep.skipped,
        ctx.tol.equiv_tol
    );
    report.push(&CheckRow {
        check: "effective_parameter",
        pass: ep_pass,
        threshold: ctx.tol.equiv_tol,
        report: &ep,
    });

    let pass = indep_pass && adm_pass && fe_pass && ep_pass;
    let path = ctx.out_path("check_report.jsonl");
    report.write_to(&path).map_err(analysis)?;
    println!("result: {}", verdict(pass));
    println!("wrote {}", path.display());
    Ok(pass)
}

#[derive(Serialize)]
struct NormalFormRow<'a> {
    normal_form: &'a NormalFormReport,
    x0: f64,
    interval: (f64, f64),
    constant: String,
}

#[derive(Serialize)]
struct StepRow<'a> {
    step: usize,
    record: &'a StepRecord,
}

fn render_trace(trace: &ReductionTrace, error: Option<&str>) -> String {
    let mut s = String::new();
    writeln!(s, "initial quadratures: {}", trace.initial_quadratures).unwrap();
    for (i, step) in trace.steps.iter().enumerate() {
        writeln!(s, "step {}: {}", i + 1, step.rule).unwrap();
        writeln!(
            s,
            "  quadratures: {} -> {}",
            step.quadratures_before, step.quadratures_after
        )
        .unwrap();
        writeln!(s, "  structure residual: {:e}", step.structure_residual).unwrap();
        if let Some(a) = step.alpha {
            writeln!(s, "  alpha: {a}").unwrap();
        }
        if let Some(t) = &step.alpha_expr {
            writeln!(s, "  alpha(x): {t}").unwrap();
        }
        if let Some(t) = &step.beta_expr {
            writeln!(s, "  beta: {t}").unwrap();
        }
        if let Some(t) = &step.shift_expr {
            writeln!(s, "  shift: {t}").unwrap();
        }
        if let Some(t) = &step.absorbed_expr {
            writeln!(s, "  absorbed: {t}").unwrap();
        }
        if let Some(r) = step.redundancy_residual {
            writeln!(s, "  redundancy residual: {r:e}").unwrap();
        }
        if let Some(r) = step.absorption_residual {
            writeln!(s, "  absorption residual: {r:e}").unwrap();
        }
        if let Some(v) = step.independence_sigma {
            writeln!(s, "  independence sigma: {v:e}").unwrap();
        }
        if let (Some(gap), Some(ok)) = (step.equivalence_gap, step.equivalence_ok) {
            writeln!(
                s,
                "  equivalence gap: {:e} ({})",
                gap,
                if ok { "ok" } else { "FAILED" }
            )
            .unwrap();
        }
    }
    if let Some(fin) = &trace.final_equivalence {
        writeln!(
            s,
            "final equivalence: {} (forward gap {:e}, backward gap {:e})",
            if fin.equivalent { "equivalent" } else { "NOT equivalent" },
            fin.forward_gap,
            fin.backward_gap
        )
        .unwrap();
    }
    if let Some(msg) = error {
        writeln!(s, "error: {msg}").unwrap();
    }
    s
}

fn render_normal_form(nf: &NormalForm) -> String {
    let rep = nf.report();
    let (lo, hi) = nf.interval();
    let mut s = String::new();
    writeln!(s, "p = {}", rep.p).unwrap();
    writeln!(s, "q = {}", rep.q).unwrap();
    writeln!(s, "theta_hat = {}", rep.theta_hat).unwrap();
    writeln!(s, "x0 = {}", nf.x0()).unwrap();
    writeln!(s, "interval = {lo} {hi}").unwrap();
    writeln!(s, "constant = {}", NormalForm::constant_name()).unwrap();
    s
}

/// Rewrite the family into its two-quadrature normal form, auditing every
/// step. A structured reduction failure still writes the partial trace.
pub fn cmd_reduce(ctx: &Ctx, target: &str) -> Result<bool, CliError> {
    let fam = build_integral(&ctx.problem, target)?;
    let bx = ctx.working_box(fam.param_dim(), &format!("[integral {target}]"))?;
    let options = ReductionOptions::new(bx).with_seed(ctx.seed);
    let mut report = MachineReport::new(&ctx.header("reduce", vec![target]));
    println!("reduce [integral {target}]");

    let trace_path = ctx.out_path("trace.txt");
    let report_path = ctx.out_path("reduce_report.jsonl");
    match reduce_to_normal_form(&fam, &options, &ctx.tol) {
        Ok(outcome) => {
            println!("  initial quadratures: {}", outcome.trace.initial_quadratures);
            for (i, step) in outcome.trace.steps.iter().enumerate() {
                let gap = match step.equivalence_gap {
                    Some(g) => format!(", equivalence gap {g:.3e}"),
                    None => String::new(),
                };
                println!(
                    "  step {}: {} ({} -> {} quadratures{gap})",
                    i + 1,
                    step.rule,
                    step.quadratures_before,
                    step.quadratures_after
                );
            }
            let rep = outcome.normal_form.report();
            println!("  p = {}", rep.p);
            println!("  q = {}", rep.q);
            println!("  theta_hat = {}", rep.theta_hat);
            if let Some(fin) = &outcome.trace.final_equivalence {
                println!(
                    "  final equivalence: {} (forward gap {:.3e}, backward gap {:.3e})",
                    verdict(fin.equivalent),
                    fin.forward_gap,
                    fin.backward_gap
                );
            }

            report.push(&NormalFormRow {
                normal_form: &rep,
                x0: outcome.normal_form.x0(),
                interval: outcome.normal_form.interval(),
                constant: NormalForm::constant_name().to_string(),
            });
            for (i, record) in outcome.trace.steps.iter().enumerate() {
                report.push(&StepRow {
                    step: i + 1,
                    record,
                });
            }
            if let Some(fin) = &outcome.trace.final_equivalence {
                report.push(&serde_json::json!({ "final_equivalence": fin }));
            }

            let nf_path = ctx.out_path("normalform.txt");
            write_atomic(&nf_path, render_normal_form(&outcome.normal_form).as_bytes())
                .map_err(analysis)?;
            write_atomic(&trace_path, render_trace(&outcome.trace, None).as_bytes())
                .map_err(analysis)?;
            report.write_to(&report_path).map_err(analysis)?;

            let pass = outcome.trace.all_checks_passed();
            println!("result: {}", verdict(pass));
            println!(
                "wrote {}, {}, {}",
                nf_path.display(),
                trace_path.display(),
                report_path.display()
            );
            Ok(pass)
        }
        Err(failure) => {
            let msg = failure.error.to_string();
            println!(
                "  initial quadratures: {}",
                failure.partial.initial_quadratures
            );
            for (i, step) in failure.partial.steps.iter().enumerate() {
                println!(
                    "  step {}: {} ({} -> {} quadratures)",
                    i + 1,
                    step.rule,
                    step.quadratures_before,
                    step.quadratures_after
                );
            }
            println!("  reduction failed: {msg}");

            for (i, record) in failure.partial.steps.iter().enumerate() {
                report.push(&StepRow {
                    step: i + 1,
                    record,
                });
            }
            report.push(&serde_json::json!({ "error": msg }));
            write_atomic(&trace_path, render_trace(&failure.partial, Some(&msg)).as_bytes())
                .map_err(analysis)?;
            report.write_to(&report_path).map_err(analysis)?;

            println!("result: FAIL");
            println!("wrote {}, {}", trace_path.display(), report_path.display());
            Ok(false)
        }
    }
}

/// Integrate the oscillator in phase coordinates, then audit the coefficient:
/// constant ones get the travel-time witness, non-constant ones the two-point
/// obstruction probe.
pub fn cmd_prufer(ctx: &Ctx, target: &str) -> Result<bool, CliError> {
    let sec = ctx.problem.secondorder(target).ok_or_else(|| {
        no_such_target(
            "secondorder",
            target,
            ctx.problem
                .secondorders
                .iter()
                .map(|s| s.name.as_str())
                .collect(),
        )
    })?;
    let eq = SecondOrderEq::new(sec.coefficient.clone(), sec.x0, sec.interval)
        .map_err(|e| usage(format!("line {}: [secondorder {}]: {e}", sec.line, sec.name)))?
        .with_breakpoints(sec.breakpoints.clone());
    let grid = ctx.grid_for(sec.interval, &format!("[secondorder {target}]"))?;
    let mut report = MachineReport::new(&ctx.header("prufer", vec![target]));
    println!("prufer [secondorder {target}]");

    let traj = prufer_forward(&eq, sec.u0, sec.du0, &grid, &ctx.tol).map_err(analysis)?;
    let mut csv = String::from("x,theta,logrho,u,du\n");
    for i in 0..traj.grid.len() {
        writeln!(
            csv,
            "{},{},{},{},{}",
            traj.grid[i], traj.theta[i], traj.logrho[i], traj.u[i], traj.du[i]
        )
        .unwrap();
    }
    let csv_path = ctx.out_path("trajectory.csv");
    write_atomic(&csv_path, csv.as_bytes()).map_err(analysis)?;
    println!("  wrote {} ({} rows)", csv_path.display(), traj.grid.len());

    let constant = sec.coefficient.free_vars().is_empty();
    report.push(&serde_json::json!({
        "trajectory": { "csv": "trajectory.csv", "rows": traj.grid.len() },
        "constant_coefficient": constant,
    }));

    let pass = if constant {
        let frozen = eq.coefficient_at(sec.x0, &ctx.tol).map_err(analysis)?;
        let witness =
            restricted_integrability_witness(frozen, std::slice::from_ref(&traj), &ctx.tol)
                .map_err(analysis)?;
        println!("  constant coefficient Q = {frozen}");
        if witness.singular {
            println!(
                "  witness: SINGULAR  the angle equation denominator reaches {:.3e} on the swept range",
                witness.min_denominator
            );
        } else {
            println!(
                "  witness: {}  max deviation {:.3e} (tolerance {:.3e}, min denominator {:.3e})",
                verdict(witness.valid),
                witness.max_deviation.unwrap_or(f64::NAN),
                ctx.tol.constancy_tol,
                witness.min_denominator
            );
        }
        report.push(&serde_json::json!({ "witness": witness }));
        witness.valid
    } else {
        let (lo, hi) = sec.interval;
        let obstruction = nonconstancy_obstruction(
            &eq,
            lo,
            hi,
            &[FRAC_PI_4, FRAC_PI_3],
            None,
            &ctx.tol,
        )
        .map_err(analysis)?;
        println!(
            "  non-constant coefficient, obstruction probe at x1 = {lo}, x2 = {hi}"
        );
        println!(
            "  coefficient gap: {:.3e} (obstruction derivable: {})",
            obstruction.coefficient_gap,
            if obstruction.derivable { "yes" } else { "no" }
        );
        match obstruction.witness_angles {
            Some((y1, y2)) => println!(
                "  obstruction determinant: max |det| = {:.6} at angles ({y1:.4}, {y2:.4})",
                obstruction.max_determinant
            ),
            None => println!(
                "  obstruction determinant: max |det| = {:.6}",
                obstruction.max_determinant
            ),
        }
        report.push(&serde_json::json!({ "obstruction": obstruction }));
        obstruction.derivable && obstruction.max_determinant > DETERMINANT_FLOOR
    };

    let report_path = ctx.out_path("prufer_report.jsonl");
    report.write_to(&report_path).map_err(analysis)?;
    println!("result: {}", verdict(pass));
    println!("wrote {}", report_path.display());
    Ok(pass)
}

/// Evaluate the closed-form linear solution along a grid and audit the
/// equation residual.
pub fn cmd_solve_linear(ctx: &Ctx, target: &str) -> Result<bool, CliError> {
    let sec = ctx.problem.linear(target).ok_or_else(|| {
        no_such_target(
            "linear",
            target,
            ctx.problem.linears.iter().map(|s| s.name.as_str()).collect(),
        )
    })?;
    let eq = LinearFirstOrder::new(sec.p.clone(), sec.q.clone(), sec.x0, sec.interval)
        .map_err(|e| usage(format!("line {}: [linear {}]: {e}", sec.line, sec.name)))?;
    let grid = ctx.grid_for(sec.interval, &format!("[linear {target}]"))?;
    let mut report = MachineReport::new(&ctx.header("solve-linear", vec![target]));
    println!("solve-linear [linear {target}]");

    let out = solve_linear_first_order(&eq, sec.z0, &grid, &ctx.tol).map_err(analysis)?;
    let mut csv = String::from("x,z,dz\n");
    for i in 0..out.grid.len() {
        writeln!(csv, "{},{},{}", out.grid[i], out.values[i], out.derivatives[i]).unwrap();
    }
    let csv_path = ctx.out_path("solution.csv");
    write_atomic(&csv_path, csv.as_bytes()).map_err(analysis)?;
    println!("  wrote {} ({} rows)", csv_path.display(), out.grid.len());

    let pass = out.max_residual <= ctx.tol.constancy_tol;
    println!(
        "  equation residual: {}  max {:.3e} (tolerance {:.3e})",
        verdict(pass),
        out.max_residual,
        ctx.tol.constancy_tol
    );
    report.push(&serde_json::json!({
        "solution": {
            "csv": "solution.csv",
            "rows": out.grid.len(),
            "z0": sec.z0,
            "max_residual": out.max_residual,
            "tolerance": ctx.tol.constancy_tol,
        }
    }));

    let report_path = ctx.out_path("solve_report.jsonl");
    report.write_to(&report_path).map_err(analysis)?;
    println!("result: {}", verdict(pass));
    println!("wrote {}", report_path.display());
    Ok(pass)
}

/// Sampled two-sided equivalence of two integral families.
pub fn cmd_equiv(ctx: &Ctx, target_a: &str, target_b: &str) -> Result<bool, CliError> {
    let fam_a = build_integral(&ctx.problem, target_a)?;
    let fam_b = build_integral(&ctx.problem, target_b)?;
    let box_a = ctx.working_box(fam_a.param_dim(), &format!("[integral {target_a}]"))?;
    let box_b = ctx.working_box(fam_b.param_dim(), &format!("[integral {target_b}]"))?;
    let mut report = MachineReport::new(&ctx.header("equiv", vec![target_a, target_b]));
    println!("equiv [integral {target_a}] ~ [integral {target_b}]");

    let rep = check_equivalence_matched(&fam_a, &box_a, &fam_b, &box_b, &ctx.tol, ctx.seed)
        .map_err(analysis)?;
    println!(
        "  forward gap {:.3e}, backward gap {:.3e} over {} samples per direction (tolerance {:.3e})",
        rep.forward_gap, rep.backward_gap, rep.samples_per_direction, ctx.tol.equiv_tol
    );
    for failure in rep.failures.iter().take(3) {
        println!("  failure: {failure}");
    }
    report.push(&serde_json::json!({ "equivalence": rep }));

    let report_path = ctx.out_path("equiv_report.jsonl");
    report.write_to(&report_path).map_err(analysis)?;
    println!("result: {}", verdict(rep.equivalent));
    println!("wrote {}", report_path.display());
    Ok(rep.equivalent)
}

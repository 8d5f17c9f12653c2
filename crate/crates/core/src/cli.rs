//! Command-line front end: argument types, orchestration and exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::continuation::{
    continue_in_epsilon, starting_state, verify_solution, ContinuationOptions, ContinuationStatus, HState,
    VerifyTols,
};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelConfig, TruncTime};
use crate::oracle::{shooting_oracle, OracleOptions};
use crate::problem::ProblemInstance;
use crate::reduction::{find_branch_points, BranchSearch, BranchSearchResult};
use crate::registry::Registry;
use crate::report::{
    csv_file_name, entries, rows, solution_csv, solution_from_csv, write_atomic, BranchReport, Checked,
    ContinuationReport, ContinuationRow, LinearReport, Num, OracleReport, RunReport, RunSettings,
    SeedFailureReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_NO_DICHOTOMY: i32 = 2;
pub const EXIT_WRONG_BRANCH: i32 = 3;
pub const EXIT_STALLED: i32 = 4;
pub const EXIT_VERIFY_FAILED: i32 = 5;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG_NOT_FOUND: i32 = 66;
pub const EXIT_IO: i32 = 74;

/// Oracle agreement required of the continuation result.
pub const ORACLE_TOL: f64 = 1e-5;

/// The process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NoDichotomy(_) => EXIT_NO_DICHOTOMY,
        Error::WrongBranch(_) => EXIT_WRONG_BRANCH,
        Error::Stalled { .. } => EXIT_STALLED,
        Error::InvalidArgument(_) | Error::Parse(_) => EXIT_USAGE,
        Error::ConfigNotFound(_) => EXIT_CONFIG_NOT_FOUND,
        Error::Io(_) => EXIT_IO,
        Error::NoConvergence { .. }
        | Error::OutOfRange { .. }
        | Error::Stiffness { .. }
        | Error::IllConditionedTransition { .. }
        | Error::SingularJacobian(_)
        | Error::OracleUnavailable(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "halfline-bvp", version, about = "Weakly nonlinear boundary value problems on the half line")]
pub struct Cli {
    /// JSON file with extra problem variants.
    #[arg(long, global = true, value_name = "PATH")]
    pub registry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List registered problems.
    ListProblems {
        #[arg(long)]
        json: bool,
    },
    /// Fundamental matrix, dichotomy, Λ and its kernel, linear solvability.
    Analyze(CommonArgs),
    /// Solve the bifurcation equation for branch points.
    Branch(BranchArgs),
    /// Continue a branch in ε and write the solutions.
    Continue(ContinueArgs),
    /// Check a stored solution against the equations.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputKind {
    Json,
    Csv,
    Both,
}

impl OutputKind {
    fn json(self) -> bool {
        matches!(self, OutputKind::Json | OutputKind::Both)
    }

    fn csv(self) -> bool {
        matches!(self, OutputKind::Csv | OutputKind::Both)
    }
}

fn parse_trunc(s: &str) -> std::result::Result<TruncTime, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(TruncTime::Auto);
    }
    match s.parse::<f64>() {
        Ok(t) if t.is_finite() && t > 0.0 => Ok(TruncTime::Fixed(t)),
        _ => Err(format!("expected a positive number or `auto`, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub problem: String,
    /// Number of grid panels.
    #[arg(long, default_value_t = 400)]
    pub mesh: usize,
    /// Truncation time T, or `auto` to derive it from the dichotomy rate.
    #[arg(long, default_value = "40", value_parser = parse_trunc)]
    pub trunc_time: TruncTime,
    #[arg(long, default_value_t = 1e-10)]
    pub rank_tol: f64,
    /// Tolerance for the verification residuals.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = OutputKind::Both)]
    pub output: OutputKind,
    /// Directory for the report and solution files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Seed for the random multistart points.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random multistart points.
    #[arg(long, default_value_t = 4)]
    pub jitter: usize,
    /// A kernel vector y, comma separated.
    #[arg(long, value_name = "v1,v2,...", allow_hyphen_values = true)]
    pub branch_y: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BranchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ContinueArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: f64,
    /// Solution CSV with columns t,x1,...,xn.
    #[arg(long, value_name = "PATH")]
    pub solution: PathBuf,
}

/// What a command produced: the report, a text summary and the exit code.
#[derive(Debug)]
pub struct Outcome {
    pub report: Option<RunReport>,
    pub summary: String,
    pub exit: i32,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Listing<'a> {
    name: &'a str,
    n: usize,
    p_expected: usize,
    description: &'a str,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let registry = match &cli.registry {
        Some(path) => Registry::with_file(path)?,
        None => Registry::builtin(),
    };
    match &cli.command {
        Command::ListProblems { json } => list_problems(&registry, *json),
        Command::Analyze(args) => analyze(&registry, args),
        Command::Branch(args) => branch(&registry, args),
        Command::Continue(args) => continue_cmd(&registry, args),
        Command::Verify(args) => verify(&registry, args),
    }
}

fn list_problems(registry: &Registry, json: bool) -> Result<Outcome> {
    let summary = if json {
        let items: Vec<Listing> = registry
            .specs()
            .iter()
            .map(|s| Listing {
                name: &s.name,
                n: s.n(),
                p_expected: s.p_expected(),
                description: &s.description,
            })
            .collect();
        serde_json::to_string_pretty(&items).map_err(|e| Error::Parse(e.to_string()))? + "\n"
    } else {
        let mut out = String::new();
        for s in registry.specs() {
            let _ = writeln!(out, "{:<22} n={} p={}  {}", s.name, s.n(), s.p_expected(), s.description);
        }
        out
    };
    Ok(Outcome {
        report: None,
        summary,
        exit: EXIT_OK,
        files: Vec::new(),
    })
}

struct Session {
    problem: ProblemInstance,
    model: Model,
    report: RunReport,
    summary: String,
}

fn settings(common: &CommonArgs, search: Option<&SearchArgs>, eps: Option<f64>, steps: Option<usize>) -> RunSettings {
    RunSettings {
        mesh: common.mesh,
        trunc_time: Num(match common.trunc_time {
            TruncTime::Fixed(t) => t,
            TruncTime::Auto => f64::NAN,
        }),
        rank_tol: Num(common.rank_tol),
        tol: Num(common.tol),
        seed: search.map_or(0, |s| s.seed),
        jitter: search.map_or(0, |s| s.jitter),
        epsilon: eps.map(Num),
        steps,
    }
}

fn check_common(common: &CommonArgs) -> Result<()> {
    if common.mesh < 2 {
        return Err(invalid("--mesh must be at least 2"));
    }
    if !(common.tol > 0.0) {
        return Err(invalid("--tol must be positive"));
    }
    Ok(())
}

fn open(registry: &Registry, command: &str, common: &CommonArgs, settings: RunSettings) -> Result<Session> {
    check_common(common)?;
    let problem = registry.build(&common.problem)?;
    let config = ModelConfig {
        trunc: common.trunc_time,
        panels: common.mesh,
        rank_tol: common.rank_tol,
        ..ModelConfig::default()
    };
    let clock = Instant::now();
    let model = Model::build(&problem, config)?;
    let mut report = RunReport::new(command, &problem.name, settings);
    report.timings.insert("model".into(), clock.elapsed().as_secs_f64());
    Ok(Session {
        problem,
        model,
        report,
        summary: String::new(),
    })
}

/// Fill the dichotomy and linear sections.
fn describe_linear(s: &mut Session) {
    let model = &s.model;
    let d = model.diagnosis();
    let cert = model.dichotomy().clone();
    let _ = writeln!(
        s.summary,
        "problem {}: n = {}, T = {}, dichotomy K = {:.4}, alpha = {}",
        s.problem.name,
        model.dim(),
        model.grid().truncation_time(),
        cert.k(),
        cert.alpha().map_or("-".into(), |a| format!("{a:.4}"))
    );
    let _ = writeln!(s.summary, "singular values of Lambda: {:?}; p = {}", d.singular_values, d.p);
    let solvability = model
        .solvability_residual()
        .map(|r| Checked::at_most(r.norm(), model.solvability_tol()));
    let unique_solution_norm = if d.p == 0 {
        model.x_y(&DVector::zeros(0)).ok().map(|x| x.sup_norm())
    } else {
        None
    };
    if let Some(c) = &solvability {
        let _ = writeln!(
            s.summary,
            "solvability residual {:.3e} (tol {:.1e}): {}",
            c.value.0,
            c.tol.0,
            if c.pass { "solvable" } else { "not solvable" }
        );
        for col in d.w.column_iter() {
            let _ = writeln!(s.summary, "W column: {:?}", col.iter().collect::<Vec<_>>());
        }
    }
    if let Some(norm) = unique_solution_norm {
        let _ = writeln!(s.summary, "unique linear solution, sup norm {norm:.6}");
    }
    s.report.dichotomy = Some(cert);
    s.report.linear = Some(LinearReport {
        lambda: rows(&d.lambda),
        singular_values: d.singular_values.clone(),
        rank_threshold: d.threshold,
        p: d.p,
        v: d.v.column_iter().map(|c| c.iter().copied().collect()).collect(),
        w: d.w.column_iter().map(|c| c.iter().copied().collect()).collect(),
        solvability_residual: solvability,
        unique_solution_norm,
    });
}

fn parse_vector(text: &str, n: usize) -> Result<DVector<f64>> {
    let vals = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| invalid(format!("--branch-y: bad number {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != n {
        return Err(invalid(format!("--branch-y needs {n} components, got {}", vals.len())));
    }
    Ok(DVector::from_vec(vals))
}

/// Kernel coordinates of `y`, which must lie in `ker Λ`.
fn kernel_coordinates(model: &Model, y: &DVector<f64>) -> Result<DVector<f64>> {
    let v = &model.diagnosis().v;
    let c = v.transpose() * y;
    let off = (y - v * &c).norm();
    if off > 1e-8 * y.norm().max(1.0) {
        return Err(invalid(format!("--branch-y is not in ker(Lambda) (distance {off:.3e})")));
    }
    Ok(c)
}

fn require_kernel(model: &Model) -> Result<()> {
    if model.kernel_dim() == 0 {
        return Err(Error::WrongBranch(
            "Lambda is invertible (p = 0), so there is no bifurcation equation; use `analyze` \
             or `continue` from the unique linear solution"
                .into(),
        ));
    }
    Ok(())
}

fn search_branches(s: &mut Session, search: &SearchArgs) -> Result<BranchSearchResult> {
    let mut seeds = Vec::new();
    if let Some(text) = &search.branch_y {
        let y = parse_vector(text, s.model.dim())?;
        seeds.push(kernel_coordinates(&s.model, &y)?);
    }
    let opts = BranchSearch {
        seeds,
        jitter: search.jitter,
        rng_seed: search.seed,
        ..BranchSearch::default()
    };
    let clock = Instant::now();
    let result = find_branch_points(&s.model, &opts)?;
    s.report.timings.insert("branch".into(), clock.elapsed().as_secs_f64());
    for b in &result.points {
        let _ = writeln!(
            s.summary,
            "branch y = {:?}: residual {:.3e}, phi = {:?}, condition {:.3e}, {}",
            b.y.as_slice(),
            b.residual_norm(),
            rows(&b.jacobian.phi),
            b.jacobian.condition,
            if b.certified { "certified" } else { "not certified" }
        );
        s.report.branches.push(BranchReport {
            c: entries(&b.c),
            y: entries(&b.y),
            residual: Checked::at_most(b.residual_norm(), opts.branch_tol),
            phi: rows(&b.jacobian.phi),
            condition: Checked::at_most(b.jacobian.condition, b.jacobian.cond_cap),
            sigma_min: Num(b.jacobian.sigma_min),
            certified: b.certified,
            seed_index: b.seed_index,
            iterations: b.iterations,
        });
    }
    if result.points.is_empty() {
        let _ = writeln!(s.summary, "no branch point found from {} seeds", result.failures.len());
    }
    for f in &result.failures {
        s.report.branch_failures.push(SeedFailureReport {
            seed_index: f.seed_index,
            seed: entries(&f.seed),
            reason: f.reason.clone(),
        });
    }
    Ok(result)
}

fn finish(mut s: Session, common: &CommonArgs, exit: i32, mut files: Vec<PathBuf>, started: Instant) -> Result<Outcome> {
    s.report.timings.insert("total".into(), started.elapsed().as_secs_f64());
    if common.output.json() {
        let path = report_path(&common.out, &s.report.problem, &s.report.command);
        write_atomic(&path, s.report.to_json()?.as_bytes())?;
        let _ = writeln!(s.summary, "report: {}", path.display());
        files.push(path);
    }
    Ok(Outcome {
        report: Some(s.report),
        summary: s.summary,
        exit,
        files,
    })
}

/// `<out>/<problem>_<command>.json`.
pub fn report_path(out: &Path, problem: &str, command: &str) -> PathBuf {
    out.join(format!("{problem}_{command}.json"))
}

fn analyze(registry: &Registry, args: &CommonArgs) -> Result<Outcome> {
    let started = Instant::now();
    let mut s = open(registry, "analyze", args, settings(args, None, None, None))?;
    describe_linear(&mut s);
    finish(s, args, EXIT_OK, Vec::new(), started)
}

fn branch(registry: &Registry, args: &BranchArgs) -> Result<Outcome> {
    let started = Instant::now();
    let mut s = open(registry, "branch", &args.common, settings(&args.common, Some(&args.search), None, None))?;
    describe_linear(&mut s);
    require_kernel(&s.model)?;
    search_branches(&mut s, &args.search)?;
    finish(s, &args.common, EXIT_OK, Vec::new(), started)
}

fn continue_cmd(registry: &Registry, args: &ContinueArgs) -> Result<Outcome> {
    let started = Instant::now();
    if !args.epsilon.is_finite() {
        return Err(invalid("--epsilon must be finite"));
    }
    let common = &args.common;
    let mut s = open(
        registry,
        "continue",
        common,
        settings(common, Some(&args.search), Some(args.epsilon), Some(args.steps)),
    )?;
    describe_linear(&mut s);
    let (c, start_from) = if s.model.kernel_dim() == 0 {
        (DVector::zeros(0), "unique linear solution".to_string())
    } else if let Some(text) = &args.search.branch_y {
        let y = parse_vector(text, s.model.dim())?;
        (kernel_coordinates(&s.model, &y)?, "--branch-y".to_string())
    } else {
        let found = search_branches(&mut s, &args.search)?;
        let b = found.first_certified().ok_or_else(|| {
            Error::WrongBranch("no certified branch point; pass a kernel vector with --branch-y".into())
        })?;
        (b.c.clone(), format!("certified branch from seed {}", b.seed_index))
    };
    let start: HState = starting_state(&s.model, &c)?;
    let opts = ContinuationOptions {
        verify: VerifyTols::uniform(common.tol),
        ..ContinuationOptions::default()
    };
    let clock = Instant::now();
    let result = continue_in_epsilon(&s.model, &start, args.epsilon, args.steps, opts)?;
    s.report.timings.insert("continuation".into(), clock.elapsed().as_secs_f64());

    let mut files = Vec::new();
    let mut table = Vec::new();
    for step in &result.steps {
        let csv = if common.output.csv() {
            let name = csv_file_name(&s.problem.name, step.eps);
            let path = common.out.join(&name);
            write_atomic(&path, solution_csv(&step.solution).as_bytes())?;
            files.push(path);
            Some(name)
        } else {
            None
        };
        let _ = writeln!(
            s.summary,
            "eps {:<12e} deviation {:.3e}  newton {} its  verify {}",
            step.eps,
            step.deviation,
            step.newton.iterations,
            if step.verify.pass { "pass" } else { "FAIL" }
        );
        table.push(ContinuationRow {
            eps: step.eps,
            deviation: Num(step.deviation),
            newton_iterations: step.newton.iterations,
            newton_residual: Checked::at_most(step.newton.residual_norm, opts.newton.tol),
            verify: step.verify.clone(),
            csv,
        });
    }

    if let Some(last) = result.steps.last() {
        let clock = Instant::now();
        let guess = start.x.at_node(0).clone();
        let oracle = match shooting_oracle(&s.problem, s.model.grid().clone(), last.eps, &guess, OracleOptions::default()) {
            Ok(o) => {
                let diff = o.x.sup_distance(&last.solution);
                let _ = writeln!(s.summary, "shooting oracle at eps {:e}: sup difference {diff:.3e}", last.eps);
                OracleReport {
                    eps: last.eps,
                    agreement: Some(Checked::at_most(diff, ORACLE_TOL)),
                    iterations: Some(o.iterations),
                    error: None,
                }
            }
            Err(e) => {
                let _ = writeln!(s.summary, "shooting oracle unavailable: {e}");
                OracleReport {
                    eps: last.eps,
                    agreement: None,
                    iterations: None,
                    error: Some(e.to_string()),
                }
            }
        };
        s.report.oracle = Some(oracle);
        s.report.timings.insert("oracle".into(), clock.elapsed().as_secs_f64());
    }

    let exit = match &result.status {
        ContinuationStatus::Completed => EXIT_OK,
        ContinuationStatus::Stalled { eps, reason } => {
            let _ = writeln!(s.summary, "stalled at eps {eps:e}: {reason}");
            EXIT_STALLED
        }
    };
    s.report.continuation = Some(ContinuationReport {
        start_c: entries(&c),
        start_from,
        ladder: result.ladder.clone(),
        rows: table,
        status: result.status.clone(),
    });
    finish(s, common, exit, files, started)
}

fn verify(registry: &Registry, args: &VerifyArgs) -> Result<Outcome> {
    let started = Instant::now();
    let common = &args.common;
    check_common(common)?;
    if !args.epsilon.is_finite() {
        return Err(invalid("--epsilon must be finite"));
    }
    let problem = registry.build(&common.problem)?;
    let text = std::fs::read_to_string(&args.solution).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ConfigNotFound(args.solution.clone()),
        _ => Error::Io(e),
    })?;
    let x = solution_from_csv(&text, problem.dim())?;
    let config = ModelConfig {
        rank_tol: common.rank_tol,
        ..ModelConfig::default()
    };
    let model = Model::with_grid(&problem, x.grid().clone(), config)?;
    let c = model.diagnosis().v.transpose() * x.at_node(0);
    let report = verify_solution(&model, &x, &c, args.epsilon, VerifyTols::uniform(common.tol))?;
    let mut s = Session {
        report: RunReport::new("verify", &problem.name, settings(common, None, Some(args.epsilon), None)),
        problem,
        model,
        summary: String::new(),
    };
    let _ = writeln!(
        s.summary,
        "ode residual {:.3e} (worst at node {}, t = {}), boundary residual {:.3e}, membership {:.3e}: {}",
        report.ode_residual,
        report.worst_node,
        report.worst_time,
        report.boundary_residual,
        report.membership_residual,
        if report.pass { "pass" } else { "FAIL" }
    );
    let exit = if report.pass { EXIT_OK } else { EXIT_VERIFY_FAILED };
    s.report.verify = Some(report);
    finish(s, common, exit, Vec::new(), started)
}

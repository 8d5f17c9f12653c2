//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::E;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use halfline_bvp::boundary::{diagnose, BoundaryForm};
use halfline_bvp::cli::{
    EXIT_CONFIG_NOT_FOUND, EXIT_NO_DICHOTOMY, EXIT_OK, EXIT_STALLED, EXIT_USAGE, EXIT_VERIFY_FAILED,
    EXIT_WRONG_BRANCH,
};
use halfline_bvp::continuation::{
    continue_in_epsilon, jacobian_h, jacobian_h_fd, starting_state, ContinuationOptions, ContinuationResult,
    HState, VerifyTols,
};
use halfline_bvp::error::Error;
use halfline_bvp::grid::{build_grid, Grading, TailEstimate};
use halfline_bvp::linear::{
    estimate_dichotomy, integrate_fundamental, DichotomyMode, FundamentalOptions, LinearPart, MatrixFn, VectorFn,
};
use halfline_bvp::model::{Model, ModelConfig};
use halfline_bvp::oracle::{shooting_oracle, OracleOptions};
use halfline_bvp::problem::{Nonlinearity, ProblemInstance};
use halfline_bvp::reduction::{find_branch_points, BranchSearch};
use halfline_bvp::registry::Registry;
use halfline_bvp::report::RunReport;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mat2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, c, d])
}

/// Least-squares slope of `log y` against `log x`.
fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.abs().ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// 1. Linear round trip

/// `x*(t) = a e^{-b t} + c e^{-d t} sin(w t)` per component.
#[derive(Clone, Copy)]
struct Mode {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    w: f64,
}

impl Mode {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: rng.random_range(-1.0..1.0),
            b: rng.random_range(0.5..2.0),
            c: rng.random_range(-1.0..1.0),
            d: rng.random_range(0.5..2.0),
            w: rng.random_range(0.0..3.0),
        }
    }

    fn value(&self, t: f64) -> f64 {
        self.a * (-self.b * t).exp() + self.c * (-self.d * t).exp() * (self.w * t).sin()
    }

    fn deriv(&self, t: f64) -> f64 {
        let e = (-self.d * t).exp();
        -self.b * self.a * (-self.b * t).exp() + self.c * e * (self.w * (self.w * t).cos() - self.d * (self.w * t).sin())
    }

    /// `∫_0^∞ e^{-t} x*(t) dt`.
    fn laplace1(&self) -> f64 {
        self.a / (1.0 + self.b) + self.c * self.w / ((1.0 + self.d).powi(2) + self.w * self.w)
    }
}

/// Linear part and boundary form for kernel dimension `p`, plus `Γ(x*)` in closed form.
fn round_trip_case(p: usize, modes: [Mode; 2]) -> ProblemInstance {
    let value = move |t: f64| DVector::from_fn(2, |i, _| modes[i].value(t));
    let (a, gamma, u) = match p {
        0 => {
            let b: MatrixFn = Arc::new(|t| DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.25])) * (-t).exp());
            let gamma = BoundaryForm::initial_value(2)
                .with_kernel(b, TailEstimate::exponential(0.5, 1.0, 0.0).unwrap())
                .unwrap();
            let u = value(0.0) + DVector::from_vec(vec![0.5 * modes[0].laplace1(), 0.25 * modes[1].laplace1()]);
            (mat2(-1.0, 0.5, 0.0, -1.0), gamma, u)
        }
        1 => {
            let gamma = BoundaryForm::new(2)
                .with_point_mass(0.0, DMatrix::identity(2, 2))
                .unwrap()
                .with_point_mass(1.0, mat2(0.0, 0.0, 0.0, -E))
                .unwrap();
            let u = value(0.0) + mat2(0.0, 0.0, 0.0, -E) * value(1.0);
            (-DMatrix::identity(2, 2), gamma, u)
        }
        _ => {
            let gamma = BoundaryForm::new(2)
                .with_point_mass(0.0, DMatrix::identity(2, 2))
                .unwrap()
                .with_point_mass(1.0, -DMatrix::identity(2, 2) * E)
                .unwrap();
            let u = value(0.0) - value(1.0) * E;
            (-DMatrix::identity(2, 2), gamma, u)
        }
    };
    let a2 = a.clone();
    let h: VectorFn = Arc::new(move |t| DVector::from_fn(2, |i, _| modes[i].deriv(t)) - &a2 * value(t));
    ProblemInstance::new(
        format!("round-trip-p{p}"),
        LinearPart::constant(a).unwrap(),
        gamma,
        h,
        u,
        Nonlinearity::zero(2),
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut worst_solv: f64 = 0.0;
    let mut worst_err: f64 = 0.0;
    let mut bad = Vec::new();
    for trial in 0..20 {
        let p = trial % 3;
        let modes = [Mode::random(&mut rng), Mode::random(&mut rng)];
        let problem = round_trip_case(p, modes);
        let model = Model::build(&problem, ModelConfig::default()).unwrap();
        if model.kernel_dim() != p {
            bad.push(format!("trial {trial}: p = {} expected {p}", model.kernel_dim()));
            continue;
        }
        if let Some(r) = model.solvability_residual() {
            worst_solv = worst_solv.max(r.norm());
            if r.norm() > 1e-7 {
                bad.push(format!("trial {trial}: solvability residual {:.2e}", r.norm()));
            }
        } else {
            let xbar = model.x_y(&DVector::zeros(0)).unwrap();
            let err = model
                .grid()
                .nodes()
                .iter()
                .enumerate()
                .map(|(k, &t)| (xbar.at_node(k) - DVector::from_fn(2, |i, _| modes[i].value(t))).norm())
                .fold(0.0, f64::max);
            worst_err = worst_err.max(err);
            if err > 1e-6 {
                bad.push(format!("trial {trial}: sup error {err:.2e}"));
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "20 trials over p = 0, 1, 2: max solvability residual {worst_solv:.2e} (<= 1e-7), max p=0 sup error {worst_err:.2e} (<= 1e-6){}",
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Kernel algebra

/// `|sin|` of the angle between two 2-vectors.
fn angle_sin(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a[0] * b[1] - a[1] * b[0]).abs() / (a.norm() * b.norm())
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let d = diagnose(&DMatrix::identity(2, 2), 1e-10).unwrap();
    pass &= d.p == 0;
    notes.push(format!("I: p = {}", d.p));

    let d = diagnose(&mat2(1.0, 0.0, 0.0, 0.0), 1e-10).unwrap();
    let ang = angle_sin(&d.w.column(0).into_owned(), &DVector::from_vec(vec![0.0, 1.0]));
    pass &= d.p == 1 && ang <= 1e-10;
    notes.push(format!("diag(1,0): p = {}, W angle {ang:.1e}", d.p));

    let mut worst: f64 = 0.0;
    for (kappa, row) in [(1.0, [1.0, 1.0]), (-2.5, [0.3, -1.7]), (0.1, [2.0, 5.0]), (7.0, [-1.0, 0.25])] {
        let lambda = mat2(row[0], row[1], kappa * row[0], kappa * row[1]);
        let d = diagnose(&lambda, 1e-10).unwrap();
        if d.p != 1 {
            pass = false;
            notes.push(format!("kappa {kappa}: p = {}", d.p));
            continue;
        }
        let ang = angle_sin(&d.w.column(0).into_owned(), &DVector::from_vec(vec![-kappa, 1.0]));
        worst = worst.max(ang);
    }
    pass &= worst <= 1e-10;
    notes.push(format!("kappa rows: W vs [-kappa, 1] max angle {worst:.1e}"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 3. Dichotomy

fn criterion_3() -> Outcome {
    let grid = Arc::new(build_grid(40.0, 400, Grading::default()).unwrap());
    let opts = FundamentalOptions::default();
    let mut notes = Vec::new();

    let fm = integrate_fundamental(&LinearPart::constant(-DMatrix::identity(2, 2)).unwrap(), grid.clone(), opts).unwrap();
    let cert = estimate_dichotomy(&fm, DichotomyMode::Exponential, 64).unwrap();
    let (k, alpha) = (cert.k(), cert.alpha().unwrap_or(f64::NAN));
    let ok1 = (1.0..=1.2).contains(&k) && (0.9..=1.0).contains(&alpha);
    notes.push(format!("A = -I: K = {k:.4}, alpha = {alpha:.4}"));

    let fm = integrate_fundamental(&LinearPart::constant(mat2(-0.5, 0.0, 1.0, -0.5)).unwrap(), grid.clone(), opts).unwrap();
    let cert = estimate_dichotomy(&fm, DichotomyMode::Exponential, 64).unwrap();
    let alpha2 = cert.alpha().unwrap_or(f64::NAN);
    let ok2 = alpha2 >= 0.2 && cert.max_observed_ratio <= 1.0;
    notes.push(format!(
        "Jordan block: K = {:.4}, alpha = {alpha2:.4}, max sampled ratio {:.3}",
        cert.k(),
        cert.max_observed_ratio
    ));

    let fm = integrate_fundamental(&LinearPart::constant(DMatrix::from_element(1, 1, 1.0)).unwrap(), grid, opts);
    let ok3 = match fm.and_then(|fm| estimate_dichotomy(&fm, DichotomyMode::Exponential, 64)) {
        Err(Error::NoDichotomy(_)) => {
            notes.push("A = +1: no-dichotomy".into());
            true
        }
        Err(e) => {
            notes.push(format!("A = +1: unexpected error {e}"));
            false
        }
        Ok(c) => {
            notes.push(format!("A = +1: certificate {:?}", c.bound));
            false
        }
    };
    outcome(ok1 && ok2 && ok3, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 4. Scalar analytic model

fn criterion_4() -> Outcome {
    let problem = Registry::builtin().build("scalar-model").unwrap();
    let model = Model::build(&problem, ModelConfig::default()).unwrap();
    let found = find_branch_points(&model, &BranchSearch::default()).unwrap();
    let Some(b) = found.first_certified() else {
        return outcome(false, "no certified branch");
    };
    let (y, res, phi) = (b.y[0], b.residual_norm(), b.jacobian.phi[(0, 0)]);
    let branch_ok = (y - 2.0).abs() <= 1e-6 && res <= 1e-8 && (phi - 0.5).abs() <= 1e-6;
    let start = starting_state(&model, &b.c).unwrap();
    let result = continue_in_epsilon(&model, &start, 0.5, 6, ContinuationOptions::default()).unwrap();
    let mut worst: f64 = 0.0;
    for step in &result.steps {
        for (k, &t) in model.grid().nodes().iter().enumerate() {
            worst = worst.max((step.solution.at_node(k)[0] - 2.0 * (-t).exp()).abs());
        }
    }
    let cont_ok = result.completed() && result.steps.len() == 6 && worst <= 1e-7;
    outcome(
        branch_ok && cont_ok,
        format!(
            "y = {y:.10}, residual {res:.1e} (<= 1e-8), phi = {phi:.8} (0.5 +- 1e-6); eps {:?}: max |x_eps - 2e^-t| = {worst:.1e} (<= 1e-7)",
            result.ladder
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Jacobian fidelity

fn branch_start(model: &Model, name: &str) -> DVector<f64> {
    if model.kernel_dim() == 0 {
        return DVector::zeros(0);
    }
    let found = find_branch_points(model, &BranchSearch::default()).unwrap();
    match found.first_certified() {
        Some(b) => b.c.clone(),
        None => {
            assert_eq!(name, "scalar-model-g0", "no certified branch on {name}");
            // g = 0: every kernel vector solves the reduced problem.
            DVector::from_element(model.kernel_dim(), 1.0)
        }
    }
}

fn criterion_5() -> Outcome {
    let reg = Registry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut states = 0;
    for spec in reg.specs() {
        let problem = spec.build().unwrap();
        let config = ModelConfig {
            panels: 100,
            ..ModelConfig::default()
        };
        let model = Model::build(&problem, config).unwrap();
        let (n, p) = (model.dim(), model.kernel_dim());
        for _ in 0..10 {
            let c = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
            let base = model.x_y(&c).unwrap();
            let amp: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| (rng.random_range(-0.5..0.5), rng.random_range(0.3..1.5), rng.random_range(0.0..4.0)))
                .collect();
            let x = base
                .map(|t, v| v + DVector::from_fn(n, |i, _| amp[i].0 * (-amp[i].1 * t).exp() * (amp[i].2 * t + 0.3).cos()))
                .unwrap();
            let eps = rng.random_range(-0.5..0.5);
            let state = HState::new(x, c);
            let j = jacobian_h(&model, &state, eps).unwrap();
            let jfd = jacobian_h_fd(&model, &state, eps, 1e-6).unwrap();
            let rel = (&j - &jfd).amax() / j.amax();
            if rel > worst {
                worst = rel;
                worst_name = spec.name.clone();
            }
            states += 1;
        }
    }
    outcome(
        worst <= 1e-5,
        format!("{states} random states on all built-ins (100 panels): max relative error {worst:.2e} ({worst_name}) (<= 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// 6 and 8. Convergence law

fn ladder_run(name: &str, eps: f64, steps: usize, tol: f64) -> (Model, ContinuationResult) {
    let problem = Registry::builtin().build(name).unwrap();
    let model = Model::build(&problem, ModelConfig::default()).unwrap();
    let c = branch_start(&model, name);
    let start = starting_state(&model, &c).unwrap();
    let opts = ContinuationOptions {
        verify: VerifyTols::uniform(tol),
        ..ContinuationOptions::default()
    };
    let result = continue_in_epsilon(&model, &start, eps, steps, opts).unwrap();
    (model, result)
}

struct LawCheck {
    slope: f64,
    max_dev: f64,
    verified: bool,
    completed: bool,
}

fn law_check(name: &str) -> LawCheck {
    let (_, result) = ladder_run(name, 1e-2, 6, 1e-5);
    let eps: Vec<f64> = result.steps.iter().map(|s| s.eps).collect();
    let dev = result.deviations();
    LawCheck {
        slope: loglog_slope(&eps, &dev),
        max_dev: dev.iter().copied().fold(0.0, f64::max),
        verified: result.steps.iter().all(|s| s.verify.pass),
        completed: result.completed() && result.steps.len() == 6,
    }
}

/// Discretization noise level below which `x_ε` and `x_y` are indistinguishable.
const NOISE_FLOOR: f64 = 1e-7;

fn criterion_6() -> Outcome {
    let synthetic = law_check("diag-kernel");
    let example = law_check("paper-ex1-corrected");
    let synthetic_ok = synthetic.completed && synthetic.verified && synthetic.slope >= 0.9;
    // f and g vanish identically on x_y for this example, so x_ε = x_y for
    // every ε and the deviations are pure discretization noise. The fitted
    // slope of noise carries no information; the convergence statement
    // itself is checked instead.
    let degenerate = example.max_dev <= NOISE_FLOOR;
    let example_ok = example.completed && example.verified && (example.slope >= 0.9 || degenerate);
    outcome(
        synthetic_ok && example_ok,
        format!(
            "diag-kernel: slope {:.4} (>= 0.9), verify@1e-5 {}; paper-ex1-corrected: slope {:.4}, max deviation {:.2e}{}, verify@1e-5 {}",
            synthetic.slope,
            synthetic.verified,
            example.slope,
            example.max_dev,
            if degenerate {
                " (x_eps = x_y up to discretization noise; slope undefined, convergence holds trivially)"
            } else {
                ""
            },
            example.verified
        ),
    )
}

fn criterion_8() -> Outcome {
    let problem = Registry::builtin().build("linear-invertible").unwrap();
    let model = Model::build(&problem, ModelConfig::default()).unwrap();
    // Closed form of the unique linear solution.
    let xbar = |t: f64| {
        let (e1, e2, e3) = ((-t).exp(), (-2.0 * t).exp(), (-3.0 * t).exp());
        DVector::from_vec(vec![
            49.0 / 144.0 * t * e1 + 1183.0 / 720.0 * e1 - e2 + e3 / 16.0,
            49.0 / 72.0 * e1 - e3 / 4.0,
        ])
    };
    let start = starting_state(&model, &DVector::zeros(0)).unwrap();
    let closed_err = model
        .grid()
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, &t)| (start.x.at_node(k) - xbar(t)).norm())
        .fold(0.0, f64::max);
    let law = law_check("linear-invertible");
    let nontrivial = law.max_dev > NOISE_FLOOR;
    outcome(
        closed_err <= 1e-6 && law.completed && law.verified && law.slope >= 0.9 && nontrivial,
        format!(
            "x_bar vs closed form {closed_err:.1e} (<= 1e-6); slope {:.4} (>= 0.9), max deviation {:.2e}, verify@1e-5 {}",
            law.slope, law.max_dev, law.verified
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Oracle equivalence

fn criterion_7() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut pass = true;
    for spec in Registry::builtin().specs() {
        for eps in [1e-2, -1e-2] {
            let (model, result) = ladder_run(&spec.name, eps, 3, 1e-6);
            let Some(last) = result.steps.last().filter(|_| result.completed()) else {
                pass = false;
                notes.push(format!("{} eps {eps}: continuation {:?}", spec.name, result.status));
                continue;
            };
            let problem = spec.build().unwrap();
            let guess = result.start.at_node(0).clone();
            match shooting_oracle(&problem, model.grid().clone(), eps, &guess, OracleOptions::default()) {
                Ok(o) => {
                    let d = o.x.sup_distance(&last.solution);
                    worst = worst.max(d);
                    if d > 1e-5 {
                        pass = false;
                        notes.push(format!("{} eps {eps}: disagreement {d:.2e}", spec.name));
                    }
                }
                Err(e) => {
                    pass = false;
                    notes.push(format!("{} eps {eps}: {e}", spec.name));
                }
            }
        }
    }
    outcome(
        pass,
        format!(
            "{} built-ins at eps = +-1e-2: max sup difference {worst:.2e} (<= 1e-5){}",
            Registry::builtin().specs().len(),
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. CLI contract

fn cli(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_halfline-bvp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run the binary");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn without_timings(path: &Path) -> RunReport {
    let mut r = RunReport::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
    r.timings.clear();
    r
}

fn expect(notes: &mut Vec<String>, dir: &Path, what: &str, args: &[&str], code: i32) -> String {
    let (got, text) = cli(args, dir);
    if got != code {
        notes.push(format!("{what}: exit {got}, expected {code}: {}", text.trim()));
    }
    text
}

/// The node index in "worst at node N".
fn located_node(text: &str) -> Option<usize> {
    let rest = &text[text.find("worst at node ")? + "worst at node ".len()..];
    rest.split(|c: char| !c.is_ascii_digit()).next()?.parse().ok()
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut notes = Vec::new();

    std::fs::create_dir_all(dir.join("a")).unwrap();
    std::fs::create_dir_all(dir.join("b")).unwrap();
    let run = ["continue", "--problem", "diag-kernel", "--epsilon", "1e-2", "--steps", "3", "--seed", "42", "--jitter", "6"];
    expect(&mut notes, dir, "continue a", &[&run[..], &["--out", "a"]].concat(), EXIT_OK);
    expect(&mut notes, dir, "continue b", &[&run[..], &["--out", "b"]].concat(), EXIT_OK);

    // JSON round trip.
    let report_a = dir.join("a/diag-kernel_continue.json");
    let text = std::fs::read_to_string(&report_a).unwrap_or_default();
    let round_trip = RunReport::from_json(&text)
        .and_then(|r| Ok((RunReport::from_json(&r.to_json()?)? == r, r.to_json()? == text)))
        .unwrap_or((false, false));
    if round_trip != (true, true) {
        notes.push(format!("JSON round trip (parse-serialize-parse equal, text equal) = {round_trip:?}"));
    }

    // Bit reproducibility under a fixed seed.
    let report_b = dir.join("b/diag-kernel_continue.json");
    let same_report = report_a.exists() && report_b.exists() && without_timings(&report_a) == without_timings(&report_b);
    let csv_names = ["diag-kernel_eps0.0025.csv", "diag-kernel_eps0.005.csv", "diag-kernel_eps0.01.csv"];
    let same_csv = csv_names.iter().all(|n| {
        let (a, b) = (std::fs::read(dir.join("a").join(n)), std::fs::read(dir.join("b").join(n)));
        matches!((a, b), (Ok(a), Ok(b)) if a == b)
    });
    if !(same_report && same_csv) {
        notes.push(format!("reproducibility: report {same_report}, csv {same_csv}"));
    }

    // Exit codes.
    expect(&mut notes, dir, "list-problems", &["list-problems"], EXIT_OK);
    expect(&mut notes, dir, "branch on p = 0", &["branch", "--problem", "linear-invertible"], EXIT_WRONG_BRANCH);
    expect(&mut notes, dir, "missing registry", &["--registry", "nope.json", "list-problems"], EXIT_CONFIG_NOT_FOUND);
    expect(&mut notes, dir, "bad flag", &["analyze", "--problem", "scalar-model", "--mesh", "many"], EXIT_USAGE);
    expect(&mut notes, dir, "unknown problem", &["analyze", "--problem", "no-such-problem"], EXIT_USAGE);
    std::fs::write(
        dir.join("variants.json"),
        r#"{"problems": [{"name": "growing", "base": "scalar-model", "params": {"decay": -1}}]}"#,
    )
    .unwrap();
    expect(
        &mut notes,
        dir,
        "no dichotomy",
        &["--registry", "variants.json", "analyze", "--problem", "growing"],
        EXIT_NO_DICHOTOMY,
    );
    expect(
        &mut notes,
        dir,
        "stalled",
        &["continue", "--problem", "linear-invertible", "--epsilon", "50", "--steps", "3", "--output", "json"],
        EXIT_STALLED,
    );
    let good = "a/diag-kernel_eps0.01.csv";
    let verify = |file: &str| ["verify", "--problem", "diag-kernel", "--epsilon", "1e-2", "--solution", file].map(String::from);
    let args: Vec<String> = verify(good).to_vec();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    expect(&mut notes, dir, "verify written csv", &refs, EXIT_OK);

    // Corrupt x2 at node 100 (line 0 is the header).
    let csv = std::fs::read_to_string(dir.join(good)).unwrap_or_default();
    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    if lines.len() > 101 {
        let mut fields: Vec<String> = lines[101].split(',').map(String::from).collect();
        fields[2] = (fields[2].parse::<f64>().unwrap() + 1e-3).to_string();
        lines[101] = fields.join(",");
    }
    std::fs::write(dir.join("bad.csv"), lines.join("\n")).unwrap();
    let args: Vec<String> = verify("bad.csv").to_vec();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let text = expect(&mut notes, dir, "verify corrupted csv", &refs, EXIT_VERIFY_FAILED);
    match located_node(&text) {
        Some(k) if k.abs_diff(100) <= 2 => {}
        other => notes.push(format!("corruption at node 100 located at {other:?}")),
    }
    expect(
        &mut notes,
        dir,
        "verify wrong dimension",
        &["verify", "--problem", "scalar-model", "--epsilon", "0", "--solution", good],
        EXIT_USAGE,
    );
    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            "JSON round trip exact; two runs with --seed 42 identical (report minus timings, CSV bytes); exit codes 0/2/3/4/5/64/66 as documented; corrupted node located".into()
        } else {
            notes.join("; ")
        },
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 9] = [
        ("linear round trip", criterion_1, Duration::from_secs(10)),
        ("kernel algebra", criterion_2, Duration::from_secs(5)),
        ("dichotomy", criterion_3, Duration::from_secs(5)),
        ("scalar analytic model", criterion_4, Duration::from_secs(5)),
        ("jacobian fidelity", criterion_5, Duration::from_secs(30)),
        ("convergence law", criterion_6, Duration::from_secs(60)),
        ("oracle equivalence", criterion_7, Duration::from_secs(60)),
        ("invertible branch", criterion_8, Duration::from_secs(60)),
        ("cli contract", criterion_9, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = clock.elapsed();
        let in_time = elapsed <= *budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} [{name}] {} ({:.2}s, budget {}s{})",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! The discretized operator equation `H((x, c), ε) = 0`, its Newton solve, and
//! continuation in `ε` from a branch point.
//!
//! Unknowns are the node values `x(t_0), ..., x(t_m)` followed by the kernel
//! coordinates `c`. With `b(x, ε) = u - Γ(Φ∫Φ^{-1}h) + ε[∫g(x) - Γ(Φ∫Φ^{-1}f(x))]`,
//!
//! ```text
//! H1(t_k) = x(t_k) - Φ(t_k)(V c + Λ^+ b) - Φ(t_k) ∫_0^{t_k} Φ^{-1}(h + ε f(x))
//! H2      = W^T [∫ g(x) - Γ(Φ ∫ Φ^{-1} f(x))]
//! ```
//!
//! The `Λ^+ b` term carries the part of the boundary condition that lies in the
//! range of `Λ`; `H2 = 0` carries the rest.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;
use crate::model::Model;
use crate::reduction::bifurcation_defect;

/// A point in the unknown space of `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HState {
    pub x: GridFunction,
    pub c: DVector<f64>,
}

impl HState {
    pub fn new(x: GridFunction, c: DVector<f64>) -> Self {
        Self { x, c }
    }

    pub fn pack(&self) -> DVector<f64> {
        let xs = self.x.stacked();
        let mut z = DVector::zeros(xs.len() + self.c.len());
        z.rows_mut(0, xs.len()).copy_from(&xs);
        z.rows_mut(xs.len(), self.c.len()).copy_from(&self.c);
        z
    }

    pub fn unpack(model: &Model, z: &DVector<f64>) -> Result<Self> {
        let nx = model.dim() * model.grid().len();
        if z.len() != nx + model.kernel_dim() {
            return Err(invalid("state vector has the wrong length"));
        }
        let x = GridFunction::from_stacked(model.grid().clone(), model.dim(), &z.as_slice()[..nx])?;
        Ok(Self {
            x,
            c: z.rows(nx, model.kernel_dim()).into_owned(),
        })
    }
}

/// Size of the unknown vector, `n(m+1) + p`.
pub fn unknown_count(model: &Model) -> usize {
    model.dim() * model.grid().len() + model.kernel_dim()
}

fn check_state(model: &Model, state: &HState) -> Result<()> {
    if state.x.grid().nodes() != model.grid().nodes() || state.x.dim() != model.dim() {
        return Err(invalid("state does not live on the model grid"));
    }
    if state.c.len() != model.kernel_dim() {
        return Err(invalid("kernel coordinates have the wrong dimension"));
    }
    Ok(())
}

/// `H` at a state; rows are `H1` node by node, then `H2`.
pub fn assemble_h(model: &Model, state: &HState, eps: f64) -> Result<DVector<f64>> {
    check_state(model, state)?;
    Ok(residual(model, &state.pack(), eps))
}

fn split(model: &Model, z: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
    let n = model.dim();
    let len = model.grid().len();
    let x = (0..len).map(|k| z.rows(k * n, n).into_owned()).collect();
    let c = z.rows(n * len, model.kernel_dim()).into_owned();
    (x, c)
}

fn residual(model: &Model, z: &DVector<f64>, eps: f64) -> DVector<f64> {
    let n = model.dim();
    let len = model.grid().len();
    let diag = model.diagnosis();
    let fm = model.fundamental();
    let (x, c) = split(model, z);

    let defect = bifurcation_defect(model, &x);
    let b = model.linear_defect() + &defect * eps;
    let v0 = &diag.v * &c + &diag.pinv * b;
    let forced = if eps != 0.0 {
        Some(fm.volterra(&model.f_samples(&x)).expect("samples match the grid"))
    } else {
        None
    };

    let mut out = DVector::zeros(z.len());
    for k in 0..len {
        let mut h1 = &x[k] - fm.at_node(k) * &v0 - &model.particular()[k];
        if let Some(y) = &forced {
            h1 -= &y[k] * eps;
        }
        out.rows_mut(k * n, n).copy_from(&h1);
    }
    out.rows_mut(n * len, diag.p).copy_from(&(diag.w.transpose() * defect));
    out
}

/// Analytic Jacobian of `H`, from the Fréchet derivatives of `f` and `g`.
pub fn jacobian_h(model: &Model, state: &HState, eps: f64) -> Result<DMatrix<f64>> {
    check_state(model, state)?;
    Ok(jacobian(model, &state.pack(), eps))
}

fn jacobian(model: &Model, z: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let n = model.dim();
    let len = model.grid().len();
    let nx = n * len;
    let p = model.kernel_dim();
    let diag = model.diagnosis();
    let fm = model.fundamental();
    let nl = &model.problem().nonlinearity;
    let cum = model.cumulative_weights();
    let (x, _) = split(model, z);

    // D_j = q_j ∂g_j - K_j ∂f_j is the node-j derivative of the bifurcation defect.
    let mut d = Vec::with_capacity(len);
    let mut pulled = Vec::with_capacity(len);
    for (j, &t) in model.grid().nodes().iter().enumerate() {
        let jf = nl.jac_f(t, &x[j]);
        let jg = nl.jac_g(t, &x[j]);
        d.push(jg * model.quadrature_weights()[j] - &model.gamma_volterra_blocks()[j] * &jf);
        pulled.push(fm.inverse_at_node(j) * jf);
    }

    let mut jac = DMatrix::zeros(nx + p, nx + p);
    for i in 0..nx {
        jac[(i, i)] = 1.0;
    }
    if eps != 0.0 {
        let range: Vec<DMatrix<f64>> = d.iter().map(|dj| &diag.pinv * dj).collect();
        for k in 0..len {
            let phi = fm.at_node(k);
            for j in 0..len {
                let mut inner = range[j].clone();
                let ckj = cum[(k, j)];
                if ckj != 0.0 {
                    inner += &pulled[j] * ckj;
                }
                let block = phi * inner * eps;
                let mut view = jac.view_mut((k * n, j * n), (n, n));
                view -= block;
            }
        }
    }
    for k in 0..len {
        let block = fm.at_node(k) * &diag.v;
        jac.view_mut((k * n, nx), (n, p)).copy_from(&(-block));
    }
    let wt = diag.w.transpose();
    for (j, dj) in d.iter().enumerate() {
        jac.view_mut((nx, j * n), (p, n)).copy_from(&(&wt * dj));
    }
    jac
}

/// Central-difference Jacobian of `H`, for checking [`jacobian_h`].
pub fn jacobian_h_fd(model: &Model, state: &HState, eps: f64, step: f64) -> Result<DMatrix<f64>> {
    check_state(model, state)?;
    let z = state.pack();
    let size = z.len();
    let mut jac = DMatrix::zeros(size, size);
    let mut zp = z.clone();
    for i in 0..size {
        let h = step * (1.0 + z[i].abs());
        zp[i] = z[i] + h;
        let rp = residual(model, &zp, eps);
        zp[i] = z[i] - h;
        let rm = residual(model, &zp, eps);
        zp[i] = z[i];
        jac.set_column(i, &((rp - rm) / (2.0 * h)));
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Stop when `‖H‖_∞ <= tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residual_norm: f64,
}

const MIN_DAMPING: f64 = 1.0 / 1024.0;
const PIVOT_FLOOR: f64 = 1e-14;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m: f64, x| if m.is_nan() || x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Damped Newton with Armijo backtracking on `‖H‖_2`.
pub fn newton_solve(model: &Model, initial: &HState, eps: f64, opts: NewtonOptions) -> Result<(HState, NewtonStats)> {
    check_state(model, initial)?;
    let mut z = initial.pack();
    let mut r = residual(model, &z, eps);
    let mut iterations = 0;
    loop {
        let norm_inf = inf_norm(&r);
        if !norm_inf.is_finite() {
            return Err(Error::Stalled {
                eps,
                reason: "residual is not finite".into(),
            });
        }
        if norm_inf <= opts.tol {
            break;
        }
        if iterations == opts.max_iter {
            return Err(Error::Stalled {
                eps,
                reason: format!("{} Newton iterations left |H| = {norm_inf:.3e}", opts.max_iter),
            });
        }
        let lu = jacobian(model, &z, eps).lu();
        let pivots = lu.u().diagonal().map(f64::abs);
        if pivots.min() <= PIVOT_FLOOR * pivots.max() {
            return Err(Error::SingularJacobian(format!(
                "pivot ratio {:.3e} at eps = {eps}, iteration {iterations}",
                pivots.min() / pivots.max()
            )));
        }
        let step = lu
            .solve(&(-&r))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::SingularJacobian(format!("linear solve failed at eps = {eps}")))?;
        let norm2 = r.norm();
        let mut lambda = 1.0;
        loop {
            let trial = &z + &step * lambda;
            let rt = residual(model, &trial, eps);
            let nt = rt.norm();
            if nt.is_finite() && nt <= (1.0 - 1e-4 * lambda) * norm2 {
                z = trial;
                r = rt;
                break;
            }
            lambda *= 0.5;
            if lambda < MIN_DAMPING {
                return Err(Error::Stalled {
                    eps,
                    reason: format!("line search failed at iteration {iterations} (|H| = {norm_inf:.3e})"),
                });
            }
        }
        iterations += 1;
        debug!(eps, iterations, damping = lambda, residual = inf_norm(&r), "newton step");
    }
    let state = HState::unpack(model, &z)?;
    model.check_g_tail(&model.g_samples(state.x.values()))?;
    Ok((
        state,
        NewtonStats {
            iterations,
            residual_norm: inf_norm(&r),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyTols {
    pub ode: f64,
    pub boundary: f64,
    pub membership: f64,
}

impl VerifyTols {
    pub fn uniform(tol: f64) -> Self {
        Self {
            ode: tol,
            boundary: tol,
            membership: tol,
        }
    }
}

impl Default for VerifyTols {
    fn default() -> Self {
        Self::uniform(1e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `max_k |x'(t_k) - A x - h - ε f|` over interior nodes.
    pub ode_residual: f64,
    pub worst_node: usize,
    pub worst_time: f64,
    /// `|Γ(x) - u - ε ∫ g|`.
    pub boundary_residual: f64,
    /// `‖Λ V c‖`.
    pub membership_residual: f64,
    pub tols: VerifyTols,
    pub pass: bool,
}

/// Check a sampled solution against the differential equation and the
/// boundary condition directly, independent of how it was computed.
pub fn verify_solution(model: &Model, x: &GridFunction, c: &DVector<f64>, eps: f64, tols: VerifyTols) -> Result<VerifyReport> {
    if x.grid().nodes() != model.grid().nodes() || x.dim() != model.dim() {
        return Err(invalid("solution does not live on the model grid"));
    }
    let grid = model.grid();
    let problem = model.problem();
    let nl = &problem.nonlinearity;
    let mut worst = (0.0, 0);
    for k in 1..grid.panels() {
        let t = grid.nodes()[k];
        let mut dx = DVector::zeros(model.dim());
        for (j, w) in grid.derivative_weights(k) {
            dx += x.at_node(j) * w;
        }
        let mut rhs = problem.linear.eval(t) * x.at_node(k) + &model.h_samples()[k];
        if eps != 0.0 {
            rhs += nl.f(t, x.at_node(k)) * eps;
        }
        let r = (dx - rhs).norm();
        if !(r <= worst.0) {
            worst = (r, k);
        }
    }
    let g = model.g_samples(x.values());
    let bc = model.discrete_gamma().apply(x.values()) - &problem.u - model.integrate(&g) * eps;
    let diag = model.diagnosis();
    let membership = if c.len() == diag.p {
        (&diag.lambda * (&diag.v * c)).norm()
    } else {
        f64::INFINITY
    };
    let boundary_residual = bc.norm();
    let pass = worst.0 <= tols.ode && boundary_residual <= tols.boundary && membership <= tols.membership;
    Ok(VerifyReport {
        ode_residual: worst.0,
        worst_node: worst.1,
        worst_time: grid.nodes()[worst.1],
        boundary_residual,
        membership_residual: membership,
        tols,
        pass,
    })
}

/// `ε_target / 2^{steps-1-j}` for `j = 0..steps`; a single zero when the target is zero.
pub fn epsilon_ladder(eps_target: f64, steps: usize) -> Vec<f64> {
    if eps_target == 0.0 || steps == 0 {
        return vec![0.0];
    }
    (0..steps)
        .map(|j| eps_target / 2f64.powi((steps - 1 - j) as i32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContinuationOptions {
    pub newton: NewtonOptions,
    pub verify: VerifyTols,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ContinuationStatus {
    Completed,
    Stalled { eps: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationStep {
    pub eps: f64,
    pub solution: GridFunction,
    pub c: DVector<f64>,
    /// `‖x_ε - x_y‖_∞` on the nodes.
    pub deviation: f64,
    pub newton: NewtonStats,
    pub verify: VerifyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationResult {
    pub start_c: DVector<f64>,
    pub start: GridFunction,
    pub ladder: Vec<f64>,
    pub steps: Vec<ContinuationStep>,
    pub status: ContinuationStatus,
}

impl ContinuationResult {
    pub fn deviations(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.deviation).collect()
    }

    pub fn completed(&self) -> bool {
        self.status == ContinuationStatus::Completed
    }
}

/// Where continuation starts: a branch point `(x_y, c)` when `Λ` is singular, or
/// the unique linear solution `x̄` (with empty `c`) when it is invertible.
pub fn starting_state(model: &Model, c: &DVector<f64>) -> Result<HState> {
    Ok(HState::new(model.x_y(c)?, c.clone()))
}

/// Track `x_ε` along a geometric ladder up to `eps_target`, warm-starting each
/// Newton solve from the previous solution.
pub fn continue_in_epsilon(
    model: &Model,
    start: &HState,
    eps_target: f64,
    steps: usize,
    opts: ContinuationOptions,
) -> Result<ContinuationResult> {
    check_state(model, start)?;
    if !eps_target.is_finite() {
        return Err(invalid("epsilon must be finite"));
    }
    let ladder = epsilon_ladder(eps_target, steps);
    let mut out = ContinuationResult {
        start_c: start.c.clone(),
        start: start.x.clone(),
        ladder: ladder.clone(),
        steps: Vec::new(),
        status: ContinuationStatus::Completed,
    };
    let mut current = start.clone();
    for &eps in &ladder {
        match newton_solve(model, &current, eps, opts.newton) {
            Ok((state, newton)) => {
                let deviation = state.x.sup_distance(&start.x);
                let verify = verify_solution(model, &state.x, &state.c, eps, opts.verify)?;
                info!(eps, deviation, iterations = newton.iterations, verified = verify.pass, "continuation step");
                out.steps.push(ContinuationStep {
                    eps,
                    solution: state.x.clone(),
                    c: state.c.clone(),
                    deviation,
                    newton,
                    verify,
                });
                current = state;
            }
            Err(err @ (Error::Stalled { .. } | Error::SingularJacobian(_) | Error::NoConvergence { .. })) => {
                info!(eps, %err, "continuation stalled");
                out.status = ContinuationStatus::Stalled {
                    eps,
                    reason: err.to_string(),
                };
                break;
            }
            Err(err) => return Err(err),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryForm;
    use crate::linear::{LinearPart, StateFn, StateJacobianFn, VectorFn};
    use crate::model::ModelConfig;
    use crate::problem::{Nonlinearity, ProblemInstance};
    use crate::reduction::{bifurcation_jacobian, bifurcation_residual, DEFAULT_COND_CAP};
    use std::sync::Arc;

    fn scalar_gamma() -> BoundaryForm {
        BoundaryForm::new(1)
            .with_point_mass(0.0, DMatrix::from_element(1, 1, 1.0))
            .unwrap()
            .with_point_mass(1.0, DMatrix::from_element(1, 1, -std::f64::consts::E))
            .unwrap()
    }

    fn scalar_model(nl: Nonlinearity) -> Model {
        let h: VectorFn = Arc::new(|_| DVector::zeros(1));
        let problem = ProblemInstance::new(
            "scalar",
            LinearPart::constant(DMatrix::from_element(1, 1, -1.0)).unwrap(),
            scalar_gamma(),
            h,
            DVector::zeros(1),
            nl,
        )
        .unwrap();
        Model::build(&problem, ModelConfig::default()).unwrap()
    }

    fn analytic_scalar() -> Model {
        let zero: StateFn = Arc::new(|_, _| DVector::zeros(1));
        let g: StateFn = Arc::new(|t, x| DVector::from_element(1, (-t).exp() * (x[0] - 1.0)));
        scalar_model(Nonlinearity::new(zero, g))
    }

    /// f and g that both act, so every Jacobian block is exercised.
    fn nonlinear_scalar() -> Model {
        let f: StateFn = Arc::new(|t, x| DVector::from_element(1, 0.5 * (-t).exp() * x[0] * x[0]));
        let df: StateJacobianFn = Arc::new(|t, x| DMatrix::from_element(1, 1, (-t).exp() * x[0]));
        let g: StateFn = Arc::new(|t, x| DVector::from_element(1, (-t).exp() * (x[0] + 0.2 * x[0].powi(3) - 1.0)));
        let dg: StateJacobianFn = Arc::new(|t, x| DMatrix::from_element(1, 1, (-t).exp() * (1.0 + 0.6 * x[0] * x[0])));
        scalar_model(Nonlinearity::new(f, g).with_jacobians(df, dg))
    }

    fn c1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn exact(model: &Model) -> GridFunction {
        GridFunction::from_fn(model.grid().clone(), 1, |t| c1(2.0 * (-t).exp())).unwrap()
    }

    #[test]
    fn residual_at_branch_reduces_to_bifurcation_residual() {
        let model = nonlinear_scalar();
        for y in [0.5, 1.7] {
            let state = starting_state(&model, &c1(y)).unwrap();
            let h = assemble_h(&model, &state, 0.0).unwrap();
            let nx = model.grid().len();
            assert!(h.rows(0, nx).amax() < 1e-14);
            let b = bifurcation_residual(&model, &c1(y)).unwrap();
            assert!((h[nx] - b[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_nonlinearity_gives_zero_residual() {
        let model = scalar_model(Nonlinearity::zero(1));
        let state = starting_state(&model, &c1(0.8)).unwrap();
        for eps in [0.0, 0.3, 5.0] {
            assert!(assemble_h(&model, &state, eps).unwrap().amax() < 1e-14);
        }
    }

    #[test]
    fn closed_form_solution_is_a_root() {
        let model = analytic_scalar();
        let state = HState::new(exact(&model), c1(2.0));
        for eps in [0.0, 0.1, 0.5, 3.0] {
            assert!(assemble_h(&model, &state, eps).unwrap().amax() < 1e-7);
        }
    }

    #[test]
    fn jacobian_structure_at_zero_eps() {
        let model = nonlinear_scalar();
        let state = starting_state(&model, &c1(1.0)).unwrap();
        let jac = jacobian_h(&model, &state, 0.0).unwrap();
        let nx = model.grid().len();
        assert_eq!(jac.view((0, 0), (nx, nx)).into_owned(), DMatrix::identity(nx, nx));
        for k in 0..nx {
            let phi = (-model.grid().nodes()[k]).exp();
            assert!((jac[(k, nx)] + phi).abs() < 1e-15);
        }
        // Schur complement of the identity block is φ.
        let mut schur = jac[(nx, nx)];
        for k in 0..nx {
            schur -= jac[(nx, k)] * jac[(k, nx)];
        }
        let phi = bifurcation_jacobian(&model, &c1(1.0), DEFAULT_COND_CAP).unwrap().phi[(0, 0)];
        assert!((schur - phi).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = nonlinear_scalar();
        let base = starting_state(&model, &c1(1.3)).unwrap();
        let x = base.x.map(|t, v| v + c1(0.1 * (-0.5 * t).exp() * (3.0 * t).sin())).unwrap();
        let state = HState::new(x, c1(1.1));
        for eps in [0.0, 0.2] {
            let an = jacobian_h(&model, &state, eps).unwrap();
            let fd = jacobian_h_fd(&model, &state, eps, 1e-6).unwrap();
            let rel = (&an - &fd).norm() / an.norm();
            assert!(rel < 1e-7, "eps {eps}: {rel}");
        }
    }

    #[test]
    fn newton_from_exact_solution_takes_no_steps() {
        let model = analytic_scalar();
        let start = starting_state(&model, &c1(2.0)).unwrap();
        let (_, stats) = newton_solve(&model, &start, 0.3, Default::default()).unwrap();
        assert!(stats.iterations <= 1);
    }

    #[test]
    fn newton_recovers_closed_form() {
        let model = analytic_scalar();
        let start = starting_state(&model, &c1(1.0)).unwrap();
        let (state, _) = newton_solve(&model, &start, 0.1, Default::default()).unwrap();
        assert!(state.x.sup_distance(&exact(&model)) < 1e-7);
        assert!((state.c[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn huge_eps_fails_gracefully() {
        let model = nonlinear_scalar();
        let start = starting_state(&model, &c1(0.8)).unwrap();
        let err = newton_solve(&model, &start, 1e6, Default::default()).unwrap_err();
        assert!(
            matches!(err, Error::Stalled { .. } | Error::SingularJacobian(_) | Error::NoConvergence { .. }),
            "{err}"
        );
    }

    #[test]
    fn ladder_shape() {
        assert_eq!(epsilon_ladder(0.5, 4), vec![0.0625, 0.125, 0.25, 0.5]);
        assert_eq!(epsilon_ladder(0.0, 6), vec![0.0]);
        assert_eq!(epsilon_ladder(-1.0, 2), vec![-0.5, -1.0]);
    }

    #[test]
    fn continuation_on_scalar_model() {
        let model = analytic_scalar();
        let start = starting_state(&model, &c1(2.0)).unwrap();
        let res = continue_in_epsilon(&model, &start, 0.5, 4, Default::default()).unwrap();
        assert!(res.completed());
        assert_eq!(res.steps.len(), 4);
        for step in &res.steps {
            assert!(step.deviation <= 1e-7);
            assert!(step.solution.sup_distance(&exact(&model)) <= 1e-7);
            let strict = verify_solution(&model, &step.solution, &step.c, step.eps, VerifyTols::uniform(1e-8)).unwrap();
            assert!(strict.pass, "{strict:?}");
        }
    }

    #[test]
    fn zero_target_returns_start_exactly() {
        let model = nonlinear_scalar();
        let start = starting_state(&model, &c1(1.0)).unwrap();
        let x0 = assemble_h(&model, &start, 0.0).unwrap();
        let res = continue_in_epsilon(&model, &start, 0.0, 6, Default::default()).unwrap();
        assert_eq!(res.steps.len(), 1);
        if x0.amax() <= 1e-10 {
            assert_eq!(res.steps[0].deviation, 0.0);
            assert_eq!(res.steps[0].newton.iterations, 0);
        }
    }

    #[test]
    fn zero_nonlinearity_continuation_stays_put() {
        let model = scalar_model(Nonlinearity::zero(1));
        let start = starting_state(&model, &c1(0.4)).unwrap();
        let res = continue_in_epsilon(&model, &start, 1.0, 3, Default::default()).unwrap();
        assert!(res.deviations().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn singular_branch_stalls() {
        let model = scalar_model(Nonlinearity::zero(1));
        // With f = g = 0 the H2 row vanishes, so the Jacobian is singular.
        let start = HState::new(model.x_y(&c1(0.4)).unwrap().map(|_, v| v * 1.01).unwrap(), c1(0.4));
        let res = continue_in_epsilon(&model, &start, 0.1, 2, Default::default()).unwrap();
        assert!(matches!(res.status, ContinuationStatus::Stalled { .. }));
    }

    #[test]
    fn verify_flags_a_bump() {
        let model = analytic_scalar();
        let good = exact(&model);
        let report = verify_solution(&model, &good, &c1(2.0), 0.5, VerifyTols::default()).unwrap();
        assert!(report.pass, "{report:?}");
        let k = 150;
        let bumped = good
            .map(|t, v| {
                let s = (t - model.grid().nodes()[k]) / 0.05;
                v + c1(1e-2 * (-s * s).exp())
            })
            .unwrap();
        let report = verify_solution(&model, &bumped, &c1(2.0), 0.5, VerifyTols::default()).unwrap();
        assert!(!report.pass);
        assert!(report.ode_residual > 1e-3);
        assert!((report.worst_time - model.grid().nodes()[k]).abs() < 0.1);
    }
}

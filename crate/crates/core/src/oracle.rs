//! Independent cross-check: integrate the full nonlinear ODE from a trial
//! initial value with an adaptive Dormand-Prince 5(4) scheme and root-solve the
//! truncated boundary condition by Newton with a finite-difference Jacobian.
//!
//! Nothing here touches the fundamental matrix, the panel quadrature rules, or
//! the Lyapunov-Schmidt splitting.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use tracing::debug;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, SemiInfiniteGrid};
use crate::problem::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Stop when `|F(v)| <= newton_tol`.
    pub newton_tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-14,
            max_steps: 1_000_000,
            newton_tol: 1e-12,
            max_iter: 40,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x: GridFunction,
    pub v: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order ones.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

type Rhs<'a> = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + 'a;

/// Adaptive Dormand-Prince from `t0` to `t1`, landing exactly on `t1`.
fn dopri5(rhs: &Rhs<'_>, t0: f64, t1: f64, y0: &DVector<f64>, h_init: f64, opts: &OracleOptions) -> Result<(DVector<f64>, f64)> {
    let mut t = t0;
    let mut y = y0.clone();
    let mut h = h_init.min(t1 - t0);
    let mut k1 = rhs(t, &y);
    let mut steps = 0;
    while t < t1 {
        if steps >= opts.max_steps {
            return Err(Error::OracleUnavailable(format!("step budget exhausted at t = {t}")));
        }
        steps += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        let mut k = vec![k1.clone()];
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[s][j] != 0.0 {
                    ys += kj * (h * A[s][j]);
                }
            }
            k.push(rhs(t + C[s] * h, &ys));
        }
        // Stage 7 is evaluated at the fifth-order solution.
        let mut y_new = y.clone();
        for (j, kj) in k.iter().take(6).enumerate() {
            if A[6][j] != 0.0 {
                y_new += kj * (h * A[6][j]);
            }
        }
        let mut err = DVector::zeros(y.len());
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err += kj * (h * E[j]);
            }
        }
        let size = err
            .iter()
            .zip(y.iter().zip(y_new.iter()))
            .map(|(e, (a, b))| (e / (opts.atol + opts.rtol * a.abs().max(b.abs()))).powi(2))
            .sum::<f64>();
        let size = (size / y.len() as f64).sqrt();
        if !size.is_finite() {
            return Err(Error::OracleUnavailable(format!("integration blew up near t = {t}")));
        }
        let factor = if size == 0.0 { 5.0 } else { (0.9 * size.powf(-0.2)).clamp(0.2, 5.0) };
        if size <= 1.0 {
            t = if last { t1 } else { t + h };
            y = y_new;
            k1 = k.swap_remove(6);
            h *= factor;
        } else {
            h *= factor.min(1.0);
            if h < 1e-14 * t1.max(1.0) {
                return Err(Error::OracleUnavailable(format!("step size underflow at t = {t}")));
            }
        }
    }
    Ok((y, h))
}

struct Shot {
    x: Vec<DVector<f64>>,
    kernel_integral: DVector<f64>,
    g_integral: DVector<f64>,
}

fn shoot(problem: &ProblemInstance, grid: &SemiInfiniteGrid, eps: f64, v: &DVector<f64>, opts: &OracleOptions) -> Result<Shot> {
    let n = problem.dim();
    let kernel = problem.gamma.kernel().cloned();
    let nl = &problem.nonlinearity;
    let rhs = |t: f64, z: &DVector<f64>| {
        let x = z.rows(0, n).into_owned();
        let mut dz = DVector::zeros(3 * n);
        let mut dx = problem.linear.eval(t) * &x + (problem.h)(t);
        if eps != 0.0 {
            dx += nl.f(t, &x) * eps;
        }
        dz.rows_mut(0, n).copy_from(&dx);
        if let Some(k) = &kernel {
            dz.rows_mut(n, n).copy_from(&((k.b)(t) * &x));
        }
        dz.rows_mut(2 * n, n).copy_from(&nl.g(t, &x));
        dz
    };
    let mut z = DVector::zeros(3 * n);
    z.rows_mut(0, n).copy_from(v);
    let nodes = grid.nodes();
    let mut x = Vec::with_capacity(nodes.len());
    x.push(v.clone());
    let mut h = (nodes[1] - nodes[0]) * 0.1;
    for w in nodes.windows(2) {
        let (z_next, h_next) = dopri5(&rhs, w[0], w[1], &z, h, opts)?;
        z = z_next;
        h = h_next;
        x.push(z.rows(0, n).into_owned());
    }
    Ok(Shot {
        x,
        kernel_integral: z.rows(n, n).into_owned(),
        g_integral: z.rows(2 * n, n).into_owned(),
    })
}

/// `Γ_T(x_v) - u - ε ∫_0^T g(t, x_v)`.
fn boundary_map(problem: &ProblemInstance, grid: &Arc<SemiInfiniteGrid>, eps: f64, shot: &Shot) -> Result<DVector<f64>> {
    let mut gamma = shot.kernel_integral.clone();
    for pm in problem.gamma.point_masses() {
        let mut xt = DVector::zeros(problem.dim());
        for (j, w) in grid.interpolation_weights(pm.t)? {
            xt += &shot.x[j] * w;
        }
        gamma += &pm.c * xt;
    }
    if let Some(custom) = problem.gamma.custom() {
        gamma += (custom.eval)(&GridFunction::new(grid.clone(), shot.x.clone())?);
    }
    Ok(gamma - &problem.u - &shot.g_integral * eps)
}

/// Solve the full problem by shooting on the nodes of `grid`, starting Newton
/// from the initial value `guess`.
pub fn shooting_oracle(
    problem: &ProblemInstance,
    grid: Arc<SemiInfiniteGrid>,
    eps: f64,
    guess: &DVector<f64>,
    opts: OracleOptions,
) -> Result<OracleSolution> {
    let n = problem.dim();
    if guess.len() != n {
        return Err(Error::InvalidArgument("oracle guess has the wrong dimension".into()));
    }
    let eval = |v: &DVector<f64>| -> Result<(Shot, DVector<f64>)> {
        let shot = shoot(problem, &grid, eps, v, &opts)?;
        let f = boundary_map(problem, &grid, eps, &shot)?;
        Ok((shot, f))
    };
    let mut v = guess.clone();
    let (mut shot, mut f) = eval(&v)?;
    for iteration in 0..=opts.max_iter {
        let norm = f.norm();
        debug!(iteration, residual = norm, "oracle newton");
        if norm <= opts.newton_tol {
            return Ok(OracleSolution {
                x: GridFunction::new(grid.clone(), shot.x)?,
                v,
                residual_norm: norm,
                iterations: iteration,
            });
        }
        if iteration == opts.max_iter {
            break;
        }
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let step = opts.fd_step * (1.0 + v[i].abs());
            let mut vp = v.clone();
            vp[i] += step;
            let mut vm = v.clone();
            vm[i] -= step;
            let col = (eval(&vp)?.1 - eval(&vm)?.1) / (2.0 * step);
            jac.set_column(i, &col);
        }
        let delta = jac
            .lu()
            .solve(&(-&f))
            .filter(|d| d.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::OracleUnavailable("singular shooting Jacobian".into()))?;
        let mut lambda = 1.0;
        loop {
            let trial = &v + &delta * lambda;
            if let Ok((s, ft)) = eval(&trial) {
                if ft.norm() < (1.0 - 1e-4 * lambda) * norm {
                    v = trial;
                    shot = s;
                    f = ft;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1.0 / 1024.0 {
                return Err(Error::OracleUnavailable(format!(
                    "shooting line search failed (|F| = {norm:.3e})"
                )));
            }
        }
    }
    Err(Error::OracleUnavailable(format!(
        "shooting Newton did not converge (|F| = {:.3e})",
        f.norm()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryForm;
    use crate::grid::{build_grid, Grading};
    use crate::linear::{LinearPart, StateFn, VectorFn};
    use crate::problem::Nonlinearity;

    fn grid() -> Arc<SemiInfiniteGrid> {
        Arc::new(build_grid(40.0, 200, Grading::default()).unwrap().with_breakpoints(&[1.0]).unwrap())
    }

    #[test]
    fn dopri_matches_exponential() {
        let rhs = |_t: f64, y: &DVector<f64>| -y.clone();
        let (y, _) = dopri5(&rhs, 0.0, 5.0, &DVector::from_element(1, 1.0), 0.1, &OracleOptions::default()).unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn scalar_model_shoots_to_closed_form() {
        let gamma = BoundaryForm::new(1)
            .with_point_mass(0.0, DMatrix::from_element(1, 1, 1.0))
            .unwrap()
            .with_point_mass(1.0, DMatrix::from_element(1, 1, -std::f64::consts::E))
            .unwrap();
        let zero: StateFn = Arc::new(|_, _| DVector::zeros(1));
        let g: StateFn = Arc::new(|t, x| DVector::from_element(1, (-t).exp() * (x[0] - 1.0)));
        let h: VectorFn = Arc::new(|_| DVector::zeros(1));
        let problem = ProblemInstance::new(
            "scalar",
            LinearPart::constant(DMatrix::from_element(1, 1, -1.0)).unwrap(),
            gamma,
            h,
            DVector::zeros(1),
            Nonlinearity::new(zero, g),
        )
        .unwrap();
        let grid = grid();
        let sol = shooting_oracle(&problem, grid.clone(), 0.5, &DVector::from_element(1, 1.0), Default::default()).unwrap();
        for (k, &t) in grid.nodes().iter().enumerate() {
            assert!((sol.x.at_node(k)[0] - 2.0 * (-t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn growing_solution_is_unavailable() {
        let zero: StateFn = Arc::new(|_, _| DVector::zeros(1));
        let f: StateFn = Arc::new(|_, x| DVector::from_element(1, x[0] * x[0]));
        let h: VectorFn = Arc::new(|_| DVector::zeros(1));
        let problem = ProblemInstance::new(
            "blowup",
            LinearPart::constant(DMatrix::from_element(1, 1, 0.0)).unwrap(),
            BoundaryForm::initial_value(1),
            h,
            DVector::from_element(1, 1.0),
            Nonlinearity::new(f, zero),
        )
        .unwrap();
        let opts = OracleOptions {
            max_steps: 10_000,
            ..Default::default()
        };
        let err = shooting_oracle(&problem, grid(), 1.0, &DVector::from_element(1, 1.0), opts).unwrap_err();
        assert!(matches!(err, Error::OracleUnavailable(_)));
    }
}

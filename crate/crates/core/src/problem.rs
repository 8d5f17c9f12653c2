//! Problem instances: `x' = A(t)x + h(t) + ε f(t, x)`, `Γ(x) = u + ε ∫_0^∞ g(t, x(t)) dt`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::boundary::BoundaryForm;
use crate::error::{invalid, Result};
use crate::linear::{DichotomyMode, LinearPart, StateFn, StateJacobianFn, VectorFn};

/// The nonlinear terms `f` and `g` with optional analytic Jacobians.
#[derive(Clone)]
pub struct Nonlinearity {
    pub f: StateFn,
    pub g: StateFn,
    pub df: Option<StateJacobianFn>,
    pub dg: Option<StateJacobianFn>,
    /// Relative central-difference step used when a Jacobian is missing.
    pub fd_step: f64,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("analytic_df", &self.df.is_some())
            .field("analytic_dg", &self.dg.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl Nonlinearity {
    pub fn new(f: StateFn, g: StateFn) -> Self {
        Self {
            f,
            g,
            df: None,
            dg: None,
            fd_step: f64::EPSILON.cbrt(),
        }
    }

    pub fn zero(n: usize) -> Self {
        let zero: StateFn = Arc::new(move |_, _| DVector::zeros(n));
        let jac: StateJacobianFn = Arc::new(move |_, _| DMatrix::zeros(n, n));
        Self::new(zero.clone(), zero).with_jacobians(jac.clone(), jac)
    }

    pub fn with_jacobians(mut self, df: StateJacobianFn, dg: StateJacobianFn) -> Self {
        self.df = Some(df);
        self.dg = Some(dg);
        self
    }

    pub fn f(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }

    pub fn g(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.g)(t, x)
    }

    pub fn jac_f(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.df {
            Some(df) => df(t, x),
            None => central_difference(&self.f, t, x, self.fd_step),
        }
    }

    pub fn jac_g(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.dg {
            Some(dg) => dg(t, x),
            None => central_difference(&self.g, t, x, self.fd_step),
        }
    }

    /// Largest entrywise gap between the analytic Jacobians and central
    /// differences at `(t, x)`, relative to `1 + |J|`.
    pub fn jacobian_mismatch(&self, t: f64, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (func, jac) in [(&self.f, &self.df), (&self.g, &self.dg)] {
            if let Some(jac) = jac {
                let analytic = jac(t, x);
                let fd = central_difference(func, t, x, self.fd_step);
                worst = worst.max((&analytic - fd).amax() / (1.0 + analytic.amax()));
            }
        }
        worst
    }
}

/// Central differences with step `step · (1 + |x_i|)`.
pub fn central_difference(func: &StateFn, t: f64, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = func(t, &xp);
        xp[i] = x[i] - h;
        let fm = func(t, &xp);
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// A complete boundary value problem.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub description: String,
    pub linear: LinearPart,
    pub gamma: BoundaryForm,
    pub h: VectorFn,
    pub u: DVector<f64>,
    pub nonlinearity: Nonlinearity,
    /// Which stability estimate the linear part is expected to satisfy.
    pub dichotomy_mode: DichotomyMode,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("linear", &self.linear)
            .field("gamma", &self.gamma)
            .field("u", &self.u)
            .field("nonlinearity", &self.nonlinearity)
            .field("dichotomy_mode", &self.dichotomy_mode)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        linear: LinearPart,
        gamma: BoundaryForm,
        h: VectorFn,
        u: DVector<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let n = linear.dim();
        if gamma.dim() != n || u.len() != n || h(0.0).len() != n {
            return Err(invalid("problem components differ in dimension"));
        }
        let x0 = DVector::zeros(n);
        if nonlinearity.f(0.0, &x0).len() != n || nonlinearity.g(0.0, &x0).len() != n {
            return Err(invalid("nonlinearity has the wrong dimension"));
        }
        Ok(Self {
            name: name.into(),
            description: String::new(),
            linear,
            gamma,
            h,
            u,
            nonlinearity,
            dichotomy_mode: DichotomyMode::Exponential,
        })
    }

    pub fn with_description(mut self, text: impl Into<String>) -> Self {
        self.description = text.into();
        self
    }

    pub fn with_dichotomy_mode(mut self, mode: DichotomyMode) -> Self {
        self.dichotomy_mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }
}

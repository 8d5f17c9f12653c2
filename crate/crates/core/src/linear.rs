//! The linear part `x' = A(t) x`: fundamental matrix, transition operator,
//! sampled dichotomy constants and variation-of-parameters solves.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::svd::singular_values;
use crate::grid::{GridFunction, KahanSum, PanelStencil, SemiInfiniteGrid};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type StateFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateJacobianFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// The coefficient matrix `A(t)`.
#[derive(Clone)]
pub struct LinearPart {
    n: usize,
    a: MatrixFn,
    constant: Option<DMatrix<f64>>,
}

impl fmt::Debug for LinearPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearPart")
            .field("n", &self.n)
            .field("constant", &self.constant)
            .finish_non_exhaustive()
    }
}

impl LinearPart {
    pub fn constant(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(invalid("A must be a non-empty square matrix"));
        }
        let n = a.nrows();
        let copy = a.clone();
        Ok(Self {
            n,
            a: Arc::new(move |_| copy.clone()),
            constant: Some(a),
        })
    }

    pub fn time_varying(n: usize, a: MatrixFn) -> Self {
        Self {
            n,
            a,
            constant: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn constant_matrix(&self) -> Option<&DMatrix<f64>> {
        self.constant.as_ref()
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        (self.a)(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalOptions {
    /// Relative tolerance for the step-doubling check on each panel.
    pub panel_tol: f64,
    pub max_substeps: usize,
    pub cond_cap: f64,
}

impl Default for FundamentalOptions {
    fn default() -> Self {
        Self {
            panel_tol: 1e-12,
            max_substeps: 1 << 16,
            cond_cap: 1e12,
        }
    }
}

/// `Φ(t)` with `Φ(0) = I` sampled on a grid, plus `Φ'` for Hermite interpolation
/// and `Φ^{-1}` for running integrals.
#[derive(Debug, Clone)]
pub struct FundamentalMatrix {
    grid: Arc<SemiInfiniteGrid>,
    linear: LinearPart,
    phi: Vec<DMatrix<f64>>,
    dphi: Vec<DMatrix<f64>>,
    phi_inv: Vec<DMatrix<f64>>,
    stencils: Vec<PanelStencil>,
}

pub fn integrate_fundamental(
    linear: &LinearPart,
    grid: Arc<SemiInfiniteGrid>,
    opts: FundamentalOptions,
) -> Result<FundamentalMatrix> {
    let n = linear.dim();
    let t = grid.nodes();
    let mut phi = Vec::with_capacity(t.len());
    match linear.constant_matrix() {
        Some(a) => {
            phi.push(DMatrix::identity(n, n));
            for &tk in &t[1..] {
                phi.push((a * tk).exp());
            }
        }
        None => {
            phi.push(DMatrix::identity(n, n));
            let mut substeps = 1;
            for i in 0..grid.panels() {
                let (next, used) = rk4_panel(linear, &phi[i], t[i], t[i + 1], substeps, &opts)?;
                phi.push(next);
                substeps = (used / 2).max(1);
            }
        }
    }

    let identity = DMatrix::<f64>::identity(n, n);
    let mut dphi = Vec::with_capacity(t.len());
    let mut phi_inv = Vec::with_capacity(t.len());
    for (&tk, p) in t.iter().zip(&phi) {
        let sv = singular_values(p)?;
        let cond = sv.max() / sv.min();
        if !(cond <= opts.cond_cap) {
            return Err(Error::IllConditionedTransition { t: tk, cond });
        }
        let inv = p
            .clone()
            .lu()
            .solve(&identity)
            .ok_or(Error::IllConditionedTransition {
                t: tk,
                cond: f64::INFINITY,
            })?;
        dphi.push(linear.eval(tk) * p);
        phi_inv.push(inv);
    }
    let stencils = grid.panel_stencils();
    Ok(FundamentalMatrix {
        grid,
        linear: linear.clone(),
        phi,
        dphi,
        phi_inv,
        stencils,
    })
}

/// Classical RK4 across one panel with step doubling until two substep counts agree.
fn rk4_panel(
    linear: &LinearPart,
    start: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    mut substeps: usize,
    opts: &FundamentalOptions,
) -> Result<(DMatrix<f64>, usize)> {
    let run = |steps: usize| {
        let h = (t1 - t0) / steps as f64;
        let mut y = start.clone();
        for s in 0..steps {
            let t = t0 + s as f64 * h;
            let a0 = linear.eval(t);
            let am = linear.eval(t + 0.5 * h);
            let a1 = linear.eval(t + h);
            let k1 = &a0 * &y;
            let k2 = &am * (&y + &k1 * (0.5 * h));
            let k3 = &am * (&y + &k2 * (0.5 * h));
            let k4 = &a1 * (&y + &k3 * h);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        y
    };
    let mut coarse = run(substeps);
    loop {
        let fine = run(2 * substeps);
        let err = (&fine - &coarse).norm() / (1.0 + fine.norm());
        if err <= opts.panel_tol {
            return Ok((fine, 2 * substeps));
        }
        substeps *= 2;
        if substeps > opts.max_substeps || !fine.iter().all(|v| v.is_finite()) {
            return Err(Error::Stiffness { t0, t1 });
        }
        coarse = fine;
    }
}

impl FundamentalMatrix {
    pub fn grid(&self) -> &Arc<SemiInfiniteGrid> {
        &self.grid
    }

    pub fn linear(&self) -> &LinearPart {
        &self.linear
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// Cubic Hermite between nodes.
    pub fn interpolation_order(&self) -> usize {
        3
    }

    pub fn at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.phi[k]
    }

    pub fn inverse_at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.phi_inv[k]
    }

    pub fn nodes(&self) -> &[DMatrix<f64>] {
        &self.phi
    }

    pub fn stencils(&self) -> &[PanelStencil] {
        &self.stencils
    }

    /// `sup_k ‖Φ(t_k)‖_2`.
    pub fn sup_norm(&self) -> f64 {
        self.phi.iter().map(spectral_norm).fold(0.0, f64::max)
    }

    /// `Φ(t)` anywhere in `[0, T]`.
    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let t_max = self.grid.truncation_time();
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::OutOfRange { t, t_max });
        }
        if let Some(a) = self.linear.constant_matrix() {
            return Ok((a * t).exp());
        }
        if let Some(k) = self.grid.node_index(t) {
            return Ok(self.phi[k].clone());
        }
        let i = self.grid.locate(t)?;
        let nodes = self.grid.nodes();
        let h = nodes[i + 1] - nodes[i];
        let s = (t - nodes[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok(&self.phi[i] * h00
            + &self.dphi[i] * (h10 * h)
            + &self.phi[i + 1] * h01
            + &self.dphi[i + 1] * (h11 * h))
    }

    /// `Φ(t) Φ^{-1}(s)`, via an LU solve rather than an explicit inverse.
    pub fn transition(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let t_max = self.grid.truncation_time();
        for x in [t, s] {
            if !(0.0..=t_max).contains(&x) {
                return Err(Error::OutOfRange { t: x, t_max });
            }
        }
        let n = self.dim();
        if t == s {
            return Ok(DMatrix::identity(n, n));
        }
        if let Some(a) = self.linear.constant_matrix() {
            return Ok((a * (t - s)).exp());
        }
        let phi_t = self.eval(t)?;
        let phi_s = self.eval(s)?;
        // X Φ(s) = Φ(t)  <=>  Φ(s)^T X^T = Φ(t)^T
        let xt = phi_s
            .transpose()
            .lu()
            .solve(&phi_t.transpose())
            .ok_or(Error::IllConditionedTransition {
                t: s,
                cond: f64::INFINITY,
            })?;
        Ok(xt.transpose())
    }

    /// Running integral `Φ(t_k) ∫_0^{t_k} Φ^{-1}(s) ψ(s) ds` at every node.
    pub fn volterra(&self, psi: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if psi.len() != self.grid.len() {
            return Err(invalid(format!(
                "{} forcing samples for a grid of {} nodes",
                psi.len(),
                self.grid.len()
            )));
        }
        let n = self.dim();
        let pulled: Vec<DVector<f64>> = self
            .phi_inv
            .iter()
            .zip(psi)
            .map(|(inv, p)| inv * p)
            .collect();
        let mut acc = KahanSum::new(n);
        let mut out = Vec::with_capacity(psi.len());
        out.push(DVector::zeros(n));
        for (i, st) in self.stencils.iter().enumerate() {
            for (l, w) in st.weights.iter().enumerate() {
                acc.add_scaled(*w, &pulled[st.first + l]);
            }
            out.push(&self.phi[i + 1] * acc.value());
        }
        Ok(out)
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // The Frobenius norm bounds the spectral norm if no factorization passes.
    singular_values(m).map(|s| s.max()).unwrap_or_else(|_| m.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DichotomyMode {
    /// `‖Φ(t)Φ^{-1}(s)‖ <= K e^{-α(t-s)}`.
    Exponential,
    /// `‖Φ(t)Φ^{-1}(s)‖ <= K`.
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DichotomyBound {
    Exponential { k: f64, alpha: f64 },
    Bounded { k: f64 },
}

/// Constants that bound the transition operator on a finite sample of pairs.
///
/// This is a sampled estimate on `[0, T]`, not a proof of the bound for all
/// `t >= s >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCertificate {
    pub bound: DichotomyBound,
    pub sample_count: usize,
    /// `max ‖Φ(t)Φ^{-1}(s)‖ / bound(t - s)` over the samples.
    pub max_observed_ratio: f64,
    /// Upper end of the sampled window.
    pub window: f64,
    pub sampled_estimate: bool,
}

impl DichotomyCertificate {
    pub fn k(&self) -> f64 {
        match self.bound {
            DichotomyBound::Exponential { k, .. } | DichotomyBound::Bounded { k } => k,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.bound {
            DichotomyBound::Exponential { alpha, .. } => Some(alpha),
            DichotomyBound::Bounded { .. } => None,
        }
    }

    /// The bound at lag `u = t - s`.
    pub fn bound_at(&self, u: f64) -> f64 {
        match self.bound {
            DichotomyBound::Exponential { k, alpha } => k * (-alpha * u).exp(),
            DichotomyBound::Bounded { k } => k,
        }
    }
}

/// One sampled pair `(s, t)` with `t >= s` and the transition norm there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSample {
    pub s: f64,
    pub t: f64,
    pub norm: f64,
}

/// Log-spaced times `0, T·1e-3, ..., T` and all ordered pairs between them.
pub fn transition_samples(fm: &FundamentalMatrix, samples: usize) -> Result<Vec<TransitionSample>> {
    if samples < 3 {
        return Err(invalid("need at least 3 sample times"));
    }
    let t_max = fm.grid().truncation_time();
    let mut times = vec![0.0];
    for i in 0..samples - 1 {
        let frac = i as f64 / (samples - 2) as f64;
        times.push((t_max * 10f64.powf(-3.0 * (1.0 - frac))).min(t_max));
    }
    let phis = times
        .iter()
        .map(|&t| fm.eval(t))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(samples * (samples + 1) / 2);
    for (i, &s) in times.iter().enumerate() {
        let lu = phis[i].transpose().lu();
        for (j, &t) in times.iter().enumerate().skip(i) {
            let norm = if i == j {
                1.0
            } else if let Some(a) = fm.linear().constant_matrix() {
                spectral_norm(&(a * (t - s)).exp())
            } else {
                let xt = lu
                    .solve(&phis[j].transpose())
                    .ok_or(Error::IllConditionedTransition {
                        t: s,
                        cond: f64::INFINITY,
                    })?;
                spectral_norm(&xt)
            };
            out.push(TransitionSample { s, t, norm });
        }
    }
    Ok(out)
}

pub const DICHOTOMY_SAFETY: f64 = 1.1;
pub const DEFAULT_DICHOTOMY_SAMPLES: usize = 64;

pub fn estimate_dichotomy(
    fm: &FundamentalMatrix,
    mode: DichotomyMode,
    samples: usize,
) -> Result<DichotomyCertificate> {
    let pairs = transition_samples(fm, samples)?;
    if let Some(bad) = pairs.iter().find(|p| !p.norm.is_finite()) {
        return Err(Error::NoDichotomy(format!(
            "non-finite transition norm at (s, t) = ({}, {})",
            bad.s, bad.t
        )));
    }
    let (slope, intercept) = log_norm_fit(&pairs);
    let max_lag = pairs.iter().map(|p| p.t - p.s).fold(0.0, f64::max);

    let bound = match mode {
        DichotomyMode::Exponential => {
            let fitted = -slope;
            if !(fitted > 1e-8) {
                return Err(Error::NoDichotomy(format!(
                    "sampled transition norms do not decay (log-norm slope {slope:.3e})"
                )));
            }
            let k0 = DICHOTOMY_SAFETY * intercept.exp().max(1.0);
            let mut alpha = fitted;
            let violated =
                |a: f64| pairs.iter().any(|p| p.norm > k0 * (-a * (p.t - p.s)).exp());
            while violated(alpha) && alpha > 1e-6 * fitted {
                alpha *= 0.95;
            }
            let k = DICHOTOMY_SAFETY
                * pairs
                    .iter()
                    .map(|p| p.norm * (alpha * (p.t - p.s)).exp())
                    .fold(0.0, f64::max);
            DichotomyBound::Exponential { k, alpha }
        }
        DichotomyMode::Bounded => {
            if slope * max_lag > std::f64::consts::LN_2 {
                return Err(Error::NoDichotomy(format!(
                    "sampled transition norms grow with the lag (log-norm slope {slope:.3e})"
                )));
            }
            let k = DICHOTOMY_SAFETY * pairs.iter().map(|p| p.norm).fold(0.0, f64::max);
            DichotomyBound::Bounded { k }
        }
    };
    let mut cert = DichotomyCertificate {
        bound,
        sample_count: pairs.len(),
        max_observed_ratio: 0.0,
        window: fm.grid().truncation_time(),
        sampled_estimate: true,
    };
    cert.max_observed_ratio = pairs
        .iter()
        .map(|p| p.norm / cert.bound_at(p.t - p.s))
        .fold(0.0, f64::max);
    Ok(cert)
}

/// Least-squares line through `(t - s, ln ‖Φ(t)Φ^{-1}(s)‖)` over pairs with `t > s`.
fn log_norm_fit(pairs: &[TransitionSample]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|p| p.t > p.s && p.norm > 0.0)
        .map(|p| (p.t - p.s, p.norm.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// A nonlinearity together with the state it is evaluated on.
pub type StateTerm<'a> = (&'a dyn Fn(f64, &DVector<f64>) -> DVector<f64>, &'a GridFunction);

/// `x(t_k) = Φ(t_k) v + Φ(t_k) ∫_0^{t_k} Φ^{-1}(s) [h(s) + ε f(s, x(s))] ds`,
/// with `f` evaluated on the supplied state.
pub fn variation_of_parameters(
    fm: &FundamentalMatrix,
    v: &DVector<f64>,
    forcing: &dyn Fn(f64) -> DVector<f64>,
    eps: f64,
    f_term: Option<StateTerm<'_>>,
) -> Result<GridFunction> {
    let n = fm.dim();
    if v.len() != n {
        return Err(invalid(format!("initial value has dimension {}, expected {n}", v.len())));
    }
    let grid = fm.grid().clone();
    if let Some((_, state)) = &f_term {
        if state.grid().nodes() != grid.nodes() || state.dim() != n {
            return Err(invalid("state does not live on the fundamental matrix grid"));
        }
    }
    let psi: Vec<DVector<f64>> = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut p = forcing(t);
            if let Some((f, state)) = &f_term {
                if eps != 0.0 {
                    p += f(t, state.at_node(k)) * eps;
                }
            }
            p
        })
        .collect();
    if psi.iter().any(|p| p.len() != n) {
        return Err(invalid("forcing has the wrong dimension"));
    }
    let particular = fm.volterra(&psi)?;
    let values = particular
        .into_iter()
        .enumerate()
        .map(|(k, y)| fm.at_node(k) * v + y)
        .collect();
    GridFunction::new(grid, values)
}

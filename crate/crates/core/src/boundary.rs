//! The boundary functional `Γ`, the matrix `Λ = Γ(Φ)`, and the linear
//! solvability analysis built on its singular value decomposition.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::grid::{
    quad_improper, GridFunction, ImproperOptions, KahanSum, SemiInfiniteGrid, TailEstimate,
};
use crate::linear::{spectral_norm, variation_of_parameters, FundamentalMatrix, MatrixFn};
use crate::svd::checked_svd;

/// Default relative threshold for the numerical rank of `Λ`.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// `∫_0^∞ B(t) x(t) dt`, with `tail` bounding `∫_t^∞ ‖B‖`.
#[derive(Clone)]
pub struct IntegralKernel {
    pub b: MatrixFn,
    pub envelope: TailEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub t: f64,
    pub c: DMatrix<f64>,
}

pub type CustomEval = Arc<dyn Fn(&GridFunction) -> DVector<f64> + Send + Sync>;

/// An opaque bounded linear functional on grid functions.
#[derive(Clone)]
pub struct CustomFunctional {
    pub eval: CustomEval,
    pub norm_bound: f64,
}

/// `Γ(x) = ∫_0^∞ B(t) x(t) dt + Σ_k C_k x(t_k) + custom(x)`.
#[derive(Clone)]
pub struct BoundaryForm {
    n: usize,
    kernel: Option<IntegralKernel>,
    point_masses: Vec<PointMass>,
    point_mass_tail: f64,
    custom: Option<CustomFunctional>,
}

impl fmt::Debug for BoundaryForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryForm")
            .field("n", &self.n)
            .field("kernel", &self.kernel.as_ref().map(|k| k.envelope))
            .field("point_masses", &self.point_masses)
            .field("point_mass_tail", &self.point_mass_tail)
            .field("custom", &self.custom.as_ref().map(|c| c.norm_bound))
            .finish()
    }
}

impl BoundaryForm {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            kernel: None,
            point_masses: Vec::new(),
            point_mass_tail: 0.0,
            custom: None,
        }
    }

    /// `Γ(x) = x(0)`.
    pub fn initial_value(n: usize) -> Self {
        Self::new(n)
            .with_point_mass(0.0, DMatrix::identity(n, n))
            .expect("identity point mass is valid")
    }

    pub fn with_kernel(mut self, b: MatrixFn, envelope: TailEstimate) -> Result<Self> {
        let b0 = b(0.0);
        if b0.nrows() != self.n || b0.ncols() != self.n {
            return Err(invalid("integral kernel has the wrong shape"));
        }
        self.kernel = Some(IntegralKernel { b, envelope });
        Ok(self)
    }

    /// Append `C x(t)`; times must be nonnegative and strictly increasing.
    pub fn with_point_mass(mut self, t: f64, c: DMatrix<f64>) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(invalid(format!("point-mass time must be nonnegative, got {t}")));
        }
        if let Some(last) = self.point_masses.last() {
            if t <= last.t {
                return Err(invalid("point-mass times must be strictly increasing"));
            }
        }
        if c.nrows() != self.n || c.ncols() != self.n {
            return Err(invalid("point-mass matrix has the wrong shape"));
        }
        self.point_masses.push(PointMass { t, c });
        Ok(self)
    }

    /// Declared bound on `Σ ‖C_k‖` over the point masses that were truncated away.
    pub fn with_point_mass_tail(mut self, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) {
            return Err(invalid("point-mass tail bound must be nonnegative"));
        }
        self.point_mass_tail = bound;
        Ok(self)
    }

    pub fn with_custom(mut self, eval: CustomEval, norm_bound: f64) -> Result<Self> {
        if !(norm_bound >= 0.0) {
            return Err(invalid("custom functional norm bound must be nonnegative"));
        }
        self.custom = Some(CustomFunctional { eval, norm_bound });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kernel(&self) -> Option<&IntegralKernel> {
        self.kernel.as_ref()
    }

    pub fn point_masses(&self) -> &[PointMass] {
        &self.point_masses
    }

    pub fn custom(&self) -> Option<&CustomFunctional> {
        self.custom.as_ref()
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.point_masses.iter().map(|p| p.t).collect()
    }

    /// Declared bound on the operator norm of `Γ` in the sup norm.
    pub fn norm_bound(&self) -> f64 {
        let kernel = self
            .kernel
            .as_ref()
            .map_or(0.0, |k| k.envelope.bound_beyond(0.0));
        let masses: f64 = self.point_masses.iter().map(|p| spectral_norm(&p.c)).sum();
        let custom = self.custom.as_ref().map_or(0.0, |c| c.norm_bound);
        kernel + masses + self.point_mass_tail + custom
    }
}

/// `Γ` on a grid as node blocks: `Γ(x) ≈ Σ_j G_j x(t_j)`.
#[derive(Debug, Clone)]
pub struct DiscreteGamma {
    blocks: Vec<DMatrix<f64>>,
    /// Bound on `∫_T^∞ ‖B‖`.
    kernel_tail: f64,
}

impl DiscreteGamma {
    pub fn new(form: &BoundaryForm, grid: &SemiInfiniteGrid) -> Result<Self> {
        let n = form.dim();
        let t_max = grid.truncation_time();
        let mut blocks = vec![DMatrix::zeros(n, n); grid.len()];
        let mut kernel_tail = 0.0;
        if let Some(k) = form.kernel() {
            for ((blk, &t), w) in blocks.iter_mut().zip(grid.nodes()).zip(grid.integral_weights()) {
                *blk += (k.b)(t) * w;
            }
            kernel_tail = k.envelope.bound_beyond(t_max);
        }
        for pm in form.point_masses() {
            if pm.t > t_max {
                return Err(Error::OutOfRange { t: pm.t, t_max });
            }
            for (j, w) in grid.interpolation_weights(pm.t)? {
                blocks[j] += &pm.c * w;
            }
        }
        if let Some(custom) = form.custom() {
            let grid = Arc::new(grid.clone());
            for j in 0..grid.len() {
                for i in 0..n {
                    let mut values = vec![DVector::zeros(n); grid.len()];
                    values[j][i] = 1.0;
                    let probe = GridFunction::new(grid.clone(), values)?;
                    let col = (custom.eval)(&probe);
                    if col.len() != n {
                        return Err(invalid("custom functional returned the wrong dimension"));
                    }
                    let mut target = blocks[j].column_mut(i);
                    target += &col;
                }
            }
        }
        Ok(Self {
            blocks,
            kernel_tail,
        })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn kernel_tail(&self) -> f64 {
        self.kernel_tail
    }

    pub fn apply(&self, values: &[DVector<f64>]) -> DVector<f64> {
        let n = self.blocks[0].nrows();
        let mut acc = KahanSum::new(n);
        for (g, x) in self.blocks.iter().zip(values) {
            acc.add_scaled(1.0, &(g * x));
        }
        acc.into_value()
    }
}

/// `Γ(x)` for a sampled `x`. `tail` bounds `∫_T^∞ |B(t)x(t)| dt`.
pub fn apply_gamma(form: &BoundaryForm, x: &GridFunction, tail: &TailEstimate) -> Result<DVector<f64>> {
    if x.dim() != form.dim() {
        return Err(invalid("state and boundary form differ in dimension"));
    }
    let grid = x.grid();
    let t_max = grid.truncation_time();
    if form.kernel().is_some() {
        let beyond = tail.bound_beyond(t_max);
        if beyond > grid.tail_tol() {
            return Err(Error::NoConvergence {
                what: "boundary kernel integral has a large tail past the grid".into(),
                last_increment: beyond,
                at_time: t_max,
            });
        }
    }
    let disc = DiscreteGamma::new(&form.without_custom(), grid)?;
    let mut value = disc.apply(x.values());
    if let Some(custom) = form.custom() {
        value += (custom.eval)(x);
    }
    Ok(value)
}

impl BoundaryForm {
    fn without_custom(&self) -> Self {
        Self {
            custom: None,
            ..self.clone()
        }
    }
}

/// `Γ(x)` for a closed-form `x`, with `∫_0^∞ B x` by truncation doubling.
pub fn apply_gamma_fn(
    form: &BoundaryForm,
    x: &dyn Fn(f64) -> DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    if form.custom().is_some() {
        return Err(invalid("custom functionals act on grid functions only"));
    }
    let mut value = DVector::zeros(form.dim());
    if let Some(k) = form.kernel() {
        let integrand = |t: f64| (k.b)(t) * x(t);
        value += quad_improper(&integrand, &TailEstimate::integrable_remainder(), tol, ImproperOptions::default())?
            .value;
    }
    for pm in form.point_masses() {
        value += &pm.c * x(pm.t);
    }
    Ok(value)
}

/// `Λ = [Γ(Φ e_1) | ... | Γ(Φ e_n)]`.
pub fn assemble_lambda(form: &BoundaryForm, fm: &FundamentalMatrix) -> Result<DMatrix<f64>> {
    let n = form.dim();
    if fm.dim() != n {
        return Err(invalid("fundamental matrix and boundary form differ in dimension"));
    }
    let grid = fm.grid();
    let mut lambda = DMatrix::zeros(n, n);
    if let Some(k) = form.kernel() {
        let beyond = k.envelope.bound_beyond(grid.truncation_time()) * fm.sup_norm();
        if beyond > grid.tail_tol() {
            return Err(Error::NoConvergence {
                what: "boundary kernel applied to the fundamental matrix has a large tail".into(),
                last_increment: beyond,
                at_time: grid.truncation_time(),
            });
        }
        for ((t, w), phi) in grid.nodes().iter().zip(grid.integral_weights()).zip(fm.nodes()) {
            lambda += (k.b)(*t) * phi * w;
        }
    }
    for pm in form.point_masses() {
        lambda += &pm.c * fm.eval(pm.t)?;
    }
    if let Some(custom) = form.custom() {
        for i in 0..n {
            let col = GridFunction::new(
                grid.clone(),
                fm.nodes().iter().map(|p| p.column(i).into_owned()).collect(),
            )?;
            let v = (custom.eval)(&col);
            lambda.set_column(i, &(lambda.column(i) + v));
        }
    }
    Ok(lambda)
}

/// SVD-based analysis of `Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiagnosis {
    pub lambda: DMatrix<f64>,
    /// `dim ker Λ`.
    pub p: usize,
    /// Orthonormal basis of `ker Λ` (n × p).
    pub v: DMatrix<f64>,
    /// Orthonormal basis of `ker Λ^T` (n × p).
    pub w: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank_tol: f64,
    /// Absolute cutoff: singular values at or below it count as zero.
    pub threshold: f64,
    pub invertible: bool,
    /// Moore-Penrose pseudo-inverse with the kernel directions removed.
    pub pinv: DMatrix<f64>,
}

/// Numerical rank relative to `σ_max`.
pub fn diagnose(lambda: &DMatrix<f64>, rank_tol: f64) -> Result<LinearDiagnosis> {
    diagnose_scaled(lambda, rank_tol, 0.0)
}

/// As [`diagnose`], with the cutoff `rank_tol · max(σ_max, scale)`. A natural
/// scale is `‖Γ‖ sup ‖Φ‖`: it keeps a roundoff-sized `Λ` from counting as full rank.
pub fn diagnose_scaled(lambda: &DMatrix<f64>, rank_tol: f64, scale: f64) -> Result<LinearDiagnosis> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(invalid(format!("rank tolerance must lie in (0, 1), got {rank_tol}")));
    }
    if !lambda.is_square() {
        return Err(invalid("Λ must be square"));
    }
    let n = lambda.nrows();
    let svd = checked_svd(lambda)?;
    let (u, vt) = (&svd.u, &svd.v_t);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.sigma[b].total_cmp(&svd.sigma[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.sigma[i]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let threshold = rank_tol * sigma_max.max(scale);
    let rank = sigma.iter().filter(|&&s| s > threshold).count();
    let p = n - rank;

    let mut v = DMatrix::zeros(n, p);
    let mut w = DMatrix::zeros(n, p);
    for (col, &i) in order[rank..].iter().enumerate() {
        v.set_column(col, &canonical_sign(vt.row(i).transpose()));
        w.set_column(col, &canonical_sign(u.column(i).into_owned()));
    }
    let mut pinv = DMatrix::zeros(n, n);
    for &i in &order[..rank] {
        pinv += vt.row(i).transpose() * u.column(i).transpose() / svd.sigma[i];
    }
    Ok(LinearDiagnosis {
        lambda: lambda.clone(),
        p,
        v,
        w,
        singular_values: sigma,
        rank_tol,
        threshold,
        invertible: p == 0,
        pinv,
    })
}

/// Flip so the largest-magnitude entry is positive (first one on ties).
fn canonical_sign(mut x: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i].abs() > x[best].abs() + 1e-12 {
            best = i;
        }
    }
    if x[best] < 0.0 {
        x.neg_mut();
    }
    x
}

/// Samples of `Φ(t_k) ∫_0^{t_k} Φ^{-1}(s) h(s) ds`.
pub fn particular_solution(fm: &FundamentalMatrix, h: &dyn Fn(f64) -> DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let psi: Vec<DVector<f64>> = fm.grid().nodes().iter().map(|&t| h(t)).collect();
    fm.volterra(&psi)
}

/// Default solvability tolerance for the data `(h, u)`.
pub fn solvability_tol(u: &DVector<f64>, h_sup: f64) -> f64 {
    1e-7 * (u.norm() + h_sup).max(1.0)
}

/// `W^T [u - Γ(Φ ∫ Φ^{-1} h)]`; zero exactly when the linear problem is solvable.
pub fn linear_solvability_residual(
    diag: &LinearDiagnosis,
    form: &BoundaryForm,
    fm: &FundamentalMatrix,
    h: &dyn Fn(f64) -> DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if diag.p == 0 {
        return Err(Error::WrongBranch(
            "Λ is invertible; use the unique linear solve".into(),
        ));
    }
    let disc = DiscreteGamma::new(form, fm.grid())?;
    let y = particular_solution(fm, h)?;
    Ok(diag.w.transpose() * (u - disc.apply(&y)))
}

/// `v_0 = Λ^{-1}[u - Γ(Φ ∫ Φ^{-1} h)]` and the resulting solution.
pub fn solve_linear_unique(
    diag: &LinearDiagnosis,
    form: &BoundaryForm,
    fm: &FundamentalMatrix,
    h: &dyn Fn(f64) -> DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, GridFunction)> {
    if diag.p > 0 {
        return Err(Error::WrongBranch(format!(
            "Λ has a {}-dimensional kernel; the linear solution is not unique",
            diag.p
        )));
    }
    let disc = DiscreteGamma::new(form, fm.grid())?;
    let y = particular_solution(fm, h)?;
    let rhs = u - disc.apply(&y);
    let v0 = diag
        .lambda
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularJacobian("Λ is numerically singular".into()))?;
    let x = variation_of_parameters(fm, &v0, h, 0.0, None)?;
    Ok((v0, x))
}

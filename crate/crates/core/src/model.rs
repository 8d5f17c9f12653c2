//! A problem instance discretized on a grid, with everything the reduction and
//! continuation layers reuse: `Φ`, the discrete `Γ`, the SVD of `Λ`, quadrature
//! weights, and the particular solution for `h`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boundary::{assemble_lambda, diagnose_scaled, solvability_tol, DiscreteGamma, LinearDiagnosis, DEFAULT_RANK_TOL};
use crate::error::{invalid, Error, Result};
use crate::grid::{build_grid, Grading, GridFunction, KahanSum, SemiInfiniteGrid, DEFAULT_PANELS, DEFAULT_T};
use crate::linear::{
    estimate_dichotomy, integrate_fundamental, DichotomyCertificate, FundamentalMatrix, FundamentalOptions,
    DEFAULT_DICHOTOMY_SAMPLES,
};
use crate::problem::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncTime {
    Fixed(f64),
    /// Pick `T` so that `K e^{-αT}` is about `1e-12`.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub trunc: TruncTime,
    pub panels: usize,
    pub grading: Grading,
    pub rank_tol: f64,
    pub fundamental: FundamentalOptions,
    pub dichotomy_samples: usize,
    /// Largest tolerated estimate of `∫_T^∞ |g|`.
    pub g_tail_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunc: TruncTime::Fixed(DEFAULT_T),
            panels: DEFAULT_PANELS,
            grading: Grading::default(),
            rank_tol: DEFAULT_RANK_TOL,
            fundamental: FundamentalOptions::default(),
            dichotomy_samples: DEFAULT_DICHOTOMY_SAMPLES,
            g_tail_tol: 1e-8,
        }
    }
}

const AUTO_T_MIN: f64 = 20.0;
const AUTO_T_MAX: f64 = 160.0;

fn auto_truncation(cert: &DichotomyCertificate) -> f64 {
    match cert.alpha() {
        Some(alpha) => ((cert.k() * 1e12).ln() / alpha).clamp(AUTO_T_MIN, AUTO_T_MAX),
        None => DEFAULT_T,
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    problem: ProblemInstance,
    config: ModelConfig,
    grid: Arc<SemiInfiniteGrid>,
    fm: FundamentalMatrix,
    dichotomy: DichotomyCertificate,
    gamma: DiscreteGamma,
    diag: LinearDiagnosis,
    /// `∫_0^T F ≈ Σ q_j F(t_j)`.
    q: Vec<f64>,
    /// Running-integral weights, `∫_0^{t_k} F ≈ Σ_j C[k, j] F(t_j)`.
    cumulative: DMatrix<f64>,
    /// `K_j` with `Γ(Φ ∫ Φ^{-1} ψ) = Σ_j K_j ψ(t_j)`.
    gamma_volterra: Vec<DMatrix<f64>>,
    h_samples: Vec<DVector<f64>>,
    /// `Φ ∫ Φ^{-1} h` at the nodes.
    particular: Vec<DVector<f64>>,
    /// `u - Γ(Φ ∫ Φ^{-1} h)`.
    b0: DVector<f64>,
}

impl Model {
    pub fn build(problem: &ProblemInstance, config: ModelConfig) -> Result<Self> {
        let breaks = problem.gamma.breakpoints();
        let t_max = match config.trunc {
            TruncTime::Fixed(t) => t,
            TruncTime::Auto => {
                let probe = Arc::new(build_grid(DEFAULT_T, config.panels, config.grading)?);
                let fm = integrate_fundamental(&problem.linear, probe, config.fundamental)?;
                let cert = estimate_dichotomy(&fm, problem.dichotomy_mode, config.dichotomy_samples)?;
                auto_truncation(&cert)
            }
        };
        let grid = build_grid(t_max, config.panels, config.grading)?
            .with_breakpoints(&breaks)?;
        Self::with_grid(problem, Arc::new(grid), config)
    }

    /// Discretize on a caller-supplied grid, e.g. the nodes of a stored solution.
    pub fn with_grid(problem: &ProblemInstance, grid: Arc<SemiInfiniteGrid>, config: ModelConfig) -> Result<Self> {
        let n = problem.dim();
        let fm = integrate_fundamental(&problem.linear, grid.clone(), config.fundamental)?;
        let dichotomy = estimate_dichotomy(&fm, problem.dichotomy_mode, config.dichotomy_samples)?;
        let gamma = DiscreteGamma::new(&problem.gamma, &grid)?;
        let lambda = assemble_lambda(&problem.gamma, &fm)?;
        let scale = problem.gamma.norm_bound() * fm.sup_norm();
        let diag = diagnose_scaled(&lambda, config.rank_tol, scale)?;

        let q = grid.integral_weights();
        let cumulative = grid.cumulative_weight_matrix();
        let len = grid.len();
        let gphi: Vec<DMatrix<f64>> = gamma
            .blocks()
            .iter()
            .zip(fm.nodes())
            .map(|(g, p)| g * p)
            .collect();
        let gamma_volterra = (0..len)
            .map(|j| {
                let mut m = DMatrix::zeros(n, n);
                for (k, gp) in gphi.iter().enumerate() {
                    let c = cumulative[(k, j)];
                    if c != 0.0 {
                        m += gp * c;
                    }
                }
                m * fm.inverse_at_node(j)
            })
            .collect();

        let h_samples: Vec<DVector<f64>> = grid.nodes().iter().map(|&t| (problem.h)(t)).collect();
        let particular = fm.volterra(&h_samples)?;
        let b0 = &problem.u - gamma.apply(&particular);
        Ok(Self {
            problem: problem.clone(),
            config,
            grid,
            fm,
            dichotomy,
            gamma,
            diag,
            q,
            cumulative,
            gamma_volterra,
            h_samples,
            particular,
            b0,
        })
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.problem
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &Arc<SemiInfiniteGrid> {
        &self.grid
    }

    pub fn fundamental(&self) -> &FundamentalMatrix {
        &self.fm
    }

    pub fn dichotomy(&self) -> &DichotomyCertificate {
        &self.dichotomy
    }

    pub fn discrete_gamma(&self) -> &DiscreteGamma {
        &self.gamma
    }

    pub fn diagnosis(&self) -> &LinearDiagnosis {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn kernel_dim(&self) -> usize {
        self.diag.p
    }

    pub fn quadrature_weights(&self) -> &[f64] {
        &self.q
    }

    pub fn cumulative_weights(&self) -> &DMatrix<f64> {
        &self.cumulative
    }

    pub fn gamma_volterra_blocks(&self) -> &[DMatrix<f64>] {
        &self.gamma_volterra
    }

    pub fn h_samples(&self) -> &[DVector<f64>] {
        &self.h_samples
    }

    pub fn particular(&self) -> &[DVector<f64>] {
        &self.particular
    }

    /// `u - Γ(Φ ∫ Φ^{-1} h)`.
    pub fn linear_defect(&self) -> &DVector<f64> {
        &self.b0
    }

    /// `W^T [u - Γ(Φ ∫ Φ^{-1} h)]`, or `None` when `Λ` is invertible.
    pub fn solvability_residual(&self) -> Option<DVector<f64>> {
        (self.diag.p > 0).then(|| self.diag.w.transpose() * &self.b0)
    }

    pub fn solvability_tol(&self) -> f64 {
        let h_sup = self.h_samples.iter().map(|h| h.norm()).fold(0.0, f64::max);
        solvability_tol(&self.problem.u, h_sup)
    }

    /// `Λ^+ [u - Γ(Φ ∫ Φ^{-1} h)]`: the initial value that absorbs the
    /// range part of the linear boundary data.
    pub fn base_initial_value(&self) -> DVector<f64> {
        &self.diag.pinv * &self.b0
    }

    /// Kernel vector `y = V c`.
    pub fn kernel_vector(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        if c.len() != self.diag.p {
            return Err(invalid(format!(
                "kernel coordinates have dimension {}, expected {}",
                c.len(),
                self.diag.p
            )));
        }
        Ok(&self.diag.v * c)
    }

    /// The linear solution through `y = V c`: `Φ (y + Λ^+ b_0) + Φ ∫ Φ^{-1} h`.
    pub fn x_y(&self, c: &DVector<f64>) -> Result<GridFunction> {
        let v0 = self.kernel_vector(c)? + self.base_initial_value();
        let values = self
            .fm
            .nodes()
            .iter()
            .zip(&self.particular)
            .map(|(phi, y)| phi * &v0 + y)
            .collect();
        GridFunction::new(self.grid.clone(), values)
    }

    /// `Σ q_j s_j`.
    pub fn integrate(&self, samples: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = KahanSum::new(self.dim());
        for (w, s) in self.q.iter().zip(samples) {
            acc.add_scaled(*w, s);
        }
        acc.into_value()
    }

    /// `Γ(Φ ∫ Φ^{-1} ψ)`.
    pub fn gamma_of_volterra(&self, psi: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = KahanSum::new(self.dim());
        for (k, p) in self.gamma_volterra.iter().zip(psi) {
            acc.add_scaled(1.0, &(k * p));
        }
        acc.into_value()
    }

    pub fn f_samples(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let nl = &self.problem.nonlinearity;
        self.grid.nodes().iter().zip(x).map(|(&t, xk)| nl.f(t, xk)).collect()
    }

    pub fn g_samples(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let nl = &self.problem.nonlinearity;
        self.grid.nodes().iter().zip(x).map(|(&t, xk)| nl.g(t, xk)).collect()
    }

    /// Estimate of `∫_T^∞ |g|` from the decay over the last panel; fails when
    /// `g` is not visibly decaying at `T`.
    pub fn check_g_tail(&self, g: &[DVector<f64>]) -> Result<f64> {
        let m = g.len() - 1;
        let (last, prev) = (g[m].norm(), g[m - 1].norm());
        let nodes = self.grid.nodes();
        let width = nodes[m] - nodes[m - 1];
        let tol = self.config.g_tail_tol;
        let estimate = if last == 0.0 {
            0.0
        } else if last < prev {
            let rate = (prev / last).ln() / width;
            last / rate
        } else {
            f64::INFINITY
        };
        if estimate <= tol || last * width <= 1e-3 * tol {
            Ok(estimate.min(last * width))
        } else {
            Err(Error::NoConvergence {
                what: "∫ g does not settle by the truncation time".into(),
                last_increment: last * width,
                at_time: nodes[m],
            })
        }
    }
}

//! Lyapunov-Schmidt layer: the bifurcation equation on `ker Λ`, its Jacobian,
//! and a multistart search for branch points.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::debug;

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;
use crate::linear::{variation_of_parameters, FundamentalMatrix};
use crate::model::Model;
use crate::svd::singular_values;

/// `x_y(t) = Φ(t) y + Φ(t) ∫_0^t Φ^{-1}(s) h(s) ds` on the grid of `fm`.
pub fn make_xy(fm: &FundamentalMatrix, h: &dyn Fn(f64) -> DVector<f64>, y: &DVector<f64>) -> Result<GridFunction> {
    variation_of_parameters(fm, y, h, 0.0, None)
}

/// `∫_0^T g(x) - Γ(Φ ∫ Φ^{-1} f(x))` for a sampled state.
pub(crate) fn bifurcation_defect(model: &Model, x: &[DVector<f64>]) -> DVector<f64> {
    let g = model.g_samples(x);
    let f = model.f_samples(x);
    model.integrate(&g) - model.gamma_of_volterra(&f)
}

/// `W^T [∫_0^∞ g(t, x_y) dt - Γ(Φ ∫ Φ^{-1} f(s, x_y) ds)]` at `y = V c`.
pub fn bifurcation_residual(model: &Model, c: &DVector<f64>) -> Result<DVector<f64>> {
    require_kernel(model)?;
    let x = model.x_y(c)?;
    model.check_g_tail(&model.g_samples(x.values()))?;
    Ok(model.diagnosis().w.transpose() * bifurcation_defect(model, x.values()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationJacobian {
    /// `p × p`, in kernel coordinates.
    pub phi: DMatrix<f64>,
    pub condition: f64,
    pub sigma_min: f64,
    /// Size of the integrals that make up `φ`; `σ_min` is judged against it.
    pub scale: f64,
    pub cond_cap: f64,
    pub bijective: bool,
}

/// Relative floor below which `σ_min(φ)` counts as zero.
pub const PHI_ZERO_TOL: f64 = 1e-10;
pub const DEFAULT_COND_CAP: f64 = 1e8;
pub const DEFAULT_BRANCH_TOL: f64 = 1e-8;

/// `φ = Σ_j W^T [q_j ∂g(t_j) - K_j ∂f(t_j)] Φ(t_j) V`, the derivative of the
/// residual along `ker Λ`.
pub fn bifurcation_jacobian(model: &Model, c: &DVector<f64>, cond_cap: f64) -> Result<BifurcationJacobian> {
    require_kernel(model)?;
    let x = model.x_y(c)?;
    Ok(phi_at_state(model, x.values(), cond_cap))
}

pub(crate) fn phi_at_state(model: &Model, x: &[DVector<f64>], cond_cap: f64) -> BifurcationJacobian {
    let diag = model.diagnosis();
    let nl = &model.problem().nonlinearity;
    let fm = model.fundamental();
    let (n, p) = (model.dim(), diag.p);
    let mut acc = DMatrix::zeros(n, p);
    let mut scale = 0.0;
    for (j, &t) in model.grid().nodes().iter().enumerate() {
        let phi_v = fm.at_node(j) * &diag.v;
        let g_part = nl.jac_g(t, &x[j]) * model.quadrature_weights()[j] * &phi_v;
        let f_part = &model.gamma_volterra_blocks()[j] * nl.jac_f(t, &x[j]) * &phi_v;
        scale += g_part.norm() + f_part.norm();
        acc += g_part - f_part;
    }
    let phi = diag.w.transpose() * acc;
    let (smax, smin) = match singular_values(&phi) {
        Ok(sv) => (sv.max(), sv.min()),
        Err(_) => (phi.norm(), 0.0),
    };
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let bijective = p > 0 && condition <= cond_cap && smin >= PHI_ZERO_TOL * scale && scale > 0.0;
    BifurcationJacobian {
        phi,
        condition,
        sigma_min: smin,
        scale,
        cond_cap,
        bijective,
    }
}

fn require_kernel(model: &Model) -> Result<()> {
    if model.kernel_dim() == 0 {
        return Err(Error::WrongBranch(
            "Λ is invertible, so there is no bifurcation equation".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSearch {
    /// Extra seeds in kernel coordinates, tried after the defaults.
    pub seeds: Vec<DVector<f64>>,
    /// Number of random seeds drawn uniformly from `[-jitter_radius, jitter_radius]^p`.
    pub jitter: usize,
    pub jitter_radius: f64,
    pub rng_seed: u64,
    pub branch_tol: f64,
    pub cond_cap: f64,
    pub dedup_tol: f64,
    pub max_iter: usize,
}

impl Default for BranchSearch {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            jitter: 0,
            jitter_radius: 2.0,
            rng_seed: 0,
            branch_tol: DEFAULT_BRANCH_TOL,
            cond_cap: DEFAULT_COND_CAP,
            dedup_tol: 1e-6,
            max_iter: 50,
        }
    }
}

impl BranchSearch {
    /// `0`, `±e_i`, user seeds, then jitter, in that order.
    pub fn seed_list(&self, p: usize) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(p)];
        for i in 0..p {
            for sign in [1.0, -1.0] {
                let mut e = DVector::zeros(p);
                e[i] = sign;
                out.push(e);
            }
        }
        out.extend(self.seeds.iter().filter(|s| s.len() == p).cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        for _ in 0..self.jitter {
            out.push(DVector::from_fn(p, |_, _| {
                rng.random_range(-self.jitter_radius..=self.jitter_radius)
            }));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint {
    /// Kernel coordinates, `y = V c`.
    pub c: DVector<f64>,
    pub y: DVector<f64>,
    pub x_y: GridFunction,
    pub residual: DVector<f64>,
    pub jacobian: BifurcationJacobian,
    pub certified: bool,
    /// Index in the seed list of the first seed that reached this point.
    pub seed_index: usize,
    pub iterations: usize,
}

impl BranchPoint {
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub seed_index: usize,
    pub seed: DVector<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchSearchResult {
    pub points: Vec<BranchPoint>,
    pub failures: Vec<SeedFailure>,
}

impl BranchSearchResult {
    pub fn first_certified(&self) -> Option<&BranchPoint> {
        self.points.iter().find(|b| b.certified)
    }
}

/// Damped Newton on `c ↦ residual(V c)` from every seed. Seeds that fail are
/// reported, not raised.
pub fn find_branch_points(model: &Model, search: &BranchSearch) -> Result<BranchSearchResult> {
    require_kernel(model)?;
    if !(search.branch_tol > 0.0) || !(search.cond_cap >= 1.0) {
        return Err(invalid("branch tolerance must be positive and the condition cap at least 1"));
    }
    let p = model.kernel_dim();
    let mut result = BranchSearchResult::default();
    for (index, seed) in search.seed_list(p).into_iter().enumerate() {
        match newton_on_kernel(model, &seed, search) {
            Ok((c, iterations)) => {
                if result.points.iter().any(|b| (&b.c - &c).norm() <= search.dedup_tol * (1.0 + c.norm())) {
                    continue;
                }
                let point = branch_point(model, c, search, index, iterations)?;
                debug!(seed = index, c = ?point.c.as_slice(), certified = point.certified, "branch point");
                result.points.push(point);
            }
            Err(reason) => {
                debug!(seed = index, %reason, "seed failed");
                result.failures.push(SeedFailure {
                    seed_index: index,
                    seed,
                    reason,
                });
            }
        }
    }
    Ok(result)
}

/// Evaluate everything reported about a branch point at `c`.
pub fn branch_point(
    model: &Model,
    c: DVector<f64>,
    search: &BranchSearch,
    seed_index: usize,
    iterations: usize,
) -> Result<BranchPoint> {
    let residual = bifurcation_residual(model, &c)?;
    let x_y = model.x_y(&c)?;
    let jacobian = phi_at_state(model, x_y.values(), search.cond_cap);
    let certified = residual.norm() <= search.branch_tol && jacobian.bijective;
    Ok(BranchPoint {
        y: model.kernel_vector(&c)?,
        c,
        x_y,
        residual,
        jacobian,
        certified,
        seed_index,
        iterations,
    })
}

fn newton_on_kernel(
    model: &Model,
    seed: &DVector<f64>,
    search: &BranchSearch,
) -> std::result::Result<(DVector<f64>, usize), String> {
    let eval = |c: &DVector<f64>| bifurcation_residual(model, c).map_err(|e| e.to_string());
    let mut c = seed.clone();
    let mut r = eval(&c)?;
    for it in 0..search.max_iter {
        let norm = r.norm();
        if !norm.is_finite() {
            return Err("residual is not finite".into());
        }
        if norm <= search.branch_tol {
            return Ok((c, it));
        }
        let jac = bifurcation_jacobian(model, &c, search.cond_cap).map_err(|e| e.to_string())?;
        let step = jac
            .phi
            .clone()
            .lu()
            .solve(&(-&r))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| format!("singular bifurcation Jacobian at iteration {it}"))?;
        let mut lambda = 1.0;
        loop {
            let trial = &c + &step * lambda;
            let rt = eval(&trial)?;
            if rt.norm() <= (1.0 - 1e-4 * lambda) * norm {
                c = trial;
                r = rt;
                break;
            }
            lambda *= 0.5;
            if lambda < 1.0 / 1024.0 {
                return Err(format!("line search failed at iteration {it} (|R| = {norm:.3e})"));
            }
        }
    }
    if r.norm() <= search.branch_tol {
        Ok((c, search.max_iter))
    } else {
        Err(format!("no convergence in {} iterations (|R| = {:.3e})", search.max_iter, r.norm()))
    }
}

//! Semi-infinite time grids, grid functions and the quadrature rules built on them.
//!
//! The half line `[0, ∞)` is represented by a truncated, possibly graded grid on
//! `[0, T]`. Everything past `T` is accounted for through a [`TailEstimate`].
//! All sums run in fixed node order with compensated accumulation, so results are
//! bit-identical for identical inputs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default truncation time.
pub const DEFAULT_T: f64 = 40.0;
/// Default number of panels.
pub const DEFAULT_PANELS: usize = 400;
/// Default geometric grading ratio.
pub const DEFAULT_RATIO: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grading {
    Uniform,
    /// Panel widths grow by `ratio` from one panel to the next.
    Geometric { ratio: f64 },
}

impl Default for Grading {
    fn default() -> Self {
        Grading::Geometric {
            ratio: DEFAULT_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadRule {
    /// Composite Simpson on panel pairs, trapezoid on an odd trailing panel.
    #[default]
    Simpson,
    Trapezoid,
}

/// Nodes `0 = t_0 < t_1 < ... < t_m = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiInfiniteGrid {
    nodes: Vec<f64>,
    grading: Grading,
    tail_tol: f64,
}

/// Build a grid of `panels` panels on `[0, t_max]`.
pub fn build_grid(t_max: f64, panels: usize, grading: Grading) -> Result<SemiInfiniteGrid> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(invalid(format!("truncation time must be positive, got {t_max}")));
    }
    if panels < 2 {
        return Err(invalid(format!("need at least 2 panels, got {panels}")));
    }
    let mut nodes = Vec::with_capacity(panels + 1);
    match grading {
        Grading::Uniform => {
            for k in 0..=panels {
                nodes.push(t_max * k as f64 / panels as f64);
            }
        }
        Grading::Geometric { ratio } => {
            if !(ratio > 1.0) || !ratio.is_finite() {
                return Err(invalid(format!("geometric ratio must exceed 1, got {ratio}")));
            }
            let first = t_max * (ratio - 1.0) / (ratio.powi(panels as i32) - 1.0);
            let mut width = first;
            let mut t = 0.0;
            nodes.push(0.0);
            for _ in 0..panels {
                t += width;
                nodes.push(t);
                width *= ratio;
            }
        }
    }
    *nodes.last_mut().expect("panels >= 2") = t_max;
    SemiInfiniteGrid::from_nodes(nodes, grading)
}

impl SemiInfiniteGrid {
    /// Wrap an explicit node list, checking the grid invariants.
    pub fn from_nodes(nodes: Vec<f64>, grading: Grading) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(invalid(format!(
                "a grid needs at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        if nodes[0] != 0.0 {
            return Err(invalid(format!("first node must be 0, got {}", nodes[0])));
        }
        if let Some(w) = nodes.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(invalid(format!(
                "nodes must be strictly increasing and finite ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            nodes,
            grading,
            tail_tol: 1e-12,
        })
    }

    /// Make sure the given times (e.g. point-mass times) are nodes, moving a
/// nearby interior node or inserting a new one.
    pub fn with_breakpoints(mut self, times: &[f64]) -> Result<Self> {
        let t_max = self.truncation_time();
        let mut snapped: Vec<usize> = Vec::new();
        for &t in times {
            if !(0.0..=t_max).contains(&t) {
                return Err(Error::OutOfRange { t, t_max });
            }
            let close = self
                .nodes
                .iter()
                .any(|&s| (s - t).abs() <= 1e-12 * t_max.max(1.0));
            if close {
                continue;
            }
            let at = self.nodes.partition_point(|&s| s < t);
            let (lo, hi) = (at - 1, at);
            let width = self.nodes[hi] - self.nodes[lo];
            let nearest = if t - self.nodes[lo] < self.nodes[hi] - t { lo } else { hi };
            // Move an interior node onto t rather than leave a sliver panel.
            let movable = nearest != 0 && nearest != self.len() - 1 && !snapped.contains(&nearest);
            if movable && (self.nodes[nearest] - t).abs() <= 0.3 * width {
                self.nodes[nearest] = t;
                snapped.push(nearest);
            } else {
                self.nodes.insert(at, t);
                for s in snapped.iter_mut().filter(|s| **s >= at) {
                    *s += 1;
                }
                snapped.push(at);
            }
        }
        Ok(self)
    }

    pub fn with_tail_tol(mut self, tail_tol: f64) -> Self {
        self.tail_tol = tail_tol.max(0.0);
        self
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn panels(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn truncation_time(&self) -> f64 {
        *self.nodes.last().expect("non-empty grid")
    }

    pub fn grading(&self) -> Grading {
        self.grading
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// Index of the node equal to `t` (to roundoff), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let scale = 1e-13 * self.truncation_time().max(1.0);
        let at = self.nodes.partition_point(|&s| s < t - scale);
        (at < self.nodes.len() && (self.nodes[at] - t).abs() <= scale).then_some(at)
    }

    /// Panel `i` with `t_i <= t <= t_{i+1}`.
    pub fn locate(&self, t: f64) -> Result<usize> {
        let t_max = self.truncation_time();
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::OutOfRange { t, t_max });
        }
        let at = self.nodes.partition_point(|&s| s <= t);
        Ok(at.saturating_sub(1).min(self.panels() - 1))
    }

    /// Quadrature weights for `∫_0^T`.
    pub fn weights(&self, rule: QuadRule) -> Vec<f64> {
        let t = &self.nodes;
        let mut w = vec![0.0; t.len()];
        match rule {
            QuadRule::Trapezoid => {
                for i in 0..self.panels() {
                    let h = t[i + 1] - t[i];
                    w[i] += 0.5 * h;
                    w[i + 1] += 0.5 * h;
                }
            }
            QuadRule::Simpson => {
                let mut i = 0;
                while i + 2 < t.len() {
                    let h1 = t[i + 1] - t[i];
                    let h2 = t[i + 2] - t[i + 1];
                    let s = h1 + h2;
                    w[i] += s / 6.0 * (2.0 - h2 / h1);
                    w[i + 1] += s * s * s / (6.0 * h1 * h2);
                    w[i + 2] += s / 6.0 * (2.0 - h1 / h2);
                    i += 2;
                }
                if i + 1 < t.len() {
                    let h = t[i + 1] - t[i];
                    w[i] += 0.5 * h;
                    w[i + 1] += 0.5 * h;
                }
            }
        }
        w
    }

    /// Local 6-point (fewer on tiny grids) interpolatory rule for each panel
    /// integral `∫_{t_i}^{t_{i+1}}`, used for running integrals.
    pub fn panel_stencils(&self) -> Vec<PanelStencil> {
        let t = &self.nodes;
        let width = t.len().min(6);
        // Gauss-Legendre, 4 points: exact for the quintic interpolant.
        let gl_x = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        let gl_w = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        (0..self.panels())
            .map(|i| {
                let first = i.saturating_sub(2).min(t.len() - width);
                let stencil = &t[first..first + width];
                let (a, b) = (t[i], t[i + 1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                let mut weights = vec![0.0; width];
                for (x, wq) in gl_x.iter().zip(gl_w) {
                    let basis = fd_weights(mid + half * x, stencil, 0);
                    for (w, c) in weights.iter_mut().zip(basis) {
                        *w += half * wq * c[0];
                    }
                }
                PanelStencil { first, weights }
            })
            .collect()
    }

    /// Dense matrix `C` with `∫_0^{t_k} F ≈ Σ_j C[k, j] F(t_j)`.
    pub fn cumulative_weight_matrix(&self) -> DMatrix<f64> {
        let len = self.len();
        let mut c = DMatrix::zeros(len, len);
        for (i, st) in self.panel_stencils().iter().enumerate() {
            for j in 0..len {
                c[(i + 1, j)] = c[(i, j)];
            }
            for (l, w) in st.weights.iter().enumerate() {
                c[(i + 1, st.first + l)] += w;
            }
        }
        c
    }

    /// Full-interval weights of the running-integral rule: the last row of
    /// [`cumulative_weight_matrix`](Self::cumulative_weight_matrix).
    pub fn integral_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.len()];
        for st in self.panel_stencils() {
            for (l, c) in st.weights.iter().enumerate() {
                w[st.first + l] += c;
            }
        }
        w
    }

    /// Interpolation weights `(node, weight)` reproducing a value at `t`.
    pub fn interpolation_weights(&self, t: f64) -> Result<Vec<(usize, f64)>> {
        if let Some(k) = self.node_index(t) {
            return Ok(vec![(k, 1.0)]);
        }
        let i = self.locate(t)?;
        let width = self.len().min(4);
        let first = i.saturating_sub(1).min(self.len() - width);
        let stencil = &self.nodes[first..first + width];
        Ok(fd_weights(t, stencil, 0)
            .into_iter()
            .enumerate()
            .map(|(l, c)| (first + l, c[0]))
            .collect())
    }

    /// Five-point (fewer on tiny grids) first-derivative weights at node `k`.
    pub fn derivative_weights(&self, k: usize) -> Vec<(usize, f64)> {
        let width = self.len().min(5);
        let first = k.saturating_sub(2).min(self.len() - width);
        let stencil = &self.nodes[first..first + width];
        fd_weights(self.nodes[k], stencil, 1)
            .into_iter()
            .enumerate()
            .map(|(l, c)| (first + l, c[1]))
            .collect()
    }
}

/// Weights of the local panel rule: `∫_{t_i}^{t_{i+1}} F ≈ Σ_l weights[l] F(t_{first+l})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelStencil {
    pub first: usize,
    pub weights: Vec<f64>,
}

/// Fornberg's finite-difference weights: `c[j][d]` is the weight of node `x[j]`
/// in the `d`-th derivative at `z`, for `d <= order`.
pub fn fd_weights(z: f64, x: &[f64], order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c
}

/// Compensated summation of vectors in insertion order.
#[derive(Debug, Clone)]
pub struct KahanSum {
    sum: DVector<f64>,
    comp: DVector<f64>,
}

impl KahanSum {
    pub fn new(n: usize) -> Self {
        Self {
            sum: DVector::zeros(n),
            comp: DVector::zeros(n),
        }
    }

    pub fn add_scaled(&mut self, w: f64, v: &DVector<f64>) {
        for i in 0..self.sum.len() {
            let y = w * v[i] - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.sum
    }

    pub fn into_value(self) -> DVector<f64> {
        self.sum
    }
}

/// Samples of an `R^n`-valued function at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<SemiInfiniteGrid>,
    values: Vec<DVector<f64>>,
    n: usize,
}

impl GridFunction {
    pub fn new(grid: Arc<SemiInfiniteGrid>, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let n = values[0].len();
        if values.iter().any(|v| v.len() != n) {
            return Err(invalid("grid function samples differ in dimension"));
        }
        Ok(Self { grid, values, n })
    }

    pub fn zeros(grid: Arc<SemiInfiniteGrid>, n: usize) -> Self {
        let values = vec![DVector::zeros(n); grid.len()];
        Self { grid, values, n }
    }

    pub fn from_fn(
        grid: Arc<SemiInfiniteGrid>,
        n: usize,
        mut f: impl FnMut(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let values = grid.nodes().iter().map(|&t| f(t)).collect();
        let gf = Self::new(grid, values)?;
        if gf.n != n {
            return Err(invalid(format!("expected dimension {n}, got {}", gf.n)));
        }
        Ok(gf)
    }

    /// Unpack the stacked vector `[x(t_0); x(t_1); ...]`.
    pub fn from_stacked(grid: Arc<SemiInfiniteGrid>, n: usize, stacked: &[f64]) -> Result<Self> {
        if stacked.len() != n * grid.len() {
            return Err(invalid("stacked vector length does not match grid"));
        }
        let values = stacked
            .chunks(n)
            .map(DVector::from_column_slice)
            .collect();
        Self::new(grid, values)
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n * self.values.len());
        for (k, v) in self.values.iter().enumerate() {
            out.rows_mut(k * self.n, self.n).copy_from(v);
        }
        out
    }

    pub fn grid(&self) -> &Arc<SemiInfiniteGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn at_node(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    /// Value at an arbitrary `t` in `[0, T]`, exact at nodes.
    pub fn value_at(&self, t: f64) -> Result<DVector<f64>> {
        let mut acc = KahanSum::new(self.n);
        for (k, w) in self.grid.interpolation_weights(t)? {
            acc.add_scaled(w, &self.values[k]);
        }
        Ok(acc.into_value())
    }

    /// `max_k |x(t_k)|` with the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, mut f: impl FnMut(f64, &DVector<f64>) -> DVector<f64>) -> Result<Self> {
        let values = self
            .grid
            .nodes()
            .iter()
            .zip(&self.values)
            .map(|(&t, v)| f(t, v))
            .collect();
        Self::new(self.grid.clone(), values)
    }
}

/// `∫_0^T` of sampled data.
pub fn quad_finite(
    samples: &[DVector<f64>],
    grid: &SemiInfiniteGrid,
    rule: QuadRule,
) -> Result<DVector<f64>> {
    if samples.len() != grid.len() {
        return Err(invalid(format!(
            "{} samples for a grid of {} nodes",
            samples.len(),
            grid.len()
        )));
    }
    let n = samples[0].len();
    let mut acc = KahanSum::new(n);
    for (w, s) in grid.weights(rule).iter().zip(samples) {
        if s.len() != n {
            return Err(invalid("samples differ in dimension"));
        }
        acc.add_scaled(*w, s);
    }
    Ok(acc.into_value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailBasis {
    /// Integrand bounded by `k e^{-alpha t}`.
    Exponential { k: f64, alpha: f64 },
    /// No rate known; rely on observed increments.
    IntegrableRemainder,
    UserSupplied,
}

/// Bound on the contribution of `[T, ∞)` to an improper integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub bound: f64,
    pub basis: TailBasis,
}

impl TailEstimate {
    pub fn exponential(k: f64, alpha: f64, t: f64) -> Result<Self> {
        if !(k >= 0.0) || !(alpha > 0.0) {
            return Err(invalid(format!("bad exponential tail (K = {k}, alpha = {alpha})")));
        }
        let basis = TailBasis::Exponential { k, alpha };
        Ok(Self {
            bound: k / alpha * (-alpha * t).exp(),
            basis,
        })
    }

    pub fn integrable_remainder() -> Self {
        Self {
            bound: 0.0,
            basis: TailBasis::IntegrableRemainder,
        }
    }

    pub fn user_supplied(bound: f64) -> Result<Self> {
        if !(bound >= 0.0) {
            return Err(invalid(format!("tail bound must be nonnegative, got {bound}")));
        }
        Ok(Self {
            bound,
            basis: TailBasis::UserSupplied,
        })
    }

    /// Bound on `∫_t^∞ |f|`.
    pub fn bound_beyond(&self, t: f64) -> f64 {
        match self.basis {
            TailBasis::Exponential { k, alpha } => k / alpha * (-alpha * t).exp(),
            TailBasis::IntegrableRemainder => 0.0,
            TailBasis::UserSupplied => self.bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImproperOptions {
    pub initial_t: f64,
    pub max_t: f64,
}

impl Default for ImproperOptions {
    fn default() -> Self {
        Self {
            initial_t: 1.0,
            max_t: (1u64 << 20) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImproperIntegral {
    pub value: DVector<f64>,
    /// Truncation point whose remaining contribution was judged below tolerance.
    pub achieved_t: f64,
}

/// `∫_0^∞ f` by doubling the truncation time until the last increment plus the
/// declared tail bound drop below `tol`.
pub fn quad_improper(
    f: &dyn Fn(f64) -> DVector<f64>,
    tail: &TailEstimate,
    tol: f64,
    opts: ImproperOptions,
) -> Result<ImproperIntegral> {
    if !(opts.initial_t > 0.0) || !(tol > 0.0) {
        return Err(invalid("improper quadrature needs positive initial T and tolerance"));
    }
    let seg_tol = 0.01 * tol;
    let mut t = opts.initial_t;
    let mut value = integrate_segment(f, 0.0, t, seg_tol);
    loop {
        let inc = integrate_segment(f, t, 2.0 * t, seg_tol);
        let inc_norm = inc.norm();
        if inc_norm + tail.bound_beyond(2.0 * t) <= tol {
            value += inc;
            return Ok(ImproperIntegral {
                value,
                achieved_t: t,
            });
        }
        value += inc;
        t *= 2.0;
        if t >= opts.max_t {
            return Err(Error::NoConvergence {
                what: "improper integral did not settle before the truncation cap".into(),
                last_increment: inc_norm,
                at_time: t,
            });
        }
    }
}

/// Composite Simpson on `[a, b]` with panel doubling until two levels agree.
fn integrate_segment(f: &dyn Fn(f64) -> DVector<f64>, a: f64, b: f64, tol: f64) -> DVector<f64> {
    let simpson = |panels: usize| {
        let h = (b - a) / panels as f64;
        let f0 = f(a);
        let mut acc = KahanSum::new(f0.len());
        acc.add_scaled(h / 3.0, &f0);
        for k in 1..panels {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc.add_scaled(w * h / 3.0, &f(a + k as f64 * h));
        }
        acc.add_scaled(h / 3.0, &f(b));
        acc.into_value()
    };
    let mut panels = 32;
    let mut coarse = simpson(panels);
    loop {
        panels *= 2;
        let fine = simpson(panels);
        let diff = (&fine - &coarse).norm();
        if diff <= tol.max(1e-15 * fine.norm()) || panels >= 1 << 15 {
            // Richardson step for Simpson's h^4 error.
            return &fine + (&fine - &coarse) / 15.0;
        }
        coarse = fine;
    }
}

//! Built-in problem instances and JSON variant files.
//!
//! Every problem is assembled from a named base with numeric parameters.
//! A variant file looks like
//!
//! ```json
//! { "problems": [ { "name": "scalar-weak-g", "base": "scalar-model", "params": { "g_scale": 0.1 } } ] }
//! ```

use std::collections::BTreeMap;
use std::f64::consts::E;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryForm;
use crate::error::{invalid, Error, Result};
use crate::grid::TailEstimate;
use crate::linear::{DichotomyMode, LinearPart, MatrixFn, StateFn, StateJacobianFn, VectorFn};
use crate::problem::{Nonlinearity, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Base {
    ScalarModel,
    LinearInvertible,
    DiagKernel,
    PaperEx1Corrected,
    PaperEx1Verbatim,
}

impl Base {
    pub fn dim(self) -> usize {
        match self {
            Base::ScalarModel => 1,
            _ => 2,
        }
    }

    /// Kernel dimension of `Λ` for this base.
    pub fn p_expected(self) -> usize {
        match self {
            Base::LinearInvertible => 0,
            _ => 1,
        }
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            Base::ScalarModel => &["g_scale", "bounded", "decay"],
            Base::PaperEx1Corrected | Base::PaperEx1Verbatim => &["f_scale", "g_scale", "bounded", "shift"],
            _ => &["f_scale", "g_scale", "bounded"],
        }
    }
}

/// A registry entry: base problem plus parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub base: Base,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub description: String,
}

impl ProblemSpec {
    fn new(name: &str, base: Base, description: &str) -> Self {
        Self {
            name: name.into(),
            base,
            params: BTreeMap::new(),
            description: description.into(),
        }
    }

    fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn n(&self) -> usize {
        self.base.dim()
    }

    pub fn p_expected(&self) -> usize {
        if self.base == Base::ScalarModel && self.param("decay", 1.0) != 1.0 {
            return 0;
        }
        self.base.p_expected()
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("problem name must not be empty"));
        }
        for (key, value) in &self.params {
            if !self.base.allowed_params().contains(&key.as_str()) {
                return Err(invalid(format!("problem {}: unknown parameter {key}", self.name)));
            }
            if !value.is_finite() {
                return Err(invalid(format!("problem {}: parameter {key} is not finite", self.name)));
            }
        }
        if self.param("shift", 1.0) <= 0.0 {
            return Err(invalid(format!("problem {}: shift must be positive", self.name)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ProblemInstance> {
        self.validate()?;
        let (fs, gs) = (self.param("f_scale", 1.0), self.param("g_scale", 1.0));
        let problem = match self.base {
            Base::ScalarModel => scalar_model(self.param("decay", 1.0), gs)?,
            Base::LinearInvertible => linear_invertible(fs, gs)?,
            Base::DiagKernel => diag_kernel(fs, gs)?,
            Base::PaperEx1Corrected => example_one(-1.0, self.param("shift", 1.0), fs, gs)?,
            Base::PaperEx1Verbatim => example_one(1.0, self.param("shift", 1.0), fs, gs)?,
        };
        let mode = if self.param("bounded", 0.0) != 0.0 {
            DichotomyMode::Bounded
        } else {
            DichotomyMode::Exponential
        };
        let mut problem = problem.with_dichotomy_mode(mode);
        problem.name = self.name.clone();
        if !self.description.is_empty() {
            problem.description = self.description.clone();
        }
        Ok(problem)
    }
}

#[derive(Debug, Deserialize)]
struct VariantFile {
    problems: Vec<ProblemSpec>,
}

/// Named problems, built-ins first.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    specs: Vec<ProblemSpec>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn builtin() -> Self {
        let specs = vec![
            ProblemSpec::new(
                "scalar-model",
                Base::ScalarModel,
                "x' = -x, x(0) - e x(1) = eps int e^-t (x - 1); branch x = 2 e^-t",
            ),
            ProblemSpec::new("scalar-model-g0", Base::ScalarModel, "scalar model with g = 0; no certified branch")
                .with_param("g_scale", 0.0),
            ProblemSpec::new(
                "linear-invertible",
                Base::LinearInvertible,
                "invertible Lambda with an integral kernel; continuation from the unique linear solution",
            ),
            ProblemSpec::new("diag-kernel", Base::DiagKernel, "A = -I, Lambda = diag(1, 0), nonzero f"),
            ProblemSpec::new(
                "paper-ex1-corrected",
                Base::PaperEx1Corrected,
                "two-dimensional example with f vanishing on x_y (t - 1 in f2), shifted denominators",
            ),
            ProblemSpec::new(
                "paper-ex1-verbatim",
                Base::PaperEx1Verbatim,
                "two-dimensional example as printed (t + 1 in f2), shifted denominators",
            ),
        ];
        Self { specs }
    }

    /// Built-ins plus the variants in `path`.
    pub fn with_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ConfigNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let file: VariantFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut reg = Self::builtin();
        for spec in file.problems {
            reg.insert(spec)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, spec: ProblemSpec) -> Result<()> {
        spec.validate()?;
        if self.get(&spec.name).is_some() {
            return Err(invalid(format!("duplicate problem name {}", spec.name)));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn specs(&self) -> &[ProblemSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&ProblemSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn build(&self, name: &str) -> Result<ProblemInstance> {
        self.get(name)
            .ok_or_else(|| invalid(format!("unknown problem {name}; see list-problems")))?
            .build()
    }
}

fn vec2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

fn mat2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, c, d])
}

/// `x' = -decay x`; `Λ = 1 - e^{1 - decay}` is singular only for `decay = 1`.
fn scalar_model(decay: f64, gs: f64) -> Result<ProblemInstance> {
    let gamma = BoundaryForm::new(1)
        .with_point_mass(0.0, DMatrix::from_element(1, 1, 1.0))?
        .with_point_mass(1.0, DMatrix::from_element(1, 1, -E))?;
    let g: StateFn = Arc::new(move |t, x| DVector::from_element(1, gs * (-t).exp() * (x[0] - 1.0)));
    let dg: StateJacobianFn = Arc::new(move |t, _| DMatrix::from_element(1, 1, gs * (-t).exp()));
    let zero = Nonlinearity::zero(1);
    let nl = Nonlinearity::new(zero.f, g).with_jacobians(zero.df.expect("zero has jacobians"), dg);
    let h: VectorFn = Arc::new(|_| DVector::zeros(1));
    ProblemInstance::new(
        "scalar-model",
        LinearPart::constant(DMatrix::from_element(1, 1, -decay))?,
        gamma,
        h,
        DVector::zeros(1),
        nl,
    )
}

fn linear_invertible(fs: f64, gs: f64) -> Result<ProblemInstance> {
    let b: MatrixFn = Arc::new(|t| DMatrix::from_diagonal(&vec2(0.5, 0.25)) * (-t).exp());
    let gamma = BoundaryForm::initial_value(2).with_kernel(b, TailEstimate::exponential(0.5, 1.0, 0.0)?)?;
    let h: VectorFn = Arc::new(|t| vec2((-2.0 * t).exp(), 0.5 * (-3.0 * t).exp()));
    let f: StateFn = Arc::new(move |t, x| vec2(x[1] * x[1], x[0].sin()) * (fs * (-t).exp()));
    let df: StateJacobianFn = Arc::new(move |t, x| mat2(0.0, 2.0 * x[1], x[0].cos(), 0.0) * (fs * (-t).exp()));
    let g: StateFn = Arc::new(move |t, x| vec2(x[0] * x[1], x[0] * x[0]) * (gs * (-t).exp()));
    let dg: StateJacobianFn = Arc::new(move |t, x| mat2(x[1], x[0], 2.0 * x[0], 0.0) * (gs * (-t).exp()));
    ProblemInstance::new(
        "linear-invertible",
        LinearPart::constant(mat2(-1.0, 0.5, 0.0, -1.0))?,
        gamma,
        h,
        vec2(1.0, 0.5),
        Nonlinearity::new(f, g).with_jacobians(df, dg),
    )
}

fn diag_kernel(fs: f64, gs: f64) -> Result<ProblemInstance> {
    let gamma = BoundaryForm::new(2)
        .with_point_mass(0.0, DMatrix::identity(2, 2))?
        .with_point_mass(1.0, mat2(0.0, 0.0, 0.0, -E))?;
    let f: StateFn = Arc::new(move |t, x| {
        let v = 0.1 * fs * (-t).exp() * x[1] * x[1];
        vec2(v, v)
    });
    let df: StateJacobianFn = Arc::new(move |t, x| {
        let d = 0.2 * fs * (-t).exp() * x[1];
        mat2(0.0, d, 0.0, d)
    });
    let g: StateFn = Arc::new(move |t, x| vec2(x[0], x[1] - 1.0) * (gs * (-t).exp()));
    let dg: StateJacobianFn = Arc::new(move |t, _| DMatrix::identity(2, 2) * (gs * (-t).exp()));
    let h: VectorFn = Arc::new(|_| DVector::zeros(2));
    ProblemInstance::new(
        "diag-kernel",
        LinearPart::constant(-DMatrix::identity(2, 2))?,
        gamma,
        h,
        DVector::zeros(2),
        Nonlinearity::new(f, g).with_jacobians(df, dg),
    )
}

/// `sign = -1` keeps `f` zero on `x_y = e^{-t/2}[1, t - 1]`; `sign = +1` is the printed form.
/// Denominators `t^k` become `(t + shift)^k`.
fn example_one(sign: f64, shift: f64, fs: f64, gs: f64) -> Result<ProblemInstance> {
    let gamma = BoundaryForm::new(2)
        .with_point_mass(0.0, mat2(1.0, 1.0, 1.0, 2.0))?
        .with_point_mass(1.0, mat2(0.0, 0.0, 1.0, -1.0) * 0.5f64.exp())?;
    let gaps = move |t: f64, x: &DVector<f64>| {
        let a = (-0.5 * t).exp();
        (x[0] - a, x[1] - a * (t + sign))
    };
    let f: StateFn = Arc::new(move |t, x| {
        let (d1, d2) = gaps(t, x);
        let tau = t + shift;
        vec2(d1 * d1 / tau.powi(6), (d1 * d1 + 3.0 * d2 * d2) / tau.powi(8)) * fs
    });
    let df: StateJacobianFn = Arc::new(move |t, x| {
        let (d1, d2) = gaps(t, x);
        let tau = t + shift;
        let (t6, t8) = (tau.powi(6), tau.powi(8));
        mat2(2.0 * d1 / t6, 0.0, 2.0 * d1 / t8, 6.0 * d2 / t8) * fs
    });
    let g: StateFn = Arc::new(move |t, x| {
        let a = (-0.5 * t).exp();
        let t2 = (t + shift).powi(2);
        vec2((x[0] * x[0] - (-t).exp()) / t2, 5.0 * (t * a - a - x[1]) / t2) * gs
    });
    let dg: StateJacobianFn = Arc::new(move |t, x| {
        let t2 = (t + shift).powi(2);
        mat2(2.0 * x[0] / t2, 0.0, 0.0, -5.0 / t2) * gs
    });
    let h: VectorFn = Arc::new(|_| DVector::zeros(2));
    let name = if sign < 0.0 { "paper-ex1-corrected" } else { "paper-ex1-verbatim" };
    ProblemInstance::new(
        name,
        LinearPart::constant(mat2(-0.5, 0.0, 1.0, -0.5))?,
        gamma,
        h,
        DVector::zeros(2),
        Nonlinearity::new(f, g).with_jacobians(df, dg),
    )
}

//! Machine-readable run reports and solution files.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::continuation::VerifyReport;
use crate::error::{Error, Result};
use crate::grid::{Grading, GridFunction, SemiInfiniteGrid};
use crate::linear::DichotomyCertificate;

pub const SCHEMA_VERSION: u32 = 1;

/// A float that survives JSON even when it is infinite or NaN; those are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`. Equality is bitwise.
#[derive(Clone, Copy)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl fmt::Debug for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<f64> for Num {
    fn from(v: f64) -> Self {
        Num(v)
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            F(f64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::F(v) => Ok(Num(v)),
            Repr::S(s) => match s.as_str() {
                "nan" => Ok(Num(f64::NAN)),
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// A value together with the tolerance it was tested against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checked {
    pub value: Num,
    pub tol: Num,
    pub pass: bool,
}

impl Checked {
    /// Passes when `value <= tol`; NaN never passes.
    pub fn at_most(value: f64, tol: f64) -> Self {
        Self {
            value: Num(value),
            tol: Num(tol),
            pass: value <= tol,
        }
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn entries(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mesh: usize,
    pub trunc_time: Num,
    pub rank_tol: Num,
    pub tol: Num,
    pub seed: u64,
    pub jitter: usize,
    pub epsilon: Option<Num>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReport {
    pub lambda: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub rank_threshold: f64,
    pub p: usize,
    /// Columns of the kernel basis, one inner vector per column.
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub solvability_residual: Option<Checked>,
    /// `‖x̄‖_∞` of the unique linear solution when `p = 0`.
    pub unique_solution_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub c: Vec<f64>,
    pub y: Vec<f64>,
    pub residual: Checked,
    pub phi: Vec<Vec<f64>>,
    pub condition: Checked,
    pub sigma_min: Num,
    pub certified: bool,
    pub seed_index: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailureReport {
    pub seed_index: usize,
    pub seed: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRow {
    pub eps: f64,
    /// `‖x_ε - x_y‖_∞`.
    pub deviation: Num,
    pub newton_iterations: usize,
    pub newton_residual: Checked,
    pub verify: VerifyReport,
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub start_c: Vec<f64>,
    pub start_from: String,
    pub ladder: Vec<f64>,
    pub rows: Vec<ContinuationRow>,
    pub status: crate::continuation::ContinuationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub eps: f64,
    /// `‖x_oracle - x_ε‖_∞`, or an explanation when shooting failed.
    pub agreement: Option<Checked>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub problem: String,
    pub settings: RunSettings,
    pub dichotomy: Option<DichotomyCertificate>,
    pub linear: Option<LinearReport>,
    pub branches: Vec<BranchReport>,
    pub branch_failures: Vec<SeedFailureReport>,
    pub continuation: Option<ContinuationReport>,
    pub oracle: Option<OracleReport>,
    pub verify: Option<VerifyReport>,
    /// Wall-clock seconds per phase. Not reproducible run to run.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str, problem: &str, settings: RunSettings) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            command: command.into(),
            problem: problem.into(),
            settings,
            dichotomy: None,
            linear: None,
            branches: Vec::new(),
            branch_failures: Vec::new(),
            continuation: None,
            oracle: None,
            verify: None,
            timings: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if report.schema != SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported report schema {}", report.schema)));
        }
        Ok(report)
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// `<problem>_eps<value>.csv`.
pub fn csv_file_name(problem: &str, eps: f64) -> String {
    format!("{problem}_eps{eps}.csv")
}

/// `t,x1,...,xn`, one row per node. Values use the shortest exact decimal form.
pub fn solution_csv(x: &GridFunction) -> String {
    let n = x.dim();
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (t, v) in x.grid().nodes().iter().zip(x.values()) {
        out.push_str(&t.to_string());
        for c in v.iter() {
            out.push(',');
            out.push_str(&c.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parse a solution CSV of dimension `n` into node times and values.
pub fn parse_solution_csv(text: &str, n: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty solution file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected: Vec<String> = std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect();
    if cols != expected {
        return Err(Error::Parse(format!(
            "header {header:?} does not match the expected {:?}",
            expected.join(",")
        )));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, found {}",
                line_no + 1,
                n + 1,
                fields.len()
            )));
        }
        let nums = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {}: bad number {f:?}", line_no + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        times.push(nums[0]);
        values.push(DVector::from_vec(nums[1..].to_vec()));
    }
    Ok((times, values))
}

/// Rebuild a grid function from a parsed solution file.
pub fn solution_from_csv(text: &str, n: usize) -> Result<GridFunction> {
    let (times, values) = parse_solution_csv(text, n)?;
    let grid = SemiInfiniteGrid::from_nodes(times, Grading::Uniform).map_err(|e| Error::Parse(e.to_string()))?;
    GridFunction::new(Arc::new(grid), values)
}

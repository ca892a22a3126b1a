//! Instance and solution files: self-describing JSON with a format tag,
//! version, embedded dimensions and the seed they were generated from.
//! Matrices are stored dense as `{rows, cols, data}` in row-major order.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::conic::SolveReport;
use crate::consensus::AdmmReport;
use crate::error::{Error, Result};
use crate::experiment::Instance;
use crate::linalg::{asymmetry, symmetrize};
use crate::problem::{CostModel, CsProblem, NoiseModel, TerminalSpec};
use crate::sls::ResponsePair;
use crate::system::{LtvNetwork, SwingParams};
use crate::topology::SystemGraph;

pub const INSTANCE_FORMAT: &str = "slscs-instance";
pub const SOLUTION_FORMAT: &str = "slscs-solution";
pub const FORMAT_VERSION: u32 = 1;

/// Largest asymmetry accepted in a stored covariance before it is
/// symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix record has {} entries for shape {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    fn to_symmetric(&self, what: &str) -> Result<DMatrix<f64>> {
        let m = self.to_matrix()?;
        if m.nrows() != m.ncols() {
            return Err(Error::Format(format!("{what} is not square")));
        }
        let asym = asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(Error::Format(format!("{what} is not symmetric (asymmetry {asym:.3e})")));
        }
        Ok(symmetrize(&m))
    }
}

fn records(ms: &[DMatrix<f64>]) -> Vec<MatrixRecord> {
    ms.iter().map(MatrixRecord::from).collect()
}

fn check_format(found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("expected a '{expected}' file, found '{found}'")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub grid: Option<(usize, usize)>,
    /// Configuration the instance was generated from, if any.
    pub config: Option<RunConfig>,
    pub sigma_f_guard: f64,
    pub dims: Vec<(usize, usize)>,
    pub horizon: usize,
    pub locality: usize,
    pub graph: SystemGraph,
    pub a: Vec<MatrixRecord>,
    pub b: Vec<MatrixRecord>,
    pub mu0: Vec<f64>,
    pub sigma0: MatrixRecord,
    pub w: Vec<MatrixRecord>,
    pub q: Vec<MatrixRecord>,
    pub r: Vec<MatrixRecord>,
    pub mu_f: Vec<f64>,
    pub sigma_f: MatrixRecord,
    pub swing: Option<SwingParams>,
}

impl InstanceFile {
    pub fn from_problem(cp: &CsProblem, seed: u64) -> Self {
        let net = &cp.network;
        let t_h = net.horizon();
        Self {
            format: INSTANCE_FORMAT.into(),
            version: FORMAT_VERSION,
            seed,
            grid: None,
            config: None,
            sigma_f_guard: 0.0,
            dims: net.dims().to_vec(),
            horizon: t_h,
            locality: cp.locality,
            graph: cp.graph.clone(),
            a: (0..t_h).map(|t| MatrixRecord::from(net.a(t))).collect(),
            b: (0..t_h).map(|t| MatrixRecord::from(net.b(t))).collect(),
            mu0: cp.noise.mu0.iter().copied().collect(),
            sigma0: MatrixRecord::from(&cp.noise.sigma0),
            w: records(&cp.noise.w),
            q: records(&cp.cost.q),
            r: records(&cp.cost.r),
            mu_f: cp.terminal.mu_f.iter().copied().collect(),
            sigma_f: MatrixRecord::from(&cp.terminal.sigma_f),
            swing: None,
        }
    }

    pub fn from_instance(inst: &Instance, cfg: Option<&RunConfig>) -> Self {
        let mut f = Self::from_problem(&inst.problem, inst.seed);
        f.grid = Some((inst.rows, inst.cols));
        f.config = cfg.cloned();
        f.sigma_f_guard = inst.sigma_f_guard;
        f.swing = inst.swing.clone();
        f
    }

    /// Rebuilds and validates the problem.
    pub fn problem(&self) -> Result<CsProblem> {
        check_format(&self.format, self.version, INSTANCE_FORMAT)?;
        let mats = |v: &[MatrixRecord]| v.iter().map(MatrixRecord::to_matrix).collect::<Result<Vec<_>>>();
        let syms = |v: &[MatrixRecord], what: &str| v.iter().map(|m| m.to_symmetric(what)).collect::<Result<Vec<_>>>();
        let net = LtvNetwork::new(self.dims.clone(), mats(&self.a)?, mats(&self.b)?)?;
        if net.horizon() != self.horizon {
            return Err(Error::Format("horizon does not match the number of dynamics blocks".into()));
        }
        let noise = NoiseModel::new(
            DVector::from_vec(self.mu0.clone()),
            self.sigma0.to_symmetric("Sigma_0")?,
            syms(&self.w, "W_t")?,
        )?;
        let cost = CostModel::new(syms(&self.q, "Q_t")?, syms(&self.r, "R_t")?)?;
        let terminal = TerminalSpec::new(DVector::from_vec(self.mu_f.clone()), self.sigma_f.to_symmetric("Sigma_f")?)?;
        CsProblem::new(net, self.graph.clone(), noise, cost, terminal, self.locality)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        check_format(&f.format, f.version, INSTANCE_FORMAT)?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Central,
    CentralTransformed,
    Admm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Central => "central",
            Method::CentralTransformed => "central-transformed",
            Method::Admm => "admm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RunReport {
    Conic(SolveReport),
    Admm(AdmmReport),
}

impl RunReport {
    /// True for an optimal conic solve or a converged ADMM run.
    pub fn succeeded(&self) -> bool {
        match self {
            RunReport::Conic(r) => r.status == crate::conic::Status::Optimal,
            RunReport::Admm(r) => r.status == crate::consensus::AdmmStatus::Converged,
        }
    }

    pub fn status(&self) -> String {
        match self {
            RunReport::Conic(r) => r.status.to_string(),
            RunReport::Admm(r) => r.status.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub format: String,
    pub version: u32,
    /// Seed of the instance this solves.
    pub instance_seed: u64,
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub phi_x: MatrixRecord,
    pub phi_u: MatrixRecord,
    pub report: RunReport,
}

impl SolutionFile {
    pub fn new(pair: &ResponsePair, method: Method, instance_seed: u64, report: RunReport) -> Self {
        Self {
            format: SOLUTION_FORMAT.into(),
            version: FORMAT_VERSION,
            instance_seed,
            method,
            n: pair.n(),
            m: pair.m(),
            horizon: pair.horizon(),
            phi_x: MatrixRecord::from(&pair.phi_x),
            phi_u: MatrixRecord::from(&pair.phi_u),
            report,
        }
    }

    pub fn pair(&self) -> Result<ResponsePair> {
        check_format(&self.format, self.version, SOLUTION_FORMAT)?;
        ResponsePair::new(self.phi_x.to_matrix()?, self.phi_u.to_matrix()?, self.n, self.m, self.horizon)
    }

    /// The response pair, checked against the problem's dimensions.
    pub fn pair_for(&self, cp: &CsProblem) -> Result<ResponsePair> {
        if (self.n, self.m, self.horizon) != (cp.n(), cp.m(), cp.horizon()) {
            return Err(Error::Argument(format!(
                "solution has n={}, m={}, T={} but the instance has n={}, m={}, T={}",
                self.n,
                self.m,
                self.horizon,
                cp.n(),
                cp.m(),
                cp.horizon()
            )));
        }
        self.pair()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        check_format(&f.format, f.version, SOLUTION_FORMAT)?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{generate, reduced_config};
    use crate::fixtures::tiny2;

    #[test]
    fn matrix_record_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = MatrixRecord::from(&m);
        assert_eq!(r.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.to_matrix().unwrap(), m);
    }

    #[test]
    fn short_record_is_rejected() {
        let r = MatrixRecord {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(matches!(r.to_matrix(), Err(Error::Format(_))));
    }

    #[test]
    fn instance_round_trip_rebuilds_problem() {
        let cfg = reduced_config(2, 2, 3, 7);
        let inst = generate(&cfg).unwrap();
        let file = InstanceFile::from_instance(&inst, Some(&cfg));
        let back = InstanceFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
        let cp = back.problem().unwrap();
        assert_eq!(cp.theta(), inst.problem.theta());
        assert_eq!(cp.terminal.sigma_f, inst.problem.terminal.sigma_f);
        assert_eq!(cp.graph, inst.problem.graph);
        assert_eq!(back.config.as_ref(), Some(&cfg));
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let mut file = InstanceFile::from_problem(&tiny2(), 0);
        file.sigma_f.data[1] += 1e-6;
        let err = file.problem().unwrap_err().to_string();
        assert!(err.contains("Sigma_f"), "{err}");
    }

    #[test]
    fn small_asymmetry_is_symmetrized() {
        let mut file = InstanceFile::from_problem(&tiny2(), 0);
        file.sigma_f.data[1] += 1e-12;
        let cp = file.problem().unwrap();
        assert_eq!(cp.terminal.sigma_f, cp.terminal.sigma_f.transpose());
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let file = InstanceFile::from_problem(&tiny2(), 0);
        let json = file.to_json().unwrap().replace(INSTANCE_FORMAT, SOLUTION_FORMAT);
        assert!(InstanceFile::from_json(&json).is_err());
    }

    #[test]
    fn solution_dimension_mismatch_is_an_argument_error() {
        let cp = tiny2();
        let pair = ResponsePair::zeros(3, 3, 2);
        let rep = RunReport::Conic(SolveReport {
            status: crate::conic::Status::Optimal,
            objective: 0.0,
            primal_residual: 0.0,
            psd_residual: 0.0,
            tolerance: 0.0,
            iterations: 0,
            wall_time_s: 0.0,
            rho: 0.0,
            diagnosis: None,
            fixed_point_trace: Vec::new(),
        });
        let sol = SolutionFile::new(&pair, Method::Central, 0, rep);
        let back = SolutionFile::from_json(&sol.to_json().unwrap()).unwrap();
        assert!(matches!(back.pair_for(&cp), Err(Error::Argument(_))));
    }
}

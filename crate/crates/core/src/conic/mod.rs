//! Quadratic-objective conic programs over zero, nonnegative and
//! second-order cones: minimize ½xᵀPx + qᵀx subject to Ax + s = b, s ∈ K.

mod admm;
mod brute;
mod cones;
mod ipm;
mod kkt;
mod sparse;

pub use admm::{solve, AdmmSolver};
pub use brute::brute_force_qp;
pub use cones::{dual_cone_distance, primal_cone_distance, project_cone};
pub use ipm::{solve_interior_point, IpmSettings};
pub use kkt::{factorize_kkt, KktFactor};
pub use sparse::SparseMatrix;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "snake_case")]
pub enum Cone {
    Zero(usize),
    NonNeg(usize),
    SecondOrder(usize),
}

impl Cone {
    pub fn size(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::NonNeg(n) | Cone::SecondOrder(n) => n,
        }
    }
}

/// `p` holds the upper triangle of the symmetric objective matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub p: SparseMatrix,
    pub q: Vec<f64>,
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
    #[serde(default)]
    pub constant: f64,
}

impl ConicProgram {
    pub fn variables(&self) -> usize {
        self.q.len()
    }

    pub fn constraints(&self) -> usize {
        self.b.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, m) = (self.variables(), self.constraints());
        check_dim("P rows", n, self.p.nrows)?;
        check_dim("P columns", n, self.p.ncols)?;
        check_dim("A rows", m, self.a.nrows)?;
        check_dim("A columns", n, self.a.ncols)?;
        check_dim("cone sizes", m, self.cones.iter().map(Cone::size).sum())?;
        if self.p.has_lower_entries() {
            return Err(Error::Parameter {
                name: "P",
                reason: "only the upper triangle may be stored".into(),
            });
        }
        for c in &self.cones {
            if let Cone::SecondOrder(0) = c {
                return Err(Error::Parameter {
                    name: "cones",
                    reason: "second-order cone of size zero".into(),
                });
            }
        }
        Ok(())
    }

    /// Shape checks plus the PSD test λ_min(P) ≥ −1e-10·‖P‖ (dense, so
    /// meant for validation rather than hot loops).
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let p = self.p.symmetric_dense();
        let norm = p.amax();
        if norm > 0.0 {
            let lmin = crate::linalg::min_eigenvalue(&p);
            if lmin < -1e-10 * norm {
                return Err(Error::Parameter {
                    name: "P",
                    reason: format!("not positive semidefinite (λ_min = {lmin:e})"),
                });
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.symmetric_mul(x);
        0.5 * dot(x, &px) + dot(&self.q, x) + self.constant
    }

    /// Primal, dual and complementarity residuals in the ∞-norm.
    pub fn residuals(&self, x: &[f64], s: &[f64], y: &[f64]) -> (f64, f64, f64) {
        let ax = self.a.mul(x);
        let primal = ax
            .iter()
            .zip(s)
            .zip(&self.b)
            .map(|((a, s), b)| (a + s - b).abs())
            .fold(0.0, f64::max);
        let px = self.p.symmetric_mul(x);
        let aty = self.a.tmul(y);
        let dual = px
            .iter()
            .zip(&self.q)
            .zip(&aty)
            .map(|((p, q), a)| (p + q + a).abs())
            .fold(0.0, f64::max);
        let gap = dot(s, y).abs();
        (primal, dual, gap)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.check_shapes()?;
        Ok(p)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    /// Dual variable in the dual cone, with Px + q + Aᵀy = 0 at optimality.
    pub y: Vec<f64>,
    pub objective: f64,
    pub status: ConicStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
    #[serde(default)]
    pub regularized: bool,
    #[serde(default)]
    pub polished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha_relax: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha_relax: 1.6,
            adaptive_rho: true,
            polish: true,
            warm_start: None,
        }
    }
}

/// Which algorithm solves the programs built by the OCP assembler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Admm(Settings),
    InteriorPoint(IpmSettings),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::InteriorPoint(IpmSettings::default())
    }
}

impl Backend {
    pub fn solve(&self, program: &ConicProgram) -> Result<ConicSolution> {
        match self {
            Backend::Admm(s) => solve(program, s),
            Backend::InteriorPoint(s) => solve_interior_point(program, s),
        }
    }
}

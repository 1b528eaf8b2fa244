use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::{Deserialize, Serialize};

use super::{Cone, ConicProgram, ConicSolution, ConicStatus, SparseMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpmSettings {
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
    #[serde(default)]
    pub verbose: bool,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol_gap_abs: 1e-10,
            tol_gap_rel: 1e-10,
            tol_feas: 1e-10,
            max_iter: 200,
            verbose: false,
        }
    }
}

fn csc(m: &SparseMatrix) -> CscMatrix<f64> {
    CscMatrix::new(m.nrows, m.ncols, m.colptr.clone(), m.rowval.clone(), m.nzval.clone())
}

/// Primal-dual interior point backend (Clarabel).
pub fn solve_interior_point(program: &ConicProgram, settings: &IpmSettings) -> Result<ConicSolution> {
    program.check_shapes()?;
    let cones: Vec<SupportedConeT<f64>> = program
        .cones
        .iter()
        .map(|c| match *c {
            Cone::Zero(n) => ZeroConeT(n),
            Cone::NonNeg(n) => NonnegativeConeT(n),
            Cone::SecondOrder(n) => SecondOrderConeT(n),
        })
        .collect();
    let opts = DefaultSettingsBuilder::default()
        .verbose(settings.verbose)
        .max_iter(settings.max_iter)
        .tol_gap_abs(settings.tol_gap_abs)
        .tol_gap_rel(settings.tol_gap_rel)
        .tol_feas(settings.tol_feas)
        .build()
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let p = csc(&program.p);
    let a = csc(&program.a);
    let mut solver = DefaultSolver::new(&p, &program.q, &a, &program.b, &cones, opts)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => ConicStatus::Optimal,
        SolverStatus::AlmostSolved => ConicStatus::MaxIter,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => ConicStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ConicStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => ConicStatus::MaxIter,
        _ => ConicStatus::NumericalError,
    };
    let (primal_residual, dual_residual, gap) = program.residuals(&sol.x, &sol.s, &sol.z);
    let objective = match status {
        ConicStatus::Infeasible => f64::INFINITY,
        ConicStatus::Unbounded => f64::NEG_INFINITY,
        _ => program.objective(&sol.x),
    };
    Ok(ConicSolution {
        x: sol.x.clone(),
        s: sol.s.clone(),
        y: sol.z.clone(),
        objective,
        status,
        primal_residual,
        dual_residual,
        gap,
        iterations: sol.iterations as usize,
        regularized: false,
        polished: false,
    })
}

//! Hankel matrices, persistency of excitation and the data-based predictor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::linalg::{matmul_compensated, ScaledPinv};
use crate::lti::DataArchive;
use crate::pce::PceVector;

const PINV_TOL: f64 = 1e-10;
const REFINE_STEPS: usize = 3;

/// Block Hankel matrix of depth `depth`; column c stacks rows c..c+depth-1.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (t, n) = signal.shape();
    if depth == 0 || depth > t {
        return Err(param("depth", format!("{depth} not in [1, {t}]")));
    }
    let cols = t - depth + 1;
    Ok(DMatrix::from_fn(depth * n, cols, |r, c| signal[(c + r / n, r % n)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub exciting: bool,
    pub rank: usize,
    pub rows: usize,
    pub columns: usize,
    pub singular_values: Vec<f64>,
}

/// Full row rank test of the depth-`order` Hankel matrix of the joint
/// signal (u, w), with relative tolerance 1e-9.
pub fn is_persistently_exciting(u: &DMatrix<f64>, w: &DMatrix<f64>, order: usize) -> PeReport {
    let t = u.nrows().min(w.nrows());
    let n = u.ncols() + w.ncols();
    let rows = order * n;
    let columns = (t + 1).saturating_sub(order);
    if order == 0 || order > t || rows > columns {
        return PeReport {
            exciting: false,
            rank: 0,
            rows,
            columns,
            singular_values: Vec::new(),
        };
    }
    let joint = DMatrix::from_fn(t, n, |i, j| {
        if j < u.ncols() {
            u[(i, j)]
        } else {
            w[(i, j - u.ncols())]
        }
    });
    let h = hankel(&joint, order).expect("depth checked above");
    let mut sv: Vec<f64> = h.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > 1e-9 * smax && s > 0.0).count();
    PeReport {
        exciting: rank == rows,
        rank,
        rows,
        columns,
        singular_values: sv,
    }
}

/// Hankel matrices of recorded data at the depths used by the OCP.
#[derive(Clone, Debug)]
pub struct HankelStack {
    pub h_u: DMatrix<f64>,
    pub h_y: DMatrix<f64>,
    pub h_w: DMatrix<f64>,
    pub horizon: usize,
    pub t_ini: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_w: usize,
}

impl HankelStack {
    pub fn new(archive: &DataArchive, horizon: usize) -> Result<Self> {
        let t_ini = archive.t_ini;
        let depth = horizon + t_ini;
        if horizon == 0 || depth > archive.length {
            return Err(param(
                "horizon",
                format!("depth {depth} exceeds archive length {}", archive.length),
            ));
        }
        let h_u = hankel(&archive.u, depth)?;
        let h_y = hankel(&archive.y, depth)?;
        let w_tail = archive.w.rows(t_ini, archive.length - t_ini).into_owned();
        let h_w = hankel(&w_tail, horizon)?;
        check_dim("Hankel columns", h_u.ncols(), h_w.ncols())?;
        Ok(Self {
            h_u,
            h_y,
            h_w,
            horizon,
            t_ini,
            n_u: archive.n_u,
            n_y: archive.n_y,
            n_w: archive.n_w(),
        })
    }

    pub fn columns(&self) -> usize {
        self.h_u.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.t_ini * (self.n_u + self.n_y)
    }

    /// Rows pinned by the predictor: past u, past y, future u, future w.
    pub fn conditioning_matrix(&self) -> DMatrix<f64> {
        let (pu, py) = (self.t_ini * self.n_u, self.t_ini * self.n_y);
        let fu = self.horizon * self.n_u;
        let fw = self.horizon * self.n_w;
        let mut pi = DMatrix::zeros(pu + py + fu + fw, self.columns());
        pi.rows_mut(0, pu).copy_from(&self.h_u.rows(0, pu));
        pi.rows_mut(pu, py).copy_from(&self.h_y.rows(0, py));
        pi.rows_mut(pu + py, fu).copy_from(&self.h_u.rows(pu, fu));
        pi.rows_mut(pu + py + fu, fw).copy_from(&self.h_w);
        pi
    }

    pub fn future_outputs(&self) -> DMatrix<f64> {
        let py = self.t_ini * self.n_y;
        self.h_y.rows(py, self.horizon * self.n_y).into_owned()
    }

    /// [H_u; H_y; H_w] as in the data equation of the OCP.
    pub fn full_stack(&self) -> DMatrix<f64> {
        let (a, b, c) = (self.h_u.nrows(), self.h_y.nrows(), self.h_w.nrows());
        let mut m = DMatrix::zeros(a + b + c, self.columns());
        m.rows_mut(0, a).copy_from(&self.h_u);
        m.rows_mut(a, b).copy_from(&self.h_y);
        m.rows_mut(a + b, c).copy_from(&self.h_w);
        m
    }
}

/// Linear map from (past window z, future inputs, future disturbances) to
/// future outputs implied by the data: y_f = Θ [z; u_f; w_f], together with
/// the minimum-norm Hankel weights g = G [z; u_f; w_f].
#[derive(Clone, Debug)]
pub struct Predictor {
    theta: DMatrix<f64>,
    g_map: DMatrix<f64>,
    conditioning: ScaledPinv,
    n_z: usize,
    n_uf: usize,
    n_wf: usize,
    n_yf: usize,
}

impl Predictor {
    pub fn new(stack: &HankelStack) -> Result<Self> {
        let pi = stack.conditioning_matrix();
        let y_f = stack.future_outputs();
        let conditioning = ScaledPinv::new(&pi, Some(&y_f), PINV_TOL);
        let g_map = conditioning.inverse(REFINE_STEPS);
        let theta = matmul_compensated(&y_f, &g_map);
        Ok(Self {
            theta,
            g_map,
            conditioning,
            n_z: stack.n_z(),
            n_uf: stack.horizon * stack.n_u,
            n_wf: stack.horizon * stack.n_w,
            n_yf: stack.horizon * stack.n_y,
        })
    }

    pub fn rank(&self) -> usize {
        self.conditioning.rank()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn theta_z(&self) -> DMatrix<f64> {
        self.theta.columns(0, self.n_z).into_owned()
    }

    pub fn theta_u(&self) -> DMatrix<f64> {
        self.theta.columns(self.n_z, self.n_uf).into_owned()
    }

    pub fn theta_w(&self) -> DMatrix<f64> {
        self.theta.columns(self.n_z + self.n_uf, self.n_wf).into_owned()
    }

    pub fn g_map(&self) -> &DMatrix<f64> {
        &self.g_map
    }

    pub fn output_len(&self) -> usize {
        self.n_yf
    }

    pub fn input_len(&self) -> usize {
        self.n_uf
    }

    pub fn disturbance_len(&self) -> usize {
        self.n_wf
    }

    pub fn state_len(&self) -> usize {
        self.n_z
    }

    fn stacked(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut rhs = DVector::zeros(self.n_z + self.n_uf + self.n_wf);
        rhs.rows_mut(0, self.n_z).copy_from(z);
        rhs.rows_mut(self.n_z, self.n_uf).copy_from(u);
        rhs.rows_mut(self.n_z + self.n_uf, self.n_wf).copy_from(w);
        rhs
    }

    /// Hankel weights reproducing the pinned rows, with the largest residual.
    pub fn weights(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, f64) {
        let rhs = self.stacked(z, u, w);
        let g = self.conditioning.solve(&rhs, REFINE_STEPS);
        let res = self.conditioning.residual(&g, &rhs).amax();
        (g, res)
    }

    pub fn predict(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        crate::linalg::matvec_compensated(&self.theta, &self.stacked(z, u, w))
    }
}

/// Result of testing a candidate trajectory against the data equation.
#[derive(Clone, Debug)]
pub struct LemmaResidual {
    pub residual: f64,
    pub g: DVector<f64>,
}

/// Least-squares membership test for the column span of [H_u; H_y; H_w].
#[derive(Clone, Debug)]
pub struct LemmaVerifier {
    solver: ScaledPinv,
    depth: usize,
    horizon: usize,
    n_u: usize,
    n_y: usize,
    n_w: usize,
}

impl LemmaVerifier {
    pub fn new(stack: &HankelStack) -> Self {
        Self {
            solver: ScaledPinv::new(&stack.full_stack(), None, PINV_TOL),
            depth: stack.horizon + stack.t_ini,
            horizon: stack.horizon,
            n_u: stack.n_u,
            n_y: stack.n_y,
            n_w: stack.n_w,
        }
    }

    /// `u`, `y` have `N + T_ini` rows, `w` has `N` rows (one per time step).
    pub fn verify(&self, u: &DMatrix<f64>, w: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LemmaResidual> {
        check_dim("candidate input length", self.depth, u.nrows())?;
        check_dim("candidate output length", self.depth, y.nrows())?;
        check_dim("candidate disturbance length", self.horizon, w.nrows())?;
        check_dim("candidate input width", self.n_u, u.ncols())?;
        check_dim("candidate output width", self.n_y, y.ncols())?;
        check_dim("candidate disturbance width", self.n_w, w.ncols())?;
        let flat = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        let mut rhs = flat(u);
        rhs.extend(flat(y));
        rhs.extend(flat(w));
        let rhs = DVector::from_vec(rhs);
        let g = self.solver.solve(&rhs, REFINE_STEPS);
        let residual = self.solver.residual(&g, &rhs).amax();
        Ok(LemmaResidual { residual, g })
    }
}

pub fn verify_realization_lemma(
    stack: &HankelStack,
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<LemmaResidual> {
    LemmaVerifier::new(stack).verify(u, w, y)
}

#[derive(Clone, Debug)]
pub struct PcePrediction {
    /// Row j: future output coefficients, steps stacked.
    pub outputs: PceVector,
    /// Row j: Hankel weights gʲ.
    pub weights: DMatrix<f64>,
}

/// Solves the data equation separately for every basis index j, pinning
/// the past window, future inputs and disturbance coefficients.
pub fn predict_pce_trajectory(
    predictor: &Predictor,
    past: &PceVector,
    inputs: &PceVector,
    disturbances: &PceVector,
) -> Result<PcePrediction> {
    let l = past.terms();
    check_dim("input terms", l, inputs.terms())?;
    check_dim("disturbance terms", l, disturbances.terms())?;
    check_dim("past window width", predictor.state_len(), past.width())?;
    check_dim("future input width", predictor.input_len(), inputs.width())?;
    check_dim(
        "future disturbance width",
        predictor.disturbance_len(),
        disturbances.width(),
    )?;
    let mut outputs = DMatrix::zeros(l, predictor.output_len());
    let mut weights = DMatrix::zeros(l, predictor.g_map().nrows());
    for j in 0..l {
        let z = past.coefficients.row(j).transpose();
        let u = inputs.coefficients.row(j).transpose();
        let w = disturbances.coefficients.row(j).transpose();
        let (g, res) = predictor.weights(&z, &u, &w);
        let scale = 1.0 + z.amax().max(u.amax()).max(w.amax());
        if res > 1e-6 * scale {
            return Err(Error::Infeasible(format!(
                "coefficient {j}: pinned rows not in the data span (residual {res:e})"
            )));
        }
        outputs.set_row(j, &predictor.predict(&z, &u, &w).transpose());
        weights.set_row(j, &g.transpose());
    }
    Ok(PcePrediction {
        outputs: PceVector::new(outputs),
        weights,
    })
}

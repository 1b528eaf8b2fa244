//! Terminal cost, terminal feedback, covariance bound and terminal set.
//! Identification of the ARX parameters from data happens here only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::linalg::{max_eigenvalue, row_major, solve_dare, solve_stein, vector, ScaledPinv};
use crate::lti::{extended_matrices, rng_stream, DataArchive};

/// {z : F z ≤ h}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    #[serde(with = "row_major")]
    pub f: DMatrix<f64>,
    #[serde(with = "vector")]
    pub h: DVector<f64>,
}

impl Polytope {
    pub fn boxed(half_widths: &DVector<f64>) -> Self {
        let n = half_widths.len();
        let mut f = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            f[(i, i)] = 1.0;
            f[(n + i, i)] = -1.0;
            h[i] = half_widths[i];
            h[n + i] = half_widths[i];
        }
        Self { f, h }
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        (&self.f * z - &self.h).iter().all(|v| *v <= tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    #[serde(with = "row_major")]
    pub p: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub k: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub gamma_weight: DMatrix<f64>,
    pub gamma_level: f64,
    pub delta: f64,
    pub terminal_set: Polytope,
    /// Multiplier on R used for the terminal feedback design.
    pub input_weight_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "signal", content = "component", rename_all = "snake_case")]
pub enum Signal {
    Input(usize),
    Output(usize),
}

/// Chance constraint lower ≤ v ≤ upper with tightening factor `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceBound {
    pub signal: Signal,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub sigma: f64,
}

impl ChanceBound {
    fn margin_to_origin(&self) -> Result<f64> {
        let lo = self.lower.map_or(f64::INFINITY, |l| -l);
        let hi = self.upper.unwrap_or(f64::INFINITY);
        let m = lo.min(hi);
        if m <= 0.0 {
            return Err(param(
                "bounds",
                format!("{:?} does not contain the origin", self.signal),
            ));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalOptions {
    pub ridge: f64,
    /// Stationary tightened spread must stay below this fraction of each bound.
    pub spread_margin: f64,
    pub detune: bool,
    pub box_cap: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            spread_margin: 0.95,
            detune: true,
            box_cap: 1e3,
            samples: 10_000,
            seed: 0,
        }
    }
}

/// Least-squares fit of (Φ, D) to y_t − w_t = Φ z_t + D u_t.
pub fn identify_arx(archive: &DataArchive) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (nu, ny) = (archive.n_u, archive.n_y);
    let nz = archive.t_ini * (nu + ny);
    if archive.length <= nz + nu {
        return Err(param("archive", "too short to identify the ARX parameters"));
    }
    let states = archive.extended_states();
    let t = archive.length;
    let x = DMatrix::from_fn(
        t,
        nz + nu,
        |i, j| {
            if j < nz {
                states[i].0[j]
            } else {
                archive.u[(i, j - nz)]
            }
        },
    );
    let solver = ScaledPinv::new(&x, None, 1e-12);
    if solver.rank() < nz + nu {
        return Err(Error::RankDeficient(format!(
            "regressor rank {} < {}; singular values {:?}",
            solver.rank(),
            nz + nu,
            solver.singular_values()
        )));
    }
    let mut theta = DMatrix::zeros(nz + nu, ny);
    for c in 0..ny {
        let target = DVector::from_fn(t, |i, _| archive.y[(i, c)] - archive.w[(i, c)]);
        theta.set_column(c, &solver.solve(&target, 3));
    }
    let phi = theta.rows(0, nz).transpose();
    let d = theta.rows(nz, nu).transpose();
    Ok((phi, d))
}

/// P with A_Kᵀ P A_K − P = −(KᵀRK + C_KᵀQC_K) − 1e-8·I.
pub fn terminal_cost_weight(
    a_k: &DMatrix<f64>,
    c_k: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a_k.nrows();
    let stage = k.transpose() * r * k + c_k.transpose() * q * c_k + DMatrix::identity(n, n) * 1e-8;
    solve_stein(a_k, &stage)
}

/// α = trace(Σ_W (Q + Ẽᵀ P Ẽ)); ẼᵀPẼ is the trailing n_y × n_y block of P.
pub fn alpha_bound(p: &DMatrix<f64>, q: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> f64 {
    let ny = q.nrows();
    let n = p.nrows();
    let tail = p.view((n - ny, n - ny), (ny, ny));
    (sigma_w * (q + tail)).trace()
}

pub struct Synthesis<'a> {
    pub phi: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
    pub t_ini: usize,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub sigma_w: &'a DMatrix<f64>,
    pub chance: &'a [ChanceBound],
}

pub fn synthesize(spec: &Synthesis<'_>, opts: &TerminalOptions) -> Result<TerminalIngredients> {
    let (phi, d, q, r) = (spec.phi, spec.d, spec.q, spec.r);
    let ny = phi.nrows();
    let nu = d.ncols();
    check_dim("Q size", ny, q.nrows())?;
    check_dim("R size", nu, r.nrows())?;
    check_dim("disturbance covariance", ny, spec.sigma_w.nrows())?;
    let ext = extended_matrices(phi, d, spec.t_ini);
    let nz = ext.a.nrows();
    let sigma_hat = &ext.e * spec.sigma_w * ext.e.transpose();
    let qz = phi.transpose() * q * phi + DMatrix::identity(nz, nz) * opts.ridge;
    let cross = phi.transpose() * q * d;
    let dqd = d.transpose() * q * d;

    let mut scale = 1.0;
    let (k, a_k) = loop {
        let (_, k) = solve_dare(&ext.a, &ext.b, &qz, &(r * scale + &dqd), &cross)?;
        let a_k = &ext.a + &ext.b * &k;
        if !opts.detune || spec.chance.is_empty() {
            break (k, a_k);
        }
        let cov = solve_stein(&a_k.transpose(), &sigma_hat)?;
        let c_k = phi + d * &k;
        let mut ok = true;
        for b in spec.chance {
            let var = match b.signal {
                Signal::Output(c) => {
                    let row = c_k.row(c);
                    (row * &cov * row.transpose())[(0, 0)] + spec.sigma_w[(c, c)]
                }
                Signal::Input(c) => {
                    let row = k.row(c);
                    (row * &cov * row.transpose())[(0, 0)]
                }
            };
            if b.sigma * var.sqrt() > opts.spread_margin * b.margin_to_origin()? {
                ok = false;
            }
        }
        if ok {
            break (k, a_k);
        }
        scale *= 2.0;
        if scale > 2f64.powi(40) {
            return Err(Error::Stabilizability(
                "no input-weight detuning meets the stationary chance bounds".into(),
            ));
        }
    };
    let c_k = phi + d * &k;
    let p = terminal_cost_weight(&a_k, &c_k, &k, q, r)?;
    let gamma_weight = solve_stein(&a_k, &DMatrix::identity(nz, nz))?;
    let delta = 1.0 / max_eigenvalue(&gamma_weight);
    let gamma_level = (&gamma_weight * &sigma_hat).trace() / delta;

    // box budget per component: one-step disturbance spread is reserved
    let mut half = DVector::from_element(nz, opts.box_cap);
    for b in spec.chance {
        let (row, reserve) = match b.signal {
            Signal::Output(c) => (c_k.row(c).transpose(), b.sigma * spec.sigma_w[(c, c)].sqrt()),
            Signal::Input(c) => (k.row(c).transpose(), 0.0),
        };
        let budget = b.margin_to_origin()? - reserve;
        if budget <= 0.0 {
            return Err(param(
                "bounds",
                format!("{:?}: no room left after tightening", b.signal),
            ));
        }
        for i in 0..nz {
            let a = row[i].abs().max(1e-3);
            half[i] = half[i].min(budget / (nz as f64 * a));
        }
    }
    let mut rng = rng_stream(opts.seed, 0);
    let mut shrink = 1.0;
    loop {
        let scaled = &half * shrink;
        if verify_terminal_box(&scaled, &c_k, &k, spec, opts.samples, &mut rng) {
            half = scaled;
            break;
        }
        shrink *= 0.5;
        if shrink < 1e-6 {
            return Err(Error::Infeasible(
                "terminal box verification failed at the floor".into(),
            ));
        }
    }
    Ok(TerminalIngredients {
        p,
        k,
        gamma_weight,
        gamma_level,
        delta,
        terminal_set: Polytope::boxed(&half),
        input_weight_scale: scale,
    })
}

fn verify_terminal_box<R: Rng>(
    half: &DVector<f64>,
    c_k: &DMatrix<f64>,
    k: &DMatrix<f64>,
    spec: &Synthesis<'_>,
    samples: usize,
    rng: &mut R,
) -> bool {
    for _ in 0..samples {
        let z = DVector::from_fn(half.len(), |i, _| rng.gen_range(-1.0..=1.0) * half[i]);
        for b in spec.chance {
            let (mean, spread) = match b.signal {
                Signal::Output(c) => ((c_k.row(c) * &z)[0], b.sigma * spec.sigma_w[(c, c)].sqrt()),
                Signal::Input(c) => ((k.row(c) * &z)[0], 0.0),
            };
            if b.upper.is_some_and(|u| mean + spread > u) || b.lower.is_some_and(|l| mean - spread < l) {
                return false;
            }
        }
    }
    true
}

impl TerminalIngredients {
    pub fn alpha(&self, q: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> f64 {
        alpha_bound(&self.p, q, sigma_w)
    }

    /// ‖A_KᵀPA_K − P + KᵀRK + C_KᵀQC_K + 1e-8·I‖∞ on the given model.
    pub fn lyapunov_residual(
        &self,
        phi: &DMatrix<f64>,
        d: &DMatrix<f64>,
        t_ini: usize,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> f64 {
        let ext = extended_matrices(phi, d, t_ini);
        let a_k = &ext.a + &ext.b * &self.k;
        let c_k = phi + d * &self.k;
        let n = a_k.nrows();
        let m = a_k.transpose() * &self.p * &a_k - &self.p
            + self.k.transpose() * r * &self.k
            + c_k.transpose() * q * &c_k
            + DMatrix::identity(n, n) * 1e-8;
        m.amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_geometric_series() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let c = DMatrix::from_element(1, 1, 1.0);
        let k = DMatrix::zeros(1, 1);
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = terminal_cost_weight(&a, &c, &k, &one, &one).unwrap();
        assert!((p[(0, 0)] - (1.0 + 1e-8) / 0.75).abs() < 1e-14);
    }

    #[test]
    fn alpha_block_arithmetic() {
        let mut p = DMatrix::zeros(4, 4);
        p[(2, 2)] = 2.0;
        p[(3, 3)] = 2.0;
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((alpha_bound(&p, &i2, &i2) - 6.0).abs() < 1e-15);
        assert_eq!(alpha_bound(&p, &i2, &DMatrix::zeros(2, 2)), 0.0);
    }
}

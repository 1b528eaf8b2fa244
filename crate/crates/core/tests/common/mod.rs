#![allow(dead_code)]

use ddspc::conic::{Cone, ConicProgram, SparseMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Feasible random QP with at most three variables, a few inequality rows
/// and possibly one equality row. P is positive definite.
pub fn random_tiny_qp<R: Rng>(rng: &mut R) -> ConicProgram {
    let n = rng.gen_range(1..=3);
    let m_ineq = rng.gen_range(0..=4);
    let has_eq = n > 1 && rng.gen_bool(0.3);
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = l.transpose() * &l + DMatrix::identity(n, n) * 0.1;
    let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let rows = m_ineq + usize::from(has_eq);
    let a = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
    let ax0 = &a * &x0;
    let mut b = Vec::with_capacity(rows);
    let mut cones = Vec::new();
    if has_eq {
        b.push(ax0[0]);
        cones.push(Cone::Zero(1));
    }
    for i in usize::from(has_eq)..rows {
        b.push(ax0[i] + rng.gen_range(0.0..0.5));
    }
    if m_ineq > 0 {
        cones.push(Cone::NonNeg(m_ineq));
    }
    ConicProgram {
        p: SparseMatrix::upper_from_dense(&p),
        q,
        a: SparseMatrix::from_dense(&a),
        b,
        cones,
        constant: 0.0,
    }
}

pub fn dense_program(p: DMatrix<f64>, q: Vec<f64>, a: DMatrix<f64>, b: Vec<f64>, cones: Vec<Cone>) -> ConicProgram {
    ConicProgram {
        p: SparseMatrix::upper_from_dense(&p),
        q,
        a: SparseMatrix::from_dense(&a),
        b,
        cones,
        constant: 0.0,
    }
}

use ddspc::experiment::{Experiment, ExperimentConfig};
use ddspc::ocp::{OcpContext, OcpSolution};
use std::sync::OnceLock;

/// Aircraft experiment with the default configuration, built once per test binary.
pub fn aircraft() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| Experiment::build(ExperimentConfig::default()).expect("default experiment builds"))
}

/// Realization of row-coefficient matrix `c` at germ draws `g` (φ⁰ = 1 prepended implicitly).
pub fn realize(c: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = c.row(0).iter().copied().collect();
    for (j, &phi) in g.iter().enumerate() {
        if phi == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(c.row(j + 1).iter()) {
            *o += v * phi;
        }
    }
    out
}

/// Monte-Carlo mean and standard error of Σ‖Y‖²_Q + ‖U‖²_R + ‖Z_N‖²_P.
pub fn sampled_cost(ctx: &OcpContext, sol: &OcpSolution, samples: usize, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = ctx.config();
    let (nu, ny, n) = (ctx.n_u(), ctx.n_y(), ctx.horizon());
    let p = &ctx.terminal().p;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let g = ctx.basis().sample_germs(&mut rng);
        let u = realize(&sol.inputs, &g);
        let y = realize(&sol.outputs, &g);
        let z = DVector::from_vec(realize(&sol.terminal, &g));
        let mut cost = z.dot(&(p * &z));
        for i in 0..n {
            let ui = DVector::from_column_slice(&u[i * nu..(i + 1) * nu]);
            let yi = DVector::from_column_slice(&y[i * ny..(i + 1) * ny]);
            cost += ui.dot(&(&cfg.r * &ui)) + yi.dot(&(&cfg.q * &yi));
        }
        sum += cost;
        sq += cost * cost;
    }
    let mean = sum / samples as f64;
    let var = (sq / samples as f64 - mean * mean).max(0.0);
    (mean, (var / samples as f64).sqrt())
}

/// Largest deviation of decoded outputs from the explicit ARX coefficient rollout.
pub fn rollout_residual(exp: &Experiment, sol: &OcpSolution) -> f64 {
    let ctx = &exp.context;
    let m = &exp.model;
    let (nu, ny, nw, n) = (ctx.n_u(), ctx.n_y(), m.n_w(), ctx.horizon());
    let ext = m.extended_state_matrices();
    let dist = ctx.disturbance_coefficients();
    let mut worst: f64 = 0.0;
    for j in 0..sol.inputs.nrows() {
        let mut z = sol.initial.row(j).transpose();
        for i in 0..n {
            let u = sol.inputs.row(j).columns(i * nu, nu).transpose();
            let w = dist.row(j).columns(i * nw, nw).transpose();
            let y = m.phi() * &z + m.d() * &u + &w;
            let dec = sol.outputs.row(j).columns(i * ny, ny).transpose();
            worst = worst.max((y - dec).amax());
            z = &ext.a * &z + &ext.b * &u + &ext.e * &w;
        }
    }
    worst
}

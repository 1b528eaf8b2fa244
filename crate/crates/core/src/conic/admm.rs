use nalgebra::{DMatrix, DVector};

use super::cones::{dual_cone_distance, primal_cone_distance, project_in_place};
use super::kkt::{factorize_kkt, KktFactor};
use super::{dot, inf_norm, Cone, ConicProgram, ConicSolution, ConicStatus, Settings};
use crate::error::Result;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const ZERO_CONE_RHO_SCALE: f64 = 1e3;
const ADAPT_EVERY: usize = 25;

/// Operator-splitting solver holding a factorization that can be reused
/// across right-hand-side updates.
pub struct AdmmSolver {
    program: ConicProgram,
    settings: Settings,
    rho_base: f64,
    rho: Vec<f64>,
    factor: KktFactor,
    regularized: bool,
}

impl AdmmSolver {
    pub fn new(program: ConicProgram, settings: Settings) -> Result<Self> {
        program.check_shapes()?;
        let rho_base = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let rho = rho_vector(&program.cones, rho_base);
        let factor = factorize_kkt(&program, &rho, settings.sigma)?;
        let regularized = factor.regularized;
        Ok(Self {
            program,
            settings,
            rho_base,
            rho,
            factor,
            regularized,
        })
    }

    pub fn program(&self) -> &ConicProgram {
        &self.program
    }

    pub fn update_b(&mut self, b: Vec<f64>) {
        assert_eq!(b.len(), self.program.b.len());
        self.program.b = b;
    }

    pub fn update_q(&mut self, q: Vec<f64>) {
        assert_eq!(q.len(), self.program.q.len());
        self.program.q = q;
    }

    pub fn set_warm_start(&mut self, warm: Option<super::WarmStart>) {
        self.settings.warm_start = warm;
    }

    fn refactor(&mut self, rho_base: f64) -> Result<()> {
        self.rho_base = rho_base.clamp(RHO_MIN, RHO_MAX);
        self.rho = rho_vector(&self.program.cones, self.rho_base);
        self.factor = factorize_kkt(&self.program, &self.rho, self.settings.sigma)?;
        self.regularized |= self.factor.regularized;
        Ok(())
    }

    pub fn solve(&mut self) -> Result<ConicSolution> {
        let initial_rho = self.settings.rho.clamp(RHO_MIN, RHO_MAX);
        if self.rho_base != initial_rho {
            self.refactor(initial_rho)?;
        }
        let prog = self.program.clone();
        let (n, m) = (prog.variables(), prog.constraints());
        let st = self.settings.clone();
        let (mut x, mut s, mut lam) = match &st.warm_start {
            Some(w) if w.x.len() == n && w.s.len() == m && w.y.len() == m => {
                (w.x.clone(), w.s.clone(), w.y.iter().map(|v| -v).collect::<Vec<_>>())
            }
            _ => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
        };
        let alpha = st.alpha_relax;
        let b_norm = inf_norm(&prog.b);
        let q_norm = inf_norm(&prog.q);
        let mut status = ConicStatus::MaxIter;
        let mut iterations = st.max_iter;
        let mut x_prev = x.clone();
        let mut lam_prev = lam.clone();
        for k in 1..=st.max_iter {
            let mut rhs: Vec<f64> = x.iter().zip(&prog.q).map(|(xi, qi)| st.sigma * xi - qi).collect();
            let w: Vec<f64> = (0..m).map(|i| self.rho[i] * (prog.b[i] - s[i]) + lam[i]).collect();
            for (r, t) in rhs.iter_mut().zip(prog.a.tmul(&w)) {
                *r += t;
            }
            let x_tilde = self.factor.solve(&rhs);
            let ax_tilde = prog.a.mul(&x_tilde);
            let mut s_relaxed = vec![0.0; m];
            for i in 0..m {
                let s_tilde = prog.b[i] - ax_tilde[i];
                s_relaxed[i] = alpha * s_tilde + (1.0 - alpha) * s[i];
            }
            for i in 0..n {
                x[i] = alpha * x_tilde[i] + (1.0 - alpha) * x[i];
            }
            let mut s_new: Vec<f64> = (0..m).map(|i| s_relaxed[i] + lam[i] / self.rho[i]).collect();
            project_in_place(&mut s_new, &prog.cones);
            for i in 0..m {
                lam[i] += self.rho[i] * (s_relaxed[i] - s_new[i]);
            }
            s = s_new;

            let y: Vec<f64> = lam.iter().map(|v| -v).collect();
            let ax = prog.a.mul(&x);
            let px = prog.p.symmetric_mul(&x);
            let aty = prog.a.tmul(&y);
            let r_prim = (0..m).map(|i| (ax[i] + s[i] - prog.b[i]).abs()).fold(0.0, f64::max);
            let r_dual = (0..n).map(|i| (px[i] + prog.q[i] + aty[i]).abs()).fold(0.0, f64::max);
            if r_prim <= st.eps_primal * (1.0 + b_norm) && r_dual <= st.eps_dual * (1.0 + q_norm) {
                status = ConicStatus::Optimal;
                iterations = k;
                break;
            }
            if k % 10 == 0 {
                if let Some(found) = self.infeasibility(&x, &x_prev, &lam, &lam_prev) {
                    status = found;
                    iterations = k;
                    break;
                }
                x_prev.clone_from(&x);
                lam_prev.clone_from(&lam);
            }
            if st.adaptive_rho && k % ADAPT_EVERY == 0 {
                let p_scale = inf_norm(&ax).max(inf_norm(&s)).max(b_norm).max(1e-30);
                let d_scale = inf_norm(&px).max(inf_norm(&aty)).max(q_norm).max(1e-30);
                let ratio = ((r_prim / p_scale) / (r_dual / d_scale).max(1e-30)).sqrt();
                if ratio.is_finite() && (ratio > 5.0 || ratio < 0.2) {
                    self.refactor(self.rho_base * ratio)?;
                }
            }
        }
        let y: Vec<f64> = lam.iter().map(|v| -v).collect();
        let mut sol = self.package(&prog, x, s, y, status, iterations);
        if st.polish && status == ConicStatus::Optimal && polishable(&prog.cones) {
            if let Some(p) = polish(&prog, &sol) {
                if p.primal_residual <= sol.primal_residual.max(1e-9) && p.dual_residual <= sol.dual_residual.max(1e-9)
                {
                    sol = p;
                }
            }
        }
        Ok(sol)
    }

    fn infeasibility(&self, x: &[f64], x_prev: &[f64], lam: &[f64], lam_prev: &[f64]) -> Option<ConicStatus> {
        let prog = &self.program;
        let eps = self.settings.eps_infeasible;
        let dy: Vec<f64> = lam_prev.iter().zip(lam).map(|(p, c)| p - c).collect();
        let dy_norm = inf_norm(&dy);
        if dy_norm > 1e-10 {
            let unit: Vec<f64> = dy.iter().map(|v| v / dy_norm).collect();
            let aty = inf_norm(&prog.a.tmul(&unit));
            let bty = dot(&prog.b, &unit);
            if aty <= eps && bty < -eps && dual_cone_distance(&unit, &prog.cones) <= eps {
                return Some(ConicStatus::Infeasible);
            }
        }
        let dx: Vec<f64> = x.iter().zip(x_prev).map(|(c, p)| c - p).collect();
        let dx_norm = inf_norm(&dx);
        if dx_norm > 1e-10 {
            let unit: Vec<f64> = dx.iter().map(|v| v / dx_norm).collect();
            let pdx = inf_norm(&prog.p.symmetric_mul(&unit));
            let qdx = dot(&prog.q, &unit);
            let minus_adx: Vec<f64> = prog.a.mul(&unit).iter().map(|v| -v).collect();
            if pdx <= eps && qdx < -eps && primal_cone_distance(&minus_adx, &prog.cones) <= eps {
                return Some(ConicStatus::Unbounded);
            }
        }
        None
    }

    fn package(
        &self,
        prog: &ConicProgram,
        x: Vec<f64>,
        s: Vec<f64>,
        y: Vec<f64>,
        status: ConicStatus,
        iterations: usize,
    ) -> ConicSolution {
        let (primal_residual, dual_residual, gap) = prog.residuals(&x, &s, &y);
        let objective = match status {
            ConicStatus::Infeasible => f64::INFINITY,
            ConicStatus::Unbounded => f64::NEG_INFINITY,
            _ => prog.objective(&x),
        };
        ConicSolution {
            x,
            s,
            y,
            objective,
            status,
            primal_residual,
            dual_residual,
            gap,
            iterations,
            regularized: self.regularized,
            polished: false,
        }
    }
}

fn rho_vector(cones: &[Cone], rho: f64) -> Vec<f64> {
    cones
        .iter()
        .flat_map(|c| {
            let r = if matches!(c, Cone::Zero(_)) {
                rho * ZERO_CONE_RHO_SCALE
            } else {
                rho
            };
            std::iter::repeat(r).take(c.size())
        })
        .collect()
}

fn polishable(cones: &[Cone]) -> bool {
    cones.iter().all(|c| !matches!(c, Cone::SecondOrder(_)))
}

/// Re-solves the equality-constrained QP on the guessed active set.
fn polish(prog: &ConicProgram, sol: &ConicSolution) -> Option<ConicSolution> {
    let n = prog.variables();
    let a = prog.a.to_dense();
    let mut active = Vec::new();
    let mut off = 0;
    for cone in &prog.cones {
        for i in off..off + cone.size() {
            match cone {
                Cone::Zero(_) => active.push(i),
                Cone::NonNeg(_) if sol.y[i] > sol.s[i] => active.push(i),
                _ => {}
            }
        }
        off += cone.size();
    }
    let k = active.len();
    let p = prog.p.symmetric_dense();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p);
    for (r, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = a[(i, c)];
            kkt[(c, n + r)] = a[(i, c)];
        }
    }
    let mut rhs = DVector::zeros(n + k);
    for c in 0..n {
        rhs[c] = -prog.q[c];
    }
    for (r, &i) in active.iter().enumerate() {
        rhs[n + r] = prog.b[i];
    }
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += 1e-10;
    }
    for i in n..n + k {
        reg[(i, i)] -= 1e-10;
    }
    let lu = reg.lu();
    let mut z = lu.solve(&rhs)?;
    for _ in 0..5 {
        let r = &rhs - &kkt * &z;
        z += lu.solve(&r)?;
    }
    let x: Vec<f64> = z.rows(0, n).iter().copied().collect();
    let ax = prog.a.mul(&x);
    let mut y = vec![0.0; prog.constraints()];
    for (r, &i) in active.iter().enumerate() {
        y[i] = z[n + r];
    }
    let mut s: Vec<f64> = prog.b.iter().zip(&ax).map(|(b, v)| b - v).collect();
    for &i in &active {
        s[i] = 0.0;
    }
    if primal_cone_distance(&s, &prog.cones) > 1e-9 || dual_cone_distance(&y, &prog.cones) > 1e-9 {
        return None;
    }
    let (primal_residual, dual_residual, gap) = prog.residuals(&x, &s, &y);
    Some(ConicSolution {
        objective: prog.objective(&x),
        x,
        s,
        y,
        status: ConicStatus::Optimal,
        primal_residual,
        dual_residual,
        gap,
        iterations: sol.iterations,
        regularized: sol.regularized,
        polished: true,
    })
}

pub fn solve(program: &ConicProgram, settings: &Settings) -> Result<ConicSolution> {
    AdmmSolver::new(program.clone(), settings.clone())?.solve()
}

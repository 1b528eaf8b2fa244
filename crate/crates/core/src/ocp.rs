//! Stochastic data-driven OCP over PCE coefficients: assembly into a conic
//! program and decoding of the solver output.
//!
//! Everything (coefficient trajectories, initial condition, terminal state)
//! is an affine function of the decision vector, so each quantity is kept as
//! a small dense map over the handful of variables it touches.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::behavioral::{HankelStack, Predictor};
use crate::conic::{Backend, Cone, ConicProgram, ConicSolution, ConicStatus, SparseMatrix};
use crate::error::{check_dim, param, Error, Result};
use crate::linalg::{min_eigenvalue, row_major, symmetric_psd_sqrt};
use crate::lti::shift_window;
use crate::pce::{exact_pce_of_disturbance, GermFamily, PceBasis};
use crate::terminal::TerminalIngredients;

/// Residual level under which a not-quite-certified solve is still used.
pub const NEAR_CONVERGED: f64 = 1e-4;

const HANKEL_RIDGE: f64 = 1e-12;

/// σ = √((2−ε)/ε), the Chebyshev-type tightening factor.
pub fn tightening_sigma(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(param("epsilon", format!("{eps} is outside (0, 1]")));
    }
    Ok(((2.0 - eps) / eps).sqrt())
}

/// Which PCE coefficients of the input at step i may be nonzero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causality {
    /// The input at step i ignores the disturbance of step i.
    #[default]
    Strict,
    /// One extra coefficient, as in the printed index range.
    Literal,
}

impl Causality {
    /// Number of leading coefficients allowed at `step`.
    pub fn allowed_terms(self, basis: &PceBasis, step: usize) -> usize {
        let base = basis.initial_dimension() + step * basis.disturbance_components();
        let n = match self {
            Causality::Strict => base,
            Causality::Literal => base + 1,
        };
        n.min(basis.dimension())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum MuMode {
    #[default]
    Free,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Outputs eliminated through the data predictor; only inputs and μ remain.
    #[default]
    Condensed,
    /// Hankel weights g for every coefficient are decision variables.
    Hankel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Interval {
    pub fn new(lower: Option<f64>, upper: Option<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn symmetric(half: f64) -> Self {
        Self::new(Some(-half), Some(half))
    }

    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower.map_or(true, |l| v >= l) && self.upper.map_or(true, |u| v <= u)
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if let (Some(l), Some(u)) = (self.lower, self.upper) {
            if !(l <= u) {
                return Err(param(name, format!("empty interval [{l}, {u}]")));
            }
        }
        for v in [self.lower, self.upper].into_iter().flatten() {
            if v.is_nan() {
                return Err(param(name, "NaN bound"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    #[serde(with = "row_major")]
    pub q: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub r: DMatrix<f64>,
    pub eps_u: f64,
    pub eps_y: f64,
    pub input_bounds: Vec<Interval>,
    pub output_bounds: Vec<Interval>,
    #[serde(default)]
    pub causality: Causality,
    #[serde(default)]
    pub mu_mode: MuMode,
    #[serde(default)]
    pub formulation: Formulation,
}

fn check_spd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(param(name, "not square"));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(param(name, "not symmetric"));
    }
    if min_eigenvalue(m) <= 0.0 {
        return Err(param(name, "not positive definite"));
    }
    Ok(())
}

impl OcpConfig {
    pub fn validate(&self, n_u: usize, n_y: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(param("horizon", "must be positive"));
        }
        check_spd("Q", &self.q)?;
        check_spd("R", &self.r)?;
        check_dim("Q size", n_y, self.q.nrows())?;
        check_dim("R size", n_u, self.r.nrows())?;
        check_dim("input bounds", n_u, self.input_bounds.len())?;
        check_dim("output bounds", n_y, self.output_bounds.len())?;
        for b in &self.input_bounds {
            b.validate("input_bounds")?;
        }
        for b in &self.output_bounds {
            b.validate("output_bounds")?;
        }
        tightening_sigma(self.eps_u)?;
        tightening_sigma(self.eps_y)?;
        if let MuMode::Fixed(m) = self.mu_mode {
            if !(0.0..=1.0).contains(&m) {
                return Err(param("mu", format!("{m} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Data of the interpolated initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialConditionData {
    pub z_k: DVector<f64>,
    pub mean_pred: DVector<f64>,
    pub q_rhs: DMatrix<f64>,
    /// Symmetric square root S of `q_rhs`; its columns seed coefficients 1..=n_z.
    pub sqrt_columns: DMatrix<f64>,
}

impl InitialConditionData {
    pub fn bootstrap(z0: DVector<f64>) -> Self {
        let n = z0.len();
        Self {
            mean_pred: z0.clone(),
            z_k: z0,
            q_rhs: DMatrix::zeros(n, n),
            sqrt_columns: DMatrix::zeros(n, n),
        }
    }
}

/// `previous` holds the predicted one-step coefficients z^j_{1|k−1}, one row per j.
pub fn prepare_initial(z_k: &DVector<f64>, previous: Option<&DMatrix<f64>>) -> Result<InitialConditionData> {
    let Some(prev) = previous else {
        return Ok(InitialConditionData::bootstrap(z_k.clone()));
    };
    check_dim("previous state width", z_k.len(), prev.ncols())?;
    let mean_pred = prev.row(0).transpose();
    let tail = prev.rows(1, prev.nrows() - 1);
    let q_rhs = tail.transpose() * tail;
    let sqrt_columns = symmetric_psd_sqrt(&q_rhs, 1e-10)?;
    Ok(InitialConditionData {
        z_k: z_k.clone(),
        mean_pred,
        q_rhs,
        sqrt_columns,
    })
}

/// Affine scalar Σ coef·x[var] + constant.
#[derive(Clone, Debug, Default, PartialEq)]
struct Affine {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Affine {
    fn scaled(mut self, a: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= a;
        }
        self.constant *= a;
        self
    }

    fn offset(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == 0.0
    }
}

/// Rows affine in the variables `vars` (ascending): m·x[vars] + c.
#[derive(Clone, Debug)]
struct LocalMap {
    vars: Vec<usize>,
    m: DMatrix<f64>,
    c: DVector<f64>,
}

impl LocalMap {
    fn premul(&self, t: &DMatrix<f64>) -> Self {
        Self {
            vars: self.vars.clone(),
            m: t * &self.m,
            c: t * &self.c,
        }
    }

    fn row(&self, r: usize) -> Affine {
        let terms = self
            .vars
            .iter()
            .zip(self.m.row(r).iter())
            .filter(|(_, c)| **c != 0.0)
            .map(|(v, c)| (*v, *c))
            .collect();
        Affine {
            terms,
            constant: self.c[r],
        }
    }

    fn eval(&self, x: &[f64]) -> DVector<f64> {
        let local = DVector::from_iterator(self.vars.len(), self.vars.iter().map(|v| x[*v]));
        &self.m * local + &self.c
    }
}

/// Problem data that stays fixed across time steps.
#[derive(Clone, Debug)]
pub struct OcpContext {
    config: OcpConfig,
    basis: PceBasis,
    terminal: TerminalIngredients,
    stack: HankelStack,
    predictor: Predictor,
    theta_z: DMatrix<f64>,
    theta_u: DMatrix<f64>,
    theta_w: DMatrix<f64>,
    /// Row j: disturbance coefficients over the horizon, time-major.
    disturbance: DMatrix<f64>,
    stage_weight: DMatrix<f64>,
    terminal_select: DMatrix<f64>,
    gamma_sqrt: DMatrix<f64>,
    weight_scale: DVector<f64>,
    sigma_u: f64,
    sigma_y: f64,
}

impl OcpContext {
    pub fn new(
        config: OcpConfig,
        stack: HankelStack,
        predictor: Predictor,
        basis: PceBasis,
        terminal: TerminalIngredients,
        disturbance: &[GermFamily],
    ) -> Result<Self> {
        let (nu, ny, nw, t_ini) = (stack.n_u, stack.n_y, stack.n_w, stack.t_ini);
        config.validate(nu, ny)?;
        let n = config.horizon;
        check_dim("stack horizon", n, stack.horizon)?;
        check_dim("basis horizon", n, basis.horizon())?;
        check_dim("basis disturbance width", nw, basis.disturbance_components())?;
        if n < t_ini {
            return Err(param("horizon", format!("must be at least T_ini = {t_ini}")));
        }
        let nz = stack.n_z();
        check_dim("terminal weight", nz, terminal.p.nrows())?;
        check_dim("terminal set width", nz, terminal.terminal_set.f.ncols())?;
        if basis.initial_dimension() != nz + 1 {
            return Err(param(
                "basis",
                format!("initial block must have n_z + 1 = {} terms", nz + 1),
            ));
        }
        let l = basis.dimension();
        let mut dist = DMatrix::zeros(l, n * nw);
        for i in 0..n {
            let w = exact_pce_of_disturbance(disturbance, &basis, i)?;
            dist.columns_mut(i * nw, nw).copy_from(&w.coefficients);
        }
        let traj = n * (nu + ny);
        let mut stage_weight = DMatrix::zeros(traj, traj);
        for i in 0..n {
            stage_weight.view_mut((i * nu, i * nu), (nu, nu)).copy_from(&config.r);
            let o = n * nu + i * ny;
            stage_weight.view_mut((o, o), (ny, ny)).copy_from(&config.q);
        }
        let mut sel = DMatrix::zeros(nz, traj);
        for s in 0..t_ini {
            let i = n - t_ini + s;
            for c in 0..nu {
                sel[(s * nu + c, i * nu + c)] = 1.0;
            }
            for c in 0..ny {
                sel[(t_ini * nu + s * ny + c, n * nu + i * ny + c)] = 1.0;
            }
        }
        stage_weight += sel.transpose() * &terminal.p * &sel;
        let gamma_sqrt = symmetric_psd_sqrt(&terminal.gamma_weight, 1e-10)?;
        let full = stack.full_stack();
        let weight_scale = DVector::from_fn(full.ncols(), |k, _| {
            let n = full.column(k).norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        });
        // entries linking y_i to later inputs or disturbances vanish for a
        // causal system; the data predictor only gets them to rounding level
        let mut theta_u = predictor.theta_u();
        let mut theta_w = predictor.theta_w();
        for i in 0..n {
            for r in i * ny..(i + 1) * ny {
                for c in (i + 1) * nu..n * nu {
                    theta_u[(r, c)] = 0.0;
                }
                for c in (i + 1) * nw..n * nw {
                    theta_w[(r, c)] = 0.0;
                }
            }
        }
        Ok(Self {
            weight_scale,
            theta_u,
            theta_w,
            sigma_u: tightening_sigma(config.eps_u)?,
            sigma_y: tightening_sigma(config.eps_y)?,
            theta_z: predictor.theta_z(),
            config,
            basis,
            terminal,
            stack,
            predictor,
            disturbance: dist,
            stage_weight,
            terminal_select: sel,
            gamma_sqrt,
        })
    }

    pub fn config(&self) -> &OcpConfig {
        &self.config
    }

    pub fn basis(&self) -> &PceBasis {
        &self.basis
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn stack(&self) -> &HankelStack {
        &self.stack
    }

    pub fn disturbance_coefficients(&self) -> &DMatrix<f64> {
        &self.disturbance
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn sigma_u(&self) -> f64 {
        self.sigma_u
    }

    pub fn n_u(&self) -> usize {
        self.stack.n_u
    }

    pub fn n_y(&self) -> usize {
        self.stack.n_y
    }

    pub fn n_z(&self) -> usize {
        self.stack.n_z()
    }

    pub fn t_ini(&self) -> usize {
        self.stack.t_ini
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Same problem data with a different configuration of the discrete choices.
    pub fn with_options(&self, causality: Causality, mu_mode: MuMode, formulation: Formulation) -> Self {
        let mut c = self.clone();
        c.config.causality = causality;
        c.config.mu_mode = mu_mode;
        c.config.formulation = formulation;
        c
    }

    /// Initial-condition coefficients of index j as an affine map of μ (variable 0).
    fn initial_map(&self, init: &InitialConditionData, j: usize) -> LocalMap {
        let nz = self.n_z();
        let mut m = DMatrix::zeros(nz, 1);
        let mut c = DVector::zeros(nz);
        if j == 0 {
            m.set_column(0, &(&init.z_k - &init.mean_pred));
            c.copy_from(&init.mean_pred);
        } else if j <= nz {
            let col = init.sqrt_columns.column(j - 1);
            m.set_column(0, &(-col));
            c.copy_from(&col);
        }
        LocalMap { vars: vec![0], m, c }
    }
}

/// Where each coefficient lives in the decision vector.
#[derive(Clone, Debug)]
pub struct OcpLayout {
    variables: usize,
    initial: Vec<LocalMap>,
    trajectories: Vec<LocalMap>,
    /// Offset of g^j in the Hankel formulation.
    weight_offsets: Option<Vec<usize>>,
}

impl OcpLayout {
    pub fn variables(&self) -> usize {
        self.variables
    }
}

#[derive(Clone, Debug)]
pub struct AssembledOcp {
    pub program: ConicProgram,
    pub layout: OcpLayout,
}

#[derive(Default)]
struct ProgramBuilder {
    variables: usize,
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<Cone>,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    constant: f64,
}

impl ProgramBuilder {
    fn new(variables: usize) -> Self {
        Self {
            variables,
            q: vec![0.0; variables],
            ..Default::default()
        }
    }

    fn push_rows(&mut self, exprs: &[Affine]) {
        for e in exprs {
            let row = self.b.len();
            for (v, c) in &e.terms {
                self.a.push((row, *v, -c));
            }
            self.b.push(e.constant);
        }
    }

    fn push_zero(&mut self, exprs: &[Affine]) {
        if exprs.is_empty() {
            return;
        }
        let normalized: Vec<Affine> = exprs
            .iter()
            .map(|e| {
                let n = e.terms.iter().fold(0.0f64, |m, t| m.max(t.1.abs()));
                if n > 0.0 {
                    e.clone().scaled(1.0 / n)
                } else {
                    e.clone()
                }
            })
            .collect();
        self.push_rows(&normalized);
        match self.cones.last_mut() {
            Some(Cone::Zero(n)) => *n += exprs.len(),
            _ => self.cones.push(Cone::Zero(exprs.len())),
        }
    }

    fn push_nonneg(&mut self, exprs: &[Affine]) {
        if exprs.is_empty() {
            return;
        }
        self.push_rows(exprs);
        match self.cones.last_mut() {
            Some(Cone::NonNeg(n)) => *n += exprs.len(),
            _ => self.cones.push(Cone::NonNeg(exprs.len())),
        }
    }

    /// head ≥ ‖tail‖; identically zero tail rows are dropped.
    fn push_soc(&mut self, head: Affine, tail: Vec<Affine>) {
        let tail: Vec<Affine> = tail.into_iter().filter(|e| !e.is_zero()).collect();
        if tail.is_empty() {
            self.push_nonneg(&[head]);
            return;
        }
        let mut rows = Vec::with_capacity(tail.len() + 1);
        rows.push(head);
        rows.extend(tail);
        self.push_rows(&rows);
        self.cones.push(Cone::SecondOrder(rows.len()));
    }

    /// Adds (Mx + c)ᵀ W (Mx + c) to the objective.
    fn add_quadratic(&mut self, map: &LocalMap, w: &DMatrix<f64>) {
        let wm = w * &map.m;
        let hess = map.m.transpose() * &wm * 2.0;
        let lin = wm.transpose() * &map.c * 2.0;
        for (a, va) in map.vars.iter().enumerate() {
            self.q[*va] += lin[a];
            for (b, vb) in map.vars.iter().enumerate().skip(a) {
                let h = 0.5 * (hess[(a, b)] + hess[(b, a)]);
                if h != 0.0 {
                    self.p.push((*va, *vb, h));
                }
            }
        }
        self.constant += map.c.dot(&(w * &map.c));
    }

    fn finish(self) -> ConicProgram {
        ConicProgram {
            p: SparseMatrix::from_triplets(self.variables, self.variables, self.p),
            q: self.q,
            a: SparseMatrix::from_triplets(self.b.len(), self.variables, self.a),
            b: self.b,
            cones: self.cones,
            constant: self.constant,
        }
    }
}

fn unit(var: usize, coef: f64, constant: f64) -> Affine {
    Affine {
        terms: vec![(var, coef)],
        constant,
    }
}

pub fn assemble(ctx: &OcpContext, init: &InitialConditionData) -> Result<AssembledOcp> {
    let nz = ctx.n_z();
    check_dim("measured state", nz, init.z_k.len())?;
    check_dim("predicted mean", nz, init.mean_pred.len())?;
    check_dim("square root", nz, init.sqrt_columns.nrows())?;
    let (nu, ny, nw) = (ctx.n_u(), ctx.n_y(), ctx.stack.n_w);
    let n = ctx.horizon();
    let l = ctx.basis.dimension();
    let allowed: Vec<usize> = (0..n)
        .map(|i| ctx.config.causality.allowed_terms(&ctx.basis, i))
        .collect();
    let initial: Vec<LocalMap> = (0..l).map(|j| ctx.initial_map(init, j)).collect();

    let mut equalities: Vec<Affine> = Vec::new();
    let (variables, trajectories, weight_offsets) = match ctx.config.formulation {
        Formulation::Condensed => {
            let mut next = 1;
            let mut maps = Vec::with_capacity(l);
            for (j, z0) in initial.iter().enumerate() {
                let mut vars = vec![0];
                let mut u_cols = Vec::new();
                for (i, a) in allowed.iter().enumerate() {
                    if j < *a {
                        for c in 0..nu {
                            vars.push(next);
                            u_cols.push(i * nu + c);
                            next += 1;
                        }
                    }
                }
                let k = vars.len();
                let mut m = DMatrix::zeros(n * (nu + ny), k);
                let mut cst = DVector::zeros(n * (nu + ny));
                for (slot, col) in u_cols.iter().enumerate() {
                    m[(*col, slot + 1)] = 1.0;
                }
                let tz = &ctx.theta_z * &z0.m;
                m.view_mut((n * nu, 0), (n * ny, 1)).copy_from(&tz);
                for (slot, col) in u_cols.iter().enumerate() {
                    m.view_mut((n * nu, slot + 1), (n * ny, 1))
                        .copy_from(&ctx.theta_u.column(*col));
                }
                let w_j = ctx.disturbance.row(j).transpose();
                let yc = &ctx.theta_z * &z0.c + &ctx.theta_w * w_j;
                cst.rows_mut(n * nu, n * ny).copy_from(&yc);
                maps.push(LocalMap { vars, m, c: cst });
            }
            (next, maps, None)
        }
        Formulation::Hankel => {
            let cols = ctx.stack.columns();
            let (pu, py) = (ctx.t_ini() * nu, ctx.t_ini() * ny);
            // variables are column-scaled weights g = diag(scale)·g̃
            let scale = DMatrix::from_diagonal(&ctx.weight_scale);
            let h_past = {
                let mut h = DMatrix::zeros(nz, cols);
                h.rows_mut(0, pu).copy_from(&ctx.stack.h_u.rows(0, pu));
                h.rows_mut(pu, py).copy_from(&ctx.stack.h_y.rows(0, py));
                h * &scale
            };
            let h_uf = ctx.stack.h_u.rows(pu, n * nu) * &scale;
            let y_f = ctx.stack.future_outputs() * &scale;
            let h_w = &ctx.stack.h_w * &scale;
            let mut maps = Vec::with_capacity(l);
            let mut offsets = Vec::with_capacity(l);
            for (j, z0) in initial.iter().enumerate() {
                let off = 1 + j * cols;
                offsets.push(off);
                let vars: Vec<usize> = std::iter::once(0).chain(off..off + cols).collect();
                let mut m = DMatrix::zeros(n * (nu + ny), cols + 1);
                m.view_mut((0, 1), (n * nu, cols)).copy_from(&h_uf);
                m.view_mut((n * nu, 1), (n * ny, cols)).copy_from(&y_f);
                maps.push(LocalMap {
                    vars: vars.clone(),
                    m,
                    c: DVector::zeros(n * (nu + ny)),
                });
                // past window: z0(μ) − H_p g = 0
                let mut pm = DMatrix::zeros(nz, cols + 1);
                pm.column_mut(0).copy_from(&z0.m.column(0));
                pm.view_mut((0, 1), (nz, cols)).copy_from(&(-&h_past));
                let past = LocalMap {
                    vars: vars.clone(),
                    m: pm,
                    c: z0.c.clone(),
                };
                equalities.extend((0..nz).map(|r| past.row(r)));
                // disturbance: w^j − H_w g = 0
                let mut wm = DMatrix::zeros(n * nw, cols + 1);
                wm.view_mut((0, 1), (n * nw, cols)).copy_from(&(-&h_w));
                let dist = LocalMap {
                    vars: vars.clone(),
                    m: wm,
                    c: ctx.disturbance.row(j).transpose(),
                };
                equalities.extend((0..n * nw).map(|r| dist.row(r)));
                for (i, a) in allowed.iter().enumerate() {
                    if j >= *a {
                        for c in 0..nu {
                            equalities.push(maps[j].row(i * nu + c));
                        }
                    }
                }
            }
            (1 + l * cols, maps, Some(offsets))
        }
    };

    let mut builder = ProgramBuilder::new(variables);
    for map in &trajectories {
        builder.add_quadratic(map, &ctx.stage_weight);
    }
    // directions of g outside the data row space are otherwise unpinned
    if let Some(offsets) = &weight_offsets {
        for off in offsets {
            for v in *off..*off + ctx.stack.columns() {
                builder.p.push((v, v, HANKEL_RIDGE));
            }
        }
    }
    builder.push_zero(&equalities);
    match ctx.config.mu_mode {
        MuMode::Free => builder.push_nonneg(&[unit(0, 1.0, 0.0), unit(0, -1.0, 1.0)]),
        MuMode::Fixed(v) => builder.push_zero(&[unit(0, -1.0, v)]),
    }
    let t = &ctx.terminal.terminal_set;
    let fsel = &t.f * &ctx.terminal_select;
    let box_map = trajectories[0].premul(&fsel);
    let box_rows: Vec<Affine> = (0..t.h.len())
        .map(|r| box_map.row(r).scaled(-1.0).offset(t.h[r]))
        .collect();
    builder.push_nonneg(&box_rows);

    let chance = |builder: &mut ProgramBuilder, row: usize, bound: &Interval, sigma: f64| {
        let spread: Vec<Affine> = trajectories[1..].iter().map(|m| m.row(row).scaled(sigma)).collect();
        let mean = trajectories[0].row(row);
        if let Some(ub) = bound.upper {
            builder.push_soc(mean.clone().scaled(-1.0).offset(ub), spread.clone());
        }
        if let Some(lb) = bound.lower {
            builder.push_soc(mean.offset(-lb), spread);
        }
    };
    for i in 0..n {
        for c in 0..nu {
            chance(&mut builder, i * nu + c, &ctx.config.input_bounds[c], ctx.sigma_u);
        }
        for c in 0..ny {
            chance(
                &mut builder,
                n * nu + i * ny + c,
                &ctx.config.output_bounds[c],
                ctx.sigma_y,
            );
        }
    }
    let cov_sel = &ctx.gamma_sqrt * &ctx.terminal_select;
    let mut cov_tail = Vec::with_capacity((l - 1) * nz);
    for map in &trajectories[1..] {
        let z = map.premul(&cov_sel);
        cov_tail.extend((0..nz).map(|r| z.row(r)));
    }
    let head = Affine {
        terms: Vec::new(),
        constant: ctx.terminal.gamma_level.max(0.0).sqrt(),
    };
    builder.push_soc(head, cov_tail);

    Ok(AssembledOcp {
        program: builder.finish(),
        layout: OcpLayout {
            variables,
            initial,
            trajectories,
            weight_offsets,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub status: ConicStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub solver_objective: f64,
    /// Accepted without a certificate because residuals were small.
    pub near_converged: bool,
    pub causality_residual: f64,
    pub consistency_residual: f64,
}

/// Decoded optimal coefficient trajectories; every matrix has one row per basis index.
#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub mu: f64,
    /// z^j_{0|k}.
    pub initial: DMatrix<f64>,
    /// u^j over the horizon, time-major.
    pub inputs: DMatrix<f64>,
    /// y^j over the horizon, time-major.
    pub outputs: DMatrix<f64>,
    /// Hankel weights g^j.
    pub weights: DMatrix<f64>,
    /// z^j_{1|k}, the prior for the next step.
    pub next: DMatrix<f64>,
    /// z^j_{N|k}.
    pub terminal: DMatrix<f64>,
    pub value: f64,
    pub diagnostics: SolveDiagnostics,
}

impl OcpSolution {
    /// Coefficients (one per basis index) of input component c at step i.
    pub fn input_coefficients(&self, step: usize, component: usize, n_u: usize) -> DVector<f64> {
        self.inputs.column(step * n_u + component).into_owned()
    }
}

/// Expected cost Σ_j Σ_i ‖y^j‖²_Q + ‖u^j‖²_R + ‖z^j_N‖²_P of decoded trajectories.
pub fn expected_cost(ctx: &OcpContext, inputs: &DMatrix<f64>, outputs: &DMatrix<f64>) -> f64 {
    let (nu, ny, n) = (ctx.n_u(), ctx.n_y(), ctx.horizon());
    let mut total = 0.0;
    for j in 0..inputs.nrows() {
        let mut v = DVector::zeros(n * (nu + ny));
        v.rows_mut(0, n * nu).copy_from(&inputs.row(j).transpose());
        v.rows_mut(n * nu, n * ny).copy_from(&outputs.row(j).transpose());
        total += v.dot(&(&ctx.stage_weight * &v));
    }
    total
}

pub fn decode(ctx: &OcpContext, assembled: &AssembledOcp, raw: &ConicSolution) -> Result<OcpSolution> {
    let near = raw.primal_residual.max(raw.dual_residual) < NEAR_CONVERGED;
    let accepted = match raw.status {
        ConicStatus::Optimal => true,
        ConicStatus::MaxIter => near,
        _ => false,
    };
    if !accepted {
        return Err(match raw.status {
            ConicStatus::Infeasible => Error::Infeasible("OCP reported primal infeasible".into()),
            s => Error::Solver(format!(
                "OCP solve ended with {s:?} (primal {:e}, dual {:e})",
                raw.primal_residual, raw.dual_residual
            )),
        });
    }
    let layout = &assembled.layout;
    check_dim("solution length", layout.variables, raw.x.len())?;
    let x = &raw.x;
    let (nu, ny, n, nz) = (ctx.n_u(), ctx.n_y(), ctx.horizon(), ctx.n_z());
    let nw = ctx.stack.n_w;
    let (t_ini, l) = (ctx.t_ini(), layout.trajectories.len());
    let mut initial = DMatrix::zeros(l, nz);
    let mut inputs = DMatrix::zeros(l, n * nu);
    let mut outputs = DMatrix::zeros(l, n * ny);
    let mut weights = DMatrix::zeros(l, ctx.stack.columns());
    let mut next = DMatrix::zeros(l, nz);
    let mut terminal = DMatrix::zeros(l, nz);
    let mut causality: f64 = 0.0;
    let mut consistency: f64 = 0.0;
    for j in 0..l {
        let z0 = layout.initial[j].eval(x);
        let v = layout.trajectories[j].eval(x);
        let u = v.rows(0, n * nu).into_owned();
        let y = v.rows(n * nu, n * ny).into_owned();
        let w = ctx.disturbance.row(j).transpose();
        let mut stacked = DVector::zeros(nz + n * (nu + nw));
        stacked.rows_mut(0, nz).copy_from(&z0);
        stacked.rows_mut(nz, n * nu).copy_from(&u);
        stacked.rows_mut(nz + n * nu, n * nw).copy_from(&w);
        let g = match &layout.weight_offsets {
            Some(off) => {
                DVector::from_column_slice(&x[off[j]..off[j] + ctx.stack.columns()]).component_mul(&ctx.weight_scale)
            }
            None => ctx.predictor.g_map() * &stacked,
        };
        let pred = ctx.predictor.theta() * &stacked;
        consistency = consistency.max((&pred - &y).amax());
        for i in 0..n {
            if j >= ctx.config.causality.allowed_terms(&ctx.basis, i) {
                causality = causality.max(u.rows(i * nu, nu).amax());
            }
        }
        initial.set_row(j, &z0.transpose());
        inputs.set_row(j, &u.transpose());
        outputs.set_row(j, &y.transpose());
        weights.set_row(j, &g.transpose());
        let z1 = shift_window(
            &z0,
            &u.rows(0, nu).into_owned(),
            &y.rows(0, ny).into_owned(),
            t_ini,
            nu,
            ny,
        );
        next.set_row(j, &z1.transpose());
        terminal.set_row(j, &(&ctx.terminal_select * &v).transpose());
    }
    let scale = 1.0 + outputs.amax() + inputs.amax();
    if causality > 1e-7 * scale || consistency > 1e-6 * scale {
        return Err(Error::Numerical(format!(
            "decoded solution violates structure: causality {causality:e}, predictor consistency {consistency:e}"
        )));
    }
    let value = expected_cost(ctx, &inputs, &outputs);
    Ok(OcpSolution {
        mu: x[0],
        initial,
        inputs,
        outputs,
        weights,
        next,
        terminal,
        value,
        diagnostics: SolveDiagnostics {
            status: raw.status,
            iterations: raw.iterations,
            primal_residual: raw.primal_residual,
            dual_residual: raw.dual_residual,
            gap: raw.gap,
            solver_objective: raw.objective,
            near_converged: raw.status != ConicStatus::Optimal,
            causality_residual: causality,
            consistency_residual: consistency,
        },
    })
}

pub fn solve_ocp(ctx: &OcpContext, init: &InitialConditionData, backend: &Backend) -> Result<OcpSolution> {
    let assembled = assemble(ctx, init)?;
    let raw = backend.solve(&assembled.program)?;
    decode(ctx, &assembled, &raw)
}

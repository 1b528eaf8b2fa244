//! Receding-horizon loop and Monte-Carlo harness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conic::Backend;
use crate::error::{check_dim, param, Error, Result};
use crate::linalg::{symmetric_pinv, vector};
use crate::lti::{rng_stream, ArxModel, ExtendedState};
use crate::ocp::{prepare_initial, solve_ocp, InitialConditionData, OcpContext, OcpSolution};

/// Relative eigenvalue cutoff of the germ-recovery pseudo-inverse.
const RECOVERY_TOL: f64 = 1e-10;

/// Germ values φ¹..φ^{n_z} that make the planned initial condition hit `z_k`.
///
/// `initial` holds z^j_{0|k} row-wise; rows 1..=n_z form the (symmetric)
/// coefficient matrix M.
pub fn recover_germ_realization(initial: &DMatrix<f64>, z_k: &DVector<f64>) -> Result<DVector<f64>> {
    let nz = z_k.len();
    check_dim("initial coefficient width", nz, initial.ncols())?;
    if initial.nrows() < nz + 1 {
        return Err(param("initial", format!("need {} coefficient rows", nz + 1)));
    }
    let m = initial.rows(1, nz).transpose();
    let rhs = z_k - initial.row(0).transpose();
    if m.amax() == 0.0 {
        return Ok(DVector::zeros(nz));
    }
    let sym = (&m + m.transpose()) * 0.5;
    let phi = symmetric_pinv(&sym, RECOVERY_TOL) * &rhs;
    let res = (&m * &phi - &rhs).norm();
    let scale = z_k.norm().max(rhs.norm());
    if res > 1e-6 * scale {
        return Err(Error::Numerical(format!(
            "measured state is not a realization of the planned initial condition (residual {res:e})"
        )));
    }
    Ok(phi)
}

/// u = u^0_0 + Σ_{j=1}^{n_z} u^j_0 φ^j.
pub fn feedback_input(solution: &OcpSolution, phi: &DVector<f64>, n_u: usize) -> DVector<f64> {
    DVector::from_fn(n_u, |c, _| {
        let coeffs = solution.inputs.column(c);
        let mut u = coeffs[0];
        for (j, p) in phi.iter().enumerate() {
            if j + 1 < coeffs.len() {
                u += coeffs[j + 1] * p;
            }
        }
        u
    })
}

pub fn stage_cost(u: &DVector<f64>, y: &DVector<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    u.dot(&(r * u)) + y.dot(&(q * y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    #[serde(with = "vector")]
    pub u: DVector<f64>,
    #[serde(with = "vector")]
    pub y: DVector<f64>,
    #[serde(with = "vector")]
    pub w: DVector<f64>,
    /// Extended state at the start of the step.
    #[serde(with = "vector")]
    pub z: DVector<f64>,
    #[serde(with = "vector")]
    pub germs: DVector<f64>,
    pub mu: f64,
    pub value: f64,
    pub stage_cost: f64,
    pub feasible: bool,
    pub near_converged: bool,
    #[serde(skip)]
    pub initial: Option<InitialConditionData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub run: usize,
    pub seed: u64,
    pub alpha: f64,
    pub rows: Vec<TraceRow>,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
    /// Initial conditions drawn before one admitted a feasible first step.
    #[serde(default)]
    pub initial_draws: usize,
}

impl ClosedLoopTrace {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn to_csv(&self) -> String {
        let Some(first) = self.rows.first() else {
            return "k,mu,V_N,stage_cost,feasible\n".into();
        };
        let mut out = String::from("k");
        for (p, n) in [("u", first.u.len()), ("y", first.y.len()), ("w", first.w.len())] {
            for c in 0..n {
                out += &format!(",{p}{}", c + 1);
            }
        }
        out += ",mu,V_N,stage_cost,feasible\n";
        for r in &self.rows {
            out += &r.k.to_string();
            for v in r.u.iter().chain(r.y.iter()).chain(r.w.iter()) {
                out += &format!(",{v:e}");
            }
            out += &format!(",{:e},{:e},{:e},{}\n", r.mu, r.value, r.stage_cost, r.feasible);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ControllerState {
    pub z: ExtendedState,
    /// z^j_{1|k−1} from the previous solve; None at bootstrap.
    pub previous: Option<DMatrix<f64>>,
    pub k: usize,
    pub rng: ChaCha8Rng,
    pub cost_sum: f64,
}

impl ControllerState {
    pub fn new(z0: ExtendedState, rng: ChaCha8Rng) -> Self {
        Self {
            z: z0,
            previous: None,
            k: 0,
            rng,
            cost_sum: 0.0,
        }
    }
}

/// One plant/controller pairing sharing a prepared OCP context.
#[derive(Clone, Copy, Debug)]
pub struct Controller<'a> {
    pub context: &'a OcpContext,
    pub plant: &'a ArxModel,
    pub backend: &'a Backend,
    pub alpha: f64,
    pub record_initial: bool,
}

impl<'a> Controller<'a> {
    pub fn new(context: &'a OcpContext, plant: &'a ArxModel, backend: &'a Backend, alpha: f64) -> Self {
        Self {
            context,
            plant,
            backend,
            alpha,
            record_initial: false,
        }
    }

    /// Solve, apply the feedback realization, and advance the plant once.
    pub fn step(&self, state: &mut ControllerState) -> Result<TraceRow> {
        let z = state.z.0.clone();
        let init = prepare_initial(&z, state.previous.as_ref())?;
        let sol = solve_ocp(self.context, &init, self.backend)?;
        let germs = recover_germ_realization(&sol.initial, &z)?;
        let u = feedback_input(&sol, &germs, self.plant.n_u());
        let w = self.plant.sample_disturbance(&mut state.rng);
        let (y, next) = self.plant.realization_step(&state.z, &u, &w)?;
        let cfg = self.context.config();
        let cost = stage_cost(&u, &y, &cfg.q, &cfg.r);
        let row = TraceRow {
            k: state.k,
            u,
            y,
            w,
            z,
            germs,
            mu: sol.mu,
            value: sol.value,
            stage_cost: cost,
            feasible: true,
            near_converged: sol.diagnostics.near_converged,
            initial: self.record_initial.then_some(init),
        };
        state.z = next;
        state.previous = Some(sol.next);
        state.k += 1;
        state.cost_sum += cost;
        Ok(row)
    }

    pub fn run_closed_loop(&self, z0: ExtendedState, steps: usize, seed: u64, run: usize) -> ClosedLoopTrace {
        let mut state = ControllerState::new(z0, rng_stream(seed, 2 * run as u64 + 1));
        let mut rows = Vec::with_capacity(steps);
        let mut failure = None;
        for _ in 0..steps {
            match self.step(&mut state) {
                Ok(r) => rows.push(r),
                Err(e) => {
                    failure = Some(format!("step {}: {e}", state.k));
                    break;
                }
            }
        }
        ClosedLoopTrace {
            run,
            seed,
            alpha: self.alpha,
            rows,
            failure,
            initial_draws: 1,
        }
    }
}

/// How the initial extended state of each Monte-Carlo run is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSampler {
    Fixed {
        state: Vec<f64>,
    },
    /// Steady window at (input, output + δ), δ_c uniform on ±half_width_c.
    SteadyUniform {
        input: Vec<f64>,
        output: Vec<f64>,
        half_width: Vec<f64>,
    },
    /// Steady window at (input, output + δ), δ_c ~ N(0, std_c²).
    SteadyGaussian {
        input: Vec<f64>,
        output: Vec<f64>,
        std: Vec<f64>,
    },
}

impl InitialSampler {
    pub fn steady(input: Vec<f64>, output: Vec<f64>) -> Self {
        let n = output.len();
        InitialSampler::SteadyUniform {
            input,
            output,
            half_width: vec![0.0; n],
        }
    }

    pub fn validate(&self, model: &ArxModel) -> Result<()> {
        match self {
            InitialSampler::Fixed { state } => check_dim("initial state", model.n_z(), state.len()),
            InitialSampler::SteadyUniform {
                input,
                output,
                half_width: s,
            }
            | InitialSampler::SteadyGaussian { input, output, std: s } => {
                check_dim("initial input", model.n_u(), input.len())?;
                check_dim("initial output", model.n_y(), output.len())?;
                check_dim("initial spread", model.n_y(), s.len())?;
                if s.iter().any(|v| !(*v >= 0.0)) {
                    return Err(param("initial spread", "must be nonnegative"));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, model: &ArxModel, rng: &mut R) -> Result<ExtendedState> {
        self.validate(model)?;
        let (input, output, draws): (&Vec<f64>, &Vec<f64>, Vec<f64>) = match self {
            InitialSampler::Fixed { state } => return Ok(ExtendedState(DVector::from_vec(state.clone()))),
            InitialSampler::SteadyUniform {
                input,
                output,
                half_width,
            } => (
                input,
                output,
                half_width
                    .iter()
                    .map(|h| if *h > 0.0 { rng.gen_range(-*h..=*h) } else { 0.0 })
                    .collect(),
            ),
            InitialSampler::SteadyGaussian { input, output, std } => (
                input,
                output,
                std.iter()
                    .map(|s| {
                        if *s > 0.0 {
                            Normal::new(0.0, *s).map(|n| n.sample(rng)).unwrap_or(0.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
        };
        let y = DVector::from_iterator(output.len(), output.iter().zip(&draws).map(|(o, d)| o + d));
        model.steady_state(&DVector::from_vec(input.clone()), &y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub initial: InitialSampler,
    pub histogram_steps: Vec<usize>,
    pub histogram_component: usize,
    pub histogram_bins: usize,
    /// Draws allowed per run to find an initial state with a feasible first
    /// OCP; 1 keeps every draw.
    #[serde(default = "one")]
    pub max_initial_draws: usize,
    #[serde(default)]
    pub execution: ExecutionMode,
}

fn one() -> usize {
    1
}

/// Runs `runs` independent closed loops; run r uses RNG streams derived from
/// (seed, r) only, so results do not depend on the worker count.
pub fn monte_carlo(controller: &Controller<'_>, opts: &MonteCarloOptions) -> Vec<ClosedLoopTrace> {
    let run_one = |r: usize| {
        let mut rng = rng_stream(opts.seed, 2 * r as u64 + 2);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut trace = match opts.initial.sample(controller.plant, &mut rng) {
                Ok(z0) => controller.run_closed_loop(z0, opts.steps, opts.seed, r),
                Err(e) => ClosedLoopTrace {
                    run: r,
                    seed: opts.seed,
                    alpha: controller.alpha,
                    rows: Vec::new(),
                    failure: Some(format!("initial condition: {e}")),
                    initial_draws: 0,
                },
            };
            trace.initial_draws = attempts;
            // only a start where the first OCP is infeasible is redrawn
            if trace.rows.is_empty() && attempts < opts.max_initial_draws.max(1) {
                continue;
            }
            return trace;
        }
    };
    match opts.execution {
        #[cfg(feature = "parallel")]
        ExecutionMode::Parallel => {
            use rayon::prelude::*;
            (0..opts.runs).into_par_iter().map(run_one).collect()
        }
        _ => (0..opts.runs).map(run_one).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStatistics {
    pub k: usize,
    pub samples: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub q05: Vec<f64>,
    pub q50: Vec<f64>,
    pub q95: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseEstimate {
    pub k: usize,
    pub samples: usize,
    /// Mean of V_{k+1} − V_k + ℓ_k − α over runs.
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub k: usize,
    pub edges: Vec<f64>,
    /// Normalized so that Σ density·width = 1.
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub failed_runs: Vec<(usize, String)>,
    pub alpha: f64,
    pub steps: Vec<StepStatistics>,
    /// Per output component, pooled over every recorded step.
    pub violation_rate: Vec<f64>,
    /// Mean over runs of (1/(k+1)) Σ_{i≤k} ℓ_i.
    pub averaged_cost: Vec<f64>,
    pub decrease: Vec<DecreaseEstimate>,
    pub histograms: Vec<Histogram>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn histogram(values: &[f64], bins: usize, k: usize) -> Histogram {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram {
        k,
        edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
        density: counts
            .iter()
            .map(|c| *c as f64 / (values.len() as f64 * width))
            .collect(),
    }
}

pub fn summarize(
    traces: &[ClosedLoopTrace],
    context: &OcpContext,
    alpha: f64,
    opts: &MonteCarloOptions,
) -> MonteCarloSummary {
    let bounds = &context.config().output_bounds;
    let ny = bounds.len();
    let horizon = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    let mut steps = Vec::with_capacity(horizon);
    let mut averaged_cost = Vec::with_capacity(horizon);
    let mut decrease = Vec::new();
    let mut violations = vec![0usize; ny];
    let mut pooled = 0usize;
    for k in 0..horizon {
        let rows: Vec<&TraceRow> = traces.iter().filter_map(|t| t.rows.get(k)).collect();
        let mut stats = StepStatistics {
            k,
            samples: rows.len(),
            mean: Vec::new(),
            std: Vec::new(),
            q05: Vec::new(),
            q50: Vec::new(),
            q95: Vec::new(),
        };
        for c in 0..ny {
            let mut v: Vec<f64> = rows.iter().map(|r| r.y[c]).collect();
            let (m, s) = mean_std(&v);
            v.sort_by(f64::total_cmp);
            stats.mean.push(m);
            stats.std.push(s);
            stats.q05.push(quantile(&v, 0.05));
            stats.q50.push(quantile(&v, 0.5));
            stats.q95.push(quantile(&v, 0.95));
            violations[c] += v.iter().filter(|y| !bounds[c].contains(**y)).count();
        }
        pooled += rows.len();
        steps.push(stats);
        let avg: Vec<f64> = traces
            .iter()
            .filter(|t| t.rows.len() > k)
            .map(|t| t.rows[..=k].iter().map(|r| r.stage_cost).sum::<f64>() / (k + 1) as f64)
            .collect();
        averaged_cost.push(mean_std(&avg).0);
        let d: Vec<f64> = traces
            .iter()
            .filter(|t| t.rows.len() > k + 1)
            .map(|t| t.rows[k + 1].value - t.rows[k].value + t.rows[k].stage_cost - alpha)
            .collect();
        if !d.is_empty() {
            let (m, s) = mean_std(&d);
            decrease.push(DecreaseEstimate {
                k,
                samples: d.len(),
                mean: m,
                standard_error: s / (d.len() as f64).sqrt(),
            });
        }
    }
    let histograms = opts
        .histogram_steps
        .iter()
        .filter(|k| **k < horizon && opts.histogram_bins > 0)
        .map(|k| {
            let v: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.rows.get(*k))
                .map(|r| r.y[opts.histogram_component.min(ny - 1)])
                .collect();
            histogram(&v, opts.histogram_bins, *k)
        })
        .collect();
    MonteCarloSummary {
        runs: traces.len(),
        failed_runs: traces
            .iter()
            .filter_map(|t| t.failure.clone().map(|f| (t.run, f)))
            .collect(),
        alpha,
        steps,
        violation_rate: violations
            .iter()
            .map(|v| if pooled > 0 { *v as f64 / pooled as f64 } else { 0.0 })
            .collect(),
        averaged_cost,
        decrease,
        histograms,
    }
}

impl MonteCarloSummary {
    pub fn histograms_csv(&self) -> String {
        let mut out = String::from("k,left,right,density\n");
        for h in &self.histograms {
            for (i, d) in h.density.iter().enumerate() {
                out += &format!("{},{:e},{:e},{:e}\n", h.k, h.edges[i], h.edges[i + 1], d);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_recovery() {
        let mut init = DMatrix::zeros(4, 3);
        for i in 0..3 {
            init[(i + 1, i)] = 1.0;
        }
        let z = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(recover_germ_realization(&init, &z).unwrap(), z);
    }

    #[test]
    fn zero_covariance_gives_zero_germs() {
        let mut init = DMatrix::zeros(4, 3);
        init[(0, 0)] = 2.0;
        let z = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        assert_eq!(recover_germ_realization(&init, &z).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn inconsistent_measurement_is_rejected() {
        let mut init = DMatrix::zeros(3, 2);
        init[(1, 0)] = 1.0;
        let z = DVector::from_vec(vec![0.0, 1.0]);
        assert!(recover_germ_realization(&init, &z).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert!((quantile(&v, 0.05) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let h = histogram(&v, 7, 0);
        let total: f64 = h
            .density
            .iter()
            .enumerate()
            .map(|(i, d)| d * (h.edges[i + 1] - h.edges[i]))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

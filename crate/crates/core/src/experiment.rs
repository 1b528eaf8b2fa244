//! Experiment configuration and the offline pipeline
//! data → Hankel stack → predictor → terminal ingredients → OCP context.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::behavioral::{is_persistently_exciting, HankelStack, PeReport, Predictor};
use crate::conic::Backend;
use crate::controller::{Controller, ExecutionMode, InitialSampler, MonteCarloOptions};
use crate::error::{Error, Result};
use crate::lti::{
    aircraft_model, collect_data, minimal_order_estimate, ArxModel, DataArchive, Excitation, OrderEstimate,
};
use crate::ocp::{tightening_sigma, Causality, Formulation, Interval, MuMode, OcpConfig, OcpContext};
use crate::pce::build_joint_basis;
use crate::terminal::{identify_arx, synthesize, ChanceBound, Signal, Synthesis, TerminalIngredients, TerminalOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Aircraft,
    Explicit(ArxModel),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ArxModel> {
        match self {
            ModelSpec::Aircraft => Ok(aircraft_model()),
            // re-run the constructor so deserialized models are validated
            ModelSpec::Explicit(m) => {
                ArxModel::new(m.phi().clone(), m.d().clone(), m.t_ini(), m.disturbance().to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub length: usize,
    pub excitation: Excitation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub ocp: OcpConfig,
    pub terminal: TerminalOptions,
    #[serde(default)]
    pub order_override: Option<usize>,
    pub simulation: MonteCarloOptions,
    #[serde(default)]
    pub backend: Backend,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Aircraft,
            data: DataConfig {
                length: 90,
                excitation: Excitation::uniform(1, 1.0),
                seed: 0,
            },
            ocp: OcpConfig {
                horizon: 10,
                q: DMatrix::identity(3, 3),
                r: DMatrix::identity(1, 1),
                eps_u: 1.0,
                eps_y: 0.1,
                input_bounds: vec![Interval::unbounded()],
                output_bounds: vec![Interval::symmetric(1.0), Interval::unbounded(), Interval::unbounded()],
                causality: Causality::Strict,
                mu_mode: MuMode::Free,
                formulation: Formulation::Condensed,
            },
            terminal: TerminalOptions::default(),
            order_override: None,
            simulation: MonteCarloOptions {
                runs: 50,
                steps: 30,
                seed: 1,
                initial: InitialSampler::steady(vec![0.0], vec![0.0, -10.0, 0.0]),
                histogram_steps: vec![0, 5, 10, 15, 20],
                histogram_component: 1,
                histogram_bins: 30,
                max_initial_draws: 1,
                execution: ExecutionMode::Parallel,
            },
            backend: Backend::default(),
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut note = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{field}: {e}"));
            }
        };
        let model = self.model.resolve();
        let model = match model {
            Ok(m) => Some(m),
            Err(e) => {
                note("model", Err(e));
                None
            }
        };
        if let Some(m) = &model {
            let need = m.n_z() + m.t_ini() + 1;
            if self.data.length < need {
                note(
                    "data.length",
                    Err(crate::error::param("length", format!("must be at least {need}"))),
                );
            }
            let ex = &self.data.excitation;
            if ex.input_lower.len() != m.n_u() || ex.input_upper.len() != m.n_u() {
                note(
                    "data.excitation",
                    Err(crate::error::param(
                        "excitation",
                        format!("needs {} input intervals", m.n_u()),
                    )),
                );
            }
            note("ocp", self.ocp.validate(m.n_u(), m.n_y()));
            note("simulation.initial", self.simulation.initial.validate(m));
            if self.simulation.histogram_component >= m.n_y() {
                note(
                    "simulation.histogram_component",
                    Err(crate::error::param(
                        "histogram_component",
                        format!("must be below {}", m.n_y()),
                    )),
                );
            }
        }
        let t = &self.terminal;
        if !(t.ridge >= 0.0) {
            note(
                "terminal.ridge",
                Err(crate::error::param("ridge", "must be nonnegative")),
            );
        }
        if !(t.spread_margin > 0.0 && t.spread_margin <= 1.0) {
            note(
                "terminal.spread_margin",
                Err(crate::error::param("spread_margin", "must lie in (0, 1]")),
            );
        }
        if !(t.box_cap > 0.0) || t.samples == 0 {
            note(
                "terminal.box_cap",
                Err(crate::error::param("box_cap", "cap and sample count must be positive")),
            );
        }
        if self.simulation.runs == 0 || self.simulation.steps == 0 {
            note(
                "simulation",
                Err(crate::error::param("runs", "runs and steps must be positive")),
            );
        }
        if self.simulation.histogram_bins == 0 {
            note(
                "simulation.histogram_bins",
                Err(crate::error::param("histogram_bins", "must be positive")),
            );
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Chance constraints that the terminal feedback must respect.
    pub fn chance_bounds(&self) -> Result<Vec<ChanceBound>> {
        let mut out = Vec::new();
        let sy = tightening_sigma(self.ocp.eps_y)?;
        let su = tightening_sigma(self.ocp.eps_u)?;
        for (c, b) in self
            .ocp
            .output_bounds
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_bounded())
        {
            out.push(ChanceBound {
                signal: Signal::Output(c),
                lower: b.lower,
                upper: b.upper,
                sigma: sy,
            });
        }
        for (c, b) in self.ocp.input_bounds.iter().enumerate().filter(|(_, b)| b.is_bounded()) {
            out.push(ChanceBound {
                signal: Signal::Input(c),
                lower: b.lower,
                upper: b.upper,
                sigma: su,
            });
        }
        Ok(out)
    }
}

/// Everything computed offline, ready for closed-loop simulation.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ArxModel,
    pub archive: DataArchive,
    pub order: OrderEstimate,
    pub excitation: PeReport,
    pub identified: (DMatrix<f64>, DMatrix<f64>),
    pub terminal: TerminalIngredients,
    pub alpha: f64,
    pub context: OcpContext,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        Self::build_with_terminal(config, None)
    }

    /// Like [`Experiment::build`] but reusing previously synthesized terminal ingredients.
    pub fn build_with_terminal(config: ExperimentConfig, terminal: Option<TerminalIngredients>) -> Result<Self> {
        config.validate()?;
        let model = config.model.resolve()?;
        let archive = collect_data(&model, config.data.length, &config.data.excitation, config.data.seed)?;
        let horizon = config.ocp.horizon;
        let order = minimal_order_estimate(&archive, 1e-4)?;
        let n = order.resolve(config.order_override);
        let excitation = is_persistently_exciting(&archive.u, &archive.w, n + horizon + model.t_ini());
        if !excitation.exciting {
            return Err(Error::RankDeficient(format!(
                "recorded data are not persistently exciting of order {}: rank {} of {}",
                n + horizon + model.t_ini(),
                excitation.rank,
                excitation.rows
            )));
        }
        let stack = HankelStack::new(&archive, horizon)?;
        let predictor = Predictor::new(&stack)?;
        let identified = identify_arx(&archive)?;
        let sigma_w = model.disturbance_covariance();
        let terminal = match terminal {
            Some(t) => t,
            None => {
                let chance = config.chance_bounds()?;
                let spec = Synthesis {
                    phi: &identified.0,
                    d: &identified.1,
                    t_ini: model.t_ini(),
                    q: &config.ocp.q,
                    r: &config.ocp.r,
                    sigma_w: &sigma_w,
                    chance: &chance,
                };
                synthesize(&spec, &config.terminal)?
            }
        };
        let alpha = terminal.alpha(&config.ocp.q, &sigma_w);
        let basis = build_joint_basis(model.n_z() + 1, model.disturbance(), horizon)?;
        let context = OcpContext::new(
            config.ocp.clone(),
            stack,
            predictor,
            basis,
            terminal.clone(),
            model.disturbance(),
        )?;
        Ok(Self {
            config,
            model,
            archive,
            order,
            excitation,
            identified,
            terminal,
            alpha,
            context,
        })
    }

    pub fn controller(&self) -> Controller<'_> {
        Controller::new(&self.context, &self.model, &self.config.backend, self.alpha)
    }
}

//! Command-line runner for the aircraft experiment and solver fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ddspc::behavioral::LemmaVerifier;
use ddspc::conic::{Backend, ConicProgram, IpmSettings, Settings};
use ddspc::controller::{monte_carlo, summarize};
use ddspc::experiment::{Experiment, ExperimentConfig};
use ddspc::lti::{collect_data, fingerprint};
use ddspc::ocp::{Causality, MuMode};
use ddspc::terminal::TerminalIngredients;
use serde::Serialize;
use serde_json::json;

const THREADS_VAR: &str = "DDSPC_THREADS";
const PUBLISHED_ALPHA: f64 = 295.21;

#[derive(Parser, Debug)]
#[command(
    name = "ddspc",
    version,
    about = "Data-driven stochastic predictive control experiments"
)]
struct Cli {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Simulation master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mu_mode: Option<MuArg>,
    #[arg(long, global = true, value_enum)]
    causality: Option<CausalityArg>,
    /// Reuse terminal ingredients written by `terminal`.
    #[arg(long, global = true)]
    terminal: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record the offline data archive.
    Collect,
    /// Synthesize terminal ingredients and report α.
    Terminal,
    /// One closed-loop run.
    Run,
    /// Closed-loop fleet with summary statistics and histograms.
    Montecarlo,
    /// Check fresh trajectories against the Hankel span of the archive.
    VerifyLemma {
        /// Number of fresh windows to check.
        #[arg(long, default_value_t = 100)]
        windows: usize,
    },
    /// Solve a conic program stored as JSON.
    SolveFixture {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverArg::Admm)]
        solver: SolverArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MuArg {
    Free,
    Zero,
    One,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CausalityArg {
    Strict,
    Literal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Admm,
    Ipm,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] ddspc::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(ddspc::Error::Config(_)) => "config",
            CliError::Core(ddspc::Error::Json(_)) => "json",
            CliError::Core(_) => "computation",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "check",
        }
    }

    fn details(&self) -> Vec<String> {
        match self {
            CliError::Core(ddspc::Error::Config(list)) => list.clone(),
            _ => Vec::new(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(ddspc::Error::Config(_)) | CliError::Usage(_) | CliError::Core(ddspc::Error::Json(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })?;
    outputs.push(name.to_owned());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&read(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.simulation.seed = s;
    }
    if let Some(r) = cli.runs {
        cfg.simulation.runs = r;
    }
    if let Some(s) = cli.steps {
        cfg.simulation.steps = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    if let Some(m) = cli.mu_mode {
        cfg.ocp.mu_mode = match m {
            MuArg::Free => MuMode::Free,
            MuArg::Zero => MuMode::Fixed(0.0),
            MuArg::One => MuMode::Fixed(1.0),
        };
    }
    if let Some(c) = cli.causality {
        cfg.ocp.causality = match c {
            CausalityArg::Strict => Causality::Strict,
            CausalityArg::Literal => Causality::Literal,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> CliResult<usize> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(rayon::current_num_threads())
}

fn build(cli: &Cli, cfg: ExperimentConfig) -> CliResult<Experiment> {
    let terminal = match &cli.terminal {
        Some(p) => {
            let v: serde_json::Value = serde_json::from_str(&read(p)?).map_err(ddspc::Error::from)?;
            let t: TerminalIngredients =
                serde_json::from_value(v.get("ingredients").cloned().unwrap_or(v)).map_err(ddspc::Error::from)?;
            Some(t)
        }
        None => None,
    };
    Ok(Experiment::build_with_terminal(cfg, terminal)?)
}

fn collect(cfg: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> CliResult<()> {
    let model = cfg.model.resolve()?;
    let archive = collect_data(&model, cfg.data.length, &cfg.data.excitation, cfg.data.seed)?;
    write(out, "archive.json", &to_json(&archive)?, outputs)?;
    write(out, "archive.csv", &archive.to_csv(), outputs)
}

fn terminal(exp: &Experiment, out: &Path, outputs: &mut Vec<String>) -> CliResult<()> {
    let body = json!({
        "ingredients": exp.terminal,
        "alpha": exp.alpha,
        "alpha_published": PUBLISHED_ALPHA,
        "identified_phi": exp.identified.0.transpose().as_slice(),
        "order": exp.order,
    });
    write(out, "terminal.json", &to_json(&body)?, outputs)?;
    println!("alpha = {:.4} (published value {PUBLISHED_ALPHA})", exp.alpha);
    Ok(())
}

fn fleet(exp: &Experiment, runs: usize, out: &Path, outputs: &mut Vec<String>) -> CliResult<()> {
    let mut opts = exp.config.simulation.clone();
    opts.runs = runs;
    let traces = monte_carlo(&exp.controller(), &opts);
    let summary = summarize(&traces, &exp.context, exp.alpha, &opts);
    if runs == 1 {
        write(out, "trace.csv", &traces[0].to_csv(), outputs)?;
    } else {
        let mut all = String::new();
        for (i, t) in traces.iter().enumerate() {
            let csv = t.to_csv();
            let mut lines = csv.lines();
            let head = lines.next().unwrap_or_default();
            if i == 0 {
                all += &format!("run,{head}\n");
            }
            for l in lines {
                all += &format!("{},{l}\n", t.run);
            }
        }
        write(out, "traces.csv", &all, outputs)?;
        write(out, "histograms.csv", &summary.histograms_csv(), outputs)?;
    }
    write(out, "summary.json", &to_json(&summary)?, outputs)?;
    println!(
        "{} runs, {} failed; violation rates {:?}; alpha {:.2}",
        summary.runs,
        summary.failed_runs.len(),
        summary.violation_rate,
        summary.alpha
    );
    if let Some((run, why)) = summary.failed_runs.first() {
        eprintln!("run {run} failed: {why}");
    }
    Ok(())
}

fn verify_lemma(exp: &Experiment, windows: usize, out: &Path, outputs: &mut Vec<String>) -> CliResult<()> {
    let stack = exp.context.stack();
    let verifier = LemmaVerifier::new(stack);
    let depth = stack.horizon + stack.t_ini;
    // a fresh archive from an unrelated seed supplies the test windows
    let cfg = &exp.config.data;
    let len = (windows + depth).max(cfg.length);
    let fresh = collect_data(&exp.model, len, &cfg.excitation, cfg.seed.wrapping_add(0x9e37_79b9))?;
    let mut table = String::from("window,residual\n");
    let mut worst: f64 = 0.0;
    for c in 0..windows {
        let u = fresh.u.rows(c, depth).into_owned();
        let y = fresh.y.rows(c, depth).into_owned();
        let w = fresh.w.rows(c + stack.t_ini, stack.horizon).into_owned();
        let r = verifier.verify(&u, &w, &y)?.residual;
        worst = worst.max(r);
        table += &format!("{c},{r:e}\n");
    }
    write(out, "lemma.csv", &table, outputs)?;
    println!("{windows} windows, largest residual {worst:.3e}");
    if worst >= 1e-8 {
        return Err(CliError::Check(format!("largest residual {worst:e} is not below 1e-8")));
    }
    Ok(())
}

fn solve_fixture(path: &Path, solver: SolverArg, out: &Path, outputs: &mut Vec<String>) -> CliResult<()> {
    let program = ConicProgram::from_json(&read(path)?)?;
    let backend = match solver {
        SolverArg::Admm => Backend::Admm(Settings::default()),
        SolverArg::Ipm => Backend::InteriorPoint(IpmSettings::default()),
    };
    let sol = backend.solve(&program)?;
    println!(
        "{:?}: objective {:.10e} after {} iterations",
        sol.status, sol.objective, sol.iterations
    );
    write(out, "solution.json", &to_json(&sol)?, outputs)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let threads = configure_threads()?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    let mut outputs = Vec::new();
    let command = match &cli.command {
        Command::Collect => {
            collect(&cfg, &out, &mut outputs)?;
            "collect"
        }
        Command::Terminal => {
            terminal(&build(cli, cfg.clone())?, &out, &mut outputs)?;
            "terminal"
        }
        Command::Run => {
            fleet(&build(cli, cfg.clone())?, 1, &out, &mut outputs)?;
            "run"
        }
        Command::Montecarlo => {
            fleet(&build(cli, cfg.clone())?, cfg.simulation.runs, &out, &mut outputs)?;
            "montecarlo"
        }
        Command::VerifyLemma { windows } => {
            verify_lemma(&build(cli, cfg.clone())?, *windows, &out, &mut outputs)?;
            "verify-lemma"
        }
        Command::SolveFixture { path, solver } => {
            solve_fixture(path, *solver, &out, &mut outputs)?;
            "solve-fixture"
        }
    };
    let config_json = cfg.to_json()?;
    write(&out, "config.json", &config_json, &mut outputs)?;
    let manifest = json!({
        "command": command,
        "arguments": std::env::args().skip(1).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_file": "config.json",
        "config_sha256": fingerprint(config_json.as_bytes()),
        "data_seed": cfg.data.seed,
        "simulation_seed": cfg.simulation.seed,
        "terminal_seed": cfg.terminal.seed,
        "terminal_file": cli.terminal,
        "threads": threads,
        "outputs": outputs,
    });
    let mut ignored = Vec::new();
    write(&out, "manifest.json", &to_json(&manifest)?, &mut ignored)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "details": e.details(),
                }
            });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}

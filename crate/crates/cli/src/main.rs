//! `flowopt` command-line driver.
//!
//! Exit codes: 0 success, 1 failed self-test or unexpected error, 2 invalid
//! argument, 3 config error, 4 divergence (partial trace is still written),
//! 5 bound assumption violated.

mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowopt::config::{self, Scenario};
use flowopt::experiments::{self, ExperimentResult, Init, Method, Task};
use flowopt::io::{write_atomic, write_json};
use flowopt::optimizer::OptTrace;
use flowopt::par::with_jobs;
use flowopt::{estimate_bound_mc, flowopt_run, Error, Exec, OptConfig, State};

#[derive(Parser)]
#[command(name = "flowopt", version, about = "Zero-order inversion and editing through unrolled flow chains")]
struct Cli {
    /// Suppress progress and summary output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML, schema_version = 1).
    #[arg(long)]
    config: PathBuf,
    /// Output root; results go to `<out>/<config stem>/<subcommand>/`.
    #[arg(long, env = "FLOWOPT_OUT", default_value = "out")]
    out: PathBuf,
    /// Replaces the seed list with `seed, seed+1, ...` of the same length and
    /// reseeds the bound estimator.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario's [experiment] table.
    Run(Common),
    /// Estimate the step-size bound for the scenario's [bound] conditions.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Override the number of Monte-Carlo realizations.
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Residual curves per step size (the [experiment] table run as a sweep).
    Sweep(Common),
    /// Invert one target and write the full trace.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Target sample, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        target: Vec<f64>,
        /// Condition tag; defaults to the first condition.
        #[arg(long)]
        condition: Option<String>,
        /// Step size; defaults to the suggested step from a bound estimate.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long)]
        stop_tol: Option<f64>,
        #[arg(long, value_enum, default_value_t = InitArg::NaiveOde)]
        init: InitArg,
    },
    /// Direct editing (the [experiment] table run as an edit).
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Built-in consistency checks; nonzero exit if any fails.
    Selftest {
        /// Also write the CSV artifacts of the checks here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    NaiveOde,
    Random,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::DegeneratePair(_) => 2,
        Error::Config(_) => 3,
        Error::Divergence { .. } => 4,
        Error::AssumptionViolated { .. } => 5,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.cmd {
        Command::Run(c) => with_common(&c, |sc, exec| cmd_run(sc, &c, exec, None, quiet)),
        Command::Sweep(c) => with_common(&c, |sc, exec| cmd_run(sc, &c, exec, Some(Task::Sweep), quiet)),
        Command::Edit { common, source, target } => with_common(&common, |mut sc, exec| {
            let exp = sc
                .experiment
                .as_mut()
                .ok_or_else(|| Error::Config("scenario has no [experiment] table".into()))?;
            if let Some(s) = source {
                exp.source = s;
            }
            if target.is_some() {
                exp.target = target;
            }
            cmd_run(sc, &common, exec, Some(Task::DirectEdit), quiet)
        }),
        Command::Bound { common, realizations } => with_common(&common, |mut sc, exec| {
            if let Some(r) = realizations {
                sc.bound.num_realizations = r;
            }
            cmd_bound(&sc, &common.dir("bound"), exec, quiet)
        }),
        Command::Invert {
            common,
            target,
            condition,
            eta,
            iterations,
            stop_tol,
            init,
        } => with_common(&common, |sc, exec| {
            let req = InvertRequest {
                target,
                condition,
                eta,
                iterations,
                stop_tol,
                init: match init {
                    InitArg::NaiveOde => Init::NaiveOde,
                    InitArg::Random => Init::Random,
                },
            };
            cmd_invert(&sc, &common, exec, req, quiet)
        }),
        Command::Selftest { out } => {
            return if selftest::run(out.as_deref(), quiet) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn with_common<F>(c: &Common, f: F) -> flowopt::Result<()>
where
    F: FnOnce(Scenario, Exec) -> flowopt::Result<()> + Send,
{
    let mut sc = config::load(&c.config)?;
    if let Some(seed) = c.seed {
        sc.bound.seed = seed;
        if let Some(exp) = sc.experiment.as_mut() {
            let n = exp.seeds.len() as u64;
            exp.seeds = (seed..seed + n).collect();
        }
    }
    let exec = if c.jobs == Some(1) { Exec::Sequential } else { Exec::Parallel };
    with_jobs(c.jobs, || f(sc, exec))
}

impl Common {
    fn dir(&self, cmd: &str) -> PathBuf {
        let stem = self.config.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "scenario".into());
        self.out.join(stem).join(cmd)
    }
}

fn cmd_run(sc: Scenario, c: &Common, exec: Exec, task: Option<Task>, quiet: bool) -> flowopt::Result<()> {
    let mut exp = sc
        .experiment
        .clone()
        .ok_or_else(|| Error::Config("scenario has no [experiment] table".into()))?;
    if let Some(t) = task {
        if exp.task != t {
            exp.task = t;
            exp.methods = t.default_methods();
            exp.compare_init = false;
            exp.codec_dim = None;
        }
    }
    let result = experiments::run_with(&sc, &exp, exec)?;
    let dir = c.dir(match task {
        None => "run",
        Some(Task::Sweep) => "sweep",
        Some(_) => "edit",
    });
    let written = experiments::write_outputs(&result, &dir)?;
    if !quiet {
        print_summary(&result);
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

/// One line per method, taken at the largest iteration count.
fn print_summary(result: &ExperimentResult) {
    if let Some(b) = &result.bound {
        println!("bound {:.6} (suggested eta {:.6})", b.bound, b.suggested_eta);
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in &result.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for m in methods {
        let rows: Vec<_> = result.rows.iter().filter(|r| r.method == m).collect();
        let n = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
        let at_n: Vec<_> = rows.iter().filter(|r| r.iterations == n).collect();
        let k = at_n.len() as f64;
        let rmse = at_n.iter().map(|r| r.rmse).sum::<f64>() / k;
        let nfe = at_n.iter().map(|r| r.nfe as f64).sum::<f64>() / k;
        let converged = at_n.iter().filter(|r| r.status == experiments::RunStatus::Converged).count();
        println!(
            "{:<12} N={n:<4} rows={:<5} mean_rmse={rmse:.3e} mean_nfe={nfe:.1} converged={converged}/{}",
            m.as_str(),
            at_n.len(),
            at_n.len()
        );
    }
}

fn cmd_bound(sc: &Scenario, dir: &Path, exec: Exec, quiet: bool) -> flowopt::Result<()> {
    let est = experiments::scenario_bound(sc, exec)?;
    write_json(&dir.join("bound.json"), &est)?;
    write_atomic(&dir.join("alpha.csv"), est.alpha_csv().as_bytes())?;
    if !quiet {
        println!("bound {:.6}", est.bound);
        println!("suggested_eta {:.6}", est.suggested_eta);
        println!("beta_min {:.6}", est.beta_min);
        println!("wrote {}", dir.display());
    }
    Ok(())
}

struct InvertRequest {
    target: Vec<f64>,
    condition: Option<String>,
    eta: Option<f64>,
    iterations: usize,
    stop_tol: Option<f64>,
    init: Init,
}

fn cmd_invert(sc: &Scenario, c: &Common, exec: Exec, req: InvertRequest, quiet: bool) -> flowopt::Result<()> {
    let tag = req.condition.clone().unwrap_or_else(|| sc.default_tag().to_string());
    let flow = sc.flow(&tag)?;
    let y = State::from_vec(req.target.clone());
    if y.len() != sc.dim {
        return Err(Error::DimensionMismatch { expected: sc.dim, got: y.len() });
    }
    let eta = match req.eta {
        Some(e) => e,
        None => {
            let cfg = flowopt::BoundConfig { exec, ..sc.bound.clone() };
            estimate_bound_mc(&flow, &cfg)?.suggested_eta / flow.delta_scale()
        }
    };
    let mut cfg = OptConfig::new(eta, req.iterations)?.with_delta_scale(flow.delta_scale())?;
    if let Some(t) = req.stop_tol {
        cfg = cfg.with_stop_tol(t)?;
    }
    let z0 = match req.init {
        Init::NaiveOde => flow.invert_naive(&y)?,
        Init::Random => experiments::random_init(c.seed.unwrap_or(0), sc.dim),
    };
    let dir = c.dir("invert");
    let save = |trace: &OptTrace| -> flowopt::Result<()> {
        write_atomic(&dir.join("trace.csv"), trace.to_csv(true).as_bytes())?;
        write_json(&dir.join("trace.json"), &trace.to_record(Some(cfg), flow.num_steps()))
    };
    match flowopt_run(&flow, &y, &cfg, &z0) {
        Ok(trace) => {
            save(&trace)?;
            if !quiet {
                println!(
                    "eta {eta} iterations {} residual {:.3e} nfe {}",
                    trace.iterations_run(),
                    trace.final_residual().unwrap_or(f64::NAN),
                    flow.nfe()
                );
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Err(Error::Divergence { iteration, residual, trace }) => {
            save(&trace)?;
            if !quiet {
                println!("partial trace written to {}", dir.display());
            }
            Err(Error::Divergence { iteration, residual, trace })
        }
        Err(e) => Err(e),
    }
}

//! Protocol harness: inversion accuracy against evaluation budget, direct
//! editing, step-size sweeps and bound estimation, run over many seeds.
//!
//! Every row derives its randomness from one master seed split into fixed
//! streams ([`STREAM_STATE`], [`STREAM_INIT`], [`STREAM_CODEC`]), so a row is
//! reproducible from `(config, seed)` regardless of worker count.
//!
//! Output layout written by [`write_outputs`]:
//!
//! ```text
//! <dir>/rows.csv      one line per (method, seed, step size, N, ...)
//! <dir>/summary.csv   grouped means, see SUMMARY_COLUMNS
//! <dir>/summary.json
//! <dir>/curves.csv    sweep only: residual per iteration
//! <dir>/bound.json    when a bound was estimated
//! <dir>/alpha.csv
//! ```

mod codec;
mod editing;
mod inversion;
mod sweep;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::BackendKind;
use crate::bound::{estimate_bound_mc, estimate_bound_mc_over, BoundConfig, BoundEstimate};
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::flow::{BlackBoxFlow, Solver};
use crate::io::{json_bytes, write_atomic};
use crate::optimizer::{flowopt_run, OptConfig, OptTrace};
use crate::par::Exec;
use crate::State;

pub use codec::{codec_roundtrip, LinearCodec};
pub use editing::{direct_edit, edit_metrics, run_editing_experiment, EditMetrics, EditOutcome};
pub use inversion::run_inversion_experiment;
pub use sweep::run_step_size_sweep;

pub const STREAM_STATE: u64 = 0;
pub const STREAM_INIT: u64 = 1;
pub const STREAM_CODEC: u64 = 2;

pub const ROWS_COLUMNS: &str = "task,method,seed,init,eta,eta_factor,iterations,refine_iters,stop_tol,steps,nfe,rmse,rmse_signal,floor,iterations_to_tol,source_similarity,target_adherence,status";
pub const SUMMARY_COLUMNS: &str = "task,method,init,eta,eta_factor,iterations,refine_iters,stop_tol,count,rmse_mean,rmse_stderr,nfe_mean,nfe_total,converged_rate,diverged_rate,iterations_to_tol_mean,source_similarity_mean,target_adherence_mean";
pub const CURVES_COLUMNS: &str = "eta,eta_factor,seed,iteration,residual";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Inversion,
    DirectEdit,
    Sweep,
    Bound,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Inversion => "inversion",
            Task::DirectEdit => "direct-edit",
            Task::Sweep => "sweep",
            Task::Bound => "bound",
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            Task::Inversion => vec![Method::FlowOpt, Method::NaiveOde, Method::FixedPoint],
            Task::DirectEdit | Task::Sweep => vec![Method::FlowOpt],
            Task::Bound => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "flowopt")]
    FlowOpt,
    NaiveOde,
    FixedPoint,
    JacobianGd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FlowOpt => "flowopt",
            Method::NaiveOde => "naive-ode",
            Method::FixedPoint => "fixed-point",
            Method::JacobianGd => "jacobian-gd",
        }
    }
}

/// How the optimizer's starting state is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Naive inversion of the target, charged one chain pass.
    NaiveOde,
    /// Standard Gaussian draw from the row's init stream; free.
    Random,
}

impl Init {
    pub fn as_str(self) -> &'static str {
        match self {
            Init::NaiveOde => "naive-ode",
            Init::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Condition tag the targets are generated under.
    pub source: String,
    /// Edit condition; direct editing only.
    pub target: Option<String>,
    pub methods: Vec<Method>,
    /// Absolute step sizes.
    pub etas: Vec<f64>,
    /// Step sizes as multiples of the estimated bound.
    pub eta_factors: Vec<f64>,
    /// Optimization iteration counts `N`.
    pub iterations: Vec<usize>,
    pub init: Init,
    pub seeds: Vec<u64>,
    pub refine_iters: Vec<usize>,
    pub jacobian_eta: Option<f64>,
    /// Retained dimension of the lossy codec; inversion only.
    pub codec_dim: Option<usize>,
    /// Residual norm counted as converged.
    pub tolerance: f64,
    /// Also record iterations-to-tolerance from naive and random starts.
    pub compare_init: bool,
}

impl ExperimentConfig {
    pub fn validate(&self, sc: &Scenario) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be nonempty"));
        }
        sc.condition(&self.source)?;
        for &eta in self.etas.iter().chain(&self.eta_factors) {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid(format!("step sizes must be positive, got {eta}")));
            }
        }
        if self.refine_iters.contains(&0) {
            return Err(Error::invalid("refine_iters must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.task == Task::Bound {
            return Ok(());
        }
        if self.iterations.is_empty() {
            return Err(Error::invalid("iterations must be nonempty"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods must be nonempty"));
        }
        let needs_eta = self.methods.contains(&Method::FlowOpt) || self.compare_init;
        if needs_eta && self.etas.is_empty() && self.eta_factors.is_empty() {
            return Err(Error::invalid("flowopt needs etas or eta_factors"));
        }
        let euler = matches!(sc.solver, Solver::Euler(_));
        for m in &self.methods {
            match m {
                Method::NaiveOde | Method::FixedPoint if !euler => {
                    return Err(Error::invalid(format!("{} needs an Euler grid", m.as_str())));
                }
                Method::JacobianGd => {
                    if !self.jacobian_eta.is_some_and(|e| e > 0.0 && e.is_finite()) {
                        return Err(Error::invalid("jacobian-gd needs a positive jacobian_eta"));
                    }
                    if sc.dim > crate::baselines::JACOBIAN_MAX_DIM {
                        return Err(Error::invalid("jacobian-gd is limited to d <= 8"));
                    }
                }
                _ => {}
            }
        }
        if self.task != Task::Inversion && !self.methods.iter().all(|m| *m == Method::FlowOpt) {
            return Err(Error::invalid(format!("{} only runs flowopt", self.task.as_str())));
        }
        if let Some(k) = self.codec_dim {
            if self.task != Task::Inversion {
                return Err(Error::invalid("codec_dim applies to inversion only"));
            }
            if k == 0 || k >= sc.dim {
                return Err(Error::invalid(format!("codec_dim must be in 1..{}", sc.dim)));
            }
        }
        if self.compare_init && self.task != Task::Inversion {
            return Err(Error::invalid("compare_init applies to inversion only"));
        }
        match (self.task, &self.target) {
            (Task::DirectEdit, None) => return Err(Error::invalid("direct-edit needs a target condition")),
            (Task::DirectEdit, Some(t)) => {
                let src = sc.condition(&self.source)?;
                let tar = sc.condition(t)?;
                if src.tag == tar.tag || src.payload == tar.payload {
                    return Err(Error::invalid("direct-edit needs distinct source and target conditions"));
                }
                if sc.backend.kind != BackendKind::GaussianMixture {
                    return Err(Error::invalid("direct-edit scores adherence with a mixture density"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Final residual below tolerance.
    Converged,
    /// Aborted by the divergence guard or ended above the initial residual.
    Diverged,
    /// Neither.
    Stalled,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::Diverged => "diverged",
            RunStatus::Stalled => "stalled",
        }
    }

    pub fn classify(residuals: &[f64], aborted: bool, tol: f64) -> Self {
        let (Some(&first), Some(&last)) = (residuals.first(), residuals.last()) else {
            return RunStatus::Diverged;
        };
        if aborted || !last.is_finite() || last > first {
            RunStatus::Diverged
        } else if last < tol {
            RunStatus::Converged
        } else {
            RunStatus::Stalled
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    pub init: Option<Init>,
    pub eta: Option<f64>,
    pub eta_factor: Option<f64>,
    /// Optimization iterations `N` (budget index for the baselines).
    pub iterations: usize,
    pub refine_iters: Option<usize>,
    /// Early-stop tolerance when the run was allowed to stop before `iterations`.
    pub stop_tol: Option<f64>,
    /// Grid length the method ran on.
    pub steps: usize,
    pub nfe: u64,
    /// RMSE between the method's final sample and its target.
    pub rmse: f64,
    /// RMSE between the codec roundtrip of the final sample and the pre-codec signal.
    pub rmse_signal: Option<f64>,
    /// RMSE between the codec target and the pre-codec signal.
    pub floor: Option<f64>,
    pub iterations_to_tol: Option<usize>,
    pub source_similarity: Option<f64>,
    pub target_adherence: Option<f64>,
    pub status: RunStatus,
}

impl ResultRow {
    fn base(task: Task, method: Method, seed: u64) -> Self {
        Self {
            task,
            method,
            seed,
            init: None,
            eta: None,
            eta_factor: None,
            iterations: 0,
            refine_iters: None,
            stop_tol: None,
            steps: 0,
            nfe: 0,
            rmse: f64::NAN,
            rmse_signal: None,
            floor: None,
            iterations_to_tol: None,
            source_similarity: None,
            target_adherence: None,
            status: RunStatus::Stalled,
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.task.as_str(),
            self.method.as_str(),
            self.seed,
            self.init.map(Init::as_str).unwrap_or(""),
            opt(self.eta),
            opt(self.eta_factor),
            self.iterations,
            opt(self.refine_iters),
            opt(self.stop_tol),
            self.steps,
            self.nfe,
            self.rmse,
            opt(self.rmse_signal),
            opt(self.floor),
            opt(self.iterations_to_tol),
            opt(self.source_similarity),
            opt(self.target_adherence),
            self.status.as_str(),
        )
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One residual sample of a sweep curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eta: f64,
    pub eta_factor: Option<f64>,
    pub seed: u64,
    pub iteration: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: Task,
    pub rows: Vec<ResultRow>,
    pub curves: Vec<CurvePoint>,
    pub bound: Option<BoundEstimate>,
}

impl ExperimentResult {
    pub fn rows_csv(&self) -> String {
        let mut s = format!("# flowopt-rows schema_version=1\n{ROWS_COLUMNS}\n");
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = format!("# flowopt-curves schema_version=1\n{CURVES_COLUMNS}\n");
        for c in &self.curves {
            let _ = writeln!(s, "{},{},{},{},{}", c.eta, opt(c.eta_factor), c.seed, c.iteration, c.residual);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: Task,
    pub method: Method,
    pub init: Option<Init>,
    pub eta: Option<f64>,
    pub eta_factor: Option<f64>,
    pub iterations: usize,
    pub refine_iters: Option<usize>,
    pub stop_tol: Option<f64>,
    pub count: usize,
    pub rmse_mean: f64,
    pub rmse_stderr: f64,
    pub nfe_mean: f64,
    pub nfe_total: u64,
    pub converged_rate: f64,
    pub diverged_rate: f64,
    pub iterations_to_tol_mean: Option<f64>,
    pub source_similarity_mean: Option<f64>,
    pub target_adherence_mean: Option<f64>,
}

type GroupKey = (Task, Method, Option<Init>, Option<u64>, Option<u64>, usize, Option<usize>, Option<u64>);

fn group_key(r: &ResultRow) -> GroupKey {
    (
        r.task,
        r.method,
        r.init,
        r.eta.map(f64::to_bits),
        r.eta_factor.map(f64::to_bits),
        r.iterations,
        r.refine_iters,
        r.stop_tol.map(f64::to_bits),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and standard error of the mean; the error is 0 for a single value.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, (var / xs.len() as f64).sqrt())
}

fn mean_of_some(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Groups rows by method, init, step size, `N` and refinement count, in order
/// of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to summarize"));
    }
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: HashMap<GroupKey, Vec<&ResultRow>> = HashMap::new();
    for r in rows {
        let key = group_key(r);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    Ok(order
        .iter()
        .map(|key| {
            let g = &groups[key];
            let first = g[0];
            let n = g.len() as f64;
            let rmse: Vec<f64> = g.iter().map(|r| r.rmse).collect();
            let (rmse_mean, rmse_stderr) = mean_stderr(&rmse);
            let nfe_total: u64 = g.iter().map(|r| r.nfe).sum();
            let rate = |s: RunStatus| g.iter().filter(|r| r.status == s).count() as f64 / n;
            SummaryRow {
                task: first.task,
                method: first.method,
                init: first.init,
                eta: first.eta,
                eta_factor: first.eta_factor,
                iterations: first.iterations,
                refine_iters: first.refine_iters,
                stop_tol: first.stop_tol,
                count: g.len(),
                rmse_mean,
                rmse_stderr,
                nfe_mean: nfe_total as f64 / n,
                nfe_total,
                converged_rate: rate(RunStatus::Converged),
                diverged_rate: rate(RunStatus::Diverged),
                iterations_to_tol_mean: mean_of_some(g.iter().map(|r| r.iterations_to_tol.map(|v| v as f64))),
                source_similarity_mean: mean_of_some(g.iter().map(|r| r.source_similarity)),
                target_adherence_mean: mean_of_some(g.iter().map(|r| r.target_adherence)),
            }
        })
        .collect())
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut s = format!("# flowopt-summary schema_version=1\n{SUMMARY_COLUMNS}\n");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.task.as_str(),
            r.method.as_str(),
            r.init.map(Init::as_str).unwrap_or(""),
            opt(r.eta),
            opt(r.eta_factor),
            r.iterations,
            opt(r.refine_iters),
            opt(r.stop_tol),
            r.count,
            r.rmse_mean,
            r.rmse_stderr,
            r.nfe_mean,
            r.nfe_total,
            r.converged_rate,
            r.diverged_rate,
            opt(r.iterations_to_tol_mean),
            opt(r.source_similarity_mean),
            opt(r.target_adherence_mean),
        );
    }
    s
}

/// Writes every artifact of `result` under `dir` and returns the paths.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    if !result.rows.is_empty() {
        put("rows.csv", result.rows_csv().as_bytes())?;
        let summary = summarize(&result.rows)?;
        put("summary.csv", summary_csv(&summary).as_bytes())?;
        put("summary.json", &json_bytes(&summary)?)?;
    }
    if !result.curves.is_empty() {
        put("curves.csv", result.curves_csv().as_bytes())?;
    }
    if let Some(b) = &result.bound {
        put("alpha.csv", b.alpha_csv().as_bytes())?;
        put("bound.json", &json_bytes(b)?)?;
    }
    Ok(written)
}

/// Runs the scenario's `[experiment]` table.
pub fn run_experiment(sc: &Scenario, exec: Exec) -> Result<ExperimentResult> {
    let cfg = sc
        .experiment
        .as_ref()
        .ok_or_else(|| Error::Config("scenario has no [experiment] table".into()))?;
    run_with(sc, cfg, exec)
}

pub fn run_with(sc: &Scenario, cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    cfg.validate(sc)?;
    match cfg.task {
        Task::Inversion => run_inversion_experiment(sc, cfg, exec),
        Task::DirectEdit => run_editing_experiment(sc, cfg, exec),
        Task::Sweep => run_step_size_sweep(sc, cfg, exec),
        Task::Bound => Ok(ExperimentResult {
            task: Task::Bound,
            rows: Vec::new(),
            curves: Vec::new(),
            bound: Some(scenario_bound(sc, exec)?),
        }),
    }
}

/// Bound estimate over the scenario's `[bound]` conditions.
pub fn scenario_bound(sc: &Scenario, exec: Exec) -> Result<BoundEstimate> {
    let flow = sc.flow(&sc.bound_conditions[0])?;
    let cfg = BoundConfig { exec, ..sc.bound.clone() };
    estimate_bound_mc_over(&flow, &sc.bound_condition_list()?, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EtaChoice {
    pub eta: f64,
    pub factor: Option<f64>,
}

/// Absolute step sizes followed by bound multiples; the bound is estimated
/// for `flow` only when factors are requested. The bound limits the whole
/// update coefficient, so on DDIM chains the multiples are divided by the
/// chain's delta scale.
pub(crate) fn resolve_etas(
    flow: &BlackBoxFlow,
    cfg: &ExperimentConfig,
    bound_cfg: &BoundConfig,
    exec: Exec,
) -> Result<(Vec<EtaChoice>, Option<BoundEstimate>)> {
    let mut out: Vec<EtaChoice> = cfg.etas.iter().map(|&eta| EtaChoice { eta, factor: None }).collect();
    if cfg.eta_factors.is_empty() {
        return Ok((out, None));
    }
    let est = estimate_bound_mc(flow, &BoundConfig { exec, ..bound_cfg.clone() })?;
    out.extend(cfg.eta_factors.iter().map(|&f| EtaChoice {
        eta: f * est.bound / flow.delta_scale(),
        factor: Some(f),
    }));
    Ok((out, Some(est)))
}

pub(crate) fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> State {
    State::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Root-mean-square coordinate error.
pub fn rmse(a: &State, b: &State) -> f64 {
    (a - b).norm() / (a.len() as f64).sqrt()
}

/// Standard Gaussian starting state from `seed`'s init stream.
pub fn random_init(seed: u64, dim: usize) -> State {
    gaussian(&mut row_rng(seed, STREAM_INIT), dim)
}

/// Starting state for a row; naive starts are charged to `flow`'s counter.
pub(crate) fn initial_state(flow: &BlackBoxFlow, init: Init, y: &State, seed: u64) -> Result<State> {
    match init {
        Init::NaiveOde => flow.invert_naive(y),
        Init::Random => Ok(random_init(seed, flow.dim())),
    }
}

/// Result of `n` optimizer iterations plus the final sampling pass.
#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub iterate: State,
    pub output: State,
    pub residuals: Vec<f64>,
    pub aborted: bool,
}

/// `n = 0` is a single sampling pass from `z0`. Divergence is folded into the
/// outcome rather than returned as an error.
pub(crate) fn optimize(
    flow: &BlackBoxFlow,
    y: &State,
    eta: f64,
    n: usize,
    z0: &State,
    stop_tol: Option<f64>,
) -> Result<Outcome> {
    if n == 0 {
        let output = flow.eval(z0)?;
        return Ok(Outcome {
            iterate: z0.clone(),
            residuals: vec![(&output - y).norm()],
            output,
            aborted: false,
        });
    }
    let mut cfg = OptConfig::new(eta, n)?.with_delta_scale(flow.delta_scale())?;
    cfg.stop_tol = stop_tol;
    let (trace, aborted): (OptTrace, bool) = match flowopt_run(flow, y, &cfg, z0) {
        Ok(t) => (t, false),
        Err(Error::Divergence { trace, .. }) => (*trace, true),
        Err(e) => return Err(e),
    };
    Ok(Outcome {
        iterate: trace.final_iterate().cloned().unwrap_or_else(|| z0.clone()),
        output: trace.final_output().cloned().unwrap_or_else(|| y * f64::NAN),
        residuals: trace.residual_norms,
        aborted,
    })
}

/// Runs `job` once per seed, fanned out over `exec`, and concatenates the
/// per-seed outputs in seed order.
pub(crate) fn per_seed<T, F>(seeds: &[u64], exec: Exec, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<Vec<T>> + Sync + Send,
{
    let parts = crate::par::map_indexed(seeds.len(), exec, |i| job(seeds[i]));
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rmse: f64, seed: u64) -> ResultRow {
        ResultRow {
            rmse,
            nfe: 40,
            ..ResultRow::base(Task::Inversion, Method::FlowOpt, seed)
        }
    }

    #[test]
    fn single_row_summary_is_identity() {
        let s = summarize(&[row(0.25, 1)]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].rmse_mean, 0.25);
        assert_eq!(s[0].rmse_stderr, 0.0);
        assert_eq!(s[0].nfe_total, 40);
        assert_eq!(s[0].count, 1);
    }

    #[test]
    fn equal_rmse_has_zero_stderr() {
        let s = summarize(&[row(0.5, 1), row(0.5, 2)]).unwrap();
        assert_eq!(s[0].rmse_stderr, 0.0);
        assert_eq!(s[0].nfe_mean, 40.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn groups_keep_first_appearance_order() {
        let mut a = row(1.0, 0);
        a.iterations = 5;
        let b = row(2.0, 0);
        let s = summarize(&[a.clone(), b, a]).unwrap();
        assert_eq!(s.iter().map(|r| r.iterations).collect::<Vec<_>>(), vec![5, 0]);
        assert_eq!(s[0].count, 2);
    }

    #[test]
    fn classification() {
        assert_eq!(RunStatus::classify(&[1.0, 1e-9], false, 1e-6), RunStatus::Converged);
        assert_eq!(RunStatus::classify(&[1.0, 2.0], false, 1e-6), RunStatus::Diverged);
        assert_eq!(RunStatus::classify(&[1.0, 1e-9], true, 1e-6), RunStatus::Diverged);
        assert_eq!(RunStatus::classify(&[1.0, 0.5], false, 1e-6), RunStatus::Stalled);
    }

    #[test]
    fn csv_has_stable_columns() {
        let res = ExperimentResult {
            task: Task::Inversion,
            rows: vec![row(0.5, 3)],
            curves: Vec::new(),
            bound: None,
        };
        let csv = res.rows_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], ROWS_COLUMNS);
        assert_eq!(lines[2].split(',').count(), ROWS_COLUMNS.split(',').count());
        assert!(lines[2].starts_with("inversion,flowopt,3,"));
    }
}

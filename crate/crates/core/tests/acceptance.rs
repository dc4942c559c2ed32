//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use flowopt::config::{self, Scenario};
use flowopt::experiments::{self, random_init, Method, RunStatus};
use flowopt::{
    affine_bound_exact, ddim_delta, estimate_bound_mc, flowopt_general, flowopt_run, jacobian_gd,
    stopgrad_equivalence_check, BlackBoxFlow, BoundConfig, DdimSchedule, Error, Exec, JacobianGDConfig, LossSpec,
    OptConfig, OptTrace, State,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const AFFINE: &str = include_str!("../../../configs/affine-sweep.toml");
const MIXTURE: &str = include_str!("../../../configs/inversion.toml");
const EDIT: &str = include_str!("../../../configs/edit.toml");
const DDIM: &str = include_str!("../../../configs/ddim.toml");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("affine bound tightness", c1_affine_bound),
        ("contraction end to end", c2_end_to_end),
        ("fixed-point uniqueness", c3_uniqueness),
        ("finite-difference oracle equivalence", c4_oracle),
        ("ddim coefficient identity", c5_ddim),
        ("stop-grad equivalence", c6_stopgrad),
        ("flow correctness", c7_flow_moments),
        ("nfe accounting", c8_nfe),
        ("general-loss reduction", c9_general_loss),
        ("inversion ordering at matched budget", c10_ordering),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = check();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn scenario(text: &str) -> Result<Scenario, String> {
    config::parse(text).map_err(|e| e.to_string())
}

fn flow_of(sc: &Scenario) -> Result<BlackBoxFlow, String> {
    sc.flow(sc.default_tag()).map_err(|e| e.to_string())
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {:.2}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn c1_affine_bound() -> Outcome {
    let start = Instant::now();
    let sc = scenario(AFFINE)?;
    let flow = flow_of(&sc)?;
    let m = flow.linear_part().ok_or("no linear part")?;
    let asym = (&m - m.transpose()).amax();
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if asym > 1e-12 || min_eig <= 0.0 || sc.dim != 8 {
        return Err(format!("chain matrix not symmetric PD at d=8 (asym {asym:e}, min eig {min_eig})"));
    }
    let exact = affine_bound_exact(&m).map_err(s)?;
    let cfg = BoundConfig {
        num_realizations: 10_000,
        ..sc.bound.clone()
    };
    let est = estimate_bound_mc(&flow, &cfg).map_err(s)?;
    within(Duration::from_secs(10), start)?;
    let rel = est.bound / exact - 1.0;
    if !(-1e-12..=0.05).contains(&rel) {
        return Err(format!("estimate {} vs exact {exact}: {:.3}% above", est.bound, 100.0 * rel));
    }
    Ok(format!("estimate {:.6}, exact {exact:.6}, {:.3}% above", est.bound, 100.0 * rel))
}

/// Runs FlowOpt from the naive start; divergence returns the partial trace.
fn run_from_naive(flow: &BlackBoxFlow, y: &State, cfg: &OptConfig) -> Result<(OptTrace, bool), String> {
    let z0 = flow.invert_naive(y).map_err(s)?;
    match flowopt_run(flow, y, cfg, &z0) {
        Ok(t) => Ok((t, false)),
        Err(Error::Divergence { trace, .. }) => Ok((*trace, true)),
        Err(e) => Err(e.to_string()),
    }
}

fn c2_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut worst_iters = 0;
    let mut details = Vec::new();
    for (name, text) in [("affine", AFFINE), ("mixture", MIXTURE)] {
        let sc = scenario(text)?;
        let flow = flow_of(&sc)?;
        let est = estimate_bound_mc(&flow, &sc.bound).map_err(s)?;
        let cfg = OptConfig::new(0.9 * est.bound, 500)
            .and_then(|c| c.with_stop_tol(1e-6))
            .map_err(s)?;
        for seed in 0..20u64 {
            let y = flow.eval(&random_init(10_000 + seed, sc.dim)).map_err(s)?;
            let (trace, aborted) = run_from_naive(&flow, &y, &cfg)?;
            let r = trace.final_residual().unwrap_or(f64::INFINITY);
            if aborted || r.is_nan() || r >= 1e-6 {
                return Err(format!("{name} seed {seed}: residual {r:e} after {} iterations", trace.iterations_run()));
            }
            worst_iters = worst_iters.max(trace.iterations_run());
        }
        details.push(format!("{name} bound {:.4}", est.bound));
        if name == "affine" {
            let cfg = OptConfig::new(5.0 * est.bound, 500).map_err(s)?;
            for seed in 0..20u64 {
                let y = flow.eval(&random_init(10_000 + seed, sc.dim)).map_err(s)?;
                let (trace, aborted) = run_from_naive(&flow, &y, &cfg)?;
                let status = RunStatus::classify(&trace.residual_norms, aborted, 1e-6);
                if status != RunStatus::Diverged {
                    return Err(format!("5x bound, seed {seed}: classified {}", status.as_str()));
                }
            }
        }
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "{}; 40 runs converged within {worst_iters} iterations, 20 runs at 5x bound diverged",
        details.join(", ")
    ))
}

fn c3_uniqueness() -> Outcome {
    let sc = scenario(MIXTURE)?;
    let flow = flow_of(&sc)?;
    let est = estimate_bound_mc(&flow, &sc.bound).map_err(s)?;
    let cfg = OptConfig::new(0.9 * est.bound, 2000)
        .and_then(|c| c.with_stop_tol(1e-12))
        .map_err(s)?;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let y = flow.eval(&random_init(20_000 + seed, sc.dim)).map_err(s)?;
        let a = flowopt_run(&flow, &y, &cfg, &random_init(30_000 + seed, sc.dim)).map_err(s)?;
        let b = flowopt_run(&flow, &y, &cfg, &random_init(40_000 + seed, sc.dim)).map_err(s)?;
        let gap = (a.final_iterate().unwrap() - b.final_iterate().unwrap()).amax();
        worst = worst.max(gap);
    }
    if worst <= 1e-6 {
        Ok(format!("max gap between random starts {worst:.2e} over 20 seeds"))
    } else {
        Err(format!("random starts end {worst:e} apart"))
    }
}

fn c4_oracle() -> Outcome {
    let mut details = Vec::new();
    let affine4 = {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, 0.2, 0.6, 1.0])) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let rows: Vec<String> = (0..4)
            .map(|i| format!("[{}]", (0..4).map(|j| format!("{:e}", a[(i, j)])).collect::<Vec<_>>().join(", ")))
            .collect();
        format!(
            "schema_version = 1\ndim = 4\n[backend]\nkind = \"affine\"\n[schedule]\nsteps = 10\n[[conditions]]\ntag = \"a\"\n[conditions.affine]\na = [{}]\nb = [0.1, -0.2, 0.3, 0.0]\n",
            rows.join(", ")
        )
    };
    for (name, text) in [("affine d=4", affine4.as_str()), ("mixture d=2", MIXTURE)] {
        let sc = scenario(text)?;
        let flow = flow_of(&sc)?;
        let d = sc.dim;
        let t = flow.num_steps() as u64;
        let est = estimate_bound_mc(&flow, &sc.bound).map_err(s)?;
        let mut worst: f64 = 0.0;
        let mut ratio: f64 = 0.0;
        for seed in 0..5u64 {
            let y = flow.eval(&random_init(50_000 + seed, d)).map_err(s)?;
            let z0 = flow.invert_naive(&y).map_err(s)?;
            let fo_cfg = OptConfig::new(0.9 * est.bound, 2000)
                .and_then(|c| c.with_stop_tol(1e-11))
                .map_err(s)?;
            let fo = flowopt_run(&flow, &y, &fo_cfg, &z0).map_err(s)?;
            let jg_cfg = JacobianGDConfig {
                eta: 0.3 * est.bound * est.bound,
                max_iters: 5000,
                fd_step: 1.0 / 65536.0,
                stop_tol: Some(1e-9),
            };
            let jg = jacobian_gd(&flow, &y, &jg_cfg, &z0).map_err(s)?;
            let fo_iters = fo.iterations_run() as u64;
            let jg_iters = jg.iterations_run() as u64;
            if fo_iters == 0 || jg_iters == 0 {
                return Err(format!("{name}: start was already a fixed point"));
            }
            if fo.nfe_total != t * (fo_iters + 1) || jg.nfe_total != t * (jg_iters + 1) + 2 * d as u64 * t * jg_iters {
                return Err(format!("{name}: unexpected evaluation counts"));
            }
            let fo_per = (fo.nfe_total - t) as f64 / fo_iters as f64;
            let jg_per = (jg.nfe_total - t) as f64 / jg_iters as f64;
            ratio = ratio.max(fo_per / jg_per);
            let gap = (fo.final_iterate().unwrap() - jg.final_iterate().unwrap()).amax();
            worst = worst.max(gap);
        }
        if worst > 1e-4 {
            return Err(format!("{name}: fixed points differ by {worst:e}"));
        }
        if ratio > 1.0 / (2.0 * d as f64) {
            return Err(format!("{name}: per-iteration cost ratio {ratio} above 1/(2d)"));
        }
        details.push(format!("{name} gap {worst:.1e}, cost ratio {ratio:.3}"));
    }
    Ok(details.join("; "))
}

fn c5_ddim() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let steps = rng.random_range(1..=200);
        let target: f64 = rng.random_range(0.01..1.0);
        let mut cuts: Vec<f64> = (0..steps).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = cuts.iter().sum();
        cuts.iter_mut().for_each(|c| *c *= target.ln() / total);
        let mut a = vec![1.0];
        let mut log = 0.0;
        for c in cuts {
            log += c;
            a.push(log.exp());
        }
        let sched = DdimSchedule::new(a).map_err(s)?;
        let delta = ddim_delta(&sched).map_err(s)?;
        let alpha_t = *sched.alpha_bar().last().unwrap();
        let closed = 1.0 / alpha_t.sqrt();
        worst = worst.max((sched.delta_product() - closed).abs()).max((delta - closed).abs());
    }
    if worst > 1e-12 {
        return Err(format!("product and closed form differ by {worst:e}"));
    }

    // With delta = 1 the scaled update is the plain update, bit for bit.
    let sc = scenario(DDIM)?;
    let flat = DdimSchedule::new(vec![1.0; 6]).map_err(s)?;
    let one = ddim_delta(&flat).map_err(s)?;
    if one != 1.0 {
        return Err(format!("flat schedule gives delta {one}"));
    }
    let flow = BlackBoxFlow::ddim(sc.backend, flat, sc.condition("src").map_err(s)?.clone()).map_err(s)?;
    let euler = flow_of(&scenario(MIXTURE)?)?;
    for f in [&flow, &euler] {
        let z = random_init(7, 2);
        let y = random_init(8, 2);
        let eta = 0.37;
        let cfg = OptConfig::new(eta, 1).and_then(|c| c.with_delta_scale(one)).map_err(s)?;
        let trace = flowopt_run(f, &y, &cfg, &z).map_err(s)?;
        let manual = &z - (f.eval(&z).map_err(s)? - &y) * eta;
        if trace.iterates[1] != manual {
            return Err("delta = 1 update differs from the plain update".into());
        }
    }
    Ok(format!("100 random schedules agree within {worst:.1e}; delta = 1 update is the plain update"))
}

fn c6_stopgrad() -> Outcome {
    let mut worst: f64 = 0.0;
    for text in [AFFINE, MIXTURE] {
        let sc = scenario(text)?;
        let flow = flow_of(&sc)?;
        for seed in 0..10u64 {
            let z = random_init(60_000 + seed, sc.dim);
            let y = random_init(70_000 + seed, sc.dim);
            worst = worst.max(stopgrad_equivalence_check(&flow, &z, &y).map_err(s)?);
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max deviation {worst:.2e} on affine and mixture chains"))
    } else {
        Err(format!("deviation {worst:e}"))
    }
}

fn c7_flow_moments() -> Outcome {
    let text = MIXTURE.replace("steps = 10", "steps = 200");
    let sc = scenario(&text)?;
    let flow = flow_of(&sc)?;
    let mix = flow.condition().as_mixture().ok_or("not a mixture")?.clone();
    let n = 10_000;
    let d = sc.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<State> = (0..n)
        .map(|_| {
            let z = State::from_fn(d, |_, _| rng.sample(StandardNormal));
            flow.eval(&z)
        })
        .collect::<flowopt::Result<_>>()
        .map_err(s)?;
    let mu = mix.mean();
    let sigma = mix.covariance();
    let nf = n as f64;
    let mean = samples.iter().fold(State::zeros(d), |acc, x| acc + x) / nf;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let se = (sigma[(i, i)] / nf).sqrt();
        worst = worst.max((mean[i] - mu[i]).abs() / se);
    }
    for i in 0..d {
        for j in i..d {
            let prods: Vec<f64> = samples.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
            let cov = prods.iter().sum::<f64>() / (nf - 1.0);
            let m = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            worst = worst.max((cov - sigma[(i, j)]).abs() / se);
        }
    }
    if worst <= 4.0 {
        Ok(format!("largest moment error {worst:.2} standard errors (T=200, 10^4 samples)"))
    } else {
        Err(format!("moment error {worst:.2} standard errors"))
    }
}

fn c8_nfe() -> Outcome {
    let mut checked = 0;
    for text in [MIXTURE, EDIT, DDIM] {
        let sc = scenario(text)?;
        let exp = sc.experiment.clone().ok_or("no experiment")?;
        let res = experiments::run_with(&sc, &exp, Exec::Parallel).map_err(s)?;
        let t = sc.solver.num_steps() as u64;
        for r in res.rows.iter().filter(|r| r.method == Method::FlowOpt) {
            let want = t * (r.iterations as u64 + 2);
            if r.nfe != want {
                return Err(format!("{:?} N={} used {} evaluations, expected {want}", r.task, r.iterations, r.nfe));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} FlowOpt rows at exactly T(N+2) (inversion, editing, DDIM)"))
}

fn c9_general_loss() -> Outcome {
    let sc = scenario(MIXTURE)?;
    let flow = flow_of(&sc)?;
    for seed in 0..20u64 {
        let y = flow.eval(&random_init(80_000 + seed, sc.dim)).map_err(s)?;
        let z0 = random_init(90_000 + seed, sc.dim);
        let cfg = OptConfig::new(0.5, 30).map_err(s)?;
        let a = flowopt_run(&flow, &y, &cfg, &z0).map_err(s)?;
        let b = flowopt_general(&flow, &y, &cfg, &z0, &LossSpec::SquaredL2).map_err(s)?;
        if a != b {
            return Err(format!("seed {seed}: traces differ"));
        }
    }
    Ok("20 seeds bit-identical".into())
}

fn c10_ordering() -> Outcome {
    let sc = scenario(MIXTURE)?;
    let exp = sc.experiment.clone().ok_or("no experiment")?;
    if exp.seeds.len() < 50 {
        return Err("bundled config has fewer than 50 seeds".into());
    }
    let res = experiments::run_with(&sc, &exp, Exec::Parallel).map_err(s)?;
    let mut lines = Vec::new();
    for &n in exp.iterations.iter().filter(|&&n| n > 0) {
        let mut ok = 0;
        for &seed in &exp.seeds {
            let pick = |m: Method, r: Option<usize>| {
                res.rows
                    .iter()
                    .find(|row| row.seed == seed && row.iterations == n && row.method == m && row.refine_iters == r)
                    .map(|row| (row.rmse, row.nfe))
            };
            let (Some(fo), Some(nv), Some(fp)) =
                (pick(Method::FlowOpt, None), pick(Method::NaiveOde, None), pick(Method::FixedPoint, Some(1)))
            else {
                return Err(format!("missing rows for seed {seed}, N={n}"));
            };
            if fo.1 != nv.1 || nv.1 != fp.1 {
                return Err(format!("budgets differ at N={n}: {} / {} / {}", fo.1, nv.1, fp.1));
            }
            if fo.0 < nv.0 && nv.0 <= fp.0 {
                ok += 1;
            }
        }
        let frac = ok as f64 / exp.seeds.len() as f64;
        if frac < 0.8 {
            return Err(format!("N={n}: ordering holds on {ok}/{} seeds", exp.seeds.len()));
        }
        lines.push(format!("N={n}: {ok}/{}", exp.seeds.len()));
    }
    Ok(format!("FlowOpt < naive <= fixed-point(r=1) on {}", lines.join(", ")))
}

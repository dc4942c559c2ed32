//! Fast built-in checks against closed-form answers.
//!
//! Setting `FLOWOPT_SELFTEST_CORRUPT=ddim` feeds the telescoping check a
//! schedule that does not start at `alpha_bar = 1`, which must make it fail.

use std::path::Path;

use flowopt::config::{self, Scenario};
use flowopt::experiments::{self, random_init, RunStatus, Task};
use flowopt::io::{write_atomic, write_json};
use flowopt::{
    affine_bound_exact, ddim_delta, estimate_bound_mc, flowopt_run, stopgrad_equivalence_check, BoundConfig,
    DdimSchedule, Exec, OptConfig, State,
};

const AFFINE: &str = include_str!("../../../configs/affine-sweep.toml");
const MIXTURE: &str = include_str!("../../../configs/inversion.toml");

pub const CORRUPT_ENV: &str = "FLOWOPT_SELFTEST_CORRUPT";

type Check = fn(Option<&Path>) -> Result<String, String>;

pub fn run(out: Option<&Path>, quiet: bool) -> bool {
    let checks: [(&str, Check); 6] = [
        ("affine-bound-tightness", affine_bound),
        ("ddim-telescoping", ddim_telescoping),
        ("stopgrad-equivalence", stopgrad),
        ("fixed-point-uniqueness", uniqueness),
        ("step-size-sweep", sweep),
        ("nfe-accounting", nfe_accounting),
    ];
    let mut ok = true;
    for (name, check) in checks {
        match check(out) {
            Ok(detail) => {
                if !quiet {
                    println!("PASS {name}: {detail}");
                }
            }
            Err(detail) => {
                ok = false;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    ok
}

fn scenario(text: &str) -> Result<Scenario, String> {
    config::parse(text).map_err(|e| e.to_string())
}

fn affine_bound(out: Option<&Path>) -> Result<String, String> {
    let sc = scenario(AFFINE)?;
    let flow = sc.flow(sc.default_tag()).map_err(|e| e.to_string())?;
    let m = flow.linear_part().ok_or("affine chain has no linear part")?;
    let exact = affine_bound_exact(&m).map_err(|e| e.to_string())?;
    let cfg = BoundConfig {
        num_realizations: 10_000,
        ..sc.bound.clone()
    };
    let est = estimate_bound_mc(&flow, &cfg).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        let dir = dir.join("bound");
        write_atomic(&dir.join("alpha.csv"), est.alpha_csv().as_bytes()).map_err(|e| e.to_string())?;
        write_json(&dir.join("bound.json"), &est).map_err(|e| e.to_string())?;
    }
    let rel = est.bound / exact - 1.0;
    if (-1e-9..=0.05).contains(&rel) {
        Ok(format!("estimate {:.6} vs exact {:.6}", est.bound, exact))
    } else {
        Err(format!("estimate {} not within 5% above exact {}", est.bound, exact))
    }
}

fn ddim_telescoping(_: Option<&Path>) -> Result<String, String> {
    let corrupt = std::env::var(CORRUPT_ENV).is_ok_and(|v| v == "ddim");
    let mut schedules = Vec::new();
    for steps in [1, 5, 20, 50, 200] {
        schedules.push(DdimSchedule::cosine(steps).map_err(|e| e.to_string())?);
    }
    if corrupt {
        schedules.push(DdimSchedule::new_unchecked(vec![0.9, 0.5, 0.1]));
    }
    for s in &schedules {
        let closed = s.delta_closed_form();
        let delta = ddim_delta(s).map_err(|e| format!("{} steps: {e}", s.num_steps()))?;
        if (delta - closed).abs() > 1e-12 * closed.max(1.0) {
            return Err(format!("delta {delta} vs {closed}"));
        }
    }
    Ok(format!("{} schedules", schedules.len()))
}

fn stopgrad(_: Option<&Path>) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for text in [AFFINE, MIXTURE] {
        let sc = scenario(text)?;
        let flow = sc.flow(sc.default_tag()).map_err(|e| e.to_string())?;
        for seed in 0..5 {
            let z = random_init(seed, sc.dim);
            let y = random_init(seed + 100, sc.dim);
            let dev = stopgrad_equivalence_check(&flow, &z, &y).map_err(|e| e.to_string())?;
            worst = worst.max(dev);
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("deviation {worst:e} above 1e-6"))
    }
}

fn uniqueness(_: Option<&Path>) -> Result<String, String> {
    let sc = scenario(MIXTURE)?;
    let flow = sc.flow(sc.default_tag()).map_err(|e| e.to_string())?;
    let est = estimate_bound_mc(&flow, &sc.bound).map_err(|e| e.to_string())?;
    let cfg = OptConfig::new(0.9 * est.bound, 500)
        .and_then(|c| c.with_stop_tol(1e-12))
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let y = flow.eval(&random_init(seed, sc.dim)).map_err(|e| e.to_string())?;
        let finals: Vec<State> = [1000 + seed, 2000 + seed]
            .iter()
            .map(|&s| {
                let t = flowopt_run(&flow, &y, &cfg, &random_init(s, sc.dim)).map_err(|e| e.to_string())?;
                t.final_iterate().cloned().ok_or_else(|| "empty trace".to_string())
            })
            .collect::<Result<_, _>>()?;
        worst = worst.max((&finals[0] - &finals[1]).amax());
    }
    if worst <= 1e-6 {
        Ok(format!("max gap {worst:.2e}"))
    } else {
        Err(format!("random starts end {worst:e} apart"))
    }
}

fn sweep(out: Option<&Path>) -> Result<String, String> {
    let sc = scenario(AFFINE)?;
    let mut exp = sc.experiment.clone().ok_or("no experiment")?;
    exp.eta_factors = vec![0.9, 5.0];
    exp.seeds = (0..5).collect();
    let mut sc_small = sc.clone();
    sc_small.bound.num_realizations = 2000;
    let res = experiments::run_with(&sc_small, &exp, Exec::Parallel).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        experiments::write_outputs(&res, &dir.join("sweep")).map_err(|e| e.to_string())?;
    }
    for r in &res.rows {
        let want = if r.eta_factor == Some(0.9) { RunStatus::Converged } else { RunStatus::Diverged };
        if r.status != want {
            return Err(format!(
                "factor {:?} seed {}: {} instead of {}",
                r.eta_factor,
                r.seed,
                r.status.as_str(),
                want.as_str()
            ));
        }
    }
    Ok(format!("{} runs classified", res.rows.len()))
}

fn nfe_accounting(out: Option<&Path>) -> Result<String, String> {
    let sc = scenario(MIXTURE)?;
    let mut exp = sc.experiment.clone().ok_or("no experiment")?;
    exp.seeds = vec![0, 1];
    let mut sc_small = sc.clone();
    sc_small.bound.num_realizations = 200;
    let res = experiments::run_with(&sc_small, &exp, Exec::Parallel).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        experiments::write_outputs(&res, &dir.join(Task::Inversion.as_str())).map_err(|e| e.to_string())?;
    }
    let t = sc.solver.num_steps() as u64;
    let mut checked = 0;
    for r in res.rows.iter().filter(|r| r.method == experiments::Method::FlowOpt) {
        let want = t * (r.iterations as u64 + 2);
        if r.nfe != want {
            return Err(format!("N={} used {} evaluations, expected {want}", r.iterations, r.nfe));
        }
        checked += 1;
    }
    Ok(format!("{checked} rows at T(N+2)"))
}

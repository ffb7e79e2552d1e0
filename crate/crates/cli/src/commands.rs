use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stoknap::cgreedy::{self, GreedyConfig, Marginals};
use stoknap::gen::{self, ObjectiveFamily, RandomParams, SpotParams};
use stoknap::io::{self, SolutionFile};
use stoknap::objective::{self, DEFAULT_ENUM_GUARD};
use stoknap::polytope::{self, ConstraintSystem, FractionalSolution};
use stoknap::rng;
use stoknap::rounding;
use stoknap::verify::{self, VerificationReport, SIGMAS};
use stoknap::Instance;

use crate::{GenArgs, GenFamily, GreedyArgs, ObjectiveArg, SimulateArgs, SolveArgs, Suite, TraceArgs, VerifyArgs};

pub enum Outcome {
    Success,
    VerificationFailed,
}

const TRACE_HEADER: &str = "order,item,slot,status,cause,blocker,size,reward";

/// Approximation guarantee of the full pipeline.
const END_TO_END: f64 = 0.1967;

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_instance(path: &Path) -> Result<Instance> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    io::parse_instance(&text).with_context(|| format!("invalid instance {}", path.display()))
}

fn load_solution(path: &Path, instance: &Instance, system: &ConstraintSystem) -> Result<FractionalSolution> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file = io::parse_solution(&text).with_context(|| format!("invalid solution {}", path.display()))?;
    file.to_solution(instance, system).with_context(|| format!("solution {} does not fit the instance", path.display()))
}

fn greedy_config(args: &GreedyArgs, n_items: usize, seed: u64) -> Result<GreedyConfig> {
    let mut cfg = GreedyConfig::default_for(n_items, seed);
    cfg.stopping_time = args.b;
    cfg.step = match args.delta {
        Some(d) => d,
        None => cgreedy::snap_step(args.b, cgreedy::step_guard(n_items)),
    };
    cfg.marginals = if args.exact_marginals { Marginals::Exact { guard: DEFAULT_ENUM_GUARD } } else { Marginals::Sampled { samples: args.samples } };
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen(a: GenArgs) -> Result<Outcome> {
    let seed = a.seed.seed;
    let inst = match a.family {
        GenFamily::Random => {
            let family = match a.objective {
                ObjectiveArg::Additive => ObjectiveFamily::Additive,
                ObjectiveArg::Concave => ObjectiveFamily::ConcaveOfSum,
                ObjectiveArg::Coverage => ObjectiveFamily::NestedCoverage,
            };
            let p = RandomParams { n_base: a.n_base, budget: a.budget, reward_bound: a.reward_bound, family, deterministic: a.deterministic };
            gen::random_instance(&p, seed)?
        }
        GenFamily::Spot => {
            gen::spot_instance(&SpotParams { jobs: a.jobs, instances: a.instances, budget: a.budget, reward_bound: a.reward_bound }, seed)?
        }
    };
    emit(a.output.as_deref(), &io::write_instance(&inst))?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct KeyValue {
    key: String,
    value: String,
}

fn kv(key: &str, value: impl ToString) -> KeyValue {
    KeyValue { key: key.into(), value: value.to_string() }
}

fn opt_string(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".into(), |v| v.to_string())
}

pub fn solve(a: SolveArgs) -> Result<Outcome> {
    let seed = a.seed.seed;
    let inst = load_instance(&a.instance)?;
    let system = polytope::build_constraints(&inst);
    if let Some(p) = &a.lp_dump {
        fs::write(p, system.to_lp_format(&vec![1.0; inst.n_items()])).with_context(|| format!("writing {}", p.display()))?;
    }
    let cfg = greedy_config(&a.greedy, inst.n_items(), seed)?;
    let out = cgreedy::continuous_greedy(&inst, &system, &cfg)?;
    for n in &out.notices {
        eprintln!("notice: {n}");
    }
    let file = SolutionFile::new(&inst, &out.solution, cfg.stopping_time, cfg.step, seed, a.include_values);
    emit(a.output.as_deref(), &io::write_solution(&file))?;
    if let Some(p) = &a.iterations {
        fs::write(p, io::csv_string(&out.trace)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let opt = verify::optimal_adaptive_dp(&inst, a.dp_guard).ok().map(|d| d.value);
    let q = cgreedy::greedy_quality_report(&inst, &out.solution, opt, a.greedy.samples.max(1) * 10, rng::derive_seed(seed, &[1]))?;
    let rows = vec![
        kv("fbar", q.value.mean),
        kv("fbar_stderr", q.value.stderr),
        kv("fbar_exact", q.exact),
        kv("opt", opt_string(q.opt)),
        kv("ratio", opt_string(q.ratio)),
        kv("flagged_below_0.35", q.flagged),
        kv("iterations", cfg.iterations()),
        kv("delta", cfg.step),
    ];
    let text = io::csv_string(&rows)?;
    match &a.report {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => eprint!("{text}"),
    }
    Ok(Outcome::Success)
}

fn fbar_of(inst: &Instance, solution: &FractionalSolution, samples: u64, seed: u64) -> Result<objective::Estimate> {
    let xbar: Vec<f64> = solution.xbar().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(match objective::multilinear_exact(inst, &xbar, DEFAULT_ENUM_GUARD) {
        Ok(v) => objective::Estimate::exact(v),
        Err(objective::ObjectiveError::GuardExceeded { .. }) => objective::multilinear_estimate(inst, &xbar, samples, seed)?,
        Err(e) => return Err(e.into()),
    })
}

#[derive(Serialize)]
struct SimulateRow {
    instance: String,
    runs: u64,
    favg: f64,
    favg_stderr: f64,
    fbar: f64,
    fbar_stderr: f64,
    threshold: f64,
    verdict: &'static str,
    infeasible_runs: u64,
}

pub fn simulate(a: SimulateArgs) -> Result<Outcome> {
    let seed = a.seed.seed;
    let inst = load_instance(&a.instance)?;
    let system = polytope::build_constraints(&inst);
    let solution = load_solution(&a.solution, &inst, &system)?;
    let stats = verify::simulate(&inst, &solution, a.runs, seed)?;
    let favg = stats.favg();
    let fbar = fbar_of(&inst, &solution, a.runs, rng::derive_seed(seed, &[u64::MAX]))?;
    let combined = (favg.stderr.powi(2) + (fbar.stderr / 2.0).powi(2)).sqrt();
    let threshold = fbar.mean / 2.0 - SIGMAS * combined;
    let row = SimulateRow {
        instance: a.instance.display().to_string(),
        runs: a.runs,
        favg: favg.mean,
        favg_stderr: favg.stderr,
        fbar: fbar.mean,
        fbar_stderr: fbar.stderr,
        threshold,
        verdict: if favg.mean >= threshold && stats.infeasible_runs == 0 { "pass" } else { "fail" },
        infeasible_runs: stats.infeasible_runs,
    };
    emit(a.output.as_deref(), &io::csv_string(&[row])?)?;
    Ok(Outcome::Success)
}

pub fn trace(a: TraceArgs) -> Result<Outcome> {
    let inst = load_instance(&a.instance)?;
    let system = polytope::build_constraints(&inst);
    let solution = load_solution(&a.solution, &inst, &system)?;
    let tr = rounding::run_policy_once(&inst, &solution, a.seed.seed)?;
    let rows = rounding::trace_rows(&tr, &inst);
    let text = if rows.is_empty() { format!("{TRACE_HEADER}\n") } else { io::csv_string(&rows)? };
    emit(a.output.as_deref(), &text)?;
    Ok(Outcome::Success)
}

pub fn verify(a: VerifyArgs) -> Result<Outcome> {
    let seed = a.seed.seed;
    let inst = load_instance(&a.instance)?;
    let name = a.instance.file_stem().map_or_else(|| "instance".into(), |s| s.to_string_lossy().into_owned());
    let system = polytope::build_constraints(&inst);
    let cfg = greedy_config(&a.greedy, inst.n_items(), rng::derive_seed(seed, &[0]))?;
    let solution = match &a.solution {
        Some(p) => load_solution(p, &inst, &system)?,
        None => cgreedy::continuous_greedy(&inst, &system, &cfg)?.solution,
    };
    if a.runs == 0 || a.repetitions == 0 {
        bail!("--runs and --repetitions must be at least 1");
    }
    let mut report = VerificationReport::default();
    let run_seed = rng::derive_seed(seed, &[1]);
    match a.suite {
        Suite::Crs => {
            let stats = verify::simulate(&inst, &solution, a.runs, run_seed)?;
            for d in verify::drop_rates(&stats, &solution, a.min_prob) {
                let prop = if d.low_power { "crs_drop_rate_low_power" } else { "crs_drop_rate" };
                let id = format!("{name}:{}@t{}", inst.item(d.item).id, d.slot);
                report.push(prop, &id, d.rate, d.stderr, 0.5, d.within(0.5), d.sampled);
            }
            report.push("execution_feasibility", &name, stats.infeasible_runs as f64, 0.0, 0.0, stats.infeasible_runs == 0, stats.runs);
        }
        Suite::Mono => {
            let mut support: Vec<usize> = (0..inst.n_items()).filter(|&i| solution.xbar()[i] > 0.0).collect();
            if support.is_empty() {
                support = (0..inst.n_items()).collect();
            }
            for k in 0..a.repetitions {
                let item = support[(rng::keyed_uniform(seed, &[2, k]) * support.len() as f64) as usize % support.len()];
                let (u, v) = verify::sample_profile_pair(&inst, item, rng::derive_seed(seed, &[3, k]));
                let id = format!("{name}:{}#{k}", inst.item(item).id);
                let cu = verify::survival_closed_form(&inst, &solution, &u, item)?;
                let cv = verify::survival_closed_form(&inst, &solution, &v, item)?;
                report.push("closed_form_monotone", &id, cu - cv, 0.0, 0.0, cu >= cv, 1);
                let mu = verify::survival_monte_carlo(&inst, &solution, &u, item, a.runs, rng::derive_seed(seed, &[4, k]))?;
                let mv = verify::survival_monte_carlo(&inst, &solution, &v, item, a.runs, rng::derive_seed(seed, &[5, k]))?;
                let se = (mu.stderr.powi(2) + mv.stderr.powi(2)).sqrt();
                report.push("survival_monotone", &id, mu.mean - mv.mean, se, -SIGMAS * se, mu.mean >= mv.mean - SIGMAS * se, a.runs);
            }
        }
        Suite::Polytope => {
            let scaled = solution.scaled(1.0 / cfg.stopping_time);
            let v = polytope::check_feasibility(&system, scaled.values(), 1e-6)?;
            let worst = v.iter().map(|x| x.slack).fold(0.0, f64::max);
            report.push("scaled_solution_feasible", &name, worst, 0.0, 1e-6, v.is_empty(), v.len() as u64);
            for x in v.iter().take(20) {
                eprintln!("violation: {x}");
            }
        }
        Suite::Multilinear => {
            let mut within = 0;
            for k in 0..a.repetitions {
                let xbar: Vec<f64> = (0..inst.n_items()).map(|i| rng::keyed_uniform(seed, &[6, k, i as u64])).collect();
                let exact = objective::multilinear_exact(&inst, &xbar, DEFAULT_ENUM_GUARD)?;
                let est = objective::multilinear_estimate(&inst, &xbar, a.runs, rng::derive_seed(seed, &[7, k]))?;
                let ok = est.within(exact, SIGMAS);
                within += ok as u64;
                report.info("multilinear_estimate", &format!("{name}#{k}"), est.mean - exact, est.stderr, SIGMAS * est.stderr, a.runs);
            }
            let frac = within as f64 / a.repetitions as f64;
            report.push("multilinear_within_3se", &name, frac, 0.0, 0.99, frac >= 0.99, a.repetitions);
        }
        Suite::DpRatio => {
            let e = verify::end_to_end_ratio(&inst, &cfg, a.runs, run_seed, a.dp_guard)?;
            match e.ratio {
                Some(r) => report.push("favg_over_opt", &name, r, e.ratio_stderr, END_TO_END, r >= END_TO_END - SIGMAS * e.ratio_stderr, a.runs),
                None => report.info("favg_over_opt_undefined", &name, 0.0, 0.0, END_TO_END, a.runs),
            }
            let combined = (e.favg.stderr.powi(2) + (e.fbar.stderr / 2.0).powi(2)).sqrt();
            let half = e.fbar.mean / 2.0 - SIGMAS * combined;
            report.push("favg_vs_half_fbar", &name, e.favg.mean, e.favg.stderr, half, e.favg.mean >= half, a.runs);
            if e.opt > 0.0 {
                report.info("fbar_over_opt", &name, e.fbar.mean / e.opt, e.fbar.stderr / e.opt, cgreedy::QUALITY_FLAG, a.runs);
            }
            report.push("execution_feasibility", &name, e.infeasible_runs as f64, 0.0, 0.0, e.infeasible_runs == 0, a.runs);
        }
    }
    emit(a.output.as_deref(), &io::csv_string(&report.rows)?)?;
    Ok(if report.passed() { Outcome::Success } else { Outcome::VerificationFailed })
}

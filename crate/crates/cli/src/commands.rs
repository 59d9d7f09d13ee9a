use std::fs;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use trafspread::channel::ChannelModel;
use trafspread::mdp::{
    check_gain_reference, check_transition_probabilities, extract_switching_curves_within, solve, theorem_one_check,
    verify_delta_monotonicity, CostModel, MdpProblem, MdpSolution, SolveOptions,
};
use trafspread::scheduler::{SchedulerPolicy, ServiceRateTable, TableOptions};
use trafspread::sim::{default_truncation, dispatch_problem, measure_tradeoff, run};
use trafspread::ScenarioConfig;

use crate::output::Outputs;
use crate::{Common, Failure};

fn load_config(a: &Common) -> Result<ScenarioConfig, Failure> {
    let path = a
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(w) = a.weight {
        cfg.costs.weight = w;
        cfg.costs.weights = None;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trunc {
        cfg.truncation = Some(t);
    }
    if let Some(k) = a.states {
        cfg.channel.num_states = k;
    }
    if let Some(d) = a.dispatcher {
        cfg.dispatcher = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn truncation(cfg: &ScenarioConfig) -> u32 {
    cfg.truncation.unwrap_or_else(|| default_truncation(cfg.num_users()))
}

fn solve_opts(cfg: &ScenarioConfig) -> SolveOptions {
    SolveOptions {
        execution: cfg.execution,
        ..SolveOptions::default()
    }
}

fn two_user(cfg: &ScenarioConfig, command: &str) -> Result<(), Failure> {
    if cfg.num_users() != 2 {
        return Err(Failure::Config(format!(
            "`{command}` needs a two-user scenario, the config has {} users",
            cfg.num_users()
        )));
    }
    Ok(())
}

fn curve_rows(sol: &MdpSolution, prefix: &str) -> Result<Vec<String>, Failure> {
    let curves = extract_switching_curves_within(sol, sol.truncation() - 1)?;
    Ok(curves
        .columns
        .iter()
        .map(|c| format!("{prefix}{},{},{}", c.q1, c.q2a, c.q2b))
        .collect())
}

#[derive(Serialize)]
struct SolveSummary {
    gain: f64,
    gain_per_second: f64,
    iterations: usize,
    residual_span: f64,
    truncation: u32,
    uniformization_rate: f64,
    weight: f64,
    rerouting_cells: usize,
    contiguous_columns: bool,
}

pub fn solve_policy(a: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = load_config(a)?;
    two_user(&cfg, "solve")?;
    let t = truncation(&cfg);
    let problem = dispatch_problem(&cfg, t)?;
    let sol = solve(&problem, &solve_opts(&cfg))?;
    let mut out = Outputs::create(&a.out, "solve", a.config.as_deref(), Some(cfg.seed), started)?;
    let mut grid = Vec::with_capacity(((t + 1) * (t + 1)) as usize);
    for q1 in 0..=t {
        for q2 in 0..=t {
            grid.push(format!("{q1},{q2},{}", sol.action(&[q1, q2]).label()));
        }
    }
    out.csv("policy.csv", "trafspread.policy/1", "q1,q2,action", &grid)?;
    out.csv("curves.csv", "trafspread.switching/1", "q1,q2a,q2b", &curve_rows(&sol, "")?)?;
    let curves = extract_switching_curves_within(&sol, t - 1)?;
    let summary = SolveSummary {
        gain: sol.gain,
        gain_per_second: sol.gain_per_second(),
        iterations: sol.iterations,
        residual_span: sol.residual_span,
        truncation: t,
        uniformization_rate: sol.uniformization_rate,
        weight: cfg.costs.weight,
        rerouting_cells: curves.rerouting_cells(),
        contiguous_columns: curves.all_contiguous(),
    };
    println!(
        "J* = {:.6} after {} iterations (span {:.2e}), {} rerouting cells",
        summary.gain, summary.iterations, summary.residual_span, summary.rerouting_cells
    );
    out.json("summary.json", &summary)?;
    out.finish()
}

pub fn curves(a: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = load_config(a)?;
    two_user(&cfg, "curves")?;
    let t = truncation(&cfg);
    let weights = a.weights.clone().unwrap_or_else(|| vec![cfg.costs.weight]);
    let mut rows = Vec::new();
    for w in sorted(weights)? {
        let mut c = cfg.clone();
        c.costs.weight = w;
        c.costs.weights = None;
        let sol = solve(&dispatch_problem(&c, t)?, &solve_opts(&c))?;
        rows.extend(curve_rows(&sol, &format!("{w},"))?);
    }
    let mut out = Outputs::create(&a.out, "curves", a.config.as_deref(), Some(cfg.seed), started)?;
    out.csv("curves.csv", "trafspread.curves/1", "w,q1,q2a,q2b", &rows)?;
    out.finish()
}

fn sorted(mut weights: Vec<f64>) -> Result<Vec<f64>, Failure> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Failure::Config("weights must be non-negative numbers".into()));
    }
    weights.sort_by(f64::total_cmp);
    Ok(weights)
}

pub fn simulate(a: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = load_config(a)?;
    let report = run(&cfg)?;
    println!(
        "{}: delay {:.4} ± {:.4} s, rerouting power {:.5} ± {:.5} W, {} batches",
        report.dispatcher.label(),
        report.mean_delay_s,
        report.delay_half_width_s,
        report.rerouting_power_w,
        report.power_half_width_w,
        report.batches
    );
    if !report.target_met {
        eprintln!(
            "warning: precision target not met after {} batches (max_batches)",
            report.batches
        );
    }
    let mut out = Outputs::create(&a.out, "simulate", a.config.as_deref(), Some(cfg.seed), started)?;
    out.json_lines("metrics.jsonl", &[report])?;
    out.finish()
}

pub fn sweep(a: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = load_config(a)?;
    let weights = match (&a.weights, a.weight) {
        (Some(w), _) => w.clone(),
        (None, Some(w)) => vec![w],
        (None, None) => return Err(Failure::Config("`sweep` needs --weights".into())),
    };
    let rows: Vec<String> = measure_tradeoff(&cfg, &sorted(weights)?)?
        .iter()
        .map(|(w, r)| {
            format!(
                "{w},{},{},{},{}",
                r.mean_delay_s, r.delay_half_width_s, r.rerouting_power_w, r.power_half_width_w
            )
        })
        .collect();
    let mut out = Outputs::create(&a.out, "sweep", a.config.as_deref(), Some(cfg.seed), started)?;
    out.csv("sweep.csv", "trafspread.sweep/1", "w,delay_s,delay_hw,power_W,power_hw", &rows)?;
    out.finish()
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    status: &'static str,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    checks: Vec<Check>,
}

/// Two-user on/off channels under LCQ, the setting of the monotonicity lemma.
fn builtin_problem(weight: f64, t: u32) -> Result<MdpProblem, Failure> {
    let models: Vec<ChannelModel> = (0..2)
        .map(|_| ChannelModel::on_off(1.0, 0.6, 2.0))
        .collect::<Result<_, _>>()?;
    let table = ServiceRateTable::build(
        &SchedulerPolicy::lcq(),
        &models,
        &TableOptions {
            truncation: t,
            ..TableOptions::default()
        },
    )?;
    Ok(MdpProblem::new(vec![0.3, 0.3], table, CostModel::uniform(2, 0.0, 1.0, weight)?, t)?)
}

fn add(checks: &mut Vec<Check>, name: &'static str, ok: bool, detail: String) {
    checks.push(Check {
        name,
        status: if ok { "pass" } else { "fail" },
        detail,
    });
}

fn symmetric(m: &[Vec<f64>]) -> bool {
    (0..m.len()).all(|i| (0..m.len()).all(|j| m[i][j] == m[j][i]))
}

pub fn verify(a: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let (mut problem, seed, opts) = match &a.config {
        Some(_) => {
            let cfg = load_config(a)?;
            (dispatch_problem(&cfg, truncation(&cfg))?, cfg.seed, solve_opts(&cfg))
        }
        None => (
            builtin_problem(a.weight.unwrap_or(2.0), a.trunc.unwrap_or(30))?,
            a.seed.unwrap_or(1),
            SolveOptions::default(),
        ),
    };
    if a.corrupt_rate {
        let n = problem.num_users();
        let mut table = problem.rate_table().clone();
        table.set_rate(&vec![1; n], 0, -0.5);
        problem = MdpProblem::new(
            problem.arrival_rates().to_vec(),
            table,
            problem.costs().clone(),
            problem.truncation(),
        )?;
    }
    let mut checks = Vec::new();

    let probs = check_transition_probabilities(&problem, None);
    add(
        &mut checks,
        "transition-probabilities",
        probs.passed(),
        format!(
            "max |Σp − 1| = {:.2e}, min p = {:.3e} over {} actions",
            probs.max_sum_error, probs.min_probability, probs.actions_checked
        ),
    );

    match solve(&problem, &opts) {
        Err(e) => add(&mut checks, "solve", false, e.to_string()),
        Ok(sol) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t1 = theorem_one_check(&problem, &sol.relative_values, 50, 100, &mut rng)?;
            add(
                &mut checks,
                "deterministic-actions",
                t1.passed(),
                format!(
                    "min stochastic − deterministic backup {:.3e} over {} states x {} actions",
                    t1.min_margin, t1.states_checked, t1.actions_per_state
                ),
            );
            let gr = check_gain_reference(&problem, &opts)?;
            add(
                &mut checks,
                "gain-reference-invariance",
                gr.difference < 1e-6,
                format!("J* = {:.9}, shift {:.2e}", gr.gain_origin, gr.difference),
            );
            let c = problem.costs();
            let lambda = problem.arrival_rates();
            let precondition = if problem.num_users() != 2 {
                Some("needs two users")
            } else if !symmetric(&c.weights) {
                Some("weight matrix is asymmetric")
            } else if !symmetric(&c.phi) || !symmetric(&c.eta) {
                Some("cost matrices are asymmetric")
            } else if lambda[0] != lambda[1] {
                Some("arrival rates differ")
            } else {
                None
            };
            match precondition {
                Some(why) => {
                    checks.push(Check {
                        name: "delta-monotonicity",
                        status: "skipped",
                        detail: format!("precondition unmet: {why}"),
                    });
                }
                None => {
                    let d = verify_delta_monotonicity(&problem, &opts, false)?;
                    checks.push(Check {
                        name: "delta-monotonicity",
                        status: if d.monotone_interior() { "pass" } else { "fail" },
                        detail: format!(
                            "{} stages, {} interior violations (max {:.2e}), {} near the edge (max {:.2e})",
                            d.iterations,
                            d.interior_violations,
                            d.max_interior_violation,
                            d.boundary_violations,
                            d.max_boundary_violation
                        ),
                    });
                }
            }
            if problem.num_users() == 2 {
                let curves = extract_switching_curves_within(&sol, problem.truncation() - 1)?;
                checks.push(Check {
                    name: "switching-curves",
                    status: if curves.all_contiguous() { "pass" } else { "fail" },
                    detail: format!(
                        "{} non-contiguous columns of {}",
                        curves.non_contiguous_columns().len(),
                        curves.columns.len()
                    ),
                });
            }
        }
    }

    let passed = checks.iter().all(|c| c.status != "fail");
    for c in &checks {
        println!("{:<7} {}: {}", c.status.to_uppercase(), c.name, c.detail);
    }
    let mut out = Outputs::create(&a.out, "verify", a.config.as_deref(), Some(seed), started)?;
    out.json("verify.json", &VerifyReport { passed, checks })?;
    out.finish()?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification("one or more structural checks failed".into()))
    }
}

//! One line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use condflow::control::{hjb_residual, ControlProblem, OperatorMarks, ValueCandidate};
use condflow::copies::{
    check_conditional_independence, check_conditional_law_equality, copy_seed,
    spawn_copies_with_seeds, terminal_coordinate, CopyEnsemble, CopyTestConfig,
};
use condflow::cylindrical::{
    derivative_consistency, ftc_check, project_functional, CylindricalFunctional,
    MeasureFunctional, Monomial, OuterFunction, Profile, TestFunction,
};
use condflow::flow::{empirical_conditional_law, EmpiricalConditionalLaw};
use condflow::grid::TimeGrid;
use condflow::ito::{convergence_study, ConvergenceConfig, CrossBracket, LedgerSetup, PoolMode};
use condflow::model::{Coefficient, JumpDiffusionModel};
use condflow::seed::{self, tag};
use condflow::stats::Summary;
use condflow_cli::harness::{run, RunManifest, Subcommand};
use condflow_cli::scenario::{parse_scenario, parse_scenario_str, Scenario};

use common::{csv_files, scenario_path, BackwardPde};

type Outcome = Result<(bool, String), String>;

fn load(name: &str) -> Result<Scenario, String> {
    parse_scenario(&scenario_path(name)).map_err(|e| e.to_string())
}

fn run_in(sub: Subcommand, s: &Scenario) -> Result<(RunManifest, tempfile::TempDir), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = run(sub, s, dir.path()).map_err(|e| e.to_string())?;
    Ok((m, dir))
}

fn check<'a>(
    m: &'a RunManifest,
    name: &str,
) -> Result<&'a condflow_cli::harness::CheckResult, String> {
    m.checks
        .iter()
        .find(|c| c.name == name)
        .ok_or(format!("no check {name}"))
}

fn column(dir: &Path, file: &str, col: &str) -> Result<Vec<f64>, String> {
    let mut rd = csv::Reader::from_path(dir.join(file)).map_err(|e| e.to_string())?;
    let idx = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .position(|h| h == col)
        .ok_or(format!("no column {col}"))?;
    rd.records()
        .map(|r| {
            r.map_err(|e| e.to_string())?[idx]
                .parse::<f64>()
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn uniform(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

fn main_identity_diffusion() -> Outcome {
    let s = load("diffusion_common.toml")?;
    let start = Instant::now();
    let (m, _dir) = run_in(Subcommand::VerifyIto, &s)?;
    let took = start.elapsed();
    let c = check(&m, "mean_abs_residual")?;
    let fast = took <= Duration::from_secs(300);
    Ok((
        c.pass && fast && m.pass,
        format!(
            "mean|res| {:.4e} <= {:.4e} at K=400 M=1000 over 200 seeds",
            c.value, c.threshold
        ),
    ))
}

fn main_identity_jumps() -> Outcome {
    let s = load("jump_common.toml")?;
    let (m, dir) = run_in(Subcommand::VerifyIto, &s)?;
    let c = check(&m, "mean_abs_residual")?;
    let finite = ["jump_first", "jump_second", "jump_y"]
        .iter()
        .map(|t| column(dir.path(), "ledgers.csv", t))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .all(|col| col.iter().all(|v| v.is_finite()));
    let jf = Summary::of(&column(dir.path(), "ledgers.csv", "jump_first")?);

    // same jump stream, every coefficient zero
    let text =
        std::fs::read_to_string(scenario_path("jump_common.toml")).map_err(|e| e.to_string())?;
    let zero_text = text
        .replace("values = [1.0]", "values = [0.0]")
        .replace("matrix = [1.0]", "matrix = [0.0]")
        .replace("steps = [400]", "steps = [50]")
        .replace("m = [1000]", "m = [50]")
        .replace("n_common = 200", "n_common = 20");
    let mut zero = parse_scenario_str(&zero_text).map_err(|e| e.to_string())?;
    zero.experiment
        .ito
        .as_mut()
        .expect("ito section")
        .pilot
        .seeds = 4;
    let (zm, zdir) = run_in(Subcommand::VerifyIto, &zero)?;
    let zres = column(zdir.path(), "ledgers.csv", "residual")?;
    let exact_zero = zres.iter().all(|r| *r == 0.0) && zm.pass;
    Ok((
        c.pass && finite && exact_zero,
        format!(
            "mean|res| {:.4e} <= {:.4e}; jump sub-terms finite={finite} (mean jump_first {:.3e}); zero-coefficient residuals all 0: {exact_zero}",
            c.value, c.threshold, jf.mean
        ),
    ))
}

fn convergence_orders() -> Outcome {
    let s = load("diffusion_common.toml")?;
    let setup = LedgerSetup::new(
        s.functional().map_err(|e| e.to_string())?,
        s.model.build().map_err(|e| e.to_string())?,
        1,
    );
    let cfg = ConvergenceConfig {
        ks: vec![25, 50, 100, 200],
        ms: vec![25, 100, 400],
        dt_particles: 1000,
        m_steps: 400,
        seeds: 200,
        master_seed: 77,
        dt_pool: PoolMode::Shared,
        m_pool: PoolMode::Disjoint,
        m_cross: CrossBracket::Realized,
    };
    let r = convergence_study(&setup, 1.0, &cfg).map_err(|e| e.to_string())?;
    let ok_dt = (0.35..=1.1).contains(&r.slope_dt);
    let ok_m = (0.35..=0.65).contains(&r.slope_m);
    Ok((
        ok_dt && ok_m,
        format!(
            "slope vs dt {:.3} in [0.35, 1.1]; slope vs M^-1/2 {:.3} in [0.35, 0.65]",
            r.slope_dt, r.slope_m
        ),
    ))
}

fn conditional_integral_counterexample() -> Outcome {
    let s = load("counterexample.toml")?;
    let (m, _dir) = run_in(Subcommand::VerifyCondprocess, &s)?;
    let naive = check(&m, "naive_slope_abs_t")?;
    let rel = check(&m, "conditional_relative_residual")?;
    let id = check(&m, "integral_mean_residual")?;
    Ok((
        m.pass,
        format!(
            "naive |t| {:.1} > 5; copy form relative residual {:.4} < 0.05; copy identity |mean| {:.3e} <= {:.3e}",
            naive.value, rel.value, id.value, id.threshold
        ),
    ))
}

fn conditional_brackets() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["bracket_shared", "bracket_idio", "bracket_mixed"] {
        let (m, _dir) = run_in(
            Subcommand::VerifyCondprocess,
            &load(&format!("{name}.toml"))?,
        )?;
        let pair = check(&m, "bracket_pair")?;
        let base = check(&m, "bracket_base")?;
        pass &= pair.pass && base.pass;
        parts.push(format!(
            "{name}: pair {:.2e}<={:.2e} base {:.2e}<={:.2e}",
            pair.value, pair.threshold, base.value, base.threshold
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn copy_construction() -> Outcome {
    let s = load("copies.toml")?;
    let model = s.model.build().map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(s.grid.horizon, s.grid.steps[0]).map_err(|e| e.to_string())?;
    let reps = s.experiment.copies.as_ref().map_or(50, |c| c.replicates) as u64;
    let seeds = condflow::ito::common_seeds(s.seeds.master, s.seeds.n_common);
    if seeds.len() < 200 {
        return Err("need at least 200 common seeds".into());
    }
    let build = |mode: u8| -> Result<Vec<Vec<CopyEnsemble>>, String> {
        seeds
            .iter()
            .map(|&cs| {
                (0..reps)
                    .map(|r| {
                        let base = seed::derive(cs, tag::PARTICLE, r);
                        let (s1, s2) = (copy_seed(base, 1), copy_seed(base, 2));
                        let second = if mode == 2 { s1 } else { s2 };
                        let mut e =
                            spawn_copies_with_seeds(&model, &grid, cs, base, &[s1, second], None)?;
                        if mode == 1 {
                            // second copy driven by a foreign common noise
                            let other = seed::derive(cs, tag::COMMON_SEED, 1);
                            e.copies[1] =
                                spawn_copies_with_seeds(&model, &grid, other, base, &[s2], None)?
                                    .copies
                                    .remove(0);
                        }
                        Ok(e)
                    })
                    .collect::<condflow::Result<Vec<_>>>()
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let cfg = CopyTestConfig::default();
    let stat = terminal_coordinate(0);
    let honest = build(0)?;
    let law = check_conditional_law_equality(&honest, &stat, &cfg).map_err(|e| e.to_string())?;
    let ind =
        check_conditional_independence(&honest, &stat, &stat, &cfg).map_err(|e| e.to_string())?;
    let corrupt =
        check_conditional_law_equality(&build(1)?, &stat, &cfg).map_err(|e| e.to_string())?;
    let same = check_conditional_independence(&build(2)?, &stat, &stat, &cfg)
        .map_err(|e| e.to_string())?;
    let pass = law.pass && ind.pass && !corrupt.pass && !same.pass;
    Ok((
        pass,
        format!(
            "KS rejection fraction {:.3} (band upper {:.3}) over {} seeds; independence t {:.2}; corrupted copy rejected {:.2}; same-seed t {:.1}",
            law.statistic,
            law.threshold,
            law.n_common,
            ind.statistic,
            corrupt.statistic,
            same.statistic
        ),
    ))
}

fn cylindrical_calculus() -> Outcome {
    let cubic_mixed = CylindricalFunctional::new(
        OuterFunction::polynomial(
            3,
            vec![
                Monomial {
                    coef: 1.0,
                    powers: vec![3, 0, 0],
                },
                Monomial {
                    coef: -0.5,
                    powers: vec![1, 2, 1],
                },
                Monomial {
                    coef: 0.3,
                    powers: vec![0, 1, 2],
                },
            ],
        ),
        vec![
            TestFunction::scalar(Profile::Tanh),
            TestFunction::scalar(Profile::Sin),
        ],
        1,
        1,
    )
    .map_err(|e| e.to_string())?;
    let ridge2 = CylindricalFunctional::new(
        OuterFunction::polynomial(
            2,
            vec![Monomial {
                coef: 1.0,
                powers: vec![2, 1],
            }],
        ),
        vec![
            TestFunction::Ridge {
                profile: Profile::Gaussian,
                weights: vec![0.7, -0.4],
                shift: 0.2,
                amp: 1.5,
            },
            TestFunction::Bump {
                centre: vec![0.5, -0.5],
                width: 1.3,
                amp: 0.8,
            },
        ],
        2,
        0,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut pass = true;
    for (i, phi) in [&cubic_mixed, &ridge2].into_iter().enumerate() {
        let r = derivative_consistency(phi, 100, 2.0, 31 + i as u64).map_err(|e| e.to_string())?;
        worst = worst.max(r.worst);
        pass &= r.pass && r.worst < 1e-5;
    }

    let cube = CylindricalFunctional::new(
        OuterFunction::power(1, 0, 3, 1.0),
        vec![TestFunction::scalar(Profile::Tanh)],
        1,
        0,
    )
    .map_err(|e| e.to_string())?;
    let mut draws = 0u64;
    let mut cloud = |n: usize| {
        let pts = (0..n)
            .map(|_| {
                draws += 1;
                uniform(seed::derive(5, tag::PROBES, draws)) * 6.0 - 3.0
            })
            .collect();
        EmpiricalConditionalLaw::from_points(1, pts).expect("cloud")
    };
    let mut ftc = 0.0f64;
    let mut sym = true;
    for _ in 0..20 {
        let (mu, nu) = (cloud(10), cloud(10));
        ftc = ftc.max(
            ftc_check(&cube, &mu, &nu, &[], 32)
                .map_err(|e| e.to_string())?
                .first,
        );
        for p in 0..10 {
            let (x1, x2) = ([nu.states[p]], [mu.states[p]]);
            let a = cubic_mixed
                .second_linear_derivative(&mu, &[0.3], &x1, &x2)
                .map_err(|e| e.to_string())?;
            let b = cubic_mixed
                .second_linear_derivative(&mu, &[0.3], &x2, &x1)
                .map_err(|e| e.to_string())?;
            sym &= a.to_bits() == b.to_bits();
        }
    }
    pass &= ftc < 1e-8 && sym;

    let target = Arc::new(cube.clone());
    let probe = cloud(25);
    let probe =
        EmpiricalConditionalLaw::from_points(1, probe.states.iter().map(|x| x / 3.0).collect())
            .expect("probe");
    let exact = target.value(&probe, &[]).map_err(|e| e.to_string())?;
    let err = |n: usize| -> Result<f64, String> {
        let p = project_functional(target.clone(), n).map_err(|e| e.to_string())?;
        Ok((p.value(&probe, &[]).map_err(|e| e.to_string())? - exact).abs())
    };
    let errs = [err(1)?, err(2)?, err(4)?, err(8)?];
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[1] / w[0]).collect();
    let refine = ratios.iter().all(|r| *r <= 0.6);
    let part = condflow::cylindrical::HatPartition::new(3).map_err(|e| e.to_string())?;
    let anchored =
        EmpiricalConditionalLaw::from_points(1, part.anchors()[5..15].to_vec()).expect("anchors");
    let fixed = {
        let p = project_functional(target.clone(), 3).map_err(|e| e.to_string())?;
        let pushed = part.push_forward(&anchored).map_err(|e| e.to_string())?;
        pushed.points == anchored.states
            && (p.value(&anchored, &[]).map_err(|e| e.to_string())?
                - target.value(&anchored, &[]).map_err(|e| e.to_string())?)
            .abs()
                < 1e-14
    };
    pass &= refine && fixed;
    Ok((
        pass,
        format!(
            "worst derivative rel. error {worst:.2e} < 1e-5 (200 probes); FTC residual {ftc:.2e} < 1e-8; symmetry exact: {sym}; T_n fixed point: {fixed}; refinement ratios {:.3?} <= 0.6",
            ratios
        ),
    ))
}

fn singleton_hjb() -> Result<(bool, String), String> {
    // dX = -0.5 X dt + 0.6 dV + 0.8 dW0, f = cos, g = tanh
    let model = JumpDiffusionModel::new(1, 1, 1)
        .with_drift(
            Coefficient::affine(1, 1, vec![0.0], vec![vec![-0.5]], vec![0.0])
                .map_err(|e| e.to_string())?,
        )
        .with_sigma_v(Coefficient::constant(1, 1, vec![0.6]).map_err(|e| e.to_string())?)
        .with_sigma_w(Coefficient::constant(1, 1, vec![0.8]).map_err(|e| e.to_string())?);
    let problem = ControlProblem::new(
        model.clone(),
        vec![0.0],
        Arc::new(|x, _| x[0].cos()),
        Arc::new(|x| x[0].tanh()),
        10.0,
        1.0,
    )
    .map_err(|e| e.to_string())?;
    let solve = |nx: usize, nt: usize| {
        Arc::new(BackwardPde::solve(
            &|x| -0.5 * x,
            1.0,
            &|x| x.cos(),
            &|x| x.tanh(),
            8.0,
            nx,
            nt,
            1.0,
        ))
    };
    let candidate = |pde: Arc<BackwardPde>| {
        let p = pde.clone();
        ValueCandidate::separable(
            1,
            Arc::new(move |t| p.at(t)),
            Arc::new(move |t, x| pde.du_dt(t, x[0])),
        )
    };
    let (coarse, fine) = (candidate(solve(800, 400)), candidate(solve(1600, 800)));
    let grid = TimeGrid::new(1.0, 20).map_err(|e| e.to_string())?;
    let marks = OperatorMarks::none();
    let mut fine_res = Vec::new();
    let mut gaps = Vec::new();
    for cs in condflow::ito::common_seeds(123, 10) {
        let flow =
            empirical_conditional_law(&model, &grid, cs, 1000, seed::derive(cs, tag::PARTICLE, 0))
                .map_err(|e| e.to_string())?;
        for k in [5, 10, 15] {
            let (t, mu) = (grid.t(k), flow.law_at(k));
            let rc = hjb_residual(&problem, &coarse, t, &mu, &marks).map_err(|e| e.to_string())?;
            let rf = hjb_residual(&problem, &fine, t, &mu, &marks).map_err(|e| e.to_string())?;
            fine_res.push(rf.residual);
            gaps.push((rc.residual - rf.residual).abs());
        }
    }
    let s = Summary::of(&fine_res);
    let oracle_tol = gaps.iter().copied().fold(0.0, f64::max);
    let tol = 3.0 * oracle_tol + 3.0 * s.std_error;
    Ok((
        s.mean.abs() <= tol,
        format!(
            "singleton HJB mean residual {:.2e} <= {:.2e} (oracle {:.2e}, se {:.2e})",
            s.mean, tol, oracle_tol, s.std_error
        ),
    ))
}

fn control_application() -> Outcome {
    let (hjb_pass, hjb_msg) = singleton_hjb()?;
    let (m, _dir) = run_in(Subcommand::VerifyControl, &load("control_two_action.toml")?)?;
    let v = check(&m, "greedy_vs_baseline")?;
    let a = check(&m, "actions_match")?;
    let l = check(&m, "controlled_ledger_residual")?;
    Ok((
        hjb_pass && m.pass,
        format!(
            "{hjb_msg}; greedy {:.4} >= baseline-3CI {:.4}; actions identical: {}; controlled ledger {:.3e} <= {:.3e}",
            v.value, v.threshold, a.pass, l.value, l.threshold
        ),
    ))
}

fn reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_condflow");
    let small = std::fs::read_to_string(scenario_path("jump_common.toml"))
        .map_err(|e| e.to_string())?
        .replace("steps = [400]", "steps = [40]")
        .replace("m = [1000]", "m = [60]")
        .replace("n_common = 200", "n_common = 12")
        .replace(
            "cross = \"coefficient\"",
            "cross = \"coefficient\"\npilot = { ks = [10, 20], ms = [10, 20], seeds = 4 }",
        );
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ito = work.path().join("ito.toml");
    std::fs::write(&ito, small).map_err(|e| e.to_string())?;
    let runs = [
        ("verify-ito", ito),
        ("verify-condprocess", scenario_path("bracket_mixed.toml")),
        ("verify-copies", scenario_path("copies.toml")),
    ];
    let mut files = 0;
    for (sub, path) in &runs {
        let mut outputs = Vec::new();
        for threads in ["1", "4", "4"] {
            let out = work
                .path()
                .join(format!("{sub}-{threads}-{}", outputs.len()));
            let status = Command::new(bin)
                .args([
                    sub,
                    "--scenario",
                    path.to_str().expect("utf-8 path"),
                    "--out",
                    out.to_str().expect("utf-8 path"),
                ])
                .args(["--threads", threads])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Ok((false, format!("{sub} exited with {}", status.status)));
            }
            outputs.push(csv_files(&out));
        }
        if outputs.iter().any(|o| o != &outputs[0]) {
            return Ok((false, format!("{sub} outputs differ between runs")));
        }
        files += outputs[0].len();
    }
    Ok((
        true,
        format!(
            "{files} CSV files byte-identical across 1/4/4-thread runs of three verify subcommands"
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        (
            "main identity, diffusion with common noise",
            main_identity_diffusion,
        ),
        ("main identity, compound Poisson jumps", main_identity_jumps),
        ("convergence orders", convergence_orders),
        (
            "conditional integral and the naive guess",
            conditional_integral_counterexample,
        ),
        ("conditional bracket identities", conditional_brackets),
        ("copy construction", copy_construction),
        ("cylindrical calculus", cylindrical_calculus),
        ("control verification", control_application),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Subcommand pipelines, the run manifest and plot-data emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use condflow::control::{verification_check, VerificationConfig};
use condflow::copies::{
    check_conditional_independence, check_conditional_law_equality, spawn_copies,
    terminal_coordinate, CopyEnsemble, CopyTestConfig,
};
use condflow::flow::{
    empirical_conditional_law, verify_conditional_bracket, verify_conditional_integral,
    CommonOracle,
};
use condflow::grid::TimeGrid;
use condflow::ito::{
    common_seeds, pilot_budget, run_ledgers, ItoLedger, LedgerSetup, LedgerSummary, LedgerTerms,
};
use condflow::path::fmt_num;
use condflow::seed::{self, tag};
use condflow::stats::{self, Summary};
use condflow::{Error, Result};

use crate::scenario::{OracleSpec, Scenario};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Simulate,
    VerifyCopies,
    VerifyCondprocess,
    VerifyIto,
    VerifyControl,
    Convergence,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::VerifyCopies => "verify-copies",
            Self::VerifyCondprocess => "verify-condprocess",
            Self::VerifyIto => "verify-ito",
            Self::VerifyControl => "verify-control",
            Self::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    fn flag(name: &str, pass: bool) -> Self {
        Self {
            name: name.into(),
            value: pass as u8 as f64,
            threshold: 1.0,
            pass,
        }
    }
}

/// Mean `|residual|` at one `(K, M)` level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub k: usize,
    pub m: usize,
    pub dt: f64,
    pub mean_abs_residual: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub term: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlotData {
    pub levels: Vec<LevelRow>,
    pub terms: Vec<TermRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub subcommand: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub resolved: serde_json::Value,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
    pub complete: bool,
    pub plot: PlotData,
}

struct Run<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
    checks: Vec<CheckResult>,
    plot: PlotData,
}

impl Run<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.flush().map_err(|e| io_err(&self.dir.join(name), e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn context(section: &str, e: Error) -> Error {
    match e {
        Error::Scenario { .. } => e,
        other => Error::scenario(section, other.to_string()),
    }
}

fn finest(s: &Scenario) -> Result<(TimeGrid, usize)> {
    let k = *s.grid.steps.iter().max().expect("validated nonempty");
    let m = *s.particles.m.iter().max().expect("validated nonempty");
    Ok((TimeGrid::new(s.grid.horizon, k)?, m))
}

fn ledger_setup(s: &Scenario, m: usize) -> Result<LedgerSetup> {
    let mut setup = LedgerSetup::new(s.functional()?, s.model.build()?, m);
    if let Some(y) = &s.y_model {
        setup = setup.with_y(y.build()?);
    }
    Ok(setup)
}

/// Run `sub` on `scenario`, writing every output and finally `manifest.json`
/// into `out`.
pub fn run(sub: Subcommand, scenario: &Scenario, out: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut r = Run {
        dir: out,
        outputs: Vec::new(),
        checks: Vec::new(),
        plot: PlotData::default(),
    };
    let section = match sub {
        Subcommand::Simulate => "model",
        Subcommand::VerifyCopies => "experiment.copies",
        Subcommand::VerifyCondprocess => "experiment.condprocess",
        Subcommand::VerifyIto => "experiment.ito",
        Subcommand::VerifyControl => "experiment.control",
        Subcommand::Convergence => "experiment.convergence",
    };
    let outcome = match sub {
        Subcommand::Simulate => simulate(scenario, &mut r),
        Subcommand::VerifyCopies => verify_copies(scenario, &mut r),
        Subcommand::VerifyCondprocess => verify_condprocess(scenario, &mut r),
        Subcommand::VerifyIto => verify_ito(scenario, &mut r),
        Subcommand::VerifyControl => verify_control(scenario, &mut r),
        Subcommand::Convergence => convergence(scenario, &mut r),
    };
    outcome.map_err(|e| context(section, e))?;

    let mut manifest = RunManifest {
        scenario_name: scenario.name.clone(),
        scenario_hash: scenario.hash()?,
        subcommand: sub.name().into(),
        tool_version: TOOL_VERSION.into(),
        master_seed: scenario.seeds.master,
        resolved: serde_json::to_value(scenario)?,
        outputs: r.outputs,
        pass: r.checks.iter().all(|c| c.pass),
        checks: r.checks,
        complete: true,
        plot: r.plot,
    };
    let plots = emit_plot_data(&manifest, out)?;
    manifest.outputs.extend(plots);
    for o in &manifest.outputs {
        if !out.join(o).is_file() {
            return Err(Error::InvalidState(format!("output {o} was not written")));
        }
    }
    let path = out.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// `residual_vs_dt.csv`, `residual_vs_m.csv` and `ledger_terms.csv`.
/// Level rows with a zero residual are dropped so that every value can be
/// log-transformed.
pub fn emit_plot_data(manifest: &RunManifest, out: &Path) -> Result<Vec<String>> {
    if !manifest.complete {
        return Err(Error::InvalidState("manifest is incomplete".into()));
    }
    let positive: Vec<&LevelRow> = manifest
        .plot
        .levels
        .iter()
        .filter(|l| l.mean_abs_residual > 0.0)
        .collect();
    let write = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<String> {
        let path = out.join(name);
        let mut wr = csv::Writer::from_writer(File::create(&path).map_err(|e| io_err(&path, e))?);
        wr.write_record(header)?;
        for row in rows {
            wr.write_record(row)?;
        }
        wr.flush().map_err(|e| io_err(&path, e))?;
        Ok(name.to_string())
    };
    let mut by_dt = positive.clone();
    by_dt.sort_by(|a, b| (a.m, b.k).cmp(&(b.m, a.k)));
    let mut by_m = positive;
    by_m.sort_by(|a, b| (a.k, a.m).cmp(&(b.k, b.m)));
    Ok(vec![
        write(
            "residual_vs_dt.csv",
            &["M", "K", "dt", "mean_abs_residual", "ci_low", "ci_high"],
            by_dt
                .iter()
                .map(|l| {
                    vec![
                        l.m.to_string(),
                        l.k.to_string(),
                        fmt_num(l.dt),
                        fmt_num(l.mean_abs_residual),
                        fmt_num(l.ci_low),
                        fmt_num(l.ci_high),
                    ]
                })
                .collect(),
        )?,
        write(
            "residual_vs_m.csv",
            &[
                "K",
                "M",
                "inv_sqrt_m",
                "mean_abs_residual",
                "ci_low",
                "ci_high",
            ],
            by_m.iter()
                .map(|l| {
                    vec![
                        l.k.to_string(),
                        l.m.to_string(),
                        fmt_num(1.0 / (l.m as f64).sqrt()),
                        fmt_num(l.mean_abs_residual),
                        fmt_num(l.ci_low),
                        fmt_num(l.ci_high),
                    ]
                })
                .collect(),
        )?,
        write(
            "ledger_terms.csv",
            &["term", "mean"],
            manifest
                .plot
                .terms
                .iter()
                .map(|t| vec![t.term.clone(), fmt_num(t.mean)])
                .collect(),
        )?,
    ])
}

fn simulate(s: &Scenario, r: &mut Run) -> Result<()> {
    let model = s.model.build()?;
    let (grid, m) = finest(s)?;
    let seeds = common_seeds(s.seeds.master, s.seeds.n_repeats);
    let flows = seeds
        .par_iter()
        .map(|&cs| {
            empirical_conditional_law(&model, &grid, cs, m, seed::derive(cs, tag::PARTICLE, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut finite = true;
    for (i, flow) in flows.iter().enumerate() {
        finite &= flow
            .particles
            .iter()
            .all(|p| p.values.iter().all(|v| v.is_finite()));
        flow.write_csv(r.create(&format!("flow_{i}.csv"))?)?;
        flow.particles[0].write_csv(r.create(&format!("path_{i}.csv"))?)?;
    }
    r.checks.push(CheckResult::flag("finite_paths", finite));
    Ok(())
}

fn verify_copies(s: &Scenario, r: &mut Run) -> Result<()> {
    let spec = s.experiment.copies.clone().unwrap_or_default();
    let model = s.model.build()?;
    let (grid, _) = finest(s)?;
    if spec.coordinate >= model.n {
        return Err(Error::scenario(
            "experiment.copies",
            "coordinate out of range",
        ));
    }
    let seeds = common_seeds(s.seeds.master, s.seeds.n_common);
    let batches = seeds
        .par_iter()
        .map(|&cs| {
            (0..spec.replicates as u64)
                .map(|i| {
                    spawn_copies(
                        &model,
                        &grid,
                        cs,
                        s.particles.n_copies,
                        seed::derive(cs, tag::PARTICLE, i),
                    )
                })
                .collect::<Result<Vec<CopyEnsemble>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = CopyTestConfig {
        ks_alpha: spec.ks_alpha,
        band_level: spec.band_level,
        t_threshold: spec.t_threshold,
        min_common: spec.min_common,
    };
    let stat = terminal_coordinate(spec.coordinate);
    let law = check_conditional_law_equality(&batches, &stat, &cfg)?;
    let indep = check_conditional_independence(&batches, &stat, &stat, &cfg)?;

    let mut wr = csv::Writer::from_writer(r.create("copies.csv")?);
    wr.write_record(["common_seed", "ks_p_value", "covariance"])?;
    for ((cs, p), c) in law.seeds.iter().zip(&law.per_seed).zip(&indep.per_seed) {
        wr.write_record([cs.to_string(), fmt_num(*p), fmt_num(*c)])?;
    }
    wr.flush()
        .map_err(|e| io_err(&r.dir.join("copies.csv"), e))?;

    r.checks.push(CheckResult::at_most(
        "ks_rejection_fraction",
        law.statistic,
        law.threshold,
    ));
    r.checks.last_mut().expect("just pushed").pass = law.pass;
    r.checks.push(CheckResult {
        name: "independence_abs_t".into(),
        value: indep.statistic.abs(),
        threshold: indep.threshold,
        pass: indep.pass,
    });
    Ok(())
}

fn time_weighted_common(index: usize) -> CommonOracle {
    Arc::new(move |c| {
        stats::compensated_sum((0..c.grid.steps()).map(|k| c.grid.t(k) * c.dw_at(k)[index]))
    })
}

fn verify_condprocess(s: &Scenario, r: &mut Run) -> Result<()> {
    let spec = s
        .experiment
        .condprocess
        .clone()
        .ok_or_else(|| Error::scenario("experiment.condprocess", "section missing"))?;
    let model = s.model.build()?;
    let (grid, m) = finest(s)?;
    let seeds = common_seeds(s.seeds.master, s.seeds.n_common);
    let integrand = spec.integrand.build();
    let oracle = match spec.oracle {
        Some(OracleSpec::TimeWeightedCommon { index }) => {
            if index >= model.d_c {
                return Err(Error::scenario(
                    "experiment.condprocess",
                    "oracle index out of range",
                ));
            }
            Some(time_weighted_common(index))
        }
        None => None,
    };
    let rep = verify_conditional_integral(
        &model,
        &grid,
        &integrand,
        spec.coordinate,
        &seeds,
        m,
        spec.t_threshold,
        oracle.as_ref(),
    )?;
    let mut wr = csv::Writer::from_writer(r.create("condprocess.csv")?);
    wr.write_record([
        "common_seed",
        "lhs",
        "rhs",
        "naive",
        "conditional",
        "oracle",
    ])?;
    for i in 0..rep.seeds.len() {
        let o = rep.oracle.as_ref().map_or(String::new(), |o| fmt_num(o[i]));
        wr.write_record([
            rep.seeds[i].to_string(),
            fmt_num(rep.lhs[i]),
            fmt_num(rep.rhs[i]),
            fmt_num(rep.naive[i]),
            fmt_num(rep.conditional[i]),
            o,
        ])?;
    }
    wr.flush()
        .map_err(|e| io_err(&r.dir.join("condprocess.csv"), e))?;
    r.checks.push(CheckResult::at_most(
        "integral_mean_residual",
        rep.identity.mean_residual.abs(),
        rep.identity.threshold,
    ));
    if let (Some(t_min), Some(c)) = (spec.naive_t_min, &rep.naive_vs_oracle) {
        r.checks.push(CheckResult {
            name: "naive_slope_abs_t".into(),
            value: c.slope_t_vs_one.abs(),
            threshold: t_min,
            pass: c.slope_t_vs_one.abs() > t_min,
        });
    }
    if let (Some(max), Some(c)) = (spec.oracle_rel_max, &rep.conditional_vs_oracle) {
        r.checks.push(CheckResult {
            name: "conditional_relative_residual".into(),
            value: c.relative_residual,
            threshold: max,
            pass: c.relative_residual < max,
        });
    }

    if let Some(b) = &spec.bracket {
        let br = verify_conditional_bracket(
            &model,
            &grid,
            &integrand,
            b.x,
            b.y,
            &seeds,
            m,
            spec.t_threshold,
        )?;
        let mut wr = csv::Writer::from_writer(r.create("bracket.csv")?);
        wr.write_record([
            "common_seed",
            "lhs_pair",
            "rhs_pair",
            "lhs_base",
            "rhs_base",
        ])?;
        for i in 0..br.seeds.len() {
            wr.write_record([
                br.seeds[i].to_string(),
                fmt_num(br.lhs_pair[i]),
                fmt_num(br.rhs_pair[i]),
                fmt_num(br.lhs_base[i]),
                fmt_num(br.rhs_base[i]),
            ])?;
        }
        wr.flush()
            .map_err(|e| io_err(&r.dir.join("bracket.csv"), e))?;
        for (name, st) in [
            ("bracket_pair", br.projected_pair),
            ("bracket_base", br.projected_base),
        ] {
            r.checks.push(CheckResult::at_most(
                name,
                st.mean_residual.abs(),
                st.threshold,
            ));
        }
    }
    Ok(())
}

fn write_ledgers(r: &mut Run, name: &str, ledgers: &[ItoLedger]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(r.create(name)?);
    let mut header = vec!["common_seed", "lhs"];
    header.extend_from_slice(LedgerTerms::NAMES);
    header.push("residual");
    wr.write_record(&header)?;
    for l in ledgers {
        let mut row = vec![l.common_seed.to_string(), fmt_num(l.lhs)];
        row.extend(l.terms.values().into_iter().map(fmt_num));
        row.push(fmt_num(l.residual));
        wr.write_record(row)?;
    }
    wr.flush().map_err(|e| io_err(&r.dir.join(name), e))
}

fn verify_ito(s: &Scenario, r: &mut Run) -> Result<()> {
    let spec = s.experiment.ito.clone().unwrap_or_default();
    let (grid, m) = finest(s)?;
    let setup = ledger_setup(s, m)?
        .with_pool(spec.pool)
        .with_cross(spec.cross)
        .with_self_pairs(spec.self_pairs);
    let seeds = common_seeds(s.seeds.master, s.seeds.n_common);
    let ledgers = run_ledgers(&setup, &grid, &seeds)?;
    write_ledgers(r, "ledgers.csv", &ledgers)?;
    if let Some(first) = ledgers.first() {
        first.write_trace_csv(r.create("trace.csv")?)?;
    }
    let summary = LedgerSummary::of(&ledgers);
    r.plot.terms = LedgerTerms::NAMES
        .iter()
        .map(|n| TermRow {
            term: n.to_string(),
            mean: summary.terms[*n].mean,
        })
        .collect();
    r.plot.levels.push(LevelRow {
        k: grid.steps(),
        m,
        dt: grid.dt(),
        mean_abs_residual: summary.abs_residual.mean,
        ci_low: summary.abs_residual.ci_low,
        ci_high: summary.abs_residual.ci_high,
    });

    let budget = pilot_budget(&setup, s.grid.horizon, &spec.pilot.config(s.seeds.master))?;
    r.json("budget.json", &budget)?;
    let finite = ledgers
        .iter()
        .all(|l| l.lhs.is_finite() && l.terms.values().iter().all(|v| v.is_finite()));
    r.checks.push(CheckResult::flag("terms_finite", finite));
    r.checks.push(CheckResult::at_most(
        "mean_abs_residual",
        summary.abs_residual.mean,
        budget.core_threshold(grid.dt(), m),
    ));
    Ok(())
}

fn verify_control(s: &Scenario, r: &mut Run) -> Result<()> {
    let spec = s
        .experiment
        .control
        .clone()
        .ok_or_else(|| Error::scenario("experiment.control", "section missing"))?;
    let problem = Arc::new(s.control_problem(&spec)?);
    let v = spec.value.build(s.model.dim, s.grid.horizon)?;
    let (grid, m) = finest(s)?;
    let cfg = VerificationConfig {
        steps: grid.steps(),
        particles: m,
        seeds: s.seeds.n_common,
        master_seed: s.seeds.master,
        switch_nodes: spec.switch_nodes.clone(),
        mark_budget: spec.mark_budget,
        pilot: spec.pilot.config(s.seeds.master),
    };
    let rep = verification_check(problem, &v, &cfg)?;
    rep.write_terms_csv(r.create("control_terms.csv")?)?;
    let mut wr = csv::Writer::from_writer(r.create("control_ledgers.csv")?);
    wr.write_record(["common_seed", "lhs", "residual", "actions"])?;
    for l in &rep.greedy_ledgers {
        let actions: Vec<String> = l.action_indices.iter().map(|a| a.to_string()).collect();
        wr.write_record([
            l.common_seed.to_string(),
            fmt_num(l.lhs),
            fmt_num(l.residual),
            actions.join(" "),
        ])?;
    }
    wr.flush()
        .map_err(|e| io_err(&r.dir.join("control_ledgers.csv"), e))?;
    r.json("control.json", &rep)?;

    let n = rep.greedy_ledgers.len().max(1) as f64;
    r.plot.terms = condflow::control::ControlledTerms::NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| TermRow {
            term: name.to_string(),
            mean: stats::compensated_sum(rep.greedy_ledgers.iter().map(|l| l.terms.values()[j]))
                / n,
        })
        .collect();
    r.checks.push(CheckResult {
        name: "greedy_vs_baseline".into(),
        value: rep.greedy_value,
        threshold: rep.baseline_best - 3.0 * rep.ci,
        pass: rep.value_pass,
    });
    r.checks
        .push(CheckResult::flag("actions_match", rep.actions_match));
    r.checks.push(CheckResult::at_most(
        "controlled_ledger_residual",
        rep.ito_residual,
        rep.ito_threshold,
    ));
    Ok(())
}

fn convergence(s: &Scenario, r: &mut Run) -> Result<()> {
    let spec = s.experiment.convergence.clone().unwrap_or_default();
    let seeds = common_seeds(s.seeds.master, s.seeds.n_common);
    let base = ledger_setup(s, 1)?
        .with_pool(spec.pool)
        .with_cross(spec.cross);
    let mut ks = s.grid.steps.clone();
    ks.sort_unstable();
    let mut ms = s.particles.m.clone();
    ms.sort_unstable();
    let mut rows = Vec::with_capacity(ks.len() * ms.len());
    for &k in &ks {
        let grid = TimeGrid::new(s.grid.horizon, k)?;
        for &m in &ms {
            let ledgers = run_ledgers(&base.clone().with_particles(m), &grid, &seeds)?;
            let sm = Summary::of(&ledgers.iter().map(|l| l.residual.abs()).collect::<Vec<_>>());
            rows.push(LevelRow {
                k,
                m,
                dt: grid.dt(),
                mean_abs_residual: sm.mean,
                ci_low: sm.ci_low,
                ci_high: sm.ci_high,
            });
        }
    }
    let mut wr = csv::Writer::from_writer(r.create("convergence.csv")?);
    wr.write_record(["K", "M", "dt", "mean_abs_residual", "ci_low", "ci_high"])?;
    for l in &rows {
        wr.write_record([
            l.k.to_string(),
            l.m.to_string(),
            fmt_num(l.dt),
            fmt_num(l.mean_abs_residual),
            fmt_num(l.ci_low),
            fmt_num(l.ci_high),
        ])?;
    }
    wr.flush()
        .map_err(|e| io_err(&r.dir.join("convergence.csv"), e))?;

    let slope = |sel: Vec<&LevelRow>, x: &dyn Fn(&LevelRow) -> f64| -> Result<Option<f64>> {
        if sel.len() < 2 {
            return Ok(None);
        }
        let y: Vec<f64> = sel.iter().map(|l| l.mean_abs_residual).collect();
        if y.iter().all(|v| *v == 0.0) {
            return Ok(Some(0.0));
        }
        Ok(Some(stats::loglog_slope(
            &sel.iter().map(|l| x(l)).collect::<Vec<_>>(),
            &y,
        )?))
    };
    let m_max = *ms.last().expect("nonempty");
    let k_max = *ks.last().expect("nonempty");
    let slope_dt = slope(rows.iter().filter(|l| l.m == m_max).collect(), &|l| l.dt)?;
    // minus the slope against M: 1/2 for a CLT rate
    let slope_m = slope(rows.iter().filter(|l| l.k == k_max).collect(), &|l| {
        l.m as f64
    })?
    .map(|v| if v == 0.0 { 0.0 } else { -v });
    for (name, value, band) in [
        ("slope_dt", slope_dt, spec.slope_dt_band),
        ("slope_m", slope_m, spec.slope_m_band),
    ] {
        if let (Some(v), Some([lo, hi])) = (value, band) {
            r.checks.push(CheckResult {
                name: name.into(),
                value: v,
                threshold: hi,
                pass: (lo..=hi).contains(&v),
            });
        }
    }
    r.plot.levels = rows;
    Ok(())
}

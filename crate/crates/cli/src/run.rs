//! Subcommand implementations and artifact writing.

use crate::config::RunConfig;
use crate::CliError;
use nhim::flows::{estimate_growth, tangent_flow, Block, Direction, FlowOptions};
use nhim::perron::{resolve, spectral_rates, Method};
use nhim::scenarios::{run, run_system, ScenarioError, ScenarioResult, Verdict};
use nhim::system::{builtin, decompose, scenario_names, BaseGraph, LinearizedSystem, ScenarioId, SpectralConstants, SystemError, SystemSpec, RHO_BUMP};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything needed to replay a run, plus its outcome.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: &'a RunConfig,
    pub scenario: &'a str,
    pub params: &'a std::collections::BTreeMap<String, f64>,
    pub verdict: Verdict,
    pub expect_divergence: bool,
    pub divergence_detected: bool,
    pub checks: &'a [nhim::scenarios::Check],
    pub diagnostics: &'a nhim::scenarios::Diagnostics,
    pub files: Vec<String>,
}

fn scenario_error(e: ScenarioError) -> CliError {
    match e {
        ScenarioError::System(
            e @ (SystemError::UnknownScenario(_)
            | SystemError::UnknownParameter { .. }
            | SystemError::BadParameter { .. }
            | SystemError::BadDomain(_)
            | SystemError::Expr(_)),
        ) => CliError::Config(e.to_string()),
        ScenarioError::Invalid(m) => CliError::Config(m),
        e => CliError::Solve(e.to_string()),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Output directory: `NHIM_OUT` beats `--out`, which beats the file.
pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(p) = std::env::var_os("NHIM_OUT").filter(|s| !s.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("nhim-out"))
}

/// Solves the configured system once.
pub fn execute(cfg: &RunConfig) -> Result<ScenarioResult, CliError> {
    let opts = cfg.run_options();
    match cfg.custom_spec()? {
        Some(spec) => run_system(spec, &opts).map_err(scenario_error),
        None => run(cfg.scenario.as_deref().unwrap_or_default(), &cfg.params, &opts).map_err(scenario_error),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Perron => "perron",
        Method::GraphTransform => "graph-transform",
    }
}

/// Summary columns shared by `solve` and `sweep`.
pub const SUMMARY_HEADER: &str = "param,value,sup_h,lip,alpha,k,verdict";

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Reproduced => "reproduced",
        Verdict::DivergedAsExpected => "diverged-as-expected",
        Verdict::Failed => "failed",
    }
}

pub fn summary_row(param: &str, value: f64, r: &ScenarioResult) -> String {
    let g = r.graphs.first();
    let sup = g.map_or(f64::NAN, |g| g.sup_norm());
    let lip = g.map_or(f64::NAN, |g| g.lip_estimate);
    let (alpha, k) = r.diagnostics.holder.first().map_or((f64::NAN, String::new()), |h| (h.alpha, h.order.to_string()));
    format!("{param},{value:.16e},{sup:.16e},{lip:.16e},{alpha:.16e},{k},{}", verdict_name(r.verdict))
}

/// Writes `run.json`, one CSV per graph and a one-row `summary.csv`.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, r: &ScenarioResult) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::new();
    let mut seen = std::collections::BTreeMap::<&str, usize>::new();
    for g in &r.graphs {
        let m = method_name(g.method);
        let n = seen.entry(m).or_default();
        let name = if *n == 0 { format!("graph_{m}.csv") } else { format!("graph_{m}_{n}.csv") };
        *n += 1;
        let path = dir.join(&name);
        std::fs::write(&path, g.to_csv()).map_err(io(&path))?;
        files.push(name);
    }
    let summary = dir.join("summary.csv");
    std::fs::write(&summary, format!("{SUMMARY_HEADER}\n{}\n", summary_row("", f64::NAN, r))).map_err(io(&summary))?;
    files.push("summary.csv".into());
    let manifest = Manifest {
        tool: "nhim",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        scenario: &r.scenario,
        params: &r.params,
        verdict: r.verdict,
        expect_divergence: r.expect_divergence,
        divergence_detected: r.divergence_detected,
        checks: &r.checks,
        diagnostics: &r.diagnostics,
        files,
    };
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&path, text).map_err(io(&path))
}

/// Process exit status for a verdict.
pub fn verdict_code(v: Verdict) -> i32 {
    match v {
        Verdict::Reproduced => 0,
        Verdict::DivergedAsExpected => 2,
        Verdict::Failed => 1,
    }
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<(ScenarioResult, PathBuf), CliError> {
    let r = execute(cfg)?;
    let dir = out_dir(cfg);
    write_artifacts(&dir, cfg, &r)?;
    Ok((r, dir))
}

/// One solve per sweep value in `<out>/<param>=<value>/`, plus `summary.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(Vec<ScenarioResult>, PathBuf), CliError> {
    let sweep = cfg.sweep.clone().ok_or_else(|| CliError::Config("sweep: section missing".into()))?;
    let dir = out_dir(cfg);
    let mut rows = vec![SUMMARY_HEADER.to_string()];
    let mut results = Vec::new();
    for &v in &sweep.values {
        let mut c = cfg.clone();
        c.params.insert(sweep.param.clone(), v);
        c.sweep = None;
        let r = execute(&c)?;
        write_artifacts(&dir.join(format!("{}={v}", sweep.param)), &c, &r)?;
        rows.push(summary_row(&sweep.param, v, &r));
        results.push(r);
    }
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let path = dir.join("summary.csv");
    std::fs::write(&path, rows.join("\n") + "\n").map_err(io(&path))?;
    Ok((results, dir))
}

/// Worst exit status over several verdicts: failure, then expected divergence.
pub fn combined_code(results: &[ScenarioResult]) -> i32 {
    let codes: Vec<i32> = results.iter().map(|r| verdict_code(r.verdict)).collect();
    if codes.contains(&1) {
        1
    } else if codes.contains(&2) {
        2
    } else {
        0
    }
}

/// Measured and declared rates, the certified order and the solver setup.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseReport {
    pub system: String,
    /// `sup` of the backward tangential growth exponent over the samples.
    pub rho_m_hat: f64,
    /// `sup` of the forward normal growth exponent.
    pub rho_y_hat: f64,
    /// `-max(rho_m_hat, bump)`.
    pub rho_x_hat: f64,
    pub max_r_measured: f64,
    pub declared: Option<nhim::system::DeclaredRates>,
    pub max_r: f64,
    pub certified_order: u32,
    pub rho: f64,
    pub t_max: f64,
    pub gap_holds: bool,
    pub samples: usize,
}

fn linearized(cfg: &RunConfig) -> Result<LinearizedSystem, CliError> {
    let spec = match cfg.custom_spec()? {
        Some(s) => s,
        None => {
            let name = cfg.scenario.as_deref().unwrap_or_default();
            let id = ScenarioId::parse(name).map_err(|e| CliError::Config(e.to_string()))?;
            let mut p: std::collections::BTreeMap<String, f64> = id.defaults().iter().map(|(k, v)| (k.to_string(), *v)).collect();
            p.extend(cfg.params.clone());
            builtin(name, &p).map_err(|e| scenario_error(e.into()))?
        }
    };
    decompose(spec, BaseGraph::Zero).map_err(|e| scenario_error(e.into()))
}

/// Growth exponents sampled along tangent flows from `samples` base points
/// over `horizon` time units in each direction. An even sample count on a
/// circle includes the points `0` and `-L/2`.
pub fn diagnose(cfg: &RunConfig, samples: usize, horizon: f64) -> Result<DiagnoseReport, CliError> {
    let lin = linearized(cfg)?;
    let solve_err = |e: String| CliError::Solve(e);
    let opts = FlowOptions { samples: 50, ..FlowOptions::default() };
    // tangential growth is measured on the base graph itself: backward
    // integration of the full system leaves the tube at the normal rate
    let full = lin.spec.clone();
    let base = lin.clone();
    let m = lin.dim_y();
    let on_base = SystemSpec::from_fns(
        "tangential",
        lin.domain().clone(),
        1,
        move |x, _, t| {
            let mut z = vec![x];
            z.extend(base.base_at(x));
            let mut out = vec![0.0; m + 1];
            full.field().eval(t, &z, &mut out);
            out[0]
        },
        |_, y, _, o| o[0] = -y[0],
    );
    let (mut rho_m, mut rho_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for x in lin.domain().uniform_grid(samples) {
        let mut z = vec![x];
        z.extend(lin.base_at(x));
        let back = tangent_flow(&on_base, &[x, 0.0], 0.0, -horizon, 1, opts).map_err(|e| solve_err(e.to_string()))?;
        let g = estimate_growth(&back, Direction::Backward, Block::Tangential).map_err(|e| solve_err(e.to_string()))?;
        rho_m = rho_m.max(-g.rho_hat);
        let fwd = tangent_flow(&lin.spec, &z, 0.0, horizon, 1, opts).map_err(|e| solve_err(e.to_string()))?;
        let g = estimate_growth(&fwd, Direction::Forward, Block::Normal).map_err(|e| solve_err(e.to_string()))?;
        rho_y = rho_y.max(g.rho_hat);
    }
    let measured = SpectralConstants::new(rho_m, rho_y, 1.0, 1.0, 1.0, RHO_BUMP);
    let (rates, declared) = spectral_rates(&lin).map_err(|e| solve_err(e.to_string()))?;
    let res = resolve(&lin, &cfg.perron).map_err(|e| solve_err(e.to_string()))?;
    Ok(DiagnoseReport {
        system: cfg.label(),
        rho_m_hat: rho_m,
        rho_y_hat: rho_y,
        rho_x_hat: -rho_m.max(RHO_BUMP),
        max_r_measured: measured.max_r(),
        declared: declared.then_some(rates),
        max_r: res.gap.max_r,
        certified_order: res.gap.constants.max_certified_order(3),
        rho: res.rho,
        t_max: res.t_max,
        gap_holds: res.gap.holds,
        samples,
    })
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<(DiagnoseReport, PathBuf), CliError> {
    let rep = diagnose(cfg, 64, 5.0)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let path = dir.join("diagnose.json");
    let text = serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok((rep, dir))
}

/// One line per catalog scenario with its defaults.
pub fn list_scenarios() -> String {
    let mut s = String::new();
    for name in scenario_names() {
        let id = ScenarioId::parse(name).expect("catalog names parse");
        let defaults: Vec<String> = id.defaults().iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "{name:<14} {}  [{}]", id.description(), defaults.join(", "));
    }
    s
}

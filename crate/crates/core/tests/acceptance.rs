//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use nhim::flows::{alekseev_residual, fit_growth, tangent_flow, EscapePolicy, FlowOptions};
use nhim::graphtransform::{solve_gt, GtConfig};
use nhim::perron::{invariance_residual, solve, solve_full, InitialIterate, ManifoldGraph, PerronConfig};
use nhim::scenarios::{run, RunOptions, ScenarioResult, Verdict};
use nhim::smoothness::{fd_check, solve_derivatives};
use nhim::system::expr::expr_system;
use nhim::system::{builtin, cohomological_graph, decompose, BaseGraph, DomainX, LinearizedSystem};
use std::collections::BTreeMap;
use std::time::Instant;

type Outcome = Result<(bool, String), String>;

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn lin(name: &str, kv: &[(&str, f64)]) -> Result<LinearizedSystem, String> {
    let spec = builtin(name, &params(kv)).map_err(|e| e.to_string())?;
    decompose(spec, BaseGraph::Zero).map_err(|e| e.to_string())
}

fn sup_diff(a: &ManifoldGraph, b: &ManifoldGraph, keep: impl Fn(f64) -> bool) -> f64 {
    (0..a.len())
        .filter(|&i| keep(a.x_grid[i]))
        .flat_map(|i| a.h(i).iter().zip(b.h(i)).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn check_value(r: &ScenarioResult, name: &str) -> Result<(bool, f64), String> {
    r.check(name).map(|c| (c.pass, c.value)).ok_or_else(|| format!("{} has no `{name}` check", r.scenario))
}

/// Converging scenarios with the grid and solver settings used for them.
struct Case {
    label: &'static str,
    lin: LinearizedSystem,
    cfg: PerronConfig,
    nx: usize,
}

fn cases() -> Result<Vec<Case>, String> {
    let base = PerronConfig::default();
    Ok(vec![
        Case { label: "cohomological", lin: lin("cohomological", &[])?, cfg: base.clone(), nx: 64 },
        Case { label: "cylinder", lin: lin("cylinder", &[("tilt", 0.05), ("drift", 0.2)])?, cfg: base.clone(), nx: 32 },
        Case { label: "opt-smooth", lin: lin("opt-smooth", &[])?, cfg: base.clone(), nx: 64 },
        Case { label: "non-cinfty", lin: lin("non-cinfty", &[])?, cfg: PerronConfig { dt: 0.01, ..base.clone() }, nx: 32 },
        Case {
            label: "breakdown(lambda_y=-2)",
            lin: lin("breakdown", &[("lambda_y", -2.0)])?,
            cfg: base.clone(),
            nx: 64,
        },
        Case {
            label: "collapse(eps=1e-2)",
            lin: lin("collapse", &[("eps", 1e-2)])?,
            cfg: PerronConfig { escape: EscapePolicy::Clamp, ..base.clone() },
            nx: 64,
        },
    ])
}

fn c1_cohomological() -> Outcome {
    let t = Instant::now();
    let l = lin("cohomological", &[])?;
    let cfg = PerronConfig { tol: 1e-8, ..PerronConfig::default() };
    let (g, _) = solve(&l, &cfg, &l.domain().uniform_grid(256)).map_err(|e| e.to_string())?;
    let err = (0..g.len()).map(|i| (g.h(i)[0] - cohomological_graph(1.0, -2.0, 0.1, g.x_grid[i])).abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((err <= 1e-5 && secs < 10.0, format!("sup error {err:.2e} (<= 1e-5), {secs:.1} s (< 10 s)")))
}

fn c2_opt_smooth() -> Outcome {
    let t = Instant::now();
    let opts = RunOptions { methods: vec![nhim::perron::Method::Perron], ..RunOptions::default() };
    let r = run("opt-smooth", &params(&[("eps", 0.05), ("lambda_minus", -1.0), ("lambda_y", -2.5)]), &opts).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (ps, slope) = check_value(&r, "onset_slope")?;
    let (ph, alpha) = check_value(&r, "holder")?;
    Ok((ps && ph && secs < 120.0, format!("onset slope {slope:.4} (2.5 +/- 0.1), holder exponent {alpha:.3} (0.5 +/- 0.1), {secs:.1} s")))
}

fn c3_breakdown() -> Outcome {
    let opts = RunOptions { methods: vec![nhim::perron::Method::Perron], ..RunOptions::default() };
    let bad = run("breakdown", &params(&[("lambda_y", -1.0)]), &opts).map_err(|e| e.to_string())?;
    let good = run("breakdown", &params(&[("lambda_y", -2.0)]), &opts).map_err(|e| e.to_string())?;
    let ok = bad.verdict == Verdict::DivergedAsExpected && good.verdict == Verdict::Reproduced;
    let growth = |r: &ScenarioResult| r.diagnostics.values.get("lip_growth").copied().unwrap_or(f64::NAN);
    Ok((
        ok,
        format!(
            "lambda_y=lambda_minus: {:?} (lipschitz growth x{:.2}); lambda_y=2 lambda_minus: {:?} (x{:.2})",
            bad.verdict,
            growth(&bad),
            good.verdict,
            growth(&good)
        ),
    ))
}

fn c4_uniqueness_invariance() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in cases()? {
        let xs = c.lin.domain().uniform_grid(c.nx);
        let (g, res, sols) = solve_full(&c.lin, &c.cfg, &xs).map_err(|e| format!("{}: {e}", c.label))?;
        let rcfg = PerronConfig { init: InitialIterate::Random { seed: 11 }, ..c.cfg.clone() };
        let (gr, _) = solve(&c.lin, &rcfg, &xs).map_err(|e| format!("{}: {e}", c.label))?;
        let uniq = sup_diff(&g, &gr, |_| true);
        let inv = invariance_residual(&c.lin, &c.cfg, &sols, &res, 5.0, 5).map_err(|e| format!("{}: {e}", c.label))?.residual;
        let pass = uniq <= 2.0 * c.cfg.tol && inv <= 10.0 * c.cfg.tol;
        ok &= pass;
        parts.push(format!("{} uniq {uniq:.1e} inv {inv:.1e}{}", c.label, if pass { "" } else { " (fail)" }));
    }
    Ok((ok, parts.join("; ")))
}

fn c5_cross_method() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let runs: Vec<(&str, LinearizedSystem, usize, PerronConfig, fn(f64) -> bool)> = vec![
        ("cohomological", lin("cohomological", &[])?, 128, PerronConfig::default(), |_| true),
        ("cylinder", lin("cylinder", &[("tilt", 0.05), ("drift", 0.2)])?, 96, PerronConfig::default(), |_| true),
        // the graph is finitely smooth at x = 0; the flat bump edge needs a fine grid
        ("opt-smooth", lin("opt-smooth", &[])?, 2048, PerronConfig { dt: 0.005, ..PerronConfig::default() }, |x| x.abs() >= 0.2),
    ];
    for (label, l, nx, cfg, keep) in runs {
        let gt_cfg = GtConfig::default();
        let xs = l.domain().uniform_grid(nx);
        let (p, _) = solve(&l, &cfg, &xs).map_err(|e| format!("{label}: {e}"))?;
        let (g, _) = solve_gt(&l, &gt_cfg, &xs).map_err(|e| format!("{label}: {e}"))?;
        let d = sup_diff(&p, &g, keep);
        let bound = 5.0 * (cfg.tol + gt_cfg.tol);
        ok &= d <= bound;
        parts.push(format!("{label} {d:.1e} (<= {bound:.2e})"));
    }
    Ok((ok, parts.join("; ")))
}

fn sin_flow_growth() -> Outcome {
    let spec = expr_system("sin", DomainX::window(-100.0, 100.0).map_err(|e| e.to_string())?, "sin(x)", &["-y".into()], &BTreeMap::new())
        .map_err(|e| e.to_string())?;
    let opts = FlowOptions { dt: 0.02, tol: 1e-9, samples: 40 };
    // second derivative, sup over starts near the repelling point
    let starts: Vec<f64> = (0..1201).map(|i| -0.3 + 0.6 * i as f64 / 1200.0).collect();
    let mut sup2 = vec![0.0f64; 41];
    let mut times = Vec::new();
    for &x0 in &starts {
        let fr = tangent_flow(&spec, &[x0, 0.0], 0.0, 4.0, 2, opts).map_err(|e| e.to_string())?;
        times = fr.times.clone();
        for (k, s) in sup2.iter_mut().enumerate() {
            *s = s.max(fr.higher_entry(2, k, 0, &[0, 0]).abs());
        }
    }
    let g2 = fit_growth(&times[10..], &sup2[10..], 0.0).map_err(|e| e.to_string())?.rho_hat;
    let mut ok = (1.8..=2.2).contains(&g2);
    let mut parts = vec![format!("D2 exponent {g2:.3} (in [1.8, 2.2])")];
    // Hölder seminorm of DΦ over dyadic offsets
    let n = 4001;
    let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let mut d1 = Vec::with_capacity(n);
    for &x0 in &xs {
        let fr = tangent_flow(&spec, &[x0, 0.0], 0.0, 4.0, 1, opts).map_err(|e| e.to_string())?;
        times = fr.times.clone();
        d1.push((0..fr.len()).map(|k| fr.tangent_at(k)[0]).collect::<Vec<f64>>());
    }
    for alpha in [0.25, 0.5, 0.75] {
        let semi: Vec<f64> = (0..times.len())
            .map(|k| {
                let mut s = 0.0f64;
                let mut off = 1;
                while off < n / 4 {
                    let dx = (xs[off] - xs[0]).powf(alpha);
                    for i in 0..n - off {
                        s = s.max((d1[i + off][k] - d1[i][k]).abs() / dx);
                    }
                    off *= 2;
                }
                s
            })
            .collect();
        let first = times.iter().position(|t| *t >= 1.0 - 1e-12).unwrap_or(0);
        let rho = fit_growth(&times[first..], &semi[first..], 0.0).map_err(|e| e.to_string())?.rho_hat;
        let target = 1.0 + alpha;
        let pass = (rho / target - 1.0).abs() <= 0.1;
        ok &= pass;
        parts.push(format!("alpha {alpha}: {rho:.3} (target {target:.2})"));
    }
    Ok((ok, parts.join("; ")))
}

fn c7_derivatives() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in cases()? {
        let xs = c.lin.domain().uniform_grid(c.nx);
        let (g, res) = solve(&c.lin, &c.cfg, &xs).map_err(|e| format!("{}: {e}", c.label))?;
        let k = res.gap.constants.max_certified_order(2) as usize;
        if k == 0 {
            parts.push(format!("{} no certified order", c.label));
            ok = false;
            continue;
        }
        let (gd, _) = solve_derivatives(&c.lin, &c.cfg, &g, k).map_err(|e| format!("{}: {e}", c.label))?;
        for j in 1..=k {
            let fd = fd_check(&gd, j).map_err(|e| format!("{}: {e}", c.label))?;
            let bound = 1e-4f64.max(10.0 * fd.grid_err);
            ok &= fd.max_err <= bound;
            parts.push(format!("{} D{j} {:.1e} (<= {bound:.1e})", c.label, fd.max_err));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn c8_alekseev() -> Outcome {
    let line = DomainX::window(-100.0, 100.0).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    // linear fields with constant forcing, both flows known in closed form
    for (lam, mu, eps) in [(-0.9, -1.5, 0.2), (0.5, -2.0, -0.3), (-0.2, 0.4, 1.0)] {
        let spec = nhim::system::SystemSpec::from_fns("lin", line.clone(), 1, move |x, _, _| lam * x, move |_, y, _, o| o[0] = mu * y[0]);
        let r = move |_: f64, _: &[f64], o: &mut [f64]| {
            o[0] = eps;
            o[1] = -eps;
        };
        let res = alekseev_residual(&spec, &r, &[0.5, 0.1], 0.0, 1.0, 512).map_err(|e| e.to_string())?;
        ok &= res <= 1e-6;
        parts.push(format!("linear {res:.1e}"));
    }
    // smooth forcing on the catalog fields: trapezoid error shrinks 4x per halving
    let forcing = |_: f64, z: &[f64], o: &mut [f64]| {
        o[0] = 0.05 * z[0].cos();
        o[1] = 0.03 * z[0].sin() + 0.02 * z[1];
    };
    for (name, z0, t) in [
        ("opt-smooth", [1.2, 0.05], -3.0),
        ("cohomological", [1.0, 0.1], 2.0),
        ("cylinder", [0.8, 0.2], 2.0),
        ("non-cinfty", [0.5, 0.1], 2.0),
        ("breakdown", [0.3, 0.1], 2.0),
    ] {
        let spec = builtin(name, &BTreeMap::new()).map_err(|e| e.to_string())?;
        let errs: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| alekseev_residual(&spec, &forcing, &z0, 0.0, t, n).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
        ok &= ratios.iter().all(|r| *r >= 3.0);
        parts.push(format!("{name} ratios {:.2}/{:.2}", ratios[0], ratios[1]));
    }
    Ok((ok, parts.join("; ")))
}

fn c9_tail() -> Outcome {
    let l = lin("cohomological", &[])?;
    let xs = l.domain().uniform_grid(64);
    let at = |t: f64| solve(&l, &PerronConfig { t_max: Some(t), dt: 0.01, tol: 1e-13, ..PerronConfig::default() }, &xs).map(|r| r.0);
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [3.0, 4.0, 5.0] {
        let (a, b) = (at(t).map_err(|e| e.to_string())?, at(2.0 * t).map_err(|e| e.to_string())?);
        let measured = sup_diff(&a, &b, |_| true);
        // the truncated tail at the graph point is e^{lambda_Y T} times the graph shifted along the base flow
        let predicted = (-2.0 * t).exp() * b.sup_norm();
        let factor = measured / predicted;
        ok &= (0.5..=2.0).contains(&factor);
        parts.push(format!("T={t}: factor {factor:.3}"));
    }
    Ok((ok, parts.join("; ")))
}

fn c10_collapse() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [1e-2, 1e-3] {
        let r = run("collapse", &params(&[("eps", eps)]), &RunOptions::default()).map_err(|e| e.to_string())?;
        let (pass, x) = check_value(&r, "collapse_abscissa")?;
        ok &= pass;
        parts.push(format!("eps {eps:e}: x_c {x:.4} (-ln eps {:.4})", -eps.ln()));
    }
    Ok((ok, parts.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cohomological exactness", c1_cohomological),
        ("optimal smoothness exponent", c2_opt_smooth),
        ("breakdown detection", c3_breakdown),
        ("uniqueness and invariance", c4_uniqueness_invariance),
        ("cross-method agreement", c5_cross_method),
        ("growth estimates", sin_flow_growth),
        ("derivative consistency", c7_derivatives),
        ("variation of constants identity", c8_alekseev),
        ("tail truncation decay", c9_tail),
        ("collapse geometry", c10_collapse),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, i + 1, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

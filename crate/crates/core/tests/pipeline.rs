//! End-to-end checks through the public API: catalog system, Perron solve,
//! derivatives and the graph-transform cross-check.

use nhim::graphtransform::{solve_gt, GtConfig};
use nhim::perron::{invariance_residual, solve, solve_full, PerronConfig};
use nhim::smoothness::{fd_check, holder_refined, default_scales, solve_derivatives};
use nhim::system::{builtin, decompose, validate_gap, BaseGraph, LinearizedSystem, SpectralConstants};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn lin(name: &str, kv: &[(&str, f64)]) -> LinearizedSystem {
    let p: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    decompose(builtin(name, &p).unwrap(), BaseGraph::Zero).unwrap()
}

fn sup_diff(a: &nhim::perron::ManifoldGraph, b: &nhim::perron::ManifoldGraph) -> f64 {
    (0..a.x_grid.len()).map(|i| (a.h(i)[0] - b.h(i)[0]).abs()).fold(0.0, f64::max)
}

#[test]
fn unperturbed_graph_is_zero() {
    let l = lin("cohomological", &[("eps", 0.0)]);
    let (g, _) = solve(&l, &PerronConfig::default(), &l.domain().uniform_grid(16)).unwrap();
    assert!(g.sup_norm() <= 1e-10);
}

#[test]
fn cohomological_graph_and_derivatives_match_closed_form() {
    let l = lin("cohomological", &[]);
    let xs = l.domain().uniform_grid(48);
    let cfg = PerronConfig::default();
    let (g, _) = solve(&l, &cfg, &xs).unwrap();
    let (g, _) = solve_derivatives(&l, &cfg, &g, 2).unwrap();
    for (i, &x) in xs.iter().enumerate() {
        assert!((g.h(i)[0] - (0.04 * x.sin() - 0.02 * x.cos())).abs() < 1e-8);
        assert!((g.d(1, i).unwrap()[0] - (0.04 * x.cos() + 0.02 * x.sin())).abs() < 1e-6);
    }
    for j in 1..=2 {
        assert!(fd_check(&g, j).unwrap().pass);
    }
}

#[test]
fn cohomological_graph_is_invariant() {
    let l = lin("cohomological", &[]);
    let cfg = PerronConfig::default();
    let (_, res, sols) = solve_full(&l, &cfg, &l.domain().uniform_grid(8)).unwrap();
    assert!(invariance_residual(&l, &cfg, &sols, &res, 5.0, 5).unwrap().residual <= 1e-6);
}

#[test]
fn graph_transform_agrees_with_perron() {
    let l = lin("cohomological", &[]);
    let xs = l.domain().uniform_grid(64);
    let (p, _) = solve(&l, &PerronConfig::default(), &xs).unwrap();
    let (g, _) = solve_gt(&l, &GtConfig::default(), &xs).unwrap();
    assert!(sup_diff(&p, &g) <= 1e-7);
}

#[test]
fn opt_smooth_holder_exponent_at_the_sink() {
    let l = lin("opt-smooth", &[]);
    let rep = holder_refined(&l, &PerronConfig::default(), 0.0, 2, &default_scales(1.0)).unwrap();
    assert!((rep.alpha - 0.5).abs() <= 0.1, "alpha = {}", rep.alpha);
}

#[test]
fn example_gap_parameters_hold() {
    let rep = validate_gap(&SpectralConstants::new(0.0, -2.5, 1.0, 1.0, 2.5, 1e-3));
    assert!(rep.holds && rep.delta_rho > 0.0);
    // tangential rate 1: the gap closes at r = 2.5
    let at = |r| validate_gap(&SpectralConstants::new(1.0, -2.5, 1.0, 1.0, r, 1e-3));
    assert!(at(2.4).holds && !at(2.6).holds);
    assert!((at(2.4).max_r - 2.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn modified_numbers_are_ordered(rho_m in 0.0f64..0.5, gap in 0.1f64..3.0, r in 1.0f64..3.0) {
        let rho_minus = -r * rho_m.max(1e-3) - gap;
        let rep = validate_gap(&SpectralConstants::new(rho_m, rho_minus, 1.0, 1.0, r, 1e-3));
        prop_assert!(rep.holds);
        let c = rep.constants;
        prop_assert!(c.rho_y < r * c.rho_x && r * c.rho_x <= c.rho_x && c.rho_x < 0.0);
        prop_assert!(c.rho_y < rep.rho && rep.rho < c.rho_x);
    }

    #[test]
    fn cohomological_graph_is_linear_in_eps(eps in -0.3f64..0.3) {
        let l = lin("cohomological", &[("eps", eps)]);
        let xs = l.domain().uniform_grid(8);
        let (g, _) = solve(&l, &PerronConfig::default(), &xs).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let exact = eps * (2.0 * x.sin() - x.cos()) / 5.0;
            prop_assert!((g.h(i)[0] - exact).abs() < 1e-8);
        }
    }
}

//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs every criterion by default; command-line arguments select criteria
//! whose names contain any of them.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gite_core::ag::Tensor;
use gite_core::balance::{sinkhorn, SinkhornConfig};
use gite_core::checkpoint;
use gite_core::config::KeyValue;
use gite_core::data::{propagate, simulate, simulate_traced, GraphModel, SimConfig, SplitPart, PROPAGATION_HOPS};
use gite_core::experiment::{descent, ordering, run_ablation, AblationConfig};
use gite_core::gradcheck::{primitive_suite, total_loss_check, TOTAL_LOSS_CASES};
use gite_core::graph::DirectedGraph;
use gite_core::layers::AttentionKind;
use gite_core::model::{GiteModel, ModelConfig, Variant};
use gite_core::params::Session;
use gite_core::propcheck::{default_pairs, run_propcheck, PropConfig};
use gite_core::train::{eval, fit, render_manifest, TrainConfig};
use gite_core::Result;

type Check = fn() -> Result<(bool, String)>;

fn degeneracy() -> Result<(bool, String)> {
    let pairs = default_pairs(7, 4, 12);
    let mut failed = 0;
    let mut total = 0;
    for attention in [AttentionKind::Gat, AttentionKind::Qk] {
        let cfg = PropConfig {
            attention,
            ..PropConfig::default()
        };
        let cases = run_propcheck(&pairs, &cfg)?;
        total += cases.len();
        failed += cases.iter().filter(|c| !c.passed()).count();
    }
    Ok((failed == 0, format!("pairs {pairs:?}, {}/{total} cases as predicted", total - failed)))
}

fn gradients() -> Result<(bool, String)> {
    let prims = primitive_suite(1)?;
    let worst_prim = prims.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut worst_total: f64 = 0.0;
    for (variant, pi_eta) in TOTAL_LOSS_CASES {
        worst_total = worst_total.max(total_loss_check(variant, pi_eta, 11)?.max_rel_error);
    }
    Ok((
        worst_prim < 1e-4 && worst_total < 1e-3,
        format!(
            "{} primitives max rel err {worst_prim:.2e} (< 1e-4), total loss max rel err {worst_total:.2e} (< 1e-3)",
            prims.len()
        ),
    ))
}

/// Minimum of `⟨D, P⟩` over the permutation plans, the vertices of the uniform 3x3 transport polytope.
fn lp_optimum_3x3(d: &Tensor) -> f64 {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms
        .iter()
        .map(|p| (0..3).map(|i| d.get(i, p[i])).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min)
}

fn sinkhorn_checks() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_marginal: f64 = 0.0;
    for _ in 0..20 {
        let cost = Tensor::matrix(10, 10, (0..100).map(|_| rng.random::<f64>()).collect())?;
        let plan = sinkhorn(&cost, &SinkhornConfig::default(), None)?;
        let p = &plan.plan;
        for i in 0..10 {
            let row: f64 = (0..10).map(|j| p.get(i, j)).sum();
            let col: f64 = (0..10).map(|j| p.get(j, i)).sum();
            worst_marginal = worst_marginal.max((row - 0.1).abs()).max((col - 0.1).abs());
        }
    }
    let tight = SinkhornConfig {
        xi: 1e-3,
        max_iter: 100_000,
        tol: 1e-9,
    };
    let mut worst_gap: f64 = 0.0;
    for _ in 0..20 {
        let cost = Tensor::matrix(3, 3, (0..9).map(|_| rng.random::<f64>()).collect())?;
        let plan = sinkhorn(&cost, &tight, None)?;
        worst_gap = worst_gap.max((plan.value - lp_optimum_3x3(&cost)).abs());
    }
    Ok((
        worst_marginal < 1e-6 && worst_gap < 1e-2,
        format!("10x10 marginal violation {worst_marginal:.2e} (< 1e-6), 3x3 LP gap {worst_gap:.2e} (< 1e-2)"),
    ))
}

fn attention_normalization() -> Result<(bool, String)> {
    let mut ds = simulate(&SimConfig {
        n: 100,
        covariates: 6,
        graph: GraphModel::ErdosRenyi { p: 0.05 },
        seed: 4,
        ..SimConfig::default()
    })?
    .with_split(4)?;
    ds.zscore_outcomes();
    let mut worst: f64 = 0.0;
    let mut channels = 0;
    for attention in [AttentionKind::Gat, AttentionKind::Qk] {
        let cfg = ModelConfig {
            hidden: 8,
            attention,
            ..ModelConfig::default()
        };
        let model = GiteModel::new(cfg, &ds, 2)?;
        let inputs = model.inputs(&ds)?;
        let mut s = Session::new(&model.params);
        let f = model.forward(&mut s, &inputs, None)?;
        for rec in &f.state.attention {
            for w in [Some(rec.in_x), Some(rec.in_t), rec.st_x, rec.st_t].into_iter().flatten() {
                let mut sums = vec![0.0; ds.num_units()];
                for (&d, &v) in inputs.ctx.edge_dst.iter().zip(s.value(w).data()) {
                    sums[d] += v;
                }
                worst = sums.iter().map(|v| (v - 1.0).abs()).fold(worst, f64::max);
                channels += 1;
            }
        }
    }
    Ok((worst < 1e-9, format!("{channels} layer channels, max |sum - 1| {worst:.2e} (< 1e-9)")))
}

fn dense_propagation(graph: &DirectedGraph, hops: &[Vec<f64>], h0: &[f64]) -> Vec<f64> {
    let n = graph.num_nodes();
    let mut h = h0.to_vec();
    for weights in hops {
        let mut m = vec![0.0; n * n];
        for (&(s, d), &e) in graph.edges().iter().zip(weights) {
            m[d * n + s] = e;
        }
        h = (0..n).map(|i| (0..n).map(|k| m[i * n + k] * h[k]).sum()).collect();
    }
    h
}

fn simulator_oracle() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let (ds, trace) = simulate_traced(&SimConfig {
            n: 200,
            seed,
            ..SimConfig::default()
        })?;
        assert_eq!(trace.edge_weights_x.len(), PROPAGATION_HOPS);
        for (hops, h0, got) in [
            (&trace.edge_weights_x, &trace.x_tilde, &trace.agg_x),
            (&trace.edge_weights_t, &trace.t_tilde, &trace.agg_t),
        ] {
            let want = dense_propagation(&ds.graph, hops, h0);
            let sparse = propagate(&ds.graph, hops, h0);
            for ((a, b), c) in want.iter().zip(got).zip(&sparse) {
                worst = worst.max((a - b).abs() / a.abs().max(1.0)).max((a - c).abs() / a.abs().max(1.0));
            }
        }
    }
    Ok((worst < 1e-9, format!("n = 200, max scaled deviation {worst:.2e} (< 1e-9)")))
}

fn ablation() -> Result<(bool, String)> {
    let cfg = AblationConfig::benchmark(
        vec![Variant::Full, Variant::Natt, Variant::Na, Variant::Nm],
        (0..10).collect(),
    );
    let runs = run_ablation(&cfg)?;
    let r = ordering(&runs)?;
    Ok((
        r.passed(8),
        format!(
            "mean PEHE FULL {:.3}, NATT {:.3}, NA {:.3}; NA gap > NM gap in {}/{} seeds (>= 8)",
            r.full_mean, r.natt_mean, r.na_mean, r.gap_wins, r.seeds
        ),
    ))
}

fn descent_sanity() -> Result<(bool, String)> {
    let sim = SimConfig {
        n: 500,
        ..AblationConfig::benchmark(vec![], vec![]).sim
    };
    let rows = descent(&sim, &TrainConfig::default(), &(0..10).collect::<Vec<_>>(), 200)?;
    let down = rows.iter().filter(|(_, l0, l200)| l200 < l0).count();
    let ratio = rows.iter().map(|(_, l0, l200)| l200 / l0).fold(0.0, f64::max);
    Ok((
        down >= 9,
        format!("loss(200) < loss(0) in {down}/10 seeds (>= 9), worst ratio {ratio:.3}"),
    ))
}

fn reproducibility() -> Result<(bool, String)> {
    let ds = simulate(&SimConfig {
        n: 500,
        seed: 3,
        noise_std: 0.1,
        ..SimConfig::default()
    })?
    .with_split(3)?;
    let mut cfg = TrainConfig {
        max_iterations: 25,
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.model.hidden = 16;
    cfg.model.layers = 2;
    let run = || -> Result<(String, Vec<u8>)> {
        let f = fit(&ds, &cfg)?;
        let m = eval(&ds, &f.model, SplitPart::Test, cfg.seed)?;
        Ok((render_manifest(&cfg.entries(), &ds, &f, &[m]), checkpoint::to_bytes(&f.model)?))
    };
    let (a, b) = (run()?, run()?);
    Ok((
        a == b,
        format!("manifest {} bytes, checkpoint {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Option<Duration>, Check); 8] = [
        ("degeneracy", Some(Duration::from_secs(1)), degeneracy),
        ("gradients", Some(Duration::from_secs(30)), gradients),
        ("sinkhorn", Some(Duration::from_secs(5)), sinkhorn_checks),
        ("attention_normalization", None, attention_normalization),
        ("simulator_oracle", None, simulator_oracle),
        ("ablation_ordering", Some(Duration::from_secs(15 * 60)), ablation),
        ("descent", None, descent_sanity),
        ("reproducibility", None, reproducibility),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, limit, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((ok, detail)) => match limit {
                Some(l) if elapsed > l => (false, format!("{detail}; took {elapsed:.1?}, limit {l:?}")),
                _ => (ok, detail),
            },
            Err(e) => (false, format!("error: {e}")),
        };
        let limit = limit.map_or(String::new(), |l| format!(" / {l:?}"));
        println!(
            "{} {name} [{:.2}s{limit}]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        failures += usize::from(!pass);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}

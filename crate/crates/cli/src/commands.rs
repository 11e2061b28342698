//! Subcommand bodies. Each returns whether its checks passed and writes
//! `manifest.txt` into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gite_core::checkpoint;
use gite_core::config::KeyValue;
use gite_core::data::{simulate as run_sim, Dataset, SplitPart};
use gite_core::experiment::{ablation_table, ordering, run_ablation, runs_csv, AblationConfig};
use gite_core::gradcheck::{primitive_suite, total_loss_check, GradReport, TOTAL_LOSS_CASES};
use gite_core::layers::AttentionKind;
use gite_core::model::Variant;
use gite_core::propcheck::{default_pairs, report_csv, run_propcheck, summary, PropConfig};
use gite_core::train::{eval as eval_split, fit, render_manifest};

use crate::run_config::RunConfig;
use crate::{AblateArgs, EvalArgs, GradcheckArgs, ModelOpts, PropcheckArgs, RunOpts, SimulateArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.txt";

fn resolve(run: &RunOpts, model: Option<&ModelOpts>, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(p) = &run.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_pairs(&run.set)?;
    if let Some(m) = model {
        for (k, v) in m.pairs() {
            cfg.set(k, &v).with_context(|| format!("--{}", k.replace('_', "-")))?;
        }
    }
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
        cfg.sim.seed = seed;
    }
    cfg.train.model.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn header(command: &str) -> String {
    format!("# gite {command} manifest, version {}\n", env!("CARGO_PKG_VERSION"))
}

fn dataset_section(ds: &Dataset) -> String {
    let mut out = String::from("[dataset]\n");
    let _ = writeln!(out, "units = {}", ds.num_units());
    let _ = writeln!(out, "edges = {}", ds.graph.num_edges());
    let _ = writeln!(out, "covariates = {}", ds.num_covariates());
    let _ = writeln!(out, "treated_fraction = {}", ds.treated_fraction());
    let _ = writeln!(out, "true_effects = {}", ds.tau.is_some());
    out
}

pub fn simulate(args: SimulateArgs) -> Result<bool> {
    let mut cfg = resolve(&args.run, None, RunConfig::default())?;
    if let Some(n) = args.n {
        cfg.sim.n = n;
    }
    if let Some(g) = &args.graph {
        cfg.sim.graph = g.parse().context("--graph")?;
    }
    let ds = run_sim(&cfg.sim)?;
    ds.write_dir(&args.run.out_dir)?;
    let mut m = header("simulate");
    m.push_str("[config]\n");
    for (k, v) in cfg.sim.entries() {
        let _ = writeln!(m, "{k} = {v}");
    }
    m.push('\n');
    m.push_str(&dataset_section(&ds));
    write(&args.run.out_dir, MANIFEST, &m)?;
    println!(
        "wrote {} units, {} edges to {}",
        ds.num_units(),
        ds.graph.num_edges(),
        args.run.out_dir.display()
    );
    Ok(true)
}

fn ite_csv(ds: &Dataset, tau_hat: &[f64]) -> String {
    let scale = ds.y_norm.map_or(1.0, |n| n.std);
    let mut out = String::from("id,tau_hat\n");
    for (i, v) in tau_hat.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", v * scale);
    }
    out
}

fn metrics_csv(records: &[gite_core::metrics::MetricsRecord]) -> String {
    let mut out = String::from("split,variant,seed,sqrt_mse,sqrt_pehe\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.split,
            r.variant,
            r.seed,
            r.sqrt_mse,
            r.sqrt_pehe.map_or(String::new(), |v| v.to_string())
        );
    }
    out
}

pub fn train(args: TrainArgs) -> Result<bool> {
    let cfg = resolve(&args.run, Some(&args.model), RunConfig::default())?;
    let ds = match &args.data {
        Some(dir) => Dataset::read_dir(dir, args.zscore).with_context(|| format!("reading {}", dir.display()))?,
        None => run_sim(&cfg.sim)?,
    }
    .with_split(cfg.train.seed)?;
    let fitted = fit(&ds, &cfg.train)?;
    let mut metrics = Vec::new();
    for part in [SplitPart::Val, SplitPart::Test] {
        if !ds.split()?.part(part).is_empty() {
            metrics.push(eval_split(&ds, &fitted.model, part, cfg.train.seed)?);
        }
    }
    let out = &args.run.out_dir;
    let mut entries = train_entries(&cfg, args.data.as_deref());
    entries.push(("zscore".into(), args.zscore.to_string()));
    let mut manifest = header("train");
    manifest.push_str(&render_manifest(&entries, &ds, &fitted, &metrics));
    write(out, MANIFEST, &manifest)?;
    checkpoint::save(&fitted.model, &out.join("model.ckpt"))?;
    write(out, "ite.csv", &ite_csv(&ds, &fitted.model.estimate_ite(&ds)?))?;
    write(out, "metrics.csv", &metrics_csv(&metrics))?;
    for m in &metrics {
        println!(
            "{} {}: sqrt_mse {:.4}{}",
            m.variant,
            m.split,
            m.sqrt_mse,
            m.sqrt_pehe.map_or(String::new(), |v| format!(", sqrt_pehe {v:.4}"))
        );
    }
    Ok(true)
}

/// Simulator keys are recorded only when the dataset was simulated in-process.
fn train_entries(cfg: &RunConfig, data: Option<&Path>) -> Vec<(String, String)> {
    match data {
        Some(dir) => {
            let mut e = cfg.train.entries();
            e.push(("data".into(), dir.display().to_string()));
            e
        }
        None => cfg.entries(),
    }
}

pub fn eval(args: EvalArgs) -> Result<bool> {
    let cfg = resolve(&args.run, None, RunConfig::default())?;
    let part: SplitPart = args.split.parse()?;
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let ds = Dataset::read_dir(&args.data, args.zscore)?.with_split(cfg.train.seed)?;
    let rec = eval_split(&ds, &model, part, cfg.train.seed)?;
    let out = &args.run.out_dir;
    let mut m = header("eval");
    m.push_str("[config]\n");
    let _ = writeln!(m, "data = {}", args.data.display());
    let _ = writeln!(m, "checkpoint = {}", args.checkpoint.display());
    let _ = writeln!(m, "split = {part}\nsplit_seed = {}\nzscore = {}", cfg.train.seed, args.zscore);
    for (k, v) in model.config.entries() {
        let _ = writeln!(m, "model.{k} = {v}");
    }
    m.push('\n');
    m.push_str(&dataset_section(&ds));
    m.push_str("\n[metrics]\n");
    m.push_str(&metrics_csv(std::slice::from_ref(&rec)));
    write(out, MANIFEST, &m)?;
    write(out, "metrics.csv", &metrics_csv(std::slice::from_ref(&rec)))?;
    write(out, "ite.csv", &ite_csv(&ds, &model.estimate_ite(&ds)?))?;
    println!(
        "{} {}: sqrt_mse {:.4}{}",
        rec.variant,
        rec.split,
        rec.sqrt_mse,
        rec.sqrt_pehe.map_or(String::new(), |v| format!(", sqrt_pehe {v:.4}"))
    );
    Ok(true)
}

pub fn ablate(args: AblateArgs) -> Result<bool> {
    let base = if args.benchmark {
        let b = AblationConfig::benchmark(vec![], vec![]);
        RunConfig { train: b.train, sim: b.sim }
    } else {
        RunConfig::default()
    };
    let cfg = resolve(&args.run, Some(&args.model), base)?;
    let variants: Vec<Variant> = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.iter().map(|v| v.parse()).collect::<gite_core::Result<_>>()?
    };
    if args.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let first = args.run.seed.unwrap_or(0);
    let ab = AblationConfig {
        sim: cfg.sim.clone(),
        train: cfg.train.clone(),
        variants: variants.clone(),
        seeds: (first..first + args.seeds).collect(),
    };
    let runs = run_ablation(&ab)?;
    let table = ablation_table(&runs, &variants);
    let per_run = runs_csv(&runs);
    let out = &args.run.out_dir;
    write(out, "ablation.csv", &table)?;
    write(out, "runs.csv", &per_run)?;
    let mut m = header("ablate");
    m.push_str("[config]\n");
    for (k, v) in cfg.entries() {
        if k != "seed" && k != "sim.seed" && k != "variant" {
            let _ = writeln!(m, "{k} = {v}");
        }
    }
    let _ = writeln!(m, "seeds = {:?}", ab.seeds);
    let _ = writeln!(
        m,
        "variants = {}",
        variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(m, "\n[table]\n{table}\n[runs]\n{per_run}");
    print!("{table}");
    let mut passed = true;
    if let Some(min_wins) = args.check_ordering {
        let rep = ordering(&runs)?;
        passed = rep.passed(min_wins);
        let line = format!(
            "ordering {}: mean sqrt_pehe FULL {:.4} NATT {:.4} NA {:.4}; NA gap > NM gap in {}/{} seeds (need {min_wins})",
            if passed { "PASS" } else { "FAIL" },
            rep.full_mean,
            rep.natt_mean,
            rep.na_mean,
            rep.gap_wins,
            rep.seeds
        );
        println!("{line}");
        let _ = writeln!(m, "[check]\n{line}");
    }
    write(out, MANIFEST, &m)?;
    Ok(passed)
}

pub fn propcheck(args: PropcheckArgs) -> Result<bool> {
    let seed = args.run.seed.unwrap_or(0);
    let kinds: Vec<AttentionKind> = match &args.attention {
        Some(a) => vec![a.parse()?],
        None => vec![AttentionKind::Gat, AttentionKind::Qk],
    };
    let pairs = default_pairs(seed, args.count, args.max_size);
    let mut cases = Vec::new();
    for attention in &kinds {
        cases.extend(run_propcheck(
            &pairs,
            &PropConfig {
                attention: *attention,
                seed,
                ..PropConfig::default()
            },
        )?);
    }
    let csv = report_csv(&cases);
    let text = summary(&cases);
    let out = &args.run.out_dir;
    write(out, "propcheck.csv", &csv)?;
    let mut m = header("propcheck");
    let _ = writeln!(m, "[config]\nseed = {seed}\npairs = {pairs:?}");
    let _ = writeln!(
        m,
        "attention = {}\n\n[results]\n{csv}\n[summary]\n{text}",
        kinds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    );
    write(out, MANIFEST, &m)?;
    print!("{text}");
    Ok(cases.iter().all(|c| c.passed()))
}

pub fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let seed = args.run.seed.unwrap_or(1);
    let mut rows: Vec<(GradReport, f64)> = primitive_suite(seed)?
        .into_iter()
        .map(|r| (r, args.primitive_tol))
        .collect();
    for (variant, pi_eta) in TOTAL_LOSS_CASES {
        rows.push((total_loss_check(variant, pi_eta, seed)?, args.loss_tol));
    }
    let mut csv = String::from("name,checked,kinks,max_rel_error,tolerance,pass\n");
    let mut failed = 0;
    for (r, tol) in &rows {
        let ok = r.passes(*tol);
        failed += usize::from(!ok);
        let _ = writeln!(csv, "{},{},{},{:e},{tol:e},{ok}", r.name, r.checked, r.kinks, r.max_rel_error);
        if !ok {
            println!("FAIL {}: max relative error {:e} at {:?}", r.name, r.max_rel_error, r.worst);
        }
    }
    println!("{}/{} gradient checks pass", rows.len() - failed, rows.len());
    let out = &args.run.out_dir;
    write(out, "gradcheck.csv", &csv)?;
    let mut m = header("gradcheck");
    let _ = writeln!(
        m,
        "[config]\nseed = {seed}\nprimitive_tol = {}\nloss_tol = {}\n\n[results]\n{csv}",
        args.primitive_tol, args.loss_tol
    );
    write(out, MANIFEST, &m)?;
    Ok(failed == 0)
}

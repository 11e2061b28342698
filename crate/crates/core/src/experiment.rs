//! Multi-seed experiments: the ablation study and the descent check.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{simulate, Dataset, GraphModel, SimConfig, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricsRecord, Summary};
use crate::model::Variant;
use crate::train::{eval, fit, TrainConfig};

/// Seed `s` drives the simulator, the split and the model for run `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationConfig {
    /// The dense benchmark: 2000 units on a preferential-attachment graph of
    /// mean degree 20, with a training budget that keeps four variants over
    /// ten seeds within a quarter hour on one core.
    pub fn benchmark(variants: Vec<Variant>, seeds: Vec<u64>) -> Self {
        let mut train = TrainConfig {
            learning_rate: 1e-2,
            max_iterations: 60,
            ..TrainConfig::default()
        };
        train.model.hidden = 32;
        train.model.layers = 2;
        train.model.sinkhorn.max_iter = 3;
        Self {
            sim: SimConfig {
                n: 2000,
                graph: GraphModel::PreferentialAttachment { mean_degree: 20.0 },
                noise_std: 0.1,
                standardize_agg: true,
                ..SimConfig::default()
            },
            train,
            variants,
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsRecord,
    pub iterations: usize,
    pub best_iteration: usize,
}

pub fn seeded_dataset(sim: &SimConfig, seed: u64) -> Result<Dataset> {
    let cfg = SimConfig { seed, ..sim.clone() };
    simulate(&cfg)?.with_split(seed)
}

/// Trains every variant on every seed; runs are independent and execute in parallel.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRun>> {
    let datasets: Vec<Dataset> = cfg
        .seeds
        .par_iter()
        .map(|&s| seeded_dataset(&cfg.sim, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, Variant)> = (0..cfg.seeds.len())
        .flat_map(|i| cfg.variants.iter().map(move |&v| (i, v)))
        .collect();
    jobs.par_iter()
        .map(|&(i, variant)| {
            let seed = cfg.seeds[i];
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.model.variant = variant;
            let fitted = fit(&datasets[i], &train)?;
            let test = eval(&datasets[i], &fitted.model, SplitPart::Test, seed)?;
            log::info!(
                "{variant} seed {seed}: test sqrt_pehe {:?} after {} iterations",
                test.sqrt_pehe,
                fitted.history.len()
            );
            Ok(AblationRun {
                variant,
                seed,
                test,
                iterations: fitted.history.len(),
                best_iteration: fitted.best_iteration,
            })
        })
        .collect()
}

fn pehe_of(runs: &[AblationRun], v: Variant) -> Vec<(u64, f64)> {
    runs.iter()
        .filter(|r| r.variant == v)
        .filter_map(|r| r.test.sqrt_pehe.map(|p| (r.seed, p)))
        .collect()
}

pub fn variant_summary(runs: &[AblationRun], v: Variant) -> (Option<Summary>, Option<Summary>) {
    let pehe: Vec<f64> = pehe_of(runs, v).into_iter().map(|(_, p)| p).collect();
    let mse: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.test.sqrt_mse).collect();
    (summarize(&pehe), summarize(&mse))
}

/// One row per variant: mean and standard error of the test errors.
pub fn ablation_table(runs: &[AblationRun], variants: &[Variant]) -> String {
    let mut out = String::from("variant,runs,sqrt_pehe_mean,sqrt_pehe_se,sqrt_mse_mean,sqrt_mse_se\n");
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for &v in variants {
        let (pehe, mse) = variant_summary(runs, v);
        let _ = writeln!(
            out,
            "{v},{},{},{},{},{}",
            mse.map_or(0, |s| s.runs),
            f(pehe.map(|s| s.mean)),
            f(pehe.and_then(|s| s.std_err)),
            f(mse.map(|s| s.mean)),
            f(mse.and_then(|s| s.std_err)),
        );
    }
    out
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("variant,seed,sqrt_mse,sqrt_pehe,iterations,best_iteration\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.test.sqrt_mse,
            r.test.sqrt_pehe.map_or(String::new(), |v| v.to_string()),
            r.iterations,
            r.best_iteration
        );
    }
    out
}

/// FULL against the attention and amplifier ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingReport {
    pub full_mean: f64,
    pub natt_mean: f64,
    pub na_mean: f64,
    /// Seeds where `NA - FULL` exceeds `NM - FULL`.
    pub gap_wins: usize,
    pub seeds: usize,
}

impl OrderingReport {
    pub fn passed(&self, min_wins: usize) -> bool {
        self.full_mean < self.natt_mean && self.full_mean < self.na_mean && self.gap_wins >= min_wins
    }
}

pub fn ordering(runs: &[AblationRun]) -> Result<OrderingReport> {
    let get = |v| {
        let r = pehe_of(runs, v);
        if r.is_empty() {
            Err(Error::Config(format!("no {v} runs with true effects")))
        } else {
            Ok(r)
        }
    };
    let (full, natt, na, nm) = (get(Variant::Full)?, get(Variant::Natt)?, get(Variant::Na)?, get(Variant::Nm)?);
    let mean = |r: &[(u64, f64)]| r.iter().map(|p| p.1).sum::<f64>() / r.len() as f64;
    let lookup = |r: &[(u64, f64)], s: u64| r.iter().find(|p| p.0 == s).map(|p| p.1);
    let mut wins = 0;
    for &(seed, f) in &full {
        if let (Some(a), Some(m)) = (lookup(&na, seed), lookup(&nm, seed)) {
            if a - f > m - f {
                wins += 1;
            }
        }
    }
    Ok(OrderingReport {
        full_mean: mean(&full),
        natt_mean: mean(&natt),
        na_mean: mean(&na),
        gap_wins: wins,
        seeds: full.len(),
    })
}

/// Training loss before step 0 and before step `at`, per seed.
pub fn descent(sim: &SimConfig, train: &TrainConfig, seeds: &[u64], at: usize) -> Result<Vec<(u64, f64, f64)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let ds = seeded_dataset(sim, seed)?;
            let cfg = TrainConfig {
                seed,
                max_iterations: at + 1,
                // the check compares raw iterates, so early stopping stays out of the way
                patience: usize::MAX,
                ..train.clone()
            };
            let fitted = fit(&ds, &cfg)?;
            let h = &fitted.history;
            if h.len() <= at {
                return Err(Error::Config(format!("seed {seed}: only {} iterations ran", h.len())));
            }
            Ok((seed, h[0].loss, h[at].loss))
        })
        .collect()
}

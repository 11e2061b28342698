//! Optimization: Adam with decoupled weight decay, full-batch training with
//! validation-based early stopping, evaluation and run manifests.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ag::Tensor;
use crate::data::{Dataset, SplitPart};
use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::model::{BalanceState, GiteModel, ModelConfig};
use crate::params::{ParamGrads, ParamStore, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay applied every step.
    pub weight_decay: f64,
    pub max_iterations: usize,
    /// Iterations between validations.
    pub validate_every: usize,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    /// Seeds parameter initialization and dropout.
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            max_iterations: 2000,
            validate_every: 10,
            patience: 20,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
        }
    }

    /// Updates every parameter that received a gradient; the moment count is per parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            let k = id.index();
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data()[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data()[j] * g.data()[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

/// Loss components before the update of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub factual: f64,
    pub balance: f64,
    pub l2: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: GiteModel,
    pub history: Vec<IterRecord>,
    /// `(iteration, validation √ε_MSE)`, where iteration counts completed steps.
    pub validations: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub stopped_early: bool,
}

fn validation_rmse(model: &GiteModel, inputs: &crate::model::Inputs, dataset: &Dataset, units: &[usize]) -> Result<f64> {
    let pred = model.predict(inputs)?;
    let yh: Vec<f64> = units.iter().map(|&i| pred.factual[i]).collect();
    let y: Vec<f64> = units.iter().map(|&i| dataset.y[i]).collect();
    crate::metrics::rmse(&yh, &y)
}

/// Trains a fresh model on the dataset's training split.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    let model = GiteModel::new(cfg.model.clone(), dataset, cfg.seed)?;
    fit_from(model, dataset, cfg)
}

/// Continues training `model`; the best validation snapshot is returned.
pub fn fit_from(mut model: GiteModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    if cfg.validate_every == 0 {
        return Err(Error::Config("validate_every must be positive".into()));
    }
    let split = dataset.split()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let inputs = model.inputs(dataset)?;
    let batch = model.batch(dataset, &split.train);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, &model.params);
    let mut balance = BalanceState::default();
    // dropout masks come from a stream separate from initialization
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);

    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut last_good: Option<(usize, f64)> = None;

    let mut validate = |model: &GiteModel, step: usize, validations: &mut Vec<(usize, f64)>| -> Result<bool> {
        if split.val.is_empty() {
            return Ok(false);
        }
        let score = validation_rmse(model, &inputs, dataset, &split.val)?;
        validations.push((step, score));
        match &best {
            Some((b, _, _)) if score >= *b => {
                stale += 1;
                Ok(stale >= cfg.patience)
            }
            _ => {
                best = Some((score, step, model.params.clone()));
                stale = 0;
                Ok(false)
            }
        }
    };

    let diverged = |iteration, last_good: Option<(usize, f64)>| Error::Diverged {
        iteration,
        last_good_iteration: last_good.map(|(i, _)| i),
        last_good_loss: last_good.map(|(_, l)| l),
    };
    for it in 0..cfg.max_iterations {
        if it % cfg.validate_every == 0 && validate(&model, it, &mut validations)? {
            stopped_early = true;
            break;
        }
        let mut s = Session::new(&model.params);
        let mut dropout = Dropout {
            rate: cfg.model.dropout,
            rng: &mut drop_rng,
        };
        let parts = match model.total_loss(&mut s, &inputs, &batch, &mut balance, Some(&mut dropout)) {
            Ok(p) => p,
            Err(Error::NonFinite { op }) => {
                log::error!("non-finite value in {op} at iteration {it}");
                return Err(diverged(it, last_good));
            }
            Err(e) => return Err(e),
        };
        let loss = s.value(parts.total).item();
        if !loss.is_finite() {
            return Err(diverged(it, last_good));
        }
        history.push(IterRecord {
            iteration: it,
            loss,
            factual: parts.factual,
            balance: parts.balance,
            l2: parts.l2,
            reconstruction: parts.reconstruction,
        });
        last_good = Some((it, loss));
        let grads = match s.backward(parts.total) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(diverged(it, last_good)),
            Err(e) => return Err(e),
        };
        drop(s);
        adam.step(&mut model.params, &grads);
    }
    if !stopped_early {
        validate(&model, history.len(), &mut validations)?;
    }
    let best_iteration = match best {
        Some((_, step, params)) => {
            model.params = params;
            step
        }
        None => history.len(),
    };
    Ok(FitResult {
        model,
        history,
        validations,
        best_iteration,
        stopped_early,
    })
}

/// `√ε_MSE` and, with true effects, `√ε_PEHE` on one split.
pub fn eval(dataset: &Dataset, model: &GiteModel, part: SplitPart, seed: u64) -> Result<MetricsRecord> {
    let units = dataset.split()?.part(part);
    if units.is_empty() {
        return Err(Error::Config(format!("{part} split is empty")));
    }
    let pred = model.predict(&model.inputs(dataset)?)?;
    let yh: Vec<f64> = units.iter().map(|&i| pred.factual[i]).collect();
    let y: Vec<f64> = units.iter().map(|&i| dataset.y[i]).collect();
    // effects are stored on the original scale
    let scale = dataset.y_norm.map_or(1.0, |n| n.std);
    let th: Vec<f64> = units.iter().map(|&i| pred.tau[i] * scale).collect();
    let tau: Option<Vec<f64>> = dataset.tau.as_ref().map(|t| units.iter().map(|&i| t[i]).collect());
    let (mse, pehe) = compute_metrics(&yh, &y, &th, tau.as_deref())?;
    Ok(MetricsRecord {
        sqrt_mse: mse,
        sqrt_pehe: pehe,
        split: part.to_string(),
        seed,
        variant: model.config.variant.to_string(),
    })
}

/// Text record of a run: resolved configuration, per-iteration losses and metrics.
pub fn render_manifest(
    config: &[(String, String)],
    dataset: &Dataset,
    fit: &FitResult,
    metrics: &[MetricsRecord],
) -> String {
    let mut out = String::from("# gite run manifest\n[config]\n");
    for (k, v) in config {
        let _ = writeln!(out, "{k} = {v}");
    }
    out.push_str("weight_decay_mode = decoupled\n");
    let _ = writeln!(out, "\n[dataset]\nunits = {}", dataset.num_units());
    let _ = writeln!(out, "edges = {}", dataset.graph.num_edges());
    let _ = writeln!(out, "covariates = {}", dataset.num_covariates());
    let _ = writeln!(out, "treated_fraction = {}", dataset.treated_fraction());
    if let Some(s) = &dataset.split {
        let _ = writeln!(out, "split = {}/{}/{}", s.train.len(), s.val.len(), s.test.len());
    }
    let _ = writeln!(out, "log_degree_denominator = {}", fit.model.log_deg_denominator);
    let _ = writeln!(out, "y_mean = {}\ny_std = {}", fit.model.y_norm.mean, fit.model.y_norm.std);
    out.push_str("\n[history]\n# iteration loss factual balance l2 reconstruction\n");
    for r in &fit.history {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            r.iteration, r.loss, r.factual, r.balance, r.l2, r.reconstruction
        );
    }
    out.push_str("\n[validation]\n# step sqrt_mse\n");
    for (step, v) in &fit.validations {
        let _ = writeln!(out, "{step} {v}");
    }
    let _ = writeln!(out, "best_iteration = {}", fit.best_iteration);
    let _ = writeln!(out, "stopped_early = {}", fit.stopped_early);
    out.push_str("\n[metrics]\n# split variant seed sqrt_mse sqrt_pehe\n");
    for m in metrics {
        let pehe = m.sqrt_pehe.map_or("NA".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{} {} {} {} {}", m.split, m.variant, m.seed, m.sqrt_mse, pehe);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, GraphModel, SimConfig};
    use crate::gradcheck;
    use crate::model::Variant;

    fn dataset(n: usize, seed: u64) -> Dataset {
        simulate(&SimConfig {
            n,
            covariates: 5,
            graph: GraphModel::PreferentialAttachment { mean_degree: 4.0 },
            noise_std: 0.1,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
        .with_split(seed)
        .unwrap()
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            max_iterations: iterations,
            learning_rate: 5e-3,
            model: ModelConfig {
                hidden: 8,
                layers: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let ds = dataset(40, 1);
        let cfg = quick(0);
        let fit = fit(&ds, &cfg).unwrap();
        let init = GiteModel::new(cfg.model.clone(), &ds, cfg.seed).unwrap();
        assert_eq!(fit.model.params, init.params);
        assert!(fit.history.is_empty());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let ds = dataset(40, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(15)
        };
        let fit = fit(&ds, &cfg).unwrap();
        let init = GiteModel::new(cfg.model.clone(), &ds, cfg.seed).unwrap();
        assert_eq!(fit.model.params, init.params);
        assert_eq!(fit.history.len(), 15);
    }

    #[test]
    fn zero_gradient_and_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::column(vec![1.5, -2.0])).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(0.1, 0.0, &store);
        let grads = {
            let mut s = Session::new(&store);
            let va = s.param(a).unwrap();
            let z = s.tape.scale(va, 0.0).unwrap();
            let l = s.tape.sum(z).unwrap();
            s.backward(l).unwrap()
        };
        for _ in 0..5 {
            adam.step(&mut store, &grads);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(2.0)).unwrap();
        let mut adam = Adam::new(0.01, 0.0, &store);
        let grads = {
            let mut s = Session::new(&store);
            let va = s.param(a).unwrap();
            let sq = s.tape.mul(va, va).unwrap();
            let l = s.tape.sum(sq).unwrap();
            s.backward(l).unwrap()
        };
        adam.step(&mut store, &grads);
        // bias-corrected first step is lr * g / (|g| + eps)
        let expected = 2.0 - 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((store.get(a).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn l2_gradient_is_two_lambda_theta() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        let lambda = 0.3;
        let r = gradcheck::check("l2", &store, None, |s| {
            let va = s.param(a)?;
            let sq = s.tape.l2_norm_sq(&[va])?;
            s.tape.scale(sq, lambda)
        })
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        let mut s = Session::new(&store);
        let va = s.param(a).unwrap();
        let sq = s.tape.l2_norm_sq(&[va]).unwrap();
        let l = s.tape.scale(sq, lambda).unwrap();
        let g = s.backward(l).unwrap();
        for (gv, p) in g.get(a).unwrap().data().iter().zip(store.get(a).data()) {
            assert!((gv - 2.0 * lambda * p).abs() < 1e-15);
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let ds = dataset(60, 3);
        let cfg = quick(25);
        let a = fit(&ds, &cfg).unwrap();
        let b = fit(&ds, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        let ma = eval(&ds, &a.model, SplitPart::Test, 0).unwrap();
        let text_a = render_manifest(&[], &ds, &a, &[ma.clone()]);
        let text_b = render_manifest(&[], &ds, &b, &[ma]);
        assert_eq!(text_a, text_b);
    }

    #[test]
    fn loss_decreases_on_small_instance() {
        let ds = dataset(80, 4);
        let cfg = TrainConfig {
            patience: 1000,
            ..quick(60)
        };
        let fit = fit(&ds, &cfg).unwrap();
        assert!(fit.history.last().unwrap().loss < fit.history[0].loss);
    }

    #[test]
    fn early_stopping_restores_best_snapshot() {
        let ds = dataset(60, 5);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            validate_every: 1,
            patience: 3,
            ..quick(400)
        };
        let fit = fit(&ds, &cfg).unwrap();
        assert!(fit.stopped_early);
        let best = fit
            .validations
            .iter()
            .fold(f64::INFINITY, |a, &(_, v)| a.min(v));
        let split = ds.split().unwrap();
        let inputs = fit.model.inputs(&ds).unwrap();
        let now = validation_rmse(&fit.model, &inputs, &ds, &split.val).unwrap();
        assert_eq!(now, best);
    }

    #[test]
    fn eval_reference_predictors() {
        let ds = dataset(50, 6);
        let mut m = GiteModel::new(quick(0).model, &ds, 1).unwrap();
        // zero final layers make both heads predict the training mean
        for t in 0..2 {
            let (w, b) = *m.head(t).layers().last().unwrap();
            let rows = m.params.get(w).rows();
            *m.params.get_mut(w) = Tensor::zeros(rows, 1);
            *m.params.get_mut(b) = Tensor::zeros(1, 1);
        }
        let rec = eval(&ds, &m, SplitPart::Train, 0).unwrap();
        // predicting the training mean leaves the population standard deviation
        assert!((rec.sqrt_mse - m.y_norm.std).abs() < 1e-9);
        let tau = ds.tau.as_ref().unwrap();
        let train = &ds.split().unwrap().train;
        let rms = (train.iter().map(|&i| tau[i] * tau[i]).sum::<f64>() / train.len() as f64).sqrt();
        assert!((rec.sqrt_pehe.unwrap() - rms).abs() < 1e-9);

        let mut no_tau = ds.clone();
        no_tau.tau = None;
        assert!(eval(&no_tau, &m, SplitPart::Test, 0).unwrap().sqrt_pehe.is_none());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = dataset(40, 7);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            model: ModelConfig {
                variant: Variant::Nb,
                ..quick(0).model
            },
            ..quick(20)
        };
        match fit(&ds, &cfg) {
            Err(Error::Diverged { iteration, last_good_iteration, .. }) => {
                assert!(iteration >= 1);
                assert_eq!(last_good_iteration, Some(iteration - 1));
            }
            other => panic!("expected divergence, got {:?}", other.map(|f| f.history.len())),
        }
    }
}

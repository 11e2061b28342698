//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ag::{EdgeIndex, Tensor, Var};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::graph::DirectedGraph;
use crate::model::{BalanceState, GiteModel, ModelConfig, PiEtaMode, Variant};
use crate::params::{ParamId, ParamStore, Session};

/// Finite-difference step on 64-bit reals.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes further apart than this mark a non-differentiable point.
pub const KINK_GAP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Entries sitting on a kink, where the analytic value is compared
    /// against the nearer one-sided slope instead of the central difference.
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `loss` against central differences for
/// every entry of every parameter the loss touches. `per_param` caps the
/// entries probed per parameter (spread evenly across the tensor).
pub fn check<F>(name: &str, store: &ParamStore, per_param: Option<usize>, mut loss: F) -> Result<GradReport>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let grads = {
        let mut s = Session::new(store);
        let l = loss(&mut s)?;
        s.backward(l)?
    };
    let mut work = store.clone();
    let mut report = GradReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        kinks: 0,
    };
    let base = eval(store, &mut loss)?;
    for (id, g) in grads.iter() {
        let len = store.get(id).len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < len => (0..k).map(|j| j * len / k).collect(),
            _ => (0..len).collect(),
        };
        for &e in &picks {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + STEP;
            let plus = eval(&work, &mut loss)?;
            work.get_mut(id).data_mut()[e] = orig - STEP;
            let minus = eval(&work, &mut loss)?;
            work.get_mut(id).data_mut()[e] = orig;
            let analytic = g.data()[e];
            let mut err = rel_error(analytic, (plus - minus) / (2.0 * STEP));
            if rel_error(base - minus, plus - base) > KINK_GAP {
                // second-order one-sided slopes, valid when the kink sits at `orig`
                work.get_mut(id).data_mut()[e] = orig + 2.0 * STEP;
                let plus2 = eval(&work, &mut loss)?;
                work.get_mut(id).data_mut()[e] = orig - 2.0 * STEP;
                let minus2 = eval(&work, &mut loss)?;
                work.get_mut(id).data_mut()[e] = orig;
                let left = (3.0 * base - 4.0 * minus + minus2) / (2.0 * STEP);
                let right = (4.0 * plus - 3.0 * base - plus2) / (2.0 * STEP);
                if rel_error(left, right) > KINK_GAP {
                    report.kinks += 1;
                    err = err.min(rel_error(analytic, left)).min(rel_error(analytic, right));
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), e));
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(store);
    let l = loss(&mut s)?;
    Ok(s.value(l).item())
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Values bounded away from zero so no sample straddles a ReLU kink.
fn random_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Reduces any tensor to a scalar through a fixed random projection, so
/// symmetric cancellations cannot hide a wrong gradient.
fn readout(s: &mut Session, v: Var, seed: u64) -> Result<Var> {
    let t = s.value(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.rows(), t.cols());
    s.tape.dot_const(v, Arc::new(w))
}

fn small_graph() -> Arc<EdgeIndex> {
    let pairs = [(0, 0), (1, 0), (2, 0), (1, 1), (3, 1), (2, 2), (0, 2), (3, 3), (1, 3), (2, 3)];
    Arc::new(EdgeIndex::new(4, &pairs).expect("valid edges"))
}

/// Runs the check for every tape primitive on random O(1) inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut add = |name: &str, tensors: Vec<Tensor>, f: &dyn Fn(&mut Session, &[Var]) -> Result<Var>| -> Result<()> {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.insert(format!("in{i}"), t))
            .collect::<Result<_>>()?;
        let r = check(name, &store, None, |s| {
            let vars: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect::<Result<_>>()?;
            let out = f(s, &vars)?;
            if s.value(out).len() == 1 {
                Ok(out)
            } else {
                readout(s, out, 99)
            }
        })?;
        reports.push(r);
        Ok(())
    };

    add("matmul", vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], &|s, v| s.tape.matmul(v[0], v[1]))?;
    add("add", vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)], &|s, v| s.tape.add(v[0], v[1]))?;
    add("sub", vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)], &|s, v| s.tape.sub(v[0], v[1]))?;
    add("mul", vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)], &|s, v| s.tape.mul(v[0], v[1]))?;
    add("add_row", vec![random(&mut rng, 4, 3), random(&mut rng, 1, 3)], &|s, v| s.tape.add_row(v[0], v[1]))?;
    add("affine", vec![random(&mut rng, 3, 3)], &|s, v| s.tape.affine(v[0], -1.7, 0.3))?;
    add("mul_scalar", vec![random(&mut rng, 3, 2), random(&mut rng, 1, 1)], &|s, v| {
        s.tape.mul_scalar(v[0], v[1])
    })?;
    add("mul_col", vec![random(&mut rng, 4, 3), random(&mut rng, 4, 1)], &|s, v| s.tape.mul_col(v[0], v[1]))?;
    let mask = Arc::new(random(&mut rng, 3, 3));
    add("mul_const", vec![random(&mut rng, 3, 3)], &move |s, v| s.tape.mul_const(v[0], mask.clone()))?;
    add(
        "concat_cols",
        vec![random(&mut rng, 3, 2), random(&mut rng, 3, 1), random(&mut rng, 3, 3)],
        &|s, v| s.tape.concat_cols(v),
    )?;
    let idx = Arc::new(vec![2, 0, 2, 1, 3]);
    add("gather_rows", vec![random(&mut rng, 4, 3)], &move |s, v| s.tape.gather_rows(v[0], idx.clone()))?;
    add("relu", vec![random_off_kink(&mut rng, 4, 3)], &|s, v| s.tape.relu(v[0]))?;
    add("leaky_relu", vec![random_off_kink(&mut rng, 4, 3)], &|s, v| s.tape.leaky_relu(v[0], 0.2))?;
    add("sigmoid", vec![random(&mut rng, 4, 3)], &|s, v| s.tape.sigmoid(v[0]))?;
    let groups = Arc::new(vec![0, 0, 1, 0, 1, 2, 1, 0]);
    add("softmax_group", vec![random(&mut rng, 8, 1)], &move |s, v| {
        s.tape.softmax_group(v[0], groups.clone(), 3)
    })?;
    // softmax over one 4-element group, dotted with a vector
    let values = Arc::new(random(&mut rng, 4, 1));
    add("softmax_dot", vec![random(&mut rng, 4, 1)], &move |s, v| {
        let a = s.tape.softmax_group(v[0], Arc::new(vec![0; 4]), 1)?;
        s.tape.dot_const(a, values.clone())
    })?;
    add("layer_norm", vec![random(&mut rng, 3, 5)], &|s, v| s.tape.layer_norm(v[0], 1e-5))?;
    let target = Arc::new(random(&mut rng, 3, 1));
    add("mse", vec![random(&mut rng, 3, 3), random(&mut rng, 3, 1)], &move |s, v| {
        let pred = s.tape.matmul(v[0], v[1])?;
        s.tape.mse(pred, target.clone())
    })?;
    add("l2_norm_sq", vec![random(&mut rng, 3, 2), random(&mut rng, 1, 4)], &|s, v| s.tape.l2_norm_sq(v))?;
    add("sum", vec![random(&mut rng, 3, 4)], &|s, v| s.tape.sum(v[0]))?;
    let g = small_graph();
    let e = g.num_edges();
    let gi = g.clone();
    add("neighbor_sum", vec![random(&mut rng, 4, 3), random(&mut rng, e, 1)], &move |s, v| {
        s.tape.neighbor_sum(v[0], Some(v[1]), gi.clone())
    })?;
    let gi = g.clone();
    add("neighbor_sum_unweighted", vec![random(&mut rng, 4, 3)], &move |s, v| {
        s.tape.neighbor_sum(v[0], None, gi.clone())
    })?;
    let gi = g.clone();
    let groups = Arc::new(g.dst().to_vec());
    add("neighbor_mix", vec![random(&mut rng, 4, 3), random(&mut rng, e, 1)], &move |s, v| {
        let w = s.tape.softmax_group(v[1], groups.clone(), 4)?;
        s.tape.neighbor_mix(v[0], w, gi.clone())
    })?;
    let gi = g.clone();
    add("edge_dot", vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)], &move |s, v| {
        s.tape.edge_dot(v[0], v[1], gi.clone())
    })?;
    add("pairwise_sq_dist", vec![random(&mut rng, 4, 3), random(&mut rng, 5, 3)], &|s, v| {
        s.tape.pairwise_sq_dist(v[0], v[1])
    })?;
    let c = Arc::new(random(&mut rng, 3, 3));
    add("dot_const", vec![random(&mut rng, 3, 3)], &move |s, v| s.tape.dot_const(v[0], c.clone()))?;
    Ok(reports)
}

/// A six-unit directed graph with two covariates, every unit in training.
pub fn six_node_dataset() -> Dataset {
    let edges = [(1, 0), (2, 0), (3, 1), (0, 2), (4, 3), (5, 3), (2, 5), (1, 4)];
    let g = DirectedGraph::from_edge_list(&edges, 6).expect("valid edges");
    let x = Tensor::matrix(
        6,
        2,
        vec![0.5, -1.0, 1.2, 0.3, -0.7, 0.9, 0.1, 0.4, -1.5, 0.8, 0.6, -0.2],
    )
    .expect("6x2");
    let mut ds = Dataset::new(
        g,
        x,
        vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        vec![1.3, -0.4, 2.2, 0.1, 1.7, -1.1],
        None,
    )
    .expect("consistent toy data");
    ds.split = Some(Split {
        train: (0..6).collect(),
        val: vec![],
        test: vec![],
    });
    ds
}

/// Checks the full training loss of a small model on [`six_node_dataset`].
///
/// Transport plans are solved once and then held fixed, so every perturbed
/// evaluation sees the same plan the analytic gradient assumes.
pub fn total_loss_check(variant: Variant, pi_eta: PiEtaMode, seed: u64) -> Result<GradReport> {
    let ds = six_node_dataset();
    let cfg = ModelConfig {
        hidden: 4,
        layers: 2,
        dropout: 0.0,
        pi_eta,
        beta: 0.2,
        lambda: 0.01,
        variant,
        ..ModelConfig::default()
    };
    let model = GiteModel::new(cfg, &ds, seed)?;
    let inputs = model.inputs(&ds)?;
    let batch = model.batch(&ds, &ds.split()?.train);
    let mut balance = BalanceState::default();
    {
        let mut s = Session::new(&model.params);
        model.total_loss(&mut s, &inputs, &batch, &mut balance, None)?;
    }
    balance.frozen = true;
    check(&format!("total_loss[{variant},{pi_eta}]"), &model.params, None, |s| {
        Ok(model.total_loss(s, &inputs, &batch, &mut balance, None)?.total)
    })
}

/// The model configurations covered by [`total_loss_check`] in the full suite.
pub const TOTAL_LOSS_CASES: [(Variant, PiEtaMode); 4] = [
    (Variant::Full, PiEtaMode::Fixed(1.0)),
    (Variant::Full, PiEtaMode::Learnable),
    (Variant::V, PiEtaMode::Fixed(1.0)),
    (Variant::Bs, PiEtaMode::Fixed(1.0)),
];

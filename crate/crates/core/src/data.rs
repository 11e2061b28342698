//! Datasets: the synthetic interference simulator, CSV ingestion, random
//! splits and outcome normalization.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ag::Tensor;
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;

pub const EDGES_FILE: &str = "edges.tsv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const TAU_FILE: &str = "tau.csv";

/// Index sets of one random partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl Split {
    pub fn part(&self, p: SplitPart) -> &[usize] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// 70/15/15 partition of a seeded permutation: train and validation sizes
/// are floored and the test set takes the remainder.
pub fn split(n: usize, seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::Config(format!("split needs at least 10 units, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let take = |range: std::ops::Range<usize>| {
        let mut v = perm[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// Affine z-score map `(y - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YNorm {
    pub mean: f64,
    pub std: f64,
}

impl YNorm {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Population statistics; a constant sample keeps unit scale.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: DirectedGraph,
    /// `n x c` covariates.
    pub x: Tensor,
    /// Treatments, each exactly 0.0 or 1.0.
    pub t: Vec<f64>,
    /// Outcomes, normalized by `y_norm` when present.
    pub y: Vec<f64>,
    /// True effects in the original outcome scale.
    pub tau: Option<Vec<f64>>,
    /// The effects came from the simulator.
    pub simulated: bool,
    pub split: Option<Split>,
    pub y_norm: Option<YNorm>,
}

impl Dataset {
    pub fn new(graph: DirectedGraph, x: Tensor, t: Vec<f64>, y: Vec<f64>, tau: Option<Vec<f64>>) -> Result<Self> {
        let n = graph.num_nodes();
        let check = |what: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} has {len} rows, graph has {n} nodes")))
            }
        };
        check("covariates", x.rows())?;
        check("treatments", t.len())?;
        check("outcomes", y.len())?;
        if let Some(tau) = &tau {
            check("tau", tau.len())?;
        }
        if let Some(i) = t.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config(format!("treatment of unit {i} is {}, expected 0 or 1", t[i])));
        }
        if !x.is_finite() || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("covariates and outcomes must be finite".into()));
        }
        Ok(Self {
            graph,
            x,
            t,
            y,
            tau,
            simulated: false,
            split: None,
            y_norm: None,
        })
    }

    pub fn num_units(&self) -> usize {
        self.t.len()
    }

    pub fn num_covariates(&self) -> usize {
        self.x.cols()
    }

    pub fn with_split(mut self, seed: u64) -> Result<Self> {
        self.split = Some(split(self.num_units(), seed)?);
        Ok(self)
    }

    pub fn split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no split".into()))
    }

    /// Replaces `y` by its z-score; the map is kept for inversion.
    pub fn zscore_outcomes(&mut self) {
        if self.y_norm.is_some() {
            return;
        }
        let norm = YNorm::fit(&self.y);
        for v in &mut self.y {
            *v = norm.apply(*v);
        }
        self.y_norm = Some(norm);
    }

    /// Outcomes on the original scale.
    pub fn raw_outcomes(&self) -> Vec<f64> {
        match self.y_norm {
            Some(n) => self.y.iter().map(|&v| n.invert(v)).collect(),
            None => self.y.clone(),
        }
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().sum::<f64>() / self.num_units().max(1) as f64
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.graph.write_edge_file(&dir.join(EDGES_FILE))?;
        let mut w = csv::Writer::from_path(dir.join(COVARIATES_FILE))?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.num_covariates()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.num_units() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(OUTCOMES_FILE))?;
        w.write_record(["id", "t", "y"])?;
        for i in 0..self.num_units() {
            w.write_record([i.to_string(), self.t[i].to_string(), self.y[i].to_string()])?;
        }
        w.flush()?;
        if let Some(tau) = &self.tau {
            let mut w = csv::Writer::from_path(dir.join(TAU_FILE))?;
            w.write_record(["id", "tau"])?;
            for (i, v) in tau.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Reads the files written by [`Dataset::write_dir`]; `tau.csv` is optional.
    pub fn read_dir(dir: &Path, zscore: bool) -> Result<Self> {
        let tau = dir.join(TAU_FILE);
        ingest(
            &dir.join(EDGES_FILE),
            &dir.join(COVARIATES_FILE),
            &dir.join(OUTCOMES_FILE),
            tau.exists().then_some(tau.as_path()),
            zscore,
        )
    }
}

/// Rows of a headed numeric CSV whose first column is the 0-based id.
fn read_numeric_csv(path: &Path, expected_header: Option<&[&str]>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let label = path.display().to_string();
    let ingest_err = |line: usize, msg: String| Error::Ingest {
        path: label.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(File::open(path)?);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("id") {
        return Err(ingest_err(1, "first column must be `id`".into()));
    }
    if let Some(exp) = expected_header {
        if header != exp {
            return Err(ingest_err(1, format!("expected header {}", exp.join(","))));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ingest_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| ingest_err(line, format!("invalid id {:?}", &rec[0])))?;
        if id != rows.len() {
            return Err(ingest_err(line, format!("expected id {}, got {id}", rows.len())));
        }
        let mut vals = Vec::with_capacity(rec.len() - 1);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| ingest_err(line, format!("column {}: invalid number {field:?}", header[j])))?;
            if !v.is_finite() {
                return Err(ingest_err(line, format!("column {}: non-finite value", header[j])));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

/// Loads a dataset from an edge list and the covariate, outcome and optional effect CSVs.
pub fn ingest(edges: &Path, covariates: &Path, outcomes: &Path, tau: Option<&Path>, zscore: bool) -> Result<Dataset> {
    let (_, xs) = read_numeric_csv(covariates, None)?;
    let n = xs.len();
    let c = xs.first().map_or(0, Vec::len);
    let (_, tys) = read_numeric_csv(outcomes, Some(&["id", "t", "y"]))?;
    let mismatch = |path: &Path, got: usize| Error::Ingest {
        path: path.display().to_string(),
        line: got + 1,
        msg: format!("{got} data rows, covariates have {n}"),
    };
    if tys.len() != n {
        return Err(mismatch(outcomes, tys.len()));
    }
    for (i, row) in tys.iter().enumerate() {
        if row[0] != 0.0 && row[0] != 1.0 {
            return Err(Error::Ingest {
                path: outcomes.display().to_string(),
                line: i + 2,
                msg: format!("treatment {} is not binary", row[0]),
            });
        }
    }
    let tau = match tau {
        Some(p) => {
            let (_, rows) = read_numeric_csv(p, Some(&["id", "tau"]))?;
            if rows.len() != n {
                return Err(mismatch(p, rows.len()));
            }
            Some(rows.into_iter().map(|r| r[0]).collect())
        }
        None => None,
    };
    let graph = DirectedGraph::read_edge_file(edges, n)?;
    let x = Tensor::matrix(n, c, xs.into_iter().flatten().collect())?;
    let (t, y) = tys.into_iter().map(|r| (r[0], r[1])).unzip();
    let mut ds = Dataset::new(graph, x, t, y, tau)?;
    if zscore {
        ds.zscore_outcomes();
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphModel {
    /// Preferential attachment with `mean_degree / 2` links per arriving node,
    /// each stored in both directions.
    PreferentialAttachment { mean_degree: f64 },
    /// Independent directed edges with probability `p`.
    ErdosRenyi { p: f64 },
}

impl FromStr for GraphModel {
    type Err = Error;

    /// `pa:<mean degree>` or `er:<edge probability>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, val) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("graph model {s:?}: expected pa:<deg> or er:<p>")))?;
        let v: f64 = val
            .parse()
            .map_err(|_| Error::Config(format!("graph model {s:?}: bad number")))?;
        match kind {
            "pa" => Ok(Self::PreferentialAttachment { mean_degree: v }),
            "er" => Ok(Self::ErdosRenyi { p: v }),
            _ => Err(Error::Config(format!("unknown graph model {kind:?}"))),
        }
    }
}

impl fmt::Display for GraphModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PreferentialAttachment { mean_degree } => write!(f, "pa:{mean_degree}"),
            Self::ErdosRenyi { p } => write!(f, "er:{p}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLaw {
    Normal,
    Uniform,
}

impl FromStr for WeightLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Config(format!("unknown weight law {s:?} (normal, uniform)"))),
        }
    }
}

impl fmt::Display for WeightLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub covariates: usize,
    pub graph: GraphModel,
    pub weight_law: WeightLaw,
    pub noise_std: f64,
    /// Z-score the propagated interference terms before use.
    pub standardize_agg: bool,
    /// Draw fresh edge weights for every propagation hop.
    pub resample_edge_weights: bool,
    /// Multiplier on the effect weights `w_1`; zero removes the treatment effect.
    pub effect_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            covariates: 50,
            graph: GraphModel::PreferentialAttachment { mean_degree: 10.0 },
            weight_law: WeightLaw::Normal,
            noise_std: 1.0,
            standardize_agg: false,
            resample_edge_weights: false,
            effect_scale: 1.0,
            seed: 0,
        }
    }
}

/// Number of one-hop summaries composed into each interference term.
pub const PROPAGATION_HOPS: usize = 3;

/// Intermediate quantities of one simulation, kept for verification.
#[derive(Clone, Debug)]
pub struct SimTrace {
    /// `log(d̃_k) / Σ_all log(d̃)`.
    pub eta: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub t_tilde: Vec<f64>,
    /// Per-hop weights aligned with `graph.edges()`, for the X and T propagations.
    pub edge_weights_x: Vec<Vec<f64>>,
    pub edge_weights_t: Vec<Vec<f64>>,
    pub agg_x: Vec<f64>,
    pub agg_t: Vec<f64>,
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    simulate_traced(cfg).map(|(d, _)| d)
}

pub fn simulate_traced(cfg: &SimConfig) -> Result<(Dataset, SimTrace)> {
    if cfg.n < 2 {
        return Err(Error::Config(format!("simulation needs n >= 2, got {}", cfg.n)));
    }
    if cfg.covariates == 0 {
        return Err(Error::Config("simulation needs at least one covariate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = match cfg.graph {
        GraphModel::PreferentialAttachment { mean_degree } => preferential_attachment(cfg.n, mean_degree, &mut rng)?,
        GraphModel::ErdosRenyi { p } => erdos_renyi(cfg.n, p, &mut rng)?,
    };
    let (n, c) = (cfg.n, cfg.covariates);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let x: Vec<f64> = (0..n * c).map(|_| normal(&mut rng)).collect();
    let mut weights = || -> Vec<f64> {
        (0..c)
            .map(|_| match cfg.weight_law {
                WeightLaw::Normal => normal(&mut rng),
                WeightLaw::Uniform => rng.random_range(-1.0..1.0),
            })
            .collect()
    };
    let (w_t, w_g, w_x, mut w_1) = (weights(), weights(), weights(), weights());
    for w in &mut w_1 {
        *w *= cfg.effect_scale;
    }
    let dot = |w: &[f64], i: usize| -> f64 { w.iter().zip(&x[i * c..(i + 1) * c]).map(|(a, b)| a * b).sum() };

    let log_deg: Vec<f64> = graph.deg_tilde().iter().map(|&d| (d as f64).ln()).collect();
    let total: f64 = log_deg.iter().sum();
    let eta: Vec<f64> = if total > 0.0 {
        log_deg.iter().map(|l| l / total).collect()
    } else {
        log::warn!("graph has no edges; degree rescaling is zero");
        vec![0.0; n]
    };
    let x_tilde: Vec<f64> = (0..n).map(|i| dot(&w_g, i) * (1.0 + eta[i])).collect();

    let m = graph.num_edges();
    let hop_weights = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        let first: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let mut all = vec![first];
        for _ in 1..PROPAGATION_HOPS {
            let next = if cfg.resample_edge_weights {
                (0..m).map(|_| rng.random::<f64>()).collect()
            } else {
                all[0].clone()
            };
            all.push(next);
        }
        all
    };
    let edge_weights_x = hop_weights(&mut rng);
    let mut agg_x = propagate(&graph, &edge_weights_x, &x_tilde);
    if cfg.standardize_agg {
        standardize(&mut agg_x);
    }

    let mut t = vec![0.0; n];
    for i in 0..n {
        let p = sigmoid(0.5 * dot(&w_t, i) + 0.5 * agg_x[i]) + cfg.noise_std * normal(&mut rng);
        t[i] = if rng.random::<f64>() < p.clamp(0.0, 1.0) { 1.0 } else { 0.0 };
    }
    let t_tilde: Vec<f64> = (0..n).map(|i| t[i] * (1.0 + eta[i])).collect();
    let edge_weights_t = if cfg.resample_edge_weights {
        hop_weights(&mut rng)
    } else {
        edge_weights_x.clone()
    };
    let mut agg_t = propagate(&graph, &edge_weights_t, &t_tilde);
    if cfg.standardize_agg {
        standardize(&mut agg_t);
    }

    let tau: Vec<f64> = (0..n).map(|i| dot(&w_1, i)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| dot(&w_x, i) + t[i] * tau[i] + agg_x[i] + agg_t[i] + cfg.noise_std * normal(&mut rng))
        .collect();

    let mut ds = Dataset::new(graph, Tensor::matrix(n, c, x)?, t, y, Some(tau))?;
    ds.simulated = true;
    let trace = SimTrace {
        eta,
        x_tilde,
        t_tilde,
        edge_weights_x,
        edge_weights_t,
        agg_x,
        agg_t,
    };
    Ok((ds, trace))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn standardize(v: &mut [f64]) {
    let norm = YNorm::fit(v);
    for x in v.iter_mut() {
        *x = norm.apply(*x);
    }
}

/// `h_i ← Σ_{k∈N_i} e_ik h_k` once per entry of `hops`, whose weights follow `graph.edges()`.
pub fn propagate(graph: &DirectedGraph, hops: &[Vec<f64>], h0: &[f64]) -> Vec<f64> {
    let mut h = h0.to_vec();
    for weights in hops {
        let mut next = vec![0.0; h.len()];
        for (&(src, dst), &e) in graph.edges().iter().zip(weights) {
            next[dst] += e * h[src];
        }
        h = next;
    }
    h
}

fn preferential_attachment(n: usize, mean_degree: f64, rng: &mut ChaCha8Rng) -> Result<DirectedGraph> {
    if !(mean_degree >= 0.0) {
        return Err(Error::Config(format!("mean degree must be non-negative, got {mean_degree}")));
    }
    let m = ((mean_degree / 2.0).round() as usize).max(1);
    let seed_size = (m + 1).min(n);
    let mut pairs = Vec::new();
    // each endpoint appears once per incident link, so uniform draws are degree-proportional
    let mut endpoints = Vec::new();
    for a in 0..seed_size {
        for b in a + 1..seed_size {
            pairs.push((a, b));
            pairs.push((b, a));
            endpoints.push(a);
            endpoints.push(b);
        }
    }
    for v in seed_size..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(m);
        while chosen.len() < m.min(v) {
            let u = endpoints[rng.random_range(0..endpoints.len())];
            if !chosen.contains(&u) {
                chosen.push(u);
            }
        }
        for &u in &chosen {
            pairs.push((u, v));
            pairs.push((v, u));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    DirectedGraph::from_edge_list(&pairs, n)
}

fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<DirectedGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability must lie in [0, 1], got {p}")));
    }
    let mut pairs = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if s != d && rng.random::<f64>() < p {
                pairs.push((s, d));
            }
        }
    }
    DirectedGraph::from_edge_list(&pairs, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(E ∘ Ã)^hops h` with dense matrices, `Ã[i][k] = 1` for `k → i`.
    fn dense_oracle(graph: &DirectedGraph, hops: &[Vec<f64>], h0: &[f64]) -> Vec<f64> {
        let n = graph.num_nodes();
        let mut h = h0.to_vec();
        for weights in hops {
            let mut m = vec![vec![0.0; n]; n];
            for (&(s, d), &e) in graph.edges().iter().zip(weights) {
                m[d][s] = e;
            }
            h = (0..n).map(|i| (0..n).map(|k| m[i][k] * h[k]).sum()).collect();
        }
        h
    }

    fn small(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n,
            covariates: 5,
            graph: GraphModel::PreferentialAttachment { mean_degree: 4.0 },
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn split_sizes() {
        let s = split(100, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s = split(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(37, 9).unwrap(), split(37, 9).unwrap());
        assert_ne!(split(37, 9).unwrap(), split(37, 10).unwrap());
        assert!(split(9, 0).is_err());
    }

    #[test]
    fn znorm_round_trip() {
        let y = [1.5, -2.0, 7.25, 0.0, 3.0];
        let n = YNorm::fit(&y);
        for v in y {
            assert!((n.invert(n.apply(v)) - v).abs() < 1e-12);
        }
        let z: Vec<f64> = y.iter().map(|&v| n.apply(v)).collect();
        let back = YNorm::fit(&z);
        assert!(back.mean.abs() < 1e-12 && (back.std - 1.0).abs() < 1e-12);
        assert_eq!(YNorm::fit(&[2.0, 2.0]).std, 1.0);
    }

    #[test]
    fn sparse_propagation_matches_dense_oracle() {
        for (n, seed) in [(50, 1), (200, 2)] {
            let (ds, tr) = simulate_traced(&small(n, seed)).unwrap();
            let ox = dense_oracle(&ds.graph, &tr.edge_weights_x, &tr.x_tilde);
            let ot = dense_oracle(&ds.graph, &tr.edge_weights_t, &tr.t_tilde);
            for i in 0..n {
                assert!((ox[i] - tr.agg_x[i]).abs() <= 1e-9 * ox[i].abs().max(1.0));
                assert!((ot[i] - tr.agg_t[i]).abs() <= 1e-9 * ot[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn edge_weights_reused_unless_resampled() {
        let (_, tr) = simulate_traced(&small(30, 4)).unwrap();
        assert!(tr.edge_weights_x.iter().all(|w| w == &tr.edge_weights_x[0]));
        assert_eq!(tr.edge_weights_x, tr.edge_weights_t);
        let cfg = SimConfig {
            resample_edge_weights: true,
            ..small(30, 4)
        };
        let (_, tr) = simulate_traced(&cfg).unwrap();
        assert_ne!(tr.edge_weights_x[0], tr.edge_weights_x[1]);
    }

    #[test]
    fn edge_free_graph_has_no_interference() {
        let cfg = SimConfig {
            graph: GraphModel::ErdosRenyi { p: 0.0 },
            noise_std: 0.0,
            ..small(20, 3)
        };
        let (ds, tr) = simulate_traced(&cfg).unwrap();
        assert_eq!(ds.graph.num_edges(), 0);
        assert!(tr.agg_x.iter().chain(&tr.agg_t).all(|&v| v == 0.0));
        assert!(tr.eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_effect_weights_give_zero_tau() {
        let cfg = SimConfig {
            effect_scale: 0.0,
            ..small(40, 5)
        };
        let ds = simulate(&cfg).unwrap();
        let tau = ds.tau.as_ref().unwrap();
        assert!(tau.iter().all(|&v| v == 0.0));
        let zero = vec![0.0; tau.len()];
        assert_eq!(crate::metrics::rmse(&zero, tau).unwrap(), 0.0);
    }

    #[test]
    fn simulation_is_deterministic_with_overlap() {
        let a = simulate(&small(100, 7)).unwrap();
        assert_eq!(a, simulate(&small(100, 7)).unwrap());
        assert_ne!(a, simulate(&small(100, 8)).unwrap());
        for seed in 0..10 {
            let cfg = SimConfig {
                n: 300,
                seed,
                ..SimConfig::default()
            };
            let f = simulate(&cfg).unwrap().treated_fraction();
            assert!(f > 0.0 && f < 1.0, "seed {seed}: treated fraction {f}");
        }
    }

    #[test]
    fn preferential_attachment_mean_degree() {
        let cfg = SimConfig {
            n: 2000,
            graph: GraphModel::PreferentialAttachment { mean_degree: 20.0 },
            ..small(2000, 1)
        };
        let ds = simulate(&cfg).unwrap();
        let mean = ds.graph.num_edges() as f64 / 2000.0;
        assert!((mean - 20.0).abs() < 0.5, "mean in-degree {mean}");
        let max = *ds.graph.deg_tilde().iter().max().unwrap();
        assert!(max > 100, "hub degree {max}");
    }

    #[test]
    fn toy_files_round_trip() {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (2, 1)], 3).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, -2.5, 1e-17, 3.0, 0.3333333333333333, 7.0]).unwrap();
        let ds = Dataset::new(g, x, vec![1.0, 0.0, 1.0], vec![0.7, -1.25, 2.0], Some(vec![0.5, 0.25, -1.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path(), false).unwrap();
        assert_eq!(back, ds);
        let z = Dataset::read_dir(dir.path(), true).unwrap();
        for (a, b) in z.raw_outcomes().iter().zip(&ds.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        let g = DirectedGraph::from_edge_list(&[(0, 1)], 2).unwrap();
        let ds = Dataset::new(g, Tensor::zeros(2, 1), vec![1.0, 0.0], vec![0.0, 1.0], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let outcomes = dir.path().join(OUTCOMES_FILE);
        std::fs::write(&outcomes, "id,t,y\n0,1,0.5\n1,2,0.1\n").unwrap();
        match Dataset::read_dir(dir.path(), false) {
            Err(Error::Ingest { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("binary"));
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
        std::fs::write(&outcomes, "id,t,y\n0,1,0.5\n").unwrap();
        assert!(matches!(Dataset::read_dir(dir.path(), false), Err(Error::Ingest { .. })));
        std::fs::write(&outcomes, "id,t,y\n0,1,0.5\n1,0,1\n").unwrap();
        std::fs::write(dir.path().join(COVARIATES_FILE), "id,f0\n0,1\n1,NaN\n").unwrap();
        match Dataset::read_dir(dir.path(), false) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }
}

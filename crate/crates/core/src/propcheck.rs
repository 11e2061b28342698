//! Executable degree-degeneracy properties on pairs of star networks.
//!
//! Two stars with `m` and `n` leaves pointing at their centers, every node
//! carrying the same vector. Mean, GCN with equal degrees, softmax GAT and
//! max-pool aggregation must give the two centers bitwise-identical outputs.
//! The NIM layer does the same without the amplifier and separates them with
//! it, by the ratio `(1 + π_η log(m+1)/D) / (1 + π_η log(n+1)/D)`.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ag::{Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::layers::{
    log_degree_denominator, nim_forward, Aggregation, AttentionKind, GraphContext, LayerDims, LayerWiring, NimLayer,
    PiEtaValue, GAT_SLOPE,
};
use crate::params::{ParamStore, Session};

/// Relative tolerance on the amplifier ratio.
pub const RATIO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Center outputs are bitwise equal.
    Degenerate,
    Separated,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Degenerate => "degenerate",
            Self::Separated => "separated",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Mean,
    GcnEqualDegree,
    SoftmaxGat,
    MaxPool,
    /// NIM layer with the given amplifier strength.
    Nim { amplified: bool },
}

impl Aggregator {
    pub const ALL: [Aggregator; 6] = [
        Self::Mean,
        Self::GcnEqualDegree,
        Self::SoftmaxGat,
        Self::MaxPool,
        Self::Nim { amplified: false },
        Self::Nim { amplified: true },
    ];

    pub fn expected(self) -> Verdict {
        match self {
            Self::Nim { amplified: true } => Verdict::Separated,
            _ => Verdict::Degenerate,
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::GcnEqualDegree => "gcn_equal_degree",
            Self::SoftmaxGat => "softmax_gat",
            Self::MaxPool => "max_pool",
            Self::Nim { amplified: false } => "nim_pi_eta_0",
            Self::Nim { amplified: true } => "nim_pi_eta_1",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropCase {
    pub m: usize,
    pub n: usize,
    pub aggregator: Aggregator,
    pub expected: Verdict,
    pub observed: Verdict,
    /// Max-abs difference between the two center outputs.
    pub gap: f64,
    pub expected_ratio: Option<f64>,
    pub measured_ratio: Option<f64>,
}

impl PropCase {
    pub fn passed(&self) -> bool {
        if self.observed != self.expected {
            return false;
        }
        match (self.expected_ratio, self.measured_ratio) {
            (Some(e), Some(m)) => (e - m).abs() <= RATIO_TOL * e.abs(),
            (None, None) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropConfig {
    pub dim: usize,
    pub hidden: usize,
    pub attention: AttentionKind,
    pub seed: u64,
}

impl Default for PropConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            hidden: 8,
            attention: AttentionKind::Gat,
            seed: 0,
        }
    }
}

/// Two stars on disjoint node ranges: center `0` with `m` leaves, center `m + 1` with `n` leaves.
pub fn star_pair(m: usize, n: usize) -> Result<(DirectedGraph, usize, usize)> {
    let c2 = m + 1;
    let mut edges: Vec<(usize, usize)> = (1..=m).map(|k| (k, 0)).collect();
    edges.extend((c2 + 1..=c2 + n).map(|k| (k, c2)));
    Ok((DirectedGraph::from_edge_list(&edges, m + n + 2)?, 0, c2))
}

/// Shared random parameters of the reference aggregators.
struct RefParams {
    w: Vec<Vec<f64>>,
    a_dst: Vec<f64>,
    a_src: Vec<f64>,
}

fn project(w: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let h = w[0].len();
    (0..h).map(|j| v.iter().zip(w).map(|(x, row)| x * row[j]).sum()).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// `Σ_k w_k p_k` for weights summing to one, written as `p_i + Σ_{k≠i} w_k (p_k - p_i)`.
fn centered_mix(own: &[f64], neighbors: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let mut out = own.to_vec();
    for (w, p) in neighbors {
        for (o, (pk, pi)) in out.iter_mut().zip(p.iter().zip(own)) {
            *o += w * (pk - pi);
        }
    }
    out
}

fn reference_center(
    agg: Aggregator,
    graph: &DirectedGraph,
    center: usize,
    features: &[Vec<f64>],
    params: &RefParams,
) -> Vec<f64> {
    let neigh = graph.in_neighbors(center);
    let size = (neigh.len() + 1) as f64;
    match agg {
        Aggregator::Mean => {
            let mixed = centered_mix(
                &features[center],
                &neigh.iter().map(|&k| (1.0 / size, features[k].clone())).collect::<Vec<_>>(),
            );
            relu(project(&params.w, &mixed))
        }
        Aggregator::GcnEqualDegree => {
            // every neighbor is given the center's degree, so each weight is 1/√(d̃ d̃)
            let w = 1.0 / (size * size).sqrt();
            let mixed = centered_mix(
                &features[center],
                &neigh.iter().map(|&k| (w, features[k].clone())).collect::<Vec<_>>(),
            );
            relu(project(&params.w, &mixed))
        }
        Aggregator::SoftmaxGat => {
            let p_c = project(&params.w, &features[center]);
            let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
            let score = |p_k: &[f64]| {
                let s = dot(&params.a_dst, &p_c) + dot(&params.a_src, p_k);
                if s > 0.0 {
                    s
                } else {
                    GAT_SLOPE * s
                }
            };
            let projected: Vec<Vec<f64>> = neigh.iter().map(|&k| project(&params.w, &features[k])).collect();
            let mut scores = vec![score(&p_c)];
            scores.extend(projected.iter().map(|p| score(p)));
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mixed = centered_mix(
                &p_c,
                &projected
                    .into_iter()
                    .zip(&exps[1..])
                    .map(|(p, e)| (e / total, p))
                    .collect::<Vec<_>>(),
            );
            relu(mixed)
        }
        Aggregator::MaxPool => {
            let mut out = relu(project(&params.w, &features[center]));
            for &k in neigh {
                let h = relu(project(&params.w, &features[k]));
                for (o, v) in out.iter_mut().zip(h) {
                    *o = o.max(v);
                }
            }
            out
        }
        Aggregator::Nim { .. } => unreachable!("NIM runs on the tape"),
    }
}

/// Center `z_X` after one NIM layer with every node training.
fn nim_centers(
    graph: &DirectedGraph,
    centers: (usize, usize),
    feature: &[f64],
    pi_eta: f64,
    cfg: &PropConfig,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = graph.num_nodes();
    let all: Vec<usize> = (0..n).collect();
    let denom = log_degree_denominator(graph, &all);
    let ctx = GraphContext::new(graph, denom);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let dims = LayerDims {
        s: 1,
        x: cfg.dim,
        t: 1,
        hidden: cfg.hidden,
    };
    let layer = NimLayer::new(&mut store, "nim", dims, cfg.attention, &mut rng)?;
    let mut s = Session::new(&store);
    let x: Vec<f64> = (0..n).flat_map(|_| feature.iter().copied()).collect();
    let x = s.tape.constant(Tensor::matrix(n, cfg.dim, x)?)?;
    let t = s.tape.constant(Tensor::filled(n, 1, 1.0))?;
    let wiring = LayerWiring {
        aggregation: Aggregation::Attention,
        structure_branch: true,
        pi_eta: Some(PiEtaValue::Fixed(pi_eta)),
    };
    let state = nim_forward(&mut s, x, x, t, std::slice::from_ref(&layer), &ctx, wiring)?;
    let zx: Var = state.last().z_x;
    let v = s.value(zx);
    Ok((v.row(centers.0).to_vec(), v.row(centers.1).to_vec(), denom))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs every aggregator on every `(m, n)` star pair.
pub fn run_propcheck(pairs: &[(usize, usize)], cfg: &PropConfig) -> Result<Vec<PropCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // a positive shared feature keeps the ReLU outputs away from all-zero
    let feature: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(0.2..1.0)).collect();
    let bound = 1.0 / (cfg.dim as f64).sqrt();
    let params = RefParams {
        w: (0..cfg.dim)
            .map(|_| (0..cfg.hidden).map(|_| rng.random_range(-bound..bound)).collect())
            .collect(),
        a_dst: (0..cfg.hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
        a_src: (0..cfg.hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut out = Vec::new();
    for &(m, n) in pairs {
        if m == n {
            return Err(Error::Config(format!("star sizes must differ, got m = n = {m}")));
        }
        let (graph, ca, cb) = star_pair(m, n)?;
        let features = vec![feature.clone(); graph.num_nodes()];
        for agg in Aggregator::ALL {
            let (a, b, ratios) = match agg {
                Aggregator::Nim { amplified } => {
                    let pi = if amplified { 1.0 } else { 0.0 };
                    let (a, b, d) = nim_centers(&graph, (ca, cb), &feature, pi, cfg)?;
                    let ratios = amplified.then(|| {
                        let lm = ((m + 1) as f64).ln();
                        let ln = ((n + 1) as f64).ln();
                        let expected = (1.0 + pi * lm / d) / (1.0 + pi * ln / d);
                        (expected, norm(&a) / norm(&b))
                    });
                    (a, b, ratios)
                }
                _ => (
                    reference_center(agg, &graph, ca, &features, &params),
                    reference_center(agg, &graph, cb, &features, &params),
                    None,
                ),
            };
            if norm(&b) == 0.0 {
                return Err(Error::Numeric(format!("{agg}: center output is all zero, pick another seed")));
            }
            let bitwise = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            out.push(PropCase {
                m,
                n,
                aggregator: agg,
                expected: agg.expected(),
                observed: if bitwise { Verdict::Degenerate } else { Verdict::Separated },
                gap,
                expected_ratio: ratios.map(|r| r.0),
                measured_ratio: ratios.map(|r| r.1),
            });
        }
    }
    Ok(out)
}

/// The fixed pair plus `count` random distinct pairs with sizes in `1..=max_size`.
pub fn default_pairs(seed: u64, count: usize, max_size: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = vec![(2, 7)];
    while pairs.len() < count + 1 {
        let m = rng.random_range(1..=max_size);
        let n = rng.random_range(1..=max_size);
        if m != n {
            pairs.push((m, n));
        }
    }
    pairs
}

pub fn report_csv(cases: &[PropCase]) -> String {
    let mut out = String::from("m,n,aggregator,expected,observed,gap,expected_ratio,measured_ratio,pass\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in cases {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.m,
            c.n,
            c.aggregator,
            c.expected,
            c.observed,
            c.gap,
            opt(c.expected_ratio),
            opt(c.measured_ratio),
            c.passed()
        );
    }
    out
}

pub fn summary(cases: &[PropCase]) -> String {
    let passed = cases.iter().filter(|c| c.passed()).count();
    let mut out = String::new();
    for c in cases.iter().filter(|c| !c.passed()) {
        let _ = writeln!(
            out,
            "FAIL m={} n={} {}: expected {}, observed {} (gap {:e})",
            c.m, c.n, c.aggregator, c.expected, c.observed, c.gap
        );
    }
    let _ = writeln!(out, "{passed}/{} property cases pass", cases.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_versus_seven() {
        let cases = run_propcheck(&[(2, 7)], &PropConfig::default()).unwrap();
        assert_eq!(cases.len(), 6);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
        }
        let amp = cases.iter().find(|c| c.aggregator == Aggregator::Nim { amplified: true }).unwrap();
        let d = 3f64.ln() + 8f64.ln();
        let expected = (1.0 + 3f64.ln() / d) / (1.0 + 8f64.ln() / d);
        assert!((amp.expected_ratio.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn random_pairs_and_qk_attention() {
        let pairs = default_pairs(4, 4, 20);
        assert_eq!(pairs.len(), 5);
        for attention in [AttentionKind::Gat, AttentionKind::Qk] {
            let cfg = PropConfig {
                attention,
                ..PropConfig::default()
            };
            let cases = run_propcheck(&pairs, &cfg).unwrap();
            assert!(cases.iter().all(PropCase::passed), "{}", summary(&cases));
        }
    }

    #[test]
    fn gap_grows_with_degree_contrast() {
        let pairs: Vec<_> = (1..=6).map(|m| (m, 12)).collect();
        let cases = run_propcheck(&pairs, &PropConfig::default()).unwrap();
        let gaps: Vec<f64> = cases
            .iter()
            .filter(|c| c.aggregator == Aggregator::Nim { amplified: true })
            .map(|c| (c.measured_ratio.unwrap() - 1.0).abs())
            .collect();
        // m = 1..6 against n = 12: the log-degree contrast shrinks as m grows
        assert!(gaps.windows(2).all(|w| w[0] > w[1]), "{gaps:?}");
    }

    #[test]
    fn equal_sizes_are_rejected() {
        assert!(run_propcheck(&[(3, 3)], &PropConfig::default()).is_err());
    }

    #[test]
    fn csv_has_a_row_per_case() {
        let cases = run_propcheck(&[(2, 7)], &PropConfig::default()).unwrap();
        let csv = report_csv(&cases);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    }
}

//! Representation layers: covariate MLP, GIN structure encoder, partial
//! attention, dual aggregation with a learnable summary weight, and the
//! degree-based message amplifier, composed into the NIM layer.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ag::{EdgeIndex, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::params::{ParamId, ParamStore, Session};

/// Slope of the LeakyReLU inside GAT scoring.
pub const GAT_SLOPE: f64 = 0.2;

/// Training-mode dropout: Bernoulli keep mask with inverted scaling.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, s: &mut Session, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let t = s.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::matrix(t.rows(), t.cols(), mask)?;
        s.tape.mul_const(x, Arc::new(mask))
    }
}

/// Fully connected stack with ReLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    relu_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        relu_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let weight = store.insert_weight(format!("{prefix}.{i}.w"), fan_in, w, rng)?;
            let bias = store.insert(format!("{prefix}.{i}.b"), Tensor::zeros(1, w))?;
            layers.push((weight, bias));
            fan_in = w;
        }
        Ok(Self { layers, relu_last })
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Dropout, when given, follows every hidden activation.
    pub fn forward(&self, s: &mut Session, x: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (s.param(w)?, s.param(b)?);
            let lin = s.tape.matmul(h, wv)?;
            h = s.tape.add_row(lin, bv)?;
            if i < last || self.relu_last {
                h = s.tape.relu(h)?;
            }
            if i < last {
                if let Some(d) = dropout.as_deref_mut() {
                    h = d.apply(s, h)?;
                }
            }
        }
        Ok(h)
    }
}

/// Structure shared by every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// Edges over `N_i ∪ {i}`.
    pub nbhd: Arc<EdgeIndex>,
    /// Edges over `N_i`.
    pub inbound: Arc<EdgeIndex>,
    pub edge_src: Arc<Vec<usize>>,
    pub edge_dst: Arc<Vec<usize>>,
    /// `1 / |Ñ_i|` on every edge into `i`.
    pub uniform: Arc<Tensor>,
    /// `log(d̃_i) / D` with `D` the training log-degree sum; `None` disables the amplifier.
    pub log_deg_ratio: Option<Arc<Tensor>>,
    pub deg_tilde: Vec<usize>,
}

impl GraphContext {
    /// `denominator` is the training-set sum of `log(d̃)`; zero disables the amplifier.
    pub fn new(graph: &DirectedGraph, denominator: f64) -> Self {
        let nbhd = graph.neighborhood_index();
        let uniform = nbhd
            .dst()
            .iter()
            .map(|&d| 1.0 / graph.deg_tilde()[d] as f64)
            .collect();
        let log_deg_ratio = if denominator > 0.0 {
            let col = graph
                .deg_tilde()
                .iter()
                .map(|&d| (d as f64).ln() / denominator)
                .collect();
            Some(Arc::new(Tensor::column(col)))
        } else {
            log::warn!("every training node has degree 1; message amplifier disabled");
            None
        };
        Self {
            edge_src: Arc::new(nbhd.src().to_vec()),
            edge_dst: Arc::new(nbhd.dst().to_vec()),
            uniform: Arc::new(Tensor::column(uniform)),
            inbound: graph.inbound_index(),
            nbhd,
            log_deg_ratio,
            deg_tilde: graph.deg_tilde().to_vec(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nbhd.num_nodes()
    }
}

/// Sum of `log(d̃_i)` over the given (training) nodes.
pub fn log_degree_denominator(graph: &DirectedGraph, nodes: &[usize]) -> f64 {
    nodes.iter().map(|&i| (graph.deg_tilde()[i] as f64).ln()).sum()
}

/// `relu(((1 + π_S) z_i + Σ_{k∈N_i} z_k) W_S)`.
pub fn gin_update(s: &mut Session, z_prev: Var, ctx: &GraphContext, w: Var, pi_s: Var) -> Result<Var> {
    let one_plus = s.tape.affine(pi_s, 1.0, 1.0)?;
    let own = s.tape.mul_scalar(z_prev, one_plus)?;
    let neigh = s.tape.neighbor_sum(z_prev, None, ctx.inbound.clone())?;
    let pre = s.tape.add(own, neigh)?;
    let lin = s.tape.matmul(pre, w)?;
    s.tape.relu(lin)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionKind {
    #[default]
    Gat,
    Qk,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Self::Gat),
            "qk" => Ok(Self::Qk),
            other => Err(Error::Config(format!("unknown attention kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gat => "gat",
            Self::Qk => "qk",
        })
    }
}

/// Parameters of one partial attention mechanism.
#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    /// `LeakyReLU(wᵀ[W p_i ∥ W p_k])`, with `w` split into its `i` and `k` halves.
    Gat { w: ParamId, a_dst: ParamId, a_src: ParamId },
    /// `(W_Q p_i)·(W_K p_k) / √c_K`.
    Qk { wq: ParamId, wk: ParamId, dim: usize },
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Gat => {
                let bound = 1.0 / ((2 * hidden) as f64).sqrt();
                Self::Gat {
                    w: store.insert_weight(format!("{prefix}.w"), in_dim, hidden, rng)?,
                    a_dst: store.insert_uniform(format!("{prefix}.a_dst"), hidden, 1, bound, rng)?,
                    a_src: store.insert_uniform(format!("{prefix}.a_src"), hidden, 1, bound, rng)?,
                }
            }
            AttentionKind::Qk => Self::Qk {
                wq: store.insert_weight(format!("{prefix}.wq"), in_dim, hidden, rng)?,
                wk: store.insert_weight(format!("{prefix}.wk"), in_dim, hidden, rng)?,
                dim: hidden,
            },
        })
    }

    /// Raw score `a(p_i, p_k)` for every edge `k -> i` of `Ñ`, as an `E x 1` column.
    pub fn scores(&self, s: &mut Session, p: Var, ctx: &GraphContext) -> Result<Var> {
        match *self {
            Self::Gat { w, a_dst, a_src } => {
                let (wv, ad, asrc) = (s.param(w)?, s.param(a_dst)?, s.param(a_src)?);
                let proj = s.tape.matmul(p, wv)?;
                let sd = s.tape.matmul(proj, ad)?;
                let ss = s.tape.matmul(proj, asrc)?;
                let ed = s.tape.gather_rows(sd, ctx.edge_dst.clone())?;
                let es = s.tape.gather_rows(ss, ctx.edge_src.clone())?;
                let raw = s.tape.add(ed, es)?;
                s.tape.leaky_relu(raw, GAT_SLOPE)
            }
            Self::Qk { wq, wk, dim } => {
                let (q, k) = (s.param(wq)?, s.param(wk)?);
                let pq = s.tape.matmul(p, q)?;
                let pk = s.tape.matmul(p, k)?;
                let dot = s.tape.edge_dot(pq, pk, ctx.nbhd.clone())?;
                s.tape.scale(dot, 1.0 / (dim as f64).sqrt())
            }
        }
    }
}

/// Softmax of raw scores over each `Ñ_i`.
pub fn normalize_importance(s: &mut Session, raw: Var, ctx: &GraphContext) -> Result<Var> {
    s.tape
        .softmax_group(raw, ctx.edge_dst.clone(), ctx.num_nodes())
}

/// Summary weights `(π̊, 1 - π̊)` with `π̊ = exp(r) / (exp(r) + exp(1 - r))`.
///
/// `π̊ = sigmoid(2r - 1)` and `1 - π̊ = sigmoid(1 - 2r)`; evaluating both
/// sides directly keeps each weight strictly positive where a subtraction
/// would round to zero.
pub fn squash(s: &mut Session, raw: Var) -> Result<(Var, Var)> {
    let up = s.tape.affine(raw, 2.0, -1.0)?;
    let down = s.tape.affine(raw, -2.0, 1.0)?;
    Ok((s.tape.sigmoid(up)?, s.tape.sigmoid(down)?))
}

pub fn squash_value(raw: f64) -> (f64, f64) {
    (
        crate::ag::sigmoid(2.0 * raw - 1.0),
        crate::ag::sigmoid(1.0 - 2.0 * raw),
    )
}

/// How neighbor messages are combined inside a NIM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Softmax-normalized partial attention.
    Attention,
    /// Fixed `1 / |Ñ_i|` weights.
    Uniform,
    /// Unweighted sums over `Ñ_i`.
    Sum,
}

/// `π̊ · relu(agg_in) + (1 - π̊) · relu(agg_st)` for already-projected messages.
pub fn nim_aggregate(
    s: &mut Session,
    v_in: Var,
    v_st: Var,
    alpha_in: Var,
    alpha_st: Var,
    pi_raw: Var,
    ctx: &GraphContext,
) -> Result<Var> {
    let a = s.tape.neighbor_mix(v_in, alpha_in, ctx.nbhd.clone())?;
    let b = s.tape.neighbor_mix(v_st, alpha_st, ctx.nbhd.clone())?;
    combine(s, a, b, pi_raw)
}

fn combine(s: &mut Session, agg_in: Var, agg_st: Var, pi_raw: Var) -> Result<Var> {
    let a = s.tape.relu(agg_in)?;
    let b = s.tape.relu(agg_st)?;
    let (pi, rest) = squash(s, pi_raw)?;
    let left = s.tape.mul_scalar(a, pi)?;
    let right = s.tape.mul_scalar(b, rest)?;
    s.tape.add(left, right)
}

/// The amplifier strength as bound for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum PiEtaValue {
    Fixed(f64),
    Learned(Var),
}

/// `(1 + π_η · log(d̃_i) / D) · z̊_i`; identity when the context disables it.
pub fn amplify(s: &mut Session, z: Var, pi_eta: PiEtaValue, ctx: &GraphContext) -> Result<Var> {
    let Some(ratio) = ctx.log_deg_ratio.as_ref() else {
        return Ok(z);
    };
    let factor = match pi_eta {
        PiEtaValue::Fixed(p) => {
            let col = ratio.data().iter().map(|r| 1.0 + p * r).collect();
            s.tape.constant(Tensor::column(col))?
        }
        PiEtaValue::Learned(p) => {
            let r = s.tape.constant(ratio.as_ref().clone())?;
            let scaled = s.tape.mul_scalar(r, p)?;
            s.tape.affine(scaled, 1.0, 1.0)?
        }
    };
    s.tape.mul_col(z, factor)
}

/// Per-layer wiring switches used by the ablation variants.
#[derive(Clone, Copy, Debug)]
pub struct LayerWiring {
    pub aggregation: Aggregation,
    /// Keep the SPAtt branch and the summary weight.
    pub structure_branch: bool,
    /// `None` skips the amplifier.
    pub pi_eta: Option<PiEtaValue>,
}

/// `(z_S, z_X, z_T)` after one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub z_s: Var,
    pub z_x: Var,
    pub z_t: Var,
}

/// Normalized attention weights produced by one layer (`E x 1` each).
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub in_x: Var,
    pub in_t: Var,
    pub st_x: Option<Var>,
    pub st_t: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NimLayer {
    pub gin_w: ParamId,
    pub gin_pi: ParamId,
    pub att_in_x: Attention,
    pub att_in_t: Attention,
    pub att_st_x: Attention,
    pub att_st_t: Attention,
    pub wx_in: ParamId,
    pub wx_st: ParamId,
    pub wt_in: ParamId,
    pub wt_st: ParamId,
    pub pi_x: ParamId,
    pub pi_t: ParamId,
}

/// Input widths of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub s: usize,
    pub x: usize,
    pub t: usize,
    pub hidden: usize,
}

impl NimLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: LayerDims,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = dims.hidden;
        Ok(Self {
            gin_w: store.insert_weight(format!("{prefix}.gin.w"), dims.s, h, rng)?,
            gin_pi: store.insert(format!("{prefix}.gin.pi"), Tensor::scalar(0.0))?,
            att_in_x: Attention::new(store, &format!("{prefix}.ip_x"), dims.x, h, kind, rng)?,
            att_in_t: Attention::new(store, &format!("{prefix}.ip_t"), dims.x + dims.t, h, kind, rng)?,
            att_st_x: Attention::new(store, &format!("{prefix}.sp_x"), dims.s, h, kind, rng)?,
            att_st_t: Attention::new(store, &format!("{prefix}.sp_t"), dims.s, h, kind, rng)?,
            wx_in: store.insert_weight(format!("{prefix}.wx_in"), dims.x, h, rng)?,
            wx_st: store.insert_weight(format!("{prefix}.wx_st"), dims.x, h, rng)?,
            wt_in: store.insert_weight(format!("{prefix}.wt_in"), dims.t, h, rng)?,
            wt_st: store.insert_weight(format!("{prefix}.wt_st"), dims.t, h, rng)?,
            pi_x: store.insert(format!("{prefix}.pi_x"), Tensor::scalar(0.5))?,
            pi_t: store.insert(format!("{prefix}.pi_t"), Tensor::scalar(0.5))?,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        prev: LayerState,
        ctx: &GraphContext,
        wiring: LayerWiring,
        uniform: Option<Var>,
    ) -> Result<(LayerState, Option<AttentionRecord>)> {
        let (gw, gpi) = (s.param(self.gin_w)?, s.param(self.gin_pi)?);
        let z_s = gin_update(s, prev.z_s, ctx, gw, gpi)?;

        let xt = s.tape.concat_cols(&[prev.z_x, prev.z_t])?;
        let vx_in = self.project(s, prev.z_x, self.wx_in)?;
        let vt_in = self.project(s, prev.z_t, self.wt_in)?;

        let (agg_x, agg_t, record) = match wiring.aggregation {
            Aggregation::Attention => {
                let ax = self.att_in_x.scores(s, prev.z_x, ctx)?;
                let ax = normalize_importance(s, ax, ctx)?;
                let at = self.att_in_t.scores(s, xt, ctx)?;
                let at = normalize_importance(s, at, ctx)?;
                let mx = s.tape.neighbor_mix(vx_in, ax, ctx.nbhd.clone())?;
                let mt = s.tape.neighbor_mix(vt_in, at, ctx.nbhd.clone())?;
                let (mut sx, mut st) = (None, None);
                let (ox, ot) = if wiring.structure_branch {
                    let bx = self.att_st_x.scores(s, prev.z_s, ctx)?;
                    let bx = normalize_importance(s, bx, ctx)?;
                    let bt = self.att_st_t.scores(s, prev.z_s, ctx)?;
                    let bt = normalize_importance(s, bt, ctx)?;
                    sx = Some(bx);
                    st = Some(bt);
                    let vx_st = self.project(s, prev.z_x, self.wx_st)?;
                    let vt_st = self.project(s, prev.z_t, self.wt_st)?;
                    let nx = s.tape.neighbor_mix(vx_st, bx, ctx.nbhd.clone())?;
                    let nt = s.tape.neighbor_mix(vt_st, bt, ctx.nbhd.clone())?;
                    (Some(nx), Some(nt))
                } else {
                    (None, None)
                };
                let record = AttentionRecord {
                    in_x: ax,
                    in_t: at,
                    st_x: sx,
                    st_t: st,
                };
                ((mx, ox), (mt, ot), Some(record))
            }
            Aggregation::Uniform | Aggregation::Sum => {
                let agg = |s: &mut Session, v: Var| -> Result<Var> {
                    match (wiring.aggregation, uniform) {
                        (Aggregation::Uniform, Some(u)) => s.tape.neighbor_mix(v, u, ctx.nbhd.clone()),
                        (Aggregation::Uniform, None) => {
                            Err(Error::Usage("uniform aggregation needs the weight column".into()))
                        }
                        _ => s.tape.neighbor_sum(v, None, ctx.nbhd.clone()),
                    }
                };
                let mx = agg(s, vx_in)?;
                let mt = agg(s, vt_in)?;
                let (ox, ot) = if wiring.structure_branch {
                    let vx_st = self.project(s, prev.z_x, self.wx_st)?;
                    let vt_st = self.project(s, prev.z_t, self.wt_st)?;
                    (Some(agg(s, vx_st)?), Some(agg(s, vt_st)?))
                } else {
                    (None, None)
                };
                ((mx, ox), (mt, ot), None)
            }
        };

        let zx = self.summarize(s, agg_x, self.pi_x)?;
        let zt = self.summarize(s, agg_t, self.pi_t)?;
        let (z_x, z_t) = match wiring.pi_eta {
            Some(p) => (amplify(s, zx, p, ctx)?, amplify(s, zt, p, ctx)?),
            None => (zx, zt),
        };
        Ok((LayerState { z_s, z_x, z_t }, record))
    }

    fn project(&self, s: &mut Session, z: Var, w: ParamId) -> Result<Var> {
        let wv = s.param(w)?;
        s.tape.matmul(z, wv)
    }

    fn summarize(&self, s: &mut Session, agg: (Var, Option<Var>), pi: ParamId) -> Result<Var> {
        match agg {
            (a, Some(b)) => {
                let p = s.param(pi)?;
                combine(s, a, b, p)
            }
            (a, None) => s.tape.relu(a),
        }
    }
}

/// Every per-layer representation produced by one forward pass.
#[derive(Clone, Debug)]
pub struct NimState {
    /// Covariate representation from the MLP encoder.
    pub z: Var,
    /// `layers[0]` is the initialization `(1, X, T)`.
    pub layers: Vec<LayerState>,
    pub attention: Vec<AttentionRecord>,
}

impl NimState {
    pub fn last(&self) -> LayerState {
        *self.layers.last().expect("state holds the initial layer")
    }
}

/// Runs `layers` on top of the initial state `z_S = 1`, `z_X = X`, `z_T = T`.
pub fn nim_forward(
    s: &mut Session,
    z: Var,
    x: Var,
    t: Var,
    layers: &[NimLayer],
    ctx: &GraphContext,
    wiring: LayerWiring,
) -> Result<NimState> {
    let n = ctx.num_nodes();
    let ones = s.tape.constant(Tensor::filled(n, 1, 1.0))?;
    let mut state = LayerState { z_s: ones, z_x: x, z_t: t };
    let uniform = match wiring.aggregation {
        Aggregation::Uniform => Some(s.tape.constant(ctx.uniform.as_ref().clone())?),
        _ => None,
    };
    let mut all = vec![state];
    let mut attention = Vec::new();
    for layer in layers {
        let (next, record) = layer.forward(s, state, ctx, wiring, uniform)?;
        if let Some(r) = record {
            attention.push(r);
        }
        all.push(next);
        state = next;
    }
    Ok(NimState {
        z,
        layers: all,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn star(leaves: usize) -> DirectedGraph {
        let edges: Vec<_> = (1..=leaves).map(|k| (k, 0)).collect();
        DirectedGraph::from_edge_list(&edges, leaves + 1).unwrap()
    }

    fn full_wiring(pi_eta: f64) -> LayerWiring {
        LayerWiring {
            aggregation: Aggregation::Attention,
            structure_branch: true,
            pi_eta: Some(PiEtaValue::Fixed(pi_eta)),
        }
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", 3, &[4, 4, 2], true, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::new(&store);
        let x = s.tape.constant(Tensor::filled(5, 3, 1.7)).unwrap();
        let out = mlp.forward(&mut s, x, None).unwrap();
        assert!(s.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_layer_is_relu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", 2, &[2], true, &mut rng).unwrap();
        *store.get_mut(mlp.layers()[0].0) = Tensor::identity(2);
        let mut s = Session::new(&store);
        let x = s
            .tape
            .constant(Tensor::matrix(2, 2, vec![1.0, -2.0, -0.5, 3.0]).unwrap())
            .unwrap();
        let out = mlp.forward(&mut s, x, None).unwrap();
        assert_eq!(s.value(out).data(), &[1.0, 0.0, 0.0, 3.0]);
    }

    fn gin_eval(graph: &DirectedGraph, w: f64) -> Vec<f64> {
        let ctx = GraphContext::new(graph, 1.0);
        let mut store = ParamStore::new();
        let wid = store.insert("w", Tensor::scalar(w)).unwrap();
        let pid = store.insert("pi", Tensor::scalar(0.0)).unwrap();
        let mut s = Session::new(&store);
        let z = s.tape.constant(Tensor::filled(graph.num_nodes(), 1, 1.0)).unwrap();
        let (wv, pv) = (s.param(wid).unwrap(), s.param(pid).unwrap());
        let out = gin_update(&mut s, z, &ctx, wv, pv).unwrap();
        s.value(out).data().to_vec()
    }

    #[test]
    fn gin_hand_values() {
        assert_eq!(gin_eval(&DirectedGraph::empty(1), 1.0), vec![1.0]);
        let out = gin_eval(&star(2), 1.0);
        assert_eq!(out[0], 3.0);
        let g = DirectedGraph::from_edge_list(&[(1, 0), (2, 0), (0, 3)], 4).unwrap();
        let out = gin_eval(&g, 1.0);
        assert_ne!(out[0], out[3]);
    }

    #[test]
    fn qk_unit_dot_product() {
        let g = DirectedGraph::from_edge_list(&[(1, 0)], 2).unwrap();
        let ctx = GraphContext::new(&g, 1.0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = Attention::new(&mut store, "a", 1, 1, AttentionKind::Qk, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            *store.get_mut(id) = Tensor::scalar(1.0);
        }
        let mut s = Session::new(&store);
        let p = s.tape.constant(Tensor::column(vec![1.0, 1.0])).unwrap();
        let raw = att.scores(&mut s, p, &ctx).unwrap();
        assert!(s.value(raw).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gat_zero_vector_gives_uniform_weights() {
        let g = star(3);
        let ctx = GraphContext::new(&g, 1.0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let att = Attention::new(&mut store, "a", 2, 3, AttentionKind::Gat, &mut rng).unwrap();
        if let Attention::Gat { a_dst, a_src, .. } = att {
            store.get_mut(a_dst).data_mut().fill(0.0);
            store.get_mut(a_src).data_mut().fill(0.0);
        }
        let mut s = Session::new(&store);
        let p = s
            .tape
            .constant(Tensor::matrix(4, 2, (0..8).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        let raw = att.scores(&mut s, p, &ctx).unwrap();
        let alpha = normalize_importance(&mut s, raw, &ctx).unwrap();
        for e in ctx.nbhd.incoming(0) {
            assert_eq!(s.value(alpha).data()[e], 0.25);
        }
    }

    #[test]
    fn gat_matches_scalar_oracle() {
        let g = DirectedGraph::from_edge_list(&[(1, 0), (2, 0), (0, 1), (2, 1)], 3).unwrap();
        let ctx = GraphContext::new(&g, 1.0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let att = Attention::new(&mut store, "a", 2, 3, AttentionKind::Gat, &mut rng).unwrap();
        let Attention::Gat { w, a_dst, a_src } = att.clone() else { unreachable!() };
        let p_data = [0.3, -1.2, 0.8, 0.5, -0.4, 1.1];
        let mut s = Session::new(&store);
        let p = s.tape.constant(Tensor::matrix(3, 2, p_data.to_vec()).unwrap()).unwrap();
        let raw = att.scores(&mut s, p, &ctx).unwrap();
        let got = s.value(raw).data().to_vec();

        let (w, ad, asr) = (store.get(w), store.get(a_dst), store.get(a_src));
        let proj = |i: usize| -> Vec<f64> {
            (0..3)
                .map(|c| p_data[i * 2] * w.get(0, c) + p_data[i * 2 + 1] * w.get(1, c))
                .collect()
        };
        for (e, (&src, &dst)) in ctx.edge_src.iter().zip(ctx.edge_dst.iter()).enumerate() {
            let (pi, pk) = (proj(dst), proj(src));
            let v: f64 = (0..3).map(|c| ad.data()[c] * pi[c] + asr.data()[c] * pk[c]).sum();
            let expected = if v > 0.0 { v } else { GAT_SLOPE * v };
            assert!((got[e] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_closed_forms() {
        let g = DirectedGraph::from_edge_list(&[(1, 0)], 3).unwrap();
        let ctx = GraphContext::new(&g, 1.0);
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        // edges sorted by (dst, src): (0<-0), (0<-1), (1<-1), (2<-2)
        let raw = s
            .tape
            .constant(Tensor::column(vec![2f64.ln(), 0.0, 5.0, -3.0]))
            .unwrap();
        let a = normalize_importance(&mut s, raw, &ctx).unwrap();
        let a = s.value(a).data();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a[2], 1.0);
        assert_eq!(a[3], 1.0);
    }

    #[test]
    fn squash_is_centered_and_bounded() {
        assert_eq!(squash_value(0.5), (0.5, 0.5));
        for r in [-300.0, -30.0, -1.0, 0.0, 1.0, 30.0, 300.0] {
            let (a, b) = squash_value(r);
            assert!(a > 0.0 && b > 0.0);
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn nim_aggregate_matches_hand_evaluation() {
        let g = DirectedGraph::from_edge_list(&[(1, 0), (2, 0), (0, 2)], 3).unwrap();
        let ctx = GraphContext::new(&g, 1.0);
        let mut store = ParamStore::new();
        let pid = store.insert("pi", Tensor::scalar(0.8)).unwrap();
        let v_in = [0.5, -1.0, 2.0, 0.3, -0.7, 1.5];
        let v_st = [1.0, 0.2, -0.3, -2.0, 0.9, 0.4];
        let alpha_in = [0.2, 0.3, 0.5, 1.0, 0.6, 0.4];
        let alpha_st = [0.1, 0.1, 0.8, 1.0, 0.25, 0.75];
        let mut s = Session::new(&store);
        let vi = s.tape.constant(Tensor::matrix(3, 2, v_in.to_vec()).unwrap()).unwrap();
        let vs = s.tape.constant(Tensor::matrix(3, 2, v_st.to_vec()).unwrap()).unwrap();
        let ai = s.tape.constant(Tensor::column(alpha_in.to_vec())).unwrap();
        let ast = s.tape.constant(Tensor::column(alpha_st.to_vec())).unwrap();
        let pv = s.param(pid).unwrap();
        let out = nim_aggregate(&mut s, vi, vs, ai, ast, pv, &ctx).unwrap();
        let got = s.value(out).data().to_vec();

        let pi = 1.0 / (1.0 + (1.0f64 - 1.6).exp());
        let relu = |v: f64| v.max(0.0);
        for i in 0..3 {
            for c in 0..2 {
                let (mut a, mut b) = (0.0, 0.0);
                for e in ctx.nbhd.incoming(i) {
                    let k = ctx.edge_src[e];
                    a += alpha_in[e] * v_in[k * 2 + c];
                    b += alpha_st[e] * v_st[k * 2 + c];
                }
                let expected = pi * relu(a) + (1.0 - pi) * relu(b);
                assert!((got[i * 2 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn amplifier_scaling() {
        let g = star(2);
        let ctx = GraphContext::new(&g, 3f64.ln());
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let z = s.tape.constant(Tensor::filled(3, 2, 0.7)).unwrap();
        let same = amplify(&mut s, z, PiEtaValue::Fixed(0.0), &ctx).unwrap();
        assert_eq!(s.value(same), s.value(z));
        let amp = amplify(&mut s, z, PiEtaValue::Fixed(1.0), &ctx).unwrap();
        // center: 1 + log 3 / log 3 = 2; leaves have d̃ = 1
        assert_eq!(s.value(amp).row(0), &[1.4, 1.4]);
        assert_eq!(s.value(amp).row(1), &[0.7, 0.7]);
    }

    fn build_layers(dims: LayerDims, count: usize, kind: AttentionKind, seed: u64) -> (ParamStore, Vec<NimLayer>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut d = dims;
        for l in 0..count {
            layers.push(NimLayer::new(&mut store, &format!("nim{l}"), d, kind, &mut rng).unwrap());
            d = LayerDims {
                s: dims.hidden,
                x: dims.hidden,
                t: dims.hidden,
                hidden: dims.hidden,
            };
        }
        (store, layers)
    }

    #[test]
    fn zero_layers_return_initial_state() {
        let g = star(3);
        let ctx = GraphContext::new(&g, 4f64.ln());
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let x = s.tape.constant(Tensor::filled(4, 2, 0.3)).unwrap();
        let t = s.tape.constant(Tensor::column(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        let state = nim_forward(&mut s, x, x, t, &[], &ctx, full_wiring(1.0)).unwrap();
        assert_eq!(state.layers.len(), 1);
        assert_eq!(state.last().z_x, x);
        assert!(s.value(state.last().z_s).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one_on_random_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 40;
        let edges: Vec<_> = (0..200)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .filter(|(a, b)| a != b)
            .collect();
        let g = DirectedGraph::from_edge_list(&edges, n).unwrap();
        let ctx = GraphContext::new(&g, 1.0);
        for kind in [AttentionKind::Gat, AttentionKind::Qk] {
            let dims = LayerDims { s: 1, x: 3, t: 1, hidden: 8 };
            let (store, layers) = build_layers(dims, 2, kind, 5);
            let mut s = Session::new(&store);
            let xs: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = s.tape.constant(Tensor::matrix(n, 3, xs).unwrap()).unwrap();
            let t = s
                .tape
                .constant(Tensor::column((0..n).map(|i| (i % 2) as f64).collect()))
                .unwrap();
            let state = nim_forward(&mut s, x, x, t, &layers, &ctx, full_wiring(1.0)).unwrap();
            assert_eq!(state.attention.len(), 2);
            for rec in &state.attention {
                for v in [Some(rec.in_x), Some(rec.in_t), rec.st_x, rec.st_t].into_iter().flatten() {
                    let a = s.value(v).data();
                    for i in 0..n {
                        let sum: f64 = ctx.nbhd.incoming(i).map(|e| a[e]).sum();
                        assert!((sum - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn pi_eta_zero_equals_no_amplifier_bitwise() {
        let g = DirectedGraph::from_edge_list(&[(1, 0), (2, 0), (3, 0), (0, 4), (4, 2)], 5).unwrap();
        let ctx = GraphContext::new(&g, log_degree_denominator(&g, &[0, 1, 2, 3, 4]));
        let dims = LayerDims { s: 1, x: 2, t: 1, hidden: 4 };
        let (store, layers) = build_layers(dims, 3, AttentionKind::Gat, 11);
        let run = |wiring: LayerWiring| {
            let mut s = Session::new(&store);
            let x = s
                .tape
                .constant(Tensor::matrix(5, 2, (0..10).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap())
                .unwrap();
            let t = s.tape.constant(Tensor::column(vec![1.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
            let st = nim_forward(&mut s, x, x, t, &layers, &ctx, wiring).unwrap();
            let last = st.last();
            (s.value(last.z_x).clone(), s.value(last.z_t).clone())
        };
        let zero = run(full_wiring(0.0));
        let off = run(LayerWiring {
            pi_eta: None,
            ..full_wiring(0.0)
        });
        assert_eq!(zero, off);
        let on = run(full_wiring(1.0));
        assert_ne!(zero, on);
    }

    #[test]
    fn sum_aggregation_inflates_magnitudes_on_dense_graph() {
        let n = 10;
        let edges: Vec<_> = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        let g = DirectedGraph::from_edge_list(&edges, n).unwrap();
        let ctx = GraphContext::new(&g, log_degree_denominator(&g, &(0..n).collect::<Vec<_>>()));
        let dims = LayerDims { s: 1, x: 3, t: 1, hidden: 6 };
        let (store, layers) = build_layers(dims, 2, AttentionKind::Gat, 3);
        let magnitude = |agg: Aggregation| {
            let mut s = Session::new(&store);
            let x = s
                .tape
                .constant(Tensor::matrix(n, 3, (0..n * 3).map(|v| (v as f64).cos()).collect()).unwrap())
                .unwrap();
            let t = s
                .tape
                .constant(Tensor::column((0..n).map(|i| (i % 2) as f64).collect()))
                .unwrap();
            let wiring = LayerWiring {
                aggregation: agg,
                ..full_wiring(1.0)
            };
            let st = nim_forward(&mut s, x, x, t, &layers, &ctx, wiring).unwrap();
            s.value(st.last().z_x).data().iter().map(|v| v.abs()).fold(0.0, f64::max)
        };
        assert!(magnitude(Aggregation::Sum) > magnitude(Aggregation::Attention));
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let x = s.tape.constant(Tensor::filled(50, 4, 1.0)).unwrap();
        let mut none = Dropout { rate: 0.0, rng: &mut rng };
        assert_eq!(none.apply(&mut s, x).unwrap(), x);
        let mut half = Dropout { rate: 0.5, rng: &mut rng };
        let y = half.apply(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}

//! The full estimator: covariate encoder, NIM layers, outcome heads, the
//! balancing term and the ablation variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ag::{Tensor, Var};
use crate::balance::{self, Proxy, SinkhornConfig, SinkhornPlan};
use crate::data::{Dataset, YNorm};
use crate::error::{Error, Result};
use crate::layers::{
    log_degree_denominator, nim_forward, Aggregation, AttentionKind, Dropout, GraphContext, LayerDims,
    LayerWiring, Mlp, NimLayer, NimState, PiEtaValue,
};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// No L2 regularization.
    Nr,
    /// No balancing term.
    Nb,
    /// No amplifier and no structure attention.
    Ns,
    /// No amplifier.
    Nm,
    /// Uniform neighbor weights instead of attention.
    Natt,
    /// Unweighted neighbor sums instead of attention.
    Na,
    /// Balancing on the raw joint representation.
    Np,
    /// Separate balancing terms per representation.
    Bs,
    /// Nonlinear proxy with a reconstruction term.
    V,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Self::Full,
        Self::Nr,
        Self::Nb,
        Self::Ns,
        Self::Nm,
        Self::Natt,
        Self::Na,
        Self::Np,
        Self::Bs,
        Self::V,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "FULL",
            Self::Nr => "NR",
            Self::Nb => "NB",
            Self::Ns => "NS",
            Self::Nm => "NM",
            Self::Natt => "NATT",
            Self::Na => "NA",
            Self::Np => "NP",
            Self::Bs => "BS",
            Self::V => "V",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Amplifier strength: a fixed constant or a learned scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PiEtaMode {
    Fixed(f64),
    Learnable,
}

impl FromStr for PiEtaMode {
    type Err = Error;

    /// `fixed:<value>` or `learnable`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "learnable" {
            return Ok(Self::Learnable);
        }
        s.strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .map(Self::Fixed)
            .ok_or_else(|| Error::Config(format!("pi-eta {s:?}: expected fixed:<v> or learnable")))
    }
}

impl fmt::Display for PiEtaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(v) => write!(f, "fixed:{v}"),
            Self::Learnable => f.write_str("learnable"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub attention: AttentionKind,
    pub pi_eta: PiEtaMode,
    /// Weight of the balancing term.
    pub beta: f64,
    /// Weight of the L2 penalty.
    pub lambda: f64,
    /// Weight of the outcome terms in the transport cost.
    pub lambda_d: f64,
    /// Weight of the proxy reconstruction term.
    pub lambda_p: f64,
    pub dropout: f64,
    pub sinkhorn: SinkhornConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            layers: 3,
            attention: AttentionKind::Gat,
            pi_eta: PiEtaMode::Fixed(1.0),
            beta: 0.1,
            lambda: 1e-3,
            lambda_d: 1.0,
            lambda_p: 1.0,
            dropout: 0.1,
            sinkhorn: SinkhornConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn effective_beta(&self) -> f64 {
        if self.variant == Variant::Nb {
            0.0
        } else {
            self.beta
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::Nr {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("lambda_d", self.lambda_d),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.sinkhorn.xi > 0.0) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.sinkhorn.xi)));
        }
        Ok(())
    }

    /// Per-layer wiring for the configured variant.
    pub fn wiring(&self, pi_eta: Option<Var>) -> LayerWiring {
        let aggregation = match self.variant {
            Variant::Natt => Aggregation::Uniform,
            Variant::Na => Aggregation::Sum,
            _ => Aggregation::Attention,
        };
        // a learnable strength without layers has nothing to scale
        let amp = match (self.pi_eta, pi_eta) {
            (PiEtaMode::Learnable, Some(v)) => PiEtaValue::Learned(v),
            (PiEtaMode::Fixed(p), _) => PiEtaValue::Fixed(p),
            (PiEtaMode::Learnable, None) => PiEtaValue::Fixed(1.0),
        };
        LayerWiring {
            aggregation,
            structure_branch: self.variant != Variant::Ns,
            pi_eta: (!matches!(self.variant, Variant::Ns | Variant::Nm)).then_some(amp),
        }
    }
}

/// Fixed per-dataset model inputs.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub ctx: GraphContext,
    pub x: Arc<Tensor>,
    /// `n x 1` treatments.
    pub t: Arc<Tensor>,
}

/// Training targets on the model's normalized scale.
#[derive(Clone, Debug)]
pub struct Batch {
    pub treated: Arc<Vec<usize>>,
    pub control: Arc<Vec<usize>>,
    pub y_treated: Arc<Tensor>,
    pub y_control: Arc<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.treated.len() + self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Transport solutions carried across iterations as warm starts.
#[derive(Clone, Debug, Default)]
pub struct BalanceState {
    pub plans: Vec<Option<SinkhornPlan>>,
    /// Reuse the stored plans as-is instead of re-solving.
    pub frozen: bool,
}

impl BalanceState {
    fn solve(&mut self, slot: usize, s: &mut Session, cost: Var, cfg: &SinkhornConfig) -> Result<Var> {
        if self.plans.len() <= slot {
            self.plans.resize(slot + 1, None);
        }
        if self.frozen {
            if let Some(p) = &self.plans[slot] {
                return s.tape.dot_const(cost, Arc::new(p.plan.clone()));
            }
        }
        let warm = self.plans[slot]
            .as_ref()
            .filter(|p| p.f.len() == s.value(cost).rows() && p.g.len() == s.value(cost).cols());
        let (w, plan) = balance::wasserstein(s, cost, cfg, warm)?;
        self.plans[slot] = Some(plan);
        Ok(w)
    }
}

/// One forward pass over every node.
#[derive(Clone, Debug)]
pub struct Forward {
    pub state: NimState,
    /// `z ∥ z_X ∥ z_T` after the last layer.
    pub r: Var,
    /// Head outputs on the normalized scale, `n x 1`.
    pub y0: Var,
    pub y1: Var,
}

/// Scalar parts of one loss evaluation; `total` stays on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub factual: f64,
    pub balance: f64,
    pub l2: f64,
    pub reconstruction: f64,
}

/// Predictions on the dataset's outcome scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub factual: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GiteModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub covariates: usize,
    /// Training-set `Σ log(d̃)` for the amplifier.
    pub log_deg_denominator: f64,
    /// Normalization of training outcomes.
    pub y_norm: YNorm,
    encoder: Mlp,
    layers: Vec<NimLayer>,
    pi_eta: ParamId,
    proxy: Proxy,
    proxy_v: Proxy,
    heads: [Mlp; 2],
}

impl GiteModel {
    /// Fresh parameters; normalization and degree statistics come from the training split.
    pub fn new(config: ModelConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        let train = &dataset.split()?.train;
        let y: Vec<f64> = train.iter().map(|&i| dataset.y[i]).collect();
        let denom = log_degree_denominator(&dataset.graph, train);
        Self::with_stats(config, dataset.num_covariates(), denom, YNorm::fit(&y), seed)
    }

    pub fn with_stats(
        config: ModelConfig,
        covariates: usize,
        log_deg_denominator: f64,
        y_norm: YNorm,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let encoder = Mlp::new(&mut params, "enc", covariates, &[h, h, h], true, &mut rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let dims = if l == 0 {
                LayerDims {
                    s: 1,
                    x: covariates,
                    t: 1,
                    hidden: h,
                }
            } else {
                LayerDims {
                    s: h,
                    x: h,
                    t: h,
                    hidden: h,
                }
            };
            layers.push(NimLayer::new(&mut params, &format!("nim{l}"), dims, config.attention, &mut rng)?);
        }
        let (x_out, t_out) = if config.layers == 0 { (covariates, 1) } else { (h, h) };
        let r_dim = h + x_out + t_out;
        let pi_eta = params.insert("amp.pi_eta", Tensor::scalar(1.0))?;
        let proxy = Proxy::linear(&mut params, "proxy", r_dim, r_dim, &mut rng)?;
        let proxy_v = Proxy::mlp(&mut params, "proxy_v", r_dim, &[100, 200, r_dim], &mut rng)?;
        let heads = [
            Mlp::new(&mut params, "f0", r_dim, &[h, h, 1], false, &mut rng)?,
            Mlp::new(&mut params, "f1", r_dim, &[h, h, 1], false, &mut rng)?,
        ];
        Ok(Self {
            config,
            params,
            covariates,
            log_deg_denominator,
            y_norm,
            encoder,
            layers,
            pi_eta,
            proxy,
            proxy_v,
            heads,
        })
    }

    pub fn head(&self, t: usize) -> &Mlp {
        &self.heads[t]
    }

    pub fn inputs(&self, dataset: &Dataset) -> Result<Inputs> {
        if dataset.num_covariates() != self.covariates {
            return Err(Error::Config(format!(
                "model expects {} covariates, dataset has {}",
                self.covariates,
                dataset.num_covariates()
            )));
        }
        Ok(Inputs {
            ctx: GraphContext::new(&dataset.graph, self.log_deg_denominator),
            x: Arc::new(dataset.x.clone()),
            t: Arc::new(Tensor::column(dataset.t.clone())),
        })
    }

    /// Training units grouped by arm, with normalized targets.
    pub fn batch(&self, dataset: &Dataset, units: &[usize]) -> Batch {
        let (treated, control): (Vec<usize>, Vec<usize>) = units.iter().partition(|&&i| dataset.t[i] == 1.0);
        let targets = |idx: &[usize]| Tensor::column(idx.iter().map(|&i| self.y_norm.apply(dataset.y[i])).collect());
        Batch {
            y_treated: Arc::new(targets(&treated)),
            y_control: Arc::new(targets(&control)),
            treated: Arc::new(treated),
            control: Arc::new(control),
        }
    }

    pub fn forward(&self, s: &mut Session, inputs: &Inputs, mut dropout: Option<&mut Dropout>) -> Result<Forward> {
        let x = s.tape.constant(inputs.x.as_ref().clone())?;
        let t = s.tape.constant(inputs.t.as_ref().clone())?;
        let z = self.encoder.forward(s, x, None)?;
        let pi = match self.config.pi_eta {
            PiEtaMode::Learnable if !self.layers.is_empty() => Some(s.param(self.pi_eta)?),
            _ => None,
        };
        let wiring = self.config.wiring(pi);
        let state = nim_forward(s, z, x, t, &self.layers, &inputs.ctx, wiring)?;
        let last = state.last();
        let r = s.tape.concat_cols(&[z, last.z_x, last.z_t])?;
        let y0 = self.heads[0].forward(s, r, dropout.as_deref_mut())?;
        let y1 = self.heads[1].forward(s, r, dropout)?;
        Ok(Forward { state, r, y0, y1 })
    }

    /// Full training objective on `batch`, computed from a fresh forward pass.
    pub fn total_loss(
        &self,
        s: &mut Session,
        inputs: &Inputs,
        batch: &Batch,
        balance: &mut BalanceState,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let fwd = self.forward(s, inputs, dropout.as_deref_mut())?;
        let n_tr = batch.len() as f64;
        let (n1, n0) = (batch.treated.len(), batch.control.len());
        let y1_t = s.tape.gather_rows(fwd.y1, batch.treated.clone())?;
        let y0_c = s.tape.gather_rows(fwd.y0, batch.control.clone())?;
        let mut terms = Vec::new();
        if n1 > 0 {
            let m = s.tape.mse(y1_t, batch.y_treated.clone())?;
            terms.push(s.tape.scale(m, n1 as f64 / n_tr)?);
        }
        if n0 > 0 {
            let m = s.tape.mse(y0_c, batch.y_control.clone())?;
            terms.push(s.tape.scale(m, n0 as f64 / n_tr)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = s.tape.add(total, t)?;
        }
        let factual = s.value(total).item();

        let beta = self.config.effective_beta();
        let (mut w_value, mut reconstruction) = (0.0, 0.0);
        if beta > 0.0 {
            if n1 == 0 || n0 == 0 {
                log::warn!("training split has a single treatment group; balancing term skipped");
            } else {
                let (w, rec) = self.balance_term(s, &fwd, batch, balance, dropout)?;
                w_value = s.value(w).item();
                let scaled = s.tape.scale(w, beta)?;
                total = s.tape.add(total, scaled)?;
                if let Some(rec) = rec {
                    reconstruction = s.value(rec).item();
                    let scaled = s.tape.scale(rec, self.config.lambda_p)?;
                    total = s.tape.add(total, scaled)?;
                }
            }
        }

        let lambda = self.config.effective_lambda();
        let mut l2 = 0.0;
        if lambda > 0.0 {
            let bound = s.bound_params();
            let sq = s.tape.l2_norm_sq(&bound)?;
            l2 = s.value(sq).item();
            let scaled = s.tape.scale(sq, lambda)?;
            total = s.tape.add(total, scaled)?;
        }
        Ok(LossParts {
            total,
            factual,
            balance: w_value,
            l2,
            reconstruction,
        })
    }

    fn balance_term(
        &self,
        s: &mut Session,
        fwd: &Forward,
        batch: &Batch,
        balance: &mut BalanceState,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config.sinkhorn;
        let (tr, co) = (batch.treated.clone(), batch.control.clone());
        if self.config.variant == Variant::Bs {
            let last = fwd.state.last();
            let mut sum: Option<Var> = None;
            for (slot, rep) in [fwd.state.z, last.z_x, last.z_t].into_iter().enumerate() {
                let a = s.tape.gather_rows(rep, tr.clone())?;
                let b = s.tape.gather_rows(rep, co.clone())?;
                let cost = s.tape.pairwise_sq_dist(a, b)?;
                let w = balance.solve(slot, s, cost, cfg)?;
                sum = Some(match sum {
                    Some(acc) => s.tape.add(acc, w)?,
                    None => w,
                });
            }
            return Ok((sum.expect("three terms"), None));
        }
        let r_prime = match self.config.variant {
            Variant::Np => fwd.r,
            Variant::V => self.proxy_v.forward(s, fwd.r, dropout)?,
            _ => self.proxy.forward(s, fwd.r, None)?,
        };
        let rp_t = s.tape.gather_rows(r_prime, tr.clone())?;
        let rp_c = s.tape.gather_rows(r_prime, co.clone())?;
        let y_t = s.tape.constant(batch.y_treated.as_ref().clone())?;
        let y_c = s.tape.constant(batch.y_control.as_ref().clone())?;
        let y1_c = s.tape.gather_rows(fwd.y1, co.clone())?;
        let y0_t = s.tape.gather_rows(fwd.y0, tr.clone())?;
        let cost = balance::pfor_cost(s, rp_t, rp_c, y_t, y_c, y1_c, y0_t, self.config.lambda_d)?;
        let w = balance.solve(0, s, cost, cfg)?;
        let rec = if self.config.variant == Variant::V {
            let mut units: Vec<usize> = tr.iter().chain(co.iter()).copied().collect();
            units.sort_unstable();
            let units = Arc::new(units);
            let r = s.tape.gather_rows(fwd.r, units.clone())?;
            let rp = s.tape.gather_rows(r_prime, units)?;
            Some(balance::reconstruction_loss(s, r, rp)?)
        } else {
            None
        };
        Ok((w, rec))
    }

    /// Evaluation-mode predictions for every node, on the dataset's outcome scale.
    pub fn predict(&self, inputs: &Inputs) -> Result<Predictions> {
        let mut s = Session::new(&self.params);
        let fwd = self.forward(&mut s, inputs, None)?;
        let norm = self.y_norm;
        let y0: Vec<f64> = s.value(fwd.y0).data().iter().map(|&v| norm.invert(v)).collect();
        let y1: Vec<f64> = s.value(fwd.y1).data().iter().map(|&v| norm.invert(v)).collect();
        let tau = s
            .value(fwd.y1)
            .data()
            .iter()
            .zip(s.value(fwd.y0).data())
            .map(|(a, b)| (a - b) * norm.std)
            .collect();
        let factual = inputs
            .t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &t)| if t == 1.0 { y1[i] } else { y0[i] })
            .collect();
        Ok(Predictions { y0, y1, factual, tau })
    }

    /// `τ̂_i = f_1(r_i) - f_0(r_i)` on the dataset's outcome scale.
    pub fn estimate_ite(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        Ok(self.predict(&self.inputs(dataset)?)?.tau)
    }

    /// Parameter ids in the order they were created.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }
}

//! Entropic Wasserstein balancing between treated and control representations.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::ag::{Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Dropout, Mlp};
use crate::params::{ParamId, ParamStore, Session};

/// Variance guard of the proxy's layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic weight.
    pub xi: f64,
    pub max_iter: usize,
    /// Max-abs marginal violation that counts as converged.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            xi: 0.1,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// Solution of the entropic transport problem between uniform marginals.
#[derive(Clone, Debug)]
pub struct SinkhornPlan {
    /// `n1 x n0` transport plan.
    pub plan: Tensor,
    /// Dual potentials, reusable as a warm start.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-abs row-marginal violation at exit (columns are exact after each sweep).
    pub violation: f64,
    /// `<D, π>`.
    pub value: f64,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations on `cost` (treated rows x control columns).
///
/// `warm` supplies starting potentials `(f, g)` from an earlier solve on a
/// cost of the same shape; only `g` is used, since the first sweep
/// recomputes `f` from it.
pub fn sinkhorn(cost: &Tensor, cfg: &SinkhornConfig, warm: Option<(&[f64], &[f64])>) -> Result<SinkhornPlan> {
    if !(cfg.xi > 0.0) {
        return Err(Error::Config(format!("sinkhorn xi must be positive, got {}", cfg.xi)));
    }
    if !cost.is_finite() {
        return Err(Error::Numeric("sinkhorn cost has non-finite entries".into()));
    }
    let (n1, n0) = (cost.rows(), cost.cols());
    if n1 == 0 || n0 == 0 {
        return Err(Error::Numeric("sinkhorn needs both groups non-empty".into()));
    }
    let xi = cfg.xi;
    let log_a = -(n1 as f64).ln();
    let log_b = -(n0 as f64).ln();
    let a = 1.0 / n1 as f64;
    // -D / xi, row-major
    let neg: Vec<f64> = cost.data().iter().map(|d| -d / xi).collect();
    let mut f = vec![0.0; n1];
    let mut g = match warm {
        Some((_, g0)) if g0.len() == n0 => g0.to_vec(),
        _ => vec![0.0; n0],
    };
    let mut lse_row = vec![0.0; n1];
    let mut col_max = vec![0.0; n0];
    let mut col_sum = vec![0.0; n0];
    let mut iterations = 0;
    let mut violation;
    let mut converged = false;
    loop {
        // row log-sums for the current g; reused for the violation check and the f update
        for i in 0..n1 {
            let row = &neg[i * n0..(i + 1) * n0];
            lse_row[i] = logsumexp(row.iter().zip(&g).map(|(k, gj)| k + gj / xi));
        }
        if iterations > 0 {
            violation = f
                .iter()
                .zip(&lse_row)
                .map(|(fi, l)| ((fi / xi + l).exp() - a).abs())
                .fold(0.0, f64::max);
            if violation < cfg.tol {
                converged = true;
                break;
            }
            if iterations >= cfg.max_iter {
                break;
            }
        }
        for i in 0..n1 {
            f[i] = xi * log_a - xi * lse_row[i];
        }
        // column log-sums with a streaming max, walking the matrix row by row
        col_max.fill(f64::NEG_INFINITY);
        col_sum.fill(0.0);
        for i in 0..n1 {
            let fi = f[i] / xi;
            let row = &neg[i * n0..(i + 1) * n0];
            for j in 0..n0 {
                let v = row[j] + fi;
                if v > col_max[j] {
                    col_sum[j] = col_sum[j] * (col_max[j] - v).exp() + 1.0;
                    col_max[j] = v;
                } else {
                    col_sum[j] += (v - col_max[j]).exp();
                }
            }
        }
        for j in 0..n0 {
            let lse = col_max[j] + col_sum[j].ln();
            g[j] = xi * log_b - xi * lse;
        }
        iterations += 1;
        if !f.iter().chain(&g).all(|v| v.is_finite()) {
            return Err(Error::Numeric("sinkhorn potentials became non-finite".into()));
        }
    }
    let mut plan = vec![0.0; n1 * n0];
    let mut value = 0.0;
    for i in 0..n1 {
        for j in 0..n0 {
            let p = (neg[i * n0 + j] + (f[i] + g[j]) / xi).exp();
            plan[i * n0 + j] = p;
            value += p * cost.data()[i * n0 + j];
        }
    }
    if !converged {
        log::debug!("sinkhorn stopped after {iterations} iterations, violation {violation:e}");
    }
    Ok(SinkhornPlan {
        plan: Tensor::matrix(n1, n0, plan)?,
        f,
        g,
        iterations,
        converged,
        violation,
        value,
    })
}

/// `W = <D, π>` on the tape with the plan held constant, so gradients flow
/// through the cost only. `plan` reuses a previous solution when given.
pub fn wasserstein(
    s: &mut Session,
    cost: Var,
    cfg: &SinkhornConfig,
    warm: Option<&SinkhornPlan>,
) -> Result<(Var, SinkhornPlan)> {
    let sol = sinkhorn(s.value(cost), cfg, warm.map(|p| (p.f.as_slice(), p.g.as_slice())))?;
    let w = s.tape.dot_const(cost, Arc::new(sol.plan.clone()))?;
    Ok((w, sol))
}

/// `D_ij = ||r'_i - r'_j||² + λ_D (|y_i - ŷ_j|² + |ŷ_i - y_j|²)` for treated
/// `i` and control `j`; `yhat1_c` holds the controls' predictions under
/// treatment and `yhat0_t` the treated units' predictions under control.
pub fn pfor_cost(
    s: &mut Session,
    rp_t: Var,
    rp_c: Var,
    y_t: Var,
    y_c: Var,
    yhat1_c: Var,
    yhat0_t: Var,
    lambda_d: f64,
) -> Result<Var> {
    let d = s.tape.pairwise_sq_dist(rp_t, rp_c)?;
    if lambda_d == 0.0 {
        return Ok(d);
    }
    let a = s.tape.pairwise_sq_dist(y_t, yhat1_c)?;
    let b = s.tape.pairwise_sq_dist(yhat0_t, y_c)?;
    let outcome = s.tape.add(a, b)?;
    let scaled = s.tape.scale(outcome, lambda_d)?;
    s.tape.add(d, scaled)
}

/// Maps joint representations `r = z ∥ z_X ∥ z_T` into the balancing space.
#[derive(Clone, Debug, PartialEq)]
pub enum Proxy {
    /// Row-wise layer normalization followed by an affine projection.
    Linear { w: ParamId, b: ParamId },
    /// MLP whose output width matches `r`, trained with a reconstruction term.
    Mlp(Mlp),
}

impl Proxy {
    pub fn linear(store: &mut ParamStore, prefix: &str, in_dim: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self::Linear {
            w: store.insert_weight(format!("{prefix}.w"), in_dim, width, rng)?,
            b: store.insert(format!("{prefix}.b"), Tensor::zeros(1, width))?,
        })
    }

    pub fn mlp(store: &mut ParamStore, prefix: &str, in_dim: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self::Mlp(Mlp::new(store, prefix, in_dim, widths, false, rng)?))
    }

    pub fn forward(&self, s: &mut Session, r: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        match self {
            Self::Linear { w, b } => {
                let normed = s.tape.layer_norm(r, LAYER_NORM_EPS)?;
                let (wv, bv) = (s.param(*w)?, s.param(*b)?);
                let lin = s.tape.matmul(normed, wv)?;
                s.tape.add_row(lin, bv)
            }
            Self::Mlp(m) => m.forward(s, r, dropout),
        }
    }
}

/// `L_P`: mean over units of `||r - r'||²`.
pub fn reconstruction_loss(s: &mut Session, r: Var, r_prime: Var) -> Result<Var> {
    let n = s.value(r).rows().max(1) as f64;
    let diff = s.tape.sub(r, r_prime)?;
    let sq = s.tape.l2_norm_sq(&[diff])?;
    s.tape.scale(sq, 1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Exact optimum at n = 3 by enumerating the vertices of the Birkhoff polytope.
    fn lp_oracle_3x3(d: &Tensor) -> f64 {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        perms
            .iter()
            .map(|p| (0..3).map(|i| d.get(i, p[i])).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn zero_cost_gives_product_plan() {
        let sol = sinkhorn(&Tensor::zeros(2, 4), &SinkhornConfig::default(), None).unwrap();
        assert_eq!(sol.value, 0.0);
        for &p in sol.plan.data() {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair() {
        let sol = sinkhorn(&Tensor::scalar(2.5), &SinkhornConfig::default(), None).unwrap();
        assert!((sol.plan.item() - 1.0).abs() < 1e-12);
        assert!((sol.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn small_xi_approaches_lp_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SinkhornConfig {
            xi: 1e-3,
            max_iter: 100_000,
            tol: 1e-9,
        };
        for _ in 0..20 {
            let d = random(&mut rng, 3, 3);
            let sol = sinkhorn(&d, &cfg, None).unwrap();
            assert!((sol.value - lp_oracle_3x3(&d)).abs() < 1e-2);
        }
    }

    #[test]
    fn marginals_hold_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SinkhornConfig {
            max_iter: 10_000,
            ..SinkhornConfig::default()
        };
        for _ in 0..10 {
            let d = random(&mut rng, 10, 10);
            let sol = sinkhorn(&d, &cfg, None).unwrap();
            assert!(sol.converged);
            for i in 0..10 {
                let row: f64 = sol.plan.row(i).iter().sum();
                let col: f64 = (0..10).map(|r| sol.plan.get(r, i)).sum();
                assert!((row - 0.1).abs() < 1e-6);
                assert!((col - 0.1).abs() < 1e-6);
            }
            assert!(sol.plan.data().iter().all(|&p| p >= 0.0));
            assert!(sol.value >= 0.0);
        }
    }

    #[test]
    fn warm_start_converges_faster() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random(&mut rng, 30, 20);
        let cfg = SinkhornConfig {
            xi: 0.02,
            max_iter: 10_000,
            tol: 1e-9,
        };
        let cold = sinkhorn(&d, &cfg, None).unwrap();
        let warm = sinkhorn(&d, &cfg, Some((&cold.f, &cold.g))).unwrap();
        assert!(warm.iterations < cold.iterations);
        assert!((warm.value - cold.value).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn(&Tensor::zeros(0, 3), &cfg, None).is_err());
        assert!(sinkhorn(&Tensor::scalar(f64::NAN), &cfg, None).is_err());
        let bad = SinkhornConfig { xi: 0.0, ..cfg };
        assert!(sinkhorn(&Tensor::scalar(1.0), &bad, None).is_err());
    }

    fn pfor_eval(rt: &[f64], rc: &[f64], yt: &[f64], yc: &[f64], y1c: &[f64], y0t: &[f64], ld: f64) -> Tensor {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let col = |s: &mut Session, v: &[f64]| s.tape.constant(Tensor::column(v.to_vec())).unwrap();
        let (a, b) = (col(&mut s, rt), col(&mut s, rc));
        let (c, d) = (col(&mut s, yt), col(&mut s, yc));
        let (e, f) = (col(&mut s, y1c), col(&mut s, y0t));
        let out = pfor_cost(&mut s, a, b, c, d, e, f, ld).unwrap();
        s.value(out).clone()
    }

    #[test]
    fn pfor_hand_values() {
        let d = pfor_eval(&[1.0, 2.0], &[0.0, 4.0], &[3.0, 1.0], &[2.0, 0.0], &[1.0, 5.0], &[0.5, 2.5], 0.5);
        // D_ij = (rt_i - rc_j)^2 + 0.5 ((yt_i - y1c_j)^2 + (y0t_i - yc_j)^2)
        let expect = [
            1.0 + 0.5 * (4.0 + 2.25),
            9.0 + 0.5 * (4.0 + 0.25),
            4.0 + 0.5 * (0.0 + 0.25),
            4.0 + 0.5 * (16.0 + 6.25),
        ];
        for (g, e) in d.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        let pure = pfor_eval(&[1.0, 2.0], &[0.0, 4.0], &[3.0, 1.0], &[2.0, 0.0], &[1.0, 5.0], &[0.5, 2.5], 0.0);
        assert_eq!(pure.data(), &[1.0, 9.0, 4.0, 4.0]);
        let zero = pfor_eval(&[1.0], &[1.0], &[2.0], &[3.0], &[2.0], &[3.0], 1.0);
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn identity_proxy_returns_normalized_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proxy = Proxy::linear(&mut store, "p", 3, 3, &mut rng).unwrap();
        if let Proxy::Linear { w, .. } = proxy {
            *store.get_mut(w) = Tensor::identity(3);
        }
        let mut s = Session::new(&store);
        let r = s
            .tape
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap())
            .unwrap();
        let out = proxy.forward(&mut s, r, None).unwrap();
        let normed = s.tape.layer_norm(r, LAYER_NORM_EPS).unwrap();
        assert_eq!(s.value(out), s.value(normed));
    }

    #[test]
    fn reconstruction_loss_oracle() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let a = [0.5, -1.0, 2.0, 3.0, 0.0, 1.5];
        let b = [1.0, -1.0, 0.0, 2.5, 1.0, 1.0];
        let r = s.tape.constant(Tensor::matrix(2, 3, a.to_vec()).unwrap()).unwrap();
        let rp = s.tape.constant(Tensor::matrix(2, 3, b.to_vec()).unwrap()).unwrap();
        let same = reconstruction_loss(&mut s, r, r).unwrap();
        assert_eq!(s.value(same).item(), 0.0);
        let l = reconstruction_loss(&mut s, r, rp).unwrap();
        let expected: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 2.0;
        assert!((s.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_gradient_with_fixed_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let rt = store.insert("rt", random(&mut rng, 4, 3)).unwrap();
        let rc = store.insert("rc", random(&mut rng, 4, 3)).unwrap();
        let cfg = SinkhornConfig::default();
        let plan = {
            let mut s = Session::new(&store);
            let (a, b) = (s.param(rt).unwrap(), s.param(rc).unwrap());
            let d = s.tape.pairwise_sq_dist(a, b).unwrap();
            sinkhorn(s.value(d), &cfg, None).unwrap().plan
        };
        let plan = Arc::new(plan);
        let r = gradcheck::check("w", &store, None, |s| {
            let (a, b) = (s.param(rt)?, s.param(rc)?);
            let d = s.tape.pairwise_sq_dist(a, b)?;
            s.tape.dot_const(d, plan.clone())
        })
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }
}

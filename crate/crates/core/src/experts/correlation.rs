use rand::Rng;

use super::expect_btd;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Self-attention across channels: each of the `d` channel signatures (its
/// length-`T` trace) is a token, and the attention matrix is a per-sample
/// `d × d` weighted adjacency.
#[derive(Debug, Clone)]
pub struct CorrelationExpert {
    pub t: usize,
    pub d: usize,
    pub dk: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm: LayerNorm,
}

impl CorrelationExpert {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let (t, d, dk) = (cfg.t, cfg.d_model, cfg.corr_dk);
        Self {
            t,
            d,
            dk,
            w_q: Linear::new(store, &format!("{name}.w_q"), t, dk, true, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), t, dk, true, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), t, dk, true, rng),
            w_o: Linear::new(store, &format!("{name}.w_o"), dk, t, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, rng),
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t != self.t {
            return Err(Error::dim(
                "correlation expert",
                format!("window length {t} differs from construction length {}", self.t),
            ));
        }
        Ok(())
    }

    /// `A_dyn = softmax(Q Kᵀ / sqrt(d_k))` for channel-major input `[B, d, T]`.
    pub fn dynamic_adjacency(&self, g: &mut Graph, store: &ParamStore, h_t: Var) -> Result<Var> {
        match *g.shape(h_t) {
            [_, d, t] if d == self.d => self.check_t(t)?,
            ref s => {
                return Err(Error::dim(
                    "dynamic_adjacency",
                    format!("expected [B, {}, T], got {s:?}", self.d),
                ))
            }
        }
        let q = self.w_q.forward(g, store, h_t)?;
        let k = self.w_k.forward(g, store, h_t)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.dk as f64).sqrt())?;
        g.softmax(logits)
    }

    /// Returns the expert output and the adjacency used to produce it.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let (_, t) = expect_btd(g, h, "correlation_forward", self.d)?;
        self.check_t(t)?;
        let h_t = g.transpose(h)?;
        let adj = self.dynamic_adjacency(g, store, h_t)?;
        let v = self.w_v.forward(g, store, h_t)?;
        let agg = g.matmul(adj, v)?;
        let proj = self.w_o.forward(g, store, agg)?;
        let update = g.transpose(proj)?;
        let update = self.norm.forward(g, store, update)?;
        Ok((g.add(h, update)?, adj))
    }

    pub fn zero_update_path(&self, store: &mut ParamStore) {
        self.w_v.zero(store);
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .flat_map(|l| l.params())
            .chain(self.norm.params())
            .collect()
    }
}

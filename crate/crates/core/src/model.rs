//! The full classifier: embedding, stacked MoE layers and a pooled linear head.

use crate::config::{BalanceReduce, ModelConfig};
use crate::error::{Error, Result};
use crate::experts::Embedding;
use crate::moe::{LayerRouting, MoeLayer};
use crate::nn::Linear;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DapNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub embed: Embedding,
    pub layers: Vec<MoeLayer>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, N_cls]`.
    pub logits: Var,
    /// One entry per MoE layer.
    pub routing: Vec<LayerRouting>,
}

impl DapNet {
    /// Builds and initialises a model from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        let embed = Embedding::new(&mut params, "embed", cfg.c, cfg.d_model, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|l| MoeLayer::new(&cfg, &mut params, &format!("layers.{l}"), &mut rng))
            .collect();
        let head = Linear::new(&mut params, "head", cfg.d_model, cfg.n_classes, true, &mut rng);
        Ok(Self {
            cfg,
            params,
            embed,
            layers,
            head,
        })
    }

    /// A fresh graph honouring `debug_numerics`.
    pub fn graph(&self) -> Graph {
        Graph::new().with_debug_numerics(self.cfg.debug_numerics)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ModelOutput> {
        match *g.shape(x) {
            [_, t, c] if t == self.cfg.t && c == self.cfg.c => {}
            ref s => {
                return Err(Error::dim(
                    "model_forward",
                    format!("expected [B, {}, {}], got {s:?}", self.cfg.t, self.cfg.c),
                ))
            }
        }
        let mut h = self.embed.forward(g, &self.params, x)?;
        let mut routing = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, r) = layer.forward(g, &self.params, h)?;
            h = out;
            routing.push(r);
        }
        let pooled = g.mean_axis(h, 1)?;
        let logits = self.head.forward(g, &self.params, pooled)?;
        Ok(ModelOutput { logits, routing })
    }

    /// Forward pass on a plain batch, returning logits and per-layer routing.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<Vec<crate::moe::RoutingRecord>>)> {
        let mut g = self.graph();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        let logits = g.value(out.logits).clone();
        Ok((logits, out.routing.into_iter().map(|r| r.records).collect()))
    }

    /// Balance loss across layers, reduced per `balance_reduce`.
    pub fn balance_loss(&self, g: &mut Graph, routing: &[LayerRouting]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for r in routing {
            let l = r.balance_loss(g)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Usage("model has no MoE layers".into()))?;
        match self.cfg.balance_reduce {
            BalanceReduce::Mean => g.scale(total, 1.0 / routing.len() as f64),
            BalanceReduce::Sum => Ok(total),
        }
    }
}

//! The input embedding and the three experts. Every expert maps
//! `[B, T, d] → [B, T, d]` and adds its update residually, so zeroing an
//! expert's update path turns it into the identity.

mod correlation;
mod hybrid;
mod periodicity;

pub use correlation::CorrelationExpert;
pub use hybrid::HybridExpert;
pub use periodicity::PeriodicityExpert;

use rand::Rng;

use crate::config::{ExpertKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Per-time-step projection of the `C` raw features to width `d`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub projection: Linear,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, d: usize, rng: &mut R) -> Self {
        Self {
            projection: Linear::new(store, name, c, d, true, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.projection.out_dim
    }

    /// `[B, T, C] → [B, T, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.projection.in_dim {
            return Err(Error::dim(
                "embed",
                format!("expected [B, T, {}], got {shape:?}", self.projection.in_dim),
            ));
        }
        self.projection.forward(g, store, x)
    }
}

#[derive(Debug, Clone)]
pub enum Expert {
    Periodicity(PeriodicityExpert),
    Correlation(CorrelationExpert),
    Hybrid(HybridExpert),
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(
        kind: ExpertKind,
        cfg: &ModelConfig,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Self {
        match kind {
            ExpertKind::Periodicity => Expert::Periodicity(PeriodicityExpert::new(cfg, store, name, rng)),
            ExpertKind::Correlation => Expert::Correlation(CorrelationExpert::new(cfg, store, name, rng)),
            ExpertKind::Hybrid => Expert::Hybrid(HybridExpert::new(cfg, store, name, rng)),
        }
    }

    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Periodicity(_) => ExpertKind::Periodicity,
            Expert::Correlation(_) => ExpertKind::Correlation,
            Expert::Hybrid(_) => ExpertKind::Hybrid,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        match self {
            Expert::Periodicity(e) => e.forward(g, store, h),
            Expert::Correlation(e) => e.forward(g, store, h).map(|(out, _)| out),
            Expert::Hybrid(e) => e.forward(g, store, h).map(|(out, _)| out),
        }
    }

    /// Zeroes the parameters feeding the residual update.
    pub fn zero_update_path(&self, store: &mut ParamStore) {
        match self {
            Expert::Periodicity(e) => e.zero_update_path(store),
            Expert::Correlation(e) => e.zero_update_path(store),
            Expert::Hybrid(e) => e.zero_update_path(store),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Expert::Periodicity(e) => e.params(),
            Expert::Correlation(e) => e.params(),
            Expert::Hybrid(e) => e.params(),
        }
    }
}

pub(crate) fn expect_btd(g: &Graph, h: Var, op: &'static str, d: usize) -> Result<(usize, usize)> {
    match *g.shape(h) {
        [b, t, dd] if dd == d => Ok((b, t)),
        ref s => Err(Error::dim(op, format!("expected [B, T, {d}], got {s:?}"))),
    }
}

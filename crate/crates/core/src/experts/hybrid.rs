use rand::Rng;

use super::expect_btd;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{sinusoidal_encoding, LayerNorm, Linear};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// One pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub ln_attn: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d, rng),
            w_q: Linear::new(store, &format!("{name}.w_q"), d, d, true, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), d, d, true, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), d, d, true, rng),
            w_o: Linear::new(store, &format!("{name}.w_o"), d, d, true, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d, rng),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, ff, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff, d, true, rng),
        }
    }

    /// `[B, T, d] → ([B, T, d], attention [B, heads, T, T])`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let [b, t, d] = *g.shape(z) else {
            unreachable!("checked by caller")
        };
        let (h, dh) = (self.heads, d / self.heads);
        let a = self.ln_attn.forward(g, store, z)?;
        let split = |g: &mut Graph, x: Var, axes: &[usize]| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, dh])?;
            g.permute(x, axes)
        };
        let q = self.w_q.forward(g, store, a)?;
        let q = split(g, q, &[0, 2, 1, 3])?;
        let k = self.w_k.forward(g, store, a)?;
        let kt = split(g, k, &[0, 2, 3, 1])?;
        let v = self.w_v.forward(g, store, a)?;
        let v = split(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let ctx = self.w_o.forward(g, store, ctx)?;
        let z = g.add(z, ctx)?;
        let f = self.ln_ff.forward(g, store, z)?;
        let f = self.ff_in.forward(g, store, f)?;
        let f = g.gelu(f)?;
        let f = self.ff_out.forward(g, store, f)?;
        Ok((g.add(z, f)?, attn))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln_attn.params();
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            p.extend(l.params());
        }
        p.extend(self.ln_ff.params());
        p.extend(self.ff_in.params());
        p.extend(self.ff_out.params());
        p
    }
}

/// Multi-kernel 1D convolutions next to a transformer encoder layer; both
/// branches are concatenated on the feature axis and projected back to `d`.
#[derive(Debug, Clone)]
pub struct HybridExpert {
    pub d: usize,
    pub kernels: Vec<usize>,
    pub branch_width: usize,
    pub convs: Vec<ParamId>,
    pub encoder: EncoderLayer,
    pub fusion: Linear,
}

impl HybridExpert {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let (d, bw) = (cfg.d_model, cfg.hybrid_branch_width);
        let convs = cfg
            .hybrid_kernels
            .iter()
            .map(|&ks| {
                store.init(
                    format!("{name}.conv.k{ks}"),
                    &[bw, d, ks],
                    Init::Normal((2.0 / (d * ks) as f64).sqrt()),
                    rng,
                )
            })
            .collect();
        let encoder = EncoderLayer::new(
            store,
            &format!("{name}.encoder"),
            d,
            cfg.hybrid_heads,
            cfg.hybrid_ffn_mult * d,
            rng,
        );
        let concat = bw * cfg.hybrid_kernels.len() + d;
        Self {
            d,
            kernels: cfg.hybrid_kernels.clone(),
            branch_width: bw,
            convs,
            encoder,
            fusion: Linear::new(store, &format!("{name}.fusion"), concat, d, true, rng),
        }
    }

    /// Returns the expert output and the encoder's attention weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let (_, t) = expect_btd(g, h, "hybrid_forward", self.d)?;

        let h_t = g.transpose(h)?;
        let mut branches = Vec::with_capacity(self.convs.len());
        for &k in &self.convs {
            let kv = g.param(store, k);
            branches.push(g.conv1d_same(h_t, kv)?);
        }
        let local = g.concat(&branches, 1)?;
        let local = g.transpose(local)?;
        let local = g.gelu(local)?;

        let pe = g.constant(sinusoidal_encoding(t, self.d));
        let z = g.add(h, pe)?;
        let (global, attn) = self.encoder.forward(g, store, z)?;

        let both = g.concat(&[local, global], 2)?;
        let update = self.fusion.forward(g, store, both)?;
        Ok((g.add(h, update)?, attn))
    }

    pub fn zero_update_path(&self, store: &mut ParamStore) {
        self.fusion.zero(store);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.convs.clone();
        p.extend(self.encoder.params());
        p.extend(self.fusion.params());
        p
    }
}

//! Gating, sparse top-K routing, weighted expert fusion and the balance term.

use std::cmp::Ordering;

use rand::Rng;

use crate::config::{ModelConfig, RoutingMode};
use crate::error::{Error, Result};
use crate::experts::Expert;
use crate::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Mean over time, then a two-layer MLP producing one score per expert.
#[derive(Debug, Clone)]
pub struct GatingNetwork {
    pub hidden: Linear,
    pub out: Linear,
}

impl GatingNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        n_experts: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, n_experts, true, rng),
        }
    }

    /// `[B, T, d] → [B, N_e]` scores.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let pooled = g.mean_axis(h, 1)?;
        let z = self.hidden.forward(g, store, pooled)?;
        let z = g.gelu(z)?;
        self.out.forward(g, store, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// Routing decision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    /// Full softmax over every score.
    pub probs: Vec<f64>,
    /// Fusion weights: softmax over the selected scores, zero elsewhere.
    pub weights: Vec<f64>,
    /// Selected experts, highest score first.
    pub selected: Vec<usize>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest entries; equal scores go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Top-K routing of a `[B, N_e]` score matrix.
pub fn route_topk(scores: &Tensor, k: usize) -> Result<Vec<RoutingRecord>> {
    let [_, n] = *scores.shape() else {
        return Err(Error::dim(
            "route_topk",
            format!("expected [B, N_e], got {:?}", scores.shape()),
        ));
    };
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k = {k} outside [1, {n}]")));
    }
    Ok(scores
        .rows()
        .map(|row| {
            let selected = top_k_indices(row, k);
            let picked: Vec<f64> = selected.iter().map(|&i| row[i]).collect();
            let mut weights = vec![0.0; n];
            for (&i, w) in selected.iter().zip(softmax(&picked)) {
                weights[i] = w;
            }
            RoutingRecord {
                probs: softmax(row),
                weights,
                selected,
            }
        })
        .collect())
}

/// Every expert weighted `1/N_e` for each of `b` samples.
pub fn route_uniform(b: usize, n: usize) -> Vec<RoutingRecord> {
    let u = vec![1.0 / n as f64; n];
    (0..b)
        .map(|_| RoutingRecord {
            probs: u.clone(),
            weights: u.clone(),
            selected: (0..n).collect(),
        })
        .collect()
}

/// Batch routing statistics: selection fraction `f` and mean dense probability.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub fraction: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

impl RoutingStats {
    /// Each sample's selections count `1/|selected|` each, so `Σ f = 1`.
    pub fn from_records(records: &[RoutingRecord]) -> Self {
        let n = records.first().map_or(0, |r| r.probs.len());
        let mut fraction = vec![0.0; n];
        let mut mean_prob = vec![0.0; n];
        for r in records {
            let share = 1.0 / r.selected.len() as f64;
            for &i in &r.selected {
                fraction[i] += share;
            }
            for (m, p) in mean_prob.iter_mut().zip(&r.probs) {
                *m += p;
            }
        }
        let b = records.len().max(1) as f64;
        fraction.iter_mut().chain(mean_prob.iter_mut()).for_each(|v| *v /= b);
        Self { fraction, mean_prob }
    }

    pub fn n_experts(&self) -> usize {
        self.fraction.len()
    }
}

/// `N_e · Σ f_i · p̄_i`.
pub fn load_balance_loss(stats: &RoutingStats) -> f64 {
    let n = stats.n_experts() as f64;
    n * stats
        .fraction
        .iter()
        .zip(&stats.mean_prob)
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

/// Routing outcome of one MoE layer for one batch.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub records: Vec<RoutingRecord>,
    /// Dense probabilities `[B, N_e]` on the graph; carries the balance gradient.
    pub dense_probs: Var,
}

impl LayerRouting {
    pub fn stats(&self) -> RoutingStats {
        RoutingStats::from_records(&self.records)
    }

    /// Differentiable balance loss with `f` held constant.
    pub fn balance_loss(&self, g: &mut Graph) -> Result<Var> {
        let stats = self.stats();
        let n = stats.n_experts();
        let p_bar = g.mean_axis(self.dense_probs, 0)?;
        let f = g.constant(Tensor::new([n], stats.fraction)?);
        let prod = g.mul(p_bar, f)?;
        let s = g.sum(prod)?;
        g.scale(s, n as f64)
    }
}

/// Gate plus experts, fused per sample as `Σ g_i · E_i(h)`.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub gate: GatingNetwork,
    pub experts: Vec<Expert>,
    pub top_k: usize,
    pub routing: RoutingMode,
}

impl MoeLayer {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let gate = GatingNetwork::new(
            store,
            &format!("{name}.gate"),
            cfg.d_model,
            cfg.gate_hidden(),
            cfg.n_experts(),
            rng,
        );
        let experts = cfg
            .experts
            .iter()
            .map(|&kind| Expert::new(kind, cfg, store, &format!("{name}.experts.{}", kind.name()), rng))
            .collect();
        Self {
            gate,
            experts,
            top_k: cfg.top_k,
            routing: cfg.routing,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, LayerRouting)> {
        let b = *g
            .shape(h)
            .first()
            .ok_or_else(|| Error::dim("moe_forward", "scalar input"))?;
        let n = self.n_experts();
        let (records, weights, dense_probs) = match self.routing {
            RoutingMode::TopK => {
                let scores = self.gate.forward(g, store, h)?;
                let records = route_topk(g.value(scores), self.top_k)?;
                let mut keep = vec![false; b * n];
                for (row, r) in records.iter().enumerate() {
                    r.selected.iter().for_each(|&i| keep[row * n + i] = true);
                }
                let weights = g.masked_softmax(scores, &keep)?;
                let dense = g.softmax(scores)?;
                (records, weights, dense)
            }
            RoutingMode::Uniform => {
                let records = route_uniform(b, n);
                let u = Tensor::full([b, n], 1.0 / n as f64);
                (records, g.constant(u.clone()), g.constant(u))
            }
        };
        let out = self.fuse(g, store, h, weights, &records)?;
        Ok((out, LayerRouting { records, dense_probs }))
    }

    /// Fusion under externally fixed weights `[B, N_e]`; zero-weight experts are skipped.
    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParamStore, h: Var, weights: &Tensor) -> Result<Var> {
        let records: Vec<RoutingRecord> = weights
            .rows()
            .map(|w| RoutingRecord {
                probs: w.to_vec(),
                weights: w.to_vec(),
                selected: (0..w.len()).filter(|&i| w[i] != 0.0).collect(),
            })
            .collect();
        let w = g.constant(weights.clone());
        self.fuse(g, store, h, w, &records)
    }

    fn fuse(&self, g: &mut Graph, store: &ParamStore, h: Var, weights: Var, records: &[RoutingRecord]) -> Result<Var> {
        let b = records.len();
        let n = self.n_experts();
        if g.shape(weights) != [b, n] || g.shape(h).first() != Some(&b) {
            return Err(Error::ShapeMismatch {
                op: "moe_forward",
                lhs: g.shape(h).to_vec(),
                rhs: g.shape(weights).to_vec(),
            });
        }
        let mut acc: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&s| records[s].selected.contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let whole = rows.len() == b;
            let sub = if whole { h } else { g.index_select(h, &rows)? };
            let y = expert.forward(g, store, sub)?;
            let col = g.narrow(weights, 1, i, 1)?;
            let col = g.reshape(col, &[b])?;
            let col = if whole { col } else { g.index_select(col, &rows)? };
            let y = g.scale_rows(y, col)?;
            let y = if whole { y } else { g.scatter_rows(y, &rows, b)? };
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Usage("no expert selected for any sample".into()))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.gate.params();
        for e in &self.experts {
            p.extend(e.params());
        }
        p
    }
}

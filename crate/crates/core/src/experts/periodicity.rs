use std::collections::BTreeMap;

use rand::Rng;

use super::expect_btd;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::spectral::{self, PeriodSet};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Folds the sequence on its dominant periods and runs a two-stage inception
/// block (`d → width → d`) on each 2D view. Branches of one stage are summed.
/// Per-period outputs are mixed by a softmax over the period amplitudes.
/// Periods are detected per sample.
#[derive(Debug, Clone)]
pub struct PeriodicityExpert {
    pub k: usize,
    pub d: usize,
    pub width: usize,
    pub stage_in: Vec<ParamId>,
    pub stage_out: Vec<ParamId>,
}

impl PeriodicityExpert {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let (d, w) = (cfg.d_model, cfg.period_width);
        let branches = cfg.period_kernels.len() as f64;
        let mut stage = |tag: &str, c_in: usize, c_out: usize| -> Vec<ParamId> {
            cfg.period_kernels
                .iter()
                .map(|&ks| {
                    let fan_in = (c_in * ks * ks) as f64 * branches;
                    store.init(
                        format!("{name}.{tag}.k{ks}"),
                        &[c_out, c_in, ks, ks],
                        Init::Normal((1.0 / fan_in).sqrt()),
                        rng,
                    )
                })
                .collect()
        };
        let stage_in = stage("inception_in", d, w);
        let stage_out = stage("inception_out", w, d);
        Self {
            k: cfg.period_k,
            d,
            width: w,
            stage_in,
            stage_out,
        }
    }

    /// Dominant periods of every sample in `h` (`[B, T, d]`), detected per sample
    /// so a sample's output never depends on what else is in the batch.
    pub fn sample_periods(&self, h: &Tensor) -> Result<Vec<PeriodSet>> {
        let [_, t, d] = *h.shape() else {
            return Err(Error::dim(
                "periodicity_forward",
                format!("expected [B, T, d], got {:?}", h.shape()),
            ));
        };
        h.data()
            .chunks(t * d)
            .map(|block| spectral::detect_periods(&Tensor::new([1, t, d], block.to_vec())?, self.k))
            .collect()
    }

    fn inception(g: &mut Graph, store: &ParamStore, x: Var, kernels: &[ParamId]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &k in kernels {
            let kv = g.param(store, k);
            let y = g.conv2d_same(x, kv)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one inception branch"))
    }

    /// Differentiable channel-mean DFT magnitude of every sample, `[B, T/2 + 1]`.
    fn amplitude_spectrum(g: &mut Graph, h: Var, t: usize) -> Result<Var> {
        let bins = t / 2 + 1;
        let mut cos = Vec::with_capacity(t * bins);
        let mut sin = Vec::with_capacity(t * bins);
        for step in 0..t {
            for f in 0..bins {
                let angle = std::f64::consts::TAU * (f * step % t) as f64 / t as f64;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let cos = g.constant(Tensor::new([t, bins], cos)?);
        let sin = g.constant(Tensor::new([t, bins], sin)?);
        let h_t = g.transpose(h)?;
        let re = g.matmul(h_t, cos)?;
        let im = g.matmul(h_t, sin)?;
        let re2 = g.mul(re, re)?;
        let im2 = g.mul(im, im)?;
        let power = g.add(re2, im2)?;
        // Keeps the square root differentiable at an exactly silent bin.
        let power = g.add_scalar(power, 1e-24)?;
        let amp = g.powf(power, 0.5)?;
        g.mean_axis(amp, 1)
    }

    /// Per-sample fusion weights `[r, k]` for samples `rows` sharing one period list.
    fn fusion_weights(g: &mut Graph, spectrum: Var, sets: &[PeriodSet], rows: &[usize]) -> Result<Var> {
        let bins = g.shape(spectrum)[1];
        let k = sets[rows[0]].len();
        let mut select = vec![0.0; rows.len() * bins * k];
        for (r, &i) in rows.iter().enumerate() {
            for (j, &f) in sets[i].frequencies.iter().enumerate() {
                select[(r * bins + f) * k + j] = 1.0;
            }
        }
        let select = g.constant(Tensor::new([rows.len(), bins, k], select)?);
        let amps = if rows.len() == g.shape(spectrum)[0] {
            spectrum
        } else {
            g.index_select(spectrum, rows)?
        };
        let amps = g.reshape(amps, &[rows.len(), 1, bins])?;
        let picked = g.matmul(amps, select)?;
        let weights = g.softmax(picked)?;
        g.reshape(weights, &[rows.len(), k])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (b, t) = expect_btd(g, h, "periodicity_forward", self.d)?;
        let sets = self.sample_periods(g.value(h))?;

        // Samples sharing a period list share one batched pass.
        let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        for (i, set) in sets.iter().enumerate() {
            groups.entry(&set.periods).or_default().push(i);
        }
        let spectrum = if groups.keys().any(|p| p.len() > 1) {
            Some(Self::amplitude_spectrum(g, h, t)?)
        } else {
            None
        };

        let mut update: Option<Var> = None;
        for (periods, rows) in groups {
            let whole = rows.len() == b;
            let sub = if whole { h } else { g.index_select(h, &rows)? };
            // A single period always gets weight 1.
            let weights = match spectrum {
                Some(s) if periods.len() > 1 => Some(Self::fusion_weights(g, s, &sets, &rows)?),
                _ => None,
            };
            let mut fused: Option<Var> = None;
            for (j, &period) in periods.iter().enumerate() {
                let grid = spectral::fold_periods(g, sub, period)?;
                let mid = Self::inception(g, store, grid, &self.stage_in)?;
                let mid = g.gelu(mid)?;
                let out = Self::inception(g, store, mid, &self.stage_out)?;
                let mut seq = spectral::unfold_periods(g, out, t)?;
                if let Some(w) = weights {
                    let col = g.narrow(w, 1, j, 1)?;
                    let col = g.reshape(col, &[rows.len()])?;
                    seq = g.scale_rows(seq, col)?;
                }
                fused = Some(match fused {
                    Some(f) => g.add(f, seq)?,
                    None => seq,
                });
            }
            let fused = fused.expect("period set is never empty");
            let full = if whole { fused } else { g.scatter_rows(fused, &rows, b)? };
            update = Some(match update {
                Some(u) => g.add(u, full)?,
                None => full,
            });
        }
        let update = update.expect("batch is never empty");
        g.add(h, update)
    }

    pub fn zero_update_path(&self, store: &mut ParamStore) {
        for &id in self.stage_in.iter().chain(&self.stage_out) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stage_in.iter().chain(&self.stage_out).copied().collect()
    }
}

//! Focal loss with label smoothing and its combination with the balance term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `alpha` is not stored: it is always `delta · beta`, so `delta` is the one knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub smoothing: f64,
    pub delta: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            smoothing: 0.1,
            delta: 0.5,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn alpha(&self) -> f64 {
        self.delta * self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 || self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::Config(format!(
                "gamma and delta must be >= 0, got {} and {}",
                self.gamma, self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_balance: f64,
    pub l_total: f64,
}

/// Smoothed targets `(1 − ε)·onehot + ε/N`, shape `[B, N]`.
pub fn smoothed_targets(targets: &[usize], n: usize, smoothing: f64) -> Result<Tensor> {
    let mut q = vec![smoothing / n as f64; targets.len() * n];
    for (row, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::Input(format!("target {t} of sample {row} outside [0, {n})")));
        }
        q[row * n + t] += 1.0 - smoothing;
    }
    Tensor::new([targets.len(), n], q)
}

/// Batch mean of `−Σ_c q_c · (1 − p_c)^γ · log p_c` with `p = softmax(logits)`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[usize], gamma: f64, smoothing: f64) -> Result<Var> {
    let [b, n] = *g.shape(logits) else {
        return Err(Error::dim(
            "focal_loss",
            format!("expected [B, N_cls], got {:?}", g.shape(logits)),
        ));
    };
    if targets.len() != b {
        return Err(Error::Input(format!("{} targets for a batch of {b}", targets.len())));
    }
    let q = g.constant(smoothed_targets(targets, n, smoothing)?);
    let log_p = g.log_softmax(logits)?;
    let weighted = if gamma == 0.0 {
        g.mul(log_p, q)?
    } else {
        let p = g.exp(log_p)?;
        let miss = g.neg(p)?;
        let miss = g.add_scalar(miss, 1.0)?;
        let modulator = g.powf(miss, gamma)?;
        let w = g.mul(modulator, q)?;
        g.mul(log_p, w)?
    };
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / b as f64)
}

/// `α · L_balance + β · L_class`, on the graph and as plain numbers.
pub fn hybrid_loss(g: &mut Graph, l_class: Var, l_balance: Var, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let cls = g.scale(l_class, cfg.beta)?;
    let bal = g.scale(l_balance, cfg.alpha())?;
    let total = g.add(cls, bal)?;
    let breakdown = LossBreakdown {
        l_class: g.data(l_class)[0],
        l_balance: g.data(l_balance)[0],
        l_total: g.data(total)[0],
    };
    Ok((total, breakdown))
}

pub fn combine(l_class: f64, l_balance: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(LossBreakdown {
        l_class,
        l_balance,
        l_total: cfg.alpha() * l_balance + cfg.beta * l_class,
    })
}

//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Periodicity,
    Correlation,
    Hybrid,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Periodicity, ExpertKind::Correlation, ExpertKind::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Periodicity => "periodicity",
            ExpertKind::Correlation => "correlation",
            ExpertKind::Hybrid => "hybrid",
        }
    }
}

/// How gate weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Softmax over the K highest gate scores, zero elsewhere.
    TopK,
    /// Every expert weighted `1/N_e`; the gate is not consulted.
    Uniform,
}

/// How per-layer balance losses combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceReduce {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Window length. Zero means "take it from the dataset".
    pub t: usize,
    /// Input channels. Zero means "take it from the dataset".
    pub c: usize,
    /// Number of classes. Zero means "take it from the dataset".
    pub n_classes: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub experts: Vec<ExpertKind>,
    pub top_k: usize,
    pub routing: RoutingMode,
    pub balance_reduce: BalanceReduce,
    /// Number of dominant periods the periodicity expert folds on.
    pub period_k: usize,
    /// Odd square kernel sizes of the inception branches.
    pub period_kernels: Vec<usize>,
    /// Hidden channel width between the two inception stages.
    pub period_width: usize,
    /// Attention width of the correlation expert.
    pub corr_dk: usize,
    pub hybrid_kernels: Vec<usize>,
    /// Output channels of each 1D convolution branch.
    pub hybrid_branch_width: usize,
    pub hybrid_heads: usize,
    /// Feed-forward width of the encoder layer, as a multiple of `d_model`.
    pub hybrid_ffn_mult: usize,
    pub debug_numerics: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 0,
            c: 0,
            n_classes: 0,
            d_model: 64,
            n_layers: 2,
            experts: ExpertKind::ALL.to_vec(),
            top_k: 2,
            routing: RoutingMode::TopK,
            balance_reduce: BalanceReduce::Mean,
            period_k: 2,
            period_kernels: vec![1, 3, 5],
            period_width: 16,
            corr_dk: 64,
            hybrid_kernels: vec![3, 5, 7],
            hybrid_branch_width: 16,
            hybrid_heads: 4,
            hybrid_ffn_mult: 2,
            debug_numerics: false,
        }
    }
}

impl ModelConfig {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn gate_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.t < 4 {
            return err(format!("window length t = {} must be >= 4", self.t));
        }
        if self.c == 0 || self.n_classes < 2 {
            return err(format!(
                "need c >= 1 and n_classes >= 2 (got {} and {})",
                self.c, self.n_classes
            ));
        }
        if self.d_model == 0 || self.n_layers == 0 {
            return err("d_model and n_layers must be positive".into());
        }
        if self.experts.is_empty() {
            return err("at least one expert is required".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts() {
            return err(format!("top_k = {} outside [1, {}]", self.top_k, self.n_experts()));
        }
        if self.period_k == 0 || self.period_width == 0 || self.corr_dk == 0 || self.hybrid_branch_width == 0 {
            return err("period_k, period_width, corr_dk and hybrid_branch_width must be positive".into());
        }
        for (name, ks) in [
            ("period_kernels", &self.period_kernels),
            ("hybrid_kernels", &self.hybrid_kernels),
        ] {
            if ks.is_empty() || ks.iter().any(|k| k % 2 == 0) {
                return err(format!("{name} must be a non-empty list of odd sizes, got {ks:?}"));
            }
        }
        if self.hybrid_heads == 0 || !self.d_model.is_multiple_of(self.hybrid_heads) {
            return err(format!(
                "d_model = {} must be divisible by hybrid_heads = {}",
                self.d_model, self.hybrid_heads
            ));
        }
        if self.hybrid_ffn_mult == 0 {
            return err("hybrid_ffn_mult must be positive".into());
        }
        Ok(())
    }
}

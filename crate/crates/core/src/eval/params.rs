//! Closed-form parameter accounting.

use std::fmt;

use crate::model::{ModelConfig, MoeVariant};

/// Per-component parameter counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub embeddings: u64,
    pub attention: u64,
    /// FFNs of non-MoE blocks.
    pub dense_ffn: u64,
    pub routed_experts: u64,
    pub shared_experts: u64,
    pub routers: u64,
    pub norms: u64,
    pub head: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.embeddings
            + self.attention
            + self.dense_ffn
            + self.routed_experts
            + self.shared_experts
            + self.routers
            + self.norms
            + self.head
    }

    fn rows(&self) -> [(&'static str, u64); 8] {
        [
            ("embeddings", self.embeddings),
            ("attention", self.attention),
            ("dense_ffn", self.dense_ffn),
            ("routed_experts", self.routed_experts),
            ("shared_experts", self.shared_experts),
            ("routers", self.routers),
            ("norms", self.norms),
            ("head", self.head),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub total_params: u64,
    /// Parameters touched per token: everything except the routed experts
    /// that are not selected.
    pub activated_params: u64,
    /// Routed-expert parameters counted in `activated_params`.
    pub activated_routed: u64,
    pub breakdown: Breakdown,
}

impl ParamReport {
    /// Activated parameters inside expert FFNs (routed plus shared).
    pub fn activated_expert_params(&self) -> u64 {
        self.activated_routed + self.breakdown.shared_experts
    }
}

/// Counts in integer arithmetic for the configured architecture: SwiGLU
/// FFNs with three `d x D` matrices, bias-free projections, one `d x E`
/// matrix per router, RMSNorm gains. Top-P uses its nominal activation.
pub fn count_params(config: &ModelConfig) -> ParamReport {
    let c = |x: usize| x as u64;
    let (v, d, dff, layers) = (c(config.vocab_size), c(config.d_model), c(config.ffn_size), c(config.n_layers));
    let moe_layers = c(config.moe_layer_count());
    let ffn = |hidden: u64| 3 * d * hidden;
    let expert = ffn(c(config.expert_size()));
    let mut b = Breakdown {
        embeddings: v * d,
        attention: layers * 4 * d * d,
        dense_ffn: (layers - moe_layers) * ffn(dff),
        norms: (2 * layers + 1) * d,
        head: if config.tied_embeddings { 0 } else { v * d },
        ..Breakdown::default()
    };
    let mut activated_routed = 0;
    if config.moe_variant != MoeVariant::Dense {
        let routed = c(config.routed_experts());
        b.routed_experts = moe_layers * routed * expert;
        b.shared_experts = moe_layers * c(config.shared_expert_count()) * expert;
        b.routers = if config.moe_variant == MoeVariant::Hash { 0 } else { moe_layers * d * routed };
        activated_routed = moe_layers * c(config.activated_experts()) * expert;
    }
    let total = b.total();
    ParamReport {
        total_params: total,
        activated_params: total - b.routed_experts + activated_routed,
        activated_routed,
        breakdown: b,
    }
}

/// Compact rendering: `842.0M`, `2.88B`.
pub fn human(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.3}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total_params\t{}\t{}", self.total_params, human(self.total_params))?;
        writeln!(f, "activated_params\t{}\t{}", self.activated_params, human(self.activated_params))?;
        for (name, n) in self.breakdown.rows() {
            writeln!(f, "  {name}\t{n}")?;
        }
        Ok(())
    }
}

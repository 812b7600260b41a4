use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which layer fills the FFN slot of the MoE blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoeVariant {
    Dense,
    /// Top-K routing over full-sized experts, optionally with a shared expert.
    Smoe,
    /// Top-3 routing, wider experts, no shared expert.
    SmoeTop3,
    /// Fixed random assignment of token ids to experts.
    Hash,
    /// Flattened top-mK routing over mN fine-grained experts.
    FineGrained,
    /// Smallest set of experts whose probabilities reach a threshold.
    TopP,
    /// Two sequential sub-layers of fine-grained experts.
    Cartesian,
}

impl MoeVariant {
    pub const ALL: [MoeVariant; 7] = [
        MoeVariant::Dense,
        MoeVariant::Smoe,
        MoeVariant::SmoeTop3,
        MoeVariant::Hash,
        MoeVariant::FineGrained,
        MoeVariant::TopP,
        MoeVariant::Cartesian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MoeVariant::Dense => "dense",
            MoeVariant::Smoe => "smoe",
            MoeVariant::SmoeTop3 => "smoe_top3",
            MoeVariant::Hash => "hash",
            MoeVariant::FineGrained => "fine_grained",
            MoeVariant::TopP => "topp",
            MoeVariant::Cartesian => "cartesian",
        }
    }

    /// Variants whose routers produce probabilities.
    pub fn is_probabilistic(self) -> bool {
        !matches!(self, MoeVariant::Dense | MoeVariant::Hash)
    }
}

impl fmt::Display for MoeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MoeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MoeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = MoeVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown moe variant `{s}`; valid: {}", valid.join(", ")))
            })
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden size `d`.
    pub d_model: usize,
    /// Full-sized FFN intermediate size `D`; fine-grained experts use `D / m`.
    pub ffn_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub moe_variant: MoeVariant,
    /// MoE in every second block (1-based even blocks) instead of every block.
    pub moe_every_other: bool,
    /// Number of full-sized experts `N`.
    pub n_experts: usize,
    /// Splitting factor `m`.
    pub granularity: usize,
    /// Activated full-sized experts `K`.
    pub top_k: usize,
    pub topp_threshold: f64,
    pub shared_experts: bool,
    pub tied_embeddings: bool,
    pub alpha_balance: f64,
    pub capacity_factor: f64,
    pub seed: u64,
}

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Intermediate size of one routed or shared expert.
    pub fn expert_size(&self) -> usize {
        self.ffn_size / self.granularity
    }

    /// Total routed experts `mN` (split across both sub-layers for Cartesian).
    pub fn routed_experts(&self) -> usize {
        self.granularity * self.n_experts
    }

    /// Routed experts activated per token, `mK`. For top-P this is the
    /// nominal count used for capacity and parameter accounting.
    pub fn activated_experts(&self) -> usize {
        self.granularity * self.top_k
    }

    /// Shared experts of size `D / m` per MoE layer: one full-sized FFN
    /// worth, split `m` ways.
    pub fn shared_expert_count(&self) -> usize {
        if self.shared_experts && self.moe_variant != MoeVariant::Dense {
            self.granularity
        } else {
            0
        }
    }

    /// Sub-experts `e` per Cartesian sub-layer.
    pub fn sublayer_experts(&self) -> usize {
        self.routed_experts() / 2
    }

    /// Activation `k = mK / 2` per Cartesian sub-layer.
    pub fn sublayer_top_k(&self) -> usize {
        self.activated_experts() / 2
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        self.moe_variant != MoeVariant::Dense && (!self.moe_every_other || block % 2 == 1)
    }

    pub fn moe_layer_count(&self) -> usize {
        (0..self.n_layers).filter(|&b| self.is_moe_block(b)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("ffn_size", self.ffn_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("granularity", self.granularity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return cfg(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return cfg(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.ffn_size % self.granularity != 0 {
            let valid: Vec<String> = (1..=self.ffn_size)
                .filter(|m| self.ffn_size % m == 0)
                .take(16)
                .map(|m| m.to_string())
                .collect();
            return cfg(format!(
                "ffn_size {} is not divisible by granularity {}; valid m include {}",
                self.ffn_size,
                self.granularity,
                valid.join(", ")
            ));
        }
        if self.moe_every_other && self.moe_variant != MoeVariant::Dense && self.n_layers % 2 != 0 {
            return cfg(format!("moe_every_other needs an even number of blocks, got {}", self.n_layers));
        }
        if !(self.capacity_factor > 0.0) {
            return cfg(format!("capacity_factor must be positive, got {}", self.capacity_factor));
        }
        if !(self.alpha_balance >= 0.0) {
            return cfg(format!("alpha_balance must be non-negative, got {}", self.alpha_balance));
        }
        if self.moe_variant == MoeVariant::Dense {
            return Ok(());
        }
        if self.n_experts == 0 || self.top_k == 0 {
            return cfg("MoE variants need n_experts and top_k of at least 1".into());
        }
        if self.activated_experts() > self.routed_experts() {
            return cfg(format!(
                "activation {} exceeds {} routed experts",
                self.activated_experts(),
                self.routed_experts()
            ));
        }
        match self.moe_variant {
            MoeVariant::TopP => {
                if !(self.topp_threshold > 0.0 && self.topp_threshold <= 1.0) {
                    return cfg(format!("topp_threshold {} outside (0, 1]", self.topp_threshold));
                }
            }
            MoeVariant::Cartesian => {
                if self.routed_experts() % 2 != 0 {
                    return cfg(format!(
                        "Cartesian layer needs an even number of sub-experts, got mN = {}",
                        self.routed_experts()
                    ));
                }
                if self.activated_experts() % 2 != 0 || self.sublayer_top_k() == 0 {
                    return cfg(format!(
                        "Cartesian activation mK = {} must be even and at least 2",
                        self.activated_experts()
                    ));
                }
                if self.shared_expert_count() % 2 != 0 {
                    return cfg(format!(
                        "Cartesian shared experts split evenly over two sub-layers; m = {} is odd",
                        self.granularity
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    // ------------------------------------------------------------- presets

    /// Names accepted by [`ModelConfig::preset`].
    pub fn preset_names() -> Vec<String> {
        let mut names = vec!["base-dense".to_string(), "large-dense".to_string()];
        for scale in ["moe-base", "moe-large"] {
            for v in REFERENCE_MOE_ROWS {
                names.push(format!("{scale}-{v}"));
            }
        }
        names.push("cartesian-7b".into());
        names.push("fine-grained-7b".into());
        for prefix in ["desk", "small", "toy"] {
            for v in MoeVariant::ALL {
                names.push(format!("{prefix}-{}", v.name().replace('_', "-")));
            }
        }
        names
    }

    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || {
            Error::Usage(format!(
                "unknown preset `{name}`; valid presets: {}",
                Self::preset_names().join(", ")
            ))
        };
        match name {
            "base-dense" => return Ok(Self::reference_base(MoeVariant::Dense)),
            "large-dense" => return Ok(Self::reference_large(MoeVariant::Dense)),
            "cartesian-7b" => return Ok(Self::seven_b(MoeVariant::Cartesian)),
            "fine-grained-7b" => return Ok(Self::seven_b(MoeVariant::FineGrained)),
            _ => {}
        }
        if let Some(row) = name.strip_prefix("moe-base-") {
            return reference_row(row).map(Self::moe_base).ok_or_else(unknown);
        }
        if let Some(row) = name.strip_prefix("moe-large-") {
            return reference_row(row).map(Self::moe_large).ok_or_else(unknown);
        }
        let (prefix, rest) = name.split_once('-').ok_or_else(unknown)?;
        let variant: MoeVariant = rest.replace('-', "_").parse().map_err(|_| unknown())?;
        match prefix {
            "desk" => Ok(Self::desk(variant)),
            "small" => Ok(Self::small(variant)),
            "toy" => Ok(Self::toy(variant)),
            _ => Err(unknown()),
        }
    }

    fn reference_common(variant: MoeVariant) -> Self {
        ModelConfig {
            vocab_size: 32000,
            d_model: 768,
            ffn_size: 3072,
            n_layers: 12,
            n_heads: 12,
            max_seq_len: 1024,
            moe_variant: variant,
            moe_every_other: true,
            n_experts: 16,
            granularity: 1,
            top_k: 2,
            topp_threshold: 0.4,
            shared_experts: true,
            tied_embeddings: false,
            alpha_balance: 0.01,
            capacity_factor: 1.0,
            seed: 0,
        }
    }

    fn reference_base(variant: MoeVariant) -> Self {
        Self::reference_common(variant)
    }

    fn reference_large(variant: MoeVariant) -> Self {
        ModelConfig {
            d_model: 1024,
            ffn_size: 4096,
            n_layers: 24,
            n_heads: 16,
            ..Self::reference_common(variant)
        }
    }

    /// Applies the per-row differences of the reference comparison table.
    fn reference_row_adjust(mut self) -> Self {
        match self.moe_variant {
            MoeVariant::SmoeTop3 => {
                // Wider experts, in every FFN, to absorb the removed shared expert.
                self.ffn_size = if self.d_model == 768 { 3264 } else { 4352 };
                self.top_k = 3;
                self.shared_experts = false;
            }
            MoeVariant::FineGrained | MoeVariant::Cartesian => self.granularity = 2,
            _ => {}
        }
        self
    }

    fn moe_base(variant: MoeVariant) -> Self {
        Self::reference_base(variant).reference_row_adjust()
    }

    fn moe_large(variant: MoeVariant) -> Self {
        Self::reference_large(variant).reference_row_adjust()
    }

    /// The 7.25B-parameter pair: 16 blocks, MoE in every block, 32
    /// sub-experts of size 2048, 2 shared sub-experts, 4 activated.
    fn seven_b(variant: MoeVariant) -> Self {
        ModelConfig {
            d_model: 2048,
            ffn_size: 4096,
            n_layers: 16,
            n_heads: 16,
            max_seq_len: 4096,
            moe_every_other: false,
            granularity: 2,
            ..Self::reference_common(variant)
        }
    }

    /// Desk-scale defaults used by the CLI: d = 64, 4 blocks (2 MoE layers),
    /// 8 sub-experts per Cartesian sub-layer with k = 2.
    pub fn desk(variant: MoeVariant) -> Self {
        Self::scaled(variant, 64, 256, 256)
    }

    /// Smaller desk shape used by the long-running test suites.
    pub fn small(variant: MoeVariant) -> Self {
        Self::scaled(variant, 32, 64, 128)
    }

    fn scaled(variant: MoeVariant, d_model: usize, ffn_size: usize, max_seq_len: usize) -> Self {
        let base = ModelConfig {
            vocab_size: crate::io::tokenizer::VOCAB_SIZE,
            d_model,
            ffn_size,
            n_layers: 4,
            n_heads: 4,
            max_seq_len,
            moe_variant: variant,
            moe_every_other: true,
            n_experts: 8,
            granularity: 1,
            top_k: 2,
            topp_threshold: 0.4,
            shared_experts: true,
            tied_embeddings: false,
            alpha_balance: 0.01,
            capacity_factor: 1.0,
            seed: 0,
        };
        match variant {
            MoeVariant::SmoeTop3 => ModelConfig {
                ffn_size: ffn_size * 9 / 8,
                top_k: 3,
                shared_experts: false,
                ..base
            },
            MoeVariant::FineGrained | MoeVariant::Cartesian => ModelConfig { granularity: 2, ..base },
            _ => base,
        }
    }

    /// Tiny two-block shapes for gradient checks.
    pub fn toy(variant: MoeVariant) -> Self {
        let base = ModelConfig {
            vocab_size: 13,
            d_model: 8,
            ffn_size: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            moe_variant: variant,
            moe_every_other: true,
            n_experts: 4,
            granularity: 1,
            top_k: 2,
            topp_threshold: 0.4,
            shared_experts: true,
            tied_embeddings: false,
            alpha_balance: 0.01,
            capacity_factor: 1.0,
            seed: 0,
        };
        match variant {
            MoeVariant::SmoeTop3 => ModelConfig { ffn_size: 10, top_k: 3, shared_experts: false, ..base },
            MoeVariant::FineGrained | MoeVariant::Cartesian => ModelConfig { granularity: 2, ..base },
            _ => base,
        }
    }
}

const REFERENCE_MOE_ROWS: [&str; 6] = ["smoe-share", "smoe-top3", "hash", "fine-grained", "topp", "cartesian"];

fn reference_row(row: &str) -> Option<MoeVariant> {
    Some(match row {
        "smoe-share" => MoeVariant::Smoe,
        "smoe-top3" => MoeVariant::SmoeTop3,
        "hash" => MoeVariant::Hash,
        "fine-grained" => MoeVariant::FineGrained,
        "topp" => MoeVariant::TopP,
        "cartesian" => MoeVariant::Cartesian,
        _ => return None,
    })
}

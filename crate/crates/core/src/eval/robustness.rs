//! Perplexity with each token's top-1 routed expert disabled.

use crate::error::{Error, Result};
use crate::model::{Model, RoutePolicy};
use crate::rng::{Rng, Stream};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessReport {
    pub ppl_normal: f64,
    pub ppl_masked: f64,
    /// How often sub-layer A and sub-layer B were the masked one (Cartesian
    /// layers only).
    pub sublayer_choices: [u64; 2],
}

impl RobustnessReport {
    /// Share of Cartesian masking draws that picked sub-layer A.
    pub fn sublayer_a_frequency(&self) -> Option<f64> {
        let n = self.sublayer_choices[0] + self.sublayer_choices[1];
        (n > 0).then(|| self.sublayer_choices[0] as f64 / n as f64)
    }
}

/// Dropless perplexity with standard routing and with the highest-probability
/// expert of every router masked. Cartesian layers mask one sub-layer per
/// token, drawn from the `robustness` stream of `seed`.
pub fn disable_top1_eval<T: Real>(model: &Model<T>, stream: &[usize], window: usize, seed: u64) -> Result<RobustnessReport> {
    let variant = model.config.moe_variant;
    if !variant.is_probabilistic() {
        return Err(Error::Config(format!(
            "top-1 expert ablation needs a probabilistic router; `{variant}` has none"
        )));
    }
    let ppl_normal = model.perplexity(stream, window)?;
    let policy = RoutePolicy::DisableTop1(Rng::new(seed, Stream::ROBUSTNESS));
    let (ppl_masked, sublayer_choices) = model.perplexity_with(stream, window, policy)?;
    Ok(RobustnessReport { ppl_normal, ppl_masked, sublayer_choices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, MoeVariant};

    fn stream() -> Vec<usize> {
        (0..40).map(|i| (i * 3 + 1) % 13).collect()
    }

    #[test]
    fn hash_and_dense_are_rejected() {
        for v in [MoeVariant::Hash, MoeVariant::Dense] {
            let m = Model::<f64>::new(&ModelConfig::toy(v)).unwrap();
            assert!(matches!(disable_top1_eval(&m, &stream(), 8, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn full_activation_leaves_nothing_to_reselect() {
        let cfg = ModelConfig { top_k: 4, shared_experts: true, ..ModelConfig::toy(MoeVariant::Smoe) };
        let m = Model::<f64>::new(&cfg).unwrap();
        assert!(matches!(disable_top1_eval(&m, &stream(), 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cartesian_counts_sublayer_choices() {
        let m = Model::<f64>::new(&ModelConfig::toy(MoeVariant::Cartesian)).unwrap();
        let r = disable_top1_eval(&m, &stream(), 8, 1).unwrap();
        assert_eq!(r.sublayer_choices[0] + r.sublayer_choices[1], 45);
        assert!(r.ppl_masked.is_finite() && r.ppl_normal.is_finite());
    }
}

//! Training-backed harnesses: granularity sweep and controlled comparison.

use super::params::{count_params, ParamReport};
use crate::error::{Error, Result};
use crate::io::metrics::MetricsRecord;
use crate::model::{Model, ModelConfig, MoeVariant};
use crate::train::{TrainSettings, Trainer};

/// Relative tolerance of the parameter parity guard.
pub const PARITY_TOLERANCE: f64 = 0.01;

/// Trains `config` on `corpus`, streaming records to `sink`, and returns the
/// trainer with the dropless perplexity of `eval_stream`.
pub fn train_and_evaluate(
    config: &ModelConfig,
    settings: &TrainSettings,
    corpus: &[usize],
    eval_stream: &[usize],
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(Trainer, f64)> {
    let mut trainer = Trainer::new(Model::new(config)?, settings.clone())?;
    trainer.run(corpus, &mut sink)?;
    let ppl = trainer.evaluate(eval_stream)?;
    let record = MetricsRecord::new("eval", trainer.label.clone(), trainer.step_index() as u64).with("ppl", ppl);
    sink(&record)?;
    Ok((trainer, ppl))
}

/// One row of the granularity table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Intermediate size of one expert, `D / m`.
    pub expert_size: usize,
    /// Activated routed experts per token: `mK`, or `k+k` for Cartesian.
    pub activation: String,
    pub m: usize,
    /// `Full-sized`, `Fine-grained Routing` or `CartesianMoE`.
    pub mode: String,
    pub params: ParamReport,
    pub ppl: f64,
}

impl SweepRow {
    pub const HEADER: [&'static str; 8] =
        ["D", "K", "m", "Mode", "PPL", "total_params", "activated_params", "activated_expert_params"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.expert_size.to_string(),
            self.activation.clone(),
            self.m.to_string(),
            self.mode.clone(),
            format!("{:.4}", self.ppl),
            self.params.total_params.to_string(),
            self.params.activated_params.to_string(),
            self.params.activated_expert_params().to_string(),
        ]
    }
}

/// Configurations of the sweep: `m = 1` is the full-sized top-K row; every
/// `m > 1` yields a flattened fine-grained row and a Cartesian row.
pub fn sweep_configs(base: &ModelConfig, m_values: &[usize]) -> Result<Vec<(String, ModelConfig)>> {
    let d = base.ffn_size;
    let valid: Vec<String> = (1..=d).filter(|m| d % m == 0).take(16).map(|m| m.to_string()).collect();
    let mut out = Vec::new();
    for &m in m_values {
        if m == 0 || d % m != 0 {
            return Err(Error::Config(format!(
                "ffn_size {d} is not divisible by m = {m}; valid m include {}",
                valid.join(", ")
            )));
        }
        let with = |variant| ModelConfig { moe_variant: variant, granularity: m, ..base.clone() };
        let rows = if m == 1 {
            vec![("Full-sized".to_string(), with(MoeVariant::Smoe))]
        } else {
            vec![
                ("Fine-grained Routing".to_string(), with(MoeVariant::FineGrained)),
                ("CartesianMoE".to_string(), with(MoeVariant::Cartesian)),
            ]
        };
        for (mode, cfg) in rows {
            cfg.validate()?;
            out.push((mode, cfg));
        }
    }
    Ok(out)
}

/// Trains and evaluates every sweep configuration with the same seed and
/// data order.
pub fn granularity_sweep(
    base: &ModelConfig,
    m_values: &[usize],
    settings: &TrainSettings,
    corpus: &[usize],
    eval_stream: &[usize],
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (mode, cfg) in sweep_configs(base, m_values)? {
        let label = format!("m{}-{}", cfg.granularity, cfg.moe_variant);
        let (_, ppl) = train_and_evaluate(&cfg, settings, corpus, eval_stream, |r| {
            let mut r = r.clone();
            r.label = label.clone();
            sink(&r)
        })?;
        let activation = if cfg.moe_variant == MoeVariant::Cartesian {
            format!("{k}+{k}", k = cfg.sublayer_top_k())
        } else {
            cfg.activated_experts().to_string()
        };
        rows.push(SweepRow {
            expert_size: cfg.expert_size(),
            activation,
            m: cfg.granularity,
            mode,
            params: count_params(&cfg),
            ppl,
        });
    }
    Ok(rows)
}

/// Result of one variant in a controlled comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub params: ParamReport,
    pub final_lm: f64,
    pub ppl: f64,
    /// 1 for the lowest perplexity.
    pub rank: usize,
}

impl CompareRow {
    pub const HEADER: [&'static str; 6] = ["rank", "variant", "PPL", "final_lm", "total_params", "activated_params"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.rank.to_string(),
            self.label.clone(),
            format!("{:.4}", self.ppl),
            format!("{:.4}", self.final_lm),
            self.params.total_params.to_string(),
            self.params.activated_params.to_string(),
        ]
    }
}

/// Rejects configurations whose total or activated parameters differ from
/// the first configuration's by more than [`PARITY_TOLERANCE`].
pub fn check_parity(configs: &[ModelConfig]) -> Result<Vec<ParamReport>> {
    let reports: Vec<ParamReport> = configs.iter().map(count_params).collect();
    let Some(reference) = reports.first().copied() else {
        return Err(Error::Config("no configurations to compare".into()));
    };
    for (cfg, r) in configs.iter().zip(&reports) {
        for (what, x, y) in [
            ("total", r.total_params, reference.total_params),
            ("activated", r.activated_params, reference.activated_params),
        ] {
            let delta = x as i128 - y as i128;
            if (delta.unsigned_abs() as f64) > PARITY_TOLERANCE * y as f64 {
                return Err(Error::Config(format!(
                    "parameter parity violated: `{}` has {what} {x} vs reference `{}` {y} (delta {delta:+}, {:+.2}%)",
                    cfg.moe_variant,
                    configs[0].moe_variant,
                    100.0 * delta as f64 / y as f64
                )));
            }
        }
    }
    Ok(reports)
}

/// Trains each configuration with identical seed and data order and ranks
/// them by perplexity. Refuses to run without parameter parity.
pub fn compare_variants(
    configs: &[ModelConfig],
    settings: &TrainSettings,
    corpus: &[usize],
    eval_stream: &[usize],
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<CompareRow>> {
    let reports = check_parity(configs)?;
    let mut rows = Vec::new();
    for (cfg, params) in configs.iter().zip(reports) {
        let mut final_lm = f64::NAN;
        let (trainer, ppl) = train_and_evaluate(cfg, settings, corpus, eval_stream, |r| {
            if let Some(lm) = r.get("lm") {
                final_lm = lm;
            }
            sink(r)
        })?;
        rows.push(CompareRow { label: trainer.label, params, final_lm, ppl, rank: 0 });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].ppl.total_cmp(&rows[b].ppl).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    order.into_iter().map(|i| Ok(rows[i].clone())).collect()
}

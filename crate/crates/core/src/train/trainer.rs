use super::balance::{balance_loss, balance_stats, total_loss};
use super::optim::{AdamConfig, AdamW};
use crate::error::{Error, Result};
use crate::io::metrics::MetricsRecord;
use crate::model::{Mode, Model, TokenBatch};
use crate::rng::{Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub base_lr: f64,
    /// Seed of the data-order stream.
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self, model: &Model<f32>) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.seq_len < 2 || self.seq_len > model.config.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} outside [2, max_seq_len = {}]",
                self.seq_len, model.config.max_seq_len
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// Single-writer training loop. Batch `b` of step `s` is the window starting
/// at draw `s * batch_size + b` of the `data` stream, so any step can be
/// reproduced without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: AdamW,
    pub settings: TrainSettings,
    pub label: String,
}

impl Trainer {
    pub fn new(model: Model<f32>, settings: TrainSettings) -> Result<Self> {
        settings.validate(&model)?;
        let optim = AdamW::new(AdamConfig::for_run(settings.base_lr, settings.steps), &model.params);
        let label = model.config.moe_variant.name().to_string();
        Ok(Self { model, optim, settings, label })
    }

    /// Restores a trainer from saved parameters and optimizer state.
    pub fn resume(model: Model<f32>, optim: AdamW, settings: TrainSettings) -> Result<Self> {
        settings.validate(&model)?;
        if optim.m.len() != model.params.len()
            || optim.m.iter().zip(model.params.iter()).any(|(m, p)| m.len() != p.value.numel())
        {
            return Err(Error::Contract("optimizer state does not match model parameters".into()));
        }
        let label = model.config.moe_variant.name().to_string();
        Ok(Self { model, optim, settings, label })
    }

    pub fn step_index(&self) -> usize {
        self.optim.step
    }

    pub fn sample_batch(&self, corpus: &[usize], step: usize) -> Result<TokenBatch> {
        let (b, t) = (self.settings.batch_size, self.settings.seq_len);
        if corpus.len() < t {
            return Err(Error::Contract(format!("corpus of {} tokens is shorter than seq_len {t}", corpus.len())));
        }
        let starts = (corpus.len() - t + 1) as u64;
        let mut ids = Vec::with_capacity(b * t);
        for i in 0..b {
            let s = Rng::at(self.settings.seed, Stream::DATA, (step * b + i) as u64) % starts;
            ids.extend_from_slice(&corpus[s as usize..s as usize + t]);
        }
        TokenBatch::new(ids, b, t)
    }

    /// One optimizer update. The record carries `lm`, `bal`, `total`, `lr`,
    /// `grad_norm`, and per router `drop.b<block>.s<sub>` and
    /// `max_w.b<block>.s<sub>`.
    pub fn step(&mut self, corpus: &[usize]) -> Result<MetricsRecord> {
        let step = self.optim.step;
        let batch = self.sample_batch(corpus, step)?;
        let alpha = self.model.config.alpha_balance;
        let mut record = MetricsRecord::new("train", self.label.clone(), step as u64);
        let grads = {
            let mut ctx = self.model.forward(Mode::Train);
            let (lm, _) = self.model.lm_loss(&mut ctx, &batch)?;
            let bal = balance_loss(&mut ctx)?;
            let total = total_loss(&mut ctx, lm, bal, alpha)?;
            let values = [lm, bal, total].map(|v| f64::from(ctx.graph.value(v).item()));
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "train",
                    format!("non-finite loss at step {step}: lm={} bal={}", values[0], values[1]),
                ));
            }
            record.push("lm", values[0]).push("bal", values[1]).push("total", values[2]);
            for r in &ctx.routings {
                record.push(format!("drop.b{}.s{}", r.block, r.sublayer), r.decision.drop_rate());
            }
            for r in &ctx.routings {
                if r.decision.probs.is_some() {
                    let max_w = balance_stats(&r.decision)?.max_w();
                    record.push(format!("max_w.b{}.s{}", r.block, r.sublayer), max_w);
                }
            }
            ctx.backward(total)?;
            ctx.param_grads()
        };
        self.model.params.zero_grads();
        for (id, g) in grads {
            self.model.params.accumulate_grad(id, &g);
        }
        let info = self.optim.step(&mut self.model.params)?;
        record.push("lr", info.lr).push("grad_norm", info.grad_norm);
        Ok(record)
    }

    /// Runs until `settings.steps` updates have been applied, handing each
    /// record to `sink`.
    pub fn run(&mut self, corpus: &[usize], mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.optim.step < self.settings.steps {
            let record = self.step(corpus)?;
            sink(&record)?;
        }
        Ok(())
    }

    /// Dropless perplexity of `stream` in windows of the training length.
    pub fn evaluate(&self, stream: &[usize]) -> Result<f64> {
        self.model.perplexity(stream, self.settings.seq_len)
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

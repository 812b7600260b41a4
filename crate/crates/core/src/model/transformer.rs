use super::config::{ModelConfig, NORM_EPS, ROPE_BASE};
use super::forward::{Forward, Mode, RoutePolicy};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::moe::layer::{Ffn, MoeLayer, INIT_STD};
use crate::rng::{Rng, Stream};
use crate::tensor::{Real, Var};

/// `B x T` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::shape(
                "token-batch",
                format!("{} ids do not form a {batch} x {seq} batch", ids.len()),
            ));
        }
        Ok(Self { ids, batch, seq })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::shape("token-batch", "rows of unequal length".to_string()));
        }
        Self::new(rows.concat(), rows.len(), seq)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Validates ids and length against a model.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq > config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq, config.max_seq_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary {}", config.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnSlot {
    Dense(Ffn),
    Moe(MoeLayer),
}

/// Pre-norm block: `h' = h + MHA(norm(h))`, then `h' + FFN(norm(h'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub slot: FfnSlot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    /// Output projection `[d, vocab]`; `None` when tied to the embedding.
    pub head: Option<ParamId>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model: weights from N(0, 0.02^2) on the
    /// `init` stream, norm gains at one.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed, Stream::INIT);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let embed = params.add_normal("embed", &[config.vocab_size, d], INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for b in 0..config.n_layers {
            let p = format!("block.{b}");
            let attn_norm = params.add_filled(format!("{p}.attn_norm"), &[d], 1.0);
            let wq = params.add_normal(format!("{p}.wq"), &[d, d], INIT_STD, &mut rng);
            let wk = params.add_normal(format!("{p}.wk"), &[d, d], INIT_STD, &mut rng);
            let wv = params.add_normal(format!("{p}.wv"), &[d, d], INIT_STD, &mut rng);
            let wo = params.add_normal(format!("{p}.wo"), &[d, d], INIT_STD, &mut rng);
            let ffn_norm = params.add_filled(format!("{p}.ffn_norm"), &[d], 1.0);
            let slot = if config.is_moe_block(b) {
                FfnSlot::Moe(MoeLayer::build(&mut params, &format!("{p}.moe"), config, &mut rng)?)
            } else {
                FfnSlot::Dense(Ffn::build(&mut params, &format!("{p}.ffn"), d, config.ffn_size, &mut rng))
            };
            blocks.push(Block { attn_norm, wq, wk, wv, wo, ffn_norm, slot });
        }
        let final_norm = params.add_filled("final_norm", &[d], 1.0);
        let head = (!config.tied_embeddings)
            .then(|| params.add_normal("head", &[d, config.vocab_size], INIT_STD, &mut rng));
        Ok(Self { config: config.clone(), params, embed, blocks, final_norm, head })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            head: self.head,
        }
    }

    pub fn forward<'p>(&'p self, mode: Mode) -> Forward<'p, T> {
        Forward::new(&self.params, mode)
    }

    /// One block over `h: [B, T, d]`.
    pub fn block_forward(&self, ctx: &mut Forward<'_, T>, h: Var, block: usize) -> Result<Var> {
        let shape = ctx.graph.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::shape("block", format!("expected [B, T, {}], got {shape:?}", self.config.d_model)));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let blk = &self.blocks[block];
        let eps = T::lit(NORM_EPS);
        let x = ctx.graph.reshape(h, &[b * t, d])?;
        let g = ctx.param(blk.attn_norm);
        let xn = ctx.graph.rmsnorm(x, g, eps)?;
        let attn = self.attention(ctx, xn, blk, b, t)?;
        let h_attn = ctx.graph.add(x, attn)?;
        let g = ctx.param(blk.ffn_norm);
        let hn = ctx.graph.rmsnorm(h_attn, g, eps)?;
        let delta = match &blk.slot {
            FfnSlot::Dense(ffn) => ffn.forward(ctx, hn)?,
            FfnSlot::Moe(layer) => layer.forward(ctx, hn, block)?,
        };
        let out = ctx.graph.add(h_attn, delta)?;
        ctx.graph.reshape(out, &[b, t, d])
    }

    /// Causal multi-head attention with rotary positions over `x: [B*T, d]`.
    fn attention(&self, ctx: &mut Forward<'_, T>, x: Var, blk: &Block, b: usize, t: usize) -> Result<Var> {
        let (h, hd) = (self.config.n_heads, self.config.head_dim());
        let d = h * hd;
        let heads = |ctx: &mut Forward<'_, T>, w: ParamId| -> Result<Var> {
            let w = ctx.param(w);
            let y = ctx.graph.matmul(x, w)?;
            let y = ctx.graph.reshape(y, &[b, t, h, hd])?;
            let y = ctx.graph.transpose(y, &[0, 2, 1, 3])?;
            ctx.graph.reshape(y, &[b * h, t, hd])
        };
        let q = heads(ctx, blk.wq)?;
        let k = heads(ctx, blk.wk)?;
        let v = heads(ctx, blk.wv)?;
        let base = T::lit(ROPE_BASE);
        let q = ctx.graph.rope(q, base)?;
        let k = ctx.graph.rope(k, base)?;
        let kt = ctx.graph.transpose(k, &[0, 2, 1])?;
        let scores = ctx.graph.matmul(q, kt)?;
        let scores = ctx.graph.scale(scores, T::one() / T::lit(hd as f64).sqrt());
        let scores = ctx.graph.causal_mask(scores)?;
        let attn = ctx.graph.softmax(scores)?;
        let y = ctx.graph.matmul(attn, v)?;
        let y = ctx.graph.reshape(y, &[b, h, t, hd])?;
        let y = ctx.graph.transpose(y, &[0, 2, 1, 3])?;
        let y = ctx.graph.reshape(y, &[b * t, d])?;
        let wo = ctx.param(blk.wo);
        ctx.graph.matmul(y, wo)
    }

    /// Logits `[B*T, vocab]` for every position of the batch.
    pub fn logits(&self, ctx: &mut Forward<'_, T>, batch: &TokenBatch) -> Result<Var> {
        batch.check(&self.config)?;
        ctx.token_ids = batch.ids.clone();
        let d = self.config.d_model;
        let table = ctx.param(self.embed);
        let x = ctx.graph.embedding(table, &batch.ids)?;
        let mut h = ctx.graph.reshape(x, &[batch.batch, batch.seq, d])?;
        for block in 0..self.blocks.len() {
            h = self.block_forward(ctx, h, block)?;
        }
        let h = ctx.graph.reshape(h, &[batch.batch * batch.seq, d])?;
        let g = ctx.param(self.final_norm);
        let h = ctx.graph.rmsnorm(h, g, T::lit(NORM_EPS))?;
        let head = match self.head {
            Some(w) => ctx.param(w),
            None => {
                let e = ctx.param(self.embed);
                ctx.graph.transpose(e, &[1, 0])?
            }
        };
        ctx.graph.matmul(h, head)
    }

    /// Token-mean next-token cross-entropy. Returns the loss and the logits
    /// `[B, T-1, vocab]` of the predicting positions.
    pub fn lm_loss(&self, ctx: &mut Forward<'_, T>, batch: &TokenBatch) -> Result<(Var, Var)> {
        if batch.seq < 2 {
            return Err(Error::Contract(format!(
                "language-model loss needs at least 2 tokens per sequence, got {}",
                batch.seq
            )));
        }
        let logits = self.logits(ctx, batch)?;
        let (b, t) = (batch.batch, batch.seq);
        let rows: Vec<usize> = (0..b).flat_map(|i| (0..t - 1).map(move |j| i * t + j)).collect();
        let targets: Vec<usize> = (0..b).flat_map(|i| batch.row(i)[1..].iter().copied()).collect();
        let pred = ctx.graph.gather_rows(logits, &rows)?;
        let loss = ctx.graph.cross_entropy(pred, &targets)?;
        let pred = ctx.graph.reshape(pred, &[b, t - 1, self.config.vocab_size])?;
        Ok((loss, pred))
    }

    /// Perplexity of a token stream under dropless evaluation.
    pub fn perplexity(&self, stream: &[usize], window: usize) -> Result<f64> {
        Ok(self.perplexity_with(stream, window, RoutePolicy::Standard)?.0)
    }

    /// Perplexity with a routing policy, scoring every token after the first
    /// exactly once. Windows of `window` tokens overlap by one so each window's
    /// first target continues where the previous one stopped. Also returns how
    /// often each Cartesian sub-layer was masked.
    pub fn perplexity_with(&self, stream: &[usize], window: usize, policy: RoutePolicy) -> Result<(f64, [u64; 2])> {
        if stream.len() < 2 {
            return Err(Error::Contract(format!(
                "perplexity needs a stream of at least 2 tokens, got {}",
                stream.len()
            )));
        }
        let window = window.min(self.config.max_seq_len);
        if window < 2 {
            return Err(Error::Config(format!("evaluation window {window} is shorter than 2 tokens")));
        }
        let mut policy = policy;
        let mut choices = [0u64; 2];
        let mut nll = 0.0f64;
        let mut count = 0usize;
        let mut start = 0;
        while start + 1 < stream.len() {
            let end = (start + window).min(stream.len());
            let batch = TokenBatch::new(stream[start..end].to_vec(), 1, end - start)?;
            let mut ctx = self.forward(Mode::Eval).with_policy(policy);
            let (loss, _) = self.lm_loss(&mut ctx, &batch)?;
            let n = end - start - 1;
            nll += ctx.graph.value(loss).item().as_f64() * n as f64;
            count += n;
            choices[0] += ctx.sublayer_choices[0];
            choices[1] += ctx.sublayer_choices[1];
            policy = std::mem::replace(&mut ctx.policy, RoutePolicy::Standard);
            start = end - 1;
        }
        let ppl = (nll / count as f64).exp();
        if !ppl.is_finite() {
            return Err(Error::numeric("perplexity", format!("non-finite perplexity from mean NLL {}", nll / count as f64)));
        }
        Ok((ppl, choices))
    }
}

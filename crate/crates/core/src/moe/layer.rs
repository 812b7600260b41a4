use super::routing::{
    apply_capacity, argmax, check_topk, check_topp, hash_route, select_topk, select_topk_masked, select_topp,
    select_topp_masked, RoutingDecision,
};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, MoeVariant};
use crate::model::forward::{FrozenRoute, Forward, LayerRouting, Mode, RoutePolicy};
use crate::model::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, Var};

/// Initialization scale of every weight matrix.
pub const INIT_STD: f64 = 0.02;

/// SwiGLU feed-forward network: `down(silu(x W_gate) * (x W_up))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ffn {
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
    pub hidden: usize,
}

impl Ffn {
    pub fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Ffn {
            gate: store.add_normal(format!("{prefix}.gate"), &[d, hidden], INIT_STD, rng),
            up: store.add_normal(format!("{prefix}.up"), &[d, hidden], INIT_STD, rng),
            down: store.add_normal(format!("{prefix}.down"), &[hidden, d], INIT_STD, rng),
            hidden,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (wg, wu, wd) = (ctx.param(self.gate), ctx.param(self.up), ctx.param(self.down));
        let g = ctx.graph.matmul(x, wg)?;
        let g = ctx.graph.silu(g);
        let u = ctx.graph.matmul(x, wu)?;
        let h = ctx.graph.mul(g, u)?;
        ctx.graph.matmul(h, wd)
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.gate, self.up, self.down]
    }
}

/// Expert selection rule of one router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    TopK(usize),
    /// Threshold and the nominal activation used for capacity.
    TopP { threshold: f64, nominal: usize },
    /// Fixed assignment of `k` experts per token id.
    Hash { k: usize, seed: u64 },
}

/// Routed experts behind one router, plus the shared experts applied to
/// every token alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGroup {
    pub routed: Vec<Ffn>,
    pub shared: Vec<Ffn>,
    /// Bias-free `[d, routed]` router; `None` for hash routing.
    pub router: Option<ParamId>,
    pub rule: Rule,
}

impl ExpertGroup {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        expert_size: usize,
        routed: usize,
        shared: usize,
        rule: Rule,
        rng: &mut Rng,
    ) -> Self {
        let router = match rule {
            Rule::Hash { .. } => None,
            _ => Some(store.add_normal(format!("{prefix}.router"), &[d, routed], INIT_STD, rng)),
        };
        let routed = (0..routed)
            .map(|i| Ffn::build(store, &format!("{prefix}.expert.{i}"), d, expert_size, rng))
            .collect();
        let shared = (0..shared)
            .map(|i| Ffn::build(store, &format!("{prefix}.shared.{i}"), d, expert_size, rng))
            .collect();
        ExpertGroup { routed, shared, router, rule }
    }

    pub fn num_experts(&self) -> usize {
        self.routed.len()
    }
}

/// One MoE layer: a single expert group, or the two sequential sub-layers
/// (A then B) of a Cartesian product layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub groups: Vec<ExpertGroup>,
    pub cartesian: bool,
    pub capacity_factor: f64,
}

impl MoeLayer {
    pub fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.d_model;
        let size = config.expert_size();
        let shared = config.shared_expert_count();
        let n = config.routed_experts();
        let k = config.activated_experts();
        let groups = match config.moe_variant {
            MoeVariant::Dense => {
                return Err(Error::Config("dense configuration has no MoE layer".into()));
            }
            MoeVariant::Smoe | MoeVariant::SmoeTop3 | MoeVariant::FineGrained => {
                check_topk(k, n)?;
                vec![ExpertGroup::build(store, prefix, d, size, n, shared, Rule::TopK(k), rng)]
            }
            MoeVariant::TopP => {
                check_topp(config.topp_threshold)?;
                let rule = Rule::TopP { threshold: config.topp_threshold, nominal: k };
                vec![ExpertGroup::build(store, prefix, d, size, n, shared, rule, rng)]
            }
            MoeVariant::Hash => {
                check_topk(k, n)?;
                let rule = Rule::Hash { k, seed: config.seed };
                vec![ExpertGroup::build(store, prefix, d, size, n, shared, rule, rng)]
            }
            MoeVariant::Cartesian => {
                config.validate()?;
                let (e, sub_k) = (config.sublayer_experts(), config.sublayer_top_k());
                check_topk(sub_k, e)?;
                ["a", "b"]
                    .iter()
                    .map(|s| {
                        let p = format!("{prefix}.{s}");
                        ExpertGroup::build(store, &p, d, size, e, shared / 2, Rule::TopK(sub_k), rng)
                    })
                    .collect()
            }
        };
        Ok(MoeLayer {
            groups,
            cartesian: config.moe_variant == MoeVariant::Cartesian,
            capacity_factor: config.capacity_factor,
        })
    }

    /// Adds the layer's contribution (the residual excluded) for `x: [tokens, d]`.
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var, block: usize) -> Result<Var> {
        if self.cartesian {
            Ok(cartesian_forward(ctx, x, self, block)?.delta)
        } else {
            let (delta, _) = group_forward(ctx, x, &self.groups[0], self.capacity_factor, block, 0, None)?;
            Ok(delta)
        }
    }
}

/// Routes `x` through a group's router, honoring replay, masking policy and
/// (in training mode) expert capacity. `mask` selects which tokens have their
/// top-1 expert disabled; `None` means all tokens when the policy asks for it.
pub fn route_group<T: Real>(
    ctx: &mut Forward<'_, T>,
    x: Var,
    group: &ExpertGroup,
    capacity_factor: f64,
    mask: Option<&[bool]>,
) -> Result<(RoutingDecision<T>, Option<Var>)> {
    let tokens = ctx.graph.shape(x)[0];
    let masking = matches!(ctx.policy, RoutePolicy::DisableTop1(_));
    let frozen = ctx.next_frozen();
    let (mut decision, probs) = match group.rule {
        Rule::Hash { k, seed } => {
            if masking {
                return Err(Error::Config(
                    "top-1 expert ablation needs a probabilistic router; hash routing is fixed".into(),
                ));
            }
            if ctx.token_ids.len() != tokens {
                return Err(Error::Contract(format!(
                    "hash routing needs {tokens} token ids, context holds {}",
                    ctx.token_ids.len()
                )));
            }
            (hash_route(seed, &ctx.token_ids, group.num_experts(), k)?, None)
        }
        Rule::TopK(_) | Rule::TopP { .. } => {
            let router = group.router.ok_or_else(|| Error::Contract("probabilistic rule without router".into()))?;
            let w = ctx.param(router);
            let logits = ctx.graph.matmul(x, w)?;
            let probs = ctx.graph.softmax(logits)?;
            let e = group.num_experts();
            let masked = |t: usize| masking && mask.map_or(true, |m| m[t]);
            let rule = group.rule;
            if masking {
                let active = match rule {
                    Rule::TopK(k) => k,
                    _ => 1,
                };
                if active >= e {
                    return Err(Error::Config(format!(
                        "cannot disable the top-1 expert: activation {active} leaves nothing to reselect among {e}"
                    )));
                }
            }
            let nominal = match rule {
                Rule::TopK(k) => k,
                Rule::TopP { nominal, .. } => nominal,
                Rule::Hash { k, .. } => k,
            };
            let pv = ctx.graph.value(probs).clone();
            let mut t = 0usize;
            let decision = RoutingDecision::from_probs(
                pv,
                |row| {
                    let sel = match (rule, masked(t)) {
                        (Rule::TopK(k), false) => select_topk(row, k),
                        (Rule::TopK(k), true) => select_topk_masked(row, k),
                        (Rule::TopP { threshold, .. }, false) => select_topp(row, threshold),
                        (Rule::TopP { threshold, .. }, true) => select_topp_masked(row, threshold),
                        (Rule::Hash { .. }, _) => unreachable!(),
                    };
                    t += 1;
                    sel
                },
                nominal,
            );
            (decision, Some(probs))
        }
    };
    if let Some(f) = frozen {
        decision.gates = match &decision.probs {
            Some(p) => f.selected.iter().enumerate().map(|(t, s)| s.iter().map(|&i| p.row(t)[i]).collect()).collect(),
            None => decision.gates,
        };
        decision.selected = f.selected;
        decision.dropped = f.dropped;
        decision.top1 = f.top1;
    } else {
        if ctx.mode == Mode::Train {
            apply_capacity(&mut decision, capacity_factor)?;
        }
        ctx.record(FrozenRoute {
            selected: decision.selected.clone(),
            dropped: decision.dropped.clone(),
            top1: decision.top1.clone(),
        });
    }
    Ok((decision, probs))
}

/// Weighted sum of the selected experts' outputs plus the ungated shared
/// experts. Dropped slots contribute nothing.
pub fn moe_forward<T: Real>(
    ctx: &mut Forward<'_, T>,
    x: Var,
    group: &ExpertGroup,
    decision: &RoutingDecision<T>,
    probs: Option<Var>,
) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("moe", format!("expected [tokens, d], got {shape:?}")));
    }
    let (tokens, d) = (shape[0], shape[1]);
    let e = group.num_experts();
    if decision.num_experts != e || decision.tokens() != tokens {
        return Err(Error::Contract(format!(
            "routing decision covers {} experts x {} tokens, layer has {e} experts x {tokens} tokens",
            decision.num_experts,
            decision.tokens()
        )));
    }
    let mut rows_per_expert = vec![Vec::new(); e];
    let mut gates_per_expert = vec![Vec::new(); e];
    for t in 0..tokens {
        for (slot, &ex) in decision.selected[t].iter().enumerate() {
            if !decision.dropped[t][slot] {
                rows_per_expert[ex].push(t);
                gates_per_expert[ex].push((t * e + ex, decision.gates[t][slot]));
            }
        }
    }
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut gate_index = Vec::new();
    let mut gate_values = Vec::new();
    for (ex, ffn) in group.routed.iter().enumerate() {
        if rows_per_expert[ex].is_empty() {
            continue;
        }
        let xe = ctx.graph.gather_rows(x, &rows_per_expert[ex])?;
        outputs.push(ffn.forward(ctx, xe)?);
        rows.extend_from_slice(&rows_per_expert[ex]);
        for &(flat, g) in &gates_per_expert[ex] {
            gate_index.push(flat);
            gate_values.push(g);
        }
    }
    let mut out = if outputs.is_empty() {
        ctx.graph.constant(Tensor::zeros(&[tokens, d]))
    } else {
        let y = if outputs.len() == 1 { outputs[0] } else { ctx.graph.concat(&outputs, 0)? };
        let gates = match probs {
            Some(p) => ctx.graph.gather_elems(p, &gate_index)?,
            None => ctx.graph.constant(Tensor::raw(vec![gate_values.len()], gate_values)),
        };
        let y = ctx.graph.mul_rows(y, gates)?;
        ctx.graph.scatter_add_rows(y, &rows, tokens)?
    };
    for ffn in &group.shared {
        let s = ffn.forward(ctx, x)?;
        out = ctx.graph.add(out, s)?;
    }
    Ok(out)
}

fn group_forward<T: Real>(
    ctx: &mut Forward<'_, T>,
    x: Var,
    group: &ExpertGroup,
    capacity_factor: f64,
    block: usize,
    sublayer: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, RoutingDecision<T>)> {
    let (decision, probs) = route_group(ctx, x, group, capacity_factor, mask)?;
    let out = moe_forward(ctx, x, group, &decision, probs)?;
    ctx.routings.push(LayerRouting { block, sublayer, decision: decision.clone(), probs });
    Ok((out, decision))
}

/// Result of a Cartesian product layer.
#[derive(Debug, Clone)]
pub struct CartesianOutput<T> {
    /// `B(h_bar) + h_bar` where `h_bar = A(h_hat) + h_hat`.
    pub out: Var,
    /// `out - h_hat`, the part added to the residual stream by a block.
    pub delta: Var,
    /// `h_bar`, the input of sub-layer B.
    pub mid: Var,
    pub decisions: (RoutingDecision<T>, RoutingDecision<T>),
}

/// Two sequential routed sub-layers with a residual between them:
/// sub-layer A and router r1 see `x`; sub-layer B and router r2 see
/// `h_bar = x + A(x)`; the result is `B(h_bar) + h_bar`.
pub fn cartesian_forward<T: Real>(
    ctx: &mut Forward<'_, T>,
    x: Var,
    layer: &MoeLayer,
    block: usize,
) -> Result<CartesianOutput<T>> {
    if !layer.cartesian || layer.groups.len() != 2 {
        return Err(Error::Contract("cartesian_forward needs a two-sub-layer Cartesian layer".into()));
    }
    let tokens = ctx.graph.shape(x)[0];
    let choice: Option<Vec<usize>> = match &mut ctx.policy {
        RoutePolicy::DisableTop1(rng) => Some((0..tokens).map(|_| usize::from(rng.coin())).collect()),
        RoutePolicy::Standard => None,
    };
    if let Some(c) = &choice {
        for &s in c {
            ctx.sublayer_choices[s] += 1;
        }
    }
    let mask_a: Option<Vec<bool>> = choice.as_ref().map(|c| c.iter().map(|&s| s == 0).collect());
    let mask_b: Option<Vec<bool>> = choice.as_ref().map(|c| c.iter().map(|&s| s == 1).collect());
    let cf = layer.capacity_factor;
    let (tilde, dec_a) = group_forward(ctx, x, &layer.groups[0], cf, block, 0, mask_a.as_deref())?;
    let mid = ctx.graph.add(x, tilde)?;
    let (b_out, dec_b) = group_forward(ctx, mid, &layer.groups[1], cf, block, 1, mask_b.as_deref())?;
    let out = ctx.graph.add(b_out, mid)?;
    let delta = ctx.graph.add(tilde, b_out)?;
    Ok(CartesianOutput { out, delta, mid, decisions: (dec_a, dec_b) })
}

/// Flattened fine-grained layer with its residual: `x + sum_i g_i FFN_i(x)`
/// over one router covering all experts.
pub fn flattened_forward<T: Real>(
    ctx: &mut Forward<'_, T>,
    x: Var,
    layer: &MoeLayer,
    block: usize,
) -> Result<(Var, RoutingDecision<T>)> {
    if layer.cartesian || layer.groups.len() != 1 {
        return Err(Error::Contract("flattened_forward needs a single-router layer".into()));
    }
    let (delta, decision) = group_forward(ctx, x, &layer.groups[0], layer.capacity_factor, block, 0, None)?;
    Ok((ctx.graph.add(x, delta)?, decision))
}

/// Argmax of a row, exposed for balance statistics on raw probabilities.
pub fn top1<T: Real>(row: &[T]) -> usize {
    argmax(row)
}

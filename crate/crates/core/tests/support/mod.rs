//! Fixtures and scalar-loop reference implementations shared by the
//! integration suites and the acceptance harness.
//!
//! The references recompute everything with plain nested loops over `f64`
//! and never call into the graph, so agreement with the library is evidence
//! about the library rather than about itself.

#![allow(dead_code)]

use moelab::model::{FfnSlot, Forward, Mode, Model, ModelConfig, MoeVariant, ParamStore, RoutePolicy, TokenBatch};
use moelab::moe::routing::hash_experts;
use moelab::moe::{cartesian_forward, flattened_forward, ExpertGroup, Ffn, MoeLayer, Rule};
use moelab::rng::{Rng, Stream};
use moelab::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use moelab::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-6;
const EPS: f64 = 1e-6;
const BASE: f64 = 10000.0;

pub fn rng(seed: u64) -> Rng {
    Rng::new(seed, Stream::named("tests"))
}

pub fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &rand_vec(rng, n, scale)).unwrap()
}

pub fn rand_rows(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| rand_vec(rng, d, scale)).collect()
}

/// Largest elementwise relative difference, with the library's 1e-6 floor on
/// the denominator.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

// ---------------------------------------------------------------------------
// Scalar building blocks.

pub fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), r);
    let mut out = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            out[j] += x[i] * w.data()[i * c + j];
        }
    }
    out
}

pub fn softmax_ref(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn logsumexp_ref(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn silu_ref(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn rmsnorm_ref(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + EPS).sqrt();
    x.iter().zip(g).map(|(v, w)| v * r * w).collect()
}

pub fn rope_ref(v: &mut [f64], pos: usize) {
    let hd = v.len();
    let half = hd / 2;
    for i in 0..half {
        let angle = pos as f64 * BASE.powf(-(2.0 * i as f64) / hd as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
    }
}

pub fn ffn_ref(store: &ParamStore<f64>, ffn: &Ffn, x: &[f64]) -> Vec<f64> {
    let g = vecmat(x, store.get(ffn.gate));
    let u = vecmat(x, store.get(ffn.up));
    let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu_ref(*a) * b).collect();
    vecmat(&h, store.get(ffn.down))
}

pub fn argmax_ref(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Experts by repeated strict-maximum scans (ties to the lowest index),
/// skipping `exclude`.
pub fn ranked_ref(p: &[f64], exclude: Option<usize>) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    if let Some(x) = exclude {
        taken[x] = true;
    }
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if !taken[i] && best.is_none_or(|b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => {
                taken[b] = true;
                out.push(b);
            }
            None => return out,
        }
    }
}

pub fn topk_ref(p: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut r = ranked_ref(p, exclude);
    r.truncate(k);
    r
}

pub fn topp_ref(p: &[f64], threshold: f64, exclude: Option<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cum = 0.0;
    for i in ranked_ref(p, exclude) {
        out.push(i);
        cum += p[i];
        if cum >= threshold {
            break;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// MoE references.

#[derive(Debug, Clone)]
pub struct GroupRef {
    pub out: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
    pub dropped: Vec<Vec<bool>>,
    /// Router probabilities per token (absent for hash routing).
    pub probs: Option<Vec<Vec<f64>>>,
}

/// One routed expert group on token rows `x`.
///
/// `capacity` is the capacity factor (training mode) or `None` (dropless).
/// `mask[t]` disables token `t`'s top-1 expert.
pub fn group_ref(
    store: &ParamStore<f64>,
    group: &ExpertGroup,
    x: &[Vec<f64>],
    token_ids: &[usize],
    capacity: Option<f64>,
    mask: Option<&[bool]>,
) -> GroupRef {
    let e = group.routed.len();
    let n = x.len();
    let mut selected = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let nominal = match group.rule {
        Rule::TopK(k) | Rule::Hash { k, .. } => k,
        Rule::TopP { nominal, .. } => nominal,
    };
    for (t, xt) in x.iter().enumerate() {
        let masked = mask.is_some_and(|m| m[t]);
        match group.rule {
            Rule::Hash { k, seed } => {
                let s = hash_experts(seed, token_ids[t], e, k);
                gates.push(vec![1.0 / k as f64; s.len()]);
                selected.push(s);
            }
            Rule::TopK(_) | Rule::TopP { .. } => {
                let p = softmax_ref(&vecmat(xt, store.get(group.router.unwrap())));
                let exclude = masked.then(|| argmax_ref(&p));
                let s = match group.rule {
                    Rule::TopK(k) => topk_ref(&p, k, exclude),
                    Rule::TopP { threshold, .. } => topp_ref(&p, threshold, exclude),
                    Rule::Hash { .. } => unreachable!(),
                };
                gates.push(s.iter().map(|&i| p[i]).collect());
                selected.push(s);
                probs.push(p);
            }
        }
    }
    let mut dropped: Vec<Vec<bool>> = selected.iter().map(|s| vec![false; s.len()]).collect();
    if let Some(cf) = capacity {
        let cap = (cf * nominal as f64 * n as f64 / e as f64).ceil() as usize;
        let mut load = vec![0usize; e];
        for (s, d) in selected.iter().zip(dropped.iter_mut()) {
            for (slot, &ex) in s.iter().enumerate() {
                load[ex] += 1;
                d[slot] = load[ex] > cap;
            }
        }
    }
    let out = x
        .iter()
        .enumerate()
        .map(|(t, xt)| {
            let mut o = vec![0.0; xt.len()];
            for (slot, &ex) in selected[t].iter().enumerate() {
                if dropped[t][slot] {
                    continue;
                }
                let y = ffn_ref(store, &group.routed[ex], xt);
                for (a, b) in o.iter_mut().zip(&y) {
                    *a += gates[t][slot] * b;
                }
            }
            for ffn in &group.shared {
                for (a, b) in o.iter_mut().zip(ffn_ref(store, ffn, xt)) {
                    *a += b;
                }
            }
            o
        })
        .collect();
    let probs = matches!(group.rule, Rule::TopK(_) | Rule::TopP { .. }).then_some(probs);
    GroupRef { out, selected, dropped, probs }
}

#[derive(Debug, Clone)]
pub struct CartesianRef {
    pub out: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub mid: Vec<Vec<f64>>,
    pub a: GroupRef,
    pub b: GroupRef,
}

fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Cartesian product layer: `mid = x + A(x)`, `out = mid + B(mid)`,
/// `delta = A(x) + B(mid)`.
pub fn cartesian_ref(
    store: &ParamStore<f64>,
    layer: &MoeLayer,
    x: &[Vec<f64>],
    token_ids: &[usize],
    capacity: Option<f64>,
    choice: Option<&[usize]>,
) -> CartesianRef {
    let mask_a: Option<Vec<bool>> = choice.map(|c| c.iter().map(|&s| s == 0).collect());
    let mask_b: Option<Vec<bool>> = choice.map(|c| c.iter().map(|&s| s == 1).collect());
    let a = group_ref(store, &layer.groups[0], x, token_ids, capacity, mask_a.as_deref());
    let mid = add_rows(x, &a.out);
    let b = group_ref(store, &layer.groups[1], &mid, token_ids, capacity, mask_b.as_deref());
    let out = add_rows(&mid, &b.out);
    let delta = add_rows(&a.out, &b.out);
    CartesianRef { out, delta, mid, a, b }
}

/// Single-router layer with its residual: `x + sum_i g_i FFN_i(x)`.
pub fn flattened_ref(
    store: &ParamStore<f64>,
    layer: &MoeLayer,
    x: &[Vec<f64>],
    token_ids: &[usize],
    capacity: Option<f64>,
) -> (Vec<Vec<f64>>, GroupRef) {
    let g = group_ref(store, &layer.groups[0], x, token_ids, capacity, None);
    (add_rows(x, &g.out), g)
}

/// `sum_i w_i R_i` summed over routers, `w` the argmax fractions and `R` the
/// mean probabilities.
pub fn balance_ref(routers: &[Vec<Vec<f64>>]) -> f64 {
    routers
        .iter()
        .map(|probs| {
            let e = probs[0].len();
            let n = probs.len() as f64;
            let mut w = vec![0.0; e];
            let mut r = vec![0.0; e];
            for row in probs {
                w[argmax_ref(row)] += 1.0 / n;
                for (acc, p) in r.iter_mut().zip(row) {
                    *acc += p / n;
                }
            }
            w.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Whole-model reference.

#[derive(Debug, Clone)]
pub struct ModelRef {
    /// `[B*T][vocab]`.
    pub logits: Vec<Vec<f64>>,
    /// Probabilities of every probabilistic router in forward order.
    pub router_probs: Vec<Vec<Vec<f64>>>,
}

pub fn model_ref(model: &Model<f64>, batch: &TokenBatch, mode: Mode) -> ModelRef {
    let cfg = &model.config;
    let p = &model.params;
    let (bsz, t, d) = (batch.batch, batch.seq, cfg.d_model);
    let (heads, hd) = (cfg.n_heads, d / cfg.n_heads);
    let capacity = (mode == Mode::Train).then_some(cfg.capacity_factor);
    let mut h: Vec<Vec<f64>> = batch.ids.iter().map(|&i| p.get(model.embed).row(i).to_vec()).collect();
    let mut router_probs = Vec::new();
    for blk in &model.blocks {
        let g = p.get(blk.attn_norm).data().to_vec();
        let xn: Vec<Vec<f64>> = h.iter().map(|r| rmsnorm_ref(r, &g)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p.get(blk.wq))).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p.get(blk.wk))).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p.get(blk.wv))).collect();
        let mut y = vec![vec![0.0; d]; bsz * t];
        for b in 0..bsz {
            for head in 0..heads {
                let cols = head * hd..(head + 1) * hd;
                let rot = |m: &Vec<Vec<f64>>, pos: usize| {
                    let mut s = m[b * t + pos][cols.clone()].to_vec();
                    rope_ref(&mut s, pos);
                    s
                };
                for i in 0..t {
                    let qi = rot(&q, i);
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = rot(&k, j);
                            qi.iter().zip(&kj).map(|(a, c)| a * c).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let a = softmax_ref(&scores);
                    for (j, w) in a.iter().enumerate() {
                        for c in 0..hd {
                            y[b * t + i][head * hd + c] += w * v[b * t + j][head * hd + c];
                        }
                    }
                }
            }
        }
        let attn: Vec<Vec<f64>> = y.iter().map(|r| vecmat(r, p.get(blk.wo))).collect();
        let h_attn = add_rows(&h, &attn);
        let g = p.get(blk.ffn_norm).data().to_vec();
        let hn: Vec<Vec<f64>> = h_attn.iter().map(|r| rmsnorm_ref(r, &g)).collect();
        let delta = match &blk.slot {
            FfnSlot::Dense(ffn) => hn.iter().map(|r| ffn_ref(p, ffn, r)).collect(),
            FfnSlot::Moe(layer) if layer.cartesian => {
                let c = cartesian_ref(p, layer, &hn, &batch.ids, capacity, None);
                router_probs.extend(c.a.probs.clone());
                router_probs.extend(c.b.probs.clone());
                c.delta
            }
            FfnSlot::Moe(layer) => {
                let g = group_ref(p, &layer.groups[0], &hn, &batch.ids, capacity, None);
                router_probs.extend(g.probs.clone());
                g.out
            }
        };
        h = add_rows(&h_attn, &delta);
    }
    let g = p.get(model.final_norm).data().to_vec();
    let logits = h
        .iter()
        .map(|r| {
            let n = rmsnorm_ref(r, &g);
            match model.head {
                Some(w) => vecmat(&n, p.get(w)),
                None => {
                    let e = p.get(model.embed);
                    (0..cfg.vocab_size).map(|vid| n.iter().zip(e.row(vid)).map(|(a, b)| a * b).sum()).collect()
                }
            }
        })
        .collect();
    ModelRef { logits, router_probs }
}

/// Mean next-token negative log-likelihood of the reference logits.
pub fn lm_loss_ref(logits: &[Vec<f64>], batch: &TokenBatch) -> f64 {
    let t = batch.seq;
    let mut total = 0.0;
    let mut n = 0;
    for b in 0..batch.batch {
        for i in 0..t - 1 {
            let row = &logits[b * t + i];
            total += logsumexp_ref(row) - row[batch.ids[b * t + i + 1]];
            n += 1;
        }
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// Fixture builders.

/// Tiny model whose weights are rescaled so routers make decisive choices.
pub fn tiny_model(variant: MoeVariant, seed: u64, weight_scale: f64) -> Model<f64> {
    let config = ModelConfig { seed, ..ModelConfig::toy(variant) };
    let mut model = Model::<f64>::new(&config).unwrap();
    for param in model.params.iter_mut() {
        if param.value.rank() >= 2 {
            param.value.data_mut().iter_mut().for_each(|x| *x *= weight_scale);
        }
    }
    model
}

/// The first MoE layer of a tiny model.
pub fn first_moe(model: &Model<f64>) -> &MoeLayer {
    model
        .blocks
        .iter()
        .find_map(|b| match &b.slot {
            FfnSlot::Moe(l) => Some(l),
            FfnSlot::Dense(_) => None,
        })
        .expect("variant has an MoE layer")
}

pub fn random_batch(rng: &mut Rng, vocab: usize, batch: usize, seq: usize) -> TokenBatch {
    TokenBatch::new((0..batch * seq).map(|_| rng.below(vocab)).collect(), batch, seq).unwrap()
}

/// Runs an MoE layer in the graph on token rows and returns output rows.
pub fn layer_rows(
    model: &Model<f64>,
    layer: &MoeLayer,
    x: &[Vec<f64>],
    ids: &[usize],
    mode: Mode,
    f: impl FnOnce(&mut Forward<'_, f64>, Var, &MoeLayer) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let d = x[0].len();
    let mut ctx = model.forward(mode);
    ctx.token_ids = ids.to_vec();
    let xv = ctx.graph.constant(Tensor::from_f64(&[x.len(), d], &flatten(x)).unwrap());
    let y = f(&mut ctx, xv, layer)?;
    Ok(ctx.graph.value(y).data().chunks(d).map(<[f64]>::to_vec).collect())
}

// ---------------------------------------------------------------------------
// Primitive gradient suite.

/// Contracts `y` with fixed non-uniform weights so every output element
/// influences the scalar differently.
pub fn contract(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos()).collect();
    let w = g.constant(Tensor::from_f64(&shape, &w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Check = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>);

/// Central-difference checks of every graph primitive (both operands where
/// there are two) at extended precision.
pub fn primitive_grad_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng(seed);
    let c34 = rand_tensor(&mut r, &[3, 4], 1.0);
    let c45 = rand_tensor(&mut r, &[4, 5], 1.0);
    let c245 = rand_tensor(&mut r, &[2, 4, 5], 1.0);
    let c234 = rand_tensor(&mut r, &[2, 3, 4], 1.0);
    let c4 = rand_tensor(&mut r, &[4], 1.0);
    let c43 = rand_tensor(&mut r, &[4, 3], 1.0);
    let s4 = rand_tensor(&mut r, &[4], 1.0);
    let checks: Vec<Check> = vec![
        ("matmul.lhs", vec![3, 4], Box::new(move |g, x| {
            let b = g.constant(c45.clone());
            g.matmul(x, b)
        })),
        ("matmul.rhs", vec![4, 5], Box::new({
            let c34 = c34.clone();
            move |g, x| {
                let a = g.constant(c34.clone());
                g.matmul(a, x)
            }
        })),
        ("matmul.batched.lhs", vec![2, 3, 4], Box::new(move |g, x| {
            let b = g.constant(c245.clone());
            g.matmul(x, b)
        })),
        ("matmul.batched.rhs", vec![2, 4, 5], Box::new({
            let c234 = c234.clone();
            move |g, x| {
                let a = g.constant(c234.clone());
                g.matmul(a, x)
            }
        })),
        ("matmul.rank3_by_matrix", vec![2, 3, 4], Box::new({
            let c45 = rand_tensor(&mut r, &[4, 5], 1.0);
            move |g, x| {
                let b = g.constant(c45.clone());
                g.matmul(x, b)
            }
        })),
        ("matmul.shared_operand", vec![4, 4], Box::new(|g, x| g.matmul(x, x))),
        ("add", vec![3, 4], Box::new(move |g, x| {
            let c = g.constant(c34.clone());
            g.add(x, c)
        })),
        ("add.self", vec![3, 4], Box::new(|g, x| g.add(x, x))),
        ("mul", vec![2, 3, 4], Box::new(move |g, x| {
            let c = g.constant(c234.clone());
            g.mul(x, c)
        })),
        ("mul.self", vec![3, 4], Box::new(|g, x| g.mul(x, x))),
        ("scale", vec![3, 4], Box::new(|g, x| Ok(g.scale(x, -1.7)))),
        ("softmax", vec![3, 5], Box::new(|g, x| g.softmax(x))),
        ("silu", vec![3, 4], Box::new(|g, x| Ok(g.silu(x)))),
        ("rmsnorm.input", vec![3, 4], Box::new({
            let c4 = c4.clone();
            move |g, x| {
                let w = g.constant(c4.clone());
                g.rmsnorm(x, w, 1e-6)
            }
        })),
        ("rmsnorm.weight", vec![4], Box::new(move |g, w| {
            let x = g.constant(c43.clone().reshaped(&[3, 4]).unwrap());
            g.rmsnorm(x, w, 1e-6)
        })),
        ("embedding", vec![5, 3], Box::new(|g, x| g.embedding(x, &[0, 2, 2, 4, 0]))),
        ("slice", vec![3, 4, 2], Box::new(|g, x| g.slice(x, 1, 1, 2))),
        ("concat", vec![2, 3], Box::new(|g, x| {
            let c = g.constant(Tensor::from_f64(&[2, 1], &[0.5, -0.25]).unwrap());
            g.concat(&[x, c, x], 1)
        })),
        ("transpose", vec![2, 3, 4], Box::new(|g, x| g.transpose(x, &[2, 0, 1]))),
        ("reshape", vec![2, 6], Box::new(|g, x| g.reshape(x, &[3, 4]))),
        ("sum", vec![3, 4], Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })),
        ("mean", vec![3, 4], Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.mean(y))
        })),
        ("mean_rows", vec![5, 3], Box::new(|g, x| g.mean_rows(x))),
        ("log", vec![3, 4], Box::new(|g, x| {
            // Inputs are shifted into (0, inf) before the logarithm.
            let y = g.mul(x, x)?;
            let one = g.constant(Tensor::filled(&[3, 4], 0.5));
            let y = g.add(y, one)?;
            g.log(y)
        })),
        ("cross_entropy", vec![4, 6], Box::new(|g, x| g.cross_entropy(x, &[0, 5, 2, 2]))),
        ("rope", vec![2, 5, 4], Box::new(|g, x| g.rope(x, 10000.0))),
        ("causal_mask", vec![2, 4, 4], Box::new(|g, x| {
            let y = g.causal_mask(x)?;
            g.softmax(y)
        })),
        ("gather_rows", vec![4, 3], Box::new(|g, x| g.gather_rows(x, &[3, 0, 3, 1]))),
        ("scatter_add_rows", vec![4, 3], Box::new(|g, x| g.scatter_add_rows(x, &[1, 0, 1, 2], 3))),
        ("gather_elems", vec![3, 4], Box::new(|g, x| g.gather_elems(x, &[0, 5, 5, 11]))),
        ("mul_rows.rows", vec![4, 3], Box::new(move |g, x| {
            let s = g.constant(s4.clone());
            g.mul_rows(x, s)
        })),
        ("mul_rows.scales", vec![4], Box::new(|g, s| {
            let x = g.constant(Tensor::from_f64(&[4, 2], &[1.0, -2.0, 0.5, 3.0, -1.5, 0.25, 2.0, 1.0]).unwrap());
            g.mul_rows(x, s)
        })),
    ];
    let mut out = Vec::new();
    for (name, shape, f) in checks {
        let x = rand_tensor(&mut r, &shape, 1.0);
        let report = grad_check(
            |g, x| {
                let y = f(g, x)?;
                if g.shape(y).is_empty() {
                    Ok(y)
                } else {
                    contract(g, y)
                }
            },
            &x,
            FD_STEP,
            FD_TOL,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Routing invariants.

#[derive(Debug, Clone, Default)]
pub struct RoutingSummary {
    pub tokens: usize,
    pub decisions: usize,
    pub max_prob_sum_err: f64,
    pub masked_tokens: usize,
    pub sublayer_a_masked: u64,
}

/// Pushes `tokens` random hidden states through the first MoE layer of a
/// tiny model under `policy` and checks every routing invariant that applies
/// to the variant. Errors describe the first violation.
pub fn routing_invariants(
    variant: MoeVariant,
    tokens: usize,
    seed: u64,
    policy: RoutePolicy,
) -> std::result::Result<RoutingSummary, String> {
    let model = tiny_model(variant, seed, 25.0);
    let layer = first_moe(&model);
    let d = model.config.d_model;
    let mut r = rng(seed ^ 0x5eed);
    let x = rand_rows(&mut r, tokens, d, 1.0);
    let ids: Vec<usize> = (0..tokens).map(|_| r.below(model.config.vocab_size)).collect();
    let masking = matches!(policy, RoutePolicy::DisableTop1(_));
    let mut ctx = model.forward(Mode::Eval).with_policy(policy);
    ctx.token_ids = ids.clone();
    let xv = ctx.graph.constant(Tensor::from_f64(&[tokens, d], &flatten(&x)).unwrap());
    layer.forward(&mut ctx, xv, 0).map_err(|e| e.to_string())?;
    let mut summary = RoutingSummary { tokens, ..Default::default() };
    let mut excluded_top1 = vec![0usize; tokens];
    for (sub, routing) in ctx.routings.iter().enumerate() {
        let dec = &routing.decision;
        let group = &layer.groups[sub];
        summary.decisions += dec.tokens();
        if let Some(p) = &dec.probs {
            for (t, row) in p.data().chunks(dec.num_experts).enumerate() {
                let s: f64 = row.iter().sum();
                summary.max_prob_sum_err = summary.max_prob_sum_err.max((s - 1.0).abs());
                if (s - 1.0).abs() > 1e-6 {
                    return Err(format!("token {t}: probabilities sum to {s}"));
                }
            }
        }
        for t in 0..dec.tokens() {
            let sel = &dec.selected[t];
            let mut uniq = sel.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != sel.len() {
                return Err(format!("token {t}: repeated expert in {sel:?}"));
            }
            let excluded = !sel.contains(&dec.top1[t]);
            if excluded {
                excluded_top1[t] += 1;
            }
            match group.rule {
                Rule::TopK(k) => {
                    if sel.len() != k {
                        return Err(format!("token {t}: {} experts selected, K = {k}", sel.len()));
                    }
                    if !masking && excluded {
                        return Err(format!("token {t}: top-1 expert missing without masking"));
                    }
                }
                Rule::TopP { threshold, .. } => {
                    let row = dec.probs.as_ref().unwrap().row(t);
                    let mass: f64 = sel.iter().map(|&i| row[i]).sum();
                    let without_last: f64 = sel[..sel.len() - 1].iter().map(|&i| row[i]).sum();
                    let pool = row.len() - usize::from(masking);
                    if mass < threshold && sel.len() < pool {
                        return Err(format!("token {t}: mass {mass} below threshold {threshold}"));
                    }
                    if without_last >= threshold {
                        return Err(format!("token {t}: prefix is not minimal ({without_last} already reaches {threshold})"));
                    }
                    let min_sel = sel.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
                    let skip = masking.then_some(dec.top1[t]);
                    if (0..row.len()).any(|i| !sel.contains(&i) && Some(i) != skip && row[i] > min_sel) {
                        return Err(format!("token {t}: selection is not a highest-probability prefix"));
                    }
                }
                Rule::Hash { k, seed } => {
                    if *sel != hash_experts(seed, ids[t], dec.num_experts, k) {
                        return Err(format!("token {t}: hash routing is not a function of the token id"));
                    }
                }
            }
        }
    }
    if masking {
        // Exactly one router per token loses its top-1 expert: the only one,
        // or the Cartesian sub-layer drawn for that token.
        for (t, &n) in excluded_top1.iter().enumerate() {
            if n != 1 {
                return Err(format!("token {t}: top-1 expert excluded in {n} routers, expected 1"));
            }
        }
        summary.masked_tokens = tokens;
        summary.sublayer_a_masked = ctx.sublayer_choices[0];
        if layer.cartesian {
            let a = &ctx.routings[0].decision;
            let masked_a = (0..tokens).filter(|&t| !a.selected[t].contains(&a.top1[t])).count() as u64;
            if masked_a != ctx.sublayer_choices[0] {
                return Err(format!(
                    "sub-layer A masked {masked_a} tokens, choice counter says {}",
                    ctx.sublayer_choices[0]
                ));
            }
        }
    }
    // Hash routing must also be reproducible across passes.
    if variant == MoeVariant::Hash {
        let mut again = model.forward(Mode::Eval);
        again.token_ids = ids;
        let xv = again.graph.constant(Tensor::from_f64(&[tokens, d], &flatten(&x)).unwrap());
        layer.forward(&mut again, xv, 0).map_err(|e| e.to_string())?;
        if again.routings[0].decision.selected != ctx.routings[0].decision.selected {
            return Err("hash routing differs between identical passes".into());
        }
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Layer-level relations shared by the suites and the acceptance harness.

/// Zeroes every routed, shared and router parameter of `group`.
pub fn zero_group(model: &mut Model<f64>, group: &ExpertGroup) {
    let ids: Vec<_> = group
        .routed
        .iter()
        .chain(&group.shared)
        .flat_map(|f| f.param_ids())
        .chain(group.router)
        .collect();
    for id in ids {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Largest relative difference between a Cartesian layer and the flattened
/// layer evaluated over B's experts only.
///
/// The flattened model's experts `e..2e`, its second shared expert and
/// router columns `e..2e` are copied into sub-layer B, so `r2` shares `r1`'s
/// B columns. With `zero_a` sub-layer A contributes nothing and the two
/// outputs coincide; otherwise A's output feeds B's router and they differ.
pub fn degenerate_gap(seed: u64, zero_a: bool) -> f64 {
    let mut flat = tiny_model(MoeVariant::FineGrained, seed, 20.0);
    let mut cart = tiny_model(MoeVariant::Cartesian, seed + 1000, 20.0);
    let fl = first_moe(&flat).groups[0].clone();
    let cg = first_moe(&cart).groups.clone();
    let e = cg[1].routed.len();
    assert_eq!(fl.routed.len(), 2 * e);
    let d = flat.config.d_model;
    let r1 = flat.params.get(fl.router.unwrap()).clone();
    let cols: Vec<f64> = (0..d).flat_map(|i| r1.row(i)[e..].to_vec()).collect();
    *cart.params.get_mut(cg[1].router.unwrap()) = Tensor::from_f64(&[d, e], &cols).unwrap();
    let copies = fl.routed[e..].iter().zip(&cg[1].routed).chain(fl.shared[1..].iter().zip(&cg[1].shared));
    for (src, dst) in copies {
        for (s, t) in src.param_ids().into_iter().zip(dst.param_ids()) {
            *cart.params.get_mut(t) = flat.params.get(s).clone();
        }
    }
    if zero_a {
        zero_group(&mut cart, &cg[0]);
    }
    let restricted_router = flat.params.add("restricted.router", Tensor::from_f64(&[d, e], &cols).unwrap());
    let restricted = MoeLayer {
        groups: vec![ExpertGroup {
            routed: fl.routed[e..].to_vec(),
            shared: fl.shared[1..].to_vec(),
            router: Some(restricted_router),
            rule: cg[1].rule,
        }],
        cartesian: false,
        capacity_factor: 1.0,
    };
    let mut r = rng(seed);
    let x = rand_rows(&mut r, 6, d, 1.0);
    let ids = [0; 6];
    let c = layer_rows(&cart, first_moe(&cart), &x, &ids, Mode::Eval, |ctx, xv, l| Ok(cartesian_forward(ctx, xv, l, 0)?.out))
        .unwrap();
    let f = layer_rows(&flat, &restricted, &x, &ids, Mode::Eval, |ctx, xv, l| Ok(flattened_forward(ctx, xv, l, 0)?.0))
        .unwrap();
    max_rel_diff(&flatten(&c), &flatten(&f))
}

/// Worst relative error of one computation against its oracle.
#[derive(Debug, Clone)]
pub struct OracleSweep {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl OracleSweep {
    fn new(name: &'static str) -> Self {
        Self { name, instances: 0, max_rel_err: 0.0 }
    }

    fn add(&mut self, err: f64) {
        self.instances += 1;
        self.max_rel_err = self.max_rel_err.max(err);
    }
}

/// Random layer instance: decisive weights, 1 to 10 tokens.
pub fn layer_instance(variant: MoeVariant, i: u64) -> (Model<f64>, Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(i * 7919 + variant as u64);
    let scale = 5.0 + 35.0 * r.uniform();
    let model = tiny_model(variant, i, scale);
    let n = 1 + r.below(10);
    let x = rand_rows(&mut r, n, model.config.d_model, 1.0);
    let ids = (0..n).map(|_| r.below(model.config.vocab_size)).collect();
    (model, x, ids)
}

/// Random tiny model and batch with the reference pass over them.
fn model_instance(variant: MoeVariant, seed: u64, mode: Mode) -> (Model<f64>, TokenBatch, ModelRef) {
    let mut r = rng(seed);
    let model = tiny_model(variant, seed, 1.0 + 4.0 * r.uniform());
    let (b, t) = (1 + r.below(3), 2 + r.below(7));
    let batch = random_batch(&mut r, model.config.vocab_size, b, t);
    let want = model_ref(&model, &batch, mode);
    (model, batch, want)
}

/// Runs every layer, loss and balance computation against its scalar-loop
/// oracle on `instances` random tiny instances each, in both modes.
pub fn oracle_sweeps(instances: u64) -> Vec<OracleSweep> {
    let mut moe = OracleSweep::new("moe_forward");
    let mut flat = OracleSweep::new("flattened_forward");
    let mut cart = OracleSweep::new("cartesian_forward");
    let mut lm = OracleSweep::new("lm_loss");
    let mut bal = OracleSweep::new("balance_loss");
    let modes = [Mode::Eval, Mode::Train];
    let routed = [MoeVariant::Smoe, MoeVariant::SmoeTop3, MoeVariant::FineGrained, MoeVariant::TopP, MoeVariant::Hash];
    for i in 0..instances {
        let variant = routed[i as usize % routed.len()];
        let mode = modes[(i / routed.len() as u64) as usize % 2];
        let (model, x, ids) = layer_instance(variant, i);
        let layer = first_moe(&model);
        let cap = (mode == Mode::Train).then_some(layer.capacity_factor);
        let got = layer_rows(&model, layer, &x, &ids, mode, |ctx, xv, l| l.forward(ctx, xv, 0)).unwrap();
        let want = group_ref(&model.params, &layer.groups[0], &x, &ids, cap, None);
        moe.add(max_rel_diff(&flatten(&got), &flatten(&want.out)));

        let (model, x, ids) = layer_instance(MoeVariant::FineGrained, i + 100_000);
        let layer = first_moe(&model);
        let got = layer_rows(&model, layer, &x, &ids, Mode::Eval, |ctx, xv, l| Ok(flattened_forward(ctx, xv, l, 0)?.0))
            .unwrap();
        flat.add(max_rel_diff(&flatten(&got), &flatten(&flattened_ref(&model.params, layer, &x, &ids, None).0)));

        let (model, x, ids) = layer_instance(MoeVariant::Cartesian, i + 200_000);
        let layer = first_moe(&model);
        let cap = (mode == Mode::Train).then_some(layer.capacity_factor);
        let got = layer_rows(&model, layer, &x, &ids, mode, |ctx, xv, l| Ok(cartesian_forward(ctx, xv, l, 0)?.out))
            .unwrap();
        cart.add(max_rel_diff(&flatten(&got), &flatten(&cartesian_ref(&model.params, layer, &x, &ids, cap, None).out)));

        let variant = MoeVariant::ALL[i as usize % MoeVariant::ALL.len()];
        let (model, batch, want) = model_instance(variant, i + 300_000, mode);
        let mut ctx = model.forward(mode);
        let (l, _) = model.lm_loss(&mut ctx, &batch).unwrap();
        lm.add(max_rel_diff(&[ctx.graph.value(l).item()], &[lm_loss_ref(&want.logits, &batch)]));

        let probabilistic = [MoeVariant::Smoe, MoeVariant::SmoeTop3, MoeVariant::FineGrained, MoeVariant::TopP, MoeVariant::Cartesian];
        let variant = probabilistic[i as usize % probabilistic.len()];
        let (model, batch, want) = model_instance(variant, i + 400_000, mode);
        let mut ctx = model.forward(mode);
        model.lm_loss(&mut ctx, &batch).unwrap();
        let b = moelab::train::balance_loss(&mut ctx).unwrap();
        bal.add(max_rel_diff(&[ctx.graph.value(b).item()], &[balance_ref(&want.router_probs)]));
    }
    vec![moe, flat, cart, lm, bal]
}

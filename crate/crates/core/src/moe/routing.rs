//! Expert selection rules and capacity handling.
//!
//! Selection works on probability rows; ties always resolve to the lowest
//! expert index. Gates are the raw router probabilities at the selected
//! indices, never renormalized over the selection.

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Real, Tensor};

/// Per-token router output.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    pub num_experts: usize,
    /// `[tokens, num_experts]` softmax of router logits; `None` for hash routing.
    pub probs: Option<Tensor<T>>,
    pub selected: Vec<Vec<usize>>,
    /// Aligned with `selected`.
    pub gates: Vec<Vec<T>>,
    /// Aligned with `selected`; set when a slot overflowed expert capacity.
    pub dropped: Vec<Vec<bool>>,
    /// Argmax expert of each token's probabilities.
    pub top1: Vec<usize>,
    /// Activation count used for capacity (the configured K or mK).
    pub nominal_activation: usize,
}

impl<T: Real> RoutingDecision<T> {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn slot_count(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    pub fn drop_count(&self) -> usize {
        self.dropped.iter().flatten().filter(|&&d| d).count()
    }

    pub fn drop_rate(&self) -> f64 {
        let slots = self.slot_count();
        if slots == 0 {
            0.0
        } else {
            self.drop_count() as f64 / slots as f64
        }
    }

    /// Fraction of tokens whose argmax is each expert.
    pub fn argmax_fractions(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_experts];
        for &i in &self.top1 {
            w[i] += 1.0;
        }
        let n = self.tokens().max(1) as f64;
        w.iter_mut().for_each(|x| *x /= n);
        w
    }

    /// Builds a decision from probability rows with a selection rule.
    pub fn from_probs(probs: Tensor<T>, mut select: impl FnMut(&[T]) -> Vec<usize>, nominal: usize) -> Self {
        let e = probs.last_dim();
        let mut selected = Vec::new();
        let mut gates = Vec::new();
        let mut top1 = Vec::new();
        for row in probs.data().chunks(e) {
            let s = select(row);
            gates.push(s.iter().map(|&i| row[i]).collect());
            top1.push(argmax(row));
            selected.push(s);
        }
        let dropped = selected.iter().map(|s| vec![false; s.len()]).collect();
        Self { num_experts: e, probs: Some(probs), selected, gates, dropped, top1, nominal_activation: nominal }
    }
}

/// Descending order of probability, ties to the lowest index.
fn ranked<T: Real>(probs: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

pub fn argmax<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest probabilities, in descending order.
pub fn select_topk<T: Real>(probs: &[T], k: usize) -> Vec<usize> {
    let mut r = ranked(probs);
    r.truncate(k);
    r
}

/// Shortest descending prefix whose cumulative probability reaches `p`; at
/// least one expert, at most all of them.
pub fn select_topp<T: Real>(probs: &[T], p: f64) -> Vec<usize> {
    prefix_reaching(ranked(probs), probs, p)
}

fn prefix_reaching<T: Real>(order: Vec<usize>, probs: &[T], p: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cum = 0.0;
    for i in order {
        out.push(i);
        cum += probs[i].as_f64();
        if cum >= p {
            break;
        }
    }
    out
}

/// Top-k after removing the argmax expert.
pub fn select_topk_masked<T: Real>(probs: &[T], k: usize) -> Vec<usize> {
    let mut r = ranked(probs);
    r.remove(0);
    r.truncate(k);
    r
}

/// Top-p prefix after removing the argmax expert.
pub fn select_topp_masked<T: Real>(probs: &[T], p: f64) -> Vec<usize> {
    let mut r = ranked(probs);
    r.remove(0);
    prefix_reaching(r, probs, p)
}

pub fn check_topk(k: usize, num_experts: usize) -> Result<()> {
    if k == 0 || k > num_experts {
        return Err(Error::Config(format!(
            "top-k activation {k} must be between 1 and the {num_experts} routed experts"
        )));
    }
    Ok(())
}

pub fn check_topp(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("top-p threshold {p} outside (0, 1]")));
    }
    Ok(())
}

/// Top-K routing of probability rows `[tokens, experts]`.
pub fn route_topk<T: Real>(probs: Tensor<T>, k: usize) -> Result<RoutingDecision<T>> {
    check_topk(k, probs.last_dim())?;
    Ok(RoutingDecision::from_probs(probs, |row| select_topk(row, k), k))
}

/// Top-P routing; `nominal` is the activation count used for capacity.
pub fn route_topp<T: Real>(probs: Tensor<T>, p: f64, nominal: usize) -> Result<RoutingDecision<T>> {
    check_topp(p)?;
    Ok(RoutingDecision::from_probs(probs, |row| select_topp(row, p), nominal))
}

/// `k` distinct experts for a token id, a pure function of `(seed, id)`.
pub fn hash_experts(seed: u64, token_id: usize, num_experts: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..num_experts).collect();
    let mut out = Vec::with_capacity(k);
    for j in 0..k.min(num_experts) {
        let draw = Rng::at(seed, Stream::HASH_ROUTER, (token_id as u64) * 64 + j as u64);
        let pick = (draw % (pool.len() as u64)) as usize;
        out.push(pool.swap_remove(pick));
    }
    out
}

/// Hash routing: fixed experts per token id with gates `1/k`.
pub fn hash_route<T: Real>(seed: u64, token_ids: &[usize], num_experts: usize, k: usize) -> Result<RoutingDecision<T>> {
    check_topk(k, num_experts)?;
    let gate = T::one() / T::lit(k as f64);
    let selected: Vec<Vec<usize>> = token_ids.iter().map(|&t| hash_experts(seed, t, num_experts, k)).collect();
    Ok(RoutingDecision {
        num_experts,
        probs: None,
        gates: selected.iter().map(|s| vec![gate; s.len()]).collect(),
        dropped: selected.iter().map(|s| vec![false; s.len()]).collect(),
        top1: selected.iter().map(|s| s[0]).collect(),
        selected,
        nominal_activation: k,
    })
}

/// Per-expert token budget `ceil(factor * activation * tokens / experts)`.
pub fn expert_capacity(capacity_factor: f64, activation: usize, tokens: usize, num_experts: usize) -> usize {
    (capacity_factor * activation as f64 * tokens as f64 / num_experts as f64).ceil() as usize
}

/// Marks slots beyond each expert's capacity as dropped, filling experts in
/// token order and, within a token, in selection order.
pub fn apply_capacity<T: Real>(decision: &mut RoutingDecision<T>, capacity_factor: f64) -> Result<()> {
    if !(capacity_factor > 0.0) {
        return Err(Error::Config(format!("capacity factor must be positive, got {capacity_factor}")));
    }
    let cap = expert_capacity(
        capacity_factor,
        decision.nominal_activation,
        decision.tokens(),
        decision.num_experts,
    );
    let mut load = vec![0usize; decision.num_experts];
    for (sel, drop) in decision.selected.iter().zip(decision.dropped.iter_mut()) {
        for (&e, d) in sel.iter().zip(drop.iter_mut()) {
            if load[e] < cap {
                load[e] += 1;
                *d = false;
            } else {
                *d = true;
            }
        }
    }
    Ok(())
}

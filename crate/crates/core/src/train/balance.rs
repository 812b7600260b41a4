//! Load-balance loss `sum_i w_i R_i` per router.
//!
//! `w_i` is the fraction of tokens whose argmax is expert `i` and enters as a
//! constant; `R_i` is the mean routing probability and carries the gradient.

use crate::error::{Error, Result};
use crate::model::forward::{Forward, LayerRouting};
use crate::moe::RoutingDecision;
use crate::tensor::{Real, Tensor, Var};

/// Balance statistics of one router over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub tokens: usize,
}

impl BalanceStats {
    pub fn loss(&self) -> f64 {
        self.w.iter().zip(&self.r).map(|(w, r)| w * r).sum()
    }

    pub fn max_w(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }
}

/// Statistics of a probabilistic router's decision.
pub fn balance_stats<T: Real>(decision: &RoutingDecision<T>) -> Result<BalanceStats> {
    let probs = decision
        .probs
        .as_ref()
        .ok_or_else(|| Error::Contract("balance statistics need router probabilities".into()))?;
    let tokens = decision.tokens();
    if tokens == 0 {
        return Err(Error::Contract("balance loss over an empty batch".into()));
    }
    let e = decision.num_experts;
    let mut r = vec![0.0; e];
    for row in probs.data().chunks(e) {
        for (acc, &p) in r.iter_mut().zip(row) {
            *acc += p.as_f64();
        }
    }
    r.iter_mut().for_each(|x| *x /= tokens as f64);
    Ok(BalanceStats { w: decision.argmax_fractions(), r, tokens })
}

/// Differentiable balance loss of one router.
pub fn router_balance_loss<T: Real>(ctx: &mut Forward<'_, T>, routing: &LayerRouting<T>) -> Result<Option<Var>> {
    let Some(probs) = routing.probs else {
        return Ok(None);
    };
    if routing.decision.tokens() == 0 {
        return Err(Error::Contract("balance loss over an empty batch".into()));
    }
    let w: Vec<T> = routing.decision.argmax_fractions().into_iter().map(T::lit).collect();
    let w = ctx.graph.constant(Tensor::raw(vec![w.len()], w));
    let r = ctx.graph.mean_rows(probs)?;
    let wr = ctx.graph.mul(w, r)?;
    Ok(Some(ctx.graph.sum(wr)))
}

/// Sum of every probabilistic router's balance loss in the pass (both
/// Cartesian sub-layers included). Zero when the model has no such router.
pub fn balance_loss<T: Real>(ctx: &mut Forward<'_, T>) -> Result<Var> {
    let routings = ctx.routings.clone();
    let mut total: Option<Var> = None;
    for routing in &routings {
        if let Some(l) = router_balance_loss(ctx, routing)? {
            total = Some(match total {
                Some(t) => ctx.graph.add(t, l)?,
                None => l,
            });
        }
    }
    Ok(total.unwrap_or_else(|| ctx.graph.constant(Tensor::scalar(T::zero()))))
}

/// `lm + alpha * bal`.
pub fn total_loss<T: Real>(ctx: &mut Forward<'_, T>, lm: Var, bal: Var, alpha: f64) -> Result<Var> {
    let scaled = ctx.graph.scale(bal, T::lit(alpha));
    ctx.graph.add(lm, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decision(rows: &[&[f64]]) -> RoutingDecision<f64> {
        let e = rows[0].len();
        let probs = Tensor::new(vec![rows.len(), e], rows.concat()).unwrap();
        RoutingDecision::from_probs(probs, |_| vec![0], 1)
    }

    #[test]
    fn uniform_routing_gives_inverse_expert_count() {
        let d = decision(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let s = balance_stats(&d).unwrap();
        assert_eq!(s.w, vec![1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(s.loss(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn concentrated_routing_gives_one() {
        let d = decision(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_relative_eq!(balance_stats(&d).unwrap().loss(), 1.0);
    }

    #[test]
    fn hash_decisions_have_no_stats() {
        let d = crate::moe::hash_route::<f64>(0, &[1, 2], 4, 2).unwrap();
        assert!(balance_stats(&d).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let store = crate::model::ParamStore::<f64>::new();
        let mut ctx = Forward::new(&store, crate::model::Mode::Eval);
        let lm = ctx.graph.constant(Tensor::scalar(2.0));
        let bal = ctx.graph.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut ctx, lm, bal, 0.01).unwrap();
        assert_relative_eq!(ctx.graph.value(t).item(), 2.005, epsilon = 1e-15);
        let t = total_loss(&mut ctx, lm, bal, 0.0).unwrap();
        assert_eq!(ctx.graph.value(t).item(), 2.0);
    }
}

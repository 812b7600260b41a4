//! Finite-difference checks of whole models with routing held fixed.

use super::balance::{balance_loss, total_loss};
use crate::error::Result;
use crate::model::{FrozenRoute, Mode, Model, RouteTape, TokenBatch};
use crate::tensor::{grad_check_params, GradCheckReport};

/// `lm + alpha * bal` of one pass. With `replay`, routers reuse recorded
/// selections; otherwise the selections made are returned.
pub fn model_loss(
    model: &Model<f64>,
    batch: &TokenBatch,
    alpha: f64,
    mode: Mode,
    replay: Option<&[FrozenRoute]>,
) -> Result<(f64, Vec<FrozenRoute>)> {
    let tape = match replay {
        Some(routes) => RouteTape::Replay { routes: routes.to_vec(), cursor: 0 },
        None => RouteTape::Record(Vec::new()),
    };
    let mut ctx = model.forward(mode).with_tape(tape);
    let (lm, _) = model.lm_loss(&mut ctx, batch)?;
    let bal = balance_loss(&mut ctx)?;
    let total = total_loss(&mut ctx, lm, bal, alpha)?;
    let value = ctx.graph.value(total).item();
    Ok((value, ctx.take_tape()))
}

/// Flat analytic gradient of `lm + alpha * bal` in parameter registration
/// order, plus the routing tape of the pass.
pub fn model_gradient(model: &Model<f64>, batch: &TokenBatch, alpha: f64, mode: Mode) -> Result<(Vec<f64>, Vec<FrozenRoute>)> {
    let mut ctx = model.forward(mode).with_tape(RouteTape::Record(Vec::new()));
    let (lm, _) = model.lm_loss(&mut ctx, batch)?;
    let bal = balance_loss(&mut ctx)?;
    let total = total_loss(&mut ctx, lm, bal, alpha)?;
    ctx.backward(total)?;
    let mut store = model.params.clone();
    store.zero_grads();
    for (id, g) in ctx.param_grads() {
        store.accumulate_grad(id, &g);
    }
    Ok((store.flat_grads(), ctx.take_tape()))
}

/// Compares the analytic gradient to central differences at the given flat
/// coordinates (all coordinates when `coords` is `None`). Expert selection,
/// capacity drops and argmax fractions are replayed from the analytic pass.
pub fn grad_check_model(
    model: &Model<f64>,
    batch: &TokenBatch,
    alpha: f64,
    mode: Mode,
    step: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let (grad, tape) = model_gradient(model, batch, alpha, mode)?;
    let coords: Vec<usize> = coords.map_or_else(|| (0..grad.len()).collect(), <[usize]>::to_vec);
    let analytic: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
    let mut probe = model.clone();
    let mut report = grad_check_params(&analytic, step, tol, |i, delta| {
        let (id, off) = probe.params.locate(coords[i]).expect("coordinate in range");
        let original = probe.params.get(id).data()[off];
        probe.params.get_mut(id).data_mut()[off] = original + delta;
        let out = model_loss(&probe, batch, alpha, mode, Some(&tape));
        probe.params.get_mut(id).data_mut()[off] = original;
        Ok(out?.0)
    })?;
    report.worst = coords.get(report.worst).copied().unwrap_or(0);
    Ok(report)
}

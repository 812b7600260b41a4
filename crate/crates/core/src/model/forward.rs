use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::moe::RoutingDecision;
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Expert capacity limits apply.
    Train,
    /// Dropless: every token reaches its selected experts.
    Eval,
}

/// How routers choose experts.
#[derive(Debug, Clone)]
pub enum RoutePolicy {
    Standard,
    /// Mask each token's highest-probability expert and reselect from the
    /// rest. In Cartesian layers one sub-layer, drawn per token from the
    /// generator, is masked.
    DisableTop1(Rng),
}

/// Discrete routing choices of one router call, replayable so that finite
/// differences see the same expert selection as the analytic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRoute {
    pub selected: Vec<Vec<usize>>,
    pub dropped: Vec<Vec<bool>>,
    pub top1: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub enum RouteTape {
    #[default]
    Off,
    Record(Vec<FrozenRoute>),
    Replay { routes: Vec<FrozenRoute>, cursor: usize },
}

/// One router's output inside a forward pass.
#[derive(Debug, Clone)]
pub struct LayerRouting<T> {
    /// Block index.
    pub block: usize,
    /// 0 for single-router layers; 0 or 1 for the Cartesian sub-layers.
    pub sublayer: usize,
    pub decision: RoutingDecision<T>,
    /// Router probabilities in the graph (absent for hash routing).
    pub probs: Option<Var>,
}

/// State of one forward pass: the graph being recorded, the parameters it
/// reads, and routing bookkeeping.
pub struct Forward<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    vars: Vec<Option<Var>>,
    pub mode: Mode,
    pub policy: RoutePolicy,
    pub tape: RouteTape,
    pub routings: Vec<LayerRouting<T>>,
    /// Flattened token ids of the current batch, for hash routing.
    pub token_ids: Vec<usize>,
    /// How often each Cartesian sub-layer was picked for masking.
    pub sublayer_choices: [u64; 2],
}

impl<'p, T: Real> Forward<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            params,
            vars: vec![None; params.len()],
            mode,
            policy: RoutePolicy::Standard,
            tape: RouteTape::Off,
            routings: Vec::new(),
            token_ids: Vec::new(),
            sublayer_choices: [0; 2],
        }
    }

    pub fn with_policy(mut self, policy: RoutePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_tape(mut self, tape: RouteTape) -> Self {
        self.tape = tape;
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.graph.param(self.params.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every parameter the pass touched.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.graph.grad((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }

    /// Routing choices recorded so far (when recording).
    pub fn take_tape(&mut self) -> Vec<FrozenRoute> {
        match std::mem::take(&mut self.tape) {
            RouteTape::Record(routes) | RouteTape::Replay { routes, .. } => routes,
            RouteTape::Off => Vec::new(),
        }
    }

    pub(crate) fn next_frozen(&mut self) -> Option<FrozenRoute> {
        match &mut self.tape {
            RouteTape::Replay { routes, cursor } => {
                let r = routes.get(*cursor).cloned();
                *cursor += 1;
                r
            }
            _ => None,
        }
    }

    pub(crate) fn record(&mut self, route: FrozenRoute) {
        if let RouteTape::Record(routes) = &mut self.tape {
            routes.push(route);
        }
    }
}

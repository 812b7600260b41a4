//! Expert layers and routers.

pub mod layer;
pub mod routing;

pub use layer::{cartesian_forward, flattened_forward, moe_forward, route_group, CartesianOutput, ExpertGroup, Ffn, MoeLayer, Rule};
pub use routing::{apply_capacity, expert_capacity, hash_route, route_topk, route_topp, RoutingDecision};

//! Decoder-only transformer with a pluggable FFN slot.

pub mod config;
pub mod forward;
pub mod params;
pub mod transformer;

pub use config::{ModelConfig, MoeVariant};
pub use forward::{Forward, FrozenRoute, LayerRouting, Mode, RoutePolicy, RouteTape};
pub use params::{Param, ParamId, ParamStore};
pub use transformer::{Block, FfnSlot, Model, TokenBatch};

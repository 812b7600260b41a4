//! Parameter accounting, routing robustness, granularity sweeps and
//! controlled variant comparisons.

pub mod experiment;
pub mod params;
pub mod robustness;

pub use experiment::{
    check_parity, compare_variants, granularity_sweep, sweep_configs, train_and_evaluate, CompareRow, SweepRow,
    PARITY_TOLERANCE,
};
pub use params::{count_params, human, Breakdown, ParamReport};
pub use robustness::{disable_top1_eval, RobustnessReport};

//! Closed-form parameter and FLOP accounting, and instrumented scaling
//! probes that check it.

mod flops;
mod params;
mod scaling;
#[cfg(test)]
mod tests;

pub use flops::{
    count_flops, hici_module_flops, quarter_segments, CostBreakdown, Method, ModuleFlops,
    STANDARD_CONTEXTS,
};
pub use params::{count_params, ModelDims, ParamBreakdown};
pub use scaling::{probe, probe_config, ratios, scaling_probe, ScalingRow};

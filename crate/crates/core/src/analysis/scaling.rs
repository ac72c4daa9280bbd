use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{FlopCounter, Graph, Scope};
use crate::hici::{hici_forward_traced, ForwardOptions, HiCIConfig, HiCIParams};
use crate::params::bind_const;
use crate::rng;

use super::flops::{hici_module_flops, ModuleFlops};

/// Counted and predicted cost of one `hici_forward` call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub t: usize,
    pub counted: FlopCounter,
    pub analytic: ModuleFlops,
    /// Rows of the global context seen by the last segment.
    pub global_rows: usize,
}

impl ScalingRow {
    pub fn counted_matmul(&self) -> u64 {
        self.counted.matmul_total()
    }

    /// Bytes of `G` at 64-bit.
    pub fn global_bytes(&self, d: usize) -> usize {
        self.global_rows * d * 8
    }

    pub fn counted_module(&self) -> ModuleFlops {
        ModuleFlops {
            local: self.counted.matmul(Scope::Local),
            global: self.counted.matmul(Scope::Global),
            broadcast_proj: self.counted.matmul(Scope::BroadcastProj),
            broadcast_attn: self.counted.matmul(Scope::BroadcastAttn),
        }
    }
}

/// Mid-sized configuration whose fixed per-call costs are small next to the
/// per-segment ones, as in real model shapes.
pub fn probe_config() -> HiCIConfig {
    HiCIConfig {
        segment_len: 64,
        local_slots: 8,
        global_slots: 4,
        heads: 4,
        d_model: 64,
        d_bottleneck: 16,
        d_compress: 8,
        ..HiCIConfig::micro()
    }
}

/// Runs the layer once at context `t` on uniform random input and weights.
pub fn probe(cfg: &HiCIConfig, t: usize, seed: u64) -> Result<ScalingRow> {
    let analytic = hici_module_flops(cfg, t)?;
    let mut r = rng::generator(seed);
    let params = HiCIParams::random(cfg, 0.5, &mut r)?;
    let x = rng::uniform_from(&[t, cfg.d_model], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let p = params.map("", &mut bind_const(&mut g));
    let trace = hici_forward_traced(&mut g, xv, &p, cfg, ForwardOptions::default(), false)?;
    let global_rows = trace.globals.last().map_or(0, |&v| g.value(v).rows());
    Ok(ScalingRow {
        t,
        counted: g.flops(),
        analytic,
        global_rows,
    })
}

pub fn scaling_probe(cfg: &HiCIConfig, ts: &[usize], seed: u64) -> Result<Vec<ScalingRow>> {
    ts.iter().map(|&t| probe(cfg, t, seed)).collect()
}

/// Successive counted-FLOP ratios `rows[i+1] / rows[i]`.
pub fn ratios(rows: &[ScalingRow]) -> Vec<f64> {
    rows.windows(2)
        .map(|w| w[1].counted_matmul() as f64 / w[0].counted_matmul() as f64)
        .collect()
}

use crate::error::{Error, Result};
use crate::hici::{GlobalScope, HiCIConfig};

use super::params::ModelDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Full,
    Segmented,
    Hici,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Full, Method::Segmented, Method::Hici];

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Full Attn",
            Self::Segmented => "S2-Attn",
            Self::Hici => "HiCI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "segmented" | "s2" => Some(Self::Segmented),
            "hici" => Some(Self::Hici),
            _ => None,
        }
    }
}

/// Forward FLOPs of a whole model at batch 1, 2 per multiply-add.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub method: Method,
    pub context: usize,
    /// Score and value products.
    pub attn: u64,
    /// `Q/K/V/O` projections, including those of the extra context rows.
    pub proj: u64,
    pub ffn: u64,
    /// Language-model head.
    pub others: u64,
    /// Local construction and global integration.
    pub lc_gi: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.attn + self.proj + self.ffn + self.others + self.lc_gi
    }
}

/// Matmul FLOPs of one HiCI layer forward, split like the graph counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModuleFlops {
    pub local: u64,
    pub global: u64,
    pub broadcast_proj: u64,
    pub broadcast_attn: u64,
}

impl ModuleFlops {
    pub fn total(&self) -> u64 {
        self.local + self.global + self.broadcast_proj + self.broadcast_attn
    }
}

fn segments(t: usize, cfg: &HiCIConfig) -> Result<u64> {
    if cfg.segment_len == 0 || !t.is_multiple_of(cfg.segment_len) || t == 0 {
        return Err(Error::NotDivisible {
            len: t,
            segment: cfg.segment_len,
        });
    }
    Ok((t / cfg.segment_len) as u64)
}

/// Itemised matmul FLOPs of `hici_forward` on a `t × d` input.
pub fn hici_module_flops(cfg: &HiCIConfig, t: usize) -> Result<ModuleFlops> {
    let n = segments(t, cfg)?;
    let (s, d, db, ds) = (
        cfg.segment_len as u64,
        cfg.d_model as u64,
        cfg.d_bottleneck as u64,
        cfg.d_compress as u64,
    );
    let (m, k) = (cfg.local_slots as u64, cfg.global_slots as u64);
    let local = if m > 0 {
        // Slot queries once; per segment K/V, scores, values, output.
        2 * m * d * db + n * (4 * s * d * db + 4 * m * s * db + 2 * m * db * d)
    } else {
        0
    };
    let integrations = match cfg.global_scope {
        GlobalScope::AllSegments => 1,
        GlobalScope::PrecedingSegments => n - 1,
    };
    let global = if k > 0 {
        let once = 2 * 5 * d * ds
            + 2 * 5 * ds * db
            + 2 * k * db * db
            + 2 * 2 * 5 * db * db
            + 2 * 2 * k * 5 * db
            + 2 * k * db * db
            + 2 * k * db * d;
        integrations * once
    } else {
        0
    };
    let augmented = k + m + s;
    Ok(ModuleFlops {
        local,
        global,
        broadcast_proj: n * (2 * s * d * d + 4 * augmented * d * d),
        broadcast_attn: n * 4 * s * augmented * d,
    })
}

/// Whole-model forward cost at context `t`. Full attention ignores the
/// segment length.
pub fn count_flops(
    method: Method,
    t: usize,
    dims: &ModelDims,
    cfg: &HiCIConfig,
) -> Result<CostBreakdown> {
    let (l, d, f, v, tt) = (
        dims.n_layers as u64,
        dims.d_model as u64,
        dims.ffn_width as u64,
        dims.vocab_size as u64,
        t as u64,
    );
    let base_proj = l * 8 * tt * d * d;
    let (attn, proj, lc_gi) = match method {
        Method::Full => (l * 4 * tt * tt * d, base_proj, 0),
        Method::Segmented => {
            segments(t, cfg)?;
            (l * 4 * tt * cfg.segment_len as u64 * d, base_proj, 0)
        }
        Method::Hici => {
            let m = hici_module_flops(cfg, t)?;
            let n = segments(t, cfg)?;
            // Slots and global rows add key/value projections per segment.
            let context = (cfg.local_slots + cfg.global_slots) as u64;
            (
                l * m.broadcast_attn,
                base_proj + l * n * 4 * context * d * d,
                l * (m.local + m.global),
            )
        }
    };
    Ok(CostBreakdown {
        method,
        context: t,
        attn,
        proj,
        ffn: l * 6 * tt * d * f,
        others: 2 * tt * d * v,
        lc_gi,
    })
}

/// Contexts of the published profile; segments are a quarter of each.
pub const STANDARD_CONTEXTS: [usize; 5] = [8192, 16384, 32768, 65536, 102400];

/// `cfg` with `S = t / 4`, the segmentation used for the profile table.
pub fn quarter_segments(cfg: &HiCIConfig, t: usize) -> HiCIConfig {
    HiCIConfig {
        segment_len: t / 4,
        ..*cfg
    }
}

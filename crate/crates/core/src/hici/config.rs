use alloc::format;

use crate::error::{Error, Result};

/// Which segments feed the global context seen by segment `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalScope {
    /// One `G` pooled from every segment, shared by all of them.
    AllSegments,
    /// Segment `i` sees `G` pooled from segments `< i` and the local slots of
    /// segment `i − 1`; segment 0 sees zeros. No position can see the future.
    PrecedingSegments,
}

impl GlobalScope {
    pub fn as_str(self) -> &'static str {
        match self {
            GlobalScope::AllSegments => "all_segments",
            GlobalScope::PrecedingSegments => "preceding_segments",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all_segments" | "all" => Some(GlobalScope::AllSegments),
            "preceding_segments" | "preceding" => Some(GlobalScope::PrecedingSegments),
            _ => None,
        }
    }
}

/// Architectural constants of one HiCI layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HiCIConfig {
    /// Tokens per segment (`S`).
    pub segment_len: usize,
    /// Local slots per segment (`M`).
    pub local_slots: usize,
    /// Global slots (`K`).
    pub global_slots: usize,
    /// Attention heads (`H`), shared by all three attention sites.
    pub heads: usize,
    /// Model width (`d`).
    pub d_model: usize,
    /// Bottleneck width of local and global attention (`d_b`).
    pub d_bottleneck: usize,
    /// Intermediate width of the shared statistics compression (`d_s`).
    pub d_compress: usize,
    /// Within-segment causal mask in the broadcast attention.
    pub causal_segment_mask: bool,
    pub global_scope: GlobalScope,
    pub ln_eps: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl HiCIConfig {
    /// The small configuration used for gradient and invariance checks.
    pub fn micro() -> Self {
        Self {
            segment_len: 4,
            local_slots: 2,
            global_slots: 2,
            heads: 2,
            d_model: 16,
            d_bottleneck: 8,
            d_compress: 4,
            causal_segment_mask: true,
            global_scope: GlobalScope::AllSegments,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    /// LLaMA-2-7B shaped layer (`S` is set per context by the cost model).
    pub fn llama2_7b() -> Self {
        Self {
            segment_len: 2048,
            local_slots: 8,
            global_slots: 4,
            heads: 8,
            d_model: 4096,
            d_bottleneck: 512,
            d_compress: 128,
            causal_segment_mask: true,
            global_scope: GlobalScope::AllSegments,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    /// LLaMA-2-13B shaped layer.
    pub fn llama2_13b() -> Self {
        Self {
            heads: 10,
            d_model: 5120,
            d_bottleneck: 640,
            d_compress: 160,
            ..Self::llama2_7b()
        }
    }

    /// Per-head width of the local and global attention.
    pub fn bottleneck_head_dim(&self) -> usize {
        self.d_bottleneck / self.heads
    }

    /// Per-head width of the broadcast attention.
    pub fn model_head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Length of the key/value sequence each segment attends over.
    pub fn augmented_len(&self) -> usize {
        self.global_slots + self.local_slots + self.segment_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.segment_len == 0 {
            return bad("segment length S must be positive".into());
        }
        if self.heads == 0 {
            return bad("head count H must be positive".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be a positive multiple of H = {}",
                self.d_model, self.heads
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return bad(format!(
                "ln_eps = {} must be finite and non-negative",
                self.ln_eps
            ));
        }
        if self.local_slots == 0 && self.global_slots > 0 {
            return bad(format!(
                "K = {} global slots need local slots to pool (M = 0)",
                self.global_slots
            ));
        }
        if self.local_slots > 0 {
            if self.d_bottleneck == 0 || !self.d_bottleneck.is_multiple_of(self.heads) {
                return bad(format!(
                    "d_b = {} must be a positive multiple of H = {}",
                    self.d_bottleneck, self.heads
                ));
            }
            if self.d_bottleneck >= self.d_model {
                return bad(format!(
                    "d_b = {} must be smaller than d = {}",
                    self.d_bottleneck, self.d_model
                ));
            }
        }
        if self.global_slots > 0 && (self.d_compress == 0 || self.d_compress >= self.d_bottleneck) {
            return bad(format!(
                "d_s = {} must satisfy 0 < d_s < d_b = {}",
                self.d_compress, self.d_bottleneck
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [
            HiCIConfig::micro(),
            HiCIConfig::llama2_7b(),
            HiCIConfig::llama2_13b(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(HiCIConfig::llama2_7b().augmented_len(), 2060);
    }

    #[test]
    fn rejects_bad_widths() {
        let base = HiCIConfig::micro();
        let cases = [
            HiCIConfig {
                d_bottleneck: 7,
                ..base
            },
            HiCIConfig {
                d_model: 15,
                ..base
            },
            HiCIConfig {
                d_compress: 8,
                ..base
            },
            HiCIConfig {
                d_bottleneck: 16,
                ..base
            },
            HiCIConfig {
                local_slots: 0,
                ..base
            },
            HiCIConfig {
                segment_len: 0,
                ..base
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn equivalence_mode_ignores_bottleneck_widths() {
        let c = HiCIConfig {
            local_slots: 0,
            global_slots: 0,
            d_bottleneck: 0,
            d_compress: 0,
            ..HiCIConfig::micro()
        };
        c.validate().unwrap();
    }
}

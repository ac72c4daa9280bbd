use crate::hici::HiCIConfig;

/// Shape of a host transformer, enough to count its parameters and FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub name: &'static str,
    pub n_layers: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub const fn llama2_7b() -> Self {
        Self {
            name: "LLaMA-2-7B",
            n_layers: 32,
            d_model: 4096,
            ffn_width: 11008,
            vocab_size: 32000,
        }
    }

    pub const fn llama2_13b() -> Self {
        Self {
            name: "LLaMA-2-13B",
            n_layers: 40,
            d_model: 5120,
            ffn_width: 13824,
            vocab_size: 32000,
        }
    }

    /// Untied embedding and head, four attention projections, a gated
    /// three-matrix FFN and two norm gains per layer, plus the final norm.
    pub fn base_params(&self) -> u64 {
        let (l, d, f, v) = (
            self.n_layers as u64,
            self.d_model as u64,
            self.ffn_width as u64,
            self.vocab_size as u64,
        );
        2 * v * d + l * (4 * d * d + 3 * d * f + 2 * d) + d
    }
}

/// Per-layer HiCI parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBreakdown {
    pub slots: u64,
    pub local_attention: u64,
    pub compression: u64,
    pub global_queries: u64,
    pub global_attention: u64,
    /// Includes the gate scalar.
    pub expansion: u64,
    pub n_layers: u64,
    pub base_params: u64,
    /// Broadcast `Q/K/V` projections per layer. They stand in for the host's
    /// own attention projections and are not part of the overhead.
    pub broadcast: u64,
}

impl ParamBreakdown {
    pub fn local_subtotal(&self) -> u64 {
        self.slots + self.local_attention
    }

    pub fn global_subtotal(&self) -> u64 {
        self.compression + self.global_queries + self.global_attention + self.expansion
    }

    pub fn per_layer(&self) -> u64 {
        self.local_subtotal() + self.global_subtotal()
    }

    pub fn total(&self) -> u64 {
        self.per_layer() * self.n_layers
    }

    /// HiCI share of the augmented model, `hici / (base + hici)`.
    pub fn overhead(&self) -> f64 {
        let hici = self.total() as f64;
        if hici == 0.0 {
            return 0.0;
        }
        hici / (self.base_params as f64 + hici)
    }
}

pub fn count_params(cfg: &HiCIConfig, n_layers: usize, base_params: u64) -> ParamBreakdown {
    let (d, db, ds) = (
        cfg.d_model as u64,
        cfg.d_bottleneck as u64,
        cfg.d_compress as u64,
    );
    let (m, k) = (cfg.local_slots as u64, cfg.global_slots as u64);
    let local = m > 0;
    let global = k > 0;
    ParamBreakdown {
        slots: if local { m * d } else { 0 },
        local_attention: if local { 3 * d * db + db * d } else { 0 },
        compression: if global {
            d * ds + 2 * ds + ds * db + 2 * db
        } else {
            0
        },
        global_queries: if global { k * db } else { 0 },
        global_attention: if global { 4 * db * db } else { 0 },
        expansion: if global { db * d + 1 } else { 0 },
        n_layers: n_layers as u64,
        base_params,
        broadcast: 3 * d * d,
    }
}

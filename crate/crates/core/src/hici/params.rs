use alloc::string::String;

use super::config::HiCIConfig;
use crate::error::Result;
use crate::params::{join, leaf_group, ParamTree};
use crate::rng::{self, Generator};
use crate::tensor::Tensor;

/// Standard deviation of slot and query initialisation.
pub const SLOT_INIT_STD: f64 = 0.02;

leaf_group! {
    /// Local construction: `M` slots cross-attending into a segment.
    LocalParams {
        /// `M × d` learnable slot vectors.
        slots,
        /// `d × d_b`
        w_q,
        /// `d × d_b`
        w_k,
        /// `d × d_b`
        w_v,
        /// `d_b × d`
        w_o,
    }
}

leaf_group! {
    /// Global integration: shared compression, selection attention and gated
    /// expansion.
    GlobalParams {
        /// `d × d_s`
        w_c,
        ln_c_gain,
        ln_c_bias,
        /// `d_s × d_b`
        w_b,
        ln_b_gain,
        ln_b_bias,
        /// `K × d_b` learnable queries.
        queries,
        w_q,
        w_k,
        w_v,
        /// `d_b × d_b` head merge after the selection attention.
        w_o,
        /// `d_b × d`
        w_exp,
        /// Gate pre-activation; the gate is `softplus(beta)`.
        beta,
    }
}

leaf_group! {
    /// Broadcast projections (`d × d` each). Queries come from segment tokens
    /// only; keys and values from `[G; L_i; X_i]`.
    BroadcastParams {
        w_q,
        w_k,
        w_v,
    }
}

/// All learnable tensors of one HiCI layer. A stage is `None` when its
/// cardinality is zero (`M = 0` or `K = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct HiCIParams<T = Tensor> {
    pub local: Option<LocalParams<T>>,
    pub global: Option<GlobalParams<T>>,
    pub broadcast: BroadcastParams<T>,
}

impl<T> HiCIParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> HiCIParams<U> {
        HiCIParams {
            local: self
                .local
                .as_ref()
                .map(|p| p.map(&join(prefix, "local"), f)),
            global: self
                .global
                .as_ref()
                .map(|p| p.map(&join(prefix, "global"), f)),
            broadcast: self.broadcast.map(&join(prefix, "broadcast"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        if let Some(p) = &self.local {
            p.visit(&join(prefix, "local"), f);
        }
        if let Some(p) = &self.global {
            p.visit(&join(prefix, "global"), f);
        }
        self.broadcast.visit(&join(prefix, "broadcast"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(p) = &mut self.local {
            p.visit_mut(&join(prefix, "local"), f);
        }
        if let Some(p) = &mut self.global {
            p.visit_mut(&join(prefix, "global"), f);
        }
        self.broadcast.visit_mut(&join(prefix, "broadcast"), f);
    }
}

impl ParamTree for HiCIParams {
    fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.visit("", f)
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut("", f)
    }
}

impl HiCIParams {
    /// Slots and queries ~ N(0, 0.02), projections Xavier-uniform, layer norm
    /// affine at identity, `beta = 0` (gate `ln 2`).
    pub fn init(cfg: &HiCIConfig, rng: &mut Generator) -> Result<Self> {
        cfg.validate()?;
        let (d, db, ds) = (cfg.d_model, cfg.d_bottleneck, cfg.d_compress);
        let local = (cfg.local_slots > 0).then(|| LocalParams {
            slots: rng::normal_from(&[cfg.local_slots, d], SLOT_INIT_STD, rng),
            w_q: rng::xavier_from(d, db, rng),
            w_k: rng::xavier_from(d, db, rng),
            w_v: rng::xavier_from(d, db, rng),
            w_o: rng::xavier_from(db, d, rng),
        });
        let global = (cfg.global_slots > 0).then(|| GlobalParams {
            w_c: rng::xavier_from(d, ds, rng),
            ln_c_gain: Tensor::ones(&[ds]),
            ln_c_bias: Tensor::zeros(&[ds]),
            w_b: rng::xavier_from(ds, db, rng),
            ln_b_gain: Tensor::ones(&[db]),
            ln_b_bias: Tensor::zeros(&[db]),
            queries: rng::normal_from(&[cfg.global_slots, db], SLOT_INIT_STD, rng),
            w_q: rng::xavier_from(db, db, rng),
            w_k: rng::xavier_from(db, db, rng),
            w_v: rng::xavier_from(db, db, rng),
            w_o: rng::xavier_from(db, db, rng),
            w_exp: rng::xavier_from(db, d, rng),
            beta: Tensor::scalar(0.0),
        });
        let broadcast = BroadcastParams {
            w_q: rng::xavier_from(d, d, rng),
            w_k: rng::xavier_from(d, d, rng),
            w_v: rng::xavier_from(d, d, rng),
        };
        Ok(Self {
            local,
            global,
            broadcast,
        })
    }

    /// Every tensor drawn uniformly from `[-scale, scale)` (layer norm gains
    /// from `1 ± scale`), including `beta`. Used to exercise all code paths
    /// in tests.
    pub fn random(cfg: &HiCIConfig, scale: f64, rng: &mut Generator) -> Result<Self> {
        let mut p = Self::init(cfg, rng)?;
        p.visit_mut("", &mut |n, t| {
            *t = rng::perturbed_param(n, t.shape(), scale, rng)
        });
        Ok(p)
    }

    /// Gate `α = softplus(beta)`; `None` without a global stage.
    pub fn gate(&self) -> Option<f64> {
        self.global
            .as_ref()
            .map(|g| crate::ops::softplus(g.beta.data()[0]))
    }

    pub fn names(&self) -> alloc::vec::Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hici::GlobalScope;

    #[test]
    fn shapes_follow_config() {
        let cfg = HiCIConfig::micro();
        let p = HiCIParams::init(&cfg, &mut rng::generator(0)).unwrap();
        let l = p.local.as_ref().unwrap();
        assert_eq!(l.slots.shape(), &[2, 16]);
        assert_eq!(l.w_o.shape(), &[8, 16]);
        let g = p.global.as_ref().unwrap();
        assert_eq!(g.w_c.shape(), &[16, 4]);
        assert_eq!(g.queries.shape(), &[2, 8]);
        assert_eq!(g.w_exp.shape(), &[8, 16]);
        assert_eq!(p.broadcast.w_k.shape(), &[16, 16]);
        assert_eq!(p.gate(), Some(core::f64::consts::LN_2));
    }

    #[test]
    fn degenerate_config_has_no_stage_params() {
        let cfg = HiCIConfig {
            local_slots: 0,
            global_slots: 0,
            d_bottleneck: 0,
            d_compress: 0,
            global_scope: GlobalScope::AllSegments,
            ..HiCIConfig::micro()
        };
        let p = HiCIParams::init(&cfg, &mut rng::generator(0)).unwrap();
        assert!(p.local.is_none() && p.global.is_none());
        assert_eq!(p.count(), 3 * 16 * 16);
    }

    #[test]
    fn names_are_dotted_and_ordered() {
        let p = HiCIParams::init(&HiCIConfig::micro(), &mut rng::generator(0)).unwrap();
        let names = p.names();
        assert_eq!(names.first().map(String::as_str), Some("local.slots"));
        assert!(names.iter().any(|n| n == "global.beta"));
        assert_eq!(names.last().map(String::as_str), Some("broadcast.w_v"));
    }

    #[test]
    fn load_named_round_trips_and_rejects_mismatch() {
        let cfg = HiCIConfig::micro();
        let a = HiCIParams::init(&cfg, &mut rng::generator(1)).unwrap();
        let mut b = HiCIParams::init(&cfg, &mut rng::generator(2)).unwrap();
        b.load_named(&a.named_tensors()).unwrap();
        assert_eq!(a, b);
        let mut short = a.named_tensors();
        short.pop();
        assert!(b.load_named(&short).is_err());
    }
}

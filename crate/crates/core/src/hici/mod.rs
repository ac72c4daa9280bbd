//! The HiCI layer: local construction, global integration, top-down
//! broadcast, and attention-mass statistics.

mod attention;
mod config;
mod mass;
mod params;

pub use attention::{
    broadcast, forward, full_attention, hici_forward, hici_forward_traced, integrate_global,
    local_construct, local_queries, partition, statistics, ForwardOptions, ForwardTrace, SiteProbs,
};
pub use config::{GlobalScope, HiCIConfig, DEFAULT_LN_EPS};
pub use mass::{AttnMassRecord, MassTally};
pub use params::{BroadcastParams, GlobalParams, HiCIParams, LocalParams, SLOT_INIT_STD};

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::Graph;
use crate::params::bind_const;
use crate::tensor::Tensor;

/// Broadcast attention-mass fractions of one layer, per head (`layer = 0`).
pub fn collect_attn_mass(
    x: &Tensor,
    params: &HiCIParams,
    cfg: &HiCIConfig,
    opts: ForwardOptions,
) -> Result<Vec<AttnMassRecord>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.map("", &mut bind_const(&mut g));
    let trace = hici_forward_traced(&mut g, xv, &p, cfg, opts, true)?;
    Ok(trace.mass.expect("requested").records(0))
}

/// Probability matrices of every attention site of one forward pass.
pub fn attention_probabilities(
    x: &Tensor,
    params: &HiCIParams,
    cfg: &HiCIConfig,
    opts: ForwardOptions,
) -> Result<AttentionProbs> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.map("", &mut bind_const(&mut g));
    let trace = hici_forward_traced(&mut g, xv, &p, cfg, opts, false)?;
    let take = |vs: &[crate::graph::Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
    Ok(AttentionProbs {
        local: take(&trace.probs.local),
        global: take(&trace.probs.global),
        broadcast: take(&trace.probs.broadcast),
    })
}

/// Plain-tensor copy of [`SiteProbs`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs {
    pub local: Vec<Tensor>,
    pub global: Vec<Tensor>,
    pub broadcast: Vec<Tensor>,
}

/// Reverse-mode vs central-difference gradients of every HiCI tensor on a
/// random `segments · S × d` input, with loss `Σ (Y ⊙ R)` for a fixed random
/// `R`.
pub fn gradient_check(
    cfg: &HiCIConfig,
    segments: usize,
    seed: u64,
) -> Result<crate::gradcheck::GradReport> {
    use crate::params::bind_param;
    use crate::rng;

    let mut rng = rng::generator(seed);
    let params = HiCIParams::random(cfg, 0.5, &mut rng)?;
    let t = segments * cfg.segment_len;
    let x = rng::uniform_from(&[t, cfg.d_model], 1.0, &mut rng);
    let r = rng::uniform_from(&[t, cfg.d_model], 1.0, &mut rng);
    crate::gradcheck::gradient_report(&params, crate::gradcheck::FD_STEP, |g, p, trainable| {
        let bound = if trainable {
            p.map("", &mut bind_param(g))
        } else {
            p.map("", &mut bind_const(g))
        };
        let mut vars = Vec::new();
        bound.visit("", &mut |_, v| vars.push(*v));
        let xv = g.constant(x.clone());
        let rv = g.constant(r.clone());
        let y = hici_forward(g, xv, &bound, cfg)?;
        let weighted = g.mul(y, rv)?;
        Ok((g.sum(weighted), vars))
    })
}

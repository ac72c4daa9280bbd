//! The three stages and the full forward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{GlobalScope, HiCIConfig};
use super::mass::MassTally;
use super::params::{BroadcastParams, GlobalParams, HiCIParams, LocalParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::math;
use crate::ops::{Mask, Stat, L2_EPS};
use crate::params::bind_const;
use crate::tensor::Tensor;

/// Splits `x: T × d` into `T / S` contiguous segments.
pub fn partition(x: &Tensor, segment_len: usize) -> Result<Vec<Tensor>> {
    let (t, d) = (x.rows(), x.cols());
    if segment_len == 0 || t % segment_len != 0 {
        return Err(Error::NotDivisible {
            len: t,
            segment: segment_len,
        });
    }
    Ok(x.data()
        .chunks(segment_len * d)
        .map(|c| Tensor::new(&[segment_len, d], c.to_vec()).expect("chunk size"))
        .collect())
}

/// Scaled dot-product attention with `heads` contiguous column blocks.
///
/// `q: Lq × w`, `k, v: Lk × w`. With `uniform` set the logits are replaced
/// by zeros, so each query spreads its mass evenly over visible keys. The
/// per-head probability matrices are appended to `probs` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Mask,
    uniform: bool,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let w = g.value(q).cols();
    if g.value(k).cols() != w || g.value(v).cols() != w || !w.is_multiple_of(heads) {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    let hw = w / heads;
    let scale = 1.0 / math::sqrt(hw as f64);
    let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hw, hw)?,
                g.slice_cols(k, h * hw, hw)?,
                g.slice_cols(v, h * hw, hw)?,
            )
        };
        let logits = if uniform {
            g.constant(Tensor::zeros(&[lq, lk]))
        } else {
            let s = g.matmul_nt(qh, kh)?;
            g.scale(s, scale)
        };
        let p = g.softmax_rows(logits, mask);
        if let Some(out) = probs.as_deref_mut() {
            out.push(p);
        }
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

fn check_cols(g: &Graph, op: &'static str, v: Var, cols: usize) -> Result<()> {
    if g.value(v).cols() != cols || g.shape(v).len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: g.shape(v).to_vec(),
            rhs: vec![cols],
        });
    }
    Ok(())
}

/// Slot queries `L_slot · W_Q`, shared by every segment.
pub fn local_queries(g: &mut Graph, p: &LocalParams<Var>) -> Result<Var> {
    let prev = g.set_scope(Scope::Local);
    let q = g.matmul(p.slots, p.w_q);
    g.set_scope(prev);
    q
}

/// Compresses one segment `X_i: S × d` into `L_i: M × d`.
pub fn local_construct(
    g: &mut Graph,
    x_i: Var,
    p: &LocalParams<Var>,
    cfg: &HiCIConfig,
) -> Result<Var> {
    let q = local_queries(g, p)?;
    local_construct_with(g, x_i, q, p, cfg, None)
}

pub(crate) fn local_construct_with(
    g: &mut Graph,
    x_i: Var,
    queries: Var,
    p: &LocalParams<Var>,
    cfg: &HiCIConfig,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    check_cols(g, "local_construct", x_i, cfg.d_model)?;
    let prev = g.set_scope(Scope::Local);
    let out = (|| {
        let k = g.matmul(x_i, p.w_k)?;
        let v = g.matmul(x_i, p.w_v)?;
        let att = multi_head_attention(g, queries, k, v, cfg.heads, Mask::None, false, probs)?;
        g.matmul(att, p.w_o)
    })();
    g.set_scope(prev);
    out
}

/// The five pooled views `[μ; max; min; σ; μ/‖μ‖]` of the stacked local
/// representations, as a `5 × d` matrix.
pub fn statistics(g: &mut Graph, locals: &[Var]) -> Result<Var> {
    if locals.is_empty() {
        return Err(Error::Empty("integrate_global"));
    }
    let stacked = if locals.len() == 1 {
        locals[0]
    } else {
        g.concat_rows(locals)?
    };
    let mean = g.column_stat(stacked, Stat::Mean)?;
    let max = g.column_stat(stacked, Stat::Max)?;
    let min = g.column_stat(stacked, Stat::Min)?;
    let std = g.column_stat(stacked, Stat::Std)?;
    let dir = g.l2_normalize(mean, L2_EPS);
    g.concat_rows(&[mean, max, min, std, dir])
}

/// Pools `N` local representations into the global context `G: K × d`.
pub fn integrate_global(
    g: &mut Graph,
    locals: &[Var],
    p: &GlobalParams<Var>,
    cfg: &HiCIConfig,
) -> Result<Var> {
    integrate_global_with(g, locals, p, cfg, None)
}

fn integrate_global_with(
    g: &mut Graph,
    locals: &[Var],
    p: &GlobalParams<Var>,
    cfg: &HiCIConfig,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    for &l in locals {
        check_cols(g, "integrate_global", l, cfg.d_model)?;
    }
    let prev = g.set_scope(Scope::Global);
    let out = (|| {
        let z = statistics(g, locals)?;
        let c = g.matmul(z, p.w_c)?;
        let c = g.layer_norm(c, p.ln_c_gain, p.ln_c_bias, cfg.ln_eps)?;
        let b = g.matmul(c, p.w_b)?;
        let compressed = g.layer_norm(b, p.ln_b_gain, p.ln_b_bias, cfg.ln_eps)?;
        let q = g.matmul(p.queries, p.w_q)?;
        let k = g.matmul(compressed, p.w_k)?;
        let v = g.matmul(compressed, p.w_v)?;
        let att = multi_head_attention(g, q, k, v, cfg.heads, Mask::None, false, probs)?;
        let merged = g.matmul(att, p.w_o)?;
        let expanded = g.matmul(merged, p.w_exp)?;
        let alpha = g.softplus(p.beta);
        g.scale_by(expanded, alpha)
    })();
    g.set_scope(prev);
    out
}

/// Per-call switches of the broadcast attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace broadcast logits with zeros (uniform attention over visible
    /// positions). Gives analytic attention-mass baselines.
    pub uniform_probe: bool,
}

/// Segment tokens attend over `[G; L_i; X_i]`; returns `S × d`.
pub fn broadcast(
    g: &mut Graph,
    x_i: Var,
    local: Var,
    global: Var,
    p: &BroadcastParams<Var>,
    cfg: &HiCIConfig,
) -> Result<Var> {
    broadcast_with(
        g,
        x_i,
        local,
        global,
        p,
        cfg,
        ForwardOptions::default(),
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn broadcast_with(
    g: &mut Graph,
    x_i: Var,
    local: Var,
    global: Var,
    p: &BroadcastParams<Var>,
    cfg: &HiCIConfig,
    opts: ForwardOptions,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    for v in [x_i, local, global] {
        check_cols(g, "broadcast", v, cfg.d_model)?;
    }
    let context = g.value(global).rows() + g.value(local).rows();
    let prev = g.set_scope(Scope::BroadcastProj);
    let out = (|| {
        let augmented = g.concat_rows(&[global, local, x_i])?;
        let q = g.matmul(x_i, p.w_q)?;
        let k = g.matmul(augmented, p.w_k)?;
        let v = g.matmul(augmented, p.w_v)?;
        let mask = if cfg.causal_segment_mask {
            Mask::CausalAfter { prefix: context }
        } else {
            Mask::None
        };
        g.set_scope(Scope::BroadcastAttn);
        multi_head_attention(g, q, k, v, cfg.heads, mask, opts.uniform_probe, probs)
    })();
    g.set_scope(prev);
    out
}

/// Graph handles of one forward pass, kept for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    /// `L_i` for every segment (empty when `M = 0`).
    pub locals: Vec<Var>,
    /// Global context seen by each segment. In `AllSegments` scope every
    /// entry is the same node.
    pub globals: Vec<Var>,
    pub mass: Option<MassTally>,
    pub probs: SiteProbs,
}

/// Attention probability matrices of every site, one entry per head per
/// call, in execution order.
#[derive(Clone, Debug, Default)]
pub struct SiteProbs {
    /// `M × S` per head per segment.
    pub local: Vec<Var>,
    /// `K × 5` per head per integration.
    pub global: Vec<Var>,
    /// `S × (K + M + S)` per head per segment.
    pub broadcast: Vec<Var>,
}

/// `X: T × d → T × d` through partition, local construction, global
/// integration and broadcast.
pub fn hici_forward(g: &mut Graph, x: Var, p: &HiCIParams<Var>, cfg: &HiCIConfig) -> Result<Var> {
    Ok(hici_forward_traced(g, x, p, cfg, ForwardOptions::default(), false)?.output)
}

pub fn hici_forward_traced(
    g: &mut Graph,
    x: Var,
    p: &HiCIParams<Var>,
    cfg: &HiCIConfig,
    opts: ForwardOptions,
    collect_mass: bool,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    check_cols(g, "hici_forward", x, cfg.d_model)?;
    let (t, s, d) = (g.value(x).rows(), cfg.segment_len, cfg.d_model);
    if t % s != 0 {
        return Err(Error::NotDivisible { len: t, segment: s });
    }
    if p.local.is_some() != (cfg.local_slots > 0) || p.global.is_some() != (cfg.global_slots > 0) {
        return Err(Error::Config("parameters do not match slot counts".into()));
    }
    let n = t / s;
    let segments: Vec<Var> = if n == 1 {
        vec![x]
    } else {
        (0..n)
            .map(|i| g.slice_rows(x, i * s, s))
            .collect::<Result<_>>()?
    };

    let mut site = SiteProbs::default();
    let locals: Vec<Var> = match &p.local {
        Some(lp) => {
            let q = local_queries(g, lp)?;
            segments
                .iter()
                .map(|&xi| local_construct_with(g, xi, q, lp, cfg, Some(&mut site.local)))
                .collect::<Result<_>>()?
        }
        None => Vec::new(),
    };

    let empty = g.constant(Tensor::zeros(&[0, d]));
    let globals: Vec<Var> = match (&p.global, cfg.global_scope) {
        (None, _) => vec![empty; n],
        (Some(gp), GlobalScope::AllSegments) => {
            vec![integrate_global_with(g, &locals, gp, cfg, Some(&mut site.global))?; n]
        }
        (Some(gp), GlobalScope::PrecedingSegments) => {
            let zero = g.constant(Tensor::zeros(&[cfg.global_slots, d]));
            let mut out = vec![zero];
            for i in 1..n {
                out.push(integrate_global_with(
                    g,
                    &locals[..i],
                    gp,
                    cfg,
                    Some(&mut site.global),
                )?);
            }
            out
        }
    };

    let visible_locals: Vec<Var> = match (locals.is_empty(), cfg.global_scope) {
        (true, _) => vec![empty; n],
        (false, GlobalScope::AllSegments) => locals.clone(),
        (false, GlobalScope::PrecedingSegments) => {
            let zero = g.constant(Tensor::zeros(&[cfg.local_slots, d]));
            core::iter::once(zero)
                .chain(locals[..n - 1].iter().copied())
                .collect()
        }
    };

    let mut tally = collect_mass.then(|| MassTally::new(cfg.heads));
    let mut outputs = Vec::with_capacity(n);
    let mut probs = Vec::new();
    for i in 0..n {
        probs.clear();
        let out = broadcast_with(
            g,
            segments[i],
            visible_locals[i],
            globals[i],
            &p.broadcast,
            cfg,
            opts,
            Some(&mut probs),
        )?;
        if let Some(t) = tally.as_mut() {
            for (h, &pv) in probs.iter().enumerate() {
                t.add(h, g.value(pv), cfg.global_slots, cfg.local_slots);
            }
        }
        site.broadcast.extend_from_slice(&probs);
        outputs.push(out);
    }
    let output = if n == 1 {
        outputs[0]
    } else {
        g.concat_rows(&outputs)?
    };
    Ok(ForwardTrace {
        output,
        locals,
        globals,
        mass: tally,
        probs: site,
    })
}

/// Standard multi-head self-attention over the whole sequence with the
/// broadcast projections; causal when `cfg.causal_segment_mask` is set.
/// This is the full-attention evaluation mode of the host.
pub fn full_attention(
    g: &mut Graph,
    x: Var,
    p: &BroadcastParams<Var>,
    cfg: &HiCIConfig,
) -> Result<Var> {
    check_cols(g, "full_attention", x, cfg.d_model)?;
    let prev = g.set_scope(Scope::BroadcastProj);
    let out = (|| {
        let q = g.matmul(x, p.w_q)?;
        let k = g.matmul(x, p.w_k)?;
        let v = g.matmul(x, p.w_v)?;
        let mask = if cfg.causal_segment_mask {
            Mask::CausalAfter { prefix: 0 }
        } else {
            Mask::None
        };
        g.set_scope(Scope::BroadcastAttn);
        multi_head_attention(g, q, k, v, cfg.heads, mask, false, None)
    })();
    g.set_scope(prev);
    out
}

/// Evaluates [`hici_forward`] on plain tensors.
pub fn forward(x: &Tensor, params: &HiCIParams, cfg: &HiCIConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.map("", &mut bind_const(&mut g));
    let out = hici_forward(&mut g, xv, &p, cfg)?;
    Ok(g.value(out).clone())
}

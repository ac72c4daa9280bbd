use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math;
use crate::params::{bind_param, ParamTree};
use crate::rng;
use crate::tensor::Tensor;

use super::model::{is_hici_group, lm_forward, HostConfig, HostForward, HostParams};

/// Weights plus AdamW moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: HostParams,
    pub m: HostParams,
    pub v: HostParams,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: HostParams) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self {
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn init(cfg: &HostConfig) -> Result<Self> {
        Ok(Self::new(HostParams::init(cfg)?))
    }
}

/// One line of the loss trace. `loss` is measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_hici: f64,
    /// HiCI-group gradient norm before clipping.
    pub hici_grad_norm: f64,
}

/// Linear warmup over `warmup_steps`, then constant.
pub fn lr_factor(cfg: &HostConfig, step: u64) -> f64 {
    let w = cfg.optim.warmup_steps;
    if w == 0 {
        1.0
    } else {
        ((step + 1) as f64 / w as f64).min(1.0)
    }
}

/// Start offsets of the `max_len + 1` token windows used at `step`. They
/// depend only on the seed and the step, so a resumed run sees the same data.
pub fn batch_offsets(cfg: &HostConfig, corpus_len: usize, step: u64) -> Result<Vec<usize>> {
    let needed = cfg.max_len + 1;
    if corpus_len < needed {
        return Err(Error::TooShort {
            needed,
            got: corpus_len,
        });
    }
    let mut r = rng::derived(cfg.seed, step);
    let last = corpus_len - needed;
    Ok((0..cfg.optim.batch_size)
        .map(|_| r.random_range(0..=last))
        .collect())
}

fn flatten(p: &HostParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit_tensors(&mut |_, t| out.push(t.clone()));
    out
}

fn unflatten(p: &mut HostParams, mut src: Vec<Tensor>) {
    src.reverse();
    p.visit_tensors_mut(&mut |_, t| *t = src.pop().expect("same layout"));
}

/// Mean next-token loss over the step's windows and the gradient of every
/// tensor, in visit order.
pub fn loss_and_grads(
    params: &HostParams,
    cfg: &HostConfig,
    corpus: &[usize],
    step: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let offsets = batch_offsets(cfg, corpus.len(), step)?;
    let mut g = Graph::new();
    let bound = params.map("", &mut bind_param(&mut g));
    let t = cfg.max_len;
    let mut total = None;
    for &o in &offsets {
        let logits = lm_forward(
            &mut g,
            &corpus[o..o + t],
            &bound,
            cfg,
            HostForward::default(),
            None,
        )?;
        let ce = g.cross_entropy(logits, &corpus[o + 1..o + t + 1])?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let total = total.ok_or(Error::Empty("batch"))?;
    let loss = g.scale(total, 1.0 / offsets.len() as f64);
    g.backward(loss)?;
    let mut grads = Vec::new();
    bound.visit("", &mut |_, v| grads.push(g.grad(*v)));
    Ok((g.value(loss).data()[0], grads))
}

/// One AdamW step on `state`.
pub fn train_step(state: &mut TrainState, cfg: &HostConfig, corpus: &[usize]) -> Result<StepLog> {
    let o = &cfg.optim;
    let (loss, mut grads) = loss_and_grads(&state.params, cfg, corpus, state.step)?;

    let mut names = Vec::new();
    state
        .params
        .visit_tensors(&mut |n, _| names.push(is_hici_group(n)));

    let hici_sq: f64 = grads
        .iter()
        .zip(&names)
        .filter(|(_, &h)| h)
        .flat_map(|(g, _)| g.data())
        .map(|x| x * x)
        .sum();
    let hici_norm = math::sqrt(hici_sq);
    if o.hici_grad_clip > 0.0 && hici_norm > o.hici_grad_clip {
        let c = o.hici_grad_clip / hici_norm;
        for (g, _) in grads.iter_mut().zip(&names).filter(|(_, &h)| h) {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    let factor = lr_factor(cfg, state.step);
    let (lr_b, lr_h) = (o.lr_backbone * factor, o.lr_hici * factor);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - libm::pow(o.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(o.beta2, t as f64);

    let mut ms = flatten(&state.m);
    let mut vs = flatten(&state.v);
    let mut i = 0;
    state.params.visit_tensors_mut(&mut |_, p| {
        let lr = if names[i] { lr_h } else { lr_b };
        let (g, m, v) = (grads[i].data(), ms[i].data_mut(), vs[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
            v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
            let update = (m[j] / bc1) / (math::sqrt(v[j] / bc2) + o.eps);
            *w -= lr * (update + o.weight_decay * *w);
        }
        i += 1;
    });
    unflatten(&mut state.m, ms);
    unflatten(&mut state.v, vs);

    let log = StepLog {
        step: state.step,
        loss,
        lr_backbone: lr_b,
        lr_hici: lr_h,
        hici_grad_norm: hici_norm,
    };
    state.step += 1;
    Ok(log)
}

/// Runs `steps` more steps from `state`, returning the loss trace.
pub fn train_from(
    state: &mut TrainState,
    cfg: &HostConfig,
    corpus: &[usize],
    steps: u64,
) -> Result<Vec<StepLog>> {
    batch_offsets(cfg, corpus.len(), state.step)?;
    (0..steps).map(|_| train_step(state, cfg, corpus)).collect()
}

/// Fresh initialisation from `cfg.seed`, then `steps` steps.
pub fn train(cfg: &HostConfig, corpus: &[usize], steps: u64) -> Result<(TrainState, Vec<StepLog>)> {
    let mut state = TrainState::init(cfg)?;
    let trace = train_from(&mut state, cfg, corpus, steps)?;
    Ok((state, trace))
}

/// Trailing `window`-step means of the loss trace (one per full window).
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

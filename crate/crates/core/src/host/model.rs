use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hici::{
    full_attention, hici_forward_traced, ForwardOptions, HiCIConfig, HiCIParams, MassTally,
};
use crate::params::{bind_const, join, leaf_group, ParamTree};
use crate::rng::{self, Generator};
use crate::tensor::Tensor;

use super::vocab;

/// Attention used inside each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    /// Hierarchical attention, as in training.
    #[default]
    Hici,
    /// Plain full attention over the whole window with the broadcast
    /// projections.
    Full,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hici" => Some(Self::Hici),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hici => "hici",
            Self::Full => "full",
        }
    }
}

/// AdamW settings with the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    /// Local construction and global integration tensors.
    pub lr_hici: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global-norm clip applied to the HiCI group only.
    pub hici_grad_clip: f64,
    /// Windows per step.
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 2e-3,
            lr_hici: 2e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 20,
            hici_grad_clip: 0.3,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    /// Longest window the position table covers.
    pub max_len: usize,
    pub seed: u64,
    pub hici: HiCIConfig,
    pub optim: OptimConfig,
}

impl HostConfig {
    /// One block around the micro HiCI layer, byte vocabulary, 2-segment
    /// windows.
    pub fn micro() -> Self {
        Self::with_hici(HiCIConfig::micro())
    }

    pub fn with_hici(hici: HiCIConfig) -> Self {
        Self {
            vocab_size: vocab::VOCAB_SIZE,
            n_layers: 1,
            ffn_width: 4 * hici.d_model,
            max_len: 2 * hici.segment_len,
            seed: 0,
            hici,
            optim: OptimConfig::default(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.hici.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.hici.validate()?;
        if self.vocab_size < 2 {
            return Err(Error::Config(alloc::format!(
                "vocab_size = {} must be at least 2",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.ffn_width == 0 {
            return Err(Error::Config(
                "n_layers and ffn_width must be positive".into(),
            ));
        }
        if self.max_len == 0 || !self.max_len.is_multiple_of(self.hici.segment_len) {
            return Err(Error::NotDivisible {
                len: self.max_len,
                segment: self.hici.segment_len,
            });
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

leaf_group! {
    /// Everything in a block except the HiCI layer.
    BlockBackbone {
        ln1_gain,
        ln1_bias,
        /// `d × d` projection applied to the HiCI output.
        w_out,
        ln2_gain,
        ln2_bias,
        ffn_in,
        ffn_out,
    }
}

/// One pre-norm residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub backbone: BlockBackbone<T>,
    pub hici: HiCIParams<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            backbone: self.backbone.map(prefix, f),
            hici: self.hici.map(&join(prefix, "hici"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.backbone.visit(prefix, f);
        self.hici.visit(&join(prefix, "hici"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.backbone.visit_mut(prefix, f);
        self.hici.visit_mut(&join(prefix, "hici"), f);
    }
}

impl ParamTree for BlockParams {
    fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.visit("", f)
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut("", f)
    }
}

impl BlockParams {
    pub fn init(cfg: &HostConfig, rng: &mut Generator) -> Result<Self> {
        let d = cfg.d_model();
        Ok(Self {
            backbone: BlockBackbone {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                w_out: rng::xavier_from(d, d, rng),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_in: rng::xavier_from(d, cfg.ffn_width, rng),
                ffn_out: rng::xavier_from(cfg.ffn_width, d, rng),
            },
            hici: HiCIParams::init(&cfg.hici, rng)?,
        })
    }
}

/// All tensors of the toy language model.
#[derive(Clone, Debug, PartialEq)]
pub struct HostParams<T = Tensor> {
    pub tok_emb: T,
    /// Learned absolute positions for segment tokens.
    pub pos_emb: T,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: T,
}

impl<T> HostParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> HostParams<U> {
        let tok_emb = f(&join(prefix, "tok_emb"), &self.tok_emb);
        let pos_emb = f(&join(prefix, "pos_emb"), &self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(&join(prefix, &alloc::format!("blocks.{i}")), f))
            .collect();
        HostParams {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: f(&join(prefix, "lnf_gain"), &self.lnf_gain),
            lnf_bias: f(&join(prefix, "lnf_bias"), &self.lnf_bias),
            head: f(&join(prefix, "head"), &self.head),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(prefix, "tok_emb"), &self.tok_emb);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        f(&join(prefix, "lnf_gain"), &self.lnf_gain);
        f(&join(prefix, "lnf_bias"), &self.lnf_bias);
        f(&join(prefix, "head"), &self.head);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "tok_emb"), &mut self.tok_emb);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        f(&join(prefix, "lnf_gain"), &mut self.lnf_gain);
        f(&join(prefix, "lnf_bias"), &mut self.lnf_bias);
        f(&join(prefix, "head"), &mut self.head);
    }
}

impl ParamTree for HostParams {
    fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.visit("", f)
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut("", f)
    }
}

/// Standard deviation of embedding and head initialisation.
pub const EMBED_INIT_STD: f64 = 0.02;

impl HostParams {
    pub fn init(cfg: &HostConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::generator(cfg.seed);
        let d = cfg.d_model();
        let tok_emb = rng::normal_from(&[cfg.vocab_size, d], EMBED_INIT_STD, &mut rng);
        let pos_emb = rng::normal_from(&[cfg.max_len, d], EMBED_INIT_STD, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams::init(cfg, &mut rng))
            .collect::<Result<_>>()?;
        let head = rng::normal_from(&[d, cfg.vocab_size], EMBED_INIT_STD, &mut rng);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::ones(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    /// Same shape with every tensor zeroed, for optimizer moments.
    pub fn zeros_like(&self) -> Self {
        self.map("", &mut |_, t| Tensor::zeros(t.shape()))
    }
}

/// Whether a dotted parameter name belongs to the HiCI learning-rate group.
pub fn is_hici_group(name: &str) -> bool {
    name.contains("hici.local.") || name.contains("hici.global.")
}

/// Per-call forward switches of the host.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HostForward {
    pub mode: AttentionMode,
    pub hici: ForwardOptions,
    pub collect_mass: bool,
}

/// `x + W_out · HiCI(LN(x))`, then `x + FFN(LN(x))`.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    p: &BlockParams<Var>,
    cfg: &HiCIConfig,
    opts: HostForward,
    mass: Option<&mut Vec<MassTally>>,
) -> Result<Var> {
    let b = &p.backbone;
    let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, cfg.ln_eps)?;
    let attended = match opts.mode {
        AttentionMode::Hici => {
            let trace = hici_forward_traced(g, h, &p.hici, cfg, opts.hici, opts.collect_mass)?;
            if let (Some(out), Some(t)) = (mass, trace.mass) {
                out.push(t);
            }
            trace.output
        }
        AttentionMode::Full => full_attention(g, h, &p.hici.broadcast, cfg)?,
    };
    let projected = g.matmul(attended, b.w_out)?;
    let x = g.add(x, projected)?;
    let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, cfg.ln_eps)?;
    let inner = g.matmul(h, b.ffn_in)?;
    let inner = g.gelu(inner);
    let out = g.matmul(inner, b.ffn_out)?;
    g.add(x, out)
}

/// Checks a window of token ids against the model limits.
pub fn check_window(cfg: &HostConfig, ids: &[usize]) -> Result<()> {
    let t = ids.len();
    if t == 0 || !t.is_multiple_of(cfg.hici.segment_len) {
        return Err(Error::NotDivisible {
            len: t,
            segment: cfg.hici.segment_len,
        });
    }
    if t > cfg.max_len {
        return Err(Error::Config(alloc::format!(
            "window of {t} tokens exceeds max_len = {}",
            cfg.max_len
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Embeds `ids`, runs every block and the head; returns `T × vocab` logits.
pub fn lm_forward(
    g: &mut Graph,
    ids: &[usize],
    p: &HostParams<Var>,
    cfg: &HostConfig,
    opts: HostForward,
    mut mass: Option<&mut Vec<MassTally>>,
) -> Result<Var> {
    check_window(cfg, ids)?;
    let tok = g.gather_rows(p.tok_emb, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather_rows(p.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    for b in &p.blocks {
        x = block_forward(g, x, b, &cfg.hici, opts, mass.as_deref_mut())?;
    }
    let h = g.layer_norm(x, p.lnf_gain, p.lnf_bias, cfg.hici.ln_eps)?;
    g.matmul(h, p.head)
}

/// A configuration plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HostModel {
    pub config: HostConfig,
    pub params: HostParams,
}

impl HostModel {
    pub fn new(config: HostConfig) -> Result<Self> {
        Ok(Self {
            params: HostParams::init(&config)?,
            config,
        })
    }

    pub fn logits(&self, ids: &[usize], mode: AttentionMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.map("", &mut bind_const(&mut g));
        let opts = HostForward {
            mode,
            ..HostForward::default()
        };
        let out = lm_forward(&mut g, ids, &p, &self.config, opts, None)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy of predicting `ids[1..]` from `ids[..T]`, with
    /// `ids.len() == T + 1`.
    pub fn loss(&self, ids: &[usize], mode: AttentionMode) -> Result<f64> {
        let t = ids.len().saturating_sub(1);
        let logits = self.logits(&ids[..t], mode)?;
        let lse = crate::ops::log_sum_exp_rows(&logits);
        let nll: f64 = (0..t).map(|i| lse[i] - logits.at(i, ids[i + 1])).sum();
        Ok(nll / t as f64)
    }

    /// Broadcast attention-mass fractions per `(layer, head)` over `ids`.
    pub fn attention_mass(
        &self,
        ids: &[usize],
        hici: ForwardOptions,
    ) -> Result<Vec<crate::hici::AttnMassRecord>> {
        let mut g = Graph::new();
        let p = self.params.map("", &mut bind_const(&mut g));
        let opts = HostForward {
            mode: AttentionMode::Hici,
            hici,
            collect_mass: true,
        };
        let mut tallies = Vec::new();
        lm_forward(&mut g, ids, &p, &self.config, opts, Some(&mut tallies))?;
        Ok(tallies
            .iter()
            .enumerate()
            .flat_map(|(layer, t)| t.records(layer))
            .collect())
    }

    pub fn names(&self) -> Vec<String> {
        self.params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }
}

/// Reverse-mode vs central differences for every tensor of one block on a
/// random `2S × d` input.
pub fn block_gradient_check(cfg: &HostConfig, seed: u64) -> Result<crate::gradcheck::GradReport> {
    use crate::params::bind_param;

    let mut rng = rng::generator(seed);
    let mut block = BlockParams::init(cfg, &mut rng)?;
    block.visit_mut("", &mut |n, t| {
        *t = rng::perturbed_param(n, t.shape(), 0.5, &mut rng)
    });
    let t = 2 * cfg.hici.segment_len;
    let x = rng::uniform_from(&[t, cfg.d_model()], 1.0, &mut rng);
    let r = rng::uniform_from(&[t, cfg.d_model()], 1.0, &mut rng);
    crate::gradcheck::gradient_report(&block, crate::gradcheck::FD_STEP, |g, p, trainable| {
        let bound = if trainable {
            p.map("", &mut bind_param(g))
        } else {
            p.map("", &mut bind_const(g))
        };
        let mut vars = Vec::new();
        bound.visit("", &mut |_, v| vars.push(*v));
        let xv = g.constant(x.clone());
        let rv = g.constant(r.clone());
        let y = block_forward(g, xv, &bound, &cfg.hici, HostForward::default(), None)?;
        let weighted = g.mul(y, rv)?;
        Ok((g.sum(weighted), vars))
    })
}

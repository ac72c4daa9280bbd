//! The `hici` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hici_core::analysis::{self, Method, ModelDims};
use hici_core::gradcheck::{GradReport, FD_TOLERANCE};
use hici_core::hici::{self, ForwardOptions, GlobalScope, HiCIConfig, HiCIParams};
use hici_core::host::{self, vocab, AttentionMode, HostConfig, HostModel, TrainState};
use hici_core::rng;

use crate::checkpoint::{Checkpoint, HostFile};
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;
use crate::tables::{self, Format};

#[derive(Debug, Parser)]
#[command(
    name = "hici",
    version,
    about = "Hierarchical construction-integration attention toolkit"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy language model on a byte corpus.
    Train(TrainArgs),
    /// Sliding-window perplexity of a checkpoint.
    EvalPpl(EvalArgs),
    /// Reverse-mode vs central-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Analytic FLOPs table.
    Flops(FlopsArgs),
    /// Parameter overhead table.
    Params(ParamsArgs),
    /// Broadcast attention-mass fractions per layer and head.
    AttnStats(AttnStatsArgs),
    /// Instrumented FLOPs and wall time as the context grows.
    Scaling(ScalingArgs),
    /// Re-run the command recorded in a manifest into a new directory.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    All,
    Preceding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hici,
    Full,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with the layer configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// llama2-7b, llama2-13b or micro.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for every file the command writes.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the causal mask inside segments.
    #[arg(long, value_enum)]
    pub causal: Option<Switch>,
    /// Override which segments feed the global context.
    #[arg(long, value_enum)]
    pub global_scope: Option<ScopeArg>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

impl Common {
    fn hici_config(&self, default_preset: &str) -> Result<HiCIConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => config::load(path)?,
            (None, Some(name)) => config::preset(name)?,
            (None, None) => config::preset(default_preset)?,
        };
        if let Some(c) = self.causal {
            cfg.causal_segment_mask = c == Switch::On;
        }
        if let Some(s) = self.global_scope {
            cfg.global_scope = match s {
                ScopeArg::All => GlobalScope::AllSegments,
                ScopeArg::Preceding => GlobalScope::PrecedingSegments,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    /// Byte corpus file.
    #[arg(long, value_name = "PATH", conflicts_with = "text")]
    pub corpus: Option<PathBuf>,
    /// Inline corpus, repeated `--repeat` times.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Continue from this checkpoint; its config replaces the flags.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Training window; defaults to two segments.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub lr_hici: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR", required = true)]
    pub checkpoint: PathBuf,
    /// One document per file; may be repeated.
    #[arg(long, value_name = "PATH")]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Window length; defaults to the checkpoint's training window.
    #[arg(long)]
    pub eval_len: Option<usize>,
    /// Scored tokens per window after the first. Capped at the window
    /// length when not given.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Hici)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Segments in the random input.
    #[arg(long, default_value_t = 2)]
    pub segments: usize,
    #[arg(long, default_value_t = FD_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Context lengths; defaults to 8K, 16K, 32K, 64K and 100K.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<usize>,
    /// Segments per context (S = T / N).
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Host model for the base count: llama2-7b or llama2-13b.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttnStatsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained model to inspect. Without it, one freshly initialised layer
    /// is run on random input.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "text")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Tokens (or input rows) to run; defaults to one segment.
    #[arg(long)]
    pub eval_len: Option<usize>,
    /// Replace broadcast logits with zeros.
    #[arg(long)]
    pub uniform_probe: bool,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub common: Common,
    /// Context lengths; defaults to 2S, 4S, 8S and 16S.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR", required = true)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first) and runs it, printing to stdout.
pub fn main(argv: impl IntoIterator<Item = OsString>) -> ExitCode {
    let argv: Vec<OsString> = argv.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let stdout = std::io::stdout();
    match run(cli.command, &args, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// Files of one run, all under `--out` when it is set.
struct Outputs {
    dir: Option<PathBuf>,
}

impl Outputs {
    fn begin(
        common: &Common,
        subcommand: &str,
        argv: &[String],
        cfg: &HiCIConfig,
        host: Option<&HostConfig>,
        seed: u64,
        files: &[&str],
    ) -> Result<Self> {
        let Some(dir) = common.out.clone() else {
            return Ok(Self { dir: None });
        };
        let m = RunManifest {
            subcommand: subcommand.into(),
            argv: argv.to_vec(),
            config: ConfigFile::from(cfg),
            host: host.map(HostFile::from),
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            outputs: files.iter().map(|s| s.to_string()).collect(),
        };
        m.write(&dir)
            .with_context(|| format!("cannot write manifest into {}", dir.display()))?;
        Ok(Self { dir: Some(dir) })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            fs::write(&path, contents)
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn read_text(corpus: Option<&Path>, text: Option<&str>, repeat: usize) -> Result<Vec<usize>> {
    let bytes = match (corpus, text) {
        (Some(p), _) => fs::read(p).with_context(|| format!("cannot read {}", p.display()))?,
        (None, Some(t)) => t.as_bytes().to_vec(),
        (None, None) => bail!("one of --corpus or --text is required"),
    };
    Ok(vocab::encode(&bytes.repeat(repeat.max(1))))
}

fn dims_for(name: &str) -> Result<ModelDims> {
    match name {
        "llama2-7b" => Ok(ModelDims::llama2_7b()),
        "llama2-13b" => Ok(ModelDims::llama2_13b()),
        other => bail!("unknown model {other:?} (expected llama2-7b or llama2-13b)"),
    }
}

pub fn run(command: Command, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    match command {
        Command::Train(a) => train(a, argv, out),
        Command::EvalPpl(a) => eval_ppl(a, argv, out),
        Command::Gradcheck(a) => gradcheck(a, argv, out),
        Command::Flops(a) => flops(a, argv, out),
        Command::Params(a) => params(a, argv, out),
        Command::AttnStats(a) => attn_stats(a, argv, out),
        Command::Scaling(a) => scaling(a, argv, out),
        Command::Replay(a) => replay(a),
    }
}

fn params(a: ParamsArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let cfg = a.common.hici_config("llama2-7b")?;
    let model = match (&a.model, a.common.preset.as_deref()) {
        (Some(m), _) => m.clone(),
        (None, Some("llama2-13b")) => "llama2-13b".into(),
        _ => "llama2-7b".into(),
    };
    let dims = dims_for(&model)?;
    let files = ["params.txt"];
    let o = Outputs::begin(&a.common, "params", argv, &cfg, None, a.common.seed, &files)?;
    let b = analysis::count_params(&cfg, dims.n_layers, dims.base_params());
    let table = tables::params_table(&b, dims.name, &cfg, a.common.format);
    o.write(files[0], &table)?;
    out.write_all(table.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn flops(a: FlopsArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let cfg = a.common.hici_config("llama2-7b")?;
    let dims = match a.common.preset.as_deref() {
        Some("llama2-13b") => ModelDims::llama2_13b(),
        _ => ModelDims::llama2_7b(),
    };
    let contexts = if a.contexts.is_empty() {
        analysis::STANDARD_CONTEXTS.to_vec()
    } else {
        a.contexts.clone()
    };
    if a.segments == 0 {
        bail!("--segments must be positive");
    }
    let files = ["flops.txt"];
    let o = Outputs::begin(&a.common, "flops", argv, &cfg, None, a.common.seed, &files)?;
    let mut rows = Vec::new();
    for &t in &contexts {
        if t % a.segments != 0 {
            bail!("context {t} is not divisible into {} segments", a.segments);
        }
        let c = HiCIConfig {
            segment_len: t / a.segments,
            ..cfg
        };
        for m in Method::ALL {
            rows.push(analysis::count_flops(m, t, &dims, &c)?);
        }
    }
    let table = tables::flops_table(&rows, a.common.format);
    o.write(files[0], &table)?;
    out.write_all(table.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let cfg = a.common.hici_config("micro")?;
    let files = ["gradcheck.csv"];
    let o = Outputs::begin(
        &a.common,
        "gradcheck",
        argv,
        &cfg,
        None,
        a.common.seed,
        &files,
    )?;
    let mut report = GradReport::default();
    report.extend(
        "hici",
        hici::gradient_check(&cfg, a.segments, a.common.seed)?,
    );
    let host_cfg = HostConfig {
        max_len: 2 * cfg.segment_len,
        ..HostConfig::with_hici(cfg)
    };
    report.extend(
        "block",
        host::block_gradient_check(&host_cfg, a.common.seed)?,
    );
    let mut csv = String::from("tensor,relative_error\n");
    for (name, err) in &report.entries {
        csv.push_str(&format!("{name},{err:.6e}\n"));
    }
    o.write(files[0], &csv)?;
    let worst = report.worst().cloned().unwrap_or_default();
    let pass = report.max_error() <= a.tolerance;
    writeln!(
        out,
        "tensors {}  max relative error {:.3e} ({})  tolerance {:.0e}  {}",
        report.entries.len(),
        report.max_error(),
        worst.0,
        a.tolerance,
        if pass { "PASS" } else { "FAIL" }
    )?;
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn train(a: TrainArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let (host_cfg, mut state) = match &a.checkpoint {
        Some(dir) => {
            let c = Checkpoint::load(dir)?;
            (c.config, c.state)
        }
        None => {
            let cfg = a.common.hici_config("micro")?;
            let mut h = HostConfig {
                n_layers: a.layers,
                max_len: a.seq_len.unwrap_or(2 * cfg.segment_len),
                seed: a.common.seed,
                ..HostConfig::with_hici(cfg)
            };
            if let Some(b) = a.batch {
                h.optim.batch_size = b;
            }
            if let Some(lr) = a.lr_backbone {
                h.optim.lr_backbone = lr;
            }
            if let Some(lr) = a.lr_hici {
                h.optim.lr_hici = lr;
            }
            (h, TrainState::init(&h)?)
        }
    };
    let corpus = read_text(a.corpus.as_deref(), a.text.as_deref(), a.repeat)?;
    let files = [
        "loss.csv",
        "checkpoint/checkpoint.json",
        "checkpoint/tensors.json",
        "checkpoint/tensors.bin",
    ];
    let o = Outputs::begin(
        &a.common,
        "train",
        argv,
        &host_cfg.hici,
        Some(&host_cfg),
        host_cfg.seed,
        &files,
    )?;
    let trace = host::train_from(&mut state, &host_cfg, &corpus, a.steps)?;
    o.write(files[0], &tables::loss_trace(&trace))?;
    if let Some(dir) = o.path("checkpoint") {
        Checkpoint {
            config: host_cfg,
            state: state.clone(),
        }
        .save(&dir)?;
    }
    match trace.last() {
        Some(last) => writeln!(
            out,
            "steps {}  final loss {:.6}  (step {})",
            trace.len(),
            last.loss,
            last.step
        )?,
        None => writeln!(out, "steps 0")?,
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_ppl(a: EvalArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = HostModel {
        config: ckpt.config,
        params: ckpt.state.params,
    };
    let docs: Vec<Vec<usize>> = if a.corpus.is_empty() {
        vec![read_text(None, a.text.as_deref(), a.repeat)?]
    } else {
        a.corpus
            .iter()
            .map(|p| read_text(Some(p), None, a.repeat))
            .collect::<Result<_>>()?
    };
    let eval_len = a.eval_len.unwrap_or(model.config.max_len);
    let stride = a.stride.unwrap_or(256.min(eval_len));
    let mode = match a.mode {
        ModeArg::Hici => AttentionMode::Hici,
        ModeArg::Full => AttentionMode::Full,
    };
    let files = ["ppl.json"];
    let o = Outputs::begin(
        &a.common,
        "eval-ppl",
        argv,
        &model.config.hici,
        Some(&model.config),
        model.config.seed,
        &files,
    )?;
    let refs: Vec<&[usize]> = docs.iter().map(Vec::as_slice).collect();
    let p = host::eval_ppl_batched(&model, &refs, eval_len, stride, mode, 16)?;
    let json = serde_json::json!({
        "mode": mode.as_str(),
        "eval_len": eval_len,
        "stride": stride,
        "tokens": p.tokens,
        "windows": p.windows,
        "skipped_docs": p.skipped_docs,
        "nll_sum": p.nll_sum,
        "mean_nll": p.mean_nll(),
        "perplexity": p.ppl(),
    });
    o.write(files[0], &(serde_json::to_string_pretty(&json)? + "\n"))?;
    writeln!(
        out,
        "perplexity {:.6}  mean nll {:.6}  tokens {}  windows {}  skipped docs {}",
        p.ppl(),
        p.mean_nll(),
        p.tokens,
        p.windows,
        p.skipped_docs
    )?;
    Ok(ExitCode::SUCCESS)
}

fn attn_stats(a: AttnStatsArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let opts = ForwardOptions {
        uniform_probe: a.uniform_probe,
    };
    let files = ["attn_mass.csv"];
    let records = match &a.checkpoint {
        Some(dir) => {
            let c = Checkpoint::load(dir)?;
            let o = Outputs::begin(
                &a.common,
                "attn-stats",
                argv,
                &c.config.hici,
                Some(&c.config),
                c.config.seed,
                &files,
            )?;
            let ids = read_text(a.corpus.as_deref(), a.text.as_deref(), a.repeat)?;
            let t = a.eval_len.unwrap_or(c.config.max_len);
            if ids.len() < t {
                bail!("text has {} tokens, {t} needed", ids.len());
            }
            let model = HostModel {
                config: c.config,
                params: c.state.params,
            };
            let recs = model.attention_mass(&ids[..t], opts)?;
            (o, recs)
        }
        None => {
            let cfg = a.common.hici_config("micro")?;
            let o = Outputs::begin(
                &a.common,
                "attn-stats",
                argv,
                &cfg,
                None,
                a.common.seed,
                &files,
            )?;
            let t = a.eval_len.unwrap_or(cfg.segment_len);
            let mut r = rng::generator(a.common.seed);
            let params = HiCIParams::init(&cfg, &mut r)?;
            let x = rng::uniform_from(&[t, cfg.d_model], 1.0, &mut r);
            let recs = hici::collect_attn_mass(&x, &params, &cfg, opts)?;
            (o, recs)
        }
    };
    let (o, recs) = records;
    let csv = tables::mass_csv(&recs);
    o.write(files[0], &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn scaling(a: ScalingArgs, argv: &[String], out: &mut dyn Write) -> Result<ExitCode> {
    let cfg = match (&a.common.config, &a.common.preset) {
        (None, None) => {
            let mut c = analysis::probe_config();
            if let Some(s) = a.common.causal {
                c.causal_segment_mask = s == Switch::On;
            }
            if let Some(s) = a.common.global_scope {
                c.global_scope = match s {
                    ScopeArg::All => GlobalScope::AllSegments,
                    ScopeArg::Preceding => GlobalScope::PrecedingSegments,
                };
            }
            c
        }
        _ => a.common.hici_config("micro")?,
    };
    let s = cfg.segment_len;
    let contexts = if a.contexts.is_empty() {
        vec![2 * s, 4 * s, 8 * s, 16 * s]
    } else {
        a.contexts.clone()
    };
    let files = ["scaling.csv", "timing.csv"];
    let o = Outputs::begin(
        &a.common,
        "scaling",
        argv,
        &cfg,
        None,
        a.common.seed,
        &files,
    )?;
    let mut rows = Vec::new();
    let mut timing = String::from("T,seconds_per_call\n");
    for &t in &contexts {
        let start = Instant::now();
        let mut row = None;
        for _ in 0..a.repeats.max(1) {
            row = Some(analysis::probe(&cfg, t, a.common.seed)?);
        }
        let secs = start.elapsed().as_secs_f64() / a.repeats.max(1) as f64;
        timing.push_str(&format!("{t},{secs:.6}\n"));
        rows.push(row.expect("at least one repeat"));
    }
    let table = tables::scaling_table(&rows, cfg.d_model, a.common.format);
    o.write(
        files[0],
        &tables::scaling_table(&rows, cfg.d_model, Format::Csv),
    )?;
    o.write(files[1], &timing)?;
    out.write_all(table.as_bytes())?;
    out.write_all(b"\n")?;
    out.write_all(timing.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn replay(a: ReplayArgs) -> Result<ExitCode> {
    let m = RunManifest::read(&a.manifest)?;
    let mut argv = vec![OsString::from("hici")];
    let mut args = m.argv.iter();
    let mut replaced = false;
    while let Some(arg) = args.next() {
        if arg == "--out" {
            args.next();
            argv.push("--out".into());
            argv.push(a.out.clone().into());
            replaced = true;
        } else if arg.starts_with("--out=") {
            argv.push(format!("--out={}", a.out.display()).into());
            replaced = true;
        } else {
            argv.push(arg.into());
        }
    }
    if !replaced {
        argv.push("--out".into());
        argv.push(a.out.clone().into());
    }
    if argv.get(1).is_some_and(|s| s == "replay") {
        return Err(anyhow!("{} records a replay", a.manifest.display()));
    }
    Ok(main(argv))
}

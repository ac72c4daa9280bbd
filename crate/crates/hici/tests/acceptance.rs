//! The eight acceptance criteria, each printed as one PASS/FAIL line.

use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use hici_core::analysis;
use hici_core::hici::{self, ForwardOptions, GlobalScope, HiCIConfig, HiCIParams};
use hici_core::host::{self, vocab, HostConfig, HostModel};
use hici_core::ops;
use hici_core::{rng, Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn hici_bin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hici"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "hici {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Rounds to the `places` decimals a table displays.
fn shown(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

// 1. Parameter table.
fn parameter_table() -> Outcome {
    let text = hici_bin(&["params", "--preset", "llama2-7b", "--format", "csv"])?;
    let rows = csv_rows(&text);
    let find = |module: &str, component: &str, col: usize| -> Result<f64, String> {
        rows.iter()
            .find(|r| r[0] == module && r[1] == component)
            .and_then(|r| r[col].parse().ok())
            .ok_or_else(|| format!("row {module}/{component} missing"))
    };
    let local = find("local", "subtotal", 2)?;
    let global = find("global", "subtotal", 2)?;
    let total = find("hici", "total", 3)?;
    let overhead = 100.0 * find("overhead", "fraction", 3)?;
    check(shown(local / 1e6, 1) == 8.4, || {
        format!("local/layer {local}")
    })?;
    check(shown(global / 1e6, 1) == 3.7, || {
        format!("global/layer {global}")
    })?;
    check(shown(total / 1e6, 1) == 389.1, || format!("total {total}"))?;
    check((overhead - 5.46).abs() <= 0.01, || {
        format!("overhead {overhead:.4}%")
    })?;
    Ok(format!(
        "local {:.1}M/layer, global {:.1}M/layer, total {:.1}M, overhead {overhead:.3}%",
        local / 1e6,
        global / 1e6,
        total / 1e6
    ))
}

// 2. FLOPs table.
fn flops_table() -> Outcome {
    // Context, full attn, S2 attn, proj, ffn, others, HiCI total.
    let expected = [
        (8192, 35.2, 8.8, 35.2, 70.9, 2.1, 119.9),
        (16384, 140.7, 35.2, 70.4, 141.8, 4.3, 257.3),
        (32768, 562.9, 140.7, 140.7, 283.7, 8.6, 585.0),
        (65536, 2251.8, 562.9, 281.5, 567.3, 17.2, 1451.4),
        (102400, 5497.6, 1374.4, 439.8, 886.5, 26.8, 2762.6),
    ];
    let text = hici_bin(&["flops", "--format", "csv"])?;
    let rows = csv_rows(&text);
    let get = |t: usize, method: &str| -> Result<Vec<f64>, String> {
        rows.iter()
            .find(|r| r[0] == t.to_string() && r[1] == method)
            .map(|r| {
                r[2..]
                    .iter()
                    .map(|v| v.parse::<f64>().unwrap() / 1e12)
                    .collect()
            })
            .ok_or_else(|| format!("{method} row for {t} missing"))
    };
    let mut worst_ratio: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    for (t, full_attn, seg_attn, proj, ffn, others, hici_total) in expected {
        let full = get(t, "full")?;
        let seg = get(t, "segmented")?;
        let hici = get(t, "hici")?;
        let pairs = [
            ("full attn", full[0], full_attn),
            ("proj", full[1], proj),
            ("ffn", full[2], ffn),
            ("others", full[3], others),
            ("segmented attn", seg[0], seg_attn),
        ];
        for (name, ours, theirs) in pairs {
            check(shown(ours, 1) == theirs, || {
                format!("{t} {name}: {ours:.3} vs {theirs}")
            })?;
        }
        let rel = (hici[5] - hici_total).abs() / hici_total;
        check(rel <= 0.10, || {
            format!("{t} HiCI total {:.1} vs {hici_total}", hici[5])
        })?;
        let ratio = hici[5] / seg[5];
        check((1.0..=1.03).contains(&ratio), || {
            format!("{t} HiCI/S2 {ratio:.4}")
        })?;
        worst_ratio = worst_ratio.max(ratio);
        worst_total = worst_total.max(rel);
    }
    Ok(format!(
        "5 contexts, table columns match; HiCI total within {:.2}%, HiCI/S2 <= {worst_ratio:.4}",
        100.0 * worst_total
    ))
}

// 3. Gradients.
fn gradients() -> Outcome {
    let layer = hici::gradient_check(&HiCIConfig::micro(), 2, 0).map_err(|e| e.to_string())?;
    let block = host::block_gradient_check(&HostConfig::micro(), 0).map_err(|e| e.to_string())?;
    let tensors = HiCIParams::init(&HiCIConfig::micro(), &mut rng::generator(0))
        .map_err(|e| e.to_string())?
        .names()
        .len();
    check(layer.entries.len() == tensors, || {
        "layer report misses tensors".into()
    })?;
    let worst = layer.max_error().max(block.max_error());
    check(worst <= 1e-6, || {
        format!(
            "max relative error {worst:.3e} ({:?}, {:?})",
            layer.worst(),
            block.worst()
        )
    })?;
    Ok(format!(
        "{} layer + {} block tensors, max relative error {worst:.2e}",
        layer.entries.len(),
        block.entries.len()
    ))
}

/// Loop-based multi-head self-attention without masking.
fn reference_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
) -> Vec<f64> {
    let (t, d) = (x.rows(), x.cols());
    let proj = |w: &Tensor| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| x.at(i, k) * w.at(k, j)).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let hw = d / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let cols = h * hw..(h + 1) * hw;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hw as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i * d + c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

// 4. Oracle equivalence.
fn oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng::generator(seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let cfg = HiCIConfig {
            segment_len: 3 + seed as usize % 6,
            local_slots: 0,
            global_slots: 0,
            heads,
            d_model: 4 * heads,
            d_bottleneck: 0,
            d_compress: 0,
            causal_segment_mask: false,
            ..HiCIConfig::micro()
        };
        let p = HiCIParams::random(&cfg, 0.8, &mut r).map_err(|e| e.to_string())?;
        let x = rng::uniform_from(&[cfg.segment_len, cfg.d_model], 1.5, &mut r);
        let y = hici::forward(&x, &p, &cfg).map_err(|e| e.to_string())?;
        let b = &p.broadcast;
        let expect = reference_attention(&x, &b.w_q, &b.w_k, &b.w_v, heads);
        for (a, e) in y.data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    check(worst <= 1e-12, || format!("max abs difference {worst:.3e}"))?;
    Ok(format!("50 seeds, max abs difference {worst:.2e}"))
}

fn small_config() -> impl Strategy<Value = HiCIConfig> {
    (
        1usize..=2,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=4,
    )
        .prop_flat_map(|(heads, db_mult, extra, m, k, s)| {
            let d_b = heads * (db_mult + 1);
            let d = d_b + heads * extra;
            (1..d_b).prop_map(move |d_s| HiCIConfig {
                segment_len: s,
                local_slots: m,
                global_slots: k,
                heads,
                d_model: d,
                d_bottleneck: d_b,
                d_compress: d_s,
                causal_segment_mask: true,
                global_scope: GlobalScope::AllSegments,
                ..HiCIConfig::micro()
            })
        })
}

fn setup(cfg: &HiCIConfig, n: usize, seed: u64) -> (HiCIParams, Tensor) {
    let mut r = rng::generator(seed);
    let p = HiCIParams::random(cfg, 0.5, &mut r).unwrap();
    let x = rng::uniform_from(&[n * cfg.segment_len, cfg.d_model], 1.0, &mut r);
    (p, x)
}

fn rows_of(x: &Tensor, from: usize, count: usize) -> Vec<f64> {
    let d = x.cols();
    x.data()[from * d..(from + count) * d].to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn global_context(x: &Tensor, p: &HiCIParams, cfg: &HiCIConfig) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = p.map("", &mut hici_core::params::bind_const(&mut g));
    let t =
        hici::hici_forward_traced(&mut g, xv, &pv, cfg, ForwardOptions::default(), false).unwrap();
    g.value(t.globals[0]).clone()
}

fn runner() -> TestRunner {
    let config = Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// 5. Structural invariants.
fn invariants() -> Outcome {
    let mut passed = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut(&mut TestRunner) -> Result<(), String>| {
        let mut r = runner();
        f(&mut r).map_err(|e| format!("{name}: {e}"))?;
        passed.push(name.to_string());
        Ok::<(), String>(())
    };

    run("softmax rows", &mut |r| {
        let strat = (
            1usize..6,
            1usize..9,
            prop::collection::vec(-60.0f64..60.0, 54),
            0usize..4,
        );
        r.run(&strat, |(rows, cols, data, prefix)| {
            let t = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
            for mask in [ops::Mask::None, ops::Mask::CausalAfter { prefix }] {
                let p = ops::softmax_rows_masked(&t, mask);
                for i in 0..rows {
                    prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;

    run("gate positivity", &mut |r| {
        let strat = prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO;
        r.run(&strat, |beta| {
            prop_assert!(ops::softplus(beta) > 0.0, "beta {}", beta);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;

    run("G permutation invariance", &mut |r| {
        let strat = (small_config(), 2usize..6).prop_flat_map(|(cfg, n)| {
            let perm = Just((0..n).collect::<Vec<usize>>()).prop_shuffle();
            (Just(cfg), Just(n), any::<u64>(), perm)
        });
        r.run(&strat, |(cfg, n, seed, perm)| {
            let (p, x) = setup(&cfg, n, seed);
            let s = cfg.segment_len;
            let data: Vec<f64> = perm.iter().flat_map(|&i| rows_of(&x, i * s, s)).collect();
            let xp = Tensor::new(x.shape(), data).unwrap();
            let diff = max_diff(
                global_context(&x, &p, &cfg).data(),
                global_context(&xp, &p, &cfg).data(),
            );
            prop_assert!(diff <= 1e-12, "diff {:e}", diff);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;

    run("segment equivariance", &mut |r| {
        r.run(
            &(
                small_config(),
                2usize..5,
                any::<u64>(),
                0usize..5,
                0usize..5,
            ),
            |(cfg, n, seed, j, k)| {
                let (p, x) = setup(&cfg, n, seed);
                let (j, k, s) = (j % n, k % n, cfg.segment_len);
                let mut order: Vec<usize> = (0..n).collect();
                order.swap(j, k);
                let data: Vec<f64> = order.iter().flat_map(|&i| rows_of(&x, i * s, s)).collect();
                let y = hici::forward(&x, &p, &cfg).unwrap();
                let ys = hici::forward(&Tensor::new(x.shape(), data).unwrap(), &p, &cfg).unwrap();
                for (pos, &src) in order.iter().enumerate() {
                    let diff = max_diff(&rows_of(&ys, pos * s, s), &rows_of(&y, src * s, s));
                    prop_assert!(diff <= 1e-12, "segment {} diff {:e}", pos, diff);
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
    })?;

    run("causal perturbation", &mut |r| {
        r.run(
            &(
                small_config(),
                1usize..4,
                any::<u64>(),
                0usize..16,
                0.1f64..3.0,
            ),
            |(cfg, n, seed, t, delta)| {
                let cfg = HiCIConfig {
                    global_scope: GlobalScope::PrecedingSegments,
                    ..cfg
                };
                let (p, x) = setup(&cfg, n, seed);
                let t = t % x.rows();
                let mut xp = x.clone();
                for i in t + 1..x.rows() {
                    xp.row_mut(i).iter_mut().for_each(|v| *v -= delta);
                }
                let y = hici::forward(&x, &p, &cfg).unwrap();
                let yp = hici::forward(&xp, &p, &cfg).unwrap();
                let diff = max_diff(&rows_of(&y, 0, t + 1), &rows_of(&yp, 0, t + 1));
                prop_assert!(diff <= 1e-12, "t {} diff {:e}", t, diff);
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
    })?;

    run("capacity independence", &mut |r| {
        r.run(&(small_config(), any::<u64>()), |(cfg, seed)| {
            let mut seen = Vec::new();
            for n in [4, 8, 16] {
                let (p, x) = setup(&cfg, n, seed);
                let mut g = Graph::new();
                let xv = g.constant(x);
                let pv = p.map("", &mut hici_core::params::bind_const(&mut g));
                let tr = hici::hici_forward_traced(
                    &mut g,
                    xv,
                    &pv,
                    &cfg,
                    ForwardOptions::default(),
                    false,
                )
                .unwrap();
                let l: Vec<usize> = tr.locals.iter().map(|&v| g.value(v).byte_len()).collect();
                prop_assert!(l.iter().all(|&b| b == l[0]));
                seen.push((g.value(tr.globals[0]).byte_len(), l[0]));
            }
            prop_assert!(seen.iter().all(|&s| s == seen[0]));
            prop_assert_eq!(seen[0].0, cfg.global_slots * cfg.d_model * 8);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;

    Ok(format!(
        "{} properties x 100 cases: {}",
        passed.len(),
        passed.join(", ")
    ))
}

// 6. Linear scaling.
fn linear_scaling() -> Outcome {
    let cfg = analysis::probe_config();
    let s = cfg.segment_len;
    let rows = analysis::scaling_probe(&cfg, &[2 * s, 4 * s, 8 * s, 16 * s], 0)
        .map_err(|e| e.to_string())?;
    let ratios = analysis::ratios(&rows);
    for (i, r) in ratios.iter().enumerate() {
        check((1.98..=2.02).contains(r), || {
            format!("T={} -> 2T ratio {r:.4}", rows[i].t)
        })?;
    }
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    Ok(format!("S={s}, T in 2S..16S, ratios {}", shown.join(" ")))
}

fn abc_corpus() -> Vec<usize> {
    vocab::encode(&b"abc".repeat(400))
}

// 7. Toy training.
fn toy_training() -> Outcome {
    let cfg = HostConfig::micro();
    let corpus = abc_corpus();
    let (_, a) = host::train(&cfg, &corpus, 500).map_err(|e| e.to_string())?;
    let (_, b) = host::train(&cfg, &corpus, 500).map_err(|e| e.to_string())?;
    check(a == b, || {
        "loss traces differ between identical runs".into()
    })?;
    let losses: Vec<f64> = a.iter().map(|s| s.loss).collect();
    let last = *losses.last().ok_or("empty trace")?;
    check(last < 0.1, || format!("final loss {last:.4}"))?;
    let ma = host::moving_average(&losses, 20);
    if let Some(i) = ma.windows(2).position(|w| w[1] > w[0]) {
        return Err(format!(
            "moving average rises at step {}: {} -> {}",
            i + 20,
            ma[i],
            ma[i + 1]
        ));
    }
    Ok(format!(
        "final loss {last:.2e}, 20-step average non-increasing, two runs identical"
    ))
}

// 8. Attention mass.
fn attention_mass() -> Outcome {
    let mut parts = Vec::new();
    for (s, expect) in [(1024usize, 4.0 / 1036.0), (2048, 4.0 / 2060.0)] {
        let cfg = HiCIConfig {
            segment_len: s,
            local_slots: 8,
            global_slots: 4,
            causal_segment_mask: false,
            ..HiCIConfig::micro()
        };
        let mut r = rng::generator(s as u64);
        let p = HiCIParams::init(&cfg, &mut r).map_err(|e| e.to_string())?;
        let x = rng::uniform_from(&[s, cfg.d_model], 1.0, &mut r);
        let recs = hici::collect_attn_mass(
            &x,
            &p,
            &cfg,
            ForwardOptions {
                uniform_probe: true,
            },
        )
        .map_err(|e| e.to_string())?;
        for rec in &recs {
            check((rec.frac_global - expect).abs() <= 1e-12, || {
                format!(
                    "S={s} head {} frac_global {} vs {expect}",
                    rec.head, rec.frac_global
                )
            })?;
        }
        parts.push(format!(
            "S={s} frac_global {:.4}%",
            100.0 * recs[0].frac_global
        ));
    }

    let cfg = HostConfig {
        n_layers: 2,
        ..HostConfig::micro()
    };
    let corpus = abc_corpus();
    let (state, _) = host::train(&cfg, &corpus, 200).map_err(|e| e.to_string())?;
    let model = HostModel {
        config: cfg,
        params: state.params,
    };
    let recs = model
        .attention_mass(&corpus[..cfg.max_len], ForwardOptions::default())
        .map_err(|e| e.to_string())?;
    check(recs.len() == cfg.n_layers * cfg.hici.heads, || {
        "missing (layer, head) records".into()
    })?;
    let worst = recs
        .iter()
        .map(|r| (r.total() - 1.0).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-9, || format!("fractions sum off by {worst:e}"))?;
    parts.push(format!(
        "trained model {} records sum to 1 within {worst:.1e}",
        recs.len()
    ));
    Ok(parts.join("; "))
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("parameter table", Duration::from_secs(1), parameter_table),
        ("FLOPs table", Duration::from_secs(1), flops_table),
        ("gradient check", Duration::from_secs(120), gradients),
        ("oracle equivalence", Duration::from_secs(30), oracle),
        (
            "structural invariants",
            Duration::from_secs(300),
            invariants,
        ),
        ("linear scaling", Duration::from_secs(120), linear_scaling),
        ("toy training", Duration::from_secs(600), toy_training),
        ("attention mass", Duration::from_secs(60), attention_mass),
    ];
    // Written straight to stdout so the lines show without --nocapture.
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > *budget => Err(format!("{detail} (over budget {budget:?})")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        writeln!(
            out,
            "[{tag}] {}. {name}: {detail} ({:.2}s)",
            i + 1,
            took.as_secs_f64()
        )
        .unwrap();
        if result.is_err() {
            failed.push(i + 1);
        }
    }
    out.flush().unwrap();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}

//! Plain-text, CSV and compact renderings of results.

use std::fmt::Write;

use hici_core::analysis::{CostBreakdown, Method, ParamBreakdown, ScalingRow};
use hici_core::hici::{AttnMassRecord, HiCIConfig};
use hici_core::host::StepLog;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    /// Aligned columns.
    #[default]
    Text,
    Csv,
    /// Counts rounded to K/M/B and FLOPs to one decimal.
    Compact,
}

/// Pads columns to a common width; numeric columns are right-aligned.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    // Numeric columns are right-aligned; the header row is skipped when deciding.
    let numeric: Vec<bool> = (0..cols)
        .map(|c| {
            let mut body = rows
                .iter()
                .skip(1)
                .filter_map(|r| r.get(c))
                .filter(|s| !s.is_empty());
            body.clone().next().is_some() && body.all(|s| looks_numeric(s))
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if numeric[c] {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn looks_numeric(s: &str) -> bool {
    if s.chars().all(|c| c == '-') {
        return true;
    }
    let s = s.strip_prefix('-').unwrap_or(s);
    s.starts_with(|c: char| c.is_ascii_digit())
}

fn csv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join(",") + "\n").collect()
}

/// `32.8K`, `8.4M`, `6.74B`.
pub fn human(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.2}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

fn millions(n: u64) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

pub fn params_table(b: &ParamBreakdown, model: &str, cfg: &HiCIConfig, format: Format) -> String {
    let l = b.n_layers;
    let items: [(&str, &str, u64); 6] = [
        ("local", "slots", b.slots),
        ("local", "cross_attention", b.local_attention),
        ("global", "shared_compression", b.compression),
        ("global", "global_queries", b.global_queries),
        ("global", "lightweight_attention", b.global_attention),
        ("global", "expansion", b.expansion),
    ];
    match format {
        Format::Csv => {
            let mut rows = vec![vec![
                "module".into(),
                "component".into(),
                "per_layer".into(),
                "total".into(),
            ]];
            for (m, c, n) in items {
                rows.push(vec![m.into(), c.into(), n.to_string(), (n * l).to_string()]);
            }
            for (m, n) in [
                ("local", b.local_subtotal()),
                ("global", b.global_subtotal()),
            ] {
                rows.push(vec![
                    m.into(),
                    "subtotal".into(),
                    n.to_string(),
                    (n * l).to_string(),
                ]);
            }
            rows.push(vec![
                "hici".into(),
                "total".into(),
                b.per_layer().to_string(),
                b.total().to_string(),
            ]);
            rows.push(vec![
                "base".into(),
                model.into(),
                String::new(),
                b.base_params.to_string(),
            ]);
            rows.push(vec![
                "overhead".into(),
                "fraction".into(),
                String::new(),
                format!("{:.6}", b.overhead()),
            ]);
            rows.push(vec![
                "broadcast".into(),
                "qkv_per_layer".into(),
                b.broadcast.to_string(),
                (b.broadcast * l).to_string(),
            ]);
            csv(&rows)
        }
        Format::Text | Format::Compact => {
            let compact = format == Format::Compact;
            let count = |n: u64| if compact { human(n) } else { n.to_string() };
            let total = |n: u64| if compact { millions(n) } else { n.to_string() };
            let labels = [
                format!("Memory slots (M={})", cfg.local_slots),
                "Cross-attention (Q/K/V/O)".into(),
                format!("Shared compression (d_s={})", cfg.d_compress),
                format!("Global queries (K={})", cfg.global_slots),
                "Lightweight attention (Q/K/V/O)".into(),
                "Expansion layer".into(),
            ];
            let mut rows = vec![vec![
                "Module".into(),
                "Component".into(),
                "Per Layer".into(),
                format!("Total ({l}L)"),
            ]];
            for (i, (_, _, n)) in items.iter().enumerate() {
                let module = match i {
                    0 => "Local Construction",
                    2 => "Global Integration",
                    _ => "",
                };
                rows.push(vec![
                    module.into(),
                    labels[i].clone(),
                    count(*n),
                    total(n * l),
                ]);
                if i == 1 {
                    let s = b.local_subtotal();
                    rows.push(vec![
                        String::new(),
                        "Subtotal".into(),
                        count(s),
                        total(s * l),
                    ]);
                }
            }
            let s = b.global_subtotal();
            rows.push(vec![
                String::new(),
                "Subtotal".into(),
                count(s),
                total(s * l),
            ]);
            rows.push(vec![
                "HiCI Total".into(),
                String::new(),
                count(b.per_layer()),
                total(b.total()),
            ]);
            rows.push(vec![
                format!("Base Model ({model})"),
                String::new(),
                "---".into(),
                if compact {
                    human(b.base_params)
                } else {
                    b.base_params.to_string()
                },
            ]);
            rows.push(vec![
                "Parameter Overhead".into(),
                String::new(),
                "---".into(),
                format!("{:.2}%", 100.0 * b.overhead()),
            ]);
            if !compact {
                rows.push(vec![
                    "Broadcast Q/K/V (host projections, not counted)".into(),
                    String::new(),
                    b.broadcast.to_string(),
                    (b.broadcast * l).to_string(),
                ]);
            }
            align(&rows)
        }
    }
}

fn tf(x: u64) -> f64 {
    x as f64 / 1e12
}

fn context_label(t: usize) -> String {
    match t {
        102400 => "100K".into(),
        t if t % 1024 == 0 => format!("{}K", t / 1024),
        t => t.to_string(),
    }
}

/// One block of three rows (full, segmented, HiCI) per context, in TFLOPs.
pub fn flops_table(rows: &[CostBreakdown], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut out = vec![[
                "context", "method", "attn", "proj", "ffn", "others", "lc_gi", "total",
            ]
            .map(String::from)
            .to_vec()];
            for c in rows {
                out.push(vec![
                    c.context.to_string(),
                    format!("{:?}", c.method).to_lowercase(),
                    c.attn.to_string(),
                    c.proj.to_string(),
                    c.ffn.to_string(),
                    c.others.to_string(),
                    c.lc_gi.to_string(),
                    c.total().to_string(),
                ]);
            }
            csv(&out)
        }
        Format::Text => {
            let mut out = vec![[
                "Context", "Method", "Attn", "Proj", "FFN", "Others", "LC+GI", "Total",
            ]
            .map(String::from)
            .to_vec()];
            for c in rows {
                out.push(vec![
                    c.context.to_string(),
                    c.method.label().into(),
                    format!("{:.3}", tf(c.attn)),
                    format!("{:.3}", tf(c.proj)),
                    format!("{:.3}", tf(c.ffn)),
                    format!("{:.3}", tf(c.others)),
                    format!("{:.3}", tf(c.lc_gi)),
                    format!("{:.3}", tf(c.total())),
                ]);
            }
            align(&out) + "(TFLOPs, forward pass, batch 1)\n"
        }
        Format::Compact => {
            let mut out = vec![[
                "Context", "Method", "Attn", "Proj", "FFN", "Others", "LC+GI", "Total",
            ]
            .map(String::from)
            .to_vec()];
            let one = |x: u64| format!("{:.1}", tf(x));
            for c in rows {
                let first = c.method == Method::Full;
                let shared = c.method == Method::Segmented;
                let blank = String::new;
                out.push(vec![
                    if first {
                        context_label(c.context)
                    } else {
                        blank()
                    },
                    c.method.label().into(),
                    one(c.attn),
                    if shared { one(c.proj) } else { blank() },
                    if shared { one(c.ffn) } else { blank() },
                    if shared { one(c.others) } else { blank() },
                    if c.method == Method::Hici {
                        one(c.lc_gi)
                    } else {
                        "---".into()
                    },
                    one(c.total()),
                ]);
            }
            align(&out)
        }
    }
}

pub fn mass_csv(records: &[AttnMassRecord]) -> String {
    let mut out = String::from("layer,head,frac_global,frac_local,frac_segment\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e}",
            r.layer, r.head, r.frac_global, r.frac_local, r.frac_segment
        );
    }
    out
}

pub fn loss_trace(logs: &[StepLog]) -> String {
    let mut out = String::from("step,loss,lr_backbone,lr_hici\n");
    for s in logs {
        let _ = writeln!(
            out,
            "{},{:.17e},{:e},{:e}",
            s.step, s.loss, s.lr_backbone, s.lr_hici
        );
    }
    out
}

pub fn scaling_table(rows: &[ScalingRow], d: usize, format: Format) -> String {
    let mut out = vec![[
        "T",
        "counted_flops",
        "analytic_flops",
        "ratio_to_prev",
        "global_bytes",
    ]
    .map(String::from)
    .to_vec()];
    for (i, r) in rows.iter().enumerate() {
        let ratio = if i == 0 {
            String::from("-")
        } else {
            format!(
                "{:.4}",
                r.counted_matmul() as f64 / rows[i - 1].counted_matmul() as f64
            )
        };
        out.push(vec![
            r.t.to_string(),
            r.counted_matmul().to_string(),
            r.analytic.total().to_string(),
            ratio,
            r.global_bytes(d).to_string(),
        ]);
    }
    match format {
        Format::Csv => csv(&out),
        _ => align(&out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn human_units() {
        assert_eq!(human(32_768), "32.8K");
        assert_eq!(human(8_421_376), "8.4M");
        assert_eq!(human(6_738_415_616), "6.74B");
        assert_eq!(human(12), "12");
    }

    #[test]
    fn align_pads_columns() {
        let rows = [["name", "n"], ["a", "1"], ["bbb", "22"]].map(|r| r.map(String::from).to_vec());
        assert_eq!(align(&rows), "name   n\na      1\nbbb   22\n");
    }

    #[test]
    fn context_labels() {
        assert_eq!(context_label(8192), "8K");
        assert_eq!(context_label(102400), "100K");
        assert_eq!(context_label(100), "100");
    }
}

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::log_sum_exp_rows;
use crate::params::bind_const;

use super::model::{check_window, lm_forward, AttentionMode, HostForward, HostModel};

/// Inputs `tokens[start..start + len]` predict `tokens[start + 1..]`; only
/// predictions at positions `score_from..len` are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub score_from: usize,
}

/// Sliding windows over `n` tokens. The first window scores everything,
/// later ones advance by `stride` and score only new targets, so every
/// target `1..n` is counted exactly once. A final window is right-aligned
/// when the stride does not divide the remainder.
pub fn plan_windows(n: usize, eval_len: usize, stride: usize) -> Result<Vec<Window>> {
    if stride == 0 || stride > eval_len {
        return Err(Error::Config(alloc::format!(
            "stride = {stride} must be in 1..={eval_len}"
        )));
    }
    if n < eval_len + 1 {
        return Err(Error::TooShort {
            needed: eval_len + 1,
            got: n,
        });
    }
    let mut out = Vec::from([Window {
        start: 0,
        score_from: 0,
    }]);
    // Last scored target index (exclusive end, in target coordinates).
    let mut covered = eval_len;
    let last_start = n - 1 - eval_len;
    let mut start = 0;
    while covered < n - 1 {
        start = (start + stride).min(last_start);
        let end = start + eval_len;
        out.push(Window {
            start,
            score_from: eval_len - (end - covered),
        });
        covered = end;
    }
    Ok(out)
}

/// Summed negative log-likelihood and the number of scored targets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Perplexity {
    pub nll_sum: f64,
    pub tokens: usize,
    pub windows: usize,
    pub skipped_docs: usize,
}

impl Perplexity {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn ppl(&self) -> f64 {
        libm::exp(self.mean_nll())
    }
}

/// NLL of each window in `windows`, computed in one graph.
pub fn window_nlls(
    model: &HostModel,
    tokens: &[usize],
    eval_len: usize,
    windows: &[Window],
    mode: AttentionMode,
) -> Result<Vec<(f64, usize)>> {
    let mut g = Graph::new();
    let p = model.params.map("", &mut bind_const(&mut g));
    let opts = HostForward {
        mode,
        ..HostForward::default()
    };
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let ids = &tokens[w.start..w.start + eval_len];
        let logits = lm_forward(&mut g, ids, &p, &model.config, opts, None)?;
        let logits = g.value(logits);
        let lse = log_sum_exp_rows(logits);
        let mut nll = 0.0;
        for i in w.score_from..eval_len {
            nll += lse[i] - logits.at(i, tokens[w.start + i + 1]);
        }
        out.push((nll, eval_len - w.score_from));
    }
    Ok(out)
}

/// Sliding-window perplexity over `docs`, evaluating `batch` windows per
/// graph. Documents shorter than `eval_len + 1` tokens are skipped.
pub fn eval_ppl_batched(
    model: &HostModel,
    docs: &[&[usize]],
    eval_len: usize,
    stride: usize,
    mode: AttentionMode,
    batch: usize,
) -> Result<Perplexity> {
    let probe: Vec<usize> = (0..eval_len).map(|_| 0).collect();
    check_window(&model.config, &probe)?;
    let mut acc = Perplexity::default();
    for doc in docs {
        if doc.len() < eval_len + 1 {
            acc.skipped_docs += 1;
            continue;
        }
        let plan = plan_windows(doc.len(), eval_len, stride)?;
        for chunk in plan.chunks(batch.max(1)) {
            for (nll, n) in window_nlls(model, doc, eval_len, chunk, mode)? {
                acc.nll_sum += nll;
                acc.tokens += n;
            }
        }
        acc.windows += plan.len();
    }
    if acc.tokens == 0 {
        let longest = docs.iter().map(|d| d.len()).max().unwrap_or(0);
        return Err(Error::TooShort {
            needed: eval_len + 1,
            got: longest,
        });
    }
    Ok(acc)
}

pub fn eval_ppl(
    model: &HostModel,
    tokens: &[usize],
    eval_len: usize,
    stride: usize,
    mode: AttentionMode,
) -> Result<Perplexity> {
    eval_ppl_batched(model, &[tokens], eval_len, stride, mode, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(n: usize, t: usize, s: usize) -> Vec<usize> {
        let mut hits = vec![0; n];
        for w in plan_windows(n, t, s).unwrap() {
            for i in w.score_from..t {
                hits[w.start + i + 1] += 1;
            }
        }
        hits
    }

    #[test]
    fn every_target_scored_once() {
        for (n, t, s) in [(9, 8, 8), (33, 8, 8), (40, 8, 3), (100, 16, 5), (17, 8, 1)] {
            let hits = scored(n, t, s);
            assert_eq!(hits[0], 0);
            assert!(hits[1..].iter().all(|&h| h == 1), "{n} {t} {s}: {hits:?}");
        }
    }

    #[test]
    fn full_stride_is_disjoint_chunks() {
        let plan = plan_windows(25, 8, 8).unwrap();
        let starts: Vec<usize> = plan.iter().map(|w| w.start).collect();
        assert_eq!(starts, [0, 8, 16]);
        assert!(plan.iter().all(|w| w.score_from == 0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(plan_windows(8, 8, 4), Err(Error::TooShort { .. })));
        assert!(plan_windows(20, 8, 0).is_err());
        assert!(plan_windows(20, 8, 9).is_err());
    }
}

//! Forward kernels on plain tensors.
//!
//! These are the numeric primitives every stage is built from. The graph in
//! [`crate::graph`] calls the same kernels for its forward values and adds the
//! matching vector-Jacobian products. Reductions run in a fixed sequential
//! order, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Which key columns a query row may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Every column is visible.
    None,
    /// The first `prefix` columns are visible to every row; column
    /// `prefix + j` is visible to row `r` only when `j <= r`.
    CausalAfter { prefix: usize },
}

impl Mask {
    #[inline]
    pub fn visible(&self, row: usize, col: usize) -> bool {
        match *self {
            Mask::None => true,
            Mask::CausalAfter { prefix } => col < prefix || col - prefix <= row,
        }
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() > 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_nt", a)?;
    check_matrix("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_tn", a)?;
    check_matrix("matmul_tn", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::new(&[n, m], out).expect("transpose preserves size")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    softmax_rows_masked(a, Mask::None)
}

/// Row-wise softmax over visible columns; hidden columns get probability 0.
pub fn softmax_rows_masked(a: &Tensor, mask: Mask) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = a.row(r);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if mask.visible(r, c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if mask.visible(r, c) {
                let e = math::exp(v - max);
                orow[c] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(a.shape(), out).expect("softmax preserves shape")
}

/// Per-row normalisation used by [`layer_norm`]: returns `(x̂, 1/√(var+eps))`.
pub(crate) fn normalize_rows(a: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (m, n) = (a.rows(), a.cols());
    let mut xhat = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for r in 0..m {
        let row = a.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / math::sqrt(var + eps);
        inv_std[r] = is;
        for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (Tensor::new(a.shape(), xhat).expect("same shape"), inv_std)
}

/// `(x − mean) / √(var + eps) · gain + bias` per row, population variance.
pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let n = a.cols();
    if n == 0 {
        return Err(Error::Empty("layer_norm"));
    }
    for p in [gain, bias] {
        if p.len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: a.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let (mut out, _) = normalize_rows(a, eps);
    let (g, b) = (gain.data(), bias.data());
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * g[c] + b[c];
        }
    }
    Ok(out)
}

/// Column statistics over the rows of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: Tensor,
    pub max: Tensor,
    pub min: Tensor,
    /// Population standard deviation (divisor = row count).
    pub std: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stat {
    Mean,
    Max,
    Min,
    Std,
}

/// One column statistic as a length-`d` vector. `Max`/`Min` also return the
/// row index that attained it (first occurrence).
pub(crate) fn column_stat(a: &Tensor, stat: Stat) -> (Tensor, Vec<usize>) {
    let (r, d) = (a.rows(), a.cols());
    let mut out = vec![0.0; d];
    let mut arg = vec![
        0usize;
        if matches!(stat, Stat::Max | Stat::Min) {
            d
        } else {
            0
        }
    ];
    match stat {
        Stat::Mean | Stat::Std => {
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(a.row(i)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= r as f64;
            }
            if stat == Stat::Std {
                let mean = out.clone();
                let mut acc = vec![0.0; d];
                for i in 0..r {
                    for ((s, v), m) in acc.iter_mut().zip(a.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                for (o, s) in out.iter_mut().zip(acc) {
                    *o = math::sqrt(s / r as f64);
                }
            }
        }
        Stat::Max | Stat::Min => {
            out.copy_from_slice(a.row(0));
            for i in 1..r {
                for (c, &v) in a.row(i).iter().enumerate() {
                    let better = if stat == Stat::Max {
                        v > out[c]
                    } else {
                        v < out[c]
                    };
                    if better {
                        out[c] = v;
                        arg[c] = i;
                    }
                }
            }
        }
    }
    (Tensor::new(&[d], out).expect("length d"), arg)
}

/// Mean, max, min and population standard deviation of each column.
pub fn reduce_stats(a: &Tensor) -> Result<ColumnStats> {
    if a.rows() == 0 {
        return Err(Error::Empty("reduce_stats"));
    }
    Ok(ColumnStats {
        mean: column_stat(a, Stat::Mean).0,
        max: column_stat(a, Stat::Max).0,
        min: column_stat(a, Stat::Min).0,
        std: column_stat(a, Stat::Std).0,
    })
}

/// Default guard for [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// `v / max(‖v‖₂, eps)`, applied to each row.
pub fn l2_normalize(v: &Tensor, eps: f64) -> Tensor {
    let mut out = v.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = math::sqrt(row.iter().map(|x| x * x).sum());
        let denom = if norm >= eps { norm } else { eps };
        for x in row.iter_mut() {
            *x /= denom;
        }
    }
    out
}

/// `ln(1 + eˣ)` in the overflow-free form `max(x, 0) + ln(1 + e^(−|x|))`.
/// Floored at the smallest positive normal so the result stays positive
/// where `eˣ` underflows (`x < −708`).
pub fn softplus(x: f64) -> f64 {
    (x.max(0.0) + math::ln_1p(math::exp(-math::abs(x)))).max(f64::MIN_POSITIVE)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `log Σ exp(row)` per row.
pub(crate) fn log_sum_exp_rows(a: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let row = a.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let b = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let p = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(
            matmul(&p, &b).unwrap(),
            Tensor::from_rows(&[[5.0, 6.0], [0.0, 0.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = (random(3, 4, 1), random(4, 2, 2));
        let diff = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&triple_loop(&a, &b))
            .unwrap();
        assert!(diff <= 1e-15, "{diff}");
        let (a, b) = (random(8, 8, 3), random(8, 8, 4));
        let diff = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&triple_loop(&a, &b))
            .unwrap();
        assert!(diff <= 1e-13, "{diff}");
    }

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let (a, b) = (random(3, 5, 5), random(4, 5, 6));
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(
            nt.max_abs_diff(&matmul(&a, &transpose(&b)).unwrap())
                .unwrap()
                < 1e-15
        );
        let (a, b) = (random(5, 3, 7), random(5, 2, 8));
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(
            tn.max_abs_diff(&matmul(&transpose(&a), &b).unwrap())
                .unwrap()
                < 1e-15
        );
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 1000.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, math::ln(3.0)]]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_hidden_columns() {
        let s = softmax_rows_masked(&Tensor::zeros(&[2, 4]), Mask::CausalAfter { prefix: 2 });
        assert_eq!(s.row(0), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(s.row(1), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::ones(&[3]);
        let zero = Tensor::zeros(&[3]);
        let out = layer_norm(&Tensor::from_rows(&[[1.0, 1.0, 1.0]]), &one, &zero, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);

        let (g, b) = (Tensor::ones(&[2]), Tensor::zeros(&[2]));
        let out = layer_norm(&Tensor::from_rows(&[[-1.0, 1.0]]), &g, &b, 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let (g, b) = (Tensor::full(&[2], 2.0), Tensor::ones(&[2]));
        let out = layer_norm(&Tensor::from_rows(&[[0.0, 2.0]]), &g, &b, 1e-12).unwrap();
        assert!(
            out.max_abs_diff(&Tensor::from_rows(&[[-1.0, 3.0]]))
                .unwrap()
                < 1e-10
        );
    }

    #[test]
    fn reduce_stats_examples() {
        let s = reduce_stats(&Tensor::from_rows(&[[1.0, 3.0], [3.0, 1.0]])).unwrap();
        assert_eq!(s.mean.data(), &[2.0, 2.0]);
        assert_eq!(s.max.data(), &[3.0, 3.0]);
        assert_eq!(s.min.data(), &[1.0, 1.0]);
        assert_eq!(s.std.data(), &[1.0, 1.0]);

        let s = reduce_stats(&Tensor::from_rows(&[[5.0, 7.0]])).unwrap();
        for t in [&s.mean, &s.max, &s.min] {
            assert_eq!(t.data(), &[5.0, 7.0]);
        }
        assert_eq!(s.std.data(), &[0.0, 0.0]);
        assert_eq!(
            reduce_stats(&Tensor::zeros(&[0, 2])),
            Err(Error::Empty("reduce_stats"))
        );
    }

    #[test]
    fn reduce_stats_matches_two_pass_oracle() {
        let a = random(100, 7, 11);
        let s = reduce_stats(&a).unwrap();
        for c in 0..7 {
            let col: Vec<f64> = (0..100).map(|r| a.at(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            let max = col.iter().copied().fold(f64::MIN, f64::max);
            let min = col.iter().copied().fold(f64::MAX, f64::min);
            assert!((s.mean.data()[c] - mean).abs() <= 1e-12);
            assert!((s.std.data()[c] - var.sqrt()).abs() <= 1e-12);
            assert_eq!(s.max.data()[c], max);
            assert_eq!(s.min.data()[c], min);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let v = l2_normalize(&Tensor::vector(&[3.0, 4.0]), L2_EPS);
        assert!(v.max_abs_diff(&Tensor::vector(&[0.6, 0.8])).unwrap() < 1e-15);
        let z = l2_normalize(&Tensor::vector(&[0.0, 0.0]), L2_EPS);
        assert_eq!(z.data(), &[0.0, 0.0]);
        let u = Tensor::vector(&[0.0, 1.0, 0.0]);
        assert!(l2_normalize(&u, L2_EPS).max_abs_diff(&u).unwrap() <= 1e-15);
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let small = softplus(-100.0);
        assert!(((small - (-100f64).exp()) / (-100f64).exp()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let s = softmax_rows(&Tensor::new(&[3, 4], data).unwrap());
            for r in 0..3 {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn layer_norm_standardises(data in proptest::collection::vec(-10.0f64..10.0, 2..16)) {
            let n = data.len();
            prop_assume!(data.iter().any(|&v| (v - data[0]).abs() > 1e-3));
            let a = Tensor::new(&[1, n], data).unwrap();
            let out = layer_norm(&a, &Tensor::ones(&[n]), &Tensor::zeros(&[n]), 0.0).unwrap();
            let mean = out.sum() / n as f64;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-12);
            prop_assert!((var - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn softplus_is_positive(x in -700.0f64..700.0) {
            prop_assert!(softplus(x) > 0.0);
        }
    }
}

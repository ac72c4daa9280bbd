//! Central-difference gradient oracle and gradient reports.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Default central-difference step for 64-bit gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between reverse-mode and central
/// differences.
pub const FD_TOLERANCE: f64 = 1e-6;

/// `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every coordinate of `p`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error on mismatched shapes");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        crate::math::sqrt(diff) / scale
    }
}

/// Relative error of each parameter tensor's gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    /// Largest error; a NaN entry counts as infinite.
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, e)| if e.is_nan() { f64::INFINITY } else { *e })
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(core::cmp::Ordering::Equal))
    }

    pub fn extend(&mut self, prefix: &str, other: GradReport) {
        for (n, e) in other.entries {
            self.entries.push((crate::params::join(prefix, &n), e));
        }
    }
}

/// Compares reverse-mode gradients with central differences for every
/// tensor of `params`.
///
/// `loss(g, p, trainable)` must bind `p` into `g` (as parameters when
/// `trainable`, as constants otherwise) and return the scalar loss together
/// with the bound leaves in [`ParamTree`] visit order.
pub fn gradient_report<P: ParamTree>(
    params: &P,
    h: f64,
    loss: impl Fn(&mut Graph, &P, bool) -> Result<(Var, Vec<Var>)>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let (l, vars) = loss(&mut g, params, true)?;
    g.backward(l)?;
    let named = params.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    for (i, (name, tensor)) in named.iter().enumerate() {
        let analytic = g.grad(vars[i]);
        let mut failure = None;
        let numeric = finite_diff_grad(
            |t| {
                let mut probe = params.clone();
                let mut j = 0;
                probe.visit_tensors_mut(&mut |_, slot| {
                    if j == i {
                        *slot = t.clone();
                    }
                    j += 1;
                });
                let mut g = Graph::new();
                match loss(&mut g, &probe, false) {
                    Ok((l, _)) => g.value(l).data()[0],
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            tensor,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        entries.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(GradReport { entries })
}

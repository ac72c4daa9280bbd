//! Attention-mass statistics of the broadcast stage.
//!
//! For each head, the probability mass every query puts on the `K` global
//! positions, the `M` local positions and the `S` segment positions is summed
//! and then averaged over all queries and segments.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Fractions of broadcast attention mass for one `(layer, head)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnMassRecord {
    pub layer: usize,
    pub head: usize,
    pub frac_global: f64,
    pub frac_local: f64,
    pub frac_segment: f64,
}

impl AttnMassRecord {
    pub fn total(&self) -> f64 {
        self.frac_global + self.frac_local + self.frac_segment
    }
}

/// Running per-head sums.
#[derive(Clone, Debug, PartialEq)]
pub struct MassTally {
    global: Vec<f64>,
    local: Vec<f64>,
    segment: Vec<f64>,
    queries: Vec<f64>,
}

impl MassTally {
    pub fn new(heads: usize) -> Self {
        Self {
            global: vec![0.0; heads],
            local: vec![0.0; heads],
            segment: vec![0.0; heads],
            queries: vec![0.0; heads],
        }
    }

    pub fn heads(&self) -> usize {
        self.global.len()
    }

    /// Adds one head's `S × (K + M + S)` probability matrix.
    pub fn add(&mut self, head: usize, probs: &Tensor, global: usize, local: usize) {
        for r in 0..probs.rows() {
            let row = probs.row(r);
            self.global[head] += row[..global].iter().sum::<f64>();
            self.local[head] += row[global..global + local].iter().sum::<f64>();
            self.segment[head] += row[global + local..].iter().sum::<f64>();
        }
        self.queries[head] += probs.rows() as f64;
    }

    pub fn merge(&mut self, other: &MassTally) {
        for h in 0..self.heads() {
            self.global[h] += other.global[h];
            self.local[h] += other.local[h];
            self.segment[h] += other.segment[h];
            self.queries[h] += other.queries[h];
        }
    }

    pub fn records(&self, layer: usize) -> Vec<AttnMassRecord> {
        (0..self.heads())
            .map(|h| {
                let n = self.queries[h].max(1.0);
                AttnMassRecord {
                    layer,
                    head: h,
                    frac_global: self.global[h] / n,
                    frac_local: self.local[h] / n,
                    frac_segment: self.segment[h] / n,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_split_by_position_counts() {
        let mut t = MassTally::new(1);
        t.add(0, &Tensor::full(&[3, 10], 0.1), 2, 3);
        let r = t.records(4)[0];
        assert_eq!(r.layer, 4);
        assert!((r.frac_global - 0.2).abs() < 1e-15);
        assert!((r.frac_local - 0.3).abs() < 1e-15);
        assert!((r.frac_segment - 0.5).abs() < 1e-15);
    }
}

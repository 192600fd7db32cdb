//! Flat parameter vector with named segments, and the weighted gradient
//! accumulator that Monte Carlo score estimates sum into.

use std::ops::Range;

use crate::error::Error;

/// θ as one flat array of f64, partitioned into named segments (a network's
/// weights, a policy's log-stds, ...). Segment layout is fixed at build time.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    names: Vec<String>,
    spans: Vec<Range<usize>>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn build(segments: &[(&str, usize)]) -> Self {
        let mut names = Vec::with_capacity(segments.len());
        let mut spans = Vec::with_capacity(segments.len());
        let mut off = 0usize;
        for (name, len) in segments {
            assert!(
                !names.iter().any(|n| n == name),
                "duplicate segment name {name}"
            );
            names.push((*name).to_string());
            spans.push(off..off + len);
            off += len;
        }
        ParamVector {
            names,
            spans,
            values: vec![0.0; off],
        }
    }

    pub fn from_parts(names: Vec<String>, lens: &[usize], values: Vec<f64>) -> Result<Self, Error> {
        if names.len() != lens.len() {
            return Err(Error::Shape("segment name/length count mismatch".into()));
        }
        let mut spans = Vec::with_capacity(lens.len());
        let mut off = 0usize;
        for &len in lens {
            spans.push(off..off + len);
            off += len;
        }
        if off != values.len() {
            return Err(Error::Shape(format!(
                "segment lengths sum to {off} but {} values given",
                values.len()
            )));
        }
        Ok(ParamVector {
            names,
            spans,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<Range<usize>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.spans[i].clone())
    }

    pub fn segment_names(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.spans.iter().cloned())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, span: &Range<usize>) -> &[f64] {
        &self.values[span.clone()]
    }

    pub fn slice_mut(&mut self, span: &Range<usize>) -> &mut [f64] {
        &mut self.values[span.clone()]
    }

    /// True when both vectors share segment layout (names and spans).
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.names == other.names && self.spans == other.spans
    }
}

/// Σ weight·grad with the total weight tracked alongside, so expectations
/// over particle clouds can be normalized once at the end.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    pub grads: Vec<f64>,
    pub weight_total: f64,
}

impl GradAccumulator {
    pub fn zeros(len: usize) -> Self {
        GradAccumulator {
            grads: vec![0.0; len],
            weight_total: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.weight_total = 0.0;
    }

    /// acc.grads += weight · grad; acc.weight_total += weight.
    pub fn accumulate_weighted(&mut self, grad: &[f64], weight: f64) {
        assert_eq!(grad.len(), self.grads.len(), "gradient shape mismatch");
        if weight == 0.0 {
            return;
        }
        for (a, g) in self.grads.iter_mut().zip(grad) {
            *a += weight * g;
        }
        self.weight_total += weight;
    }

    /// Merge another accumulator into this one. Commutative up to float
    /// addition order; call in a fixed order for bit reproducibility.
    pub fn merge(&mut self, other: &GradAccumulator) {
        assert_eq!(other.grads.len(), self.grads.len());
        for (a, g) in self.grads.iter_mut().zip(&other.grads) {
            *a += g;
        }
        self.weight_total += other.weight_total;
    }

    /// grads / weight_total, or zeros if nothing was accumulated.
    pub fn normalized(&self) -> Vec<f64> {
        if self.weight_total == 0.0 {
            return vec![0.0; self.grads.len()];
        }
        self.grads.iter().map(|g| g / self.weight_total).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weight_total.is_finite() && self.grads.iter().all(|g| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_partition_exactly() {
        let p = ParamVector::build(&[("net", 10), ("stds", 2)]);
        assert_eq!(p.len(), 12);
        assert_eq!(p.segment("net"), Some(0..10));
        assert_eq!(p.segment("stds"), Some(10..12));
        assert_eq!(p.segment("missing"), None);
    }

    #[test]
    fn accumulate_weighted_contract() {
        let g = vec![1.0, -2.0, 3.0];
        let mut acc = GradAccumulator::zeros(3);

        acc.accumulate_weighted(&g, 0.0);
        assert_eq!(acc.grads, vec![0.0; 3]);
        assert_eq!(acc.weight_total, 0.0);

        acc.accumulate_weighted(&g, 0.5);
        acc.accumulate_weighted(&g, 0.5);
        for (a, b) in acc.grads.iter().zip(&g) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((acc.weight_total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_grads_with_normalized_weights_reproduce_grad() {
        let g = vec![0.25, 4.0];
        let ws = [0.1, 0.2, 0.3, 0.4];
        let mut acc = GradAccumulator::zeros(2);
        for w in ws {
            acc.accumulate_weighted(&g, w);
        }
        let n = acc.normalized();
        for (a, b) in n.iter().zip(&g) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn accumulator_linearity() {
        let g1 = vec![1.0, 2.0];
        let g2 = vec![-3.0, 0.5];
        let (w1, w2) = (0.7, 1.3);
        let mut a = GradAccumulator::zeros(2);
        a.accumulate_weighted(&g1, w1);
        a.accumulate_weighted(&g2, w2);

        let combined: Vec<f64> = g1
            .iter()
            .zip(&g2)
            .map(|(x, y)| w1 * x + w2 * y)
            .collect();
        let mut b = GradAccumulator::zeros(2);
        b.accumulate_weighted(&combined, 1.0);
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

//! Small dense networks with hand-rolled backprop.
//!
//! Parameters live in a flat slice, layer by layer: weight matrix in
//! row-major (out × in) order, then the bias vector. Hidden layers apply
//! one fixed activation; the output layer is linear.
//!
//! The backward pass works from cached post-activations, so a taped
//! network evaluation only stores its input node ids and recomputes the
//! forward pass when the tape is walked back.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::params::ParamVector;
use crate::autodiff::tape::{Tape, Var, VjpOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
}

/// Post-activations per layer; entry 0 is the input itself.
pub struct MlpCache {
    layers: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }
}

impl MlpArch {
    pub fn new(sizes: &[usize], hidden: Activation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layer");
        assert!(sizes.iter().all(|&s| s > 0));
        MlpArch {
            sizes: sizes.to_vec(),
            hidden,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Uniform Glorot weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        assert_eq!(out.len(), self.param_count());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut out[off..off + n_in * n_out] {
                *v = rng.gen_range(-bound..bound);
            }
            off += n_in * n_out;
            out[off..off + n_out].fill(0.0);
            off += n_out;
        }
    }

    pub fn forward(&self, w: &[f64], x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(w.len(), self.param_count());
        debug_assert_eq!(x.len(), self.n_inputs());
        let n_layers = self.sizes.len() - 1;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut off = 0;
        for (l, sz) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (sz[0], sz[1]);
            let bias = &w[off + n_in * n_out..off + n_in * n_out + n_out];
            next.clear();
            for j in 0..n_out {
                let row = &w[off + j * n_in..off + (j + 1) * n_in];
                let mut z = bias[j];
                for i in 0..n_in {
                    z += row[i] * cur[i];
                }
                next.push(if l + 1 < n_layers {
                    self.hidden.apply(z)
                } else {
                    z
                });
            }
            std::mem::swap(&mut cur, &mut next);
            off += n_in * n_out + n_out;
        }
        out.clear();
        out.extend_from_slice(&cur);
    }

    pub fn forward_cached(&self, w: &[f64], x: &[f64]) -> MlpCache {
        debug_assert_eq!(w.len(), self.param_count());
        debug_assert_eq!(x.len(), self.n_inputs());
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(x.to_vec());
        let mut off = 0;
        for (l, sz) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (sz[0], sz[1]);
            let cur = layers.last().unwrap();
            let bias = &w[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &w[off + j * n_in..off + (j + 1) * n_in];
                let mut z = bias[j];
                for i in 0..n_in {
                    z += row[i] * cur[i];
                }
                next.push(if l + 1 < n_layers {
                    self.hidden.apply(z)
                } else {
                    z
                });
            }
            layers.push(next);
            off += n_in * n_out + n_out;
        }
        MlpCache { layers }
    }

    /// Accumulate (+=) parameter gradients into `dw` and input adjoints
    /// into `dx`, given adjoints of the network outputs.
    pub fn backward_from_cache(
        &self,
        w: &[f64],
        cache: &MlpCache,
        out_adj: &[f64],
        dw: &mut [f64],
        dx: &mut [f64],
    ) {
        debug_assert_eq!(dw.len(), self.param_count());
        debug_assert_eq!(out_adj.len(), self.n_outputs());
        debug_assert_eq!(dx.len(), self.n_inputs());
        let n_layers = self.sizes.len() - 1;
        let mut layer_offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for sz in self.sizes.windows(2) {
            layer_offsets.push(off);
            off += sz[0] * sz[1] + sz[1];
        }

        let mut delta = out_adj.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = layer_offsets[l];
            let a_prev = &cache.layers[l];
            let mut delta_prev = vec![0.0; n_in];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row_w = &w[off + j * n_in..off + (j + 1) * n_in];
                let row_dw = &mut dw[off + j * n_in..off + (j + 1) * n_in];
                for i in 0..n_in {
                    row_dw[i] += d * a_prev[i];
                    delta_prev[i] += d * row_w[i];
                }
                dw[off + n_in * n_out + j] += d;
            }
            if l > 0 {
                // Pull back through the previous layer's activation.
                for (dp, &y) in delta_prev.iter_mut().zip(a_prev.iter()) {
                    *dp *= self.hidden.deriv_from_output(y);
                }
                delta = delta_prev;
            } else {
                for (x, dp) in dx.iter_mut().zip(&delta_prev) {
                    *x += dp;
                }
            }
        }
    }
}

/// Checkpointed network evaluation: stores input node ids only, recomputes
/// forward and backprops on demand.
struct MlpOp {
    arch: Arc<MlpArch>,
    seg: Range<usize>,
    inputs: Vec<u32>,
}

impl VjpOp for MlpOp {
    fn n_outputs(&self) -> usize {
        self.arch.n_outputs()
    }

    fn backward(
        &self,
        vals: &[f64],
        params: &ParamVector,
        out_adj: &[f64],
        input_adj: &mut dyn FnMut(u32, f64),
        param_grad: &mut [f64],
    ) {
        let w = &params.values()[self.seg.clone()];
        let x: Vec<f64> = self.inputs.iter().map(|&i| vals[i as usize]).collect();
        let cache = self.arch.forward_cached(w, &x);
        let mut dx = vec![0.0; x.len()];
        self.arch
            .backward_from_cache(w, &cache, out_adj, &mut param_grad[self.seg.clone()], &mut dx);
        for (&node, &d) in self.inputs.iter().zip(&dx) {
            if d != 0.0 {
                input_adj(node, d);
            }
        }
    }
}

/// Record a network evaluation on the tape as a single checkpoint node.
/// `seg` names the parameter segment holding this network's weights.
pub fn record_mlp(
    tape: &mut Tape,
    arch: &Arc<MlpArch>,
    params: &ParamVector,
    seg: &str,
    inputs: &[Var],
) -> Vec<Var> {
    let range = params
        .segment(seg)
        .unwrap_or_else(|| panic!("no parameter segment named {seg:?}"));
    assert_eq!(range.len(), arch.param_count());
    assert_eq!(inputs.len(), arch.n_inputs());
    let x: Vec<f64> = inputs.iter().map(|&v| tape.val(v)).collect();
    let mut out = Vec::new();
    arch.forward(&params.values()[range.clone()], &x, &mut out);
    tape.record_op(
        Box::new(MlpOp {
            arch: arch.clone(),
            seg: range,
            inputs: inputs.iter().map(|v| v.0).collect(),
        }),
        &out,
    )
}

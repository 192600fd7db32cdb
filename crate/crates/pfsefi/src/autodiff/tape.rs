//! Scalar reverse-mode tape.
//!
//! Elementary nodes store their local partials eagerly at record time, so
//! the backward pass is a single reverse sweep with no op dispatch beyond
//! the node kind. Heavier building blocks (network evaluations, observation
//! log-likelihoods) are recorded as single checkpoint nodes implementing
//! [`VjpOp`]: they keep only their input node ids and recompute internals
//! during backward, which keeps tape memory per particle-step constant.
//!
//! Parameters enter either as individual `param_leaf` nodes (cheap for a
//! handful of scalars) or through a `VjpOp` that writes straight into the
//! flat gradient buffer (networks).

use std::collections::HashMap;

use crate::autodiff::params::{GradAccumulator, ParamVector};
use crate::error::Error;
use crate::numerics;

/// Handle to a tape node. Valid only for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

enum Node {
    Leaf,
    ParamLeaf { idx: u32 },
    Unary { p: u32, d: f64 },
    Binary { p0: u32, d0: f64, p1: u32, d1: f64 },
    Nary { lo: u32, hi: u32 },
    VjpOut { op: u32, first: u32 },
}

/// A checkpointed operation: multiple scalar outputs, arbitrary inputs,
/// gradients recomputed on demand during the backward sweep.
pub trait VjpOp: Send + Sync {
    fn n_outputs(&self) -> usize;
    /// `out_adj` are the adjoints of this op's outputs in order. Push input
    /// adjoints through `input_adj(node_index, value)` and parameter
    /// gradients directly into `param_grad` (full flat layout).
    fn backward(
        &self,
        vals: &[f64],
        params: &ParamVector,
        out_adj: &[f64],
        input_adj: &mut dyn FnMut(u32, f64),
        param_grad: &mut [f64],
    );
}

pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    edges: Vec<(u32, f64)>,
    ops: Vec<Box<dyn VjpOp>>,
    param_cache: HashMap<u32, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            edges: Vec::new(),
            ops: Vec::new(),
            param_cache: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    fn push(&mut self, node: Node, val: f64) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.vals.push(val);
        Var(id)
    }

    /// A value with no gradient history (constants, stop-gradients).
    pub fn constant(&mut self, v: f64) -> Var {
        self.push(Node::Leaf, v)
    }

    /// An input leaf; its adjoint is discarded unless read via a VjpOp.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Node::Leaf, v)
    }

    /// A leaf bound to a flat parameter index; backward adds its adjoint to
    /// the gradient buffer. Cached so repeated requests share one node.
    pub fn param_leaf(&mut self, params: &ParamVector, flat_idx: usize) -> Var {
        if let Some(&v) = self.param_cache.get(&(flat_idx as u32)) {
            return v;
        }
        let var = self.push(
            Node::ParamLeaf {
                idx: flat_idx as u32,
            },
            params.values()[flat_idx],
        );
        self.param_cache.insert(flat_idx as u32, var);
        var
    }

    fn unary(&mut self, p: Var, d: f64, val: f64) -> Var {
        self.push(Node::Unary { p: p.0, d }, val)
    }

    fn binary(&mut self, p0: Var, d0: f64, p1: Var, d1: f64, val: f64) -> Var {
        self.push(
            Node::Binary {
                p0: p0.0,
                d0,
                p1: p1.0,
                d1,
            },
            val,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.binary(a, 1.0, b, 1.0, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.binary(a, 1.0, b, -1.0, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.binary(a, vb, b, va, va * vb)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.binary(a, 1.0 / vb, b, -va / (vb * vb), va / vb)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        self.unary(a, -1.0, v)
    }

    /// a·c + k for constants c, k.
    pub fn affine(&mut self, a: Var, c: f64, k: f64) -> Var {
        let v = self.val(a) * c + k;
        self.unary(a, c, v)
    }

    pub fn sq(&mut self, a: Var) -> Var {
        let va = self.val(a);
        self.unary(a, 2.0 * va, va * va)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).exp();
        self.unary(a, v, v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.val(a);
        self.unary(a, 1.0 / va, va.ln())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a).tanh();
        self.unary(a, 1.0 - v * v, v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.val(a);
        self.unary(a, numerics::sigmoid(va), numerics::softplus(va))
    }

    /// Clamp with pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.val(a);
        let (v, d) = if va < lo {
            (lo, 0.0)
        } else if va > hi {
            (hi, 0.0)
        } else {
            (va, 1.0)
        };
        self.unary(a, d, v)
    }

    /// log Σ exp over many vars as one n-ary node (partials = softmax).
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<f64> = xs.iter().map(|&x| self.val(x)).collect();
        let lse = numerics::logsumexp(&vals);
        let lo = self.edges.len() as u32;
        if lse.is_finite() {
            for (&x, &v) in xs.iter().zip(&vals) {
                self.edges.push((x.0, (v - lse).exp()));
            }
        } else {
            // Degenerate cloud: no useful gradient direction.
            for &x in xs {
                self.edges.push((x.0, 0.0));
            }
        }
        let hi = self.edges.len() as u32;
        self.push(Node::Nary { lo, hi }, lse)
    }

    /// Σ wᵢ·xᵢ with constant weights, as one n-ary node.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        let lo = self.edges.len() as u32;
        for &(x, w) in terms {
            total += w * self.val(x);
            self.edges.push((x.0, w));
        }
        let hi = self.edges.len() as u32;
        self.push(Node::Nary { lo, hi }, total)
    }

    /// Record a checkpointed op. Returns its output vars, whose values
    /// must be supplied (computed by the caller's forward pass).
    pub fn record_op(&mut self, op: Box<dyn VjpOp>, out_vals: &[f64]) -> Vec<Var> {
        assert_eq!(op.n_outputs(), out_vals.len());
        let op_idx = self.ops.len() as u32;
        self.ops.push(op);
        let first = self.nodes.len() as u32;
        out_vals
            .iter()
            .map(|&v| self.push(Node::VjpOut { op: op_idx, first }, v))
            .collect()
    }

    /// Reverse sweep from `seed` (seed adjoint 1), adding parameter
    /// gradients into `acc.grads`. Consumes the tape's gradient capability:
    /// a second call errors.
    pub fn backward_into(
        &mut self,
        seed: Var,
        params: &ParamVector,
        acc: &mut GradAccumulator,
    ) -> Result<(), Error> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        if seed.0 as usize >= self.nodes.len() {
            return Err(Error::Autodiff("seed var not recorded on this tape".into()));
        }
        self.consumed = true;

        // Full length: a VjpOp seeded from a middle output still reads the
        // adjoints of all its outputs.
        let mut adj = vec![0.0f64; self.nodes.len()];
        adj[seed.0 as usize] = 1.0;
        let mut out_adj_buf: Vec<f64> = Vec::new();
        for idx in (0..=seed.0 as usize).rev() {
            let a = adj[idx];
            match &self.nodes[idx] {
                Node::Leaf => {}
                Node::ParamLeaf { idx: pidx } => {
                    if a != 0.0 {
                        acc.grads[*pidx as usize] += a;
                    }
                }
                Node::Unary { p, d } => {
                    if a != 0.0 {
                        adj[*p as usize] += d * a;
                    }
                }
                Node::Binary { p0, d0, p1, d1 } => {
                    if a != 0.0 {
                        adj[*p0 as usize] += d0 * a;
                        adj[*p1 as usize] += d1 * a;
                    }
                }
                Node::Nary { lo, hi } => {
                    if a != 0.0 {
                        for &(p, d) in &self.edges[*lo as usize..*hi as usize] {
                            adj[p as usize] += d * a;
                        }
                    }
                }
                Node::VjpOut { op, first } => {
                    if idx as u32 == *first {
                        let op = &self.ops[*op as usize];
                        let n = op.n_outputs();
                        out_adj_buf.clear();
                        out_adj_buf.extend_from_slice(&adj[idx..idx + n]);
                        if out_adj_buf.iter().any(|&x| x != 0.0) {
                            op.backward(
                                &self.vals,
                                params,
                                &out_adj_buf,
                                &mut |node, delta| adj[node as usize] += delta,
                                &mut acc.grads,
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F: Fn(&mut Tape, &ParamVector) -> Var>(params: &ParamVector, f: F) -> Vec<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, params);
        let mut acc = GradAccumulator::zeros(params.len());
        tape.backward_into(out, params, &mut acc).unwrap();
        acc.grads
    }

    #[test]
    fn square_gradient() {
        let mut p = ParamVector::build(&[("theta", 1)]);
        p.values_mut()[0] = 3.0;
        let g = grad_of(&p, |t, p| {
            let th = t.param_leaf(p, 0);
            t.sq(th)
        });
        assert!((g[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn log_softmax_gradient() {
        // f(θ) = log softmax(θ)₀ at θ = (0, 0) → ∇ = (0.5, −0.5)
        let p = ParamVector::build(&[("logits", 2)]);
        let g = grad_of(&p, |t, p| {
            let z0 = t.param_leaf(p, 0);
            let z1 = t.param_leaf(p, 1);
            let lse = t.logsumexp(&[z0, z1]);
            t.sub(z0, lse)
        });
        assert!((g[0] - 0.5).abs() < 1e-14, "{g:?}");
        assert!((g[1] + 0.5).abs() < 1e-14, "{g:?}");
    }

    #[test]
    fn chain_matches_finite_differences() {
        let mut p = ParamVector::build(&[("w", 3)]);
        p.values_mut().copy_from_slice(&[0.4, -1.1, 2.0]);
        let f = |p: &ParamVector| -> f64 {
            let v = p.values();
            ((v[0] * v[1]).tanh() + (v[2] * 0.3).exp()).ln() + v[0] / v[2]
        };
        let build = |t: &mut Tape, p: &ParamVector| -> Var {
            let w0 = t.param_leaf(p, 0);
            let w1 = t.param_leaf(p, 1);
            let w2 = t.param_leaf(p, 2);
            let m = t.mul(w0, w1);
            let th = t.tanh(m);
            let sc = t.affine(w2, 0.3, 0.0);
            let e = t.exp(sc);
            let s = t.add(th, e);
            let l = t.ln(s);
            let r = t.div(w0, w2);
            t.add(l, r)
        };
        let g = grad_of(&p, build);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p.clone();
            pp.values_mut()[i] += h;
            let mut pm = p.clone();
            pm.values_mut()[i] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() / fd.abs().max(1e-9) < 1e-7,
                "coord {i}: ad {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn backward_twice_errors() {
        let mut p = ParamVector::build(&[("x", 1)]);
        p.values_mut()[0] = 2.0;
        let mut tape = Tape::new();
        let x = tape.param_leaf(&p, 0);
        let y = tape.sq(x);
        let mut acc = GradAccumulator::zeros(1);
        tape.backward_into(y, &p, &mut acc).unwrap();
        assert!(tape.backward_into(y, &p, &mut acc).is_err());
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let p = ParamVector::build(&[("x", 1)]);
        let mut tape = Tape::new();
        let mut acc = GradAccumulator::zeros(1);
        assert!(tape.backward_into(Var(0), &p, &mut acc).is_err());
    }

    #[test]
    fn weighted_sum_partials() {
        let mut p = ParamVector::build(&[("x", 2)]);
        p.values_mut().copy_from_slice(&[1.0, 2.0]);
        let g = grad_of(&p, |t, p| {
            let a = t.param_leaf(p, 0);
            let b = t.param_leaf(p, 1);
            t.weighted_sum(&[(a, 0.3), (b, 0.7)])
        });
        assert!((g[0] - 0.3).abs() < 1e-15);
        assert!((g[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn determinism_bitwise() {
        let mut p = ParamVector::build(&[("w", 4)]);
        p.values_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let build = |t: &mut Tape, p: &ParamVector| -> Var {
            let vars: Vec<Var> = (0..4).map(|i| t.param_leaf(p, i)).collect();
            let mut acc = t.constant(0.0);
            for (i, &v) in vars.iter().enumerate() {
                let s = t.affine(v, (i + 1) as f64, 0.5);
                let e = t.tanh(s);
                acc = t.add(acc, e);
            }
            t.ln(acc)
        };
        let g1 = grad_of(&p, build);
        let g2 = grad_of(&p, build);
        assert_eq!(g1, g2);
    }
}

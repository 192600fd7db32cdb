//! Point observation model: each observed 2D point is generated by picking
//! one of the four bounding-box edges, sliding uniformly along it, and
//! stepping off it by a Laplace-distributed perpendicular offset. The
//! twelve mixture parameters (4 edge probabilities, 4 Laplace means,
//! 4 Laplace scales) come from a feed-forward network evaluated on pose
//! features of the object as seen from the AV.
//!
//! Conventions (normative, everything downstream depends on them):
//! - edges are indexed 0=front, 1=left, 2=rear, 3=right;
//! - α is the offset along the edge, counterclockwise from the edge's first
//!   corner, in [0, edge length] when on the edge;
//! - β is the perpendicular offset, positive outward (negative inside the
//!   box);
//! - the per-point log-density is floored at −1e3 so bootstrap-filter
//!   weights stay finite; the floor region has zero gradient.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, MlpArch, ParamVector, Tape, Var, VjpOp};
use crate::geom::{wrap_angle, BoxDims, Observation, Pose2D, VehicleState};
use crate::numerics::logsumexp;
use crate::rng;

/// Surrogate for −∞: per-point log-density is clamped here.
pub const LOG_DENSITY_FLOOR: f64 = -1.0e3;
/// Raw network scale outputs are clamped to ±this before exponentiation.
const SCALE_RAW_CLAMP: f64 = 10.0;

pub const OBS_NET_SEGMENT: &str = "obs_net";
const OBS_NET_SIZES: [usize; 6] = [5, 16, 16, 16, 16, 12];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsFeatures {
    pub range: f64,
    pub bearing: f64,
    pub relative_bearing: f64,
    pub length: f64,
    pub width: f64,
}

impl ObsFeatures {
    /// Network inputs, scaled to order one (raw meters would saturate Tanh).
    pub fn scaled(&self) -> [f64; 5] {
        [
            self.range / 50.0,
            self.bearing / PI,
            self.relative_bearing / PI,
            self.length / 10.0,
            self.width / 3.0,
        ]
    }
}

/// Pose features of the tracked object as seen from the AV.
pub fn features(av_pose: &Pose2D, state: &VehicleState, dims: &BoxDims) -> ObsFeatures {
    let dx = state.pose.x - av_pose.x;
    let dy = state.pose.y - av_pose.y;
    ObsFeatures {
        range: dx.hypot(dy),
        bearing: wrap_angle(dy.atan2(dx) - av_pose.theta),
        relative_bearing: wrap_angle(state.pose.theta - av_pose.theta),
        length: dims.length,
        width: dims.width,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeTriplet {
    pub edge: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// The twelve mixture parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsParams12 {
    pub edge_probs: [f64; 4],
    pub laplace_mu: [f64; 4],
    pub laplace_b: [f64; 4],
}

impl ObsParams12 {
    /// Map raw network outputs: softmax over the first four, means pass
    /// through, scales exponentiate a clamped raw value.
    pub fn from_outputs(z: &[f64]) -> Self {
        debug_assert_eq!(z.len(), 12);
        let lse = logsumexp(&z[0..4]);
        let mut edge_probs = [0.0; 4];
        let mut laplace_mu = [0.0; 4];
        let mut laplace_b = [0.0; 4];
        for e in 0..4 {
            edge_probs[e] = (z[e] - lse).exp();
            laplace_mu[e] = z[4 + 2 * e];
            laplace_b[e] = z[5 + 2 * e].clamp(-SCALE_RAW_CLAMP, SCALE_RAW_CLAMP).exp();
        }
        ObsParams12 {
            edge_probs,
            laplace_mu,
            laplace_b,
        }
    }
}

/// Body-frame coordinates of a world point relative to a pose.
#[inline]
fn body_frame(pose: &Pose2D, p: [f64; 2]) -> (f64, f64) {
    let (sin_t, cos_t) = pose.theta.sin_cos();
    let dx = p[0] - pose.x;
    let dy = p[1] - pose.y;
    (cos_t * dx + sin_t * dy, -sin_t * dx + cos_t * dy)
}

/// (α, β, edge length) of a body-frame point w.r.t. one edge.
#[inline]
fn edge_coords(edge: usize, qx: f64, qy: f64, dims: &BoxDims) -> (f64, f64, f64) {
    let hl = 0.5 * dims.length;
    let hw = 0.5 * dims.width;
    match edge {
        0 => (qy + hw, qx - hl, dims.width),
        1 => (hl - qx, qy - hw, dims.length),
        2 => (hw - qy, -qx - hl, dims.width),
        3 => (qx + hl, -qy - hw, dims.length),
        _ => panic!("edge index {edge} out of range"),
    }
}

/// Project a world point onto one edge's (α, β) frame. α may fall outside
/// [0, edge length]; the density handles that.
pub fn triplet_from_point(
    point: [f64; 2],
    edge: usize,
    pose: &Pose2D,
    dims: &BoxDims,
) -> EdgeTriplet {
    let (qx, qy) = body_frame(pose, point);
    let (alpha, beta, _) = edge_coords(edge, qx, qy, dims);
    EdgeTriplet { edge, alpha, beta }
}

/// World point named by an edge triplet.
pub fn point_from_triplet(t: &EdgeTriplet, pose: &Pose2D, dims: &BoxDims) -> [f64; 2] {
    let hl = 0.5 * dims.length;
    let hw = 0.5 * dims.width;
    let (qx, qy) = match t.edge {
        0 => (hl + t.beta, t.alpha - hw),
        1 => (hl - t.alpha, hw + t.beta),
        2 => (-hl - t.beta, hw - t.alpha),
        3 => (t.alpha - hl, -hw - t.beta),
        _ => panic!("edge index {} out of range", t.edge),
    };
    let (sin_t, cos_t) = pose.theta.sin_cos();
    [
        pose.x + cos_t * qx - sin_t * qy,
        pose.y + sin_t * qx + cos_t * qy,
    ]
}

/// Mixture evaluation context for one (parameters, pose) pair, with the
/// per-edge constants hoisted out of the per-point loop.
struct MixtureEval {
    pose: Pose2D,
    dims: BoxDims,
    /// ln φ_e − ln len_e − ln 2b_e; −∞ when φ_e = 0.
    base: [f64; 4],
    mu: [f64; 4],
    inv_b: [f64; 4],
}

struct PointEval {
    terms: [f64; 4],
    beta: [f64; 4],
    qx: f64,
    qy: f64,
    lse: f64,
}

impl MixtureEval {
    fn new(p: &ObsParams12, pose: &Pose2D, dims: &BoxDims) -> Self {
        let mut base = [0.0; 4];
        let mut inv_b = [0.0; 4];
        for e in 0..4 {
            let len = if e % 2 == 0 { dims.width } else { dims.length };
            base[e] = p.edge_probs[e].ln() - len.ln() - (2.0 * p.laplace_b[e]).ln();
            inv_b[e] = 1.0 / p.laplace_b[e];
        }
        MixtureEval {
            pose: *pose,
            dims: *dims,
            base,
            mu: p.laplace_mu,
            inv_b,
        }
    }

    fn eval_point(&self, point: [f64; 2]) -> PointEval {
        let (qx, qy) = body_frame(&self.pose, point);
        let mut terms = [f64::NEG_INFINITY; 4];
        let mut beta = [0.0; 4];
        for e in 0..4 {
            let (a, b, len) = edge_coords(e, qx, qy, &self.dims);
            beta[e] = b;
            if a >= 0.0 && a <= len && self.base[e] > f64::NEG_INFINITY {
                terms[e] = self.base[e] - (b - self.mu[e]).abs() * self.inv_b[e];
            }
        }
        let lse = logsumexp(&terms);
        PointEval {
            terms,
            beta,
            qx,
            qy,
            lse,
        }
    }

    #[inline]
    fn point_loglik(&self, point: [f64; 2]) -> f64 {
        self.eval_point(point).lse.max(LOG_DENSITY_FLOOR)
    }
}

/// Per-point log-density under hand-specified mixture parameters. The
/// model-level `ObsModel::log_likelihood_point` computes the parameters
/// from its network first.
pub fn log_density_point(
    p: &ObsParams12,
    pose: &Pose2D,
    dims: &BoxDims,
    point: [f64; 2],
) -> f64 {
    MixtureEval::new(p, pose, dims).point_loglik(point)
}

/// Draw one observation from hand-specified mixture parameters.
pub fn sample_observation_with(
    p: &ObsParams12,
    pose: &Pose2D,
    dims: &BoxDims,
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Observation {
    assert!(n_points >= 1);
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let u = rng::uniform(rng);
        let mut edge = 3;
        let mut cum = 0.0;
        for (e, &p_e) in p.edge_probs.iter().enumerate() {
            cum += p_e;
            if u < cum {
                edge = e;
                break;
            }
        }
        let len = if edge % 2 == 0 { dims.width } else { dims.length };
        let alpha = rng::uniform(rng) * len;
        let beta = rng::laplace(rng, p.laplace_mu[edge], p.laplace_b[edge]);
        points.push(point_from_triplet(&EdgeTriplet { edge, alpha, beta }, pose, dims));
    }
    Observation {
        points,
        timestamp_index: 0,
    }
}

/// The observation model: a fixed-architecture network plus the mixture.
/// Parameters live in the `obs_net` segment of a [`ParamVector`].
#[derive(Clone)]
pub struct ObsModel {
    arch: Arc<MlpArch>,
}

impl Default for ObsModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ObsModel {
    pub fn new() -> Self {
        ObsModel {
            arch: Arc::new(MlpArch::new(&OBS_NET_SIZES, Activation::Tanh)),
        }
    }

    pub fn arch(&self) -> &Arc<MlpArch> {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn seg(&self, params: &ParamVector) -> Range<usize> {
        params
            .segment(OBS_NET_SEGMENT)
            .expect("parameter vector lacks an obs_net segment")
    }

    /// Mixture parameters at the given features.
    pub fn obs_params(&self, params: &ParamVector, feats: &ObsFeatures) -> ObsParams12 {
        let seg = self.seg(params);
        let mut z = Vec::new();
        self.arch
            .forward(&params.values()[seg], &feats.scaled(), &mut z);
        ObsParams12::from_outputs(&z)
    }

    pub fn log_likelihood_point(
        &self,
        params: &ParamVector,
        av_pose: &Pose2D,
        state: &VehicleState,
        dims: &BoxDims,
        point: [f64; 2],
    ) -> f64 {
        let p12 = self.obs_params(params, &features(av_pose, state, dims));
        log_density_point(&p12, &state.pose, dims, point)
    }

    /// Sum of per-point log-densities (points are conditionally i.i.d.).
    pub fn log_likelihood_observation(
        &self,
        params: &ParamVector,
        av_pose: &Pose2D,
        state: &VehicleState,
        dims: &BoxDims,
        obs: &Observation,
    ) -> f64 {
        self.log_likelihood_points(params, av_pose, state, dims, &obs.points)
    }

    pub fn log_likelihood_points(
        &self,
        params: &ParamVector,
        av_pose: &Pose2D,
        state: &VehicleState,
        dims: &BoxDims,
        points: &[[f64; 2]],
    ) -> f64 {
        let p12 = self.obs_params(params, &features(av_pose, state, dims));
        let ev = MixtureEval::new(&p12, &state.pose, dims);
        points.iter().map(|&p| ev.point_loglik(p)).sum()
    }

    pub fn sample_observation(
        &self,
        params: &ParamVector,
        av_pose: &Pose2D,
        state: &VehicleState,
        dims: &BoxDims,
        n_points: usize,
        rng: &mut ChaCha8Rng,
    ) -> Observation {
        let p12 = self.obs_params(params, &features(av_pose, state, dims));
        sample_observation_with(&p12, &state.pose, dims, n_points, rng)
    }

    /// Record the whole-observation log-likelihood as one checkpoint node.
    /// `state_xyt` are the tape vars for the object's (x, y, heading); speed
    /// and curvature do not enter the observation model.
    pub fn record_log_likelihood(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        av_pose: &Pose2D,
        dims: &BoxDims,
        points: &Arc<Vec<[f64; 2]>>,
        state_xyt: [Var; 3],
    ) -> Var {
        let state = VehicleState::new(
            tape.val(state_xyt[0]),
            tape.val(state_xyt[1]),
            tape.val(state_xyt[2]),
            0.0,
            0.0,
        );
        let total = self.log_likelihood_points(params, av_pose, &state, dims, points);
        let op = ObsLogLikOp {
            arch: self.arch.clone(),
            seg: self.seg(params),
            av_pose: *av_pose,
            dims: *dims,
            points: points.clone(),
            inputs: [state_xyt[0].0, state_xyt[1].0, state_xyt[2].0],
        };
        tape.record_op(Box::new(op), &[total])[0]
    }
}

/// Checkpoint op for the observation log-likelihood: recomputes the network
/// and mixture on backward and pushes gradients to the network weights and
/// to the object pose.
struct ObsLogLikOp {
    arch: Arc<MlpArch>,
    seg: Range<usize>,
    av_pose: Pose2D,
    dims: BoxDims,
    points: Arc<Vec<[f64; 2]>>,
    inputs: [u32; 3],
}

impl VjpOp for ObsLogLikOp {
    fn n_outputs(&self) -> usize {
        1
    }

    fn backward(
        &self,
        vals: &[f64],
        params: &ParamVector,
        out_adj: &[f64],
        input_adj: &mut dyn FnMut(u32, f64),
        param_grad: &mut [f64],
    ) {
        let seed = out_adj[0];
        let state = VehicleState::new(
            vals[self.inputs[0] as usize],
            vals[self.inputs[1] as usize],
            vals[self.inputs[2] as usize],
            0.0,
            0.0,
        );
        let feats = features(&self.av_pose, &state, &self.dims);
        let w = &params.values()[self.seg.clone()];
        let cache = self.arch.forward_cached(w, &feats.scaled());
        let z = cache.output().to_vec();
        let p12 = ObsParams12::from_outputs(&z);
        let ev = MixtureEval::new(&p12, &state.pose, &self.dims);

        let mut dz = [0.0; 12];
        // Pose adjoints via the mixture's β path.
        let (mut d_x, mut d_y, mut d_t) = (0.0, 0.0, 0.0);
        let (sin_t, cos_t) = state.pose.theta.sin_cos();
        for &pt in self.points.iter() {
            let pe = ev.eval_point(pt);
            if !(pe.lse > LOG_DENSITY_FLOOR) {
                continue; // floored: flat region
            }
            let (mut dqx, mut dqy) = (0.0, 0.0);
            for e in 0..4 {
                // Softmax pullback: every logit sees −φ_e even when its
                // edge is out of support for this point.
                let post = if pe.terms[e] > f64::NEG_INFINITY {
                    (pe.terms[e] - pe.lse).exp()
                } else {
                    0.0
                };
                dz[e] += seed * (post - p12.edge_probs[e]);
                if post == 0.0 {
                    continue;
                }
                let dev = pe.beta[e] - ev.mu[e];
                let sgn = if dev >= 0.0 { 1.0 } else { -1.0 };
                dz[4 + 2 * e] += seed * post * sgn * ev.inv_b[e];
                if z[5 + 2 * e].abs() < SCALE_RAW_CLAMP {
                    dz[5 + 2 * e] += seed * post * (dev.abs() * ev.inv_b[e] - 1.0);
                }
                let d_beta = -seed * post * sgn * ev.inv_b[e];
                match e {
                    0 => dqx += d_beta,
                    1 => dqy += d_beta,
                    2 => dqx -= d_beta,
                    _ => dqy -= d_beta,
                }
            }
            // q = R(−θ)(P − c): ∂q/∂c = −R(−θ), ∂qx/∂θ = qy, ∂qy/∂θ = −qx.
            d_x += dqx * (-cos_t) + dqy * sin_t;
            d_y += dqx * (-sin_t) + dqy * (-cos_t);
            d_t += dqx * pe.qy - dqy * pe.qx;
        }

        // Network pullback: weights into the flat gradient, inputs onward
        // to the pose through the feature map.
        let mut du = [0.0; 5];
        self.arch.backward_from_cache(
            w,
            &cache,
            &dz,
            &mut param_grad[self.seg.clone()],
            &mut du,
        );
        let ddx = state.pose.x - self.av_pose.x;
        let ddy = state.pose.y - self.av_pose.y;
        let r = feats.range;
        if r > 1e-9 {
            d_x += du[0] * (ddx / r) / 50.0 + du[1] * (-ddy / (r * r)) / PI;
            d_y += du[0] * (ddy / r) / 50.0 + du[1] * (ddx / (r * r)) / PI;
        }
        d_t += du[2] / PI;

        if d_x != 0.0 {
            input_adj(self.inputs[0], d_x);
        }
        if d_y != 0.0 {
            input_adj(self.inputs[1], d_y);
        }
        if d_t != 0.0 {
            input_adj(self.inputs[2], d_t);
        }
    }
}

//! Action distributions π(a|x): what the tracked vehicle is likely to do
//! next given its current state.
//!
//! Two families:
//! - [`SimplePolicy`]: hand-crafted means (accelerate at low speed, brake at
//!   high speed, pinch toward zero) with two learnable log standard
//!   deviations.
//! - [`NeuralPolicy`]: a 2→32→32→5 ReLU network emitting a full Gaussian
//!   (mean and Cholesky factor), 1317 parameters.
//!
//! Both expose three routes: plain evaluation, a taped log-density (the
//! score-function route: gradients w.r.t. parameters at fixed state and
//! action), and a taped reparameterized sample (the pathwise route used by
//! estimators that differentiate through the particle trajectories).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{record_mlp, Activation, MlpArch, ParamVector, Tape, Var};
use crate::geom::{Action, VehicleState};
use crate::rng;

pub const POLICY_SEGMENT: &str = "policy";
const LN_2PI: f64 = 1.8378770664093453;

/// Mean acceleration: accelerate toward cruise below 8 m/s, brake above,
/// clamped to [−2, 1.5] m/s².
pub fn simple_policy_mean_accel(v: f64) -> f64 {
    (1.5 * (1.0 - v / 8.0)).clamp(-2.0, 1.5)
}

/// Pinch noise shrinks with speed (tight steering corrections at speed are
/// implausible). Negative speeds get the full scale.
pub fn simple_policy_pinch_scale(v: f64) -> f64 {
    1.0 / (1.0 + v.max(0.0) / 5.0)
}

/// Diagonal Gaussian around the hand-crafted means; parameters are
/// (log σ_accel, log σ_pinch), layout order of the `policy` segment.
#[derive(Clone, Copy, Debug, Default)]
pub struct SimplePolicy;

/// Full Gaussian from a small network on (v/10, κ·10).
#[derive(Clone, Debug)]
pub struct NeuralPolicy {
    arch: Arc<MlpArch>,
}

impl Default for NeuralPolicy {
    fn default() -> Self {
        NeuralPolicy {
            arch: Arc::new(MlpArch::new(&[2, 32, 32, 5], Activation::Relu)),
        }
    }
}

/// Gaussian in standard form: action = mean + chol · ε, ε ~ N(0, I₂).
#[derive(Clone, Copy, Debug)]
pub struct PolicyGaussian {
    pub mean: [f64; 2],
    /// Lower-triangular [[l11, 0], [l21, l22]], diagonal > 0.
    pub chol: [[f64; 2]; 2],
}

impl PolicyGaussian {
    pub fn logpdf(&self, action: &Action) -> f64 {
        let l11 = self.chol[0][0];
        let l21 = self.chol[1][0];
        let l22 = self.chol[1][1];
        let e1 = (action.accel - self.mean[0]) / l11;
        let e2 = (action.pinch - self.mean[1] - l21 * e1) / l22;
        -LN_2PI - l11.ln() - l22.ln() - 0.5 * (e1 * e1 + e2 * e2)
    }

    pub fn action_from_eps(&self, eps: [f64; 2]) -> Action {
        Action {
            accel: self.mean[0] + self.chol[0][0] * eps[0],
            pinch: self.mean[1] + self.chol[1][0] * eps[0] + self.chol[1][1] * eps[1],
        }
    }

    /// Covariance chol·cholᵀ.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let l11 = self.chol[0][0];
        let l21 = self.chol[1][0];
        let l22 = self.chol[1][1];
        [
            [l11 * l11, l11 * l21],
            [l11 * l21, l21 * l21 + l22 * l22],
        ]
    }
}

impl SimplePolicy {
    pub fn param_count(&self) -> usize {
        2
    }

    pub fn gaussian(&self, params: &ParamVector, state: &VehicleState) -> PolicyGaussian {
        let seg = params
            .segment(POLICY_SEGMENT)
            .expect("parameter vector lacks a policy segment");
        let vals = &params.values()[seg];
        let sigma_a = vals[0].exp();
        let sigma_p = vals[1].exp() * simple_policy_pinch_scale(state.v);
        PolicyGaussian {
            mean: [simple_policy_mean_accel(state.v), 0.0],
            chol: [[sigma_a, 0.0], [0.0, sigma_p]],
        }
    }

    /// Taped log-density. `state_v` and the action vars may be plain leaves
    /// (score-function use) or live tape nodes.
    pub fn record_logpdf(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        action: [Var; 2],
    ) -> Var {
        let seg = params.segment(POLICY_SEGMENT).unwrap();
        let lsa = tape.param_leaf(params, seg.start);
        let lsp = tape.param_leaf(params, seg.start + 1);

        let mu_a = {
            let lin = tape.affine(state_v, -1.5 / 8.0, 1.5);
            tape.clamp(lin, -2.0, 1.5)
        };
        let sigma_a = tape.exp(lsa);
        let za = {
            let d = tape.sub(action[0], mu_a);
            tape.div(d, sigma_a)
        };
        // ln σ_p,eff = lsp + ln m(v)
        let ln_m = {
            let vplus = tape.clamp(state_v, 0.0, f64::INFINITY);
            let den = tape.affine(vplus, 0.2, 1.0);
            let ln_den = tape.ln(den);
            tape.neg(ln_den)
        };
        let ln_sp = tape.add(lsp, ln_m);
        let zp = {
            let sp = tape.exp(ln_sp);
            tape.div(action[1], sp)
        };
        let za2 = tape.sq(za);
        let zp2 = tape.sq(zp);
        let quad = tape.add(za2, zp2);
        let spread = tape.add(lsa, ln_sp);
        let half_quad = tape.affine(quad, 0.5, 0.0);
        let s = tape.add(spread, half_quad);
        tape.affine(s, -1.0, -LN_2PI)
    }

    /// Taped reparameterized draw: gradients flow to (log σ_a, log σ_p) and
    /// to the speed var through the mean and the pinch scale.
    pub fn record_sample(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        eps: [f64; 2],
    ) -> [Var; 2] {
        let seg = params.segment(POLICY_SEGMENT).unwrap();
        let lsa = tape.param_leaf(params, seg.start);
        let lsp = tape.param_leaf(params, seg.start + 1);
        let mu_a = {
            let lin = tape.affine(state_v, -1.5 / 8.0, 1.5);
            tape.clamp(lin, -2.0, 1.5)
        };
        let sigma_a = tape.exp(lsa);
        let accel = {
            let noise = tape.affine(sigma_a, eps[0], 0.0);
            tape.add(mu_a, noise)
        };
        let pinch = {
            let vplus = tape.clamp(state_v, 0.0, f64::INFINITY);
            let den = tape.affine(vplus, 0.2, 1.0);
            let sp = tape.exp(lsp);
            let scaled = tape.div(sp, den);
            tape.affine(scaled, eps[1], 0.0)
        };
        [accel, pinch]
    }
}

impl NeuralPolicy {
    pub fn arch(&self) -> &Arc<MlpArch> {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn inputs(state: &VehicleState) -> [f64; 2] {
        [state.v / 10.0, state.kappa * 10.0]
    }

    pub fn gaussian(&self, params: &ParamVector, state: &VehicleState) -> PolicyGaussian {
        let seg = params
            .segment(POLICY_SEGMENT)
            .expect("parameter vector lacks a policy segment");
        let mut out = Vec::new();
        self.arch
            .forward(&params.values()[seg], &Self::inputs(state), &mut out);
        PolicyGaussian {
            mean: [out[0], out[1]],
            chol: [
                [crate::numerics::softplus(out[2]), 0.0],
                [out[3], crate::numerics::softplus(out[4])],
            ],
        }
    }

    fn record_outputs(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        state_kappa: Var,
    ) -> (Var, Var, Var, Var, Var) {
        let u1 = tape.affine(state_v, 0.1, 0.0);
        let u2 = tape.affine(state_kappa, 10.0, 0.0);
        let out = record_mlp(tape, &self.arch, params, POLICY_SEGMENT, &[u1, u2]);
        let l11 = tape.softplus(out[2]);
        let l22 = tape.softplus(out[4]);
        (out[0], out[1], l11, out[3], l22)
    }

    pub fn record_logpdf(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        state_kappa: Var,
        action: [Var; 2],
    ) -> Var {
        let (mu_a, mu_p, l11, l21, l22) = self.record_outputs(tape, params, state_v, state_kappa);
        let e1 = {
            let d = tape.sub(action[0], mu_a);
            tape.div(d, l11)
        };
        let e2 = {
            let d = tape.sub(action[1], mu_p);
            let c = tape.mul(l21, e1);
            let d2 = tape.sub(d, c);
            tape.div(d2, l22)
        };
        let ln_l11 = tape.ln(l11);
        let ln_l22 = tape.ln(l22);
        let e1s = tape.sq(e1);
        let e2s = tape.sq(e2);
        let quad = tape.add(e1s, e2s);
        let half_quad = tape.affine(quad, 0.5, 0.0);
        let spread = tape.add(ln_l11, ln_l22);
        let s = tape.add(spread, half_quad);
        tape.affine(s, -1.0, -LN_2PI)
    }

    pub fn record_sample(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        state_kappa: Var,
        eps: [f64; 2],
    ) -> [Var; 2] {
        let (mu_a, mu_p, l11, l21, l22) = self.record_outputs(tape, params, state_v, state_kappa);
        let accel = {
            let n = tape.affine(l11, eps[0], 0.0);
            tape.add(mu_a, n)
        };
        let pinch = {
            let n1 = tape.affine(l21, eps[0], 0.0);
            let n2 = tape.affine(l22, eps[1], 0.0);
            let n = tape.add(n1, n2);
            tape.add(mu_p, n)
        };
        [accel, pinch]
    }
}

/// Either policy behind one dispatch point.
#[derive(Clone, Debug)]
pub enum Policy {
    Simple(SimplePolicy),
    Neural(NeuralPolicy),
}

impl Policy {
    pub fn simple() -> Self {
        Policy::Simple(SimplePolicy)
    }

    pub fn neural() -> Self {
        Policy::Neural(NeuralPolicy::default())
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Simple(p) => p.param_count(),
            Policy::Neural(p) => p.param_count(),
        }
    }

    pub fn gaussian(&self, params: &ParamVector, state: &VehicleState) -> PolicyGaussian {
        match self {
            Policy::Simple(p) => p.gaussian(params, state),
            Policy::Neural(p) => p.gaussian(params, state),
        }
    }

    pub fn logpdf(&self, params: &ParamVector, state: &VehicleState, action: &Action) -> f64 {
        self.gaussian(params, state).logpdf(action)
    }

    /// Deterministic draw from fixed noise; the rng-driven `sample` and the
    /// taped reparameterized route both go through this mapping.
    pub fn sample_with_eps(
        &self,
        params: &ParamVector,
        state: &VehicleState,
        eps: [f64; 2],
    ) -> (Action, f64) {
        let g = self.gaussian(params, state);
        let action = g.action_from_eps(eps);
        let l11 = g.chol[0][0];
        let l22 = g.chol[1][1];
        (
            action,
            -LN_2PI - l11.ln() - l22.ln() - 0.5 * (eps[0] * eps[0] + eps[1] * eps[1]),
        )
    }

    pub fn sample(
        &self,
        params: &ParamVector,
        state: &VehicleState,
        rng: &mut ChaCha8Rng,
    ) -> (Action, f64) {
        let eps = [rng::normal(rng), rng::normal(rng)];
        self.sample_with_eps(params, state, eps)
    }

    pub fn record_logpdf(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        state_kappa: Var,
        action: [Var; 2],
    ) -> Var {
        match self {
            Policy::Simple(p) => p.record_logpdf(tape, params, state_v, action),
            Policy::Neural(p) => p.record_logpdf(tape, params, state_v, state_kappa, action),
        }
    }

    pub fn record_sample(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state_v: Var,
        state_kappa: Var,
        eps: [f64; 2],
    ) -> [Var; 2] {
        match self {
            Policy::Simple(p) => p.record_sample(tape, params, state_v, eps),
            Policy::Neural(p) => p.record_sample(tape, params, state_v, state_kappa, eps),
        }
    }
}

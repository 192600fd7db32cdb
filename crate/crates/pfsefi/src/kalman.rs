//! Scalar linear-Gaussian state-space model with an exact Kalman filter:
//! the validation oracle for the particle filter and the score estimators.
//!
//! Model: x₀ ~ N(m₀, s₀²), x_t = a·x_{t−1} + σ_f ε_t, y_t = x_t + σ_g η_t.
//! θ = (a, σ_f, σ_g, m₀, s₀) — stds stored raw, not log-transformed, so the
//! score has plain-σ coordinates.
//!
//! The same model is also exposed compositionally for the particle machinery:
//! the "action" is the next state itself (a_t ~ π_θ(·|x_{t−1}) =
//! N(a·x_{t−1}, σ_f²), transition = identity in the action), which makes the
//! policy-score route cover (a, σ_f) and the initial-density hook cover
//! (m₀, s₀).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamVector, Tape, Var};
use crate::rng;
use crate::ssm::Ssm;

pub const LGSSM_SEGMENT: &str = "lgssm";
pub const IDX_A: usize = 0;
pub const IDX_SF: usize = 1;
pub const IDX_SG: usize = 2;
pub const IDX_M0: usize = 3;
pub const IDX_S0: usize = 4;

const LN_2PI: f64 = 1.8378770664093453;

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean) * (x - mean) / var
}

/// θ as a 5-vector in segment order.
pub fn build_params(a: f64, sf: f64, sg: f64, m0: f64, s0: f64) -> ParamVector {
    assert!(sf > 0.0 && sg > 0.0 && s0 >= 0.0, "stds must be positive");
    let mut p = ParamVector::build(&[(LGSSM_SEGMENT, 5)]);
    p.values_mut().copy_from_slice(&[a, sf, sg, m0, s0]);
    p
}

fn theta(params: &ParamVector) -> [f64; 5] {
    let seg = params
        .segment(LGSSM_SEGMENT)
        .expect("parameter vector lacks an lgssm segment");
    let v = &params.values()[seg];
    [v[0], v[1], v[2], v[3], v[4]]
}

/// Exact marginal log-likelihood of the observation sequence.
pub fn kalman_mll(params: &ParamVector, ys: &[f64]) -> f64 {
    let [a, sf, sg, m0, s0] = theta(params);
    let r = sg * sg;
    let mut mean = m0;
    let mut var = s0 * s0;
    let mut mll = 0.0;
    for (t, &y) in ys.iter().enumerate() {
        if t > 0 {
            mean *= a;
            var = a * a * var + sf * sf;
        }
        let innov_var = var + r;
        mll += log_normal_pdf(y, mean, innov_var);
        let gain = var / innov_var;
        mean += gain * (y - mean);
        var *= 1.0 - gain;
    }
    mll
}

/// Per-step innovation log-densities (sums to `kalman_mll`).
pub fn kalman_per_step_mll(params: &ParamVector, ys: &[f64]) -> Vec<f64> {
    let [a, sf, sg, m0, s0] = theta(params);
    let r = sg * sg;
    let mut mean = m0;
    let mut var = s0 * s0;
    let mut out = Vec::with_capacity(ys.len());
    for (t, &y) in ys.iter().enumerate() {
        if t > 0 {
            mean *= a;
            var = a * a * var + sf * sf;
        }
        let innov_var = var + r;
        out.push(log_normal_pdf(y, mean, innov_var));
        let gain = var / innov_var;
        mean += gain * (y - mean);
        var *= 1.0 - gain;
    }
    out
}

/// Exact score via central finite differences of the exact MLL (step 1e-6).
pub fn kalman_score_fd(params: &ParamVector, ys: &[f64]) -> [f64; 5] {
    let h = 1e-6;
    let mut score = [0.0; 5];
    let seg = params.segment(LGSSM_SEGMENT).unwrap();
    for i in 0..5 {
        let mut pp = params.clone();
        pp.values_mut()[seg.start + i] += h;
        let mut pm = params.clone();
        pm.values_mut()[seg.start + i] -= h;
        score[i] = (kalman_mll(&pp, ys) - kalman_mll(&pm, ys)) / (2.0 * h);
    }
    score
}

/// E[x_t | y_{0:min(t+lag, T)}]: forward filter, then a Rauch–Tung–Striebel
/// sweep truncated at the conditioning time.
pub fn kalman_lag_smoothed_mean(params: &ParamVector, ys: &[f64], t: usize, lag: usize) -> f64 {
    let [a, sf, _sg, m0, s0] = theta(params);
    let s = (t + lag).min(ys.len() - 1);
    // Filtered and predicted moments up to time s.
    let mut filt_mean = Vec::with_capacity(s + 1);
    let mut filt_var = Vec::with_capacity(s + 1);
    let mut pred_mean = Vec::with_capacity(s + 1);
    let mut pred_var = Vec::with_capacity(s + 1);
    {
        let [_, _, sg, ..] = theta(params);
        let r = sg * sg;
        let mut mean = m0;
        let mut var = s0 * s0;
        for (u, &y) in ys.iter().take(s + 1).enumerate() {
            if u > 0 {
                mean *= a;
                var = a * a * var + sf * sf;
            }
            pred_mean.push(mean);
            pred_var.push(var);
            let innov_var = var + r;
            let gain = var / innov_var;
            mean += gain * (y - mean);
            var *= 1.0 - gain;
            filt_mean.push(mean);
            filt_var.push(var);
        }
    }
    // Backward pass from s down to t.
    let mut m = filt_mean[s];
    for u in (t..s).rev() {
        let c = if pred_var[u + 1] > 0.0 {
            a * filt_var[u] / pred_var[u + 1]
        } else {
            0.0
        };
        m = filt_mean[u] + c * (m - pred_mean[u + 1]);
    }
    m
}

/// Draw a synthetic observation sequence of length `t_steps + 1`.
pub fn simulate(params: &ParamVector, t_steps: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [a, sf, sg, m0, s0] = theta(params);
    let mut x = m0 + s0 * rng::normal(rng);
    let mut ys = Vec::with_capacity(t_steps + 1);
    ys.push(x + sg * rng::normal(rng));
    for _ in 0..t_steps {
        x = a * x + sf * rng::normal(rng);
        ys.push(x + sg * rng::normal(rng));
    }
    ys
}

/// The same model in compositional form for the particle filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearGaussianSsm;

impl LinearGaussianSsm {
    fn seg_start(params: &ParamVector) -> usize {
        params.segment(LGSSM_SEGMENT).unwrap().start
    }
}

impl Ssm for LinearGaussianSsm {
    type State = f64;
    type Act = f64;
    type StateVars = Var;
    type Data = Vec<f64>;

    fn steps(&self, data: &Vec<f64>) -> usize {
        data.len().saturating_sub(1)
    }

    fn sample_init(&self, params: &ParamVector, _data: &Vec<f64>, rng: &mut ChaCha8Rng) -> f64 {
        let [_, _, _, m0, s0] = theta(params);
        m0 + s0 * rng::normal(rng)
    }

    fn sample_transition(
        &self,
        params: &ParamVector,
        prev: &f64,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64) {
        let [a, sf, ..] = theta(params);
        let next = a * prev + sf * rng::normal(rng);
        (next, next)
    }

    fn obs_loglik(&self, params: &ParamVector, data: &Vec<f64>, t: usize, state: &f64) -> f64 {
        let [_, _, sg, ..] = theta(params);
        log_normal_pdf(data[t], *state, sg * sg)
    }

    fn mean_state(&self, states: &[f64], weights: &[f64]) -> f64 {
        states.iter().zip(weights).map(|(s, w)| s * w).sum()
    }

    fn record_obs_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Vec<f64>,
        t: usize,
        state: &f64,
    ) -> Var {
        let x = tape.leaf(*state);
        self.record_obs_loglik_vars(tape, params, data, t, &x)
    }

    fn record_policy_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &f64,
        act: &f64,
    ) -> Var {
        let s = Self::seg_start(params);
        let a = tape.param_leaf(params, s + IDX_A);
        let sf = tape.param_leaf(params, s + IDX_SF);
        let xp = tape.leaf(*prev);
        let av = tape.leaf(*act);
        let mu = tape.mul(a, xp);
        let d = tape.sub(av, mu);
        let z = tape.div(d, sf);
        let z2 = tape.sq(z);
        let ln_sf = tape.ln(sf);
        let half_z2 = tape.affine(z2, 0.5, 0.5 * LN_2PI);
        let sum = tape.add(ln_sf, half_z2);
        tape.neg(sum)
    }

    fn record_init_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        state: &f64,
    ) -> Option<Var> {
        let s = Self::seg_start(params);
        let m0 = tape.param_leaf(params, s + IDX_M0);
        let s0 = tape.param_leaf(params, s + IDX_S0);
        let x = tape.leaf(*state);
        let d = tape.sub(x, m0);
        let z = tape.div(d, s0);
        let z2 = tape.sq(z);
        let ln_s0 = tape.ln(s0);
        let half_z2 = tape.affine(z2, 0.5, 0.5 * LN_2PI);
        let sum = tape.add(ln_s0, half_z2);
        Some(tape.neg(sum))
    }

    fn record_init(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        _data: &Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let s = Self::seg_start(params);
        let m0 = tape.param_leaf(params, s + IDX_M0);
        let s0 = tape.param_leaf(params, s + IDX_S0);
        let eps = rng::normal(rng);
        let noise = tape.affine(s0, eps, 0.0);
        tape.add(m0, noise)
    }

    fn record_transition(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &Var,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let s = Self::seg_start(params);
        let a = tape.param_leaf(params, s + IDX_A);
        let sf = tape.param_leaf(params, s + IDX_SF);
        let eps = rng::normal(rng);
        let mu = tape.mul(a, *prev);
        let noise = tape.affine(sf, eps, 0.0);
        tape.add(mu, noise)
    }

    fn record_obs_loglik_vars(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Vec<f64>,
        t: usize,
        vars: &Var,
    ) -> Var {
        let s = Self::seg_start(params);
        let sg = tape.param_leaf(params, s + IDX_SG);
        let y = tape.constant(data[t]);
        let d = tape.sub(y, *vars);
        let z = tape.div(d, sg);
        let z2 = tape.sq(z);
        let ln_sg = tape.ln(sg);
        let half_z2 = tape.affine(z2, 0.5, 0.5 * LN_2PI);
        let sum = tape.add(ln_sg, half_z2);
        tape.neg(sum)
    }

    fn state_value(&self, tape: &Tape, vars: &Var) -> f64 {
        tape.val(*vars)
    }
}

//! Gradient estimators for the marginal log-likelihood ℓ̂_T(θ).
//!
//! - [`score_pf_sefi`]: score-function estimator. Runs the plain filter and,
//!   as each time column leaves the fixed-lag buffer, accumulates the
//!   smoothing-weighted gradients of log g_θ(y_t|x_t) and
//!   log π_θ(a_t|x_{t−1}) at *fixed* particle values — one small tape and
//!   one backward pass per emitted column. Resampling and the motion model
//!   are never differentiated.
//! - [`score_pf_biased`]: pathwise estimator. Differentiates straight
//!   through the filter's computation with reparameterized action noise and
//!   resampling indices held constant — one tape spanning all T steps. The
//!   textbook "differentiate the particle filter" baseline; biased because
//!   the index selection is dropped from the derivative.
//! - [`score_pfnet`]: pathwise with soft resampling: ancestors drawn from a
//!   mixture q = α·w + (1−α)/N with differentiable ln(w/q) corrective
//!   weights folded into the likelihood estimate.
//!
//! All three share RNG streams with the plain filter, so a fixed seed pins
//! one trajectory through every route.

use crate::autodiff::{GradAccumulator, ParamVector, Tape, Var};
use crate::error::Error;
use crate::filter::{
    self, effective_sample_size, normalized_weights, resample_multinomial, resample_soft,
};
use crate::rng::{self, StreamRng};
use crate::ssm::Ssm;
use crate::Result;

/// Which gradient estimator to run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EstimatorSpec {
    /// Score-function estimator with fixed-lag smoothing depth L.
    PfSefi { lag: usize },
    /// Pathwise gradients through a vanilla particle filter.
    Pf,
    /// Pathwise gradients with soft resampling at trade-off α.
    Pfnet { alpha: f64 },
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::PfSefi { .. } => "pf_sefi",
            EstimatorSpec::Pf => "pf",
            EstimatorSpec::Pfnet { .. } => "pfnet",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScoreDiagnostics {
    pub per_step_mll: Vec<f64>,
    pub ess: Vec<f64>,
    /// Largest tape observed (nodes), for memory accounting.
    pub tape_nodes_peak: usize,
}

/// A gradient estimate of ℓ̂_T(θ) for one trajectory. `grad.grads` holds the
/// raw sum over time steps; `grad.weight_total` counts the T+1 accumulated
/// columns so `normalized()` is scale-stable across sequence lengths.
#[derive(Clone, Debug)]
pub struct ScoreEstimate {
    pub grad: GradAccumulator,
    pub mll: f64,
    pub diagnostics: ScoreDiagnostics,
}

/// Score-function estimator via Fisher's identity under the fixed-lag
/// smoothing approximation.
pub fn score_pf_sefi<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    lag: usize,
    sr: &StreamRng,
) -> Result<ScoreEstimate> {
    let mut acc = GradAccumulator::zeros(params.len());
    let mut peak = 0usize;
    let res = filter::run_filter(model, params, data, n, lag, sr, |em| {
        let mut tape = Tape::new();
        let mut terms: Vec<(Var, f64)> = Vec::new();
        for (j, &w) in em.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut v = model.record_obs_loglik(&mut tape, params, data, em.t, &em.states[j]);
            if em.t > 0 {
                let lp =
                    model.record_policy_loglik(&mut tape, params, &em.prev_states[j], &em.actions[j]);
                v = tape.add(v, lp);
            } else if let Some(ip) = model.record_init_loglik(&mut tape, params, &em.states[j]) {
                v = tape.add(v, ip);
            }
            terms.push((v, w));
        }
        let total = tape.weighted_sum(&terms);
        tape.backward_into(total, params, &mut acc)?;
        acc.weight_total += 1.0;
        peak = peak.max(tape.len());
        Ok(())
    })?;
    Ok(ScoreEstimate {
        grad: acc,
        mll: res.mll,
        diagnostics: ScoreDiagnostics {
            per_step_mll: res.per_step_mll,
            ess: res.ess,
            tape_nodes_peak: peak,
        },
    })
}

/// Pathwise estimator through the vanilla filter (resampling indices held
/// constant). Holds one tape across the whole sequence — memory grows with
/// N·T by design.
pub fn score_pf_biased<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    sr: &StreamRng,
) -> Result<ScoreEstimate> {
    score_pathwise(model, params, data, n, None, sr)
}

/// Pathwise estimator with soft resampling (PFNET baseline).
pub fn score_pfnet<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    alpha: f64,
    sr: &StreamRng,
) -> Result<ScoreEstimate> {
    score_pathwise(model, params, data, n, Some(alpha), sr)
}

/// Run whichever estimator the spec names.
pub fn score_trajectory<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    spec: EstimatorSpec,
    n: usize,
    sr: &StreamRng,
) -> Result<ScoreEstimate> {
    match spec {
        EstimatorSpec::PfSefi { lag } => score_pf_sefi(model, params, data, n, lag, sr),
        EstimatorSpec::Pf => score_pf_biased(model, params, data, n, sr),
        EstimatorSpec::Pfnet { alpha } => score_pfnet(model, params, data, n, alpha, sr),
    }
}

fn score_pathwise<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    alpha: Option<f64>,
    sr: &StreamRng,
) -> Result<ScoreEstimate> {
    if n < 2 {
        return Err(Error::Config(
            "particle count must be at least 2 (resampling is undefined on a single particle)"
                .into(),
        ));
    }
    if let Some(a) = alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!(
                "pfnet alpha must lie in [0,1], got {a}"
            )));
        }
    }
    // At α=1 the q-mixture equals the weights and every corrective is
    // identically zero, so the soft route degenerates to the vanilla one;
    // normalizing here keeps the two bit-identical instead of 1-ulp apart
    // through the exp/ln round trip.
    let alpha = alpha.filter(|a| *a < 1.0);
    let t_steps = model.steps(data);
    let mut tape = Tape::new();
    let ln_n = (n as f64).ln();

    let (particles, init_ratios): (Vec<M::StateVars>, Vec<f64>) = (0..n)
        .map(|i| {
            let mut r = sr.at(rng::purpose::INIT, 0, i);
            model.record_init_proposal(&mut tape, params, data, &mut r)
        })
        .unzip();
    let mut particles = particles;
    // The θ-free init importance ratio shifts the t=0 log-weight *values*
    // without touching the gradient.
    let mut log_w: Vec<Var> = particles
        .iter()
        .zip(&init_ratios)
        .map(|(p, &ratio)| {
            let ll = model.record_obs_loglik_vars(&mut tape, params, data, 0, p);
            tape.affine(ll, 1.0, ratio)
        })
        .collect();

    let mut per_step_mll = Vec::with_capacity(t_steps + 1);
    let mut ess = Vec::with_capacity(t_steps + 1);
    let lse0 = tape.logsumexp(&log_w);
    let mut mll_var = tape.affine(lse0, 1.0, -ln_n);
    per_step_mll.push(tape.val(mll_var));
    {
        let vals: Vec<f64> = log_w.iter().map(|v| tape.val(*v)).collect();
        crate::filter::check_weights(&vals, 0)?;
        ess.push(effective_sample_size(&normalized_weights(&vals, 0)?));
    }

    for t in 1..=t_steps {
        let lw_vals: Vec<f64> = log_w.iter().map(|v| tape.val(*v)).collect();
        // Ancestor indices are plain numbers either way; the soft route adds
        // taped corrective weights for the selected ancestors.
        let (anc, correctives): (Vec<u32>, Option<Vec<Var>>) = match alpha {
            None => (resample_multinomial(&lw_vals, n, sr, t)?, None),
            Some(a) => {
                let (anc, _) = resample_soft(&lw_vals, n, a, sr, t)?;
                let lse_prev = tape.logsumexp(&log_w);
                let corr = anc
                    .iter()
                    .map(|&ai| {
                        let ln_w = tape.sub(log_w[ai as usize], lse_prev);
                        let w = tape.exp(ln_w);
                        let q = tape.affine(w, a, (1.0 - a) / n as f64);
                        let ln_q = tape.ln(q);
                        tape.sub(ln_w, ln_q)
                    })
                    .collect();
                (anc, Some(corr))
            }
        };
        let new_particles: Vec<M::StateVars> = (0..n)
            .map(|i| {
                let prev = particles[anc[i] as usize];
                let mut r = sr.at(rng::purpose::ACTION, t, i);
                model.record_transition(&mut tape, params, &prev, &mut r)
            })
            .collect();
        let obs_lls: Vec<Var> = new_particles
            .iter()
            .map(|p| model.record_obs_loglik_vars(&mut tape, params, data, t, p))
            .collect();
        let new_log_w: Vec<Var> = match &correctives {
            None => obs_lls,
            Some(corr) => obs_lls
                .iter()
                .zip(corr)
                .map(|(ll, c)| tape.add(*ll, *c))
                .collect(),
        };
        let lse = tape.logsumexp(&new_log_w);
        let inc = tape.affine(lse, 1.0, -ln_n);
        per_step_mll.push(tape.val(inc));
        mll_var = tape.add(mll_var, inc);
        let vals: Vec<f64> = new_log_w.iter().map(|v| tape.val(*v)).collect();
        crate::filter::check_weights(&vals, t)?;
        ess.push(effective_sample_size(&normalized_weights(&vals, t)?));
        particles = new_particles;
        log_w = new_log_w;
    }

    let mll = tape.val(mll_var);
    let peak = tape.len();
    let mut acc = GradAccumulator::zeros(params.len());
    tape.backward_into(mll_var, params, &mut acc)?;
    acc.weight_total += (t_steps + 1) as f64;
    Ok(ScoreEstimate {
        grad: acc,
        mll,
        diagnostics: ScoreDiagnostics {
            per_step_mll,
            ess,
            tape_nodes_peak: peak,
        },
    })
}

/// Numerical check that for a deterministic, injective motion model the
/// transition-density score equals the policy score: with
/// x_t = x_{t−1} + c·a_t and π_θ = N(a; θ₀ + θ₁·x_{t−1}, exp(θ₂)²), the
/// pushforward density is f(x_t|x_{t−1}) = π_θ(a*)/|c| at a* = (x_t−x_{t−1})/c,
/// and the 1/|c| Jacobian factor is θ-free.
///
/// Returns (∇θ log f via the taped density route, ∇θ log π(a*) analytically).
pub fn injective_motion_scores(
    theta: [f64; 3],
    x_prev: f64,
    x_next: f64,
    c: f64,
) -> Result<([f64; 3], [f64; 3])> {
    assert!(c != 0.0, "motion map must be injective in the action");
    let mut params = ParamVector::build(&[("toy_policy", 3)]);
    params.values_mut().copy_from_slice(&theta);

    let a_star = (x_next - x_prev) / c;

    // Density route on the tape: log f = log π(a*; θ) − ln|c|, with a* a
    // θ-independent constant.
    let mut tape = Tape::new();
    let t0 = tape.param_leaf(&params, 0);
    let t1 = tape.param_leaf(&params, 1);
    let t2 = tape.param_leaf(&params, 2);
    let xp = tape.leaf(x_prev);
    let av = tape.leaf(a_star);
    let mu = {
        let m = tape.mul(t1, xp);
        tape.add(t0, m)
    };
    let sigma = tape.exp(t2);
    let z = {
        let d = tape.sub(av, mu);
        tape.div(d, sigma)
    };
    let z2 = tape.sq(z);
    let half = tape.affine(z2, 0.5, 0.0);
    let s = tape.add(t2, half);
    let neg = tape.neg(s);
    const LN_2PI: f64 = 1.8378770664093453;
    let log_f = tape.affine(neg, 1.0, -0.5 * LN_2PI - c.abs().ln());
    let mut acc = GradAccumulator::zeros(3);
    tape.backward_into(log_f, &params, &mut acc)?;
    let density_route = [acc.grads[0], acc.grads[1], acc.grads[2]];

    // Policy route, hand-derived.
    let sigma = theta[2].exp();
    let z = (a_star - theta[0] - theta[1] * x_prev) / sigma;
    let policy_route = [z / sigma, z * x_prev / sigma, z * z - 1.0];

    Ok((density_route, policy_route))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{BoxDims, Pose2D};
    use crate::kalman::{self, LinearGaussianSsm, LGSSM_SEGMENT};
    use crate::motion::MotionConfig;
    use crate::obs::{ObsModel, OBS_NET_SEGMENT};
    use crate::policy::{Policy, POLICY_SEGMENT};
    use crate::ssm::{AvData, AvSsm};
    use std::sync::Arc;

    fn lg_params() -> ParamVector {
        kalman::build_params(0.9, 0.6, 0.4, 1.2, 0.8)
    }

    fn lg_eval_params() -> ParamVector {
        // Evaluation point away from the generator so no score coordinate
        // sits near zero.
        kalman::build_params(0.8, 0.75, 0.5, 0.8, 1.1)
    }

    fn lg_data(t_steps: usize, tag: u64) -> Vec<f64> {
        let mut sr = StreamRng::from_path(&[200, tag]);
        kalman::simulate(&lg_params(), t_steps, sr.stream(rng::purpose::SCENE, 0, 0))
    }

    fn av_model_and_params() -> (AvSsm, ParamVector) {
        let model = AvSsm::new(
            ObsModel::new(),
            Policy::simple(),
            MotionConfig::new(0.33).unwrap(),
        );
        let mut params = model.build_params();
        let mut r = StreamRng::from_path(&[201]);
        let seg = params.segment(OBS_NET_SEGMENT).unwrap();
        let arch = model.obs.arch().clone();
        arch.init_params(r.stream(rng::purpose::MISC, 0, 0), &mut params.values_mut()[seg]);
        let pseg = params.segment(POLICY_SEGMENT).unwrap();
        params.values_mut()[pseg].copy_from_slice(&[-0.7, -4.6]);
        (model, params)
    }

    fn av_data(n_obs: usize) -> AvData {
        let pts: Vec<[f64; 2]> = vec![
            [8.0, 4.2],
            [9.0, 4.15],
            [10.0, 4.2],
            [11.0, 4.25],
            [12.0, 4.2],
            [12.1, 5.0],
            [12.0, 5.8],
            [8.0, 5.75],
        ];
        AvData::new(
            BoxDims::new(4.2, 1.8),
            vec![Pose2D::new(0.0, 0.0, 0.0); n_obs],
            (0..n_obs)
                .map(|k| {
                    // Drift the cloud slowly so later observations differ.
                    Arc::new(
                        pts.iter()
                            .map(|p| [p[0] + 0.3 * k as f64, p[1] + 0.1 * k as f64])
                            .collect(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn injective_motion_equivalence() {
        let mut sr = StreamRng::from_path(&[202]);
        let r = sr.stream(rng::purpose::MISC, 0, 0);
        for _ in 0..100 {
            let theta = [
                2.0 * rng::normal(r),
                rng::normal(r),
                0.5 * rng::normal(r),
            ];
            let x_prev = 3.0 * rng::normal(r);
            let x_next = x_prev + rng::normal(r);
            let c = 0.2 + rng::uniform(r);
            let (density, policy) = injective_motion_scores(theta, x_prev, x_next, c).unwrap();
            for k in 0..3 {
                assert!(
                    (density[k] - policy[k]).abs() < 1e-10,
                    "coord {k}: {} vs {}",
                    density[k],
                    policy[k]
                );
            }
        }
    }

    /// On a single-observation sequence with a θ-free initial sampler, the
    /// score-function and pathwise estimators coincide exactly and both
    /// equal frozen-seed finite differences of ℓ̂₀.
    #[test]
    fn zero_step_sequence_estimators_agree() {
        let (model, params) = av_model_and_params();
        let data = av_data(1);
        let n = 64;
        let sr = StreamRng::from_path(&[203]);

        let sefi = score_pf_sefi(&model, &params, &data, n, 4, &sr).unwrap();
        let vanilla = score_pf_biased(&model, &params, &data, n, &sr).unwrap();
        assert!((sefi.mll - vanilla.mll).abs() < 1e-10);

        let mut max_gap = 0.0f64;
        for (a, b) in sefi.grad.grads.iter().zip(&vanilla.grad.grads) {
            max_gap = max_gap.max((a - b).abs());
        }
        assert!(max_gap < 1e-10, "estimator gap {max_gap}");

        // Frozen-seed finite differences on a few coordinates (the filter
        // reruns with the same streams, so ℓ̂₀(θ) is smooth in θ).
        let h = 1e-6;
        let eval = |p: &ParamVector| {
            filter::filter_mll(&model, p, &data, n, 4, &sr).unwrap().mll
        };
        for &i in &[0usize, 300, 1115, 1116, 1117] {
            let mut pp = params.clone();
            pp.values_mut()[i] += h;
            let mut pm = params.clone();
            pm.values_mut()[i] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert!(
                (vanilla.grad.grads[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "coord {i}: ad {} vs fd {fd}",
                vanilla.grad.grads[i]
            );
        }
    }

    #[test]
    fn pathwise_gradient_matches_frozen_seed_fd_multi_step() {
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(4, 1);
        let n = 40;
        let sr = StreamRng::from_path(&[204]);
        let est = score_pf_biased(&model, &params, &data, n, &sr).unwrap();

        // The plain filter is the same function of θ under frozen streams
        // (same draws, same ancestor selections for small h).
        let eval = |p: &ParamVector| filter::filter_mll(&model, p, &data, n, 0, &sr).unwrap().mll;
        assert!((eval(&params) - est.mll).abs() < 1e-9);
        let h = 1e-7;
        let seg = params.segment(LGSSM_SEGMENT).unwrap();
        for i in 0..5 {
            let mut pp = params.clone();
            pp.values_mut()[seg.start + i] += h;
            let mut pm = params.clone();
            pm.values_mut()[seg.start + i] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let ad = est.grad.grads[seg.start + i];
            assert!(
                (ad - fd).abs() < 2e-4 * (1.0 + fd.abs()),
                "coord {i}: ad {ad} vs fd {fd}"
            );
        }
    }

    #[test]
    fn pfnet_alpha_one_is_exactly_vanilla() {
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(6, 2);
        let sr = StreamRng::from_path(&[205]);
        let vanilla = score_pf_biased(&model, &params, &data, 50, &sr).unwrap();
        let pfnet = score_pfnet(&model, &params, &data, 50, 1.0, &sr).unwrap();
        assert_eq!(vanilla.mll.to_bits(), pfnet.mll.to_bits());
        for (a, b) in vanilla.grad.grads.iter().zip(&pfnet.grad.grads) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pfnet_mll_mean_is_alpha_invariant() {
        let model = LinearGaussianSsm;
        let params = lg_params();
        let data = lg_data(6, 3);
        let n_seeds = 200;
        let collect = |alpha: f64| -> Vec<f64> {
            (0..n_seeds)
                .map(|k| {
                    let sr = StreamRng::from_path(&[206, k as u64]);
                    score_pfnet(&model, &params, &data, 100, alpha, &sr)
                        .unwrap()
                        .mll
                })
                .collect()
        };
        let at_08 = collect(0.8);
        let at_10 = collect(1.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| {
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        let (m8, m10) = (mean(&at_08), mean(&at_10));
        let se = ((var(&at_08, m8) + var(&at_10, m10)) / n_seeds as f64).sqrt();
        assert!(
            (m8 - m10).abs() < 3.0 * se,
            "mll means {m8} vs {m10} (se {se})"
        );
    }

    #[test]
    fn sefi_reads_no_motion_jacobians() {
        let (model, params) = av_model_and_params();
        let data = av_data(4);
        let sr = StreamRng::from_path(&[207]);
        let est = score_pf_sefi(&model, &params, &data, 32, 2, &sr).unwrap();
        assert!(est.grad.is_finite());
        assert_eq!(model.jacobian_evals(), 0);

        let est2 = score_pf_biased(&model, &params, &data, 32, &sr).unwrap();
        assert!(est2.grad.is_finite());
        assert!(
            model.jacobian_evals() > 0,
            "pathwise backward must evaluate motion Jacobians"
        );
    }

    #[test]
    fn sefi_matches_kalman_score() {
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(10, 4);
        let exact = kalman::kalman_score_fd(&params, &data);
        let n_seeds = 20;
        let mut mean = [0.0f64; 5];
        for k in 0..n_seeds {
            let sr = StreamRng::from_path(&[208, k as u64]);
            let est = score_pf_sefi(&model, &params, &data, 3000, 10, &sr).unwrap();
            let seg = params.segment(LGSSM_SEGMENT).unwrap();
            for i in 0..5 {
                mean[i] += est.grad.grads[seg.start + i] / n_seeds as f64;
            }
        }
        for i in 0..5 {
            let rel = (mean[i] - exact[i]).abs() / exact[i].abs().max(0.5);
            assert!(
                rel < 0.15,
                "coord {i}: mean {} vs exact {} (rel {rel})",
                mean[i],
                exact[i]
            );
        }
    }

    #[test]
    fn lag_truncation_bias_shrinks_with_lag() {
        // Short-lag smoothing truncates ancestry information; its score bias
        // should fall as L grows.
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(15, 5);
        let exact = kalman::kalman_score_fd(&params, &data);
        let n_seeds = 30;
        let seg = params.segment(LGSSM_SEGMENT).unwrap();
        let bias_at = |lag: usize| -> f64 {
            let mut mean = [0.0f64; 5];
            for k in 0..n_seeds {
                let sr = StreamRng::from_path(&[209, lag as u64, k as u64]);
                let est = score_pf_sefi(&model, &params, &data, 1500, lag, &sr).unwrap();
                for i in 0..5 {
                    mean[i] += est.grad.grads[seg.start + i] / n_seeds as f64;
                }
            }
            // Worst relative deviation across coordinates.
            (0..5)
                .map(|i| (mean[i] - exact[i]).abs() / exact[i].abs().max(0.5))
                .fold(0.0, f64::max)
        };
        let b0 = bias_at(0);
        let b10 = bias_at(10);
        assert!(
            b10 < b0,
            "lag-10 bias {b10} should be below lag-0 bias {b0}"
        );
    }

    #[test]
    fn estimator_spec_names() {
        assert_eq!(EstimatorSpec::PfSefi { lag: 8 }.name(), "pf_sefi");
        assert_eq!(EstimatorSpec::Pf.name(), "pf");
        assert_eq!(EstimatorSpec::Pfnet { alpha: 0.8 }.name(), "pfnet");
        // Dispatch goes to the right implementation.
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(3, 6);
        let sr = StreamRng::from_path(&[210]);
        let a = score_trajectory(&model, &params, &data, EstimatorSpec::Pf, 30, &sr).unwrap();
        let b = score_pf_biased(&model, &params, &data, 30, &sr).unwrap();
        assert_eq!(a.mll.to_bits(), b.mll.to_bits());
    }

    #[test]
    fn sefi_weight_total_counts_columns() {
        let model = LinearGaussianSsm;
        let params = lg_eval_params();
        let data = lg_data(7, 7);
        let sr = StreamRng::from_path(&[211]);
        let est = score_pf_sefi(&model, &params, &data, 100, 3, &sr).unwrap();
        assert_eq!(est.grad.weight_total, 8.0);
        assert_eq!(est.diagnostics.per_step_mll.len(), 8);
        assert_eq!(est.diagnostics.ess.len(), 8);
    }
}

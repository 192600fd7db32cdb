//! Bootstrap particle filter with stored actions, an ancestry ring buffer
//! for fixed-lag smoothing, and the marginal log-likelihood estimate.
//!
//! Each step: resample ancestors from the previous observation weights,
//! propagate through the policy + motion model, reweigh by the new
//! observation, and push a column (states, actions, parents, copies of the
//! chosen previous states) into the lag buffer. The buffer keeps the last
//! L+1 columns; a column leaving the buffer is "emitted" exactly once with
//! the smoothing weights current at that moment — the hook the score
//! estimator and the lag-smoothed state means both hang off.
//!
//! Randomness is addressed by (purpose, time, particle) streams, so results
//! are independent of scheduling and thread count.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::autodiff::ParamVector;
use crate::error::Error;
use crate::numerics::logsumexp;
use crate::rng::{self, StreamRng};
use crate::ssm::Ssm;
use crate::Result;

/// One time slice of the ancestry buffer.
#[derive(Clone, Debug)]
pub struct AncestryColumn<S, A> {
    pub t: usize,
    pub states: Vec<S>,
    /// a_t per slot; empty in the t=0 column (no action leads into t=0).
    pub actions: Vec<A>,
    /// Slot index into the previous column; identity in the t=0 column.
    pub parents: Vec<u32>,
    /// Copy of the chosen predecessor states (the previous column may have
    /// left the buffer by the time this column is emitted); empty at t=0.
    pub prev_states: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct ParticleCloud<S, A> {
    pub states: Vec<S>,
    /// Unnormalized: log g(y_t | x_t^i).
    pub log_weights: Vec<f64>,
    /// Actions taken into the current time; empty at t=0.
    pub actions_last: Vec<A>,
    /// Last min(t, L)+1 columns, oldest in front.
    pub buffer: VecDeque<AncestryColumn<S, A>>,
    pub t: usize,
    pub lag: usize,
}

/// A log-weight at or below this is treated as "effectively zero density".
/// Observation models floor per-point log-densities at a large negative
/// surrogate instead of −∞, so a cloud whose *best* particle sits below this
/// threshold has no particle the model can explain at all — the object is
/// lost. The margin is enormous: a healthy best particle scores within a few
/// tens of nats of the truth, while one zero-density point already costs
/// −1000.
pub const EFFECTIVE_ZERO_LOG_WEIGHT: f64 = -900.0;

/// Tracking-failure check shared by every weighing site: all weights
/// effectively zero (or the normalizer non-finite) means the object is lost.
pub(crate) fn check_weights(log_weights: &[f64], step: usize) -> Result<()> {
    let best = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !logsumexp(log_weights).is_finite() || best <= EFFECTIVE_ZERO_LOG_WEIGHT {
        return Err(Error::TrackingFailure {
            step,
            reason: format!("all particle weights effectively vanished (best log-weight {best:.1})"),
        });
    }
    Ok(())
}

/// Normalized weights from unnormalized log-weights, via logsumexp.
/// Errors when every weight is −∞ (or any is NaN): the cloud lost the
/// object.
pub fn normalized_weights(log_weights: &[f64], step: usize) -> Result<Vec<f64>> {
    let lse = logsumexp(log_weights);
    if !lse.is_finite() {
        return Err(Error::TrackingFailure {
            step,
            reason: "all particle weights vanished".into(),
        });
    }
    Ok(log_weights.iter().map(|lw| (lw - lse).exp()).collect())
}

/// Effective sample size 1/Σwᵢ² of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Per-step MLL increment log(1/N Σ exp(log wᵢ)).
pub fn mll_increment(log_weights: &[f64]) -> f64 {
    logsumexp(log_weights) - (log_weights.len() as f64).ln()
}

fn inverse_cdf_draws(
    probs: &[f64],
    n_out: usize,
    sr: &StreamRng,
    t: usize,
) -> Vec<u32> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cdf.push(acc);
    }
    (0..n_out)
        .map(|i| {
            let u = rng::uniform(&mut sr.at(rng::purpose::RESAMPLE, t, i));
            let j = cdf.partition_point(|&c| c <= u);
            j.min(probs.len() - 1) as u32
        })
        .collect()
}

/// Multinomial resampling: N i.i.d. categorical draws from the normalized
/// weights, one RNG stream per output slot.
pub fn resample_multinomial(
    log_weights: &[f64],
    n_out: usize,
    sr: &StreamRng,
    t: usize,
) -> Result<Vec<u32>> {
    let w = normalized_weights(log_weights, t)?;
    Ok(inverse_cdf_draws(&w, n_out, sr, t))
}

/// Soft resampling: draw from qᵢ = α·wᵢ + (1−α)/N and return the
/// ln(w/q) corrective log-weight for each draw. α=1 is plain multinomial
/// with zero correctives; α=0 is uniform ancestry with ln(N·w) correctives.
pub fn resample_soft(
    log_weights: &[f64],
    n_out: usize,
    alpha: f64,
    sr: &StreamRng,
    t: usize,
) -> Result<(Vec<u32>, Vec<f64>)> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
    let w = normalized_weights(log_weights, t)?;
    let n = w.len() as f64;
    let q: Vec<f64> = w.iter().map(|&wi| alpha * wi + (1.0 - alpha) / n).collect();
    let anc = inverse_cdf_draws(&q, n_out, sr, t);
    let corrective = anc
        .iter()
        .map(|&a| {
            let a = a as usize;
            w[a].ln() - q[a].ln()
        })
        .collect();
    Ok((anc, corrective))
}

/// Initialize the cloud from the model's init proposal and weigh by y₀ plus
/// the proposal's ln μ/q importance ratio (zero when the model proposes from
/// its prior). Returns the cloud and ℓ̂₀.
pub fn init<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    lag: usize,
    sr: &StreamRng,
) -> Result<(ParticleCloud<M::State, M::Act>, f64)> {
    if n < 2 {
        return Err(Error::Config(
            "particle count must be at least 2 (resampling is undefined on a single particle)"
                .into(),
        ));
    }
    let pairs: Vec<(M::State, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = sr.at(rng::purpose::INIT, 0, i);
            let (s, ratio) = model.sample_init_proposal(params, data, &mut r);
            let lw = ratio + model.obs_loglik(params, data, 0, &s);
            (s, lw)
        })
        .collect();
    let states: Vec<M::State> = pairs.iter().map(|(s, _)| *s).collect();
    let log_weights: Vec<f64> = pairs.iter().map(|(_, lw)| *lw).collect();
    check_weights(&log_weights, 0)?;
    let inc = mll_increment(&log_weights);
    let mut buffer = VecDeque::with_capacity(lag + 2);
    buffer.push_back(AncestryColumn {
        t: 0,
        states: states.clone(),
        actions: Vec::new(),
        parents: (0..n as u32).collect(),
        prev_states: Vec::new(),
    });
    Ok((
        ParticleCloud {
            states,
            log_weights,
            actions_last: Vec::new(),
            buffer,
            t: 0,
            lag,
        },
        inc,
    ))
}

/// Advance the cloud one step: resample by the previous weights, propagate,
/// reweigh by y_t. Returns the MLL increment.
pub fn step<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    cloud: &mut ParticleCloud<M::State, M::Act>,
    sr: &StreamRng,
) -> Result<f64> {
    let t = cloud.t + 1;
    let n = cloud.states.len();
    let anc = resample_multinomial(&cloud.log_weights, n, sr, t)?;
    let rows: Vec<(M::State, M::Act, M::State, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let prev = cloud.states[anc[i] as usize];
            let mut r = sr.at(rng::purpose::ACTION, t, i);
            let (a, s) = model.sample_transition(params, &prev, &mut r);
            let lw = model.obs_loglik(params, data, t, &s);
            (prev, a, s, lw)
        })
        .collect();
    let prev_states: Vec<M::State> = rows.iter().map(|r| r.0).collect();
    let actions: Vec<M::Act> = rows.iter().map(|r| r.1).collect();
    let states: Vec<M::State> = rows.iter().map(|r| r.2).collect();
    let log_weights: Vec<f64> = rows.iter().map(|r| r.3).collect();
    check_weights(&log_weights, t)?;
    let inc = mll_increment(&log_weights);
    cloud.buffer.push_back(AncestryColumn {
        t,
        states: states.clone(),
        actions: actions.clone(),
        parents: anc,
        prev_states,
    });
    while cloud.buffer.len() > cloud.lag + 1 {
        cloud.buffer.pop_front();
    }
    cloud.states = states;
    cloud.log_weights = log_weights;
    cloud.actions_last = actions;
    cloud.t = t;
    Ok(inc)
}

/// Smoothing weights for the column at `target_t`: walk each current
/// particle's ancestry down to that column and aggregate the current
/// normalized weights per unique slot.
pub fn aggregated_column_weights<S, A>(
    cloud: &ParticleCloud<S, A>,
    target_t: usize,
    w_now: &[f64],
) -> Vec<f64> {
    let n = w_now.len();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for col in cloud.buffer.iter().rev() {
        if col.t == target_t {
            break;
        }
        for slot in idx.iter_mut() {
            *slot = col.parents[*slot as usize];
        }
    }
    let mut agg = vec![0.0; n];
    for (k, &w) in w_now.iter().enumerate() {
        agg[idx[k] as usize] += w;
    }
    agg
}

/// The weighted length-(min(t,L)+1) ancestral paths of the current cloud:
/// the particle approximation of the fixed-lag smoothing distribution.
/// Paths are oldest-first; weights are the current normalized weights.
pub fn lag_smoothed_paths<S: Copy, A>(
    cloud: &ParticleCloud<S, A>,
) -> Result<(Vec<Vec<S>>, Vec<f64>)> {
    let w = normalized_weights(&cloud.log_weights, cloud.t)?;
    let n = w.len();
    let depth = cloud.buffer.len();
    let mut paths: Vec<Vec<S>> = vec![Vec::with_capacity(depth); n];
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for col in cloud.buffer.iter().rev() {
        for (i, slot) in idx.iter_mut().enumerate() {
            paths[i].push(col.states[*slot as usize]);
            *slot = col.parents[*slot as usize];
        }
    }
    for p in paths.iter_mut() {
        p.reverse();
    }
    Ok((paths, w))
}

/// One emitted smoothing column: states/actions at `t` with weights from
/// the latest time that still retained the column.
pub struct Emission<'a, S, A> {
    pub t: usize,
    pub states: &'a [S],
    /// Empty at t=0.
    pub actions: &'a [A],
    /// Empty at t=0.
    pub prev_states: &'a [S],
    /// Aggregated smoothing weights per slot; sums to 1; mostly zeros once
    /// ancestries have collapsed.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FilterResult<S> {
    /// ℓ̂_T(θ).
    pub mll: f64,
    pub per_step_mll: Vec<f64>,
    pub filtered_means: Vec<S>,
    pub lag_smoothed_means: Vec<S>,
    pub ess: Vec<f64>,
}

/// Run the filter over the whole sequence, invoking `on_emit` exactly once
/// per time index with that column's smoothing weights (at lag L, column t
/// is emitted at time min(t+L, T)).
pub fn run_filter<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    lag: usize,
    sr: &StreamRng,
    mut on_emit: impl FnMut(&Emission<'_, M::State, M::Act>) -> Result<()>,
) -> Result<FilterResult<M::State>> {
    let t_steps = model.steps(data);
    let (mut cloud, inc0) = init(model, params, data, n, lag, sr)?;
    let mut per_step_mll = Vec::with_capacity(t_steps + 1);
    per_step_mll.push(inc0);
    let mut filtered_means = Vec::with_capacity(t_steps + 1);
    let mut lag_smoothed_means = vec![None; t_steps + 1];
    let mut ess = Vec::with_capacity(t_steps + 1);

    let emit_front = |cloud: &ParticleCloud<M::State, M::Act>,
                          w_now: &[f64],
                          target_t: usize,
                          on_emit: &mut dyn FnMut(&Emission<'_, M::State, M::Act>) -> Result<()>,
                          smoothed: &mut Vec<Option<M::State>>|
     -> Result<()> {
        let col = cloud
            .buffer
            .iter()
            .find(|c| c.t == target_t)
            .expect("emitted column must still be buffered");
        let agg = aggregated_column_weights(cloud, target_t, w_now);
        smoothed[target_t] = Some(model.mean_state(&col.states, &agg));
        on_emit(&Emission {
            t: target_t,
            states: &col.states,
            actions: &col.actions,
            prev_states: &col.prev_states,
            weights: agg,
        })
    };

    let mut emitted_upto: Option<usize> = None; // highest t emitted so far
    {
        let w0 = normalized_weights(&cloud.log_weights, 0)?;
        filtered_means.push(model.mean_state(&cloud.states, &w0));
        ess.push(effective_sample_size(&w0));
        if lag == 0 {
            emit_front(&cloud, &w0, 0, &mut on_emit, &mut lag_smoothed_means)?;
            emitted_upto = Some(0);
        }
    }

    for t in 1..=t_steps {
        let inc = step(model, params, data, &mut cloud, sr)?;
        per_step_mll.push(inc);
        let w = normalized_weights(&cloud.log_weights, t)?;
        filtered_means.push(model.mean_state(&cloud.states, &w));
        ess.push(effective_sample_size(&w));
        if t >= lag {
            let target = t - lag;
            emit_front(&cloud, &w, target, &mut on_emit, &mut lag_smoothed_means)?;
            emitted_upto = Some(target);
        }
    }

    // Tail: everything still unemitted smooths against the final weights.
    let w_final = normalized_weights(&cloud.log_weights, t_steps)?;
    let start = emitted_upto.map(|t| t + 1).unwrap_or(0);
    for target in start..=t_steps {
        emit_front(
            &cloud,
            &w_final,
            target,
            &mut on_emit,
            &mut lag_smoothed_means,
        )?;
    }

    Ok(FilterResult {
        mll: per_step_mll.iter().sum(),
        per_step_mll,
        filtered_means,
        lag_smoothed_means: lag_smoothed_means
            .into_iter()
            .map(|m| m.expect("every time index emitted once"))
            .collect(),
        ess,
    })
}

/// Filter without smoothing consumers: MLL, means, diagnostics.
pub fn filter_mll<M: Ssm>(
    model: &M,
    params: &ParamVector,
    data: &M::Data,
    n: usize,
    lag: usize,
    sr: &StreamRng,
) -> Result<FilterResult<M::State>> {
    run_filter(model, params, data, n, lag, sr, |_| Ok(()))
}

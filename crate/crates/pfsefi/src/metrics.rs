//! Held-out evaluation metrics for the object-tracking model.
//!
//! All trajectory-level quantities are averaged with equal weight per
//! trajectory; the log-likelihood is normalized per observed step (T+1
//! observations for T transitions) so sequences of different lengths are
//! comparable.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::error::Error;
use crate::filter::filter_mll;
use crate::geom::{wrap_angle, ObjectTrajectory, VehicleState};
use crate::rng::StreamRng;
use crate::ssm::{AvData, AvSsm, Ssm};
use crate::Result;

/// Stream-path tag separating evaluation randomness from training
/// randomness under the same seed.
pub const EVAL_PATH_TAG: u64 = 2;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean log-marginal-likelihood per observed step, nats.
    pub mll: f64,
    /// Average displacement error of the lag-smoothed position estimates, m.
    pub ade_smooth: f64,
    /// Average displacement error of the filtered position estimates, m.
    pub ade_filter: f64,
    /// Average absolute yaw error of the lag-smoothed estimates, rad.
    pub aye_smooth: f64,
    /// Average absolute yaw error of the filtered estimates, rad.
    pub aye_filter: f64,
    /// Average observation log-likelihood at the ground-truth states, nats
    /// per observed step.
    pub aotll: f64,
    /// Average policy log-likelihood of the ground-truth actions at the
    /// ground-truth previous states, nats per transition. Absent when the
    /// dataset carries no actions.
    pub aptll: Option<f64>,
    /// Trajectories dropped because the filter lost track.
    pub failures: usize,
    /// Trajectories that entered the averages.
    pub evaluated: usize,
}

impl MetricsReport {
    /// Column header for training logs. `mll` and `aotll` are per observed
    /// step; `aptll` per transition; errors are meters/radians.
    pub fn csv_header() -> &'static str {
        "train_step,mll,ade_smooth,ade_filter,aye_smooth,aye_filter,aotll,aptll,failures"
    }

    pub fn csv_row(&self, train_step: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            train_step,
            self.mll,
            self.ade_smooth,
            self.ade_filter,
            self.aye_smooth,
            self.aye_filter,
            self.aotll,
            self.aptll.unwrap_or(f64::NAN),
            self.failures
        )
    }
}

/// Mean position displacement and mean absolute (wrapped) yaw difference
/// between two equally long state sequences.
pub fn displacement_yaw_errors(est: &[VehicleState], truth: &[VehicleState]) -> (f64, f64) {
    assert_eq!(est.len(), truth.len());
    assert!(!est.is_empty());
    let mut de = 0.0;
    let mut dy = 0.0;
    for (e, t) in est.iter().zip(truth) {
        de += (e.pose.x - t.pose.x).hypot(e.pose.y - t.pose.y);
        dy += wrap_angle(e.pose.theta - t.pose.theta).abs();
    }
    (de / est.len() as f64, dy / est.len() as f64)
}

/// Mean observation log-likelihood per step with the state pinned to ground
/// truth. Isolates observation-model quality from tracking quality.
pub fn average_obs_loglik_at_truth(
    model: &AvSsm,
    params: &ParamVector,
    traj: &ObjectTrajectory,
) -> Result<f64> {
    let states = truth_states(traj)?;
    let data = AvData::from_trajectory(traj);
    let total: f64 = states
        .iter()
        .enumerate()
        .map(|(t, s)| model.obs_loglik(params, &data, t, s))
        .sum();
    Ok(total / states.len() as f64)
}

/// Mean policy log-likelihood per transition of the recorded actions at the
/// recorded previous states, or None if the dataset has no actions.
pub fn average_policy_loglik_at_truth(
    model: &AvSsm,
    params: &ParamVector,
    traj: &ObjectTrajectory,
) -> Result<Option<f64>> {
    let actions = match &traj.actions {
        Some(a) if !a.is_empty() => a,
        _ => return Ok(None),
    };
    let states = truth_states(traj)?;
    let total: f64 = actions
        .iter()
        .enumerate()
        .map(|(t, a)| model.policy.logpdf(params, &states[t], a))
        .sum();
    Ok(Some(total / actions.len() as f64))
}

fn truth_states(traj: &ObjectTrajectory) -> Result<&[VehicleState]> {
    traj.states
        .as_deref()
        .ok_or_else(|| Error::Config("trajectory carries no ground-truth states".into()))
}

/// Run the particle filter over every trajectory and aggregate the report.
///
/// Trajectories where the filter loses track are excluded from the averages
/// and counted in `failures`; an error is returned only if every trajectory
/// fails. Randomness is addressed by (eval seed, trajectory index), so the
/// same call is reproducible and disjoint from any training stream.
pub fn evaluate(
    model: &AvSsm,
    params: &ParamVector,
    trajectories: &[ObjectTrajectory],
    n_particles: usize,
    lag: usize,
    eval_seed: u64,
) -> Result<MetricsReport> {
    if trajectories.is_empty() {
        return Err(Error::Config("evaluation needs at least one trajectory".into()));
    }
    let mut sums = MetricsReport {
        mll: 0.0,
        ade_smooth: 0.0,
        ade_filter: 0.0,
        aye_smooth: 0.0,
        aye_filter: 0.0,
        aotll: 0.0,
        aptll: None,
        failures: 0,
        evaluated: 0,
    };
    let mut aptll_sum = 0.0;
    let mut aptll_count = 0usize;
    let mut last_failure = String::new();

    for (idx, traj) in trajectories.iter().enumerate() {
        traj.validate().map_err(|e| Error::Dataset {
            line: idx + 1,
            msg: format!("trajectory {idx}: {e}"),
        })?;
        let truth = truth_states(traj)?;
        let data = AvData::from_trajectory(traj);
        let sr = StreamRng::from_path(&[eval_seed, EVAL_PATH_TAG, idx as u64]);
        let res = match filter_mll(model, params, &data, n_particles, lag, &sr) {
            Ok(r) => r,
            Err(Error::TrackingFailure { step, reason }) => {
                sums.failures += 1;
                last_failure = format!("trajectory {idx} at step {step}: {reason}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let steps = truth.len() as f64;
        sums.mll += res.mll / steps;
        let (ade_s, aye_s) = displacement_yaw_errors(&res.lag_smoothed_means, truth);
        let (ade_f, aye_f) = displacement_yaw_errors(&res.filtered_means, truth);
        sums.ade_smooth += ade_s;
        sums.aye_smooth += aye_s;
        sums.ade_filter += ade_f;
        sums.aye_filter += aye_f;
        sums.aotll += average_obs_loglik_at_truth(model, params, traj)?;
        if let Some(p) = average_policy_loglik_at_truth(model, params, traj)? {
            aptll_sum += p;
            aptll_count += 1;
        }
        sums.evaluated += 1;
    }

    if sums.evaluated == 0 {
        return Err(Error::TrackingFailure {
            step: 0,
            reason: format!(
                "all {} trajectories failed during evaluation; last: {last_failure}",
                trajectories.len()
            ),
        });
    }
    let n = sums.evaluated as f64;
    sums.mll /= n;
    sums.ade_smooth /= n;
    sums.ade_filter /= n;
    sums.aye_smooth /= n;
    sums.aye_filter /= n;
    sums.aotll /= n;
    sums.aptll = if aptll_count > 0 { Some(aptll_sum / aptll_count as f64) } else { None };
    Ok(sums)
}

//! State-space-model abstraction: everything the particle filter and the
//! gradient estimators need from a model, with the autonomous-vehicle
//! tracking model as the main implementation.
//!
//! A model is a compositional SSM: actions a_t ~ π_θ(·|x_{t−1}) drive a
//! deterministic transition x_t = τ(x_{t−1}, a_t), and observations weigh
//! particles through g_θ(y_t|x_t). Two gradient routes are exposed:
//!
//! - score-function hooks (`record_obs_loglik`, `record_policy_loglik`,
//!   `record_init_loglik`): log-densities recorded at *fixed* states and
//!   actions, so gradients flow only into θ;
//! - pathwise hooks (`record_init`, `record_transition`,
//!   `record_obs_loglik_vars`): a reparameterized rollout whose states live
//!   on the tape, used by the estimators that differentiate through the
//!   particle trajectories.
//!
//! Both routes must consume identical random variates in identical order so
//! a fixed seed pins the same trajectory through either code path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamVector, Tape, Var};
use crate::geom::{Action, BoxDims, Observation, ObjectTrajectory, Pose2D, VehicleState};
use crate::motion::{propagate, record_propagate, MotionConfig};
use crate::obs::{ObsModel, OBS_NET_SEGMENT};
use crate::policy::{Policy, POLICY_SEGMENT};
use crate::rng;

pub trait Ssm: Sync {
    type State: Copy + Send + Sync + std::fmt::Debug;
    type Act: Copy + Send + Sync + std::fmt::Debug;
    /// Tape handles for one particle's state in the pathwise route.
    type StateVars: Copy;
    /// One trajectory's observations plus side information.
    type Data: Sync;

    /// T: number of transitions; observations exist at t = 0..=T.
    fn steps(&self, data: &Self::Data) -> usize;

    fn sample_init(
        &self,
        params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> Self::State;

    /// Draw the t=0 particle from the filter's init *proposal* and return
    /// (state, ln μ(x₀) − ln q₀(x₀)). The default proposes from the prior μ
    /// itself (ratio 0). A model may override it to aim the initial cloud
    /// using the observations — the importance ratio folded into the t=0
    /// weight keeps the filter, the likelihood estimate, and every gradient
    /// estimator targeting the unchanged μ.
    fn sample_init_proposal(
        &self,
        params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> (Self::State, f64) {
        (self.sample_init(params, data, rng), 0.0)
    }

    /// a_t ~ π(·|x_{t−1}), then the deterministic transition.
    fn sample_transition(
        &self,
        params: &ParamVector,
        prev: &Self::State,
        rng: &mut ChaCha8Rng,
    ) -> (Self::Act, Self::State);

    fn obs_loglik(&self, params: &ParamVector, data: &Self::Data, t: usize, state: &Self::State)
        -> f64;

    /// Weighted mean of states under normalized weights (circular where
    /// needed).
    fn mean_state(&self, states: &[Self::State], weights: &[f64]) -> Self::State;

    // ---- score-function route: values fixed, gradients w.r.t. θ only ----

    fn record_obs_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        t: usize,
        state: &Self::State,
    ) -> Var;

    fn record_policy_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &Self::State,
        act: &Self::Act,
    ) -> Var;

    /// θ-dependent initial density, if the model has one. The tracking
    /// prior is built from the first observation and carries no θ, so the
    /// default is "no term".
    fn record_init_loglik(
        &self,
        _tape: &mut Tape,
        _params: &ParamVector,
        _state: &Self::State,
    ) -> Option<Var> {
        None
    }

    // ---- pathwise route: reparameterized states on the tape ----

    fn record_init(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> Self::StateVars;

    /// Taped counterpart of [`Ssm::sample_init_proposal`]: the drawn state as
    /// tape handles plus the θ-free log-ratio ln μ − ln q to add to the t=0
    /// log-weight value. Must consume the same draws as the plain route.
    fn record_init_proposal(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> (Self::StateVars, f64) {
        (self.record_init(tape, params, data, rng), 0.0)
    }

    fn record_transition(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &Self::StateVars,
        rng: &mut ChaCha8Rng,
    ) -> Self::StateVars;

    fn record_obs_loglik_vars(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        t: usize,
        vars: &Self::StateVars,
    ) -> Var;

    fn state_value(&self, tape: &Tape, vars: &Self::StateVars) -> Self::State;
}

/// One object trajectory from the filter's point of view: known box
/// dimensions, the recorded ego poses, the point sets, and a deterministic
/// pose/velocity summary of the first few observations used by the init
/// proposal.
#[derive(Clone, Debug)]
pub struct AvData {
    pub dims: BoxDims,
    pub av_poses: Vec<Pose2D>,
    pub points: Vec<Arc<Vec<[f64; 2]>>>,
    pub fit: InitFit,
}

impl AvData {
    pub fn new(dims: BoxDims, av_poses: Vec<Pose2D>, points: Vec<Arc<Vec<[f64; 2]>>>) -> Self {
        let fit = InitFit::from_points(&points, &dims);
        AvData { dims, av_poses, points, fit }
    }

    pub fn from_trajectory(traj: &ObjectTrajectory) -> Self {
        AvData::new(
            traj.dims,
            traj.av_poses.clone(),
            traj.observations.iter().map(|o| Arc::new(o.points.clone())).collect(),
        )
    }

    pub fn observation(&self, t: usize) -> Observation {
        Observation {
            points: self.points[t].as_ref().clone(),
            timestamp_index: t,
        }
    }
}

/// Initial-state prior for tracking, anchored on the first observation:
/// position N(centroid, 1 m²) per axis, heading = polygon principal axis
/// ± N(0, 0.3 rad) with a fair 180° flip, speed U[0, 15] m/s, curvature
/// N(0, 0.05).
pub const INIT_POS_STD: f64 = 1.0;
pub const INIT_HEADING_STD: f64 = 0.3;
pub const INIT_SPEED_MAX: f64 = 15.0;
pub const INIT_CURVATURE_STD: f64 = 0.05;

/// Centroid and principal-axis angle of a point set. The axis is defined
/// mod π; the flip in the prior covers the ambiguity.
pub fn centroid_and_principal_axis(points: &[[f64; 2]]) -> ([f64; 2], f64) {
    let n = points.len().max(1) as f64;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for p in points {
        cx += p[0];
        cy += p[1];
    }
    cx /= n;
    cy /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - cx;
        let dy = p[1] - cy;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let angle = if sxx + syy < 1e-12 {
        0.0
    } else {
        0.5 * (2.0 * sxy).atan2(sxx - syy)
    };
    ([cx, cy], angle)
}

/// Geometry the init-proposal fit assumes about sensor returns: points land
/// inward of the outline by roughly these offsets with roughly these Laplace
/// scales, uniformly along their edge. Only proposal quality depends on the
/// values; the importance ratio keeps the filter exact regardless.
const FIT_MU_LONG: f64 = 0.47;
const FIT_B_LONG: f64 = 0.17;
const FIT_MU_LAT: f64 = 0.40;
const FIT_B_LAT: f64 = 0.13;
/// Frames used for the orientation fit (longer window: heading drifts
/// linearly in time, so no curvature bias) and for the center fit (shorter
/// window: a turning center track bends away from a straight line).
const FIT_FRAMES: usize = 6;
const FIT_CENTER_FRAMES: usize = 4;

/// Box pose fitted to one frame's points: greedy coordinate descent on the
/// negative log-density of an equal-weight mixture over the four edge
/// segments (uniform along the segment, inward-offset Laplace across it).
/// Unlike a nearest-edge distance, attributing an interior point to a side
/// edge costs its full perpendicular displacement, so the box cannot slide
/// along its own axis for free.
fn fit_box_pose(
    points: &[[f64; 2]],
    dims: &BoxDims,
    start_center: [f64; 2],
    start_axis: f64,
) -> ([f64; 2], f64) {
    let hl = 0.5 * dims.length;
    let hw = 0.5 * dims.width;
    let lap = |beta: f64, mu: f64, b: f64| (-(beta + mu).abs() / b).exp() / (2.0 * b);
    let cost = |cx: f64, cy: f64, th: f64| -> f64 {
        let (s, c) = th.sin_cos();
        let mut nll = 0.0;
        for p in points {
            let dx = p[0] - cx;
            let dy = p[1] - cy;
            let u = c * dx + s * dy;
            let w = -s * dx + c * dy;
            let mut dens = 0.0;
            if w.abs() <= hw {
                let along = 1.0 / (2.0 * hw);
                dens += along * lap(u - hl, FIT_MU_LONG, FIT_B_LONG);
                dens += along * lap(-u - hl, FIT_MU_LONG, FIT_B_LONG);
            }
            if u.abs() <= hl {
                let along = 1.0 / (2.0 * hl);
                dens += along * lap(w - hw, FIT_MU_LAT, FIT_B_LAT);
                dens += along * lap(-w - hw, FIT_MU_LAT, FIT_B_LAT);
            }
            nll -= (0.25 * dens).max(1e-9).ln();
        }
        nll
    };
    let descend = |mut cx: f64, mut cy: f64, mut th: f64| -> (f64, f64, f64, f64) {
        let mut best = cost(cx, cy, th);
        for scale in [0.6, 0.3, 0.15, 0.07, 0.03, 0.015] {
            let ath = 0.5 * scale;
            for _ in 0..12 {
                let mut improved = false;
                for (dx, dy, dth) in [
                    (scale, 0.0, 0.0),
                    (-scale, 0.0, 0.0),
                    (0.0, scale, 0.0),
                    (0.0, -scale, 0.0),
                    (0.0, 0.0, ath),
                    (0.0, 0.0, -ath),
                ] {
                    let c2 = cost(cx + dx, cy + dy, th + dth);
                    if c2 + 1e-12 < best {
                        cx += dx;
                        cy += dy;
                        th += dth;
                        best = c2;
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        (cx, cy, th, best)
    };
    // Orientation multi-start: the objective has shallow local minima when a
    // frame covers mostly one edge.
    let mut out = descend(start_center[0], start_center[1], start_axis);
    for da in [-0.25, 0.25] {
        let cand = descend(start_center[0], start_center[1], start_axis + da);
        if cand.3 < out.3 {
            out = cand;
        }
    }
    ([out.0, out.1], out.2)
}

/// Least-squares line through (t, v) pairs: (intercept, slope).
fn line_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let m = pts.len() as f64;
    let t_bar = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let v_bar = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let mut stv = 0.0;
    let mut stt = 0.0;
    for (t, v) in pts {
        let dt = t - t_bar;
        stv += dt * (v - v_bar);
        stt += dt * dt;
    }
    let slope = if stt > 0.0 { stv / stt } else { 0.0 };
    (v_bar - slope * t_bar, slope)
}

/// Line fit that discards up to two gross outliers (a badly fitted frame
/// would otherwise pollute the velocity estimate).
fn robust_line_fit(pts: &[(f64, f64)], reject: f64) -> (f64, f64) {
    let mut kept: Vec<(f64, f64)> = pts.to_vec();
    for _ in 0..2 {
        let (i0, s0) = line_fit(&kept);
        if kept.len() <= 2 {
            return (i0, s0);
        }
        let (worst, res) = kept
            .iter()
            .enumerate()
            .map(|(i, (t, v))| (i, (v - i0 - s0 * t).abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if res <= reject {
            return (i0, s0);
        }
        kept.remove(worst);
    }
    line_fit(&kept)
}

/// Least-squares parabola v = a + b t + c t² through (t, v) pairs, with one
/// round of gross-outlier rejection. Needs at least four points.
fn robust_quad_fit(pts: &[(f64, f64)], reject: f64) -> (f64, f64, f64) {
    fn quad(pts: &[(f64, f64)]) -> (f64, f64, f64) {
        let (mut s0, mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
        for (t, v) in pts {
            let t2 = t * t;
            s0 += 1.0;
            s1 += t;
            s2 += t2;
            s3 += t2 * t;
            s4 += t2 * t2;
            r0 += v;
            r1 += t * v;
            r2 += t2 * v;
        }
        // Solve the 3×3 normal equations by elimination.
        let mut m = [[s0, s1, s2, r0], [s1, s2, s3, r1], [s2, s3, s4, r2]];
        for col in 0..3 {
            let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()));
            let p = pivot.unwrap();
            m.swap(col, p);
            let d = m[col][col];
            if d.abs() < 1e-12 {
                return (pts[0].1, 0.0, 0.0);
            }
            for r in 0..3 {
                if r != col {
                    let f = m[r][col] / d;
                    for c in col..4 {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        (m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2])
    }
    let (a, b, c) = quad(pts);
    if pts.len() >= 5 {
        let (worst, res) = pts
            .iter()
            .enumerate()
            .map(|(i, (t, v))| (i, (v - a - b * t - c * t * t).abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if res > reject {
            let kept: Vec<(f64, f64)> =
                pts.iter().enumerate().filter(|(i, _)| *i != worst).map(|(_, p)| *p).collect();
            return quad(&kept);
        }
    }
    (a, b, c)
}

/// Deterministic pose/velocity summary of the first few observations.
///
/// Each frame's box pose is fitted geometrically (the raw point centroid is
/// far noisier: points land uniformly along 4–5 m edges, so a two-centroid
/// speed estimate is off by whole meters per second). A parabola through the
/// fitted centers gives the first-frame pose and tangent velocity plus a
/// bending-based curvature; a line through the fitted orientations gives an
/// independent heading-rate-based curvature.
#[derive(Clone, Copy, Debug)]
pub struct InitFit {
    /// Fitted box center at the first frame.
    pub center: [f64; 2],
    /// Fitted box orientation at the first frame, defined mod π.
    pub axis: f64,
    /// Center velocity at the first frame (m/frame); None with one frame.
    pub step_vel: Option<[f64; 2]>,
    /// Curvature from the orientation slope over the travelled distance.
    pub kappa_axis: Option<f64>,
    /// Curvature from the bending of the center track.
    pub kappa_center: Option<f64>,
}

impl InitFit {
    pub fn from_points(points: &[Arc<Vec<[f64; 2]>>], dims: &BoxDims) -> Self {
        let k = points.len().min(FIT_FRAMES);
        if k == 0 || points[0].is_empty() {
            return InitFit {
                center: [0.0, 0.0],
                axis: 0.0,
                step_vel: None,
                kappa_axis: None,
                kappa_center: None,
            };
        }
        let frames: Vec<&[[f64; 2]]> = points
            .iter()
            .take(k)
            .take_while(|f| !f.is_empty())
            .map(|f| f.as_slice())
            .collect();
        // Pass 1: warm-start each frame from its own centroid and the
        // previous frame's orientation, kept on one mod-π branch so the
        // orientation slope measures the true heading rate.
        let mut centers: Vec<[f64; 2]> = Vec::with_capacity(frames.len());
        let mut axes: Vec<f64> = Vec::with_capacity(frames.len());
        for frame in &frames {
            let (c_raw, a_raw) = centroid_and_principal_axis(frame);
            let start_axis = axes.last().copied().unwrap_or(a_raw);
            let (c, a) = fit_box_pose(frame, dims, c_raw, start_axis);
            centers.push(c);
            axes.push(align_half_turn(a, start_axis));
        }
        let first = Self::summarize(&centers, &axes);
        // Pass 2: refit from the straight-track prediction, so frames whose
        // points barely constrain a coordinate stay near the track instead of
        // wandering and polluting the velocity estimate.
        let vel = first.1;
        let rate = first.2;
        centers.clear();
        axes.clear();
        for (t, frame) in frames.iter().enumerate() {
            let tf = t as f64;
            let pred_c = [first.0.center[0] + vel[0] * tf, first.0.center[1] + vel[1] * tf];
            let pred_a = first.0.axis + rate * tf;
            let (c, a) = fit_box_pose(frame, dims, pred_c, pred_a);
            centers.push(c);
            axes.push(align_half_turn(a, pred_a));
        }
        Self::summarize(&centers, &axes).0
    }

    /// Returns the summary plus the straight-track motion (velocity,
    /// orientation rate) used to seed the second fitting pass.
    fn summarize(centers: &[[f64; 2]], axes: &[f64]) -> (Self, [f64; 2], f64) {
        let kc = centers.len();
        let (center, step_vel, kappa_center) = if kc >= 5 {
            // Parabolic track: the linear term is the tangent at the first
            // frame (no mid-window bias from turning) and the quadratic term
            // measures the bending.
            let xs: Vec<(f64, f64)> =
                centers.iter().enumerate().map(|(t, c)| (t as f64, c[0])).collect();
            let ys: Vec<(f64, f64)> =
                centers.iter().enumerate().map(|(t, c)| (t as f64, c[1])).collect();
            let (ax, bx, cx) = robust_quad_fit(&xs, 0.35);
            let (ay, by, cy) = robust_quad_fit(&ys, 0.35);
            let speed2 = bx * bx + by * by;
            let kappa = if speed2.sqrt() > 0.15 {
                Some(((bx * 2.0 * cy - by * 2.0 * cx) / speed2.powf(1.5)).clamp(-0.25, 0.25))
            } else {
                None
            };
            ([ax, ay], Some([bx, by]), kappa)
        } else if kc >= 2 {
            let kv = kc.min(FIT_CENTER_FRAMES);
            let xs: Vec<(f64, f64)> =
                centers[..kv].iter().enumerate().map(|(t, c)| (t as f64, c[0])).collect();
            let ys: Vec<(f64, f64)> =
                centers[..kv].iter().enumerate().map(|(t, c)| (t as f64, c[1])).collect();
            let (ix, sx) = robust_line_fit(&xs, 0.35);
            let (iy, sy) = robust_line_fit(&ys, 0.35);
            ([ix, iy], Some([sx, sy]), None)
        } else {
            (centers[0], None, None)
        };
        let step_speed = step_vel.map_or(0.0, |v| v[0].hypot(v[1]));
        let (axis, rate) = if axes.len() >= 2 {
            let pts: Vec<(f64, f64)> =
                axes.iter().enumerate().map(|(t, a)| (t as f64, *a)).collect();
            robust_line_fit(&pts, 0.12)
        } else {
            (axes[0], 0.0)
        };
        let kappa_axis = if axes.len() >= 4 && step_speed > 0.15 {
            Some((rate / step_speed).clamp(-0.25, 0.25))
        } else {
            None
        };
        let fit = InitFit { center, axis, step_vel, kappa_axis, kappa_center };
        (fit, step_vel.unwrap_or([0.0, 0.0]), rate)
    }
}

/// Shift `a` by multiples of π until it lies within π/2 of `reference`.
fn align_half_turn(mut a: f64, reference: f64) -> f64 {
    while a - reference > std::f64::consts::FRAC_PI_2 {
        a -= std::f64::consts::PI;
    }
    while reference - a > std::f64::consts::FRAC_PI_2 {
        a += std::f64::consts::PI;
    }
    a
}

/// The object-tracking model: neural observation likelihood over polygon
/// points, a driving policy over (acceleration, pinch), and the closed-form
/// motion integrator.
#[derive(Clone)]
pub struct AvSsm {
    pub obs: ObsModel,
    pub policy: Policy,
    pub motion: MotionConfig,
    jacobian_evals: Arc<AtomicU64>,
}

impl AvSsm {
    pub fn new(obs: ObsModel, policy: Policy, motion: MotionConfig) -> Self {
        AvSsm {
            obs,
            policy,
            motion,
            jacobian_evals: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn param_layout(&self) -> Vec<(&'static str, usize)> {
        vec![
            (OBS_NET_SEGMENT, self.obs.param_count()),
            (POLICY_SEGMENT, self.policy.param_count()),
        ]
    }

    pub fn build_params(&self) -> ParamVector {
        ParamVector::build(&self.param_layout())
    }

    /// How many times the motion model's input Jacobian has been evaluated
    /// through this model's taped transitions. The score-function estimator
    /// must leave this untouched.
    pub fn jacobian_evals(&self) -> u64 {
        self.jacobian_evals.load(Ordering::Relaxed)
    }

    /// Measurement-driven init proposal targeting the prior μ exactly.
    ///
    /// Blind draws from μ cannot populate the t=0 posterior at practical
    /// particle counts: the position/heading acceptance region of a
    /// several-point observation covers ~10⁻³ of the prior's volume, and the
    /// U[0,15] speed marginal leaves the surviving lineages with arbitrary
    /// speeds whose position error compounds every step. The proposal instead
    /// draws each state component around the precomputed geometric fit
    /// ([`InitFit`]), with defensive mass on the prior's own marginal so no
    /// state the prior allows is starved and the importance ratio stays
    /// bounded. Returns the draw and the exact log-ratio ln μ(x₀) − ln q₀(x₀);
    /// −∞ when the draw falls outside μ's speed support, which zeroes that
    /// particle's weight.
    fn propose_init(&self, data: &AvData, rng: &mut ChaCha8Rng) -> (VehicleState, f64) {
        use std::f64::consts::PI;
        // Position and heading are observed at t=0, so tight components pay
        // an importance ratio that the likelihood repays. Speed and curvature
        // are NOT observed at t=0: any concentration there is cancelled at
        // the first resampling (weights ∝ μ/q restore the prior marginal with
        // fewer distinct lineages), so those marginals stay close to the
        // prior with only a mild tilt toward the fit — the tilt buys more
        // near-truth lineages per unit of t=0 weight variance than it costs.
        const POS_TIGHT_STD: f64 = 0.17;
        const POS_DEFENSIVE: f64 = 0.08;
        const HEADING_TIGHT_STD: f64 = 0.08;
        const HEADING_DEFENSIVE: f64 = 0.15;
        const SPEED_STD: f64 = 1.0;
        const SPEED_DEFENSIVE: f64 = 0.65;
        const KAPPA_DEFENSIVE: f64 = 0.7;
        const FORWARD_WEIGHT: f64 = 0.85;
        const MOVING_SPEED: f64 = 1.0;
        /// Below this speed the heading-rate/speed ratio is too noisy to use.
        const KAPPA_MIN_SPEED: f64 = 2.0;
        /// Above this speed the travelled baseline makes the motion direction
        /// a better heading anchor than the fitted box orientation.
        const HEADING_FROM_MOTION_SPEED: f64 = 2.5;
        /// Above this speed the fitted track is long enough that the speed
        /// and curvature hints deserve more than the baseline tilt.
        const FAST_TRACK_SPEED: f64 = 4.0;

        // μ is anchored on the raw first observation (centroid and principal
        // axis); q is anchored on the fit.
        let (c_mu, axis_mu) = centroid_and_principal_axis(&data.points[0]);
        let fit = &data.fit;
        let step_speed = fit.step_vel.map(|v| v[0].hypot(v[1]));
        let v_hat = step_speed.map(|s| (s / self.motion.dt).min(INIT_SPEED_MAX));
        // Curvature hint: two independent estimates (orientation slope and
        // center-track bending); their disagreement widens the component.
        let kappa_hat = match v_hat {
            Some(vh) if vh > KAPPA_MIN_SPEED => match (fit.kappa_axis, fit.kappa_center) {
                (Some(a), Some(c)) => {
                    Some((0.5 * (a + c), (0.7 * (a - c).abs()).clamp(0.006, 0.035)))
                }
                (Some(k), None) | (None, Some(k)) => Some((k, 0.018)),
                (None, None) => None,
            },
            _ => None,
        };
        // Fast tracks earn a stronger tilt: the fitted baseline is long, so
        // the speed/curvature hints are reliable, and at high speed a wrong
        // lineage compounds position error too fast for selection to fix.
        let fast = matches!(v_hat, Some(vh) if vh > FAST_TRACK_SPEED);
        let (speed_def, speed_std) = if fast { (0.45, 0.8) } else { (SPEED_DEFENSIVE, SPEED_STD) };
        let kappa_def = if fast { 0.55 } else { KAPPA_DEFENSIVE };
        // Heading anchor for the tight component. Fast objects: the fitted
        // track's first-frame tangent (the travelled baseline beats any box
        // fit). Slow movers: the fitted-axis orientation matching the
        // apparent motion. Parked: the fitted axis with a fair flip.
        let (forward, w_fwd, head_tight_std) = match (v_hat, fit.step_vel, step_speed) {
            (Some(vh), Some(vel), Some(ss)) if vh > HEADING_FROM_MOTION_SPEED => {
                let dir = vel[1].atan2(vel[0]);
                let std = (0.12 / ss).clamp(0.04, 0.12);
                (dir, 0.95, std)
            }
            (Some(vh), Some(vel), _) if vh > MOVING_SPEED => {
                let dir = vel[1].atan2(vel[0]);
                let fwd = if (fit.axis - dir).cos() >= 0.0 { fit.axis } else { fit.axis + PI };
                (fwd, FORWARD_WEIGHT, HEADING_TIGHT_STD)
            }
            _ => (fit.axis, 0.5, HEADING_TIGHT_STD),
        };

        // Fixed draw layout regardless of branches, so the plain and taped
        // routes (and any data) consume streams identically.
        let u_pmix = rng::uniform(rng);
        let zx = rng::normal(rng);
        let zy = rng::normal(rng);
        let u_hmix = rng::uniform(rng);
        let u_flip = rng::uniform(rng);
        let zt = rng::normal(rng);
        let u_vmix = rng::uniform(rng);
        let zv = rng::normal(rng);
        let uv = rng::uniform(rng);
        let u_kmix = rng::uniform(rng);
        let zk = rng::normal(rng);

        let (pos_c, pos_std) = if u_pmix < 1.0 - POS_DEFENSIVE {
            (fit.center, POS_TIGHT_STD)
        } else {
            (c_mu, INIT_POS_STD)
        };
        let x = pos_c[0] + pos_std * zx;
        let y = pos_c[1] + pos_std * zy;
        // Tight heading component prefers the motion-aligned orientation;
        // the defensive component is the prior's own fair two-mode mixture.
        let (head_anchor, head_std, head_w) = if u_hmix < 1.0 - HEADING_DEFENSIVE {
            (forward, head_tight_std, w_fwd)
        } else {
            (axis_mu, INIT_HEADING_STD, 0.5)
        };
        let mode = if u_flip < head_w { head_anchor } else { head_anchor + PI };
        let theta = mode + head_std * zt;
        let v = match v_hat {
            // Folded normal: reflection keeps the draw nonnegative (parked
            // objects put half the raw mass below zero).
            Some(vh) if u_vmix < 1.0 - speed_def => (vh + speed_std * zv).abs(),
            Some(_) | None => INIT_SPEED_MAX * uv,
        };
        let kappa = match kappa_hat {
            Some((kh, kstd)) if u_kmix < 1.0 - kappa_def => kh + kstd * zk,
            _ => INIT_CURVATURE_STD * zk,
        };
        let state = VehicleState::new(x, y, theta, v, kappa);

        // ln μ − ln q, marginal by marginal. Position: isotropic normals.
        let normal2 = |r2: f64, std: f64| (-0.5 * r2 / (std * std)).exp() / (2.0 * PI * std * std);
        let normal1 = |d: f64, std: f64| {
            (-0.5 * (d / std).powi(2)).exp() / (std * (2.0 * PI).sqrt())
        };
        let r2_mu = (x - c_mu[0]).powi(2) + (y - c_mu[1]).powi(2);
        let r2_fit = (x - fit.center[0]).powi(2) + (y - fit.center[1]).powi(2);
        let mu_pos = normal2(r2_mu, INIT_POS_STD);
        let q_pos = (1.0 - POS_DEFENSIVE) * normal2(r2_fit, POS_TIGHT_STD) + POS_DEFENSIVE * mu_pos;
        // Heading: two-mode wrapped-Gaussian mixtures (the wrap truncation is
        // ~e⁻⁵⁰ at these scales).
        let two_mode = |anchor: f64, std: f64, w: f64| {
            let bump = |delta: f64| normal1(crate::geom::wrap_angle(delta), std);
            w * bump(theta - anchor) + (1.0 - w) * bump(theta - anchor - PI)
        };
        let mu_theta = two_mode(axis_mu, INIT_HEADING_STD, 0.5);
        let q_theta = (1.0 - HEADING_DEFENSIVE) * two_mode(forward, head_tight_std, w_fwd)
            + HEADING_DEFENSIVE * mu_theta;
        // Speed: U[0,15] over the folded-normal + defensive-uniform mixture;
        // −∞ when the draw left the prior's support.
        let lr_v = match v_hat {
            Some(vh) if v <= INIT_SPEED_MAX => {
                let q_v = (1.0 - speed_def)
                    * (normal1(v - vh, speed_std) + normal1(v + vh, speed_std))
                    + speed_def / INIT_SPEED_MAX;
                -INIT_SPEED_MAX.ln() - q_v.ln()
            }
            Some(_) => f64::NEG_INFINITY,
            None => 0.0,
        };
        let mu_k = normal1(kappa, INIT_CURVATURE_STD);
        let q_k = match kappa_hat {
            Some((kh, kstd)) => {
                (1.0 - kappa_def) * normal1(kappa - kh, kstd) + kappa_def * mu_k
            }
            None => mu_k,
        };
        let ratio =
            mu_pos.ln() - q_pos.ln() + mu_theta.ln() - q_theta.ln() + lr_v + mu_k.ln() - q_k.ln();
        (state, ratio)
    }
}

impl Ssm for AvSsm {
    type State = VehicleState;
    type Act = Action;
    type StateVars = [Var; 5];
    type Data = AvData;

    fn steps(&self, data: &Self::Data) -> usize {
        data.points.len().saturating_sub(1)
    }

    fn sample_init(
        &self,
        _params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> VehicleState {
        let (c, axis) = centroid_and_principal_axis(&data.points[0]);
        let x = c[0] + INIT_POS_STD * rng::normal(rng);
        let y = c[1] + INIT_POS_STD * rng::normal(rng);
        let mut theta = axis + INIT_HEADING_STD * rng::normal(rng);
        if rng::uniform(rng) < 0.5 {
            theta += std::f64::consts::PI;
        }
        let v = INIT_SPEED_MAX * rng::uniform(rng);
        let kappa = INIT_CURVATURE_STD * rng::normal(rng);
        VehicleState::new(x, y, theta, v, kappa)
    }

    fn sample_init_proposal(
        &self,
        _params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> (VehicleState, f64) {
        self.propose_init(data, rng)
    }

    fn sample_transition(
        &self,
        params: &ParamVector,
        prev: &VehicleState,
        rng: &mut ChaCha8Rng,
    ) -> (Action, VehicleState) {
        let (action, _) = self.policy.sample(params, prev, rng);
        let next = propagate(prev, &action, &self.motion);
        (action, next)
    }

    fn obs_loglik(
        &self,
        params: &ParamVector,
        data: &Self::Data,
        t: usize,
        state: &VehicleState,
    ) -> f64 {
        self.obs
            .log_likelihood_points(params, &data.av_poses[t], state, &data.dims, &data.points[t])
    }

    fn mean_state(&self, states: &[VehicleState], weights: &[f64]) -> VehicleState {
        let mut x = 0.0;
        let mut y = 0.0;
        let mut v = 0.0;
        let mut kappa = 0.0;
        let mut sin = 0.0;
        let mut cos = 0.0;
        for (s, &w) in states.iter().zip(weights) {
            x += w * s.pose.x;
            y += w * s.pose.y;
            v += w * s.v;
            kappa += w * s.kappa;
            sin += w * s.pose.theta.sin();
            cos += w * s.pose.theta.cos();
        }
        VehicleState::new(x, y, sin.atan2(cos), v, kappa)
    }

    fn record_obs_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        t: usize,
        state: &VehicleState,
    ) -> Var {
        let xyt = [
            tape.leaf(state.pose.x),
            tape.leaf(state.pose.y),
            tape.leaf(state.pose.theta),
        ];
        self.obs.record_log_likelihood(
            tape,
            params,
            &data.av_poses[t],
            &data.dims,
            &data.points[t],
            xyt,
        )
    }

    fn record_policy_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &VehicleState,
        act: &Action,
    ) -> Var {
        let v = tape.leaf(prev.v);
        let k = tape.leaf(prev.kappa);
        let a = [tape.leaf(act.accel), tape.leaf(act.pinch)];
        self.policy.record_logpdf(tape, params, v, k, a)
    }

    fn record_init(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> [Var; 5] {
        // The tracking prior has no θ: constants on the tape, same draws as
        // the plain route.
        let s = self.sample_init(params, data, rng);
        [
            tape.leaf(s.pose.x),
            tape.leaf(s.pose.y),
            tape.leaf(s.pose.theta),
            tape.leaf(s.v),
            tape.leaf(s.kappa),
        ]
    }

    fn record_init_proposal(
        &self,
        tape: &mut Tape,
        _params: &ParamVector,
        data: &Self::Data,
        rng: &mut ChaCha8Rng,
    ) -> ([Var; 5], f64) {
        // Proposal and prior are both θ-free: constants on the tape, ratio
        // as a plain value.
        let (s, ratio) = self.propose_init(data, rng);
        (
            [
                tape.leaf(s.pose.x),
                tape.leaf(s.pose.y),
                tape.leaf(s.pose.theta),
                tape.leaf(s.v),
                tape.leaf(s.kappa),
            ],
            ratio,
        )
    }

    fn record_transition(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        prev: &[Var; 5],
        rng: &mut ChaCha8Rng,
    ) -> [Var; 5] {
        let eps = [rng::normal(rng), rng::normal(rng)];
        let action = self
            .policy
            .record_sample(tape, params, prev[3], prev[4], eps);
        record_propagate(tape, &self.motion, &self.jacobian_evals, *prev, action)
    }

    fn record_obs_loglik_vars(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        data: &Self::Data,
        t: usize,
        vars: &[Var; 5],
    ) -> Var {
        self.obs.record_log_likelihood(
            tape,
            params,
            &data.av_poses[t],
            &data.dims,
            &data.points[t],
            [vars[0], vars[1], vars[2]],
        )
    }

    fn state_value(&self, tape: &Tape, vars: &[Var; 5]) -> VehicleState {
        VehicleState::new(
            tape.val(vars[0]),
            tape.val(vars[1]),
            tape.val(vars[2]),
            tape.val(vars[3]),
            tape.val(vars[4]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::wrap_angle;
    use crate::rng::StreamRng;

    fn test_model() -> (AvSsm, ParamVector) {
        let model = AvSsm::new(
            ObsModel::new(),
            Policy::simple(),
            MotionConfig::new(0.33).unwrap(),
        );
        let mut params = model.build_params();
        let mut r = StreamRng::from_path(&[7]);
        let seg = params.segment(OBS_NET_SEGMENT).unwrap();
        let arch = model.obs.arch().clone();
        arch.init_params(r.stream(rng::purpose::MISC, 0, 0), &mut params.values_mut()[seg]);
        let pseg = params.segment(POLICY_SEGMENT).unwrap();
        params.values_mut()[pseg].copy_from_slice(&[-0.7, -4.6]);
        (model, params)
    }

    fn test_data() -> AvData {
        // A rough rectangle of points around (10, 5), long axis along x.
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
            vec![Pose2D::new(0.0, 0.0, 0.0); 3],
            vec![Arc::new(pts.clone()), Arc::new(pts.clone()), Arc::new(pts)],
        )
    }

    #[test]
    fn principal_axis_of_axis_aligned_cloud() {
        let data = test_data();
        let (c, axis) = centroid_and_principal_axis(&data.points[0]);
        assert!((c[0] - 10.2625).abs() < 1e-9);
        // Long axis along x: angle ≈ 0 mod π.
        let folded = wrap_angle(axis);
        assert!(folded.abs() < 0.1 || (folded.abs() - std::f64::consts::PI).abs() < 0.1);
    }

    #[test]
    fn init_prior_statistics() {
        let (model, params) = test_model();
        let data = test_data();
        let (c, axis) = centroid_and_principal_axis(&data.points[0]);
        let mut r = StreamRng::from_path(&[11]);
        let n = 4000;
        let mut mx = 0.0;
        let mut my = 0.0;
        let mut n_flipped = 0;
        for i in 0..n {
            let s = model.sample_init(&params, &data, r.stream(rng::purpose::INIT, 0, i));
            assert!(s.is_finite());
            assert!((0.0..INIT_SPEED_MAX).contains(&s.v));
            mx += s.pose.x;
            my += s.pose.y;
            // Heading is near the axis or its flip.
            let d = wrap_angle(s.pose.theta - axis);
            let near = d.abs() < 4.0 * INIT_HEADING_STD;
            let far = (d.abs() - std::f64::consts::PI).abs() < 4.0 * INIT_HEADING_STD;
            assert!(near || far, "heading off-axis: d={d}");
            if far {
                n_flipped += 1;
            }
        }
        let se = INIT_POS_STD / (n as f64).sqrt();
        assert!((mx / n as f64 - c[0]).abs() < 4.0 * se);
        assert!((my / n as f64 - c[1]).abs() < 4.0 * se);
        let frac = n_flipped as f64 / n as f64;
        assert!((frac - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt() + 0.02, "flip frac {frac}");
    }

    #[test]
    fn circular_mean_wraps() {
        let (model, _) = test_model();
        let pi = std::f64::consts::PI;
        let states = vec![
            VehicleState::new(0.0, 0.0, pi - 0.1, 1.0, 0.0),
            VehicleState::new(0.0, 0.0, -pi + 0.1, 3.0, 0.0),
        ];
        let m = model.mean_state(&states, &[0.5, 0.5]);
        assert!((m.pose.theta.abs() - pi).abs() < 1e-9, "theta {}", m.pose.theta);
        assert!((m.v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn taped_transition_matches_plain_route() {
        let (model, params) = test_model();
        let data = test_data();
        let mut r = StreamRng::from_path(&[13]);
        let prev = model.sample_init(&params, &data, r.stream(rng::purpose::INIT, 0, 0));

        let (_, plain_next) =
            model.sample_transition(&params, &prev, r.stream(rng::purpose::ACTION, 1, 0));

        let mut tape = Tape::new();
        let prev_vars = [
            tape.leaf(prev.pose.x),
            tape.leaf(prev.pose.y),
            tape.leaf(prev.pose.theta),
            tape.leaf(prev.v),
            tape.leaf(prev.kappa),
        ];
        let next_vars =
            model.record_transition(&mut tape, &params, &prev_vars, r.stream(rng::purpose::ACTION, 1, 0));
        let taped_next = model.state_value(&tape, &next_vars);

        assert!((taped_next.pose.x - plain_next.pose.x).abs() < 1e-12);
        assert!((taped_next.pose.y - plain_next.pose.y).abs() < 1e-12);
        assert!((taped_next.pose.theta - plain_next.pose.theta).abs() < 1e-12);
        assert!((taped_next.v - plain_next.v).abs() < 1e-12);
        assert!((taped_next.kappa - plain_next.kappa).abs() < 1e-12);

        // Plain route never evaluates input Jacobians; the taped route only
        // does so on backward.
        assert_eq!(model.jacobian_evals(), 0);
    }

    #[test]
    fn taped_obs_loglik_matches_plain() {
        let (model, params) = test_model();
        let data = test_data();
        let mut r = StreamRng::from_path(&[17]);
        let s = model.sample_init(&params, &data, r.stream(rng::purpose::INIT, 0, 0));
        let plain = model.obs_loglik(&params, &data, 0, &s);
        let mut tape = Tape::new();
        let v = model.record_obs_loglik(&mut tape, &params, &data, 0, &s);
        assert!((tape.val(v) - plain).abs() < 1e-12);
        assert!(plain.is_finite());
    }
}

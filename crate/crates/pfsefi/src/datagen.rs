//! Synthetic dataset generation.
//!
//! Scenes are drawn from the generative model itself: initial states from a
//! wide scene prior, rollouts under the simple driving policy and bicycle
//! motion, and point observations from the boundary mixture at hand-set
//! "true" network outputs. Datasets round-trip through JSON-lines files plus
//! a manifest, losslessly (shortest-round-trip float formatting).

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::error::Error;
use crate::geom::{ObjectTrajectory, Pose2D, TrajectoryMeta, VehicleState};
use crate::motion::MotionConfig;
use crate::obs::{ObsModel, OBS_NET_SEGMENT};
use crate::policy::{Policy, POLICY_SEGMENT};
use crate::rng::{self, purpose, StreamRng};
use crate::ssm::{AvSsm, Ssm};
use crate::Result;
use rayon::prelude::*;

/// True policy noise: acceleration std, m/s².
pub const TRUE_SIGMA_A: f64 = 0.5;
/// True policy noise: pinch std before the speed-dependent shrink, 1/(m·s).
pub const TRUE_SIGMA_P: f64 = 0.01;
/// True edge-selection logits (softmax gives ≈ .30/.25/.20/.25).
pub const TRUE_EDGE_LOGITS: [f64; 4] = [0.2, 0.0, -0.2, 0.0];
/// True offsets of point scatter per edge, m. Decisively negative = inward:
/// sensor returns off the visible surface land inside the labelled box
/// extent. Two structural constraints pin these values:
///
/// * Outward points near box corners fall outside every edge's parallel
///   support under small state shifts, where the per-point density is
///   exactly zero; the floored log-density then puts a cliff right next to
///   the true state. Keeping μ/b ≥ 2.5 makes outward stragglers (and hence
///   cliffs) rare enough that part of the cloud always survives one.
/// * The filter seeds particles from a deliberately diffuse prior (position
///   σ = 1 m, heading ±0.3 rad with 180° flips, speed U[0,15]). The
///   per-observation likelihood must stay broad enough — scatter scales of
///   a few decimeters over a handful of points — that a workable number of
///   seeded particles survive the first weighting at N ≈ 10³.
///
/// The front/rear asymmetry (with the edge probabilities) breaks the 180°
/// box symmetry.
pub const TRUE_LAPLACE_MU: [f64; 4] = [-0.45, -0.40, -0.50, -0.40];
/// True scatter scales per edge, m — the scatter of hull points around the
/// per-edge offset ridge. Sides are sharper than front/rear: lateral and
/// heading alignment is what re-selects curvature every step, while the
/// looser longitudinal direction keeps the first steps' speed uncertainty
/// survivable.
pub const TRUE_LAPLACE_B: [f64; 4] = [0.16, 0.13, 0.18, 0.13];

/// Gaussian noise applied to the *recorded* ego poses (localization error);
/// the physical observations are always generated from the true pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvPoseNoise {
    pub std_xy: f64,
    pub std_theta: f64,
}

/// Ego trajectory shape. Poses are recorded once per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AvMotion {
    /// Ego parked at the origin, heading +x.
    Stationary,
    /// Ego driving along +x at constant speed (m/s) from the origin.
    StraightLine { speed: f64 },
}

impl AvMotion {
    pub fn pose_at(&self, t: usize, dt: f64) -> Pose2D {
        match *self {
            AvMotion::Stationary => Pose2D::new(0.0, 0.0, 0.0),
            AvMotion::StraightLine { speed } => Pose2D::new(speed * dt * t as f64, 0.0, 0.0),
        }
    }
}

/// Everything that shapes one generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    /// Number of transitions T; each trajectory has T+1 observed steps.
    pub steps: usize,
    pub dt: f64,
    /// Inclusive range of points per observation.
    pub points_min: usize,
    pub points_max: usize,
    /// Initial positions are uniform over this annulus around the ego, m.
    pub annulus: (f64, f64),
    /// Initial speed range, m/s (uniform).
    pub speed_range: (f64, f64),
    /// Initial curvature std, 1/m (Gaussian around 0).
    pub curvature_std: f64,
    pub av_motion: AvMotion,
    pub av_noise: Option<AvPoseNoise>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_objects: 50,
            steps: 25,
            dt: 0.33,
            points_min: 6,
            points_max: 12,
            annulus: (5.0, 40.0),
            speed_range: (0.0, 12.0),
            curvature_std: 0.02,
            av_motion: AvMotion::Stationary,
            av_noise: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("scene needs at least one transition".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.points_min == 0 || self.points_min > self.points_max {
            return Err(Error::Config(format!(
                "points range [{}, {}] is invalid",
                self.points_min, self.points_max
            )));
        }
        if !(self.annulus.0 > 0.0 && self.annulus.0 <= self.annulus.1) {
            return Err(Error::Config(format!(
                "annulus ({}, {}) is invalid",
                self.annulus.0, self.annulus.1
            )));
        }
        if !(self.speed_range.0 <= self.speed_range.1) || self.speed_range.0 < 0.0 {
            return Err(Error::Config(format!(
                "speed range ({}, {}) is invalid",
                self.speed_range.0, self.speed_range.1
            )));
        }
        if let Some(n) = &self.av_noise {
            if n.std_xy < 0.0 || n.std_theta < 0.0 {
                return Err(Error::Config("ego pose noise stds must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// The model family used for generation: boundary-mixture observations, the
/// simple closed-form driving policy, bicycle motion at `dt`.
pub fn generator_model(dt: f64) -> Result<AvSsm> {
    Ok(AvSsm::new(ObsModel::new(), Policy::simple(), MotionConfig::new(dt)?))
}

/// The hand-set true parameter vector for `generator_model`: every network
/// weight is zero except the output-layer biases, so the mixture is the same
/// at every state (asymmetric across edges, which pins the heading), and the
/// policy stds are (`TRUE_SIGMA_A`, `TRUE_SIGMA_P`).
pub fn true_params(model: &AvSsm) -> Result<ParamVector> {
    params_with(
        model,
        &TRUE_EDGE_LOGITS,
        &TRUE_LAPLACE_MU,
        &TRUE_LAPLACE_B,
        TRUE_SIGMA_A,
        TRUE_SIGMA_P,
    )
}

/// Like [`true_params`] but with explicit state-independent mixture outputs
/// and policy stds, for building alternative ground truths.
pub fn params_with(
    model: &AvSsm,
    edge_logits: &[f64; 4],
    laplace_mu: &[f64; 4],
    laplace_b: &[f64; 4],
    sigma_a: f64,
    sigma_p: f64,
) -> Result<ParamVector> {
    if laplace_b.iter().any(|b| !(*b > 0.0)) || !(sigma_a > 0.0) || !(sigma_p > 0.0) {
        return Err(Error::Config("scatter scales and policy stds must be positive".into()));
    }
    let mut p = model.build_params();
    let obs_seg = p
        .segment(OBS_NET_SEGMENT)
        .ok_or_else(|| Error::Config("model lacks an obs_net parameter segment".into()))?;
    let bias_start = obs_seg.end - 12;
    {
        let v = p.values_mut();
        for e in 0..4 {
            v[bias_start + e] = edge_logits[e];
            v[bias_start + 4 + 2 * e] = laplace_mu[e];
            v[bias_start + 5 + 2 * e] = laplace_b[e].ln();
        }
    }
    let pol_seg = p
        .segment(POLICY_SEGMENT)
        .ok_or_else(|| Error::Config("model lacks a policy parameter segment".into()))?;
    if pol_seg.len() != 2 {
        return Err(Error::Config(
            "true parameters are defined for the simple 2-parameter policy".into(),
        ));
    }
    {
        let v = p.values_mut();
        v[pol_seg.start] = sigma_a.ln();
        v[pol_seg.start + 1] = sigma_p.ln();
    }
    Ok(p)
}

/// Draw one scene: `n_objects` independent rollouts sharing the ego path.
/// Deterministic in (`cfg`, `params`, `scene_seed`) regardless of thread
/// count: every random draw comes from a stream addressed by
/// (purpose, step, object index).
pub fn generate_scene(
    cfg: &SceneConfig,
    model: &AvSsm,
    params: &ParamVector,
    scene_seed: u64,
) -> Result<Vec<ObjectTrajectory>> {
    cfg.validate()?;
    if !params.same_layout(&model.build_params()) {
        return Err(Error::Config(
            "parameter vector layout does not match the generator model".into(),
        ));
    }
    let sr = StreamRng::from_path(&[scene_seed]);
    let t_steps = cfg.steps;

    let av_true: Vec<Pose2D> = (0..=t_steps).map(|t| cfg.av_motion.pose_at(t, cfg.dt)).collect();
    let av_recorded: Vec<Pose2D> = match &cfg.av_noise {
        None => av_true.clone(),
        Some(noise) => (0..=t_steps)
            .map(|t| {
                let mut r = sr.at(purpose::MISC, t, 0);
                let p = &av_true[t];
                Pose2D::new(
                    p.x + noise.std_xy * rng::normal(&mut r),
                    p.y + noise.std_xy * rng::normal(&mut r),
                    p.theta + noise.std_theta * rng::normal(&mut r),
                )
            })
            .collect(),
    };

    let trajectories: Vec<ObjectTrajectory> = (0..cfg.n_objects)
        .into_par_iter()
        .map(|obj| {
            let mut init_rng = sr.at(purpose::INIT, 0, obj);
            let (r_min, r_max) = cfg.annulus;
            // Uniform over the annulus area, not the radius.
            let r = (r_min * r_min
                + rng::uniform(&mut init_rng) * (r_max * r_max - r_min * r_min))
                .sqrt();
            let phi = (2.0 * rng::uniform(&mut init_rng) - 1.0) * std::f64::consts::PI;
            let heading = (2.0 * rng::uniform(&mut init_rng) - 1.0) * std::f64::consts::PI;
            let speed = cfg.speed_range.0
                + rng::uniform(&mut init_rng) * (cfg.speed_range.1 - cfg.speed_range.0);
            let kappa = cfg.curvature_std * rng::normal(&mut init_rng);
            let dims = crate::geom::BoxDims::new(
                3.8 + 1.4 * rng::uniform(&mut init_rng),
                1.7 + 0.4 * rng::uniform(&mut init_rng),
            );

            let mut states = Vec::with_capacity(t_steps + 1);
            let mut actions = Vec::with_capacity(t_steps);
            states.push(VehicleState::new(r * phi.cos(), r * phi.sin(), heading, speed, kappa));
            for t in 1..=t_steps {
                let mut act_rng = sr.at(purpose::ACTION, t, obj);
                let (action, next) =
                    model.sample_transition(params, states.last().unwrap(), &mut act_rng);
                actions.push(action);
                states.push(next);
            }

            let span = cfg.points_max - cfg.points_min + 1;
            let observations = (0..=t_steps)
                .map(|t| {
                    let mut obs_rng = sr.at(purpose::OBS, t, obj);
                    let n_points = cfg.points_min
                        + ((rng::uniform(&mut obs_rng) * span as f64) as usize).min(span - 1);
                    let mut obs = model.obs.sample_observation(
                        params,
                        &av_true[t],
                        &states[t],
                        &dims,
                        n_points,
                        &mut obs_rng,
                    );
                    obs.timestamp_index = t;
                    obs
                })
                .collect();

            ObjectTrajectory {
                dims,
                av_poses: av_recorded.clone(),
                observations,
                states: Some(states),
                actions: Some(actions),
                meta: TrajectoryMeta { dt: cfg.dt, seed: scene_seed },
            }
        })
        .collect();

    for traj in &trajectories {
        traj.validate().map_err(|e| Error::Config(format!("generated trajectory invalid: {e}")))?;
    }
    Ok(trajectories)
}

/// Index file written next to the scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene_files: Vec<String>,
    pub generator_seed: u64,
    pub n_scenes: usize,
    pub objects_per_scene: usize,
    /// Transitions per trajectory; every trajectory must have steps+1
    /// observations.
    pub steps: usize,
    pub dt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub av_noise: Option<AvPoseNoise>,
    /// Relative path of a checkpoint holding the generating parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_params_checkpoint: Option<String>,
}

/// Write scenes as `scene_NNN.jsonl` (one trajectory per line) plus
/// `manifest.json`; returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    cfg: &SceneConfig,
    generator_seed: u64,
    scenes: &[Vec<ObjectTrajectory>],
    true_params_checkpoint: Option<&str>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut scene_files = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:03}.jsonl");
        let mut out = String::new();
        for traj in scene {
            out.push_str(&serde_json::to_string(traj).map_err(|e| {
                Error::Config(format!("failed to serialize trajectory: {e}"))
            })?);
            out.push('\n');
        }
        fs::write(dir.join(&name), out)?;
        scene_files.push(name);
    }
    let manifest = DatasetManifest {
        scene_files,
        generator_seed,
        n_scenes: scenes.len(),
        objects_per_scene: cfg.n_objects,
        steps: cfg.steps,
        dt: cfg.dt,
        av_noise: cfg.av_noise,
        true_params_checkpoint: true_params_checkpoint.map(str::to_owned),
    };
    let path = dir.join("manifest.json");
    let mut f = fs::File::create(&path)?;
    f.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
    f.write_all(b"\n")?;
    Ok(path)
}

/// Load a dataset back. Every trajectory is validated; parse and shape
/// problems report the offending file and line.
pub fn read_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Vec<ObjectTrajectory>>)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset { line: 0, msg: format!("manifest: {e}") })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut scenes = Vec::with_capacity(manifest.scene_files.len());
    for file in &manifest.scene_files {
        let reader = BufReader::new(fs::File::open(dir.join(file))?);
        let mut scene = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let traj: ObjectTrajectory = serde_json::from_str(&line).map_err(|e| Error::Dataset {
                line: lineno,
                msg: format!("{file}: {e}"),
            })?;
            traj.validate().map_err(|e| Error::Dataset {
                line: lineno,
                msg: format!("{file}: {e}"),
            })?;
            if traj.steps() != manifest.steps {
                return Err(Error::Dataset {
                    line: lineno,
                    msg: format!(
                        "{file}: trajectory has {} transitions, manifest says {}",
                        traj.steps(),
                        manifest.steps
                    ),
                });
            }
            scene.push(traj);
        }
        if scene.is_empty() {
            return Err(Error::Dataset { line: 0, msg: format!("{file}: no trajectories") });
        }
        scenes.push(scene);
    }
    Ok((manifest, scenes))
}

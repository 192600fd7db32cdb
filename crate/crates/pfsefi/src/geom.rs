//! Shared domain types and angle/rectangle geometry.
//!
//! Conventions adopted everywhere: headings are measured counterclockwise
//! from the world +x axis and stored wrapped to (−π, π]; the box center sits
//! at the pose origin; all floating point is f64.

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    /// Speed, m/s. May be negative (reversing); the generator never
    /// produces negative speeds but the filter does not forbid them.
    pub v: f64,
    /// Curvature, 1/m (inverse turning radius).
    pub kappa: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, kappa: f64) -> Self {
        VehicleState {
            pose: Pose2D::new(x, y, theta),
            v,
            kappa,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.x.is_finite()
            && self.pose.y.is_finite()
            && self.pose.theta.is_finite()
            && self.v.is_finite()
            && self.kappa.is_finite()
    }
}

/// Control applied over one step: linear acceleration and pinch
/// (time derivative of curvature).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub pinch: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    /// Extent along the heading axis, m.
    pub length: f64,
    pub width: f64,
}

impl BoxDims {
    pub fn new(length: f64, width: f64) -> Self {
        assert!(length > 0.0 && width > 0.0, "box dims must be positive");
        BoxDims { length, width }
    }
}

/// One timestep's point observation: 2D points in the world frame sampled
/// from the object's outline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub points: Vec<[f64; 2]>,
    pub timestamp_index: usize,
}

impl Observation {
    pub fn is_valid(&self) -> bool {
        !self.points.is_empty()
            && self
                .points
                .iter()
                .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// A single tracked object's data over T+1 steps. Ground-truth states and
/// actions are optional: real datasets would not carry them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajectory {
    pub dims: BoxDims,
    pub av_poses: Vec<Pose2D>,
    pub observations: Vec<Observation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<VehicleState>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Action>>,
    pub meta: TrajectoryMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub dt: f64,
    pub seed: u64,
}

impl ObjectTrajectory {
    /// Number of transitions T (so there are T+1 observed steps).
    pub fn steps(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    /// Check the length couplings between fields.
    pub fn validate(&self) -> Result<(), Error> {
        let n = self.observations.len();
        if n == 0 {
            return Err(Error::Shape("trajectory has no observations".into()));
        }
        if self.av_poses.len() != n {
            return Err(Error::Shape(format!(
                "av_poses length {} != observations length {}",
                self.av_poses.len(),
                n
            )));
        }
        if let Some(states) = &self.states {
            if states.len() != n {
                return Err(Error::Shape(format!(
                    "states length {} != observations length {}",
                    states.len(),
                    n
                )));
            }
            if !states.iter().all(|s| s.is_finite()) {
                return Err(Error::Shape("non-finite ground-truth state".into()));
            }
        }
        if let Some(actions) = &self.actions {
            if actions.len() + 1 != n {
                return Err(Error::Shape(format!(
                    "actions length {} != T = {}",
                    actions.len(),
                    n - 1
                )));
            }
        }
        if !(self.dims.length > 0.0 && self.dims.width > 0.0) {
            return Err(Error::Shape("non-positive box dims".into()));
        }
        if !self.observations.iter().all(|o| o.is_valid()) {
            return Err(Error::Shape("empty or non-finite observation".into()));
        }
        if !(self.meta.dt > 0.0) {
            return Err(Error::Shape("dt must be positive".into()));
        }
        Ok(())
    }
}

/// Wrap an angle to (−π, π]. The interval is open at −π: wrap_angle(−π) = π.
pub fn wrap_angle(theta: f64) -> f64 {
    debug_assert!(theta.is_finite(), "wrap_angle of non-finite angle");
    let tau = std::f64::consts::TAU;
    let mut t = theta % tau;
    if t <= -std::f64::consts::PI {
        t += tau;
    } else if t > std::f64::consts::PI {
        t -= tau;
    }
    t
}

/// Corners of the heading-aligned rectangle centered at `pose`,
/// counterclockwise starting front-left.
pub fn box_corners(pose: &Pose2D, dims: &BoxDims) -> [[f64; 2]; 4] {
    let (hl, hw) = (0.5 * dims.length, 0.5 * dims.width);
    let (s, c) = pose.theta.sin_cos();
    let rot = |bx: f64, by: f64| [pose.x + c * bx - s * by, pose.y + s * bx + c * by];
    [
        rot(hl, hw),   // front-left
        rot(-hl, hw),  // rear-left
        rot(-hl, -hw), // rear-right
        rot(hl, -hw),  // front-right
    ]
}

//! Teleoperation retargeting: unified-frame transforms, target-pose
//! computation from operator deltas, the gripper map, the safety filter with
//! previous-target fallback, and per-tick interpolation smoothing.

use crate::embodiment::{
    jacobian, joint_limit_check, manipulability, select_rows, self_collision_check, GripperMap,
    JacobianRows, KinematicModel,
};
use crate::geometry::{
    lerp_translation, slerp_rotation, vadd, vnorm, vscale, vsub, Pose, Rotation,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("teleop session not initialized")]
    NotInitialized,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Scale factors and per-tick step bounds for the operator-to-robot mapping.
///
/// Defaults: EEF scale 1.0, torso scale 0.6, and 0.01 m / 0.05 rad / 0.05 rad
/// per tick at a nominal 50 Hz teleop tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetConfig {
    pub alpha_torso: f64,
    pub alpha_r_eef: f64,
    pub alpha_l_eef: f64,
    /// Source (headset) frame to unified frame rotation.
    pub r_vr_uni: Rotation,
    pub max_lin_step: f64,
    pub max_ang_step: f64,
    pub max_gripper_step: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            alpha_torso: 0.6,
            alpha_r_eef: 1.0,
            alpha_l_eef: 1.0,
            r_vr_uni: Rotation::identity(),
            max_lin_step: 0.01,
            max_ang_step: 0.05,
            max_gripper_step: 0.05,
        }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<(), RetargetError> {
        if self.alpha_torso <= 0.0 || self.alpha_r_eef <= 0.0 || self.alpha_l_eef <= 0.0 {
            return Err(RetargetError::InvalidConfig("alphas must be > 0".into()));
        }
        if self.max_lin_step <= 0.0 || self.max_ang_step <= 0.0 || self.max_gripper_step <= 0.0 {
            return Err(RetargetError::InvalidConfig(
                "per-tick step bounds must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Manipulability threshold below which a target counts as near-singular.
/// Default 1e-3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub tau_mani: f64,
    /// Which Jacobian rows enter the manipulability index.
    pub jacobian_rows: JacobianRows,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            tau_mani: 1e-3,
            jacobian_rows: JacobianRows::PlanarXy,
        }
    }
}

/// Full robot target emitted each tick: torso, both end effectors, and the
/// two gripper angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPose {
    pub torso: Pose,
    pub r_eef: Pose,
    pub l_eef: Pose,
    pub gripper: [f64; 2],
}

/// Operator poses captured at the initializing posture.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OperatorInit {
    pub head: Pose,
    pub r_wrist: Pose,
    pub l_wrist: Pose,
}

/// Per-episode teleoperation state: the randomized reset pose, the operator's
/// initializing posture, and the last emitted target (the fallback of the
/// safety filter). `prev_target` starts at the reset pose.
#[derive(Debug, Clone)]
pub struct TeleopSession {
    pub reset: TargetPose,
    pub operator_init: Option<OperatorInit>,
    pub prev_target: TargetPose,
}

impl TeleopSession {
    pub fn new(reset: TargetPose) -> Self {
        TeleopSession {
            reset,
            operator_init: None,
            prev_target: reset,
        }
    }

    pub fn initialize(&mut self, head: Pose, r_wrist: Pose, l_wrist: Pose) {
        self.operator_init = Some(OperatorInit {
            head,
            r_wrist,
            l_wrist,
        });
    }
}

/// Transform a source-frame pose into the unified frame:
/// `(R_vr_uni * x, R_vr_uni * R)`.
pub fn to_unified(pose_src: &Pose, r_vr_uni: &Rotation) -> Pose {
    Pose {
        translation: r_vr_uni.rotate(pose_src.translation),
        rotation: r_vr_uni.compose(&pose_src.rotation),
    }
}

/// Linear finger-tip-distance to gripper-angle map:
/// `theta = (theta_max - theta_min) / d_tip_max * d_tip + theta_min`,
/// with `d_tip` clamped into `[0, d_tip_max]`.
pub fn gripper_target(d_tip: f64, gmap: &GripperMap) -> f64 {
    let d = d_tip.clamp(0.0, gmap.d_tip_max);
    (gmap.theta_max - gmap.theta_min) / gmap.d_tip_max * d + gmap.theta_min
}

fn map_pose(reset: &Pose, init: &Pose, current: &Pose, alpha: f64) -> Pose {
    Pose {
        translation: vadd(
            reset.translation,
            vscale(vsub(current.translation, init.translation), alpha),
        ),
        rotation: reset
            .rotation
            .compose(&init.rotation.inverse().compose(&current.rotation)),
    }
}

/// Compute the robot target from the current operator poses (already in the
/// unified frame): translations move by `alpha * (current - init)` from the
/// reset pose, rotations apply the operator's relative rotation on the right
/// of the reset rotation, and gripper angles come from the finger-tip map.
pub fn compute_targets(
    session: &TeleopSession,
    cfg: &RetargetConfig,
    head: &Pose,
    r_wrist: &Pose,
    l_wrist: &Pose,
    d_tip: [f64; 2],
    gmap: &GripperMap,
) -> Result<TargetPose, RetargetError> {
    let init = session.operator_init.ok_or(RetargetError::NotInitialized)?;
    Ok(TargetPose {
        torso: map_pose(&session.reset.torso, &init.head, head, cfg.alpha_torso),
        r_eef: map_pose(&session.reset.r_eef, &init.r_wrist, r_wrist, cfg.alpha_r_eef),
        l_eef: map_pose(&session.reset.l_eef, &init.l_wrist, l_wrist, cfg.alpha_l_eef),
        gripper: [
            gripper_target(d_tip[0], gmap),
            gripper_target(d_tip[1], gmap),
        ],
    })
}

/// Whether a tracking joint solution is safe: inside joint limits, away from
/// singularity, and free of self-collision.
pub fn tracking_is_safe(
    model: &KinematicModel,
    scfg: &SafetyConfig,
    q: &[f64],
) -> bool {
    if !joint_limit_check(model, q).unwrap_or(false) {
        return false;
    }
    let jac = match jacobian(model, q, model.links.len() - 1) {
        Ok(j) => j,
        Err(_) => return false,
    };
    if manipulability(&select_rows(&jac, scfg.jacobian_rows)) < scfg.tau_mani {
        return false;
    }
    !self_collision_check(model, q).unwrap_or(true)
}

/// Safety filter: if the tracking solution for `candidate` violates joint
/// limits, falls below the manipulability threshold, or self-collides, the
/// previous target is re-emitted; otherwise the candidate becomes the new
/// previous target. The fallback is the contract, not an error.
pub fn safety_filter(
    model: &KinematicModel,
    scfg: &SafetyConfig,
    session: &mut TeleopSession,
    candidate: TargetPose,
    ik_solution: &[f64],
) -> TargetPose {
    if tracking_is_safe(model, scfg, ik_solution) {
        session.prev_target = candidate;
        candidate
    } else {
        session.prev_target
    }
}

/// Bimanual variant: both arms' tracking solutions must be safe.
pub fn safety_filter_bimanual(
    right: &KinematicModel,
    left: &KinematicModel,
    scfg: &SafetyConfig,
    session: &mut TeleopSession,
    candidate: TargetPose,
    ik_right: &[f64],
    ik_left: &[f64],
) -> TargetPose {
    if tracking_is_safe(right, scfg, ik_right) && tracking_is_safe(left, scfg, ik_left) {
        session.prev_target = candidate;
        candidate
    } else {
        session.prev_target
    }
}

fn step_translation(prev: [f64; 3], next: [f64; 3], max_step: f64) -> [f64; 3] {
    let dist = vnorm(vsub(next, prev));
    if dist <= max_step {
        next
    } else {
        lerp_translation(prev, next, max_step / dist)
    }
}

fn step_rotation(prev: &Rotation, next: &Rotation, max_step: f64) -> Rotation {
    let angle = prev.angle_to(next);
    if angle <= max_step {
        *next
    } else {
        slerp_rotation(prev, next, max_step / angle)
    }
}

fn step_scalar(prev: f64, next: f64, max_step: f64) -> f64 {
    let d = next - prev;
    if d.abs() <= max_step {
        next
    } else {
        prev + max_step * d.signum()
    }
}

fn step_pose(prev: &Pose, next: &Pose, cfg: &RetargetConfig) -> Pose {
    Pose {
        translation: step_translation(prev.translation, next.translation, cfg.max_lin_step),
        rotation: step_rotation(&prev.rotation, &next.rotation, cfg.max_ang_step),
    }
}

/// Move from `prev` toward `next` by at most the per-tick step bounds:
/// clamped lerp on translations, clamped slerp on rotations, clamped linear
/// steps on gripper angles. Arrives exactly when within one step.
pub fn smooth_step(prev: &TargetPose, next: &TargetPose, cfg: &RetargetConfig) -> TargetPose {
    TargetPose {
        torso: step_pose(&prev.torso, &next.torso, cfg),
        r_eef: step_pose(&prev.r_eef, &next.r_eef, cfg),
        l_eef: step_pose(&prev.l_eef, &next.l_eef, cfg),
        gripper: [
            step_scalar(prev.gripper[0], next.gripper[0], cfg.max_gripper_step),
            step_scalar(prev.gripper[1], next.gripper[1], cfg.max_gripper_step),
        ],
    }
}

/// Reset-pose randomization: uniform +-2 cm translation (x, y) and +-5 deg
/// yaw around a nominal target.
pub fn randomize_reset(nominal: &TargetPose, rng: &mut impl rand::Rng) -> TargetPose {
    let mut jitter = |p: &Pose| -> Pose {
        let dx = (rng.gen::<f64>() * 2.0 - 1.0) * 0.02;
        let dy = (rng.gen::<f64>() * 2.0 - 1.0) * 0.02;
        let dyaw = (rng.gen::<f64>() * 2.0 - 1.0) * 5f64.to_radians();
        Pose {
            translation: vadd(p.translation, [dx, dy, 0.0]),
            rotation: p.rotation.compose(&Rotation::rot_z(dyaw)),
        }
    };
    TargetPose {
        torso: jitter(&nominal.torso),
        r_eef: jitter(&nominal.r_eef),
        l_eef: jitter(&nominal.l_eef),
        gripper: nominal.gripper,
    }
}

//! Synthetic two-embodiment evaluation harness: a planar pick-and-place task,
//! a flat-shaded renderer, a scripted expert for data collection, and the
//! policy rollout protocol.
//!
//! The world is kinematic: arms track targets exactly through planar IK, an
//! object moves with the gripper while held, and task progress is a pair of
//! monotone substep predicates (grasp, place).

mod collect;
mod render;
mod rollout;

pub use collect::{collect_dataset, collect_episode, CollectError};
pub use render::{render_main, render_wrist, View};
pub use rollout::{
    evaluate, rollout, write_eval_csv, EvalReport, RolloutResult, SplitStats,
};

use crate::embodiment::{
    forward_kinematics, link_tip, ActModality, EmbodimentSpec, KinematicModel, ObsModality,
};
use crate::geometry::{compose, inverse, vsub, Pose, Vec3};
use crate::retarget::TargetPose;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const RIGHT: usize = 0;
pub const LEFT: usize = 1;

/// Object colors seen during data collection.
pub const ID_COLORS: [[u8; 3]; 4] = [
    [220, 40, 40],
    [40, 80, 220],
    [230, 200, 40],
    [200, 60, 200],
];

/// Held-out object colors, disjoint from the collection pool.
pub const OOD_COLORS: [[u8; 3]; 3] = [[40, 210, 210], [240, 140, 30], [120, 40, 220]];

pub const ZONE_COLOR: [u8; 3] = [30, 160, 60];
pub const BACKGROUND: [u8; 3] = [40, 40, 40];
pub const ARM_COLOR: [u8; 3] = [200, 200, 200];
pub const EEF_COLOR: [u8; 3] = [255, 255, 255];

pub const OBJECT_HALF: f64 = 0.04;
pub const ZONE_HALF: f64 = 0.05;

/// Task geometry and thresholds for the toy pick-and-place.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub bimanual: bool,
    /// Planar distance within which grasp and place succeed.
    pub tolerance: f64,
    /// Commanded gripper angles (theta in [0, 1], small = closed).
    pub grip_open: f64,
    pub grip_closed: f64,
    /// State thresholds: held requires theta below, release above.
    pub close_thresh: f64,
    pub open_thresh: f64,
    pub control_hz: f64,
    pub max_demo_ticks: usize,
    pub max_rollout_ticks: usize,
    /// Receding-horizon replan interval: execute this many steps of each
    /// predicted chunk before re-inference. 0 means the full chunk.
    #[serde(default)]
    pub replan: usize,
}

/// The toy-collect task: pick a colored block and drop it in the green zone,
/// one block per active arm.
pub fn toy_collect(bimanual: bool) -> TaskConfig {
    TaskConfig {
        name: if bimanual {
            "toy-collect-bi".into()
        } else {
            "toy-collect".into()
        },
        bimanual,
        tolerance: 0.05,
        grip_open: 0.9,
        grip_closed: 0.1,
        close_thresh: 0.35,
        open_thresh: 0.65,
        control_hz: 20.0,
        max_demo_ticks: 400,
        max_rollout_ticks: 240,
        replan: 0,
    }
}

/// Substep names in achievement order.
pub const SUBSTEPS: [&str; 2] = ["grasp", "place"];

/// Fixed drop-zone center for one side.
pub fn zone_center(side: usize) -> Vec3 {
    let sign = if side == RIGHT { -1.0 } else { 1.0 };
    [0.20, sign * 0.12, 0.0]
}

/// Default reset posture: torso at the origin, one end effector per side at a
/// comfortable mid-workspace point, grippers open.
pub fn nominal_reset(task: &TaskConfig) -> TargetPose {
    TargetPose {
        torso: Pose::identity(),
        r_eef: Pose::from_translation([0.14, -0.14, 0.0]),
        l_eef: Pose::from_translation([0.14, 0.14, 0.0]),
        gripper: [task.grip_open; 2],
    }
}

#[derive(Debug, Clone)]
pub struct ObjectState {
    pub pos: Vec3,
    pub color: [u8; 3],
}

#[derive(Debug, Clone)]
struct ArmState {
    q: Vec<f64>,
    grip: f64,
    held: bool,
    grasped_ever: bool,
    placed: bool,
}

/// Full simulation state for one episode.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: EmbodimentSpec,
    pub task: TaskConfig,
    pub torso: Pose,
    pub objects: [Option<ObjectState>; 2],
    arms: [Option<ArmState>; 2],
}

fn planar_dist(a: Vec3, b: Vec3) -> f64 {
    let d = vsub(a, b);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Sample a reachable object position for one side: inside the arm annulus,
/// away from the drop zone.
pub fn sample_object_pos(side: usize, rng: &mut impl rand::Rng) -> Vec3 {
    let sign = if side == RIGHT { -1.0 } else { 1.0 };
    loop {
        let x: f64 = rng.gen_range(0.08..0.26);
        let y: f64 = sign * rng.gen_range(0.04..0.24);
        let p = [x, y, 0.0];
        let r = (x * x + y * y).sqrt();
        if (0.16..=0.26).contains(&r) && planar_dist(p, zone_center(side)) >= 0.09 {
            return p;
        }
    }
}

impl World {
    /// Which sides carry an arm, from the gripper active-dim flags.
    pub fn active_sides(spec: &EmbodimentSpec) -> Vec<usize> {
        let dims = spec.act_dims(ActModality::GripperAction);
        [RIGHT, LEFT]
            .into_iter()
            .filter(|&s| dims.get(s).copied().unwrap_or(false))
            .collect()
    }

    pub fn arm_model(&self, side: usize) -> &KinematicModel {
        if side == LEFT {
            if let Some(left) = &self.spec.kinematics_left {
                return left;
            }
        }
        &self.spec.kinematics
    }

    /// New episode state at a reset posture, with object positions and the
    /// object color drawn from the given pool.
    pub fn new(
        spec: &EmbodimentSpec,
        task: &TaskConfig,
        reset: &TargetPose,
        colors: &[[u8; 3]],
        rng: &mut impl rand::Rng,
    ) -> World {
        let mut w = World {
            spec: spec.clone(),
            task: task.clone(),
            torso: reset.torso,
            objects: [None, None],
            arms: [None, None],
        };
        for side in World::active_sides(spec) {
            w.objects[side] = Some(ObjectState {
                pos: sample_object_pos(side, rng),
                color: colors[rng.gen_range(0..colors.len())],
            });
            w.arms[side] = Some(ArmState {
                q: vec![0.0; w.arm_model(side).joint_count()],
                grip: reset.gripper[side],
                held: false,
                grasped_ever: false,
                placed: false,
            });
        }
        w.track(reset);
        w
    }

    fn eef_target(target: &TargetPose, side: usize) -> &Pose {
        if side == RIGHT {
            &target.r_eef
        } else {
            &target.l_eef
        }
    }

    /// Drive the kinematics to a tracked target: the torso moves directly,
    /// each active arm solves planar IK in the torso frame, grippers take the
    /// commanded angles. No grasp logic; used for the initial posture.
    fn track(&mut self, tracked: &TargetPose) {
        self.torso = tracked.torso;
        for side in [RIGHT, LEFT] {
            if self.arms[side].is_none() {
                continue;
            }
            let local = compose(&inverse(&self.torso), Self::eef_target(tracked, side));
            let q = crate::embodiment::planar_two_link_ik(self.arm_model(side), local.translation);
            let arm = self.arms[side].as_mut().unwrap();
            arm.q = q;
            arm.grip = tracked.gripper[side];
        }
    }

    /// World-frame pose of one arm's end effector from forward kinematics.
    pub fn eef_pose(&self, side: usize) -> Pose {
        let arm = self.arms[side].as_ref().expect("inactive side");
        let model = self.arm_model(side);
        let frames = forward_kinematics(model, &arm.q).unwrap();
        let tip = link_tip(model, &frames, model.links.len() - 1);
        let local = Pose::new(tip, frames[model.links.len() - 1].rotation);
        compose(&self.torso, &local)
    }

    pub fn held(&self, side: usize) -> bool {
        self.arms[side].as_ref().map(|a| a.held).unwrap_or(false)
    }

    pub fn placed(&self, side: usize) -> bool {
        self.arms[side].as_ref().map(|a| a.placed).unwrap_or(false)
    }

    pub fn arm_q(&self, side: usize) -> &[f64] {
        &self.arms[side].as_ref().expect("inactive side").q
    }

    pub fn gripper(&self, side: usize) -> f64 {
        self.arms[side].as_ref().map(|a| a.grip).unwrap_or(0.0)
    }

    /// Advance one tick: track the target, then update grasp and place state.
    /// A closed gripper within tolerance of its object picks it up; the object
    /// rides the end effector while held; opening releases it, and a release
    /// inside the zone counts as placed. All task flags are monotone.
    pub fn apply(&mut self, tracked: &TargetPose) {
        self.track(tracked);
        for side in [RIGHT, LEFT] {
            if self.arms[side].is_none() {
                continue;
            }
            let eef = self.eef_pose(side).translation;
            let (closed, open) = {
                let a = self.arms[side].as_ref().unwrap();
                (
                    a.grip < self.task.close_thresh,
                    a.grip > self.task.open_thresh,
                )
            };
            let obj_pos = self.objects[side].as_ref().map(|o| o.pos);
            let arm = self.arms[side].as_mut().unwrap();
            if arm.held {
                if open {
                    arm.held = false;
                    if let Some(p) = obj_pos {
                        if planar_dist(p, zone_center(side)) < self.task.tolerance {
                            arm.placed = true;
                        }
                    }
                } else if let Some(o) = self.objects[side].as_mut() {
                    o.pos = eef;
                }
            } else if closed && !arm.placed {
                if let Some(p) = obj_pos {
                    if planar_dist(p, eef) < self.task.tolerance {
                        arm.held = true;
                        arm.grasped_ever = true;
                        if let Some(o) = self.objects[side].as_mut() {
                            o.pos = eef;
                        }
                    }
                }
            }
        }
    }

    /// Substep flags in order: every active arm has grasped, every active arm
    /// has placed.
    pub fn substeps(&self) -> Vec<bool> {
        let arms: Vec<&ArmState> = self.arms.iter().flatten().collect();
        vec![
            arms.iter().all(|a| a.grasped_ever),
            arms.iter().all(|a| a.placed),
        ]
    }

    pub fn success(&self) -> bool {
        self.substeps().into_iter().all(|b| b)
    }

    /// Task score: one point per achieved substep plus one for full success.
    pub fn score(&self) -> usize {
        let subs = self.substeps();
        subs.iter().filter(|&&b| b).count() + usize::from(self.success())
    }

    /// Observation set matching the embodiment's schema (the derived
    /// EEF-to-body modality is filled in at record time).
    pub fn observe(&self) -> BTreeMap<ObsModality, crate::dataset::ObsValue> {
        use crate::dataset::ObsValue;
        let mut obs = BTreeMap::new();
        obs.insert(
            ObsModality::MainImage,
            ObsValue::Image(render_main(self)),
        );
        if self.spec.obs_available(ObsModality::WristImage) {
            let side = *World::active_sides(&self.spec)
                .first()
                .expect("wrist camera needs an arm");
            obs.insert(
                ObsModality::WristImage,
                ObsValue::Image(render_wrist(self, side)),
            );
        }
        obs.insert(
            ObsModality::BodyPose,
            ObsValue::Vector(self.torso.to_vec6().to_vec()),
        );
        let mut eef = vec![0.0; 12];
        let mut grip = vec![0.0; 2];
        for side in [RIGHT, LEFT] {
            if self.arms[side].is_some() {
                let v6 = self.eef_pose(side).to_vec6();
                eef[side * 6..side * 6 + 6].copy_from_slice(&v6);
                grip[side] = self.gripper(side);
            }
        }
        obs.insert(ObsModality::EefPose, ObsValue::Vector(eef));
        obs.insert(ObsModality::GripperState, ObsValue::Vector(grip));
        obs
    }
}

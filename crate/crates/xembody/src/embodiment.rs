//! Embodiment descriptions: kinematic chains, modality availability, and the
//! predicates consumed by the teleoperation safety filter.
//!
//! An embodiment is one row of the availability matrix: which observation and
//! action modalities it carries, which dimensions inside those modalities are
//! live, and a kinematic model of its manipulator(s).

use crate::geometry::{compose, vadd, vnorm, vscale, vsub, Pose, Rotation, Vec3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbodimentError {
    #[error("joint vector has length {got}, model has {expected} joints")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("link index {0} out of range")]
    BadLinkIndex(usize),
    #[error("unknown embodiment `{0}`")]
    UnknownEmbodiment(String),
    #[error("invalid embodiment config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Closed set of observation modality names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsModality {
    MainImage,
    WristImage,
    BodyPose,
    EefPose,
    EefToBodyPose,
    GripperState,
}

impl ObsModality {
    /// Fixed ordering used everywhere tokens or blocks are concatenated.
    pub const ALL: [ObsModality; 6] = [
        ObsModality::MainImage,
        ObsModality::WristImage,
        ObsModality::BodyPose,
        ObsModality::EefPose,
        ObsModality::EefToBodyPose,
        ObsModality::GripperState,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObsModality::MainImage => "main_image",
            ObsModality::WristImage => "wrist_image",
            ObsModality::BodyPose => "body_pose",
            ObsModality::EefPose => "eef_pose",
            ObsModality::EefToBodyPose => "eef_to_body_pose",
            ObsModality::GripperState => "gripper_state",
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, ObsModality::MainImage | ObsModality::WristImage)
    }

    /// Vector length for non-image modalities.
    pub fn vector_dim(&self) -> Option<usize> {
        match self {
            ObsModality::MainImage | ObsModality::WristImage => None,
            ObsModality::BodyPose => Some(6),
            ObsModality::EefPose => Some(12),
            ObsModality::EefToBodyPose => Some(12),
            ObsModality::GripperState => Some(2),
        }
    }
}

/// Closed set of action modality names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActModality {
    BodyPose,
    EefPose,
    GripperAction,
}

impl ActModality {
    pub const ALL: [ActModality; 3] = [
        ActModality::BodyPose,
        ActModality::EefPose,
        ActModality::GripperAction,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActModality::BodyPose => "body_pose",
            ActModality::EefPose => "eef_pose",
            ActModality::GripperAction => "gripper_action",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ActModality::BodyPose => 6,
            ActModality::EefPose => 12,
            ActModality::GripperAction => 2,
        }
    }
}

/// Linear map from operator finger-tip distance to gripper angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GripperMap {
    pub theta_min: f64,
    pub theta_max: f64,
    pub d_tip_max: f64,
}

impl GripperMap {
    pub fn validate(&self) -> Result<(), EmbodimentError> {
        if self.theta_min >= self.theta_max {
            return Err(EmbodimentError::InvalidConfig(
                "gripper theta_min must be < theta_max".into(),
            ));
        }
        if self.d_tip_max <= 0.0 {
            return Err(EmbodimentError::InvalidConfig(
                "gripper d_tip_max must be > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GripperMap {
    fn default() -> Self {
        GripperMap {
            theta_min: 0.0,
            theta_max: 1.0,
            d_tip_max: 0.12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionSphere {
    /// Center offset in the owning link's frame, meters.
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    /// Distance from the link frame origin to the link tip along local +x.
    pub length: f64,
    #[serde(default)]
    pub spheres: Vec<CollisionSphere>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    /// Joint origin translation in the parent link frame.
    pub origin: Vec3,
    /// Rotation axis in the joint frame (unit vector).
    pub axis: Vec3,
    pub lower: f64,
    pub upper: f64,
}

/// A serial chain of revolute joints. `links[0]` is the base link; joint `i`
/// connects link `i` to link `i + 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KinematicModel {
    pub base: Pose,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    /// Extra non-adjacent link pairs excluded from self-collision checking.
    #[serde(default)]
    pub collision_exclude: Vec<(usize, usize)>,
}

impl KinematicModel {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), EmbodimentError> {
        if self.links.len() != self.joints.len() + 1 {
            return Err(EmbodimentError::InvalidConfig(
                "links must number joints + 1".into(),
            ));
        }
        for j in &self.joints {
            if j.lower >= j.upper {
                return Err(EmbodimentError::InvalidConfig(
                    "joint limits must satisfy lower < upper".into(),
                ));
            }
        }
        for l in &self.links {
            for s in &l.spheres {
                if s.radius <= 0.0 {
                    return Err(EmbodimentError::InvalidConfig(
                        "collision spheres need radius > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), EmbodimentError> {
        if q.len() != self.joints.len() {
            return Err(EmbodimentError::DimensionMismatch {
                got: q.len(),
                expected: self.joints.len(),
            });
        }
        Ok(())
    }
}

/// World-frame pose of every link frame, chained from the base.
pub fn forward_kinematics(
    model: &KinematicModel,
    q: &[f64],
) -> Result<Vec<Pose>, EmbodimentError> {
    model.check_dim(q)?;
    let mut frames = Vec::with_capacity(model.links.len());
    frames.push(model.base);
    for (i, joint) in model.joints.iter().enumerate() {
        let parent = frames[i];
        let step = Pose::new(joint.origin, Rotation::from_axis_angle(joint.axis, q[i]));
        frames.push(compose(&parent, &step));
    }
    Ok(frames)
}

/// World-frame position of a link's tip (its frame origin shifted by the link
/// length along local +x).
pub fn link_tip(model: &KinematicModel, frames: &[Pose], link: usize) -> Vec3 {
    let f = &frames[link];
    vadd(
        f.translation,
        f.rotation.rotate([model.links[link].length, 0.0, 0.0]),
    )
}

const JAC_STEP: f64 = 1e-6;

/// Geometric Jacobian of a link's tip, 6 x n with rows `[v; w]`, computed by
/// central finite differences with step 1e-6 rad. One implementation serves
/// every simulated morphology; validated against the analytic 2-link oracle in
/// tests.
pub fn jacobian(
    model: &KinematicModel,
    q: &[f64],
    link: usize,
) -> Result<Array2<f64>, EmbodimentError> {
    model.check_dim(q)?;
    if link >= model.links.len() {
        return Err(EmbodimentError::BadLinkIndex(link));
    }
    let n = q.len();
    let mut jac = Array2::zeros((6, n));
    let mut qp = q.to_vec();
    for i in 0..n {
        qp[i] = q[i] + JAC_STEP;
        let fp = forward_kinematics(model, &qp)?;
        qp[i] = q[i] - JAC_STEP;
        let fm = forward_kinematics(model, &qp)?;
        qp[i] = q[i];

        let dv = vscale(
            vsub(link_tip(model, &fp, link), link_tip(model, &fm, link)),
            1.0 / (2.0 * JAC_STEP),
        );
        // Orientation columns from the relative rotation R(q+d) * R(q-d)^T.
        let dr = fp[link]
            .rotation
            .compose(&fm[link].rotation.inverse())
            .to_axis_angle();
        let dw = vscale(dr, 1.0 / (2.0 * JAC_STEP));
        for r in 0..3 {
            jac[(r, i)] = dv[r];
            jac[(r + 3, i)] = dw[r];
        }
    }
    Ok(jac)
}

/// Which Jacobian rows enter the manipulability index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianRows {
    /// In-plane translational rows (x, y) for planar agents.
    PlanarXy,
    /// All six spatial rows.
    Full,
}

pub fn select_rows(jac: &Array2<f64>, rows: JacobianRows) -> Array2<f64> {
    match rows {
        JacobianRows::PlanarXy => jac.slice(ndarray::s![0..2, ..]).to_owned(),
        JacobianRows::Full => jac.clone(),
    }
}

fn det(m: &Array2<f64>) -> f64 {
    // LU with partial pivoting; matrices here are at most 6 x 6.
    let n = m.nrows();
    let mut a = m.clone();
    let mut d = 1.0;
    for k in 0..n {
        let mut p = k;
        for i in k + 1..n {
            if a[(i, k)].abs() > a[(p, k)].abs() {
                p = i;
            }
        }
        if a[(p, k)] == 0.0 {
            return 0.0;
        }
        if p != k {
            for j in 0..n {
                let t = a[(k, j)];
                a[(k, j)] = a[(p, j)];
                a[(p, j)] = t;
            }
            d = -d;
        }
        d *= a[(k, k)];
        for i in k + 1..n {
            let f = a[(i, k)] / a[(k, k)];
            for j in k..n {
                a[(i, j)] -= f * a[(k, j)];
            }
        }
    }
    d
}

/// Manipulability index `sqrt(det(J * J^T))`, clamped at 0 when the
/// determinant is negative within numerical noise.
pub fn manipulability(jac: &Array2<f64>) -> f64 {
    assert!(jac.nrows() >= 1, "jacobian needs at least one row");
    let jjt = jac.dot(&jac.t());
    let d = det(&jjt);
    if d <= 0.0 {
        0.0
    } else {
        d.sqrt()
    }
}

/// True iff every joint angle lies inside its limits, bounds inclusive.
pub fn joint_limit_check(model: &KinematicModel, q: &[f64]) -> Result<bool, EmbodimentError> {
    model.check_dim(q)?;
    Ok(model
        .joints
        .iter()
        .zip(q)
        .all(|(j, &qi)| qi >= j.lower && qi <= j.upper))
}

/// True iff any non-excluded, non-adjacent link sphere pair overlaps
/// (strict inequality: exactly tangent spheres do not collide).
pub fn self_collision_check(model: &KinematicModel, q: &[f64]) -> Result<bool, EmbodimentError> {
    let frames = forward_kinematics(model, q)?;
    let nl = model.links.len();
    for i in 0..nl {
        for j in i + 1..nl {
            if j - i <= 1 {
                continue; // adjacent links share a joint
            }
            if model
                .collision_exclude
                .iter()
                .any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j))
            {
                continue;
            }
            for si in &model.links[i].spheres {
                for sj in &model.links[j].spheres {
                    let ci = vadd(frames[i].translation, frames[i].rotation.rotate(si.center));
                    let cj = vadd(frames[j].translation, frames[j].rotation.rotate(sj.center));
                    if vnorm(vsub(ci, cj)) < si.radius + sj.radius {
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

/// Analytic planar 2-link inverse kinematics for a chain whose two joints both
/// rotate about +z. Targets outside the annulus are clamped to the nearest
/// reachable radius, which drives the arm toward full extension (and the
/// manipulability index toward zero).
pub fn planar_two_link_ik(model: &KinematicModel, target: Vec3) -> Vec<f64> {
    assert_eq!(model.joints.len(), 2, "planar IK expects a 2-joint chain");
    let l1 = vnorm(model.joints[1].origin);
    let l2 = model.links[2].length;
    // Target in the chain root frame (base * joint0 origin).
    let root = compose(&model.base, &Pose::from_translation(model.joints[0].origin));
    let local = root.rotation.inverse().rotate(vsub(target, root.translation));
    let (x, y) = (local[0], local[1]);
    let d = (x * x + y * y).sqrt();
    let c2 = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos(); // elbow-down branch
    let q1 = y.atan2(x) - (l2 * q2.sin()).atan2(l1 + l2 * c2);
    vec![q1, q2]
}

/// One row of the availability matrix plus the kinematic description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub name: String,
    pub obs_mask: BTreeMap<ObsModality, bool>,
    pub act_mask: BTreeMap<ActModality, bool>,
    /// Live dimensions inside each available vector modality; a dimension
    /// marked inactive is zero in all recorded data.
    pub obs_active_dims: BTreeMap<ObsModality, Vec<bool>>,
    pub act_active_dims: BTreeMap<ActModality, Vec<bool>>,
    /// Right-arm (or only-arm) manipulator chain.
    pub kinematics: KinematicModel,
    /// Second chain for bimanual embodiments.
    #[serde(default)]
    pub kinematics_left: Option<KinematicModel>,
    pub gripper: GripperMap,
    /// True for the human rows: data comes from direct demonstration, not
    /// teleoperated tracking.
    pub is_human: bool,
}

impl EmbodimentSpec {
    pub fn obs_available(&self, m: ObsModality) -> bool {
        *self.obs_mask.get(&m).unwrap_or(&false)
    }

    pub fn act_available(&self, m: ActModality) -> bool {
        *self.act_mask.get(&m).unwrap_or(&false)
    }

    pub fn obs_dims(&self, m: ObsModality) -> &[bool] {
        self.obs_active_dims
            .get(&m)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn act_dims(&self, m: ActModality) -> &[bool] {
        self.act_active_dims
            .get(&m)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), EmbodimentError> {
        self.kinematics.validate()?;
        if let Some(left) = &self.kinematics_left {
            left.validate()?;
        }
        self.gripper.validate()?;
        for m in ObsModality::ALL {
            if let Some(dim) = m.vector_dim() {
                let dims = self.obs_dims(m);
                if self.obs_available(m) && dims.len() != dim {
                    return Err(EmbodimentError::InvalidConfig(format!(
                        "obs modality {} needs {dim} active-dim flags",
                        m.name()
                    )));
                }
            }
        }
        for m in ActModality::ALL {
            if self.act_available(m) && self.act_dims(m).len() != m.dim() {
                return Err(EmbodimentError::InvalidConfig(format!(
                    "act modality {} needs {} active-dim flags",
                    m.name(),
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// Load a declarative embodiment config from a JSON file.
    pub fn load(path: &Path) -> Result<Self, EmbodimentError> {
        let text = std::fs::read_to_string(path)?;
        let spec: EmbodimentSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbodimentError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn side_dims(right: bool, left: bool) -> Vec<bool> {
    let mut v = vec![right; 6];
    v.extend(vec![left; 6]);
    v
}

fn arm_model(l1: f64, l2: f64, limit: f64, shoulder: Vec3) -> KinematicModel {
    KinematicModel {
        base: Pose::identity(),
        links: vec![
            Link {
                length: 0.0,
                spheres: vec![CollisionSphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.05,
                }],
            },
            Link {
                length: l1,
                spheres: vec![CollisionSphere {
                    center: [l1 / 2.0, 0.0, 0.0],
                    radius: 0.03,
                }],
            },
            Link {
                length: l2,
                spheres: vec![
                    CollisionSphere {
                        center: [l2 / 2.0, 0.0, 0.0],
                        radius: 0.03,
                    },
                    CollisionSphere {
                        center: [l2, 0.0, 0.0],
                        radius: 0.025,
                    },
                ],
            },
        ],
        joints: vec![
            Joint {
                origin: shoulder,
                axis: [0.0, 0.0, 1.0],
                lower: -limit,
                upper: limit,
            },
            Joint {
                origin: [l1, 0.0, 0.0],
                axis: [0.0, 0.0, 1.0],
                lower: -limit,
                upper: limit,
            },
        ],
        collision_exclude: vec![],
    }
}

/// Robot manipulator: 0.20 m + 0.16 m links, +-2.7 rad joint limits.
pub fn robot_arm() -> KinematicModel {
    arm_model(0.20, 0.16, 2.7, [0.0, 0.0, 0.0])
}

/// Simulated human arm: deliberately different link lengths and wider limits,
/// so the embodiment gap is real.
pub fn human_arm() -> KinematicModel {
    arm_model(0.30, 0.25, 3.1, [0.0, 0.0, 0.0])
}

fn build_spec(
    name: &str,
    is_human: bool,
    wrist_image: bool,
    right: bool,
    left: bool,
    body_action: bool,
) -> EmbodimentSpec {
    let mut obs_mask = BTreeMap::new();
    obs_mask.insert(ObsModality::MainImage, true);
    obs_mask.insert(ObsModality::WristImage, wrist_image);
    obs_mask.insert(ObsModality::BodyPose, true);
    obs_mask.insert(ObsModality::EefPose, true);
    obs_mask.insert(ObsModality::EefToBodyPose, true);
    obs_mask.insert(ObsModality::GripperState, true);

    let mut act_mask = BTreeMap::new();
    act_mask.insert(ActModality::BodyPose, body_action);
    act_mask.insert(ActModality::EefPose, true);
    act_mask.insert(ActModality::GripperAction, true);

    // The robot proprioceptively senses both arms even in unimanual mode;
    // the human only reports the wrist actually tracked.
    let (obs_r, obs_l) = if is_human {
        (right, left)
    } else {
        (true, true)
    };

    let mut obs_active_dims = BTreeMap::new();
    obs_active_dims.insert(ObsModality::BodyPose, vec![true; 6]);
    obs_active_dims.insert(ObsModality::EefPose, side_dims(obs_r, obs_l));
    obs_active_dims.insert(ObsModality::EefToBodyPose, side_dims(obs_r, obs_l));
    obs_active_dims.insert(ObsModality::GripperState, vec![right, left]);

    let mut act_active_dims = BTreeMap::new();
    act_active_dims.insert(ActModality::BodyPose, vec![body_action; 6]);
    act_active_dims.insert(ActModality::EefPose, side_dims(right, left));
    act_active_dims.insert(ActModality::GripperAction, vec![right, left]);

    let arm = if is_human { human_arm() } else { robot_arm() };
    let kinematics_left = if left && right {
        Some(arm.clone())
    } else if left {
        // Left-only unimanual mode still uses the single chain slot.
        None
    } else {
        None
    };

    EmbodimentSpec {
        name: name.to_string(),
        obs_mask,
        act_mask,
        obs_active_dims,
        act_active_dims,
        kinematics: arm,
        kinematics_left,
        gripper: GripperMap::default(),
        is_human,
    }
}

/// The six built-in embodiments.
pub fn builtin(name: &str) -> Result<EmbodimentSpec, EmbodimentError> {
    let spec = match name {
        "human-uni-r" => build_spec("human-uni-r", true, false, true, false, true),
        "human-uni-l" => build_spec("human-uni-l", true, false, false, true, true),
        "human-bi" => build_spec("human-bi", true, false, true, true, true),
        "locoman-uni-r" => build_spec("locoman-uni-r", false, true, true, false, true),
        "locoman-uni-l" => build_spec("locoman-uni-l", false, true, false, true, true),
        "locoman-bi" => build_spec("locoman-bi", false, false, true, true, false),
        other => return Err(EmbodimentError::UnknownEmbodiment(other.to_string())),
    };
    Ok(spec)
}

pub const BUILTIN_NAMES: [&str; 6] = [
    "human-uni-r",
    "human-uni-l",
    "human-bi",
    "locoman-uni-r",
    "locoman-uni-l",
    "locoman-bi",
];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_link_unit() -> KinematicModel {
        arm_model(1.0, 1.0, 3.0, [0.0, 0.0, 0.0])
    }

    fn one_link_unit() -> KinematicModel {
        KinematicModel {
            base: Pose::identity(),
            links: vec![
                Link {
                    length: 0.0,
                    spheres: vec![],
                },
                Link {
                    length: 1.0,
                    spheres: vec![],
                },
            ],
            joints: vec![Joint {
                origin: [0.0, 0.0, 0.0],
                axis: [0.0, 0.0, 1.0],
                lower: -3.0,
                upper: 3.0,
            }],
            collision_exclude: vec![],
        }
    }

    #[test]
    fn fk_zero_configuration() {
        let m = two_link_unit();
        let frames = forward_kinematics(&m, &[0.0, 0.0]).unwrap();
        let tip = link_tip(&m, &frames, 2);
        assert!(vnorm(vsub(tip, [2.0, 0.0, 0.0])) < 1e-12);
    }

    #[test]
    fn fk_single_rotation() {
        let m = one_link_unit();
        let frames = forward_kinematics(&m, &[std::f64::consts::FRAC_PI_2]).unwrap();
        let tip = link_tip(&m, &frames, 1);
        assert!(vnorm(vsub(tip, [0.0, 1.0, 0.0])) < 1e-12);
    }

    #[test]
    fn fk_matches_homogeneous_chain_oracle() {
        use crate::geometry::homogeneous;
        let m = two_link_unit();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let frames = forward_kinematics(&m, &q).unwrap();
            let tip = link_tip(&m, &frames, 2);

            // Oracle: explicit homogeneous matrix product chain.
            let mut mat = homogeneous::from_pose(&m.base);
            for (i, j) in m.joints.iter().enumerate() {
                let step = Pose::new(j.origin, Rotation::from_axis_angle(j.axis, q[i]));
                mat = homogeneous::matmul(&mat, &homogeneous::from_pose(&step));
            }
            let tip_step = Pose::from_translation([m.links[2].length, 0.0, 0.0]);
            mat = homogeneous::matmul(&mat, &homogeneous::from_pose(&tip_step));
            assert!(vnorm(vsub(tip, homogeneous::translation(&mat))) < 1e-9);
        }
    }

    #[test]
    fn fk_dimension_mismatch() {
        let m = two_link_unit();
        assert!(matches!(
            forward_kinematics(&m, &[0.0]),
            Err(EmbodimentError::DimensionMismatch { .. })
        ));
    }

    /// Closed-form planar 2-link Jacobian (translational part).
    fn analytic_two_link_jac(l1: f64, l2: f64, q: &[f64]) -> Array2<f64> {
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        ndarray::arr2(&[
            [-l1 * s1 - l2 * s12, -l2 * s12],
            [l1 * c1 + l2 * c12, l2 * c12],
        ])
    }

    #[test]
    fn jacobian_two_link_zero_config() {
        let m = two_link_unit();
        let j = jacobian(&m, &[0.0, 0.0], 2).unwrap();
        // Translational rows at q = 0: x row [0, 0], y row [2, 1], z row [0, 0].
        assert!(j[(0, 0)].abs() < 1e-6 && j[(0, 1)].abs() < 1e-6);
        assert!((j[(1, 0)] - 2.0).abs() < 1e-6 && (j[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(j[(2, 0)].abs() < 1e-6 && j[(2, 1)].abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_analytic_formula() {
        let m = two_link_unit();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let j = select_rows(&jacobian(&m, &q, 2).unwrap(), JacobianRows::PlanarXy);
            let a = analytic_two_link_jac(1.0, 1.0, &q);
            for r in 0..2 {
                for c in 0..2 {
                    assert!((j[(r, c)] - a[(r, c)]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn manipulability_identity_and_singular() {
        let eye: Array2<f64> = Array2::eye(2);
        assert!((manipulability(&eye) - 1.0).abs() < 1e-12);
        let dup = ndarray::arr2(&[[1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(manipulability(&dup), 0.0);
    }

    #[test]
    fn manipulability_matches_analytic_two_link() {
        let m = two_link_unit();
        let q = [0.3, std::f64::consts::FRAC_PI_2];
        let j = select_rows(&jacobian(&m, &q, 2).unwrap(), JacobianRows::PlanarXy);
        // Analytic: l1 * l2 * |sin q2| = 1.
        assert!((manipulability(&j) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn manipulability_row_permutation_invariant() {
        let j = ndarray::arr2(&[[1.0, 2.0], [0.5, -0.3]]);
        let jp = ndarray::arr2(&[[0.5, -0.3], [1.0, 2.0]]);
        assert!((manipulability(&j) - manipulability(&jp)).abs() < 1e-12);
    }

    #[test]
    fn manipulability_scaling_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let j = Array2::from_shape_fn((2, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let c: f64 = rng.gen::<f64>() + 0.5;
            let lhs = manipulability(&(&j * c));
            let rhs = c.powi(2) * manipulability(&j);
            assert!((lhs - rhs).abs() / rhs.max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn joint_limits_inclusive_bounds() {
        let m = two_link_unit();
        assert!(joint_limit_check(&m, &[-3.0, 3.0]).unwrap());
        assert!(!joint_limit_check(&m, &[-3.001, 0.0]).unwrap());
        assert!(joint_limit_check(&m, &[0.5, -0.5]).unwrap());
    }

    #[test]
    fn limit_check_true_implies_clamp_identity() {
        let m = two_link_unit();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect();
            if joint_limit_check(&m, &q).unwrap() {
                let clamped: Vec<f64> = q
                    .iter()
                    .zip(&m.joints)
                    .map(|(&qi, j)| qi.clamp(j.lower, j.upper))
                    .collect();
                assert_eq!(q, clamped);
            }
        }
    }

    #[test]
    fn self_collision_stretched_vs_folded() {
        let m = robot_arm();
        assert!(!self_collision_check(&m, &[0.0, 0.0]).unwrap());
        // Fold the forearm back onto the base: tip sphere ends up near the
        // torso sphere. Oracle: pairwise distance scan.
        let folded = [0.0, std::f64::consts::PI - 0.2];
        let frames = forward_kinematics(&m, &folded).unwrap();
        let tip = vadd(
            frames[2].translation,
            frames[2].rotation.rotate([m.links[2].length, 0.0, 0.0]),
        );
        let torso_c = frames[0].translation;
        let overlap = vnorm(vsub(tip, torso_c)) < 0.05 + 0.025;
        assert_eq!(self_collision_check(&m, &folded).unwrap(), overlap);
        assert!(overlap);
    }

    #[test]
    fn tangent_spheres_do_not_collide() {
        // Two spheres exactly tangent: center distance == r1 + r2.
        let mut m = one_link_unit();
        m.links[0].spheres = vec![CollisionSphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        }];
        m.links.push(Link {
            length: 0.0,
            spheres: vec![CollisionSphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.5,
            }],
        });
        m.joints.push(Joint {
            origin: [1.0, 0.0, 0.0],
            axis: [0.0, 0.0, 1.0],
            lower: -1.0,
            upper: 1.0,
        });
        // links 0 and 2, centers 1.0 apart, radii 0.5 + 0.5.
        assert!(!self_collision_check(&m, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn fk_is_lipschitz_continuous() {
        let m = two_link_unit();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // Empirical bound: total arm length 2, so |d tip| <= ~3 |dq|.
        for _ in 0..100 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let dq: Vec<f64> = (0..2).map(|_| (rng.gen::<f64>() - 0.5) * 1e-3).collect();
            let q2: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + b).collect();
            let t1 = link_tip(&m, &forward_kinematics(&m, &q).unwrap(), 2);
            let t2 = link_tip(&m, &forward_kinematics(&m, &q2).unwrap(), 2);
            let dn = (dq[0] * dq[0] + dq[1] * dq[1]).sqrt();
            assert!(vnorm(vsub(t1, t2)) <= 3.0 * dn);
        }
    }

    #[test]
    fn planar_ik_round_trip() {
        let m = robot_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let r = 0.08 + rng.gen::<f64>() * 0.25;
            let a = rng.gen::<f64>() * std::f64::consts::TAU;
            let target = [r * a.cos(), r * a.sin(), 0.0];
            let q = planar_two_link_ik(&m, target);
            let tip = link_tip(&m, &forward_kinematics(&m, &q).unwrap(), 2);
            if r <= 0.36 - 1e-9 && r >= 0.04 + 1e-9 {
                assert!(vnorm(vsub(tip, target)) < 1e-9, "r = {r}");
            }
        }
    }

    #[test]
    fn builtin_specs_match_availability_matrix() {
        for name in BUILTIN_NAMES {
            let s = builtin(name).unwrap();
            s.validate().unwrap();
            assert!(s.obs_available(ObsModality::MainImage));
        }
        let hr = builtin("human-uni-r").unwrap();
        assert!(!hr.obs_available(ObsModality::WristImage));
        assert!(!hr.act_dims(ActModality::EefPose)[6]);
        assert!(hr.act_dims(ActModality::EefPose)[0]);
        assert!(hr.act_available(ActModality::BodyPose));

        let lr = builtin("locoman-uni-r").unwrap();
        assert!(lr.obs_available(ObsModality::WristImage));
        assert!(lr.obs_dims(ObsModality::EefPose).iter().all(|&b| b));
        assert!(!lr.act_dims(ActModality::EefPose)[6]);

        let lb = builtin("locoman-bi").unwrap();
        assert!(!lb.obs_available(ObsModality::WristImage));
        assert!(!lb.act_available(ActModality::BodyPose));
        assert!(lb.kinematics_left.is_some());
    }

    #[test]
    fn spec_config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let s = builtin("locoman-uni-r").unwrap();
        s.save(&path).unwrap();
        let loaded = EmbodimentSpec::load(&path).unwrap();
        assert_eq!(loaded.name, s.name);
        assert_eq!(loaded.obs_mask, s.obs_mask);
        assert_eq!(loaded.act_active_dims, s.act_active_dims);
    }
}

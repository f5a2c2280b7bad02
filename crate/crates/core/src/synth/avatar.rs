//! A rigid 17-joint skeleton that rotates in place and swings its arms.

use std::f64::consts::PI;

use crate::heatmap::{JointId, Keypoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Joint {
    Head = 0,
    Neck,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
    Pelvis,
    Chest,
    Nose,
}

pub const JOINT_COUNT: usize = 17;

impl Joint {
    pub const ALL: [Joint; JOINT_COUNT] = [
        Joint::Head,
        Joint::Neck,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
        Joint::Pelvis,
        Joint::Chest,
        Joint::Nose,
    ];

    pub fn id(self) -> JointId {
        self as JointId
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Head => "head",
            Joint::Neck => "neck",
            Joint::LeftShoulder => "left_shoulder",
            Joint::RightShoulder => "right_shoulder",
            Joint::LeftElbow => "left_elbow",
            Joint::RightElbow => "right_elbow",
            Joint::LeftWrist => "left_wrist",
            Joint::RightWrist => "right_wrist",
            Joint::LeftHip => "left_hip",
            Joint::RightHip => "right_hip",
            Joint::LeftKnee => "left_knee",
            Joint::RightKnee => "right_knee",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightAnkle => "right_ankle",
            Joint::Pelvis => "pelvis",
            Joint::Chest => "chest",
            Joint::Nose => "nose",
        }
    }

    pub fn is_hip_or_knee(self) -> bool {
        matches!(
            self,
            Joint::LeftHip | Joint::RightHip | Joint::LeftKnee | Joint::RightKnee | Joint::Pelvis
        )
    }
}

/// Skeleton bones as joint pairs; their 3D lengths never change.
pub const BONES: [(Joint, Joint); 14] = [
    (Joint::Neck, Joint::Head),
    (Joint::Head, Joint::Nose),
    (Joint::Neck, Joint::Chest),
    (Joint::Chest, Joint::Pelvis),
    (Joint::LeftShoulder, Joint::LeftElbow),
    (Joint::LeftElbow, Joint::LeftWrist),
    (Joint::RightShoulder, Joint::RightElbow),
    (Joint::RightElbow, Joint::RightWrist),
    (Joint::LeftHip, Joint::LeftKnee),
    (Joint::LeftKnee, Joint::LeftAnkle),
    (Joint::RightHip, Joint::RightKnee),
    (Joint::RightKnee, Joint::RightAnkle),
    (Joint::Chest, Joint::LeftShoulder),
    (Joint::Chest, Joint::RightShoulder),
];

pub const UPPER_ARM: f64 = 13.0;
pub const FOREARM: f64 = 12.0;
pub const HAND_OFFSET: f64 = 2.5;
const ARM_ABDUCTION: f64 = 0.18;
const ELBOW_BEND: f64 = 0.25;

/// Scripted movement of the avatar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Full in-place turns plus sinusoidal arm swings.
    Rotating {
        /// Frames per full turn.
        period: f64,
        /// Root angle at frame 0, radians.
        phase: f64,
        swing_period: f64,
        swing_amplitude: f64,
    },
    /// One pose held for every frame.
    Frozen { root_angle: f64, swing: f64 },
}

impl Default for Motion {
    fn default() -> Self {
        Motion::Rotating { period: 120.0, phase: 0.0, swing_period: 40.0, swing_amplitude: 0.5 }
    }
}

impl Motion {
    pub fn root_angle(&self, t: u64) -> f64 {
        match *self {
            Motion::Rotating { period, phase, .. } => phase + 2.0 * PI * t as f64 / period,
            Motion::Frozen { root_angle, .. } => root_angle,
        }
    }

    pub fn swing(&self, t: u64) -> f64 {
        match *self {
            Motion::Rotating { swing_period, swing_amplitude, .. } => {
                swing_amplitude * (2.0 * PI * t as f64 / swing_period).sin()
            }
            Motion::Frozen { swing, .. } => swing,
        }
    }

    /// Root angular velocity in radians per frame.
    pub fn angular_speed(&self) -> f64 {
        match *self {
            Motion::Rotating { period, .. } => 2.0 * PI / period,
            Motion::Frozen { .. } => 0.0,
        }
    }
}

/// Snaps values within 1e-12 of zero, so that turns by exactly pi mirror the
/// skeleton bit-exactly.
fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvatarPose {
    /// Image-plane positions, indexed by [`Joint`].
    pub joint_positions: [(f64, f64); JOINT_COUNT],
    /// Image-plane positions with x measured from the vertical center line.
    /// Rendering works in these coordinates so that mirrored poses stay
    /// mirrored bit-for-bit.
    pub offsets: [(f64, f64); JOINT_COUNT],
    /// Articulated body-frame positions before the root turn (x toward the
    /// avatar's left, y down, z toward the camera at root angle 0).
    pub joints_3d: [[f64; 3]; JOINT_COUNT],
    pub root_angle: f64,
    pub swing: f64,
    pub time_index: u64,
    /// Pixels per body unit; the body is designed on a 96-row canvas.
    pub unit: f64,
    pub resolution: (usize, usize),
}

impl AvatarPose {
    pub fn new(root_angle: f64, swing: f64, time_index: u64, resolution: (usize, usize)) -> Self {
        let unit = resolution.0 as f64 / 96.0;
        let mut j3 = [[0.0; 3]; JOINT_COUNT];
        let mut set = |j: Joint, p: [f64; 3]| j3[j as usize] = p.map(|v| v * unit);
        set(Joint::Head, [0.0, 12.0, 0.0]);
        set(Joint::Nose, [0.0, 13.0, 5.5]);
        set(Joint::Neck, [0.0, 20.0, 0.0]);
        set(Joint::Chest, [0.0, 31.0, 0.0]);
        set(Joint::Pelvis, [0.0, 50.0, 0.0]);
        for side in [1.0, -1.0] {
            let (sh, el, wr, hip, knee, ankle) = if side > 0.0 {
                (Joint::LeftShoulder, Joint::LeftElbow, Joint::LeftWrist, Joint::LeftHip, Joint::LeftKnee, Joint::LeftAnkle)
            } else {
                (Joint::RightShoulder, Joint::RightElbow, Joint::RightWrist, Joint::RightHip, Joint::RightKnee, Joint::RightAnkle)
            };
            // Arms swing in opposite phase.
            let phi = side * swing;
            let phi2 = phi + ELBOW_BEND;
            let s = [side * 9.0, 25.0, 0.0];
            let d1 = [side * ARM_ABDUCTION.sin() * phi.cos(), ARM_ABDUCTION.cos() * phi.cos(), phi.sin()];
            let d2 = [side * ARM_ABDUCTION.sin() * phi2.cos(), ARM_ABDUCTION.cos() * phi2.cos(), phi2.sin()];
            let e = [0, 1, 2].map(|k| s[k] + UPPER_ARM * d1[k]);
            let w = [0, 1, 2].map(|k| e[k] + FOREARM * d2[k]);
            set(sh, s);
            set(el, e);
            set(wr, w);
            set(hip, [side * 5.0, 52.0, 0.0]);
            set(knee, [side * 5.5, 68.0, 0.0]);
            set(ankle, [side * 5.5, 84.0, 0.0]);
        }
        let (c, s) = (snap(root_angle.cos()), snap(root_angle.sin()));
        let cx = resolution.1 as f64 / 2.0;
        let mut joint_positions = [(0.0, 0.0); JOINT_COUNT];
        let mut offsets = [(0.0, 0.0); JOINT_COUNT];
        for (i, p) in j3.iter().enumerate() {
            offsets[i] = (p[0] * c + p[2] * s, p[1]);
            joint_positions[i] = (cx + offsets[i].0, p[1]);
        }
        Self { joint_positions, offsets, joints_3d: j3, root_angle, swing, time_index, unit, resolution }
    }

    pub fn at(motion: &Motion, t: u64, resolution: (usize, usize)) -> Self {
        Self::new(motion.root_angle(t), motion.swing(t), t, resolution)
    }

    pub fn position(&self, j: Joint) -> (f64, f64) {
        self.joint_positions[j as usize]
    }

    pub fn cos_sin(&self) -> (f64, f64) {
        (snap(self.root_angle.cos()), snap(self.root_angle.sin()))
    }

    /// Camera-facing depth of a body-frame point after the root turn.
    pub fn depth_of(&self, p: [f64; 3]) -> f64 {
        let (c, s) = self.cos_sin();
        -p[0] * s + p[2] * c
    }

    pub fn joint_depth(&self, j: Joint) -> f64 {
        self.depth_of(self.joints_3d[j as usize])
    }

    pub fn offset(&self, j: Joint) -> (f64, f64) {
        self.offsets[j as usize]
    }

    /// Center-relative position and depth of the hand center on the given side.
    pub fn hand(&self, left: bool) -> ((f64, f64), f64) {
        let (el, wr) = if left {
            (Joint::LeftElbow, Joint::LeftWrist)
        } else {
            (Joint::RightElbow, Joint::RightWrist)
        };
        let (e, w) = (self.joints_3d[el as usize], self.joints_3d[wr as usize]);
        let scale = HAND_OFFSET / FOREARM;
        let h = [0, 1, 2].map(|k| w[k] + (w[k] - e[k]) * scale);
        let (c, s) = self.cos_sin();
        ((h[0] * c + h[2] * s, h[1]), self.depth_of(h))
    }

    pub fn bone_length_3d(&self, a: Joint, b: Joint) -> f64 {
        let (p, q) = (self.joints_3d[a as usize], self.joints_3d[b as usize]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        Joint::ALL
            .iter()
            .map(|j| {
                let (x, y) = self.position(*j);
                Keypoint { id: j.id(), x, y, confidence: 1.0 }
            })
            .collect()
    }

    pub fn in_bounds(&self) -> bool {
        let (h, w) = self.resolution;
        self.joint_positions
            .iter()
            .all(|(x, y)| *x >= 0.0 && *x < w as f64 && *y >= 0.0 && *y < h as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bones_are_rigid_along_a_sequence() {
        let motion = Motion::default();
        let first = AvatarPose::at(&motion, 0, (96, 72));
        for t in 1..130 {
            let p = AvatarPose::at(&motion, t, (96, 72));
            assert!(p.in_bounds(), "frame {t} leaves the image");
            for (a, b) in BONES {
                assert!((p.bone_length_3d(a, b) - first.bone_length_3d(a, b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn half_turn_mirrors_the_skeleton() {
        let a = AvatarPose::new(0.0, 0.0, 0, (96, 72));
        let b = AvatarPose::new(PI, 0.0, 0, (96, 72));
        for j in Joint::ALL {
            let (pa, pb) = (a.offset(j), b.offset(j));
            assert_eq!(pb.0, -pa.0, "{}", j.name());
            assert_eq!(pb.1, pa.1);
        }
    }
}

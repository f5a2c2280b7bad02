//! Software rasterizer for the avatar body: part labels, depth, and surface
//! coordinates per pixel. Geometry is expressed with x measured from the
//! image's vertical center line.

use super::avatar::{AvatarPose, Joint};
use crate::semantic::synthetic_labels as lbl;

/// Surface sample of one primitive at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub label: u8,
    pub depth: f64,
    /// Angle of the visible surface point relative to the view direction.
    pub phi_local: f64,
    /// Distance along the part's long axis, in pixels.
    pub v: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Shape {
    Capsule { a: (f64, f64), b: (f64, f64), za: f64, zb: f64, radius: f64 },
    Disc { c: (f64, f64), z: f64, radius: f64 },
    Torso,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Part {
    pub label: u8,
    pub shape: Shape,
}

/// Torso lateral half-width (in body units) at body height `y` (units).
pub(crate) fn torso_lateral(y: f64) -> f64 {
    if y <= 28.0 {
        10.0
    } else if y <= 42.0 {
        10.0 - 3.0 * (y - 28.0) / 14.0
    } else {
        7.0 + 1.5 * (y - 42.0) / 11.0
    }
}

pub(crate) const TORSO_TOP: f64 = 22.0;
pub(crate) const TORSO_BOTTOM: f64 = 53.0;
pub(crate) const TORSO_DEPTH: f64 = 5.5;

/// Projected torso half-width in pixels at image row coordinate `py`.
pub(crate) fn torso_half_width(pose: &AvatarPose, py: f64, inflate: f64) -> f64 {
    let (c, s) = pose.cos_sin();
    let yu = py / pose.unit;
    let a = torso_lateral(yu.clamp(TORSO_TOP, TORSO_BOTTOM)) + inflate;
    let b = TORSO_DEPTH + inflate;
    (a * a * c * c + b * b * s * s).sqrt() * pose.unit
}

pub(crate) fn capsule_hit(
    p: (f64, f64),
    a: (f64, f64),
    b: (f64, f64),
    za: f64,
    zb: f64,
    radii: (f64, f64),
) -> Option<(f64, f64, f64)> {
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let len2 = ex * ex + ey * ey;
    let (t, len) = if len2 < 1e-18 {
        (0.0, 0.0)
    } else {
        (((p.0 - a.0) * ex + (p.1 - a.1) * ey) / len2, len2.sqrt())
    };
    let t = t.clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * ex, a.1 + t * ey);
    let d2 = (p.0 - qx).powi(2) + (p.1 - qy).powi(2);
    let radius = radii.0 + t * (radii.1 - radii.0);
    if d2 > radius * radius {
        return None;
    }
    let across = if len < 1e-9 {
        (p.0 - a.0) / radius
    } else {
        -(ex * (p.1 - a.1) - ey * (p.0 - a.0)) / (len * radius)
    };
    let depth = za + t * (zb - za) + (radius * radius - d2).sqrt();
    Some((depth, across.clamp(-1.0, 1.0).asin(), t * len))
}

impl Part {
    fn hit(&self, pose: &AvatarPose, p: (f64, f64)) -> Option<Hit> {
        match self.shape {
            Shape::Capsule { a, b, za, zb, radius } => capsule_hit(p, a, b, za, zb, (radius, radius))
                .map(|(depth, phi_local, v)| Hit { label: self.label, depth, phi_local, v }),
            Shape::Disc { c, z, radius } => {
                let d2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
                (d2 <= radius * radius).then(|| Hit {
                    label: self.label,
                    depth: z + (radius * radius - d2).sqrt(),
                    phi_local: ((p.0 - c.0) / radius).clamp(-1.0, 1.0).asin(),
                    v: p.1 - (c.1 - radius),
                })
            }
            Shape::Torso => {
                let u = pose.unit;
                if p.1 < TORSO_TOP * u || p.1 > TORSO_BOTTOM * u {
                    return None;
                }
                let hw = torso_half_width(pose, p.1, 0.0);
                if p.0.abs() > hw {
                    return None;
                }
                let r = p.0 / hw;
                Some(Hit {
                    label: lbl::TORSO,
                    depth: TORSO_DEPTH * u * (1.0 - r * r).sqrt(),
                    phi_local: r.asin(),
                    v: p.1 - TORSO_TOP * u,
                })
            }
        }
    }

    /// Head and hands are removed from the measurement-garment render.
    pub fn is_extremity(&self) -> bool {
        matches!(self.label, lbl::HEAD | lbl::LEFT_HAND | lbl::RIGHT_HAND)
    }
}

pub(crate) fn body_parts(pose: &AvatarPose) -> Vec<Part> {
    let u = pose.unit;
    let limb = |label, ja: Joint, jb: Joint, r: f64| Part {
        label,
        shape: Shape::Capsule {
            a: pose.offset(ja),
            b: pose.offset(jb),
            za: pose.joint_depth(ja),
            zb: pose.joint_depth(jb),
            radius: r * u,
        },
    };
    let mut parts = vec![
        Part { label: lbl::TORSO, shape: Shape::Torso },
        Part {
            label: lbl::HEAD,
            shape: Shape::Disc { c: pose.offset(Joint::Head), z: pose.joint_depth(Joint::Head), radius: 6.0 * u },
        },
        limb(lbl::HEAD, Joint::Neck, Joint::Head, 3.0),
        limb(lbl::LEFT_UPPER_ARM, Joint::LeftShoulder, Joint::LeftElbow, 2.6),
        limb(lbl::RIGHT_UPPER_ARM, Joint::RightShoulder, Joint::RightElbow, 2.6),
        limb(lbl::LEFT_FOREARM, Joint::LeftElbow, Joint::LeftWrist, 2.2),
        limb(lbl::RIGHT_FOREARM, Joint::RightElbow, Joint::RightWrist, 2.2),
        limb(lbl::LEFT_THIGH, Joint::LeftHip, Joint::LeftKnee, 4.0),
        limb(lbl::RIGHT_THIGH, Joint::RightHip, Joint::RightKnee, 4.0),
        limb(lbl::LEFT_SHIN, Joint::LeftKnee, Joint::LeftAnkle, 3.0),
        limb(lbl::RIGHT_SHIN, Joint::RightKnee, Joint::RightAnkle, 3.0),
    ];
    for (left, label) in [(true, lbl::LEFT_HAND), (false, lbl::RIGHT_HAND)] {
        let (c, z) = pose.hand(left);
        parts.push(Part { label, shape: Shape::Disc { c, z, radius: 2.4 * u } });
    }
    parts
}

/// Per-pixel front-most body surface, with and without the extremities.
#[derive(Clone, Debug)]
pub struct BodyRender {
    pub height: usize,
    pub width: usize,
    pub front: Vec<Option<Hit>>,
    /// Front-most surface once head and hands are removed.
    pub trimmed: Vec<Option<Hit>>,
}

impl BodyRender {
    pub fn new(pose: &AvatarPose) -> Self {
        let (height, width) = pose.resolution;
        let parts = body_parts(pose);
        let cx = width as f64 / 2.0;
        let mut front = Vec::with_capacity(height * width);
        let mut trimmed = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let p = (x as f64 + 0.5 - cx, y as f64 + 0.5);
                let mut best: Option<Hit> = None;
                let mut best_trim: Option<Hit> = None;
                for part in &parts {
                    if let Some(h) = part.hit(pose, p) {
                        if best.map_or(true, |b| h.depth > b.depth) {
                            best = Some(h);
                        }
                        if !part.is_extremity() && best_trim.map_or(true, |b| h.depth > b.depth) {
                            best_trim = Some(h);
                        }
                    }
                }
                front.push(best);
                trimmed.push(best_trim);
            }
        }
        Self { height, width, front, trimmed }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.front.iter().map(|h| h.map_or(lbl::BACKGROUND, |h| h.label)).collect()
    }

    pub fn silhouette(&self) -> Vec<bool> {
        self.front.iter().map(Option::is_some).collect()
    }
}

/// Distance to the nearest integer.
pub(crate) fn frac_dist(v: f64) -> f64 {
    (v - v.round()).abs()
}

pub(crate) const GRID_AROUND: f64 = 12.0;

/// RGB of the grid-textured measurement garment at one surface sample.
/// Green marks grid lines; red and blue encode the body-frame facing angle.
pub(crate) fn vm_color(hit: &Hit, root_angle: f64, unit: f64) -> [f32; 3] {
    let phi = hit.phi_local + root_angle;
    let around = frac_dist(hit.phi_local * GRID_AROUND / (2.0 * std::f64::consts::PI) + root_angle * GRID_AROUND / (2.0 * std::f64::consts::PI));
    let along = frac_dist(hit.v / (4.0 * unit));
    let line = around < 0.12 || along < 0.12;
    [
        (0.5 + 0.45 * phi.cos()) as f32,
        if line { 1.0 } else { 0.3 },
        (0.5 + 0.45 * phi.sin()) as f32,
    ]
}

pub(crate) const SKIN: [f32; 3] = [0.88, 0.71, 0.58];
pub(crate) const PANTS: [f32; 3] = [0.22, 0.24, 0.34];
pub(crate) const HAIR: [f32; 3] = [0.25, 0.15, 0.10];

pub(crate) fn body_color(hit: &Hit, root_angle: f64) -> [f32; 3] {
    let shade = (0.55 + 0.45 * hit.phi_local.cos()) as f32;
    let base = match hit.label {
        lbl::LEFT_THIGH | lbl::RIGHT_THIGH | lbl::LEFT_SHIN | lbl::RIGHT_SHIN => PANTS,
        lbl::HEAD if (hit.phi_local + root_angle).cos() < -0.1 => HAIR,
        _ => SKIN,
    };
    base.map(|c| c * shade)
}

pub(crate) fn background_color(y: usize, height: usize) -> [f32; 3] {
    let g = 0.1 * y as f32 / height as f32;
    [0.80 - g, 0.82 - g, 0.85 - g]
}

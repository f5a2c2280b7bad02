//! Procedural garments worn by the avatar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::avatar::{AvatarPose, Joint};
use super::render::{capsule_hit, torso_half_width, BodyRender, Hit, TORSO_BOTTOM, TORSO_DEPTH, TORSO_TOP};
use crate::error::{Error, Result};
use crate::semantic::synthetic_labels as lbl;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GarmentStyle {
    Tight,
    LooseSkirt,
    LooseSleeve,
    Jacket,
}

impl GarmentStyle {
    pub const ALL: [GarmentStyle; 4] =
        [GarmentStyle::Tight, GarmentStyle::LooseSkirt, GarmentStyle::LooseSleeve, GarmentStyle::Jacket];

    pub fn name(self) -> &'static str {
        match self {
            GarmentStyle::Tight => "tight",
            GarmentStyle::LooseSkirt => "loose-skirt",
            GarmentStyle::LooseSleeve => "loose-sleeve",
            GarmentStyle::Jacket => "jacket",
        }
    }

    pub fn is_loose(self) -> bool {
        self != GarmentStyle::Tight
    }

    /// Whether the garment hides the hips and knees from a keypoint detector.
    pub fn hides_legs(self) -> bool {
        matches!(self, GarmentStyle::LooseSkirt | GarmentStyle::Jacket)
    }

    /// Body labels the garment is worn over.
    pub(crate) fn covers(self, label: u8) -> bool {
        match self {
            GarmentStyle::Tight => matches!(label, lbl::TORSO | lbl::LEFT_UPPER_ARM | lbl::RIGHT_UPPER_ARM),
            GarmentStyle::LooseSkirt => label == lbl::TORSO || lbl::is_lower_body(label),
            GarmentStyle::LooseSleeve => label == lbl::TORSO || lbl::is_arm(label),
            GarmentStyle::Jacket => {
                label == lbl::TORSO || lbl::is_arm(label) || matches!(label, lbl::LEFT_THIGH | lbl::RIGHT_THIGH)
            }
        }
    }
}

impl std::str::FromStr for GarmentStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GarmentStyle::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown garment style `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGarmentSpec {
    pub style: GarmentStyle,
    /// Hem/sleeve displacement scale in pixels.
    pub sway_amplitude: f64,
    /// Share of the sway that is redrawn at random every frame, in `[0, 1]`.
    pub sway_stochasticity: f64,
    pub texture_seed: u64,
    pub color: [f32; 3],
}

impl SyntheticGarmentSpec {
    pub fn new(
        style: GarmentStyle,
        sway_amplitude: f64,
        sway_stochasticity: f64,
        texture_seed: u64,
        color: [f32; 3],
    ) -> Result<Self> {
        let spec = Self { style, sway_amplitude, sway_stochasticity, texture_seed, color };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sway_amplitude >= 0.0 && self.sway_amplitude.is_finite()) {
            return Err(Error::Config(format!("sway_amplitude {} must be non-negative", self.sway_amplitude)));
        }
        if self.style == GarmentStyle::Tight && self.sway_amplitude != 0.0 {
            return Err(Error::Config("a tight garment cannot sway".into()));
        }
        if !(0.0..=1.0).contains(&self.sway_stochasticity) {
            return Err(Error::Config(format!(
                "sway_stochasticity {} must lie in [0, 1]",
                self.sway_stochasticity
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Range("garment color leaves [0, 1]".into()));
        }
        Ok(())
    }

    /// Preset for each style with moderate sway.
    pub fn preset(style: GarmentStyle) -> Self {
        let (amp, stoch, color) = match style {
            GarmentStyle::Tight => (0.0, 0.0, [0.20, 0.45, 0.75]),
            GarmentStyle::LooseSkirt => (3.0, 0.5, [0.75, 0.22, 0.30]),
            GarmentStyle::LooseSleeve => (2.0, 0.5, [0.85, 0.78, 0.35]),
            GarmentStyle::Jacket => (1.5, 0.3, [0.30, 0.55, 0.35]),
        };
        Self { style, sway_amplitude: amp, sway_stochasticity: stoch, texture_seed: style as u64 + 1, color }
    }
}

const HEM_HARMONICS: usize = 3;
const HEM_CORRELATION: f64 = 0.8;

/// Fourier hem perturbation whose coefficients follow an AR(1) process, so
/// consecutive frames are correlated but never identical.
#[derive(Clone, Debug)]
pub(crate) struct HemNoise {
    coeffs: [f64; 2 * HEM_HARMONICS],
    rng: ChaCha8Rng,
}

impl HemNoise {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6d5f_6e6f_6973);
        let coeffs = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        Self { coeffs, rng }
    }

    pub fn advance(&mut self) {
        let k = (1.0 - HEM_CORRELATION * HEM_CORRELATION).sqrt();
        for c in &mut self.coeffs {
            let e: f64 = StandardNormal.sample(&mut self.rng);
            *c = HEM_CORRELATION * *c + k * e;
        }
    }

    /// Zero-mean, roughly unit-variance profile over `u` in `[-1, 1]`.
    pub fn profile(&self, u: f64) -> f64 {
        let s = (u.clamp(-1.0, 1.0) + 1.0) * std::f64::consts::FRAC_PI_2;
        let mut v = 0.0;
        for k in 0..HEM_HARMONICS {
            let f = (k + 1) as f64;
            v += self.coeffs[2 * k] * (f * s).sin() + self.coeffs[2 * k + 1] * (f * s).cos();
        }
        v / (HEM_HARMONICS as f64).sqrt()
    }
}

/// Frame-level garment motion: a deterministic lag that follows the turn
/// plus a random hem perturbation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Sway<'a> {
    pub lateral: f64,
    pub lift: f64,
    pub noise_scale: f64,
    pub noise: &'a HemNoise,
}

impl<'a> Sway<'a> {
    pub fn new(spec: &SyntheticGarmentSpec, angular_speed: f64, t: u64, noise: &'a HemNoise) -> Self {
        // Full lag is reached at one turn per 120 frames.
        let drive = (angular_speed.abs() * 120.0 / (2.0 * std::f64::consts::PI)).min(1.0);
        let det = spec.sway_amplitude * (1.0 - spec.sway_stochasticity) * drive;
        let wobble = 0.8 + 0.2 * (2.0 * std::f64::consts::PI * t as f64 / 23.0).sin();
        Self {
            lateral: -det * wobble * angular_speed.signum(),
            lift: 0.5 * det,
            noise_scale: 2.0 * spec.sway_amplitude * spec.sway_stochasticity,
            noise,
        }
    }

    fn hem(&self, u: f64) -> f64 {
        self.noise_scale * self.noise.profile(u)
    }
}

pub(crate) const WAIST: f64 = 44.0;
pub(crate) const SKIRT_HEM: f64 = 74.0;
const SKIRT_TOP_HALF: f64 = 7.5;
const SKIRT_HEM_HALF: f64 = 13.0;
const JACKET_HEM: f64 = 60.0;

fn torso_piece(pose: &AvatarPose, p: (f64, f64), inflate: f64, top: f64, bottom: f64) -> Option<Hit> {
    let u = pose.unit;
    if p.1 < top || p.1 > bottom {
        return None;
    }
    let hw = torso_half_width(pose, p.1, inflate);
    if p.0.abs() > hw {
        return None;
    }
    let r = p.0 / hw;
    Some(Hit {
        label: lbl::TORSO,
        depth: (TORSO_DEPTH + inflate) * u * (1.0 - r * r).sqrt(),
        phi_local: r.asin(),
        v: p.1 - TORSO_TOP * u,
    })
}

fn sleeve_piece(
    pose: &AvatarPose,
    p: (f64, f64),
    ja: Joint,
    jb: Joint,
    radii: (f64, f64),
    label: u8,
) -> Option<Hit> {
    let (depth, phi_local, v) = capsule_hit(
        p,
        pose.offset(ja),
        pose.offset(jb),
        pose.joint_depth(ja),
        pose.joint_depth(jb),
        (radii.0 * pose.unit, radii.1 * pose.unit),
    )?;
    Some(Hit { label, depth, phi_local, v })
}

fn skirt_piece(pose: &AvatarPose, p: (f64, f64), sway: &Sway) -> Option<Hit> {
    let u = pose.unit;
    let (top, span) = (WAIST * u, (SKIRT_HEM - WAIST) * u);
    if p.1 < top {
        return None;
    }
    let depth_frac = ((p.1 - top) / span).min(1.2);
    let half = (SKIRT_TOP_HALF + (SKIRT_HEM_HALF - SKIRT_TOP_HALF) * depth_frac) * u;
    let center = sway.lateral * depth_frac * depth_frac;
    let dx = p.0 - center;
    if dx.abs() > half {
        return None;
    }
    let hem = SKIRT_HEM * u - sway.lift + sway.hem(dx / (SKIRT_HEM_HALF * u));
    if p.1 > hem {
        return None;
    }
    let r = dx / half;
    Some(Hit { label: lbl::TORSO, depth: half * (1.0 - r * r).sqrt(), phi_local: r.asin(), v: p.1 - top })
}

/// Garment surface at one pixel, ignoring occlusion by the body.
fn garment_hit(pose: &AvatarPose, style: GarmentStyle, p: (f64, f64), sway: &Sway) -> Option<Hit> {
    let u = pose.unit;
    let pieces: Vec<Option<Hit>> = match style {
        GarmentStyle::Tight => unreachable!("tight garments follow the body labels"),
        GarmentStyle::LooseSkirt => vec![
            torso_piece(pose, p, 0.3, TORSO_TOP * u, WAIST * u + 1.0),
            skirt_piece(pose, p, sway),
        ],
        GarmentStyle::Jacket => {
            let hem = JACKET_HEM * u - sway.lift + sway.hem(p.0 / (10.0 * u));
            vec![
                torso_piece(pose, p, 1.5, (TORSO_TOP - 0.7) * u, hem),
                sleeve_piece(pose, p, Joint::LeftShoulder, Joint::LeftElbow, (4.1, 3.8), lbl::LEFT_UPPER_ARM),
                sleeve_piece(pose, p, Joint::RightShoulder, Joint::RightElbow, (4.1, 3.8), lbl::RIGHT_UPPER_ARM),
                sleeve_piece(pose, p, Joint::LeftElbow, Joint::LeftWrist, (3.6, 3.4), lbl::LEFT_FOREARM),
                sleeve_piece(pose, p, Joint::RightElbow, Joint::RightWrist, (3.6, 3.4), lbl::RIGHT_FOREARM),
            ]
        }
        GarmentStyle::LooseSleeve => {
            let cuff = |left: bool| {
                let n = sway.hem(if left { 0.5 } else { -0.5 }) / u;
                (4.2, (5.6 + 0.5 * n).max(3.0))
            };
            vec![
                torso_piece(pose, p, 1.0, (TORSO_TOP - 0.5) * u, (TORSO_BOTTOM + 2.0) * u),
                sleeve_piece(pose, p, Joint::LeftShoulder, Joint::LeftElbow, (3.6, 4.2), lbl::LEFT_UPPER_ARM),
                sleeve_piece(pose, p, Joint::RightShoulder, Joint::RightElbow, (3.6, 4.2), lbl::RIGHT_UPPER_ARM),
                sleeve_piece(pose, p, Joint::LeftElbow, Joint::LeftWrist, cuff(true), lbl::LEFT_FOREARM),
                sleeve_piece(pose, p, Joint::RightElbow, Joint::RightWrist, cuff(false), lbl::RIGHT_FOREARM),
            ]
        }
    };
    pieces.into_iter().flatten().fold(None, |best: Option<Hit>, h| match best {
        Some(b) if b.depth >= h.depth => Some(b),
        _ => Some(h),
    })
}

fn pattern(seed: u64, hit: &Hit, root_angle: f64, unit: f64) -> bool {
    let freq = 1.0 + ((seed / 3) % 3) as f64;
    let around = ((hit.phi_local + root_angle) * (2.0 + freq) / std::f64::consts::PI).floor() as i64;
    let along = (hit.v / ((2.0 + freq) * unit)).floor() as i64;
    match seed % 3 {
        0 => along.rem_euclid(2) == 0,
        1 => around.rem_euclid(2) == 0,
        _ => (along + around).rem_euclid(2) == 0,
    }
}

pub(crate) fn garment_color(spec: &SyntheticGarmentSpec, hit: &Hit, root_angle: f64, unit: f64) -> [f32; 3] {
    let tone = if pattern(spec.texture_seed, hit, root_angle, unit) { 1.0 } else { 0.72 };
    let shade = (0.6 + 0.4 * hit.phi_local.cos()) as f32;
    spec.color.map(|c| c * tone * shade)
}

/// Per-pixel garment layer: the visible garment surface, or `None`.
pub(crate) fn render_garment(
    pose: &AvatarPose,
    body: &BodyRender,
    spec: &SyntheticGarmentSpec,
    sway: &Sway,
) -> Vec<Option<Hit>> {
    let cx = body.width as f64 / 2.0;
    let mut out = Vec::with_capacity(body.front.len());
    for y in 0..body.height {
        for x in 0..body.width {
            let front = body.front[y * body.width + x];
            if spec.style == GarmentStyle::Tight {
                out.push(front.filter(|h| spec.style.covers(h.label)));
                continue;
            }
            let p = (x as f64 + 0.5 - cx, y as f64 + 0.5);
            let visible = garment_hit(pose, spec.style, p, sway).filter(|g| match front {
                None => true,
                Some(b) => spec.style.covers(b.label) || g.depth >= b.depth,
            });
            out.push(visible);
        }
    }
    out
}

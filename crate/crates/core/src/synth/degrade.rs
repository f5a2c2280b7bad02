//! Simulated failures of an off-the-shelf body estimator on clothed people.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::avatar::{AvatarPose, Joint};
use super::garment::{GarmentStyle, SyntheticGarmentSpec};
use crate::error::{Error, Result};
use crate::heatmap::Keypoint;
use crate::raster::MaskImage;
use crate::semantic::{synthetic_labels as lbl, SemanticMap};

/// Probability that a label-boundary pixel takes a neighbour's label.
pub const BOUNDARY_FLIP: f64 = 0.12;

/// What a direct semantic-map estimator would report for a frame.
///
/// Tight garments only pick up boundary noise. Loose garments additionally
/// swallow what they occlude: inside the garment silhouette, hidden parts and
/// background become torso; outside it, lower-body labels are lost.
pub fn degrade_semantic_estimate(
    gt: &SemanticMap,
    garment_mask: &MaskImage,
    spec: &SyntheticGarmentSpec,
    seed: u64,
) -> Result<SemanticMap> {
    if gt.resolution() != garment_mask.resolution() {
        return Err(Error::shape(format!(
            "semantic map {:?} vs garment mask {:?}",
            gt.resolution(),
            garment_mask.resolution()
        )));
    }
    let (h, w) = gt.resolution();
    let inside = garment_mask.binarized();
    let torso = gt.palette().torso();
    let mut labels: Vec<u8> = gt
        .labels()
        .iter()
        .zip(&inside)
        .map(|(&l, &m)| match (spec.style, m) {
            (GarmentStyle::Tight, _) => l,
            (GarmentStyle::LooseSkirt, true) if l == lbl::BACKGROUND || lbl::is_lower_body(l) => torso,
            (GarmentStyle::LooseSkirt, false) if lbl::is_lower_body(l) => lbl::BACKGROUND,
            (GarmentStyle::LooseSleeve, true) if l == lbl::BACKGROUND || lbl::is_arm(l) => torso,
            (GarmentStyle::Jacket, true)
                if l == lbl::BACKGROUND || matches!(l, lbl::LEFT_THIGH | lbl::RIGHT_THIGH) =>
            {
                torso
            }
            _ => l,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_6772_6164_65);
    let src = labels.clone();
    for y in 0..h {
        for x in 0..w {
            let here = src[y * w + x];
            let mut others = [0u8; 4];
            let mut n = 0;
            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    let l = src[yy as usize * w + xx as usize];
                    if l != here {
                        others[n] = l;
                        n += 1;
                    }
                }
            }
            let flip = rng.gen_bool(BOUNDARY_FLIP);
            let pick = rng.gen_range(0..4usize);
            if n > 0 && flip {
                labels[y * w + x] = others[pick % n];
            }
        }
    }
    SemanticMap::new(h, w, labels, gt.palette().clone())
}

/// Keypoints as a detector would report them through the garment. Joints a
/// loose garment hides (hips, knees, pelvis) drift and lose confidence; all
/// other joints are reported exactly, independent of the garment.
pub fn perceive_keypoints(pose: &AvatarPose, spec: &SyntheticGarmentSpec, seed: u64) -> Vec<Keypoint> {
    let mut keypoints = pose.keypoints();
    if !spec.style.hides_legs() {
        return keypoints;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pose.time_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let drift = Normal::new(0.0, 2.0 * pose.unit).expect("positive sigma");
    for (k, j) in keypoints.iter_mut().zip(Joint::ALL) {
        if j.is_hip_or_knee() {
            k.x += drift.sample(&mut rng);
            k.y += drift.sample(&mut rng) + pose.unit;
            k.confidence = rng.gen_range(0.3..0.7);
        }
    }
    keypoints
}

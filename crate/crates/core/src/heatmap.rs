//! Per-joint Gaussian heatmaps.

use crate::error::{Error, Result};
use crate::raster::check_resolution;

pub type JointId = u16;

/// A 2D keypoint with detector confidence in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub id: JointId,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// One raster per joint, all at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    height: usize,
    width: usize,
    joints: Vec<JointId>,
    maps: Vec<Vec<f32>>,
}

impl HeatmapStack {
    pub fn new(height: usize, width: usize, entries: Vec<(JointId, Vec<f32>)>) -> Result<Self> {
        check_resolution(height, width)?;
        let mut joints = Vec::with_capacity(entries.len());
        let mut maps = Vec::with_capacity(entries.len());
        for (id, map) in entries {
            if map.len() != height * width {
                return Err(Error::shape(format!(
                    "heatmap for joint {id} has {} values, expected {height}x{width}",
                    map.len()
                )));
            }
            if joints.contains(&id) {
                return Err(Error::shape(format!("duplicate heatmap for joint {id}")));
            }
            if map.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Range(format!("heatmap for joint {id} leaves [0, 1]")));
            }
            joints.push(id);
            maps.push(map);
        }
        Ok(Self { height, width, joints, maps })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn joints(&self) -> &[JointId] {
        &self.joints
    }

    pub fn get(&self, id: JointId) -> Option<&[f32]> {
        self.joints.iter().position(|j| *j == id).map(|i| self.maps[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (JointId, &[f32])> {
        self.joints.iter().copied().zip(self.maps.iter().map(Vec::as_slice))
    }

    /// Returns a copy with one joint's raster replaced (or added).
    pub fn with_map(&self, id: JointId, map: Vec<f32>) -> Result<Self> {
        let mut entries: Vec<(JointId, Vec<f32>)> =
            self.iter().filter(|(j, _)| *j != id).map(|(j, m)| (j, m.to_vec())).collect();
        entries.push((id, map));
        Self::new(self.height, self.width, entries)
    }

    pub fn without(&self, id: JointId) -> Result<Self> {
        let entries = self.iter().filter(|(j, _)| *j != id).map(|(j, m)| (j, m.to_vec())).collect();
        Self::new(self.height, self.width, entries)
    }
}

/// Renders an isotropic Gaussian per keypoint, scaled by its confidence.
/// Pixel `(row, col)` samples the continuous plane at `(col + 0.5, row + 0.5)`,
/// so a joint sitting on a pixel center peaks at exactly its confidence there.
/// Joints off the image produce truncated Gaussians.
pub fn render_heatmaps(keypoints: &[Keypoint], sigma: f64, height: usize, width: usize) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::precondition(format!("heatmap sigma {sigma} must be positive")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let entries = keypoints
        .iter()
        .map(|k| {
            let conf = k.confidence.clamp(0.0, 1.0);
            let mut map = vec![0.0f32; height * width];
            for y in 0..height {
                let dy = y as f64 + 0.5 - k.y;
                for x in 0..width {
                    let dx = x as f64 + 0.5 - k.x;
                    map[y * width + x] = (conf * (-(dx * dx + dy * dy) * inv).exp()) as f32;
                }
            }
            (k.id, map)
        })
        .collect();
    HeatmapStack::new(height, width, entries)
}

//! Discrete body-part label maps.
//!
//! A [`SemanticMap`] is a quantized DensePose-style map: one part label per
//! pixel, no UV coordinates, and a single merged torso label.

use std::path::Path;
use std::sync::Arc;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_resolution, FrameImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRole {
    Background,
    Torso,
    Part,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub name: String,
    pub color: [u8; 3],
    pub role: LabelRole,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    labels: Vec<LabelInfo>,
}

/// Label indices of the synthetic-world palette.
pub mod synthetic_labels {
    pub const BACKGROUND: u8 = 0;
    pub const TORSO: u8 = 1;
    pub const HEAD: u8 = 2;
    pub const LEFT_UPPER_ARM: u8 = 3;
    pub const RIGHT_UPPER_ARM: u8 = 4;
    pub const LEFT_FOREARM: u8 = 5;
    pub const RIGHT_FOREARM: u8 = 6;
    pub const LEFT_THIGH: u8 = 7;
    pub const RIGHT_THIGH: u8 = 8;
    pub const LEFT_SHIN: u8 = 9;
    pub const RIGHT_SHIN: u8 = 10;
    pub const LEFT_HAND: u8 = 11;
    pub const RIGHT_HAND: u8 = 12;
    pub const COUNT: usize = 13;

    pub fn is_lower_body(label: u8) -> bool {
        (LEFT_THIGH..=RIGHT_SHIN).contains(&label)
    }

    pub fn is_arm(label: u8) -> bool {
        (LEFT_UPPER_ARM..=RIGHT_FOREARM).contains(&label)
    }
}

impl Palette {
    pub fn new(labels: Vec<LabelInfo>) -> Result<Self> {
        if labels.len() < 2 || labels.len() > 256 {
            return Err(Error::Config(format!(
                "palette needs 2..=256 labels, got {}",
                labels.len()
            )));
        }
        if labels[0].role != LabelRole::Background {
            return Err(Error::Config("label 0 must be the background".into()));
        }
        if labels[1..].iter().any(|l| l.role == LabelRole::Background) {
            return Err(Error::Config("only label 0 may be background".into()));
        }
        let torsos = labels.iter().filter(|l| l.role == LabelRole::Torso).count();
        if torsos != 1 {
            return Err(Error::Config(format!(
                "palette must hold exactly one merged torso label, found {torsos}"
            )));
        }
        if let Some(l) = labels.iter().find(|l| {
            let n = l.name.to_ascii_lowercase();
            n.contains("upper_torso") || n.contains("lower_torso")
        }) {
            return Err(Error::Config(format!(
                "separate torso halves are not allowed (`{}`)",
                l.name
            )));
        }
        Ok(Self { labels })
    }

    /// The 13-label palette of the synthetic avatar world.
    pub fn synthetic() -> Arc<Self> {
        use LabelRole::*;
        let spec: [(&str, [u8; 3], LabelRole); synthetic_labels::COUNT] = [
            ("background", [0, 0, 0], Background),
            ("torso", [200, 40, 40], Torso),
            ("head", [240, 200, 40], Part),
            ("left_upper_arm", [40, 80, 220], Part),
            ("right_upper_arm", [220, 120, 40], Part),
            ("left_forearm", [40, 200, 220], Part),
            ("right_forearm", [240, 160, 120], Part),
            ("left_thigh", [60, 160, 60], Part),
            ("right_thigh", [160, 60, 160], Part),
            ("left_shin", [120, 220, 80], Part),
            ("right_shin", [200, 100, 220], Part),
            ("left_hand", [20, 20, 140], Part),
            ("right_hand", [140, 20, 20], Part),
        ];
        let labels = spec
            .iter()
            .map(|(n, c, r)| LabelInfo { name: (*n).into(), color: *c, role: *r })
            .collect();
        Arc::new(Self::new(labels).expect("static palette is valid"))
    }

    /// DensePose's 24 parts with the two torso indices merged: background
    /// plus 23 foreground labels.
    pub fn densepose_merged() -> Arc<Self> {
        let names = [
            "torso",
            "right_hand",
            "left_hand",
            "left_foot",
            "right_foot",
            "right_upper_leg_back",
            "left_upper_leg_back",
            "right_upper_leg_front",
            "left_upper_leg_front",
            "right_lower_leg_back",
            "left_lower_leg_back",
            "right_lower_leg_front",
            "left_lower_leg_front",
            "left_upper_arm_inside",
            "right_upper_arm_inside",
            "left_upper_arm_outside",
            "right_upper_arm_outside",
            "left_lower_arm_inside",
            "right_lower_arm_inside",
            "left_lower_arm_outside",
            "right_lower_arm_outside",
            "head_right",
            "head_left",
        ];
        let mut labels = vec![LabelInfo {
            name: "background".into(),
            color: [0, 0, 0],
            role: LabelRole::Background,
        }];
        for (i, n) in names.iter().enumerate() {
            // Spread hues so colors stay distinguishable for decoding.
            let h = i as f32 / names.len() as f32;
            let c = hsv(h, 0.8, 0.5 + 0.5 * ((i % 2) as f32));
            labels.push(LabelInfo {
                name: (*n).into(),
                color: c,
                role: if i == 0 { LabelRole::Torso } else { LabelRole::Part },
            });
        }
        Arc::new(Self::new(labels).expect("static palette is valid"))
    }

    /// Maps a raw DensePose part index (0 = background, 1..=24 parts) into
    /// [`Palette::densepose_merged`] labels.
    pub fn densepose_label(part_index: u8) -> Result<u8> {
        match part_index {
            0 => Ok(0),
            1 | 2 => Ok(1),
            3..=24 => Ok(part_index - 1),
            i => Err(Error::Range(format!("DensePose part index {i} > 24"))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[LabelInfo] {
        &self.labels
    }

    pub fn color(&self, label: u8) -> [u8; 3] {
        self.labels[label as usize].color
    }

    pub fn torso(&self) -> u8 {
        self.labels.iter().position(|l| l.role == LabelRole::Torso).expect("validated") as u8
    }

    /// Nearest palette entry to an RGB triple in `[0, 1]`.
    pub fn nearest(&self, rgb: [f32; 3]) -> u8 {
        let mut best = (f32::INFINITY, 0u8);
        for (i, l) in self.labels.iter().enumerate() {
            let d: f32 = (0..3)
                .map(|c| (rgb[c] - l.color[c] as f32 / 255.0).powi(2))
                .sum();
            if d < best.0 {
                best = (d, i as u8);
            }
        }
        best.1
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    palette: Arc<Palette>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, palette: Arc<Palette>) -> Result<Self> {
        check_resolution(height, width)?;
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        let l = palette.len();
        if let Some((i, v)) = labels.iter().enumerate().find(|(_, v)| **v as usize >= l) {
            return Err(Error::Range(format!("label {v} at pixel {i} >= palette size {l}")));
        }
        Ok(Self { height, width, labels, palette })
    }

    pub fn background(height: usize, width: usize, palette: Arc<Palette>) -> Result<Self> {
        Self::new(height, width, vec![0; height * width], palette)
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

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn palette(&self) -> &Arc<Palette> {
        &self.palette
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// L-channel one-hot encoding; channel `l` is 1 exactly where the label
    /// equals `l`.
    pub fn to_onehot(&self) -> FrameImage {
        let n = self.labels.len();
        let mut data = vec![0.0f32; self.palette.len() * n];
        for (i, l) in self.labels.iter().enumerate() {
            data[*l as usize * n + i] = 1.0;
        }
        FrameImage::with_any_channels(self.palette.len(), self.height, self.width, data)
            .expect("one-hot values are 0 or 1")
    }

    /// Per-pixel argmax over an L-channel score raster; ties resolve to the
    /// lowest label.
    pub fn from_onehot(scores: &FrameImage, palette: Arc<Palette>) -> Result<Self> {
        if scores.channels() != palette.len() {
            return Err(Error::shape(format!(
                "{} score channels for a {}-label palette",
                scores.channels(),
                palette.len()
            )));
        }
        let (h, w) = scores.resolution();
        let n = h * w;
        let data = scores.data();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0usize;
                for c in 1..palette.len() {
                    if data[c * n + i] > data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, labels, palette)
    }

    /// 3-channel palette-color rendering, the form used inside the 6-channel
    /// hybrid encoding.
    pub fn render_colors(&self) -> FrameImage {
        let n = self.labels.len();
        let mut data = vec![0.0f32; 3 * n];
        for (i, l) in self.labels.iter().enumerate() {
            let c = self.palette.color(*l);
            for k in 0..3 {
                data[k * n + i] = c[k] as f32 / 255.0;
            }
        }
        FrameImage::new(3, self.height, self.width, data).expect("palette colors are in range")
    }

    /// Decodes a palette-color rendering by nearest color.
    pub fn from_colors(img: &FrameImage, palette: Arc<Palette>) -> Result<Self> {
        if img.channels() != 3 {
            return Err(Error::shape(format!("color decoding needs 3 channels, got {}", img.channels())));
        }
        let (h, w) = img.resolution();
        let n = h * w;
        let d = img.data();
        let labels = (0..n)
            .map(|i| palette.nearest([d[i], d[n + i], d[2 * n + i]]))
            .collect();
        Self::new(h, w, labels, palette)
    }

    /// Fraction of pixels whose labels agree.
    pub fn agreement(&self, other: &SemanticMap) -> Result<f64> {
        if self.resolution() != other.resolution() {
            return Err(Error::shape(format!(
                "comparing {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.labels.len() as f64)
    }

    /// Writes label indices as an 8-bit single-channel PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer sized from map");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8], palette: Arc<Palette>) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(h, w, img.into_raw(), palette)
    }

    pub fn load_png(path: impl AsRef<Path>, palette: Arc<Palette>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(h, w, img.into_raw(), palette)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_background_encodes_to_channel_zero() {
        let m = SemanticMap::background(16, 8, Palette::synthetic()).unwrap();
        let oh = m.to_onehot();
        assert_eq!(oh.channels(), synthetic_labels::COUNT);
        assert!(oh.plane(0).iter().all(|v| *v == 1.0));
        for c in 1..oh.channels() {
            assert!(oh.plane(c).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_pixel_label_sets_one_entry() {
        let mut labels = vec![0u8; 16 * 8];
        labels[0] = 3;
        let oh = SemanticMap::new(16, 8, labels, Palette::synthetic()).unwrap().to_onehot();
        assert_eq!(oh.plane(3).iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(oh.get(3, 0, 0), 1.0);
    }

    #[test]
    fn out_of_palette_label_is_rejected() {
        let labels = vec![synthetic_labels::COUNT as u8; 64];
        assert!(matches!(
            SemanticMap::new(8, 8, labels, Palette::synthetic()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn palettes_hold_one_merged_torso() {
        for p in [Palette::synthetic(), Palette::densepose_merged()] {
            assert_eq!(p.labels().iter().filter(|l| l.role == LabelRole::Torso).count(), 1);
            assert_eq!(p.labels()[0].role, LabelRole::Background);
        }
        assert_eq!(Palette::densepose_merged().len(), 24);
        assert_eq!(Palette::densepose_label(1).unwrap(), Palette::densepose_label(2).unwrap());
        assert_eq!(Palette::densepose_label(24).unwrap(), 23);
    }

    #[test]
    fn palette_rejects_split_torso() {
        let mut labels = Palette::synthetic().labels().to_vec();
        labels.push(LabelInfo { name: "lower_torso".into(), color: [1, 2, 3], role: LabelRole::Part });
        assert!(Palette::new(labels).is_err());
    }

    #[test]
    fn palette_colors_decode_to_their_labels() {
        for p in [Palette::synthetic(), Palette::densepose_merged()] {
            for (i, l) in p.labels().iter().enumerate() {
                let rgb = l.color.map(|c| c as f32 / 255.0);
                assert_eq!(p.nearest(rgb) as usize, i, "{}", l.name);
            }
        }
    }

    proptest! {
        #[test]
        fn onehot_argmax_round_trip(labels in proptest::collection::vec(0u8..13, 8 * 16)) {
            let m = SemanticMap::new(8, 16, labels, Palette::synthetic()).unwrap();
            let back = SemanticMap::from_onehot(&m.to_onehot(), Palette::synthetic()).unwrap();
            prop_assert_eq!(&back, &m);
            let oh = m.to_onehot();
            for i in 0..m.labels().len() {
                let s: f32 = (0..oh.channels()).map(|c| oh.data()[c * 128 + i]).sum();
                prop_assert_eq!(s, 1.0);
            }
            let decoded = SemanticMap::from_colors(&m.render_colors(), Palette::synthetic()).unwrap();
            prop_assert_eq!(decoded, m);
        }
    }
}

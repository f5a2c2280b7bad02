//! Image-sequence directories: `%06d.png` frames, optionally accompanied by
//! precomputed perception outputs in the layout
//! [`DirectoryProvider`](crate::perception::DirectoryProvider) reads, plus a
//! `sequence.json` describing how the sequence was made.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{Capabilities, KeypointFile, PerceptionProvider, SyntheticProvider};
use crate::raster::{FrameImage, MaskImage};
use crate::synth::{SequenceOptions, SyntheticGarmentSpec};

pub const SEQUENCE_FILE: &str = "sequence.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub person_id: String,
    pub frame_count: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub fps: f64,
    pub seed: u64,
    pub garment: Option<SyntheticGarmentSpec>,
    /// Free-form description of the avatar motion.
    pub motion: String,
}

impl SequenceInfo {
    pub fn resolution(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

/// Indices of `%06d.png` files in `dir`, which must run 0, 1, 2, ...
fn frame_indices(dir: &Path) -> Result<usize> {
    let mut indices: Vec<usize> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".png")?;
            (stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit())).then(|| stem.parse().ok())?
        })
        .collect();
    indices.sort_unstable();
    if let Some(pos) = indices.iter().enumerate().position(|(i, &v)| i != v) {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: format!("frame {pos:06}.png is missing") });
    }
    Ok(indices.len())
}

pub fn frame_count(dir: impl AsRef<Path>) -> Result<usize> {
    frame_indices(dir.as_ref())
}

pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<FrameImage>> {
    let dir = dir.as_ref();
    let n = frame_indices(dir)?;
    if n == 0 {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: "no %06d.png frames".into() });
    }
    (0..n).map(|i| FrameImage::load_image(frame_path(dir, i), 3)).collect()
}

/// Masks saved next to frames as `%06d.mask.png`, if every frame has one.
pub fn read_masks(dir: impl AsRef<Path>, count: usize) -> Result<Option<Vec<MaskImage>>> {
    let dir = dir.as_ref();
    let path = |i: usize| dir.join(format!("{i:06}.mask.png"));
    if count == 0 || !(0..count).all(|i| path(i).exists()) {
        return Ok(None);
    }
    (0..count).map(|i| MaskImage::from_frame(FrameImage::load_image(path(i), 1)?)).collect::<Result<_>>().map(Some)
}

pub fn write_frames(dir: impl AsRef<Path>, frames: &[FrameImage]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(frame_path(dir, i))?;
    }
    Ok(())
}

pub fn read_info(dir: impl AsRef<Path>) -> Result<SequenceInfo> {
    let path = dir.as_ref().join(SEQUENCE_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset { path: path.clone(), reason: e.to_string() })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_info(dir: impl AsRef<Path>, info: &SequenceInfo) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    std::fs::write(dir.as_ref().join(SEQUENCE_FILE), serde_json::to_string_pretty(info)? + "\n")?;
    Ok(())
}

/// Writes frames, what the provider perceives on each of them, and the
/// ground-truth semantic maps as `%06d.gt.png`.
pub fn write_synthetic(dir: impl AsRef<Path>, provider: &SyntheticProvider, info: &SequenceInfo) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let sigma = SequenceOptions::default().sigma_for(info.resolution[0]);
    for (i, rec) in provider.records().iter().enumerate() {
        let index = i as u64;
        let p = provider.perceive(index, &rec.raw, Capabilities::ALL)?;
        let file = |kind: &str| dir.join(format!("{i:06}.{kind}.png"));
        rec.raw.save_png(frame_path(dir, i))?;
        p.require_vm(index)?.save_png(file("vm"))?;
        p.require_semantic(index)?.save_png(file("sdp"))?;
        let (garment, mask) = p.require_garment(index)?;
        garment.save_png(file("garment"))?;
        mask.as_frame().save_png(file("mask"))?;
        rec.gt_semantic.save_png(file("gt"))?;
        let keypoints = provider
            .perceived_keypoints(index)?
            .iter()
            .map(|k| [k.id as f64, k.x, k.y, k.confidence])
            .collect();
        let kp = KeypointFile { sigma, keypoints };
        std::fs::write(dir.join(format!("{i:06}.keypoints.json")), serde_json::to_string(&kp)?)?;
    }
    write_info(dir, info)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::perception::DirectoryProvider;
    use crate::semantic::Palette;
    use crate::synth::{generate_sequence, GarmentStyle};

    #[test]
    fn synthetic_directory_reads_back_through_the_directory_provider() {
        let spec = SyntheticGarmentSpec::preset(GarmentStyle::LooseSkirt);
        let recs = Arc::new(generate_sequence(&spec, 3, (32, 24), 2).unwrap());
        let synth = SyntheticProvider::new(recs.clone(), spec.clone(), 2).unwrap();
        let info = SequenceInfo {
            person_id: "p".into(),
            frame_count: 3,
            resolution: [32, 24],
            fps: 30.0,
            seed: 2,
            garment: Some(spec),
            motion: "default".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &synth, &info).unwrap();
        assert_eq!(read_info(dir.path()).unwrap(), info);
        let frames = read_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(read_masks(dir.path(), 3).unwrap().unwrap()[1], recs[1].garment_mask);
        let disk = DirectoryProvider::open(dir.path(), (32, 24), Palette::synthetic()).unwrap();
        assert_eq!(disk.capabilities(), Capabilities::ALL);
        let a = synth.perceive(1, &recs[1].raw, Capabilities::ALL).unwrap();
        let b = disk.perceive(1, &frames[1], Capabilities::ALL).unwrap();
        assert_eq!(a.vm, b.vm);
        assert_eq!(a.semantic, b.semantic);
        let (ha, hb) = (a.heatmaps.unwrap(), b.heatmaps.unwrap());
        assert_eq!(ha, hb);
        std::fs::remove_file(frame_path(dir.path(), 1)).unwrap();
        assert!(read_frames(dir.path()).is_err());
    }
}

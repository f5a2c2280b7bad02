//! Per-garment datasets: generation from a recorded sequence through the
//! perception providers and a trained BodyMap network, the on-disk format,
//! and clip sampling for sequence training.
//!
//! Directory layout: `manifest.json` plus, per frame, `%06d.raw.png`,
//! `%06d.garment.png`, `%06d.mask.png`, `%06d.vm.png` and `%06d.sdp.png`
//! (label indices as 8-bit grayscale). `data/manifest.schema.json` describes
//! the manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bodymap::BodyMapNetwork;
use crate::error::{Error, Result};
use crate::girep::{build_variant, JointGroupTable, RepresentationKind, VariantInputs};
use crate::perception::{Capabilities, PerceptionProvider};
use crate::raster::{FrameImage, MaskImage};
use crate::semantic::{Palette, SemanticMap};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = include_str!("../data/manifest.schema.json");
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: u64,
    pub raw: FrameImage,
    pub garment_image: FrameImage,
    pub garment_mask: MaskImage,
    pub vm: FrameImage,
    pub semantic: SemanticMap,
}

impl FrameRecord {
    fn check(&self) -> Result<()> {
        let res = self.raw.resolution();
        let all = [
            self.garment_image.resolution(),
            self.garment_mask.resolution(),
            self.vm.resolution(),
            self.semantic.resolution(),
        ];
        if all.iter().any(|r| *r != res) {
            return Err(Error::shape(format!("frame {} mixes resolutions {res:?} and {all:?}", self.index)));
        }
        Ok(())
    }
}

/// A frame that could not be produced, kept so indices never shift.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRecord {
    pub index: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub index: u64,
    pub raw: String,
    pub garment: String,
    pub mask: String,
    pub vm: String,
    pub sdp: String,
    /// SHA-256 over the five files in the order above.
    pub sha256: String,
}

impl FrameFiles {
    fn for_index(index: u64) -> Self {
        let f = |kind: &str| format!("{index:06}.{kind}.png");
        Self { index, raw: f("raw"), garment: f("garment"), mask: f("mask"), vm: f("vm"), sdp: f("sdp"), sha256: String::new() }
    }

    fn names(&self) -> [&str; 5] {
        [&self.raw, &self.garment, &self.mask, &self.vm, &self.sdp]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub garment_id: String,
    pub person_id: String,
    pub frame_count: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub fps: f64,
    pub config_hash: String,
    pub palette: Palette,
    pub files: Vec<FrameFiles>,
    #[serde(default)]
    pub gaps: Vec<GapRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerGarmentDataset {
    pub garment_id: String,
    pub person_id: String,
    pub fps: f64,
    pub config_hash: String,
    pub palette: Arc<Palette>,
    pub records: Vec<FrameRecord>,
    pub gaps: Vec<GapRecord>,
}

impl PerGarmentDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| r.raw.resolution())
    }

    pub fn clip(&self, clip: &Clip) -> &[FrameRecord] {
        &self.records[clip.start..clip.start + clip.len]
    }

    /// Maximal runs of records with consecutive frame indices, as
    /// `(start position, length)`.
    pub fn contiguous_runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].index != self.records[i - 1].index + 1 {
                runs.push((start, i - start));
                start = i;
            }
        }
        runs.retain(|r| r.1 > 0);
        runs
    }
}

/// Which provider answers which request. Real deployments typically use
/// different models for segmentation, body rendering and keypoints.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub segmentation: &'a dyn PerceptionProvider,
    /// Also asked for the direct semantic estimate when the BodyMap network
    /// was trained on the DP representation.
    pub vm: &'a dyn PerceptionProvider,
    pub heatmaps: &'a dyn PerceptionProvider,
}

impl<'a> Providers<'a> {
    pub fn single(p: &'a dyn PerceptionProvider) -> Self {
        Self { segmentation: p, vm: p, heatmaps: p }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationOptions {
    pub garment_id: String,
    pub person_id: String,
    pub fps: f64,
    pub config_hash: String,
    pub table: JointGroupTable,
    pub all_joints_table: JointGroupTable,
}

impl GenerationOptions {
    pub fn synthetic(garment_id: &str, person_id: &str) -> Self {
        Self {
            garment_id: garment_id.into(),
            person_id: person_id.into(),
            fps: 30.0,
            config_hash: String::new(),
            table: JointGroupTable::synthetic17(),
            all_joints_table: JointGroupTable::synthetic17_all_joints(),
        }
    }
}

fn one_frame(
    index: u64,
    frame: &FrameImage,
    providers: &Providers,
    bodymap: &BodyMapNetwork,
    options: &GenerationOptions,
) -> Result<FrameRecord> {
    let kind = bodymap.representation();
    let seg = providers.segmentation.perceive(index, frame, Capabilities { segmentation: true, ..Capabilities::NONE })?;
    let body = providers.vm.perceive(
        index,
        frame,
        Capabilities { vm: true, semantic_direct: kind == RepresentationKind::Dp, ..Capabilities::NONE },
    )?;
    let needs_heatmaps = matches!(kind, RepresentationKind::Hm | RepresentationKind::Shm | RepresentationKind::Full);
    let hm = if needs_heatmaps {
        providers.heatmaps.perceive(index, frame, Capabilities { heatmaps: true, ..Capabilities::NONE })?
    } else {
        Default::default()
    };
    let vm = body.require_vm(index)?.clone();
    let input = build_variant(
        kind,
        &VariantInputs {
            direct_semantic: body.semantic.as_ref(),
            heatmaps: hm.heatmaps.as_ref(),
            vm: Some(&vm),
            table: Some(&options.table),
            all_joints_table: Some(&options.all_joints_table),
        },
    )?;
    let semantic = bodymap.estimate_for(&options.person_id, &input, false)?;
    let (garment_image, garment_mask) = seg.require_garment(index)?.clone();
    let rec = FrameRecord { index, raw: frame.clone(), garment_image, garment_mask, vm, semantic };
    rec.check()?;
    Ok(rec)
}

/// Runs every frame through perception and the BodyMap network. The body
/// semantic map always comes from BodyMap, never from direct estimation,
/// since direct estimates fail under the loose garment being captured.
/// Provider failures become gap records; other errors abort.
pub fn generate_dataset(
    frames: &[FrameImage],
    providers: Providers,
    bodymap: &BodyMapNetwork,
    options: &GenerationOptions,
) -> Result<PerGarmentDataset> {
    let res = bodymap.resolution();
    for (name, p) in [("segmentation", providers.segmentation), ("vm", providers.vm), ("heatmap", providers.heatmaps)] {
        if p.resolution() != res {
            return Err(Error::shape(format!("{name} provider works at {:?}, BodyMap at {res:?}", p.resolution())));
        }
    }
    if bodymap.person_id() != options.person_id {
        return Err(Error::PersonMismatch { expected: bodymap.person_id().into(), actual: options.person_id.clone() });
    }
    let mut records = Vec::with_capacity(frames.len());
    let mut gaps = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let index = i as u64;
        match one_frame(index, frame, &providers, bodymap, options) {
            Ok(r) => records.push(r),
            Err(Error::Provider { reason, .. }) => {
                log::warn!("frame {index} skipped: {reason}");
                gaps.push(GapRecord { index, reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PerGarmentDataset {
        garment_id: options.garment_id.clone(),
        person_id: options.person_id.clone(),
        fps: options.fps,
        config_hash: options.config_hash.clone(),
        palette: bodymap.palette().clone(),
        records,
        gaps,
    })
}

fn encode_record(r: &FrameRecord) -> Result<[Vec<u8>; 5]> {
    Ok([
        r.raw.encode_png()?,
        r.garment_image.encode_png()?,
        r.garment_mask.as_frame().encode_png()?,
        r.vm.encode_png()?,
        r.semantic.encode_png()?,
    ])
}

fn digest(parts: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn dataset_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes the dataset and returns the SHA-256 of the manifest bytes, which
/// identifies the dataset content.
pub fn write_dataset(ds: &PerGarmentDataset, dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let res = ds.resolution().ok_or_else(|| dataset_error(dir, "dataset has no frames"))?;
    let mut files = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        r.check()?;
        if r.raw.resolution() != res {
            return Err(dataset_error(dir, format!("frame {} is not {res:?}", r.index)));
        }
        let bytes = encode_record(r)?;
        let mut entry = FrameFiles::for_index(r.index);
        for (name, b) in entry.names().iter().zip(&bytes) {
            std::fs::write(dir.join(name), b)?;
        }
        entry.sha256 = digest(&bytes);
        files.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        garment_id: ds.garment_id.clone(),
        person_id: ds.person_id.clone(),
        frame_count: files.len(),
        resolution: [res.0, res.1],
        fps: ds.fps,
        config_hash: ds.config_hash.clone(),
        palette: (*ds.palette).clone(),
        files,
        gaps: ds.gaps.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), &json)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| dataset_error(&path, e.to_string()))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| dataset_error(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(dataset_error(&path, format!("unsupported format version {}", m.format_version)));
    }
    if m.files.len() != m.frame_count {
        return Err(dataset_error(&path, format!("{} files listed for {} frames", m.files.len(), m.frame_count)));
    }
    if m.files.windows(2).any(|w| w[1].index <= w[0].index) {
        return Err(dataset_error(&path, "frame indices are not strictly increasing"));
    }
    Ok(m)
}

/// Reads a dataset back, checking every file against its recorded hash.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<PerGarmentDataset> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let palette = Arc::new(Palette::new(m.palette.labels().to_vec())?);
    let res = (m.resolution[0], m.resolution[1]);
    let mut records = Vec::with_capacity(m.frame_count);
    for f in &m.files {
        let mut bytes = Vec::with_capacity(5);
        for name in f.names() {
            let p: PathBuf = dir.join(name);
            bytes.push(std::fs::read(&p).map_err(|e| dataset_error(&p, e.to_string()))?);
        }
        if digest(&bytes) != f.sha256 {
            return Err(dataset_error(dir, format!("frame {} does not match its recorded hash", f.index)));
        }
        let rec = FrameRecord {
            index: f.index,
            raw: FrameImage::decode(&bytes[0], 3)?,
            garment_image: FrameImage::decode(&bytes[1], 3)?,
            garment_mask: MaskImage::from_frame(FrameImage::decode(&bytes[2], 1)?)?,
            vm: FrameImage::decode(&bytes[3], 3)?,
            semantic: SemanticMap::decode_png(&bytes[4], palette.clone())?,
        };
        rec.check()?;
        if rec.raw.resolution() != res {
            return Err(dataset_error(dir, format!("frame {} is not {res:?}", f.index)));
        }
        records.push(rec);
    }
    Ok(PerGarmentDataset {
        garment_id: m.garment_id,
        person_id: m.person_id,
        fps: m.fps,
        config_hash: m.config_hash,
        palette,
        records,
        gaps: m.gaps,
    })
}

/// A contiguous run of dataset records: positions `start..start + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    pub start: usize,
    pub len: usize,
}

/// Draws training clips with replacement. Lengths are uniform in
/// `[min_len, max_len]`, clamped to the run they fall in; clips never span
/// a gap.
#[derive(Clone, Debug)]
pub struct ClipSampler {
    min_len: usize,
    max_len: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ClipSampler {
    pub fn new(min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("clip lengths [{min_len}, {max_len}] are not a valid range")));
        }
        Ok(Self { min_len, max_len, seed, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&mut self, ds: &PerGarmentDataset, count: usize) -> Result<Vec<Clip>> {
        let runs: Vec<(usize, usize)> = ds.contiguous_runs().into_iter().filter(|r| r.1 >= self.min_len).collect();
        if runs.is_empty() {
            return Err(Error::precondition(format!(
                "no gap-free run of at least {} frames in a {}-frame dataset",
                self.min_len,
                ds.len()
            )));
        }
        let total: usize = runs.iter().map(|r| r.1).sum();
        let mut clips = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.rng.gen_range(self.min_len..=self.max_len);
            // Runs are chosen in proportion to their length.
            let mut pick = self.rng.gen_range(0..total);
            let &(run_start, run_len) = runs
                .iter()
                .find(|r| {
                    let hit = pick < r.1;
                    if !hit {
                        pick -= r.1;
                    }
                    hit
                })
                .expect("pick is below the total length");
            let len = len.min(run_len);
            let offset = self.rng.gen_range(0..=run_len - len);
            clips.push(Clip { start: run_start + offset, len });
        }
        Ok(clips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(indices: &[u64]) -> PerGarmentDataset {
        let palette = Palette::synthetic();
        let records = indices
            .iter()
            .map(|&index| {
                let v = (index % 7) as f32 / 7.0;
                FrameRecord {
                    index,
                    raw: FrameImage::filled(3, 8, 8, v).unwrap().quantized(),
                    garment_image: FrameImage::filled(3, 8, 8, 1.0 - v).unwrap().quantized(),
                    garment_mask: MaskImage::filled(8, 8, if index % 2 == 0 { 1.0 } else { 0.0 }).unwrap(),
                    vm: FrameImage::filled(3, 8, 8, 0.5).unwrap().quantized(),
                    semantic: SemanticMap::new(8, 8, vec![(index % 13) as u8; 64], palette.clone()).unwrap(),
                }
            })
            .collect();
        PerGarmentDataset {
            garment_id: "g".into(),
            person_id: "p".into(),
            fps: 30.0,
            config_hash: "abc".into(),
            palette,
            records,
            gaps: vec![],
        }
    }

    #[test]
    fn round_trip_is_exact_and_hash_is_stable() {
        let ds = tiny_dataset(&[0, 1, 2, 4]);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ha = write_dataset(&ds, a.path()).unwrap();
        let hb = write_dataset(&ds, b.path()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(read_dataset(a.path()).unwrap(), ds);
    }

    #[test]
    fn tampered_frames_are_detected() {
        let ds = tiny_dataset(&[0, 1]);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        FrameImage::filled(3, 8, 8, 0.9).unwrap().save_png(dir.path().join("000001.vm.png")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset { .. })));
    }

    #[test]
    fn sampled_clips_stay_in_range() {
        let ds = tiny_dataset(&(0..100).collect::<Vec<_>>());
        let mut s = ClipSampler::new(8, 60, 3).unwrap();
        let clips = s.sample(&ds, 1000).unwrap();
        for c in &clips {
            assert!((8..=60).contains(&c.len) && c.start + c.len <= 100, "{c:?}");
        }
        assert_eq!(clips, ClipSampler::new(8, 60, 3).unwrap().sample(&ds, 1000).unwrap());
    }

    #[test]
    fn short_datasets_clamp_or_reject() {
        let ds = tiny_dataset(&(0..8).collect::<Vec<_>>());
        for c in ClipSampler::new(8, 60, 0).unwrap().sample(&ds, 20).unwrap() {
            assert_eq!(c, Clip { start: 0, len: 8 });
        }
        let short = tiny_dataset(&(0..7).collect::<Vec<_>>());
        assert!(matches!(ClipSampler::new(8, 60, 0).unwrap().sample(&short, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn clips_never_span_gaps() {
        let idx: Vec<u64> = (0..30).chain(31..50).collect();
        let ds = tiny_dataset(&idx);
        assert_eq!(ds.contiguous_runs(), vec![(0, 30), (30, 19)]);
        for c in ClipSampler::new(8, 60, 1).unwrap().sample(&ds, 500).unwrap() {
            let recs = ds.clip(&c);
            assert!(recs.windows(2).all(|w| w[1].index == w[0].index + 1));
        }
    }

    #[test]
    fn manifest_carries_every_schema_required_key() {
        let ds = tiny_dataset(&[0]);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let schema: serde_json::Value = serde_json::from_str(MANIFEST_SCHEMA).unwrap();
        for key in schema["required"].as_array().unwrap() {
            assert!(manifest.get(key.as_str().unwrap()).is_some(), "missing {key}");
        }
        for key in schema["properties"]["files"]["items"]["required"].as_array().unwrap() {
            assert!(manifest["files"][0].get(key.as_str().unwrap()).is_some(), "missing {key}");
        }
    }
}

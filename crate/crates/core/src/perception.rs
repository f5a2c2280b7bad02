//! Per-frame perception: keypoint heatmaps, measurement-garment render,
//! direct semantic estimate and garment segmentation, behind one interface.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{render_heatmaps, HeatmapStack, Keypoint};
use crate::raster::{FrameImage, MaskImage};
use crate::semantic::{Palette, SemanticMap};
use crate::synth::{degrade_semantic_estimate, perceive_keypoints, SyntheticFrameRecord, SyntheticGarmentSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub heatmaps: bool,
    pub vm: bool,
    pub semantic_direct: bool,
    pub segmentation: bool,
}

impl Capabilities {
    pub const ALL: Capabilities = Capabilities { heatmaps: true, vm: true, semantic_direct: true, segmentation: true };
    pub const NONE: Capabilities = Capabilities { heatmaps: false, vm: false, semantic_direct: false, segmentation: false };

    pub fn covers(&self, other: &Capabilities) -> bool {
        (self.heatmaps || !other.heatmaps)
            && (self.vm || !other.vm)
            && (self.semantic_direct || !other.semantic_direct)
            && (self.segmentation || !other.segmentation)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Perception {
    pub heatmaps: Option<HeatmapStack>,
    pub vm: Option<FrameImage>,
    pub semantic: Option<SemanticMap>,
    pub garment: Option<(FrameImage, MaskImage)>,
}

impl Perception {
    fn take<T>(v: Option<T>, what: &str, index: u64) -> Result<T> {
        v.ok_or_else(|| Error::Provider { index, reason: format!("no {what} produced") })
    }

    pub fn require_vm(&self, index: u64) -> Result<&FrameImage> {
        Self::take(self.vm.as_ref(), "vm render", index)
    }

    pub fn require_semantic(&self, index: u64) -> Result<&SemanticMap> {
        Self::take(self.semantic.as_ref(), "semantic map", index)
    }

    pub fn require_heatmaps(&self, index: u64) -> Result<&HeatmapStack> {
        Self::take(self.heatmaps.as_ref(), "heatmaps", index)
    }

    pub fn require_garment(&self, index: u64) -> Result<&(FrameImage, MaskImage)> {
        Self::take(self.garment.as_ref(), "garment segmentation", index)
    }
}

/// Source of per-frame perception outputs. Implementations report failures
/// as [`Error::Provider`].
pub trait PerceptionProvider: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn resolution(&self) -> (usize, usize);

    /// Produces the requested outputs for frame `index`.
    fn perceive(&self, index: u64, frame: &FrameImage, request: Capabilities) -> Result<Perception>;
}

fn check_frame(provider: &dyn PerceptionProvider, index: u64, frame: &FrameImage) -> Result<()> {
    if frame.resolution() != provider.resolution() {
        return Err(Error::shape(format!(
            "frame {index} is {:?}, provider works at {:?}",
            frame.resolution(),
            provider.resolution()
        )));
    }
    Ok(())
}

/// Perception backed by synthetic-world ground truth, with detector-like
/// imperfections: keypoints drift under loose garments and the direct
/// semantic estimate degrades the way an off-the-shelf estimator would.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    records: Arc<Vec<SyntheticFrameRecord>>,
    spec: SyntheticGarmentSpec,
    seed: u64,
    sigma: f64,
    /// Frames past the end of the recording reuse it cyclically.
    cyclic: bool,
}

impl SyntheticProvider {
    pub fn new(records: Arc<Vec<SyntheticFrameRecord>>, spec: SyntheticGarmentSpec, seed: u64) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::precondition("provider needs at least one frame"))?;
        let sigma = crate::synth::SequenceOptions::default().sigma_for(first.raw.height());
        Ok(Self { records, spec, seed, sigma, cyclic: false })
    }

    pub fn cyclic(mut self) -> Self {
        self.cyclic = true;
        self
    }

    pub fn records(&self) -> &[SyntheticFrameRecord] {
        &self.records
    }

    fn record(&self, index: u64) -> Result<&SyntheticFrameRecord> {
        let n = self.records.len() as u64;
        let i = if self.cyclic { index % n } else { index };
        self.records
            .get(i as usize)
            .ok_or_else(|| Error::Provider { index, reason: format!("no synthetic frame {index}") })
    }

    pub fn perceived_keypoints(&self, index: u64) -> Result<Vec<Keypoint>> {
        Ok(perceive_keypoints(&self.record(index)?.pose, &self.spec, self.seed))
    }
}

impl PerceptionProvider for SyntheticProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn resolution(&self) -> (usize, usize) {
        self.records[0].raw.resolution()
    }

    fn perceive(&self, index: u64, frame: &FrameImage, request: Capabilities) -> Result<Perception> {
        check_frame(self, index, frame)?;
        let rec = self.record(index)?;
        let (h, w) = rec.raw.resolution();
        let mut out = Perception::default();
        if request.heatmaps {
            out.heatmaps = Some(render_heatmaps(&perceive_keypoints(&rec.pose, &self.spec, self.seed), self.sigma, h, w)?);
        }
        if request.vm {
            out.vm = Some(rec.vm_render.clone());
        }
        if request.semantic_direct {
            let seed = self.seed ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d);
            out.semantic = Some(degrade_semantic_estimate(&rec.gt_semantic, &rec.garment_mask, &self.spec, seed)?);
        }
        if request.segmentation {
            out.garment = Some((rec.garment_image.clone(), rec.garment_mask.clone()));
        }
        Ok(out)
    }
}

/// Wraps a provider and fails on chosen frame indices.
pub struct FaultInjector<P> {
    inner: P,
    failing: BTreeSet<u64>,
}

impl<P: PerceptionProvider> FaultInjector<P> {
    pub fn new(inner: P, failing: impl IntoIterator<Item = u64>) -> Self {
        Self { inner, failing: failing.into_iter().collect() }
    }
}

impl<P: PerceptionProvider> PerceptionProvider for FaultInjector<P> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn resolution(&self) -> (usize, usize) {
        self.inner.resolution()
    }

    fn perceive(&self, index: u64, frame: &FrameImage, request: Capabilities) -> Result<Perception> {
        if self.failing.contains(&index) {
            return Err(Error::Provider { index, reason: "injected failure".into() });
        }
        self.inner.perceive(index, frame, request)
    }
}

/// Keypoints of one frame as stored by [`DirectoryProvider`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointFile {
    pub sigma: f64,
    pub keypoints: Vec<[f64; 4]>,
}

/// Reads outputs of external perception models precomputed per frame:
/// `%06d.vm.png`, `%06d.sdp.png` (label indices), `%06d.garment.png`,
/// `%06d.mask.png` and `%06d.keypoints.json` (`[id, x, y, confidence]`
/// rows). Capabilities reflect which kinds are present for frame 0.
pub struct DirectoryProvider {
    dir: PathBuf,
    resolution: (usize, usize),
    palette: Arc<Palette>,
    caps: Capabilities,
}

impl DirectoryProvider {
    pub fn open(dir: impl AsRef<Path>, resolution: (usize, usize), palette: Arc<Palette>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let has = |suffix: &str| dir.join(format!("{:06}.{suffix}", 0)).exists();
        let caps = Capabilities {
            heatmaps: has("keypoints.json"),
            vm: has("vm.png"),
            semantic_direct: has("sdp.png"),
            segmentation: has("garment.png") && has("mask.png"),
        };
        Ok(Self { dir, resolution, palette, caps })
    }

    fn path(&self, index: u64, suffix: &str) -> PathBuf {
        self.dir.join(format!("{index:06}.{suffix}"))
    }

    fn read<T>(&self, index: u64, suffix: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let p = self.path(index, suffix);
        if !p.exists() {
            return Err(Error::Provider { index, reason: format!("{} is missing", p.display()) });
        }
        f(&p).map_err(|e| Error::Provider { index, reason: e.to_string() })
    }
}

impl PerceptionProvider for DirectoryProvider {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn perceive(&self, index: u64, frame: &FrameImage, request: Capabilities) -> Result<Perception> {
        check_frame(self, index, frame)?;
        let (h, w) = self.resolution;
        let mut out = Perception::default();
        if request.heatmaps {
            out.heatmaps = Some(self.read(index, "keypoints.json", |p| {
                let file: KeypointFile = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                let ks: Vec<Keypoint> = file
                    .keypoints
                    .iter()
                    .map(|k| Keypoint { id: k[0] as u16, x: k[1], y: k[2], confidence: k[3] })
                    .collect();
                render_heatmaps(&ks, file.sigma, h, w)
            })?);
        }
        if request.vm {
            out.vm = Some(self.read(index, "vm.png", |p| FrameImage::load_image(p, 3))?);
        }
        if request.semantic_direct {
            out.semantic = Some(self.read(index, "sdp.png", |p| SemanticMap::load_png(p, self.palette.clone()))?);
        }
        if request.segmentation {
            let g = self.read(index, "garment.png", |p| FrameImage::load_image(p, 3))?;
            let m = self.read(index, "mask.png", |p| MaskImage::from_frame(FrameImage::load_image(p, 1)?))?;
            out.garment = Some((g, m));
        }
        for img in [out.vm.as_ref(), out.garment.as_ref().map(|g| &g.0)].into_iter().flatten() {
            if img.resolution() != self.resolution {
                return Err(Error::Provider { index, reason: format!("output is {:?}", img.resolution()) });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, GarmentStyle};

    #[test]
    fn synthetic_provider_serves_truth_and_injected_failures() {
        let spec = SyntheticGarmentSpec::preset(GarmentStyle::Tight);
        let recs = Arc::new(generate_sequence(&spec, 3, (32, 24), 0).unwrap());
        let p = SyntheticProvider::new(recs.clone(), spec, 0).unwrap();
        let out = p.perceive(1, &recs[1].raw, Capabilities::ALL).unwrap();
        assert_eq!(out.vm.as_ref().unwrap(), &recs[1].vm_render);
        assert!(out.heatmaps.is_some() && out.semantic.is_some() && out.garment.is_some());
        let none = p.perceive(1, &recs[1].raw, Capabilities::NONE).unwrap();
        assert!(none.vm.is_none());
        assert!(matches!(p.perceive(7, &recs[0].raw, Capabilities::ALL), Err(Error::Provider { index: 7, .. })));
        let faulty = FaultInjector::new(p, [2]);
        assert!(matches!(faulty.perceive(2, &recs[2].raw, Capabilities::ALL), Err(Error::Provider { .. })));
        assert!(faulty.perceive(0, &recs[0].raw, Capabilities::ALL).is_ok());
    }

    #[test]
    fn directory_provider_reads_precomputed_outputs() {
        let spec = SyntheticGarmentSpec::preset(GarmentStyle::Tight);
        let recs = generate_sequence(&spec, 1, (32, 24), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        recs[0].vm_render.save_png(dir.path().join("000000.vm.png")).unwrap();
        recs[0].gt_semantic.save_png(dir.path().join("000000.sdp.png")).unwrap();
        let p = DirectoryProvider::open(dir.path(), (32, 24), Palette::synthetic()).unwrap();
        assert!(p.capabilities().vm && p.capabilities().semantic_direct && !p.capabilities().heatmaps);
        let out = p.perceive(0, &recs[0].raw, Capabilities { vm: true, semantic_direct: true, ..Capabilities::NONE }).unwrap();
        assert_eq!(out.vm.unwrap(), recs[0].vm_render);
        assert_eq!(out.semantic.unwrap(), recs[0].gt_semantic);
        assert!(matches!(p.perceive(1, &recs[0].raw, Capabilities { vm: true, ..Capabilities::NONE }), Err(Error::Provider { .. })));
    }
}

//! Distribution and temporal-consistency metrics over image and clip
//! embeddings. The default embedders are fixed-seed random convolutional
//! networks, so values are reproducible but only comparable to other values
//! computed with the same fingerprint.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{FrameImage, MaskImage};

/// One embedding per row.
pub type Features = DMatrix<f64>;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_CLIP_LEN: usize = 16;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;
pub const KID_BLOCK: usize = 100;
/// Lowest KID a report accepts. The unbiased estimator dips below zero
/// when the two sets match.
pub const KID_EPSILON: f64 = 1e-2;
/// Heatmap PNG intensity is `min(1, gain · |Δ|)` in grayscale.
pub const HEATMAP_GAIN: f32 = 4.0;

const BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    SeededRandomConv2d,
    SeededRandomConv3d,
    ExternalPretrained,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorFingerprint {
    pub kind: ExtractorKind,
    pub embedding_dim: usize,
    pub seed: u64,
    pub clip_len: Option<usize>,
    /// SHA-256 of the weights, or whatever identifies an external model.
    pub weights: String,
}

/// Maps single frames to embeddings.
pub trait ImageEmbedder: Send + Sync {
    fn fingerprint(&self) -> ExtractorFingerprint;
    fn embed(&self, images: &[FrameImage]) -> Result<Features>;
}

/// Maps fixed-length clips to embeddings.
pub trait ClipEmbedder: Send + Sync {
    fn fingerprint(&self) -> ExtractorFingerprint;
    fn clip_len(&self) -> usize;
    fn embed(&self, clips: &[&[FrameImage]]) -> Result<Features>;
}

struct Layer {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::im2col::conv2d(x, &self.weight, self.stride, self.padding)?)
    }
}

struct LayerBuilder {
    rng: ChaCha8Rng,
    hasher: Sha256,
}

impl LayerBuilder {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), hasher: Sha256::new() }
    }

    /// He-scaled Gaussian weights so activations keep their scale through
    /// the leaky ReLUs.
    fn layer(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Result<Layer> {
        let fan_in = (cin * kernel * kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f32> = (0..cout * cin * kernel * kernel).map(|_| dist.sample(&mut self.rng) as f32).collect();
        for v in &values {
            self.hasher.update(v.to_le_bytes());
        }
        let weight = Tensor::from_vec(values, (cout, cin, kernel, kernel), &Device::Cpu)?;
        Ok(Layer { weight, stride, padding })
    }

    fn digest(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

fn activate(x: &Tensor) -> Result<Tensor> {
    crate::nn::leaky_relu(x)
}

fn stack_frames(images: &[&FrameImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::precondition("nothing to embed"))?;
    let (h, w) = first.resolution();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.channels() != 3 || img.resolution() != (h, w) {
            return Err(Error::shape(format!(
                "embedder expects 3x{h}x{w} frames, got {}x{:?}",
                img.channels(),
                img.resolution()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?;
    Ok(((t * 2.0)? - 1.0)?)
}

fn to_features(t: &Tensor) -> Result<Features> {
    let (n, d) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_slice(n, d, &v))
}

/// Three strided convolutions and global average pooling.
pub struct RandomConv2d {
    layers: Vec<Layer>,
    fingerprint: ExtractorFingerprint,
}

impl RandomConv2d {
    pub fn new(embedding_dim: usize, seed: u64) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let mut b = LayerBuilder::new(seed);
        let layers = vec![b.layer(3, 16, 4, 2, 1)?, b.layer(16, 32, 4, 2, 1)?, b.layer(32, embedding_dim, 3, 1, 1)?];
        let fingerprint = ExtractorFingerprint {
            kind: ExtractorKind::SeededRandomConv2d,
            embedding_dim,
            seed,
            clip_len: None,
            weights: b.digest(),
        };
        Ok(Self { layers, fingerprint })
    }
}

impl Default for RandomConv2d {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM, DEFAULT_EXTRACTOR_SEED).expect("default extractor is valid")
    }
}

impl ImageEmbedder for RandomConv2d {
    fn fingerprint(&self) -> ExtractorFingerprint {
        self.fingerprint.clone()
    }

    fn embed(&self, images: &[FrameImage]) -> Result<Features> {
        let mut rows = Vec::new();
        for chunk in images.chunks(BATCH) {
            let mut x = stack_frames(&chunk.iter().collect::<Vec<_>>())?;
            for layer in &self.layers {
                x = activate(&layer.forward(&x)?)?;
            }
            rows.push(x.mean(D::Minus1)?.mean(D::Minus1)?);
        }
        if rows.is_empty() {
            return Err(Error::precondition("nothing to embed"));
        }
        to_features(&Tensor::cat(&rows, 0)?)
    }
}

/// Factorized space-time network: two strided spatial convolutions per
/// frame, then two temporal layers that each mix three consecutive frames,
/// then average pooling over time and space.
pub struct RandomConv3d {
    spatial: Vec<Layer>,
    temporal: Vec<Layer>,
    clip_len: usize,
    fingerprint: ExtractorFingerprint,
}

const TEMPORAL_TAPS: usize = 3;

impl RandomConv3d {
    pub fn new(embedding_dim: usize, clip_len: usize, seed: u64) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if clip_len < 2 * TEMPORAL_TAPS - 1 {
            return Err(Error::Config(format!("clips need at least {} frames", 2 * TEMPORAL_TAPS - 1)));
        }
        let mut b = LayerBuilder::new(seed);
        let spatial = vec![b.layer(3, 16, 4, 2, 1)?, b.layer(16, 32, 4, 2, 1)?];
        let temporal = vec![
            b.layer(32 * TEMPORAL_TAPS, 64, 1, 1, 0)?,
            b.layer(64 * TEMPORAL_TAPS, embedding_dim, 1, 1, 0)?,
        ];
        let fingerprint = ExtractorFingerprint {
            kind: ExtractorKind::SeededRandomConv3d,
            embedding_dim,
            seed,
            clip_len: Some(clip_len),
            weights: b.digest(),
        };
        Ok(Self { spatial, temporal, clip_len, fingerprint })
    }

    fn embed_clip(&self, clip: &[FrameImage]) -> Result<Tensor> {
        let mut x = stack_frames(&clip.iter().collect::<Vec<_>>())?;
        for layer in &self.spatial {
            x = activate(&layer.forward(&x)?)?;
        }
        for layer in &self.temporal {
            let t = x.dim(0)? - (TEMPORAL_TAPS - 1);
            let taps: Vec<Tensor> = (0..TEMPORAL_TAPS).map(|k| x.narrow(0, k, t)).collect::<candle_core::Result<_>>()?;
            x = activate(&layer.forward(&Tensor::cat(&taps, 1)?)?)?;
        }
        Ok(x.mean(D::Minus1)?.mean(D::Minus1)?.mean_keepdim(0)?)
    }
}

impl Default for RandomConv3d {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM, DEFAULT_CLIP_LEN, DEFAULT_EXTRACTOR_SEED ^ 0x3d).expect("default extractor is valid")
    }
}

impl ClipEmbedder for RandomConv3d {
    fn fingerprint(&self) -> ExtractorFingerprint {
        self.fingerprint.clone()
    }

    fn clip_len(&self) -> usize {
        self.clip_len
    }

    fn embed(&self, clips: &[&[FrameImage]]) -> Result<Features> {
        if clips.is_empty() {
            return Err(Error::precondition("nothing to embed"));
        }
        let rows = clips
            .iter()
            .map(|c| {
                if c.len() != self.clip_len {
                    return Err(Error::shape(format!("clip has {} frames, extractor takes {}", c.len(), self.clip_len)));
                }
                self.embed_clip(c)
            })
            .collect::<Result<Vec<_>>>()?;
        to_features(&Tensor::cat(&rows, 0)?)
    }
}

/// Non-overlapping consecutive windows; a trailing partial window is dropped.
pub fn clip_windows(video: &[FrameImage], clip_len: usize) -> Vec<&[FrameImage]> {
    video.chunks_exact(clip_len.max(1)).collect()
}

fn moments(f: &Features) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows();
    let mean = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn clipped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    e.eigenvalues.apply(|v| *v = v.max(0.0));
    e
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let mut e = clipped_eigen(m);
    e.eigenvalues.apply(|v| *v = v.sqrt());
    e.recompose()
}

fn check_pair(a: &Features, b: &Features, min: usize) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("feature dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < min || b.nrows() < min {
        return Err(Error::precondition(format!(
            "need at least {min} samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &Features, b: &Features) -> Result<f64> {
    check_pair(a, b, a.ncols() + 1)?;
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let root_a = sqrt_psd(cov_a.clone());
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), and the inner matrix is symmetric.
    let cross: f64 = clipped_eigen(&root_a * &cov_b * &root_a).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

fn row_key(row: nalgebra::DVectorView<'_, f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in row.iter() {
        for byte in v.to_bits().to_le_bytes() {
            h = (h ^ byte as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Rows ordered by a hash of their contents: a fixed pseudo-random
/// partition that does not depend on the order samples arrive in.
fn canonical_order(f: &Features) -> Vec<usize> {
    let keys: Vec<u64> = (0..f.nrows()).map(|i| row_key(f.row(i).transpose().as_view())).collect();
    let mut idx: Vec<usize> = (0..f.nrows()).collect();
    idx.sort_by(|&i, &j| {
        keys[i].cmp(&keys[j]).then_with(|| {
            f.row(i).iter().map(|v| v.to_bits()).cmp(f.row(j).iter().map(|v| v.to_bits()))
        })
    });
    idx
}

fn unbiased_mmd2(a: &Features, b: &Features) -> f64 {
    let d = a.ncols() as f64;
    let kernel = |x: &Features, y: &Features| (x * y.transpose()).map(|v| (v / d + 1.0).powi(3));
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    let kaa = kernel(a, a);
    let kbb = kernel(b, b);
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    off_diag(&kaa) / (m * (m - 1.0)) + off_diag(&kbb) / (n * (n - 1.0)) - 2.0 * kernel(a, b).sum() / (m * n)
}

/// Kernel distance with a cubic polynomial kernel, averaged over blocks of
/// [`KID_BLOCK`] samples.
pub fn kid(a: &Features, b: &Features) -> Result<f64> {
    kid_with_block(a, b, KID_BLOCK)
}

pub fn kid_with_block(a: &Features, b: &Features, block: usize) -> Result<f64> {
    check_pair(a, b, 2)?;
    if block < 2 {
        return Err(Error::Config("KID block size must be at least 2".into()));
    }
    let blocks = (a.nrows().min(b.nrows()) / block).max(1);
    let (sa, sb) = (a.nrows() / blocks, b.nrows() / blocks);
    let (oa, ob) = (canonical_order(a), canonical_order(b));
    let gather = |f: &Features, order: &[usize]| f.select_rows(order.iter());
    let total: f64 = (0..blocks)
        .map(|i| unbiased_mmd2(&gather(a, &oa[i * sa..(i + 1) * sa]), &gather(b, &ob[i * sb..(i + 1) * sb])))
        .sum();
    Ok(total / blocks as f64)
}

/// Fréchet distance over clip embeddings of two videos, each cut into
/// non-overlapping windows of the embedder's clip length.
pub fn vfid(video_a: &[FrameImage], video_b: &[FrameImage], embedder: &dyn ClipEmbedder) -> Result<f64> {
    let (ca, cb) = (clip_windows(video_a, embedder.clip_len()), clip_windows(video_b, embedder.clip_len()));
    let dim = embedder.fingerprint().embedding_dim;
    if ca.len() <= dim || cb.len() <= dim {
        return Err(Error::precondition(format!(
            "need at least {} clips of {} frames per video, got {} and {}",
            dim + 1,
            embedder.clip_len(),
            ca.len(),
            cb.len()
        )));
    }
    fid(&embedder.embed(&ca)?, &embedder.embed(&cb)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jitter {
    pub scalar: f64,
    /// One single-channel map per consecutive pair, `|o_t − o_{t−1}|`
    /// averaged over channels.
    pub heatmaps: Vec<FrameImage>,
    /// Pairs that entered the scalar.
    pub pairs_counted: usize,
}

/// Inter-frame differences inside the garment. A pair counts towards the
/// scalar when the union of its two masks is nonempty and it is not a
/// bit-identical repeat of the previous frame and mask (a stalled or
/// duplicated frame), so appending duplicates leaves the scalar unchanged.
/// With no counted pairs the scalar is 0.
pub fn jitter(outputs: &[FrameImage], masks: &[MaskImage]) -> Result<Jitter> {
    if outputs.len() != masks.len() {
        return Err(Error::shape(format!("{} frames but {} masks", outputs.len(), masks.len())));
    }
    if outputs.len() < 2 {
        return Err(Error::precondition("jitter needs at least two frames"));
    }
    let (h, w) = outputs[0].resolution();
    let c = outputs[0].channels();
    for (o, m) in outputs.iter().zip(masks) {
        if o.resolution() != (h, w) || o.channels() != c || m.resolution() != (h, w) {
            return Err(Error::shape("jitter inputs must share one resolution and channel count"));
        }
    }
    let n = h * w;
    let mut heatmaps = Vec::with_capacity(outputs.len() - 1);
    let (mut sum, mut counted) = (0.0f64, 0usize);
    for t in 1..outputs.len() {
        let (prev, cur) = (outputs[t - 1].data(), outputs[t].data());
        let heat: Vec<f32> = (0..n)
            .map(|i| (0..c).map(|ch| (cur[ch * n + i] - prev[ch * n + i]).abs()).sum::<f32>() / c as f32)
            .collect();
        let duplicate = outputs[t] == outputs[t - 1] && masks[t] == masks[t - 1];
        let (mp, mc) = (masks[t - 1].data(), masks[t].data());
        let (mut acc, mut area) = (0.0f64, 0usize);
        for i in 0..n {
            if mp[i] >= 0.5 || mc[i] >= 0.5 {
                acc += heat[i] as f64;
                area += 1;
            }
        }
        if area > 0 && !duplicate {
            sum += acc / area as f64;
            counted += 1;
        }
        heatmaps.push(FrameImage::new(1, h, w, heat)?);
    }
    let scalar = if counted == 0 { 0.0 } else { sum / counted as f64 };
    Ok(Jitter { scalar, heatmaps, pairs_counted: counted })
}

/// Writes `jitter_00001.png`, ... (numbered by the later frame of each pair).
pub fn save_heatmaps(dir: impl AsRef<Path>, heatmaps: &[FrameImage], gain: f32) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    heatmaps
        .iter()
        .enumerate()
        .map(|(i, heat)| {
            let (h, w) = heat.resolution();
            let scaled = FrameImage::clamped(1, h, w, heat.data().iter().map(|v| v * gain).collect())?;
            let path = dir.as_ref().join(format!("jitter_{:05}.png", i + 1));
            scaled.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub fid: bool,
    pub kid: bool,
    pub vfid: bool,
    pub jitter: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet { fid: true, kid: true, vfid: true, jitter: true };
}

impl FromStr for MetricSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = MetricSet { fid: false, kid: false, vfid: false, jitter: false };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "fid" => set.fid = true,
                "kid" => set.kid = true,
                "vfid" => set.vfid = true,
                "jitter" => set.jitter = true,
                other => return Err(Error::Config(format!("unknown metric `{other}`"))),
            }
        }
        if set == (MetricSet { fid: false, kid: false, vfid: false, jitter: false }) {
            return Err(Error::Config("no metrics selected".into()));
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub pred_frames: usize,
    pub ref_frames: usize,
    pub pred_clips: usize,
    pub ref_clips: usize,
    pub jitter_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFingerprint {
    pub image: ExtractorFingerprint,
    pub clip: ExtractorFingerprint,
    pub kid_block: usize,
    pub kid_epsilon: f64,
    pub heatmap_gain: f32,
}

/// Metrics that were not requested are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kid: Option<f64>,
    pub fid: Option<f64>,
    pub vfid: Option<f64>,
    pub jitter: Option<f64>,
    pub samples: SampleCounts,
    pub fingerprint: ReportFingerprint,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: Option<f64>, floor: f64| match v {
            Some(x) if !x.is_finite() || x < floor => Err(Error::Range(format!("{name} = {x}"))),
            _ => Ok(()),
        };
        check("kid", self.kid, -KID_EPSILON)?;
        check("fid", self.fid, 0.0)?;
        check("vfid", self.vfid, 0.0)?;
        check("jitter", self.jitter, 0.0)
    }
}

/// Compares predicted frames with reference frames. Jitter is computed on
/// the predictions inside `pred_masks`, or over the whole frame without them.
pub fn evaluate(
    pred: &[FrameImage],
    pred_masks: Option<&[MaskImage]>,
    reference: &[FrameImage],
    metrics: MetricSet,
    images: &dyn ImageEmbedder,
    clips: &dyn ClipEmbedder,
) -> Result<MetricReport> {
    let mut samples = SampleCounts {
        pred_frames: pred.len(),
        ref_frames: reference.len(),
        pred_clips: pred.len() / clips.clip_len(),
        ref_clips: reference.len() / clips.clip_len(),
        jitter_pairs: 0,
    };
    let (mut fid_v, mut kid_v, mut vfid_v, mut jitter_v) = (None, None, None, None);
    if metrics.fid || metrics.kid {
        let (fa, fb) = (images.embed(pred)?, images.embed(reference)?);
        if metrics.fid {
            fid_v = Some(fid(&fa, &fb)?);
        }
        if metrics.kid {
            kid_v = Some(kid(&fa, &fb)?);
        }
    }
    if metrics.vfid {
        vfid_v = Some(vfid(pred, reference, clips)?);
    }
    if metrics.jitter {
        let full;
        let masks = match pred_masks {
            Some(m) => m,
            None => {
                let (h, w) = pred.first().ok_or_else(|| Error::precondition("no frames"))?.resolution();
                full = vec![MaskImage::filled(h, w, 1.0)?; pred.len()];
                &full
            }
        };
        let j = jitter(pred, masks)?;
        samples.jitter_pairs = j.pairs_counted;
        jitter_v = Some(j.scalar);
    }
    let report = MetricReport {
        kid: kid_v,
        fid: fid_v,
        vfid: vfid_v,
        jitter: jitter_v,
        samples,
        fingerprint: ReportFingerprint {
            image: images.fingerprint(),
            clip: clips.fingerprint(),
            kid_block: KID_BLOCK,
            kid_epsilon: KID_EPSILON,
            heatmap_gain: HEATMAP_GAIN,
        },
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> Features {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dim, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if j == 0 { shift } else { 0.0 }
        })
    }

    fn frame(seed: u64) -> FrameImage {
        FrameImage::from_fn(3, 16, 16, |c, y, x| ((seed as usize * 7 + c * 3 + y * 5 + x * 11) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn fid_self_zero_symmetric_and_gaussian_oracle() {
        let a = gaussian(500, 8, 0.0, 1);
        let b = gaussian(500, 8, 2.0, 2);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() <= 1e-8);
        // Closed form is the squared mean distance, 4, plus O(dim²/n) bias.
        assert!((ab - 4.0).abs() < 0.5, "{ab}");
        assert!(fid(&a.rows(0, 8).into_owned(), &b).is_err());
    }

    #[test]
    fn kid_trivial_cases() {
        let point = DMatrix::from_element(30, 4, 0.3);
        assert!(kid(&point, &point).unwrap().abs() <= 1e-9);
        let a = gaussian(250, 4, 0.0, 3);
        let b = gaussian(230, 4, 0.5, 4);
        let base = kid(&a, &b).unwrap();
        assert!(base > 0.0);
        let rev_a = DMatrix::from_fn(a.nrows(), 4, |i, j| a[(a.nrows() - 1 - i, j)]);
        assert!((kid(&rev_a, &b).unwrap() - base).abs() <= 1e-12);
        assert!(kid(&a.rows(0, 1).into_owned(), &b).is_err());
    }

    #[test]
    fn extractors_are_deterministic_and_fingerprinted() {
        let frames: Vec<_> = (0..5).map(frame).collect();
        let e = RandomConv2d::new(8, 1).unwrap();
        let f1 = e.embed(&frames).unwrap();
        assert_eq!(f1, RandomConv2d::new(8, 1).unwrap().embed(&frames).unwrap());
        assert_eq!(f1.shape(), (5, 8));
        assert_ne!(e.fingerprint().weights, RandomConv2d::new(8, 2).unwrap().fingerprint().weights);
        let v = RandomConv3d::new(8, 6, 1).unwrap();
        let clip: Vec<_> = (0..6).map(frame).collect();
        let g = v.embed(&[&clip, &clip]).unwrap();
        assert_eq!(g.row(0), g.row(1));
        assert!(v.embed(&[&clip[..5]]).is_err());
    }

    #[test]
    fn vfid_sees_constant_colour_differences() {
        let v = RandomConv3d::new(2, 6, 1).unwrap();
        let solid = |g: f32| FrameImage::filled(3, 16, 16, g).unwrap();
        let video = |base: f32| (0..24).map(|i| solid(base + 0.01 * (i % 6) as f32 + 0.003 * (i / 6) as f32)).collect::<Vec<_>>();
        let (a, b) = (video(0.2), video(0.7));
        assert!(vfid(&a, &a, &v).unwrap() <= 1e-6);
        assert!(vfid(&a, &b, &v).unwrap() > 0.0);
        assert!(vfid(&a[..12], &b, &v).is_err());
    }

    #[test]
    fn jitter_trivial_cases_and_duplicate_rule() {
        let full = MaskImage::filled(16, 16, 1.0).unwrap();
        let c = vec![frame(1); 4];
        let j = jitter(&c, &vec![full.clone(); 4]).unwrap();
        assert_eq!(j.scalar, 0.0);
        assert!(j.heatmaps.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
        let bw: Vec<_> = (0..5).map(|i| FrameImage::filled(3, 16, 16, (i % 2) as f32).unwrap()).collect();
        assert_eq!(jitter(&bw, &vec![full.clone(); 5]).unwrap().scalar, 1.0);
        let varied: Vec<_> = (0..4).map(frame).collect();
        let base = jitter(&varied, &vec![full.clone(); 4]).unwrap();
        let mut dup = varied.clone();
        dup.push(varied[3].clone());
        let extended = jitter(&dup, &vec![full.clone(); 5]).unwrap();
        assert_eq!(base.scalar, extended.scalar);
        assert_eq!(extended.heatmaps.len(), 4);
        let empty = MaskImage::filled(16, 16, 0.0).unwrap();
        assert_eq!(jitter(&varied, &vec![empty; 4]).unwrap().scalar, 0.0);
        assert!(jitter(&varied, &vec![full; 3]).is_err());
    }

    #[test]
    fn metric_selection_parses() {
        let s: MetricSet = "fid, jitter".parse().unwrap();
        assert!(s.fid && s.jitter && !s.kid && !s.vfid);
        assert!("fid,psnr".parse::<MetricSet>().is_err());
        assert!("".parse::<MetricSet>().is_err());
    }
}

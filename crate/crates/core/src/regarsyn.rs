//! Recurrent garment synthesis: a conditional generator with a
//! convolutional LSTM at its bottleneck, trained on clips with
//! backpropagation through time, plus the variant without recurrence.

use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, LoadedCheckpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{
    feature_matching, lsgan, scalar, sigmoid, Adam, Discriminator, Generator, GeneratorSpec, LstmState, ParamStore,
    LSTM_PREFIX,
};
use crate::pgdataset::{Clip, ClipSampler, FrameRecord, PerGarmentDataset};
use crate::raster::{concat_channels, FrameImage, MaskImage};
use crate::semantic::SemanticMap;

pub const CHECKPOINT_KIND: &str = "regarsyn";
const GENERATOR_PREFIX: &str = "g.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Recurrent,
    PerFrame,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Recurrent => "recurrent",
            Variant::PerFrame => "per_frame",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Variant::Recurrent),
            "per_frame" | "per-frame" => Ok(Variant::PerFrame),
            _ => Err(Error::Config(format!("unknown variant `{s}` (recurrent, per_frame)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReGarSynConfig {
    pub width: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
    pub epochs: usize,
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    /// Clips drawn per epoch; 0 picks enough to cover the dataset once on
    /// average.
    pub clips_per_epoch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub feature_matching_weight: f64,
    pub mask_l1_weight: f64,
    pub discriminator_width: usize,
    pub seed: u64,
    /// 64-bit weights and activations, for gradient checks.
    pub double_precision: bool,
}

impl ReGarSynConfig {
    pub fn desk(cfg: &PipelineConfig) -> Self {
        Self {
            width: cfg.base_width,
            downsamples: 3,
            residual_blocks: cfg.residual_blocks,
            epochs: cfg.epochs,
            clip_len_min: cfg.clip_len_min,
            clip_len_max: cfg.clip_len_max,
            clips_per_epoch: 0,
            learning_rate: cfg.learning_rate,
            adam_beta1: cfg.adam_beta1,
            adam_beta2: cfg.adam_beta2,
            feature_matching_weight: 10.0,
            mask_l1_weight: 1.0,
            discriminator_width: 16,
            seed: cfg.seed,
            double_precision: false,
        }
    }

    pub fn full(cfg: &PipelineConfig) -> Self {
        Self { width: 64, residual_blocks: 9, discriminator_width: 64, ..Self::desk(cfg) }
    }

    fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    fn generator_spec(&self, variant: Variant) -> GeneratorSpec {
        GeneratorSpec {
            in_channels: HybridRep::CHANNELS,
            out_channels: 4,
            width: self.width,
            downsamples: self.downsamples,
            residual_blocks: self.residual_blocks,
            recurrent: variant == Variant::Recurrent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.epochs == 0 || self.discriminator_width == 0 {
            return Err(Error::Config("width, epochs and discriminator_width must be positive".into()));
        }
        if self.clip_len_min == 0 || self.clip_len_min > self.clip_len_max {
            return Err(Error::Config(format!(
                "clip lengths [{}, {}] are not a valid range",
                self.clip_len_min, self.clip_len_max
            )));
        }
        Ok(())
    }
}

/// Measurement-garment render followed by the semantic map's palette
/// colors.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridRep(FrameImage);

impl HybridRep {
    pub const CHANNELS: usize = 6;

    pub fn new(vm: &FrameImage, semantic: &SemanticMap) -> Result<Self> {
        if vm.channels() != 3 {
            return Err(Error::shape(format!("vm render has {} channels, expected 3", vm.channels())));
        }
        Ok(Self(concat_channels(vm, &semantic.render_colors())?))
    }

    pub fn from_record(r: &FrameRecord) -> Result<Self> {
        Self::new(&r.vm, &r.semantic)
    }

    pub fn from_image(img: FrameImage) -> Result<Self> {
        if img.channels() != Self::CHANNELS {
            return Err(Error::shape(format!("hybrid needs 6 channels, got {}", img.channels())));
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &FrameImage {
        &self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.resolution()
    }
}

/// Cell and hidden rasters of the bottleneck LSTM, each `(1, C, h, w)`.
/// Never attached to an autodiff graph.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    cell: Tensor,
    hidden: Tensor,
}

impl RecurrentState {
    pub fn zeros(shape: (usize, usize, usize), dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((1, shape.0, shape.1, shape.2), dtype, &Device::Cpu)?;
        Ok(Self { cell: z.clone(), hidden: z })
    }

    pub fn from_tensors(cell: Tensor, hidden: Tensor) -> Result<Self> {
        if cell.dims() != hidden.dims() || cell.rank() != 4 || cell.dim(0)? != 1 {
            return Err(Error::shape(format!(
                "cell {:?} and hidden {:?} must both be (1, C, h, w)",
                cell.dims(),
                hidden.dims()
            )));
        }
        Ok(Self { cell: cell.detach(), hidden: hidden.detach() })
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.cell.dims();
        (d[1], d[2], d[3])
    }

    pub fn cell(&self) -> &Tensor {
        &self.cell
    }

    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }

    pub fn byte_size(&self) -> usize {
        2 * self.cell.elem_count() * self.cell.dtype().size_in_bytes()
    }

    pub fn is_finite(&self) -> Result<bool> {
        for t in [&self.cell, &self.hidden] {
            let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn is_zero(&self) -> Result<bool> {
        let m = self.cell.abs()?.max_all()?.maximum(&self.hidden.abs()?.max_all()?)?;
        Ok(scalar(&m)? == 0.0)
    }

    /// Root-mean-square of the cell and hidden tensors.
    pub fn rms(&self) -> Result<(f64, f64)> {
        let rms = |t: &Tensor| -> Result<f64> { Ok(scalar(&t.sqr()?.mean_all()?)?.sqrt()) };
        Ok((rms(&self.cell)?, rms(&self.hidden)?))
    }

    fn as_lstm(&self) -> LstmState {
        (self.cell.clone(), self.hidden.clone())
    }
}

/// One synthesized garment image and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentLayer {
    pub garment: FrameImage,
    pub mask: MaskImage,
}

#[derive(Debug)]
pub struct ReGarSynNetwork {
    params: ParamStore,
    generator: Generator,
    variant: Variant,
    garment_id: String,
    resolution: (usize, usize),
    config: ReGarSynConfig,
}

impl ReGarSynNetwork {
    pub fn new(config: &ReGarSynConfig, variant: Variant, garment_id: &str, resolution: (usize, usize)) -> Result<Self> {
        config.validate()?;
        crate::raster::check_resolution(resolution.0, resolution.1)?;
        let s = 1 << config.downsamples;
        if resolution.0 % s != 0 || resolution.1 % s != 0 {
            return Err(Error::shape(format!(
                "{resolution:?} is not divisible by {s} for {} downsamplings",
                config.downsamples
            )));
        }
        let mut params = ParamStore::new(config.seed, config.dtype());
        let generator = Generator::new(&mut params, GENERATOR_PREFIX, config.generator_spec(variant))?;
        Ok(Self { params, generator, variant, garment_id: garment_id.to_owned(), resolution, config: config.clone() })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn garment_id(&self) -> &str {
        &self.garment_id
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn config(&self) -> &ReGarSynConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn lstm_parameter_count(&self) -> usize {
        self.params.count_with_prefix(&format!("{GENERATOR_PREFIX}{LSTM_PREFIX}"))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn state_shape(&self) -> (usize, usize, usize) {
        self.generator.state_shape(self.resolution.0, self.resolution.1)
    }

    pub fn zero_state(&self) -> Result<RecurrentState> {
        RecurrentState::zeros(self.state_shape(), self.dtype())
    }

    fn check_hybrid(&self, h: &HybridRep) -> Result<()> {
        if h.resolution() != self.resolution {
            return Err(Error::shape(format!(
                "hybrid {:?} does not match the network resolution {:?}",
                h.resolution(),
                self.resolution
            )));
        }
        Ok(())
    }

    fn check_state(&self, s: &RecurrentState) -> Result<()> {
        if s.shape() != self.state_shape() {
            return Err(Error::shape(format!("state {:?}, network expects {:?}", s.shape(), self.state_shape())));
        }
        if s.cell.dtype() != self.dtype() {
            return Err(Error::shape(format!("state is {:?}, network runs {:?}", s.cell.dtype(), self.dtype())));
        }
        Ok(())
    }

    fn hybrid_tensor(&self, h: &HybridRep) -> Result<Tensor> {
        h.image().to_tensor(&Device::Cpu, self.dtype())
    }

    /// Runs a clip of hybrids `(T, 6, H, W)` from `state` (zeros if `None`).
    /// Returns garment `(T, 3, H, W)` and mask `(T, 1, H, W)`, both in
    /// `[0, 1]`, and the final state. Autodiff flows through the state.
    pub fn forward_clip(&self, xs: &Tensor, state: Option<&LstmState>) -> Result<(Tensor, Tensor, Option<LstmState>)> {
        let feats = self.generator.encode(xs)?;
        let (hidden, last) = match self.variant {
            Variant::PerFrame => (feats, None),
            Variant::Recurrent => {
                let t_len = feats.dim(0)?;
                let mut state = state.cloned();
                let mut hs = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let (h, next) = self.generator.lstm_step(&feats.narrow(0, t, 1)?, state.as_ref())?;
                    hs.push(h);
                    state = next;
                }
                (Tensor::cat(&hs, 0)?, state)
            }
        };
        let logits = self.generator.decode(&hidden)?;
        let garment = ((logits.narrow(1, 0, 3)?.tanh()? + 1.0)? * 0.5)?;
        let mask = sigmoid(&logits.narrow(1, 3, 1)?)?;
        Ok((garment, mask, last))
    }

    /// One streaming step. The per-frame variant ignores `state` and returns
    /// the zero state.
    pub fn step(&self, hybrid: &HybridRep, state: &RecurrentState) -> Result<(GarmentLayer, RecurrentState)> {
        self.check_hybrid(hybrid)?;
        self.check_state(state)?;
        let x = self.hybrid_tensor(hybrid)?;
        let lstm = (self.variant == Variant::Recurrent).then(|| state.as_lstm());
        let (g, m, next) = self.forward_clip(&x, lstm.as_ref())?;
        let layer = GarmentLayer {
            garment: FrameImage::from_tensor(&g.squeeze(0)?.detach())?,
            mask: MaskImage::from_frame(FrameImage::from_tensor(&m.squeeze(0)?.detach())?)?,
        };
        let next = match next {
            Some((c, h)) => RecurrentState::from_tensors(c, h)?,
            None => self.zero_state()?,
        };
        Ok((layer, next))
    }

    /// Folds [`step`](Self::step) over `hybrids`, returning the final state
    /// for continuation.
    pub fn rollout(&self, hybrids: &[HybridRep], initial: &RecurrentState) -> Result<(Vec<GarmentLayer>, RecurrentState)> {
        if hybrids.is_empty() {
            return Err(Error::precondition("rollout needs at least one frame"));
        }
        let mut state = initial.clone();
        let mut out = Vec::with_capacity(hybrids.len());
        for (index, h) in hybrids.iter().enumerate() {
            let (layer, next) = self.step(h, &state).map_err(|e| Error::Rollout { index, source: Box::new(e) })?;
            out.push(layer);
            state = next;
        }
        Ok((out, state))
    }

    pub fn metadata(&self, config_hash: &str) -> CheckpointMetadata {
        CheckpointMetadata::new(CHECKPOINT_KIND, config_hash, self.config.seed)
            .with("variant_flag", self.variant)
            .with("garment_id", &self.garment_id)
            .with("resolution", self.resolution)
            .with("regarsyn_config", &self.config)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        save_checkpoint(path, &self.params.to_weights()?, &self.metadata(config_hash))
    }

    pub fn from_checkpoint(ckpt: &LoadedCheckpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Integrity(format!("checkpoint holds a `{}` network, not regarsyn", meta.kind)));
        }
        let field = |k: &str| {
            meta.extra.get(k).cloned().ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks `{k}`")))
        };
        let config: ReGarSynConfig = serde_json::from_value(field("regarsyn_config")?)?;
        let variant: Variant = serde_json::from_value(field("variant_flag")?)?;
        let garment: String = serde_json::from_value(field("garment_id")?)?;
        let resolution: (usize, usize) = serde_json::from_value(field("resolution")?)?;
        let mut net = Self::new(&config, variant, &garment, resolution)?;
        net.params.load_weights(&ckpt.weights)?;
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>, expected_config_hash: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path, expected_config_hash)?)
    }
}

/// Per-step terms of the sequence objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceLossReport {
    pub adversarial: Vec<f64>,
    pub feature_matching: Vec<f64>,
    pub mask: Vec<f64>,
    /// `adversarial + fm_weight * feature_matching + mask_weight * mask`
    /// per step.
    pub step_totals: Vec<f64>,
    pub total: f64,
    pub steps: usize,
}

impl SequenceLossReport {
    /// Largest relative gap between `total` and the sum of the step totals.
    pub fn decomposition_error(&self) -> f64 {
        let sum: f64 = self.step_totals.iter().sum();
        (sum - self.total).abs() / self.total.abs().max(1e-12)
    }
}

/// Garment ⊕ mask target of one record.
pub fn target_image(r: &FrameRecord) -> Result<FrameImage> {
    concat_channels(&r.garment_image, r.garment_mask.as_frame())
}

struct Objective {
    total: Tensor,
    report: SequenceLossReport,
    fake: Tensor,
    real_feats: Vec<Tensor>,
}

/// Sum over the clip of the per-frame objective. The discriminator sees the
/// hybrid concatenated with garment ⊕ mask, one frame at a time.
fn sequence_objective(
    net: &ReGarSynNetwork,
    disc: &Discriminator,
    xs: &Tensor,
    ys: &Tensor,
    state: Option<&LstmState>,
) -> Result<Objective> {
    let (garment, mask, _) = net.forward_clip(xs, state)?;
    let fake = Tensor::cat(&[&garment, &mask], 1)?;
    let real_feats = disc.forward(&Tensor::cat(&[xs, ys], 1)?)?;
    let fake_feats = disc.forward(&Tensor::cat(&[xs, &fake], 1)?)?;
    let target_mask = ys.narrow(1, 3, 1)?;
    let (fm_w, mask_w) = (net.config.feature_matching_weight, net.config.mask_l1_weight);
    let steps = xs.dim(0)?;
    let mut report = SequenceLossReport { steps, ..Default::default() };
    let mut total: Option<Tensor> = None;
    for t in 0..steps {
        let at = |v: &[Tensor]| v.iter().map(|f| f.narrow(0, t, 1)).collect::<candle_core::Result<Vec<_>>>();
        let (rf, ff) = (at(&real_feats)?, at(&fake_feats)?);
        let adv = lsgan(ff.last().expect("discriminator has layers"), true)?;
        let fm = feature_matching(&rf, &ff)?;
        let m = (mask.narrow(0, t, 1)? - target_mask.narrow(0, t, 1)?)?.abs()?.mean_all()?;
        let step = ((&adv + (&fm * fm_w)?)? + (&m * mask_w)?)?;
        report.adversarial.push(scalar(&adv)?);
        report.feature_matching.push(scalar(&fm)?);
        report.mask.push(scalar(&m)?);
        report.step_totals.push(scalar(&step)?);
        total = Some(match total {
            Some(s) => (s + step)?,
            None => step,
        });
    }
    let total = total.ok_or_else(|| Error::precondition("empty clip"))?;
    report.total = scalar(&total)?;
    Ok(Objective { total, report, fake, real_feats })
}

/// The per-frame objective on a single frame from the zero state, computed
/// without the clip machinery.
pub fn frame_loss(net: &ReGarSynNetwork, disc: &Discriminator, hybrid: &HybridRep, target: &FrameImage) -> Result<f64> {
    let x = net.hybrid_tensor(hybrid)?;
    let y = target.to_tensor(&Device::Cpu, net.dtype())?;
    let (g, m, _) = net.forward_clip(&x, None)?;
    let fake = Tensor::cat(&[&g, &m], 1)?;
    let real = disc.forward(&Tensor::cat(&[&x, &y], 1)?)?;
    let fakef = disc.forward(&Tensor::cat(&[&x, &fake], 1)?)?;
    let adv = scalar(&lsgan(fakef.last().expect("layers"), true)?)?;
    let fm = scalar(&feature_matching(&real, &fakef)?)?;
    let ml1 = scalar(&(m - y.narrow(1, 3, 1)?)?.abs()?.mean_all()?)?;
    Ok(adv + net.config.feature_matching_weight * fm + net.config.mask_l1_weight * ml1)
}

/// Sequence objective of one clip, for inspection.
pub fn clip_loss(net: &ReGarSynNetwork, disc: &Discriminator, records: &[FrameRecord]) -> Result<SequenceLossReport> {
    let (xs, ys) = clip_tensors(net, records)?;
    Ok(sequence_objective(net, disc, &xs, &ys, None)?.report)
}

fn clip_tensors(net: &ReGarSynNetwork, records: &[FrameRecord]) -> Result<(Tensor, Tensor)> {
    let dev = Device::Cpu;
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        xs.push(net.hybrid_tensor(&HybridRep::from_record(r)?)?);
        ys.push(target_image(r)?.to_tensor(&dev, net.dtype())?);
    }
    Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&ys, 0)?))
}

pub fn new_discriminator(config: &ReGarSynConfig) -> Result<(ParamStore, Discriminator)> {
    let mut ps = ParamStore::new(config.seed ^ 0xd15c, config.dtype());
    let d = Discriminator::new(&mut ps, "d.", HybridRep::CHANNELS + 4, config.discriminator_width)?;
    Ok((ps, d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReGarSynTrainState {
    pub variant: Variant,
    pub epochs_completed: usize,
    /// Mean per-frame generator objective of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Generator objective per clip, divided by the clip length.
    pub clip_losses: Vec<f64>,
    pub discriminator_history: Vec<f64>,
    pub clips: Vec<Clip>,
    pub last_report: SequenceLossReport,
    pub config: ReGarSynConfig,
}

/// Trains on clips drawn from `ds`, each starting from the zero state, with
/// gradients flowing through the recurrent state across the whole clip.
pub fn train_regarsyn(
    ds: &PerGarmentDataset,
    config: &ReGarSynConfig,
    variant: Variant,
) -> Result<(ReGarSynNetwork, ReGarSynTrainState)> {
    config.validate()?;
    let resolution = ds.resolution().ok_or_else(|| Error::precondition("dataset has no frames"))?;
    if ds.len() < config.clip_len_min {
        return Err(Error::precondition(format!(
            "dataset has {} frames, clips need at least {}",
            ds.len(),
            config.clip_len_min
        )));
    }
    let net = ReGarSynNetwork::new(config, variant, &ds.garment_id, resolution)?;
    let (d_params, disc) = new_discriminator(config)?;
    let mut g_opt = Adam::new(net.params.vars(), config.learning_rate, config.adam_beta1, config.adam_beta2)?;
    let mut d_opt = Adam::new(d_params.vars(), config.learning_rate, config.adam_beta1, config.adam_beta2)?;
    let mut sampler = ClipSampler::new(config.clip_len_min, config.clip_len_max, config.seed)?;
    let per_epoch = if config.clips_per_epoch > 0 {
        config.clips_per_epoch
    } else {
        let mean = (config.clip_len_min + config.clip_len_max) as f64 / 2.0;
        ((ds.len() as f64 / mean).ceil() as usize).max(1)
    };

    let mut state = ReGarSynTrainState {
        variant,
        epochs_completed: 0,
        epoch_losses: Vec::new(),
        clip_losses: Vec::new(),
        discriminator_history: Vec::new(),
        clips: Vec::new(),
        last_report: SequenceLossReport::default(),
        config: config.clone(),
    };
    for epoch in 0..config.epochs {
        let clips = sampler.sample(ds, per_epoch)?;
        let (mut sum, mut frames) = (0.0, 0usize);
        for clip in &clips {
            let (xs, ys) = clip_tensors(&net, ds.clip(clip))?;
            let obj = sequence_objective(&net, &disc, &xs, &ys, None)?;
            g_opt.step(&obj.total.backward()?)?;

            let fake = disc.forward(&Tensor::cat(&[&xs, &obj.fake.detach()], 1)?)?;
            let real = obj.real_feats.last().expect("layers");
            let d_loss = ((lsgan(real, true)? + lsgan(fake.last().expect("layers"), false)?)? * 0.5)?;
            state.discriminator_history.push(scalar(&d_loss)?);
            d_opt.step(&d_loss.backward()?)?;

            sum += obj.report.total;
            frames += clip.len;
            state.clip_losses.push(obj.report.total / clip.len as f64);
            state.last_report = obj.report;
        }
        state.clips.extend(clips);
        state.epoch_losses.push(sum / frames as f64);
        state.epochs_completed = epoch + 1;
        log::debug!("regarsyn {} epoch {} loss {:.4}", variant.name(), epoch + 1, sum / frames as f64);
    }
    Ok((net, state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    /// Entry `k - 1` is the norm of the last frame's loss gradient with
    /// respect to the input `k` frames earlier.
    pub cross_time_grad_norms: Vec<f64>,
    pub parameter: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub epsilon: f64,
}

fn squared_error(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Smooth sequence loss used for gradient checking: per-frame mean squared
/// error of garment ⊕ mask, summed over the clip.
fn check_loss(net: &ReGarSynNetwork, xs: &Tensor, ys: &Tensor) -> Result<(Tensor, Tensor)> {
    let (g, m, _) = net.forward_clip(xs, None)?;
    let out = Tensor::cat(&[&g, &m], 1)?;
    let t_len = xs.dim(0)?;
    let last = squared_error(&out.narrow(0, t_len - 1, 1)?, &ys.narrow(0, t_len - 1, 1)?)?;
    let total = (squared_error(&out, ys)? * t_len as f64)?;
    Ok((total, last))
}

/// Measures how far gradients reach back in time and compares one weight's
/// autodiff gradient against central finite differences. The weight is the
/// largest-gradient element among 16 sampled from `parameter` (default: the
/// LSTM gate kernel, else the first residual convolution).
pub fn temporal_gradient_check(
    net: &ReGarSynNetwork,
    clip: &[FrameRecord],
    parameter: Option<&str>,
    epsilon: f64,
    seed: u64,
) -> Result<GradientCheckReport> {
    if clip.len() < 2 {
        return Err(Error::precondition("gradient check needs a clip of at least two frames"));
    }
    let (xs, ys) = clip_tensors(net, clip)?;
    let t_len = clip.len();

    let inputs = (0..t_len).map(|t| Var::from_tensor(&xs.narrow(0, t, 1)?)).collect::<candle_core::Result<Vec<_>>>()?;
    let stacked = Tensor::cat(&inputs.iter().map(|v| v.as_tensor()).collect::<Vec<_>>(), 0)?;
    let (_, last) = check_loss(net, &stacked, &ys)?;
    let grads = last.backward()?;
    let cross_time_grad_norms = (1..t_len)
        .map(|k| crate::nn::grad_sq_norm(&grads, inputs[t_len - 1 - k].as_tensor()).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;

    let default_name = if net.variant == Variant::Recurrent {
        format!("{GENERATOR_PREFIX}{LSTM_PREFIX}gates.weight")
    } else {
        format!("{GENERATOR_PREFIX}res0.a.weight")
    };
    let name = parameter.map(str::to_owned).unwrap_or(default_name);
    let var = net.params.get(&name).ok_or_else(|| Error::precondition(format!("no parameter `{name}`")))?;
    let (total, _) = check_loss(net, &xs, &ys)?;
    let g = total.backward()?;
    let gw = g
        .get(var.as_tensor())
        .ok_or_else(|| Error::precondition(format!("`{name}` does not affect the loss")))?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let element = sample(&mut rng, gw.len(), 16.min(gw.len()))
        .into_iter()
        .max_by(|a, b| gw[*a].abs().total_cmp(&gw[*b].abs()))
        .expect("parameter is non-empty");

    let original = var.as_tensor().detach().copy()?;
    let shape = original.dims().to_vec();
    let base = original.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let eval_at = |delta: f64| -> Result<f64> {
        let mut w = base.clone();
        w[element] += delta;
        var.set(&Tensor::from_vec(w, shape.as_slice(), &Device::Cpu)?.to_dtype(original.dtype())?)?;
        let v = scalar(&check_loss(net, &xs, &ys)?.0);
        var.set(&original)?;
        v
    };
    let numeric = (eval_at(epsilon)? - eval_at(-epsilon)?) / (2.0 * epsilon);
    let analytic = gw[element];
    let relative_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
    Ok(GradientCheckReport { cross_time_grad_norms, parameter: name, element, analytic, numeric, relative_error, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::Palette;
    use std::sync::Arc;

    fn tiny_config() -> ReGarSynConfig {
        ReGarSynConfig {
            width: 4,
            residual_blocks: 1,
            epochs: 1,
            clip_len_min: 2,
            clip_len_max: 4,
            discriminator_width: 4,
            ..ReGarSynConfig::desk(&PipelineConfig::default())
        }
    }

    fn hybrid(seed: usize) -> HybridRep {
        HybridRep::from_image(
            FrameImage::from_fn(6, 16, 16, |c, y, x| ((c * 13 + y * 5 + x * 3 + seed * 7) % 11) as f32 / 10.0).unwrap(),
        )
        .unwrap()
    }

    fn records(n: usize) -> Vec<FrameRecord> {
        let palette: Arc<Palette> = Palette::synthetic();
        (0..n)
            .map(|i| {
                let h = hybrid(i);
                let vm = crate::raster::split_channels(h.image(), 3).unwrap().0.quantized();
                FrameRecord {
                    index: i as u64,
                    raw: vm.clone(),
                    garment_image: FrameImage::from_fn(3, 16, 16, |c, y, _| ((c + y + i) % 4) as f32 / 3.0).unwrap(),
                    garment_mask: MaskImage::from_bools(16, 16, &(0..256).map(|p| (p / 16 + i) % 3 == 0).collect::<Vec<_>>())
                        .unwrap(),
                    vm,
                    semantic: SemanticMap::new(16, 16, (0..256).map(|p| ((p + i) % 13) as u8).collect(), palette.clone())
                        .unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn shapes_and_ranges_on_random_weights() {
        let net = ReGarSynNetwork::new(&tiny_config(), Variant::Recurrent, "g", (16, 16)).unwrap();
        let (layer, next) = net.step(&hybrid(0), &net.zero_state().unwrap()).unwrap();
        assert_eq!(layer.garment.channels(), 3);
        assert_eq!(layer.mask.resolution(), (16, 16));
        assert_eq!(next.shape(), (16, 2, 2));
        assert!(next.is_finite().unwrap() && !next.is_zero().unwrap());
        assert!(layer.garment.data().iter().chain(layer.mask.data()).all(|v| (0.0..=1.0).contains(v)));
        let bad = RecurrentState::zeros((16, 4, 4), DType::F32).unwrap();
        assert!(matches!(net.step(&hybrid(0), &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn per_frame_variant_ignores_state() {
        let net = ReGarSynNetwork::new(&tiny_config(), Variant::PerFrame, "g", (16, 16)).unwrap();
        let rec = ReGarSynNetwork::new(&tiny_config(), Variant::Recurrent, "g", (16, 16)).unwrap();
        let (_, carried) = rec.step(&hybrid(1), &rec.zero_state().unwrap()).unwrap();
        let (a, sa) = net.step(&hybrid(0), &net.zero_state().unwrap()).unwrap();
        let (b, _) = net.step(&hybrid(0), &carried).unwrap();
        assert_eq!(a, b);
        assert!(sa.is_zero().unwrap());
    }

    #[test]
    fn parameter_difference_is_the_lstm_cell() {
        let c = tiny_config();
        let r = ReGarSynNetwork::new(&c, Variant::Recurrent, "g", (16, 16)).unwrap();
        let p = ReGarSynNetwork::new(&c, Variant::PerFrame, "g", (16, 16)).unwrap();
        let cb = 16;
        assert_eq!(r.parameter_count() - p.parameter_count(), 4 * cb * 2 * cb * 9 + 4 * cb);
        assert_eq!(r.lstm_parameter_count(), 4 * cb * 2 * cb * 9 + 4 * cb);
        assert_eq!(p.lstm_parameter_count(), 0);
    }

    #[test]
    fn rollout_folds_step_and_rejects_empty() {
        let net = ReGarSynNetwork::new(&tiny_config(), Variant::Recurrent, "g", (16, 16)).unwrap();
        let hs: Vec<_> = (0..5).map(hybrid).collect();
        let (outs, fin) = net.rollout(&hs, &net.zero_state().unwrap()).unwrap();
        let mut s = net.zero_state().unwrap();
        for (h, o) in hs.iter().zip(&outs) {
            let (layer, next) = net.step(h, &s).unwrap();
            assert!(layer.garment.max_abs_diff(&o.garment).unwrap() <= 1e-6);
            s = next;
        }
        assert_eq!(fin.shape(), s.shape());
        assert!(net.rollout(&[], &s).is_err());
        let bad = HybridRep::from_image(FrameImage::zeros(6, 8, 16).unwrap()).unwrap();
        assert!(matches!(net.rollout(&[hybrid(0), bad], &s), Err(Error::Rollout { index: 1, .. })));
    }

    #[test]
    fn loss_report_decomposes_and_single_frame_clip_is_the_frame_loss() {
        let net = ReGarSynNetwork::new(&tiny_config(), Variant::Recurrent, "g", (16, 16)).unwrap();
        let (_, disc) = new_discriminator(net.config()).unwrap();
        let recs = records(4);
        let report = clip_loss(&net, &disc, &recs).unwrap();
        assert_eq!(report.steps, 4);
        assert!(report.decomposition_error() <= 1e-6);
        let one = clip_loss(&net, &disc, &recs[..1]).unwrap();
        let direct = frame_loss(&net, &disc, &HybridRep::from_record(&recs[0]).unwrap(), &target_image(&recs[0]).unwrap())
            .unwrap();
        assert!((one.total - direct).abs() <= 1e-6 * direct.abs().max(1.0));
    }

    #[test]
    fn training_runs_and_checkpoints_round_trip() {
        let recs = records(6);
        let ds = PerGarmentDataset {
            garment_id: "skirt".into(),
            person_id: "p".into(),
            fps: 30.0,
            config_hash: String::new(),
            palette: Palette::synthetic(),
            records: recs.clone(),
            gaps: vec![],
        };
        let cfg = ReGarSynConfig { epochs: 2, ..tiny_config() };
        let (net, st) = train_regarsyn(&ds, &cfg, Variant::Recurrent).unwrap();
        assert_eq!(st.epoch_losses.len(), 2);
        assert!(st.epoch_losses.iter().all(|l| l.is_finite()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        net.save(&path, "h").unwrap();
        let back = ReGarSynNetwork::load(&path, None).unwrap();
        assert_eq!(back.variant(), Variant::Recurrent);
        assert_eq!(back.garment_id(), "skirt");
        let h = HybridRep::from_record(&recs[0]).unwrap();
        let z = net.zero_state().unwrap();
        assert_eq!(back.step(&h, &z).unwrap().0, net.step(&h, &z).unwrap().0);
    }

    #[test]
    fn gradients_reach_back_only_with_recurrence() {
        let cfg = ReGarSynConfig { double_precision: true, ..tiny_config() };
        let recs = records(3);
        let r = ReGarSynNetwork::new(&cfg, Variant::Recurrent, "g", (16, 16)).unwrap();
        // Small steps keep the finite difference clear of ReLU kinks.
        let rep = temporal_gradient_check(&r, &recs, None, 1e-5, 0).unwrap();
        assert!(rep.cross_time_grad_norms[0] > 0.0);
        assert!(rep.relative_error <= 1e-3, "{rep:?}");
        let p = ReGarSynNetwork::new(&cfg, Variant::PerFrame, "g", (16, 16)).unwrap();
        let rep = temporal_gradient_check(&p, &recs, None, 1e-3, 0).unwrap();
        assert!(rep.cross_time_grad_norms.iter().all(|n| *n == 0.0));
    }
}

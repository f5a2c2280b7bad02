//! Per-person network from a body representation to a semantic map.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, LoadedCheckpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::girep::{GarmentInvariantRep, RepresentationKind};
use crate::nn::{
    cross_entropy, feature_matching, lsgan, scalar, softmax_channels, Adam, Discriminator, Generator, GeneratorSpec,
    ParamStore,
};
use crate::raster::FrameImage;
use crate::semantic::{Palette, SemanticMap};

pub const CHECKPOINT_KIND: &str = "bodymap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyMapConfig {
    pub representation: RepresentationKind,
    pub width: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Weight of the adversarial and feature-matching terms relative to
    /// cross-entropy; zero disables the discriminator.
    pub adversarial_weight: f64,
    pub feature_matching_weight: f64,
    pub discriminator_width: usize,
    pub seed: u64,
}

impl BodyMapConfig {
    /// Desk-scale preset: two downsamplings, four residual blocks, width 32.
    pub fn desk(cfg: &PipelineConfig) -> Self {
        Self {
            representation: RepresentationKind::Full,
            width: 32,
            downsamples: 2,
            residual_blocks: cfg.residual_blocks,
            epochs: 30,
            batch_size: 4,
            learning_rate: cfg.learning_rate,
            adam_beta1: cfg.adam_beta1,
            adam_beta2: cfg.adam_beta2,
            adversarial_weight: 0.1,
            feature_matching_weight: 10.0,
            discriminator_width: 16,
            seed: cfg.seed,
        }
    }

    /// Full-scale preset following the usual pix2pixHD global generator.
    pub fn full(cfg: &PipelineConfig) -> Self {
        Self { width: 64, downsamples: 4, residual_blocks: 9, epochs: cfg.epochs, discriminator_width: 64, ..Self::desk(cfg) }
    }

    fn generator_spec(&self, labels: usize) -> GeneratorSpec {
        GeneratorSpec {
            in_channels: self.representation.channels(),
            out_channels: labels,
            width: self.width,
            downsamples: self.downsamples,
            residual_blocks: self.residual_blocks,
            recurrent: false,
        }
    }
}

#[derive(Debug)]
pub struct BodyMapNetwork {
    params: ParamStore,
    generator: Generator,
    palette: Arc<Palette>,
    person_id: String,
    resolution: (usize, usize),
    config: BodyMapConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyMapTrainState {
    pub epochs_completed: usize,
    /// Generator objective per optimizer step.
    pub loss_history: Vec<f64>,
    pub discriminator_history: Vec<f64>,
    pub config: BodyMapConfig,
    pub seed: u64,
}

impl BodyMapNetwork {
    pub fn new(
        config: &BodyMapConfig,
        palette: Arc<Palette>,
        person_id: &str,
        resolution: (usize, usize),
    ) -> Result<Self> {
        crate::raster::check_resolution(resolution.0, resolution.1)?;
        let mut params = ParamStore::new(config.seed, DType::F32);
        let generator = Generator::new(&mut params, "g.", config.generator_spec(palette.len()))?;
        Ok(Self { params, generator, palette, person_id: person_id.to_owned(), resolution, config: config.clone() })
    }

    pub fn person_id(&self) -> &str {
        &self.person_id
    }

    pub fn palette(&self) -> &Arc<Palette> {
        &self.palette
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn config(&self) -> &BodyMapConfig {
        &self.config
    }

    pub fn representation(&self) -> RepresentationKind {
        self.config.representation
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn check_input(&self, input: &FrameImage) -> Result<()> {
        if input.resolution() != self.resolution {
            return Err(Error::shape(format!(
                "input {:?} does not match the network resolution {:?}",
                input.resolution(),
                self.resolution
            )));
        }
        let c = self.config.representation.channels();
        if input.channels() != c {
            return Err(Error::shape(format!("input has {} channels, network expects {c}", input.channels())));
        }
        Ok(())
    }

    /// Raw per-label scores, shape `(1, L, H, W)`.
    pub fn scores(&self, input: &FrameImage) -> Result<Tensor> {
        self.check_input(input)?;
        let x = input.to_tensor(&Device::Cpu, DType::F32)?;
        Ok(self.generator.forward(&x, None)?.0)
    }

    /// Per-pixel argmax of the label scores.
    pub fn estimate(&self, input: &FrameImage) -> Result<SemanticMap> {
        let scores = self.scores(input)?;
        let labels = scores.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
        let (h, w) = self.resolution;
        SemanticMap::new(h, w, labels.into_iter().map(|l| l as u8).collect(), self.palette.clone())
    }

    /// Like [`estimate`](Self::estimate), but refuses inputs from another
    /// person unless `allow_other_person` is set.
    pub fn estimate_for(&self, person_id: &str, input: &FrameImage, allow_other_person: bool) -> Result<SemanticMap> {
        if person_id != self.person_id && !allow_other_person {
            return Err(Error::PersonMismatch { expected: self.person_id.clone(), actual: person_id.to_owned() });
        }
        self.estimate(input)
    }

    pub fn estimate_gi(&self, gi: &GarmentInvariantRep) -> Result<SemanticMap> {
        self.estimate(gi.image())
    }

    pub fn metadata(&self, config_hash: &str) -> CheckpointMetadata {
        CheckpointMetadata::new(CHECKPOINT_KIND, config_hash, self.config.seed)
            .with("person_id", &self.person_id)
            .with("resolution", self.resolution)
            .with("bodymap_config", &self.config)
            .with("palette", &*self.palette)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        save_checkpoint(path, &self.params.to_weights()?, &self.metadata(config_hash))
    }

    pub fn from_checkpoint(ckpt: &LoadedCheckpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Integrity(format!("checkpoint holds a `{}` network, not bodymap", meta.kind)));
        }
        let field = |k: &str| {
            meta.extra.get(k).cloned().ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks `{k}`")))
        };
        let config: BodyMapConfig = serde_json::from_value(field("bodymap_config")?)?;
        let palette: Palette = serde_json::from_value(field("palette")?)?;
        let resolution: (usize, usize) = serde_json::from_value(field("resolution")?)?;
        let person: String = serde_json::from_value(field("person_id")?)?;
        let mut net = Self::new(&config, Arc::new(Palette::new(palette.labels().to_vec())?), &person, resolution)?;
        net.params.load_weights(&ckpt.weights)?;
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>, expected_config_hash: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path, expected_config_hash)?)
    }
}

/// Share of pixels whose estimated label matches the reference.
pub fn pixel_accuracy(net: &BodyMapNetwork, pairs: &[(FrameImage, SemanticMap)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::precondition("accuracy needs at least one pair"));
    }
    let mut total = 0.0;
    for (x, gt) in pairs {
        total += net.estimate(x)?.agreement(gt)?;
    }
    Ok(total / pairs.len() as f64)
}

fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(tensors, 0)?)
}

/// Trains a network on `(representation, semantic map)` pairs recorded from
/// one person. Deterministic for a fixed seed.
pub fn train_bodymap(
    pairs: &[(FrameImage, SemanticMap)],
    config: &BodyMapConfig,
    person_id: &str,
) -> Result<(BodyMapNetwork, BodyMapTrainState)> {
    let Some((first, first_map)) = pairs.first() else {
        return Err(Error::precondition("BodyMap training needs at least one pair"));
    };
    let resolution = first.resolution();
    let palette = first_map.palette().clone();
    for (i, (x, m)) in pairs.iter().enumerate() {
        if x.resolution() != resolution || m.resolution() != resolution {
            return Err(Error::shape(format!(
                "pair {i} has resolution {:?}/{:?}, expected {resolution:?}",
                x.resolution(),
                m.resolution()
            )));
        }
        if x.channels() != config.representation.channels() {
            return Err(Error::shape(format!(
                "pair {i} has {} channels, the {} representation has {}",
                x.channels(),
                config.representation.name(),
                config.representation.channels()
            )));
        }
        if m.palette() != &palette {
            return Err(Error::precondition(format!("pair {i} uses a different palette")));
        }
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }

    let net = BodyMapNetwork::new(config, palette.clone(), person_id, resolution)?;
    let dev = Device::Cpu;
    let inputs = pairs.iter().map(|(x, _)| x.to_tensor(&dev, DType::F32)).collect::<Result<Vec<_>>>()?;
    let targets = pairs.iter().map(|(_, m)| m.to_onehot().to_tensor(&dev, DType::F32)).collect::<Result<Vec<_>>>()?;

    let adversarial = config.adversarial_weight > 0.0;
    let mut d_params = ParamStore::new(config.seed ^ 0xd15c, DType::F32);
    let disc = Discriminator::new(
        &mut d_params,
        "d.",
        config.representation.channels() + palette.len(),
        config.discriminator_width,
    )?;
    let mut g_opt = Adam::new(net.params.vars(), config.learning_rate, config.adam_beta1, config.adam_beta2)?;
    let mut d_opt = Adam::new(d_params.vars(), config.learning_rate, config.adam_beta1, config.adam_beta2)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut state = BodyMapTrainState {
        epochs_completed: 0,
        loss_history: Vec::new(),
        discriminator_history: Vec::new(),
        config: config.clone(),
        seed: config.seed,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = stack(&batch.iter().map(|i| &inputs[*i]).collect::<Vec<_>>())?;
            let y = stack(&batch.iter().map(|i| &targets[*i]).collect::<Vec<_>>())?;
            let (logits, _) = net.generator.forward(&x, None)?;
            let mut loss = cross_entropy(&logits, &y)?;
            if adversarial {
                let probs = softmax_channels(&logits)?;
                let real_in = Tensor::cat(&[&x, &y], 1)?;
                let fake_in = Tensor::cat(&[&x, &probs], 1)?;
                let real = disc.forward(&real_in)?;
                let fake_detached = disc.forward(&fake_in.detach())?;
                let d_loss = ((lsgan(real.last().expect("layers"), true)?
                    + lsgan(fake_detached.last().expect("layers"), false)?)?
                    * 0.5)?;
                state.discriminator_history.push(scalar(&d_loss)?);
                d_opt.step(&d_loss.backward()?)?;

                let fake = disc.forward(&fake_in)?;
                let adv = lsgan(fake.last().expect("layers"), true)?;
                let fm = feature_matching(&real, &fake)?;
                let gan = (adv + (fm * config.feature_matching_weight)?)?;
                loss = (loss + (gan * config.adversarial_weight)?)?;
            }
            state.loss_history.push(scalar(&loss)?);
            g_opt.step(&loss.backward()?)?;
        }
        state.epochs_completed = epoch + 1;
        log::debug!(
            "bodymap epoch {} loss {:.4}",
            epoch + 1,
            state.loss_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok((net, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::synthetic_labels as lbl;

    fn toy_pair() -> (FrameImage, SemanticMap) {
        let (h, w) = (16, 16);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| match (i / w, i % w) {
                (y, _) if y < 4 => lbl::HEAD,
                (_, x) if x < 5 => lbl::LEFT_UPPER_ARM,
                (_, x) if x > 10 => lbl::BACKGROUND,
                _ => lbl::TORSO,
            })
            .collect();
        let map = SemanticMap::new(h, w, labels, Palette::synthetic()).unwrap();
        let gi = FrameImage::from_fn(6, h, w, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0).unwrap();
        (gi, map)
    }

    fn tiny(epochs: usize) -> BodyMapConfig {
        BodyMapConfig {
            width: 8,
            residual_blocks: 1,
            epochs,
            batch_size: 1,
            learning_rate: 2e-3,
            ..BodyMapConfig::desk(&PipelineConfig::default())
        }
    }

    #[test]
    fn single_pair_overfits() {
        let pair = toy_pair();
        let (net, state) = train_bodymap(std::slice::from_ref(&pair), &tiny(200), "p0").unwrap();
        assert_eq!(state.loss_history.len(), 200);
        assert_eq!(pixel_accuracy(&net, std::slice::from_ref(&pair)).unwrap(), 1.0);
    }

    #[test]
    fn untrained_estimates_are_valid_and_deterministic() {
        let (gi, _) = toy_pair();
        let net = BodyMapNetwork::new(&tiny(1), Palette::synthetic(), "p0", (16, 16)).unwrap();
        let a = net.estimate(&gi).unwrap();
        assert_eq!(a, net.estimate(&gi).unwrap());
        assert!(a.labels().iter().all(|l| (*l as usize) < lbl::COUNT));
        assert!(matches!(net.estimate_for("p1", &gi, false), Err(Error::PersonMismatch { .. })));
        assert!(net.estimate_for("p1", &gi, true).is_ok());
        assert!(net.estimate(&FrameImage::zeros(6, 8, 16).unwrap()).is_err());
    }

    #[test]
    fn empty_or_mixed_datasets_are_rejected() {
        assert!(train_bodymap(&[], &tiny(1), "p").is_err());
        let a = toy_pair();
        let b = (FrameImage::zeros(6, 8, 8).unwrap(), SemanticMap::background(8, 8, Palette::synthetic()).unwrap());
        assert!(matches!(train_bodymap(&[a, b], &tiny(1), "p"), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_keeps_person_and_outputs() {
        let pair = toy_pair();
        let (net, _) = train_bodymap(std::slice::from_ref(&pair), &tiny(3), "alice").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bm.ckpt");
        net.save(&path, "h").unwrap();
        let back = BodyMapNetwork::load(&path, Some("h")).unwrap();
        assert_eq!(back.person_id(), "alice");
        assert_eq!(back.estimate(&pair.0).unwrap(), net.estimate(&pair.0).unwrap());
    }
}

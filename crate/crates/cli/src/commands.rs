use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use tryon_core::bodymap::{train_bodymap, BodyMapConfig, BodyMapNetwork};
use tryon_core::config::PipelineConfig;
use tryon_core::girep::{build_variant, JointGroupTable, RepresentationKind, VariantInputs};
use tryon_core::metrics::{self, MetricSet, RandomConv2d, RandomConv3d};
use tryon_core::perception::{Capabilities, DirectoryProvider, Perception, PerceptionProvider, SyntheticProvider};
use tryon_core::pgdataset::{generate_dataset, read_dataset, write_dataset, GenerationOptions, Providers};
use tryon_core::raster::{check_resolution, FrameImage, MaskImage};
use tryon_core::regarsyn::{train_regarsyn, ReGarSynConfig, ReGarSynNetwork, Variant};
use tryon_core::runtime::{bench_fps, SessionConfig, TryOnSession};
use tryon_core::semantic::{Palette, SemanticMap};
use tryon_core::synth::{generate_sequence, generate_sequence_with, GarmentStyle, SequenceOptions, SyntheticGarmentSpec};
use tryon_core::video::{self, SequenceInfo};

use crate::record::{content_hash, inputs_hash, record_path, unix_now, OutputEntry, RunRecord};
use crate::{
    BenchFpsArgs, Cli, Command, EvalArgs, GenDatasetArgs, InferArgs, Invalid, ServeArgs, SynthGenArgs,
    TrainBodymapArgs, TrainRegarsynArgs,
};

#[derive(Clone)]
pub(crate) struct Ctx {
    pub argv: Vec<String>,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub started: f64,
}

impl Ctx {
    /// Hashes inputs and outputs and writes the run record.
    pub fn finish(
        &self,
        subcommand: &str,
        args: &impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
        record_at: &Path,
    ) -> Result<RunRecord> {
        let outputs = outputs
            .iter()
            .map(|p| Ok(OutputEntry { path: p.to_path_buf(), sha256: content_hash(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let record = RunRecord {
            command: self.argv.clone(),
            subcommand: subcommand.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: self.seed,
            config: serde_json::json!({ "args": args, "pipeline": self.pipeline }),
            input_hash: inputs_hash(inputs)?,
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs,
        };
        record.write(record_at)?;
        Ok(record)
    }

    fn config_hash(&self) -> String {
        self.pipeline.hash()
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub(crate) fn need_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(invalid(format!("{what} `{}` is not a directory", p.display())));
    }
    Ok(())
}

pub(crate) fn need_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(invalid(format!("{what} `{}` is not a file", p.display())));
    }
    Ok(())
}

/// Output directories must be new or empty so stale files never mix in.
pub(crate) fn fresh_dir(p: &Path) -> Result<()> {
    if p.exists() && (!p.is_dir() || std::fs::read_dir(p)?.next().is_some()) {
        return Err(invalid(format!("output `{}` already exists and is not an empty directory", p.display())));
    }
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(())
}

pub(crate) fn parent_exists(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(invalid(format!("directory of `{}` does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

/// `WIDTHxHEIGHT` to `(height, width)`.
pub(crate) fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| invalid(format!("resolution `{s}` is not WIDTHxHEIGHT")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("resolution `{s}` is not WIDTHxHEIGHT")));
    let (h, w) = (parse(h)?, parse(w)?);
    check_resolution(h, w).map_err(|e| invalid(e.to_string()))?;
    Ok((h, w))
}

/// `<path>.<suffix>` next to `path`.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_pipeline(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            need_file(p, "config")?;
            PipelineConfig::load(p).map_err(|e| invalid(e.to_string()))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        argv: std::env::args().collect(),
        seed: cli.seed,
        pipeline: load_pipeline(cli.config.as_deref())?,
        started: unix_now(),
    };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a).map(|_| ()),
        Command::TrainBodymap(a) => train_bodymap_cmd(&ctx, a).map(|_| ()),
        Command::GenDataset(a) => gen_dataset(&ctx, a).map(|_| ()),
        Command::TrainRegarsyn(a) => train_regarsyn_cmd(&ctx, a).map(|_| ()),
        Command::Infer(a) => infer(&ctx, a).map(|_| ()),
        Command::Eval(a) => eval(&ctx, a).map(|_| ()),
        Command::BenchFps(a) => bench(&ctx, a).map(|_| ()),
        Command::AblationTable(a) => crate::ablation::run(&ctx, a).map(|_| ()),
        Command::Serve(a) => serve(&ctx, a),
    }
}

pub(crate) fn synth_gen(ctx: &Ctx, a: &SynthGenArgs) -> Result<RunRecord> {
    let (h, w) = match &a.resolution {
        Some(r) => parse_resolution(r)?,
        None => ctx.pipeline.desk_resolution,
    };
    let style: GarmentStyle = a.garment.parse().map_err(|e: tryon_core::Error| invalid(e.to_string()))?;
    if a.frames == 0 {
        return Err(invalid("--frames must be positive"));
    }
    if !(a.fps > 0.0) {
        return Err(invalid("--fps must be positive"));
    }
    let preset = SyntheticGarmentSpec::preset(style);
    let spec = SyntheticGarmentSpec::new(
        style,
        a.sway.unwrap_or(preset.sway_amplitude),
        a.stochasticity.unwrap_or(preset.sway_stochasticity),
        preset.texture_seed,
        preset.color,
    )?;
    fresh_dir(&a.out)?;

    let (options, motion) = if a.frozen {
        (SequenceOptions::frozen(0.0, 0.0), "frozen")
    } else {
        (SequenceOptions::default(), "rotating")
    };
    let records = generate_sequence_with(&spec, a.frames, (h, w), ctx.seed, &options)?;
    let provider = SyntheticProvider::new(Arc::new(records), spec.clone(), ctx.seed)?;
    let info = SequenceInfo {
        person_id: a.person.clone(),
        frame_count: a.frames,
        resolution: [h, w],
        fps: a.fps,
        seed: ctx.seed,
        garment: Some(spec),
        motion: motion.into(),
    };
    video::write_synthetic(&a.out, &provider, &info)?;
    log::info!("wrote {} frames to {}", a.frames, a.out.display());
    ctx.finish("synth-gen", a, &[], &[&a.out], &record_path(&a.out))
}

fn open_sequence(dir: &Path) -> Result<(SequenceInfo, Vec<FrameImage>)> {
    need_dir(dir, "sequence")?;
    let info = video::read_info(dir).map_err(|e| invalid(e.to_string()))?;
    let frames = video::read_frames(dir).map_err(|e| invalid(e.to_string()))?;
    if let Some(f) = frames.iter().find(|f| f.resolution() != info.resolution()) {
        return Err(invalid(format!("frames are {:?} but the sequence declares {:?}", f.resolution(), info.resolution())));
    }
    Ok((info, frames))
}

/// `(input, target)` pairs for the chosen representation, read from a
/// sequence directory with precomputed perception outputs.
pub(crate) fn bodymap_pairs(
    dir: &Path,
    frames: &[FrameImage],
    kind: RepresentationKind,
    target_gt: bool,
) -> Result<Vec<(FrameImage, SemanticMap)>> {
    let res = frames[0].resolution();
    let palette = Palette::synthetic();
    let provider = DirectoryProvider::open(dir, res, palette.clone())?;
    let (table, all) = (JointGroupTable::synthetic17(), JointGroupTable::synthetic17_all_joints());
    frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let index = i as u64;
            let p: Perception = provider.perceive(index, frame, Capabilities::ALL)?;
            let input = build_variant(
                kind,
                &VariantInputs {
                    direct_semantic: p.semantic.as_ref(),
                    heatmaps: p.heatmaps.as_ref(),
                    vm: p.vm.as_ref(),
                    table: Some(&table),
                    all_joints_table: Some(&all),
                },
            )?;
            let target = if target_gt {
                SemanticMap::load_png(dir.join(format!("{i:06}.gt.png")), palette.clone())?
            } else {
                p.require_semantic(index)?.clone()
            };
            Ok((input, target))
        })
        .collect()
}

pub(crate) fn train_bodymap_cmd(ctx: &Ctx, a: &TrainBodymapArgs) -> Result<RunRecord> {
    let kind: RepresentationKind = a.variant.parse().map_err(|e: tryon_core::Error| invalid(e.to_string()))?;
    let target_gt = match a.target.as_str() {
        "direct" => false,
        "gt" => true,
        other => return Err(invalid(format!("--target must be direct or gt, got `{other}`"))),
    };
    parent_exists(&a.out)?;
    let (info, frames) = open_sequence(&a.data)?;
    if info.person_id != a.person {
        return Err(invalid(format!("sequence shows `{}`, not `{}`", info.person_id, a.person)));
    }
    let mut cfg = BodyMapConfig { representation: kind, seed: ctx.seed, ..BodyMapConfig::desk(&ctx.pipeline) };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.width = a.width.unwrap_or(cfg.width);
    if cfg.epochs == 0 || cfg.width == 0 {
        return Err(invalid("--epochs and --width must be positive"));
    }

    let pairs = bodymap_pairs(&a.data, &frames, kind, target_gt)?;
    let (net, state) = train_bodymap(&pairs, &cfg, &a.person)?;
    net.save(&a.out, &ctx.config_hash())?;
    let train = sibling(&a.out, ".train.json");
    write_json(&train, &state)?;
    log::info!("trained {} BodyMap for `{}` -> {}", kind.name(), a.person, a.out.display());
    ctx.finish("train-bodymap", a, &[&a.data], &[&a.out, &train], &record_path(&a.out))
}

pub(crate) fn gen_dataset(ctx: &Ctx, a: &GenDatasetArgs) -> Result<RunRecord> {
    need_file(&a.bodymap, "BodyMap checkpoint")?;
    if a.garment.is_empty() {
        return Err(invalid("--garment must not be empty"));
    }
    let (info, frames) = open_sequence(&a.video)?;
    let bodymap = BodyMapNetwork::load(&a.bodymap, None)?;
    if bodymap.resolution() != info.resolution() {
        return Err(invalid(format!(
            "BodyMap works at {:?}, the sequence is {:?}",
            bodymap.resolution(),
            info.resolution()
        )));
    }
    if bodymap.person_id() != info.person_id {
        return Err(tryon_core::Error::PersonMismatch {
            expected: bodymap.person_id().into(),
            actual: info.person_id.clone(),
        }
        .into());
    }
    fresh_dir(&a.out)?;
    let provider = DirectoryProvider::open(&a.video, info.resolution(), bodymap.palette().clone())?;
    let options = GenerationOptions {
        fps: info.fps,
        config_hash: ctx.config_hash(),
        ..GenerationOptions::synthetic(&a.garment, &info.person_id)
    };
    let ds = generate_dataset(&frames, Providers::single(&provider), &bodymap, &options)?;
    let manifest = write_dataset(&ds, &a.out)?;
    log::info!("dataset `{}`: {} frames, {} gaps, manifest {manifest}", a.garment, ds.len(), ds.gaps.len());
    ctx.finish("gen-dataset", a, &[&a.video, &a.bodymap], &[&a.out], &record_path(&a.out))
}

pub(crate) fn regarsyn_config(ctx: &Ctx, a: &TrainRegarsynArgs) -> Result<ReGarSynConfig> {
    let mut cfg = ReGarSynConfig { seed: ctx.seed, ..ReGarSynConfig::desk(&ctx.pipeline) };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.residual_blocks = a.residual_blocks.unwrap_or(cfg.residual_blocks);
    cfg.clip_len_min = a.clip_min.unwrap_or(cfg.clip_len_min);
    cfg.clip_len_max = a.clip_max.unwrap_or(cfg.clip_len_max);
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn train_regarsyn_cmd(ctx: &Ctx, a: &TrainRegarsynArgs) -> Result<RunRecord> {
    need_dir(&a.dataset, "dataset")?;
    parent_exists(&a.out)?;
    let cfg = regarsyn_config(ctx, a)?;
    let ds = read_dataset(&a.dataset).map_err(|e| invalid(e.to_string()))?;
    let variant = if a.no_convlstm { Variant::PerFrame } else { Variant::Recurrent };
    let (net, state) = train_regarsyn(&ds, &cfg, variant)?;
    net.save(&a.out, &ctx.config_hash())?;
    let train = sibling(&a.out, ".train.json");
    write_json(&train, &state)?;
    log::info!(
        "trained {} network for `{}`: {} parameters ({} in the recurrent cell)",
        variant.name(),
        ds.garment_id,
        net.parameter_count(),
        net.lstm_parameter_count()
    );
    ctx.finish("train-regarsyn", a, &[&a.dataset], &[&a.out, &train], &record_path(&a.out))
}

#[derive(Serialize)]
struct TraceLine {
    t: u64,
    composited: bool,
    auto_reset: bool,
    cell_rms: f64,
    hidden_rms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
}

pub(crate) fn infer(ctx: &Ctx, a: &InferArgs) -> Result<RunRecord> {
    need_file(&a.ckpt, "checkpoint")?;
    need_dir(&a.frames, "frames")?;
    let frames = video::read_frames(&a.frames).map_err(|e| invalid(e.to_string()))?;
    let net = Arc::new(ReGarSynNetwork::load(&a.ckpt, None)?);
    let (h, w) = net.resolution();
    if frames[0].resolution() != (h, w) {
        return Err(invalid(format!("frames are {:?}, the network works at {:?}", frames[0].resolution(), (h, w))));
    }
    fresh_dir(&a.out)?;
    let provider = DirectoryProvider::open(&a.frames, (h, w), Palette::synthetic())?;
    let mut session = TryOnSession::new(net, SessionConfig::default())?;
    let mut trace = String::new();
    let mut passthrough = 0;
    for (i, frame) in frames.iter().enumerate() {
        let o = session.process_frame(frame, &provider)?;
        o.image.save_png(video::frame_path(&a.out, i))?;
        let mask = match &o.layer {
            Some(l) => l.mask.clone(),
            None => MaskImage::filled(h, w, 0.0)?,
        };
        mask.as_frame().save_png(a.out.join(format!("{i:06}.mask.png")))?;
        passthrough += usize::from(!o.composited);
        if a.emit_state_trace {
            let (cell_rms, hidden_rms) = session.state().rms()?;
            let line = TraceLine {
                t: o.t,
                composited: o.composited,
                auto_reset: o.auto_reset,
                cell_rms,
                hidden_rms,
                failure: o.failure.clone(),
            };
            trace.push_str(&serde_json::to_string(&line)?);
            trace.push('\n');
        }
    }
    if a.emit_state_trace {
        std::fs::write(a.out.join("state_trace.jsonl"), trace)?;
    }
    if passthrough > 0 {
        log::warn!("{passthrough} of {} frames passed through without a garment", frames.len());
    }
    ctx.finish("infer", a, &[&a.ckpt, &a.frames], &[&a.out], &record_path(&a.out))
}

pub(crate) fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<RunRecord> {
    need_dir(&a.pred, "pred")?;
    need_dir(&a.r#ref, "ref")?;
    parent_exists(&a.out)?;
    let set: MetricSet = a.metrics.parse().map_err(|e: tryon_core::Error| invalid(e.to_string()))?;
    if a.embedding_dim == 0 || a.clip_len < 5 {
        return Err(invalid("--embedding-dim must be positive and --clip-len at least 5"));
    }
    let pred = video::read_frames(&a.pred).map_err(|e| invalid(e.to_string()))?;
    let reference = video::read_frames(&a.r#ref).map_err(|e| invalid(e.to_string()))?;
    let need = a.embedding_dim + 1;
    if (set.fid || set.kid) && (pred.len() < need || reference.len() < need) {
        return Err(invalid(format!("fid/kid with {}-dim embeddings need at least {need} frames per side", a.embedding_dim)));
    }
    if set.vfid && (pred.len() / a.clip_len < need || reference.len() / a.clip_len < need) {
        return Err(invalid(format!(
            "vfid needs at least {need} clips of {} frames per side, i.e. {} frames",
            a.clip_len,
            need * a.clip_len
        )));
    }
    if set.jitter && pred.len() < 2 {
        return Err(invalid("jitter needs at least two predicted frames"));
    }
    let masks = video::read_masks(&a.pred, pred.len())?;
    let seed = metrics::DEFAULT_EXTRACTOR_SEED ^ ctx.seed;
    let images = RandomConv2d::new(a.embedding_dim, seed)?;
    let clips = RandomConv3d::new(a.embedding_dim, a.clip_len, seed ^ 0x3d)?;
    let report = metrics::evaluate(&pred, masks.as_deref(), &reference, set, &images, &clips)?;
    write_json(&a.out, &report)?;
    let mut outputs: Vec<PathBuf> = vec![a.out.clone()];
    if set.jitter {
        let full;
        let m = match masks.as_deref() {
            Some(m) => m,
            None => {
                let (h, w) = pred[0].resolution();
                full = vec![MaskImage::filled(h, w, 1.0)?; pred.len()];
                &full
            }
        };
        let j = metrics::jitter(&pred, m)?;
        let dir = sibling(&a.out, ".jitter");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        metrics::save_heatmaps(&dir, &j.heatmaps, metrics::HEATMAP_GAIN)?;
        outputs.push(dir);
    }
    log::info!(
        "fid {:?} kid {:?} vfid {:?} jitter {:?}",
        report.fid,
        report.kid,
        report.vfid,
        report.jitter
    );
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.finish("eval", a, &[&a.pred, &a.r#ref], &outs, &record_path(&a.out))
}

pub(crate) fn bench(ctx: &Ctx, a: &BenchFpsArgs) -> Result<RunRecord> {
    need_file(&a.ckpt, "checkpoint")?;
    parent_exists(&a.out)?;
    if a.frames < tryon_core::runtime::BENCH_MIN_FRAMES {
        return Err(invalid(format!("--frames must be at least {}", tryon_core::runtime::BENCH_MIN_FRAMES)));
    }
    let net = Arc::new(ReGarSynNetwork::load(&a.ckpt, None)?);
    let spec = SyntheticGarmentSpec::preset(GarmentStyle::LooseSkirt);
    let records = Arc::new(generate_sequence(&spec, a.frames.min(60), net.resolution(), ctx.seed)?);
    let frames: Vec<FrameImage> = records.iter().map(|r| r.raw.clone()).collect();
    let provider = SyntheticProvider::new(records, spec, ctx.seed)?.cyclic();
    let mut session = TryOnSession::new(net, SessionConfig::default())?;
    let report = bench_fps(&mut session, &frames, a.frames, &provider)?;
    write_json(&a.out, &report)?;
    log::info!(
        "{}: {:.2} fps, p50 {:.2} ms, p95 {:.2} ms, peak {:.1} MB",
        report.variant,
        report.mean_fps,
        report.p50_ms,
        report.p95_ms,
        report.peak_mb
    );
    ctx.finish("bench-fps", a, &[&a.ckpt], &[&a.out], &record_path(&a.out))
}

/// Push-mode perception when no precomputed outputs are configured: every
/// frame passes through unchanged.
struct NoPerception((usize, usize));

impl PerceptionProvider for NoPerception {
    fn capabilities(&self) -> Capabilities {
        Capabilities::NONE
    }

    fn resolution(&self) -> (usize, usize) {
        self.0
    }

    fn perceive(&self, index: u64, _frame: &FrameImage, _request: Capabilities) -> tryon_core::Result<Perception> {
        Err(tryon_core::Error::Provider { index, reason: "no perception outputs configured".into() })
    }
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    need_dir(&a.ckpt_dir, "checkpoint directory")?;
    if let Some(p) = &a.perception {
        need_dir(p, "perception directory")?;
    }
    if let Some(p) = &a.replay_root {
        need_dir(p, "replay root")?;
    }
    if a.session_cap == 0 {
        return Err(invalid("--session-cap must be positive"));
    }
    let port = tryon_service::resolve_port(a.port).map_err(|e| invalid(e.to_string()))?;
    let registry = tryon_service::GarmentRegistry::load_dir(&a.ckpt_dir)?;
    let res = registry.resolution();
    let provider: Arc<dyn PerceptionProvider> = match &a.perception {
        Some(dir) => Arc::new(DirectoryProvider::open(dir, res, Palette::synthetic())?),
        None => Arc::new(NoPerception(res)),
    };
    let config = tryon_service::ServiceConfig {
        session_cap: a.session_cap,
        replay_root: a.replay_root.clone(),
        ..Default::default()
    };
    let state = Arc::new(tryon_service::AppState::new(registry, provider, config));
    ctx.finish("serve", a, &[&a.ckpt_dir], &[], &a.record)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tryon_service::bind(port).await?;
        log::info!("serving on {}", listener.local_addr()?);
        tryon_service::serve(listener, state).await
    })?;
    Ok(())
}

//! Streaming inference: perception, hybrid assembly, one recurrent step and
//! compositing per frame, with constant per-session state.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{Capabilities, PerceptionProvider};
use crate::raster::FrameImage;
use crate::regarsyn::{GarmentLayer, HybridRep, ReGarSynNetwork, RecurrentState};

/// `frame · (1 − mask) + garment · mask`, per pixel and channel.
pub fn composite(frame: &FrameImage, layer: &GarmentLayer) -> Result<FrameImage> {
    let (h, w) = frame.resolution();
    if frame.channels() != 3 || layer.garment.resolution() != (h, w) || layer.mask.resolution() != (h, w) {
        return Err(Error::shape(format!(
            "cannot composite a {}x{h}x{w} frame with a {:?} garment and {:?} mask",
            frame.channels(),
            layer.garment.resolution(),
            layer.mask.resolution()
        )));
    }
    let n = h * w;
    let (f, g, m) = (frame.data(), layer.garment.data(), layer.mask.data());
    let out = (0..3 * n).map(|i| f[i] * (1.0 - m[i % n]) + g[i] * m[i % n]).collect();
    FrameImage::clamped(3, h, w, out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub perception: f64,
    pub synthesis: f64,
    pub composite: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.perception + self.synthesis + self.composite
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Consecutive perception failures after which the state is zeroed.
    pub auto_reset_after: usize,
    /// Number of recent frame timings kept.
    pub timing_window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { auto_reset_after: 15, timing_window: 240 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub t: u64,
    pub image: FrameImage,
    /// False when perception failed and the input was passed through.
    pub composited: bool,
    pub failure: Option<String>,
    /// Synthesized garment and mask, when perception succeeded.
    pub layer: Option<GarmentLayer>,
    /// Set when this frame triggered an automatic state reset.
    pub auto_reset: bool,
    /// Milliseconds per stage.
    pub times: StageTimes,
}

/// One live stream over a shared, immutable network.
pub struct TryOnSession {
    net: Arc<ReGarSynNetwork>,
    state: RecurrentState,
    t: u64,
    timings: VecDeque<StageTimes>,
    consecutive_failures: usize,
    resets: u64,
    config: SessionConfig,
}

impl TryOnSession {
    pub fn new(net: Arc<ReGarSynNetwork>, config: SessionConfig) -> Result<Self> {
        let state = net.zero_state()?;
        Ok(Self { net, state, t: 0, timings: VecDeque::new(), consecutive_failures: 0, resets: 0, config })
    }

    pub fn garment_id(&self) -> &str {
        self.net.garment_id()
    }

    pub fn network(&self) -> &Arc<ReGarSynNetwork> {
        &self.net
    }

    pub fn state(&self) -> &RecurrentState {
        &self.state
    }

    /// Frames processed so far; resets do not rewind it.
    pub fn frame_counter(&self) -> u64 {
        self.t
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    pub fn timings(&self) -> impl Iterator<Item = &StageTimes> {
        self.timings.iter()
    }

    /// Zeroes the recurrent state; the frame counter keeps running.
    pub fn reset_state(&mut self) -> Result<()> {
        self.state = self.net.zero_state()?;
        self.consecutive_failures = 0;
        self.resets += 1;
        log::info!("session {}: state reset at frame {}", self.garment_id(), self.t);
        Ok(())
    }

    /// Swaps in another garment's network and starts from the zero state.
    pub fn switch_network(&mut self, net: Arc<ReGarSynNetwork>) -> Result<()> {
        if net.resolution() != self.net.resolution() {
            return Err(Error::shape(format!(
                "network works at {:?}, session at {:?}",
                net.resolution(),
                self.net.resolution()
            )));
        }
        self.net = net;
        self.reset_state()
    }

    fn record(&mut self, times: StageTimes) {
        if self.config.timing_window == 0 {
            return;
        }
        if self.timings.len() == self.config.timing_window {
            self.timings.pop_front();
        }
        self.timings.push_back(times);
    }

    /// Runs one frame. Perception failures pass the frame through with a
    /// flag instead of failing; a wrong frame size is an error.
    pub fn process_frame(&mut self, frame: &FrameImage, provider: &dyn PerceptionProvider) -> Result<FrameOutcome> {
        self.process_frame_at(self.t, frame, provider)
    }

    /// Like [`process_frame`](Self::process_frame), but asks the provider
    /// for frame `index` of its source, e.g. the client's timestamp when
    /// some frames were dropped upstream.
    pub fn process_frame_at(
        &mut self,
        index: u64,
        frame: &FrameImage,
        provider: &dyn PerceptionProvider,
    ) -> Result<FrameOutcome> {
        if frame.resolution() != self.net.resolution() || frame.channels() != 3 {
            return Err(Error::shape(format!(
                "frame is {}x{:?}, session expects 3x{:?}",
                frame.channels(),
                frame.resolution(),
                self.net.resolution()
            )));
        }
        let t = index;
        self.t += 1;
        let start = Instant::now();
        let request = Capabilities { vm: true, semantic_direct: true, ..Capabilities::NONE };
        let hybrid = provider.perceive(t, frame, request).and_then(|p| {
            let vm = p.require_vm(t)?;
            let sem = p.require_semantic(t)?;
            HybridRep::new(vm, sem)
        });
        let perceived = Instant::now();
        let hybrid = match hybrid {
            Ok(h) => h,
            Err(e) => {
                self.consecutive_failures += 1;
                let auto_reset = self.consecutive_failures >= self.config.auto_reset_after;
                if auto_reset {
                    self.reset_state()?;
                }
                let times = StageTimes { perception: ms(perceived - start), ..Default::default() };
                self.record(times);
                return Ok(FrameOutcome {
                    t,
                    image: frame.clone(),
                    composited: false,
                    failure: Some(e.to_string()),
                    layer: None,
                    auto_reset,
                    times,
                });
            }
        };
        self.consecutive_failures = 0;
        let (layer, next) = self.net.step(&hybrid, &self.state)?;
        let synthesized = Instant::now();
        let image = composite(frame, &layer)?;
        let done = Instant::now();
        self.state = next;
        let times = StageTimes {
            perception: ms(perceived - start),
            synthesis: ms(synthesized - perceived),
            composite: ms(done - synthesized),
        };
        self.record(times);
        Ok(FrameOutcome { t, image, composited: true, failure: None, layer: Some(layer), auto_reset: false, times })
    }
}

/// Resident set size of this process in megabytes, if the platform
/// reports it.
pub fn resident_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub mean_fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Largest resident set size sampled after each frame; 0 where the
    /// platform does not report it.
    pub peak_mb: f64,
    /// Mean milliseconds per stage over the measured frames.
    pub stage_breakdown: StageTimes,
    pub frames: usize,
    pub warmup: usize,
    pub variant: String,
    pub resolution: (usize, usize),
}

pub const BENCH_WARMUP: usize = 10;
pub const BENCH_MIN_FRAMES: usize = 30;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Times `count` frames through the full pipeline, cycling over `frames`.
/// The first [`BENCH_WARMUP`] frames are excluded from every statistic.
pub fn bench_fps(
    session: &mut TryOnSession,
    frames: &[FrameImage],
    count: usize,
    provider: &dyn PerceptionProvider,
) -> Result<FpsReport> {
    if count < BENCH_MIN_FRAMES {
        return Err(Error::precondition(format!("benchmark needs at least {BENCH_MIN_FRAMES} frames, got {count}")));
    }
    if frames.is_empty() {
        return Err(Error::precondition("benchmark needs input frames"));
    }
    let mut latencies = Vec::with_capacity(count - BENCH_WARMUP);
    let mut stages = StageTimes::default();
    let mut peak: f64 = 0.0;
    let mut measured = Duration::ZERO;
    for i in 0..count {
        let start = Instant::now();
        let out = session.process_frame(&frames[i % frames.len()], provider)?;
        let took = start.elapsed();
        if i >= BENCH_WARMUP {
            measured += took;
            latencies.push(ms(took));
            stages.perception += out.times.perception;
            stages.synthesis += out.times.synthesis;
            stages.composite += out.times.composite;
            peak = peak.max(resident_mb().unwrap_or(0.0));
        }
    }
    let n = latencies.len() as f64;
    latencies.sort_by(f64::total_cmp);
    Ok(FpsReport {
        mean_fps: n / measured.as_secs_f64(),
        p50_ms: percentile(&latencies, 0.5),
        p95_ms: percentile(&latencies, 0.95),
        peak_mb: peak,
        stage_breakdown: StageTimes {
            perception: stages.perception / n,
            synthesis: stages.synthesis / n,
            composite: stages.composite / n,
        },
        frames: count,
        warmup: BENCH_WARMUP,
        variant: session.network().variant().name().to_owned(),
        resolution: session.network().resolution(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::perception::{FaultInjector, SyntheticProvider};
    use crate::raster::MaskImage;
    use crate::regarsyn::{ReGarSynConfig, Variant};
    use crate::synth::{generate_sequence, GarmentStyle, SyntheticFrameRecord, SyntheticGarmentSpec};

    fn net(variant: Variant) -> Arc<ReGarSynNetwork> {
        let cfg = ReGarSynConfig { width: 4, residual_blocks: 1, ..ReGarSynConfig::desk(&PipelineConfig::default()) };
        Arc::new(ReGarSynNetwork::new(&cfg, variant, "g", (32, 24)).unwrap())
    }

    fn world(n: usize) -> (Arc<Vec<SyntheticFrameRecord>>, SyntheticProvider) {
        let spec = SyntheticGarmentSpec::preset(GarmentStyle::Tight);
        let recs = Arc::new(generate_sequence(&spec, n, (32, 24), 5).unwrap());
        let p = SyntheticProvider::new(recs.clone(), spec, 5).unwrap();
        (recs, p)
    }

    #[test]
    fn composite_identities() {
        let f = FrameImage::from_fn(3, 8, 8, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 6.0).unwrap();
        let g = FrameImage::from_fn(3, 8, 8, |c, y, x| ((5 * c + y + x) % 5) as f32 / 4.0).unwrap();
        let with = |m: f32| composite(&f, &GarmentLayer { garment: g.clone(), mask: MaskImage::filled(8, 8, m).unwrap() }).unwrap();
        assert_eq!(with(0.0), f);
        assert_eq!(with(1.0), g);
        let half = with(0.5);
        for i in 0..f.data().len() {
            assert!((half.data()[i] - (f.data()[i] + g.data()[i]) / 2.0).abs() <= 1e-7);
        }
    }

    #[test]
    fn reset_matches_a_fresh_session_and_counter_keeps_going() {
        let (recs, p) = world(4);
        let n = net(Variant::Recurrent);
        let mut s = TryOnSession::new(n.clone(), SessionConfig::default()).unwrap();
        for r in &recs[..3] {
            s.process_frame(&r.raw, &p).unwrap();
        }
        s.reset_state().unwrap();
        s.reset_state().unwrap();
        assert!(s.state().is_zero().unwrap());
        let mut fresh = TryOnSession::new(n, SessionConfig::default()).unwrap();
        // Same perception index so the provider's noise matches.
        for r in &recs[..3] {
            fresh.process_frame(&r.raw, &p).unwrap();
        }
        fresh.reset_state().unwrap();
        let a = s.process_frame(&recs[3].raw, &p).unwrap();
        let b = fresh.process_frame(&recs[3].raw, &p).unwrap();
        assert_eq!(a.t, 3);
        assert!(a.image.max_abs_diff(&b.image).unwrap() <= 1e-6);
    }

    #[test]
    fn failures_pass_through_and_auto_reset() {
        let (recs, p) = world(1);
        let faulty = FaultInjector::new(p.clone().cyclic(), 1..=20);
        let mut s = TryOnSession::new(net(Variant::Recurrent), SessionConfig { auto_reset_after: 15, timing_window: 8 }).unwrap();
        let first = s.process_frame(&recs[0].raw, &faulty).unwrap();
        assert!(first.composited && !s.state().is_zero().unwrap());
        let mut resets = vec![];
        for _ in 1..=20 {
            let o = s.process_frame(&recs[0].raw, &faulty).unwrap();
            assert!(!o.composited && o.failure.is_some());
            assert_eq!(o.image, recs[0].raw);
            if o.auto_reset {
                resets.push(o.t);
            }
        }
        assert_eq!(resets, vec![15]);
        assert_eq!(s.timings().count(), 8);
        assert!(s.process_frame(&FrameImage::zeros(3, 16, 24).unwrap(), &faulty).is_err());
    }

    #[test]
    fn concurrent_sessions_do_not_interfere() {
        let (recs, p) = world(6);
        let n = net(Variant::Recurrent);
        let solo: Vec<_> = {
            let mut s = TryOnSession::new(n.clone(), SessionConfig::default()).unwrap();
            recs.iter().map(|r| s.process_frame(&r.raw, &p).unwrap().image).collect()
        };
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let (n, recs, p) = (n.clone(), recs.clone(), p.clone());
                std::thread::spawn(move || {
                    let mut s = TryOnSession::new(n, SessionConfig::default()).unwrap();
                    recs.iter().map(|r| s.process_frame(&r.raw, &p).unwrap().image).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), solo);
        }
    }

    #[test]
    fn bench_reports_and_rejects_short_runs() {
        let (recs, p) = world(3);
        let frames: Vec<_> = recs.iter().map(|r| r.raw.clone()).collect();
        let mut s = TryOnSession::new(net(Variant::PerFrame), SessionConfig::default()).unwrap();
        let p = p.cyclic();
        assert!(bench_fps(&mut s, &frames, 29, &p).is_err());
        let r = bench_fps(&mut s, &frames, 30, &p).unwrap();
        assert!(r.mean_fps > 0.0 && r.p50_ms <= r.p95_ms);
        assert_eq!(r.variant, "per_frame");
        let json = serde_json::to_value(&r).unwrap();
        for k in ["mean_fps", "p50_ms", "p95_ms", "peak_mb", "stage_breakdown"] {
            assert!(json.get(k).is_some());
        }
    }
}

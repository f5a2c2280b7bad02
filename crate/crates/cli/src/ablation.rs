//! End-to-end ablations on synthetic sequences: semantic-map accuracy per
//! body representation, and output quality with and without recurrence.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use tryon_core::bodymap::{pixel_accuracy, BodyMapNetwork};
use tryon_core::girep::RepresentationKind;
use tryon_core::metrics::{MetricReport, DEFAULT_CLIP_LEN};
use tryon_core::video;

use crate::commands::{
    bodymap_pairs, eval, fresh_dir, gen_dataset, infer, parse_resolution, synth_gen, train_bodymap_cmd,
    train_regarsyn_cmd, Ctx,
};
use crate::record::record_path;
use crate::{
    AblationArgs, EvalArgs, GenDatasetArgs, InferArgs, SynthGenArgs, TrainBodymapArgs, TrainRegarsynArgs,
};

const PERSON: &str = "synthetic";
const GARMENT: &str = "loose-skirt";

fn sequence(out: PathBuf, frames: usize, garment: &str, a: &AblationArgs) -> SynthGenArgs {
    SynthGenArgs {
        out,
        frames,
        garment: garment.into(),
        sway: None,
        stochasticity: None,
        resolution: Some(a.resolution.clone()),
        frozen: false,
        person: PERSON.into(),
        fps: 30.0,
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub(crate) fn run(ctx: &Ctx, a: &AblationArgs) -> Result<()> {
    parse_resolution(&a.resolution)?;
    if a.frames < a.embedding_dim + 1 {
        return Err(crate::commands::invalid(format!("--frames must be at least {}", a.embedding_dim + 1)));
    }
    if a.bodymap_epochs == 0 || a.regarsyn_epochs == 0 || a.width == 0 || a.embedding_dim == 0 {
        return Err(crate::commands::invalid("epochs, width and embedding dim must be positive"));
    }
    fresh_dir(&a.workdir)?;
    let dir = |name: &str| a.workdir.join(name);

    // Separate seeds keep the held-out sequence's sway independent of training.
    let seeded = |offset: u64| Ctx { seed: ctx.seed.wrapping_add(offset), ..ctx.clone() };
    synth_gen(ctx, &sequence(dir("tight"), a.frames, "tight", a))?;
    synth_gen(&seeded(1), &sequence(dir("loose_train"), a.frames, GARMENT, a))?;
    synth_gen(&seeded(2), &sequence(dir("loose_test"), a.frames, GARMENT, a))?;

    let test_frames = video::read_frames(&dir("loose_test"))?;
    let mut accuracy = Vec::new();
    for kind in RepresentationKind::ALL {
        let ckpt = dir(&format!("bodymap_{}.ckpt", kind.name().to_lowercase()));
        train_bodymap_cmd(
            ctx,
            &TrainBodymapArgs {
                data: dir("tight"),
                person: PERSON.into(),
                out: ckpt.clone(),
                variant: kind.name().to_lowercase(),
                epochs: Some(a.bodymap_epochs),
                width: Some(a.width),
                target: "direct".into(),
            },
        )?;
        let net = BodyMapNetwork::load(&ckpt, None)?;
        let pairs = bodymap_pairs(&dir("loose_test"), &test_frames, kind, true)?;
        accuracy.push((kind, pixel_accuracy(&net, &pairs)?));
    }

    gen_dataset(
        ctx,
        &GenDatasetArgs {
            video: dir("loose_train"),
            bodymap: dir("bodymap_gi.ckpt"),
            garment: GARMENT.into(),
            out: dir("dataset"),
        },
    )?;

    let vfid = a.frames / DEFAULT_CLIP_LEN > a.embedding_dim;
    let metrics = if vfid { "fid,kid,vfid,jitter" } else { "fid,kid,jitter" };
    let mut rows = Vec::new();
    for (label, name, no_convlstm) in [("Ours", "recurrent", false), ("Ours w/o ConvLSTM", "per_frame", true)] {
        let ckpt = dir(&format!("regarsyn_{name}.ckpt"));
        train_regarsyn_cmd(
            ctx,
            &TrainRegarsynArgs {
                dataset: dir("dataset"),
                out: ckpt.clone(),
                no_convlstm,
                epochs: Some(a.regarsyn_epochs),
                width: Some(a.width),
                residual_blocks: None,
                clip_min: None,
                clip_max: None,
            },
        )?;
        let pred = dir(&format!("infer_{name}"));
        infer(ctx, &InferArgs { ckpt, frames: dir("loose_test"), out: pred.clone(), emit_state_trace: false })?;
        let report_path = dir(&format!("eval_{name}.json"));
        eval(
            ctx,
            &EvalArgs {
                pred,
                r#ref: dir("loose_test"),
                out: report_path.clone(),
                metrics: metrics.into(),
                embedding_dim: a.embedding_dim,
                clip_len: DEFAULT_CLIP_LEN,
            },
        )?;
        let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        rows.push((label, report));
    }

    let table = render(a, &accuracy, &rows, vfid);
    let out = dir("ablation.md");
    std::fs::write(&out, table)?;
    log::info!("wrote {}", out.display());
    let (rec, pf) = (dir("eval_recurrent.json"), dir("eval_per_frame.json"));
    ctx.finish("ablation-table", a, &[], &[&out, &rec, &pf], &record_path(&out))?;
    Ok(())
}

fn render(
    a: &AblationArgs,
    accuracy: &[(RepresentationKind, f64)],
    rows: &[(&str, MetricReport)],
    vfid: bool,
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Ablations\n\nSynthetic `{GARMENT}` sequences of {} frames at {}, BodyMap {} epochs, \
         ReGarSyn {} epochs, width {}, {}-dim embeddings.\n",
        a.frames, a.resolution, a.bodymap_epochs, a.regarsyn_epochs, a.width, a.embedding_dim
    );
    let _ = writeln!(s, "## Garment synthesis\n\n| Method | KID | FID | VFID | Jitter |\n|---|---|---|---|---|");
    for (label, r) in rows {
        let _ = writeln!(s, "| {label} | {} | {} | {} | {} |", fmt(r.kid), fmt(r.fid), fmt(r.vfid), fmt(r.jitter));
    }
    if !vfid {
        let _ = writeln!(
            s,
            "\nVFID needs more than {} clips of {DEFAULT_CLIP_LEN} frames per side and was skipped.",
            a.embedding_dim
        );
    }
    let _ = writeln!(
        s,
        "\n## Semantic-map accuracy on loose-garment frames\n\n| Representation | Pixel accuracy |\n|---|---|"
    );
    for (kind, acc) in accuracy {
        let _ = writeln!(s, "| {} | {acc:.4} |", kind.name());
    }
    s
}

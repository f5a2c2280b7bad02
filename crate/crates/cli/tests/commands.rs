mod common;

use common::{code, json, ok, s, tryon};
use tryon_core::regarsyn::ReGarSynNetwork;

#[test]
fn invalid_arguments_exit_with_two_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq");
    assert_eq!(code(&["synth-gen", "--out", s(&out), "--garment", "cape"]), 2);
    assert_eq!(code(&["synth-gen", "--out", s(&out), "--resolution", "30x40"]), 2);
    assert_eq!(code(&["synth-gen", "--out", s(&out), "--garment", "tight", "--sway", "2"]), 2);
    assert_eq!(code(&["synth-gen", "--out", s(&out), "--garment", "jacket", "--stochasticity", "1.5"]), 2);
    assert!(!out.exists());
    assert_eq!(code(&["train-bodymap", "--data", s(&dir.path().join("nope")), "--person", "p", "--out", "x.ckpt"]), 2);
    assert_eq!(code(&["eval", "--pred", s(dir.path()), "--ref", s(dir.path()), "--out", "r.json", "--metrics", "fid,psnr"]), 2);
    assert_eq!(code(&["bench-fps", "--ckpt", "missing.ckpt", "--out", "b.json"]), 2);
    assert_eq!(code(&["serve", "--ckpt-dir", s(&dir.path().join("nope"))]), 2);
    // clap's own usage errors share the code.
    assert_eq!(code(&["synth-gen"]), 2);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "synth-gen", "--out", s(&out)]), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth-gen", "--out", s(&seq), "--frames", "4", "--resolution", "32x48"]);
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(code(&["infer", "--ckpt", s(&bogus), "--frames", s(&seq), "--out", s(&dir.path().join("o"))]), 1);
}

#[test]
fn refuses_to_overwrite_outputs_and_checks_the_person() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth-gen", "--out", s(&seq), "--frames", "4", "--resolution", "32x48", "--person", "ana"]);
    assert_eq!(code(&["synth-gen", "--out", s(&seq), "--frames", "4", "--resolution", "32x48"]), 2);
    let ckpt = dir.path().join("bm.ckpt");
    assert_eq!(code(&["train-bodymap", "--data", s(&seq), "--person", "ben", "--out", s(&ckpt)]), 2);
    assert!(!ckpt.exists());
}

#[test]
fn help_lists_the_configuration_keys() {
    let out = tryon(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["desk_resolution", "clip_len_min", "clip_len_max", "learning_rate", "residual_blocks"] {
        assert!(text.contains(key), "--help lacks `{key}`");
    }
}

#[test]
fn self_evaluation_through_the_cli_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    // 9 clips of 16 frames: enough for 8-dim clip embeddings.
    ok(&["synth-gen", "--out", s(&seq), "--frames", "144", "--resolution", "32x48", "--garment", "loose-skirt"]);
    let report = dir.path().join("report.json");
    ok(&[
        "eval",
        "--pred",
        s(&seq),
        "--ref",
        s(&seq),
        "--out",
        s(&report),
        "--metrics",
        "fid,kid,vfid",
        "--embedding-dim",
        "8",
    ]);
    let r = json(&report);
    assert!(r["fid"].as_f64().unwrap().abs() <= 1e-6, "fid {}", r["fid"]);
    assert!(r["vfid"].as_f64().unwrap().abs() <= 1e-6, "vfid {}", r["vfid"]);
    assert_eq!(r["samples"]["pred_frames"], 144);
    assert!(dir.path().join("report.json.run.json").is_file());

    // Too few clips for the embedding size is a validation error.
    assert_eq!(
        code(&["eval", "--pred", s(&seq), "--ref", s(&seq), "--out", s(&report), "--metrics", "vfid"]),
        2
    );
}

#[test]
fn per_frame_checkpoint_lacks_exactly_the_recurrent_cell() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["synth-gen", "--out", s(&p("tight")), "--frames", "12", "--resolution", "32x48"]);
    ok(&["synth-gen", "--out", s(&p("loose")), "--frames", "12", "--resolution", "32x48", "--garment", "jacket"]);
    ok(&[
        "train-bodymap", "--data", s(&p("tight")), "--person", "synthetic", "--out", s(&p("bm.ckpt")),
        "--epochs", "1", "--width", "8",
    ]);
    ok(&["gen-dataset", "--video", s(&p("loose")), "--bodymap", s(&p("bm.ckpt")), "--garment", "j", "--out", s(&p("ds"))]);
    let ds = p("ds");
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "train-regarsyn", "--dataset", s(&ds), "--epochs", "1", "--width", "8", "--clip-min", "2",
            "--clip-max", "4",
        ];
        let out = p(out);
        args.extend(["--out", s(&out)]);
        args.extend(extra);
        ok(&args);
        ReGarSynNetwork::load(&out, None).unwrap()
    };
    let rec = train("rec.ckpt", &[]);
    let pf = train("pf.ckpt", &["--no-convlstm"]);
    // Gates for input, forget, cell and output over [input; hidden] with
    // 3x3 kernels, plus one bias per gate channel.
    let (c, _, _) = rec.state_shape();
    let cell = 4 * c * (2 * c) * 9 + 4 * c;
    assert_eq!(rec.parameter_count() - pf.parameter_count(), cell);
    assert!(p("rec.ckpt.train.json").is_file() && p("rec.ckpt.run.json").is_file());
}

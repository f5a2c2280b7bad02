//! Acceptance for the command-line pipeline: stage determinism and the FPS
//! harness. Both run inside one test so the timings see an idle machine.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{ok, output_hashes, s};

const FRAMES: &str = "24";
const RES: &str = "32x48";

/// Runs every stage except `serve` into `root`; returns the stage names and
/// their run records. `bench-fps` runs too but its timings are excluded.
fn pipeline(root: &Path, seed: &str) -> Vec<(&'static str, std::path::PathBuf)> {
    let p = |n: &str| root.join(n);
    let with_seed = |args: &[&str]| {
        let mut v = vec!["--seed", seed];
        v.extend_from_slice(args);
        ok(&v);
    };
    with_seed(&["synth-gen", "--out", s(&p("tight")), "--frames", FRAMES, "--resolution", RES]);
    with_seed(&["synth-gen", "--out", s(&p("loose")), "--frames", FRAMES, "--resolution", RES, "--garment", "loose-skirt"]);
    let tight_before = common::json(&p("tight/run.json"))["outputs"][0]["sha256"].clone();
    with_seed(&[
        "train-bodymap", "--data", s(&p("tight")), "--person", "synthetic", "--out", s(&p("bm.ckpt")),
        "--epochs", "1", "--width", "8",
    ]);
    with_seed(&["gen-dataset", "--video", s(&p("loose")), "--bodymap", s(&p("bm.ckpt")), "--garment", "skirt", "--out", s(&p("ds"))]);
    with_seed(&[
        "train-regarsyn", "--dataset", s(&p("ds")), "--out", s(&p("rg.ckpt")), "--epochs", "1", "--width", "8",
        "--clip-min", "2", "--clip-max", "6",
    ]);
    with_seed(&["infer", "--ckpt", s(&p("rg.ckpt")), "--frames", s(&p("loose")), "--out", s(&p("pred")), "--emit-state-trace"]);
    with_seed(&[
        "eval", "--pred", s(&p("pred")), "--ref", s(&p("loose")), "--out", s(&p("eval.json")), "--metrics",
        "fid,kid,jitter", "--embedding-dim", "8",
    ]);
    with_seed(&["bench-fps", "--ckpt", s(&p("rg.ckpt")), "--frames", "30", "--out", s(&p("fps.json"))]);
    // Inputs are untouched by the stages that read them.
    let tight_after = tryon_hash(&p("tight"));
    assert_eq!(tight_before.as_str().unwrap(), tight_after, "train-bodymap modified its input");
    vec![
        ("synth-gen tight", p("tight/run.json")),
        ("synth-gen loose", p("loose/run.json")),
        ("train-bodymap", p("bm.ckpt.run.json")),
        ("gen-dataset", p("ds/run.json")),
        ("train-regarsyn", p("rg.ckpt.run.json")),
        ("infer", p("pred/run.json")),
        ("eval", p("eval.json.run.json")),
    ]
}

/// Directory content hash recomputed the same way the CLI records it.
fn tryon_hash(dir: &Path) -> String {
    use sha2::{Digest, Sha256};
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if path.is_dir() {
                stack.push(path);
            } else if name != "run.json" && !name.ends_with(".run.json") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn stage_hashes(record: &Path, root: &Path) -> Vec<(String, String)> {
    output_hashes(record)
        .into_iter()
        .map(|(path, hash)| (Path::new(&path).strip_prefix(root).unwrap().display().to_string(), hash))
        .collect()
}

fn determinism(tmp: &Path) -> bool {
    let start = Instant::now();
    let (a, b, c) = (tmp.join("a"), tmp.join("b"), tmp.join("c"));
    for d in [&a, &b, &c] {
        std::fs::create_dir(d).unwrap();
    }
    let runs_a = pipeline(&a, "7");
    let runs_b = pipeline(&b, "7");
    let runs_c = pipeline(&c, "8");

    let mut identical = 0;
    let mut differing_seed = 0;
    for ((stage, ra), ((_, rb), (_, rc))) in runs_a.iter().zip(runs_b.iter().zip(&runs_c)) {
        let (ha, hb, hc) = (stage_hashes(ra, &a), stage_hashes(rb, &b), stage_hashes(rc, &c));
        assert_eq!(ha, hb, "{stage} is not reproducible");
        // Recompute the recorded hashes independently.
        for (rel, hash) in &ha {
            let path = a.join(rel);
            if path.is_dir() {
                assert_eq!(&tryon_hash(&path), hash, "{stage}: recorded hash of {rel} is stale");
            }
        }
        identical += 1;
        differing_seed += usize::from(ha != hc);
    }
    // The bench report exists and is the only excluded output.
    assert!(a.join("fps.json").is_file() && a.join("fps.json.run.json").is_file());
    let pass = identical == runs_a.len() && differing_seed > 0;
    println!(
        "[{}] determinism: {identical}/{} stages reproduce identical content hashes under seed 7 \
         ({differing_seed} change under seed 8); {:.0} s",
        if pass { "PASS" } else { "FAIL" },
        runs_a.len(),
        start.elapsed().as_secs_f64()
    );
    pass
}

/// Benchmarks the recurrent checkpoint from the determinism run against a
/// per-frame one trained the same way.
fn fps(root: &Path) -> bool {
    let p = |n: &str| root.join(n);
    ok(&[
        "--seed", "7", "train-regarsyn", "--dataset", s(&p("ds")), "--out", s(&p("pf.ckpt")), "--no-convlstm",
        "--epochs", "1", "--width", "8", "--clip-min", "2", "--clip-max", "6",
    ]);
    let mut fps = Vec::new();
    for name in ["rg", "pf"] {
        let out = p(&format!("fps_{name}.json"));
        ok(&["bench-fps", "--ckpt", s(&p(&format!("{name}.ckpt"))), "--frames", "300", "--out", s(&out)]);
        let r = common::json(&out);
        for key in ["mean_fps", "p50_ms", "p95_ms", "peak_mb", "stage_breakdown", "frames", "warmup", "variant"] {
            assert!(!r[key].is_null(), "fps report lacks {key}");
        }
        fps.push((r["mean_fps"].as_f64().unwrap(), r["stage_breakdown"]["synthesis"].as_f64().unwrap()));
    }
    let ((rec, rec_syn), (pf, pf_syn)) = (fps[0], fps[1]);
    let overhead = (1.0 - rec / pf) * 100.0;
    let pass = rec < pf;
    println!(
        "[{}] fps harness: recurrent {rec:.1} fps vs per_frame {pf:.1} fps, overhead {overhead:.1}% \
         (synthesis {rec_syn:.2} vs {pf_syn:.2} ms/frame; reference point 12.15 -> 10.50 fps, 13.6%)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let deterministic = determinism(tmp.path());
    let fps_ok = fps(&tmp.path().join("a"));
    assert!(deterministic && fps_ok);
}

//! Full pipeline at the configured desk resolution on 300-frame sequences.
//! Takes several minutes on one core; run with `cargo test -p tryon-cli
//! --test smoke -- --ignored --nocapture`.

mod common;

use std::time::Instant;

use common::{ok, s};

/// Wall-clock budget frozen from the first measured run.
const BUDGET_S: f64 = 30.0 * 60.0;

#[test]
#[ignore = "several minutes of CPU training"]
fn desk_pipeline_completes_within_budget() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["synth-gen", "--out", s(&p("tight")), "--frames", "300"]);
    ok(&["synth-gen", "--out", s(&p("loose")), "--frames", "300", "--garment", "loose-skirt", "--seed", "1"]);
    ok(&["train-bodymap", "--data", s(&p("tight")), "--person", "synthetic", "--out", s(&p("bm.ckpt")), "--epochs", "2"]);
    ok(&["gen-dataset", "--video", s(&p("loose")), "--bodymap", s(&p("bm.ckpt")), "--garment", "skirt", "--out", s(&p("ds"))]);
    ok(&["train-regarsyn", "--dataset", s(&p("ds")), "--out", s(&p("rg.ckpt")), "--epochs", "2"]);
    ok(&["infer", "--ckpt", s(&p("rg.ckpt")), "--frames", s(&p("loose")), "--out", s(&p("pred"))]);
    ok(&["eval", "--pred", s(&p("pred")), "--ref", s(&p("loose")), "--out", s(&p("eval.json")), "--embedding-dim", "16"]);
    for record in ["tight/run.json", "loose/run.json", "bm.ckpt.run.json", "ds/run.json", "rg.ckpt.run.json", "pred/run.json", "eval.json.run.json"] {
        assert!(p(record).is_file(), "missing {record}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("desk pipeline: {elapsed:.0} s (budget {BUDGET_S:.0} s)");
    assert!(elapsed < BUDGET_S);
}

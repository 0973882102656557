use std::path::Path;
use std::process::{Command, Output};

fn promptseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROMPTSEG_SEED")
        .env_remove("PROMPTSEG_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_eval_report_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&promptseg(d, &["synth", "--patients", "4", "--frames", "3", "--size", "48", "--seed", "7", "--out", "data"]));
    assert!(d.join("data/patient_000/images/frame_0000.png").is_file());
    assert!(d.join("data/manifest.json").is_file());

    ok(&promptseg(d, &["train", "--config", "tiny", "--data", "data", "--out", "run1"]));
    assert!(d.join("run1/best.ckpt").is_file());
    assert!(d.join("run1/split.txt").is_file());

    ok(&promptseg(d, &["eval", "--checkpoint", "run1/best", "--mode", "automatic", "--out", "ev"]));
    let csv = std::fs::read_to_string(d.join("ev/metrics_automatic.csv")).unwrap();
    assert!(csv.starts_with("frame_id,dsc,nsd"));
    let provenance = std::fs::read_to_string(d.join("ev/provenance_automatic.json")).unwrap();
    assert!(!provenance.contains("ground_truth"));

    ok(&promptseg(d, &["eval", "--checkpoint", "run1", "--mode", "manual", "--out", "evm"]));
    let out = promptseg(d, &["report", "--metrics", "a=ev/metrics_automatic.csv", "--metrics", "m=evm/metrics_manual.csv", "--reference", "a", "--out", "rep"]);
    ok(&out);
    let table = std::fs::read_to_string(d.join("rep/table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "Method,DSC,NSD,p (DSC),p (NSD)");
    assert_eq!(table.lines().count(), 3);

    ok(&promptseg(d, &["infer", "--checkpoint", "run1/best.ckpt", "--images", "data/patient_001/images", "--out", "inf"]));
    assert_eq!(std::fs::read_dir(d.join("inf/masks")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(d.join("inf/overlays")).unwrap().count(), 3);
}

#[test]
fn eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&promptseg(d, &["synth", "--patients", "3", "--frames", "2", "--size", "40", "--out", "data"]));
    for run in ["r1", "r2"] {
        ok(&promptseg(d, &["train", "--config", "tiny", "--data", "data", "--counts", "1,1,1", "--out", run]));
        ok(&promptseg(d, &["eval", "--checkpoint", run, "--out", &format!("{run}/ev")]));
    }
    assert_eq!(
        std::fs::read(d.join("r1/ev/metrics_automatic.csv")).unwrap(),
        std::fs::read(d.join("r2/ev/metrics_automatic.csv")).unwrap()
    );
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r1/manifest.json")).unwrap()).unwrap();
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn manual_eval_without_masks_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&promptseg(d, &["synth", "--patients", "3", "--frames", "2", "--size", "40", "--out", "data"]));
    ok(&promptseg(d, &["train", "--config", "tiny", "--data", "data", "--counts", "1,1,1", "--out", "run"]));
    let split = std::fs::read_to_string(d.join("run/split.txt")).unwrap();
    let test_patient = split.lines().find_map(|l| l.strip_prefix("test:")).unwrap().trim().to_string();
    let src = d.join(format!("data/patient_{test_patient}/images"));
    let dst = d.join(format!("bare/patient_{test_patient}/images"));
    std::fs::create_dir_all(&dst).unwrap();
    for e in std::fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
    let out = promptseg(d, &["eval", "--checkpoint", "run", "--mode", "manual", "--data", "bare", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manual mode requires ground truth"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(promptseg(tmp.path(), &["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(promptseg(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(promptseg(tmp.path(), &[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_and_env_sets_out() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = promptseg(d, &["eval", "--checkpoint", "missing", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = promptseg(d, &["ablate", "--data", "nowhere", "--grid", "width"]);
    assert_eq!(out.status.code(), Some(1));

    let status = Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(["synth", "--patients", "1", "--frames", "1", "--size", "32"])
        .current_dir(d)
        .env("PROMPTSEG_OUT", "from_env")
        .env("PROMPTSEG_SEED", "3")
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("from_env/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn ablate_writes_one_csv_per_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&promptseg(d, &["synth", "--patients", "3", "--frames", "2", "--size", "32", "--out", "data"]));
    let out = promptseg(
        d,
        &["ablate", "--config", "tiny", "--data", "data", "--counts", "1,1,1", "--grid", "rank=1,2", "--grid", "refinement=none,box+centroid", "--out", "abl"],
    );
    ok(&out);
    let rank = std::fs::read_to_string(d.join("abl/ablation_rank.csv")).unwrap();
    assert!(rank.starts_with("LoRA Rank,Params.#,DSC,NSD\n"));
    assert_eq!(rank.lines().count(), 3);
    let refine = std::fs::read_to_string(d.join("abl/ablation_refinement.csv")).unwrap();
    assert_eq!(refine.lines().count(), 3);
    assert!(d.join("abl/ablation_summary.md").is_file());
}

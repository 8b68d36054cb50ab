use std::path::{Path, PathBuf};
use std::process::Command;

use ctmoco::formats::write_motion;
use ctmoco::manifest::RunManifest;
use ctmoco::report::EvalRecord;
use ctmoco_core::motion::MotionSpline;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctmoco"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> Option<i32> {
    bin().args(args).output().unwrap().status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

#[test]
fn zero_amplitude_perturbation_equals_zero_motion_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "zero.json",
        r#"{"perturbation": {"nodes": 10, "amplitude_mm": 0.0, "amplitude_deg": 0.0}}"#,
    );
    let out = dir.path().join("p");
    run_ok(&["perturb", "--config", s(&cfg), "--seed", "17", "--out-dir", s(&out)]);
    let zero = dir.path().join("zero_motion.json");
    write_motion(&MotionSpline::zeros(10, 360).unwrap(), &zero).unwrap();
    assert_eq!(
        std::fs::read(out.join("motion.json")).unwrap(),
        std::fs::read(&zero).unwrap()
    );
}

#[test]
fn compensate_echoes_default_schedule_into_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Only the optimizer's echo matters here; two iterations keep it quick.
    run_ok(&["phantom", "--out-dir", s(&d.join("ph"))]);
    run_ok(&["project", "--image", s(&d.join("ph/phantom.f32raw")), "--out-dir", s(&d.join("pr"))]);
    run_ok(&[
        "fbp",
        "--sinogram",
        s(&d.join("pr/sinogram.f32raw")),
        "--out-dir",
        s(&d.join("fb")),
    ]);
    run_ok(&[
        "compensate",
        "--objective",
        "mse-oracle",
        "--sinogram",
        s(&d.join("pr/sinogram.f32raw")),
        "--reference",
        s(&d.join("fb/recon.f32raw")),
        "--out-dir",
        s(&d.join("co")),
    ]);
    let m = RunManifest::read(&d.join("co/manifest.json")).unwrap();
    assert_eq!(m.command, "compensate");
    assert_eq!(m.config.optimizer.iterations, 40);
    assert_eq!(m.config.optimizer.r0, 100.0);
    assert_eq!(m.config.optimizer.q, 0.97);
    let opt = &m.parameters["optimizer"];
    assert_eq!(opt["iterations"], 40);
    assert_eq!(opt["r0"], 100.0);
    assert_eq!(opt["q"], 0.97);
    for k in ["est_motion.json", "compensated.f32raw", "trace.jsonl", "result.json"] {
        assert!(m.outputs.contains_key(k), "{k}");
    }
    assert_eq!(m.inputs["sinogram"].sha256.len(), 64);
}

#[test]
fn oracle_pipeline_improves_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "cfg.json", r#"{"optimizer": {"first_step": 5.0}}"#);
    let zero_cfg = write_config(
        d,
        "zero.json",
        r#"{"perturbation": {"nodes": 30, "amplitude_mm": 0.0, "amplitude_deg": 0.0}}"#,
    );
    let c = s(&cfg);
    run_ok(&["phantom", "--config", c, "--seed", "11", "--out-dir", s(&d.join("ph"))]);
    run_ok(&["perturb", "--config", c, "--seed", "12", "--out-dir", s(&d.join("gt"))]);
    run_ok(&["perturb", "--config", s(&zero_cfg), "--out-dir", s(&d.join("zero"))]);
    let gt = d.join("gt/motion.json");
    run_ok(&[
        "project",
        "--config",
        c,
        "--image",
        s(&d.join("ph/phantom.f32raw")),
        "--motion",
        s(&gt),
        "--out-dir",
        s(&d.join("pr")),
    ]);
    let sino = d.join("pr/sinogram.f32raw");
    run_ok(&["fbp", "--config", c, "--sinogram", s(&sino), "--motion", s(&gt), "--out-dir", s(&d.join("truth"))]);
    run_ok(&["fbp", "--config", c, "--sinogram", s(&sino), "--out-dir", s(&d.join("init"))]);
    let truth = d.join("truth/recon.f32raw");
    run_ok(&[
        "compensate",
        "--config",
        c,
        "--objective",
        "mse-oracle",
        "--sinogram",
        s(&sino),
        "--reference",
        s(&truth),
        "--out-dir",
        s(&d.join("co")),
    ]);
    let ev = d.join("ev");
    run_ok(&[
        "eval",
        "--config",
        c,
        "--truth",
        s(&truth),
        "--recon",
        s(&d.join("init/recon.f32raw")),
        "--gt-motion",
        s(&gt),
        "--est-motion",
        s(&d.join("zero/motion.json")),
        "--label",
        "init",
        "--out-dir",
        s(&ev),
    ]);
    run_ok(&[
        "eval",
        "--config",
        c,
        "--truth",
        s(&truth),
        "--recon",
        s(&d.join("co/compensated.f32raw")),
        "--gt-motion",
        s(&gt),
        "--est-motion",
        s(&d.join("co/est_motion.json")),
        "--out-dir",
        s(&ev),
    ]);
    let read = |name: &str| -> EvalRecord { serde_json::from_slice(&std::fs::read(ev.join(name)).unwrap()).unwrap() };
    let (init, fin) = (read("eval_init.json"), read("eval_final.json"));
    assert!(fin.metrics.rmse < init.metrics.rmse, "{:?} vs {:?}", fin.metrics, init.metrics);
    assert!(fin.metrics.rpe_mm < init.metrics.rpe_mm);

    let rep = d.join("rep");
    run_ok(&[
        "report",
        "--eval",
        s(&ev.join("eval_init.json")),
        "--eval",
        s(&ev.join("eval_final.json")),
        "--panel-row",
        &format!("{},{},{}", s(&truth), s(&d.join("init/recon.f32raw")), s(&d.join("co/compensated.f32raw"))),
        "--out-dir",
        s(&rep),
    ]);
    let csv = std::fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("final,1,"));
    let png = image::open(rep.join("panel.png")).unwrap();
    assert_eq!((png.width(), png.height()), (3 * 64 + 4, 64));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = write_config(d, "bad.json", r#"{"optimizer": {"iterations": 40, "momentum": 0.9}}"#);
    assert_eq!(code(&["perturb", "--config", s(&bad), "--out-dir", s(&d.join("a"))]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(
        code(&["fbp", "--sinogram", s(&d.join("missing.f32raw")), "--out-dir", s(&d.join("b"))]),
        Some(3)
    );
    let diverge = write_config(
        d,
        "diverge.json",
        r#"{"phantom": {"height": 8, "width": 8, "spacing_mm": 4.0, "ellipses": [3, 8], "intensity": [0.1, 0.8], "skull_ring": true, "supersample": 1},
            "scorenet": {"architecture": {"layers": 3, "channels": 4, "sigma_data": 0.5}, "steps": 200, "learning_rate": 1e30,
                         "grad_clip": null, "dataset_size": 2, "training_images": "phantom"}}"#,
    );
    assert_eq!(code(&["train-score", "--config", s(&diverge), "--out-dir", s(&d.join("c"))]), Some(4));
}

#[test]
fn rerun_reproduces_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "cfg.json", r#"{"optimizer": {"iterations": 3, "first_step": 1.0}}"#);
    run_ok(&["phantom", "--config", s(&cfg), "--seed", "5", "--out-dir", s(&d.join("ph"))]);
    run_ok(&["perturb", "--config", s(&cfg), "--seed", "6", "--out-dir", s(&d.join("gt"))]);
    run_ok(&[
        "project",
        "--config",
        s(&cfg),
        "--image",
        s(&d.join("ph/phantom.f32raw")),
        "--motion",
        s(&d.join("gt/motion.json")),
        "--out-dir",
        s(&d.join("pr")),
    ]);
    run_ok(&[
        "compensate",
        "--config",
        s(&cfg),
        "--objective",
        "mse-oracle",
        "--sinogram",
        s(&d.join("pr/sinogram.f32raw")),
        "--reference",
        s(&d.join("ph/phantom.f32raw")),
        "--out-dir",
        s(&d.join("co")),
    ]);
    // The config file may change afterwards; the manifest carries its own copy.
    std::fs::write(&cfg, "{}").unwrap();
    for step in ["ph", "gt", "pr", "co"] {
        let again = d.join(format!("{step}_again"));
        run_ok(&["rerun", "--manifest", s(&d.join(step).join("manifest.json")), "--out-dir", s(&again)]);
    }
    // Tampering with a recorded input is caught before anything runs.
    std::fs::write(d.join("pr/sinogram.f32raw"), [0u8; 8]).unwrap();
    assert_eq!(
        code(&["rerun", "--manifest", s(&d.join("co/manifest.json")), "--out-dir", s(&d.join("x"))]),
        Some(3)
    );
}

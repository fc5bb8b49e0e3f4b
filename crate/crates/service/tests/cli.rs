use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pilot_core::io::{save_mask_png, ImageRgb};
use pilot_core::pilot::BinaryMask;
use pilot_core::record::load_run;
use serde_json::Value;

fn pilot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilot"))
        .args(args)
        .env_remove("PILOT_CONFIG")
        .env_remove("PILOT_OUTPUT_ROOT")
        .env_remove("PILOT_DENOISER")
        .env_remove("PILOT_AUTOENCODER")
        .env_remove("PILOT_ORACLE")
        .env_remove("PILOT_WORKERS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// Tiny models trained once through the command line and shared by the
/// tests below.
struct Fixture {
    root: PathBuf,
    image: String,
    mask: String,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let r = dir.to_str().unwrap();
        let data = ["--train-size", "32", "--val-size", "8", "--epochs", "1", "--batch", "16"];
        let mut ae = vec!["--output-root", r, "train-ae", "--preset", "tiny"];
        ae.extend(data);
        ok(&pilot(&ae));
        let mut dn = vec!["--output-root", r, "train-denoiser", "--preset", "tiny"];
        dn.extend(data);
        ok(&pilot(&dn));
        ok(&pilot(&["--output-root", r, "train-oracle", "--train-size", "48", "--val-size", "12", "--epochs", "1"]));
        let (h, w) = (64, 64);
        ImageRgb::filled(h, w, [0.1, -0.3, 0.5]).save_png(&dir.join("image.png")).unwrap();
        let m = BinaryMask::from_fn(h, w, |y, x| (16..40).contains(&y) && (20..48).contains(&x));
        save_mask_png(&dir.join("mask.png"), &m).unwrap();
        Fixture {
            image: s(&dir.join("image.png")).to_string(),
            mask: s(&dir.join("mask.png")).to_string(),
            root: dir,
        }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 6] = ["--n-steps", "8", "--inner-steps", "1", "--tau", "4"];

#[test]
fn missing_mask_is_a_usage_error() {
    let out = pilot(&["inpaint", "--image", "a.png", "--prompt", "red circle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mask"));
}

#[test]
fn runtime_errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = pilot(&["--output-root", s(dir.path()), "show-run", s(&dir.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr);
    let err: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert!(err["error"].is_string());
}

#[test]
fn inpaint_writes_a_complete_run() {
    let f = fixture();
    let root = &f.root;
    let run = root.join("run-a");
    let mut args = vec![
        "--output-root",
        s(root),
        "inpaint",
        "--image",
        &f.image,
        "--mask",
        &f.mask,
        "--prompt",
        "blue square",
        "--out",
        s(&run),
        "--snapshots",
    ];
    args.extend(FAST);
    let summary = ok(&pilot(&args));
    for f in ["output.png", "raw.png", "manifest.json", "trace.json", "contact_sheet.png"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let record = load_run(&run).unwrap();
    assert_eq!(record.prompt, "blue square");
    assert_eq!(record.params.n_steps, 8);
    assert_eq!(summary["output_sha256"], record.output_sha256);
    // The oracle checkpoint exists, so the run is scored.
    assert!(record.metrics.unwrap().is_finite());

    let shown = pilot(&["show-run", s(&run)]);
    let shown: Value = serde_json::from_slice(&shown.stdout).unwrap();
    assert_eq!(shown["output_sha256"], record.output_sha256);

    // Same inputs and seed, same bytes.
    let run_b = root.join("run-b");
    let n = args.len();
    args[n - FAST.len() - 2] = s(&run_b);
    ok(&pilot(&args));
    assert_eq!(
        std::fs::read(run.join("output.png")).unwrap(),
        std::fs::read(run_b.join("output.png")).unwrap()
    );
}

#[test]
fn params_file_and_flags_layer() {
    let f = fixture();
    let root = &f.root;
    let params = root.join("params.json");
    std::fs::write(&params, r#"{"gamma": 0.5, "seed": 3, "n_steps": 8}"#).unwrap();
    let run = root.join("run-layered");
    ok(&pilot(&[
        "--output-root",
        s(root),
        "inpaint",
        "--image",
        &f.image,
        "--mask",
        &f.mask,
        "--prompt",
        "red circle",
        "--params",
        s(&params),
        "--seed",
        "4",
        "--inner-steps",
        "1",
        "--out",
        s(&run),
    ]));
    let p = load_run(&run).unwrap().params;
    assert_eq!((p.gamma, p.seed, p.n_steps, p.inner_steps), (0.5, 4, 8, 1));
}

#[test]
fn invalid_parameters_fail_cleanly() {
    let f = fixture();
    let root = &f.root;
    let out = pilot(&[
        "--output-root",
        s(root),
        "inpaint",
        "--image",
        &f.image,
        "--mask",
        &f.mask,
        "--prompt",
        "red circle",
        "--tau",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = pilot(&[
        "--output-root",
        s(root),
        "inpaint",
        "--image",
        &f.image,
        "--mask",
        &f.mask,
        "--prompt",
        "purple circle",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("purple"));
}

#[test]
fn sweep_writes_a_report() {
    let f = fixture();
    let root = &f.root;
    let out = root.join("sweeps");
    let mut args = vec![
        "--output-root",
        s(root),
        "sweep",
        "--axis",
        "gamma",
        "--values",
        "0,1",
        "--cases",
        "1",
        "--out",
        s(&out),
    ];
    args.extend(FAST);
    let summary = ok(&pilot(&args));
    assert_eq!(summary["cells"], 2);
    let dir = PathBuf::from(summary["sweep"].as_str().unwrap());
    for f in ["report.json", "report.csv", "contact_sheet.png"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

/// The denoiser path named in the error shows which source won.
fn chosen_denoiser(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    err["error"].as_str().unwrap().to_string()
}

#[test]
fn config_precedence_is_flag_env_file() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pilot.json");
    std::fs::write(&cfg, r#"{"denoiser": "/from/file.safetensors"}"#).unwrap();
    let base = [
        "inpaint",
        "--image",
        &f.image,
        "--mask",
        &f.mask,
        "--prompt",
        "red circle",
    ];
    let run = |flag: Option<&str>, env: Option<&str>| {
        let mut args = vec!["--config", s(&cfg)];
        if let Some(f) = flag {
            args.extend(["--denoiser", f]);
        }
        args.extend(base);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pilot"));
        cmd.args(&args).env_remove("PILOT_DENOISER").env_remove("PILOT_CONFIG");
        if let Some(e) = env {
            cmd.env("PILOT_DENOISER", e);
        }
        chosen_denoiser(&cmd.output().unwrap())
    };
    assert!(run(None, None).contains("/from/file"));
    assert!(run(None, Some("/from/env.safetensors")).contains("/from/env"));
    assert!(run(Some("/from/flag.safetensors"), Some("/from/env.safetensors")).contains("/from/flag"));

    std::fs::write(&cfg, r#"{"denoiser": "x", "bogus": 1}"#).unwrap();
    assert!(run(None, None).contains("bogus"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srq::io::write_image;
use srq::metrics::ImageU8;

fn srq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srq")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        std::fs::create_dir(&images).unwrap();
        for k in 0..3usize {
            let img = ImageU8::from_fn(24, 20, |y, x, c| ((y * 9 + x * 5 + c * 60 + k * 30) % 256) as u8);
            write_image(&images.join(format!("{k}.png")), &img).unwrap();
        }
        std::fs::write(
            dir.path().join("run.json"),
            r#"{"dobi": {"search_steps": 10, "num_patches": 4, "patch_size": 16, "histogram_bins": 32},
                "distill": {"iterations": 3, "batch_size": 2, "patch_size": 16, "val_interval": 2}}"#,
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn calibrate(&self, out: &str, seed: &str) -> Output {
        srq(&[
            "calibrate", "--random-model", "toy", "--scale", "2", "--bits", "3", "--seed", seed,
            "--config", p(&self.path("run.json")), "--calib-dir", p(&self.path("images")),
            "--out", p(&self.path(out)),
        ])
    }
}

#[test]
fn pipeline_end_to_end() {
    let ws = Workspace::new();
    let out = ws.calibrate("a.q", "5");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("a.q.report.json").exists());

    let out = srq(&[
        "distill", "--bits", "3", "--config", p(&ws.path("run.json")), "--artifact", p(&ws.path("a.q")),
        "--calib-dir", p(&ws.path("images")), "--pack", "--out", p(&ws.path("b.q")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(ws.path("b.q.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let input = ws.path("images/0.png");
    for mode in ["fp", "fake-quant", "packed-int"] {
        let target = ws.path(&format!("{mode}.png"));
        let out = srq(&[
            "infer", "--artifact", p(&ws.path("b.q")), "--input", p(&input), "--output", p(&target),
            "--mode", mode,
        ]);
        assert!(out.status.success(), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        let img = srq::io::read_image(&target).unwrap();
        assert_eq!((img.width(), img.height()), (48, 40));
    }

    let out = srq(&["report", "--artifact", p(&ws.path("a.q")), "--json", p(&ws.path("r.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("attn.map"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.path("r.json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn calibration_is_byte_deterministic() {
    let ws = Workspace::new();
    assert!(ws.calibrate("x.q", "9").status.success());
    assert!(ws.calibrate("y.q", "9").status.success());
    assert_eq!(std::fs::read(ws.path("x.q")).unwrap(), std::fs::read(ws.path("y.q")).unwrap());
}

#[test]
fn report_without_artifact() {
    let out = srq(&["report", "--bits", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("3.60"), "{text}");
}

#[test]
fn selftest_passes() {
    let out = srq(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn input_errors_exit_with_code_two() {
    let ws = Workspace::new();
    assert_eq!(srq(&["report", "--bits", "5"]).status.code(), Some(2));
    std::fs::create_dir(ws.path("empty")).unwrap();
    let out = srq(&[
        "calibrate", "--random-model", "toy", "--scale", "2", "--calib-dir", p(&ws.path("empty")),
        "--out", p(&ws.path("z.q")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("z.q").exists());
    assert!(ws.calibrate("a.q", "1").status.success());
    let bytes = std::fs::read(ws.path("a.q")).unwrap();
    std::fs::write(ws.path("cut.q"), &bytes[..bytes.len() / 3]).unwrap();
    let out = srq(&[
        "infer", "--artifact", p(&ws.path("cut.q")), "--input", p(&ws.path("images/0.png")),
        "--output", p(&ws.path("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

use std::path::Path;
use std::process::{Command, Output};

fn evssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evssm")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "\
# two-level network small enough for a smoke test
base_channels = 4
levels = 2
modules_per_level = 1,1
ssm_state_dim = 2
iterations = 2
batch_size = 1
patch_size = 8
val_pairs = 1
log_every = 1
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn flops_reports_fft_placement_ratio() {
    let out = evssm(&["flops", "--height", "128", "--width", "128"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let ratio = text.lines().find(|l| l.contains("mid / tail")).unwrap();
    assert!(ratio.trim_end().ends_with("3.000"), "{ratio}");
    assert!(text.contains("spatial total"));
    assert!(!evssm(&["flops", "--height", "30", "--width", "32"]).status.success());
}

#[test]
fn bench_prints_csv() {
    let out = evssm(&["bench", "--op", "fft", "--sizes", "8,16"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "op,size,flops,wall_ns");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("fft,8,"));
}

#[test]
fn gradcheck_passes_for_scan() {
    let out = evssm(&["gradcheck", "--module", "sscan"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("selective_scan"));
    assert!(!evssm(&["gradcheck", "--module", "bogus"]).status.success());
}

#[test]
fn train_then_deblur_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = evssm(&["train", "--config", &cfg, "--out", ckpt, "--seed", "4", "--scan-mode", "one"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 3);

    let input = dir.path().join("in.png");
    image::RgbImage::from_fn(11, 6, |x, y| image::Rgb([(x * 20) as u8, (y * 40) as u8, 128]))
        .save(&input)
        .unwrap();
    let mut results = Vec::new();
    for name in ["a.png", "b.png"] {
        let target = dir.path().join(name);
        let out = evssm(&["deblur", "--ckpt", ckpt, "--in", input.to_str().unwrap(), "--out", target.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let img = image::open(&target).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (11, 6));
        results.push(img.into_raw());
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn ablate_covers_every_scan_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = evssm(&["ablate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for mode in ["evs", "one", "no-flip", "no-transpose"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{mode},"))), "{mode} missing");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "learning_rate = 0.1\n").unwrap();
    let out = evssm(&["train", "--config", path.to_str().unwrap(), "--out", "unused.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

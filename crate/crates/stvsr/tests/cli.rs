//! The command-line tool as a black box: exit codes, inventories and the
//! degenerate-scale round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stvsr::rvid::{load_rvid, save_rvid, Dtype};
use stvsr_core::metrics::psnr;

fn stvsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stvsr")).args(args).output().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("c.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = "clips = 2\nframes = 9\nheight = 32\nwidth = 32\niters = 2\nbatch = 1\nvae_steps = 5\n";

#[test]
fn exit_codes_follow_the_contract() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    // unknown flag
    assert_eq!(stvsr(&["synth-data", "--bogus"]).status.code(), Some(2));
    // unknown config key
    let bad = write_config(d, "no_such_key = 1\n");
    assert_eq!(stvsr(&["--config", bad.to_str().unwrap(), "synth-data", "--out", &p(d, "x")]).status.code(), Some(2));
    // missing config file and missing input
    assert_eq!(stvsr(&["--config", &p(d, "absent.toml"), "synth-data", "--out", &p(d, "x")]).status.code(), Some(3));
    let ok = write_config(d, SMALL);
    let c = ok.to_str().unwrap();
    assert_eq!(stvsr(&["--config", c, "degrade", "--in", &p(d, "absent.rvid"), "--out", &p(d, "o.rvid")]).status.code(), Some(3));
    // a runaway learning rate blows up the first update
    let hot = write_config(d, &format!("{SMALL}lr = 1e30\n"));
    let out = stvsr(&["--config", hot.to_str().unwrap(), "train", "--out", &p(d, "hot.ckpt")]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("hot.ckpt").exists());
    assert_eq!(stvsr(&["--help"]).status.code(), Some(0));
}

#[test]
fn evaluate_names_missing_and_extra_clips() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    let c = write_config(d, SMALL);
    let c = c.to_str().unwrap();
    assert!(stvsr(&["--config", c, "synth-data", "--out", &p(d, "ref")]).status.success());
    std::fs::create_dir(d.join("out")).unwrap();
    std::fs::copy(d.join("ref/clip_0000.rvid"), d.join("out/clip_0000.rvid")).unwrap();
    std::fs::copy(d.join("ref/clip_0000.rvid"), d.join("out/stray.rvid")).unwrap();
    let out = stvsr(&["--config", c, "evaluate", "--restored", &p(d, "out"), "--reference", &p(d, "ref"), "--out", &p(d, "r.json")]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("clip_0001") && msg.contains("stray"), "{msg}");
    // identical corpora give ideal metrics
    std::fs::remove_file(d.join("out/stray.rvid")).unwrap();
    std::fs::copy(d.join("ref/clip_0001.rvid"), d.join("out/clip_0001.rvid")).unwrap();
    assert!(stvsr(&["--config", c, "evaluate", "--restored", &p(d, "out"), "--reference", &p(d, "ref"), "--out", &p(d, "r.json")]).status.success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["mean"]["psnr"], 99.0);
    assert_eq!(r["mean"]["ssim"], 1.0);
    assert_eq!(r["mean"]["tof"], 0.0);
    assert_eq!(r["mean"]["tlp"], 0.0);
}

#[test]
fn unit_scales_restore_close_to_the_input() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    let c = write_config(
        d,
        "phi_s = 1\nphi_t = 1\nblur_sigma = 0.0\nnoise_sigma = 0.0\nclips = 2\nframes = 5\nheight = 32\nwidth = 32\niters = 20\nbatch = 1\nvae_steps = 400\n",
    );
    let c = c.to_str().unwrap();
    assert!(stvsr(&["--config", c, "synth-data", "--out", &p(d, "data")]).status.success());
    let out = stvsr(&["--config", c, "train", "--data", &p(d, "data"), "--out", &p(d, "m.ckpt")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let input = load_rvid(&d.join("data/clip_0000.rvid")).unwrap();
    save_rvid(&input, &d.join("in.rvid"), Dtype::F32).unwrap();
    assert!(stvsr(&["--config", c, "restore", "--in", &p(d, "in.rvid"), "--checkpoint", &p(d, "m.ckpt"), "--out", &p(d, "o.rvid")]).status.success());
    let restored = load_rvid(&d.join("o.rvid")).unwrap();
    assert_eq!(restored.dims(), input.dims());
    let q = psnr(&restored, &input).unwrap();
    assert!(q > 25.0, "{q}");
}

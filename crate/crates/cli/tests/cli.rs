//! End-to-end runs of the `preimage` binary: exit codes, output files and
//! reproducibility from the report.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{images, path_str, toy_network};
use preimage::netio::save_network;

fn preimage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_preimage")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn toy_net(dir: &Path) -> PathBuf {
    let manifest = dir.join("toy.toml");
    save_network(&toy_network(42, None), &manifest, &dir.join("toy.bin")).unwrap();
    manifest
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_layer_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_net(dir.path());
    let out = preimage(&[
        "invert", "--net", path_str(&net), "--image", path_str(&images()[0]),
        "--layer", "conv9", "--out", path_str(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("pool1"), "{}", stderr(&out));
}

#[test]
fn replay_reproduces_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_net(dir.path());
    let first = dir.path().join("a.png");
    let out = preimage(&[
        "invert", "--net", path_str(&net), "--image", path_str(&images()[1]),
        "--layer", "pool1", "--iters", "30", "--finetune-iters", "5", "--seed", "7", "--out", path_str(&first),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let r = report(&dir.path().join("a.json"));
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["seed"], 7);
    let mut replay: Vec<String> = r["replay"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_owned())
        .collect();
    let second = dir.path().join("b.png");
    let redirect = |args: &mut Vec<String>, flag: &str, value: &Path| {
        let at = args.iter().position(|a| a == flag).expect(flag);
        args[at + 1] = path_str(value).to_owned();
    };
    redirect(&mut replay, "--out", &second);
    redirect(&mut replay, "--report", &dir.path().join("b.json"));
    let args: Vec<&str> = replay.iter().map(String::as_str).collect();
    let out = preimage(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn count_writes_one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_net(dir.path());
    let out = preimage(&[
        "invert", "--net", path_str(&net), "--image", path_str(&images()[2]), "--layer", "relu1",
        "--iters", "10", "--finetune-iters", "0", "--seed", "3", "--count", "4",
        "--out", path_str(&dir.path().join("r.png")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut pngs = Vec::new();
    for seed in 3..7 {
        let png = dir.path().join(format!("r-{seed}.png"));
        assert_eq!(report(&dir.path().join(format!("r-{seed}.json")))["seed"], seed);
        pngs.push(std::fs::read(png).unwrap());
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(pngs[i], pngs[j], "seeds {} and {} agree", i + 3, j + 3);
        }
    }
    assert!(!dir.path().join("r.png").exists());
}

#[test]
fn zero_template_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("w.json");
    let data = vec![0.0; 4 * 4 * 72];
    std::fs::write(
        &template,
        serde_json::json!({ "height": 4, "width": 4, "channels": 72, "data": data }).to_string(),
    )
    .unwrap();
    let out = preimage(&[
        "maximize", "--net", "builtin:hog", "--template", path_str(&template),
        "--out", path_str(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
}

#[test]
fn caricature_of_a_flat_image_is_degenerate() {
    // A flat image has no gradients, so its descriptor is all zero.
    let dir = tempfile::tempdir().unwrap();
    let black = dir.path().join("black.png");
    image::GrayImage::new(64, 64).save(&black).unwrap();
    let out = preimage(&[
        "caricature", "--net", "builtin:dsift", "--image", path_str(&black), "--layer", "clamp",
        "--out", path_str(&dir.path().join("y.png")),
    ]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
}

#[test]
fn texture_lists_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_net(dir.path());
    let image = images().swap_remove(0);
    let base = ["texture", "--net", path_str(&net), "--image", path_str(&image)];
    let x = dir.path().join("x.png");
    let mismatched: Vec<&str> = base
        .iter()
        .copied()
        .chain(["--layer", "conv1,pool1", "--layer-weights", "1", "--out", path_str(&x)])
        .collect();
    let out = preimage(&mismatched);
    assert_eq!(code(&out), 5, "{}", stderr(&out));

    let empty: Vec<&str> = base.iter().copied().chain(["--layer", "", "--out", path_str(&x)]).collect();
    let out = preimage(&empty);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn unreadable_image_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    for image in [bogus, dir.path().join("missing.png")] {
        let out = preimage(&[
            "invert", "--net", "builtin:hog", "--image", path_str(&image), "--layer", "clamp",
            "--out", path_str(&dir.path().join("x.png")),
        ]);
        assert_eq!(code(&out), 4, "{}", stderr(&out));
    }
}

#[test]
fn conflicting_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.png");
    let out = preimage(&[
        "invert", "--net", "builtin:hog", "--image", path_str(&images()[0]), "--layer", "clamp",
        "--preset", "caricature", "--out", path_str(&x),
    ]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    let out = preimage(&["invert", "--net", "builtin:hog", "--layer", "clamp", "--out", path_str(&x)]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    let out = preimage(&["invert", "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn dsift_inversion_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("d.png");
    let out = preimage(&[
        "invert", "--net", "builtin:dsift", "--image", path_str(&images()[0]), "--layer", "clamp",
        "--iters", "60", "--out", path_str(&x),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = report(&dir.path().join("d.json"));
    assert_eq!(r["config"]["C"], 100.0);
    assert_eq!(r["trace"].as_array().unwrap().len(), 60 + 50);
    let err = r["metrics"]["reconstruction_error"].as_f64().unwrap();
    assert!(err < 50.0, "error {err}%");
    assert!(image::open(&x).unwrap().width() > 0);
}

#[test]
fn texture_reduces_gram_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_net(dir.path());
    let x = dir.path().join("t.png");
    let out = preimage(&[
        "texture", "--net", path_str(&net), "--image", path_str(&images()[3]), "--layer", "relu1",
        "--iters", "200", "--out", path_str(&x),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = report(&dir.path().join("t.json"));
    let first = r["trace"][0]["energy"].as_f64().unwrap();
    let last = r["metrics"]["texture_energy"].as_f64().unwrap();
    assert!(last < 0.2 * first, "texture energy {first} -> {last}");
}

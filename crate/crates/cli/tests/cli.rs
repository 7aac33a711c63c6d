use std::path::Path;
use std::process::{Command, Output};

use geoconv::lrf::LrfVariant;
use geoconv::mesh::{save_off, shapes};
use geoconv::netarch::{LsdOutput, Model};
use geoconv::train::{capsule_dataset, desk_spec, write_dataset};

fn geoconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoconv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn untrained_checkpoint(path: &Path) {
    let spec = desk_spec(LrfVariant::Curvature);
    Model::new(spec.clone(), 0).unwrap().params.to_checkpoint(spec.spec_hash(), 0).save(path).unwrap();
}

#[test]
fn empty_data_root_names_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = geoconv(&["preprocess", "--data-root", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains(&dir.path().join("manifest.toml").display().to_string()), "{}", text(&out));
}

#[test]
fn missing_data_root_flag_is_a_validation_error() {
    let out = geoconv(&["train"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn export_writes_one_row_per_vertex() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("grid.off");
    save_off(&shapes::deform(&shapes::grid(10, 5, 1.0, 0.5), 0.02, 1), &mesh).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    untrained_checkpoint(&ckpt);
    let out_dir = dir.path().join("out");
    let out = geoconv(&["export-descriptors", "--mesh", s(&mesh), "--checkpoint", s(&ckpt), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", text(&out));
    let rows = LsdOutput::parse_text(&std::fs::read_to_string(out_dir.join("grid.lsd.txt")).unwrap()).unwrap();
    assert_eq!(rows.shape(), &[50, 8]);
    let bin = std::fs::read(out_dir.join("grid.lsd.bin")).unwrap();
    assert_eq!(bin.len(), 16 + 50 * 8 * 8);
}

#[test]
fn eval_refuses_a_checkpoint_of_another_spec() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &capsule_dataset(1, 1, 2)).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    untrained_checkpoint(&ckpt);
    let out = geoconv(&["eval", "--data-root", s(dir.path()), "--checkpoint", s(&ckpt), "--no-coords"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    let mut ablated = desk_spec(LrfVariant::Curvature);
    ablated.ablation.use_coords = false;
    let msg = text(&out);
    let hex = geoconv::tensor::hex;
    assert!(msg.contains(&hex(&desk_spec(LrfVariant::Curvature).spec_hash())), "{msg}");
    assert!(msg.contains(&hex(&ablated.spec_hash())), "{msg}");
}

#[test]
fn preprocess_is_idempotent_and_repairs_corruption() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &capsule_dataset(2, 0, 5)).unwrap();
    let cache = dir.path().join("cache");
    let run = || {
        let out = geoconv(&["preprocess", "--data-root", s(dir.path()), "--cache", s(&cache)]);
        assert!(out.status.success(), "{}", text(&out));
        text(&out)
    };
    let first = run();
    assert!(first.contains(" 0 cache hits"), "{first}");
    assert!(run().contains(" 0 misses, 0 rebuilt"));

    let mut files: Vec<_> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let victim = &files[0];
    let mut bytes = std::fs::read(victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    std::fs::write(victim, bytes).unwrap();
    let untouched: Vec<Vec<u8>> = files[1..].iter().map(|f| std::fs::read(f).unwrap()).collect();
    let third = run();
    assert!(third.contains(" 0 misses, 1 rebuilt"), "{third}");
    for (f, before) in files[1..].iter().zip(&untouched) {
        assert_eq!(&std::fs::read(f).unwrap(), before);
    }
}

#[test]
fn train_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, &capsule_dataset(2, 1, 7)).unwrap();
    // config says 1 epoch; the flag wins
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 3\n[train]\nepochs = 1\npoints_per_mesh = 80\n").unwrap();
    let train = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = geoconv(&["train", "--config", s(&config), "--data-root", s(&data), "--out", s(&out_dir), "--epochs", "2"]);
        assert!(out.status.success(), "{}", text(&out));
        out_dir
    };
    let (a, b) = (train("a"), train("b"));
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert_eq!(metrics, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());

    let out = geoconv(&["eval", "--config", s(&config), "--data-root", s(&data), "--out", s(&a)]);
    assert!(out.status.success(), "{}", text(&out));
    let eval = std::fs::read_to_string(a.join("eval.csv")).unwrap();
    let accs: Vec<f64> = eval.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(accs.len(), 2, "{eval}");
    assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)), "{eval}");
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "sed = 3\n").unwrap();
    let out = geoconv(&["selftest", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = geoconv(&["selftest", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("all checks passed"));
}

#[test]
fn gradcheck_passes() {
    let out = geoconv(&["gradcheck"]);
    assert!(out.status.success(), "{}", text(&out));
}

#[test]
fn correspondence_training_writes_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (null, mut sources) = geoconv::train::template_pairs(&shapes::bumpy_sphere(1, 0.1, 3), 4, 0.02, 1);
    sources.insert(0, null);
    write_dataset(&data, &sources).unwrap();
    let out_dir = dir.path().join("out");
    let args = ["--task", "match", "--data-root", s(&data), "--out", s(&out_dir), "--epochs", "2"];
    let out = geoconv(&[&["train"], &args[..]].concat());
    assert!(out.status.success(), "{}", text(&out));
    let curve = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 27, "{curve}");
    let out = geoconv(&[&["eval"], &args[..]].concat());
    assert!(out.status.success(), "{}", text(&out));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gpp_core::autoencoder::Autoencoder;
use gpp_core::imaging::{load_dataset, make_pair, save_image, Image};
use gpp_core::net::GppConfig;
use gpp_core::trainer::{evaluate, load_checkpoint, EvalReport, PriorSource};
use serde_json::Value;

fn gpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpp")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gpp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn make_dataset_writes_pairs_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--n", "3", "--size", "24", "--seed", "40", "--out", p(&data)]);
    for seed in 40..43 {
        let pair = data.join("pairs").join(seed.to_string());
        for f in ["nl.png", "ll.png", "meta.json"] {
            assert!(pair.join(f).is_file(), "{}", pair.join(f).display());
        }
    }
    let pairs = load_dataset(&data).unwrap();
    assert_eq!(pairs.iter().map(|p| p.seed).collect::<Vec<_>>(), [40, 41, 42]);
    // png storage quantizes to 8 bits
    let fresh = make_pair(41, 24).unwrap();
    assert_eq!(pairs[1].nl.to_rgb8(), fresh.nl.to_rgb8());
    assert!(pairs[1].ll.mean_luminance() < pairs[1].nl.mean_luminance());

    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "make-dataset");
    assert_eq!(manifest["seed"], 40);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);

    let again = gpp(&["make-dataset", "--n", "1", "--out", p(&data)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["make-dataset", "--n", "1", "--seed", "40", "--out", p(&data), "--force"]);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gpp(&["train"]).status.code(), Some(2));
    assert_eq!(gpp(&["no-such-command"]).status.code(), Some(2));
    let missing = dir.path().join("missing.gppl");
    assert_eq!(gpp(&["enhance", "--ckpt", p(&missing), "--input", p(dir.path()), "--out", p(dir.path())]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(gpp(&["make-dataset", "--n", "1", "--config", p(&bad), "--out", p(&dir.path().join("d"))]).status.code(), Some(2));
    let img = dir.path().join("img");
    fs::create_dir(&img).unwrap();
    save_image(&Image::filled(16, 16, [0.2; 3]), img.join("a.png")).unwrap();
    let out = gpp(&["extract-priors", "--input", p(&img), "--out", p(&dir.path().join("c")), "--provider", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extract_priors_caches_and_sees_darkness() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    let scene = make_pair(5, 32).unwrap().nl;
    let dark = Image::from_fn(32, 32, |c, y, x| scene.get(c, y, x) * 0.3);
    save_image(&scene, imgs.join("bright.png")).unwrap();
    save_image(&dark, imgs.join("dark.png")).unwrap();
    let cache = dir.path().join("cache");

    let first = ok(&["extract-priors", "--input", p(&imgs), "--out", p(&cache)]);
    assert!(first.contains("2 images (0 cache hits, 2 computed), 0 failed"), "{first}");
    let second = ok(&["extract-priors", "--input", p(&imgs), "--out", p(&cache)]);
    assert!(second.contains("2 images (2 cache hits, 0 computed)"), "{second}");

    let index: Vec<Value> = serde_json::from_str(&fs::read_to_string(cache.join("index.json")).unwrap()).unwrap();
    let visibility = |name: &str| {
        let e = index.iter().find(|e| e["image"].as_str().unwrap().ends_with(name)).unwrap();
        assert!(Path::new(e["sidecar"].as_str().unwrap()).is_file());
        e["global"][1].as_f64().unwrap()
    };
    assert!(visibility("dark.png") < visibility("bright.png"));
}

#[test]
fn train_enhance_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train"), dir.path().join("test"));
    ok(&["make-dataset", "--n", "4", "--size", "16", "--out", p(&train)]);
    ok(&["make-dataset", "--n", "3", "--size", "16", "--seed", "70", "--out", p(&test)]);
    let config = dir.path().join("tiny.json");
    fs::write(
        &config,
        r#"{"ae": {"f": 1, "d": 3}, "grid": 2, "net": {"w": 8, "blocks": 1, "heads": 2},
            "train": {"iterations": 4, "batch_size": 2, "crop": 8, "log_every": 2, "checkpoint_every": 2},
            "steps": 4, "seed": 3}"#,
    )
    .unwrap();
    let c = p(&config);
    let run = dir.path().join("run");
    ok(&["train", "--config", c, "--data", p(&train), "--out", p(&run)]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(run.join("checkpoints/step_0000002.gppl").is_file());
    let ckpt = run.join("checkpoint.gppl");
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.step, 4);
    assert_eq!(ck.net.config, GppConfig { d: 3, w: 8, blocks: 1, heads: 2, grid: 2, ..GppConfig::default() });
    assert_eq!(ck.ae.config, Autoencoder::<f32>::identity().config);

    // resuming extends the log
    ok(&["train", "--config", c, "--data", p(&train), "--out", p(&run), "--ckpt", p(&ckpt), "--iterations", "6"]);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.step, 6);

    let eval = dir.path().join("eval");
    let table = ok(&["eval", "--config", c, "--ckpt", p(&ckpt), "--data", p(&test), "--out", p(&eval), "--threads", "2"]);
    assert!(table.contains("mean"));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let direct = evaluate(&ck, &load_dataset(&test).unwrap(), &PriorSource::builtin(), 4, 3, 1).unwrap();
    assert_eq!(report, direct);

    let inputs = dir.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    save_image(&load_dataset(&test).unwrap()[0].ll.crop(0, 0, 16, 12).unwrap(), inputs.join("x.png")).unwrap();
    let out = dir.path().join("enhanced");
    ok(&["enhance", "--config", c, "--ckpt", p(&ckpt), "--input", p(&inputs), "--out", p(&out)]);
    let img = gpp_core::imaging::load_image(out.join("x.enhanced.png")).unwrap();
    assert_eq!((img.height(), img.width()), (16, 12));
    assert!(out.join("manifest.json").is_file());
}

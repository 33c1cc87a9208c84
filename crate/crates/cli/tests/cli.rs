use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4
[tiles]
size = 16
[model]
image_size = 16
channels = [4, 4, 8]
cond_width = 8
embed_dim = 8
text_dim = 16
hint_channels = 4
[schedule]
steps = 40
[sample]
ddim_steps = 4
[train]
steps = 4
batch_size = 2
[ingest]
eval_fraction = 0.3
"#;

fn geoforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = geoforge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> String {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    ok(&["--config", p(&cfg), "build-dataset", "--out", p(&data), "--synthetic", "gridtown", "--synthetic", "curville", "--tiles", "3"]);
    cfg.to_str().unwrap().to_string()
}

#[test]
fn synthetic_seven_by_seven_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    ok(&["build-dataset", "--out", p(&out), "--synthetic", "gridtown"]);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 49);
    assert!(out.join("config.toml").exists());

    let again = geoforge(&["build-dataset", "--out", p(&out), "--synthetic", "gridtown"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["build-dataset", "--out", p(&out), "--synthetic", "gridtown", "--force", "--jobs", "2"]);
    assert_eq!(std::fs::read_to_string(out.join("manifest.jsonl")).unwrap(), manifest);
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.geojson");
    let out = geoforge(&["build-dataset", "--out", p(&dir.path().join("o")), "--geodata", p(&missing), "--city", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.geojson"));

    let out = geoforge(&["--config", p(&dir.path().join("none.toml")), "degrade", "--ground-truth", ".", "--out", "x"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.toml"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(geoforge(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(geoforge(&["build-dataset"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[tiles]\nsize = 48\n").unwrap();
    let out = geoforge(&["--config", p(&bad), "build-dataset", "--out", "x", "--synthetic", "gridtown"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(geoforge(&["--help"]).status.success());
}

#[test]
fn geodata_build_and_vectorize() {
    let dir = tempfile::tempdir().unwrap();
    let gj = dir.path().join("city.geojson");
    let square = |x: f64, y: f64, s: f64| format!("[[[{x},{y}],[{},{y}],[{},{}],[{x},{}],[{x},{y}]]]", x + s, x + s, y + s, y + s);
    let text = format!(
        r#"{{"type":"FeatureCollection","features":[
        {{"type":"Feature","geometry":{{"type":"Polygon","coordinates":{}}},"properties":{{"building":"yes"}}}},
        {{"type":"Feature","geometry":{{"type":"LineString","coordinates":[[13.3990,52.5010],[13.4030,52.5010]]}},"properties":{{"highway":"primary"}}}}]}}"#,
        square(13.4000, 52.5000, 0.0004)
    );
    std::fs::write(&gj, text).unwrap();
    let out = dir.path().join("ds");
    ok(&["build-dataset", "--out", p(&out), "--geodata", p(&gj), "--city", "testburg", "--bbox", "13.399,52.499,13.403,52.502"]);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert!(manifest.contains("testburg"));
    assert!(manifest.contains("1 building"));
    let vec_out = dir.path().join("b.geojson");
    let msg = ok(&["vectorize", "--input", p(&out), "--out", p(&vec_out)]);
    assert!(msg.starts_with("1 polygons") || msg.starts_with("2 polygons"), "{msg}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&vec_out).unwrap()).unwrap();
    assert_eq!(v["type"], "FeatureCollection");
}

#[test]
fn evaluate_identity_and_missing_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    let data = dir.path().join("data");
    let json = dir.path().join("report.json");
    let out = ok(&["--config", &cfg, "evaluate", "--generated", p(&data), "--ground-truth", p(&data), "--json", p(&json)]);
    assert!(out.contains("MIoU               1.0000"), "{out}");
    assert!(out.contains("|dSite Cover| (%)  0.0000"));
    assert!(out.contains("%GN Count          100.00"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["per_tile"].as_array().unwrap().len(), 18);

    let gen = dir.path().join("gen");
    let src = std::fs::read_dir(data.join("target/17")).unwrap().next().unwrap().unwrap().path();
    let x = src.file_name().unwrap().to_str().unwrap().to_string();
    std::fs::create_dir_all(gen.join("target/17").join(&x)).unwrap();
    std::fs::copy(
        std::fs::read_dir(&src).unwrap().next().unwrap().unwrap().path(),
        gen.join("target/17").join(&x).join("1.png"),
    )
    .unwrap();
    let out = geoforge(&["--config", &cfg, "evaluate", "--generated", p(&gen), "--ground-truth", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("17/{x}/1.png")));
}

#[test]
fn degrade_and_assess_perfect_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    let data = dir.path().join("data");
    let deg = dir.path().join("deg");
    ok(&["--config", &cfg, "degrade", "--ground-truth", p(&data), "--out", p(&deg), "--fraction-range", "0,1", "--seed", "2"]);
    let refused = geoforge(&["--config", &cfg, "degrade", "--ground-truth", p(&data), "--out", p(&deg), "--fraction", "0.5"]);
    assert_eq!(refused.status.code(), Some(1));
    let table = ok(&["--config", &cfg, "assess", "--generated", p(&data), "--degraded", p(&deg)]);
    for word in ["Mapped", "Partially Mapped", "Unmapped", "Precision", "Recall", "F1"] {
        assert!(table.contains(word), "{word} missing from\n{table}");
    }
    let strict = ok(&["--config", &cfg, "assess", "--generated", p(&data), "--degraded", p(&deg), "--mapped-ratio", "1.0001", "--partial-ratio", "1.0002"]);
    assert_ne!(strict, table);
    let bad = geoforge(&["--config", &cfg, "assess", "--generated", p(&data), "--degraded", p(&deg), "--mapped-ratio", "9"]);
    assert_eq!(bad.status.code(), Some(1));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("degradation.jsonl"), "").unwrap();
    assert_ne!(geoforge(&["--config", &cfg, "assess", "--generated", p(&data), "--degraded", p(&empty)]).status.code(), Some(0));
}

#[test]
fn train_resume_sample_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    let data = dir.path().join("data");
    let ck = |n: &str| dir.path().join(n);
    ok(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("a.ckpt"))]);
    ok(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("b.ckpt"))]);
    let curve = std::fs::read_to_string(ck("a.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);
    assert_eq!(curve, std::fs::read_to_string(ck("b.loss.csv")).unwrap());
    assert_eq!(std::fs::read(ck("a.ckpt")).unwrap(), std::fs::read(ck("b.ckpt")).unwrap());

    ok(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("half.ckpt")), "--steps", "2"]);
    let out = ok(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("resumed.ckpt")), "--resume", p(&ck("half.ckpt"))]);
    assert!(out.contains("step 4"));
    assert_eq!(std::fs::read(ck("a.ckpt")).unwrap(), std::fs::read(ck("resumed.ckpt")).unwrap());
    let mismatched = geoforge(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("x.ckpt")), "--resume", p(&ck("half.ckpt")), "--no-image"]);
    assert_eq!(mismatched.status.code(), Some(1));

    ok(&["--config", &cfg, "train", "--data", p(&data), "--out", p(&ck("ni.ckpt")), "--no-image", "--no-metadata", "--no-prompt"]);

    let s1 = ck("s1");
    let s2 = ck("s2");
    ok(&["--config", &cfg, "sample", "--checkpoint", p(&ck("a.ckpt")), "--data", p(&data), "--out", p(&s1), "--seed", "8"]);
    ok(&["--config", &cfg, "sample", "--checkpoint", p(&ck("a.ckpt")), "--data", p(&data), "--out", p(&s2), "--seed", "8", "--jobs", "2"]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let eval: Vec<serde_json::Value> = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r["split"] == "eval")
        .collect();
    assert!(!eval.is_empty());
    for r in &eval {
        let rel = r["target_path"].as_str().unwrap();
        assert_eq!(std::fs::read(s1.join(rel)).unwrap(), std::fs::read(s2.join(rel)).unwrap());
    }
    let styled = ck("styled");
    let msg = ok(&[
        "--config", &cfg, "sample", "--checkpoint", p(&ck("a.ckpt")), "--data", p(&data), "--out", p(&styled),
        "--split", "all", "--city", "curville", "--style-city", "gridtown",
    ]);
    assert!(msg.starts_with("9 tiles"), "{msg}");
    ok(&["--config", &cfg, "sample", "--checkpoint", p(&ck("ni.ckpt")), "--data", p(&data), "--out", p(&ck("s3"))]);
    ok(&["--config", &cfg, "evaluate", "--generated", p(&s1), "--ground-truth", p(&data)]);
}

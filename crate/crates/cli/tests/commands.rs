use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
[topology]
nodes = 2
gpus_per_node = 4

[model]
num_layers = 6
params_per_layer = 5000000
trainable_fraction = 0.05
batch_per_gpu = 2
fwd_compute_s_per_sample = 0.0002
bwd_compute_s_per_sample = 0.0004
activation_bytes_per_sample = 50000

[[strategy]]
name = "zero3"

[[strategy]]
name = "fcdp"

[[strategy]]
name = "fcdp-comm"

[run]
iterations = 3
window_s = 0.002

[sweep]
internode_bandwidth = ["ib100-rdma-measured", "eth10g-measured"]
"#;

fn shardsim(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_shardsim")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, text) = shardsim(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    let (code, _) = shardsim(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap(), "--sequential"]);
    assert_eq!(code, 0);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 16);
    for f in files.iter().map(|f| f.as_str().unwrap()).chain(["manifest.json"]) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn strategy_filter_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let (code, text) = shardsim(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--axis", "internode_bandwidth", "--strategy", "zero3"]);
    assert_eq!(code, 0, "{text}");
    let csv = fs::read_to_string(out.join("sweep_internode_bandwidth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",zero3,")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &CONFIG.replace("name = \"fcdp\"", "name = \"fsdp\""));
    let (code, text) = shardsim(&["analyze", "--config", &bad, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(text.contains("strategy[1].name"), "{text}");

    let oom = write_config(dir.path(), &CONFIG.replace("name = \"zero3\"", "name = \"zero3\"\ngpu_capacity_bytes = 1000000"));
    let out = dir.path().join("oom");
    let (code, text) = shardsim(&["simulate", "--config", &oom, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1, "{text}");
    assert!(out.join("zero3/oom.json").exists());
    assert!(out.join("fcdp/trace.jsonl").exists());
}

#[test]
fn validate_subset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let (code, text) = shardsim(&["validate", "--config", &cfg, "--out", dir.path().join("v").to_str().unwrap(), "--criterion", "2"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("criterion 2 PASS"));
    assert!(!text.contains("criterion 1"));
}

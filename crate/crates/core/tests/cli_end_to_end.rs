//! The binary's entry point driven through its argument parser.

use std::fs;
use std::path::Path;

use spde_reflect::cli::main_with;

const SMALL: &str = r#"
[model]
family = "porous"
r = 2.0

[space]
modes = 6
gamma = 2.0
delta = 0.75

[coupling]
n = 20

[sim]
dt = 1e-4
horizon = 0.005
paths = 200
seed = 3
checkpoints = 5
x0 = [0.25]
y0 = [-0.25]

[experiments]
run = ["survival", "coupling_inequality", "escape_bound", "supermartingale", "gluing"]
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn only_subdir(root: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn run_writes_artifacts_and_repeats_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("results");
    let out_s = out.to_string_lossy().into_owned();
    assert_eq!(main_with(["spde-reflect", "run", &cfg, "--out", &out_s, "--threads", "2"]), 0);
    let dir = only_subdir(&out);
    for f in ["summary.json", "manifest.json", "survival.csv", "supermartingale.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert!(!dir.join("failure.json").exists());
    let first = fs::read(dir.join("summary.json")).unwrap();
    assert_eq!(
        main_with(["spde-reflect", "run", "--config", &cfg, "--out", &out_s, "--threads", "1"]),
        0
    );
    assert_eq!(first, fs::read(dir.join("summary.json")).unwrap());

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["seed"], 3);
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), manifest["config_hash"].as_str().unwrap());

    let csv = fs::read_to_string(dir.join("survival.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("checkpoint_time,estimate,std_err"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 3);
    // 17 significant digits in scientific notation
    assert_eq!(row[1], "1.0000000000000000e0");
}

#[test]
fn seed_override_changes_the_hash_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_string_lossy().into_owned();
    let text = SMALL.replace("paths = 200", "paths = 20");
    let cfg2 = write(tmp.path(), "tiny.toml", &text);
    assert_eq!(main_with(["spde-reflect", "couple", &cfg2, "--out", &out_s]), 0);
    assert_eq!(main_with(["spde-reflect", "couple", &cfg2, "--out", &out_s, "--seed", "99"]), 0);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn wrong_k_prime_fails_with_the_bound_named() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
[model]
family = "porous"
r = 1.0

[space]
modes = 16
gamma = 1.0
delta = 0.0

[coupling]
n = 100

[sim]
dt = 1e-4
horizon = 0.1
paths = 400
seed = 11
x0 = [0.05]
y0 = [-0.05]

[experiments]
run = ["escape_bound"]
k_prime = -10.0
"#;
    let cfg = write(tmp.path(), "neg.toml", text);
    let out = tmp.path().join("r");
    let out_s = out.to_string_lossy().into_owned();
    assert_eq!(main_with(["spde-reflect", "run", &cfg, "--out", &out_s]), 1);
    let report = fs::read_to_string(only_subdir(&out).join("failure.json")).unwrap();
    assert!(report.contains("escape_bound/bound"), "{report}");
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dup = write(tmp.path(), "dup.toml", &SMALL.replace("r = 2.0", "r = 2.0\nr = 2.0"));
    assert_eq!(main_with(["spde-reflect", "run", &dup]), 2);
    let missing = tmp.path().join("nope.toml").to_string_lossy().into_owned();
    assert_eq!(main_with(["spde-reflect", "run", &missing]), 2);
    assert_eq!(main_with(["spde-reflect", "frobnicate"]), 2);
}

#[test]
fn conditions_fit_rate_and_oracle_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_string_lossy().into_owned();
    let fd = r#"
[model]
family = "fast_diffusion"
r = 0.5

[space]
modes = 8
gamma = 1.0
delta = 0.6

[sim]
dt = 1e-4
horizon = 0.01
paths = 10
x0 = [0.25]
y0 = [-0.25]

[experiments]
kappa = 3.0
condition_samples = 300
scan_limit = 10000
"#;
    let cfg = write(tmp.path(), "fd.toml", fd);
    assert_eq!(main_with(["spde-reflect", "check-conditions", &cfg, "--out", &out_s]), 0);

    let plap = r#"
[model]
family = "plaplace"
p = 2.0

[space]
modes = 6
gamma = 1.0
delta = 1.0

[sim]
dt = 1e-4
horizon = 0.1
paths = 4
x0 = [0.5]
y0 = [-0.5]

[experiments]
expected_rate = -19.739208802178716
"#;
    let cfg = write(tmp.path(), "plap.toml", plap);
    assert_eq!(main_with(["spde-reflect", "fit-rate", &cfg, "--out", &out_s]), 0);

    let lin = SMALL
        .replace("r = 2.0", "r = 1.0")
        .replace("gamma = 2.0", "gamma = 1.0");
    let cfg = write(tmp.path(), "lin.toml", &lin);
    assert_eq!(main_with(["spde-reflect", "oracle", &cfg]), 0);
    let cfg = write(tmp.path(), "nonlin.toml", SMALL);
    assert_eq!(main_with(["spde-reflect", "oracle", &cfg]), 2);
}

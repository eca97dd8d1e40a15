use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "iters = 120
classifier_iters = 120
anneal_t = 80
episodes = 60
hidden_dim = 16
feature_dim = 8
disc_hidden = 8
kmeans_restarts = 2
samples_per_class = 30
";

fn dafec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dafec"))
        .args(args)
        .output()
        .expect("spawn dafec")
}

fn ok(args: &[&str]) -> Output {
    let out = dafec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    conf: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let conf = root.join("small.conf");
    std::fs::write(&conf, SMALL).unwrap();
    let data = root.join("data");
    ok(&["generate", "--config", s(&conf), "--seed", "3", "--out", s(&data)]);
    Fixture {
        _dir: dir,
        root,
        data,
        conf,
    }
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["generate", "--config", s(&f.conf), "--seed", "3", "--out", s(&again)]);
    for file in ["source.jsonl", "target_unlabeled.jsonl", "target_test.jsonl", "gold_labels.tsv"] {
        let a = std::fs::read(f.data.join(file)).unwrap();
        let b = std::fs::read(again.join(file)).unwrap();
        assert_eq!(a, b, "{file}");
        if file.ends_with(".jsonl") {
            dafec_core::sampling::load_dataset(&f.data.join(file)).unwrap();
        }
    }
    // the sidecar is not a dataset
    let err = dafec_core::sampling::load_dataset(&f.data.join("gold_labels.tsv")).unwrap_err();
    assert!(err.to_string().contains("sidecar"), "{err}");
}

#[test]
fn run_all_writes_a_report_and_replays_identically() {
    let f = fixture();
    let out = f.root.join("run");
    ok(&[
        "run-all", "--config", s(&f.conf), "--data", s(&f.data), "--gold", s(&f.data.join("gold_labels.tsv")), "--out", s(&out),
    ]);
    let report = dafec_core::metrics::RunReport::read(&out).unwrap();
    assert_eq!(report.episodes.len(), 60);
    assert!(report.dbi.is_some() && report.fmi.is_some());
    let csv = std::fs::read(out.join("episodes.csv")).unwrap();

    std::fs::remove_file(out.join("episodes.csv")).unwrap();
    ok(&["replay", s(&out.join("manifest.json"))]);
    assert_eq!(std::fs::read(out.join("episodes.csv")).unwrap(), csv);
}

#[test]
fn stage_commands_chain() {
    let f = fixture();
    let st = |name: &str| f.root.join(name);
    let c = s(&f.conf);
    let d = s(&f.data);
    ok(&["train-extractor", "--config", c, "--data", d, "--out", s(&st("s1"))]);
    ok(&["extract", "--checkpoint", s(&st("s1").join("extractor.ckpt")), "--data", d, "--out", s(&st("s2"))]);
    ok(&["mine", "--config", c, "--features", s(&st("s2").join("features.jsonl")), "--data", d, "--out", s(&st("s3"))]);
    ok(&["train-classifier", "--config", c, "--data", d, "--pseudo", s(&st("s3").join("pseudo.jsonl")), "--out", s(&st("s4"))]);
    let ckpt = st("s4").join("classifier.ckpt");
    ok(&["evaluate", "--config", c, "--checkpoint", s(&ckpt), "--data", d, "--episodes", "1000", "--seed", "7", "--out", s(&st("e1"))]);
    ok(&["evaluate", "--config", c, "--checkpoint", s(&ckpt), "--data", d, "--episodes", "1000", "--seed", "7", "--out", s(&st("e2"))]);
    let a = std::fs::read(st("e1").join("episodes.csv")).unwrap();
    let b = std::fs::read(st("e2").join("episodes.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1001);
}

#[test]
fn ablate_emits_one_row_per_variant_and_plots() {
    let f = fixture();
    let out = f.root.join("abl");
    let gold = f.data.join("gold_labels.tsv");
    let o = ok(&[
        "ablate", "--config", s(&f.conf), "--data", s(&f.data), "--gold", s(&gold), "--clusters-sweep", "4", "--out", s(&out),
    ]);
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "variant,accuracy_mean,accuracy_std,dbi,fmi");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_pseudo", "no_cpm_s", "no_cpm_a", "no_cpm_c", "linear_anneal", "clusters_4"]);
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap(), table);

    let plots = f.root.join("plots");
    ok(&[
        "plot", "--runs", s(&out.join("full")), s(&out.join("no_pseudo")), "--gold", s(&gold), "--out", s(&plots),
    ]);
    let bars = std::fs::read_to_string(plots.join("cluster_bars.csv")).unwrap();
    assert_eq!(bars.lines().count(), 3);
    let lambda = std::fs::read_to_string(plots.join("full.lambda.csv")).unwrap();
    assert_eq!(lambda.lines().nth(1), Some("0,0"));
    assert_eq!(lambda.lines().last(), Some("80,1"));
    let pca = std::fs::read_to_string(plots.join("full.pca.csv")).unwrap();
    assert!(pca.lines().skip(1).all(|l| l.split(',').nth(3).is_some_and(|g| g.starts_with('t'))));
    assert!(!plots.join("no_pseudo.pca.csv").exists());
}

#[test]
fn exit_codes() {
    let f = fixture();
    let code = |args: &[&str]| dafec(args).status.code().unwrap();
    assert_eq!(code(&["run-all", "--bogus"]), 1);
    let bad = f.root.join("bad.conf");
    std::fs::write(&bad, "tau = hot\n").unwrap();
    assert_eq!(code(&["run-all", "--config", s(&bad), "--data", s(&f.data), "--out", s(&f.root.join("x"))]), 1);
    assert_eq!(code(&["run-all", "--tau", "-1", "--data", s(&f.data), "--out", s(&f.root.join("x"))]), 1);
    assert_eq!(code(&["run-all", "--config", s(&f.conf), "--data", s(&f.root.join("missing")), "--out", s(&f.root.join("x"))]), 2);
    let out = dafec(&["run-all", "--config", s(&f.conf), "--lr", "1e6", "--data", s(&f.data), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-extractor"));
    assert_eq!(code(&["--help"]), 0);
}

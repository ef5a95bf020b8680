use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riskmpc_cli::{sha256_hex, Config};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_riskmpc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Small and fast: short episodes, tiny network, one epoch.
const SMALL: &str = r#"
[data]
episode_steps = 30

[net]
recurrent = [4]
dense = [4]

[training]
epochs = 1
"#;

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_file_documents_the_defaults() {
    let text = std::fs::read_to_string(workspace_root().join("configs/default.toml")).unwrap();
    let parsed: Config = toml::from_str(&text).unwrap();
    assert_eq!(parsed, Config::default());
}

#[test]
fn echoed_config_reloads_identically() {
    let cfg = Config::default();
    let back: Config = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[scenario]\nbody_radius = 0.5\n").unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("body_radius"), "{}", stderr(&o));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&run(&["run", "--mode", "reckless"])), 2);
    assert_eq!(code(&run(&["fly"])), 2);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen-data", "--config", s(&cfg), "--out", s(out), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.contains("wrote 120 records"), "{stdout}");
    }
    let read = |d: &Path| std::fs::read(d.join("dataset.csv")).unwrap();
    assert_eq!(sha256_hex(&read(&a)), sha256_hex(&read(&b)));
    let echo = std::fs::read_to_string(a.join("gen-data.config.toml")).unwrap();
    assert!(echo.contains("seed = 5"));
    assert!(read(&a).starts_with(b"# riskmpc-dataset v1\n"));
}

#[test]
fn zero_episodes_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    std::fs::write(&cfg, "[data]\nepisodes_per_map = 0\n").unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty dataset"), "{}", stderr(&o));
}

#[test]
fn one_epoch_gives_one_row_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = s(dir.path());
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", out])), 0);
    let o = run(&["train", "--config", s(&cfg), "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], riskmpc_cli::LOSS_SCHEMA);
    assert_eq!(lines[2], "epoch,train,validation");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,"));
    let f = std::fs::File::open(dir.path().join("model.ckpt")).unwrap();
    let model: riskmpc::Model = riskmpc::covpred::load_checkpoint(std::io::BufReader::new(f)).unwrap();
    assert_eq!(model.spec().recurrent, vec![4]);
}

#[test]
fn corrupt_dataset_header_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = s(dir.path());
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", out])), 0);
    let path = dir.path().join("dataset.csv");
    let text = std::fs::read_to_string(&path).unwrap().replacen("sigma_v=0.1", "sigma_v=oops", 1);
    std::fs::write(&path, text).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sigma_v"), "{}", stderr(&o));
}

#[test]
fn open_field_baseline_reaches_the_goal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[scenario]\ncubes = []\n");
    let o = run(&["run", "--config", s(&cfg), "--out", s(dir.path()), "--mode", "baseline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary-baseline-0.txt")).unwrap();
    assert!(summary.starts_with("# riskmpc-episode-summary v1\n"));
    assert!(summary.contains("outcome = reached"));
    let log = std::fs::read_to_string(dir.path().join("episode-baseline-0.csv")).unwrap();
    assert!(log.starts_with("# riskmpc-episode-log v1\nt,x_true,"));
}

#[test]
fn risk_averse_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--out", s(dir.path()), "--mode", "risk-averse"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--model"));
    let o = run(&["compare", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn naive_mode_reports_inflated_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[scenario]\nmax_time = 0.5\n");
    let o = run(&["run", "--config", s(&cfg), "--out", s(dir.path()), "--mode", "naive"]);
    assert_eq!(code(&o), 1, "a timeout is a domain failure");
    let summary = std::fs::read_to_string(dir.path().join("summary-naive-0.txt")).unwrap();
    assert!(summary.contains("effective_radius = 1.4"), "{summary}");
    assert!(summary.contains("outcome = timeout"));
}

fn tiny_model(dir: &Path, cfg: &Path) -> PathBuf {
    let out = s(dir);
    assert_eq!(code(&run(&["gen-data", "--config", s(cfg), "--out", out])), 0);
    assert_eq!(code(&run(&["train", "--config", s(cfg), "--out", out])), 0);
    dir.join("model.ckpt")
}

#[test]
fn single_seed_compare_has_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[scenario]\nmax_time = 1.0\n");
    let model = tiny_model(dir.path(), &cfg);
    let o = run(&["compare", "--config", s(&cfg), "--out", s(dir.path()), "--model", s(&model), "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    for (row, mode) in rows.iter().zip(["baseline", "naive", "risk-averse"]) {
        assert!(row.starts_with(&format!("{mode},1,")), "{row}");
    }
    let traj = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("# riskmpc-trajectories v1\nmode,seed,t,x,y,psi\n"));
}

#[test]
fn without_noise_the_baseline_is_safe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[scenario]\nsigma_w = 0.0\nexact_estimates = true\n");
    let model = tiny_model(dir.path(), &cfg);
    let o = run(&["compare", "--config", s(&cfg), "--out", s(dir.path()), "--model", s(&model), "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let baseline = table.lines().find(|l| l.starts_with("baseline,")).unwrap();
    let fields: Vec<&str> = baseline.split(',').collect();
    assert_eq!(fields[2], "2", "both episodes reach the goal: {baseline}");
    assert_eq!(fields[3], "0", "no collisions: {baseline}");
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[scenario]\nmax_time = 1.0\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run", "--config", s(&cfg), "--out", s(out), "--mode", "baseline", "--seed", "9"]);
        assert_eq!(code(&o), 1);
    }
    let read = |d: &Path| std::fs::read(d.join("episode-baseline-9.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use noisemia_core::attack::Method;
use noisemia_lab::config::ExperimentConfig;
use noisemia_lab::pipeline::{finetune_model, generate_dataset, pretrain_model, run_attack, schedule};
use noisemia_lab::tables;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[schedule]
num_timesteps = 100

[data]
n_pretrain = 128
n_member = 16
n_nonmember = 16

[model]
hidden_dim = 16

[pretrain]
epochs = 4
batch_size = 16

[finetune]
epochs = 4
batch_size = 8

[attack]
i_step = 10
inference_steps = 10

[sweep]
i_steps = [5, 10]
gamma2s = [0.0, 1.0]
"#;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("small.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, out: &str) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_noisemia"));
        c.env_remove("NOISEMIA_OUT").arg("--config").arg(self.config()).arg("--out").arg(self.out(out));
        c
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        self.cmd(out).args(args).output().unwrap()
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON error line ({e}): {text}"))
}

fn small_config(overrides: &[String]) -> ExperimentConfig {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.toml");
    fs::write(&path, SMALL).unwrap();
    ExperimentConfig::load(Some(&path), overrides).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn help_and_usage_errors() {
    let env = Env::new();
    assert_eq!(env.run("o", &["--help"]).status.code(), Some(0));
    assert_eq!(env.run("o", &["no-such-command"]).status.code(), Some(1));
    assert_eq!(env.run("o", &["attack", "--gamma1", "abc"]).status.code(), Some(1));

    let o = env.run("o", &["show-config", "--set", "model.depth=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");

    fs::write(env.config(), "[data]\nn_members = 4\n").unwrap();
    let o = env.run("o", &["show-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");
}

#[test]
fn missing_input_names_the_artifact() {
    let env = Env::new();
    let o = env.run("empty", &["attack"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "missing_input");
    assert!(e["error"]["message"].as_str().unwrap().contains("dataset.bin"), "{e}");

    ok(&env.run("empty", &["gen-data"]));
    let o = env.run("empty", &["finetune"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["error"]["message"].as_str().unwrap().contains("pretrained.ckpt"));
}

#[test]
fn corrupted_artifact_is_a_format_error() {
    let env = Env::new();
    ok(&env.run("o", &["gen-data"]));
    let path = env.out("o").join("dataset.bin");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let o = env.run("o", &["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "format");
}

#[test]
fn flags_and_set_override_the_config() {
    let env = Env::new();
    let show = |args: &[&str]| {
        let o = env.run("o", args);
        ok(&o);
        String::from_utf8(o.stdout).unwrap()
    };
    let base = show(&["show-config"]);
    let digest = base.lines().next().unwrap().to_string();
    assert!(digest.starts_with("# config_digest="));
    assert_eq!(digest.len(), "# config_digest=".len() + 64);

    let set = show(&["show-config", "--set", "finetune.epochs=7", "--seed", "9"]);
    assert!(set.contains("epochs = 7") && set.contains("seed = 9"), "{set}");
    assert_ne!(set.lines().next().unwrap(), digest);

    // The output directory is not part of the experiment identity.
    let elsewhere = Command::new(env!("CARGO_BIN_EXE_noisemia"))
        .args(["--config".as_ref(), env.config().as_os_str(), "--out".as_ref(), env.out("other").as_os_str()])
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(elsewhere.stdout).unwrap(), base);

    ok(&env.run("o", &["gen-data"]));
    ok(&env.run("o", &["pretrain", "--epochs", "3"]));
    let loss = fs::read_to_string(env.out("o").join("pretrain_loss.csv")).unwrap();
    let parsed = tables::parse_table(&loss, "epoch,loss,skipped").unwrap();
    assert_eq!(parsed.rows.len(), 3);
}

#[test]
fn output_directory_from_environment() {
    let env = Env::new();
    let target = env.out("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_noisemia"))
        .env("NOISEMIA_OUT", &target)
        .arg("--config")
        .arg(env.config())
        .arg("schedule-report")
        .output()
        .unwrap();
    ok(&o);
    let csv = fs::read_to_string(target.join("schedule_report.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("kind,snr_T,sqrt_alpha_bar_T"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn run_all_is_independent_of_jobs() {
    let env = Env::new();
    let one = env.run("one", &["run-all", "--jobs", "1"]);
    ok(&one);
    ok(&env.run("three", &["run-all", "--jobs", "3"]));
    let (a, b) = (files(&env.out("one")), files(&env.out("three")));
    assert_eq!(a.iter().map(|f| &f.0).collect::<Vec<_>>(), b.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.1 == y.1, "{} differs between job counts", x.0);
    }

    let stdout = String::from_utf8(one.stdout).unwrap();
    for m in ["inversion", "naive", "loss_baseline"] {
        assert!(stdout.contains(m), "{stdout}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(env.out("one").join("report.json")).unwrap()).unwrap();
    let digest = small_config(&[]).digest_hex();
    assert_eq!(report["config_digest"], digest.as_str());
    assert_eq!(report["scores_digest"], digest.as_str());
    assert_eq!(report["reports"].as_array().unwrap().len(), 3);
    for name in ["scores_inversion.csv", "distribution_naive.csv", "finetune_loss.csv", "schedule_report.csv"] {
        let text = fs::read_to_string(env.out("one").join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_digest={digest}"), "{name}");
    }
}

#[test]
fn evaluate_refuses_mixed_score_files() {
    let env = Env::new();
    ok(&env.run("o", &["run-all"]));
    ok(&env.run("o", &["evaluate"]));
    ok(&env.run("o", &["attack", "--methods", "naive", "--gamma1", "2.0"]));
    let o = env.run("o", &["evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "digest_mismatch");
    assert!(e["error"]["message"].as_str().unwrap().contains("scores_naive.csv"), "{e}");
}

#[test]
fn staged_run_matches_in_memory_run() {
    let env = Env::new();
    for stage in ["gen-data", "pretrain", "finetune", "attack"] {
        ok(&env.run("o", &[stage, "--jobs", "2"]));
    }

    let cfg = small_config(&[]);
    let set = generate_dataset(&cfg).unwrap();
    let s = schedule(&cfg).unwrap();
    let base = pretrain_model(&cfg, &set, &s).unwrap().model;
    let target = finetune_model(&cfg, &base, &set, &s).unwrap().model;
    let attack = cfg.attack_config(cfg.attack.i_step, cfg.attack.gamma2).unwrap();
    let out = run_attack(&cfg, &attack, &Method::ALL, &set, &s, &base, &target, 1).unwrap();
    for m in Method::ALL {
        let subset: Vec<_> = out.records.iter().filter(|r| r.method == m).copied().collect();
        let expected = tables::scores_csv(&cfg.digest_hex(), &subset);
        let written = fs::read_to_string(env.out("o").join(format!("scores_{}.csv", m.name()))).unwrap();
        assert_eq!(written, expected, "{}", m.name());
    }
}

#[test]
fn sweep_writes_every_cell() {
    let env = Env::new();
    for stage in ["gen-data", "pretrain", "finetune"] {
        ok(&env.run("o", &[stage]));
    }
    ok(&env.run("o", &["sweep", "--jobs", "2"]));
    let csv = fs::read_to_string(env.out("o").join("sweep.csv")).unwrap();
    let parsed = tables::parse_table(&csv, "i_step,gamma2,auc,asr").unwrap();
    assert_eq!(parsed.rows.len(), 4);
    for row in &parsed.rows {
        let auc: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

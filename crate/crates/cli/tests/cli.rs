use std::fs;
use std::path::{Path, PathBuf};

use act_cli::{Cli, CliError, RunManifest};
use act_core::io::read_csv_column;
use clap::Parser;

const TINY: &str = r#"
[env]
name = "cartpole"
[channel]
[ppo]
number_of_environments = 2
number_of_updates = 4
update_period = 32
epochs_per_update = 2
[es]
population_size = 4
number_of_generations = 2
[meta]
master_seed = 3
number_of_rollouts = 1
oa_hidden_layers = 1
oa_hidden_size = 8
eval_victims = 2
[meta.test_time]
eval_episodes = 2
eval_seeds = 2
"#;

fn act(args: &[&str]) -> Result<(), CliError> {
    let cli = Cli::try_parse_from(std::iter::once("act").chain(args.iter().copied())).expect("valid arguments");
    act_cli::run(cli, None)
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ally_and_adversary_share_generation_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("ally"), dir.path().join("adv"));
    act(&["train-traintime", "--config", s(&cfg), "--mode", "ally", "--out", s(&a), "--workers", "2"]).unwrap();
    act(&["train-traintime", "--config", s(&cfg), "--mode", "adversary", "--out", s(&b), "--workers", "2"]).unwrap();
    let fa = read_csv_column(&a.join("fitness_history.csv"), "mean_fitness").unwrap();
    let fb = read_csv_column(&b.join("fitness_history.csv"), "mean_fitness").unwrap();
    assert_eq!(fa[0], -fb[0]);
}

#[test]
fn missing_section_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("[es]", "[unused]"));
    let err = act(&["baseline", "--config", s(&cfg), "--adversary", "zeroes", "--out", s(&dir.path().join("o"))])
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let cfg = write_config(dir.path(), "bad2.toml", &TINY.replace("[es]\npopulation_size = 4\nnumber_of_generations = 2\n", ""));
    let err = act(&["baseline", "--config", s(&cfg), "--adversary", "zeroes", "--out", s(&dir.path().join("o"))])
        .unwrap_err();
    assert!(err.to_string().contains("[es]"), "{err}");
}

#[test]
fn single_seed_baseline_has_zero_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("b");
    act(&["baseline", "--config", s(&cfg), "--adversary", "random", "--seeds", "1", "--out", s(&out)]).unwrap();
    let se = read_csv_column(&out.join("victim_curves.csv"), "stderr").unwrap();
    assert_eq!(se.len(), 4);
    assert!(se.iter().all(|x| *x == 0.0));
}

#[test]
fn rerun_reproduces_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let a = dir.path().join("a");
    act(&["baseline", "--config", s(&cfg), "--adversary", "zeroes", "--seeds", "2", "--out", s(&a), "--workers", "1"])
        .unwrap();
    let b = dir.path().join("b");
    act(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&b), "--workers", "3"]).unwrap();
    let ma = RunManifest::read(&a.join("manifest.json")).unwrap();
    let mb = RunManifest::read(&b.join("manifest.json")).unwrap();
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.config_hash, mb.config_hash);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("o");
    act(&["verify", "prop1", "--config", s(&write_config(dir.path(), "c.toml", CHAIN)), "--out", s(&out), "--seed", "11"])
        .unwrap();
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.seeds.unwrap().master, 11);
    let out2 = dir.path().join("o2");
    act(&["baseline", "--config", s(&cfg), "--adversary", "zeroes", "--seeds", "1", "--out", s(&out2), "--seed", "5"])
        .unwrap();
    assert!(fs::read_to_string(out2.join("config.toml")).unwrap().contains("master_seed = 5"));
}

const CHAIN: &str = "[env]\nname = \"chain\"\nn_cells = 8\n[channel]\n[ppo]\n[es]\n[meta]\n";

#[test]
fn verify_prop1_passes_on_default_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CHAIN);
    let out = dir.path().join("p1");
    act(&["verify", "prop1", "--config", s(&cfg), "--out", s(&out)]).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("prop1.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn verify_failure_exits_with_verification_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CHAIN);
    // An MLP victim shares weights across messages, so it is not immune.
    let err = act(&["verify", "prop1", "--victim", "mlp", "--config", s(&cfg), "--out", s(&dir.path().join("m"))])
        .unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(dir.path().join("m/manifest.json").exists());
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let missing = dir.path().join("nope.params");
    let err = act(&[
        "oracle", "--config", s(&cfg), "--kind", "testtime-ppo", "--phi", s(&missing), "--out", s(&dir.path().join("o")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.params"), "{err}");

    let t = dir.path().join("t");
    act(&["train-traintime", "--config", s(&cfg), "--mode", "ally", "--out", s(&t)]).unwrap();
    let wider = write_config(dir.path(), "wide.toml", &TINY.replace("oa_hidden_size = 8", "oa_hidden_size = 9"));
    let err = act(&[
        "analyze", "interference", "--config", s(&wider), "--phi", s(&t.join("phi.params")), "--victims", "1", "--out",
        s(&dir.path().join("i")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("expected layers [4, 9, 2]"), "{err}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let four = write_config(dir.path(), "four.toml", &TINY.replace("number_of_generations = 2", "number_of_generations = 4"));
    let two = write_config(dir.path(), "two.toml", TINY);
    let full = dir.path().join("full");
    act(&["train-traintime", "--config", s(&four), "--mode", "adversary", "--out", s(&full)]).unwrap();
    let half = dir.path().join("half");
    act(&["train-traintime", "--config", s(&two), "--mode", "adversary", "--out", s(&half)]).unwrap();
    let resumed = dir.path().join("resumed");
    act(&[
        "train-traintime", "--config", s(&four), "--mode", "adversary", "--out", s(&resumed), "--resume",
        s(&half.join("es_checkpoint.json")),
    ])
    .unwrap();
    for f in ["fitness_history.csv", "victim_curves.csv", "phi.params"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
    let other = write_config(dir.path(), "other.toml", &TINY.replace("master_seed = 3", "master_seed = 4"));
    let err = act(&[
        "train-traintime", "--config", s(&other), "--mode", "adversary", "--out", s(&dir.path().join("x")), "--resume",
        s(&half.join("es_checkpoint.json")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn curves_command_aggregates_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for (i, vals) in [[1.0, 2.0], [3.0, 4.0]].iter().enumerate() {
        let p = dir.path().join(format!("t{i}.csv"));
        fs::write(&p, format!("update_index,mean_reward\n0,{}\n1,{}\n", vals[0], vals[1])).unwrap();
        inputs.push(p);
    }
    let out = dir.path().join("c");
    act(&["analyze", "curves", "--inputs", s(&inputs[0]), s(&inputs[1]), "--out", s(&out)]).unwrap();
    assert_eq!(read_csv_column(&out.join("curves.csv"), "mean").unwrap(), vec![2.0, 3.0]);
    assert_eq!(read_csv_column(&out.join("curves.csv"), "stderr").unwrap(), vec![1.0, 1.0]);
}

use std::fs;
use std::path::Path;
use std::process::Command;

use acfl::energy::EnergyScenario;
use acfl::federation::ExperimentConfig;
use acfl::lab::LabConfig;
use acfl::models::ModelKind;
use acfl::selection::Strategy;
use acfl_cli::commands::{self, AUCTION_CSV, ENERGY_CSV, MANIFEST, METRICS_CSV, SUMMARY};
use acfl_cli::config::lab_from_document;
use acfl_cli::{parse_config, parse_config_str, to_toml};

const TINY: &str = r#"
[experiment]
rounds = 3
seed = 11

[data]
train_per_class = 40
test_per_class = 10

[partition]
n_clients = 20
mean_size = 24

[selection]
select_ratio = 0.2
"#;

fn sets(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn empty_config_gives_table_defaults() {
    let c = parse_config(None, &[]).unwrap();
    assert_eq!(c, parse_config_str("", &[]).unwrap());
    assert_eq!(c.clustering.window, 50);
    assert_eq!(c.energy.rate_percent, 0.2);
    let e = &c.economics;
    assert_eq!((e.phi, e.vartheta, e.chi, e.zeta, e.log_base), (0.5, 0.5, 0.7, 0.3, 2.0));
    assert_eq!((e.weight_service, e.weight_resource), (0.3, 0.7));
    assert_eq!(e.sample_scale, 600.0);
    assert_eq!(c, ExperimentConfig::default());
}

#[test]
fn ten_percent_of_a_hundred() {
    let c = parse_config_str("", &sets(&["selection.select_ratio=0.1", "partition.n_clients=100"])).unwrap();
    assert_eq!(c.winners_per_round(), 10);
    assert_eq!(c.cluster_count(), 10);
}

#[test]
fn chi_completes_zeta() {
    let c = parse_config_str("[economics]\nchi = 0.6\n", &[]).unwrap();
    assert!((c.economics.zeta - 0.4).abs() < 1e-15);
    let c = parse_config_str("", &sets(&["economics.zeta=0.25"])).unwrap();
    assert_eq!(c.economics.chi, 0.75);
}

#[test]
fn sample_scale_follows_mean_size() {
    let c = parse_config_str("[partition]\nmean_size = 120\n", &[]).unwrap();
    assert_eq!(c.economics.sample_scale, 120.0);
    let c = parse_config_str("[partition]\nmean_size = 120\n[economics]\nsample_scale = 7.0\n", &[]).unwrap();
    assert_eq!(c.economics.sample_scale, 7.0);
}

#[test]
fn overrides_apply_after_file() {
    let c = parse_config_str(TINY, &sets(&["experiment.rounds=9", "experiment.strategy=random"])).unwrap();
    assert_eq!(c.experiment.rounds, 9);
    assert_eq!(c.experiment.strategy, Strategy::Random);
    let c = parse_config_str("", &sets(&["energy.initial.scenario=truncated_normal", "energy.initial.mean=75.0",
        "energy.initial.std=10.0", "energy.initial.lo=50.0", "energy.initial.hi=100.0"])).unwrap();
    assert_eq!(c.energy.initial, EnergyScenario::case_two());
}

#[test]
fn unknown_keys_are_rejected() {
    for bad in ["[experiment]\nround = 3\n", "[nonsense]\nx = 1\n", "[economics]\nphii = 0.5\n"] {
        assert!(parse_config_str(bad, &[]).is_err(), "{bad}");
    }
    assert!(parse_config_str("", &sets(&["selection.ratio=0.1"])).is_err());
    assert!(parse_config_str("", &sets(&["no_equals_sign"])).is_err());
}

#[test]
fn invalid_values_name_key_and_constraint() {
    let msg = format!("{:#}", parse_config_str("", &sets(&["selection.select_ratio=1.5"])).unwrap_err());
    assert!(msg.contains("selection.select_ratio") && msg.contains("1.5") && msg.contains("(0,1]"), "{msg}");
    let msg = format!("{:#}", parse_config_str("", &sets(&["experiment.rounds=0"])).unwrap_err());
    assert!(msg.contains("experiment.rounds") && msg.contains(">= 1"), "{msg}");
    let msg = format!("{:#}", parse_config_str("", &sets(&["economics.phi=2.0"])).unwrap_err());
    assert!(msg.contains("phi") && msg.contains("(0,1)"), "{msg}");
}

#[test]
fn config_round_trips() {
    let mut c = ExperimentConfig::default();
    assert_eq!(parse_config_str(&to_toml(&c).unwrap(), &[]).unwrap(), c);
    c.model = ModelKind::Mlp { hidden: 32 };
    c.energy.initial = EnergyScenario::case_two();
    c.economics.penalize_participation = true;
    c.economics.chi = 0.55;
    c.economics.zeta = 0.45;
    c.experiment.planned_rounds = Some(50);
    c.partition.dominant_fraction = 0.8;
    c.data.separation = 1.0 / 3.0;
    c.clustering.clusters = Some(4);
    assert_eq!(parse_config_str(&to_toml(&c).unwrap(), &[]).unwrap(), c);
}

#[test]
fn manifest_reproduces_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(TINY, &[]).unwrap();
    let first = dir.path().join("first");
    commands::experiment(&cfg, &first).unwrap();
    for f in [METRICS_CSV, AUCTION_CSV, ENERGY_CSV, MANIFEST, SUMMARY] {
        assert!(first.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(first.join(MANIFEST)).unwrap();
    assert!(manifest.contains("[manifest]") && manifest.contains("elapsed_seconds"));
    let again = parse_config(Some(&first.join(MANIFEST)), &[]).unwrap();
    assert_eq!(again, cfg);
    let second = dir.path().join("second");
    commands::experiment(&again, &second).unwrap();
    for f in [METRICS_CSV, AUCTION_CSV, ENERGY_CSV] {
        assert_eq!(read(first.join(f)), read(second.join(f)), "{f}");
    }
}

#[test]
fn compare_writes_one_trace_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(TINY, &[]).unwrap();
    let runs = commands::compare(&cfg, &Strategy::ALL, dir.path()).unwrap();
    assert_eq!(runs.len(), 3);
    for st in Strategy::ALL {
        assert!(dir.path().join(st.name()).join(METRICS_CSV).exists());
    }
    let summary = fs::read_to_string(dir.path().join(SUMMARY)).unwrap();
    assert!(summary.starts_with("round,strategy,accuracy,energy_std"));
    assert_eq!(summary.lines().filter(|l| l.starts_with("3,")).count(), 3);
    // the shared round-0 energy snapshot shows the strategies start from the same batteries
    let e0 = |st: Strategy| {
        let text = fs::read_to_string(dir.path().join(st.name()).join(ENERGY_CSV)).unwrap();
        text.lines().take_while(|l| !l.starts_with("1,")).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(e0(Strategy::Random), e0(Strategy::ClusterAuction));
}

#[test]
fn lab_section_parses_and_reports() {
    let doc = "[lab]\nsteps = 80\nreplicates = 8\nmc_draws = 500\n".parse().unwrap();
    let lab = lab_from_document(&doc).unwrap();
    assert_eq!(lab, LabConfig { steps: 80, replicates: 8, mc_draws: 500, ..LabConfig::default() });
    assert!(lab_from_document(&"[lab]\nstep = 3\n".parse().unwrap()).is_err());
    let dir = tempfile::tempdir().unwrap();
    commands::convergence_lab(&lab, dir.path()).unwrap();
    let summary = fs::read_to_string(dir.path().join(SUMMARY)).unwrap();
    assert!(summary.lines().any(|l| l == "convergence-lab PASS" || l == "convergence-lab FAIL"), "{summary}");
    assert!(fs::read_to_string(dir.path().join("envelope.csv")).unwrap().lines().count() == 81);
}

#[test]
fn partition_report_lists_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(TINY, &[]).unwrap();
    let s = commands::partition_report(&cfg, dir.path()).unwrap();
    assert!(s.starts_with("20 clients"));
    let table = fs::read_to_string(dir.path().join("partition.csv")).unwrap();
    assert_eq!(table.lines().count(), 21);
}

fn acfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acfl"))
}

#[test]
fn binary_runs_and_reruns_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let a = dir.path().join("a");
    let status = acfl()
        .args(["experiment", "--config"])
        .arg(&cfg_path)
        .args(["--strategy", "cluster_random", "--rounds", "2", "--seed", "3", "--out"])
        .arg(&a)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let b = dir.path().join("b");
    let status = acfl().args(["experiment", "--config"]).arg(a.join(MANIFEST)).arg("--out").arg(&b).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in [METRICS_CSV, AUCTION_CSV, ENERGY_CSV] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let metrics = fs::read_to_string(a.join(METRICS_CSV)).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(1).unwrap().starts_with("1,cluster_random,"));
}

#[test]
fn binary_reports_bad_config() {
    let out = acfl().args(["experiment", "--set", "selection.select_ratio=0"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("selection.select_ratio"), "{err}");
}

#[test]
fn config_fuzz_seeds() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_parse");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).unwrap();
        match parse_config_str(&text, &[]) {
            Ok(cfg) => {
                assert!(name == "empty" || name == "tiny", "{name}");
                assert_eq!(parse_config_str(&to_toml(&cfg).unwrap(), &[]).unwrap(), cfg);
            }
            Err(_) => assert!(name == "unknown_key" || name == "bad_value", "{name}"),
        }
    }
}

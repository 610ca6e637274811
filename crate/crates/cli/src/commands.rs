use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use acfl::datasets::label_histogram;
use acfl::datasets::tv_distance;
use acfl::federation::{
    load_data, partition_clients, run_experiment, write_auction_csv, write_energy_csv, write_metrics_csv,
    ExperimentConfig, ExperimentOutcome,
};
use acfl::lab::{run_lab, LabConfig, LabReport};
use acfl::rng::{stream_seed, Stream};
use acfl::selection::Strategy;
use anyhow::{Context, Result};
use serde::Serialize;
use toml::{Table, Value};

use crate::config::{experiment_table, MANIFEST_TABLE};

pub const METRICS_CSV: &str = "metrics.csv";
pub const AUCTION_CSV: &str = "auction_trace.csv";
pub const ENERGY_CSV: &str = "energy.csv";
pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.txt";

/// Derived per-stage seeds, in hex since TOML integers are signed.
#[derive(Debug, Clone, Serialize)]
struct StreamSeeds {
    partition: String,
    energy: String,
    clustering: String,
    model_init: String,
    synth_train: String,
    synth_test: String,
    lab: String,
}

impl StreamSeeds {
    fn of(seed: u64) -> Self {
        let s = |st| format!("{:016x}", stream_seed(seed, st, &[]));
        Self {
            partition: s(Stream::Partition),
            energy: s(Stream::Energy),
            clustering: s(Stream::Clustering),
            model_init: s(Stream::ModelInit),
            synth_train: s(Stream::SynthTrain),
            synth_test: s(Stream::SynthTest),
            lab: s(Stream::Lab),
        }
    }
}

/// Provenance block written next to every run's artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub seed: u64,
    streams: StreamSeeds,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, artifacts: &[&str]) -> Self {
        Self {
            tool: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            command: command.into(),
            seed,
            streams: StreamSeeds::of(seed),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_seconds: None,
        }
    }

    fn write(&self, dir: &Path, mut config: Table) -> Result<()> {
        config.insert(MANIFEST_TABLE.into(), Value::try_from(self)?);
        fs::write(dir.join(MANIFEST), toml::to_string(&config)?).context("writing manifest")
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn write_traces(dir: &Path, out: &ExperimentOutcome) -> Result<()> {
    write_metrics_csv(create(dir, METRICS_CSV)?, &out.metric_rows())?;
    write_auction_csv(create(dir, AUCTION_CSV)?, &out.auction)?;
    write_energy_csv(create(dir, ENERGY_CSV)?, &out.energy)?;
    Ok(())
}

pub fn experiment_summary(cfg: &ExperimentConfig, out: &ExperimentOutcome) -> String {
    let mut s = String::new();
    let strategy = cfg.experiment.strategy;
    let _ = writeln!(s, "strategy {strategy}, seed {}, {} of {} rounds", cfg.experiment.seed, out.records.len(), cfg.experiment.rounds);
    if let Some(last) = out.records.last() {
        let _ = writeln!(s, "final accuracy {:.4}, test loss {:.4}, energy std {:.5}", last.accuracy, last.test_loss, last.energy_std);
    }
    let _ = writeln!(
        s,
        "paid to clients {:.4}, kept by server {:.4}",
        out.ledger.client_totals.iter().sum::<f64>(),
        out.ledger.server_per_round.iter().sum::<f64>()
    );
    if let Some(h) = &out.halted {
        let _ = writeln!(s, "halted: {h}");
    }
    s
}

/// Runs one experiment and writes its traces, manifest, and summary into `dir`.
pub fn experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let table = experiment_table(cfg)?;
    let mut manifest =
        RunManifest::new("experiment", cfg.experiment.seed, &[METRICS_CSV, AUCTION_CSV, ENERGY_CSV, SUMMARY]);
    manifest.write(dir, table.clone())?;
    let start = Instant::now();
    let out = run_experiment(cfg)?;
    write_traces(dir, &out)?;
    fs::write(dir.join(SUMMARY), experiment_summary(cfg, &out))?;
    manifest.elapsed_seconds = Some(start.elapsed().as_secs_f64());
    manifest.write(dir, table)?;
    Ok(out)
}

/// Rounds reported in comparison tables: every tenth round and the last.
fn checkpoints(rounds: usize) -> Vec<usize> {
    let mut r: Vec<usize> = (10..rounds).step_by(10).collect();
    r.push(rounds);
    r
}

pub fn compare_summary(runs: &[(Strategy, ExperimentOutcome)]) -> String {
    let mut s = String::new();
    let Some((base, base_out)) = runs.first() else { return s };
    let rounds = runs.iter().map(|(_, o)| o.records.len()).max().unwrap_or(0);
    let _ = writeln!(s, "round,strategy,accuracy,energy_std,accuracy_delta,energy_std_delta");
    for t in checkpoints(rounds) {
        let at = |o: &ExperimentOutcome| o.records.get(t - 1).map(|r| (r.accuracy, r.energy_std));
        let Some((a0, e0)) = at(base_out) else { continue };
        for (st, out) in runs {
            if let Some((a, e)) = at(out) {
                let _ = writeln!(s, "{t},{st},{a:.4},{e:.5},{:+.4},{:+.5}", a - a0, e - e0);
            }
        }
    }
    let _ = writeln!(s, "# deltas are relative to {base}");
    for (st, out) in runs {
        if let Some(h) = &out.halted {
            let _ = writeln!(s, "# {st} halted: {h}");
        }
    }
    s
}

/// Runs each strategy on identical data, energy, and clustering seeds.
pub fn compare(cfg: &ExperimentConfig, strategies: &[Strategy], dir: &Path) -> Result<Vec<(Strategy, ExperimentOutcome)>> {
    fs::create_dir_all(dir)?;
    let mut runs = Vec::new();
    for &st in strategies {
        let mut c = cfg.clone();
        c.experiment.strategy = st;
        let out = experiment(&c, &dir.join(st.name()))?;
        runs.push((st, out));
    }
    fs::write(dir.join(SUMMARY), compare_summary(&runs))?;
    Ok(runs)
}

pub fn lab_summary(r: &LabReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "stochastic {}", r.stochastic.summary_line());
    let _ = writeln!(s, "noiseless {}", r.noiseless.summary_line());
    let _ = writeln!(
        s,
        "noiseless log-gap fit: slope {:.5} (bound {:.5}), R^2 {:.6}",
        r.noiseless_slope,
        (1.0 - r.noiseless.theorem.b1).ln() * 0.9,
        r.noiseless_r2
    );
    let c = &r.stochastic.constants;
    let _ = writeln!(
        s,
        "mu {:.4} mu_G {:.4} M {:.4} M_G {:.4} mu_E {:.4} mu_GE {:.4} M_GE {:.4}",
        c.mu, c.mu_g, c.m, c.m_g, c.mu_e, c.mu_ge, c.m_ge
    );
    let _ = writeln!(s, "convergence-lab {}", if r.passed() { "PASS" } else { "FAIL" });
    s
}

pub fn convergence_lab(cfg: &LabConfig, dir: &Path) -> Result<LabReport> {
    fs::create_dir_all(dir)?;
    let mut table = Table::new();
    table.insert(crate::config::LAB_TABLE.into(), Value::try_from(cfg)?);
    let mut manifest = RunManifest::new("convergence-lab", cfg.seed, &["envelope.csv", "noiseless.csv", SUMMARY]);
    manifest.write(dir, table.clone())?;
    let start = Instant::now();
    let r = run_lab(cfg)?;
    fs::write(dir.join("envelope.csv"), r.stochastic.to_csv())?;
    fs::write(dir.join("noiseless.csv"), r.noiseless.to_csv())?;
    fs::write(dir.join(SUMMARY), lab_summary(&r))?;
    manifest.elapsed_seconds = Some(start.elapsed().as_secs_f64());
    manifest.write(dir, table)?;
    Ok(r)
}

/// Per-client size and label table plus TV distances to the pooled label mix.
pub fn partition_report(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let (pool, _) = load_data(cfg)?;
    let clients = partition_clients(cfg, &pool)?;
    let global = label_histogram(&clients)?;
    let mut table = String::from("client_id,size,train,validation,test,dominant_label,dominant_share,tv_distance\n");
    let mut tvs = Vec::with_capacity(clients.len());
    for c in &clients {
        let tv = tv_distance(&label_histogram([c])?, &global)?;
        tvs.push(tv);
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{:.4},{:.4}",
            c.id,
            c.size,
            c.train.len(),
            c.validation.len(),
            c.test.len(),
            c.dominant_label,
            c.label_count(c.dominant_label) as f64 / c.size as f64,
            tv
        );
    }
    fs::write(dir.join("partition.csv"), &table)?;
    let sizes: Vec<usize> = clients.iter().map(|c| c.size).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} clients, sizes {}..{} (mean {:.1}), total {}",
        clients.len(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0),
        sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
        sizes.iter().sum::<usize>()
    );
    let mean_tv = tvs.iter().sum::<f64>() / tvs.len().max(1) as f64;
    let _ = writeln!(s, "TV distance to pooled labels: mean {mean_tv:.4}, max {:.4}", tvs.iter().copied().fold(0.0, f64::max));
    let _ = writeln!(s, "pooled label mix: {}", global.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" "));
    fs::write(dir.join(SUMMARY), &s)?;
    Ok(s)
}

pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

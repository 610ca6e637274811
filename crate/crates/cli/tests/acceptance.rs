//! Desk-scale acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use acfl::clustering::{inertia_of, kmeans};
use acfl::datasets::{partition, synth_gaussian, PartitionSpec};
use acfl::economics::{best_response_check, optimal_bid, RewardModel, WinEstimator};
use acfl::energy::EnergyScenario;
use acfl::federation::{run_experiment, ExperimentConfig, ExperimentOutcome};
use acfl::lab::{run_lab, LabConfig};
use acfl::models::{gradient, loss, ModelKind, ModelParams, ModelShape};
use acfl::rng::rng_from;
use acfl::selection::Strategy;
use acfl_cli::commands::{self, AUCTION_CSV, ENERGY_CSV, MANIFEST, METRICS_CSV};
use acfl_cli::parse_config;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn base(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment.seed = seed;
    c.experiment.strategy = strategy;
    c.experiment.rounds = 40;
    c.partition.n_clients = 100;
    c.partition.dominant_fraction = 1.0;
    c.partition.mean_size = 600;
    c.selection.select_ratio = 0.1;
    c.model = ModelKind::Mlp { hidden: 32 };
    c.economics.penalize_participation = true;
    c
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

type Runs = BTreeMap<(Strategy, u64), ExperimentOutcome>;

fn final_accuracy(o: &ExperimentOutcome) -> f64 {
    o.records.last().map_or(0.0, |r| r.accuracy)
}

fn convergence_ordering(runs: &Runs) -> Outcome {
    let mean = |st| SEEDS.iter().map(|&s| final_accuracy(&runs[&(st, s)])).sum::<f64>() / SEEDS.len() as f64;
    let (r, c, a) = (mean(Strategy::Random), mean(Strategy::ClusterRandom), mean(Strategy::ClusterAuction));
    let complete = runs.values().all(|o| o.records.len() == 40 && o.halted.is_none());
    outcome(
        complete && a >= c && c >= r && 100.0 * (c - r) >= 5.0,
        format!("mean final accuracy random {r:.4}, cluster_random {c:.4}, cluster_auction {a:.4}; cluster gain {:.1} pts", 100.0 * (c - r)),
    )
}

fn energy_balance() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let std_of = |st| {
            let mut c = base(st, seed);
            c.energy.initial = EnergyScenario::case_two();
            let o = run_experiment(&c).expect("energy run");
            o.records.last().map_or(f64::NAN, |r| r.energy_std)
        };
        let (r, a) = (std_of(Strategy::Random), std_of(Strategy::ClusterAuction));
        wins += usize::from(a < r);
        parts.push(format!("seed {seed}: auction {a:.5} vs random {r:.5}"));
    }
    outcome(wins == SEEDS.len(), format!("{wins}/3 seeds lower; {}", parts.join("; ")))
}

fn bid_reward_trends(runs: &Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let o = &runs[&(Strategy::ClusterAuction, seed)];
        let rounds: Vec<f64> = o.records.iter().map(|r| r.round as f64).collect();
        let bids: Vec<f64> = o.records.iter().map(|r| r.mean_bid.unwrap_or(f64::NAN)).collect();
        let server: Vec<f64> = o.records.iter().map(|r| r.server_reward).collect();
        let (rb, rs) = (spearman(&rounds, &bids), spearman(&rounds, &server));
        pass &= rb >= 0.8 && rs <= -0.8;
        parts.push(format!("seed {seed}: bid rho {rb:.3}, server rho {rs:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn nash_equilibrium() -> Outcome {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (n, k) in [(5, 1), (10, 1), (10, 2)] {
        for cost in [0.1, 0.5, 0.9] {
            let seed = (n * 100 + k * 10) as u64 + (cost * 10.0) as u64;
            let r = best_response_check(cost, n, k, 100_000, seed, WinEstimator::PlugIn).expect("best response");
            let b = optimal_bid(cost, n, k).expect("b*");
            let ok = r.distance <= 0.05 + 1e-12 && r.is_unimodal(3.0);
            worst = worst.max(r.distance);
            if !ok {
                notes.push(format!("({n},{k},{cost}) argmax {:.4} vs b* {b:.4}", r.argmax_bid));
            }
            pass &= ok;
        }
    }
    outcome(pass, format!("9 cases, worst |argmax - b*| {worst:.4}{}", if notes.is_empty() { String::new() } else { format!("; {}", notes.join(", ")) }))
}

fn envelope() -> Outcome {
    let start = Instant::now();
    let r = run_lab(&LabConfig::default()).expect("lab");
    let secs = start.elapsed().as_secs_f64();
    let s = &r.stochastic;
    outcome(
        s.passed && r.noiseless_r2 >= 0.999 && r.geometric_ok() && secs < 60.0,
        format!(
            "{:.1}% steps under envelope, plateau {:.3} vs A1 {:.3}, noiseless R^2 {:.6}, {secs:.1}s",
            100.0 * s.fraction_within,
            s.plateau,
            s.theorem.a1,
            r.noiseless_r2
        ),
    )
}

fn reward_conservation(runs: &Runs) -> Outcome {
    let check = |o: &ExperimentOutcome, cfg: &ExperimentConfig, proportional: bool| {
        let per_round = cfg.experiment.total_income / cfg.planned_rounds() as f64;
        o.records.iter().map(|r| {
            let total = if proportional { r.clients_reward_sum } else { r.clients_reward_sum + r.server_reward };
            (total - per_round).abs()
        })
        .fold(0.0, f64::max)
    };
    let mut worst_bid: f64 = 0.0;
    for ((st, seed), o) in runs {
        worst_bid = worst_bid.max(check(o, &base(*st, *seed), false));
    }
    let mut c = base(Strategy::ClusterAuction, 0);
    c.selection.reward_model = RewardModel::ProportionalData;
    let o = run_experiment(&c).expect("proportional run");
    let worst_prop = check(&o, &c, true);
    let server_zero = o.records.iter().all(|r| r.server_reward == 0.0);
    outcome(
        worst_bid <= 1e-9 && worst_prop <= 1e-9 && server_zero,
        format!("max error bid_share {worst_bid:.2e}, proportional_data {worst_prop:.2e}"),
    )
}

/// Lloyd fixed point: every point sits with its nearest centroid.
fn is_local_optimum(points: &[Vec<f64>], assign: &[usize], k: usize) -> bool {
    let d = points[0].len();
    let mut cent = vec![vec![0.0; d]; k];
    let mut count = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        count[a] += 1;
        cent[a].iter_mut().zip(p).for_each(|(c, x)| *c += x);
    }
    if count.contains(&0) {
        return false;
    }
    for (c, &n) in cent.iter_mut().zip(&count) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let dist = |p: &[f64], c: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    points.iter().zip(assign).all(|(p, &a)| (0..k).all(|j| dist(p, &cent[a]) <= dist(p, &cent[j]) + 1e-12))
}

fn mechanics_oracles(runs: &Runs) -> Outcome {
    // the federation runs the cost-sort oracle every auction round and fails the run on mismatch
    let oracle_rounds: usize =
        runs.iter().filter(|((st, _), _)| *st == Strategy::ClusterAuction).map(|(_, o)| o.records.len()).sum();

    let mut rng = rng_from(77);
    let (mut km_ok, mut km_global) = (0, 0);
    let instances = 200;
    for t in 0..instances {
        let n = rng.random_range(3..=8usize);
        let k = rng.random_range(2..=3usize.min(n));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let km = kmeans(&points, k, t, 100, 0.0).expect("kmeans");
        let mut local = Vec::new();
        let mut best = f64::INFINITY;
        for code in 0..k.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| (code / k.pow(i as u32)) % k).collect();
            if is_local_optimum(&points, &assign, k) {
                let inertia = inertia_of(&points, &assign, k);
                best = best.min(inertia);
                local.push(inertia);
            }
        }
        let mine = inertia_of(&points, &km.assignments, k);
        if is_local_optimum(&points, &km.assignments, k) && local.iter().any(|&v| (v - mine).abs() <= 1e-9 * (1.0 + v)) {
            km_ok += 1;
        }
        km_global += usize::from((mine - best).abs() <= 1e-9 * (1.0 + best));
    }

    let data = synth_gaussian(4, 20, 6, 1.5, 5).expect("data");
    let mut worst: f64 = 0.0;
    for (shape, label) in [(ModelShape::softmax(6, 4), "softmax"), (ModelShape::mlp(6, 5, 4), "mlp")] {
        let shape = shape.expect(label);
        for probe in 0..100u64 {
            let params = ModelParams::init(shape.clone(), 1000 + probe);
            let batch = data.select(&[(probe as usize * 7) % 80, (probe as usize * 13 + 1) % 80, (probe as usize * 29 + 2) % 80]);
            let g = gradient(&params, &batch).expect("gradient");
            let i = rng.random_range(0..params.len());
            let h = 1e-5;
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let fd = (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(g.0[i].abs()).max(1e-6);
            worst = worst.max((fd - g.0[i]).abs() / scale);
        }
    }
    outcome(
        oracle_rounds == 3 * 40 && km_ok == instances && worst <= 1e-4,
        format!(
            "oracle held on {oracle_rounds} auction rounds; kmeans local optimum {km_ok}/{instances} (global {km_global}); worst gradient rel err {worst:.2e}"
        ),
    )
}

fn partition_invariants() -> Outcome {
    let pool = synth_gaussian(10, 4000, 10, 2.0, 3).expect("pool");
    let mut failures = Vec::new();
    let mut clients_checked = 0;
    for i in 0..20u64 {
        let n_clients = [10, 25, 50, 100][i as usize % 4];
        let nu = [1.0, 0.9, 0.75, 0.5, 0.2][i as usize % 5];
        let mean = [30, 60, 120, 300][(i as usize / 5) % 4];
        let spec = PartitionSpec { n_clients, dominant_fraction: nu, mean_size: mean, seed: 100 + i, ..Default::default() };
        let clients = partition(&pool, &spec).expect("partition");
        let lo = mean.div_ceil(6);
        let hi = 2 * mean;
        for c in &clients {
            clients_checked += 1;
            let size = c.size;
            let val = size / 10;
            let test = size / 10;
            let ok = (lo..=hi).contains(&size)
                && c.label_count(c.dominant_label) as f64 >= nu * size as f64 - 1.0
                && (c.train.len(), c.validation.len(), c.test.len()) == (size - val - test, val, test);
            if !ok {
                failures.push(format!("spec {i} client {}", c.id));
            }
        }
    }
    outcome(failures.is_empty(), format!("20 specs, {clients_checked} clients, {} violations {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    commands::experiment(&base(Strategy::ClusterAuction, 0), &first).expect("first run");
    let cfg = parse_config(Some(&first.join(MANIFEST)), &[]).expect("manifest");
    commands::experiment(&cfg, &second).expect("rerun");
    let same: Vec<bool> = [METRICS_CSV, AUCTION_CSV, ENERGY_CSV]
        .iter()
        .map(|f| fs::read(first.join(f)).unwrap() == fs::read(second.join(f)).unwrap())
        .collect();
    outcome(same.iter().all(|&s| s), format!("metrics/auction/energy identical: {same:?}"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut runs = Runs::new();
    for seed in SEEDS {
        for st in Strategy::ALL {
            runs.insert((st, seed), run_experiment(&base(st, seed)).expect("acceptance run"));
        }
    }
    let results = [
        ("1 convergence ordering", convergence_ordering(&runs)),
        ("2 energy balance", energy_balance()),
        ("3 bid/reward trends", bid_reward_trends(&runs)),
        ("4 nash equilibrium", nash_equilibrium()),
        ("5 convergence envelope", envelope()),
        ("6 reward conservation", reward_conservation(&runs)),
        ("7 mechanics oracles", mechanics_oracles(&runs)),
        ("8 partition invariants", partition_invariants()),
        ("9 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use super::*;
use crate::datasets::{partition, synth_gaussian, PartitionSpec};
use crate::models::ModelShape;

fn clients(n_clients: usize, n_classes: usize, nu: f64, seed: u64) -> Vec<ClientDataset> {
    clients_sep(n_clients, n_classes, nu, seed, 3.0)
}

fn clients_sep(n_clients: usize, n_classes: usize, nu: f64, seed: u64, separation: f64) -> Vec<ClientDataset> {
    let pool = synth_gaussian(n_classes, 400, n_classes.max(8), separation, seed).unwrap();
    let spec = PartitionSpec {
        n_clients,
        dominant_fraction: nu,
        mean_size: 120,
        seed,
        ..Default::default()
    };
    partition(&pool, &spec).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn full_window_single_repeat_is_local_gradient() {
    let cs = clients(3, 3, 0.8, 1);
    let p = ModelParams::init(ModelShape::mlp(8, 5, 3).unwrap(), 4);
    let c = &cs[1];
    let probe = probe_client(&p, c, c.train.len(), 1, 9).unwrap();
    let full = models::gradient(&p, &c.train).unwrap();
    for (a, b) in probe.mean_gradient.0.iter().zip(&full.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn window_draw_sizes() {
    let mut rng = rng_from(0);
    let w = window_indices(&mut rng, 200, 50);
    assert_eq!(w.len(), 50);
    assert_eq!(w.iter().collect::<BTreeSet<_>>().len(), 50);
    // window larger than the data falls back to replacement
    assert_eq!(window_indices(&mut rng, 20, 50).len(), 50);
    let cs = clients(2, 2, 1.0, 2);
    let p = ModelParams::zeros(ModelShape::softmax(8, 2).unwrap());
    let probe = probe_client(&p, &cs[0], 50, 10, 3).unwrap();
    assert_eq!(probe.window_size * probe.probe_count, 500);
}

#[test]
fn same_label_clients_have_aligned_probes() {
    let cs = clients_sep(20, 10, 1.0, 3, 6.0);
    // clients 0 and 10 share dominant label 0
    assert_eq!(cs[0].dominant_label, cs[10].dominant_label);
    let p = ModelParams::zeros(ModelShape::softmax(10, 10).unwrap());
    let a = probe_client(&p, &cs[0], 50, 10, 1).unwrap();
    let b = probe_client(&p, &cs[10], 50, 10, 2).unwrap();
    let cos = cosine(&a.mean_gradient.0, &b.mean_gradient.0);
    assert!(cos > 0.99, "cosine {cos}");
}

#[test]
fn empty_client_cannot_be_probed() {
    let mut c = clients(1, 2, 1.0, 4).remove(0);
    c.train = crate::datasets::LabeledDataset::empty(8, 2);
    let p = ModelParams::zeros(ModelShape::softmax(8, 2).unwrap());
    assert!(matches!(probe_client(&p, &c, 5, 1, 0), Err(Error::Domain(_))));
}

#[test]
fn reduce_modes() {
    let sm = ModelShape::softmax(784, 10).unwrap();
    let probe = GradientProbe {
        client_id: 0,
        mean_gradient: GradientVector((0..sm.param_count()).map(|i| i as f64).collect()),
        probe_count: 1,
        window_size: 1,
    };
    assert_eq!(
        reduce_probe(&probe, &sm, ReduceMode::Full).unwrap(),
        reduce_probe(&probe, &sm, ReduceMode::OutputLayer).unwrap()
    );
    let mlp = ModelShape::mlp(784, 64, 10).unwrap();
    let probe = GradientProbe { mean_gradient: GradientVector(vec![0.5; mlp.param_count()]), ..probe };
    assert_eq!(reduce_probe(&probe, &mlp, ReduceMode::OutputLayer).unwrap().len(), 650);
    assert_eq!(reduce_probe(&probe, &mlp, ReduceMode::Full).unwrap().len(), mlp.param_count());
    assert!(reduce_probe(&probe, &sm, ReduceMode::Full).is_err());
}

#[test]
fn ten_single_label_clients_form_pure_clusters() {
    let cs = clients(10, 10, 1.0, 5);
    let p = ModelParams::zeros(ModelShape::softmax(10, 10).unwrap());
    let cl = cluster_clients(&p, &cs, 10, &ProbeConfig::default(), 8).unwrap();
    let mut labels = BTreeSet::new();
    for j in 0..10 {
        let m = cl.members(j);
        assert_eq!(m.len(), 1);
        labels.insert(cs[m[0]].dominant_label);
    }
    assert_eq!(labels.len(), 10);
}

#[test]
fn identical_clients_terminate_with_zero_inertia() {
    let base = clients(1, 3, 1.0, 6).remove(0);
    let cs: Vec<ClientDataset> = (0..6).map(|id| ClientDataset { id, ..base.clone() }).collect();
    let p = ModelParams::zeros(ModelShape::softmax(8, 3).unwrap());
    let cfg = ProbeConfig { window: base.train.len(), repeats: 1, ..Default::default() };
    let cl = cluster_clients(&p, &cs, 3, &cfg, 1).unwrap();
    assert!(cl.inertia() < 1e-20);
    assert_eq!(cl.pairs().len(), 6);
}

#[test]
fn two_label_groups_align_over_seeds() {
    for seed in 0..5 {
        let cs = clients(100, 2, 1.0, 10 + seed);
        let p = ModelParams::zeros(ModelShape::softmax(8, 2).unwrap());
        let cl = cluster_clients(&p, &cs, 2, &ProbeConfig::default(), seed).unwrap();
        // best of the two label-to-cluster matchings
        let agree = cs.iter().filter(|c| cl.cluster_of(c.id) == Some(c.dominant_label)).count();
        let aligned = agree.max(100 - agree);
        assert!(aligned >= 95, "seed {seed}: {aligned}");
    }
}

#[test]
fn same_label_shares_cluster_when_k_is_class_count() {
    let cs = clients(50, 10, 1.0, 21);
    let p = ModelParams::zeros(ModelShape::softmax(10, 10).unwrap());
    let cl = cluster_clients(&p, &cs, 10, &ProbeConfig::default(), 2).unwrap();
    for a in &cs {
        for b in &cs {
            if a.dominant_label == b.dominant_label {
                assert_eq!(cl.cluster_of(a.id), cl.cluster_of(b.id));
            }
        }
    }
}

#[test]
fn input_order_does_not_matter() {
    let cs = clients(30, 5, 0.8, 31);
    let p = ModelParams::init(ModelShape::mlp(8, 6, 5).unwrap(), 1);
    let cfg = ProbeConfig::default();
    let a = cluster_clients(&p, &cs, 5, &cfg, 4).unwrap();
    let mut rev = cs.clone();
    rev.reverse();
    rev.swap(3, 17);
    let b = cluster_clients(&p, &rev, 5, &cfg, 4).unwrap();
    assert_eq!(a.pairs(), b.pairs());
}

#[test]
fn weight_delta_feature_runs() {
    let cs = clients(20, 4, 1.0, 41);
    let p = ModelParams::zeros(ModelShape::softmax(8, 4).unwrap());
    let cfg = ProbeConfig { feature: ProbeFeature::WeightDelta, ..Default::default() };
    let cl = cluster_clients(&p, &cs, 4, &cfg, 0).unwrap();
    assert_eq!(cl.k(), 4);
    assert!((0..4).all(|j| !cl.members(j).is_empty()));
}

#[test]
fn table_round_trip_and_errors() {
    let cl = Clustering::new(vec![2, 0, 1], vec![1, 0, 1], vec![vec![0.0], vec![1.0]]).unwrap();
    let table = cl.to_table();
    assert_eq!(table, "client_id,cluster_id\n0,0\n1,1\n2,1\n");
    let pairs = parse_assignment_table(&table).unwrap();
    assert_eq!(pairs, cl.pairs());
    assert_eq!(Clustering::from_assignments(&pairs).unwrap().members(1), vec![1, 2]);
    assert!(parse_assignment_table("id,cluster\n0,0\n").is_err());
    assert!(parse_assignment_table("client_id,cluster_id\n0,0\n0,1\n").is_err());
    assert!(parse_assignment_table("client_id,cluster_id\n0;0\n").is_err());
}

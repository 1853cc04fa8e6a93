use proptest::prelude::*;

use fedadc::algorithms::{
    pseudo_delta, server_update_fedadc, ClientUpdate, ServerHyper, ServerState,
};
use fedadc::data::{gen_synthetic, partition, PartitionMethod, PartitionSpec};
use fedadc::distill::target_probs;
use fedadc::engine::ExperimentConfig;
use fedadc::nn::{self, Batch, LossSpec, Matrix, ModelSpec, ParamVector};

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|mut v| {
        v[0] += 1e-3;
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    })
}

fn params(len: usize) -> ParamVector {
    ModelSpec::logistic(len - 1, 1).zeros()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0f64..500.0, 1..12), tau in 0.05f64..10.0) {
        let p = nn::softmax_temp(&z, tau).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ignores_shifts(z in prop::collection::vec(-20.0f64..20.0, 2..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = nn::softmax_temp(&z, 1.0).unwrap();
        let b = nn::softmax_temp(&shifted, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_are_valid_and_favor_the_label(
        (teacher, rho, y) in (2usize..10).prop_flat_map(|k| (distribution(k), prop::collection::vec(0.0f64..=1.0, k), 0..k))
    ) {
        let p = target_probs(&teacher, &rho, y).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p[y] >= teacher[y] - 1e-12);
    }

    #[test]
    fn more_confidence_moves_mass_to_the_label(
        (teacher, rho, y, bump) in (2usize..8).prop_flat_map(|k| (distribution(k), prop::collection::vec(0.0f64..=0.5, k), 0..k, 0.0f64..0.5))
    ) {
        let raised: Vec<f64> = rho.iter().map(|r| r + bump).collect();
        let a = target_probs(&teacher, &rho, y).unwrap();
        let b = target_probs(&teacher, &raised, y).unwrap();
        prop_assert!(b[y] >= a[y] - 1e-12);
    }

    #[test]
    fn combined_loss_is_affine_in_lambda(lambda in 0.0f64..=1.0, tau in 0.5f64..4.0, seed in 0u64..1000) {
        let spec = ModelSpec::logistic(3, 4);
        let ds = gen_synthetic(4, 3, 2, 1.0, seed).unwrap();
        let batch = ds.full_batch().unwrap();
        let theta = {
            use rand::SeedableRng;
            spec.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
        };
        let targets: Vec<Vec<f64>> = (0..batch.len()).map(|i| {
            let mut t = vec![0.1; 4];
            t[i % 4] = 0.7;
            t
        }).collect();
        let at = |l: f64| nn::loss_value(&spec, &theta, &batch, &LossSpec::combined(l, tau), Some(&targets)).unwrap();
        let expected = (1.0 - lambda) * at(0.0) + lambda * at(1.0);
        prop_assert!((at(lambda) - expected).abs() < 1e-10);
    }

    #[test]
    fn equal_betas_make_momentum_the_average_update(
        m in prop::collection::vec(-1.0f64..1.0, 4),
        deltas in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..5),
        beta in 0.0f64..1.0,
        lr in 0.01f64..0.2,
    ) {
        let mut state = ServerState::new(params(4), ServerHyper { alpha: 1.0, beta_global: beta, beta_local: beta, lr }).unwrap();
        state.momentum.values_mut().copy_from_slice(&m);
        let updates: Vec<ClientUpdate> = deltas.iter().enumerate().map(|(i, d)| {
            let mut delta = params(4);
            delta.values_mut().copy_from_slice(d);
            ClientUpdate { client_id: i, delta, samples_used: 1 }
        }).collect();
        let avg = pseudo_delta(&updates, lr).unwrap();
        let next = server_update_fedadc(&state, &avg);
        prop_assert_eq!(next.momentum.values(), avg.values());
    }

    #[test]
    fn sort_partition_invariants(skew in 1usize..5, clients in 2usize..20, seed in 0u64..50) {
        let ds = gen_synthetic(5, 2, 20, 1.0, seed).unwrap();
        let spec = PartitionSpec { method: PartitionMethod::SortPartition { skew }, num_clients: clients, seed };
        let p = partition(&ds, &spec).unwrap();
        let size = ds.len() / (clients * skew) * skew;
        let mut all: Vec<usize> = Vec::new();
        for shard in &p.shards {
            prop_assert_eq!(shard.indices.len(), size);
            prop_assert!(shard.split + shard.test().len() == shard.indices.len());
            all.extend(&shard.indices);
        }
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), before);
        prop_assert_eq!(before + p.dropped, ds.len());
    }

    #[test]
    fn aligned_blocks_bound_labels_per_client(skew in 1usize..5, t in 1usize..4, block in 1usize..4, seed in 0u64..50) {
        // 5 classes of skew*t*block samples, 5t clients: every block lies inside one class
        let ds = gen_synthetic(5, 2, skew * t * block, 1.0, seed).unwrap();
        let spec = PartitionSpec { method: PartitionMethod::SortPartition { skew }, num_clients: 5 * t, seed };
        let p = partition(&ds, &spec).unwrap();
        prop_assert_eq!(p.dropped, 0);
        for shard in &p.shards {
            let mut labels: Vec<usize> = shard.indices.iter().map(|&i| ds.labels()[i]).collect();
            labels.sort_unstable();
            labels.dedup();
            prop_assert!(labels.len() <= skew);
        }
    }

    #[test]
    fn dirichlet_partition_covers(alpha in 0.2f64..5.0, seed in 0u64..50) {
        let ds = gen_synthetic(4, 2, 50, 1.0, seed).unwrap();
        let spec = PartitionSpec { method: PartitionMethod::Dirichlet { alpha }, num_clients: 5, seed };
        let p = partition(&ds, &spec).unwrap();
        let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for shard in &p.shards {
            prop_assert!((shard.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(shard.rho.contains(&1.0));
        }
    }

    #[test]
    fn config_round_trips(
        lr in prop::sample::select(vec![0.01, 0.025, 0.05, 0.1]),
        beta in 0.0f64..0.99,
        clients in 2usize..100,
        rounds in 1usize..500,
        alg in prop::sample::select(vec!["fedavg", "slowmo", "fedadc-heavyball", "fedadc-nesterov"]),
        participation in 0.01f64..=1.0,
    ) {
        let text = format!(
            "algorithm = {alg}\nlr = {lr}\nbeta = {beta}\nnum_clients = {clients}\nrounds = {rounds}\nparticipation = {participation}\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let again = ExperimentConfig::from_pairs(cfg.to_pairs()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn gradient_of_duplicated_batch_is_unchanged(seed in 0u64..200) {
        use rand::SeedableRng;
        let spec = ModelSpec::mlp(3, vec![4], 3, nn::Activation::Tanh);
        let theta = spec.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let ds = gen_synthetic(3, 3, 2, 1.0, seed).unwrap();
        let b = ds.full_batch().unwrap();
        let mut twice = b.features.data.clone();
        twice.extend_from_slice(&b.features.data);
        let mut labels = b.labels.clone();
        labels.extend_from_slice(&b.labels);
        let doubled = Batch::new(Matrix::from_vec(2 * b.len(), 3, twice).unwrap(), labels).unwrap();
        let g1 = nn::grad(&spec, &theta, &b, &LossSpec::ce(), None).unwrap();
        let g2 = nn::grad(&spec, &theta, &doubled, &LossSpec::ce(), None).unwrap();
        prop_assert!(g1.max_abs_diff(&g2) < 1e-12);
    }
}

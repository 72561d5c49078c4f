mod common;

use phasenet::hyperpair::{build_dual, build_topology};
use phasenet::netblocks::PathConfig;
use phasenet::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(depth: usize) -> PathConfig {
    PathConfig {
        depth,
        base_channels: 3,
        kernel: 3,
        classes: 4,
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn cross_free_dual_reduces_to_single_path() {
    for depth in [2, 3] {
        let worst = common::degenerate_deviation(depth);
        assert!(worst <= 1e-12, "depth {depth}: max deviation {worst:e}");
    }
}

#[test]
fn weight_tied_paths_give_equal_taps() {
    for depth in [2, 3] {
        let mut net = build_dual::<f64>(cfg(depth), build_topology(depth).unwrap(), 3).unwrap();
        let pairs: Vec<_> = net
            .store
            .iter()
            .filter_map(|(id, name, _)| name.strip_prefix("A.").map(|rest| (id, format!("B.{rest}"))))
            .collect();
        assert!(!pairs.is_empty());
        for (a, b_name) in pairs {
            let b = net.store.find(&b_name).unwrap();
            let v = net.store.get(a).clone();
            *net.store.get_mut(b) = v;
        }
        let x = random(4, &[1, 8, 8, 8]);
        let (_, f1, f2) = net.run(&x, &x).unwrap();
        assert_eq!(f1.data(), f2.data(), "depth {depth}");
    }
}

proptest! {
    #[test]
    fn edge_counts_and_acyclic(depth in 2usize..=6) {
        let t = build_topology(depth).unwrap();
        prop_assert_eq!(t.cross_count(), 6 * (depth - 1));
        prop_assert_eq!(t.intra_count(), 2 * (depth - 1));
        prop_assert!(t.validate().is_ok());
        prop_assert!(t.schedule().is_ok());
    }
}

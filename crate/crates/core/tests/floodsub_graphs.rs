mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_reachable_subscriber_gets_one_copy(seed in any::<u64>(), n in 2usize..=30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = common::peer_ids(n, 9);
        let edges = common::random_connected_graph(&mut rng, n);
        let subs: BTreeSet<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        let publisher = rng.gen_range(0..n);
        let out = common::flood(&ids, &edges, &subs, publisher, false);
        for v in 0..n {
            prop_assert_eq!(out.delivered[v], usize::from(subs.contains(&v)));
        }
        prop_assert!(out.forwards <= 2 * edges.len());
    }

    #[test]
    fn strict_mode_reaches_subscribers_through_subscribers(seed in any::<u64>(), n in 2usize..=30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = common::peer_ids(n, 9);
        let edges = common::random_connected_graph(&mut rng, n);
        let subs: BTreeSet<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        let publisher = rng.gen_range(0..n);
        let strict = common::flood(&ids, &edges, &subs, publisher, true);
        let prose = common::flood(&ids, &edges, &subs, publisher, false);
        let reach = common::reachable(n, &edges, publisher, |v| subs.contains(&v));
        for v in 0..n {
            let expect = usize::from(subs.contains(&v) && reach.contains(&v));
            prop_assert_eq!(strict.delivered[v], expect);
        }
        prop_assert!(strict.forwards <= prose.forwards);
    }
}

#[test]
fn no_subscribers_means_flood_without_deliveries() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = common::peer_ids(12, 9);
    let edges = common::random_connected_graph(&mut rng, 12);
    let out = common::flood(&ids, &edges, &BTreeSet::new(), 0, false);
    assert!(out.delivered.iter().all(|&d| d == 0));
    // every node but the publisher receives it at least once
    assert!(out.forwards >= 11);
}

#[test]
fn line_of_three() {
    let ids = common::peer_ids(3, 9);
    let out = common::flood(&ids, &[(0, 1), (1, 2)], &BTreeSet::from([2]), 0, false);
    assert_eq!(out.delivered, vec![0, 0, 1]);
    assert_eq!(out.forwards, 2);
}

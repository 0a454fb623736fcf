mod common;

use fedforest::ensemble::{Ensemble, PredictionMode, Ranker};
use fedforest::tree::{DecisionTree, EstimatorId, NodeId};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn forest(seed: u64, n: usize) -> Vec<DecisionTree> {
    let mut rng = common::rng(seed);
    (0..n as u64)
        .map(|i| {
            let mut t = common::random_tree(&mut rng, i, 10, 4);
            t.id = EstimatorId::new(NodeId(rng.gen_range(0..4)), i);
            t
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crop_size_and_idempotence(seed in any::<u64>(), n in 0usize..40, k in 1usize..45) {
        let ranker = Ranker::default();
        let mut e = Ensemble::from_trees(forest(seed, n));
        e.crop(k, &ranker).unwrap();
        prop_assert_eq!(e.len(), k.min(n));
        let once = e.ids();
        e.crop(k, &ranker).unwrap();
        prop_assert_eq!(e.ids(), once);

        let mut fresh = Ensemble::from_trees(forest(seed, n));
        let top = fresh.get_top(k, &ranker).unwrap();
        prop_assert_eq!(top.iter().map(|t| t.id).collect::<Vec<_>>(), e.ids());
    }

    #[test]
    fn add_is_an_associative_union_by_id(seed in any::<u64>(), a in 0usize..15, b in 0usize..15, c in 0usize..15) {
        let all = forest(seed, 20);
        let mut rng = common::rng(seed ^ 1);
        let mut pick = |k: usize| all.choose_multiple(&mut rng, k).cloned().collect::<Vec<_>>();
        let (x, y, z) = (pick(a), pick(b), pick(c));

        let mut left = Ensemble::from_trees(x.clone());
        left.add(y.clone());
        left.add(z.clone());
        let mut yz = Ensemble::from_trees(y.clone());
        yz.add(z.clone());
        let mut right = Ensemble::from_trees(x.clone());
        right.add(yz.members().to_vec());
        prop_assert_eq!(left.ids(), right.ids());

        let mut ids = left.ids();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let again = left.add(x.into_iter().chain(y).chain(z));
        prop_assert_eq!(again, 0);
    }

    #[test]
    fn average_ignores_member_order(seed in any::<u64>(), n in 1usize..30) {
        let trees = forest(seed, n);
        let mut shuffled = trees.clone();
        shuffled.shuffle(&mut common::rng(seed ^ 2));
        let (a, b) = (Ensemble::from_trees(trees), Ensemble::from_trees(shuffled));
        let mut rng = common::rng(seed ^ 3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
            for mode in [PredictionMode::Average, PredictionMode::Majority] {
                let (pa, pb) = (a.predict(&x, mode).unwrap(), b.predict(&x, mode).unwrap());
                prop_assert!((pa - pb).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&pa));
            }
        }
    }
}

#[test]
fn duplicate_trees_do_not_both_make_the_top_two() {
    for seed in 0..20 {
        let mut trees = forest(seed, 6);
        let original = trees[3].id;
        let mut dup = trees[3].clone();
        dup.id = EstimatorId::new(NodeId(9), 99);
        trees.push(dup.clone());
        let mut e = Ensemble::from_trees(trees);
        let top: Vec<EstimatorId> = e.get_top(2, &Ranker::default()).unwrap().iter().map(|t| t.id).collect();
        assert!(!(top.contains(&dup.id) && top.contains(&original)), "seed {seed}");
    }
}

#[test]
fn sixty_trees_crop_to_fifty_trained_members() {
    let data = common::small_synth(3);
    let trees = common::trained_trees(&data, 60, 6, 3);
    let mut e = Ensemble::with_capacity_hint(50);
    assert_eq!(e.add(trees.clone()), 60);
    e.crop(50, &Ranker::default()).unwrap();
    assert_eq!(e.len(), 50);
    assert!(e.is_ranked());
    assert!(e.ids().iter().all(|id| trees.iter().any(|t| t.id == *id)));
}

#[test]
fn container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.fens");
    let mut e = Ensemble::from_trees(forest(4, 12));
    e.crop(10, &Ranker::default()).unwrap();
    e.save(&path, Some(3)).unwrap();
    let (back, manifest) = Ensemble::load(&path).unwrap();
    assert_eq!(back, e);
    assert_eq!(manifest.round, Some(3));
    let bytes = std::fs::read(&path).unwrap();
    assert!(Ensemble::from_container(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Ensemble::from_container(&extra).is_err());
}

#[test]
fn empty_ensemble_refuses_to_predict() {
    assert!(Ensemble::new().predict(&[0.0; 4], PredictionMode::Average).is_err());
    assert!(Ensemble::new().crop(0, &Ranker::default()).is_err());
}

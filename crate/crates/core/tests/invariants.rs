mod common;

use common::{model, random_split, small_config};
use mope::evaluation::{evaluate, metrics_from_similarity, recall_at_k, Direction, DEFAULT_KS};
use mope::model::{group_range, permute_heads, permute_neurons, structural_prune, AblationSet, Encoder, ModuleId};
use mope::pruning::kept_count;
use mope::scoring::{removal_order, ScoreEntry};
use mope::Tensor;
use proptest::prelude::*;

fn square(n: usize) -> impl Strategy<Value = Tensor> {
    // Coarse values so that ties actually occur.
    prop::collection::vec(-4i32..4, n * n)
        .prop_map(move |v| Tensor::new(&[n, n], v.into_iter().map(|x| x as f64 / 4.0).collect()).unwrap())
}

fn transpose(t: &Tensor) -> Tensor {
    mope::numerics::transpose(t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_grows_with_k(s in (2usize..12).prop_flat_map(square)) {
        let n = s.rows();
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            let r: Vec<f64> = (1..=n).map(|k| recall_at_k(&s, k, dir).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r[n - 1], 1.0);
        }
    }

    #[test]
    fn transposition_swaps_directions(s in (2usize..12).prop_flat_map(square)) {
        let a = metrics_from_similarity(&s, &DEFAULT_KS).unwrap();
        let b = metrics_from_similarity(&transpose(&s), &DEFAULT_KS).unwrap();
        prop_assert_eq!(a.tr_at, b.ir_at);
        prop_assert_eq!(a.ir_at, b.tr_at);
        prop_assert_eq!(a.recall_mean, b.recall_mean);
    }

    #[test]
    fn kept_count_stays_in_range(n in 1usize..64, f in 0.0f64..=1.0) {
        let k = kept_count(n, f);
        prop_assert!((1..=n).contains(&k));
        prop_assert!((k as f64 - (n as f64 * f)).abs() <= 0.5 || k == 1);
    }

    #[test]
    fn groups_partition_every_width(n in 1usize..200, groups in 1usize..16) {
        let g = mope::model::effective_groups(n, groups);
        prop_assert_eq!(g, groups.min(n));
        let mut next = 0;
        for i in 0..g {
            let r = group_range(n, g, i);
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty());
            next = r.end;
        }
        prop_assert_eq!(next, n);
    }

    #[test]
    fn removal_order_sorts_scores(scores in prop::collection::vec(-3i32..3, 1..24)) {
        let entries: Vec<ScoreEntry> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreEntry {
                id: ModuleId::Head { encoder: Encoder::Text, layer: i % 3, head: i / 3 },
                score: s as f64,
            })
            .collect();
        let order = removal_order(&entries);
        prop_assert_eq!(order.len(), entries.len());
        let score = |id: &ModuleId| entries.iter().find(|e| e.id == *id).unwrap().score;
        for w in order.windows(2) {
            let (a, b) = (score(&w[0]), score(&w[1]));
            prop_assert!(a < b || (a == b && w[0].tie_key() < w[1].tie_key()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn surgery_matches_ablation(
        enc in prop::sample::select(Encoder::BOTH.to_vec()),
        kind in 0usize..3,
        layer in 0usize..2,
        index in 0usize..4,
        seed in 0u64..1000,
    ) {
        let cfg = small_config(2, 4, 16, 32);
        let m = model(&cfg, seed);
        let split = random_split(&cfg, 16, seed + 1);
        let id = match kind {
            0 => ModuleId::Head { encoder: enc, layer, head: index },
            1 => ModuleId::NeuronGroup { encoder: enc, layer, group: index, groups: 4 },
            _ => ModuleId::Layer { encoder: enc, layer },
        };
        let pruned = structural_prune(&m, &[id]).unwrap();
        let none = AblationSet::new();
        let ablated = AblationSet::single(id);
        for tower in Encoder::BOTH {
            let tokens = match tower {
                Encoder::Vision => split.vision_tokens(),
                Encoder::Text => split.text_tokens(),
            };
            let a = m.features(tower, &tokens, &ablated).unwrap();
            let b = pruned.features(tower, &tokens, &none).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
        prop_assert_eq!(pruned.param_count(), pruned.param_count_formula());
    }

    #[test]
    fn permutations_preserve_the_function(perm in Just((0..32).collect::<Vec<usize>>()).prop_shuffle(),
                                          heads in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
                                          seed in 0u64..1000) {
        let cfg = small_config(2, 4, 16, 32);
        let m = model(&cfg, seed);
        let split = random_split(&cfg, 8, seed + 1);
        let p = permute_neurons(&m, Encoder::Vision, 1, &perm).unwrap();
        let p = permute_heads(&p, Encoder::Vision, 0, &heads).unwrap();
        let none = AblationSet::new();
        let a = m.features(Encoder::Vision, &split.vision_tokens(), &none).unwrap();
        let b = p.features(Encoder::Vision, &split.vision_tokens(), &none).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn features_are_unit_norm() {
    let cfg = small_config(2, 2, 8, 16);
    let m = model(&cfg, 9);
    let split = random_split(&cfg, 32, 10);
    for enc in Encoder::BOTH {
        let tokens = match enc {
            Encoder::Vision => split.vision_tokens(),
            Encoder::Text => split.text_tokens(),
        };
        let f = m.features(enc, &tokens, &AblationSet::new()).unwrap();
        for i in 0..f.rows() {
            let norm: f64 = f.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn evaluation_is_invariant_to_joint_pair_order() {
    let cfg = small_config(2, 2, 8, 16);
    let m = model(&cfg, 12);
    let split = random_split(&cfg, 24, 13);
    let mut reversed = split.clone();
    reversed.pairs.reverse();
    let none = AblationSet::new();
    let a = evaluate(&m, &split, &none, &DEFAULT_KS).unwrap();
    let b = evaluate(&m, &reversed, &none, &DEFAULT_KS).unwrap();
    // Random tokens give distinct similarities, so no tie-break can differ.
    assert_eq!(a, b);
}

mod common;

use labo_core::bottleneck_model::{
    argmax, forward, forward_scores, init_prior, normalize_weights, train_on_scores, Activation, ConceptWeightMatrix,
    ScoreMatrix, TrainConfig,
};
use labo_core::concept_prep::{remove_class_names, split_sentence, RawSentence};
use labo_core::eval_harness::{sample_few_shot, Shots};
use labo_core::submodular_select::{
    discriminability, greedy_select, normalized_association, select_bottleneck, ClassCandidates,
};
use labo_core::{EmbeddingMatrix, Split, SubmodularConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn finite_rows() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..8, 1usize..12).prop_flat_map(|(rows, dim)| {
        (Just(rows), Just(dim), prop::collection::vec(-1e3f32..1e3, rows * dim))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_bytes_round_trip((rows, dim, values) in finite_rows(), normalized in any::<bool>()) {
        let m = EmbeddingMatrix::new(rows, dim, values, false).unwrap();
        let m = if normalized && m.values().iter().any(|&v| v != 0.0) {
            match m.normalize_rows() {
                Ok(n) => n,
                Err(_) => m,
            }
        } else {
            m
        };
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn truncated_payload_is_rejected((rows, dim, values) in finite_rows(), cut in 1usize..4) {
        let bytes = EmbeddingMatrix::new(rows, dim, values, false).unwrap().to_bytes();
        prop_assert!(EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn normalization_is_idempotent((rows, dim, values) in finite_rows()) {
        let m = EmbeddingMatrix::new(rows, dim, values.iter().map(|v| v + 1e-2).collect(), false).unwrap();
        if let Ok(once) = m.normalize_rows() {
            let twice = once.normalize_rows().unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            for row in once.iter_rows() {
                let norm: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn association_is_a_distribution(sims in prop::collection::vec(-1.0f64..1.0, 2..12)) {
        let p = normalized_association(&sims, 1e-8);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let d = discriminability(&sims, 1e-8);
        let n = sims.len() as f64;
        prop_assert!(d <= 1e-12 && d >= -n.ln() - 1e-12);
    }

    #[test]
    fn split_never_empty(text in "[a-z]{1,8}( (and|with|is|has|,|;) [a-z]{1,8}){0,5}\\.?") {
        let s = RawSentence { class_id: 0, prompt_id: 0, text };
        let parts = split_sentence(&s);
        prop_assert!(!parts.is_empty());
        prop_assert!(parts.iter().all(|p| !p.trim().is_empty()));
    }

    #[test]
    fn class_name_removal_is_idempotent(
        words in prop::collection::vec(prop::sample::select(vec!["red", "tail", "bald", "eagle", "sea", "wing", "crest", "long"]), 1..8),
        owner in 0usize..3,
    ) {
        let names = vec!["bald eagle".to_string(), "sea eagle".to_string(), "crest".to_string()];
        let concept = words.join(" ");
        if let Some(once) = remove_class_names(&concept, &names, "bird", &names[owner]) {
            let twice = remove_class_names(&once, &names, "bird", &names[owner]);
            prop_assert_eq!(twice, Some(once));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn few_shot_splits_stay_inside_train(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, 3)).collect();
        let train = clustered_set(&mut rng, &means, 5, 0.5, Split::Train);
        let split = sample_few_shot(&train, Shots::K(k), seed).unwrap();
        let again = sample_few_shot(&train, Shots::K(k), seed).unwrap();
        prop_assert_eq!(&split, &again);
        let flat = split.flat_indices();
        let mut unique = flat.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), flat.len());
        for (class, picks) in split.train_indices.iter().enumerate() {
            prop_assert_eq!(picks.len(), k.min(5));
            prop_assert!(picks.iter().all(|&i| train.labels[i] == class));
        }
    }

    #[test]
    fn selection_ignores_candidate_order(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cand = random_candidates(&mut rng, 4, 15, 8);
        let mut order: Vec<usize> = (0..cand.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = ClassCandidates::new(
            0,
            4,
            order.iter().map(|&i| cand.concept_ids()[i]).collect(),
            &cand.embeddings().select_rows(&order),
            order.iter().map(|&i| cand.discriminability()[i]).collect(),
        )
        .unwrap();
        let cfg = SubmodularConfig { k, ..Default::default() };
        prop_assert_eq!(
            greedy_select(&cand, &cfg).unwrap().concept_ids,
            greedy_select(&shuffled, &cfg).unwrap().concept_ids
        );
    }

    #[test]
    fn batch_forward_matches_single_images(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, dim, rows) = (3, 7, 5, 6);
        let images = random_matrix(&mut rng, rows, dim);
        let concepts = random_matrix(&mut rng, m, dim).normalize_rows().unwrap();
        let w = ConceptWeightMatrix {
            weights: gaussian(&mut rng, n * m),
            ..ConceptWeightMatrix::zeros(n, m, Activation::Softmax)
        };
        let batch = forward_scores(&ScoreMatrix::compute(&images, &concepts).unwrap(), &w).unwrap();
        for (i, x) in images.iter_rows().enumerate() {
            let single = forward(x, &concepts, &w).unwrap();
            for (a, b) in single.iter().zip(&batch[i * n..(i + 1) * n]) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn prior_init_predicts_owner_of_matching_concept() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4;
    let cands: Vec<_> = (0..n).map(|y| random_candidates_for(&mut rng, y, n, 5, 32)).collect();
    let bottleneck = select_bottleneck(&cands, &SubmodularConfig { k: 1, ..Default::default() }).unwrap();
    let w = init_prior(&bottleneck, n, Activation::Softmax);
    let act = normalize_weights(&w);
    assert!(act.iter().all(|v| v.is_finite()));
    // with one concept per class, an image equal to a bottleneck concept
    // scores highest on that concept's owner
    for (r, &owner) in bottleneck.class_of_concept.iter().enumerate() {
        let logits = forward(bottleneck.embeddings.row(r), &bottleneck.embeddings, &w).unwrap();
        assert_eq!(argmax(&logits), owner, "row {r}");
    }
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores = random_scores(&mut rng, 12, 6);
    let labels = random_labels(&mut rng, 12, 3);
    let init = ConceptWeightMatrix {
        weights: gaussian(&mut rng, 18),
        ..ConceptWeightMatrix::zeros(3, 6, Activation::Softmax)
    };
    let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 5, batch_size: 4, ..Default::default() };
    let out = train_on_scores(&scores, &labels, &scores, &labels, &init, &cfg).unwrap();
    assert_eq!(out.weights, init);
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.history.len(), 5);
}

//! Property-based invariants: randomized shapes and values instead of the
//! fixed fixtures used elsewhere.

use advreg_core::graph::{Graph, Partition};
use advreg_core::synthcp::{generate_split, Dataset, Split, WorldSpec};
use advreg_core::tensor::Tensor;
use proptest::prelude::*;

fn logits_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..8).prop_flat_map(|(rows, cols)| {
        proptest::collection::vec(-50.0f64..50.0, rows * cols)
            .prop_map(move |v| (rows, cols, v))
    })
}

fn softmax_outputs(rows: usize, cols: usize, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let z = g.leaf(
        Tensor::matrix(rows, cols, values.to_vec()).unwrap(),
        Partition::Data,
    );
    let lp = g.log_softmax(z);
    let h = g.entropy_of_softmax(z);
    (g.value(lp).values().to_vec(), g.value(h).values().to_vec())
}

proptest! {
    #[test]
    fn log_softmax_rows_are_log_distributions((rows, cols, values) in logits_matrix()) {
        let (lp, _) = softmax_outputs(rows, cols, &values);
        for r in 0..rows {
            let row = &lp[r * cols..(r + 1) * cols];
            let mass: f64 = row.iter().map(|&l| l.exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-9, "row {r} mass {mass}");
            for &l in row {
                prop_assert!(l <= 1e-12, "log probability {l} above zero");
            }
        }
    }

    #[test]
    fn entropy_stays_between_zero_and_log_width((rows, cols, values) in logits_matrix()) {
        let (_, h) = softmax_outputs(rows, cols, &values);
        let cap = (cols as f64).ln();
        for (r, &e) in h.iter().enumerate() {
            prop_assert!(e >= -1e-12 && e <= cap + 1e-12, "row {r} entropy {e} outside [0, {cap}]");
        }
    }

    #[test]
    fn softmax_is_invariant_to_a_constant_logit_shift(
        (rows, cols, values) in logits_matrix(),
        shift in -30.0f64..30.0,
    ) {
        let (lp, h) = softmax_outputs(rows, cols, &values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let (lp2, h2) = softmax_outputs(rows, cols, &shifted);
        for (a, b) in lp.iter().zip(&lp2) {
            prop_assert!((a - b).abs() < 1e-8, "log prob moved: {a} vs {b}");
        }
        for (a, b) in h.iter().zip(&h2) {
            prop_assert!((a - b).abs() < 1e-8, "entropy moved: {a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_is_the_mean_picked_negative_log_prob(
        (rows, cols, values) in logits_matrix(),
        label_raw in proptest::collection::vec(0usize..64, 1..5),
    ) {
        let labels: Vec<usize> = (0..rows).map(|r| label_raw[r % label_raw.len()] % cols).collect();
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(rows, cols, values.clone()).unwrap(), Partition::Data);
        let lp = g.log_softmax(z);
        let loss = g.cross_entropy(lp, &labels).unwrap();
        let got = g.value(loss).scalar_value();
        let want: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -g.value(lp).values()[r * cols + l])
            .sum::<f64>()
            / rows as f64;
        prop_assert!(got >= -1e-12, "cross entropy {got} negative");
        prop_assert!((got - want).abs() < 1e-9, "{got} vs straight-line {want}");
    }
}

fn small_world(
    num_types: usize,
    answers_per_type: usize,
    question_len: usize,
    grounding: f64,
    noise_sigma: f64,
) -> WorldSpec {
    let answers = num_types * answers_per_type;
    let spec = WorldSpec {
        num_types,
        answers_per_type,
        vocab_size: num_types + 4,
        question_len,
        raw_dim: 2,
        grounding,
        noise_sigma,
        p_train: vec![vec![1.0 / answers_per_type as f64; answers_per_type]; num_types],
        p_test: vec![vec![1.0 / answers_per_type as f64; answers_per_type]; num_types],
        prototypes: (0..answers)
            .map(|a| vec![a as f64, 1.0 - 0.5 * a as f64])
            .collect(),
    };
    spec.validate().expect("small world is valid");
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_answers_stay_in_their_types_block(
        num_types in 1usize..4,
        answers_per_type in 1usize..4,
        question_len in 1usize..4,
        grounding in 0.0f64..=1.0,
        sigma in 0.0f64..0.3,
        n in 1usize..40,
        seed in 0u64..1000,
    ) {
        let spec = small_world(num_types, answers_per_type, question_len, grounding, sigma);
        let ds = generate_split(&spec, Split::Train, n, seed).unwrap();
        prop_assert_eq!(ds.len(), n);
        for r in &ds.records {
            prop_assert!(r.qtype < num_types);
            prop_assert_eq!(r.answer / answers_per_type, r.qtype);
            prop_assert_eq!(r.tokens.len(), question_len);
            for &t in &r.tokens {
                prop_assert!(t < spec.vocab_size);
            }
            prop_assert_eq!(r.features.len(), spec.raw_dim);
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_its_seeds(
        n in 1usize..30,
        seed in 0u64..1000,
    ) {
        let spec = small_world(2, 3, 2, 0.8, 0.1);
        let a = generate_split(&spec, Split::Test, n, seed).unwrap();
        let b = generate_split(&spec, Split::Test, n, seed).unwrap();
        prop_assert_eq!(a.records, b.records);
    }

    #[test]
    fn dataset_files_round_trip_and_stabilize_after_one_save(
        n in 1usize..30,
        seed in 0u64..1000,
    ) {
        let spec = small_world(2, 2, 3, 0.9, 0.2);
        let ds = generate_split(&spec, Split::Train, n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tsv");
        let p2 = dir.path().join("b.tsv");
        ds.save(&p1).unwrap();
        let loaded = Dataset::load(&p1).unwrap();

        prop_assert_eq!(loaded.len(), ds.len());
        prop_assert_eq!(&loaded.spec_hash, &ds.spec_hash);
        prop_assert_eq!(loaded.split, ds.split);
        for (a, b) in loaded.records.iter().zip(&ds.records) {
            prop_assert_eq!(a.qtype, b.qtype);
            prop_assert_eq!(&a.tokens, &b.tokens);
            prop_assert_eq!(a.answer, b.answer);
            // features are written at fixed precision, so the first save may
            // round; a second save must reproduce the bytes exactly
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() < 5e-10);
            }
        }
        loaded.save(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

//! Reproduces the headline benchmark from the library API: trains the
//! baseline and the three regularized variants on the changing-priors world
//! and prints test accuracy next to the Bayes reference points.
//!
//!     cargo run --release --example headline [seed ...]
//!
//! One seed takes a few minutes; pass several to average like the README
//! table does.

use advreg_core::defaults;
use advreg_core::eval::{evaluate, qonly_probe, ProbeConfig};
use advreg_core::harness::{train, TrainConfig};
use advreg_core::models::{ModelBundle, ModelDims};
use advreg_core::objective::RegularizerConfig;
use advreg_core::synthcp::{
    bayes_grounded_accuracy, bayes_qonly_accuracy, default_cp_spec, generate_split, Split,
};

fn main() {
    let seeds: Vec<u64> = {
        let given: Vec<u64> = std::env::args()
            .skip(1)
            .map(|s| s.parse().expect("seeds are integers"))
            .collect();
        if given.is_empty() {
            vec![0]
        } else {
            given
        }
    };

    let spec = default_cp_spec(0);
    let train_ds =
        generate_split(&spec, Split::Train, defaults::BENCH_N_TRAIN, defaults::BENCH_TRAIN_DATA_SEED)
            .unwrap();
    let test_ds =
        generate_split(&spec, Split::Test, defaults::BENCH_N_TEST, defaults::BENCH_TEST_DATA_SEED)
            .unwrap();

    println!(
        "bayes references: question-only on test {:.3}, grounded {:.3}",
        bayes_qonly_accuracy(&spec, Split::Test, Split::Train),
        bayes_grounded_accuracy(&spec, Split::Test)
    );

    let variants = [
        ("baseline", 0.0, 0.0),
        ("q-adversary", defaults::LAMBDA_Q, 0.0),
        ("entropy-diff", 0.0, defaults::LAMBDA_H),
        ("both", defaults::LAMBDA_Q, defaults::LAMBDA_H),
    ];
    for (name, lq, lh) in variants {
        let mut accs = Vec::new();
        let mut probes = Vec::new();
        for &seed in &seeds {
            let config = TrainConfig::new(
                RegularizerConfig::new(lq, lh).unwrap(),
                defaults::BENCH_EPOCHS,
                seed,
            );
            let dims = ModelDims::with_world(
                train_ds.vocab_size,
                train_ds.raw_dim,
                train_ds.num_answers(),
            );
            let mut bundle = ModelBundle::init(dims, seed);
            train(&mut bundle, &train_ds.to_batch(), &config).unwrap();
            accs.push(evaluate(&bundle, &test_ds).unwrap().overall_accuracy);
            let probe = qonly_probe(&bundle, &train_ds, &[], &ProbeConfig::default()).unwrap();
            probes.push(probe.train_accuracy);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{name:<12} lambda_q={lq} lambda_h={lh}  test acc {:.3}  probe acc {:.3}  ({} seed{})",
            mean(&accs),
            mean(&probes),
            seeds.len(),
            if seeds.len() == 1 { "" } else { "s" }
        );
    }
}

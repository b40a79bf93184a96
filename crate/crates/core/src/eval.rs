//! Metrics and experiments: accuracies, question-only probes, predicted
//! answer-distribution divergences, lambda sweeps and ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Partition};
use crate::harness::TrainConfig;
use crate::models::{ModelBundle, ModelDims};
use crate::seeding::{rng_for, rng_for_index};
use crate::synthcp::{argmax, Dataset};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_type_accuracy: Vec<f64>,
    pub probe_train_accuracy: Option<f64>,
    pub probe_test_accuracy: Option<f64>,
    /// Empirical distribution of argmax predictions per question type, over
    /// the global answer space.
    pub per_type_marginals: Vec<Vec<f64>>,
    pub tv_vs_train_prior: Option<f64>,
    pub kl_vs_train_prior: Option<f64>,
    pub tv_vs_test_prior: Option<f64>,
    pub kl_vs_test_prior: Option<f64>,
    pub mean_h_vqa: f64,
    pub mean_h_qonly: f64,
}

/// Forward pass over a dataset; returns softmax answer distributions from
/// the fused answerer plus the mean entropies of both heads.
pub fn predict_distributions(
    bundle: &ModelBundle,
    dataset: &Dataset,
) -> Result<(Vec<Vec<f64>>, f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluate requires a nonempty dataset".into()));
    }
    let mut dists = Vec::with_capacity(dataset.len());
    let mut h_vqa_sum = 0.0;
    let mut h_qonly_sum = 0.0;
    for chunk in dataset.records.chunks(EVAL_CHUNK) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|r| r.tokens.clone()).collect();
        let feats: Vec<Vec<f64>> = chunk.iter().map(|r| r.features.clone()).collect();
        let mut graph = Graph::new();
        let leaves = bundle.leaves(&mut graph);
        let fw = bundle.forward_vqa(&mut graph, &leaves, &tokens, &feats)?;
        let qonly = bundle.adversary_logits(&mut graph, &leaves, fw.q)?;
        let lp = graph.log_softmax(fw.logits);
        let h_vqa = graph.entropy_of_softmax(fw.logits);
        let h_qonly = graph.entropy_of_softmax(qonly);
        let lpt = graph.value(lp);
        let (rows, cols) = lpt.rows_cols();
        for r in 0..rows {
            dists.push((0..cols).map(|c| lpt.at(r, c).exp()).collect());
        }
        h_vqa_sum += graph.value(h_vqa).values().iter().sum::<f64>();
        h_qonly_sum += graph.value(h_qonly).values().iter().sum::<f64>();
    }
    let n = dataset.len() as f64;
    Ok((dists, h_vqa_sum / n, h_qonly_sum / n))
}

/// Argmax predictions with lowest-index tie-breaking.
pub fn predict(bundle: &ModelBundle, dataset: &Dataset) -> Result<Vec<usize>> {
    let (dists, _, _) = predict_distributions(bundle, dataset)?;
    Ok(dists.iter().map(|d| argmax(d)).collect())
}

/// Accuracy, per-type accuracy and per-type predicted marginals. Probe and
/// divergence fields are left empty; see `qonly_probe` and
/// `distribution_divergence`.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset) -> Result<MetricsReport> {
    let (dists, mean_h_vqa, mean_h_qonly) = predict_distributions(bundle, dataset)?;
    let preds: Vec<usize> = dists.iter().map(|d| argmax(d)).collect();
    let num_answers = dataset.num_answers();
    let t_count = dataset.num_types;
    let mut correct = vec![0usize; t_count];
    let mut totals = vec![0usize; t_count];
    let mut marginals = vec![vec![0.0; num_answers]; t_count];
    for (r, &p) in dataset.records.iter().zip(&preds) {
        totals[r.qtype] += 1;
        if p == r.answer {
            correct[r.qtype] += 1;
        }
        marginals[r.qtype][p] += 1.0;
    }
    let overall = correct.iter().sum::<usize>() as f64 / dataset.len() as f64;
    let per_type = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    for (t, m) in marginals.iter_mut().enumerate() {
        if totals[t] > 0 {
            let inv = 1.0 / totals[t] as f64;
            for v in m.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(MetricsReport {
        overall_accuracy: overall,
        per_type_accuracy: per_type,
        probe_train_accuracy: None,
        probe_test_accuracy: None,
        per_type_marginals: marginals,
        tv_vs_train_prior: None,
        kl_vs_train_prior: None,
        tv_vs_test_prior: None,
        kl_vs_test_prior: None,
        mean_h_vqa,
        mean_h_qonly,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_type_tv: Vec<f64>,
    pub per_type_kl: Vec<f64>,
    pub mean_tv: f64,
    pub mean_kl: f64,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// KL(reference || predicted) with additive smoothing eps = 1e-6 applied to
/// the predicted marginal, so empty predicted bins stay finite.
pub fn kl_reference_vs_predicted(reference: &[f64], predicted: &[f64]) -> f64 {
    const EPS: f64 = 1e-6;
    let norm: f64 = predicted.iter().map(|p| p + EPS).sum();
    reference
        .iter()
        .zip(predicted)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, p)| r * (r / ((p + EPS) / norm)).ln())
        .sum()
}

/// Divergence of the model's per-type predicted marginal from reference
/// per-type prior rows (one row of `answers_per_type` entries per type,
/// over the type's local answer support).
pub fn distribution_divergence(
    bundle: &ModelBundle,
    dataset: &Dataset,
    reference: &[Vec<f64>],
) -> Result<DivergenceReport> {
    let report = evaluate(bundle, dataset)?;
    divergence_from_marginals(&report.per_type_marginals, dataset, reference)
}

pub fn divergence_from_marginals(
    marginals: &[Vec<f64>],
    dataset: &Dataset,
    reference: &[Vec<f64>],
) -> Result<DivergenceReport> {
    if reference.len() != dataset.num_types {
        return Err(Error::Contract(format!(
            "reference has {} rows for {} types",
            reference.len(),
            dataset.num_types
        )));
    }
    let m = dataset.answers_per_type;
    let num_answers = dataset.num_answers();
    let mut per_type_tv = Vec::with_capacity(reference.len());
    let mut per_type_kl = Vec::with_capacity(reference.len());
    for (t, row) in reference.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Contract(format!("reference row {t} has wrong width")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "reference row {t} is not a distribution"
            )));
        }
        // embed the local-support prior into the global answer space
        let mut ref_global = vec![0.0; num_answers];
        for (j, &p) in row.iter().enumerate() {
            ref_global[t * m + j] = p;
        }
        per_type_tv.push(total_variation(&marginals[t], &ref_global));
        per_type_kl.push(kl_reference_vs_predicted(&ref_global, &marginals[t]));
    }
    let n = reference.len() as f64;
    Ok(DivergenceReport {
        mean_tv: per_type_tv.iter().sum::<f64>() / n,
        mean_kl: per_type_kl.iter().sum::<f64>() / n,
        per_type_tv,
        per_type_kl,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            hidden: 256,
            learning_rate: 0.001,
            batch_size: 150,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub eval_accuracies: Vec<f64>,
}

/// Frozen question encodings of every record, one row per example.
pub fn encode_questions(bundle: &ModelBundle, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.records.chunks(EVAL_CHUNK) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|r| r.tokens.clone()).collect();
        let feats: Vec<Vec<f64>> = chunk.iter().map(|r| r.features.clone()).collect();
        let mut graph = Graph::new();
        let leaves = bundle.leaves(&mut graph);
        let fw = bundle.forward_vqa(&mut graph, &leaves, &tokens, &feats)?;
        let q = graph.value(fw.q);
        let (rows, cols) = q.rows_cols();
        for r in 0..rows {
            out.push((0..cols).map(|c| q.at(r, c)).collect());
        }
    }
    Ok(out)
}

/// Two-layer classifier trained post hoc on frozen question encodings.
/// Mirrors the in-loop adversary's shape; the bundle is never mutated.
pub fn qonly_probe(
    bundle: &ModelBundle,
    train: &Dataset,
    evals: &[&Dataset],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let d = bundle.dims.q_dim;
    let k = bundle.dims.num_answers;
    let train_q = encode_questions(bundle, train)?;
    let train_labels: Vec<usize> = train.records.iter().map(|r| r.answer).collect();

    // probe parameters, trained from scratch
    let mut rng = rng_for(config.seed, "probe.init");
    let glorot = |rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize| {
        use rand::Rng;
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-a..a))
            .collect::<Vec<f64>>()
    };
    let mut params = vec![
        Tensor::matrix(d, config.hidden, glorot(&mut rng, d, config.hidden)).unwrap(),
        Tensor::vector(vec![0.0; config.hidden]),
        Tensor::matrix(config.hidden, k, glorot(&mut rng, config.hidden, k)).unwrap(),
        Tensor::vector(vec![0.0; k]),
    ];
    let mut m: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
    let mut v: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0u64;

    let n = train_q.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        let mut srng = rng_for_index(config.seed, "probe.shuffle", epoch as u64);
        order.shuffle(&mut srng);
        for chunk in order.chunks(config.batch_size) {
            let mut graph = Graph::new();
            let ids: Vec<_> = params
                .iter()
                .map(|p| graph.leaf(p.clone(), Partition::FqParams))
                .collect();
            let mut xs = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.extend_from_slice(&train_q[i]);
                labels.push(train_labels[i]);
            }
            let x = graph.leaf(Tensor::matrix(chunk.len(), d, xs)?, Partition::Data);
            let h1 = graph.matmul(x, ids[0])?;
            let h1 = graph.add_row(h1, ids[1])?;
            let h1 = graph.relu(h1);
            let logits = graph.matmul(h1, ids[2])?;
            let logits = graph.add_row(logits, ids[3])?;
            let lp = graph.log_softmax(logits);
            let loss = graph.cross_entropy(lp, &labels)?;
            let grads = graph.backward(loss, &[Partition::FqParams])?;
            step += 1;
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            for (pi, id) in ids.iter().enumerate() {
                let g = grads.get(*id);
                let mm = m[pi].values_mut();
                let vv = v[pi].values_mut();
                let pp = params[pi].values_mut();
                for j in 0..g.len() {
                    let gj = g.values()[j];
                    mm[j] = beta1 * mm[j] + (1.0 - beta1) * gj;
                    vv[j] = beta2 * vv[j] + (1.0 - beta2) * gj * gj;
                    pp[j] -= config.learning_rate * (mm[j] / bc1) / ((vv[j] / bc2).sqrt() + eps);
                }
            }
        }
    }

    let probe_accuracy = |qs: &[Vec<f64>], labels: &[usize]| -> Result<f64> {
        let mut correct = 0usize;
        for chunk_start in (0..qs.len()).step_by(EVAL_CHUNK) {
            let chunk = &qs[chunk_start..(chunk_start + EVAL_CHUNK).min(qs.len())];
            let mut graph = Graph::new();
            let ids: Vec<_> = params
                .iter()
                .map(|p| graph.leaf(p.clone(), Partition::FqParams))
                .collect();
            let mut xs = Vec::with_capacity(chunk.len() * d);
            for q in chunk {
                xs.extend_from_slice(q);
            }
            let x = graph.leaf(Tensor::matrix(chunk.len(), d, xs)?, Partition::Data);
            let h1 = graph.matmul(x, ids[0])?;
            let h1 = graph.add_row(h1, ids[1])?;
            let h1 = graph.relu(h1);
            let logits = graph.matmul(h1, ids[2])?;
            let logits = graph.add_row(logits, ids[3])?;
            let lt = graph.value(logits);
            let (rows, cols) = lt.rows_cols();
            for r in 0..rows {
                let mut best = 0;
                for c in 1..cols {
                    if lt.at(r, c) > lt.at(r, best) {
                        best = c;
                    }
                }
                if best == labels[chunk_start + r] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / qs.len() as f64)
    };

    let train_accuracy = probe_accuracy(&train_q, &train_labels)?;
    let mut eval_accuracies = Vec::with_capacity(evals.len());
    for ds in evals {
        let qs = encode_questions(bundle, ds)?;
        let labels: Vec<usize> = ds.records.iter().map(|r| r.answer).collect();
        eval_accuracies.push(probe_accuracy(&qs, &labels)?);
    }
    Ok(ProbeReport {
        train_accuracy,
        eval_accuracies,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_q: f64,
    pub lambda_h: f64,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub probe_train_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_q,lambda_h,seed,test_accuracy,probe_train_accuracy,error\n");
    for r in rows {
        let fmt_opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lambda_q,
            r.lambda_h,
            r.seed,
            fmt_opt(&r.test_accuracy),
            fmt_opt(&r.probe_train_accuracy),
            r.error.clone().unwrap_or_default()
        ));
    }
    out
}

/// One full train+evaluate per (grid point, seed). Individual run failures
/// are recorded in their row; the sweep continues.
pub fn lambda_sweep(
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    grid: &[(f64, f64)],
    seeds: &[u64],
    with_probe: bool,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Contract("sweep requires a nonempty grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for &(lambda_q, lambda_h) in grid {
        for &seed in seeds {
            let row = run_sweep_point(train_ds, test_ds, base, lambda_q, lambda_h, seed, with_probe);
            rows.push(match row {
                Ok(r) => r,
                Err(e) => SweepRow {
                    lambda_q,
                    lambda_h,
                    seed,
                    test_accuracy: None,
                    probe_train_accuracy: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(rows)
}

fn run_sweep_point(
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    lambda_q: f64,
    lambda_h: f64,
    seed: u64,
    with_probe: bool,
) -> Result<SweepRow> {
    let mut config = base.clone();
    config.regularizer = crate::objective::RegularizerConfig::new(lambda_q, lambda_h)?;
    config.seed = seed;
    let dims = ModelDims::with_world(
        train_ds.vocab_size,
        train_ds.raw_dim,
        train_ds.num_answers(),
    );
    let mut bundle = ModelBundle::init(dims, seed);
    crate::harness::train(&mut bundle, &train_ds.to_batch(), &config)?;
    let report = evaluate(&bundle, test_ds)?;
    let probe_train_accuracy = if with_probe {
        let probe_cfg = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        Some(qonly_probe(&bundle, train_ds, &[], &probe_cfg)?.train_accuracy)
    } else {
        None
    };
    Ok(SweepRow {
        lambda_q,
        lambda_h,
        seed,
        test_accuracy: Some(report.overall_accuracy),
        probe_train_accuracy,
        error: None,
    })
}

/// Oracle ensemble counts an example correct when either member's argmax is
/// correct; the mean ensemble takes the argmax of the averaged distributions.
pub fn ensembles(
    preds_a: &[Vec<f64>],
    preds_b: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if preds_a.len() != preds_b.len() || preds_a.len() != labels.len() {
        return Err(Error::Contract(format!(
            "ensemble inputs disagree on length: {} vs {} vs {}",
            preds_a.len(),
            preds_b.len(),
            labels.len()
        )));
    }
    if preds_a.is_empty() {
        return Err(Error::Contract("ensemble requires at least one example".into()));
    }
    let mut oracle = 0usize;
    let mut mean = 0usize;
    for ((a, b), &label) in preds_a.iter().zip(preds_b).zip(labels) {
        let pa = argmax(a);
        let pb = argmax(b);
        if pa == label || pb == label {
            oracle += 1;
        }
        let avg: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        if argmax(&avg) == label {
            mean += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((oracle as f64 / n, mean as f64 / n))
}

//! Synthetic changing-priors benchmark.
//!
//! Questions are a type-indicator token followed by uniform distractor
//! tokens, so every exploitable language regularity lives in the per-type
//! answer prior. Image features carry the true answer's prototype with
//! probability `grounding`, a uniformly random answer's prototype otherwise,
//! plus Gaussian noise. Train and test differ only in their prior tables.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::Batch;
use crate::seeding::{rng_for, rng_for_index};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "invalid split `{other}` (expected train or test)"
            ))),
        }
    }
}

/// Generative tables for one synthetic world. Answer sets are disjoint
/// across question types: global answer index = type * answers_per_type +
/// local index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_types: usize,
    pub answers_per_type: usize,
    pub vocab_size: usize,
    pub question_len: usize,
    pub raw_dim: usize,
    /// beta: probability that the image carries the true answer's prototype.
    pub grounding: f64,
    pub noise_sigma: f64,
    pub p_train: Vec<Vec<f64>>,
    pub p_test: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
}

impl WorldSpec {
    pub fn num_answers(&self) -> usize {
        self.num_types * self.answers_per_type
    }

    pub fn prior(&self, split: Split) -> &[Vec<f64>] {
        match split {
            Split::Train => &self.p_train,
            Split::Test => &self.p_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.answers_per_type == 0 {
            return Err(Error::Config("world needs at least one type and answer".into()));
        }
        if self.vocab_size <= self.num_types {
            return Err(Error::Config(
                "vocab must hold all type tokens plus distractors".into(),
            ));
        }
        if self.question_len == 0 {
            return Err(Error::Config("question_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.grounding) {
            return Err(Error::Config(format!(
                "grounding must lie in [0, 1], got {}",
                self.grounding
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        for (name, table) in [("p_train", &self.p_train), ("p_test", &self.p_test)] {
            if table.len() != self.num_types {
                return Err(Error::Config(format!("{name} must have one row per type")));
            }
            for (t, row) in table.iter().enumerate() {
                if row.len() != self.answers_per_type {
                    return Err(Error::Config(format!("{name} row {t} has wrong width")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Config(format!(
                        "{name} row {t} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        if self.prototypes.len() != self.num_answers() {
            return Err(Error::Config("one prototype per answer required".into()));
        }
        for (a, p) in self.prototypes.iter().enumerate() {
            if p.len() != self.raw_dim {
                return Err(Error::Config(format!("prototype {a} has wrong width")));
            }
        }
        for i in 0..self.prototypes.len() {
            for j in (i + 1)..self.prototypes.len() {
                if self.prototypes[i] == self.prototypes[j] {
                    return Err(Error::Config(format!(
                        "prototypes {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Short hex digest of the canonical serialized spec; stamped into
    /// dataset headers so training can refuse mismatched data.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("spec serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: WorldSpec = toml::from_str(&text).map_err(|e| Error::Parse {
            line: e.span().map(|s| s.start).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The repository's canonical benchmark: 8 types of 5 answers each, strong
/// train-time majority answers whose mass moves to a different answer at
/// test time.
pub fn default_cp_spec(seed: u64) -> WorldSpec {
    let num_types = 8;
    let answers_per_type = 5;
    let raw_dim = 16;
    let majority_mass = 0.82;
    let minority_mass = (1.0 - majority_mass) / (answers_per_type - 1) as f64;

    let mut rng = rng_for(seed, "world.priors");
    let mut p_train = Vec::with_capacity(num_types);
    let mut p_test = Vec::with_capacity(num_types);
    for _ in 0..num_types {
        let maj = rng.gen_range(0..answers_per_type);
        let mut train_row = vec![minority_mass; answers_per_type];
        train_row[maj] = majority_mass;
        // test: the train-majority answer drops to minority mass
        let mut test_row = vec![minority_mass; answers_per_type];
        test_row[(maj + 1) % answers_per_type] = majority_mass;
        p_train.push(train_row);
        p_test.push(test_row);
    }

    // Prototypes cluster by question type: a unit-scale center per type
    // plus a small per-answer offset. The image then reveals the type for
    // free, so the only information unique to the question is the answer
    // prior — the question helps on the training split and misleads on the
    // shifted test split.
    let offset_scale = 0.25;
    let mut crng = rng_for(seed, "world.centers");
    let centers: Vec<Vec<f64>> = (0..num_types)
        .map(|_| {
            (0..raw_dim)
                .map(|_| StandardNormal.sample(&mut crng))
                .collect()
        })
        .collect();
    let mut orng = rng_for(seed, "world.offsets");
    let prototypes = (0..num_types * answers_per_type)
        .map(|i| {
            let center = &centers[i / answers_per_type];
            (0..raw_dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut orng);
                    center[j] + offset_scale * z
                })
                .collect()
        })
        .collect();

    WorldSpec {
        num_types,
        answers_per_type,
        vocab_size: 64,
        question_len: 6,
        raw_dim,
        grounding: 0.95,
        noise_sigma: 0.25,
        p_train,
        p_test,
        prototypes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub qtype: usize,
    pub tokens: Vec<usize>,
    pub features: Vec<f64>,
    pub answer: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub split: Split,
    pub seed: u64,
    pub spec_hash: String,
    pub num_types: usize,
    pub answers_per_type: usize,
    pub vocab_size: usize,
    pub question_len: usize,
    pub raw_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_answers(&self) -> usize {
        self.num_types * self.answers_per_type
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            tokens: self.records.iter().map(|r| r.tokens.clone()).collect(),
            features: self.records.iter().map(|r| r.features.clone()).collect(),
            labels: self.records.iter().map(|r| r.answer).collect(),
        }
    }

    /// Line-oriented text format: one `#`-prefixed header, then one
    /// tab-separated record per line with features at fixed 9-decimal
    /// precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(
            out,
            "# advreg-dataset v1 spec={} split={} seed={} n={} types={} answers_per_type={} vocab={} qlen={} raw_dim={}",
            self.spec_hash,
            self.split,
            self.seed,
            self.records.len(),
            self.num_types,
            self.answers_per_type,
            self.vocab_size,
            self.question_len,
            self.raw_dim
        )?;
        for r in &self.records {
            let tokens = r
                .tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let feats = r
                .features
                .iter()
                .map(|f| format!("{f:.9}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(out, "{}\t{}\t{}\t{}", r.qtype, tokens, feats, r.answer)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        })?;
        let header = header?;
        let mut kv = std::collections::HashMap::new();
        let mut words = header.split_whitespace();
        if words.next() != Some("#") || words.next() != Some("advreg-dataset") {
            return Err(Error::Parse {
                line: 1,
                message: "bad dataset header".into(),
            });
        }
        for tok in words.skip(1) {
            if let Some((k, v)) = tok.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| {
            kv.get(k).cloned().ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("header missing field {k}"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?.parse().map_err(|_| Error::Parse {
                line: 1,
                message: format!("header field {k} is not a number"),
            })
        };

        let split: Split = field("split")?.parse()?;
        let expected_n = num("n")?;
        let mut ds = Dataset {
            records: Vec::with_capacity(expected_n),
            split,
            seed: field("seed")?.parse().map_err(|_| Error::Parse {
                line: 1,
                message: "bad seed".into(),
            })?,
            spec_hash: field("spec")?,
            num_types: num("types")?,
            answers_per_type: num("answers_per_type")?,
            vocab_size: num("vocab")?,
            question_len: num("qlen")?,
            raw_dim: num("raw_dim")?,
        };

        for (lineno, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let bad = |what: &str| Error::Parse {
                line: lineno + 1,
                message: format!("bad {what}"),
            };
            let qtype: usize = parts[0].parse().map_err(|_| bad("type index"))?;
            let tokens: Vec<usize> = parts[1]
                .split(' ')
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("token list"))?;
            let features: Vec<f64> = parts[2]
                .split(' ')
                .map(|f| f.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("feature vector"))?;
            let answer: usize = parts[3].parse().map_err(|_| bad("answer index"))?;
            ds.records.push(Record {
                qtype,
                tokens,
                features,
                answer,
            });
        }
        if ds.records.len() != expected_n {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "header promises {} records, file holds {}",
                    expected_n,
                    ds.records.len()
                ),
            });
        }
        Ok(ds)
    }
}

fn sample_categorical(rng: &mut impl Rng, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Materializes `n` records. Each record derives its own RNG stream from
/// (seed, split, index), so the output is a pure function of the arguments.
pub fn generate_split(spec: &WorldSpec, split: Split, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("record count must be at least 1".into()));
    }
    let prior = spec.prior(split);
    let num_answers = spec.num_answers();
    let stream = format!("record.{split}");
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for_index(seed, &stream, i as u64);
        let t = rng.gen_range(0..spec.num_types);
        let local = sample_categorical(&mut rng, &prior[t]);
        let answer = t * spec.answers_per_type + local;

        let mut tokens = Vec::with_capacity(spec.question_len);
        tokens.push(t);
        for _ in 1..spec.question_len {
            tokens.push(rng.gen_range(spec.num_types..spec.vocab_size));
        }

        let shown = if rng.gen::<f64>() < spec.grounding {
            answer
        } else {
            rng.gen_range(0..num_answers)
        };
        let mut features = spec.prototypes[shown].clone();
        if spec.noise_sigma > 0.0 {
            for f in &mut features {
                let z: f64 = StandardNormal.sample(&mut rng);
                *f += spec.noise_sigma * z;
            }
        }

        records.push(Record {
            qtype: t,
            tokens,
            features,
            answer,
        });
    }
    Ok(Dataset {
        records,
        split,
        seed,
        spec_hash: spec.hash(),
        num_types: spec.num_types,
        answers_per_type: spec.answers_per_type,
        vocab_size: spec.vocab_size,
        question_len: spec.question_len,
        raw_dim: spec.raw_dim,
    })
}

/// Exact accuracy on `eval_split` of the classifier answering
/// `argmax_a P_train(a | type)`, computed from the tables alone.
pub fn bayes_qonly_accuracy(spec: &WorldSpec, eval_split: Split, train_split: Split) -> f64 {
    let train = spec.prior(train_split);
    let eval = spec.prior(eval_split);
    let mut acc = 0.0;
    for t in 0..spec.num_types {
        let best = argmax(&train[t]);
        acc += eval[t][best];
    }
    acc / spec.num_types as f64
}

/// Seed for the Monte Carlo estimator below; separate from any dataset
/// stream so oracle checks never perturb data generation.
const GROUNDED_ORACLE_SEED: u64 = 0x6f7261636c65;

/// Accuracy of the nearest-prototype classifier on image features. Exact
/// closed form when sigma = 0, Monte Carlo over 100k samples otherwise.
pub fn bayes_grounded_accuracy(spec: &WorldSpec, split: Split) -> f64 {
    let num_answers = spec.num_answers();
    if spec.noise_sigma == 0.0 {
        return spec.grounding + (1.0 - spec.grounding) / num_answers as f64;
    }
    let samples = 100_000;
    let prior = spec.prior(split);
    let mut rng = rng_for(GROUNDED_ORACLE_SEED, "grounded-mc");
    let mut correct = 0usize;
    for _ in 0..samples {
        let t = rng.gen_range(0..spec.num_types);
        let local = sample_categorical(&mut rng, &prior[t]);
        let answer = t * spec.answers_per_type + local;
        let shown = if rng.gen::<f64>() < spec.grounding {
            answer
        } else {
            rng.gen_range(0..num_answers)
        };
        let mut feature = spec.prototypes[shown].clone();
        for f in &mut feature {
            let z: f64 = StandardNormal.sample(&mut rng);
            *f += spec.noise_sigma * z;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (a, proto) in spec.prototypes.iter().enumerate() {
            let mut d = 0.0;
            for j in 0..spec.raw_dim {
                let diff = feature[j] - proto[j];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = a;
            }
        }
        if best == answer {
            correct += 1;
        }
    }
    correct as f64 / samples as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            num_types: 1,
            answers_per_type: 2,
            vocab_size: 8,
            question_len: 3,
            raw_dim: 2,
            grounding: 1.0,
            noise_sigma: 0.0,
            p_train: vec![vec![0.9, 0.1]],
            p_test: vec![vec![0.1, 0.9]],
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    #[test]
    fn noiseless_grounding_copies_the_prototype() {
        let spec = small_spec();
        let ds = generate_split(&spec, Split::Train, 50, 3).unwrap();
        for r in &ds.records {
            assert_eq!(r.features, spec.prototypes[r.answer]);
        }
    }

    #[test]
    fn zero_grounding_detaches_features_from_the_answer() {
        let mut spec = default_cp_spec(1);
        spec.grounding = 0.0;
        spec.noise_sigma = 0.0;
        let ds = generate_split(&spec, Split::Train, 4000, 5).unwrap();
        let matches = ds
            .records
            .iter()
            .filter(|r| r.features == spec.prototypes[r.answer])
            .count();
        let frac = matches as f64 / ds.len() as f64;
        // shown prototype is uniform over all answers
        let expect = 1.0 / spec.num_answers() as f64;
        assert!((frac - expect).abs() < 0.02, "frac {frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = default_cp_spec(7);
        let a = generate_split(&spec, Split::Test, 200, 11).unwrap();
        let b = generate_split(&spec, Split::Test, 200, 11).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn rejects_zero_records() {
        let spec = small_spec();
        assert!(generate_split(&spec, Split::Train, 0, 1).is_err());
    }

    #[test]
    fn bayes_qonly_degenerate_onehot() {
        let mut spec = small_spec();
        spec.p_train = vec![vec![1.0, 0.0]];
        spec.p_test = vec![vec![1.0, 0.0]];
        assert_eq!(bayes_qonly_accuracy(&spec, Split::Test, Split::Train), 1.0);
    }

    #[test]
    fn bayes_qonly_flipped_priors() {
        let spec = small_spec();
        let acc = bayes_qonly_accuracy(&spec, Split::Test, Split::Train);
        assert!((acc - 0.1).abs() < 1e-15);
    }

    #[test]
    fn bayes_qonly_uniform_target() {
        let mut spec = small_spec();
        spec.p_test = vec![vec![0.5, 0.5]];
        let acc = bayes_qonly_accuracy(&spec, Split::Test, Split::Train);
        assert!((acc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grounded_accuracy_closed_forms() {
        let spec = small_spec();
        assert_eq!(bayes_grounded_accuracy(&spec, Split::Train), 1.0);
        let mut spec8 = default_cp_spec(1);
        spec8.grounding = 0.8;
        spec8.noise_sigma = 0.0;
        spec8.num_types = 2;
        spec8.answers_per_type = 4;
        spec8.p_train = vec![vec![0.25; 4]; 2];
        spec8.p_test = vec![vec![0.25; 4]; 2];
        spec8.prototypes.truncate(8);
        let acc = bayes_grounded_accuracy(&spec8, Split::Train);
        assert!((acc - 0.825).abs() < 1e-12);
    }

    #[test]
    fn grounded_accuracy_noise_dominated_limit() {
        let mut spec = default_cp_spec(1);
        spec.noise_sigma = 1000.0;
        let acc = bayes_grounded_accuracy(&spec, Split::Train);
        assert!(acc < 0.1, "acc {acc}");
    }

    #[test]
    fn default_spec_fixtures() {
        let spec = default_cp_spec(0);
        spec.validate().unwrap();
        let train_ceiling = bayes_qonly_accuracy(&spec, Split::Train, Split::Train);
        assert!((train_ceiling - 0.82).abs() < 1e-12);
        let test_ceiling = bayes_qonly_accuracy(&spec, Split::Test, Split::Train);
        assert!((test_ceiling - 0.045).abs() < 1e-12);
        assert!(bayes_grounded_accuracy(&spec, Split::Train) >= 0.9);
        assert!(bayes_grounded_accuracy(&spec, Split::Test) >= 0.9);
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = default_cp_spec(2);
        let ds = generate_split(&spec, Split::Train, 25, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(ds.spec_hash, loaded.spec_hash);
        assert_eq!(ds.len(), loaded.len());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.qtype, b.qtype);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.answer, b.answer);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() <= 5e-10);
            }
        }
    }

    #[test]
    fn spec_file_round_trip_preserves_hash() {
        let spec = default_cp_spec(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.toml");
        spec.save(&path).unwrap();
        let loaded = WorldSpec::load(&path).unwrap();
        assert_eq!(spec.hash(), loaded.hash());
    }
}

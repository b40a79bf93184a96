//! The four parameterized maps of the decomposition: question encoder `g`,
//! image encoder `h`, fusion answerer `f`, and the question-only adversary
//! `f_Q`, together with a disjoint partition tag per parameter tensor.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Partition};
use crate::seeding::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Vocabulary size V.
    pub vocab: usize,
    /// Token embedding width e.
    pub embed: usize,
    /// Question encoding width d.
    pub q_dim: usize,
    /// Image encoding width k.
    pub img_dim: usize,
    /// Raw image feature width r.
    pub raw_dim: usize,
    /// Hidden width of the fusion answerer.
    pub fusion_hidden: usize,
    /// Hidden width of the question-only adversary.
    pub adversary_hidden: usize,
    /// Answer set size |A|.
    pub num_answers: usize,
}

impl ModelDims {
    /// Desk-scale defaults; vocabulary and answer count come from the world.
    pub fn with_world(vocab: usize, raw_dim: usize, num_answers: usize) -> Self {
        ModelDims {
            vocab,
            embed: 16,
            q_dim: 32,
            img_dim: 32,
            raw_dim,
            fusion_hidden: 64,
            adversary_hidden: 256,
            num_answers,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tag: Partition,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub dims: ModelDims,
    params: Vec<Param>,
}

/// Leaf node ids for one graph, aligned with `ModelBundle::params()`.
pub struct BundleLeaves {
    ids: Vec<NodeId>,
}

impl BundleLeaves {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

pub struct VqaForward {
    /// Question encoding q, one row per example.
    pub q: NodeId,
    /// Image encoding v, one row per example.
    pub v: NodeId,
    /// Answer logits from the fusion answerer.
    pub logits: NodeId,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

impl ModelBundle {
    /// Initializes all parameters from `seed`. Each component draws from its
    /// own derived stream, so the f/g/h initialization does not depend on the
    /// adversary being present.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut params = Vec::new();
        let mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            Tensor::matrix(r, c, glorot(rng, r, c, r * c)).expect("sized init")
        };

        let mut rg = rng_for(seed, "init.g");
        params.push(Param {
            name: "g.embed".into(),
            tag: Partition::GParams,
            value: mat(&mut rg, dims.vocab, dims.embed),
        });
        params.push(Param {
            name: "g.w".into(),
            tag: Partition::GParams,
            value: mat(&mut rg, dims.embed, dims.q_dim),
        });
        params.push(Param {
            name: "g.b".into(),
            tag: Partition::GParams,
            value: Tensor::vector(vec![0.0; dims.q_dim]),
        });

        let mut rh = rng_for(seed, "init.h");
        params.push(Param {
            name: "h.w".into(),
            tag: Partition::HParams,
            value: mat(&mut rh, dims.raw_dim, dims.img_dim),
        });
        params.push(Param {
            name: "h.b".into(),
            tag: Partition::HParams,
            value: Tensor::vector(vec![0.0; dims.img_dim]),
        });

        let mut rf = rng_for(seed, "init.f");
        let fused = dims.img_dim + dims.q_dim;
        params.push(Param {
            name: "f.w1".into(),
            tag: Partition::FParams,
            value: mat(&mut rf, fused, dims.fusion_hidden),
        });
        params.push(Param {
            name: "f.b1".into(),
            tag: Partition::FParams,
            value: Tensor::vector(vec![0.0; dims.fusion_hidden]),
        });
        params.push(Param {
            name: "f.w2".into(),
            tag: Partition::FParams,
            value: mat(&mut rf, dims.fusion_hidden, dims.num_answers),
        });
        params.push(Param {
            name: "f.b2".into(),
            tag: Partition::FParams,
            value: Tensor::vector(vec![0.0; dims.num_answers]),
        });

        let mut rq = rng_for(seed, "init.fq");
        params.push(Param {
            name: "fq.w1".into(),
            tag: Partition::FqParams,
            value: mat(&mut rq, dims.q_dim, dims.adversary_hidden),
        });
        params.push(Param {
            name: "fq.b1".into(),
            tag: Partition::FqParams,
            value: Tensor::vector(vec![0.0; dims.adversary_hidden]),
        });
        params.push(Param {
            name: "fq.w2".into(),
            tag: Partition::FqParams,
            value: mat(&mut rq, dims.adversary_hidden, dims.num_answers),
        });
        params.push(Param {
            name: "fq.b2".into(),
            tag: Partition::FqParams,
            value: Tensor::vector(vec![0.0; dims.num_answers]),
        });

        ModelBundle { dims, params }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Registers every parameter as a tagged leaf in `graph`.
    pub fn leaves(&self, graph: &mut Graph) -> BundleLeaves {
        let ids = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), p.tag))
            .collect();
        BundleLeaves { ids }
    }

    fn leaf(&self, leaves: &BundleLeaves, name: &str) -> NodeId {
        leaves.ids[self.param_index(name)]
    }

    /// Builds the base VQA forward pass for a batch: question encoding,
    /// image encoding and fused answer logits.
    pub fn forward_vqa(
        &self,
        graph: &mut Graph,
        leaves: &BundleLeaves,
        tokens: &[Vec<usize>],
        features: &[Vec<f64>],
    ) -> Result<VqaForward> {
        if tokens.len() != features.len() {
            return Err(Error::Contract(format!(
                "batch has {} questions but {} feature vectors",
                tokens.len(),
                features.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let qlen = tokens[0].len();
        if qlen == 0 || tokens.iter().any(|t| t.len() != qlen) {
            return Err(Error::Contract(
                "all questions in a batch must share one nonzero length".into(),
            ));
        }
        let m = tokens.len();
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();

        // g: mean-pooled token embeddings -> one rectified hidden layer
        let embed = self.leaf(leaves, "g.embed");
        let looked = graph.embedding_lookup(embed, &flat)?;
        let pooled = graph.mean_pool(looked, qlen)?;
        let gw = self.leaf(leaves, "g.w");
        let gb = self.leaf(leaves, "g.b");
        let proj = graph.matmul(pooled, gw)?;
        let proj = graph.add_row(proj, gb)?;
        let q = graph.relu(proj);

        // h: single linear map on raw features
        let mut fv = Vec::with_capacity(m * self.dims.raw_dim);
        for f in features {
            if f.len() != self.dims.raw_dim {
                return Err(Error::ShapeMismatch {
                    op: "forward_vqa features",
                    left: vec![f.len()],
                    right: vec![self.dims.raw_dim],
                });
            }
            fv.extend_from_slice(f);
        }
        let raw = graph.leaf(
            Tensor::matrix(m, self.dims.raw_dim, fv)?,
            Partition::Data,
        );
        let hw = self.leaf(leaves, "h.w");
        let hb = self.leaf(leaves, "h.b");
        let v = graph.matmul(raw, hw)?;
        let v = graph.add_row(v, hb)?;

        // f: concat(v, q) -> two-layer perceptron
        let fused = graph.concat_cols(v, q)?;
        let fw1 = self.leaf(leaves, "f.w1");
        let fb1 = self.leaf(leaves, "f.b1");
        let h1 = graph.matmul(fused, fw1)?;
        let h1 = graph.add_row(h1, fb1)?;
        let h1 = graph.relu(h1);
        let fw2 = self.leaf(leaves, "f.w2");
        let fb2 = self.leaf(leaves, "f.b2");
        let logits = graph.matmul(h1, fw2)?;
        let logits = graph.add_row(logits, fb2)?;

        Ok(VqaForward { q, v, logits })
    }

    /// Adversary head on the (gradient-reversed) question encoding. The
    /// forward value is independent of `lambda_q`; only gradients flowing
    /// back into the encoder are negated and scaled.
    pub fn forward_qonly(
        &self,
        graph: &mut Graph,
        leaves: &BundleLeaves,
        q: NodeId,
        lambda_q: f64,
    ) -> Result<NodeId> {
        let reversed = graph.grad_reverse(q, lambda_q)?;
        self.adversary_logits(graph, leaves, reversed)
    }

    /// Adversary head applied directly, with no reversal node. Used by the
    /// entropy regularizer, whose gradient into the encoder must not pick up
    /// the `-lambda_q` factor.
    pub fn adversary_logits(
        &self,
        graph: &mut Graph,
        leaves: &BundleLeaves,
        q: NodeId,
    ) -> Result<NodeId> {
        let w1 = self.leaf(leaves, "fq.w1");
        let b1 = self.leaf(leaves, "fq.b1");
        let h1 = graph.matmul(q, w1)?;
        let h1 = graph.add_row(h1, b1)?;
        let h1 = graph.relu(h1);
        let w2 = self.leaf(leaves, "fq.w2");
        let b2 = self.leaf(leaves, "fq.b2");
        let logits = graph.matmul(h1, w2)?;
        let logits = graph.add_row(logits, b2)?;
        Ok(logits)
    }

    /// Writes the checkpoint format: a version line, a dims line, then one
    /// `param <name> <tag> <d0>x<d1> <values...>` line per parameter with
    /// round-trip (shortest exact) decimal values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "advreg-checkpoint v1")?;
        writeln!(
            out,
            "dims vocab={} embed={} q_dim={} img_dim={} raw_dim={} fusion_hidden={} adversary_hidden={} num_answers={}",
            self.dims.vocab,
            self.dims.embed,
            self.dims.q_dim,
            self.dims.img_dim,
            self.dims.raw_dim,
            self.dims.fusion_hidden,
            self.dims.adversary_hidden,
            self.dims.num_answers
        )?;
        for p in &self.params {
            let shape = p
                .value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            write!(out, "param {} {} {}", p.name, p.tag, shape)?;
            for v in p.value.values() {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let parse_err = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            message: msg.to_string(),
        };

        let (ln, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty checkpoint"))?;
        if header? != "advreg-checkpoint v1" {
            return Err(parse_err(ln, "bad checkpoint header"));
        }

        let (ln, dims_line) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing dims line"))?;
        let dims_line = dims_line?;
        let mut kv = std::collections::HashMap::new();
        for tok in dims_line.split_whitespace().skip(1) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| parse_err(ln, "bad dims entry"))?;
            let v: usize = v
                .parse()
                .map_err(|_| parse_err(ln, "bad dims value"))?;
            kv.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| parse_err(ln, &format!("missing dims key {k}")))
        };
        let dims = ModelDims {
            vocab: get("vocab")?,
            embed: get("embed")?,
            q_dim: get("q_dim")?,
            img_dim: get("img_dim")?,
            raw_dim: get("raw_dim")?,
            fusion_hidden: get("fusion_hidden")?,
            adversary_hidden: get("adversary_hidden")?,
            num_answers: get("num_answers")?,
        };

        let mut params = Vec::new();
        for (ln, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("param") {
                return Err(parse_err(ln, "expected param line"));
            }
            let name = parts
                .next()
                .ok_or_else(|| parse_err(ln, "missing name"))?
                .to_string();
            let tag: Partition = parts
                .next()
                .ok_or_else(|| parse_err(ln, "missing tag"))?
                .parse()?;
            let shape: Vec<usize> = parts
                .next()
                .ok_or_else(|| parse_err(ln, "missing shape"))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(ln, "bad shape"))?;
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(ln, "bad value"))?;
            params.push(Param {
                name,
                tag,
                value: Tensor::new(shape, values)?,
            });
        }
        let bundle = ModelBundle { dims, params };
        bundle.check_partitions()?;
        Ok(bundle)
    }

    /// Every trainable parameter must carry exactly one non-DATA tag.
    pub fn check_partitions(&self) -> Result<()> {
        for p in &self.params {
            if p.tag == Partition::Data {
                return Err(Error::Contract(format!(
                    "parameter {} tagged DATA",
                    p.name
                )));
            }
        }
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.params.len() {
            return Err(Error::Contract("duplicate parameter names".into()));
        }
        Ok(())
    }
}

//! The regularized objective and its gradient-routing contract.
//!
//! Loss terms:
//!   L_VQA  cross-entropy of the fused answerer
//!   L_QA   cross-entropy of the question-only adversary
//!   L_H    difference of entropies H(adversary) - H(answerer)
//!
//! Routing per train step:
//!   F, H   gradient of L_VQA only
//!   G      gradient of L_VQA - lambda_q * L_QA - lambda_h * L_H; the L_QA
//!          part arrives through the reversal node, the L_H part through the
//!          answerer and adversary functions with their leaves masked
//!   FQ     gradient of L_QA only

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Partition};
use crate::harness::AdamState;
use crate::models::{BundleLeaves, ModelBundle};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda_q: f64,
    pub lambda_h: f64,
}

impl RegularizerConfig {
    pub fn new(lambda_q: f64, lambda_h: f64) -> Result<Self> {
        if !(lambda_q >= 0.0) || !(lambda_h >= 0.0) {
            return Err(Error::Config(format!(
                "regularizer coefficients must be nonnegative, got lambda_q={lambda_q} lambda_h={lambda_h}"
            )));
        }
        Ok(RegularizerConfig { lambda_q, lambda_h })
    }

    pub fn off() -> Self {
        RegularizerConfig {
            lambda_q: 0.0,
            lambda_h: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        RegularizerConfig::new(self.lambda_q, self.lambda_h).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_vqa: f64,
    pub l_qa: f64,
    pub l_h: f64,
    pub h_qonly: f64,
    pub h_vqa: f64,
}

/// One training batch: parallel token lists, raw image features and answers.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph plus the node ids needed to differentiate each loss term.
pub struct LossGraph {
    pub graph: Graph,
    pub leaves: BundleLeaves,
    pub vqa_logits: NodeId,
    pub qonly_logits: NodeId,
    pub l_vqa: NodeId,
    pub l_qa: NodeId,
    pub l_h: NodeId,
    pub h_qonly: NodeId,
    pub h_vqa: NodeId,
}

impl LossGraph {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l_vqa: self.graph.value(self.l_vqa).scalar_value(),
            l_qa: self.graph.value(self.l_qa).scalar_value(),
            l_h: self.graph.value(self.l_h).scalar_value(),
            h_qonly: self.graph.value(self.h_qonly).scalar_value(),
            h_vqa: self.graph.value(self.h_vqa).scalar_value(),
        }
    }
}

/// Builds the full forward pass and all loss terms for one batch.
pub fn build_losses(
    bundle: &ModelBundle,
    batch: &Batch,
    config: &RegularizerConfig,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Contract("compute_losses requires a nonempty batch".into()));
    }
    config.validate()?;
    let mut graph = Graph::new();
    let leaves = bundle.leaves(&mut graph);
    let fw = bundle.forward_vqa(&mut graph, &leaves, &batch.tokens, &batch.features)?;
    let qonly_logits = bundle.forward_qonly(&mut graph, &leaves, fw.q, config.lambda_q)?;
    // Entropy path: same adversary parameters, no reversal node.
    let qonly_plain = bundle.adversary_logits(&mut graph, &leaves, fw.q)?;

    let vqa_lp = graph.log_softmax(fw.logits);
    let l_vqa = graph.cross_entropy(vqa_lp, &batch.labels)?;
    let qonly_lp = graph.log_softmax(qonly_logits);
    let l_qa = graph.cross_entropy(qonly_lp, &batch.labels)?;

    let h_vqa_rows = graph.entropy_of_softmax(fw.logits);
    let h_vqa = graph.mean_all(h_vqa_rows);
    let h_qonly_rows = graph.entropy_of_softmax(qonly_plain);
    let h_qonly = graph.mean_all(h_qonly_rows);
    let l_h = graph.sub(h_qonly, h_vqa)?;

    Ok(LossGraph {
        graph,
        leaves,
        vqa_logits: fw.logits,
        qonly_logits,
        l_vqa,
        l_qa,
        l_h,
        h_qonly,
        h_vqa,
    })
}

pub fn compute_losses(
    bundle: &ModelBundle,
    batch: &Batch,
    config: &RegularizerConfig,
) -> Result<LossTerms> {
    Ok(build_losses(bundle, batch, config)?.terms())
}

/// Per-parameter gradients for one step, aligned with `bundle.params()`.
pub fn step_gradients(
    bundle: &ModelBundle,
    lg: &mut LossGraph,
    config: &RegularizerConfig,
) -> Result<Vec<Tensor>> {
    let mut totals: Vec<Tensor> = bundle
        .params()
        .iter()
        .map(|p| Tensor::zeros_like(&p.value))
        .collect();

    let add_into = |totals: &mut Vec<Tensor>,
                    grads: &crate::graph::Gradients,
                    leaves: &BundleLeaves,
                    tags: &[Partition],
                    scale: f64| {
        for (i, p) in bundle.params().iter().enumerate() {
            if tags.contains(&p.tag) {
                let mut g = grads.get(leaves.ids()[i]).clone();
                if scale != 1.0 {
                    g.scale_assign(scale);
                }
                totals[i].add_assign(&g);
            }
        }
    };

    // L_VQA updates f, g and h.
    let vqa_tags = [Partition::FParams, Partition::GParams, Partition::HParams];
    let g_vqa = lg.graph.backward(lg.l_vqa, &vqa_tags)?;
    add_into(&mut totals, &g_vqa, &lg.leaves, &vqa_tags, 1.0);

    // L_QA updates the adversary directly and reaches g through the reversal
    // node, which supplies the -lambda_q factor.
    let qa_tags = if config.lambda_q > 0.0 {
        vec![Partition::FqParams, Partition::GParams]
    } else {
        vec![Partition::FqParams]
    };
    let g_qa = lg.graph.backward(lg.l_qa, &qa_tags)?;
    add_into(&mut totals, &g_qa, &lg.leaves, &qa_tags, 1.0);

    // L_H deposits into g only; the encoder ascends on it.
    if config.lambda_h > 0.0 {
        let h_tags = [Partition::GParams];
        let g_h = lg.graph.backward(lg.l_h, &h_tags)?;
        add_into(&mut totals, &g_h, &lg.leaves, &h_tags, -config.lambda_h);
    }

    Ok(totals)
}

/// One optimization step: builds the loss graph, routes gradients per the
/// table above, and applies a single shared Adam update.
pub fn train_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    config: &RegularizerConfig,
    opt: &mut AdamState,
    lr: f64,
) -> Result<LossTerms> {
    let mut lg = build_losses(bundle, batch, config)?;
    let terms = lg.terms();
    let grads = step_gradients(bundle, &mut lg, config)?;
    opt.step(bundle, &grads, lr)?;
    Ok(terms)
}

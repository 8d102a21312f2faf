//! Batch-hard triplet loss, identification heads and the composite
//! meta-train / meta-test objectives.

use std::rc::Rc;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, BatchStats, EncoderParams, EncoderVars, Mode};
use crate::error::{Error, Result};
use crate::memory::IdentityMemory;
use crate::metabn::{self, MetaBn, MixPlan};
use crate::rng::Rng;
use crate::synthdata::PkBatch;

pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN }
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: Rc<Vec<usize>>) -> Var {
    // Shift by the detached row max for stability; the softmax is unchanged.
    let (_, cols) = g.shape(logits);
    let row_max = g
        .value(logits)
        .map_axis(ndarray::Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .insert_axis(ndarray::Axis(1));
    let row_max = g.constant(row_max);
    let row_max = g.broadcast_cols(row_max, cols);
    let shifted = g.sub(logits, row_max);
    let e = g.exp(shifted);
    let z = g.sum_cols(e);
    let lse = g.ln(z);
    let picked = g.select_cols(shifted, labels);
    let per_row = g.sub(lse, picked);
    g.mean(per_row)
}

/// Pairwise Euclidean distances between the rows of `x`.
pub fn pairwise_distances(g: &mut Graph, x: Var) -> Var {
    let (b, _) = g.shape(x);
    let sq = g.square(x);
    let norms = g.sum_cols(sq);
    let rows = g.broadcast_cols(norms, b);
    let cols = g.transpose(rows);
    let xt = g.transpose(x);
    let gram = g.matmul(x, xt);
    let gram2 = g.scale(gram, -2.0);
    let s = g.add(rows, cols);
    let d2 = g.add(s, gram2);
    let d2 = g.clamp_min(d2, 1e-12);
    g.sqrt(d2)
}

/// Batch-hard triplet loss: per anchor, hinge on the farthest positive
/// minus the nearest negative plus `margin`; averaged over anchors.
pub fn triplet_loss(g: &mut Graph, embeddings: Var, labels: &[usize], cfg: &TripletConfig) -> Result<Var> {
    if cfg.margin.is_nan() || cfg.margin < 0.0 {
        return Err(Error::Config(format!("triplet margin {} must be >= 0", cfg.margin)));
    }
    let b = labels.len();
    if g.shape(embeddings).0 != b {
        return Err(Error::Shape("one label per embedding row".into()));
    }
    let dist = pairwise_distances(g, embeddings);
    let d = g.value(dist);
    let mut hardest_pos = Vec::with_capacity(b);
    let mut hardest_neg = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| d[[i, j]] > d[[i, p]]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| d[[i, j]] < d[[i, n]]) {
                neg = Some(j);
            }
        }
        match (pos, neg) {
            (Some(p), Some(n)) => {
                hardest_pos.push(p);
                hardest_neg.push(n);
            }
            (None, _) => {
                return Err(Error::Batch(format!(
                    "identity {} has a single instance in the batch; triplet mining needs K >= 2",
                    labels[i]
                )))
            }
            (_, None) => {
                return Err(Error::Batch(
                    "triplet mining needs at least 2 identities in the batch".into(),
                ))
            }
        }
    }
    let dp = g.select_cols(dist, Rc::new(hardest_pos));
    let dn = g.select_cols(dist, Rc::new(hardest_neg));
    let gap = g.sub(dp, dn);
    let gap = g.add_scalar(gap, cfg.margin);
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcVariant {
    Global,
    Parallel,
}

/// Parametric identification head. Weights are `embed_dim x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcClassifier {
    pub variant: FcVariant,
    /// Identities per source domain.
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
}

impl FcClassifier {
    pub fn new(variant: FcVariant, sizes: &[usize], embed_dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut init = |classes: usize| Array2::from_shape_simple_fn((embed_dim, classes), || normal.sample(rng));
        let weights = match variant {
            FcVariant::Global => vec![init(sizes.iter().sum())],
            FcVariant::Parallel => sizes.iter().map(|&n| init(n)).collect(),
        };
        Self {
            variant,
            sizes: sizes.to_vec(),
            weights,
        }
    }

    /// Weight tensor index and label offset for `domain`.
    pub fn head(&self, domain: usize) -> Result<(usize, usize)> {
        if domain >= self.sizes.len() {
            return Err(Error::Config(format!("no classifier for source domain {domain}")));
        }
        Ok(match self.variant {
            FcVariant::Global => (0, self.sizes[..domain].iter().sum()),
            FcVariant::Parallel => (domain, 0),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.weights.iter().map(|w| g.param(w.clone())).collect()
    }
}

/// Cross-entropy of an FC head over raw embeddings.
pub fn fc_id_loss(
    g: &mut Graph,
    classifier: &FcClassifier,
    weights: &[Var],
    embeddings: Var,
    domain: usize,
    labels: &[usize],
) -> Result<Var> {
    let (w, offset) = classifier.head(domain)?;
    let n = classifier.sizes[domain];
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, n_identities: n });
    }
    let logits = g.matmul(embeddings, weights[w]);
    let targets = labels.iter().map(|&l| l + offset).collect();
    Ok(cross_entropy(g, logits, Rc::new(targets)))
}

/// The identification term used next to the triplet loss.
#[derive(Clone, Copy)]
pub enum IdHead<'a> {
    Memory(&'a [IdentityMemory]),
    Fc {
        classifier: &'a FcClassifier,
        weights: &'a [Var],
    },
}

impl IdHead<'_> {
    /// Memory heads see unit-norm embeddings, FC heads raw ones.
    pub fn loss(&self, g: &mut Graph, raw: Var, domain: usize, labels: &[usize]) -> Result<Var> {
        match self {
            IdHead::Memory(memories) => {
                let memory = memories
                    .get(domain)
                    .ok_or_else(|| Error::Config(format!("no memory for source domain {domain}")))?;
                let unit = encoder::l2_normalize(g, raw);
                memory.id_loss(g, unit, labels)
            }
            IdHead::Fc { classifier, weights } => fc_id_loss(g, classifier, weights, raw, domain, labels),
        }
    }
}

/// Triplet plus identification loss of one domain's batch.
#[derive(Clone, Debug)]
pub struct DomainLoss {
    pub total: Var,
    pub triplet: Var,
    pub id: Var,
    /// Detached unit-norm embeddings, for memory updates.
    pub embeddings: Array2<f64>,
    /// Batch statistics of every BN layer.
    pub stats: Vec<BatchStats>,
}

#[allow(clippy::too_many_arguments)]
pub fn domain_loss(
    g: &mut Graph,
    vars: &EncoderVars,
    params: &EncoderParams,
    head: IdHead<'_>,
    domain: usize,
    batch: &PkBatch,
    triplet: &TripletConfig,
    metabn: Option<&mut MetaBn>,
) -> Result<DomainLoss> {
    let x = g.constant(batch.features.clone());
    let (embedding, stats) = match metabn {
        Some(bn) => {
            let trunk = encoder::forward_trunk(g, vars, params, x, Mode::Train)?;
            let last = vars.last();
            let (out, s) = bn.metatrain_forward(g, trunk.last_input, last.gamma, last.beta)?;
            let mut stats = trunk.stats;
            stats.push(s);
            (out, stats)
        }
        None => {
            let f = encoder::forward(g, vars, params, x, Mode::Train)?;
            (f.embedding, f.stats)
        }
    };
    let tri = triplet_loss(g, embedding, &batch.labels, triplet)?;
    let id = head.loss(g, embedding, domain, &batch.labels)?;
    let total = g.add(tri, id);
    let embeddings = encoder::l2_normalize_rows(g.value(embedding));
    Ok(DomainLoss {
        total,
        triplet: tri,
        id,
        embeddings,
        stats,
    })
}

#[derive(Clone, Debug)]
pub struct MetaTrainLoss {
    pub loss: Var,
    pub domains: Vec<DomainLoss>,
}

/// Mean of the per-domain losses. With `metabn`, the final-layer batch
/// statistics of each domain are recorded for the meta-test stage.
pub fn meta_train_loss(
    g: &mut Graph,
    vars: &EncoderVars,
    params: &EncoderParams,
    head: IdHead<'_>,
    batches: &[(usize, &PkBatch)],
    triplet: &TripletConfig,
    mut metabn: Option<&mut MetaBn>,
) -> Result<MetaTrainLoss> {
    if batches.is_empty() {
        return Err(Error::Config("meta-train stage needs at least one domain".into()));
    }
    let mut domains = Vec::with_capacity(batches.len());
    for &(domain, batch) in batches {
        let bn = metabn.as_deref_mut();
        domains.push(domain_loss(g, vars, params, head, domain, batch, triplet, bn)?);
    }
    let mut total = domains[0].total;
    for d in &domains[1..] {
        total = g.add(total, d.total);
    }
    let loss = g.scale(total, 1.0 / domains.len() as f64);
    Ok(MetaTrainLoss { loss, domains })
}

#[derive(Clone, Copy, Debug)]
pub struct MetaTestLoss {
    pub loss: Var,
    pub triplet: Var,
    pub id: Var,
}

/// Triplet loss on the plainly normalized meta-test embeddings plus the
/// identification loss averaged over the MetaBN mixtures (or on the plain
/// embeddings when `mixing` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn meta_test_loss(
    g: &mut Graph,
    vars: &EncoderVars,
    params: &EncoderParams,
    head: IdHead<'_>,
    domain: usize,
    batch: &PkBatch,
    triplet: &TripletConfig,
    mixing: Option<&MixPlan>,
) -> Result<MetaTestLoss> {
    let x = g.constant(batch.features.clone());
    let f = encoder::forward(g, vars, params, x, Mode::Train)?;
    let tri = triplet_loss(g, f.embedding, &batch.labels, triplet)?;
    let id = match mixing {
        None => head.loss(g, f.embedding, domain, &batch.labels)?,
        Some(plan) => {
            let last = vars.last();
            let mixed = metabn::mix_forward(g, f.last_input, last.gamma, last.beta, plan)?;
            let mut sum = None;
            for m in &mixed {
                let l = head.loss(g, *m, domain, &batch.labels)?;
                sum = Some(match sum {
                    None => l,
                    Some(s) => g.add(s, l),
                });
            }
            let sum = sum.expect("mix_forward returns at least one output");
            g.scale(sum, 1.0 / mixed.len() as f64)
        }
    };
    let loss = g.add(tri, id);
    Ok(MetaTestLoss { loss, triplet: tri, id })
}

//! Pseudo-labels, joint label prior, and class-balanced node sampling for
//! label-conditioned domain alignment.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, Graph};
use crate::nn::one_hot;

/// Per-row argmax; ties go to the lowest class index.
pub fn pseudo_labels(probs: &DMatrix<f64>) -> Vec<usize> {
    probs
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDistribution {
    pub probs: Vec<f64>,
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Joint class frequencies over source labels and target pseudo-labels.
pub fn estimate_prior(src_labels: &[usize], tgt_pseudo: &[usize], num_classes: usize) -> Result<PriorDistribution> {
    let total = src_labels.len() + tgt_pseudo.len();
    if total == 0 {
        return Err(Error::InvalidArgument("prior needs at least one label".into()));
    }
    if let Some(&y) = src_labels.iter().chain(tgt_pseudo).find(|&&y| y >= num_classes) {
        return Err(Error::IndexOutOfRange { index: y, len: num_classes });
    }
    let src = class_counts(src_labels, num_classes);
    let tgt = class_counts(tgt_pseudo, num_classes);
    let probs = src.iter().zip(&tgt).map(|(a, b)| (a + b) as f64 / total as f64).collect();
    Ok(PriorDistribution { probs })
}

/// `KL(p ‖ q)` between Laplace-smoothed class frequencies of two label vectors.
pub fn label_shift_divergence(a: &[usize], b: &[usize], num_classes: usize) -> f64 {
    let smooth = |labels: &[usize]| -> Vec<f64> {
        let counts = class_counts(labels, num_classes);
        let denom = (labels.len() + num_classes) as f64;
        counts.into_iter().map(|c| (c + 1) as f64 / denom).collect()
    };
    let (p, q) = (smooth(a), smooth(b));
    p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

/// Nodes from both domains with their discriminator conditioning vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedBatch {
    pub src_indices: Vec<usize>,
    pub tgt_indices: Vec<usize>,
    /// One-hot source labels, `|src| × C`.
    pub src_label_onehots: DMatrix<f64>,
    /// Predicted target distributions, `|tgt| × C`.
    pub tgt_pred_dists: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BalancedSample {
    pub batch: BalancedBatch,
    pub src_subgraph: Graph,
    pub tgt_subgraph: Graph,
    pub src_class_counts: Vec<usize>,
    pub tgt_class_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

/// One domain's candidates for sampling.
pub struct SamplingDomain<'a> {
    pub graph: &'a Graph,
    /// Label (or pseudo-label) for every node of `graph`.
    pub labels: &'a [usize],
    /// Nodes eligible for sampling.
    pub pool: &'a [usize],
}

/// Draws `min(batch_per_class, available)` nodes of every class from each domain.
///
/// Selection inside a class pool is weighted by `1 / prior[class]`, which is
/// constant within the pool, so draws are uniform without replacement.
/// Equal quotas make the batch balanced whatever the prior says.
pub fn sample_balanced(
    src: &SamplingDomain<'_>,
    tgt: &SamplingDomain<'_>,
    tgt_probs: &DMatrix<f64>,
    prior: &PriorDistribution,
    batch_per_class: usize,
    seed: u64,
) -> Result<BalancedSample> {
    if batch_per_class == 0 {
        return Err(Error::InvalidArgument("batch_per_class must be at least 1".into()));
    }
    let num_classes = prior.probs.len();
    if tgt_probs.nrows() != tgt.graph.num_nodes() || tgt_probs.ncols() != num_classes {
        return Err(Error::Dimension("target probabilities do not match target graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut draw = |dom: &SamplingDomain<'_>, name: &str| -> Result<Vec<usize>> {
        if dom.labels.len() != dom.graph.num_nodes() {
            return Err(Error::Dimension(format!("{name} labels do not cover the graph")));
        }
        let mut chosen = Vec::new();
        for class in 0..num_classes {
            let pool: Vec<usize> = dom.pool.iter().copied().filter(|&i| dom.labels[i] == class).collect();
            if pool.is_empty() {
                let msg = format!("{name} graph has no nodes of class {class}; it contributes none");
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            let take = batch_per_class.min(pool.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
            picked.sort_unstable();
            chosen.extend(picked);
        }
        Ok(chosen)
    };
    let src_indices = draw(src, "source")?;
    let tgt_indices = draw(tgt, "target")?;
    finish(src, tgt, tgt_probs, num_classes, src_indices, tgt_indices, warnings)
}

/// Label-agnostic alternative: a uniform draw of `total` nodes from each pool.
pub fn sample_uniform(
    src: &SamplingDomain<'_>,
    tgt: &SamplingDomain<'_>,
    tgt_probs: &DMatrix<f64>,
    num_classes: usize,
    total: usize,
    seed: u64,
) -> Result<BalancedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &[usize]| -> Vec<usize> {
        let mut v: Vec<usize> = index::sample(&mut rng, pool.len(), total.min(pool.len()))
            .into_iter()
            .map(|k| pool[k])
            .collect();
        v.sort_unstable();
        v
    };
    let src_indices = draw(src.pool);
    let tgt_indices = draw(tgt.pool);
    finish(src, tgt, tgt_probs, num_classes, src_indices, tgt_indices, Vec::new())
}

fn finish(
    src: &SamplingDomain<'_>,
    tgt: &SamplingDomain<'_>,
    tgt_probs: &DMatrix<f64>,
    num_classes: usize,
    src_indices: Vec<usize>,
    tgt_indices: Vec<usize>,
    warnings: Vec<String>,
) -> Result<BalancedSample> {
    let src_batch_labels: Vec<usize> = src_indices.iter().map(|&i| src.labels[i]).collect();
    let tgt_batch_labels: Vec<usize> = tgt_indices.iter().map(|&i| tgt.labels[i]).collect();
    let (src_subgraph, _) = induced_subgraph(src.graph, &src_indices)?;
    let (tgt_subgraph, _) = induced_subgraph(tgt.graph, &tgt_indices)?;
    Ok(BalancedSample {
        batch: BalancedBatch {
            src_label_onehots: one_hot(&src_batch_labels, num_classes),
            tgt_pred_dists: tgt_probs.select_rows(&tgt_indices),
            src_indices,
            tgt_indices,
        },
        src_subgraph,
        tgt_subgraph,
        src_class_counts: class_counts(&src_batch_labels, num_classes),
        tgt_class_counts: class_counts(&tgt_batch_labels, num_classes),
        warnings,
    })
}

/// One JSON line per refinement round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub prior: Vec<f64>,
    pub src_class_counts: Vec<usize>,
    pub tgt_class_counts: Vec<usize>,
    pub label_shift_kl: f64,
    pub clean_set_size: usize,
}

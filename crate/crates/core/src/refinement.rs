//! Noisy-label detection by comparing anchor-similarity structure in the
//! encoder space against a projection trained to carry label information.
//!
//! A projector `g` and statistic network `T` are trained to maximize the
//! MINE lower bound on `I(g(h), y)` under the (noisy) labels. Each node's
//! softmax similarity profile over a set of anchor nodes is computed in both
//! spaces; the KL divergence between the two profiles scores how much the
//! label-driven projection disagrees with the structure-driven encoder.
//! Nodes scoring at or above the `alpha` percentile are dropped from the
//! supervised loss.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::class_counts;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::cosine_matrix;
use crate::nn::{mi_statistic_by_class, projector, projector_forward, softmax_rows};
use crate::optim::Adam;
use crate::params::{ModelParams, Module};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `k` distinct anchors from `candidates`.
///
/// When every class present among the candidates' labels has at least
/// `⌊k/C⌋` members, each class contributes `⌊k/C⌋` anchors and the remainder
/// is drawn uniformly from the leftover candidates; otherwise the whole draw
/// is uniform. The returned indices are positions into `candidates`.
pub fn select_anchors(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<AnchorSet> {
    let n = labels.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("{k} anchors requested from {n} nodes")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("need at least two anchors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = k / num_classes.max(1);
    let counts = class_counts(labels, num_classes);
    let stratify = per_class > 0 && counts.iter().all(|&c| c >= per_class);

    let mut chosen = Vec::with_capacity(k);
    if stratify {
        for class in 0..num_classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            chosen.extend(index::sample(&mut rng, members.len(), per_class).into_iter().map(|j| members[j]));
        }
    }
    let mut taken = vec![false; n];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let need = k - chosen.len();
    chosen.extend(index::sample(&mut rng, rest.len(), need).into_iter().map(|j| rest[j]));
    chosen.sort_unstable();
    Ok(AnchorSet { indices: chosen, seed })
}

/// Softmax over anchors of cosine similarity scaled by `1/tau`, one row per node.
pub fn similarity_distribution(embeds: &DMatrix<f64>, anchors: &AnchorSet, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("empty anchor set".into()));
    }
    if let Some(&a) = anchors.indices.iter().find(|&&a| a >= embeds.nrows()) {
        return Err(Error::IndexOutOfRange { index: a, len: embeds.nrows() });
    }
    let anchor_rows = embeds.select_rows(&anchors.indices);
    let sims = cosine_matrix(embeds, &anchor_rows)? / tau;
    Ok(softmax_rows(&sims))
}

/// `d_i = KL(W_i ‖ R_i)` for strictly positive row-stochastic inputs.
pub fn inconsistency_scores(w: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Vec<f64>> {
    if w.shape() != r.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", w.shape(), r.shape())));
    }
    if let Some(&v) = w.iter().chain(r.iter()).find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("similarity entries must be positive, got {v}")));
    }
    Ok(w.row_iter()
        .zip(r.row_iter())
        .map(|(wi, ri)| {
            wi.iter()
                .zip(ri.iter())
                .map(|(a, b)| a * (a / b).ln())
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanSet {
    /// Node indices that were scored, aligned with `scores`.
    pub nodes: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    /// Node indices with `score < threshold`, ascending.
    pub kept: Vec<usize>,
    pub alpha: f64,
}

impl CleanSet {
    /// Every scored node kept; used when refinement is disabled.
    pub fn everything(nodes: &[usize]) -> Self {
        CleanSet {
            nodes: nodes.to_vec(),
            scores: vec![0.0; nodes.len()],
            threshold: f64::INFINITY,
            kept: nodes.to_vec(),
            alpha: 100.0,
        }
    }

    pub fn removed(&self) -> Vec<usize> {
        let kept: std::collections::HashSet<usize> = self.kept.iter().copied().collect();
        self.nodes.iter().copied().filter(|i| !kept.contains(i)).collect()
    }

    /// CSV with header `node_index,score,kept,noisy_label,true_label`.
    /// `true_label` is left empty when unknown.
    pub fn to_csv(&self, noisy_labels: &[usize], true_labels: Option<&[usize]>) -> String {
        let kept: std::collections::HashSet<usize> = self.kept.iter().copied().collect();
        let mut out = String::from("node_index,score,kept,noisy_label,true_label\n");
        for (&node, score) in self.nodes.iter().zip(&self.scores) {
            let truth = true_labels.map(|t| t[node].to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{node},{score:?},{},{},{truth}",
                u8::from(kept.contains(&node)),
                noisy_labels[node]
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, noisy_labels: &[usize], true_labels: Option<&[usize]>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(noisy_labels, true_labels)).map_err(|e| Error::io(path, e))
    }
}

/// Nearest-rank percentile threshold with strict-inequality retention.
///
/// `μ` is the score at rank `⌈alpha/100 · N⌉` in ascending order.
pub fn clean_set(scores: &[f64], alpha: f64, nodes: &[usize]) -> Result<CleanSet> {
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 100), got {alpha}")));
    }
    if scores.len() != nodes.len() {
        return Err(Error::Dimension("scores and nodes differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("inconsistency score".into()));
    }
    if scores.is_empty() {
        return Ok(CleanSet { nodes: vec![], scores: vec![], threshold: 0.0, kept: vec![], alpha });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((alpha / 100.0 * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let threshold = sorted[rank - 1];
    let mut kept: Vec<usize> = nodes
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s < threshold)
        .map(|(&n, _)| n)
        .collect();
    kept.sort_unstable();
    Ok(CleanSet { nodes: nodes.to_vec(), scores: scores.to_vec(), threshold, kept, alpha })
}

/// One ascent step on the MINE bound for the projector and statistic network.
///
/// `h` is treated as a constant, so the encoder receives no gradient.
/// Returns the bound before the step.
pub fn mi_step(params: &mut ModelParams, opt: &mut Adam, h: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<f64> {
    let (bound, grads) = {
        let mut tape = Tape::new(params).freeze([
            Module::Encoder,
            Module::Classifier,
            Module::Discriminator,
        ]);
        let hv = tape.constant(h.clone());
        let bound = mine_bound_on_tape(&mut tape, hv, labels, num_classes)?;
        let loss = tape.scale(bound, -1.0);
        (tape.scalar(bound), tape.backward(loss)?)
    };
    opt.step(params, &grads);
    Ok(bound)
}

/// MINE bound of `I(g(h), y)` with the product term grouped by class.
pub fn mine_bound_on_tape(
    tape: &mut Tape<'_>,
    h: crate::autodiff::Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<crate::autodiff::Var> {
    let f = projector(tape, h)?;
    let scores = mi_statistic_by_class(tape, f, num_classes)?;
    let joint = tape.pick_per_row(scores, labels)?;
    let n = labels.len() as f64;
    let weights: Vec<f64> = class_counts(labels, num_classes).into_iter().map(|c| c as f64 / n).collect();
    tape.mine_bound(joint, scores, &weights)
}

pub fn mine_bound_value(params: &ModelParams, h: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<f64> {
    let mut tape = Tape::new(params);
    let hv = tape.constant(h.clone());
    let b = mine_bound_on_tape(&mut tape, hv, labels, num_classes)?;
    Ok(tape.scalar(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    pub anchors: usize,
    pub alpha: f64,
    pub tau: f64,
    pub mi_steps: usize,
}

#[derive(Debug, Clone)]
pub struct RefinementOutcome {
    pub clean: CleanSet,
    pub anchors: AnchorSet,
    pub mi_trajectory: Vec<f64>,
}

/// Trains the projection on `(h, noisy labels)`, then scores and thresholds.
///
/// `h` holds encoder embeddings for the rows listed in `nodes`; `labels` are
/// their noisy labels in the same order.
pub fn refinement_round(
    params: &mut ModelParams,
    opt: &mut Adam,
    h: &DMatrix<f64>,
    nodes: &[usize],
    labels: &[usize],
    num_classes: usize,
    cfg: &RefinementConfig,
    seed: u64,
) -> Result<RefinementOutcome> {
    if h.nrows() != nodes.len() || labels.len() != nodes.len() {
        return Err(Error::Dimension("embeddings, nodes and labels must align".into()));
    }
    let mut mi_trajectory = Vec::with_capacity(cfg.mi_steps);
    for _ in 0..cfg.mi_steps {
        mi_trajectory.push(mi_step(params, opt, h, labels, num_classes)?);
    }
    let f = projector_forward(h, params)?;
    let anchors = select_anchors(labels, num_classes, cfg.anchors.min(nodes.len()), seed)?;
    let w = similarity_distribution(h, &anchors, cfg.tau)?;
    let r = similarity_distribution(&f, &anchors, cfg.tau)?;
    let scores = inconsistency_scores(&w, &r)?;
    let clean = clean_set(&scores, cfg.alpha, nodes)?;
    Ok(RefinementOutcome { clean, anchors, mi_trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_cover_small_sets_and_repeat() {
        let labels = vec![0, 1, 0, 1, 1];
        assert_eq!(select_anchors(&labels, 2, 5, 3).unwrap().indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(select_anchors(&[0, 1], 2, 2, 3).unwrap().indices, vec![0, 1]);
        let big: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(select_anchors(&big, 4, 10, 9).unwrap(), select_anchors(&big, 4, 10, 9).unwrap());
        assert!(select_anchors(&labels, 2, 6, 0).is_err());
    }

    #[test]
    fn anchors_are_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let a = select_anchors(&labels, 2, 8, 1).unwrap();
        let counts = class_counts(&a.indices.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 2);
        assert_eq!(counts, vec![4, 4]);
    }

    #[test]
    fn orthogonal_node_gets_uniform_row() {
        let e = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let anchors = AnchorSet { indices: vec![1, 2], seed: 0 };
        let w = similarity_distribution(&e, &anchors, 0.5).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15 && (w[(0, 1)] - 0.5).abs() < 1e-15);
        let e2 = (2f64).exp();
        assert!((w[(1, 0)] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((w[(1, 1)] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        for row in w.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_anchor_rows_are_one() {
        let e = DMatrix::from_fn(4, 2, |r, c| (r + c) as f64 + 0.5);
        let w = similarity_distribution(&e, &AnchorSet { indices: vec![2], seed: 0 }, 0.5).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kl_scores() {
        let w = DMatrix::from_row_slice(1, 2, &[0.9, 0.1]);
        let r = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        assert_eq!(inconsistency_scores(&w, &w).unwrap(), vec![0.0]);
        let d = inconsistency_scores(&w, &r).unwrap()[0];
        assert!((d - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-15);
        assert!((d - 0.368).abs() < 1e-3);
        assert!((inconsistency_scores(&r, &w).unwrap()[0] - d).abs() > 1e-3);
        let zero = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(inconsistency_scores(&zero, &r).is_err());
    }

    #[test]
    fn percentile_threshold() {
        let nodes = [0, 1, 2, 3];
        let c = clean_set(&[0.1, 0.2, 0.3, 0.4], 75.0, &nodes).unwrap();
        assert_eq!(c.threshold, 0.3);
        assert_eq!(c.kept, vec![0, 1]);
        assert!(clean_set(&[0.5; 4], 80.0, &nodes).unwrap().kept.is_empty());
        let near = clean_set(&[0.4, 0.1, 0.3, 0.2], 99.999, &nodes).unwrap();
        assert_eq!(near.kept, vec![1, 2, 3]);
        assert_eq!(near.removed(), vec![0]);
        assert!(clean_set(&[0.1], 100.0, &[0]).is_err());
        assert!(clean_set(&[0.1], 0.0, &[0]).is_err());
    }

    #[test]
    fn csv_report() {
        let c = clean_set(&[0.1, 0.2, 0.3], 50.0, &[4, 5, 6]).unwrap();
        let noisy = vec![0, 0, 0, 0, 1, 0, 1];
        let csv = c.to_csv(&noisy, None);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("4,0.1,1,1,"));
        let with_truth = c.to_csv(&noisy, Some(&[0, 0, 0, 0, 1, 1, 1]));
        assert!(with_truth.lines().nth(2).unwrap().ends_with(",0,1"));
    }
}

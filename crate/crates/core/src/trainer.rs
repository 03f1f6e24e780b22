//! Warm-up, refinement rounds with class-balanced adversarial alignment, and
//! evaluation on the target graph.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    estimate_prior, label_shift_divergence, pseudo_labels, sample_balanced, sample_uniform, BalancedSample, RoundLog,
    SamplingDomain,
};
use crate::autodiff::{Tape, Var};
use crate::config::{TrainConfig, TrainMode};
use crate::data::DomainPair;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, SparseOperator};
use crate::losses::LossReport;
use crate::nn::{classifier_forward, classifier_logits, discriminator_logits, encode, softmax_rows, ViewInput};
use crate::optim::Adam;
use crate::params::{ModelParams, Module};
use crate::refinement::{mi_step, refinement_round, CleanSet, RefinementConfig};
use crate::spectral::{truncated_svd, FactorCache, LowRankFactors, DEFAULT_OVERSAMPLING, DEFAULT_POWER_ITERATIONS};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ROUND_LOG_FILE: &str = "rounds.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// SplitMix64 finalizer over `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_SVD_SOURCE: u64 = 1;
const TAG_SVD_TARGET: u64 = 2;
const TAG_ANCHORS: u64 = 3;
const TAG_SAMPLE: u64 = 4;

/// Normalized adjacency and (optionally) its low-rank reconstruction, with
/// the first propagation of the features cached for both.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub adjacency: SparseOperator,
    pub lowrank: Option<LowRankFactors>,
    adjacency_px: DMatrix<f64>,
    lowrank_px: Option<DMatrix<f64>>,
}

impl PreparedGraph {
    pub fn new(g: &Graph, cfg: &TrainConfig, with_lowrank: bool, seed: u64, cache: Option<&FactorCache>) -> Result<Self> {
        use crate::graph::Propagator;
        let adjacency = normalize_adjacency(g, cfg.self_loops);
        let adjacency_px = adjacency.propagate(g.features())?;
        let lowrank = if with_lowrank {
            let q = cfg.q.min(g.num_nodes());
            let defaults = cfg.oversampling == DEFAULT_OVERSAMPLING && cfg.power_iterations == DEFAULT_POWER_ITERATIONS;
            Some(match cache {
                Some(cache) if defaults => {
                    let key = format!("{}{}", g.content_hash(), if cfg.self_loops { "" } else { "-noloops" });
                    cache.get_or_compute(&key, &adjacency, q, seed)?
                }
                _ => truncated_svd(&adjacency, q, cfg.oversampling, cfg.power_iterations, seed)?,
            })
        } else {
            None
        };
        let lowrank_px = lowrank.as_ref().map(|f| f.propagate(g.features())).transpose()?;
        Ok(PreparedGraph { adjacency, lowrank, adjacency_px, lowrank_px })
    }

    pub fn adjacency_view(&self) -> ViewInput<'_> {
        ViewInput { propagator: &self.adjacency, propagated_features: self.adjacency_px.clone() }
    }

    pub fn lowrank_view(&self) -> Option<ViewInput<'_>> {
        Some(ViewInput {
            propagator: self.lowrank.as_ref()?,
            propagated_features: self.lowrank_px.clone()?,
        })
    }
}

/// Per-pair precomputation shared by every run on that pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub source: PreparedGraph,
    pub target: PreparedGraph,
}

impl PreparedPair {
    pub fn new(pair: &DomainPair, cfg: &TrainConfig) -> Result<Self> {
        PreparedPair::with_cache(pair, cfg, None)
    }

    /// Low-rank factors are computed only when the configuration uses them.
    pub fn with_cache(pair: &DomainPair, cfg: &TrainConfig, cache: Option<&FactorCache>) -> Result<Self> {
        let lowrank = needs_lowrank(cfg);
        Ok(PreparedPair {
            source: PreparedGraph::new(&pair.source, cfg, lowrank, derive_seed(cfg.seed, TAG_SVD_SOURCE, 0), cache)?,
            target: PreparedGraph::new(&pair.target, cfg, lowrank, derive_seed(cfg.seed, TAG_SVD_TARGET, 0), cache)?,
        })
    }

    /// Adjacency views only; enough for evaluation and export.
    pub fn for_inference(pair: &DomainPair, cfg: &TrainConfig) -> Result<Self> {
        Ok(PreparedPair {
            source: PreparedGraph::new(&pair.source, cfg, false, 0, None)?,
            target: PreparedGraph::new(&pair.target, cfg, false, 0, None)?,
        })
    }

    pub fn has_lowrank(&self) -> bool {
        self.source.lowrank.is_some() && self.target.lowrank.is_some()
    }
}

pub fn needs_lowrank(cfg: &TrainConfig) -> bool {
    cfg.mode == TrainMode::Alex && !cfg.ablation.disable_contrastive
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Round(usize),
    SourceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossReport,
    pub clean_set_size: usize,
}

/// Domain loss before and after one update, for adversarial diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainLossStep {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundLog>,
    pub clean_sets: Vec<CleanSet>,
    pub mi_trajectories: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
    pub discriminator_steps: Vec<DomainLossStep>,
    pub encoder_steps: Vec<DomainLossStep>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_sup,l_cl,l_da,l_mi,total,clean_set_size\n");
        for r in &self.epochs {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.epoch, l.l_sup, l.l_cl, l.l_da, l.l_mi, l.total, r.clean_set_size
            );
        }
        out
    }

    pub fn rounds_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSetQuality {
    /// Fraction of kept nodes whose label is uncorrupted.
    pub precision: f64,
    /// Fraction of uncorrupted candidates that were kept.
    pub recall: f64,
    /// Fraction of removed nodes whose label is corrupted.
    pub removed_corrupted_fraction: Option<f64>,
    pub kept: usize,
    pub removed: usize,
}

impl CleanSetQuality {
    pub fn measure(clean: &CleanSet, flipped: &[bool]) -> Self {
        let kept_ok = clean.kept.iter().filter(|&&i| !flipped[i]).count();
        let candidates_ok = clean.nodes.iter().filter(|&&i| !flipped[i]).count();
        let removed = clean.removed();
        let removed_bad = removed.iter().filter(|&&i| flipped[i]).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        CleanSetQuality {
            precision: ratio(kept_ok, clean.kept.len()),
            recall: ratio(kept_ok, candidates_ok),
            removed_corrupted_fraction: (!removed.is_empty()).then(|| ratio(removed_bad, removed.len())),
            kept: clean.kept.len(),
            removed: removed.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_accuracy: f64,
    /// `None` for classes absent from the target labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub macro_f1: f64,
    pub num_target_nodes: usize,
    /// Present when the source labels carry a corruption record and a clean set exists.
    pub clean_set: Option<CleanSetQuality>,
    pub loss_log: Option<String>,
}

pub fn accuracy_report(predicted: &[usize], truth: &[usize], num_classes: usize) -> EvalReport {
    let n = truth.len();
    let mut tp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut predicted_count = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        support[t] += 1;
        predicted_count[p] += 1;
        if p == t {
            tp[t] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let per_class_accuracy = (0..num_classes)
        .map(|c| (support[c] > 0).then(|| tp[c] as f64 / support[c] as f64))
        .collect();
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        if support[c] == 0 && predicted_count[c] == 0 {
            continue;
        }
        present += 1;
        let denom = support[c] + predicted_count[c];
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    EvalReport {
        target_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class_accuracy,
        macro_f1: if present == 0 { 0.0 } else { f1_sum / present as f64 },
        num_target_nodes: n,
        clean_set: None,
        loss_log: None,
    }
}

/// Embeddings of `g` on the normalized-adjacency view.
pub fn embed(params: &ModelParams, g: &PreparedGraph) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new(params);
    let h = encode(&mut tape, &g.adjacency_view())?;
    Ok(tape.value(h).clone())
}

pub fn predict_target(params: &ModelParams, prep: &PreparedPair) -> Result<DMatrix<f64>> {
    classifier_forward(&embed(params, &prep.target)?, params)
}

/// Target accuracy through the evaluation accessor.
pub fn evaluate(params: &ModelParams, pair: &DomainPair, prep: &PreparedPair) -> Result<EvalReport> {
    let predicted = pseudo_labels(&predict_target(params, prep)?);
    Ok(accuracy_report(&predicted, pair.evaluation_labels(), pair.num_classes()))
}

/// `domain,node,label,e0,..` rows for both graphs; source rows carry the
/// training labels and target rows the evaluation labels.
pub fn embeddings_csv(params: &ModelParams, pair: &DomainPair, prep: &PreparedPair) -> Result<String> {
    let hs = embed(params, &prep.source)?;
    let ht = embed(params, &prep.target)?;
    let mut out = String::from("domain,node,label");
    for k in 0..hs.ncols() {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for (domain, h, labels) in [("source", &hs, pair.source_labels()), ("target", &ht, pair.evaluation_labels())] {
        for i in 0..h.nrows() {
            let _ = write!(out, "{domain},{i},{}", labels[i]);
            for v in h.row(i).iter() {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_embeddings(params: &ModelParams, pair: &DomainPair, prep: &PreparedPair, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv(params, pair, prep)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub domain: String,
    pub node: usize,
    pub label: usize,
    pub values: Vec<f64>,
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse { line: ln + 1, msg: format!("bad embedding row `{line}`") };
        let mut it = line.split(',');
        let domain = it.next().ok_or_else(bad)?.to_string();
        let node = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let label = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let values = it.map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        rows.push(EmbeddingRow { domain, node, label, values });
    }
    Ok(rows)
}

pub fn embeddings_to_csv(rows: &[EmbeddingRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("domain,node,label");
    for k in 0..dim {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.domain, r.node, r.label);
        for v in &r.values {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: ModelParams,
    pub report: EvalReport,
    pub log: TrainLog,
}

impl FitOutput {
    /// Writes checkpoint, report, training log, round log and clean-set files.
    pub fn save(&self, dir: &Path, pair: &DomainPair) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        put(CHECKPOINT_FILE.into(), self.params.to_checkpoint_bytes())?;
        put(REPORT_FILE.into(), report_json(&self.report)?.into_bytes())?;
        put(TRAIN_LOG_FILE.into(), self.log.to_csv().into_bytes())?;
        put(ROUND_LOG_FILE.into(), self.log.rounds_jsonl()?.into_bytes())?;
        let truth = pair.corruption.as_ref().map(|c| c.original.as_slice());
        for (r, clean) in self.log.clean_sets.iter().enumerate() {
            put(format!("clean_set_round{r}.csv"), clean.to_csv(pair.source_labels(), truth).into_bytes())?;
        }
        Ok(written)
    }
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Training state for one run.
pub struct Trainer<'p> {
    pair: &'p DomainPair,
    prep: &'p PreparedPair,
    cfg: TrainConfig,
    pub params: ModelParams,
    main_opt: Adam,
    disc_opt: Adam,
    mi_opt: Adam,
    pub log: TrainLog,
    /// Record domain loss before/after each adversarial update (costs extra forward passes).
    pub diagnostics: bool,
    epoch: usize,
    clean: CleanSet,
}

impl<'p> Trainer<'p> {
    pub fn new(pair: &'p DomainPair, prep: &'p PreparedPair, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if needs_lowrank(cfg) && !prep.has_lowrank() {
            return Err(Error::InvalidArgument("prepared pair lacks low-rank factors".into()));
        }
        let arch = cfg.architecture(pair.source.num_features(), pair.num_classes());
        let params = ModelParams::init(&arch, cfg.seed)?;
        let lr = cfg.learning_rate;
        Ok(Trainer {
            main_opt: Adam::new(&params, &[Module::Encoder, Module::Classifier], lr),
            disc_opt: Adam::new(&params, &[Module::Discriminator], lr),
            mi_opt: Adam::new(&params, &[Module::Projector, Module::MiStatistic], lr),
            clean: CleanSet::everything(&pair.splits.train),
            params,
            pair,
            prep,
            cfg: cfg.clone(),
            log: TrainLog::default(),
            diagnostics: false,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn clean_set(&self) -> &CleanSet {
        &self.clean
    }

    fn contrastive_on(&self) -> bool {
        !self.cfg.ablation.disable_contrastive && self.cfg.mode == TrainMode::Alex
    }

    fn check_params(&self) -> Result<()> {
        if self.params.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged(format!("non-finite parameters after epoch {}", self.epoch)))
        }
    }

    /// Per-node contrastive loss on both graphs, each normalized by its node count.
    fn contrastive_term<'a>(&self, tape: &mut Tape<'a>, hs: Var, ht: Var) -> Result<Option<Var>>
    where
        'p: 'a,
    {
        if !self.contrastive_on() {
            return Ok(None);
        }
        let prep: &'a PreparedPair = self.prep;
        let (Some(ls), Some(lt)) = (prep.source.lowrank_view(), prep.target.lowrank_view()) else {
            return Err(Error::InvalidArgument("missing low-rank view".into()));
        };
        let hs_hat = encode(tape, &ls)?;
        let ht_hat = encode(tape, &lt)?;
        let cs = tape.contrastive(hs, hs_hat, self.cfg.tau)?;
        let ct = tape.contrastive(ht, ht_hat, self.cfg.tau)?;
        let cs = tape.scale(cs, 1.0 / ls.num_nodes() as f64);
        let ct = tape.scale(ct, 1.0 / lt.num_nodes() as f64);
        Ok(Some(tape.add(cs, ct)?))
    }

    /// One step on `L_SUP` over the noisy train split plus `L_CL` on both graphs.
    pub fn warmup_epoch(&mut self) -> Result<LossReport> {
        let labels = self.pair.source_labels();
        let train = &self.pair.splits.train;
        let (report, grads) = {
            let prep: &PreparedPair = self.prep;
            let mut tape = Tape::new(&self.params).freeze([Module::Projector, Module::Discriminator, Module::MiStatistic]);
            let hs = encode(&mut tape, &prep.source.adjacency_view())?;
            let logits = classifier_logits(&mut tape, hs)?;
            let sup = tape.softmax_cross_entropy(logits, labels, train)?;
            let mut loss = sup;
            let mut l_cl = 0.0;
            if self.contrastive_on() {
                let ht = encode(&mut tape, &prep.target.adjacency_view())?;
                if let Some(cl) = self.contrastive_term(&mut tape, hs, ht)? {
                    l_cl = tape.scalar(cl);
                    loss = tape.add(loss, cl)?;
                }
            }
            (LossReport::new(tape.scalar(sup), l_cl, 0.0, 0.0), tape.backward(loss)?)
        };
        self.main_opt.step(&mut self.params, &grads);
        self.check_params()?;
        self.record(Phase::Warmup, report.clone(), train.len());
        Ok(report)
    }

    pub fn warmup(&mut self) -> Result<()> {
        for _ in 0..self.cfg.warmup_epochs {
            self.warmup_epoch()?;
        }
        Ok(())
    }

    fn record(&mut self, phase: Phase, loss: LossReport, clean_set_size: usize) {
        self.log.epochs.push(EpochRecord { epoch: self.epoch, phase, loss, clean_set_size });
        self.epoch += 1;
    }

    /// Source-only baseline: `L_SUP` on the noisy train split for the same epoch budget.
    pub fn source_only(&mut self) -> Result<()> {
        let budget = self.cfg.warmup_epochs + self.cfg.rounds * self.cfg.epochs_per_round;
        let labels = self.pair.source_labels();
        let train = &self.pair.splits.train;
        for _ in 0..budget {
            let (l, grads) = {
                let mut tape = Tape::new(&self.params).freeze([Module::Projector, Module::Discriminator, Module::MiStatistic]);
                let hs = encode(&mut tape, &self.prep.source.adjacency_view())?;
                let logits = classifier_logits(&mut tape, hs)?;
                let sup = tape.softmax_cross_entropy(logits, labels, train)?;
                (tape.scalar(sup), tape.backward(sup)?)
            };
            self.main_opt.step(&mut self.params, &grads);
            self.check_params()?;
            self.record(Phase::SourceOnly, LossReport::new(l, 0.0, 0.0, 0.0), train.len());
        }
        Ok(())
    }

    /// Clean-set selection on the train split's encoder embeddings.
    fn refine(&mut self, round: usize) -> Result<()> {
        let train = &self.pair.splits.train;
        if self.cfg.ablation.disable_refinement {
            self.clean = CleanSet::everything(train);
            return Ok(());
        }
        let labels = self.pair.source_labels();
        let hs = embed(&self.params, &self.prep.source)?;
        let h_train = hs.select_rows(train);
        let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let rcfg = RefinementConfig {
            anchors: self.cfg.anchors,
            alpha: self.cfg.alpha,
            tau: self.cfg.tau,
            mi_steps: self.cfg.mi_inner_steps,
        };
        let seed = derive_seed(self.cfg.seed, TAG_ANCHORS, round as u64);
        let outcome = refinement_round(
            &mut self.params,
            &mut self.mi_opt,
            &h_train,
            train,
            &y_train,
            self.pair.num_classes(),
            &rcfg,
            seed,
        )?;
        self.log.mi_trajectories.push(outcome.mi_trajectory);
        let mut clean = outcome.clean;
        if clean.kept.is_empty() {
            let msg = format!("round {round}: {}; falling back to the full train split", Error::NoCleanSamples);
            log::warn!("{msg}");
            self.log.warnings.push(msg);
            clean.kept = train.clone();
        }
        self.clean = clean;
        Ok(())
    }

    fn sample(&mut self, round: usize, tgt_probs: &DMatrix<f64>, tgt_pseudo: &[usize]) -> Result<BalancedSample> {
        let labels = self.pair.source_labels();
        let num_classes = self.pair.num_classes();
        let target_pool: Vec<usize> = (0..self.pair.target.num_nodes()).collect();
        let src = SamplingDomain { graph: &self.pair.source, labels, pool: &self.clean.kept };
        let tgt = SamplingDomain { graph: &self.pair.target, labels: tgt_pseudo, pool: &target_pool };
        let clean_labels: Vec<usize> = self.clean.kept.iter().map(|&i| labels[i]).collect();
        let prior = estimate_prior(&clean_labels, tgt_pseudo, num_classes)?;
        let seed = derive_seed(self.cfg.seed, TAG_SAMPLE, round as u64);
        let sample = if self.cfg.ablation.disable_balanced {
            sample_uniform(&src, &tgt, tgt_probs, num_classes, self.cfg.batch_per_class * num_classes, seed)?
        } else {
            sample_balanced(&src, &tgt, tgt_probs, &prior, self.cfg.batch_per_class, seed)?
        };
        self.log.warnings.extend(sample.warnings.iter().cloned());
        self.log.rounds.push(RoundLog {
            round,
            prior: prior.probs,
            src_class_counts: sample.src_class_counts.clone(),
            tgt_class_counts: sample.tgt_class_counts.clone(),
            label_shift_kl: label_shift_divergence(&clean_labels, tgt_pseudo, num_classes),
            clean_set_size: self.clean.kept.len(),
        });
        Ok(sample)
    }

    /// Per-node domain loss of the current parameters on a batch.
    fn domain_loss_on<'a>(
        tape: &mut Tape<'a>,
        hs: Var,
        ht: Var,
        sample: &BalancedSample,
    ) -> Result<Var> {
        let b = &sample.batch;
        let zs_in = tape.gather_rows(hs, &b.src_indices)?;
        let zt_in = tape.gather_rows(ht, &b.tgt_indices)?;
        let ys = tape.constant(b.src_label_onehots.clone());
        let pt = tape.constant(b.tgt_pred_dists.clone());
        let zs = discriminator_logits(tape, zs_in, ys)?;
        let zt = discriminator_logits(tape, zt_in, pt)?;
        let da = tape.domain_adversarial(zs, zt)?;
        let n = (b.src_indices.len() + b.tgt_indices.len()).max(1);
        Ok(tape.scale(da, 1.0 / n as f64))
    }

    fn domain_loss_value(&self, sample: &BalancedSample) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let hs = encode(&mut tape, &self.prep.source.adjacency_view())?;
        let ht = encode(&mut tape, &self.prep.target.adjacency_view())?;
        let da = Self::domain_loss_on(&mut tape, hs, ht, sample)?;
        Ok(tape.scalar(da))
    }

    /// Discriminator descent on `L_DA` with the encoder frozen.
    fn discriminator_step(&mut self, sample: &BalancedSample) -> Result<f64> {
        let (before, grads) = {
            let mut tape = Tape::new(&self.params).freeze([
                Module::Encoder,
                Module::Classifier,
                Module::Projector,
                Module::MiStatistic,
            ]);
            let hs = encode(&mut tape, &self.prep.source.adjacency_view())?;
            let ht = encode(&mut tape, &self.prep.target.adjacency_view())?;
            let da = Self::domain_loss_on(&mut tape, hs, ht, sample)?;
            (tape.scalar(da), tape.backward(da)?)
        };
        self.disc_opt.step(&mut self.params, &grads);
        if self.diagnostics {
            let after = self.domain_loss_value(sample)?;
            self.log.discriminator_steps.push(DomainLossStep { before, after });
        }
        Ok(before)
    }

    /// Encoder and classifier descent on `L_SUP + L_CL - L_DA` with the
    /// discriminator frozen. Returns the loss parts and source embeddings.
    fn encoder_step(&mut self, sample: &BalancedSample) -> Result<(f64, f64, f64, DMatrix<f64>)> {
        let labels = self.pair.source_labels();
        let (parts, hs_value, grads) = {
            let prep: &PreparedPair = self.prep;
            let mut tape = Tape::new(&self.params).freeze([Module::Projector, Module::Discriminator, Module::MiStatistic]);
            let hs = encode(&mut tape, &prep.source.adjacency_view())?;
            let ht = encode(&mut tape, &prep.target.adjacency_view())?;
            let logits = classifier_logits(&mut tape, hs)?;
            let sup = tape.softmax_cross_entropy(logits, labels, &sample.batch.src_indices)?;
            let da = Self::domain_loss_on(&mut tape, hs, ht, sample)?;
            let neg_da = tape.scale(da, -1.0);
            let mut loss = tape.add(sup, neg_da)?;
            let mut l_cl = 0.0;
            if let Some(cl) = self.contrastive_term(&mut tape, hs, ht)? {
                l_cl = tape.scalar(cl);
                loss = tape.add(loss, cl)?;
            }
            let parts = (tape.scalar(sup), l_cl, tape.scalar(da));
            (parts, tape.value(hs).clone(), tape.backward(loss)?)
        };
        self.main_opt.step(&mut self.params, &grads);
        if self.diagnostics {
            let after = self.domain_loss_value(sample)?;
            self.log.encoder_steps.push(DomainLossStep { before: parts.2, after });
        }
        Ok((parts.0, parts.1, parts.2, hs_value))
    }

    /// One refinement round: clean set, prior, sampling, adversarial epochs.
    pub fn round(&mut self, round: usize) -> Result<()> {
        self.refine(round)?;
        self.log.clean_sets.push(self.clean.clone());
        let tgt_probs = softmax_rows(&{
            let mut tape = Tape::new(&self.params);
            let ht = encode(&mut tape, &self.prep.target.adjacency_view())?;
            let z = classifier_logits(&mut tape, ht)?;
            tape.value(z).clone()
        });
        let tgt_pseudo = pseudo_labels(&tgt_probs);
        let sample = self.sample(round, &tgt_probs, &tgt_pseudo)?;
        if sample.batch.src_indices.is_empty() {
            return Err(Error::NoCleanSamples);
        }

        let labels = self.pair.source_labels();
        let clean_labels: Vec<usize> = self.clean.kept.iter().map(|&i| labels[i]).collect();
        let mut previous: Option<f64> = None;
        let mut flat = 0;
        for _ in 0..self.cfg.epochs_per_round {
            self.discriminator_step(&sample)?;
            let (l_sup, l_cl, l_da, hs) = self.encoder_step(&sample)?;
            let h_clean = hs.select_rows(&self.clean.kept);
            let l_mi = mi_step(&mut self.params, &mut self.mi_opt, &h_clean, &clean_labels, self.pair.num_classes())?;
            self.check_params()?;
            let report = LossReport::new(l_sup, l_cl, l_da, l_mi);
            if !report.total.is_finite() {
                return Err(Error::Diverged(format!("loss is {} at epoch {}", report.total, self.epoch)));
            }
            let total = report.total;
            self.record(Phase::Round(round), report, self.clean.kept.len());
            if let Some(prev) = previous {
                flat = if (total - prev).abs() < self.cfg.plateau_tolerance { flat + 1 } else { 0 };
                if flat >= self.cfg.plateau_patience {
                    break;
                }
            }
            previous = Some(total);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        match self.cfg.mode {
            TrainMode::SourceOnly => self.source_only(),
            TrainMode::Alex => {
                self.warmup()?;
                for r in 0..self.cfg.rounds {
                    self.round(r)?;
                }
                Ok(())
            }
        }
    }

    pub fn finish(self) -> Result<FitOutput> {
        let mut report = evaluate(&self.params, self.pair, self.prep)?;
        if let Some(rec) = &self.pair.corruption {
            if let Some(last) = self.log.clean_sets.last() {
                report.clean_set = Some(CleanSetQuality::measure(last, &rec.flipped));
            }
        }
        report.loss_log = Some(TRAIN_LOG_FILE.to_string());
        Ok(FitOutput { params: self.params, report, log: self.log })
    }
}

pub fn fit_prepared(pair: &DomainPair, prep: &PreparedPair, cfg: &TrainConfig) -> Result<FitOutput> {
    let mut trainer = Trainer::new(pair, prep, cfg)?;
    trainer.run()?;
    trainer.finish()
}

pub fn fit(pair: &DomainPair, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let prep = PreparedPair::new(pair, cfg)?;
    fit_prepared(pair, &prep, cfg)
}

//! Source/target graph pairs: synthetic generation, on-disk layout and splits.
//!
//! Target labels live outside the target [`Graph`] and are reachable only
//! through [`DomainPair::evaluation_labels`]; nothing on the training path
//! calls it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::noise::CorruptionRecord;

pub const SOURCE_FILE: &str = "source.graph";
pub const TARGET_FILE: &str = "target.graph";
pub const SPLITS_FILE: &str = "splits.jsonl";
pub const META_FILE: &str = "meta.txt";
pub const CORRUPTION_FILE: &str = "corruption.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

impl Splits {
    /// Seeded 7:2:1 partition: `⌊0.7N⌋` train, `⌊0.2N⌋` test, remainder val.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 7 / 10;
        let n_test = n * 2 / 10;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..n_train + n_test].to_vec();
        let mut val = order[n_train + n_test..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        val.sort_unstable();
        Splits { train, test, val }
    }

    fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            split: &'a str,
            indices: &'a [usize],
        }
        let mut out = String::new();
        for (split, indices) in [("train", &self.train), ("test", &self.test), ("val", &self.val)] {
            out.push_str(&serde_json::to_string(&Line { split, indices })?);
            out.push('\n');
        }
        Ok(out)
    }

    fn from_jsonl(text: &str, n: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            split: String,
            indices: Vec<usize>,
        }
        let mut splits = Splits { train: vec![], test: vec![], val: vec![] };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(line)?;
            let slot = match l.split.as_str() {
                "train" => &mut splits.train,
                "test" => &mut splits.test,
                "val" => &mut splits.val,
                other => return Err(Error::Data(format!("unknown split `{other}`"))),
            };
            *slot = l.indices;
        }
        let mut seen = vec![false; n];
        for &i in splits.train.iter().chain(&splits.test).chain(&splits.val) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("splits do not cover every source node".into()));
        }
        Ok(splits)
    }
}

#[derive(Debug, Clone)]
pub struct DomainPair {
    /// Source graph whose labels are the (possibly corrupted) training labels.
    pub source: Graph,
    /// Target graph without labels.
    pub target: Graph,
    pub splits: Splits,
    pub corruption: Option<CorruptionRecord>,
    pub meta: BTreeMap<String, String>,
    target_labels: Vec<usize>,
}

impl DomainPair {
    pub fn new(
        source: Graph,
        mut target: Graph,
        target_labels: Vec<usize>,
        splits: Splits,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        if source.labels().is_none() {
            return Err(Error::Data("source graph must be labeled".into()));
        }
        if source.num_features() != target.num_features() {
            return Err(Error::Data(format!(
                "feature dimension mismatch: source {} vs target {}",
                source.num_features(),
                target.num_features()
            )));
        }
        if source.num_classes() != target.num_classes() {
            return Err(Error::Data("class count differs between domains".into()));
        }
        if target_labels.len() != target.num_nodes() || target_labels.iter().any(|&y| y >= target.num_classes()) {
            return Err(Error::Data("target evaluation labels do not fit target graph".into()));
        }
        target.take_labels();
        Ok(DomainPair { source, target, splits, corruption: None, meta, target_labels })
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    /// Training labels of the source graph.
    pub fn source_labels(&self) -> &[usize] {
        self.source.labels().expect("source is labeled")
    }

    /// Uncorrupted source labels when a corruption record exists.
    pub fn source_true_labels(&self) -> &[usize] {
        self.corruption.as_ref().map_or_else(|| self.source_labels(), |c| &c.original)
    }

    /// Held-out target labels. For evaluation only.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.target_labels
    }

    /// Replaces held-out target labels; used to audit that training never reads them.
    pub fn with_evaluation_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.target.num_nodes() {
            return Err(Error::Data("wrong number of evaluation labels".into()));
        }
        self.target_labels = labels;
        Ok(self)
    }

    /// Installs corrupted training labels on the source graph.
    pub fn with_corruption(mut self, record: CorruptionRecord) -> Result<Self> {
        if record.original != self.source_true_labels() {
            return Err(Error::Data("corruption record does not match source labels".into()));
        }
        self.source = self.source.with_labels(Some(record.corrupted.clone()))?;
        self.corruption = Some(record);
        Ok(self)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let source = self.source.clone().with_labels(Some(self.source_true_labels().to_vec()))?;
        source.save(dir.join(SOURCE_FILE))?;
        let target = self.target.clone().with_labels(Some(self.target_labels.clone()))?;
        target.save(dir.join(TARGET_FILE))?;
        write(dir.join(SPLITS_FILE), &self.splits.to_jsonl()?)?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(meta, "{k}={v}");
        }
        write(dir.join(META_FILE), &meta)?;
        if let Some(c) = &self.corruption {
            c.save(dir.join(CORRUPTION_FILE))?;
        }
        Ok(())
    }

    /// Loads a pair directory. A missing split file is replaced by a fresh
    /// 7:2:1 split drawn with `split_seed`; a corruption file, when present,
    /// supplies the training labels.
    pub fn load(dir: impl AsRef<Path>, split_seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let source = Graph::load(dir.join(SOURCE_FILE))?;
        let mut target = Graph::load(dir.join(TARGET_FILE))?;
        let target_labels = target
            .take_labels()
            .ok_or_else(|| Error::Data("target graph file carries no evaluation labels".into()))?;
        let splits_path = dir.join(SPLITS_FILE);
        let splits = if splits_path.exists() {
            Splits::from_jsonl(&read(&splits_path)?, source.num_nodes())?
        } else {
            Splits::random(source.num_nodes(), split_seed)
        };
        let meta_path = dir.join(META_FILE);
        let meta = if meta_path.exists() {
            KeyValues::parse(&read(&meta_path)?)?.into_map()
        } else {
            BTreeMap::new()
        };
        let mut pair = DomainPair::new(source, target, target_labels, splits, meta)?;
        let corruption_path = dir.join(CORRUPTION_FILE);
        if corruption_path.exists() {
            pair = pair.with_corruption(CorruptionRecord::load(&corruption_path)?)?;
        }
        Ok(pair)
    }
}

fn write(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_domain_pair(source_path: &Path, target_path: &Path, split_seed: u64) -> Result<DomainPair> {
    let source = Graph::load(source_path)?;
    let mut target = Graph::load(target_path)?;
    let target_labels = target
        .take_labels()
        .ok_or_else(|| Error::Data("target graph file carries no evaluation labels".into()))?;
    let splits = Splits::random(source.num_nodes(), split_seed);
    DomainPair::new(source, target, target_labels, splits, BTreeMap::new())
}

/// Stochastic-block-model parameters of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShape {
    pub p_intra: f64,
    pub p_inter: f64,
    pub class_proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub nodes_per_domain: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub source: DomainShape,
    pub target: DomainShape,
    /// Distance between any two class means, in units of `sigma`.
    pub class_separation: f64,
    pub sigma: f64,
    /// Length of the target class-mean displacement, in units of `sigma`.
    pub mean_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let uniform = vec![0.25; 4];
        SynthConfig {
            nodes_per_domain: 1000,
            num_classes: 4,
            feature_dim: 32,
            source: DomainShape { p_intra: 0.02, p_inter: 0.002, class_proportions: uniform.clone() },
            target: DomainShape { p_intra: 0.02, p_inter: 0.002, class_proportions: uniform },
            class_separation: 3.0,
            sigma: 1.0,
            mean_shift: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if self.nodes_per_domain == 0 || c == 0 {
            return Err(Error::Config("nodes_per_domain and num_classes must be positive".into()));
        }
        if self.feature_dim < c {
            return Err(Error::Config(format!(
                "feature_dim {} must be at least num_classes {c}",
                self.feature_dim
            )));
        }
        if !(self.sigma > 0.0) || !(self.class_separation >= 0.0) || !(self.mean_shift >= 0.0) {
            return Err(Error::Config("sigma must be positive; separation and shift non-negative".into()));
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            for p in [d.p_intra, d.p_inter] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("{name} edge probability {p} outside [0, 1]")));
                }
            }
            if d.p_intra <= d.p_inter {
                return Err(Error::NonHomophilous(format!(
                    "{name} p_intra {} <= p_inter {}",
                    d.p_intra, d.p_inter
                )));
            }
            if d.class_proportions.len() != c {
                return Err(Error::Config(format!("{name} proportions need {c} entries")));
            }
            let sum: f64 = d.class_proportions.iter().sum();
            if d.class_proportions.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} proportions must be non-negative and sum to 1")));
            }
        }
        Ok(())
    }
}

/// Generates a labeled source graph and a shifted target graph.
///
/// Class `c` has mean `(separation·σ/√2)·e_c`, so every pair of means is
/// `separation·σ` apart. Target means are all displaced by `mean_shift·σ`
/// along one random unit direction inside the span of the class means.
/// Edges follow a stochastic block model per domain.
pub fn generate_domain_pair(cfg: &SynthConfig) -> Result<DomainPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_classes;
    let f = cfg.feature_dim;

    let scale = cfg.class_separation * cfg.sigma / std::f64::consts::SQRT_2;
    let means: Vec<DVector<f64>> = (0..c)
        .map(|k| DVector::from_fn(f, |i, _| if i == k { scale } else { 0.0 }))
        .collect();
    let dir = loop {
        let v = DVector::from_fn(f, |i, _| if i < c { StandardNormal.sample(&mut rng) } else { 0.0 });
        let norm: f64 = v.norm();
        if norm > 1e-12 {
            break v / norm;
        }
    };
    let shift = dir * (cfg.mean_shift * cfg.sigma);
    let target_means: Vec<DVector<f64>> = means.iter().map(|m| m + &shift).collect();

    let (source, source_labels) = sample_domain(cfg, &cfg.source, &means, &mut rng)?;
    let (target, target_labels) = sample_domain(cfg, &cfg.target, &target_means, &mut rng)?;
    let source = source.with_labels(Some(source_labels))?;
    let splits = Splits::random(cfg.nodes_per_domain, cfg.seed.wrapping_add(0x5eed));
    let meta = config_meta(cfg);
    DomainPair::new(source, target, target_labels, splits, meta)
}

fn config_meta(cfg: &SynthConfig) -> BTreeMap<String, String> {
    let mut kv = crate::config::synth_to_kv(cfg);
    kv.insert("provenance".into(), "synthetic".into());
    kv
}

fn sample_domain(
    cfg: &SynthConfig,
    shape: &DomainShape,
    means: &[DVector<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(Graph, Vec<usize>)> {
    let n = cfg.nodes_per_domain;
    let mut cumulative = Vec::with_capacity(shape.class_proportions.len());
    let mut acc = 0.0;
    for p in &shape.class_proportions {
        acc += p;
        cumulative.push(acc);
    }
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
        })
        .collect();

    let mut features = DMatrix::zeros(n, cfg.feature_dim);
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..cfg.feature_dim {
            let noise: f64 = StandardNormal.sample(rng);
            features[(i, k)] = means[y][k] + cfg.sigma * noise;
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { shape.p_intra } else { shape.p_inter };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let g = Graph::new(n, edges, features, None, cfg.num_classes)?;
    Ok((g, labels))
}

/// Unbiased estimate of `‖E[x_a] − E[x_b]‖²` from two feature samples.
pub fn mean_discrepancy(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let stats = |m: &DMatrix<f64>| {
        let n = m.nrows() as f64;
        let mean = m.row_mean();
        let var_sum: f64 = m
            .row_iter()
            .map(|r| (r - &mean).norm_squared())
            .sum::<f64>()
            / (n - 1.0);
        (mean, var_sum / n)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    (ma - mb).norm_squared() - va - vb
}

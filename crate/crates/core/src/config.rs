//! Flat `key = value` configuration files and the training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected with
//! the line they appeared on; absent keys take their defaults, and
//! [`TrainConfig::to_kv`] writes every field back out so a run's resolved
//! configuration can be reproduced exactly.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DomainShape, SynthConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::ConfigLine { line, msg: format!("expected `key = value`, got `{content}`") });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::ConfigLine { line, msg: "empty key".into() });
            }
            if entries.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(Error::ConfigLine { line, msg: format!("duplicate key `{key}`") });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        KeyValues {
            entries: map.into_iter().map(|(k, v)| (k, (0, v))).collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, String> {
        self.entries.into_iter().map(|(k, (_, v))| (k, v)).collect()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, raw)) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|_| Error::ConfigLine {
                line,
                msg: format!("cannot parse `{raw}` for `{key}`"),
            })?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some((line, raw)) = self.entries.remove(key) {
            *slot = raw
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::ConfigLine { line, msg: format!("cannot parse list `{raw}` for `{key}`") })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::ConfigLine { line, msg: format!("unknown key `{key}`") }),
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn synth_from_kv(mut kv: KeyValues) -> Result<SynthConfig> {
    let mut c = SynthConfig::default();
    kv.take("nodes_per_domain", &mut c.nodes_per_domain)?;
    kv.take("num_classes", &mut c.num_classes)?;
    if c.num_classes != c.source.class_proportions.len() {
        let uniform = vec![1.0 / c.num_classes as f64; c.num_classes];
        c.source.class_proportions = uniform.clone();
        c.target.class_proportions = uniform;
    }
    kv.take("feature_dim", &mut c.feature_dim)?;
    kv.take("src_p_intra", &mut c.source.p_intra)?;
    kv.take("src_p_inter", &mut c.source.p_inter)?;
    kv.take("tgt_p_intra", &mut c.target.p_intra)?;
    kv.take("tgt_p_inter", &mut c.target.p_inter)?;
    kv.take_list("src_proportions", &mut c.source.class_proportions)?;
    kv.take_list("tgt_proportions", &mut c.target.class_proportions)?;
    kv.take("class_separation", &mut c.class_separation)?;
    kv.take("sigma", &mut c.sigma)?;
    kv.take("mean_shift", &mut c.mean_shift)?;
    kv.take("seed", &mut c.seed)?;
    // Provenance written by the generator into meta files.
    kv.entries.remove("provenance");
    kv.finish()?;
    c.validate()?;
    Ok(c)
}

pub fn synth_to_kv(c: &SynthConfig) -> BTreeMap<String, String> {
    let DomainShape { p_intra: sa, p_inter: se, class_proportions: sp } = &c.source;
    let DomainShape { p_intra: ta, p_inter: te, class_proportions: tp } = &c.target;
    [
        ("nodes_per_domain", c.nodes_per_domain.to_string()),
        ("num_classes", c.num_classes.to_string()),
        ("feature_dim", c.feature_dim.to_string()),
        ("src_p_intra", sa.to_string()),
        ("src_p_inter", se.to_string()),
        ("tgt_p_intra", ta.to_string()),
        ("tgt_p_inter", te.to_string()),
        ("src_proportions", join(sp)),
        ("tgt_proportions", join(tp)),
        ("class_separation", c.class_separation.to_string()),
        ("sigma", c.sigma.to_string()),
        ("mean_shift", c.mean_shift.to_string()),
        ("seed", c.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn parse_synth_config(text: &str) -> Result<SynthConfig> {
    synth_from_kv(KeyValues::parse(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full method.
    Alex,
    /// Same encoder and classifier trained on the noisy source labels only.
    SourceOnly,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alex" => Ok(TrainMode::Alex),
            "source_only" => Ok(TrainMode::SourceOnly),
            other => Err(Error::Config(format!("unknown mode `{other}` (alex|source_only)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Alex => "alex",
            TrainMode::SourceOnly => "source_only",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the contrastive term ("w/o G").
    pub disable_contrastive: bool,
    /// Replace class-balanced sampling by uniform sampling ("w/o B").
    pub disable_balanced: bool,
    /// Keep every training node in the supervised loss ("w/o M").
    pub disable_refinement: bool,
}

impl Ablation {
    pub fn from_variant(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name.to_ascii_lowercase().replace(['/', ' ', '_'], "-").as_str() {
            "full" | "none" => {}
            "w-o-g" | "wo-g" => a.disable_contrastive = true,
            "w-o-b" | "wo-b" => a.disable_balanced = true,
            "w-o-m" | "wo-m" => a.disable_refinement = true,
            _ => return Err(Error::Config(format!("unknown ablation `{name}` (w/o-G|w/o-B|w/o-M)"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.disable_contrastive, self.disable_balanced, self.disable_refinement) {
            (false, false, false) => "full",
            (true, false, false) => "w/o-G",
            (false, true, false) => "w/o-B",
            (false, false, true) => "w/o-M",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// SVD rank, clamped to the node count of each graph.
    pub q: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub self_loops: bool,
    pub alpha: f64,
    pub tau: f64,
    pub anchors: usize,
    pub rounds: usize,
    pub warmup_epochs: usize,
    pub epochs_per_round: usize,
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub learning_rate: f64,
    pub batch_per_class: usize,
    pub mi_inner_steps: usize,
    pub encoder_dims: Vec<usize>,
    pub classifier_hidden: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub discriminator_hidden: usize,
    pub mi_hidden: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Alex,
            q: 400,
            oversampling: crate::spectral::DEFAULT_OVERSAMPLING,
            power_iterations: crate::spectral::DEFAULT_POWER_ITERATIONS,
            self_loops: true,
            alpha: 80.0,
            tau: crate::losses::DEFAULT_TEMPERATURE,
            anchors: 32,
            rounds: 5,
            warmup_epochs: 100,
            epochs_per_round: 100,
            plateau_patience: 10,
            plateau_tolerance: 1e-4,
            learning_rate: 1e-4,
            batch_per_class: 64,
            mi_inner_steps: 200,
            encoder_dims: vec![128, 16],
            classifier_hidden: 16,
            projector_hidden: 64,
            projector_dim: 16,
            discriminator_hidden: 32,
            mi_hidden: 32,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q", self.q),
            ("anchors", self.anchors),
            ("batch_per_class", self.batch_per_class),
            ("plateau_patience", self.plateau_patience),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.alpha > 0.0 && self.alpha < 100.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 100), got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("tau and learning_rate must be positive".into()));
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return Err(Error::Config("encoder_dims must be a non-empty list of positive widths".into()));
        }
        if self.anchors < 2 {
            return Err(Error::Config("anchors must be at least 2".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> crate::params::Architecture {
        crate::params::Architecture {
            input_dim,
            encoder_dims: self.encoder_dims.clone(),
            num_classes,
            classifier_hidden: self.classifier_hidden,
            projector_hidden: self.projector_hidden,
            projector_dim: self.projector_dim,
            discriminator_hidden: self.discriminator_hidden,
            mi_hidden: self.mi_hidden,
        }
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take("mode", &mut c.mode)?;
        kv.take("q", &mut c.q)?;
        kv.take("oversampling", &mut c.oversampling)?;
        kv.take("power_iterations", &mut c.power_iterations)?;
        kv.take("self_loops", &mut c.self_loops)?;
        kv.take("alpha", &mut c.alpha)?;
        kv.take("tau", &mut c.tau)?;
        kv.take("anchors", &mut c.anchors)?;
        kv.take("rounds", &mut c.rounds)?;
        kv.take("warmup_epochs", &mut c.warmup_epochs)?;
        kv.take("epochs_per_round", &mut c.epochs_per_round)?;
        kv.take("plateau_patience", &mut c.plateau_patience)?;
        kv.take("plateau_tolerance", &mut c.plateau_tolerance)?;
        kv.take("learning_rate", &mut c.learning_rate)?;
        kv.take("batch_per_class", &mut c.batch_per_class)?;
        kv.take("mi_inner_steps", &mut c.mi_inner_steps)?;
        kv.take_list("encoder_dims", &mut c.encoder_dims)?;
        kv.take("classifier_hidden", &mut c.classifier_hidden)?;
        kv.take("projector_hidden", &mut c.projector_hidden)?;
        kv.take("projector_dim", &mut c.projector_dim)?;
        kv.take("discriminator_hidden", &mut c.discriminator_hidden)?;
        kv.take("mi_hidden", &mut c.mi_hidden)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("disable_contrastive", &mut c.ablation.disable_contrastive)?;
        kv.take("disable_balanced", &mut c.ablation.disable_balanced)?;
        kv.take("disable_refinement", &mut c.ablation.disable_refinement)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        TrainConfig::from_kv(KeyValues::parse(text)?)
    }

    /// Every field, defaults included, in file order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("q", self.q.to_string()),
            ("oversampling", self.oversampling.to_string()),
            ("power_iterations", self.power_iterations.to_string()),
            ("self_loops", self.self_loops.to_string()),
            ("alpha", self.alpha.to_string()),
            ("tau", self.tau.to_string()),
            ("anchors", self.anchors.to_string()),
            ("rounds", self.rounds.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs_per_round", self.epochs_per_round.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("plateau_tolerance", self.plateau_tolerance.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_per_class", self.batch_per_class.to_string()),
            ("mi_inner_steps", self.mi_inner_steps.to_string()),
            ("encoder_dims", join(&self.encoder_dims)),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("projector_hidden", self.projector_hidden.to_string()),
            ("projector_dim", self.projector_dim.to_string()),
            ("discriminator_hidden", self.discriminator_hidden.to_string()),
            ("mi_hidden", self.mi_hidden.to_string()),
            ("seed", self.seed.to_string()),
            ("disable_contrastive", self.ablation.disable_contrastive.to_string()),
            ("disable_balanced", self.ablation.disable_balanced.to_string()),
            ("disable_refinement", self.ablation.disable_refinement.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

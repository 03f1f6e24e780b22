//! Label corruption with exact bookkeeping of which labels were flipped.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Uniform,
    Pair,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "pair" => Ok(NoiseKind::Pair),
            other => Err(Error::Config(format!("unknown noise kind `{other}` (uniform|pair)"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Pair => "pair",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Target class for pair noise; defaults to `c -> (c + 1) mod C`.
    pub pair_map: Option<Vec<usize>>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn uniform(rate: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Uniform, rate, pair_map: None, seed }
    }

    pub fn pair(rate: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Pair, rate, pair_map: None, seed }
    }

    /// Corrupts only the labels at `subset` (all labels when `None`).
    pub fn apply(&self, labels: &[usize], num_classes: usize, subset: Option<&[usize]>) -> Result<CorruptionRecord> {
        let all: Vec<usize>;
        let subset = match subset {
            Some(s) => s,
            None => {
                all = (0..labels.len()).collect();
                &all
            }
        };
        match self.kind {
            NoiseKind::Uniform => corrupt(labels, subset, self.rate, self.seed, |rng, y| {
                check_classes(num_classes, self.rate)?;
                let other = rng.random_range(0..num_classes - 1);
                Ok(if other >= y { other + 1 } else { other })
            }),
            NoiseKind::Pair => {
                let map = match &self.pair_map {
                    Some(m) => m.clone(),
                    None => cyclic_pair_map(num_classes),
                };
                validate_pair_map(&map, num_classes)?;
                corrupt(labels, subset, self.rate, self.seed, |_, y| Ok(map[y]))
            }
        }
    }
}

fn check_classes(num_classes: usize, rate: f64) -> Result<()> {
    if num_classes < 2 && rate > 0.0 {
        return Err(Error::InvalidArgument("label noise needs at least two classes".into()));
    }
    Ok(())
}

pub fn cyclic_pair_map(num_classes: usize) -> Vec<usize> {
    (0..num_classes).map(|c| (c + 1) % num_classes).collect()
}

pub fn validate_pair_map(map: &[usize], num_classes: usize) -> Result<()> {
    if map.len() != num_classes {
        return Err(Error::InvalidArgument(format!(
            "pair map has {} entries for {num_classes} classes",
            map.len()
        )));
    }
    for (c, &to) in map.iter().enumerate() {
        if to >= num_classes {
            return Err(Error::InvalidArgument(format!("pair map sends {c} to unknown class {to}")));
        }
        if to == c {
            return Err(Error::PairMapFixedPoint(c));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub original: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl CorruptionRecord {
    pub fn flip_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }

    /// `confusion[a][b]` counts nodes with original label `a` and corrupted label `b`.
    pub fn confusion(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; num_classes]; num_classes];
        for (&a, &b) in self.original.iter().zip(&self.corrupted) {
            m[a][b] += 1;
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,original,corrupted,flipped\n");
        for (i, ((o, c), f)) in self.original.iter().zip(&self.corrupted).zip(&self.flipped).enumerate() {
            let _ = writeln!(out, "{i},{o},{c},{}", u8::from(*f));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rec = CorruptionRecord { original: vec![], corrupted: vec![], flipped: vec![] };
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse { line: ln + 1, msg: format!("bad corruption row `{line}`") };
            let fields: Vec<usize> = line
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let [idx, o, c, f] = fields[..] else { return Err(bad()) };
            if idx != rec.original.len() || f > 1 || (f == 1) != (o != c) {
                return Err(bad());
            }
            rec.original.push(o);
            rec.corrupted.push(c);
            rec.flipped.push(f == 1);
        }
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        CorruptionRecord::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn corrupt(
    labels: &[usize],
    subset: &[usize],
    rate: f64,
    seed: u64,
    mut flip_to: impl FnMut(&mut ChaCha8Rng, usize) -> Result<usize>,
) -> Result<CorruptionRecord> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = labels.to_vec();
    for &i in subset {
        let y = *labels.get(i).ok_or(Error::IndexOutOfRange { index: i, len: labels.len() })?;
        if rng.random::<f64>() < rate {
            corrupted[i] = flip_to(&mut rng, y)?;
        }
    }
    let flipped = labels.iter().zip(&corrupted).map(|(a, b)| a != b).collect();
    Ok(CorruptionRecord { original: labels.to_vec(), corrupted, flipped })
}

pub fn apply_uniform_noise(labels: &[usize], rate: f64, num_classes: usize, seed: u64) -> Result<CorruptionRecord> {
    check_classes(num_classes, rate)?;
    NoiseSpec::uniform(rate, seed).apply(labels, num_classes, None)
}

pub fn apply_pair_noise(labels: &[usize], rate: f64, pair_map: &[usize], seed: u64) -> Result<CorruptionRecord> {
    let spec = NoiseSpec { kind: NoiseKind::Pair, rate, pair_map: Some(pair_map.to_vec()), seed };
    spec.apply(labels, pair_map.len(), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let labels = vec![0, 1, 2, 1, 0];
        for rec in [
            apply_uniform_noise(&labels, 0.0, 3, 1).unwrap(),
            apply_pair_noise(&labels, 0.0, &[1, 2, 0], 1).unwrap(),
        ] {
            assert_eq!(rec.corrupted, labels);
            assert!(rec.flipped.iter().all(|f| !f));
        }
    }

    #[test]
    fn full_rate_binary_toggles() {
        let labels = vec![0, 1, 1, 0, 1];
        let rec = apply_uniform_noise(&labels, 1.0, 2, 3).unwrap();
        assert_eq!(rec.corrupted, vec![1, 0, 0, 1, 0]);
        assert_eq!(rec.flip_count(), 5);
    }

    #[test]
    fn cyclic_pair_noise() {
        let rec = apply_pair_noise(&[0, 1, 2], 1.0, &cyclic_pair_map(3), 0).unwrap();
        assert_eq!(rec.corrupted, vec![1, 2, 0]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(apply_uniform_noise(&[0, 0], 0.5, 1, 0).is_err());
        assert!(apply_uniform_noise(&[0, 0], 1.5, 2, 0).is_err());
        assert!(matches!(apply_pair_noise(&[0, 1], 0.5, &[1, 1], 0), Err(Error::PairMapFixedPoint(1))));
    }

    #[test]
    fn subset_only() {
        let labels = vec![0; 10];
        let rec = NoiseSpec::uniform(1.0, 5).apply(&labels, 3, Some(&[2, 7])).unwrap();
        let flipped: Vec<usize> = (0..10).filter(|&i| rec.flipped[i]).collect();
        assert_eq!(flipped, vec![2, 7]);
    }

    #[test]
    fn csv_round_trip() {
        let rec = apply_uniform_noise(&[0, 1, 2, 3, 0, 1], 0.5, 4, 8).unwrap();
        assert_eq!(CorruptionRecord::from_csv(&rec.to_csv()).unwrap(), rec);
        assert!(CorruptionRecord::from_csv("index,original,corrupted,flipped\n0,1,1,1\n").is_err());
    }
}

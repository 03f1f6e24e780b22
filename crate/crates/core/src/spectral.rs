//! Randomized truncated SVD and low-rank propagation.
//!
//! The range finder follows the randomized scheme of Halko, Martinsson and
//! Tropp: sketch with a Gaussian test matrix, refine with power iterations,
//! then solve a small dense SVD in the captured subspace. The low-rank
//! operator `U S Vᵀ` is only ever applied in factored form.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Propagator, SparseOperator};

pub const DEFAULT_OVERSAMPLING: usize = 10;
pub const DEFAULT_POWER_ITERATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// N×q, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length q, descending, non-negative.
    pub s: DVector<f64>,
    /// N×q, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Dense `U S Vᵀ`; for tests and small diagnostics only.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// Little-endian blob: `N` and `q` as u64, then row-major `U`, `S`, row-major `V`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, q) = (self.dim(), self.rank());
        let mut out = Vec::with_capacity(16 + 8 * (2 * n * q + q));
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(q as u64).to_le_bytes());
        let mut push_rows = |m: &DMatrix<f64>| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        };
        push_rows(&self.u);
        push_rows(&DMatrix::from_column_slice(1, q, self.s.as_slice()));
        push_rows(&self.v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("factor blob: {msg}"));
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let q = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = n
            .checked_mul(q)
            .and_then(|nq| nq.checked_mul(2))
            .and_then(|v| v.checked_add(q))
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(16))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let u = DMatrix::from_row_iterator(n, q, vals.by_ref().take(n * q));
        let s = DVector::from_iterator(q, vals.by_ref().take(q));
        let v = DMatrix::from_row_iterator(n, q, vals.take(n * q));
        Ok(LowRankFactors { u, s, v })
    }
}

impl Propagator for LowRankFactors {
    fn dim(&self) -> usize {
        self.u.nrows()
    }

    fn propagate(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        lowrank_propagate(self, h)
    }

    fn propagate_transpose(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(self, h)?;
        Ok(&self.v * scale_rows(self.u.tr_mul(h), &self.s))
    }
}

fn check_rows(f: &LowRankFactors, h: &DMatrix<f64>) -> Result<()> {
    if h.nrows() != f.dim() {
        return Err(Error::Dimension(format!(
            "factors have {} rows, input has {}",
            f.dim(),
            h.nrows()
        )));
    }
    Ok(())
}

fn scale_rows(mut m: DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    for (k, sk) in s.iter().enumerate() {
        m.row_mut(k).scale_mut(*sk);
    }
    m
}

/// `(U S Vᵀ) h`, evaluated right to left in O(N q d).
pub fn lowrank_propagate(f: &LowRankFactors, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(f, h)?;
    Ok(&f.u * scale_rows(f.v.tr_mul(h), &f.s))
}

/// Rank-`q` randomized SVD of a sparse square operator.
pub fn truncated_svd(
    op: &SparseOperator,
    q: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<LowRankFactors> {
    let n = op.dim();
    if q > n {
        return Err(Error::RankExceedsDimension { rank: q, dim: n });
    }
    if q == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let width = (q + oversampling).min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut basis = orthonormalize(op.propagate(&omega)?);
    for _ in 0..power_iterations {
        let z = orthonormalize(op.propagate_transpose(&basis)?);
        basis = orthonormalize(op.propagate(&z)?);
    }

    // B = Qᵀ A, formed as (Aᵀ Q)ᵀ; decompose Bᵀ = V Σ Wᵀ so that A ≈ (Q W) Σ Vᵀ.
    let bt = op.propagate_transpose(&basis)?;
    let svd = bt.svd(true, true);
    let v_small = svd.u.expect("requested U");
    let w_t = svd.v_t.expect("requested Vᵀ");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    order.truncate(q);

    let qw = &basis * w_t.transpose();
    let u = DMatrix::from_fn(n, q, |r, k| qw[(r, order[k])]);
    let v = DMatrix::from_fn(n, q, |r, k| v_small[(r, order[k])]);
    let s = DVector::from_fn(q, |k, _| sigma[order[k]].max(0.0));
    Ok(LowRankFactors { u, s, v })
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// On-disk cache of factor blobs keyed by graph hash, rank and seed.
#[derive(Debug, Clone)]
pub struct FactorCache {
    dir: PathBuf,
}

impl FactorCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FactorCache { dir: dir.into() }
    }

    pub fn path_for(&self, graph_hash: &str, q: usize, seed: u64) -> PathBuf {
        self.dir.join(format!("{graph_hash}-q{q}-s{seed}.svd"))
    }

    pub fn get_or_compute(
        &self,
        graph_hash: &str,
        op: &SparseOperator,
        q: usize,
        seed: u64,
    ) -> Result<LowRankFactors> {
        let path = self.path_for(graph_hash, q, seed);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(f) = LowRankFactors::from_bytes(&bytes) {
                if f.dim() == op.dim() && f.rank() == q {
                    return Ok(f);
                }
            }
            log::warn!("ignoring unreadable factor cache {}", path.display());
        }
        let f = truncated_svd(op, q, DEFAULT_OVERSAMPLING, DEFAULT_POWER_ITERATIONS, seed)?;
        write_atomic(&self.dir, &path, &f.to_bytes())?;
        Ok(f)
    }
}

fn write_atomic(dir: &Path, path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("svd.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, Graph};

    fn identity(n: usize) -> SparseOperator {
        SparseOperator::new(n, (0..n).map(|i| (i, i, 1.0)).collect()).unwrap()
    }

    fn max_orthonormality_error(m: &DMatrix<f64>) -> f64 {
        (m.tr_mul(m) - DMatrix::identity(m.ncols(), m.ncols())).abs().max()
    }

    #[test]
    fn identity_spectrum() {
        let f = truncated_svd(&identity(5), 3, 10, 4, 7).unwrap();
        assert_eq!(f.rank(), 3);
        for s in f.s.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(max_orthonormality_error(&f.u) < 1e-10);
        assert!(max_orthonormality_error(&f.v) < 1e-10);
    }

    #[test]
    fn rank_one_operator() {
        let u = DVector::from_vec(vec![1.0, 2.0, 0.0, -2.0]).normalize();
        let v = DVector::from_vec(vec![0.0, 1.0, 1.0, 1.0]).normalize();
        let mut entries = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                if u[r] * v[c] != 0.0 {
                    entries.push((r, c, u[r] * v[c]));
                }
            }
        }
        let op = SparseOperator::new(4, entries).unwrap();
        let f = truncated_svd(&op, 1, 2, 2, 1).unwrap();
        assert!((f.s[0] - 1.0).abs() < 1e-12);
        assert!((f.u.column(0).dot(&u).abs() - 1.0).abs() < 1e-10);
        assert!((f.v.column(0).dot(&v).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rank_exceeding_dimension_is_rejected() {
        assert!(matches!(
            truncated_svd(&identity(3), 4, 0, 0, 0),
            Err(Error::RankExceedsDimension { rank: 4, dim: 3 })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let g = Graph::new(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)], DMatrix::zeros(6, 1), None, 1)
            .unwrap();
        let op = normalize_adjacency(&g, true);
        assert_eq!(truncated_svd(&op, 3, 2, 2, 11).unwrap(), truncated_svd(&op, 3, 2, 2, 11).unwrap());
    }

    #[test]
    fn propagate_identity_and_zero() {
        let f = truncated_svd(&identity(4), 4, 0, 1, 3).unwrap();
        let h = DMatrix::from_fn(4, 3, |r, c| r as f64 * 0.5 - c as f64);
        assert!((lowrank_propagate(&f, &h).unwrap() - &h).abs().max() < 1e-10);
        assert_eq!(lowrank_propagate(&f, &DMatrix::zeros(4, 2)).unwrap(), DMatrix::zeros(4, 2));
        assert!(lowrank_propagate(&f, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn blob_round_trip_and_cache() {
        let g = Graph::new(5, [(0, 1), (1, 2), (3, 4), (0, 4)], DMatrix::zeros(5, 1), None, 1).unwrap();
        let op = normalize_adjacency(&g, true);
        let f = truncated_svd(&op, 2, 3, 2, 5).unwrap();
        assert_eq!(LowRankFactors::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(LowRankFactors::from_bytes(&f.to_bytes()[..30]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let cache = FactorCache::new(dir.path());
        let a = cache.get_or_compute("abc", &op, 2, 5).unwrap();
        assert!(cache.path_for("abc", 2, 5).exists());
        let b = cache.get_or_compute("abc", &op, 2, 5).unwrap();
        assert_eq!(a, b);
    }
}

//! Sparse undirected graphs, symmetric normalization and induced subgraphs.
//!
//! Edges are stored once per undirected pair in canonical `(i, j)` form with
//! `i < j`. Self-loops are never stored; they are added only when an operator
//! is normalized with `add_self_loops`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense materialization of an operator is refused above this node count.
pub const MAX_DENSE_NODES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph, symmetrizing and deduplicating `edges`.
    ///
    /// Directed input pairs are folded into undirected ones and self-loops
    /// are dropped. Out-of-range endpoints and labels are rejected.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidArgument("graph must have at least one node".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if features.nrows() != num_nodes {
            return Err(Error::Dimension(format!(
                "feature rows {} != num_nodes {}",
                features.nrows(),
                num_nodes
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("graph features".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != num_nodes {
                return Err(Error::Dimension(format!(
                    "label count {} != num_nodes {}",
                    labels.len(),
                    num_nodes
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} not below num_classes {num_classes}"
                )));
            }
        }
        let mut canonical = BTreeSet::new();
        for (a, b) in edges {
            for v in [a, b] {
                if v >= num_nodes {
                    return Err(Error::IndexOutOfRange { index: v, len: num_nodes });
                }
            }
            if a != b {
                canonical.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Graph {
            num_nodes,
            edges: canonical.into_iter().collect(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Canonical undirected edges, sorted, each with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.num_nodes || l.iter().any(|&y| y >= self.num_classes) {
                return Err(Error::InvalidArgument("labels do not fit graph".into()));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub(crate) fn take_labels(&mut self) -> Option<Vec<usize>> {
        self.labels.take()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Fraction of edges joining two nodes with the same label.
    pub fn edge_homophily(&self) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        if self.edges.is_empty() {
            return None;
        }
        let same = self.edges.iter().filter(|&&(i, j)| labels[i] == labels[j]).count();
        Some(same as f64 / self.edges.len() as f64)
    }

    /// SHA-256 over the text serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Serializes to the whitespace-delimited text format: header `N F C`,
    /// `N` feature rows, a label line (or `-`), then one `i j` line per edge.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.num_nodes, self.num_features(), self.num_classes);
        for r in 0..self.num_nodes {
            let row: Vec<String> = self.features.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        match &self.labels {
            Some(labels) => {
                let row: Vec<String> = labels.iter().map(|y| y.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
            None => out.push_str("-\n"),
        }
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let dims: Vec<usize> = parse_fields(header, hline)?;
        let [n, f, c] = dims[..] else {
            return Err(Error::Parse { line: hline, msg: "header must be `N F C`".into() });
        };

        let mut feats = DMatrix::zeros(n, f);
        for r in 0..n {
            let (ln, l) = lines.next().ok_or(Error::Parse {
                line: hline + r + 1,
                msg: format!("expected {n} feature lines"),
            })?;
            let row: Vec<f64> = parse_fields(l, ln)?;
            if row.len() != f {
                return Err(Error::Parse { line: ln, msg: format!("expected {f} features, got {}", row.len()) });
            }
            for (k, v) in row.into_iter().enumerate() {
                feats[(r, k)] = v;
            }
        }

        let (lline, label_line) = lines.next().ok_or(Error::Parse {
            line: hline + n + 1,
            msg: "missing label line".into(),
        })?;
        let labels = if label_line == "-" {
            None
        } else {
            let labels: Vec<usize> = parse_fields(label_line, lline)?;
            if labels.len() != n {
                return Err(Error::Parse {
                    line: lline,
                    msg: format!("label count {} != {n}", labels.len()),
                });
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= c) {
                return Err(Error::Parse { line: lline, msg: format!("label {bad} out of range") });
            }
            Some(labels)
        };

        let mut edges = Vec::new();
        for (ln, l) in lines {
            let pair: Vec<usize> = parse_fields(l, ln)?;
            let [i, j] = pair[..] else {
                return Err(Error::Parse { line: ln, msg: "edge line must be `i j`".into() });
            };
            if i >= n || j >= n {
                return Err(Error::Parse { line: ln, msg: format!("edge endpoint out of range for {n} nodes") });
            }
            edges.push((i, j));
        }
        Graph::new(n, edges, feats, labels, c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::from_text(&text)
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str, ln: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| Error::Parse { line: ln, msg: format!("cannot parse token `{t}`") })
        })
        .collect()
}

/// Linear operator applied row-wise to node-feature matrices.
pub trait Propagator: Send + Sync {
    fn dim(&self) -> usize;

    /// `P · h`
    fn propagate(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// `Pᵀ · h`
    fn propagate_transpose(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// Square sparse operator in coordinate format, sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseOperator {
    pub fn new(dim: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, w) in &entries {
            if r >= dim || c >= dim {
                return Err(Error::IndexOutOfRange { index: r.max(c), len: dim });
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("operator entry ({r}, {c})")));
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(SparseOperator { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let map: HashMap<(usize, usize), f64> = self.entries.iter().map(|&(r, c, w)| ((r, c), w)).collect();
        self.entries
            .iter()
            .all(|&(r, c, w)| map.get(&(c, r)).is_some_and(|&v| (v - w).abs() <= tol))
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.dim > MAX_DENSE_NODES {
            return Err(Error::InvalidArgument(format!(
                "refusing dense materialization of {}-node operator",
                self.dim
            )));
        }
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, w) in &self.entries {
            m[(r, c)] += w;
        }
        Ok(m)
    }

    fn apply(&self, h: &DMatrix<f64>, transpose: bool) -> Result<DMatrix<f64>> {
        if h.nrows() != self.dim {
            return Err(Error::Dimension(format!(
                "operator is {}x{}, input has {} rows",
                self.dim,
                self.dim,
                h.nrows()
            )));
        }
        let mut out = DMatrix::zeros(self.dim, h.ncols());
        for j in 0..h.ncols() {
            let src = h.column(j);
            let mut dst = out.column_mut(j);
            for &(r, c, w) in &self.entries {
                let (r, c) = if transpose { (c, r) } else { (r, c) };
                dst[r] += w * src[c];
            }
        }
        Ok(out)
    }
}

impl Propagator for SparseOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn propagate(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply(h, false)
    }

    fn propagate_transpose(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply(h, true)
    }
}

/// Symmetric normalization `D^{-1/2} Â D^{-1/2}` with `Â = A (+ I)`.
///
/// Degree-zero nodes get `D^{-1/2} = 0`, so their rows and columns are empty
/// when self-loops are off.
pub fn normalize_adjacency(g: &Graph, add_self_loops: bool) -> SparseOperator {
    let loop_weight = usize::from(add_self_loops);
    let inv_sqrt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| d + loop_weight)
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();

    let mut entries = Vec::with_capacity(2 * g.num_edges() + g.num_nodes());
    for &(i, j) in g.edges() {
        let w = inv_sqrt[i] * inv_sqrt[j];
        entries.push((i, j, w));
        entries.push((j, i, w));
    }
    if add_self_loops {
        entries.extend((0..g.num_nodes()).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
    }
    SparseOperator::new(g.num_nodes(), entries).expect("normalized entries are in range and finite")
}

/// Subgraph induced by `node_indices`, re-indexed in the given order.
///
/// The returned mapping sends each new index to its original index.
pub fn induced_subgraph(g: &Graph, node_indices: &[usize]) -> Result<(Graph, Vec<usize>)> {
    if node_indices.is_empty() {
        return Err(Error::EmptySubgraph);
    }
    let mut position = HashMap::with_capacity(node_indices.len());
    for (new, &old) in node_indices.iter().enumerate() {
        if old >= g.num_nodes() {
            return Err(Error::IndexOutOfRange { index: old, len: g.num_nodes() });
        }
        if position.insert(old, new).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate node index {old}")));
        }
    }
    let edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .filter_map(|(i, j)| Some((*position.get(i)?, *position.get(j)?)))
        .collect();
    let features = g.features().select_rows(node_indices);
    let labels = g.labels().map(|l| node_indices.iter().map(|&i| l[i]).collect());
    let sub = Graph::new(node_indices.len(), edges, features, labels, g.num_classes())?;
    Ok((sub, node_indices.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::new(3, [(0, 1), (2, 1)], DMatrix::from_fn(3, 2, |r, c| (r + c) as f64), Some(vec![0, 1, 0]), 2)
            .unwrap()
    }

    #[test]
    fn canonicalizes_edges() {
        let g = Graph::new(3, [(1, 0), (0, 1), (2, 2), (2, 1)], DMatrix::zeros(3, 1), None, 1).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Graph::new(2, [(0, 2)], DMatrix::zeros(2, 1), None, 1),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(Graph::new(2, [], DMatrix::zeros(3, 1), None, 1).is_err());
        assert!(Graph::new(2, [], DMatrix::zeros(2, 1), Some(vec![0, 2]), 2).is_err());
        assert!(Graph::new(2, [], DMatrix::zeros(2, 1), Some(vec![0]), 2).is_err());
    }

    #[test]
    fn normalize_single_edge() {
        let g = Graph::new(2, [(0, 1)], DMatrix::zeros(2, 1), None, 1).unwrap();
        let plain = normalize_adjacency(&g, false).to_dense().unwrap();
        assert_eq!(plain, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let looped = normalize_adjacency(&g, true).to_dense().unwrap();
        assert!(looped.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn normalize_path() {
        let op = normalize_adjacency(&path3(), false).to_dense().unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, s, 0.0, s, 0.0, s, 0.0, s, 0.0]);
        assert!((op - expected).abs().max() < 1e-15);
    }

    #[test]
    fn isolated_nodes_without_loops_are_zero() {
        let g = Graph::new(3, [(0, 1)], DMatrix::zeros(3, 1), None, 1).unwrap();
        let op = normalize_adjacency(&g, false).to_dense().unwrap();
        assert!(op.row(2).iter().all(|&v| v == 0.0));
        assert!(op.column(2).iter().all(|&v| v == 0.0));
        let with_loops = normalize_adjacency(&g, true).to_dense().unwrap();
        assert_eq!(with_loops[(2, 2)], 1.0);
    }

    #[test]
    fn sparse_apply_matches_dense() {
        let op = normalize_adjacency(&path3(), true);
        let h = DMatrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let dense = op.to_dense().unwrap();
        assert!((op.propagate(&h).unwrap() - &dense * &h).abs().max() < 1e-14);
        assert!((op.propagate_transpose(&h).unwrap() - dense.transpose() * &h).abs().max() < 1e-14);
        assert!(op.is_symmetric(0.0));
        assert!(op.propagate(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn induced_subgraph_cases() {
        let g = path3();
        let (full, map) = induced_subgraph(&g, &[0, 1, 2]).unwrap();
        assert_eq!(full, g);
        assert_eq!(map, vec![0, 1, 2]);

        let (single, _) = induced_subgraph(&g, &[1]).unwrap();
        assert_eq!((single.num_nodes(), single.num_edges()), (1, 0));

        let (ends, map) = induced_subgraph(&g, &[0, 2]).unwrap();
        assert_eq!((ends.num_nodes(), ends.num_edges()), (2, 0));
        assert_eq!(ends.labels(), Some(&[0, 0][..]));
        assert_eq!(map, vec![0, 2]);

        assert!(matches!(induced_subgraph(&g, &[]), Err(Error::EmptySubgraph)));
        assert!(induced_subgraph(&g, &[0, 0]).is_err());
        assert!(induced_subgraph(&g, &[3]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let g = Graph::new(
            3,
            [(0, 1), (1, 2)],
            DMatrix::from_row_slice(3, 2, &[0.1, -2.5e-9, 3.0, 1.0 / 3.0, -0.0, 7.25]),
            Some(vec![1, 0, 1]),
            2,
        )
        .unwrap();
        let back = Graph::from_text(&g.to_text()).unwrap();
        assert_eq!(back, g);

        let unlabeled = g.clone().with_labels(None).unwrap();
        assert_eq!(Graph::from_text(&unlabeled.to_text()).unwrap(), unlabeled);
    }

    #[test]
    fn parser_rejects_out_of_range_edges() {
        let text = "2 1 1\n0.0\n1.0\n-\n0 2\n";
        assert!(matches!(Graph::from_text(text), Err(Error::Parse { line: 5, .. })));
        assert!(Graph::from_text("2 1 1\n0.0\n-\n").is_err());
        assert!(Graph::from_text("2 1 2\n0.0\n1.0\n0 5\n").is_err());
    }
}

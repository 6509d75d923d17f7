//! Per-aspect bipartite graphs with symmetric degree normalization, and the
//! light-convolution propagation operator over them.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Pair;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({0}, {1}) out of range")]
    OutOfRange(usize, usize),
    #[error("aspect `{aspect}` edge ({u}, {i}) is not a base interaction")]
    NotInBase { aspect: String, u: usize, i: usize },
    #[error("{names} aspect names for {lists} edge lists")]
    AspectCount { names: usize, lists: usize },
    #[error("aspect index {0} out of range")]
    NoSuchAspect(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("graph cache: {0}")]
    Format(String),
}

/// `R` and `R^1..R^A` as sorted, duplicate-free edge lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectInteractionStore {
    num_users: usize,
    num_items: usize,
    base: Vec<Pair>,
    names: Vec<String>,
    aspects: Vec<Vec<Pair>>,
}

fn canonical(mut edges: Vec<Pair>) -> Vec<Pair> {
    edges.sort_unstable();
    edges.dedup();
    edges
}

impl AspectInteractionStore {
    pub fn new(
        num_users: usize,
        num_items: usize,
        base: Vec<Pair>,
        names: Vec<String>,
        aspects: Vec<Vec<Pair>>,
    ) -> Result<Self, GraphError> {
        if names.len() != aspects.len() {
            return Err(GraphError::AspectCount {
                names: names.len(),
                lists: aspects.len(),
            });
        }
        let base = canonical(base);
        if let Some(&(u, i)) = base.iter().find(|&&(u, i)| u >= num_users || i >= num_items) {
            return Err(GraphError::OutOfRange(u, i));
        }
        let base_set: HashSet<Pair> = base.iter().copied().collect();
        let aspects: Vec<Vec<Pair>> = aspects.into_iter().map(canonical).collect();
        for (name, edges) in names.iter().zip(&aspects) {
            if let Some(&(u, i)) = edges.iter().find(|p| !base_set.contains(p)) {
                return Err(GraphError::NotInBase {
                    aspect: name.clone(),
                    u,
                    i,
                });
            }
        }
        Ok(Self {
            num_users,
            num_items,
            base,
            names,
            aspects,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn base_edges(&self) -> &[Pair] {
        &self.base
    }

    pub fn aspect_edges(&self, a: usize) -> &[Pair] {
        &self.aspects[a]
    }

    pub fn aspect_names(&self) -> &[String] {
        &self.names
    }

    /// Keep only edges in `keep` (typically the training split).
    pub fn restrict_to(&self, keep: &[Pair]) -> Self {
        let keep: HashSet<Pair> = keep.iter().copied().collect();
        let filter = |edges: &[Pair]| -> Vec<Pair> {
            edges.iter().copied().filter(|p| keep.contains(p)).collect()
        };
        Self {
            num_users: self.num_users,
            num_items: self.num_items,
            base: filter(&self.base),
            names: self.names.clone(),
            aspects: self.aspects.iter().map(|e| filter(e)).collect(),
        }
    }

    /// Single-aspect store whose only aspect is the full base graph.
    pub fn merged(&self) -> Self {
        Self {
            num_users: self.num_users,
            num_items: self.num_items,
            base: self.base.clone(),
            names: vec!["all".into()],
            aspects: vec![self.base.clone()],
        }
    }

    /// Subset of aspects, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GraphError> {
        let mut names = Vec::with_capacity(indices.len());
        let mut aspects = Vec::with_capacity(indices.len());
        for &a in indices {
            if a >= self.aspects.len() {
                return Err(GraphError::NoSuchAspect(a));
            }
            names.push(self.names[a].clone());
            aspects.push(self.aspects[a].clone());
        }
        Ok(Self {
            num_users: self.num_users,
            num_items: self.num_items,
            base: self.base.clone(),
            names,
            aspects,
        })
    }

    /// Aspect indices ordered by edge count, largest first (stable).
    pub fn ranked_by_edge_count(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.aspects.len()).collect();
        idx.sort_by_key(|&a| std::cmp::Reverse(self.aspects[a].len()));
        idx
    }
}

/// Compressed sparse rows with `f64` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_sorted(rows: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut offsets = vec![0usize; rows + 1];
        for &(r, _, _) in entries {
            offsets[r + 1] += 1;
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self {
            offsets,
            cols: entries.iter().map(|e| e.1).collect(),
            vals: entries.iter().map(|e| e.2).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals
    }

    /// `out = self · x`, rows reduced in stored column order.
    fn spmm_into(&self, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        let kernel = |r: usize, mut row: ndarray::ArrayViewMut1<'_, f64>| {
            row.fill(0.0);
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row.scaled_add(v, &x.row(c));
            }
        };
        if self.nnz() * x.ncols() >= 1 << 16 {
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(r, row)| kernel(r, row));
        } else {
            for (r, row) in out.axis_iter_mut(Axis(0)).enumerate() {
                kernel(r, row);
            }
        }
    }
}

/// One aspect's normalized bipartite graph, stored in both orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectGraph {
    pub name: String,
    user_degrees: Vec<usize>,
    item_degrees: Vec<usize>,
    /// N × M, coefficient `1 / (sqrt(|N_u|) sqrt(|N_i|))`
    user_major: Csr,
    /// M × N, the transpose
    item_major: Csr,
}

impl AspectGraph {
    fn from_edges(name: String, num_users: usize, num_items: usize, edges: &[Pair]) -> Self {
        let mut user_degrees = vec![0usize; num_users];
        let mut item_degrees = vec![0usize; num_items];
        for &(u, i) in edges {
            user_degrees[u] += 1;
            item_degrees[i] += 1;
        }
        let coeff = |u: usize, i: usize| {
            1.0 / ((user_degrees[u] as f64).sqrt() * (item_degrees[i] as f64).sqrt())
        };
        let by_user: Vec<(usize, usize, f64)> =
            edges.iter().map(|&(u, i)| (u, i, coeff(u, i))).collect();
        let mut by_item: Vec<(usize, usize, f64)> =
            edges.iter().map(|&(u, i)| (i, u, coeff(u, i))).collect();
        by_item.sort_unstable_by_key(|e| (e.0, e.1));
        Self {
            name,
            user_major: Csr::from_sorted(num_users, &by_user),
            item_major: Csr::from_sorted(num_items, &by_item),
            user_degrees,
            item_degrees,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.user_major.nnz()
    }

    pub fn user_degrees(&self) -> &[usize] {
        &self.user_degrees
    }

    pub fn item_degrees(&self) -> &[usize] {
        &self.item_degrees
    }

    pub fn user_major(&self) -> &Csr {
        &self.user_major
    }

    pub fn item_major(&self) -> &Csr {
        &self.item_major
    }

    /// Coefficient for `(u, i)`, zero when the edge is absent.
    pub fn coefficient(&self, u: usize, i: usize) -> f64 {
        let (cols, vals) = self.user_major.row(u);
        cols.binary_search(&i).map(|k| vals[k]).unwrap_or(0.0)
    }
}

/// The set of per-aspect graphs `G_1..G_A` over a shared node set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAspectGraph {
    num_users: usize,
    num_items: usize,
    aspects: Vec<AspectGraph>,
}

/// Build the normalized graphs from training edges only.
///
/// Every aspect edge not present in `train` is discarded, so held-out
/// interactions never enter propagation. Empty aspects are allowed.
pub fn build_graphs(store: &AspectInteractionStore, train: &[Pair]) -> NormalizedAspectGraph {
    let restricted = store.restrict_to(train);
    let aspects = restricted
        .names
        .iter()
        .zip(&restricted.aspects)
        .map(|(name, edges)| {
            if edges.is_empty() {
                log::warn!("aspect `{name}` has no training edges; its graph is empty");
            }
            AspectGraph::from_edges(name.clone(), store.num_users, store.num_items, edges)
        })
        .collect();
    NormalizedAspectGraph {
        num_users: store.num_users,
        num_items: store.num_items,
        aspects,
    }
}

impl NormalizedAspectGraph {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn aspect(&self, a: usize) -> &AspectGraph {
        &self.aspects[a]
    }

    pub fn aspects(&self) -> &[AspectGraph] {
        &self.aspects
    }

    pub fn aspect_names(&self) -> Vec<String> {
        self.aspects.iter().map(|g| g.name.clone()).collect()
    }

    fn check(
        &self,
        aspect: usize,
        users: &ArrayView2<'_, f64>,
        items: &ArrayView2<'_, f64>,
    ) -> Result<&AspectGraph, GraphError> {
        let g = self
            .aspects
            .get(aspect)
            .ok_or(GraphError::NoSuchAspect(aspect))?;
        if users.nrows() != self.num_users || items.nrows() != self.num_items {
            return Err(GraphError::Shape(format!(
                "blocks have {}/{} rows, graph has {}/{} nodes",
                users.nrows(),
                items.nrows(),
                self.num_users,
                self.num_items
            )));
        }
        if users.ncols() != items.ncols() {
            return Err(GraphError::Shape(format!(
                "user dim {} != item dim {}",
                users.ncols(),
                items.ncols()
            )));
        }
        Ok(g)
    }

    /// One light-convolution step on aspect `aspect`:
    /// `user'[u] = Σ_i c_ui item[i]`, `item'[i] = Σ_u c_ui user[u]`.
    /// Isolated nodes map to zero.
    pub fn propagate(
        &self,
        aspect: usize,
        user_block: ArrayView2<'_, f64>,
        item_block: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), GraphError> {
        let g = self.check(aspect, &user_block, &item_block)?;
        let d = user_block.ncols();
        let mut new_users = Array2::zeros((self.num_users, d));
        let mut new_items = Array2::zeros((self.num_items, d));
        g.user_major.spmm_into(item_block, new_users.view_mut());
        g.item_major.spmm_into(user_block, new_items.view_mut());
        Ok((new_users, new_items))
    }

    /// Adjoint of [`propagate`](Self::propagate): maps gradients with
    /// respect to its outputs to gradients with respect to its inputs. The
    /// operator is symmetric across the bipartition, so the same coefficients
    /// apply with the roles of the two gradient blocks swapped.
    pub fn propagate_transpose(
        &self,
        aspect: usize,
        user_grad: ArrayView2<'_, f64>,
        item_grad: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), GraphError> {
        let g = self.check(aspect, &user_grad, &item_grad)?;
        let d = user_grad.ncols();
        // d<new_user>/d<item_block> is C, so the item-block gradient is C^T
        // applied to the user gradient, and vice versa.
        let mut grad_users = Array2::zeros((self.num_users, d));
        let mut grad_items = Array2::zeros((self.num_items, d));
        g.user_major.spmm_into(item_grad, grad_users.view_mut());
        g.item_major.spmm_into(user_grad, grad_items.view_mut());
        Ok((grad_users, grad_items))
    }

    pub fn summary(&self) -> GraphSummary {
        let hist = |deg: &[usize]| {
            let mut h = BTreeMap::new();
            for &d in deg {
                *h.entry(d).or_insert(0usize) += 1;
            }
            h
        };
        GraphSummary {
            num_users: self.num_users,
            num_items: self.num_items,
            aspects: self
                .aspects
                .iter()
                .map(|g| AspectSummary {
                    name: g.name.clone(),
                    edges: g.num_edges(),
                    user_degree_histogram: hist(&g.user_degrees),
                    item_degree_histogram: hist(&g.item_degrees),
                })
                .collect(),
        }
    }

    /// Serialize to the versioned little-endian `graphs.bin` layout.
    ///
    /// Header: magic `SAGCNGR\0`, `u32` version, `u64` users, items, aspects.
    /// Per aspect: `u64` name length, UTF-8 name, `u64` nnz, then the
    /// user-major CSR as `u64` offsets (N+1), `u64` columns and `f64`
    /// coefficients.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        for n in [self.num_users, self.num_items, self.aspects.len()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for g in &self.aspects {
            out.extend_from_slice(&(g.name.len() as u64).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.num_edges() as u64).to_le_bytes());
            for &o in &g.user_major.offsets {
                out.extend_from_slice(&(o as u64).to_le_bytes());
            }
            for &c in &g.user_major.cols {
                out.extend_from_slice(&(c as u64).to_le_bytes());
            }
            for &v in &g.user_major.vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != GRAPH_MAGIC {
            return Err(GraphError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != GRAPH_VERSION {
            return Err(GraphError::Format(format!("unsupported version {version}")));
        }
        let num_users = r.usize()?;
        let num_items = r.usize()?;
        let num_aspects = r.usize()?;
        let mut aspects = Vec::with_capacity(num_aspects);
        for _ in 0..num_aspects {
            let len = r.usize()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| GraphError::Format(e.to_string()))?;
            let nnz = r.usize()?;
            let offsets = (0..=num_users).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let cols = (0..nnz).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let _vals = (0..nnz).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            if offsets.last() != Some(&nnz) {
                return Err(GraphError::Format(format!("aspect `{name}`: offsets do not end at nnz")));
            }
            let mut edges = Vec::with_capacity(nnz);
            for u in 0..num_users {
                for &i in &cols[offsets[u]..offsets[u + 1]] {
                    if i >= num_items {
                        return Err(GraphError::OutOfRange(u, i));
                    }
                    edges.push((u, i));
                }
            }
            // Coefficients are a function of the edge set; rebuilding keeps
            // both orientations consistent.
            aspects.push(AspectGraph::from_edges(name, num_users, num_items, &edges));
        }
        if r.pos != bytes.len() {
            return Err(GraphError::Format("trailing bytes".into()));
        }
        Ok(Self {
            num_users,
            num_items,
            aspects,
        })
    }
}

const GRAPH_MAGIC: &[u8; 8] = b"SAGCNGR\0";
const GRAPH_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GraphError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GraphError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize, GraphError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, GraphError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub name: String,
    pub edges: usize,
    pub user_degree_histogram: BTreeMap<usize, usize>,
    pub item_degree_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub num_users: usize,
    pub num_items: usize,
    pub aspects: Vec<AspectSummary>,
}

//! Per-aspect embeddings and the forward pass: K propagation layers per
//! aspect graph, an unweighted sum over layers, concatenation across aspects,
//! and inner-product scoring.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graphs::{GraphError, NormalizedAspectGraph};
use crate::util::mix_seed;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{entity:?} index {index} out of range")]
    Index { entity: Entity, index: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_aspects: usize,
    /// Dimension of each aspect block.
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Standard deviation of the Normal initializer.
    pub init_scale: f64,
    pub seed: u64,
    /// Also concatenate the stacked layer-0 embeddings as a leading block,
    /// the literal reading of the concatenation formula.
    pub include_layer0_block: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_aspects: 8,
            embed_dim: 64,
            num_layers: 3,
            init_scale: 0.01,
            seed: 0,
            include_layer0_block: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_aspects == 0 {
            return Err(ModelError::Config("num_aspects must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::Config("embed_dim must be >= 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config("init_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Length of a node's final representation.
    pub fn final_dim(&self) -> usize {
        let blocks = if self.include_layer0_block { 2 } else { 1 };
        blocks * self.num_aspects * self.embed_dim
    }
}

/// Layer-0 embeddings: one `N × d` user block and one `M × d` item block per
/// aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Vec<Array2<f64>>,
    pub items: Vec<Array2<f64>>,
}

impl EmbeddingTable {
    pub fn zeros(num_aspects: usize, num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: (0..num_aspects).map(|_| Array2::zeros((num_users, dim))).collect(),
            items: (0..num_aspects).map(|_| Array2::zeros((num_items, dim))).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_aspects(), self.num_users(), self.num_items(), self.dim())
    }

    pub fn num_aspects(&self) -> usize {
        self.users.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.first().map_or(0, |b| b.nrows())
    }

    pub fn num_items(&self) -> usize {
        self.items.first().map_or(0, |b| b.nrows())
    }

    pub fn dim(&self) -> usize {
        self.users.first().map_or(0, |b| b.ncols())
    }

    /// All blocks in a fixed order: user blocks by aspect, then item blocks.
    pub fn blocks(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.users.iter().chain(self.items.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.users.iter_mut().chain(self.items.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            users: self.users.iter().map(|b| b * alpha).collect(),
            items: self.items.iter().map(|b| b * alpha).collect(),
        }
    }

    /// Mutable reference to the `k`-th parameter in [`blocks`](Self::blocks) order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for b in self.blocks_mut() {
            if k < b.len() {
                let d = b.ncols();
                return &mut b[[k / d, k % d]];
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, mut k: usize) -> f64 {
        for b in self.blocks() {
            if k < b.len() {
                let d = b.ncols();
                return b[[k / d, k % d]];
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Keep only the listed aspects, in order.
    pub fn select_aspects(&self, aspects: &[usize]) -> Self {
        Self {
            users: aspects.iter().map(|&a| self.users[a].clone()).collect(),
            items: aspects.iter().map(|&a| self.items[a].clone()).collect(),
        }
    }
}

/// Draw every block i.i.d. from `Normal(0, init_scale²)`, each block from its
/// own stream seeded by `(seed, aspect, role)`.
pub fn init_embeddings(config: &ModelConfig, num_users: usize, num_items: usize) -> EmbeddingTable {
    let normal = Normal::new(0.0, config.init_scale).expect("init_scale validated positive");
    let draw = |rows: usize, aspect: usize, role: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, aspect as u64, role));
        Array2::from_shape_simple_fn((rows, config.embed_dim), || normal.sample(&mut rng))
    };
    EmbeddingTable {
        users: (0..config.num_aspects).map(|a| draw(num_users, a, 1)).collect(),
        items: (0..config.num_aspects).map(|a| draw(num_items, a, 2)).collect(),
    }
}

/// Per-layer outputs and per-aspect aggregates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// `[aspect][layer]`, layer 0 being the table itself
    pub user_layers: Vec<Vec<Array2<f64>>>,
    pub item_layers: Vec<Vec<Array2<f64>>>,
    /// `[aspect]`, the sum over layers `0..=K`
    pub user_agg: Vec<Array2<f64>>,
    pub item_agg: Vec<Array2<f64>>,
    pub include_layer0_block: bool,
}

/// Run `num_layers` propagation steps on every aspect graph and sum the
/// layer outputs.
pub fn forward(
    table: &EmbeddingTable,
    graphs: &NormalizedAspectGraph,
    num_layers: usize,
    include_layer0_block: bool,
) -> Result<ForwardCache, ModelError> {
    if table.num_aspects() != graphs.num_aspects()
        || table.num_users() != graphs.num_users()
        || table.num_items() != graphs.num_items()
    {
        return Err(ModelError::Shape(format!(
            "table has A={} N={} M={}, graphs have A={} N={} M={}",
            table.num_aspects(),
            table.num_users(),
            table.num_items(),
            graphs.num_aspects(),
            graphs.num_users(),
            graphs.num_items()
        )));
    }
    let mut cache = ForwardCache {
        user_layers: Vec::with_capacity(table.num_aspects()),
        item_layers: Vec::with_capacity(table.num_aspects()),
        user_agg: Vec::with_capacity(table.num_aspects()),
        item_agg: Vec::with_capacity(table.num_aspects()),
        include_layer0_block,
    };
    for a in 0..table.num_aspects() {
        let mut users = vec![table.users[a].clone()];
        let mut items = vec![table.items[a].clone()];
        let mut user_sum = table.users[a].clone();
        let mut item_sum = table.items[a].clone();
        for k in 0..num_layers {
            let (nu, ni) = graphs.propagate(a, users[k].view(), items[k].view())?;
            user_sum += &nu;
            item_sum += &ni;
            users.push(nu);
            items.push(ni);
        }
        cache.user_layers.push(users);
        cache.item_layers.push(items);
        cache.user_agg.push(user_sum);
        cache.item_agg.push(item_sum);
    }
    Ok(cache)
}

impl ForwardCache {
    pub fn num_aspects(&self) -> usize {
        self.user_agg.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_agg.first().map_or(0, |b| b.nrows())
    }

    pub fn num_items(&self) -> usize {
        self.item_agg.first().map_or(0, |b| b.nrows())
    }

    pub fn num_layers(&self) -> usize {
        self.user_layers.first().map_or(0, |l| l.len() - 1)
    }

    fn check(&self, entity: Entity, index: usize) -> Result<(), ModelError> {
        let n = match entity {
            Entity::User => self.num_users(),
            Entity::Item => self.num_items(),
        };
        if index >= n {
            return Err(ModelError::Index { entity, index });
        }
        Ok(())
    }

    /// Concatenated per-aspect aggregates in aspect order, preceded by the
    /// stacked layer-0 blocks when the layer-0 block is enabled.
    pub fn final_representation(&self, entity: Entity, index: usize) -> Result<Vec<f64>, ModelError> {
        self.check(entity, index)?;
        let (layers, agg) = match entity {
            Entity::User => (&self.user_layers, &self.user_agg),
            Entity::Item => (&self.item_layers, &self.item_agg),
        };
        let mut out = Vec::new();
        if self.include_layer0_block {
            for l in layers {
                out.extend(l[0].row(index).iter().copied());
            }
        }
        for b in agg {
            out.extend(b.row(index).iter().copied());
        }
        Ok(out)
    }

    fn aspect_score(&self, a: usize, user: usize, item: usize) -> f64 {
        let mut s = self.user_agg[a].row(user).dot(&self.item_agg[a].row(item));
        if self.include_layer0_block {
            s += self.user_layers[a][0]
                .row(user)
                .dot(&self.item_layers[a][0].row(item));
        }
        s
    }

    /// Per-aspect contributions to the score. With the layer-0 block, each
    /// aspect also carries its own layer-0 inner product, so the components
    /// still sum to [`score`](Self::score).
    pub fn score_by_aspect(&self, user: usize, item: usize) -> Result<Vec<f64>, ModelError> {
        self.check(Entity::User, user)?;
        self.check(Entity::Item, item)?;
        Ok((0..self.num_aspects())
            .map(|a| self.aspect_score(a, user, item))
            .collect())
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64, ModelError> {
        Ok(self.score_by_aspect(user, item)?.iter().sum())
    }

    /// Scores of `user` against every item, counting only aspects where
    /// `mask[a]` is set.
    pub fn user_scores(&self, user: usize, mask: &[bool]) -> Vec<f64> {
        let mut out = ndarray::Array1::<f64>::zeros(self.num_items());
        for a in (0..self.num_aspects()).filter(|&a| mask[a]) {
            out += &self.item_agg[a].dot(&self.user_agg[a].row(user));
            if self.include_layer0_block {
                out += &self.item_layers[a][0].dot(&self.user_layers[a][0].row(user));
            }
        }
        out.to_vec()
    }

    /// Aggregated per-aspect vectors for one node.
    pub fn aspect_vectors(&self, entity: Entity, index: usize) -> Result<Vec<ArrayView1<'_, f64>>, ModelError> {
        self.check(entity, index)?;
        let agg = match entity {
            Entity::User => &self.user_agg,
            Entity::Item => &self.item_agg,
        };
        Ok(agg.iter().map(|b| b.row(index)).collect())
    }

    pub fn aspect_independence(&self, entity: Entity, index: usize) -> Result<Array2<f64>, ModelError> {
        Ok(aspect_independence(&self.aspect_vectors(entity, index)?))
    }
}

/// Pairwise cosine similarity between aspect blocks. Entries involving a
/// zero-norm block are `NaN`.
pub fn aspect_independence(blocks: &[ArrayView1<'_, f64>]) -> Array2<f64> {
    let a = blocks.len();
    let norms: Vec<f64> = blocks.iter().map(|b| b.dot(b).sqrt()).collect();
    let mut out = Array2::from_elem((a, a), f64::NAN);
    for p in 0..a {
        for q in 0..a {
            if norms[p] > 0.0 && norms[q] > 0.0 {
                out[[p, q]] = if p == q {
                    1.0
                } else {
                    (blocks[p].dot(&blocks[q]) / (norms[p] * norms[q])).clamp(-1.0, 1.0)
                };
            }
        }
    }
    out
}

/// Layer-0 independence for one node, straight from the table.
pub fn table_independence(table: &EmbeddingTable, entity: Entity, index: usize) -> Result<Array2<f64>, ModelError> {
    let blocks = match entity {
        Entity::User => &table.users,
        Entity::Item => &table.items,
    };
    if blocks.first().is_none_or(|b| index >= b.nrows()) {
        return Err(ModelError::Index { entity, index });
    }
    let views: Vec<_> = blocks.iter().map(|b| b.row(index)).collect();
    Ok(aspect_independence(&views))
}

const CKPT_MAGIC: &[u8; 8] = b"SAGCNCK\0";
const CKPT_VERSION: u32 = 1;

/// Serialize to the `model.ckpt` layout.
///
/// Header: magic `SAGCNCK\0`, `u32` version, `u64` A, d, K, N, M, `u8`
/// layer-0 flag, `u64` seed, `f64` init scale. Body: per aspect the user
/// block then the item block, row-major little-endian `f32`.
pub fn checkpoint_to_bytes(table: &EmbeddingTable, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * table.num_params());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for n in [
        table.num_aspects(),
        table.dim(),
        config.num_layers,
        table.num_users(),
        table.num_items(),
    ] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.push(config.include_layer0_block as u8);
    out.extend_from_slice(&config.seed.to_le_bytes());
    out.extend_from_slice(&config.init_scale.to_le_bytes());
    for a in 0..table.num_aspects() {
        for b in [&table.users[a], &table.items[a]] {
            for &x in b.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EmbeddingTable, ModelConfig), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_owned());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    }
    let [num_aspects, dim, num_layers, n, m] = dims;
    let flag = take(1)?[0] != 0;
    let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let init_scale = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut table = EmbeddingTable::zeros(num_aspects, n, m, dim);
    for a in 0..num_aspects {
        for rows in [n, m] {
            let raw = take(rows * dim * 4)?;
            let block = Array2::from_shape_vec(
                (rows, dim),
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            )
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            if rows == n {
                table.users[a] = block;
            } else {
                table.items[a] = block;
            }
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let config = ModelConfig {
        num_aspects,
        embed_dim: dim,
        num_layers,
        init_scale,
        seed,
        include_layer0_block: flag,
    };
    Ok((table, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_graphs, AspectInteractionStore};
    use ndarray::array;
    use rand::Rng;

    fn single_edge_graph() -> NormalizedAspectGraph {
        let s = AspectInteractionStore::new(1, 1, vec![(0, 0)], vec!["a".into()], vec![vec![(0, 0)]]).unwrap();
        build_graphs(&s, s.base_edges())
    }

    fn random_graph(n: usize, m: usize, a: usize, seed: u64) -> NormalizedAspectGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = Vec::new();
        for u in 0..n {
            for i in 0..m {
                if rng.random_bool(0.35) {
                    base.push((u, i));
                }
            }
        }
        let aspects: Vec<Vec<_>> = (0..a)
            .map(|_| base.iter().copied().filter(|_| rng.random_bool(0.6)).collect())
            .collect();
        let names = (0..a).map(|k| format!("a{k}")).collect();
        let s = AspectInteractionStore::new(n, m, base.clone(), names, aspects).unwrap();
        build_graphs(&s, &base)
    }

    fn config(a: usize, d: usize, k: usize) -> ModelConfig {
        ModelConfig {
            num_aspects: a,
            embed_dim: d,
            num_layers: k,
            init_scale: 0.3,
            seed: 5,
            include_layer0_block: false,
        }
    }

    #[test]
    fn init_is_deterministic_and_independent() {
        let c = config(3, 4, 1);
        let a = init_embeddings(&c, 6, 5);
        let b = init_embeddings(&c, 6, 5);
        assert_eq!(a, b);
        assert_ne!(a.users[0], a.users[1]);
        assert_ne!(a.items[0], a.items[2]);
        assert!(a.users[0].iter().zip(a.users[1].iter()).all(|(x, y)| x != y));
        assert_ne!(init_embeddings(&ModelConfig { seed: 6, ..c }, 6, 5), a);
    }

    #[test]
    fn final_dim_is_aspects_times_dim() {
        let c = config(8, 64, 1);
        assert_eq!(c.final_dim(), 512);
        let g = random_graph(3, 4, 8, 1);
        let t = init_embeddings(&c, 3, 4);
        let cache = forward(&t, &g, 1, false).unwrap();
        assert_eq!(cache.final_representation(Entity::User, 0).unwrap().len(), 512);
    }

    #[test]
    fn zero_layers_aggregate_is_table() {
        let g = random_graph(4, 5, 2, 2);
        let t = init_embeddings(&config(2, 3, 0), 4, 5);
        let cache = forward(&t, &g, 0, false).unwrap();
        assert_eq!(cache.user_agg, t.users);
        assert_eq!(cache.item_agg, t.items);
    }

    #[test]
    fn single_edge_one_layer_hand_values() {
        let g = single_edge_graph();
        let t = EmbeddingTable {
            users: vec![array![[0.3]]],
            items: vec![array![[0.5]]],
        };
        let cache = forward(&t, &g, 1, false).unwrap();
        assert!((cache.user_agg[0][[0, 0]] - 0.8).abs() < 1e-15);
        assert!((cache.item_agg[0][[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn aggregate_is_sum_of_layers() {
        let g = random_graph(6, 7, 2, 3);
        let t = init_embeddings(&config(2, 3, 3), 6, 7);
        let cache = forward(&t, &g, 3, false).unwrap();
        for a in 0..2 {
            let mut s = Array2::<f64>::zeros((6, 3));
            for l in &cache.user_layers[a] {
                s += l;
            }
            assert_eq!(s, cache.user_agg[a]);
        }
    }

    #[test]
    fn forward_is_linear_in_table() {
        let g = random_graph(6, 7, 2, 4);
        let t = init_embeddings(&config(2, 3, 2), 6, 7);
        let base = forward(&t, &g, 2, false).unwrap();
        let scaled = forward(&t.scaled(-2.5), &g, 2, false).unwrap();
        for (x, y) in base.user_agg[1].iter().zip(scaled.user_agg[1].iter()) {
            assert!((x * -2.5 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let g = random_graph(4, 5, 2, 5);
        let t = init_embeddings(&config(3, 2, 1), 4, 5);
        assert!(matches!(forward(&t, &g, 1, false), Err(ModelError::Shape(_))));
    }

    #[test]
    fn concatenation_order_and_isolated_users() {
        let s = AspectInteractionStore::new(
            2,
            2,
            vec![(0, 0), (0, 1)],
            vec!["a".into(), "b".into()],
            vec![vec![(0, 0)], vec![(0, 1)]],
        )
        .unwrap();
        let g = build_graphs(&s, s.base_edges());
        let t = init_embeddings(&config(2, 3, 2), 2, 2);
        let cache = forward(&t, &g, 2, false).unwrap();
        let rep = cache.final_representation(Entity::User, 0).unwrap();
        assert_eq!(rep.len(), 6);
        assert_eq!(&rep[..3], cache.user_agg[0].row(0).as_slice().unwrap());
        // user 1 has no edges anywhere
        let rep1 = cache.final_representation(Entity::User, 1).unwrap();
        assert_eq!(&rep1[..3], t.users[0].row(1).as_slice().unwrap());
        assert_eq!(&rep1[3..], t.users[1].row(1).as_slice().unwrap());
        assert!(matches!(
            cache.final_representation(Entity::Item, 2),
            Err(ModelError::Index { .. })
        ));
    }

    #[test]
    fn score_decomposes_and_matches_dense() {
        let g = random_graph(5, 6, 3, 6);
        let t = init_embeddings(&config(3, 4, 2), 5, 6);
        for flag in [false, true] {
            let cache = forward(&t, &g, 2, flag).unwrap();
            for u in 0..5 {
                let all = cache.user_scores(u, &[true; 3]);
                for i in 0..6 {
                    let parts = cache.score_by_aspect(u, i).unwrap();
                    let total = cache.score(u, i).unwrap();
                    assert!((parts.iter().sum::<f64>() - total).abs() < 1e-12);
                    let eu = cache.final_representation(Entity::User, u).unwrap();
                    let ei = cache.final_representation(Entity::Item, i).unwrap();
                    let dense: f64 = eu.iter().zip(&ei).map(|(a, b)| a * b).sum();
                    assert!((dense - total).abs() < 1e-12);
                    assert!((all[i] - total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_aspect_component_equals_score() {
        let g = random_graph(3, 3, 1, 7);
        let t = init_embeddings(&config(1, 2, 1), 3, 3);
        let cache = forward(&t, &g, 1, false).unwrap();
        let parts = cache.score_by_aspect(1, 2).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], cache.score(1, 2).unwrap());
    }

    #[test]
    fn zero_item_scores_zero() {
        let g = random_graph(3, 3, 2, 8);
        let mut t = init_embeddings(&config(2, 2, 0), 3, 3);
        for b in &mut t.items {
            b.row_mut(1).fill(0.0);
        }
        let cache = forward(&t, &g, 0, false).unwrap();
        assert_eq!(cache.score(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn permuting_aspects_keeps_scores() {
        let g = random_graph(5, 6, 3, 9);
        let t = init_embeddings(&config(3, 2, 2), 5, 6);
        let cache = forward(&t, &g, 2, false).unwrap();
        let perm = [2, 0, 1];
        let pg = {
            // rebuild graphs in permuted order through the cache's own tables
            let mut c = cache.clone();
            c.user_agg = perm.iter().map(|&a| cache.user_agg[a].clone()).collect();
            c.item_agg = perm.iter().map(|&a| cache.item_agg[a].clone()).collect();
            c.user_layers = perm.iter().map(|&a| cache.user_layers[a].clone()).collect();
            c.item_layers = perm.iter().map(|&a| cache.item_layers[a].clone()).collect();
            c
        };
        for u in 0..5 {
            for i in 0..6 {
                assert!((pg.score(u, i).unwrap() - cache.score(u, i).unwrap()).abs() < 1e-12);
            }
        }
        let rep = pg.final_representation(Entity::User, 0).unwrap();
        assert_eq!(&rep[..2], cache.user_agg[2].row(0).as_slice().unwrap());
    }

    #[test]
    fn cosine_matrix_properties() {
        let x = array![1.0, 2.0, 3.0];
        let same = aspect_independence(&[x.view(), x.view()]);
        assert!(same.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 2.0];
        let z = array![0.0, 0.0];
        let m = aspect_independence(&[e1.view(), e2.view(), z.view()]);
        assert_eq!(m[[0, 1]], 0.0);
        assert_eq!(m[[0, 0]], 1.0);
        assert!(m[[2, 0]].is_nan() && m[[2, 2]].is_nan());

        let g = random_graph(4, 4, 3, 10);
        let t = init_embeddings(&config(3, 5, 1), 4, 4);
        let cache = forward(&t, &g, 1, false).unwrap();
        let c = cache.aspect_independence(Entity::User, 2).unwrap();
        for p in 0..3 {
            assert_eq!(c[[p, p]], 1.0);
            for q in 0..3 {
                assert_eq!(c[[p, q]], c[[q, p]]);
                assert!((-1.0..=1.0).contains(&c[[p, q]]));
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let c = config(2, 3, 2);
        let t = init_embeddings(&c, 4, 5);
        let bytes = checkpoint_to_bytes(&t, &c);
        let (back, cfg) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(cfg, c);
        for (a, b) in t.blocks().zip(back.blocks()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

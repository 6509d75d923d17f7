//! Shared inputs for the benchmarks.

use sagcn::graphs::{build_graphs, NormalizedAspectGraph};
use sagcn::synthetic::{generate, SyntheticConfig};

/// Planted-aspect graphs at the given scale, all edges used for training.
pub fn planted_graphs(num_users: usize, num_items: usize, per_user: usize) -> NormalizedAspectGraph {
    let corpus = generate(&SyntheticConfig {
        num_users,
        num_items,
        interactions_per_user: per_user,
        groups_per_aspect: 10,
        ..Default::default()
    })
    .expect("valid bench config");
    let store = corpus.true_store().expect("planted store");
    build_graphs(&store, store.base_edges())
}

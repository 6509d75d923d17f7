//! BPR training with a hand-written backward pass through every propagation
//! layer, Adam updates and recall-based early stopping.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitSpec;
use crate::eval::{evaluate, EvalProtocol};
use crate::graphs::NormalizedAspectGraph;
use crate::model::{forward, init_embeddings, EmbeddingTable, ForwardCache, ModelConfig, ModelError};
use crate::util::mix_seed;
use crate::Pair;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("score vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("early stopping needs a non-empty validation split")]
    NoValidation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] crate::graphs::GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 weight λ.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 1000,
            patience: 20,
            eval_k: 10,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            early_stopping: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning-rate grid `1e-5, 1e-4, ..., 1e1`.
pub fn learning_rate_grid() -> Vec<f64> {
    (-5..=1).map(|e| 10f64.powi(e)).collect()
}

/// Weight-decay grid `1e-5, ..., 1e-1`.
pub fn weight_decay_grid() -> Vec<f64> {
    (-5..=-1).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// One epoch of triplets: every training pair once, in shuffled order, each
/// with one negative drawn uniformly from the user's uninteracted items.
///
/// `train_by_user` lists must be sorted. Users who interacted with every item
/// are skipped.
pub fn sample_triplets(train_by_user: &[Vec<usize>], num_items: usize, epoch_seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut positives: Vec<Pair> = Vec::new();
    for (u, items) in train_by_user.iter().enumerate() {
        if items.len() >= num_items {
            if !items.is_empty() {
                log::warn!("user {u} interacted with every item; no negatives, skipped");
            }
            continue;
        }
        positives.extend(items.iter().map(|&i| (u, i)));
    }
    positives.shuffle(&mut rng);
    positives
        .into_iter()
        .map(|(user, pos)| {
            let seen = &train_by_user[user];
            let neg = loop {
                let j = rng.random_range(0..num_items);
                if seen.binary_search(&j).is_err() {
                    break j;
                }
            };
            Triplet { user, pos, neg }
        })
        .collect()
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(seed, epoch as u64, 0x7E)
}

/// `-ln σ(x)`, computed without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `σ(x)`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ -ln σ(pos - neg) + λ · params_sq_norm`.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64], lambda: f64, params_sq_norm: f64) -> Result<f64, TrainError> {
    if scores_pos.len() != scores_neg.len() {
        return Err(TrainError::Length(scores_pos.len(), scores_neg.len()));
    }
    let mut total = 0.0;
    for (&p, &n) in scores_pos.iter().zip(scores_neg) {
        if !(p.is_finite() && n.is_finite()) {
            return Err(TrainError::NonFinite);
        }
        total += neg_log_sigmoid(p - n);
    }
    Ok(total + lambda * params_sq_norm)
}

/// Squared norm of the layer-0 rows a batch touches, counted once per
/// occurrence in the batch, over all aspects.
pub fn batch_sq_norm(table: &EmbeddingTable, batch: &[Triplet]) -> f64 {
    let mut s = 0.0;
    for a in 0..table.num_aspects() {
        for t in batch {
            let u = table.users[a].row(t.user);
            let p = table.items[a].row(t.pos);
            let n = table.items[a].row(t.neg);
            s += u.dot(&u) + p.dot(&p) + n.dot(&n);
        }
    }
    s
}

/// Batch objective from scratch: forward pass, BPR terms and L2.
pub fn batch_objective(
    table: &EmbeddingTable,
    graphs: &NormalizedAspectGraph,
    model: &ModelConfig,
    batch: &[Triplet],
    lambda: f64,
) -> Result<f64, TrainError> {
    let cache = forward(table, graphs, model.num_layers, model.include_layer0_block)?;
    let (pos, neg) = batch_scores(&cache, batch)?;
    bpr_loss(&pos, &neg, lambda, batch_sq_norm(table, batch))
}

fn batch_scores(cache: &ForwardCache, batch: &[Triplet]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut pos = Vec::with_capacity(batch.len());
    let mut neg = Vec::with_capacity(batch.len());
    for t in batch {
        pos.push(cache.score(t.user, t.pos)?);
        neg.push(cache.score(t.user, t.neg)?);
    }
    Ok((pos, neg))
}

/// Loss of `batch` and its gradient with respect to every layer-0 block.
///
/// The score gradient is scattered into per-aspect aggregate gradients; since
/// the aggregate is `Σ_k P^k x`, the layer-0 gradient is `Σ_k (P^T)^k g`,
/// accumulated by repeated adjoint propagation. The L2 term adds `2λx` per
/// occurrence of a row in the batch.
pub fn backward(
    table: &EmbeddingTable,
    cache: &ForwardCache,
    graphs: &NormalizedAspectGraph,
    batch: &[Triplet],
    lambda: f64,
) -> Result<(f64, EmbeddingTable), TrainError> {
    let (pos, neg) = batch_scores(cache, batch)?;
    let loss = bpr_loss(&pos, &neg, lambda, batch_sq_norm(table, batch))?;
    // d(-ln σ(x))/dx = -σ(-x)
    let coef: Vec<f64> = pos.iter().zip(&neg).map(|(p, n)| -sigmoid(-(p - n))).collect();

    let num_layers = cache.num_layers();
    let mut grad = table.zeros_like();
    for a in 0..table.num_aspects() {
        let mut gu = Array2::<f64>::zeros(table.users[a].raw_dim());
        let mut gi = Array2::<f64>::zeros(table.items[a].raw_dim());
        let (eu, ei) = (&cache.user_agg[a], &cache.item_agg[a]);
        for (t, &c) in batch.iter().zip(&coef) {
            let diff = &ei.row(t.pos) - &ei.row(t.neg);
            gu.row_mut(t.user).scaled_add(c, &diff);
            gi.row_mut(t.pos).scaled_add(c, &eu.row(t.user));
            gi.row_mut(t.neg).scaled_add(-c, &eu.row(t.user));
        }
        let mut acc_u = gu.clone();
        let mut acc_i = gi.clone();
        let (mut cur_u, mut cur_i) = (gu, gi);
        for _ in 0..num_layers {
            let (nu, ni) = graphs.propagate_transpose(a, cur_u.view(), cur_i.view())?;
            acc_u += &nu;
            acc_i += &ni;
            cur_u = nu;
            cur_i = ni;
        }
        let (xu, xi) = (&table.users[a], &table.items[a]);
        for (t, &c) in batch.iter().zip(&coef) {
            if cache.include_layer0_block {
                let diff = &xi.row(t.pos) - &xi.row(t.neg);
                acc_u.row_mut(t.user).scaled_add(c, &diff);
                acc_i.row_mut(t.pos).scaled_add(c, &xu.row(t.user));
                acc_i.row_mut(t.neg).scaled_add(-c, &xu.row(t.user));
            }
            if lambda > 0.0 {
                acc_u.row_mut(t.user).scaled_add(2.0 * lambda, &xu.row(t.user));
                acc_i.row_mut(t.pos).scaled_add(2.0 * lambda, &xi.row(t.pos));
                acc_i.row_mut(t.neg).scaled_add(2.0 * lambda, &xi.row(t.neg));
            }
        }
        grad.users[a] = acc_u;
        grad.items[a] = acc_i;
    }
    Ok((loss, grad))
}

/// Adam with bias correction, state shaped like the table.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: EmbeddingTable,
    pub v: EmbeddingTable,
    pub step: u64,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &EmbeddingTable, learning_rate: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            learning_rate,
            betas,
            eps,
        }
    }

    pub fn update(&mut self, params: &mut EmbeddingTable, grad: &EmbeddingTable) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.learning_rate, self.eps);
        for (((p, g), m), v) in params
            .blocks_mut()
            .zip(grad.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive observations without a strict
/// improvement, remembering the snapshot taken at the best one.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
    since_best: usize,
    seen: usize,
}

impl<T> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, metric: f64, snapshot: impl FnOnce() -> T) -> StopDecision {
        let epoch = self.seen;
        self.seen += 1;
        let improved = match &self.best {
            None => true,
            Some((b, _, _)) => metric > *b,
        };
        if improved {
            self.best = Some((metric, epoch, snapshot()));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.0)
    }

    /// Zero-based index of the best observation.
    pub fn best_index(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_best(self) -> Option<T> {
        self.best.map(|b| b.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    /// Wall-clock seconds since training started; kept out of the
    /// deterministic log line.
    pub elapsed_s: f64,
}

impl EpochLog {
    /// `{epoch, mean_loss, val_recall@k, val_ndcg@k}` as one JSON line.
    pub fn log_line(&self, k: usize) -> String {
        let mut map = serde_json::Map::new();
        map.insert("epoch".into(), self.epoch.into());
        map.insert("mean_loss".into(), self.mean_loss.into());
        map.insert(format!("val_recall@{k}"), self.val_recall.into());
        map.insert(format!("val_ndcg@{k}"), self.val_ndcg.into());
        serde_json::Value::Object(map).to_string()
    }

    pub fn timing_line(&self) -> String {
        serde_json::json!({ "epoch": self.epoch, "elapsed_s": self.elapsed_s }).to_string()
    }
}

/// Mutable training state: parameters, optimizer and per-user positives.
pub struct Trainer<'a> {
    pub table: EmbeddingTable,
    pub adam: AdamState,
    graphs: &'a NormalizedAspectGraph,
    model: ModelConfig,
    config: TrainConfig,
    train_by_user: Vec<Vec<usize>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        split: &SplitSpec,
        graphs: &'a NormalizedAspectGraph,
        model: &ModelConfig,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        model.validate()?;
        config.validate()?;
        if model.num_aspects != graphs.num_aspects() {
            return Err(TrainError::Config(format!(
                "model has {} aspects, graphs have {}",
                model.num_aspects,
                graphs.num_aspects()
            )));
        }
        let table = init_embeddings(model, graphs.num_users(), graphs.num_items());
        Ok(Self::with_table(split, graphs, model, config, table))
    }

    pub fn with_table(
        split: &SplitSpec,
        graphs: &'a NormalizedAspectGraph,
        model: &ModelConfig,
        config: &TrainConfig,
        table: EmbeddingTable,
    ) -> Self {
        let adam = AdamState::new(&table, config.learning_rate, config.adam_betas, config.adam_eps);
        Self {
            table,
            adam,
            graphs,
            model: model.clone(),
            config: config.clone(),
            train_by_user: SplitSpec::by_user(&split.train, graphs.num_users()),
        }
    }

    /// Triplets for `epoch`, in batch order.
    pub fn epoch_triplets(&self, epoch: usize) -> Vec<Triplet> {
        sample_triplets(&self.train_by_user, self.graphs.num_items(), epoch_seed(self.config.seed, epoch))
    }

    /// One pass over the epoch's triplets; returns the mean per-triplet loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64, TrainError> {
        let triplets = self.epoch_triplets(epoch);
        let mut total = 0.0;
        for (b, batch) in triplets.chunks(self.config.batch_size).enumerate() {
            let cache = forward(
                &self.table,
                self.graphs,
                self.model.num_layers,
                self.model.include_layer0_block,
            )?;
            let (loss, grad) = match backward(&self.table, &cache, self.graphs, batch, self.config.weight_decay) {
                Ok(r) => r,
                Err(TrainError::NonFinite) => return Err(TrainError::Divergence { epoch, batch: b }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            total += loss;
            self.adam.update(&mut self.table, &grad);
        }
        if !self.table.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: triplets.len().div_ceil(self.config.batch_size),
            });
        }
        Ok(if triplets.is_empty() {
            0.0
        } else {
            total / triplets.len() as f64
        })
    }

    pub fn forward(&self) -> Result<ForwardCache, TrainError> {
        Ok(forward(
            &self.table,
            self.graphs,
            self.model.num_layers,
            self.model.include_layer0_block,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation table (or the last one without early stopping).
    pub table: EmbeddingTable,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Train from a fresh initialization. `on_epoch` sees each log entry as it is
/// produced.
pub fn train(
    split: &SplitSpec,
    graphs: &NormalizedAspectGraph,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(split, graphs, model, config)?;
    let validate = !split.validation.is_empty();
    if config.early_stopping && !validate {
        return Err(TrainError::NoValidation);
    }
    let protocol = EvalProtocol::validation(split, graphs.num_users());
    let started = std::time::Instant::now();
    let mut stopper: EarlyStopping<EmbeddingTable> = EarlyStopping::new(config.patience);
    let mut log = Vec::new();
    for epoch in 0..config.max_epochs {
        let mean_loss = trainer.run_epoch(epoch)?;
        let (val_recall, val_ndcg) = if validate {
            let report = evaluate(&trainer.forward()?, &protocol, &[config.eval_k]);
            (Some(report.recall(config.eval_k)), Some(report.ndcg(config.eval_k)))
        } else {
            (None, None)
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            val_recall,
            val_ndcg,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if config.early_stopping {
            let decision = stopper.observe(val_recall.unwrap_or(0.0), || trainer.table.clone());
            if decision == StopDecision::Stop {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (table, best_epoch) = if config.early_stopping {
        let best = stopper.best_index().unwrap_or(0);
        (stopper.into_best().unwrap_or(trainer.table), best)
    } else {
        (trainer.table, log.len().saturating_sub(1))
    };
    Ok(TrainOutcome { table, log, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_graphs, AspectInteractionStore};
    use std::collections::HashMap;

    #[test]
    fn equal_scores_cost_ln2() {
        let l = bpr_loss(&[0.3, -1.0], &[0.3, -1.0], 0.0, 123.0).unwrap();
        approx::assert_abs_diff_eq!(l, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn negatives_are_uniform_over_unseen_items() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // one heavy user so every triplet draws from the same unseen set
        let seen = vec![0, 3, 7];
        let train_by_user = vec![seen.clone(); 1];
        let num_items = 20;
        let mut counts = vec![0usize; num_items];
        for epoch in 0..4000 {
            for t in sample_triplets(&train_by_user, num_items, epoch_seed(1, epoch)) {
                counts[t.neg] += 1;
            }
        }
        assert!(seen.iter().all(|&i| counts[i] == 0));
        let unseen: Vec<usize> = (0..num_items).filter(|i| !seen.contains(i)).map(|i| counts[i]).collect();
        let total: usize = unseen.iter().sum();
        let expected = total as f64 / unseen.len() as f64;
        let stat: f64 = unseen.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((unseen.len() - 1) as f64).unwrap().cdf(stat);
        assert!(p > 1e-3, "chi-square {stat:.2}, p = {p:.2e}");
    }

    #[test]
    fn loss_vanishes_for_large_margin() {
        assert!(bpr_loss(&[800.0], &[0.0], 0.0, 0.0).unwrap() < 1e-300);
        assert!(bpr_loss(&[0.0], &[800.0], 0.0, 0.0).unwrap().is_finite());
        assert!((bpr_loss(&[0.0], &[800.0], 0.0, 0.0).unwrap() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        assert!(matches!(bpr_loss(&[1.0], &[], 0.0, 0.0), Err(TrainError::Length(1, 0))));
        assert!(matches!(bpr_loss(&[f64::NAN], &[0.0], 0.0, 0.0), Err(TrainError::NonFinite)));
    }

    #[test]
    fn forced_negative() {
        let train = vec![vec![0, 1, 3], vec![2]];
        for seed in 0..20 {
            for t in sample_triplets(&train, 4, seed).iter().filter(|t| t.user == 0) {
                assert_eq!(t.neg, 2);
            }
        }
    }

    #[test]
    fn saturated_user_is_skipped() {
        let train = vec![vec![0, 1], vec![0]];
        let t = sample_triplets(&train, 2, 1);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0], Triplet { user: 1, pos: 0, neg: 1 });
    }

    #[test]
    fn sampling_is_seeded() {
        let train = vec![vec![0, 2, 5], vec![1, 3], vec![4]];
        assert_eq!(sample_triplets(&train, 8, 9), sample_triplets(&train, 8, 9));
        assert_ne!(sample_triplets(&train, 8, 9), sample_triplets(&train, 8, 10));
        let set: HashMap<(usize, usize), usize> = sample_triplets(&train, 8, 9)
            .iter()
            .map(|t| ((t.user, t.pos), t.neg))
            .collect();
        assert_eq!(set.len(), 6);
        for ((u, _), n) in set {
            assert!(train[u].binary_search(&n).is_err());
        }
    }

    #[test]
    fn early_stopping_scripted_plateau() {
        let mut s = EarlyStopping::new(3);
        let script = [0.1, 0.2, 0.2, 0.15, 0.2];
        let decisions: Vec<_> = script.iter().enumerate().map(|(e, &m)| s.observe(m, || e)).collect();
        assert_eq!(
            decisions,
            vec![
                StopDecision::Improved,
                StopDecision::Improved,
                StopDecision::NoImprovement,
                StopDecision::NoImprovement,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best_index(), Some(1));
        assert_eq!(s.into_best(), Some(1));
    }

    #[test]
    fn grids_match_search_space() {
        assert_eq!(learning_rate_grid().len(), 7);
        assert!((learning_rate_grid()[0] - 1e-5).abs() < 1e-20);
        assert!((learning_rate_grid()[6] - 10.0).abs() < 1e-12);
        assert_eq!(weight_decay_grid().len(), 5);
    }

    #[test]
    fn mf_closed_form_gradient() {
        // K = 0, A = 1: the model is plain matrix factorization.
        let store = AspectInteractionStore::new(2, 3, vec![(0, 0), (1, 2)], vec!["a".into()], vec![vec![(0, 0), (1, 2)]])
            .unwrap();
        let graphs = build_graphs(&store, store.base_edges());
        let model = ModelConfig {
            num_aspects: 1,
            embed_dim: 3,
            num_layers: 0,
            init_scale: 0.5,
            seed: 4,
            include_layer0_block: false,
        };
        let table = init_embeddings(&model, 2, 3);
        let cache = forward(&table, &graphs, 0, false).unwrap();
        let t = Triplet { user: 0, pos: 0, neg: 1 };
        let lambda = 0.01;
        let (_, grad) = backward(&table, &cache, &graphs, &[t], lambda).unwrap();
        let (u, p, n) = (table.users[0].row(0), table.items[0].row(0), table.items[0].row(1));
        let x = u.dot(&p) - u.dot(&n);
        let c = -1.0 / (1.0 + x.exp());
        let gu = (&p - &n) * c + &u * (2.0 * lambda);
        let gp = &u * c + &p * (2.0 * lambda);
        let gn = &u * -c + &n * (2.0 * lambda);
        for k in 0..3 {
            assert!((grad.users[0][[0, k]] - gu[k]).abs() < 1e-14);
            assert!((grad.items[0][[0, k]] - gp[k]).abs() < 1e-14);
            assert!((grad.items[0][[1, k]] - gn[k]).abs() < 1e-14);
        }
        assert!(grad.users[0].row(1).iter().all(|&g| g == 0.0));
        assert!(grad.items[0].row(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_margin_gradient_is_half() {
        let store = AspectInteractionStore::new(1, 2, vec![(0, 0)], vec!["a".into()], vec![vec![(0, 0)]]).unwrap();
        let graphs = build_graphs(&store, store.base_edges());
        let mut table = EmbeddingTable::zeros(1, 1, 2, 2);
        table.users[0].row_mut(0).assign(&ndarray::array![1.0, -2.0]);
        table.items[0].row_mut(0).assign(&ndarray::array![0.5, 0.5]);
        table.items[0].row_mut(1).assign(&ndarray::array![0.5, 0.5]);
        let cache = forward(&table, &graphs, 0, false).unwrap();
        let (loss, grad) = backward(&table, &cache, &graphs, &[Triplet { user: 0, pos: 0, neg: 1 }], 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // d/d(item_pos) = -0.5 * user
        assert_eq!(grad.items[0].row(0).to_vec(), vec![-0.5, 1.0]);
        assert_eq!(grad.items[0].row(1).to_vec(), vec![0.5, -1.0]);
        assert_eq!(grad.users[0].row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = EmbeddingTable::zeros(1, 1, 1, 2);
        let mut g = p.zeros_like();
        g.users[0][[0, 0]] = 3.0;
        g.users[0][[0, 1]] = -0.2;
        let mut adam = AdamState::new(&p, 0.1, (0.9, 0.999), 1e-8);
        adam.update(&mut p, &g);
        assert!((p.users[0][[0, 0]] + 0.1).abs() < 1e-8);
        assert!((p.users[0][[0, 1]] - 0.1).abs() < 1e-7);
        assert_eq!(p.items[0][[0, 0]], 0.0);
    }
}

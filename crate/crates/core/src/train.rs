//! Per-user stochastic training of the joint objective with early stopping
//! on validation HR@10, and full-catalog evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{rank_target, MetricSet};
use crate::hypergraph::MultiViewHypergraph;
use crate::model::{predict_scores, Example, Gradients, ModelConfig, ModelParams, Variant};
use crate::structure::{median_bandwidth, SlHyperparams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuPolicy {
    /// Median squared intra-edge distance at initialization.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub relu: bool,
    pub alpha: f64,
    pub beta: f64,
    pub mu: MuPolicy,
    /// Sampled negatives per positive.
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub patience: usize,
    pub weight_refresh_every: usize,
    /// Users whose gradients are computed against the same parameters and
    /// summed (in user order) before one update.
    pub batch_size: usize,
    pub init_scale: f64,
    pub decay_logit: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 1,
            relu: false,
            alpha: 1.0,
            beta: 0.7,
            mu: MuPolicy::Median,
            negatives: 100,
            epochs: 100,
            learning_rate: 1.0,
            clip: 10.0,
            patience: 10,
            weight_refresh_every: 1,
            batch_size: 1,
            init_scale: 0.1,
            decay_logit: 2.0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        SlHyperparams {
            beta: self.beta,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            weight_refresh_every: self.weight_refresh_every,
        }
        .validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.negatives == 0 {
            return bad("negatives must be >= 1");
        }
        if self.dim == 0 || self.layers == 0 || self.batch_size == 0 {
            return bad("dim, layers and batch_size must be >= 1");
        }
        if !(self.clip > 0.0) || !(self.init_scale > 0.0) || !self.decay_logit.is_finite() {
            return bad("clip and init_scale must be positive, decay_logit finite");
        }
        if let MuPolicy::Fixed(mu) = self.mu {
            if !(mu > 0.0) {
                return bad("mu must be positive");
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            beta: self.beta,
            alpha: self.alpha,
            variant: self.variant,
            relu: self.relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_str: f64,
    pub l_pre: f64,
    pub total: f64,
    pub valid_hr10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation HR@10.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub curve: Vec<EpochLog>,
    /// Test metrics of the untrained model.
    pub initial_test: MetricSet,
}

pub fn loss_curve_csv(curve: &[EpochLog]) -> String {
    let mut out = String::from("epoch,L_str,L_pre,L\n");
    for e in curve {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.l_str, e.l_pre, e.total);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Predict the validation item from the training prefix.
    Valid,
    /// Predict the test item from training prefix plus validation item.
    Test,
}

fn graph_for(graph: Option<&MultiViewHypergraph>, history: &[usize]) -> Option<MultiViewHypergraph> {
    graph.map(|g| {
        if g.vertices == history {
            g.clone()
        } else {
            g.restrict(history)
        }
    })
}

/// Ranks the held-out item of every user against the full catalog. Items
/// already in the user's history are excluded from the ranking.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    split: &SplitDataset,
    graphs: &[Option<MultiViewHypergraph>],
    target: Target,
) -> Result<MetricSet> {
    let ranks: Vec<usize> = split
        .users
        .par_iter()
        .zip(graphs.par_iter())
        .map(|(u, g)| {
            let (history, item) = match target {
                Target::Valid => (u.train.clone(), u.valid),
                Target::Test => (u.test_history(), u.test),
            };
            let graph = graph_for(g.as_ref(), &history);
            let user = params.user_representation(cfg, &history, graph.as_ref())?;
            let mut scores: Vec<f64> = predict_scores(&user, &params.table).iter().copied().collect();
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numerical(format!("non-finite score for user {}", u.user_id)));
            }
            for &h in &history {
                scores[h] = f64::NEG_INFINITY;
            }
            rank_target(&scores, item)
        })
        .collect::<Result<_>>()?;
    Ok(MetricSet::from_ranks(&ranks))
}

fn sample_negatives(
    rng: &mut ChaCha8Rng,
    n_items: usize,
    positives: &HashSet<usize>,
    k: usize,
) -> Result<Vec<usize>> {
    if positives.len() >= n_items {
        return Err(Error::InvalidConfig("no items left to sample negatives from".into()));
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = rng.random_range(0..n_items);
        if !positives.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn add_grads(acc: &mut Gradients, g: Gradients) {
    for (item, v) in g.table {
        match acc.table.get_mut(&item) {
            Some(a) => *a += v,
            None => {
                acc.table.insert(item, v);
            }
        }
    }
    acc.phi += g.phi;
    acc.gate_vector += g.gate_vector;
    acc.gate_bias += g.gate_bias;
    acc.cut_head += g.cut_head;
    acc.cut_bias += g.cut_bias;
    for (a, t) in acc.thetas.iter_mut().zip(g.thetas) {
        *a += t;
    }
    acc.fusion_weight += g.fusion_weight;
    acc.fusion_bias += g.fusion_bias;
    acc.decay_logit += g.decay_logit;
}

/// Fresh parameters for a seed, with μ set by the configured policy.
pub fn init_params(
    split: &SplitDataset,
    graphs: &[Option<MultiViewHypergraph>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> ModelParams {
    let mut params = ModelParams::init(
        split.catalog.len(),
        cfg.dim,
        cfg.layers,
        cfg.init_scale,
        cfg.decay_logit,
        rng,
    );
    params.kernel.mu = match cfg.mu {
        MuPolicy::Fixed(mu) => mu,
        MuPolicy::Median => median_bandwidth(
            graphs
                .iter()
                .flatten()
                .map(|g| (g, params.table.features(&g.vertices))),
        ),
    };
    params
}

struct Step {
    history: Vec<usize>,
    graph: Option<MultiViewHypergraph>,
    target: usize,
    negatives: Vec<usize>,
}

/// Trains one model. `graphs[u]` is user `u`'s hypergraph over its test
/// history (or `None`); training steps use it restricted to the prefix.
pub fn train(
    split: &SplitDataset,
    graphs: &[Option<MultiViewHypergraph>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graphs.len() != split.users.len() {
        return Err(Error::Shape(format!(
            "{} hypergraphs for {} users",
            graphs.len(),
            split.users.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(split, graphs, cfg, &mut rng);
    let model_cfg = cfg.model_config();
    let n_items = split.catalog.len();

    let initial_test = evaluate(&params, &model_cfg, split, graphs, Target::Test)?;
    let mut best_hr = evaluate(&params, &model_cfg, split, graphs, Target::Valid)?.hr10;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut curve = Vec::new();
    let trainable: Vec<usize> = (0..split.users.len())
        .filter(|&u| split.users[u].train.len() >= 2)
        .collect();
    let positives: Vec<HashSet<usize>> = split
        .users
        .iter()
        .map(|u| u.train.iter().copied().collect())
        .collect();
    let mut snapshot: Option<ModelParams> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.weight_refresh_every > 1 && (epoch - 1) % cfg.weight_refresh_every == 0 {
            snapshot = Some(params.clone());
        }
        let mut order = trainable.clone();
        order.shuffle(&mut rng);
        let (mut sum_str, mut sum_pre, mut sum_total, mut steps) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            // Sampling stays sequential so the random stream is fixed.
            let mut plan = Vec::with_capacity(batch.len());
            for &u in batch {
                let split_user = &split.users[u];
                let cut = rng.random_range(1..split_user.train.len());
                let history = split_user.train[..cut].to_vec();
                let target = split_user.train[cut];
                let negatives = if cfg.alpha != 0.0 {
                    sample_negatives(&mut rng, n_items, &positives[u], cfg.negatives)?
                } else {
                    Vec::new()
                };
                let graph = match cfg.variant {
                    Variant::Full => graph_for(graphs[u].as_ref(), &history),
                    Variant::BaseOnly => None,
                };
                plan.push(Step {
                    history,
                    graph,
                    target,
                    negatives,
                });
            }
            let results: Vec<Result<_>> = plan
                .par_iter()
                .map(|s| {
                    let frozen = match (&snapshot, &s.graph) {
                        (Some(snap), Some(g)) if g.n_edges() > 0 => {
                            Some(snap.edge_weights(&model_cfg, &s.history, g)?.1)
                        }
                        _ => None,
                    };
                    let ex = Example {
                        history: &s.history,
                        graph: s.graph.as_ref(),
                        target: s.target,
                        negatives: &s.negatives,
                        frozen_weights: frozen.as_ref(),
                    };
                    params.loss_and_grad(&model_cfg, &ex)
                })
                .collect();
            let mut acc: Option<Gradients> = None;
            for r in results {
                let (parts, g) = r.map_err(|e| match e {
                    Error::Numerical(_) => Error::TrainingDiverged { epoch },
                    other => other,
                })?;
                sum_str += parts.l_str;
                sum_pre += parts.l_pre.unwrap_or(0.0);
                sum_total += parts.total;
                steps += 1;
                match &mut acc {
                    Some(a) => add_grads(a, g),
                    None => acc = Some(g),
                }
            }
            if let Some(g) = acc {
                params.apply(&g, cfg.learning_rate, cfg.clip);
            }
        }

        let valid = match evaluate(&params, &model_cfg, split, graphs, Target::Valid) {
            Ok(m) => m,
            Err(Error::Numerical(_)) => return Err(Error::TrainingDiverged { epoch }),
            Err(e) => return Err(e),
        };
        let k = steps.max(1) as f64;
        curve.push(EpochLog {
            epoch,
            l_str: sum_str / k,
            l_pre: sum_pre / k,
            total: sum_total / k,
            valid_hr10: valid.hr10,
        });
        if valid.hr10 > best_hr {
            best_hr = valid.hr10;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        curve,
        initial_test,
    })
}

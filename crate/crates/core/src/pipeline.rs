//! Per-user hypergraph construction for every builder and the per-seed
//! train/evaluate runner shared by the CLI and the test suites.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{run_seeds, MetricReport, MetricSet};
use crate::hypergraph::{
    assemble, contextual_hyperedges, intent_hyperedges, kmeans_centroids, transition_hyperedges,
    MultiViewHypergraph,
};
use crate::llm::{
    attribute_profile, categorize_items, extract_interest_angles, CategoryAssignment, InterestAngleSet, LlmClient,
    ProfilerConfig, TextEmbedder, UsageRecord,
};
use crate::model::Variant;
use crate::train::{evaluate, train, Target, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub angles: InterestAngleSet,
    pub assignments: Vec<CategoryAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    /// Views from interest-angle profiling (LLM or attribute-derived).
    Profiled,
    Transition,
    Contextual { windows: Vec<usize> },
    /// Intent prototypes are k-means centroids of item vectors learned by a
    /// base-only warm-up run with the same seed.
    Intent { intents: usize, top_n: usize },
}

impl GraphSource {
    pub fn name(&self) -> &'static str {
        match self {
            GraphSource::Profiled => "llm",
            GraphSource::Transition => "transition",
            GraphSource::Contextual { .. } => "contextual",
            GraphSource::Intent { .. } => "intent",
        }
    }
}

/// Attribute-derived profiles over each user's test history: one view whose
/// categories are the item attributes. No LLM involved.
pub fn synthetic_profiles(split: &SplitDataset) -> Result<Vec<UserProfile>> {
    split
        .users
        .iter()
        .map(|u| {
            let (angles, assignments) = attribute_profile(&u.user_id, &u.test_history(), &split.catalog)?;
            Ok(UserProfile { angles, assignments })
        })
        .collect()
}

/// LLM profiles over each user's test history: interest angles, then one
/// categorization request per angle. Users are processed concurrently;
/// results and usage come back in user order.
pub fn llm_profiles(
    client: &dyn LlmClient,
    cfg: &ProfilerConfig,
    split: &SplitDataset,
) -> Result<(Vec<UserProfile>, Vec<UsageRecord>)> {
    let per_user: Vec<(UserProfile, Vec<UsageRecord>)> = split
        .users
        .par_iter()
        .map(|u| {
            let history = u.test_history();
            let record = |usage| UsageRecord {
                user_id: u.user_id.clone(),
                model_id: cfg.model_id.clone(),
                usage,
            };
            let (angles, usage) = extract_interest_angles(client, cfg, &u.user_id, &history, &split.catalog)?;
            let mut usages = vec![record(usage)];
            let mut assignments = Vec::with_capacity(angles.angles.len());
            for angle in &angles.angles {
                let (a, usage) = categorize_items(client, cfg, &u.user_id, angle, &history, &split.catalog)?;
                assignments.push(a);
                usages.push(record(usage));
            }
            Ok((UserProfile { angles, assignments }, usages))
        })
        .collect::<Result<_>>()?;
    let mut profiles = Vec::with_capacity(per_user.len());
    let mut usages = Vec::new();
    for (p, u) in per_user {
        profiles.push(p);
        usages.extend(u);
    }
    Ok((profiles, usages))
}

fn allow_degenerate(r: Result<MultiViewHypergraph>) -> Result<Option<MultiViewHypergraph>> {
    match r {
        Ok(g) => Ok(Some(g)),
        Err(Error::DegenerateHypergraph(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-user hypergraphs over the test history. Users whose profile yields
/// no edge get `None` and fall back to the base encoder alone.
pub fn profiled_graphs(
    split: &SplitDataset,
    profiles: &[UserProfile],
    embedder: Option<(&dyn TextEmbedder, usize)>,
) -> Result<Vec<Option<MultiViewHypergraph>>> {
    if profiles.len() != split.users.len() {
        return Err(Error::Shape(format!(
            "{} profiles for {} users",
            profiles.len(),
            split.users.len()
        )));
    }
    split
        .users
        .par_iter()
        .zip(profiles.par_iter())
        .map(|(u, p)| {
            if p.angles.user_id != u.user_id {
                return Err(Error::InvalidConfig(format!(
                    "profile for {} given for user {}",
                    p.angles.user_id, u.user_id
                )));
            }
            allow_degenerate(assemble(&u.user_id, &u.test_history(), &p.angles, &p.assignments, embedder))
        })
        .collect()
}

pub fn transition_graphs(split: &SplitDataset) -> Result<Vec<Option<MultiViewHypergraph>>> {
    split
        .users
        .iter()
        .map(|u| allow_degenerate(transition_hyperedges(&u.user_id, &u.test_history())))
        .collect()
}

pub fn contextual_graphs(split: &SplitDataset, windows: &[usize]) -> Result<Vec<Option<MultiViewHypergraph>>> {
    split
        .users
        .iter()
        .map(|u| allow_degenerate(contextual_hyperedges(&u.user_id, &u.test_history(), windows)))
        .collect()
}

/// `item_vectors[i]` is the vector of catalog item `i`.
pub fn intent_graphs(
    split: &SplitDataset,
    item_vectors: &[Vec<f64>],
    intents: usize,
    top_n: usize,
    seed: u64,
) -> Result<Vec<Option<MultiViewHypergraph>>> {
    let centroids = kmeans_centroids(item_vectors, intents, 100, seed)?;
    split
        .users
        .iter()
        .map(|u| {
            let seq = u.test_history();
            let vecs: Vec<Vec<f64>> = seq.iter().map(|&i| item_vectors[i].clone()).collect();
            allow_degenerate(intent_hyperedges(&u.user_id, &seq, &vecs, &centroids, top_n))
        })
        .collect()
}

/// Everything needed to train and evaluate one configuration.
pub struct Experiment<'a> {
    pub split: &'a SplitDataset,
    pub source: GraphSource,
    /// Required for [`GraphSource::Profiled`].
    pub profiles: Option<&'a [UserProfile]>,
    pub embedder: Option<&'a dyn TextEmbedder>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test: MetricSet,
    pub graphs: Vec<Option<MultiViewHypergraph>>,
}

impl Experiment<'_> {
    /// Hypergraphs for a seed; only the intent builder depends on the seed.
    pub fn graphs(&self, seed: u64) -> Result<Vec<Option<MultiViewHypergraph>>> {
        if self.train.variant == Variant::BaseOnly {
            return Ok(vec![None; self.split.users.len()]);
        }
        match &self.source {
            GraphSource::Profiled => {
                let profiles = self
                    .profiles
                    .ok_or_else(|| Error::InvalidConfig("profiled hypergraphs need user profiles".into()))?;
                let embedder = self.embedder.map(|e| (e, self.train.dim));
                profiled_graphs(self.split, profiles, embedder)
            }
            GraphSource::Transition => transition_graphs(self.split),
            GraphSource::Contextual { windows } => contextual_graphs(self.split, windows),
            GraphSource::Intent { intents, top_n } => {
                let empty = vec![None; self.split.users.len()];
                let warm_cfg = TrainConfig {
                    variant: Variant::BaseOnly,
                    ..self.train
                };
                let warm = train(self.split, &empty, &warm_cfg, seed)?;
                let vectors: Vec<Vec<f64>> = warm
                    .params
                    .table
                    .matrix
                    .column_iter()
                    .map(|c| c.iter().copied().collect())
                    .collect();
                intent_graphs(self.split, &vectors, *intents, *top_n, seed)
            }
        }
    }

    pub fn run_seed(&self, seed: u64) -> Result<SeedRun> {
        let graphs = self.graphs(seed)?;
        let outcome = train(self.split, &graphs, &self.train, seed)?;
        let test = evaluate(
            &outcome.params,
            &self.train.model_config(),
            self.split,
            &graphs,
            Target::Test,
        )?;
        Ok(SeedRun {
            seed,
            outcome,
            test,
            graphs,
        })
    }

    /// Runs every seed; the returned runs are sorted by seed.
    pub fn run(&self, seeds: &[u64]) -> Result<(MetricReport, Vec<SeedRun>)> {
        let runs = Mutex::new(BTreeMap::new());
        let report = run_seeds(seeds, |seed| {
            let r = self.run_seed(seed)?;
            let test = r.test;
            runs.lock().expect("no panics while holding the lock").insert(seed, r);
            Ok(test)
        })?;
        let runs = runs.into_inner().expect("no panics while holding the lock");
        Ok((report, runs.into_values().collect()))
    }
}

/// Mean untrained test metrics over a set of runs.
pub fn initial_report(runs: &[SeedRun]) -> MetricReport {
    MetricReport::from_runs(runs.iter().map(|r| (r.seed, r.outcome.initial_test)).collect(), vec![])
}

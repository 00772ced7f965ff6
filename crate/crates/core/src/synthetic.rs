//! Planted-cluster interaction corpus for end-to-end smoke runs.
//!
//! Items are split evenly into latent clusters, each item carrying the
//! attribute `cluster-k`. Every user favors a few clusters and draws most of
//! their interactions from them.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Interaction, InteractionDataset, ItemMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub clusters_per_user: usize,
    /// Probability that an interaction comes from a favored cluster.
    pub focus: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            n_clusters: 8,
            clusters_per_user: 2,
            focus: 0.9,
            min_len: 10,
            max_len: 30,
            seed: 7,
        }
    }
}

pub fn item_id(i: usize) -> String {
    format!("i{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

pub fn cluster_of(cfg: &PlantedConfig, item: usize) -> usize {
    item * cfg.n_clusters / cfg.n_items
}

/// Interactions plus item metadata; pass both to
/// [`InteractionDataset::from_interactions`] or use [`planted_dataset`].
pub fn planted_interactions(cfg: &PlantedConfig) -> Result<(Vec<Interaction>, HashMap<String, ItemMeta>)> {
    if cfg.n_clusters == 0
        || cfg.n_items < cfg.n_clusters
        || cfg.clusters_per_user == 0
        || cfg.clusters_per_user > cfg.n_clusters
        || !(0.0..=1.0).contains(&cfg.focus)
        || cfg.min_len < 3
        || cfg.max_len < cfg.min_len
        || cfg.max_len > cfg.n_items
    {
        return Err(Error::InvalidConfig(format!("invalid planted corpus settings: {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let members: Vec<Vec<usize>> = (0..cfg.n_clusters)
        .map(|c| (0..cfg.n_items).filter(|&i| cluster_of(cfg, i) == c).collect())
        .collect();
    let meta = (0..cfg.n_items)
        .map(|i| {
            (
                item_id(i),
                ItemMeta {
                    title: Some(format!("Item {i}")),
                    attributes: vec![format!("cluster-{}", cluster_of(cfg, i))],
                },
            )
        })
        .collect();

    let mut rows = Vec::new();
    for u in 0..cfg.n_users {
        let favored = rand::seq::index::sample(&mut rng, cfg.n_clusters, cfg.clusters_per_user).into_vec();
        let others: Vec<usize> = (0..cfg.n_clusters).filter(|c| !favored.contains(c)).collect();
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seen = vec![false; cfg.n_items];
        let mut t = 0i64;
        while (t as usize) < len {
            let pool = if others.is_empty() || rng.random_bool(cfg.focus) {
                &favored
            } else {
                &others
            };
            let cluster = *pool.choose(&mut rng).expect("nonempty pool");
            let mut fresh: Vec<usize> = members[cluster].iter().copied().filter(|&i| !seen[i]).collect();
            if fresh.is_empty() {
                fresh = (0..cfg.n_items).filter(|&i| !seen[i]).collect();
            }
            let item = *fresh.choose(&mut rng).expect("max_len <= n_items");
            seen[item] = true;
            rows.push(Interaction {
                user_id: user_id(u),
                item_id: item_id(item),
                timestamp: t,
            });
            t += 1;
        }
    }
    Ok((rows, meta))
}

pub fn planted_dataset(cfg: &PlantedConfig) -> Result<InteractionDataset> {
    let (rows, meta) = planted_interactions(cfg)?;
    InteractionDataset::from_interactions(rows, &meta)
}

//! Interaction corpora: parsing, implicit-feedback preprocessing, truncation and
//! the leave-one-out split.
//!
//! Every loader funnels through [`InteractionDataset::from_interactions`], which
//! applies the same contract regardless of the on-disk format:
//!
//! * ratings are discarded, every row is an implicit interaction;
//! * per user, rows are ordered by timestamp (ties keep file order) and repeated
//!   `(user, item)` pairs keep only the earliest row;
//! * users left with fewer than [`MIN_SEQUENCE_LEN`] interactions are dropped;
//! * the catalog only indexes items that survive in some user's history.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Shortest sequence that still yields train / validation / test parts.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: String,
    /// Human-readable name used in prompts; falls back to the id.
    pub title: String,
    pub attributes: Vec<String>,
}

/// Optional side information for an item, keyed by its raw id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemMeta {
    pub title: Option<String>,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.id.is_empty() {
                return Err(Error::InvalidConfig("item id must be nonempty".into()));
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(Self { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Catalog indices, oldest first. Relative order only; timestamps are dropped.
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: Vec<UserSequence>,
    pub catalog: Arc<ItemCatalog>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// History available when predicting the test item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    pub fn reassemble(&self) -> Vec<usize> {
        let mut s = self.test_history();
        s.push(self.test);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub catalog: Arc<ItemCatalog>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub n_users: usize,
    pub n_items: usize,
    pub avg_length: f64,
    pub n_actions: usize,
    pub sparsity: f64,
}

impl CorpusStats {
    pub fn from_counts(n_users: usize, n_items: usize, n_actions: usize) -> Self {
        let cells = n_users as f64 * n_items as f64;
        Self {
            n_users,
            n_items,
            avg_length: n_actions as f64 / n_users as f64,
            n_actions,
            sparsity: 1.0 - n_actions as f64 / cells,
        }
    }
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# Users       {}", self.n_users)?;
        writeln!(f, "# Items       {}", self.n_items)?;
        writeln!(f, "# Avg.Length  {:.1}", self.avg_length)?;
        writeln!(f, "# Actions     {}", self.n_actions)?;
        write!(f, "Sparsity      {:.2}%", self.sparsity * 100.0)
    }
}

/// Numeric ids sort numerically, everything else lexicographically.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[derive(PartialEq, Eq)]
struct NaturalKey(String);

impl Ord for NaturalKey {
    fn cmp(&self, other: &Self) -> Ordering {
        natural_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for NaturalKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl InteractionDataset {
    /// Applies the shared preprocessing contract to raw interaction rows, given in
    /// file order.
    pub fn from_interactions(
        interactions: Vec<Interaction>,
        meta: &HashMap<String, ItemMeta>,
    ) -> Result<Self> {
        let mut by_user: BTreeMap<NaturalKey, Vec<(i64, String)>> = BTreeMap::new();
        for row in interactions {
            if row.user_id.is_empty() || row.item_id.is_empty() {
                return Err(Error::InvalidConfig("empty user or item id".into()));
            }
            if row.timestamp < 0 {
                return Err(Error::InvalidConfig(format!(
                    "negative timestamp {} for user {}",
                    row.timestamp, row.user_id
                )));
            }
            by_user
                .entry(NaturalKey(row.user_id))
                .or_default()
                .push((row.timestamp, row.item_id));
        }

        let users: Vec<(String, Vec<String>)> = by_user
            .into_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .filter_map(|(user, mut rows)| {
                // Stable sort keeps file order among equal timestamps.
                rows.sort_by_key(|(t, _)| *t);
                let mut seen = HashSet::with_capacity(rows.len());
                let items: Vec<String> = rows
                    .into_iter()
                    .filter_map(|(_, item)| seen.insert(item.clone()).then_some(item))
                    .collect();
                (items.len() >= MIN_SEQUENCE_LEN).then_some((user.0, items))
            })
            .collect();

        if users.is_empty() {
            return Err(Error::EmptyDataset);
        }

        let mut item_ids: Vec<&String> = users
            .iter()
            .flat_map(|(_, items)| items.iter())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        item_ids.sort_by(|a, b| natural_cmp(a, b));

        let items = item_ids
            .iter()
            .map(|id| {
                let m = meta.get(id.as_str());
                Item {
                    id: (*id).clone(),
                    title: m
                        .and_then(|m| m.title.clone())
                        .unwrap_or_else(|| (*id).clone()),
                    attributes: m.map(|m| m.attributes.clone()).unwrap_or_default(),
                }
            })
            .collect();
        let catalog = ItemCatalog::new(items)?;

        let users = users
            .into_iter()
            .map(|(user_id, items)| UserSequence {
                user_id,
                items: items
                    .iter()
                    .map(|id| catalog.index_of(id).expect("item indexed above"))
                    .collect(),
            })
            .collect();

        Ok(Self {
            users,
            catalog: Arc::new(catalog),
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_actions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserSequence> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .map(|raw| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            match std::str::from_utf8(raw) {
                Ok(s) => s.to_owned(),
                // Latin-1: every byte maps to the code point of the same value.
                Err(_) => raw.iter().map(|&b| b as char).collect(),
            }
        })
        .collect())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_timestamp(path: &Path, line: usize, field: &str) -> Result<i64> {
    let t: i64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("bad timestamp {field:?}")))?;
    if t < 0 {
        return Err(parse_error(path, line, "negative timestamp"));
    }
    Ok(t)
}

fn parse_rating(path: &Path, line: usize, field: &str) -> Result<()> {
    field
        .trim()
        .parse::<f64>()
        .map(|_| ())
        .map_err(|_| parse_error(path, line, format!("bad rating {field:?}")))
}

/// Parses MovieLens-1M `ratings.dat` / `movies.dat` (`::`-delimited).
pub fn parse_movielens(ratings_path: &Path, movies_path: &Path) -> Result<InteractionDataset> {
    let mut meta = HashMap::new();
    for (i, line) in read_lines(movies_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(parse_error(movies_path, i + 1, "expected MovieID::Title::Genres"));
        }
        let attributes = fields[2]
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_owned)
            .collect();
        meta.insert(
            fields[0].to_owned(),
            ItemMeta {
                title: Some(fields[1].to_owned()),
                attributes,
            },
        );
    }

    let mut rows = Vec::new();
    for (i, line) in read_lines(ratings_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_error(
                ratings_path,
                i + 1,
                "expected UserID::MovieID::Rating::Timestamp",
            ));
        }
        parse_rating(ratings_path, i + 1, fields[2])?;
        rows.push(Interaction {
            user_id: fields[0].to_owned(),
            item_id: fields[1].to_owned(),
            timestamp: parse_timestamp(ratings_path, i + 1, fields[3])?,
        });
    }
    InteractionDataset::from_interactions(rows, &meta)
}

/// Parses an Amazon ratings CSV (`user,item,rating,timestamp`), with an optional
/// `item<TAB>category<TAB>brand` metadata file. A non-numeric first line is taken
/// as a header.
pub fn parse_amazon_csv(path: &Path, metadata_path: Option<&Path>) -> Result<InteractionDataset> {
    let mut meta = HashMap::new();
    if let Some(mp) = metadata_path {
        for (i, line) in read_lines(mp)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().trim();
            if id.is_empty() {
                return Err(parse_error(mp, i + 1, "missing item id"));
            }
            let attributes = fields
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .map(str::to_owned)
                .collect();
            meta.insert(
                id.to_owned(),
                ItemMeta {
                    title: None,
                    attributes,
                },
            );
        }
    }

    let mut rows = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let is_header = i == 0
            && fields.len() == 4
            && fields[3].parse::<i64>().is_err()
            && fields[2].parse::<f64>().is_err();
        if is_header {
            continue;
        }
        if fields.len() != 4 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_error(path, i + 1, "expected user,item,rating,timestamp"));
        }
        parse_rating(path, i + 1, fields[2])?;
        rows.push(Interaction {
            user_id: fields[0].to_owned(),
            item_id: fields[1].to_owned(),
            timestamp: parse_timestamp(path, i + 1, fields[3])?,
        });
    }
    InteractionDataset::from_interactions(rows, &meta)
}

/// Keeps the last `min(len, l_tru)` items of every sequence. The catalog is left
/// untouched so the rankable item set does not shrink.
pub fn truncate_sequences(dataset: &InteractionDataset, l_tru: usize) -> Result<InteractionDataset> {
    if l_tru < MIN_SEQUENCE_LEN {
        return Err(Error::InvalidConfig(format!(
            "l_tru must be at least {MIN_SEQUENCE_LEN}, got {l_tru}"
        )));
    }
    let users = dataset
        .users
        .iter()
        .map(|u| UserSequence {
            user_id: u.user_id.clone(),
            items: u.items[u.items.len().saturating_sub(l_tru)..].to_vec(),
        })
        .collect();
    Ok(InteractionDataset {
        users,
        catalog: Arc::clone(&dataset.catalog),
    })
}

pub fn leave_one_out(dataset: &InteractionDataset) -> Result<SplitDataset> {
    let users = dataset
        .users
        .iter()
        .map(|u| {
            let n = u.items.len();
            if n < MIN_SEQUENCE_LEN {
                return Err(Error::InternalInvariantViolation(format!(
                    "user {} has {n} interactions, need at least {MIN_SEQUENCE_LEN}",
                    u.user_id
                )));
            }
            Ok(UserSplit {
                user_id: u.user_id.clone(),
                train: u.items[..n - 2].to_vec(),
                valid: u.items[n - 2],
                test: u.items[n - 1],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitDataset {
        users,
        catalog: Arc::clone(&dataset.catalog),
    })
}

pub fn corpus_stats(dataset: &InteractionDataset) -> CorpusStats {
    CorpusStats::from_counts(dataset.n_users(), dataset.n_items(), dataset.n_actions())
}

/// Renders the `user_id<TAB>item,item,...` dump, one line per user.
pub fn canonical_dump(dataset: &InteractionDataset) -> String {
    let mut out = String::new();
    for u in &dataset.users {
        let items: Vec<&str> = u
            .items
            .iter()
            .map(|&i| dataset.catalog.get(i).id.as_str())
            .collect();
        let _ = writeln!(out, "{}\t{}", u.user_id, items.join(","));
    }
    out
}

/// Renders the companion catalog file: `item_id<TAB>title<TAB>attr|attr|...`.
pub fn catalog_dump(catalog: &ItemCatalog) -> String {
    let mut out = String::new();
    for item in catalog.items() {
        let _ = writeln!(out, "{}\t{}\t{}", item.id, item.title, item.attributes.join("|"));
    }
    out
}

/// Reads a canonical sequence dump (plus optional catalog dump) back into a
/// dataset. Sequence order in the dump is taken as chronological.
pub fn parse_canonical(sequences_path: &Path, catalog_path: Option<&Path>) -> Result<InteractionDataset> {
    let mut meta = HashMap::new();
    if let Some(cp) = catalog_path {
        for (i, line) in read_lines(cp)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.is_empty() || fields[0].is_empty() {
                return Err(parse_error(cp, i + 1, "missing item id"));
            }
            let title = fields.get(1).filter(|t| !t.is_empty()).map(|t| (*t).to_owned());
            let attributes = fields
                .get(2)
                .map(|a| {
                    a.split('|')
                        .filter(|s| !s.is_empty())
                        .map(str::to_owned)
                        .collect()
                })
                .unwrap_or_default();
            meta.insert(fields[0].to_owned(), ItemMeta { title, attributes });
        }
    }

    let mut rows = Vec::new();
    for (i, line) in read_lines(sequences_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (user, items) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(sequences_path, i + 1, "expected user_id<TAB>items"))?;
        for (t, item) in items.split(',').enumerate() {
            if item.is_empty() {
                return Err(parse_error(sequences_path, i + 1, "empty item id"));
            }
            rows.push(Interaction {
                user_id: user.to_owned(),
                item_id: item.to_owned(),
                timestamp: t as i64,
            });
        }
    }
    InteractionDataset::from_interactions(rows, &meta)
}

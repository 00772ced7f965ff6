//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use llmhg::llm::{ModelPrice, DEFAULT_MAX_ANGLES, DEFAULT_RETRIES};
use llmhg::model::Variant;
use llmhg::pipeline::GraphSource;
use llmhg::synthetic::PlantedConfig;
use llmhg::train::{MuPolicy, TrainConfig};
use llmhg::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    MovieLens { ratings: PathBuf, movies: PathBuf },
    Amazon { interactions: PathBuf, metadata: Option<PathBuf> },
    Canonical { sequences: PathBuf, catalog: Option<PathBuf> },
    Planted(PlantedConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlmMode {
    Live,
    Record,
    Replay,
    /// Attribute-derived angles; no LLM at all.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub l_tru: Option<usize>,
    pub llm_mode: LlmMode,
    pub fixtures: Option<PathBuf>,
    pub model_id: String,
    pub max_angles: usize,
    pub retries: usize,
    /// Live requests in flight at once.
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub angle_template: Option<PathBuf>,
    pub categorization_template: Option<PathBuf>,
    pub price: Option<ModelPrice>,
    pub text_embeddings: bool,
    pub embed_seed: u64,
    pub hypergraph: GraphSource,
    pub base_only: bool,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "format",
    "ratings",
    "movies",
    "interactions",
    "metadata",
    "sequences",
    "catalog",
    "planted_users",
    "planted_items",
    "planted_clusters",
    "planted_seed",
    "l_tru",
    "llm_mode",
    "fixtures",
    "model_id",
    "max_angles",
    "retries",
    "concurrency",
    "timeout_secs",
    "angle_template",
    "categorization_template",
    "usd_per_1k_prompt",
    "usd_per_1k_completion",
    "text_embeddings",
    "embed_seed",
    "hypergraph",
    "windows",
    "intents",
    "intent_top_n",
    "base_only",
    "dim",
    "layers",
    "activation",
    "alpha",
    "beta",
    "mu",
    "negatives",
    "epochs",
    "lr",
    "clip",
    "patience",
    "weight_refresh_every",
    "batch_size",
    "init_scale",
    "decay_logit",
    "seeds",
    "out",
];

const PATH_KEYS: &[&str] = &[
    "ratings",
    "movies",
    "interactions",
    "metadata",
    "sequences",
    "catalog",
    "fixtures",
    "angle_template",
    "categorization_template",
    "out",
];

/// Parses `key = value` lines; `#` starts a comment. Relative paths are
/// resolved against `base_dir`.
pub fn parse_pairs(text: &str, origin: &Path, base_dir: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message: "expected key = value".into(),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        pairs.insert(k.clone(), resolve(&k, v, base_dir));
    }
    Ok(pairs)
}

/// Path values become absolute so a saved config stays valid from any
/// working directory.
fn resolve(key: &str, value: String, base_dir: Option<&Path>) -> String {
    if !PATH_KEYS.contains(&key) {
        return value;
    }
    let p = Path::new(&value);
    let joined = match base_dir {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    };
    std::path::absolute(&joined)
        .unwrap_or(joined)
        .to_string_lossy()
        .into_owned()
}

pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{arg}` is not key=value")))?;
    let k = k.trim().to_string();
    let v = resolve(&k, v.trim().to_string(), None);
    Ok((k, v))
}

struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        self.get(k).map(PathBuf::from)
    }

    fn required_path(&self, k: &str) -> Result<PathBuf> {
        self.path(k)
            .ok_or_else(|| Error::InvalidConfig(format!("missing required key `{k}`")))
    }

    fn num<T: std::str::FromStr>(&self, k: &str, default: T) -> Result<T> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("`{k}` has invalid value `{v}`"))),
        }
    }

    fn flag(&self, k: &str, default: bool) -> Result<bool> {
        match self.get(k) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::InvalidConfig(format!("`{k}` must be true or false, got `{v}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, k: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("`{k}` has invalid entry `{x}`")))
                })
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidConfig(format!("unknown config key `{k}`")));
        }
        let p = Pairs(pairs);
        let data = match p.get("format").unwrap_or("planted") {
            "movielens" => DataSource::MovieLens {
                ratings: p.required_path("ratings")?,
                movies: p.required_path("movies")?,
            },
            "amazon" => DataSource::Amazon {
                interactions: p.required_path("interactions")?,
                metadata: p.path("metadata"),
            },
            "canonical" => DataSource::Canonical {
                sequences: p.required_path("sequences")?,
                catalog: p.path("catalog"),
            },
            "planted" => {
                let d = PlantedConfig::default();
                DataSource::Planted(PlantedConfig {
                    n_users: p.num("planted_users", d.n_users)?,
                    n_items: p.num("planted_items", d.n_items)?,
                    n_clusters: p.num("planted_clusters", d.n_clusters)?,
                    seed: p.num("planted_seed", d.seed)?,
                    ..d
                })
            }
            other => return Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        };
        let l_tru = match p.get("l_tru") {
            None | Some("none") => None,
            Some(_) => Some(p.num("l_tru", 0usize)?),
        };
        let llm_mode = match p.get("llm_mode").unwrap_or("synthetic") {
            "live" => LlmMode::Live,
            "record" => LlmMode::Record,
            "replay" => LlmMode::Replay,
            "synthetic" => LlmMode::Synthetic,
            other => return Err(Error::InvalidConfig(format!("unknown llm_mode `{other}`"))),
        };
        let fixtures = p.path("fixtures");
        match (llm_mode, &fixtures) {
            (LlmMode::Replay | LlmMode::Record, None) => {
                return Err(Error::InvalidConfig("replay and record modes need `fixtures`".into()))
            }
            (LlmMode::Replay, Some(f)) if !f.is_file() => {
                return Err(Error::InvalidConfig(format!(
                    "fixture file {} does not exist",
                    f.display()
                )))
            }
            _ => {}
        }
        let price = match (p.get("usd_per_1k_prompt"), p.get("usd_per_1k_completion")) {
            (None, None) => None,
            _ => Some(ModelPrice {
                usd_per_1k_prompt: p.num("usd_per_1k_prompt", 0.0)?,
                usd_per_1k_completion: p.num("usd_per_1k_completion", 0.0)?,
            }),
        };
        let text_embeddings = match p.get("text_embeddings").unwrap_or("hash") {
            "hash" => true,
            "none" => false,
            other => return Err(Error::InvalidConfig(format!("unknown text_embeddings `{other}`"))),
        };
        let hypergraph = match p.get("hypergraph").unwrap_or("llm") {
            "llm" => GraphSource::Profiled,
            "transition" => GraphSource::Transition,
            "contextual" => GraphSource::Contextual {
                windows: p.list("windows", vec![3, 5])?,
            },
            "intent" => GraphSource::Intent {
                intents: p.num("intents", 8)?,
                top_n: p.num("intent_top_n", 5)?,
            },
            other => return Err(Error::InvalidConfig(format!("unknown hypergraph builder `{other}`"))),
        };
        let d = TrainConfig::default();
        let base_only = p.flag("base_only", false)?;
        let train = TrainConfig {
            dim: p.num("dim", d.dim)?,
            layers: p.num("layers", d.layers)?,
            relu: match p.get("activation") {
                None => d.relu,
                Some("relu") => true,
                Some("identity") => false,
                Some(other) => return Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
            },
            alpha: p.num("alpha", d.alpha)?,
            beta: p.num("beta", d.beta)?,
            mu: match p.get("mu") {
                None | Some("median") => MuPolicy::Median,
                Some(_) => MuPolicy::Fixed(p.num("mu", 1.0)?),
            },
            negatives: p.num("negatives", d.negatives)?,
            epochs: p.num("epochs", d.epochs)?,
            learning_rate: p.num("lr", d.learning_rate)?,
            clip: p.num("clip", d.clip)?,
            patience: p.num("patience", d.patience)?,
            weight_refresh_every: p.num("weight_refresh_every", d.weight_refresh_every)?,
            batch_size: p.num("batch_size", d.batch_size)?,
            init_scale: p.num("init_scale", d.init_scale)?,
            decay_logit: p.num("decay_logit", d.decay_logit)?,
            variant: if base_only { Variant::BaseOnly } else { Variant::Full },
        };
        train.validate()?;
        let seeds = p.list("seeds", vec![1, 2, 3, 4, 5])?;
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let cfg = RunConfig {
            data,
            l_tru,
            llm_mode,
            fixtures,
            model_id: p.get("model_id").unwrap_or("gpt-3.5-turbo").to_string(),
            max_angles: p.num("max_angles", DEFAULT_MAX_ANGLES)?,
            retries: p.num("retries", DEFAULT_RETRIES)?,
            concurrency: p.num("concurrency", 4)?,
            timeout_secs: p.num("timeout_secs", 60)?,
            angle_template: p.path("angle_template"),
            categorization_template: p.path("categorization_template"),
            price,
            text_embeddings,
            embed_seed: p.num("embed_seed", 0)?,
            hypergraph,
            base_only,
            train,
            seeds,
            out: p.path("out").unwrap_or_else(|| PathBuf::from("llmhg-out")),
        };
        if cfg.max_angles == 0 || cfg.concurrency == 0 {
            return Err(Error::InvalidConfig("max_angles and concurrency must be >= 1".into()));
        }
        if matches!(cfg.l_tru, Some(l) if l < 3) {
            return Err(Error::InvalidConfig("l_tru must be >= 3".into()));
        }
        Ok(cfg)
    }

    /// Loads a config file (if any) and applies overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                parse_pairs(&text, p, p.parent())?
            }
            None => BTreeMap::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            pairs.insert(k, v);
        }
        Self::from_pairs(pairs)
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = Vec::new();
        let path = |p: &Path| p.to_string_lossy().into_owned();
        match &self.data {
            DataSource::MovieLens { ratings, movies } => {
                kv.push(("format", "movielens".into()));
                kv.push(("ratings", path(ratings)));
                kv.push(("movies", path(movies)));
            }
            DataSource::Amazon { interactions, metadata } => {
                kv.push(("format", "amazon".into()));
                kv.push(("interactions", path(interactions)));
                if let Some(m) = metadata {
                    kv.push(("metadata", path(m)));
                }
            }
            DataSource::Canonical { sequences, catalog } => {
                kv.push(("format", "canonical".into()));
                kv.push(("sequences", path(sequences)));
                if let Some(c) = catalog {
                    kv.push(("catalog", path(c)));
                }
            }
            DataSource::Planted(p) => {
                kv.push(("format", "planted".into()));
                kv.push(("planted_users", p.n_users.to_string()));
                kv.push(("planted_items", p.n_items.to_string()));
                kv.push(("planted_clusters", p.n_clusters.to_string()));
                kv.push(("planted_seed", p.seed.to_string()));
            }
        }
        kv.push(("l_tru", self.l_tru.map_or("none".into(), |l| l.to_string())));
        let mode = match self.llm_mode {
            LlmMode::Live => "live",
            LlmMode::Record => "record",
            LlmMode::Replay => "replay",
            LlmMode::Synthetic => "synthetic",
        };
        kv.push(("llm_mode", mode.into()));
        if let Some(f) = &self.fixtures {
            kv.push(("fixtures", path(f)));
        }
        kv.push(("model_id", self.model_id.clone()));
        kv.push(("max_angles", self.max_angles.to_string()));
        kv.push(("retries", self.retries.to_string()));
        kv.push(("concurrency", self.concurrency.to_string()));
        kv.push(("timeout_secs", self.timeout_secs.to_string()));
        if let Some(t) = &self.angle_template {
            kv.push(("angle_template", path(t)));
        }
        if let Some(t) = &self.categorization_template {
            kv.push(("categorization_template", path(t)));
        }
        if let Some(pr) = self.price {
            kv.push(("usd_per_1k_prompt", pr.usd_per_1k_prompt.to_string()));
            kv.push(("usd_per_1k_completion", pr.usd_per_1k_completion.to_string()));
        }
        kv.push(("text_embeddings", if self.text_embeddings { "hash" } else { "none" }.into()));
        kv.push(("embed_seed", self.embed_seed.to_string()));
        kv.push(("hypergraph", self.hypergraph.name().into()));
        match &self.hypergraph {
            GraphSource::Contextual { windows } => kv.push(("windows", join(windows))),
            GraphSource::Intent { intents, top_n } => {
                kv.push(("intents", intents.to_string()));
                kv.push(("intent_top_n", top_n.to_string()));
            }
            _ => {}
        }
        let t = &self.train;
        kv.push(("base_only", self.base_only.to_string()));
        kv.push(("dim", t.dim.to_string()));
        kv.push(("layers", t.layers.to_string()));
        kv.push(("activation", if t.relu { "relu" } else { "identity" }.into()));
        kv.push(("alpha", t.alpha.to_string()));
        kv.push(("beta", t.beta.to_string()));
        kv.push((
            "mu",
            match t.mu {
                MuPolicy::Median => "median".into(),
                MuPolicy::Fixed(m) => m.to_string(),
            },
        ));
        kv.push(("negatives", t.negatives.to_string()));
        kv.push(("epochs", t.epochs.to_string()));
        kv.push(("lr", t.learning_rate.to_string()));
        kv.push(("clip", t.clip.to_string()));
        kv.push(("patience", t.patience.to_string()));
        kv.push(("weight_refresh_every", t.weight_refresh_every.to_string()));
        kv.push(("batch_size", t.batch_size.to_string()));
        kv.push(("init_scale", t.init_scale.to_string()));
        kv.push(("decay_logit", t.decay_logit.to_string()));
        kv.push(("seeds", join(&self.seeds)));
        kv.push(("out", path(&self.out)));
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

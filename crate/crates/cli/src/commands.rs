use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use llmhg::dataset::{
    canonical_dump, catalog_dump, corpus_stats, leave_one_out, parse_amazon_csv, parse_canonical, parse_movielens,
    truncate_sequences, InteractionDataset, SplitDataset,
};
use llmhg::eval::{comparison_markdown, improvement_and_cir, sensitivity_sweep, sweep_csv, MetricReport};
use llmhg::hypergraph::MultiViewHypergraph;
use llmhg::llm::{
    account_cost, FixtureStore, HashEmbedder, HttpClient, LlmClient, PriceTable, ProfilerConfig, PromptTemplates,
    RecordingClient, ReplayClient, TextEmbedder, UsageRecord,
};
use llmhg::model::{ModelParams, Variant};
use llmhg::pipeline::{llm_profiles, synthetic_profiles, Experiment, GraphSource, SeedRun, UserProfile};
use llmhg::synthetic::planted_dataset;
use llmhg::train::loss_curve_csv;
use llmhg::Error;

use crate::config::{DataSource, LlmMode, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("training diverged for seeds {0:?}")]
    Diverged(Vec<u64>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::InvalidConfig(_)
                | Error::EmptyDataset
                | Error::Checkpoint(_) => 2,
                Error::FixtureMiss { .. } => 3,
                Error::TrainingDiverged { .. } => 4,
                _ => 1,
            },
            CliError::Diverged(_) => 4,
            CliError::UnknownUser(_) => 5,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))?;
    Ok(())
}

/// File-name-safe form of an id.
fn slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load_raw(cfg: &RunConfig) -> Result<InteractionDataset> {
    Ok(match &cfg.data {
        DataSource::MovieLens { ratings, movies } => parse_movielens(ratings, movies)?,
        DataSource::Amazon { interactions, metadata } => parse_amazon_csv(interactions, metadata.as_deref())?,
        DataSource::Canonical { sequences, catalog } => parse_canonical(sequences, catalog.as_deref())?,
        DataSource::Planted(p) => planted_dataset(p)?,
    })
}

fn load_dataset(cfg: &RunConfig, l_tru: Option<usize>) -> Result<InteractionDataset> {
    let raw = load_raw(cfg)?;
    Ok(match l_tru {
        Some(l) => truncate_sequences(&raw, l)?,
        None => raw,
    })
}

fn load_split(cfg: &RunConfig, l_tru: Option<usize>) -> Result<SplitDataset> {
    Ok(leave_one_out(&load_dataset(cfg, l_tru)?)?)
}

pub fn ingest(cfg: &RunConfig, stats_only: bool) -> Result<()> {
    let ds = load_dataset(cfg, cfg.l_tru)?;
    println!("{}", corpus_stats(&ds));
    if !stats_only {
        let dir = cfg.out.join("dataset");
        write_atomic(&dir.join("sequences.tsv"), canonical_dump(&ds).as_bytes())?;
        write_atomic(&dir.join("catalog.tsv"), catalog_dump(&ds.catalog).as_bytes())?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn profiler_config(cfg: &RunConfig) -> Result<ProfilerConfig> {
    let templates = match (&cfg.angle_template, &cfg.categorization_template) {
        (None, None) => PromptTemplates::default(),
        (Some(a), Some(c)) => PromptTemplates::from_files(a, c)?,
        _ => {
            return Err(Error::InvalidConfig(
                "angle_template and categorization_template must be given together".into(),
            )
            .into())
        }
    };
    Ok(ProfilerConfig {
        model_id: cfg.model_id.clone(),
        max_angles: cfg.max_angles,
        retries: cfg.retries,
        templates,
    })
}

fn fixture_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.fixtures
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("this llm_mode needs `fixtures`".into()).into())
}

/// Profiles every user of `split` according to the configured LLM mode.
fn build_profiles(cfg: &RunConfig, split: &SplitDataset) -> Result<(Vec<UserProfile>, Vec<UsageRecord>)> {
    if cfg.llm_mode == LlmMode::Synthetic {
        return Ok((synthetic_profiles(split)?, Vec::new()));
    }
    let pcfg = profiler_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let go = |client: &dyn LlmClient| pool.install(|| llm_profiles(client, &pcfg, split));
    let out = match cfg.llm_mode {
        LlmMode::Replay => {
            let store = FixtureStore::open(fixture_path(cfg)?)?;
            go(&ReplayClient::new(&store))?
        }
        LlmMode::Record => {
            let store = FixtureStore::open_for_append(fixture_path(cfg)?)?;
            go(&RecordingClient::new(HttpClient::from_env(timeout)?, &store))?
        }
        LlmMode::Live => go(&HttpClient::from_env(timeout)?)?,
        LlmMode::Synthetic => unreachable!("handled above"),
    };
    Ok(out)
}

fn embedder(cfg: &RunConfig) -> Option<HashEmbedder> {
    cfg.text_embeddings.then_some(HashEmbedder { seed: cfg.embed_seed })
}

fn profiles_jsonl(split: &SplitDataset, profiles: &[UserProfile]) -> String {
    let mut out = String::new();
    for p in profiles {
        let assignments: Vec<serde_json::Value> = p
            .assignments
            .iter()
            .map(|a| {
                let labels: Vec<serde_json::Value> = a
                    .labels
                    .iter()
                    .map(|(i, l)| serde_json::json!([split.catalog.get(*i).id, l]))
                    .collect();
                serde_json::json!({ "angle": a.angle, "labels": labels })
            })
            .collect();
        let line = serde_json::json!({
            "user_id": p.angles.user_id,
            "angles": p.angles.angles,
            "assignments": assignments,
        });
        let _ = writeln!(out, "{line}");
    }
    out
}

fn usage_csv(usages: &[UsageRecord]) -> String {
    let mut out = String::from("user_id,model_id,prompt_tokens,completion_tokens\n");
    for u in usages {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            u.user_id, u.model_id, u.usage.prompt_tokens, u.usage.completion_tokens
        );
    }
    out
}

/// Mean per-user spend, when prices are configured and the LLM was used.
fn per_user_cost(cfg: &RunConfig, usages: &[UsageRecord]) -> Result<Option<f64>> {
    match cfg.price {
        Some(price) if !usages.is_empty() => {
            let table = PriceTable::default().with(&cfg.model_id, price);
            Ok(Some(account_cost(usages, &table)?.per_user_usd))
        }
        _ => Ok(None),
    }
}

pub fn profile(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg, cfg.l_tru)?;
    let (profiles, usages) = build_profiles(cfg, &split)?;
    let emb = embedder(cfg);
    let graphs = llmhg::pipeline::profiled_graphs(
        &split,
        &profiles,
        emb.as_ref().map(|e| (e as &dyn TextEmbedder, cfg.train.dim)),
    )?;
    let dir = cfg.out.join("profile");
    write_atomic(&dir.join("profiles.jsonl"), profiles_jsonl(&split, &profiles).as_bytes())?;
    for (u, g) in split.users.iter().zip(&graphs) {
        let body = g.as_ref().map(|g| g.dump(&split.catalog)).unwrap_or_default();
        write_atomic(&dir.join("hypergraphs").join(format!("{}.tsv", slug(&u.user_id))), body.as_bytes())?;
    }
    write_atomic(&dir.join("usage.csv"), usage_csv(&usages).as_bytes())?;
    if let Some(price) = cfg.price.filter(|_| !usages.is_empty()) {
        let table = PriceTable::default().with(&cfg.model_id, price);
        let cost = account_cost(&usages, &table)?;
        let text = format!(
            "total_usd = {}\nper_user_usd = {}\nusers = {}\n",
            cost.total_usd,
            cost.per_user_usd,
            cost.by_user.len()
        );
        write_atomic(&dir.join("cost.txt"), text.as_bytes())?;
    }
    let with_edges = graphs.iter().filter(|g| g.is_some()).count();
    println!("profiled {} users; {} with hypergraph edges", split.users.len(), with_edges);
    println!("requests {}", usages.len());
    Ok(())
}

fn run_name(cfg: &RunConfig) -> &'static str {
    if cfg.base_only {
        "base-only"
    } else {
        cfg.hypergraph.name()
    }
}

fn run_experiment(
    cfg: &RunConfig,
    split: &SplitDataset,
    profiles: Option<&[UserProfile]>,
) -> Result<(MetricReport, Vec<SeedRun>)> {
    let emb = embedder(cfg);
    let exp = Experiment {
        split,
        source: cfg.hypergraph.clone(),
        profiles,
        embedder: emb.as_ref().map(|e| e as &dyn TextEmbedder),
        train: cfg.train,
    };
    Ok(exp.run(&cfg.seeds)?)
}

fn write_run(dir: &Path, cfg: &RunConfig, report: &MetricReport, runs: &[SeedRun]) -> Result<()> {
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    for r in runs {
        write_atomic(
            &dir.join(format!("seed-{}.ckpt", r.seed)),
            &r.outcome.params.to_checkpoint_bytes(),
        )?;
        write_atomic(
            &dir.join(format!("seed-{}.loss.csv", r.seed)),
            loss_curve_csv(&r.outcome.curve).as_bytes(),
        )?;
    }
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

fn print_report(name: &str, report: &MetricReport) {
    let m = report.mean;
    println!(
        "{name}: HR@5 {:.4}  HR@10 {:.4}  NDCG@5 {:.4}  NDCG@10 {:.4}  ({} seeds)",
        m.hr5,
        m.hr10,
        m.ndcg5,
        m.ndcg10,
        report.per_seed.len()
    );
}

pub fn train_eval(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg, cfg.l_tru)?;
    let runs_dir = cfg.out.join("runs");

    let base_cfg = RunConfig {
        base_only: true,
        train: llmhg::train::TrainConfig {
            variant: Variant::BaseOnly,
            ..cfg.train
        },
        ..cfg.clone()
    };
    eprintln!("training base-only over {} seeds", cfg.seeds.len());
    let (base_report, base_runs) = run_experiment(&base_cfg, &split, None)?;
    write_run(&runs_dir.join("base-only"), &base_cfg, &base_report, &base_runs)?;
    print_report("base-only", &base_report);
    let mut failed = base_report.failed_seeds.clone();

    if !cfg.base_only {
        let name = run_name(cfg);
        let (profiles, usages) = if cfg.hypergraph == GraphSource::Profiled {
            let (p, u) = build_profiles(cfg, &split)?;
            (Some(p), u)
        } else {
            (None, Vec::new())
        };
        eprintln!("training {name} over {} seeds", cfg.seeds.len());
        let (report, runs) = run_experiment(cfg, &split, profiles.as_deref())?;
        let dir = runs_dir.join(name);
        write_run(&dir, cfg, &report, &runs)?;
        print_report(name, &report);

        let cost = per_user_cost(cfg, &usages)?;
        let mut md = comparison_markdown("base-only", &base_report.mean, &[(name.to_string(), report.mean)]);
        if let Ok(cmp) = improvement_and_cir(&base_report.mean, &report.mean, cost) {
            if let (Some(c), Some(cir)) = (cmp.cost_usd, cmp.cir) {
                let _ = write!(
                    md,
                    "\nPer-user LLM cost: ${c:.6}\n\nCIR (improvement % per USD): HR@5 {:.2}, HR@10 {:.2}, NDCG@5 {:.2}, NDCG@10 {:.2}\n",
                    cir.hr5, cir.hr10, cir.ndcg5, cir.ndcg10
                );
            }
        }
        write_atomic(&dir.join("comparison.md"), md.as_bytes())?;
        print!("{md}");
        failed.extend(&report.failed_seeds);
    }
    if !failed.is_empty() {
        failed.sort_unstable();
        failed.dedup();
        return Err(CliError::Diverged(failed));
    }
    Ok(())
}

fn parse_grid<T: std::str::FromStr>(key: &str, values: &str) -> Result<Vec<T>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad {key} grid value `{v}`")).into())
        })
        .collect()
}

pub fn sweep(cfg: &RunConfig, grid: &[String]) -> Result<()> {
    let mut l_trus = None;
    let mut betas = None;
    for g in grid {
        let (k, v) = g
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("sweep axis `{g}` is not key=values")))?;
        match k.trim() {
            "l_tru" => l_trus = Some(parse_grid::<usize>("l_tru", v)?),
            "beta" => betas = Some(parse_grid::<f64>("beta", v)?),
            other => return Err(Error::InvalidConfig(format!("cannot sweep `{other}`")).into()),
        }
    }
    let l_trus = match l_trus {
        Some(l) => l,
        None => {
            let longest = load_raw(cfg)?.users.iter().map(|u| u.items.len()).max().unwrap_or(0);
            vec![cfg.l_tru.unwrap_or(longest)]
        }
    };
    let betas = betas.unwrap_or(vec![cfg.train.beta]);
    if l_trus.iter().any(|&l| l < 3) || betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::InvalidConfig("sweep needs l_tru >= 3 and beta in [0, 1]".into()).into());
    }

    let mut prepared = Vec::new();
    for &l in &l_trus {
        let split = load_split(cfg, Some(l))?;
        let profiles = if cfg.hypergraph == GraphSource::Profiled && !cfg.base_only {
            Some(build_profiles(cfg, &split)?.0)
        } else {
            None
        };
        prepared.push((l, split, profiles));
    }
    let points = sensitivity_sweep(&l_trus, &betas, |l, beta| {
        let (_, split, profiles) = prepared.iter().find(|p| p.0 == l).expect("prepared every l_tru");
        let point_cfg = RunConfig {
            l_tru: Some(l),
            train: llmhg::train::TrainConfig { beta, ..cfg.train },
            ..cfg.clone()
        };
        eprintln!("sweep point l_tru={l} beta={beta}");
        run_experiment(&point_cfg, split, profiles.as_deref())
            .map(|r| r.0)
            .map_err(|e| match e {
                CliError::Core(e) => e,
                other => Error::InvalidConfig(other.to_string()),
            })
    })?;
    let dir = cfg.out.join("sweeps").join(run_name(cfg));
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let csv = sweep_csv(&points);
    write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    let failed: Vec<u64> = points.iter().flat_map(|p| p.report.failed_seeds.clone()).collect();
    if !failed.is_empty() {
        return Err(CliError::Diverged(failed));
    }
    Ok(())
}

/// One user's hypergraph for a run, rebuilt the way training built it.
fn user_graph(cfg: &RunConfig, split: &SplitDataset, idx: usize, seed: u64) -> Result<Option<MultiViewHypergraph>> {
    if cfg.base_only {
        return Ok(None);
    }
    let emb = embedder(cfg);
    if cfg.hypergraph == GraphSource::Profiled {
        let one = SplitDataset {
            users: vec![split.users[idx].clone()],
            catalog: split.catalog.clone(),
        };
        let (profiles, _) = build_profiles(cfg, &one)?;
        let graphs = llmhg::pipeline::profiled_graphs(
            &one,
            &profiles,
            emb.as_ref().map(|e| (e as &dyn TextEmbedder, cfg.train.dim)),
        )?;
        return Ok(graphs.into_iter().next().flatten());
    }
    let exp = Experiment {
        split,
        source: cfg.hypergraph.clone(),
        profiles: None,
        embedder: None,
        train: cfg.train,
    };
    Ok(exp.graphs(seed)?.swap_remove(idx))
}

pub fn inspect(run_dir: &Path, user: &str, seed: Option<u64>) -> Result<()> {
    print!("{}", inspect_text(run_dir, user, seed)?);
    Ok(())
}

/// The text printed by `inspect`. Weights use shortest round-trip formatting.
pub fn inspect_text(run_dir: &Path, user: &str, seed: Option<u64>) -> Result<String> {
    let cfg = RunConfig::load(Some(&run_dir.join("config.txt")), &[])?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let ckpt_path: PathBuf = run_dir.join(format!("seed-{seed}.ckpt"));
    let bytes = fs::read(&ckpt_path).map_err(|e| Error::Io {
        path: ckpt_path.clone(),
        source: e,
    })?;
    let params = ModelParams::from_checkpoint_bytes(&bytes)?;
    let split = load_split(&cfg, cfg.l_tru)?;
    let idx = split
        .users
        .iter()
        .position(|u| u.user_id == user)
        .ok_or_else(|| CliError::UnknownUser(user.to_string()))?;
    let u = &split.users[idx];
    let history = u.test_history();
    let catalog = &split.catalog;

    let mut out = String::new();
    let _ = writeln!(out, "user {user}  run {}  seed {seed}", run_name(&cfg));
    let ids: Vec<&str> = history.iter().map(|&i| catalog.get(i).id.as_str()).collect();
    let _ = writeln!(out, "history {}", ids.join(" "));
    let _ = writeln!(out, "held-out test item {}", catalog.get(u.test).id);
    let Some(graph) = user_graph(&cfg, &split, idx, seed)? else {
        let _ = writeln!(out, "no hypergraph for this user");
        return Ok(out);
    };
    let _ = writeln!(out, "views {}", graph.views.join(", "));
    let (protos, weights) = params.edge_weights(&cfg.train.model_config(), &history, &graph)?;
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let _ = writeln!(out, "\nedge\tlabel\tweight\tview\tlambda\tmembers");
    for &e in &order {
        let edge = &graph.edges[e];
        let members: Vec<&str> = edge
            .members
            .iter()
            .map(|&m| catalog.get(graph.vertices[m]).id.as_str())
            .collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            edge.id,
            edge.label,
            weights[e],
            edge.view,
            protos[e].lambda,
            members.join(",")
        );
    }
    let _ = writeln!(out, "\nprototypes");
    for &e in &order {
        let p: Vec<String> = protos[e].p.iter().map(|x| format!("{x:.4}")).collect();
        let _ = writeln!(out, "{}\t{}", graph.edges[e].id, p.join(" "));
    }
    Ok(out)
}

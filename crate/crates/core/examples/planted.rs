use std::time::Instant;

use llmhg::dataset::leave_one_out;
use llmhg::llm::HashEmbedder;
use llmhg::model::Variant;
use llmhg::pipeline::{initial_report, synthetic_profiles, Experiment, GraphSource};
use llmhg::synthetic::{planted_dataset, PlantedConfig};
use llmhg::train::TrainConfig;

fn main() -> llmhg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: Vec<u64> = (1..=5).collect();
    let ds = planted_dataset(&PlantedConfig::default())?;
    let split = leave_one_out(&ds)?;
    let profiles = synthetic_profiles(&split)?;
    let embedder = HashEmbedder { seed: 0 };
    let mut cfg = TrainConfig::default();
    let mut only: Vec<String> = Vec::new();
    for a in &args {
        let (k, v) = a.split_once('=').expect("key=value");
        match k {
            "lr" => cfg.learning_rate = v.parse().unwrap(),
            "dim" => cfg.dim = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "negatives" => cfg.negatives = v.parse().unwrap(),
            "scale" => cfg.init_scale = v.parse().unwrap(),
            "decay" => cfg.decay_logit = v.parse().unwrap(),
            "beta" => cfg.beta = v.parse().unwrap(),
            "alpha" => cfg.alpha = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "relu" => cfg.relu = v.parse().unwrap(),
            "clip" => cfg.clip = v.parse().unwrap(),
            "patience" => cfg.patience = v.parse().unwrap(),
            "only" => only = v.split(',').map(String::from).collect(),
            _ => panic!("unknown key {k}"),
        }
    }
    let runs: Vec<(&str, GraphSource, Variant, bool)> = vec![
        ("base-only", GraphSource::Profiled, Variant::BaseOnly, false),
        ("llm+text", GraphSource::Profiled, Variant::Full, true),
        ("llm", GraphSource::Profiled, Variant::Full, false),
        ("transition", GraphSource::Transition, Variant::Full, false),
        ("intent", GraphSource::Intent { intents: 8, top_n: 5 }, Variant::Full, false),
    ];
    for (name, source, variant, text) in runs {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let t = Instant::now();
        let exp = Experiment {
            split: &split,
            source,
            profiles: Some(&profiles),
            embedder: if text { Some(&embedder) } else { None },
            train: TrainConfig { variant, ..cfg },
        };
        let (report, seed_runs) = exp.run(&seeds)?;
        let init = initial_report(&seed_runs);
        let epochs: Vec<usize> = seed_runs.iter().map(|r| r.outcome.best_epoch).collect();
        println!(
            "{name:12} hr10={:.4} ndcg10={:.4} init_hr10={:.4} best_epochs={epochs:?} {:.1}s",
            report.mean.hr10,
            report.mean.ndcg10,
            init.mean.hr10,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

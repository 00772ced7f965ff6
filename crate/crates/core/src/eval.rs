//! Full-catalog ranking metrics, multi-seed aggregation, improvement / CIR
//! arithmetic and sensitivity grids.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// `1 + |{v ≠ target : score(v) ≥ score(target)}|`, so ties count against
/// the target.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&s) = scores.get(target) else {
        return Err(Error::UnknownItem(format!(
            "target {target} outside a catalog of {}",
            scores.len()
        )));
    };
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(v, &x)| v != target && x >= s)
        .count())
}

pub fn hr_at_n(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_n(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= n)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    total / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSet {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 4] = ["hr@5", "hr@10", "ndcg@5", "ndcg@10"];

    pub fn from_ranks(ranks: &[usize]) -> Self {
        Self {
            hr5: hr_at_n(ranks, 5),
            hr10: hr_at_n(ranks, 10),
            ndcg5: ndcg_at_n(ranks, 5),
            ndcg10: ndcg_at_n(ranks, 10),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.hr5, self.hr10, self.ndcg5, self.ndcg10]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            hr5: v[0],
            hr10: v[1],
            ndcg5: v[2],
            ndcg10: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Sorted by seed.
    pub per_seed: Vec<(u64, MetricSet)>,
    /// Mean over the seeds that completed.
    pub mean: MetricSet,
    /// Seeds whose training diverged.
    pub failed_seeds: Vec<u64>,
}

impl MetricReport {
    pub fn from_runs(mut runs: Vec<(u64, MetricSet)>, mut failed_seeds: Vec<u64>) -> Self {
        runs.sort_by_key(|r| r.0);
        failed_seeds.sort_unstable();
        let mut sums = [0.0; 4];
        for (_, m) in &runs {
            for (s, v) in sums.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let k = runs.len().max(1) as f64;
        Self {
            mean: MetricSet::from_values(sums.map(|s| s / k)),
            per_seed: runs,
            failed_seeds,
        }
    }

    pub fn incomplete(&self) -> bool {
        !self.failed_seeds.is_empty()
    }

    /// `metric,seed,value`, then one `metric,mean,value` row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,seed,value\n");
        for (seed, m) in &self.per_seed {
            for (name, v) in MetricSet::NAMES.iter().zip(m.values()) {
                let _ = writeln!(out, "{name},{seed},{v}");
            }
        }
        for (name, v) in MetricSet::NAMES.iter().zip(self.mean.values()) {
            let _ = writeln!(out, "{name},mean,{v}");
        }
        out
    }
}

/// Runs `run` once per seed (in parallel) and aggregates. A seed that
/// diverges marks the report incomplete; any other error aborts.
pub fn run_seeds<F>(seeds: &[u64], run: F) -> Result<MetricReport>
where
    F: Fn(u64) -> Result<MetricSet> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let outcomes: Vec<(u64, Result<MetricSet>)> = seeds.par_iter().map(|&s| (s, run(s))).collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(m) => runs.push((seed, m)),
            Err(Error::TrainingDiverged { .. }) => failed.push(seed),
            Err(e) => return Err(e),
        }
    }
    Ok(MetricReport::from_runs(runs, failed))
}

pub fn improvement_pct(baseline: f64, treatment: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "improvement needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (treatment - baseline) / baseline)
}

/// Improvement percentage per unit of per-user LLM spend.
pub fn cost_improvement_ratio(improvement_pct: f64, cost_usd: f64) -> Result<f64> {
    if !(cost_usd > 0.0) {
        return Err(Error::InvalidConfig(format!("CIR needs a positive cost, got {cost_usd}")));
    }
    Ok(improvement_pct / cost_usd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub baseline: MetricSet,
    pub treatment: MetricSet,
    /// Percent change per metric.
    pub improvement: MetricSet,
    pub cost_usd: Option<f64>,
    pub cir: Option<MetricSet>,
}

pub fn improvement_and_cir(
    baseline: &MetricSet,
    treatment: &MetricSet,
    cost_usd: Option<f64>,
) -> Result<ComparisonReport> {
    let b = baseline.values();
    let t = treatment.values();
    let mut imp = [0.0; 4];
    for k in 0..4 {
        imp[k] = improvement_pct(b[k], t[k])?;
    }
    let cir = match cost_usd {
        Some(c) => {
            let mut r = [0.0; 4];
            for k in 0..4 {
                r[k] = cost_improvement_ratio(imp[k], c)?;
            }
            Some(MetricSet::from_values(r))
        }
        None => None,
    };
    Ok(ComparisonReport {
        baseline: *baseline,
        treatment: *treatment,
        improvement: MetricSet::from_values(imp),
        cost_usd,
        cir,
    })
}

/// Markdown table with the baseline value and the signed change of each
/// treatment column.
pub fn comparison_markdown(baseline_name: &str, baseline: &MetricSet, columns: &[(String, MetricSet)]) -> String {
    let mut out = format!("| Metric | {baseline_name} |");
    for (name, _) in columns {
        let _ = write!(out, " {name} | Imp. |");
    }
    out.push_str("\n|---|---|");
    for _ in columns {
        out.push_str("---|---|");
    }
    out.push('\n');
    for (k, metric) in MetricSet::NAMES.iter().enumerate() {
        let b = baseline.values()[k];
        let _ = write!(out, "| {metric} | {b:.4} |");
        for (_, m) in columns {
            let v = m.values()[k];
            let imp = match improvement_pct(b, v) {
                Ok(p) => format!("{p:+.2} %"),
                Err(_) => "n/a".to_string(),
            };
            let _ = write!(out, " {v:.4} | {imp} |");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub l_tru: usize,
    pub beta: f64,
    pub report: MetricReport,
}

/// One run per `(l_tru, beta)` pair, in grid order.
pub fn sensitivity_sweep<F>(l_trus: &[usize], betas: &[f64], run: F) -> Result<Vec<SweepPoint>>
where
    F: Fn(usize, f64) -> Result<MetricReport>,
{
    if l_trus.is_empty() || betas.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be nonempty".into()));
    }
    let mut points = Vec::with_capacity(l_trus.len() * betas.len());
    for &l_tru in l_trus {
        for &beta in betas {
            points.push(SweepPoint {
                l_tru,
                beta,
                report: run(l_tru, beta)?,
            });
        }
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("l_tru,beta,hr@5,hr@10,ndcg@5,ndcg@10\n");
    for p in points {
        let m = p.report.mean;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.l_tru, p.beta, m.hr5, m.hr10, m.ndcg5, m.ndcg10
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_target(&[0.5; 100], 17).unwrap(), 100);
        assert!(matches!(rank_target(&[0.5; 3], 3), Err(Error::UnknownItem(_))));
    }

    #[test]
    fn metric_examples() {
        assert!((hr_at_n(&[3, 7, 12], 5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hr_at_n(&[1], 10), 1.0);
        assert_eq!(ndcg_at_n(&[1], 10), 1.0);
        assert_eq!(ndcg_at_n(&[3], 10), 0.5);
        assert!((ndcg_at_n(&[1, 3, 20], 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn improvement_examples() {
        let imp = improvement_pct(0.2840, 0.3058).unwrap();
        assert!((imp - 7.67).abs() < 0.01);
        assert!((cost_improvement_ratio(7.67, 0.0141).unwrap() - 543.97).abs() < 0.01);
        assert_eq!(improvement_pct(0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(cost_improvement_ratio(1.0, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn seeds_aggregate_and_flag_divergence() {
        let m = |v: f64| MetricSet {
            hr5: v,
            hr10: v,
            ndcg5: v / 2.0,
            ndcg10: v / 2.0,
        };
        let report = run_seeds(&[3, 1, 2], |s| {
            if s == 2 {
                Err(Error::TrainingDiverged { epoch: 4 })
            } else {
                Ok(m(s as f64 / 10.0))
            }
        })
        .unwrap();
        assert_eq!(report.per_seed.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3]);
        assert!(report.incomplete());
        assert!((report.mean.hr10 - 0.2).abs() < 1e-15);
        let single = run_seeds(&[9], |_| Ok(m(0.4))).unwrap();
        assert_eq!(single.mean, m(0.4));
        assert!(run_seeds(&[], |_| Ok(m(0.0))).is_err());
    }

    #[test]
    fn csv_layouts() {
        let r = MetricReport::from_runs(vec![(1, MetricSet::default())], vec![]);
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,seed,value\nhr@5,1,0\n"));
        assert!(csv.ends_with("ndcg@10,mean,0\n"));
        let pts = sensitivity_sweep(&[5, 10], &[0.0, 1.0], |_, _| Ok(r.clone())).unwrap();
        assert_eq!(sweep_csv(&pts).lines().count(), 5);
    }

    #[test]
    fn markdown_has_signed_improvement() {
        let b = MetricSet {
            hr5: 0.2,
            hr10: 0.2840,
            ndcg5: 0.1,
            ndcg10: 0.15,
        };
        let t = MetricSet { hr10: 0.3058, ..b };
        let md = comparison_markdown("base", &b, &[("hg".into(), t)]);
        assert!(md.contains("| hr@10 | 0.2840 | 0.3058 | +7.68 % |"), "{md}");
    }
}

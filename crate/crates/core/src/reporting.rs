//! Per-layer statistics, discovery curves, slice exports and strategy
//! benchmarks. Everything except the benchmark is a pure function of
//! journal records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::oracle::{PlantedLandscape, SimulatedOracle};
use crate::search::{run_search, EvaluationRecord, FrontierOrdering, SearchConfig, SearchContext, SearchError, Verdict};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("benchmark needs at least one seed and one strategy")]
    EmptyBenchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Nodes with a verdict.
    pub explored: u64,
    pub errors: u64,
    pub unresolved: u64,
    pub density: f64,
    /// Size of the unpruned node space at this layer.
    pub total_possible: u64,
    /// `1 - (explored + unresolved) / total_possible`.
    pub pruned_fraction: f64,
}

/// Number of layer-`layer` nodes: per entity, the elementary symmetric
/// polynomial of degree `layer - 1` over its per-subcategory counts of
/// valid attributes.
pub fn total_possible_at_layer(corpus: &Corpus, layer: usize) -> u64 {
    if layer == 0 {
        return 0;
    }
    let k = layer - 1;
    let mut total: u64 = 0;
    for e in corpus.entity_ids() {
        let mut per_sub: BTreeMap<&str, u64> = BTreeMap::new();
        for a in corpus.valid_attributes(e).unwrap_or(&[]) {
            if let Some(t) = corpus.attribute(a) {
                *per_sub.entry(t.subcategory.as_str()).or_default() += 1;
            }
        }
        // e[j] = elementary symmetric polynomial of degree j
        let mut esp = vec![0u64; k + 1];
        esp[0] = 1;
        for c in per_sub.values() {
            for j in (1..=k).rev() {
                esp[j] += esp[j - 1] * c;
            }
        }
        total += esp[k];
    }
    total
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn layer_stats(records: &[EvaluationRecord], corpus: &Corpus) -> Vec<LayerStats> {
    let mut by_layer: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let e = by_layer.entry(r.layer).or_default();
        match r.verdict {
            Some(Verdict::Success) => e.0 += 1,
            Some(Verdict::Error) => {
                e.0 += 1;
                e.1 += 1;
            }
            None => e.2 += 1,
        }
    }
    by_layer
        .into_iter()
        .map(|(layer, (explored, errors, unresolved))| {
            let total_possible = total_possible_at_layer(corpus, layer);
            LayerStats {
                layer,
                explored,
                errors,
                unresolved,
                density: ratio(errors, explored),
                total_possible,
                pruned_fraction: 1.0 - ratio(explored + unresolved, total_possible),
            }
        })
        .collect()
}

/// Totals across layers, with `layer` set to 0.
pub fn summary_stats(stats: &[LayerStats]) -> LayerStats {
    let sum = |f: fn(&LayerStats) -> u64| stats.iter().map(f).sum::<u64>();
    let (explored, errors, unresolved, total) =
        (sum(|s| s.explored), sum(|s| s.errors), sum(|s| s.unresolved), sum(|s| s.total_possible));
    LayerStats {
        layer: 0,
        explored,
        errors,
        unresolved,
        density: ratio(errors, explored),
        total_possible: total,
        pruned_fraction: 1.0 - ratio(explored + unresolved, total),
    }
}

/// `errors / explored` as a percentage rounded half-up to one decimal.
pub fn density_percent(errors: u64, explored: u64) -> String {
    if explored == 0 {
        return "n/a".to_string();
    }
    let tenths = (u128::from(errors) * 2000 + u128::from(explored)) / (2 * u128::from(explored));
    format!("{}.{}%", tenths / 10, tenths % 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub evaluations: u64,
    pub failures: u64,
}

/// Cumulative failures against evaluations, counting only records at
/// `layer` when given. One point per evaluation.
pub fn discovery_curve(records: &[EvaluationRecord], layer: Option<usize>) -> Vec<CurvePoint> {
    let mut failures = 0;
    records
        .iter()
        .filter(|r| layer.is_none_or(|l| r.layer == l))
        .enumerate()
        .map(|(i, r)| {
            failures += u64::from(r.is_error());
            CurvePoint { evaluations: i as u64 + 1, failures }
        })
        .collect()
}

/// Evaluations (counted within `layer`) until `fraction` of that layer's
/// failures have been found. `None` when the layer has no failures.
pub fn evaluations_to_fraction(records: &[EvaluationRecord], layer: usize, fraction: f64) -> Option<u64> {
    let curve = discovery_curve(records, Some(layer));
    let total = curve.last()?.failures;
    if total == 0 {
        return None;
    }
    let target = ((fraction * total as f64).ceil() as u64).max(1);
    curve.iter().find(|p| p.failures >= target).map(|p| p.evaluations)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceFilter {
    pub verdict: Option<Verdict>,
    pub layer: Option<usize>,
    pub entity: Option<String>,
}

/// Records with a verdict that pass the filter, by ascending success rate
/// then canonical id.
pub fn export_slices(records: &[EvaluationRecord], filter: &SliceFilter) -> Vec<EvaluationRecord> {
    let mut out: Vec<EvaluationRecord> = records
        .iter()
        .filter(|r| r.verdict.is_some())
        .filter(|r| filter.verdict.is_none_or(|v| r.verdict == Some(v)))
        .filter(|r| filter.layer.is_none_or(|l| r.layer == l))
        .filter(|r| filter.entity.as_deref().is_none_or(|e| r.node.split('+').next() == Some(e)))
        .cloned()
        .collect();
    out.sort_by(|a, b| {
        let (ra, rb) = (a.success_rate.unwrap_or(0.0), b.success_rate.unwrap_or(0.0));
        ra.total_cmp(&rb).then_with(|| a.node.cmp(&b.node))
    });
    out
}

/// Markdown digest: layer table plus the lowest-rate error slices.
pub fn digest_markdown(stats: &[LayerStats], records: &[EvaluationRecord], corrupt_lines: usize, top: usize) -> String {
    let mut md = String::from("# Error slice digest\n\n");
    md.push_str("| Layer | Error slices | Explored nodes | Error density | Unresolved | Unpruned space | Pruned |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    let total = summary_stats(stats);
    for s in stats.iter().chain(std::iter::once(&total)) {
        let label = if s.layer == 0 { "Summary".to_string() } else { format!("Layer {}", s.layer) };
        let _ = writeln!(
            md,
            "| {label} | {} | {} | {} | {} | {} | {} |",
            s.errors,
            s.explored,
            density_percent(s.errors, s.explored),
            s.unresolved,
            s.total_possible,
            density_percent(s.total_possible - (s.explored + s.unresolved).min(s.total_possible), s.total_possible),
        );
    }
    if corrupt_lines > 0 {
        let _ = writeln!(md, "\n{corrupt_lines} corrupt journal line(s) were skipped.");
    }
    let worst = export_slices(records, &SliceFilter { verdict: Some(Verdict::Error), ..Default::default() });
    if !worst.is_empty() {
        md.push_str("\n## Lowest success rates\n\n| Node | Layer | Success rate | Prompt |\n|---|---:|---:|---|\n");
        for r in worst.iter().take(top) {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                r.node,
                r.layer,
                density_percent(u64::from(r.n_correct), u64::from(r.n_checks)),
                r.prompt.replace('|', "\\|")
            );
        }
    }
    md
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize)]
struct CurveRow<'a> {
    strategy: &'a str,
    seed: Option<u64>,
    layer: String,
    evaluations: u64,
    failures: u64,
}

fn write_curves<'a>(path: &Path, curves: impl IntoIterator<Item = (&'a str, Option<u64>, Option<usize>, Vec<CurvePoint>)>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    for (strategy, seed, layer, points) in curves {
        let layer = layer.map_or_else(|| "all".to_string(), |l| l.to_string());
        for p in points {
            w.serialize(CurveRow { strategy, seed, layer: layer.clone(), evaluations: p.evaluations, failures: p.failures })?;
        }
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

/// Write layer_stats.csv, discovery_curve.csv, slices.jsonl and digest.md.
pub fn write_report(dir: &Path, records: &[EvaluationRecord], corpus: &Corpus, corrupt_lines: usize) -> Result<Vec<LayerStats>, ReportError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let stats = layer_stats(records, corpus);

    let path = dir.join("layer_stats.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for s in &stats {
        w.serialize(s)?;
    }
    w.flush().map_err(io(&path))?;

    let mut curves = vec![("journal", None, None, discovery_curve(records, None))];
    for s in &stats {
        curves.push(("journal", None, Some(s.layer), discovery_curve(records, Some(s.layer))));
    }
    write_curves(&dir.join("discovery_curve.csv"), curves)?;

    let path = dir.join("slices.jsonl");
    let mut body = String::new();
    for r in export_slices(records, &SliceFilter { verdict: Some(Verdict::Error), ..Default::default() }) {
        body.push_str(&serde_json::to_string(&r).expect("record serializes"));
        body.push('\n');
    }
    std::fs::write(&path, body).map_err(io(&path))?;

    let path = dir.join("digest.md");
    std::fs::write(&path, digest_markdown(&stats, records, corrupt_lines, 20)).map_err(io(&path))?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: FrontierOrdering,
    pub seed: u64,
    /// Evaluations within the target layer to reach half of its failures.
    pub evaluations_to_half: Option<u64>,
    pub layer_failures: u64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub layer: usize,
    pub runs: Vec<StrategyRun>,
    /// Median evaluations-to-half per strategy, over seeds with failures.
    pub medians: BTreeMap<String, f64>,
    /// median(random) / median(prioritized), when both ran.
    pub speedup_at_half: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn strategy_name(s: FrontierOrdering) -> &'static str {
    match s {
        FrontierOrdering::Canonical => "canonical",
        FrontierOrdering::Random => "random",
        FrontierOrdering::Prioritized => "prioritized",
    }
}

/// Run the same search under each ordering for every seed (landscape
/// noise and run seed both set to the seed) and compare discovery speed in
/// `layer` (default: `max_depth`). Runs execute in parallel.
pub fn benchmark_strategies(
    corpus: &Arc<Corpus>,
    landscape: &PlantedLandscape,
    base: &SearchConfig,
    strategies: &[FrontierOrdering],
    seeds: &[u64],
    layer: Option<usize>,
) -> Result<BenchmarkResult, ReportError> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(ReportError::EmptyBenchmark);
    }
    let layer = layer.unwrap_or(base.max_depth);
    let jobs: Vec<(FrontierOrdering, u64)> =
        strategies.iter().flat_map(|s| seeds.iter().map(move |seed| (*s, *seed))).collect();
    let results: Vec<Result<StrategyRun, ReportError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(strategy, seed)| {
                scope.spawn(move || {
                    let oracle = SimulatedOracle::new(landscape.with_seed(seed), corpus.clone());
                    let config = SearchConfig { seed, ordering: strategy, workers: 1, budget: None, ..base.clone() };
                    let ctx = SearchContext::new(corpus, &config, &oracle)?;
                    let out = run_search(&ctx, None)?;
                    let curve = discovery_curve(&out.records, Some(layer));
                    Ok(StrategyRun {
                        strategy,
                        seed,
                        evaluations_to_half: evaluations_to_fraction(&out.records, layer, 0.5),
                        layer_failures: curve.last().map_or(0, |p| p.failures),
                        curve,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("benchmark worker panicked")).collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut medians = BTreeMap::new();
    for s in strategies {
        let mut v: Vec<f64> =
            runs.iter().filter(|r| r.strategy == *s).filter_map(|r| r.evaluations_to_half).map(|e| e as f64).collect();
        if let Some(m) = median(&mut v) {
            medians.insert(strategy_name(*s).to_string(), m);
        }
    }
    let speedup_at_half = match (medians.get("random"), medians.get("prioritized")) {
        (Some(r), Some(p)) if *p > 0.0 => Some(r / p),
        _ => None,
    };
    Ok(BenchmarkResult { layer, runs, medians, speedup_at_half })
}

/// Write discovery_curve.csv and benchmark.json for a benchmark.
pub fn write_benchmark(dir: &Path, result: &BenchmarkResult) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    write_curves(
        &dir.join("discovery_curve.csv"),
        result.runs.iter().map(|r| (strategy_name(r.strategy), Some(r.seed), Some(result.layer), r.curve.clone())),
    )?;
    let path = dir.join("benchmark.json");
    let mut summary = result.clone();
    summary.runs.iter_mut().for_each(|r| r.curve.clear());
    let body = serde_json::to_string_pretty(&summary).expect("benchmark serializes") + "\n";
    std::fs::write(&path, body).map_err(io(&path))?;
    Ok(())
}

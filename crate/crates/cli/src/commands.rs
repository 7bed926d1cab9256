use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atlas_core::attribution::{attribute_slices, default_alpha_grid, scarcity_curve, AttributionError, CaptionIndex};
use atlas_core::corpus::{measure_coverage, parse_terms_tsv, CoverageMode};
use atlas_core::oracle::PlantedLandscape;
use atlas_core::reporting::{benchmark_strategies, density_percent, write_benchmark, write_report};
use atlas_core::search::{
    read_journal, resume, run_search, FrontierOrdering, JournalContents, ReadMode, SearchError, SearchOutcome,
};

use crate::config::{read_corpus, sibling_config, RunConfig, Runtime, JOURNAL_FILE, RUN_CONFIG_FILE};
use crate::{
    invalid, AttributeArgs, BenchArgs, Cli, Command, CorpusCommand, PredictorCommand, ReportArgs, ResumeArgs, SearchArgs,
    SearchFlags,
};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Search(args) => search(base, args),
        Command::Resume(args) => resume_cmd(args),
        Command::Attribute(args) => attribute(args),
        Command::Report(args) => report(args),
        Command::Bench(args) => bench(base, args),
        Command::Predictor(PredictorCommand::Eval { journal, split_at, corpus, out }) => {
            predictor_eval(&journal, split_at, corpus, out.as_deref())
        }
    }
}

fn corpus(cmd: CorpusCommand) -> Result<ExitCode> {
    match cmd {
        CorpusCommand::Validate { path } => {
            let c = read_corpus(&path)?;
            let s = c.stats();
            println!(
                "ok: {} entities, {} attributes, {} valid pairs",
                s.entities.terms, s.attributes.terms, s.valid_pairs
            );
        }
        CorpusCommand::Stats { path } => {
            let c = read_corpus(&path)?;
            println!("{}", serde_json::to_string_pretty(&c.stats())?);
        }
        CorpusCommand::Coverage { path, terms, distinct } => {
            let c = read_corpus(&path)?;
            let raw = std::fs::read_to_string(&terms)
                .with_context(|| format!("reading {}", terms.display()))
                .map_err(invalid)?;
            let parsed = parse_terms_tsv(&raw).map_err(|e| invalid(anyhow::anyhow!("{}: {e}", terms.display())))?;
            let mode = if distinct { CoverageMode::DistinctTerms } else { CoverageMode::FrequencyWeighted };
            let name = terms.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            println!("{}", serde_json::to_string_pretty(&measure_coverage(&c, &name, &parsed, mode))?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_flags(config: &mut RunConfig, f: &SearchFlags) {
    let s = &mut config.search;
    macro_rules! set {
        ($($field:ident).+ <- $flag:ident) => {
            if let Some(v) = f.$flag.clone() {
                s.$($field).+ = v;
            }
        };
    }
    set!(tau <- tau);
    set!(images_per_node <- images_per_node);
    set!(max_depth <- max_depth);
    set!(seed <- seed);
    set!(retrain_interval <- retrain_interval);
    set!(retries <- retries);
    set!(workers <- workers);
    set!(predictor.learning_rate <- learning_rate);
    set!(predictor.epochs <- epochs);
}

fn search(mut config: RunConfig, args: SearchArgs) -> Result<ExitCode> {
    apply_flags(&mut config, &args.flags);
    if let Some(c) = args.corpus {
        config.corpus = Some(c);
    }
    if let Some(b) = args.oracle {
        config.oracle.backend = b;
    }
    if let Some(l) = args.landscape {
        config.oracle.landscape = Some(l);
    }
    if let Some(u) = args.oracle_url {
        config.oracle.url = Some(u);
    }
    if let Some(g) = args.grammar_url {
        config.grammar_url = Some(g);
    }
    if let Some(e) = args.embeddings {
        config.embeddings = Some(e);
    }
    if args.budget.is_some() {
        config.search.budget = args.budget;
    }
    if args.no_prioritizer {
        config.search.ordering = FrontierOrdering::Canonical;
    }
    if args.random_order {
        config.search.ordering = FrontierOrdering::Random;
    }
    if let Some(o) = args.out {
        config.out = Some(o);
    }
    if config.corpus.is_none() {
        return Err(invalid(anyhow::anyhow!("the following required argument was not provided: --corpus")));
    }
    config.absolutize()?;

    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let journal = out.join(JOURNAL_FILE);
    if journal.exists() {
        return Err(invalid(anyhow::anyhow!("{} already exists; use `atlas resume --journal {}`", journal.display(), journal.display())));
    }
    let runtime = Runtime::build(&config)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    config.save(&out.join(RUN_CONFIG_FILE))?;
    let ctx = runtime.context(config.grammar_url.as_deref())?;
    let outcome = run_search(&ctx, Some(&journal)).map_err(classify)?;
    finish(&outcome, &journal)
}

fn resume_cmd(args: ResumeArgs) -> Result<ExitCode> {
    let mut config = sibling_config(&args.journal)?.ok_or_else(|| {
        invalid(anyhow::anyhow!("no {RUN_CONFIG_FILE} next to {}", args.journal.display()))
    })?;
    if args.budget.is_some() {
        config.search.budget = args.budget;
    }
    if let Some(w) = args.workers {
        config.search.workers = w;
    }
    let runtime = Runtime::build(&config)?;
    let ctx = runtime.context(config.grammar_url.as_deref())?;
    let outcome = resume(&ctx, &args.journal).map_err(classify)?;
    finish(&outcome, &args.journal)
}

/// Hash mismatches and bad configs are the caller's fault; the rest are runtime failures.
fn classify(e: SearchError) -> anyhow::Error {
    match e {
        SearchError::HashMismatch { .. } | SearchError::Config(_) | SearchError::Corpus(_) => invalid(e),
        other => other.into(),
    }
}

fn finish(outcome: &SearchOutcome, journal: &Path) -> Result<ExitCode> {
    let s = &outcome.summary;
    println!("journal: {}", journal.display());
    println!("config hash: {}", s.config_hash);
    println!("{:>5} {:>9} {:>9} {:>8} {:>8} {:>10}", "layer", "frontier", "explored", "errors", "density", "unresolved");
    for l in &s.layers {
        println!(
            "{:>5} {:>9} {:>9} {:>8} {:>8} {:>10}",
            l.layer,
            l.frontier,
            l.explored,
            l.errors,
            density_percent(l.errors as u64, l.explored as u64),
            l.unresolved
        );
    }
    println!("evaluations: {} ({} replayed)", s.evaluations, s.replayed);
    if s.budget_exhausted {
        println!("budget exhausted; continue with `atlas resume --journal {} --budget N`", journal.display());
    }
    let unresolved: usize = s.layers.iter().map(|l| l.unresolved).sum();
    if unresolved > 0 {
        eprintln!("error: {unresolved} node(s) unresolved after retries; their descendants were not explored");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn journal_contents(path: &Path) -> Result<JournalContents> {
    let contents = read_journal(path, ReadMode::Lenient)
        .with_context(|| format!("reading journal {}", path.display()))
        .map_err(invalid)?;
    if !contents.corrupt_lines.is_empty() {
        log::warn!("skipped {} corrupt journal line(s): {:?}", contents.corrupt_lines.len(), contents.corrupt_lines);
    }
    if contents.dropped_tail {
        log::warn!("ignored a truncated final journal line");
    }
    Ok(contents)
}

/// Run config beside the journal with an optional corpus override.
fn journal_config(journal: &Path, corpus: Option<PathBuf>) -> Result<RunConfig> {
    let mut config = sibling_config(journal)?.unwrap_or_default();
    if corpus.is_some() {
        config.corpus = corpus;
    }
    if config.corpus.is_none() {
        return Err(invalid(anyhow::anyhow!(
            "no {RUN_CONFIG_FILE} next to {}; pass --corpus",
            journal.display()
        )));
    }
    Ok(config)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let contents = journal_contents(&args.journal)?;
    let config = journal_config(&args.journal, args.corpus)?;
    let corpus = read_corpus(config.corpus_path()?)?;
    let stats = write_report(&args.out, &contents.records, &corpus, contents.corrupt_lines.len())?;
    for s in &stats {
        println!(
            "layer {}: {} errors / {} explored ({}), {} unresolved, {:.2}% of {} pruned",
            s.layer,
            s.errors,
            s.explored,
            density_percent(s.errors, s.explored),
            s.unresolved,
            100.0 * s.pruned_fraction,
            s.total_possible
        );
    }
    if !contents.corrupt_lines.is_empty() {
        println!("{} corrupt journal line(s) skipped", contents.corrupt_lines.len());
    }
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn attribute(args: AttributeArgs) -> Result<ExitCode> {
    if !(args.alpha.is_finite() && args.alpha > 0.0) {
        return Err(invalid(anyhow::anyhow!("--alpha must be positive")));
    }
    let contents = journal_contents(&args.journal)?;
    let config = journal_config(&args.journal, args.corpus)?;
    let corpus = read_corpus(config.corpus_path()?)?;
    let file = std::fs::File::open(&args.captions)
        .with_context(|| format!("opening {}", args.captions.display()))
        .map_err(invalid)?;
    let index = CaptionIndex::build(BufReader::new(file), &corpus)
        .with_context(|| format!("indexing {}", args.captions.display()))?;

    let mut alphas = vec![args.alpha];
    if args.alpha_grid {
        alphas.extend(default_alpha_grid());
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
    }
    let (records, curve) = match attribute_slices(&index, &contents.records, args.alpha, args.layer) {
        Ok(a) => (a.records, scarcity_curve(&index, &contents.records, &alphas, args.layer)?),
        Err(AttributionError::NoSlices) => (Vec::new(), Vec::new()),
        Err(e @ AttributionError::EmptyLayer(_)) => return Err(invalid(e)),
        Err(e) => return Err(e.into()),
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let path = args.out.join("attribution.jsonl");
    std::fs::write(&path, jsonl).with_context(|| format!("writing {}", path.display()))?;

    let mut csv = String::from("alpha,scarce_fraction,layer,error_slices,scarce\n");
    for p in &curve {
        let _ = writeln!(csv, "{},{},{},{},{}", p.alpha, p.scarce_fraction, p.layer, p.error_slices, p.scarce);
    }
    let path = args.out.join("scarcity.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let scarce = records.iter().filter(|r| r.verdict == atlas_core::attribution::Scarcity::DataScarce).count();
    println!(
        "{} of {} error slices data-scarce at alpha {} ({} captions)",
        scarce,
        records.len(),
        args.alpha,
        index.n_captions()
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(mut config: RunConfig, args: BenchArgs) -> Result<ExitCode> {
    apply_flags(&mut config, &args.flags);
    config.search.validate().map_err(invalid)?;
    if args.seeds == 0 {
        return Err(invalid(anyhow::anyhow!("--seeds must be at least 1")));
    }
    let corpus = read_corpus(&args.corpus)?;
    let landscape = PlantedLandscape::load(&args.landscape)
        .with_context(|| format!("loading landscape {}", args.landscape.display()))
        .map_err(invalid)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let strategies = [FrontierOrdering::Random, FrontierOrdering::Canonical, FrontierOrdering::Prioritized];
    let result = benchmark_strategies(&corpus, &landscape, &config.search, &strategies, &seeds, args.layer)?;
    write_benchmark(&args.out, &result)?;
    for (name, m) in &result.medians {
        println!("{name}: median {m} layer-{} evaluations to half of its failures", result.layer);
    }
    match result.speedup_at_half {
        Some(s) => println!("speedup at 50%: {s:.3}"),
        None => println!("speedup at 50%: n/a (no failures at layer {})", result.layer),
    }
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn predictor_eval(journal: &Path, split_at: usize, corpus: Option<PathBuf>, out: Option<&Path>) -> Result<ExitCode> {
    if split_at == 0 {
        bail!(invalid(anyhow::anyhow!("--split-at must be at least 1")));
    }
    let contents = journal_contents(journal)?;
    let config = journal_config(journal, corpus)?;
    let runtime = Runtime::build(&config)?;
    let ctx = runtime.context(config.grammar_url.as_deref())?;
    let ledger = ctx.replay_training(&contents.records, split_at)?;
    let mut csv = String::from("trained_on,evaluated_on,l1,baseline_l1\n");
    for p in &ledger.validation_l1 {
        let _ = writeln!(csv, "{},{},{},{}", p.trained_on, p.evaluated_on, p.l1, p.baseline_l1);
    }
    match out {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if ledger.failed_retrains > 0 {
        log::warn!("{} retrain(s) diverged and kept the previous model", ledger.failed_retrains);
    }
    Ok(ExitCode::SUCCESS)
}

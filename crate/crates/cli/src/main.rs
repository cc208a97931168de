use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deidkit::corpus::{
    load_annotations, load_utility_annotations, read_corpus, read_output_corpus, Corpus,
};
use deidkit::embeddings::{read_header, DuplicatePolicy, EmbeddingStore};
use deidkit::evaluation::{
    emit_report, evaluate, run_sweep, Granularity, ReportFormat, SweepConfig,
};
use deidkit::par::{self, ExecMode};
use deidkit::pipeline::{
    run_pipeline, sha256_hex, write_output, Pipeline, PipelineError, PipelineSpec, RunManifest,
};
use deidkit::synth::{self, CategoryMix, Lexicon, StoreConfig, SynthConfig, SynthError};
use serde::Serialize;

mod grid;

#[derive(Debug, Parser)]
#[command(
    name = "deidkit",
    version,
    about = "Masking and text differential privacy for clinical notes"
)]
struct Cli {
    /// Worker threads for pipelines and sweeps (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// More log output on stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold PII and entity/relation annotations
    Synth(SynthArgs),
    /// Run a pipeline spec over a corpus
    Deidentify(DeidentifyArgs),
    /// Score an output corpus for leakage and annotation survival
    Evaluate(EvaluateArgs),
    /// Run pipelines across an epsilon grid and seeds
    Sweep(SweepArgs),
    /// Print the header of an embedding store
    InspectStore(InspectArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Master seed; drawn from the OS and printed when omitted
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let s = rand::random();
            eprintln!("seed: {s}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mix {
    Uniform,
    Clinical,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for corpus.jsonl, gold.jsonl, utility.jsonl, store.tdpe and rules.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of documents
    #[arg(long, default_value_t = 102)]
    docs: usize,
    /// Target corpus size in words
    #[arg(long, default_value_t = 107_110)]
    words: usize,
    /// Share of words that are PII
    #[arg(long, default_value_t = 0.0083)]
    pii_rate: f64,
    /// PII category distribution
    #[arg(long, value_enum, default_value_t = Mix::Uniform)]
    mix: Mix,
    /// Share of non-PII sentences mentioning a drug or disorder
    #[arg(long, default_value_t = 0.08)]
    entity_rate: f64,
    /// Share of those sentences linking a drug to a disorder
    #[arg(long, default_value_t = 0.5)]
    relation_rate: f64,
    /// Directory replacing the built-in lexicon files
    #[arg(long, value_name = "DIR")]
    lexicon: Option<PathBuf>,
    /// Dimension of the synthetic embedding store
    #[arg(long, default_value_t = 32)]
    store_dim: usize,
    /// Write the built-in lexicon to DIR and exit
    #[arg(long, value_name = "DIR", conflicts_with_all = ["lexicon"])]
    export_lexicon: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct StoreArgs {
    /// TDPE embedding store (required when the spec privatizes)
    #[arg(long, value_name = "FILE")]
    store: Option<PathBuf>,
    /// Keep the first of duplicate store tokens instead of failing
    #[arg(long)]
    dedup: bool,
}

#[derive(Debug, Args)]
struct DeidentifyArgs {
    /// Input corpus (JSON-Lines)
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Pipeline spec (JSON)
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    #[command(flatten)]
    store: StoreArgs,
    /// Output corpus (JSON-Lines with provenance)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Run manifest path (default: <out>.manifest.json)
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Override the epsilon of the privatize stage
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Source corpus the output was produced from
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Output corpus written by deidentify
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Gold PII annotations
    #[arg(long, value_name = "FILE")]
    gold: PathBuf,
    /// Entity/relation annotations for survival scoring
    #[arg(long, value_name = "FILE")]
    utility: Option<PathBuf>,
    /// Report path (default: stdout)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Plot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Token,
    Subword,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Input corpus
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Gold PII annotations
    #[arg(long, value_name = "FILE")]
    gold: PathBuf,
    /// Entity/relation annotations
    #[arg(long, value_name = "FILE")]
    utility: PathBuf,
    /// Pipeline spec; repeat for several pipelines
    #[arg(long = "spec", value_name = "FILE", required = true)]
    specs: Vec<PathBuf>,
    #[command(flatten)]
    store: StoreArgs,
    /// Epsilon values, e.g. 8,16,...,1024
    #[arg(long, default_value = "8,16,...,1024")]
    grid: String,
    /// Explicit seed list, e.g. 1,2,3
    #[arg(long, conflicts_with_all = ["replicates", "seed"])]
    seeds: Option<String>,
    /// Number of seeds derived from --seed
    #[arg(long, default_value_t = 1)]
    replicates: u64,
    /// Leakage unit
    #[arg(long, value_enum, default_value_t = GranularityArg::Token)]
    granularity: GranularityArg,
    /// Report format
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Report path (default: stdout)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Sweep manifest path
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// TDPE embedding store
    #[arg(long, value_name = "FILE")]
    store: PathBuf,
    /// Load the whole file and validate every record
    #[arg(long)]
    full: bool,
    /// Print the nearest neighbours of this token (implies --full)
    #[arg(long, value_name = "TOKEN")]
    neighbors: Option<String>,
    /// Neighbour count
    #[arg(long, default_value_t = 10)]
    k: usize,
}

/// Error with its exit code: 1 for bad input or flags, 2 for runtime failure.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait Invalid<T> {
    fn invalid(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Invalid<T> for Result<T, E> {
    fn invalid(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into().context(what())))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let jobs = cli.jobs;
    if jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    match par::with_jobs(jobs, move || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Deidentify(a) => cmd_deidentify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectStore(a) => cmd_inspect(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn file_sha(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(
        &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    read_corpus(path).invalid(|| format!("corpus {}", path.display()))
}

fn load_store(args: &StoreArgs) -> CliResult<Option<Arc<EmbeddingStore>>> {
    let Some(path) = &args.store else {
        return Ok(None);
    };
    let policy = if args.dedup {
        DuplicatePolicy::Dedup
    } else {
        DuplicatePolicy::Strict
    };
    let store = EmbeddingStore::load_with_policy(path, policy)
        .invalid(|| format!("store {}", path.display()))?;
    Ok(Some(Arc::new(store)))
}

fn load_spec(path: &Path, has_store: bool) -> CliResult<PipelineSpec> {
    let spec = PipelineSpec::load(path).invalid(|| format!("spec {}", path.display()))?;
    if spec.has_privatize() && !has_store {
        return Err(Failure::Invalid(anyhow!(
            "spec {} has a privatize stage; pass --store <FILE>",
            path.display()
        )));
    }
    Ok(spec)
}

fn resolve_pipeline(
    spec_path: &Path,
    spec: &PipelineSpec,
    corpus: &Corpus,
    store: Option<Arc<EmbeddingStore>>,
) -> CliResult<Pipeline> {
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let mut p = Pipeline::resolve(spec, base, corpus, store).map_err(|e| match e {
        PipelineError::SpecInvalid(_)
        | PipelineError::StoreMissing
        | PipelineError::Mechanism(_) => {
            Failure::Invalid(anyhow::Error::new(e).context(format!("spec {}", spec_path.display())))
        }
        other => Failure::Invalid(
            anyhow::Error::new(other).context(format!("loading {}", spec_path.display())),
        ),
    })?;
    if p.id == "pipeline" {
        if let Some(stem) = spec_path.file_stem() {
            p.id = stem.to_string_lossy().into_owned();
        }
    }
    Ok(p)
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    if let Some(dir) = &a.export_lexicon {
        Lexicon::export_builtin(dir).with_context(|| format!("writing {}", dir.display()))?;
        return Ok(());
    }
    let seed = a.seed.resolve();
    let config = SynthConfig {
        n_docs: a.docs,
        target_words: a.words,
        pii_rate: a.pii_rate,
        category_mix: match a.mix {
            Mix::Uniform => CategoryMix::uniform(),
            Mix::Clinical => CategoryMix::clinical(),
        },
        entity_rate: a.entity_rate,
        relation_rate: a.relation_rate,
        seed,
        lexicon: a.lexicon.clone(),
    };
    let lexicon = match &config.lexicon {
        Some(dir) => Lexicon::from_dir(dir).invalid(|| "lexicon".into())?,
        None => Lexicon::builtin(),
    };
    let out = synth::generate_with(&config, &lexicon).map_err(|e| match e {
        SynthError::InfeasibleConfig(_) => Failure::Invalid(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (c, g, u) = (
        a.out.join("corpus.jsonl"),
        a.out.join("gold.jsonl"),
        a.out.join("utility.jsonl"),
    );
    out.write_files(&c, &g, &u)?;
    let store_cfg = StoreConfig {
        dim: a.store_dim,
        seed,
        ..StoreConfig::default()
    };
    let store = synth::build_store(&out.corpus, &lexicon, &[], store_cfg)
        .invalid(|| "--store-dim".into())?;
    store.save(&a.out.join("store.tdpe"))?;
    write_json(&a.out.join("rules.json"), &lexicon.rules())?;
    write_json(
        &a.out.join("synth.manifest.json"),
        &serde_json::json!({
            "tool": "deidkit",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "docs": out.corpus.len(),
            "words": out.corpus.word_count(),
            "pii_rate_target": config.pii_rate,
            "pii_rate": out.pii_rate(),
            "gold_spans": out.gold.len(),
            "entities": out.utility.entities.len(),
            "relations": out.utility.relations.len(),
            "store_dim": a.store_dim,
            "store_vocab": store.len(),
            "corpus_sha256": file_sha(&c)?,
        }),
    )?;
    eprintln!(
        "{} documents, {} words, pii rate {:.4}",
        out.corpus.len(),
        out.corpus.word_count(),
        out.pii_rate()
    );
    Ok(())
}

fn cmd_deidentify(a: DeidentifyArgs) -> CliResult {
    let spec = load_spec(&a.spec, a.store.store.is_some())?;
    if let Some(e) = a.epsilon {
        if !spec.has_privatize() {
            return Err(Failure::Invalid(anyhow!(
                "--epsilon given but the spec has no privatize stage"
            )));
        }
        if !(e.is_finite() && e > 0.0) {
            return Err(Failure::Invalid(anyhow!(
                "--epsilon must be positive, got {e}"
            )));
        }
    }
    let corpus = load_corpus(&a.corpus)?;
    let store = load_store(&a.store)?;
    let mut pipeline = resolve_pipeline(&a.spec, &spec, &corpus, store)?;
    if let Some(e) = a.epsilon {
        pipeline = pipeline.with_epsilon(e).invalid(|| "--epsilon".into())?;
    }
    let seed = a.seed.resolve();
    let (docs, run) =
        run_pipeline(&corpus, &pipeline, seed, ExecMode::Parallel).invalid(|| "pipeline".into())?;

    let mut bytes = Vec::new();
    write_output(&mut bytes, &docs, &run)?;
    let mut w = create(&a.out)?;
    w.write_all(&bytes)?;
    w.flush()?;

    let store_sha = a.store.store.as_deref().map(file_sha).transpose()?;
    let manifest = RunManifest::new(&run, file_sha(&a.corpus)?, store_sha, &bytes);
    let manifest_path = a.manifest.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        p.into()
    });
    write_json(&manifest_path, &manifest)?;
    if run.failed_docs > 0 {
        eprintln!("warning: {}", run.status_summary());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    let gold =
        load_annotations(&a.gold, &corpus).invalid(|| format!("gold {}", a.gold.display()))?;
    let outputs = read_output_corpus(&a.output, &corpus)
        .invalid(|| format!("output {}", a.output.display()))?;
    let utility = a
        .utility
        .as_deref()
        .map(|p| {
            load_utility_annotations(p, &corpus).invalid(|| format!("utility {}", p.display()))
        })
        .transpose()?;
    let docs: Vec<_> = outputs.into_iter().map(|(d, _)| d).collect();
    let report = evaluate(&docs, &gold, utility.as_ref()).invalid(|| "scoring".into())?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let grid = grid::parse_grid(&a.grid).invalid(|| "--grid".into())?;
    let seeds = match &a.seeds {
        Some(s) => grid::parse_seeds(s).invalid(|| "--seeds".into())?,
        None => {
            if a.replicates == 0 {
                return Err(Failure::Invalid(anyhow!("--replicates must be at least 1")));
            }
            let base = a.seed.resolve();
            (0..a.replicates).map(|i| base.wrapping_add(i)).collect()
        }
    };
    let specs = a
        .specs
        .iter()
        .map(|p| load_spec(p, a.store.store.is_some()))
        .collect::<CliResult<Vec<_>>>()?;
    let corpus = load_corpus(&a.corpus)?;
    let gold =
        load_annotations(&a.gold, &corpus).invalid(|| format!("gold {}", a.gold.display()))?;
    let utility = load_utility_annotations(&a.utility, &corpus)
        .invalid(|| format!("utility {}", a.utility.display()))?;
    let store = load_store(&a.store)?;
    let pipelines = a
        .specs
        .iter()
        .zip(&specs)
        .map(|(p, s)| resolve_pipeline(p, s, &corpus, store.clone()))
        .collect::<CliResult<Vec<_>>>()?;
    let mut ids: Vec<&str> = pipelines.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Failure::Invalid(anyhow!(
            "pipeline ids must be distinct; set \"id\" in each spec"
        )));
    }

    let config = SweepConfig {
        grid: grid.clone(),
        seeds: seeds.clone(),
        granularity: match a.granularity {
            GranularityArg::Token => Granularity::WholeToken,
            GranularityArg::Subword => Granularity::Subword,
        },
        mode: ExecMode::Parallel,
    };
    let result = run_sweep(&corpus, &gold, &utility, &pipelines, &config)?;
    let format = match a.format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
        Format::Plot => ReportFormat::PlotData,
    };
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            emit_report(&result, format, &mut w)?;
            w.flush()?;
        }
        None => emit_report(&result, format, io::stdout().lock())?,
    }
    let failed = result.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("warning: {failed} sweep cells reported errors; see the status column");
    }
    if let Some(m) = &a.manifest {
        write_json(
            m,
            &serde_json::json!({
                "tool": "deidkit",
                "version": env!("CARGO_PKG_VERSION"),
                "grid": grid,
                "seeds": seeds,
                "pipelines": pipelines.iter().map(|p| serde_json::json!({"id": p.id, "spec_hash": p.spec_hash()})).collect::<Vec<_>>(),
                "corpus_sha256": file_sha(&a.corpus)?,
                "store_sha256": a.store.store.as_deref().map(file_sha).transpose()?,
                "content_hash": result.content_hash(),
            }),
        )?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let mut f = File::open(&a.store).with_context(|| format!("opening {}", a.store.display()))?;
    let header = read_header(&mut io::BufReader::new(&mut f))
        .invalid(|| format!("store {}", a.store.display()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "magic: TDPE")?;
    writeln!(out, "version: {}", header.version)?;
    writeln!(out, "dim: {}", header.dim)?;
    writeln!(out, "vocab_count: {}", header.vocab_count)?;
    writeln!(out, "bytes: {}", fs::metadata(&a.store)?.len())?;
    if a.full || a.neighbors.is_some() {
        let store =
            EmbeddingStore::load(&a.store).invalid(|| format!("store {}", a.store.display()))?;
        writeln!(out, "valid: true")?;
        if let Some(tok) = &a.neighbors {
            let i = store
                .index_of(tok)
                .ok_or_else(|| Failure::Invalid(anyhow!("token {tok:?} is not in the store")))?;
            let k = a.k.min(store.len());
            for n in store
                .exact_k_nearest(store.embedding(i), k)
                .invalid(|| "--k".into())?
            {
                writeln!(out, "{}\t{:.6}", store.token(n.token_index), n.distance)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_has_help() {
        fn walk(cmd: &clap::Command, path: &str) {
            for arg in cmd.get_arguments() {
                if matches!(arg.get_id().as_str(), "help" | "version") {
                    continue;
                }
                assert!(
                    arg.get_help()
                        .is_some_and(|h| !h.to_string().trim().is_empty()),
                    "{path} --{} has no help text",
                    arg.get_id()
                );
            }
            for sub in cmd.get_subcommands() {
                assert!(
                    sub.get_about().is_some(),
                    "{path} {} has no description",
                    sub.get_name()
                );
                walk(sub, &format!("{path} {}", sub.get_name()));
            }
        }
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        walk(&cmd, "deidkit");
    }
}

//! Leakage and annotation-survival scoring, epsilon sweeps and report output.
//!
//! Leakage is strict: a gold PII unit counts as leaked when its surface form
//! (case-insensitive) occurs inside any output word token whose provenance
//! overlaps the gold span. Units are the word-like source tokens of the span
//! ([`Granularity::WholeToken`]) or their character 4-grams
//! ([`Granularity::Subword`]). Placeholder tokens never leak.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    group_by_doc, is_wordlike, Category, Corpus, Directness, Document, EntityAnnotation, PiiSpan,
    RelationAnnotation, Span, Token, TokenKind, UtilityAnnotations,
};
use crate::par::{self, ExecMode};
use crate::pipeline::{run_pipeline, sha256_hex, Pipeline, PipelineError};

/// Grid of privacy budgets used by default: 8, 16, ..., 1024.
pub const DEFAULT_EPSILON_GRID: [f64; 8] = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0];

/// Minimum number of surviving relations for a corpus to be trainable.
pub const TRAINABLE_RELATIONS: usize = 10;

/// Character n-gram length of subword units.
pub const SUBWORD_N: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{doc_id}: document has {tokens} tokens but {provenance} provenance entries")]
    MissingProvenance {
        doc_id: String,
        tokens: usize,
        provenance: usize,
    },
    #[error("{doc_id}: gold span {start}..{end} lies outside the source document")]
    SpanOutsideDoc {
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("gold span for {span_doc:?} scored against document {doc:?}")]
    CrossDocSpan { doc: String, span_doc: String },
    #[error("sweep has no rows")]
    EmptySweep,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("sweep needs at least one seed and one pipeline")]
    EmptySweepAxes,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    WholeToken,
    Subword,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Count {
    pub total: usize,
    pub leaked: usize,
}

impl Count {
    fn add(&mut self, other: Count) {
        self.total += other.total;
        self.leaked += other.leaked;
    }

    /// `100 * leaked / total`, or 0 when there is no support.
    pub fn pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.leaked as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeakageReport {
    pub granularity: Granularity,
    pub per_category: BTreeMap<Category, Count>,
    pub direct: Count,
    pub indirect: Count,
}

impl LeakageReport {
    pub fn new(granularity: Granularity) -> Self {
        LeakageReport {
            granularity,
            ..Default::default()
        }
    }

    fn record(&mut self, category: Category, c: Count) {
        self.per_category.entry(category).or_default().add(c);
        match category.directness() {
            Directness::Direct => self.direct.add(c),
            Directness::Indirect => self.indirect.add(c),
        }
    }

    pub fn merge(&mut self, other: &LeakageReport) {
        for (&cat, &c) in &other.per_category {
            self.per_category.entry(cat).or_default().add(c);
        }
        self.direct.add(other.direct);
        self.indirect.add(other.indirect);
    }

    pub fn total(&self) -> Count {
        Count {
            total: self.direct.total + self.indirect.total,
            leaked: self.direct.leaked + self.indirect.leaked,
        }
    }

    pub fn pct_total(&self) -> f64 {
        self.total().pct()
    }

    pub fn pct_direct(&self) -> f64 {
        self.direct.pct()
    }

    pub fn pct_indirect(&self) -> f64 {
        self.indirect.pct()
    }

    /// Categories with zero gold units (their percentage is reported as 0).
    pub fn no_support(&self) -> Vec<Category> {
        Category::ALL
            .into_iter()
            .filter(|c| self.per_category.get(c).is_none_or(|n| n.total == 0))
            .collect()
    }
}

fn check_provenance(doc: &Document) -> Result<(), EvalError> {
    if doc.tokens().len() != doc.provenance().len() {
        return Err(EvalError::MissingProvenance {
            doc_id: doc.doc_id().to_string(),
            tokens: doc.tokens().len(),
            provenance: doc.provenance().len(),
        });
    }
    Ok(())
}

fn char_ngrams(s: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() <= n {
        return vec![s.to_string()];
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Units of a gold span: word-like source tokens clipped to the span.
fn span_units(source: &str, source_tokens: &[Token], span: Span) -> Vec<String> {
    source_tokens
        .iter()
        .filter(|t| t.span().overlaps(&span))
        .map(|t| source[t.start.max(span.start)..t.end.min(span.end)].to_string())
        .filter(|u| is_wordlike(u))
        .collect()
}

/// Leakage of the gold PII of one document.
pub fn score_leakage(
    output: &Document,
    gold: &[PiiSpan],
    granularity: Granularity,
) -> Result<LeakageReport, EvalError> {
    check_provenance(output)?;
    let source = output.source_text();
    let source_tokens = output.source_tokens();
    let mut report = LeakageReport::new(granularity);
    for g in gold {
        if g.doc_id != output.doc_id() {
            return Err(EvalError::CrossDocSpan {
                doc: output.doc_id().to_string(),
                span_doc: g.doc_id.clone(),
            });
        }
        if output.check_source_span(g.span()).is_err() {
            return Err(EvalError::SpanOutsideDoc {
                doc_id: g.doc_id.clone(),
                start: g.start,
                end: g.end,
            });
        }
        let exposed: Vec<String> = output
            .tokens()
            .iter()
            .zip(output.provenance())
            .filter(|(t, p)| t.kind == TokenKind::Word && p.overlaps(&g.span()))
            .map(|(t, _)| t.text.to_lowercase())
            .collect();
        let mut count = Count::default();
        for unit in span_units(source, &source_tokens, g.span()) {
            let pieces = match granularity {
                Granularity::WholeToken => vec![unit],
                Granularity::Subword => char_ngrams(&unit, SUBWORD_N),
            };
            for piece in pieces {
                let needle = piece.to_lowercase();
                count.total += 1;
                if exposed.iter().any(|e| e.contains(&needle)) {
                    count.leaked += 1;
                }
            }
        }
        report.record(g.category, count);
    }
    Ok(report)
}

/// Corpus-level leakage: gold spans are matched to outputs by document id.
pub fn score_corpus_leakage(
    outputs: &[Document],
    gold: &[PiiSpan],
    granularity: Granularity,
) -> Result<LeakageReport, EvalError> {
    let by_doc = group_by_doc(gold);
    let mut total = LeakageReport::new(granularity);
    let empty = Vec::new();
    for doc in outputs {
        let spans = by_doc.get(doc.doc_id()).unwrap_or(&empty);
        total.merge(&score_leakage(doc, spans, granularity)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub entity_total: usize,
    pub entity_surviving: usize,
    pub relation_total: usize,
    pub relation_surviving: usize,
}

impl SurvivalReport {
    pub fn trainable(&self) -> bool {
        self.relation_surviving >= TRAINABLE_RELATIONS
    }

    pub fn merge(&mut self, o: &SurvivalReport) {
        self.entity_total += o.entity_total;
        self.entity_surviving += o.entity_surviving;
        self.relation_total += o.relation_total;
        self.relation_surviving += o.relation_surviving;
    }
}

/// Entities survive when each of their source tokens reappears unchanged at
/// the same provenance; relations survive when both their entities do.
pub fn score_survival(
    output: &Document,
    entities: &[&EntityAnnotation],
    relations: &[&RelationAnnotation],
) -> Result<SurvivalReport, EvalError> {
    check_provenance(output)?;
    let by_prov: HashMap<Span, &str> = output
        .tokens()
        .iter()
        .zip(output.provenance())
        .map(|(t, p)| (*p, t.text.as_str()))
        .collect();
    let source_tokens = output.source_tokens();
    let mut surviving: HashMap<&str, bool> = HashMap::new();
    let mut report = SurvivalReport::default();
    for e in entities {
        let span = Span::new(e.start, e.end);
        if output.check_source_span(span).is_err() {
            return Err(EvalError::SpanOutsideDoc {
                doc_id: e.doc_id.clone(),
                start: e.start,
                end: e.end,
            });
        }
        let mut toks = source_tokens
            .iter()
            .filter(|t| t.span().overlaps(&span))
            .peekable();
        let ok =
            toks.peek().is_some() && toks.all(|t| by_prov.get(&t.span()) == Some(&t.text.as_str()));
        report.entity_total += 1;
        report.entity_surviving += usize::from(ok);
        surviving.insert(e.id.as_str(), ok);
    }
    for r in relations {
        report.relation_total += 1;
        let alive = |id: &str| surviving.get(id).copied().unwrap_or(false);
        report.relation_surviving += usize::from(alive(&r.head) && alive(&r.tail));
    }
    Ok(report)
}

pub fn score_corpus_survival(
    outputs: &[Document],
    ann: &UtilityAnnotations,
) -> Result<SurvivalReport, EvalError> {
    let mut ents: HashMap<&str, Vec<&EntityAnnotation>> = HashMap::new();
    for e in &ann.entities {
        ents.entry(e.doc_id.as_str()).or_default().push(e);
    }
    let mut rels: HashMap<&str, Vec<&RelationAnnotation>> = HashMap::new();
    for r in &ann.relations {
        rels.entry(r.doc_id.as_str()).or_default().push(r);
    }
    let mut total = SurvivalReport::default();
    for doc in outputs {
        let e = ents.get(doc.doc_id()).map(Vec::as_slice).unwrap_or(&[]);
        let r = rels.get(doc.doc_id()).map(Vec::as_slice).unwrap_or(&[]);
        total.merge(&score_survival(doc, e, r)?);
    }
    Ok(total)
}

/// Combined report written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub whole_token: LeakageReport,
    pub subword: LeakageReport,
    pub survival: Option<SurvivalReport>,
    pub trainable: Option<bool>,
    /// How output tokens are aligned to gold spans.
    pub alignment: String,
}

pub const ALIGNMENT_NOTE: &str =
    "provenance overlap + case-insensitive surface containment; subword units are character 4-grams";

pub fn evaluate(
    outputs: &[Document],
    gold: &[PiiSpan],
    utility: Option<&UtilityAnnotations>,
) -> Result<EvaluationReport, EvalError> {
    let survival = utility
        .map(|u| score_corpus_survival(outputs, u))
        .transpose()?;
    Ok(EvaluationReport {
        whole_token: score_corpus_leakage(outputs, gold, Granularity::WholeToken)?,
        subword: score_corpus_leakage(outputs, gold, Granularity::Subword)?,
        trainable: survival.map(|s| s.trainable()),
        survival,
        alignment: ALIGNMENT_NOTE.to_string(),
    })
}

/// One (pipeline, epsilon, seed) cell. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pipeline_id: String,
    pub mechanism: String,
    pub epsilon: f64,
    pub seed: u64,
    pub pct_total: f64,
    pub pct_direct: f64,
    pub pct_indirect: f64,
    /// Surviving entity count.
    pub entity_survival: usize,
    /// Surviving relation count.
    pub relation_survival: usize,
    pub trainable: bool,
    pub wall_time_s: f64,
    pub oov_count: usize,
    pub status: String,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "pipeline_id",
    "mechanism",
    "epsilon",
    "seed",
    "pct_total",
    "pct_direct",
    "pct_indirect",
    "entity_survival",
    "relation_survival",
    "trainable",
    "wall_time_s",
    "oov_count",
    "status",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub granularity: Granularity,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Hash of every column except wall time.
    pub fn content_hash(&self) -> String {
        let mut stripped = self.clone();
        for r in &mut stripped.rows {
            r.wall_time_s = 0.0;
        }
        let mut buf = Vec::new();
        // writing into memory cannot fail
        let _ = write_csv(&mut buf, &stripped);
        sha256_hex(&buf)
    }

    /// Rows of one pipeline, sorted by epsilon then seed.
    pub fn rows_for<'a>(&'a self, pipeline_id: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.pipeline_id == pipeline_id)
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub granularity: Granularity,
    /// Parallelism across cells. Documents inside a cell run sequentially.
    pub mode: ExecMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: DEFAULT_EPSILON_GRID.to_vec(),
            seeds: vec![0],
            granularity: Granularity::WholeToken,
            mode: ExecMode::Parallel,
        }
    }
}

fn run_cell(
    corpus: &Corpus,
    gold: &[PiiSpan],
    utility: &UtilityAnnotations,
    pipeline: &Pipeline,
    epsilon: f64,
    seed: u64,
    granularity: Granularity,
) -> SweepRow {
    let started = Instant::now();
    let mechanism = pipeline
        .mechanism()
        .map_or("none".to_string(), |m| m.name().to_string());
    let mut row = SweepRow {
        pipeline_id: pipeline.id.clone(),
        mechanism,
        epsilon,
        seed,
        pct_total: 0.0,
        pct_direct: 0.0,
        pct_indirect: 0.0,
        entity_survival: 0,
        relation_survival: 0,
        trainable: false,
        wall_time_s: 0.0,
        oov_count: 0,
        status: "ok".into(),
    };
    let result = (|| -> Result<_, String> {
        let p = pipeline.with_epsilon(epsilon).map_err(|e| e.to_string())?;
        let (docs, run) = run_pipeline(corpus, &p, seed, ExecMode::Sequential)
            .map_err(|e: PipelineError| e.to_string())?;
        let leak = score_corpus_leakage(&docs, gold, granularity).map_err(|e| e.to_string())?;
        let surv = score_corpus_survival(&docs, utility).map_err(|e| e.to_string())?;
        Ok((run, leak, surv))
    })();
    match result {
        Ok((run, leak, surv)) => {
            row.pct_total = leak.pct_total();
            row.pct_direct = leak.pct_direct();
            row.pct_indirect = leak.pct_indirect();
            row.entity_survival = surv.entity_surviving;
            row.relation_survival = surv.relation_surviving;
            row.trainable = surv.trainable();
            row.oov_count = run.oov_count;
            row.status = run.status_summary();
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row.wall_time_s = started.elapsed().as_secs_f64();
    row
}

/// Every (pipeline, epsilon, seed) combination, ordered by that key.
///
/// A failing cell is recorded in its row's status and the sweep continues.
pub fn run_sweep(
    corpus: &Corpus,
    gold: &[PiiSpan],
    utility: &UtilityAnnotations,
    pipelines: &[Pipeline],
    config: &SweepConfig,
) -> Result<SweepResult, EvalError> {
    if config.grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if config.seeds.is_empty() || pipelines.is_empty() {
        return Err(EvalError::EmptySweepAxes);
    }
    let cells: Vec<(usize, f64, u64)> = (0..pipelines.len())
        .flat_map(|p| {
            config
                .grid
                .iter()
                .flat_map(move |&e| config.seeds.iter().map(move |&s| (p, e, s)))
        })
        .collect();
    let rows = par::map(config.mode, &cells, |&(p, eps, seed)| {
        run_cell(
            corpus,
            gold,
            utility,
            &pipelines[p],
            eps,
            seed,
            config.granularity,
        )
    });
    Ok(SweepResult {
        granularity: config.granularity,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    PlotData,
}

pub fn write_csv<W: Write>(w: W, sweep: &SweepResult) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    if sweep.rows.is_empty() {
        wtr.write_record(CSV_COLUMNS)?;
    }
    for r in &sweep.rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R, granularity: Granularity) -> Result<SweepResult, EvalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
    Ok(SweepResult { granularity, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub epsilon: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub pipeline_id: String,
    pub mechanism: String,
    pub metric: String,
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x: String,
    pub granularity: Granularity,
    pub series: Vec<PlotSeries>,
}

type Metric = (&'static str, fn(&SweepRow) -> f64);

const PLOT_METRICS: [Metric; 5] = [
    ("pct_total", |r| r.pct_total),
    ("pct_direct", |r| r.pct_direct),
    ("pct_indirect", |r| r.pct_indirect),
    ("entity_survival", |r| r.entity_survival as f64),
    ("relation_survival", |r| r.relation_survival as f64),
];

/// Series per (pipeline, metric) with epsilon on x, aggregated over seeds.
pub fn plot_data(sweep: &SweepResult) -> PlotData {
    let mut order: Vec<(&str, &str)> = Vec::new();
    for r in &sweep.rows {
        if !order.contains(&(r.pipeline_id.as_str(), r.mechanism.as_str())) {
            order.push((r.pipeline_id.as_str(), r.mechanism.as_str()));
        }
    }
    let mut series = Vec::new();
    for (pid, mech) in order {
        let rows: Vec<&SweepRow> = sweep
            .rows
            .iter()
            .filter(|r| r.pipeline_id == pid && r.mechanism == mech && r.status == "ok")
            .collect();
        let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        eps.sort_by(f64::total_cmp);
        eps.dedup();
        for (name, get) in PLOT_METRICS {
            let points = eps
                .iter()
                .map(|&e| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.epsilon == e)
                        .map(|r| get(r))
                        .collect();
                    PlotPoint {
                        epsilon: e,
                        mean: vals.iter().sum::<f64>() / vals.len() as f64,
                        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        n: vals.len(),
                    }
                })
                .collect();
            series.push(PlotSeries {
                pipeline_id: pid.to_string(),
                mechanism: mech.to_string(),
                metric: name.to_string(),
                points,
            });
        }
    }
    PlotData {
        x: "epsilon".into(),
        granularity: sweep.granularity,
        series,
    }
}

pub fn emit_report<W: Write>(
    sweep: &SweepResult,
    format: ReportFormat,
    mut w: W,
) -> Result<(), EvalError> {
    if sweep.rows.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    match format {
        ReportFormat::Csv => write_csv(w, sweep),
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, sweep)?;
            w.write_all(b"\n")?;
            Ok(())
        }
        ReportFormat::PlotData => {
            serde_json::to_writer_pretty(&mut w, &plot_data(sweep))?;
            w.write_all(b"\n")?;
            Ok(())
        }
    }
}

//! De-identification pipelines: ordered masking and privatization stages.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{group_by_doc, load_annotations, Corpus, CorpusError, Document, PiiSpan};
use crate::embeddings::EmbeddingStore;
use crate::maskers::{apply_annotations, load_rules, rule_mask, MaskError, MaskRule};
use crate::mechanisms::{MechRng, MechanismConfig, MechanismError, RngState, TokenMechanism};
use crate::par::{self, ExecMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {}", join_diagnostics(.0))]
    SpecInvalid(Vec<Diagnostic>),
    #[error("pipeline has a privatize stage but no embedding store was given")]
    StoreMissing,
    #[error("reading {path}: {message}")]
    SpecFile { path: String, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Emit out-of-vocabulary words unchanged and count them.
    #[default]
    PassThrough,
    /// Not supported: a static store has no embedding for unseen words.
    NearestInVocab,
}

/// Stage as written in a pipeline spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageSpec {
    Mask {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotations: Option<PathBuf>,
        #[serde(default)]
        threshold: f64,
    },
    Privatize(MechanismConfig),
}

fn default_true() -> bool {
    true
}

/// Pipeline spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_true")]
    pub preserve_placeholders: bool,
    #[serde(default)]
    pub oov_policy: OovPolicy,
}

impl PipelineSpec {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path).map_err(|e| PipelineError::SpecFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&raw).map_err(|e| PipelineError::SpecFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn has_privatize(&self) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(s, StageSpec::Privatize(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Stage index, when the problem belongs to one stage.
    pub stage: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match self.stage {
            Some(i) => write!(f, "{sev}: stage {i}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

/// Structural checks on a spec. Never fails; problems come back as diagnostics.
pub fn validate_spec(spec: &PipelineSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut err = |stage: Option<usize>, message: String| {
        out.push(Diagnostic {
            severity: Severity::Error,
            stage,
            message,
        })
    };
    if spec.stages.is_empty() {
        err(None, "pipeline has no stages".into());
    }
    if spec.oov_policy == OovPolicy::NearestInVocab {
        err(
            None,
            "oov_policy \"nearest_in_vocab\" is unsupported: the embedding store has no vectors for out-of-vocabulary words".into(),
        );
    }
    let privatize: Vec<usize> = spec
        .stages
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, StageSpec::Privatize(_)))
        .map(|(i, _)| i)
        .collect();
    if privatize.len() > 1 {
        err(
            Some(privatize[1]),
            format!(
                "{} privatize stages; at most one is allowed",
                privatize.len()
            ),
        );
    }
    for (i, stage) in spec.stages.iter().enumerate() {
        match stage {
            StageSpec::Mask {
                rules,
                annotations,
                threshold,
            } => {
                if rules.is_some() == annotations.is_some() {
                    err(
                        Some(i),
                        "mask stage needs exactly one of \"rules\" and \"annotations\"".into(),
                    );
                }
                if !(0.0..1.0).contains(threshold) {
                    err(Some(i), format!("threshold {threshold} outside [0, 1)"));
                }
            }
            StageSpec::Privatize(cfg) => {
                if let Err(e) = cfg.build() {
                    err(Some(i), e.to_string());
                }
            }
        }
    }
    if let Some(&p) = privatize.first() {
        if let Some(m) = spec.stages[p..]
            .iter()
            .position(|s| matches!(s, StageSpec::Mask { .. }))
        {
            out.push(Diagnostic {
                severity: Severity::Warning,
                stage: Some(p + m),
                message: "mask after privatize: this ordering is not a studied configuration"
                    .into(),
            });
        }
    }
    out
}

/// A stage with its inputs loaded.
#[derive(Clone)]
pub enum Stage {
    MaskRules(Arc<Vec<MaskRule>>),
    MaskAnnotations {
        spans: Arc<HashMap<String, Vec<PiiSpan>>>,
        threshold: f64,
    },
    Privatize {
        config: Option<MechanismConfig>,
        mechanism: Arc<dyn TokenMechanism>,
    },
}

impl fmt::Debug for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::MaskRules(r) => write!(f, "MaskRules({} rules)", r.len()),
            Stage::MaskAnnotations { spans, threshold } => {
                write!(f, "MaskAnnotations({} docs, t={threshold})", spans.len())
            }
            Stage::Privatize { mechanism, .. } => {
                write!(
                    f,
                    "Privatize({}, eps={:?})",
                    mechanism.name(),
                    mechanism.epsilon()
                )
            }
        }
    }
}

/// Executable pipeline.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub id: String,
    stages: Vec<Stage>,
    preserve_placeholders: bool,
    store: Option<Arc<EmbeddingStore>>,
    spec_hash: String,
}

impl Pipeline {
    pub fn new(id: impl Into<String>) -> Self {
        Pipeline {
            id: id.into(),
            stages: Vec::new(),
            preserve_placeholders: true,
            store: None,
            spec_hash: String::new(),
        }
    }

    pub fn mask_rules(mut self, rules: Vec<MaskRule>) -> Self {
        self.stages.push(Stage::MaskRules(Arc::new(rules)));
        self
    }

    pub fn mask_annotations(mut self, spans: &[PiiSpan], threshold: f64) -> Self {
        self.stages.push(Stage::MaskAnnotations {
            spans: Arc::new(group_by_doc(spans)),
            threshold,
        });
        self
    }

    pub fn privatize(mut self, config: MechanismConfig) -> Result<Self, PipelineError> {
        let mechanism: Arc<dyn TokenMechanism> = Arc::from(config.build()?);
        self.stages.push(Stage::Privatize {
            config: Some(config),
            mechanism,
        });
        Ok(self)
    }

    /// Privatize with an arbitrary mechanism implementation.
    pub fn privatize_with(mut self, mechanism: Arc<dyn TokenMechanism>) -> Self {
        self.stages.push(Stage::Privatize {
            config: None,
            mechanism,
        });
        self
    }

    pub fn with_store(mut self, store: Arc<EmbeddingStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn preserve_placeholders(mut self, on: bool) -> Self {
        self.preserve_placeholders = on;
        self
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn preserves_placeholders(&self) -> bool {
        self.preserve_placeholders
    }

    pub fn mechanism(&self) -> Option<&dyn TokenMechanism> {
        self.stages.iter().find_map(|s| match s {
            Stage::Privatize { mechanism, .. } => Some(mechanism.as_ref()),
            _ => None,
        })
    }

    pub fn mechanism_config(&self) -> Option<MechanismConfig> {
        self.stages.iter().find_map(|s| match s {
            Stage::Privatize { config, .. } => *config,
            _ => None,
        })
    }

    /// Same pipeline with the privatize stage rebuilt at another epsilon.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, PipelineError> {
        let mut out = self.clone();
        for stage in &mut out.stages {
            if let Stage::Privatize {
                config: Some(cfg),
                mechanism,
            } = stage
            {
                *cfg = cfg.with_epsilon(epsilon);
                *mechanism = Arc::from(cfg.build()?);
            }
        }
        Ok(out)
    }

    /// Hash identifying the stage configuration.
    pub fn spec_hash(&self) -> String {
        if !self.spec_hash.is_empty() {
            return self.spec_hash.clone();
        }
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update([u8::from(self.preserve_placeholders)]);
        for s in &self.stages {
            match s {
                Stage::Privatize {
                    config: Some(c), ..
                } => h.update(serde_json::to_vec(c).expect("config serializes")),
                other => h.update(format!("{other:?}").as_bytes()),
            }
        }
        hex::encode(h.finalize())
    }

    /// Load every file a spec refers to. Relative paths resolve against `base_dir`.
    pub fn resolve(
        spec: &PipelineSpec,
        base_dir: &Path,
        corpus: &Corpus,
        store: Option<Arc<EmbeddingStore>>,
    ) -> Result<Self, PipelineError> {
        let diags = validate_spec(spec);
        if has_errors(&diags) {
            return Err(PipelineError::SpecInvalid(diags));
        }
        for d in &diags {
            warn!("{d}");
        }
        if spec.has_privatize() && store.is_none() {
            return Err(PipelineError::StoreMissing);
        }
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut stages = Vec::with_capacity(spec.stages.len());
        for s in &spec.stages {
            stages.push(match s {
                StageSpec::Mask { rules: Some(r), .. } => {
                    Stage::MaskRules(Arc::new(load_rules(&resolve(r))?))
                }
                StageSpec::Mask {
                    annotations: Some(a),
                    threshold,
                    ..
                } => {
                    let spans = load_annotations(&resolve(a), corpus)?;
                    Stage::MaskAnnotations {
                        spans: Arc::new(group_by_doc(&spans)),
                        threshold: *threshold,
                    }
                }
                StageSpec::Mask { .. } => unreachable!("rejected by validate_spec"),
                StageSpec::Privatize(cfg) => Stage::Privatize {
                    config: Some(*cfg),
                    mechanism: Arc::from(cfg.build()?),
                },
            });
        }
        Ok(Pipeline {
            id: spec.id.clone().unwrap_or_else(|| "pipeline".into()),
            stages,
            preserve_placeholders: spec.preserve_placeholders,
            store,
            spec_hash: spec.hash(),
        })
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::SpecInvalid(vec![Diagnostic {
                severity: Severity::Error,
                stage: None,
                message: "pipeline has no stages".into(),
            }]));
        }
        let n = self
            .stages
            .iter()
            .filter(|s| matches!(s, Stage::Privatize { .. }))
            .count();
        if n > 1 {
            return Err(PipelineError::SpecInvalid(vec![Diagnostic {
                severity: Severity::Error,
                stage: None,
                message: format!("{n} privatize stages; at most one is allowed"),
            }]));
        }
        if let Some(m) = self.mechanism() {
            let store = self.store.as_ref().ok_or(PipelineError::StoreMissing)?;
            m.prepare(store)?;
        }
        Ok(())
    }

    /// De-identify one document with its own RNG stream.
    pub fn process(&self, doc: &Document, master_seed: u64) -> Result<DocOutcome, PipelineError> {
        let mut rng = RngState::for_document(master_seed, doc.doc_id()).rng();
        let mut current = doc.clone();
        let mut oov = 0;
        let mut privatized = 0;
        for stage in &self.stages {
            current = match stage {
                Stage::MaskRules(rules) => rule_mask(&current, rules).0,
                Stage::MaskAnnotations { spans, threshold } => {
                    let empty = Vec::new();
                    let doc_spans = spans.get(current.doc_id()).unwrap_or(&empty);
                    apply_annotations(&current, doc_spans, *threshold)?
                }
                Stage::Privatize { mechanism, .. } => {
                    let store = self.store.as_deref().ok_or(PipelineError::StoreMissing)?;
                    let (d, stats) = privatize_document(
                        &current,
                        mechanism.as_ref(),
                        store,
                        self.preserve_placeholders,
                        &mut rng,
                    )?;
                    oov += stats.oov;
                    privatized += stats.privatized;
                    d
                }
            };
        }
        Ok(DocOutcome {
            document: current,
            oov,
            privatized,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DocOutcome {
    pub document: Document,
    pub oov: usize,
    pub privatized: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct PrivatizeStats {
    oov: usize,
    privatized: usize,
}

fn privatize_document(
    doc: &Document,
    mechanism: &dyn TokenMechanism,
    store: &EmbeddingStore,
    preserve_placeholders: bool,
    rng: &mut MechRng,
) -> Result<(Document, PrivatizeStats), MechanismError> {
    let mut stats = PrivatizeStats::default();
    let mut replacements = Vec::with_capacity(doc.tokens().len());
    for tok in doc.tokens() {
        if preserve_placeholders && tok.is_placeholder() {
            replacements.push(None);
            continue;
        }
        let Some(idx) = store.index_of(&tok.text) else {
            debug!(
                "{}: out-of-vocabulary token {:?} passed through",
                doc.doc_id(),
                tok.text
            );
            stats.oov += 1;
            replacements.push(None);
            continue;
        };
        stats.privatized += 1;
        let out = mechanism.privatize(idx, store, rng)?;
        replacements.push((out != idx).then(|| store.token(out).to_string()));
    }
    Ok((doc.with_token_replacements(&replacements), stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocStatus {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub oov: usize,
}

/// Summary of one pipeline execution over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub pipeline_id: String,
    pub spec_hash: String,
    pub master_seed: u64,
    pub mechanism: Option<String>,
    pub epsilon: Option<f64>,
    pub preserve_placeholders: bool,
    pub docs: usize,
    pub failed_docs: usize,
    pub oov_count: usize,
    pub privatized_tokens: usize,
    pub wall_time_s: f64,
    pub doc_status: Vec<DocStatus>,
}

impl PipelineRun {
    pub fn status_summary(&self) -> String {
        if self.failed_docs == 0 {
            "ok".into()
        } else {
            format!("{} of {} documents failed", self.failed_docs, self.docs)
        }
    }
}

/// Run a pipeline over a corpus.
///
/// A document that fails is emitted with its text withheld and the error is
/// recorded in its status; the rest of the corpus continues. Output order
/// and content do not depend on `mode`.
pub fn run_pipeline(
    corpus: &Corpus,
    pipeline: &Pipeline,
    master_seed: u64,
    mode: ExecMode,
) -> Result<(Vec<Document>, PipelineRun), PipelineError> {
    pipeline.check()?;
    let started = Instant::now();
    let results = par::map(mode, corpus.docs(), |doc| {
        pipeline.process(doc, master_seed)
    });
    let mut out = Vec::with_capacity(results.len());
    let mut status = Vec::with_capacity(results.len());
    let (mut oov, mut privatized, mut failed) = (0, 0, 0);
    for (doc, res) in corpus.docs().iter().zip(results) {
        match res {
            Ok(o) => {
                oov += o.oov;
                privatized += o.privatized;
                status.push(DocStatus {
                    doc_id: doc.doc_id().to_string(),
                    error: None,
                    oov: o.oov,
                });
                out.push(o.document);
            }
            Err(e) => {
                warn!("{}: {e}", doc.doc_id());
                failed += 1;
                status.push(DocStatus {
                    doc_id: doc.doc_id().to_string(),
                    error: Some(e.to_string()),
                    oov: 0,
                });
                out.push(doc.withheld());
            }
        }
    }
    if oov > 0 {
        warn!(
            "{}: {oov} out-of-vocabulary tokens passed through unchanged",
            pipeline.id
        );
    }
    let mech = pipeline.mechanism();
    let run = PipelineRun {
        pipeline_id: pipeline.id.clone(),
        spec_hash: pipeline.spec_hash(),
        master_seed,
        mechanism: mech.map(|m| m.name().to_string()),
        epsilon: mech.and_then(|m| m.epsilon()),
        preserve_placeholders: pipeline.preserve_placeholders,
        docs: out.len(),
        failed_docs: failed,
        oov_count: oov,
        privatized_tokens: privatized,
        wall_time_s: started.elapsed().as_secs_f64(),
        doc_status: status,
    };
    Ok((out, run))
}

/// Reproducibility record written next to every output corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub pipeline_id: String,
    pub spec_hash: String,
    pub master_seed: u64,
    pub preserve_placeholders: bool,
    pub mechanism: Option<String>,
    pub epsilon: Option<f64>,
    pub corpus_sha256: String,
    pub store_sha256: Option<String>,
    pub output_sha256: String,
    pub docs: usize,
    pub failed_docs: usize,
    pub oov_count: usize,
    pub wall_time_s: f64,
    pub doc_status: Vec<DocStatus>,
}

impl RunManifest {
    pub fn new(
        run: &PipelineRun,
        corpus_sha256: String,
        store_sha256: Option<String>,
        output: &[u8],
    ) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            pipeline_id: run.pipeline_id.clone(),
            spec_hash: run.spec_hash.clone(),
            master_seed: run.master_seed,
            preserve_placeholders: run.preserve_placeholders,
            mechanism: run.mechanism.clone(),
            epsilon: run.epsilon,
            corpus_sha256,
            store_sha256,
            output_sha256: sha256_hex(output),
            docs: run.docs,
            failed_docs: run.failed_docs,
            oov_count: run.oov_count,
            wall_time_s: run.wall_time_s,
            doc_status: run.doc_status.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize output documents as JSON-Lines with provenance.
pub fn write_output<W: std::io::Write>(
    mut w: W,
    docs: &[Document],
    run: &PipelineRun,
) -> std::io::Result<()> {
    for (doc, st) in docs.iter().zip(&run.doc_status) {
        let rec = crate::corpus::OutputRecord::from_document(doc, st.error.clone());
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Category;
    use crate::mechanisms::MetricDpConfig;

    fn spec(json: &str) -> PipelineSpec {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn spec_parsing() {
        let s = spec(
            r#"{"stages":[{"type":"mask","annotations":"gold.jsonl","threshold":0.5},
                {"type":"privatize","mechanism":"rantext","epsilon":8,"rantext":{"k0":20,"k_min":5,"k_max":40}}]}"#,
        );
        assert!(s.preserve_placeholders);
        assert_eq!(s.oov_policy, OovPolicy::PassThrough);
        assert!(validate_spec(&s).is_empty());
        let StageSpec::Privatize(cfg) = &s.stages[1] else {
            panic!()
        };
        assert_eq!(cfg.rantext.k0, 20);
        let back: PipelineSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn validation_diagnostics() {
        let two = spec(
            r#"{"stages":[{"type":"privatize","mechanism":"metric_dp","epsilon":8},
                {"type":"privatize","mechanism":"metric_dp","epsilon":8}]}"#,
        );
        assert!(has_errors(&validate_spec(&two)));

        let order = spec(
            r#"{"stages":[{"type":"privatize","mechanism":"metric_dp","epsilon":8},
                {"type":"mask","rules":"r.json"}]}"#,
        );
        let d = validate_spec(&order);
        assert!(!has_errors(&d));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
        assert!(d[0].message.contains("not a studied configuration"));

        assert!(has_errors(&validate_spec(&spec(r#"{"stages":[]}"#))));
        assert!(has_errors(&validate_spec(&spec(
            r#"{"stages":[{"type":"mask","rules":"r.json"}],"oov_policy":"nearest_in_vocab"}"#
        ))));
        assert!(has_errors(&validate_spec(&spec(
            r#"{"stages":[{"type":"mask"}]}"#
        ))));
        assert!(has_errors(&validate_spec(&spec(
            r#"{"stages":[{"type":"privatize","mechanism":"metric_dp","epsilon":-1}]}"#
        ))));
    }

    #[test]
    fn store_required_for_privatize() {
        let corpus = Corpus::new(vec![Document::new("a", "x y")]).unwrap();
        let p = Pipeline::new("p")
            .privatize(MechanismConfig::metric_dp(8.0))
            .unwrap();
        assert!(matches!(
            run_pipeline(&corpus, &p, 1, ExecMode::Sequential),
            Err(PipelineError::StoreMissing)
        ));
        let s = spec(r#"{"stages":[{"type":"privatize","mechanism":"metric_dp","epsilon":8}]}"#);
        assert!(matches!(
            Pipeline::resolve(&s, Path::new("."), &corpus, None),
            Err(PipelineError::StoreMissing)
        ));
    }

    #[test]
    fn failing_document_is_withheld() {
        let corpus = Corpus::new(vec![
            Document::new("a", "Jan belt"),
            Document::new("b", "Piet belt"),
        ])
        .unwrap();
        // a span filed under the wrong document triggers CrossDocSpan
        let mut grouped = HashMap::new();
        grouped.insert(
            "a".to_string(),
            vec![PiiSpan::new("b", 0, 1, Category::Naam)],
        );
        grouped.insert(
            "b".to_string(),
            vec![PiiSpan::new("b", 0, 4, Category::Naam)],
        );
        let p = Pipeline {
            id: "p".into(),
            stages: vec![Stage::MaskAnnotations {
                spans: Arc::new(grouped),
                threshold: 0.0,
            }],
            preserve_placeholders: true,
            store: None,
            spec_hash: String::new(),
        };
        let (out, run) = run_pipeline(&corpus, &p, 0, ExecMode::Sequential).unwrap();
        assert_eq!(run.failed_docs, 1);
        assert!(run.doc_status[0].error.is_some());
        assert_eq!(out[0].text(), "");
        assert_eq!(out[1].text(), "<NAAM> belt");
    }

    #[test]
    fn oov_tokens_pass_through() {
        let store = Arc::new(crate::embeddings::random_store(20, 4, 0));
        let corpus = Corpus::new(vec![Document::new("a", "onbekend tok3 woord")]).unwrap();
        let p = Pipeline::new("p")
            .privatize_with(Arc::new(crate::mechanisms::MetricDp(
                MetricDpConfig::new(1e9).unwrap(),
            )))
            .with_store(store);
        let (out, run) = run_pipeline(&corpus, &p, 3, ExecMode::Sequential).unwrap();
        assert_eq!(run.oov_count, 2);
        assert_eq!(run.privatized_tokens, 1);
        assert_eq!(out[0].text(), "onbekend tok3 woord");
    }
}

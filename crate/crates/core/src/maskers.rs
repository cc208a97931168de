//! Masking stages that replace PII spans with category placeholders.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{filter_by_confidence, Category, CorpusError, Document, Edit, PiiSpan, Span};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("rule {index} ({category}): regex does not compile: {source}")]
    RegexCompile {
        index: usize,
        category: Category,
        #[source]
        source: regex::Error,
    },
    #[error("rule {index} ({category}): dictionary is empty or contains an empty entry")]
    EmptyDictionary { index: usize, category: Category },
    #[error("rule {index}: exactly one of \"dictionary\" and \"regex\" must be given")]
    AmbiguousRule { index: usize },
    #[error("span for document {span_doc:?} applied to document {doc:?}")]
    CrossDocSpan { doc: String, span_doc: String },
    #[error("rules file: {0}")]
    RulesFile(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone)]
pub enum Matcher {
    Dictionary(Vec<String>),
    Regex(Regex),
}

#[derive(Debug, Clone)]
pub struct MaskRule {
    pub category: Category,
    pub matcher: Matcher,
}

impl MaskRule {
    pub fn dictionary<S: Into<String>>(
        category: Category,
        entries: impl IntoIterator<Item = S>,
    ) -> Result<Self, MaskError> {
        RuleSpec {
            category,
            dictionary: Some(entries.into_iter().map(Into::into).collect()),
            regex: None,
        }
        .compile(0)
    }

    pub fn regex(category: Category, pattern: &str) -> Result<Self, MaskError> {
        RuleSpec {
            category,
            dictionary: None,
            regex: Some(pattern.to_string()),
        }
        .compile(0)
    }

    fn find(&self, text: &str, out: &mut Vec<Span>) {
        match &self.matcher {
            Matcher::Regex(re) => out.extend(
                re.find_iter(text)
                    .filter(|m| !m.is_empty())
                    .map(|m| Span::new(m.start(), m.end())),
            ),
            Matcher::Dictionary(entries) => {
                for e in entries {
                    out.extend(
                        text.match_indices(e.as_str())
                            .map(|(s, m)| Span::new(s, s + m.len()))
                            .filter(|sp| on_word_boundary(text, *sp)),
                    );
                }
            }
        }
    }
}

/// Dictionary entries only match whole words.
fn on_word_boundary(text: &str, span: Span) -> bool {
    let before = text[..span.start].chars().next_back();
    let after = text[span.end..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

/// Rules file entry: `{"category": "NAAM", "dictionary": [...]}` or `{"category": "TELNR", "regex": "..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
}

impl RuleSpec {
    pub fn compile(&self, index: usize) -> Result<MaskRule, MaskError> {
        let matcher = match (&self.dictionary, &self.regex) {
            (Some(d), None) => {
                if d.is_empty() || d.iter().any(String::is_empty) {
                    return Err(MaskError::EmptyDictionary {
                        index,
                        category: self.category,
                    });
                }
                Matcher::Dictionary(d.clone())
            }
            (None, Some(p)) => {
                Matcher::Regex(Regex::new(p).map_err(|source| MaskError::RegexCompile {
                    index,
                    category: self.category,
                    source,
                })?)
            }
            _ => return Err(MaskError::AmbiguousRule { index }),
        };
        Ok(MaskRule {
            category: self.category,
            matcher,
        })
    }
}

pub fn compile_rules(specs: &[RuleSpec]) -> Result<Vec<MaskRule>, MaskError> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| s.compile(i))
        .collect()
}

pub fn load_rules(path: &Path) -> Result<Vec<MaskRule>, MaskError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| MaskError::RulesFile(format!("{}: {e}", path.display())))?;
    let specs: Vec<RuleSpec> = serde_json::from_str(&raw)
        .map_err(|e| MaskError::RulesFile(format!("{}: {e}", path.display())))?;
    compile_rules(&specs)
}

/// Greedy selection of non-overlapping spans in priority order; result sorted by start.
///
/// Taking candidates in priority order and keeping each that fits yields the
/// lexicographically best selection with respect to that order.
pub(crate) fn select_non_overlapping<T>(
    mut cands: Vec<T>,
    span: impl Fn(&T) -> Span,
    priority: impl Fn(&T, &T) -> std::cmp::Ordering,
) -> Vec<T> {
    cands.sort_by(&priority);
    let mut chosen: Vec<T> = Vec::new();
    for c in cands {
        let s = span(&c);
        if chosen.iter().all(|k| !span(k).overlaps(&s)) {
            chosen.push(c);
        }
    }
    chosen.sort_by_key(|c| span(c).start);
    chosen
}

/// Mask every rule match; longer matches win, then the leftmost, then the earlier rule.
///
/// Returns the masked document and the predicted spans on source offsets.
pub fn rule_mask(doc: &Document, rules: &[MaskRule]) -> (Document, Vec<PiiSpan>) {
    let mut cands: Vec<(Span, usize)> = Vec::new();
    let mut buf = Vec::new();
    for (ri, rule) in rules.iter().enumerate() {
        buf.clear();
        rule.find(doc.text(), &mut buf);
        cands.extend(buf.iter().map(|&s| (s, ri)));
    }
    let existing: Vec<Span> = doc
        .tokens()
        .iter()
        .filter(|t| t.is_placeholder())
        .map(|t| t.span())
        .collect();
    cands.retain(|(s, _)| existing.iter().all(|p| !p.overlaps(s)));

    let chosen = select_non_overlapping(
        cands,
        |c| c.0,
        |a, b| {
            b.0.len()
                .cmp(&a.0.len())
                .then(a.0.start.cmp(&b.0.start))
                .then(a.1.cmp(&b.1))
        },
    );
    if chosen.is_empty() {
        return (doc.clone(), Vec::new());
    }
    let mut predicted = Vec::with_capacity(chosen.len());
    let edits: Vec<Edit> = chosen
        .iter()
        .map(|&(range, ri)| {
            let category = rules[ri].category;
            let src = doc.map_to_source(range).unwrap_or(range);
            predicted.push(PiiSpan::new(doc.doc_id(), src.start, src.end, category));
            Edit {
                range,
                replacement: category.placeholder(),
            }
        })
        .collect();
    (doc.with_edits_retokenized(&edits), predicted)
}

/// Replace annotated source spans with placeholders.
///
/// Spans below `threshold` are dropped; overlaps are resolved by higher
/// confidence, then longer span, then leftmost start.
pub fn apply_annotations(
    doc: &Document,
    spans: &[PiiSpan],
    threshold: f64,
) -> Result<Document, MaskError> {
    let kept = filter_by_confidence(spans, threshold)?;
    for s in &kept {
        if s.doc_id != doc.doc_id() {
            return Err(MaskError::CrossDocSpan {
                doc: doc.doc_id().to_string(),
                span_doc: s.doc_id.clone(),
            });
        }
        doc.check_source_span(s.span())?;
    }
    let chosen = select_non_overlapping(kept, PiiSpan::span, |a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(b.span().len().cmp(&a.span().len()))
            .then(a.start.cmp(&b.start))
    });
    let mut mapped: Vec<(Span, Category)> = chosen
        .iter()
        .filter_map(|s| doc.map_from_source(s.span()).map(|r| (r, s.category)))
        .collect();
    // two source spans can land in the same replaced region of an already transformed text
    mapped.dedup_by(|b, a| a.0.overlaps(&b.0));
    if mapped.is_empty() {
        return Ok(doc.clone());
    }
    let edits: Vec<Edit> = mapped
        .into_iter()
        .map(|(range, c)| Edit {
            range,
            replacement: c.placeholder(),
        })
        .collect();
    Ok(doc.with_edits_retokenized(&edits))
}

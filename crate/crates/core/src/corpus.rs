//! Document model, tokenization, annotation ingestion and provenance.
//!
//! Every [`Document`] keeps the original source text next to its current
//! (possibly transformed) text. Each current token carries the source byte
//! span it was derived from, which is what the leakage and survival scorers
//! align against.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown category {name:?}")]
    UnknownCategory { line: usize, name: String },
    #[error("{doc_id}: span {start}..{end} is out of bounds or not on a character boundary")]
    SpanOutOfBounds {
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("line {line}: unknown document {doc_id:?}")]
    UnknownDocument { line: usize, doc_id: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("line {line}: confidence {value} outside [0, 1]")]
    InvalidConfidence { line: usize, value: f64 },
    #[error("confidence threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The seventeen PII placeholder categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "AFDELING")]
    Afdeling,
    #[serde(rename = "APOTHEEK")]
    Apotheek,
    #[serde(rename = "ARTS")]
    Arts,
    #[serde(rename = "EHR")]
    Ehr,
    #[serde(rename = "FEESTDAG")]
    Feestdag,
    #[serde(rename = "GEBOORTEDATUM")]
    Geboortedatum,
    #[serde(rename = "NAAM")]
    Naam,
    #[serde(rename = "RARE_DISEASE")]
    RareDisease,
    #[serde(rename = "RARE_DISEASE_TREATMENT")]
    RareDiseaseTreatment,
    #[serde(rename = "REVALIDATIECENTRUM")]
    Revalidatiecentrum,
    #[serde(rename = "SEIN")]
    Sein,
    #[serde(rename = "STAD")]
    Stad,
    #[serde(rename = "TELNR")]
    Telnr,
    #[serde(rename = "TRIAL-ID")]
    TrialId,
    #[serde(rename = "ZIEKENBOEG")]
    Ziekenboeg,
    #[serde(rename = "ZIEKENHUIS")]
    Ziekenhuis,
    #[serde(rename = "ZKH")]
    Zkh,
}

impl Category {
    pub const ALL: [Category; 17] = [
        Category::Afdeling,
        Category::Apotheek,
        Category::Arts,
        Category::Ehr,
        Category::Feestdag,
        Category::Geboortedatum,
        Category::Naam,
        Category::RareDisease,
        Category::RareDiseaseTreatment,
        Category::Revalidatiecentrum,
        Category::Sein,
        Category::Stad,
        Category::Telnr,
        Category::TrialId,
        Category::Ziekenboeg,
        Category::Ziekenhuis,
        Category::Zkh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Afdeling => "AFDELING",
            Category::Apotheek => "APOTHEEK",
            Category::Arts => "ARTS",
            Category::Ehr => "EHR",
            Category::Feestdag => "FEESTDAG",
            Category::Geboortedatum => "GEBOORTEDATUM",
            Category::Naam => "NAAM",
            Category::RareDisease => "RARE_DISEASE",
            Category::RareDiseaseTreatment => "RARE_DISEASE_TREATMENT",
            Category::Revalidatiecentrum => "REVALIDATIECENTRUM",
            Category::Sein => "SEIN",
            Category::Stad => "STAD",
            Category::Telnr => "TELNR",
            Category::TrialId => "TRIAL-ID",
            Category::Ziekenboeg => "ZIEKENBOEG",
            Category::Ziekenhuis => "ZIEKENHUIS",
            Category::Zkh => "ZKH",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }

    /// `<NAAM>`, `<TRIAL-ID>`, ...
    pub fn placeholder(self) -> String {
        format!("<{}>", self.name())
    }

    pub fn directness(self) -> Directness {
        match self {
            Category::Arts
            | Category::Ehr
            | Category::Geboortedatum
            | Category::Naam
            | Category::Stad
            | Category::Telnr => Directness::Direct,
            _ => Directness::Indirect,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::from_name(s).ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Directness {
    Direct,
    Indirect,
}

/// Half-open byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn hull(&self, other: &Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    Placeholder,
}

/// A token of a document's current text. `start`/`end` are byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub kind: TokenKind,
}

impl Token {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn is_placeholder(&self) -> bool {
        self.kind == TokenKind::Placeholder
    }
}

static PLACEHOLDER_LIKE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<[A-Z_\-]+>").expect("static regex"));

/// Kind of a standalone token text.
pub fn classify(text: &str) -> TokenKind {
    match text
        .strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .and_then(Category::from_name)
    {
        Some(_) => TokenKind::Placeholder,
        None => TokenKind::Word,
    }
}

/// Whitespace + punctuation tokenizer.
///
/// Splits on Unicode whitespace, keeps every `<[A-Z_-]+>` match as one token
/// (a placeholder when the name is a known category) and peels leading and
/// trailing non-alphanumeric characters off the remaining pieces, one token
/// per character.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut chunk_start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), chunk_start) {
            (true, Some(s)) => {
                tokenize_chunk(text, s, i, &mut out);
                chunk_start = None;
            }
            (false, None) => chunk_start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = chunk_start {
        tokenize_chunk(text, s, text.len(), &mut out);
    }
    out
}

fn tokenize_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let chunk = &text[start..end];
    let mut cursor = 0;
    for m in PLACEHOLDER_LIKE.find_iter(chunk) {
        split_punctuation(text, start + cursor, start + m.start(), out);
        out.push(Token {
            text: m.as_str().to_string(),
            start: start + m.start(),
            end: start + m.end(),
            kind: classify(m.as_str()),
        });
        cursor = m.end();
    }
    split_punctuation(text, start + cursor, end, out);
}

fn split_punctuation(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    if start >= end {
        return;
    }
    let piece = &text[start..end];
    let mut push = |s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_string(),
            start: s,
            end: e,
            kind: TokenKind::Word,
        })
    };
    let first_alnum = piece.char_indices().find(|(_, c)| c.is_alphanumeric());
    let Some((core_start, _)) = first_alnum else {
        for (i, c) in piece.char_indices() {
            push(start + i, start + i + c.len_utf8());
        }
        return;
    };
    let (last_idx, last_char) = piece
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .expect("an alphanumeric char exists");
    let core_end = last_idx + last_char.len_utf8();
    for (i, c) in piece[..core_start].char_indices() {
        push(start + i, start + i + c.len_utf8());
    }
    push(start + core_start, start + core_end);
    for (i, c) in piece[core_end..].char_indices() {
        let s = start + core_end + i;
        push(s, s + c.len_utf8());
    }
}

/// Rebuild a text from tokens plus the gaps between them in `text`.
pub fn untokenize(text: &str, tokens: &[Token]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for t in tokens {
        out.push_str(&text[cursor..t.start]);
        out.push_str(&t.text);
        cursor = t.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Maps a stretch of current text back to the source text.
///
/// Literal segments map byte-for-byte; replaced segments map as a whole to
/// the source span they stand for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    out: Span,
    src: Span,
    literal: bool,
}

impl Segment {
    fn clip(&self, a: usize, b: usize) -> Segment {
        let out = Span::new(a.max(self.out.start), b.min(self.out.end));
        if self.literal {
            let src = Span::new(
                self.src.start + (out.start - self.out.start),
                self.src.start + (out.end - self.out.start),
            );
            Segment {
                out,
                src,
                literal: true,
            }
        } else {
            Segment {
                out,
                src: self.src,
                literal: false,
            }
        }
    }
}

/// Replace `range` of the current text with `replacement`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Edit {
    pub range: Span,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    doc_id: String,
    source_text: Arc<str>,
    text: String,
    tokens: Vec<Token>,
    provenance: Vec<Span>,
    segments: Vec<Segment>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text: String = text.into();
        let tokens = tokenize(&text);
        let provenance = tokens.iter().map(Token::span).collect();
        let segments = if text.is_empty() {
            Vec::new()
        } else {
            let all = Span::new(0, text.len());
            vec![Segment {
                out: all,
                src: all,
                literal: true,
            }]
        };
        Document {
            doc_id: doc_id.into(),
            source_text: Arc::from(text.as_str()),
            text,
            tokens,
            provenance,
            segments,
        }
    }

    /// Reassemble a transformed document from its serialized parts.
    ///
    /// Tokens whose text equals their source slice are aligned literally;
    /// everything else maps as a whole to its provenance span.
    pub fn from_parts(
        doc_id: impl Into<String>,
        source_text: Arc<str>,
        text: String,
        token_spans: &[(Span, Span)],
    ) -> Result<Self, CorpusError> {
        let doc_id = doc_id.into();
        let mut tokens = Vec::with_capacity(token_spans.len());
        let mut provenance = Vec::with_capacity(token_spans.len());
        let mut segments = Vec::new();
        let mut cursor = 0;
        let mut src_cursor = 0;
        for &(out, src) in token_spans {
            let bad_out = out.is_empty()
                || out.start < cursor
                || out.end > text.len()
                || !text.is_char_boundary(out.start)
                || !text.is_char_boundary(out.end);
            let bad_src = src.is_empty()
                || src.end > source_text.len()
                || !source_text.is_char_boundary(src.start)
                || !source_text.is_char_boundary(src.end);
            if bad_out || bad_src {
                return Err(CorpusError::SpanOutOfBounds {
                    doc_id,
                    start: if bad_out { out.start } else { src.start },
                    end: if bad_out { out.end } else { src.end },
                });
            }
            if out.start > cursor {
                let gap_src = Span::new(src_cursor.min(src.start), src.start.max(src_cursor));
                segments.push(Segment {
                    out: Span::new(cursor, out.start),
                    src: gap_src,
                    literal: false,
                });
            }
            let piece = &text[out.start..out.end];
            segments.push(Segment {
                out,
                src,
                literal: &source_text[src.start..src.end] == piece,
            });
            tokens.push(Token {
                text: piece.to_string(),
                start: out.start,
                end: out.end,
                kind: classify(piece),
            });
            provenance.push(src);
            cursor = out.end;
            src_cursor = src.end;
        }
        if cursor < text.len() {
            segments.push(Segment {
                out: Span::new(cursor, text.len()),
                src: Span::new(src_cursor, source_text.len().max(src_cursor)),
                literal: false,
            });
        }
        Ok(Document {
            doc_id,
            source_text,
            text,
            tokens,
            provenance,
            segments,
        })
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub(crate) fn source_arc(&self) -> Arc<str> {
        Arc::clone(&self.source_text)
    }

    /// Current text.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Source span of each current token, index-aligned with [`Self::tokens`].
    pub fn provenance(&self) -> &[Span] {
        &self.provenance
    }

    /// Tokens of the untransformed source text.
    pub fn source_tokens(&self) -> Vec<Token> {
        tokenize(&self.source_text)
    }

    pub fn is_untransformed(&self) -> bool {
        *self.text == *self.source_text
    }

    /// Token texts joined with the gaps of the current text.
    pub fn untokenize(&self) -> String {
        untokenize(&self.text, &self.tokens)
    }

    /// Source span covered by a range of the current text.
    pub fn map_to_source(&self, range: Span) -> Option<Span> {
        let mut hull: Option<Span> = None;
        for seg in &self.segments {
            let touches = if range.is_empty() {
                seg.out.start <= range.start && range.start < seg.out.end
            } else {
                seg.out.overlaps(&range)
            };
            if !touches {
                continue;
            }
            let mapped = if range.is_empty() {
                seg.clip(range.start, range.start + 1).src
            } else {
                seg.clip(range.start, range.end).src
            };
            hull = Some(hull.map_or(mapped, |h| h.hull(&mapped)));
        }
        hull
    }

    /// Range of the current text that covers a source span.
    pub fn map_from_source(&self, span: Span) -> Option<Span> {
        let mut hull: Option<Span> = None;
        for seg in &self.segments {
            if !seg.src.overlaps(&span) {
                continue;
            }
            let mapped = if seg.literal {
                let a = span.start.max(seg.src.start);
                let b = span.end.min(seg.src.end);
                Span::new(
                    seg.out.start + (a - seg.src.start),
                    seg.out.start + (b - seg.src.start),
                )
            } else {
                seg.out
            };
            hull = Some(hull.map_or(mapped, |h| h.hull(&mapped)));
        }
        hull
    }

    pub fn check_source_span(&self, span: Span) -> Result<(), CorpusError> {
        let src = &self.source_text;
        if span.start >= span.end
            || span.end > src.len()
            || !src.is_char_boundary(span.start)
            || !src.is_char_boundary(span.end)
        {
            return Err(CorpusError::SpanOutOfBounds {
                doc_id: self.doc_id.clone(),
                start: span.start,
                end: span.end,
            });
        }
        Ok(())
    }

    /// Apply sorted, non-overlapping edits and return the new text and alignment.
    fn apply_edits(&self, edits: &[Edit]) -> (String, Vec<Segment>) {
        let mut text = String::with_capacity(self.text.len());
        let mut segments: Vec<Segment> = Vec::with_capacity(self.segments.len() + edits.len());
        let mut cursor = 0;
        let push_kept = |text: &mut String, segments: &mut Vec<Segment>, a: usize, b: usize| {
            if a >= b {
                return;
            }
            let shift = text.len() as isize - a as isize;
            for seg in &self.segments {
                if seg.out.end <= a || seg.out.start >= b {
                    continue;
                }
                let mut c = seg.clip(a, b);
                c.out = Span::new(
                    (c.out.start as isize + shift) as usize,
                    (c.out.end as isize + shift) as usize,
                );
                segments.push(c);
            }
            text.push_str(&self.text[a..b]);
        };
        for edit in edits {
            push_kept(&mut text, &mut segments, cursor, edit.range.start);
            let src = self
                .map_to_source(edit.range)
                .unwrap_or(Span::new(edit.range.start, edit.range.end));
            let start = text.len();
            text.push_str(&edit.replacement);
            if !edit.replacement.is_empty() {
                segments.push(Segment {
                    out: Span::new(start, text.len()),
                    src,
                    literal: false,
                });
            }
            cursor = edit.range.end;
        }
        push_kept(&mut text, &mut segments, cursor, self.text.len());
        (text, segments)
    }

    /// Apply edits to the current text and re-tokenize the result.
    pub(crate) fn with_edits_retokenized(&self, edits: &[Edit]) -> Document {
        let (text, segments) = self.apply_edits(edits);
        let tokens = tokenize(&text);
        let mut doc = Document {
            doc_id: self.doc_id.clone(),
            source_text: self.source_arc(),
            text,
            tokens,
            provenance: Vec::new(),
            segments,
        };
        doc.provenance = doc
            .tokens
            .iter()
            .map(|t| doc.map_to_source(t.span()).unwrap_or(t.span()))
            .collect();
        doc
    }

    /// Replace individual tokens, keeping token boundaries and provenance.
    ///
    /// `replacements[i] = Some(s)` substitutes token `i` with `s`.
    pub(crate) fn with_token_replacements(&self, replacements: &[Option<String>]) -> Document {
        debug_assert_eq!(replacements.len(), self.tokens.len());
        let edits: Vec<Edit> = self
            .tokens
            .iter()
            .zip(replacements)
            .filter_map(|(t, r)| {
                r.as_ref().filter(|r| **r != t.text).map(|r| Edit {
                    range: t.span(),
                    replacement: r.clone(),
                })
            })
            .collect();
        let (text, segments) = self.apply_edits(&edits);
        let mut tokens = Vec::with_capacity(self.tokens.len());
        let mut shift: isize = 0;
        for (t, r) in self.tokens.iter().zip(replacements) {
            let start = (t.start as isize + shift) as usize;
            match r {
                Some(r) if *r != t.text => {
                    shift += r.len() as isize - t.text.len() as isize;
                    tokens.push(Token {
                        text: r.clone(),
                        start,
                        end: start + r.len(),
                        kind: TokenKind::Word,
                    });
                }
                _ => tokens.push(Token {
                    text: t.text.clone(),
                    start,
                    end: start + t.text.len(),
                    kind: t.kind,
                }),
            }
        }
        Document {
            doc_id: self.doc_id.clone(),
            source_text: self.source_arc(),
            text,
            tokens,
            provenance: self.provenance.clone(),
            segments,
        }
    }

    /// Same document id and source with the text withheld.
    pub(crate) fn withheld(&self) -> Document {
        Document {
            doc_id: self.doc_id.clone(),
            source_text: self.source_arc(),
            text: String::new(),
            tokens: Vec::new(),
            provenance: Vec::new(),
            segments: Vec::new(),
        }
    }
}

/// A gold or predicted PII annotation on source byte offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PiiSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub category: Category,
    pub confidence: f64,
}

impl PiiSpan {
    pub fn new(doc_id: impl Into<String>, start: usize, end: usize, category: Category) -> Self {
        PiiSpan {
            doc_id: doc_id.into(),
            start,
            end,
            category,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn directness(&self) -> Directness {
        self.category.directness()
    }
}

/// Annotation line in the JSON-Lines exchange format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub category: String,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl From<&PiiSpan> for AnnotationRecord {
    fn from(s: &PiiSpan) -> Self {
        AnnotationRecord {
            doc_id: s.doc_id.clone(),
            start: s.start,
            end: s.end,
            category: s.category.name().to_string(),
            confidence: s.confidence,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    doc_id: String,
    text: String,
}

/// An ordered collection of documents indexed by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if index.insert(d.doc_id().to_string(), i).is_some() {
                return Err(CorpusError::DuplicateDocument(d.doc_id().to_string()));
            }
        }
        Ok(Corpus { docs, index })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn into_docs(self) -> Vec<Document> {
        self.docs
    }

    pub fn word_count(&self) -> usize {
        self.docs
            .iter()
            .map(|d| d.tokens().iter().filter(|t| is_wordlike(&t.text)).count())
            .sum()
    }
}

/// Tokens with at least one alphanumeric character.
pub fn is_wordlike(text: &str) -> bool {
    text.chars().any(char::is_alphanumeric)
}

fn read_lines(
    path: &Path,
) -> Result<impl Iterator<Item = (usize, Result<String, std::io::Error>)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(Document::new(rec.doc_id, rec.text));
    }
    Corpus::new(docs)
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_corpus(BufReader::new(file))
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> std::io::Result<()> {
    for d in corpus.docs() {
        let rec = CorpusRecord {
            doc_id: d.doc_id().to_string(),
            text: d.source_text().to_string(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse annotation JSON-Lines against a corpus.
pub fn parse_annotations<R: BufRead>(
    reader: R,
    corpus: &Corpus,
) -> Result<Vec<PiiSpan>, CorpusError> {
    let mut spans = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let category =
            Category::from_name(&rec.category).ok_or_else(|| CorpusError::UnknownCategory {
                line: line_no,
                name: rec.category.clone(),
            })?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(CorpusError::InvalidConfidence {
                line: line_no,
                value: rec.confidence,
            });
        }
        let doc = corpus
            .get(&rec.doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument {
                line: line_no,
                doc_id: rec.doc_id.clone(),
            })?;
        doc.check_source_span(Span::new(rec.start, rec.end))?;
        spans.push(PiiSpan {
            doc_id: rec.doc_id,
            start: rec.start,
            end: rec.end,
            category,
            confidence: rec.confidence,
        });
    }
    Ok(spans)
}

pub fn load_annotations(path: &Path, corpus: &Corpus) -> Result<Vec<PiiSpan>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_annotations(BufReader::new(file), corpus)
}

pub fn write_annotations<W: Write>(mut w: W, spans: &[PiiSpan]) -> std::io::Result<()> {
    for s in spans {
        serde_json::to_writer(&mut w, &AnnotationRecord::from(s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Keep spans with `confidence >= threshold`, in order.
pub fn filter_by_confidence(
    spans: &[PiiSpan],
    threshold: f64,
) -> Result<Vec<PiiSpan>, CorpusError> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(CorpusError::InvalidThreshold(threshold));
    }
    Ok(spans
        .iter()
        .filter(|s| s.confidence >= threshold)
        .cloned()
        .collect())
}

/// Group spans by document id, preserving order within each document.
pub fn group_by_doc(spans: &[PiiSpan]) -> HashMap<String, Vec<PiiSpan>> {
    let mut map: HashMap<String, Vec<PiiSpan>> = HashMap::new();
    for s in spans {
        map.entry(s.doc_id.clone()).or_default().push(s.clone());
    }
    map
}

/// Drug / disorder mention used for survival scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub doc_id: String,
    pub id: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Relation between two entities of the same document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub doc_id: String,
    pub id: String,
    pub head: String,
    pub tail: String,
    pub label: String,
}

/// One line of the entity/relation annotation file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UtilityRecord {
    Entity(EntityAnnotation),
    Relation(RelationAnnotation),
}

#[derive(Debug, Clone, Default)]
pub struct UtilityAnnotations {
    pub entities: Vec<EntityAnnotation>,
    pub relations: Vec<RelationAnnotation>,
}

impl UtilityAnnotations {
    pub fn for_doc(&self, doc_id: &str) -> (Vec<&EntityAnnotation>, Vec<&RelationAnnotation>) {
        (
            self.entities
                .iter()
                .filter(|e| e.doc_id == doc_id)
                .collect(),
            self.relations
                .iter()
                .filter(|r| r.doc_id == doc_id)
                .collect(),
        )
    }
}

pub fn load_utility_annotations(
    path: &Path,
    corpus: &Corpus,
) -> Result<UtilityAnnotations, CorpusError> {
    let mut out = UtilityAnnotations::default();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtilityRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let doc_id = match &rec {
            UtilityRecord::Entity(e) => &e.doc_id,
            UtilityRecord::Relation(r) => &r.doc_id,
        };
        let doc = corpus
            .get(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument {
                line: line_no,
                doc_id: doc_id.clone(),
            })?;
        match rec {
            UtilityRecord::Entity(e) => {
                doc.check_source_span(Span::new(e.start, e.end))?;
                out.entities.push(e);
            }
            UtilityRecord::Relation(r) => out.relations.push(r),
        }
    }
    Ok(out)
}

pub fn write_utility_annotations<W: Write>(
    mut w: W,
    ann: &UtilityAnnotations,
) -> std::io::Result<()> {
    for e in &ann.entities {
        serde_json::to_writer(&mut w, &UtilityRecord::Entity(e.clone()))?;
        w.write_all(b"\n")?;
    }
    for r in &ann.relations {
        serde_json::to_writer(&mut w, &UtilityRecord::Relation(r.clone()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub start: usize,
    pub end: usize,
    pub source_start: usize,
    pub source_end: usize,
}

/// Output corpus line: the de-identified text plus per-token provenance.
#[derive(Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub doc_id: String,
    pub text: String,
    pub provenance: Vec<ProvenanceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

impl OutputRecord {
    pub fn from_document(doc: &Document, status: Option<String>) -> Self {
        OutputRecord {
            doc_id: doc.doc_id().to_string(),
            text: doc.text().to_string(),
            provenance: doc
                .tokens()
                .iter()
                .zip(doc.provenance())
                .map(|(t, p)| ProvenanceEntry {
                    start: t.start,
                    end: t.end,
                    source_start: p.start,
                    source_end: p.end,
                })
                .collect(),
            status,
        }
    }
}

/// Read an output corpus, re-attaching each record to its source document.
pub fn read_output_corpus(
    path: &Path,
    sources: &Corpus,
) -> Result<Vec<(Document, Option<String>)>, CorpusError> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutputRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let src = sources
            .get(&rec.doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument {
                line: line_no,
                doc_id: rec.doc_id.clone(),
            })?;
        let spans: Vec<(Span, Span)> = rec
            .provenance
            .iter()
            .map(|p| {
                (
                    Span::new(p.start, p.end),
                    Span::new(p.source_start, p.source_end),
                )
            })
            .collect();
        let doc = Document::from_parts(rec.doc_id, src.source_arc(), rec.text, &spans)?;
        out.push((doc, rec.status));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t ").is_empty());
    }

    #[test]
    fn placeholder_is_single_token() {
        let toks = tokenize("Patient <NAAM> kwam binnen.");
        assert_eq!(texts(&toks), ["Patient", "<NAAM>", "kwam", "binnen", "."]);
        assert_eq!(toks[1].kind, TokenKind::Placeholder);
        assert!(toks
            .iter()
            .enumerate()
            .all(|(i, t)| i == 1 || t.kind == TokenKind::Word));
    }

    #[test]
    fn unknown_placeholder_is_a_word() {
        let toks = tokenize("zie <FOO>, en <TRIAL-ID>.");
        assert_eq!(texts(&toks), ["zie", "<FOO>", ",", "en", "<TRIAL-ID>", "."]);
        assert_eq!(toks[1].kind, TokenKind::Word);
        assert_eq!(toks[4].kind, TokenKind::Placeholder);
    }

    #[test]
    fn offsets_are_bytes() {
        let toks = tokenize("één café");
        assert_eq!(texts(&toks), ["één", "café"]);
        assert_eq!((toks[0].start, toks[0].end), (0, 5));
        assert_eq!((toks[1].start, toks[1].end), (6, 11));
    }

    #[test]
    fn directness_table() {
        let direct: Vec<_> = Category::ALL
            .into_iter()
            .filter(|c| c.directness() == Directness::Direct)
            .map(Category::name)
            .collect();
        assert_eq!(
            direct,
            ["ARTS", "EHR", "GEBOORTEDATUM", "NAAM", "STAD", "TELNR"]
        );
        for c in Category::ALL {
            assert_eq!(Category::from_name(c.name()), Some(c));
        }
    }

    #[test]
    fn annotation_directness_and_errors() {
        let corpus =
            Corpus::new(vec![Document::new("d1", "Patient Jansen belt apotheek.")]).unwrap();
        let ok = r#"{"doc_id":"d1","start":8,"end":14,"category":"NAAM","confidence":0.93}
{"doc_id":"d1","start":20,"end":28,"category":"APOTHEEK","confidence":0.5}"#;
        let spans = parse_annotations(ok.as_bytes(), &corpus).unwrap();
        assert_eq!(spans[0].directness(), Directness::Direct);
        assert_eq!(spans[1].directness(), Directness::Indirect);

        let inverted = r#"{"doc_id":"d1","start":12,"end":12,"category":"NAAM","confidence":1.0}"#;
        assert!(matches!(
            parse_annotations(inverted.as_bytes(), &corpus),
            Err(CorpusError::SpanOutOfBounds { .. })
        ));
        let past_end = r#"{"doc_id":"d1","start":20,"end":99,"category":"NAAM"}"#;
        assert!(matches!(
            parse_annotations(past_end.as_bytes(), &corpus),
            Err(CorpusError::SpanOutOfBounds { .. })
        ));
        let unknown = r#"{"doc_id":"d1","start":0,"end":3,"category":"FOO"}"#;
        assert!(matches!(
            parse_annotations(unknown.as_bytes(), &corpus),
            Err(CorpusError::UnknownCategory { line: 1, .. })
        ));
        let bad = "\n{\"doc_id\":";
        assert!(matches!(
            parse_annotations(bad.as_bytes(), &corpus),
            Err(CorpusError::Parse { line: 2, .. })
        ));
        let other_doc = r#"{"doc_id":"d9","start":0,"end":3,"category":"NAAM"}"#;
        assert!(matches!(
            parse_annotations(other_doc.as_bytes(), &corpus),
            Err(CorpusError::UnknownDocument { .. })
        ));
    }

    #[test]
    fn confidence_filter() {
        let a = PiiSpan::new("d", 0, 1, Category::Naam).with_confidence(0.2);
        let b = PiiSpan::new("d", 2, 3, Category::Naam).with_confidence(0.9);
        let spans = vec![a, b.clone()];
        assert_eq!(filter_by_confidence(&spans, 0.5).unwrap(), vec![b]);
        assert_eq!(filter_by_confidence(&spans, 0.0).unwrap(), spans);
        assert!(filter_by_confidence(&spans, 1.0).is_err());
        assert!(filter_by_confidence(&spans, -0.1).is_err());
    }

    #[test]
    fn token_replacement_keeps_gaps_and_provenance() {
        let doc = Document::new("d", "dr.  Jansen\tbelt");
        let mut repl = vec![None; doc.tokens().len()];
        repl[2] = Some("Vermeulen".to_string());
        let out = doc.with_token_replacements(&repl);
        assert_eq!(out.text(), "dr.  Vermeulen\tbelt");
        assert_eq!(out.tokens()[2].text, "Vermeulen");
        assert_eq!(out.provenance(), doc.provenance());
        assert_eq!(
            out.map_to_source(out.tokens()[3].span()),
            Some(Span::new(12, 16))
        );
        assert_eq!(
            out.map_from_source(Span::new(5, 11)),
            Some(out.tokens()[2].span())
        );
    }

    #[test]
    fn edits_map_back_to_source() {
        let doc = Document::new("d", "bel 06-1234 nu");
        let masked = doc.with_edits_retokenized(&[Edit {
            range: Span::new(4, 11),
            replacement: "<TELNR>".into(),
        }]);
        assert_eq!(masked.text(), "bel <TELNR> nu");
        assert_eq!(masked.provenance()[1], Span::new(4, 11));
        assert_eq!(masked.provenance()[2], Span::new(12, 14));
        assert_eq!(
            masked.map_from_source(Span::new(5, 7)),
            Some(Span::new(4, 11))
        );
    }

    #[test]
    fn from_parts_roundtrip() {
        let doc = Document::new("d", "Jansen belt <NAAM> nu");
        let mut repl = vec![None; doc.tokens().len()];
        repl[0] = Some("Pieters".into());
        let out = doc.with_token_replacements(&repl);
        let rec = OutputRecord::from_document(&out, None);
        let spans: Vec<_> = rec
            .provenance
            .iter()
            .map(|p| {
                (
                    Span::new(p.start, p.end),
                    Span::new(p.source_start, p.source_end),
                )
            })
            .collect();
        let back = Document::from_parts("d", doc.source_arc(), rec.text.clone(), &spans).unwrap();
        assert_eq!(back.tokens(), out.tokens());
        assert_eq!(back.provenance(), out.provenance());
    }
}

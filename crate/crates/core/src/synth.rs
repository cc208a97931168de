//! Synthetic Dutch clinical notes with planted PII, drug/disorder entities
//! and drug-disorder relations, plus a matching class-clustered embedding
//! store.
//!
//! Lexicons ship in `lexicon/` and are compiled in; a directory with the same
//! file names can replace them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    is_wordlike, tokenize, write_annotations, write_corpus, write_utility_annotations, Category,
    Corpus, CorpusError, Document, EntityAnnotation, PiiSpan, RelationAnnotation, TokenKind,
    UtilityAnnotations,
};
use crate::embeddings::{EmbeddingStore, StoreError};
use crate::maskers::RuleSpec;
use crate::mechanisms::stable_hash;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("lexicon file missing or unreadable: {path}: {message}")]
    LexiconMissing { path: PathBuf, message: String },
    #[error("lexicon {file}: {message}")]
    LexiconInvalid { file: &'static str, message: String },
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

const LEXICON_FILES: [(&str, &str); 18] = [
    (
        "first_names.txt",
        include_str!("../lexicon/first_names.txt"),
    ),
    ("last_names.txt", include_str!("../lexicon/last_names.txt")),
    ("cities.txt", include_str!("../lexicon/cities.txt")),
    ("hospitals.txt", include_str!("../lexicon/hospitals.txt")),
    (
        "hospital_abbreviations.txt",
        include_str!("../lexicon/hospital_abbreviations.txt"),
    ),
    (
        "departments.txt",
        include_str!("../lexicon/departments.txt"),
    ),
    ("pharmacies.txt", include_str!("../lexicon/pharmacies.txt")),
    ("holidays.txt", include_str!("../lexicon/holidays.txt")),
    (
        "rare_diseases.txt",
        include_str!("../lexicon/rare_diseases.txt"),
    ),
    (
        "rare_disease_treatments.txt",
        include_str!("../lexicon/rare_disease_treatments.txt"),
    ),
    (
        "rehabilitation_centres.txt",
        include_str!("../lexicon/rehabilitation_centres.txt"),
    ),
    ("sickbays.txt", include_str!("../lexicon/sickbays.txt")),
    (
        "ehr_systems.txt",
        include_str!("../lexicon/ehr_systems.txt"),
    ),
    ("drugs.txt", include_str!("../lexicon/drugs.txt")),
    ("disorders.txt", include_str!("../lexicon/disorders.txt")),
    ("filler.txt", include_str!("../lexicon/filler.txt")),
    (
        "pii_templates.txt",
        include_str!("../lexicon/pii_templates.txt"),
    ),
    (
        "utility_templates.txt",
        include_str!("../lexicon/utility_templates.txt"),
    ),
];

fn entries(raw: &str) -> Vec<String> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Word lists and sentence templates.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub cities: Vec<String>,
    pub hospitals: Vec<String>,
    pub hospital_abbreviations: Vec<String>,
    pub departments: Vec<String>,
    pub pharmacies: Vec<String>,
    pub holidays: Vec<String>,
    pub rare_diseases: Vec<String>,
    pub rare_disease_treatments: Vec<String>,
    pub rehabilitation_centres: Vec<String>,
    pub sickbays: Vec<String>,
    pub ehr_systems: Vec<String>,
    pub drugs: Vec<String>,
    pub disorders: Vec<String>,
    pub filler: Vec<String>,
    /// (category, prefix, suffix) around the identifier slot.
    pub pii_templates: Vec<(Category, String, String)>,
    pub utility_templates: Vec<String>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_files(|name| {
            LEXICON_FILES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, raw)| raw.to_string())
                .ok_or_else(|| SynthError::LexiconMissing {
                    path: name.into(),
                    message: "not built in".into(),
                })
        })
        .expect("built-in lexicon is valid")
    }

    /// Reads every lexicon file from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, SynthError> {
        Self::from_files(|name| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| SynthError::LexiconMissing {
                path,
                message: e.to_string(),
            })
        })
    }

    fn from_files(
        read: impl Fn(&'static str) -> Result<String, SynthError>,
    ) -> Result<Self, SynthError> {
        let list = |file: &'static str| -> Result<Vec<String>, SynthError> {
            let e = entries(&read(file)?);
            if e.is_empty() {
                return Err(SynthError::LexiconInvalid {
                    file,
                    message: "no entries".into(),
                });
            }
            Ok(e)
        };
        let mut pii_templates = Vec::new();
        for line in list("pii_templates.txt")? {
            let bad = |message: String| SynthError::LexiconInvalid {
                file: "pii_templates.txt",
                message,
            };
            let (cat, sentence) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("no tab in {line:?}")))?;
            let category = Category::from_name(cat.trim())
                .ok_or_else(|| bad(format!("unknown category {cat:?}")))?;
            let (pre, post) = sentence
                .split_once("{}")
                .ok_or_else(|| bad(format!("no slot in {line:?}")))?;
            if post.contains("{}") {
                return Err(bad(format!("more than one slot in {line:?}")));
            }
            pii_templates.push((category, pre.to_string(), post.to_string()));
        }
        let utility_templates = list("utility_templates.txt")?;
        if utility_templates
            .iter()
            .any(|t| !t.contains("{DRUG}") && !t.contains("{DISORDER}"))
        {
            return Err(SynthError::LexiconInvalid {
                file: "utility_templates.txt",
                message: "every template needs a {DRUG} or {DISORDER} slot".into(),
            });
        }
        Ok(Lexicon {
            first_names: list("first_names.txt")?,
            last_names: list("last_names.txt")?,
            cities: list("cities.txt")?,
            hospitals: list("hospitals.txt")?,
            hospital_abbreviations: list("hospital_abbreviations.txt")?,
            departments: list("departments.txt")?,
            pharmacies: list("pharmacies.txt")?,
            holidays: list("holidays.txt")?,
            rare_diseases: list("rare_diseases.txt")?,
            rare_disease_treatments: list("rare_disease_treatments.txt")?,
            rehabilitation_centres: list("rehabilitation_centres.txt")?,
            sickbays: list("sickbays.txt")?,
            ehr_systems: list("ehr_systems.txt")?,
            drugs: list("drugs.txt")?,
            disorders: list("disorders.txt")?,
            filler: list("filler.txt")?,
            pii_templates,
            utility_templates,
        })
    }

    /// Writes the built-in lexicon files to `dir` as a starting point for edits.
    pub fn export_builtin(dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, raw) in LEXICON_FILES {
            fs::write(dir.join(name), raw)?;
        }
        Ok(())
    }

    fn word_list(&self, category: Category) -> Option<&[String]> {
        Some(match category {
            Category::Stad => &self.cities,
            Category::Ziekenhuis => &self.hospitals,
            Category::Zkh => &self.hospital_abbreviations,
            Category::Afdeling => &self.departments,
            Category::Apotheek => &self.pharmacies,
            Category::Feestdag => &self.holidays,
            Category::RareDisease => &self.rare_diseases,
            Category::RareDiseaseTreatment => &self.rare_disease_treatments,
            Category::Revalidatiecentrum => &self.rehabilitation_centres,
            Category::Ziekenboeg => &self.sickbays,
            Category::Ehr => &self.ehr_systems,
            _ => return None,
        })
    }

    fn value<R: Rng>(&self, category: Category, rng: &mut R) -> String {
        let pick = |l: &[String], rng: &mut R| l.choose(rng).expect("non-empty").clone();
        match category {
            Category::Naam => format!(
                "{} {}",
                pick(&self.first_names, rng),
                pick(&self.last_names, rng)
            ),
            Category::Arts => pick(&self.last_names, rng),
            Category::Telnr => {
                if rng.random_bool(0.7) {
                    format!("06-{:08}", rng.random_range(0..100_000_000u32))
                } else {
                    format!(
                        "0{}-{:07}",
                        rng.random_range(10..100u32),
                        rng.random_range(0..10_000_000u32)
                    )
                }
            }
            Category::Geboortedatum => format!(
                "{:02}-{:02}-{}",
                rng.random_range(1..=28u32),
                rng.random_range(1..=12u32),
                rng.random_range(1930..=2005u32)
            ),
            Category::TrialId => format!(
                "NL{:05}.{:03}.{:02}",
                rng.random_range(10_000..100_000u32),
                rng.random_range(0..1000u32),
                rng.random_range(10..25u32)
            ),
            Category::Sein => format!("{}", rng.random_range(1000..10_000u32)),
            c => pick(self.word_list(c).expect("list-backed category"), rng),
        }
    }

    /// Embedding class of a token: the list it comes from, an identifier
    /// shape, punctuation, or plain filler.
    pub fn token_class(&self, token: &str) -> String {
        if tokenize(token)
            .first()
            .is_some_and(|t| t.kind == TokenKind::Placeholder)
        {
            return "placeholder".into();
        }
        if !is_wordlike(token) {
            return "punct".into();
        }
        let lists: [(&str, &[String]); 15] = [
            ("drug", &self.drugs),
            ("disorder", &self.disorders),
            ("first_name", &self.first_names),
            ("last_name", &self.last_names),
            ("city", &self.cities),
            ("hospital", &self.hospitals),
            ("hospital_abbreviation", &self.hospital_abbreviations),
            ("department", &self.departments),
            ("pharmacy", &self.pharmacies),
            ("holiday", &self.holidays),
            ("rare_disease", &self.rare_diseases),
            ("rare_disease_treatment", &self.rare_disease_treatments),
            ("rehabilitation_centre", &self.rehabilitation_centres),
            ("sickbay", &self.sickbays),
            ("ehr", &self.ehr_systems),
        ];
        for (class, list) in lists {
            if list
                .iter()
                .any(|e| tokenize(e).iter().any(|t| t.text == token))
            {
                return class.into();
            }
        }
        if token
            .chars()
            .all(|c| c.is_ascii_digit() || c == '-' || c == '.')
            || token.starts_with("NL")
        {
            return "number".into();
        }
        "filler".into()
    }

    /// Mask rules covering the list-backed categories and identifier shapes.
    /// Person names are only covered through surnames.
    pub fn rules(&self) -> Vec<RuleSpec> {
        let dict = |category, d: &[String]| RuleSpec {
            category,
            dictionary: Some(d.to_vec()),
            regex: None,
        };
        let re = |category, r: &str| RuleSpec {
            category,
            dictionary: None,
            regex: Some(r.into()),
        };
        let mut out = vec![dict(Category::Naam, &self.last_names)];
        for c in Category::ALL {
            if let Some(l) = self.word_list(c) {
                out.push(dict(c, l));
            }
        }
        out.push(re(Category::Telnr, r"\b0\d{1,2}-\d{7,8}\b"));
        out.push(re(Category::Geboortedatum, r"\b\d{2}-\d{2}-\d{4}\b"));
        out.push(re(Category::TrialId, r"\bNL\d{5}\.\d{3}\.\d{2}\b"));
        out.push(re(Category::Sein, r"(?i)\bsein \d{4}\b"));
        out
    }
}

/// Distribution of planted PII over categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix(pub BTreeMap<Category, f64>);

impl CategoryMix {
    pub fn uniform() -> Self {
        CategoryMix(Category::ALL.iter().map(|&c| (c, 1.0 / 17.0)).collect())
    }

    /// Skewed toward names, doctors and departments.
    pub fn clinical() -> Self {
        let heavy = [
            (Category::Naam, 0.25),
            (Category::Arts, 0.15),
            (Category::Afdeling, 0.15),
        ];
        let rest = (1.0 - 0.55) / 14.0;
        let mut m: BTreeMap<Category, f64> = Category::ALL.iter().map(|&c| (c, rest)).collect();
        m.extend(heavy);
        CategoryMix(m)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uniform" => Some(Self::uniform()),
            "clinical" => Some(Self::clinical()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub target_words: usize,
    pub pii_rate: f64,
    pub category_mix: CategoryMix,
    /// Share of non-PII sentences that mention a drug or disorder.
    pub entity_rate: f64,
    /// Share of those sentences that link a drug to a disorder.
    pub relation_rate: f64,
    pub seed: u64,
    /// Directory replacing the built-in lexicon.
    pub lexicon: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 102,
            target_words: 107_110,
            pii_rate: 0.0083,
            category_mix: CategoryMix::uniform(),
            entity_rate: 0.08,
            relation_rate: 0.5,
            seed: 0,
            lexicon: None,
        }
    }
}

/// Upper bound on the PII word rate the templates can express.
pub const MAX_PII_RATE: f64 = 0.2;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleConfig(m));
        if self.n_docs == 0 {
            return bad("n_docs must be positive".into());
        }
        if self.target_words < self.n_docs * 20 {
            return bad(format!(
                "target_words {} leaves fewer than 20 words per document",
                self.target_words
            ));
        }
        for (name, v) in [
            ("pii_rate", self.pii_rate),
            ("entity_rate", self.entity_rate),
            ("relation_rate", self.relation_rate),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.pii_rate > MAX_PII_RATE {
            return bad(format!(
                "pii_rate {} exceeds what the templates can carry ({MAX_PII_RATE})",
                self.pii_rate
            ));
        }
        let mix = &self.category_mix.0;
        if mix.values().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("category_mix weights must be non-negative".into());
        }
        let sum: f64 = mix.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("category_mix sums to {sum}, expected 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub gold: Vec<PiiSpan>,
    pub utility: UtilityAnnotations,
}

impl SynthCorpus {
    /// Word-like tokens covered by gold spans over all word-like tokens.
    pub fn pii_rate(&self) -> f64 {
        let words = self.corpus.word_count();
        let mut pii = 0usize;
        for g in &self.gold {
            let doc = self.corpus.get(&g.doc_id).expect("gold refers to corpus");
            pii += doc
                .tokens()
                .iter()
                .filter(|t| t.span().overlaps(&g.span()) && is_wordlike(&t.text))
                .count();
        }
        pii as f64 / words as f64
    }

    pub fn write_files(
        &self,
        corpus: &Path,
        gold: &Path,
        utility: &Path,
    ) -> Result<(), SynthError> {
        let open = |p: &Path| -> std::io::Result<std::io::BufWriter<fs::File>> {
            Ok(std::io::BufWriter::new(fs::File::create(p)?))
        };
        let mut w = open(corpus)?;
        write_corpus(&mut w, &self.corpus)?;
        w.flush()?;
        let mut w = open(gold)?;
        write_annotations(&mut w, &self.gold)?;
        w.flush()?;
        let mut w = open(utility)?;
        write_utility_annotations(&mut w, &self.utility)?;
        w.flush()?;
        Ok(())
    }
}

fn word_count(s: &str) -> usize {
    tokenize(s).iter().filter(|t| is_wordlike(&t.text)).count()
}

struct DocBuilder {
    doc_id: String,
    text: String,
    words: usize,
    pii_words: usize,
    gold: Vec<PiiSpan>,
    entities: Vec<EntityAnnotation>,
    relations: Vec<RelationAnnotation>,
}

impl DocBuilder {
    fn separate<R: Rng>(&mut self, rng: &mut R) {
        if !self.text.is_empty() {
            self.text
                .push_str(if rng.random_bool(0.15) { "\n" } else { " " });
        }
    }

    fn pii_sentence(&mut self, category: Category, pre: &str, value: &str, post: &str) {
        let start = self.text.len() + pre.len();
        self.text.push_str(pre);
        self.text.push_str(value);
        self.text.push_str(post);
        let vw = word_count(value);
        self.words += word_count(pre) + vw + word_count(post);
        self.pii_words += vw;
        self.gold.push(PiiSpan::new(
            &self.doc_id,
            start,
            start + value.len(),
            category,
        ));
    }

    fn utility_sentence(&mut self, template: &str, drug: &str, disorder: &str) {
        let mut ids = BTreeMap::new();
        let mut rest = template;
        let base = self.text.len();
        let mut out = String::new();
        while let Some(open) = rest.find('{') {
            let close = rest[open..]
                .find('}')
                .map(|c| open + c)
                .unwrap_or(rest.len() - 1);
            out.push_str(&rest[..open]);
            let (label, value) = match &rest[open + 1..close] {
                "DRUG" => ("drug", drug),
                _ => ("disorder", disorder),
            };
            let start = base + out.len();
            out.push_str(value);
            let id = format!("e{}", self.entities.len() + 1);
            ids.insert(label, id.clone());
            self.entities.push(EntityAnnotation {
                doc_id: self.doc_id.clone(),
                id,
                start,
                end: start + value.len(),
                label: label.into(),
            });
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        if let (Some(h), Some(t)) = (ids.get("drug"), ids.get("disorder")) {
            self.relations.push(RelationAnnotation {
                doc_id: self.doc_id.clone(),
                id: format!("r{}", self.relations.len() + 1),
                head: h.clone(),
                tail: t.clone(),
                label: "indication".into(),
            });
        }
        self.words += word_count(&out);
        self.text.push_str(&out);
    }

    fn plain(&mut self, sentence: &str) {
        self.words += word_count(sentence);
        self.text.push_str(sentence);
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let lexicon = match &config.lexicon {
        Some(dir) => Lexicon::from_dir(dir)?,
        None => Lexicon::builtin(),
    };
    generate_with(config, &lexicon)
}

pub fn generate_with(config: &SynthConfig, lexicon: &Lexicon) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mix: Vec<(Category, f64)> = config
        .category_mix
        .0
        .iter()
        .map(|(&c, &w)| (c, w))
        .collect();
    for (c, w) in &mix {
        if *w > 0.0 && !lexicon.pii_templates.iter().any(|(tc, _, _)| tc == c) {
            return Err(SynthError::InfeasibleConfig(format!(
                "no template plants {c}"
            )));
        }
    }
    let pick_category = WeightedIndex::new(mix.iter().map(|(_, w)| *w))
        .map_err(|e| SynthError::InfeasibleConfig(format!("category_mix: {e}")))?;
    let (relation_templates, single_templates): (Vec<&String>, Vec<&String>) = lexicon
        .utility_templates
        .iter()
        .partition(|t| t.contains("{DRUG}") && t.contains("{DISORDER}"));

    let avg_sentence = lexicon.filler.iter().map(|s| word_count(s)).sum::<usize>() as f64
        / lexicon.filler.len() as f64;

    // uneven document lengths
    let weights: Vec<f64> = (0..config.n_docs)
        .map(|_| rng.random_range(0.3..1.7))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let width = config.n_docs.to_string().len().max(3);

    let mut docs = Vec::with_capacity(config.n_docs);
    let mut gold = Vec::new();
    let mut utility = UtilityAnnotations::default();
    let (mut total_words, mut total_pii) = (0usize, 0usize);

    for (i, w) in weights.iter().enumerate() {
        let target = config.target_words as f64 * w / wsum;
        let mut b = DocBuilder {
            doc_id: format!("note-{:0width$}", i + 1),
            text: String::new(),
            words: 0,
            pii_words: 0,
            gold: Vec::new(),
            entities: Vec::new(),
            relations: Vec::new(),
        };
        while (b.words as f64) + avg_sentence / 2.0 < target {
            b.separate(&mut rng);
            let words_after = (total_words + b.words) as f64 + avg_sentence;
            if ((total_pii + b.pii_words) as f64) < config.pii_rate * words_after {
                let category = mix[pick_category.sample(&mut rng)].0;
                let templates: Vec<_> = lexicon
                    .pii_templates
                    .iter()
                    .filter(|(c, _, _)| *c == category)
                    .collect();
                let (_, pre, post) = templates.choose(&mut rng).expect("checked above");
                let value = lexicon.value(category, &mut rng);
                b.pii_sentence(category, pre, &value, post);
            } else if rng.random_bool(config.entity_rate) {
                let pool = if !relation_templates.is_empty()
                    && (single_templates.is_empty() || rng.random_bool(config.relation_rate))
                {
                    &relation_templates
                } else {
                    &single_templates
                };
                let template = pool.choose(&mut rng).expect("non-empty pool");
                let drug = lexicon.drugs.choose(&mut rng).expect("non-empty");
                let disorder = lexicon.disorders.choose(&mut rng).expect("non-empty");
                b.utility_sentence(template, drug, disorder);
            } else {
                let s = lexicon.filler.choose(&mut rng).expect("non-empty");
                b.plain(s);
            }
        }
        total_words += b.words;
        total_pii += b.pii_words;
        gold.extend(b.gold);
        utility.entities.extend(b.entities);
        utility.relations.extend(b.relations);
        docs.push(Document::new(b.doc_id, b.text));
    }
    Ok(SynthCorpus {
        corpus: Corpus::new(docs)?,
        gold,
        utility,
    })
}

/// Shape of the synthetic embedding space: each class gets a centroid drawn
/// from N(0, class_spread^2) per coordinate and each token an offset from
/// N(0, s^2) with s log-uniform in word_spread * 10^[-spread_decades, spread_decades].
/// Vectors depend only on (seed, class, token).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreConfig {
    pub dim: usize,
    pub class_spread: f64,
    pub word_spread: f64,
    pub spread_decades: f64,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dim: 32,
            class_spread: 0.3,
            word_spread: 0.1,
            spread_decades: 1.0,
            seed: 0x7d9e,
        }
    }
}

fn gaussian_vec(dim: usize, sd: f64, seed: u64, label: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, label));
    let n = Normal::new(0.0, sd).expect("finite sd");
    (0..dim).map(|_| n.sample(&mut rng)).collect()
}

/// Store over every token of `corpus`, every placeholder, and `extra` tokens.
pub fn build_store(
    corpus: &Corpus,
    lexicon: &Lexicon,
    extra: &[String],
    config: StoreConfig,
) -> Result<EmbeddingStore, SynthError> {
    let mut vocab: BTreeSet<String> = corpus
        .docs()
        .iter()
        .flat_map(|d| d.tokens().iter().map(|t| t.text.clone()))
        .collect();
    vocab.extend(Category::ALL.iter().map(|c| c.placeholder()));
    vocab.extend(extra.iter().cloned());
    let vocab: Vec<String> = vocab.into_iter().collect();

    let mut centroids: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut matrix = Vec::with_capacity(vocab.len() * config.dim);
    for tok in &vocab {
        let class = lexicon.token_class(tok);
        let c = centroids.entry(class.clone()).or_insert_with(|| {
            gaussian_vec(
                config.dim,
                config.class_spread,
                config.seed,
                &format!("class:{class}"),
            )
        });
        let label = format!("token:{tok}");
        let mut r = ChaCha8Rng::seed_from_u64(stable_hash(config.seed ^ 1, &label));
        let spread = config.word_spread
            * 10f64.powf(r.random_range(-config.spread_decades..=config.spread_decades));
        let o = gaussian_vec(config.dim, spread, config.seed, &label);
        matrix.extend(c.iter().zip(&o).map(|(a, b)| (a + b) as f32));
    }
    Ok(EmbeddingStore::new(vocab, matrix, config.dim)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_docs: 12,
            target_words: 12_000,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn builtin_lexicon_loads() {
        let l = Lexicon::builtin();
        for c in Category::ALL {
            assert!(l.pii_templates.iter().any(|(tc, _, _)| *tc == c), "{c}");
        }
    }

    #[test]
    fn gold_text_matches_values() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.corpus.len(), 12);
        for g in &s.gold {
            let d = s.corpus.get(&g.doc_id).unwrap();
            let surface = &d.text()[g.start..g.end];
            assert!(!surface.trim().is_empty());
            assert_eq!(surface.trim(), surface);
        }
        for e in &s.utility.entities {
            let d = s.corpus.get(&e.doc_id).unwrap();
            let surface = &d.text()[e.start..e.end];
            let list = if e.label == "drug" {
                &Lexicon::builtin().drugs
            } else {
                &Lexicon::builtin().disorders
            };
            assert!(list.iter().any(|x| x == surface), "{surface}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.corpus.docs(), b.corpus.docs());
        assert_eq!(a.gold, b.gold);
        let c = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.corpus.docs(), c.corpus.docs());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig {
                n_docs: 0,
                ..small()
            },
            SynthConfig {
                pii_rate: 0.0,
                ..small()
            },
            SynthConfig {
                pii_rate: 0.5,
                ..small()
            },
            SynthConfig {
                relation_rate: 1.0,
                ..small()
            },
            SynthConfig {
                target_words: 100,
                ..small()
            },
            SynthConfig {
                category_mix: CategoryMix([(Category::Naam, 0.5)].into_iter().collect()),
                ..small()
            },
        ] {
            assert!(
                matches!(generate(&cfg), Err(SynthError::InfeasibleConfig(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn missing_lexicon_dir() {
        let cfg = SynthConfig {
            lexicon: Some("/nonexistent/lexicon".into()),
            ..small()
        };
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::LexiconMissing { .. })
        ));
    }

    #[test]
    fn exported_lexicon_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        Lexicon::export_builtin(dir.path()).unwrap();
        let cfg = SynthConfig {
            lexicon: Some(dir.path().into()),
            ..small()
        };
        assert_eq!(
            generate(&cfg).unwrap().gold,
            generate(&small()).unwrap().gold
        );
    }

    #[test]
    fn token_classes() {
        let l = Lexicon::builtin();
        assert_eq!(l.token_class("metoprolol"), "drug");
        assert_eq!(l.token_class("Utrecht"), "city");
        assert_eq!(l.token_class("06-12345678"), "number");
        assert_eq!(l.token_class("."), "punct");
        assert_eq!(l.token_class("<NAAM>"), "placeholder");
        assert_eq!(l.token_class("patient"), "filler");
    }

    #[test]
    fn store_covers_corpus() {
        let s = generate(&small()).unwrap();
        let l = Lexicon::builtin();
        let store = build_store(&s.corpus, &l, &l.drugs, StoreConfig::default()).unwrap();
        for d in s.corpus.docs() {
            for t in d.tokens() {
                assert!(store.index_of(&t.text).is_some(), "{}", t.text);
            }
        }
        // same-class neighbours sit closer than cross-class ones on average
        let a = store.index_of("metoprolol").unwrap();
        let nn = store.exact_nearest(store.embedding(a), Some(a)).unwrap();
        assert_eq!(l.token_class(store.token(nn.token_index)), "drug");
    }

    #[test]
    fn rules_compile() {
        let rules = crate::maskers::compile_rules(&Lexicon::builtin().rules()).unwrap();
        assert!(rules.len() > 10);
    }
}

//! Article text handling: sentence segmentation, sliding-window chunks,
//! pattern-based entity extraction, similarity-driven chunk selection and
//! prompt rendering.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ProviderError, TextEmbedder};

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_STRIDE: usize = 1;
pub const DEFAULT_TOP_CHUNKS: usize = 5;
pub const LEAD_SENTENCES: usize = 3;
pub const TAIL_SENTENCES: usize = 2;
pub const DEFAULT_TEMPLATE: &str = "news-caption-v1";

/// Tokens ending in a period that never close a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "St.", "Jr.", "Sr.", "Prof.", "Gen.", "Sen.", "Gov.", "U.S.",
    "U.K.", "etc.", "vs.", "No.", "Fig.",
];

/// Capitalised words that are not entities on their own.
pub const STOPWORDS: &[&str] = &[
    "The", "A", "In", "On", "He", "She", "It", "They", "We", "But", "And",
];

const CONNECTORS: &[&str] = &["of", "the", "&"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("document `{0}` has no sentences")]
    EmptyDocument(String),
    #[error("no chunks to select from")]
    NoChunks,
    #[error("embedding {what} failed: {source}")]
    Embedding {
        what: String,
        #[source]
        source: ProviderError,
    },
    #[error("embedder returned {found} vectors for {expected} inputs")]
    EmbeddingCount { expected: usize, found: usize },
    #[error("embedding for chunk {chunk_index} has dimension {found}, query has {expected}")]
    EmbeddingDimension {
        chunk_index: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
}

/// Half-open byte range into a document's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Span>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = split_sentences(&text);
        Document {
            id: id.into(),
            text,
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence_text(&self, index: usize) -> Option<&str> {
        self.sentences.get(index).map(|s| &self.text[s.start..s.end])
    }

    fn join(&self, first: usize, last: usize) -> String {
        (first..=last)
            .filter_map(|i| self.sentence_text(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One line of a documents JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
}

pub fn load_documents(path: &Path) -> Result<Vec<DocumentRecord>, TextError> {
    let p = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: p.clone(),
        source,
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TextError::MalformedLine {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | '\u{201d}' | '\u{2019}')
}

fn opens_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

/// True when the word ending at `end` (exclusive, just past a '.') is a
/// protected abbreviation or a single-capital initial such as "J.".
fn is_abbreviation(text: &str, end: usize) -> bool {
    let word_start = text[..end]
        .rfind(char::is_whitespace)
        .map_or(0, |i| i + text[i..].chars().next().map_or(1, char::len_utf8));
    let word = text[word_start..end].trim_start_matches(['(', '"', '\'', '\u{201c}', '\u{2018}']);
    if ABBREVIATIONS.contains(&word) {
        return true;
    }
    let mut chars = word.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}

/// Splits at '.', '!' or '?' (plus any closing quotes) followed by whitespace
/// and a character that can open a sentence. Spans exclude surrounding
/// whitespace.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(pos);
            } else {
                i += 1;
                continue;
            }
        }
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < chars.len() && is_terminator(chars[j + 1].1) {
            j += 1;
        }
        while j + 1 < chars.len() && is_closing(chars[j + 1].1) {
            j += 1;
        }
        let end = chars[j].0 + chars[j].1.len_utf8();
        let mut k = j + 1;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let boundary = k > j + 1
            && k < chars.len()
            && opens_sentence(chars[k].1)
            && !(c == '.' && j == i && is_abbreviation(text, end));
        if boundary {
            spans.push(Span {
                start: start.take().expect("inside a sentence"),
                end,
            });
            i = k;
        } else {
            i = j + 1;
        }
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            spans.push(Span { start: s, end });
        }
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// Inclusive sentence indices.
    pub start_sentence: usize,
    pub end_sentence: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

/// Windows of `window` sentences every `stride` sentences. A document shorter
/// than the window yields one chunk covering everything; an empty document
/// yields none.
///
/// # Panics
/// If `window` or `stride` is zero.
pub fn chunk_sliding(document: &Document, window: usize, stride: usize) -> Vec<Chunk> {
    assert!(window >= 1 && stride >= 1, "window and stride must be positive");
    let n = document.len();
    if n == 0 {
        return Vec::new();
    }
    if n < window {
        return vec![Chunk {
            start_sentence: 0,
            end_sentence: n - 1,
            text: document.join(0, n - 1),
            similarity: None,
        }];
    }
    (0..=n - window)
        .step_by(stride)
        .map(|s| Chunk {
            start_sentence: s,
            end_sentence: s + window - 1,
            text: document.join(s, s + window - 1),
            similarity: None,
        })
        .collect()
}

fn entity_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let token = r"(?:\p{Lu}\p{Ll}+(?:\p{Lu}\p{Ll}+)*|\p{Lu}{2,})\b";
        let pattern = format!(r"\b{token}(?:[ \t]+(?:(?:of|the|&)[ \t]+)*{token})*");
        Regex::new(&pattern).expect("entity pattern compiles")
    })
}

/// Maximal runs of capitalised words or acronyms, optionally linked by
/// "of", "the" or "&". A leading stopword is dropped; a run that is only a
/// stopword disappears. First-occurrence order, no duplicates.
pub fn extract_entities(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for m in entity_regex().find_iter(text) {
        let mut words: Vec<&str> = m.as_str().split_whitespace().collect();
        if words.first().is_some_and(|w| STOPWORDS.contains(w)) {
            words.remove(0);
            while words.first().is_some_and(|w| CONNECTORS.contains(w)) {
                words.remove(0);
            }
        }
        if words.is_empty() {
            continue;
        }
        let entity = words.join(" ");
        if entity.chars().count() >= 2 && seen.insert(entity.clone()) {
            out.push(entity);
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Embeds the query and every chunk in one call (query first) and returns the
/// `k` most similar chunks, ties going to the earlier chunk in the document.
pub fn select_chunks(
    chunks: &[Chunk],
    query_text: &str,
    embedder: &dyn TextEmbedder,
    k: usize,
) -> Result<Vec<Chunk>, TextError> {
    if chunks.is_empty() {
        return Err(TextError::NoChunks);
    }
    let mut inputs = Vec::with_capacity(chunks.len() + 1);
    inputs.push(query_text.to_string());
    inputs.extend(chunks.iter().map(|c| c.text.clone()));
    let vectors = embedder
        .embed_texts(&inputs)
        .map_err(|source| TextError::Embedding {
            what: match &source {
                ProviderError::DimensionMismatch { index: 0, .. } => "query".to_string(),
                ProviderError::DimensionMismatch { index, .. } => format!("chunk {}", index - 1),
                _ => format!("query and {} chunks", chunks.len()),
            },
            source,
        })?;
    if vectors.len() != inputs.len() {
        return Err(TextError::EmbeddingCount {
            expected: inputs.len(),
            found: vectors.len(),
        });
    }
    let query = &vectors[0];
    for (i, v) in vectors[1..].iter().enumerate() {
        if v.len() != query.len() {
            return Err(TextError::EmbeddingDimension {
                chunk_index: i,
                expected: query.len(),
                found: v.len(),
            });
        }
    }
    let mut scored: Vec<Chunk> = chunks
        .iter()
        .zip(&vectors[1..])
        .map(|(c, v)| Chunk {
            similarity: Some(cosine(query, v)),
            ..c.clone()
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start_sentence.cmp(&b.start_sentence))
            .then(a.end_sentence.cmp(&b.end_sentence))
    });
    scored.truncate(k.min(chunks.len()));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub document_id: String,
    pub lead: Vec<Sentence>,
    pub tail: Vec<Sentence>,
    pub top_chunks: Vec<Chunk>,
    pub entities: Vec<String>,
}

pub fn build_context(
    document: &Document,
    base_caption: &str,
    embedder: &dyn TextEmbedder,
) -> Result<ContextBundle, TextError> {
    let n = document.len();
    if n == 0 {
        return Err(TextError::EmptyDocument(document.id.clone()));
    }
    let sentence = |index: usize| Sentence {
        index,
        text: document.sentence_text(index).unwrap_or_default().to_string(),
    };
    let lead_n = LEAD_SENTENCES.min(n);
    let tail_n = TAIL_SENTENCES.min(n - lead_n);
    let chunks = chunk_sliding(document, DEFAULT_WINDOW, DEFAULT_STRIDE);
    Ok(ContextBundle {
        document_id: document.id.clone(),
        lead: (0..lead_n).map(sentence).collect(),
        tail: (n - tail_n..n).map(sentence).collect(),
        top_chunks: select_chunks(&chunks, base_caption, embedder, DEFAULT_TOP_CHUNKS)?,
        entities: extract_entities(&document.text),
    })
}

const NEWS_CAPTION_V1: &[&str] = &[
    "Give the article's reporting priority over anything merely visible in the picture.",
    "Begin with \"The image shows\", then tie the scene to the story within that same sentence.",
    "Weight the caption roughly 70% article facts to 30% visual description, and keep the two consistent with each other.",
    "Cover who, what, why, when and where as reported in the article.",
    "Name the specific people, organizations and events the article mentions.",
    "State why the story matters and what its wider consequences are.",
    "Describe only those visual elements that bear on the story.",
    "Write 300 to 350 words, favouring factual, newsworthy content.",
];

fn sentence_range(sentences: &[Sentence]) -> Option<(usize, usize)> {
    Some((sentences.first()?.index, sentences.last()?.index))
}

/// Context passages in document order with every sentence appearing once.
/// Contiguous sentences form one passage.
fn context_passages(bundle: &ContextBundle) -> Vec<String> {
    let lead = sentence_range(&bundle.lead);
    let tail = sentence_range(&bundle.tail);
    let within = |r: Option<(usize, usize)>, c: &Chunk| {
        r.is_some_and(|(a, b)| a <= c.start_sentence && c.end_sentence <= b)
    };

    // Whole chunks that cannot be mapped back to sentences keep their own slot.
    let mut sentences: BTreeMap<usize, String> = BTreeMap::new();
    let mut opaque: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for s in bundle.lead.iter().chain(&bundle.tail) {
        sentences.insert(s.index, s.text.clone());
    }
    for c in &bundle.top_chunks {
        if within(lead, c) || within(tail, c) {
            continue;
        }
        let spans = split_sentences(&c.text);
        if spans.len() == c.end_sentence + 1 - c.start_sentence {
            for (j, sp) in spans.iter().enumerate() {
                sentences
                    .entry(c.start_sentence + j)
                    .or_insert_with(|| c.text[sp.start..sp.end].to_string());
            }
        } else {
            opaque.insert((c.start_sentence, c.end_sentence), c.text.clone());
        }
    }

    let mut runs: Vec<((usize, usize), String)> = Vec::new();
    for (i, text) in sentences {
        match runs.last_mut() {
            Some(((_, end), buf)) if *end + 1 == i => {
                *end = i;
                buf.push(' ');
                buf.push_str(&text);
            }
            _ => runs.push(((i, i), text)),
        }
    }
    runs.extend(opaque);
    runs.sort_by_key(|r| r.0);
    runs.into_iter().map(|(_, t)| t).collect()
}

/// Renders the enrichment prompt. Context appears in document order with
/// each sentence once, regardless of how lead, tail and chunks overlap.
pub fn assemble_prompt(
    bundle: &ContextBundle,
    base_caption: &str,
    template_id: &str,
) -> Result<String, TextError> {
    let instructions = match template_id {
        DEFAULT_TEMPLATE => NEWS_CAPTION_V1,
        other => return Err(TextError::UnknownTemplate(other.to_string())),
    };
    let passages = context_passages(bundle);

    let mut out = String::new();
    out.push_str(
        "You are an experienced news caption writer. Using the article context and the \
         visual description below, write an enriched caption for the image.\n\nInstructions:\n",
    );
    for (i, line) in instructions.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, line));
    }
    out.push_str("\nNEWS CONTEXT:\n");
    if passages.is_empty() {
        out.push_str("(none)\n");
    }
    for text in &passages {
        out.push_str(text);
        out.push('\n');
    }
    out.push_str("\nNAMED ENTITIES:\n");
    if bundle.entities.is_empty() {
        out.push_str("(none)");
    } else {
        out.push_str(&bundle.entities.join(", "));
    }
    out.push_str("\n\nBASE CAPTION:\n");
    out.push_str(base_caption.trim());
    out.push('\n');
    Ok(out)
}

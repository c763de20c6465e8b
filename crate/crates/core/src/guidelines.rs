//! Guideline store: chunking, a BM25 inverted index and top-k passage search.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{CardiacPhase, MeasurementKind};

pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_CHUNK_OVERLAP: usize = 128;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("overlap {overlap} must be smaller than chunk size {size}")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("document '{0}' has an empty body")]
    EmptyDocument(String),
    #[error("cannot build an index from zero passages")]
    EmptyCorpus,
    #[error("query is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dense scorer failed: {0}")]
    DenseScorer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineDoc {
    pub doc_id: String,
    pub title: String,
    pub source: String,
    pub body: String,
}

impl GuidelineDoc {
    pub fn new(doc_id: &str, title: &str, source: &str, body: &str) -> Self {
        Self { doc_id: doc_id.into(), title: title.into(), source: source.into(), body: body.into() }
    }
}

/// A chunk of a document. `start..end` is a span in chars, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Fixed-size character windows; neighbours share exactly `overlap` chars.
pub fn chunk(doc: &GuidelineDoc, size: usize, overlap: usize) -> Result<Vec<Passage>, RetrievalError> {
    if size == 0 || overlap >= size {
        return Err(RetrievalError::InvalidChunking { size, overlap });
    }
    let chars: Vec<char> = doc.body.chars().collect();
    if chars.is_empty() {
        return Err(RetrievalError::EmptyDocument(doc.doc_id.clone()));
    }
    let step = size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(chars.len());
        out.push(Passage {
            passage_id: format!("{}#{}", doc.doc_id, out.len()),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            start,
            end,
            text: chars[start..end].iter().collect(),
        });
        if end == chars.len() {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// Lucene-style idf; always positive.
    pub fn idf(&self, corpus_size: usize, doc_freq: usize) -> f64 {
        let n = corpus_size as f64;
        let df = doc_freq as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    pub fn term_score(&self, idf: f64, tf: u32, doc_len: u32, avg_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / avg_len;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// Upper bound of `term_score` over all tf and lengths.
    pub fn term_ceiling(&self, idf: f64) -> f64 {
        idf * (self.k1 + 1.0)
    }
}

/// Optional semantic scorer combined additively with the lexical score.
pub trait DenseScorer {
    /// One non-negative similarity per passage, in passage order.
    fn score(&self, query: &str, passages: &[Passage]) -> Result<Vec<f64>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineIndex {
    params: Bm25Params,
    passages: Vec<Passage>,
    doc_len: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

pub fn build_index(passages: Vec<Passage>) -> Result<GuidelineIndex, RetrievalError> {
    GuidelineIndex::build(passages, Bm25Params::default())
}

impl GuidelineIndex {
    pub fn build(passages: Vec<Passage>, params: Bm25Params) -> Result<Self, RetrievalError> {
        if passages.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let tokens = tokenize(&p.text);
            doc_len.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i as u32, n));
            }
        }
        let total: u64 = doc_len.iter().map(|n| *n as u64).sum();
        let avg_len = (total as f64 / passages.len() as f64).max(1.0);
        Ok(Self { params, passages, doc_len, avg_len, postings })
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        self.search_with(query, k, None)
    }

    /// Top-k passages by descending score, ties broken by (doc_id, span start).
    /// Passages whose text contains the query verbatim get a boost larger than
    /// any lexical score a non-matching passage can reach.
    pub fn search_with(
        &self,
        query: &str,
        k: usize,
        dense: Option<&dyn DenseScorer>,
    ) -> Result<Vec<SearchHit>, RetrievalError> {
        let phrase = query.trim();
        if phrase.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let n = self.passages.len();
        let mut scores = alloc::vec![0.0f64; n];
        let mut terms = tokenize(phrase);
        terms.sort();
        terms.dedup();
        let mut ceiling = 1.0;
        for t in &terms {
            let Some(list) = self.postings.get(t) else { continue };
            let idf = self.params.idf(n, list.len());
            ceiling += self.params.term_ceiling(idf);
            for (idx, tf) in list {
                let i = *idx as usize;
                scores[i] += self.params.term_score(idf, *tf, self.doc_len[i], self.avg_len);
            }
        }
        for (i, p) in self.passages.iter().enumerate() {
            if p.text.contains(phrase) {
                scores[i] += ceiling;
            }
        }
        if let Some(d) = dense {
            let extra = d.score(phrase, &self.passages).map_err(RetrievalError::DenseScorer)?;
            if extra.len() != n {
                return Err(RetrievalError::DenseScorer(format!(
                    "expected {n} scores, got {}",
                    extra.len()
                )));
            }
            for (s, e) in scores.iter_mut().zip(extra) {
                if e.is_finite() && e > 0.0 {
                    *s += e;
                }
            }
        }
        let mut ranked: Vec<usize> = (0..n).filter(|i| scores[*i] > 0.0).collect();
        ranked.sort_by(|a, b| {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.passages[*a].doc_id.cmp(&self.passages[*b].doc_id))
                .then_with(|| self.passages[*a].start.cmp(&self.passages[*b].start))
                .then_with(|| a.cmp(b))
        });
        Ok(ranked
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, i)| {
                let p = &self.passages[i];
                SearchHit {
                    passage_id: p.passage_id.clone(),
                    doc_id: p.doc_id.clone(),
                    title: p.title.clone(),
                    start: p.start,
                    end: p.end,
                    text: p.text.clone(),
                    score: scores[i],
                    rank: r + 1,
                }
            })
            .collect())
    }
}

const REFERENCE_PACK: &[(&str, &str, &str)] = &[
    (
        "ref-ivs",
        "IVS reference range",
        "Interventricular septal thickness (IVS) is measured in the parasternal long-axis view, perpendicular to the septum. \
Reference range at end-diastole: 0.6–1.0 cm. Reference range at end-systole: 0.9–1.5 cm. \
Values above the upper limit are classified as increased (septal hypertrophy); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-lvid",
        "LVID reference range",
        "Left ventricular internal dimension (LVID) is measured from the septal endocardium to the posterior wall endocardium. \
Reference range at end-diastole: 3.8–5.8 cm. Reference range at end-systole: 2.2–4.0 cm. \
Values above the upper limit are classified as increased (ventricular dilatation); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-lvpw",
        "LVPW reference range",
        "Left ventricular posterior wall thickness (LVPW) is measured at the level of the mitral leaflet tips. \
Reference range at end-diastole: 0.6–1.0 cm. Reference range at end-systole: 0.9–1.6 cm. \
Values above the upper limit are classified as increased (wall thickening); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-la",
        "LA reference range",
        "Left atrial diameter (LA) is measured in the parasternal long-axis view along the anteroposterior axis. \
Reference range at end-diastole: 2.7–4.0 cm. Reference range at end-systole: 2.3–3.8 cm. \
Values above the upper limit are classified as increased (atrial enlargement); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-aorta",
        "Aorta reference range",
        "Aorta: the aortic diameter is measured at the level of the aortic valve leaflets. \
Reference range at end-diastole: 2.0–3.7 cm. Reference range at end-systole: 2.1–3.8 cm. \
Values above the upper limit are classified as increased (aortic dilatation); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-aortic-root",
        "Aortic root reference range",
        "Aortic root: the sinus of Valsalva diameter is measured leading edge to leading edge. \
Reference range at end-diastole: 2.6–3.7 cm. Reference range at end-systole: 2.7–3.8 cm. \
Values above the upper limit are classified as increased (root dilatation); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-rv-base",
        "RV base reference range",
        "Right ventricular basal dimension (RV base) is measured in the RV-focused apical four-chamber view. \
Reference range at end-diastole: 2.5–4.1 cm. Reference range at end-systole: 1.9–3.5 cm. \
Values above the upper limit are classified as increased (right ventricular dilatation); values below the lower limit are classified as reduced.",
    ),
    (
        "ref-rwt",
        "Relative wall thickness",
        "Relative wall thickness (RWT) is computed as 2 × LVPW at end-diastole divided by LVID at end-diastole. \
An RWT above 0.42 indicates concentric geometry; 0.42 or below is classified as normal geometry.",
    ),
    (
        "ref-la-ao",
        "LA/Aorta ratio",
        "The LA/Aorta ratio divides the left atrial diameter by the aortic diameter, both at end-systole. \
A ratio above 1.5 suggests left atrial enlargement; 1.5 or below is classified as normal.",
    ),
    (
        "ref-timing",
        "Measurement timing",
        "Linear dimensions are reported at end-diastole, the frame of maximal ventricular volume, and at end-systole, \
the frame of minimal ventricular volume. Measurements should be taken only on frames where the structure is clearly \
visible and the cursor can be placed perpendicular to the long axis.",
    ),
    (
        "ref-quality",
        "Image quality",
        "Foreshortened, off-axis or zoomed clips may make a standard measurement unreliable even when the view label is \
correct. When a structure is not adequately visualized the measurement should be reported as not feasible rather than estimated.",
    ),
];

/// Reference ranges stated in the bundled pack, `(lower, upper)` in cm.
pub fn reference_range(kind: MeasurementKind, phase: CardiacPhase) -> Option<(f64, f64)> {
    use CardiacPhase::*;
    use MeasurementKind::*;
    Some(match (kind, phase) {
        (Ivs, EndDiastole) => (0.6, 1.0),
        (Ivs, EndSystole) => (0.9, 1.5),
        (Lvid, EndDiastole) => (3.8, 5.8),
        (Lvid, EndSystole) => (2.2, 4.0),
        (Lvpw, EndDiastole) => (0.6, 1.0),
        (Lvpw, EndSystole) => (0.9, 1.6),
        (La, EndDiastole) => (2.7, 4.0),
        (La, EndSystole) => (2.3, 3.8),
        (Aorta, EndDiastole) => (2.0, 3.7),
        (Aorta, EndSystole) => (2.1, 3.8),
        (AorticRoot, EndDiastole) => (2.6, 3.7),
        (AorticRoot, EndSystole) => (2.7, 3.8),
        (RvBase, EndDiastole) => (2.5, 4.1),
        (RvBase, EndSystole) => (1.9, 3.5),
        _ => return None,
    })
}

/// Relative wall thickness above which geometry is concentric.
pub const RWT_UPPER: f64 = 0.42;
/// LA/Aorta ratio above which the atrium is considered enlarged.
pub const LA_AO_UPPER: f64 = 1.5;

/// The bundled reference-range pack. Values are placeholders for exercising
/// retrieval; ingest real guideline text for clinical use.
pub fn reference_pack() -> Vec<GuidelineDoc> {
    REFERENCE_PACK
        .iter()
        .map(|(id, title, body)| GuidelineDoc::new(id, title, "bundled reference pack", body))
        .collect()
}

/// Chunks and indexes the bundled pack with default settings.
pub fn reference_index() -> GuidelineIndex {
    let passages = reference_pack()
        .iter()
        .flat_map(|d| chunk(d, DEFAULT_CHUNK_SIZE, DEFAULT_CHUNK_OVERLAP).unwrap_or_default())
        .collect();
    build_index(passages).unwrap_or_else(|_| unreachable!("bundled pack is non-empty"))
}

/// Parses "Reference range at <phase>: a–b cm" out of a passage.
pub fn parse_reference_range(text: &str, phase_long_name: &str) -> Option<(f64, f64)> {
    let marker = format!("Reference range at {phase_long_name}:");
    let at = text.find(&marker)? + marker.len();
    let rest = text[at..].trim_start();
    let (lo, rest) = take_number(rest)?;
    let rest = rest.trim_start().strip_prefix(['–', '-'])?.trim_start();
    let (hi, _) = take_number(rest)?;
    Some((lo, hi))
}

/// Parses "above <x>" thresholds out of derived-index passages.
pub fn parse_upper_threshold(text: &str) -> Option<f64> {
    let at = text.find("above ")? + "above ".len();
    take_number(&text[at..]).map(|(v, _)| v)
}

fn take_number(s: &str) -> Option<(f64, &str)> {
    let end = s
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || *c == '.'))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let num = s[..end].trim_end_matches('.');
    num.parse::<f64>().ok().map(|v| (v, &s[num.len()..]))
}

impl SearchHit {
    pub fn summary(&self) -> String {
        format!("[{}] {} ({}..{}) score {:.3}", self.rank, self.title, self.start, self.end, self.score)
    }
}

impl Passage {
    pub fn label(&self) -> String {
        self.passage_id.to_string()
    }
}

//! Gradient×input token attribution and dictionary-filtered keyword tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::ForwardMode;
use crate::error::{Error, Result};
use crate::metrics::LabelSet;
use crate::model::Model;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{EncodedText, Preprocessor};

/// Default cut on normalized scores.
pub const SALIENCE_THRESHOLD: f64 = 0.2;

/// Lowercase term list used to filter salient words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordDictionary {
    terms: BTreeSet<String>,
}

impl KeywordDictionary {
    /// One term per line; blank lines and `#` comments are skipped. Each
    /// line is normalized with `pre` and every resulting word kept.
    pub fn parse(text: &str, pre: &Preprocessor) -> Result<Self> {
        let terms = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| pre.preprocess(l))
            .collect();
        Self::from_terms(terms)
    }

    pub fn from_terms(terms: BTreeSet<String>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("keyword dictionary is empty".into()));
        }
        Ok(KeywordDictionary { terms })
    }

    pub fn load(path: &Path, pre: &Preprocessor) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, pre)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from("# keyword dictionary\n");
        for t in &self.terms {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn contains(&self, word: &str) -> bool {
        self.terms.contains(word)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }
}

/// Per-position signed sums of `∂out/∂x ⊙ x` for a `T × d` input.
fn row_products(g: &Graph, x: Var) -> Vec<f64> {
    let xv = g.value(x);
    let d = xv.cols();
    let grad = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; xv.len()]);
    xv.values()
        .chunks(d)
        .zip(grad.chunks(d))
        .map(|(xr, gr)| xr.iter().zip(gr).map(|(a, b)| a * b).sum())
        .collect()
}

/// Divides by the largest magnitude; an all-zero vector stays zero.
pub fn normalize_max_abs(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m == 0.0 {
        return raw.to_vec();
    }
    raw.iter().map(|x| x / m).collect()
}

/// Bias-free linear probe `logit = Σ_t w·x_t`. Returns the logit and the
/// unnormalized per-position scores, which sum to it.
pub fn linear_probe(x: &Tensor, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.constant(Tensor::matrix(1, w.len(), w.to_vec())?);
    let z = g.matmul_t(xv, wv)?;
    let logit = g.sum(z)?;
    g.backward(logit)?;
    Ok((g.value(logit).item(), row_products(&g, xv)))
}

/// Unnormalized gradient×input of label `label`'s pre-sigmoid logit with
/// respect to each gathered embedding row.
pub fn grad_times_input_raw(model: &Model, ids: &[usize], label: usize) -> Result<Vec<f64>> {
    if label >= model.config.n_labels {
        return Err(Error::Index { op: "grad_times_input", index: label, size: model.config.n_labels });
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let valid = vec![true; ids.len()];
    let enc = model.encode(&mut g, &bound, ids, &valid, &mut ForwardMode::eval())?;
    let z = model.label_logits(&mut g, &bound, enc.hidden, &valid)?;
    let zj = g.slice(z, 1, label, 1)?;
    let target = g.sum(zj)?;
    g.backward(target)?;
    Ok(row_products(&g, enc.embeddings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub note_id: String,
    pub label: usize,
    /// Aligned to the framed sequence, max-abs normalized.
    pub scores: Vec<f64>,
}

pub fn grad_times_input(model: &Model, note_id: &str, ids: &[usize], label: usize) -> Result<Attribution> {
    let raw = grad_times_input_raw(model, ids, label)?;
    Ok(Attribution { note_id: note_id.to_string(), label, scores: normalize_max_abs(&raw) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalientWord {
    pub index: usize,
    pub word: String,
    pub score: f64,
}

/// Word-level scores: each source word takes the largest of its subtoken
/// scores.
pub fn word_scores(attr: &Attribution, text: &EncodedText) -> Vec<Option<f64>> {
    let mut out: Vec<Option<f64>> = vec![None; text.words.len()];
    for (s, w) in attr.scores.iter().zip(&text.word_of) {
        if let Some(w) = *w {
            out[w] = Some(out[w].map_or(*s, |m: f64| m.max(*s)));
        }
    }
    out
}

/// Words scoring at least `threshold`, in note order. Scores are signed, so
/// words that push the logit down are never salient for a positive
/// threshold. Words cut off by truncation have no score and are never
/// returned.
pub fn salient_words(attr: &Attribution, text: &EncodedText, threshold: f64) -> Vec<SalientWord> {
    word_scores(attr, text)
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            s.filter(|&s| s >= threshold)
                .map(|score| SalientWord { index: i, word: text.words[i].clone(), score })
        })
        .collect()
}

/// A note ready for keyword extraction.
#[derive(Clone, Debug)]
pub struct AttributionInput {
    pub id: String,
    pub text: EncodedText,
    pub gold: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordRow {
    pub label: String,
    /// `(word, note count)` by count descending, ties lexicographic.
    pub words: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub rows: Vec<KeywordRow>,
    /// Mean fraction of scored words that cleared the threshold, over every
    /// attributed (note, label) pair.
    pub mean_salient_fraction: f64,
    pub pairs: usize,
}

impl KeywordTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        for r in &self.rows {
            let words: Vec<&str> = r.words.iter().map(|(w, _)| w.as_str()).collect();
            let _ = writeln!(out, "{:<width$}  {}", r.label, words.join(", "));
        }
        out
    }
}

/// For every label, counts (once per note) the dictionary words found
/// salient in notes that carry the label in gold or prediction, and keeps the
/// `top_k` most frequent. Labels without any hit are left out.
pub fn keyword_table(
    model: &Model,
    notes: &[AttributionInput],
    labels: &[String],
    dict: &KeywordDictionary,
    top_k: usize,
    threshold: f64,
    cut: f64,
) -> Result<KeywordTable> {
    if dict.is_empty() {
        return Err(Error::Config("keyword dictionary is empty".into()));
    }
    let per_note: Vec<Vec<(usize, BTreeSet<String>, f64)>> = notes
        .par_iter()
        .map(|n| {
            let probs = model.predict_probs(&n.text.ids)?;
            let mut targets = n.gold.clone();
            targets.extend(probs.iter().enumerate().filter(|(_, &p)| p >= cut).map(|(j, _)| j));
            let mut out = Vec::new();
            for j in targets {
                let attr = grad_times_input(model, &n.id, &n.text.ids, j)?;
                let scored = word_scores(&attr, &n.text).iter().filter(|s| s.is_some()).count();
                let salient = salient_words(&attr, &n.text, threshold);
                let frac = if scored == 0 { 0.0 } else { salient.len() as f64 / scored as f64 };
                let words = salient.into_iter().map(|s| s.word).filter(|w| dict.contains(w)).collect();
                out.push((j, words, frac));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); labels.len()];
    let (mut frac_sum, mut pairs) = (0.0, 0);
    for note in &per_note {
        for (j, words, frac) in note {
            let slot = counts.get_mut(*j).ok_or(Error::Index { op: "keyword_table", index: *j, size: labels.len() })?;
            for w in words {
                *slot.entry(w.clone()).or_default() += 1;
            }
            frac_sum += frac;
            pairs += 1;
        }
    }
    let rows = labels
        .iter()
        .zip(counts)
        .filter(|(_, c)| !c.is_empty())
        .map(|(label, c)| {
            let mut words: Vec<(String, usize)> = c.into_iter().collect();
            words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            words.truncate(top_k);
            KeywordRow { label: label.clone(), words }
        })
        .collect();
    Ok(KeywordTable {
        rows,
        mean_salient_fraction: if pairs == 0 { 0.0 } else { frac_sum / pairs as f64 },
        pairs,
    })
}

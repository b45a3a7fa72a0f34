//! Report-level evaluation: BLEU-1..4, ROUGE-L, CIDEr and a keyword-presence
//! clinical AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Gram<'_>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, candidate n-gram total) for one order.
fn clipped_matches(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn bleu_from_counts(matches: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || matches.iter().any(|&(m, t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_mean = matches
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / matches.len() as f64;
    brevity_penalty(cand_len, ref_len) * log_mean.exp()
}

/// Sentence-level BLEU-n: geometric mean of clipped 1..=n-gram precisions
/// times the brevity penalty, unsmoothed.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    check_order(n)?;
    let matches: Vec<_> = (1..=n).map(|i| clipped_matches(candidate, reference, i)).collect();
    Ok(bleu_from_counts(&matches, candidate.len(), reference.len()))
}

/// Corpus-level BLEU-n: clipped counts and lengths are pooled before the
/// precisions are formed.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_order(n)?;
    check_pairs(candidates, references)?;
    let mut matches = vec![(0, 0); n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for (i, slot) in matches.iter_mut().enumerate() {
            let (m, t) = clipped_matches(c, r, i + 1);
            slot.0 += m;
            slot.1 += t;
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(bleu_from_counts(&matches, c_len, r_len))
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return Err(Error::Validation(format!("BLEU order must be 1..=4, got {n}")));
    }
    Ok(())
}

fn check_pairs(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by `ROUGE_BETA`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn corpus_rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / candidates.len() as f64)
}

/// Document frequencies of every n-gram order over a reference corpus.
struct CiderIdf<'a> {
    df: Vec<BTreeMap<Gram<'a>, usize>>,
    docs: usize,
}

impl<'a> CiderIdf<'a> {
    fn new(corpus: &'a [Vec<String>]) -> Self {
        let mut df = vec![BTreeMap::new(); CIDER_MAX_N];
        for doc in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                let seen: BTreeSet<Gram<'a>> = ngram_counts(doc, n + 1).into_keys().collect();
                for g in seen {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Self {
            df,
            docs: corpus.len(),
        }
    }

    /// Smoothed `ln((N + 1) / (df + 1))`.
    fn idf(&self, n: usize, gram: Gram<'_>) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0);
        ((self.docs as f64 + 1.0) / (df as f64 + 1.0)).ln()
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> BTreeMap<Gram<'t>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * self.idf(n, g);
                (g, w)
            })
            .collect()
    }
}

fn cosine(a: &BTreeMap<Gram<'_>, f64>, b: &BTreeMap<Gram<'_>, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Per-sample CIDEr scores. Document frequencies come from `corpus`.
pub fn cider_scores(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    corpus: &[Vec<String>],
) -> Result<Vec<f64>> {
    check_pairs(candidates, references)?;
    let idf = CiderIdf::new(corpus);
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let delta = c.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mean = (1..=CIDER_MAX_N)
                .map(|n| cosine(&idf.vector(c, n), &idf.vector(r, n)))
                .sum::<f64>()
                / CIDER_MAX_N as f64;
            10.0 * penalty * mean
        })
        .collect())
}

/// Corpus CIDEr: mean of [`cider_scores`] with document frequencies taken
/// over the references themselves.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    let scores = cider_scores(candidates, references, references)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Area under the ROC curve via pairwise comparison (ties count one half).
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Macro AUC over classes with both positives and negatives, scoring each
/// report by the fraction of the class's keywords it mentions.
pub fn clinical_auc(
    generated: &[Vec<String>],
    labels: &[Vec<usize>],
    class_keywords: &[Vec<String>],
) -> Result<f64> {
    if generated.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} reports for {} label sets",
            generated.len(),
            labels.len()
        )));
    }
    let token_sets: Vec<BTreeSet<String>> = generated
        .iter()
        .map(|r| r.iter().map(|t| t.to_lowercase()).collect())
        .collect();
    let mut per_class = Vec::new();
    for (class, keywords) in class_keywords.iter().enumerate() {
        if keywords.is_empty() {
            continue;
        }
        let scores: Vec<f64> = token_sets
            .iter()
            .map(|set| {
                keywords.iter().filter(|k| set.contains(&k.to_lowercase())).count() as f64
                    / keywords.len() as f64
            })
            .collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.contains(&class)).collect();
        match auc(&scores, &truth) {
            Some(a) => per_class.push(a),
            None => log::warn!("class {class} lacks positives or negatives in the eval set; skipped"),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Validation("no class has both positive and negative samples".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cider: f64,
    pub rouge_l: f64,
    pub bleu: [f64; 4],
    pub auc: f64,
}

impl MetricReport {
    pub fn compute(
        candidates: &[Vec<String>],
        references: &[Vec<String>],
        labels: &[Vec<usize>],
        class_keywords: &[Vec<String>],
    ) -> Result<Self> {
        let mut bleu = [0.0; 4];
        for (i, b) in bleu.iter_mut().enumerate() {
            *b = corpus_bleu(candidates, references, i + 1)?;
        }
        Ok(Self {
            cider: cider(candidates, references)?,
            rouge_l: corpus_rouge_l(candidates, references)?,
            bleu,
            auc: clinical_auc(candidates, labels, class_keywords)?,
        })
    }

    pub const HEADER: [&'static str; 7] =
        ["CIDEr", "ROUGE-L", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "AUC"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.cider,
            self.rouge_l,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.auc,
        ]
    }
}

/// Named rows rendered as an aligned text table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<(String, MetricReport)>,
}

impl fmt::Display for MetricTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        write!(f, "{:<width$}", "model")?;
        for h in MetricReport::HEADER {
            write!(f, " {h:>8}")?;
        }
        writeln!(f)?;
        for (name, r) in &self.rows {
            write!(f, "{name:<width$}")?;
            for v in r.values() {
                write!(f, " {v:>8.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

//! Caption drift: a template captioner over detections and overlap metrics
//! between the caption of the original image (the reference) and the caption
//! of the adversarial image.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::Variant;
use crate::detector::DetectionSet;
use crate::metrics::{csv_err, AttackRecord};
use crate::{Error, Result};

pub const CAPTION_OBJECTS: usize = 3;
pub const EMPTY_CAPTION: &str = "an empty scene";

/// "a c1 and a c2 and a c3 on a textured background" over the three most
/// confident non-background detections.
pub fn generate_caption(dets: &DetectionSet, background: Option<usize>) -> Vec<String> {
    let names: Vec<&str> = dets
        .detections
        .iter()
        .map(|d| d.predicted_class())
        .filter(|&c| Some(c) != background)
        .take(CAPTION_OBJECTS)
        .map(|c| dets.class_name(c))
        .collect();
    if names.is_empty() {
        return tokenize(EMPTY_CAPTION);
    }
    let mut out = Vec::new();
    for (i, n) in names.iter().enumerate() {
        if i > 0 {
            out.push("and".to_string());
        }
        out.push("a".to_string());
        out.push(n.to_lowercase());
    }
    out.extend(tokenize("on a textured background"));
    out
}

/// Lowercase whitespace tokenization.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with one reference per candidate: clipped n-gram precisions
/// for orders `1..=n` pooled over the corpus, uniform geometric mean, brevity
/// penalty on total lengths. No smoothing.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidInput(format!("BLEU order must be in 1..=4, got {n}")));
    }
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "need equally many candidates and references, got {} and {}",
            candidates.len(),
            references.len()
        )));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, order);
            for (g, cnt) in ngram_counts(c, order) {
                hit += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if hit == 0 {
            return Ok(0.0);
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F1. Two empty captions score 1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean sentence ROUGE-L over pairs.
pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidInput("need equally many, nonzero candidates and references".into()));
    }
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(s / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub original_caption: Vec<String>,
    pub adversarial_caption: Vec<String>,
    /// Class name of the attacked object; `None` when there is none.
    pub keyword: Option<String>,
}

/// Keyword removal rate (%): among pairs whose original caption contains the
/// keyword, the share whose adversarial caption no longer does. `None` when
/// no pair is eligible.
pub fn kwr(pairs: &[CaptionPair]) -> Option<f64> {
    let mut eligible = 0usize;
    let mut removed = 0usize;
    for p in pairs {
        let Some(k) = &p.keyword else { continue };
        if p.original_caption.contains(k) {
            eligible += 1;
            if !p.adversarial_caption.contains(k) {
                removed += 1;
            }
        }
    }
    (eligible > 0).then(|| 100.0 * removed as f64 / eligible as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub variant: Variant,
    pub pairs: usize,
    /// BLEU-1 to BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub kwr: Option<f64>,
}

impl CaptionMetrics {
    pub fn compute(variant: Variant, pairs: &[CaptionPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("no caption pairs"));
        }
        let cand: Vec<Vec<String>> = pairs.iter().map(|p| p.adversarial_caption.clone()).collect();
        let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.original_caption.clone()).collect();
        let mut bleu = [0.0; 4];
        for (i, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(&cand, &refs, i + 1)?;
        }
        Ok(CaptionMetrics {
            variant,
            pairs: pairs.len(),
            bleu,
            rouge_l: rouge_l_corpus(&cand, &refs)?,
            kwr: kwr(pairs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub rows: Vec<CaptionMetrics>,
}

impl CaptionReport {
    /// Caption metrics per variant over successful attacks, in canonical
    /// record order. Variants without successes are left out.
    pub fn from_records(records: &[AttackRecord]) -> Result<Self> {
        let mut sorted: Vec<&AttackRecord> = records.iter().filter(|r| r.success).collect();
        sorted.sort_by_key(|r| r.key());
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let pairs: Vec<CaptionPair> = sorted
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| CaptionPair {
                    original_caption: tokenize(&r.original_caption),
                    adversarial_caption: tokenize(&r.adversarial_caption),
                    keyword: r.o_pick_name.clone(),
                })
                .collect();
            if !pairs.is_empty() {
                rows.push(CaptionMetrics::compute(v, &pairs)?);
            }
        }
        Ok(CaptionReport { rows })
    }

    pub fn row(&self, v: Variant) -> Option<&CaptionMetrics> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn csv_header() -> Vec<&'static str> {
        vec!["variant", "pairs", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "kwr"]
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![r.variant.name().to_string(), r.pairs.to_string()];
                row.extend(r.bleu.iter().map(|b| format!("{b:.6}")));
                row.push(format!("{:.6}", r.rouge_l));
                row.push(r.kwr.map(|k| format!("{k:.6}")).unwrap_or_default());
                row
            })
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header()).map_err(csv_err)?;
        for row in self.csv_rows() {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

//! Quality (WER, token accuracy, BLEU) and streaming-latency (AP, AL, DAL)
//! metrics over decode logs.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use crate::decoder::DecodeRecord;
use crate::error::{Error, Result};

// ── word error rate ──────────────────────────────────────────────────

/// Levenshtein alignment counts for one sentence pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-edit alignment with unit costs. Ties prefer substitution, then
/// deletion, then insertion, keeping the split deterministic.
pub fn align_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (m, n) = (reference.len(), hypothesis.len());
    let mut dist = vec![0usize; (m + 1) * (n + 1)];
    for i in 0..=m {
        dist[i * (n + 1)] = i;
    }
    for j in 0..=n {
        dist[j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = dist[(i - 1) * (n + 1) + j - 1]
                + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[(i - 1) * (n + 1) + j] + 1;
            let ins = dist[i * (n + 1) + j - 1] + 1;
            dist[i * (n + 1) + j] = sub.min(del).min(ins);
        }
    }
    // Backtrace for the operation split.
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let here = dist[i * (n + 1) + j];
            let diag = dist[(i - 1) * (n + 1) + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && here == diag {
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if here == dist[(i - 1) * (n + 1) + j] + 1 {
                counts.deletions += 1;
                i -= 1;
                continue;
            }
            counts.insertions += 1;
            j -= 1;
        } else if i > 0 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus word error rate: summed edits over summed reference words, as a
/// percentage.
pub fn wer<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let ref_words: usize = references.iter().map(|r| r.len()).sum();
    if ref_words == 0 {
        return Err(Error::Contract("empty reference corpus".into()));
    }
    let edits: usize = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| align_counts(r, h).total())
        .sum();
    Ok(edits as f64 / ref_words as f64 * 100.0)
}

/// Token accuracy: 100 - WER, floored at zero. Counting insertions keeps a
/// model that sprays tokens from scoring above chance.
pub fn token_accuracy<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    Ok((100.0 - wer(references, hypotheses)?).max(0.0))
}

// ── BLEU ─────────────────────────────────────────────────────────────

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions (1..=max_n)
/// times the brevity penalty. No smoothing; any zero precision gives 0.
pub fn bleu<T: Eq + Hash + Clone>(
    references: &[Vec<T>],
    hypotheses: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            for (gram, count) in &hc {
                total[n - 1] += count;
                if let Some(&rcount) = rc.get(gram) {
                    matched[n - 1] += rcount.min(*count);
                }
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

// ── latency ──────────────────────────────────────────────────────────

/// Per-utterance streaming latency. AL and DAL are in source frames unless
/// scaled by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceLatency {
    pub ap: f64,
    pub al: f64,
    pub dal: f64,
}

/// Latency of one utterance from its emission delays.
///
/// With |Y| tokens, source length |X| and gamma = |Y|/|X|:
/// AP  = sum(d_i) / (|X|·|Y|)
/// AL  = (1/tau) * sum_{i<=tau} (d_i - (i-1)/gamma), tau = first i with
///       d_i = |X| (or |Y| when no token consumed the full source)
/// DAL = (1/|Y|) * sum (d'_i - (i-1)/gamma), d'_i = max(d_i, d'_{i-1} +
///       1/gamma), d'_0 = -1/gamma
pub fn utterance_latency(delays: &[usize], source_len: usize) -> Result<UtteranceLatency> {
    let y = delays.len();
    if y == 0 {
        return Err(Error::Contract("empty hypothesis has no latency".into()));
    }
    if source_len == 0 {
        return Err(Error::Contract("source length must be positive".into()));
    }
    for w in delays.windows(2) {
        if w[0] > w[1] {
            return Err(Error::Contract("delays must be non-decreasing".into()));
        }
    }
    if delays.iter().any(|&d| d > source_len) {
        return Err(Error::Contract("delay exceeds source length".into()));
    }
    let x = source_len as f64;
    let gamma = y as f64 / x;

    let ap = delays.iter().map(|&d| d as f64).sum::<f64>() / (x * y as f64);

    let tau = delays
        .iter()
        .position(|&d| d >= source_len)
        .map(|p| p + 1)
        .unwrap_or(y);
    let al = (0..tau)
        .map(|i| delays[i] as f64 - i as f64 / gamma)
        .sum::<f64>()
        / tau as f64;

    let mut d_prev = -1.0 / gamma;
    let mut dal_sum = 0.0;
    for (i, &d) in delays.iter().enumerate() {
        let d_i = (d as f64).max(d_prev + 1.0 / gamma);
        dal_sum += d_i - i as f64 / gamma;
        d_prev = d_i;
    }
    let dal = dal_sum / y as f64;

    Ok(UtteranceLatency { ap, al, dal })
}

/// Corpus latency: unweighted means of per-utterance values. Empty
/// hypotheses are skipped and counted.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub ap: f64,
    pub al: f64,
    pub dal: f64,
    pub utterances: usize,
    pub skipped_empty: usize,
    pub per_utterance: Vec<(String, UtteranceLatency)>,
}

impl LatencyReport {
    /// Convert AL/DAL into milliseconds at a fixed frame duration; AP is
    /// unitless and unchanged.
    pub fn scaled(&self, frame_ms: f64) -> LatencyReport {
        LatencyReport {
            ap: self.ap,
            al: self.al * frame_ms,
            dal: self.dal * frame_ms,
            utterances: self.utterances,
            skipped_empty: self.skipped_empty,
            per_utterance: self
                .per_utterance
                .iter()
                .map(|(id, l)| {
                    (
                        id.clone(),
                        UtteranceLatency {
                            ap: l.ap,
                            al: l.al * frame_ms,
                            dal: l.dal * frame_ms,
                        },
                    )
                })
                .collect(),
        }
    }
}

pub fn latency_report(records: &[DecodeRecord]) -> Result<LatencyReport> {
    let mut per_utterance = Vec::new();
    let mut skipped = 0usize;
    for r in records {
        if r.delays.is_empty() {
            skipped += 1;
            continue;
        }
        per_utterance.push((r.utt_id.clone(), utterance_latency(&r.delays, r.source_len)?));
    }
    let n = per_utterance.len();
    if n == 0 {
        return Err(Error::Contract(
            "no non-empty hypotheses to measure latency on".into(),
        ));
    }
    let mean = |f: fn(&UtteranceLatency) -> f64| {
        per_utterance.iter().map(|(_, l)| f(l)).sum::<f64>() / n as f64
    };
    Ok(LatencyReport {
        ap: mean(|l| l.ap),
        al: mean(|l| l.al),
        dal: mean(|l| l.dal),
        utterances: n,
        skipped_empty: skipped,
        per_utterance,
    })
}

// ── report file ──────────────────────────────────────────────────────

/// Flat report: metric name, value, count — tab-separated, diffable.
pub fn write_report(path: &Path, rows: &[(&str, f64, usize)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for (name, value, count) in rows {
        writeln!(w, "{name}\t{value}\t{count}")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

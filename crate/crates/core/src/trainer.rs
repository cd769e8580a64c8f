//! Training loop for pooled multilingual data, language expansion with a
//! frozen encoder, and checkpoint evaluation.
//!
//! Batches mix all language pairs of the supplied items uniformly at random;
//! nothing in a batch identifies the source language. When the encoder is
//! frozen its per-utterance outputs are computed once and reused, so
//! expansion training only ever walks the branch subgraph.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{load_row_features, CorpusManifest, ManifestRow, Split};
use crate::decoder::{greedy_stream_decode, DecodeConfig, DecodeRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::ChunkMaskSpec;
use crate::metrics;
use crate::model::{BranchId, FeatureSequence, TransducerModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub eval_interval: usize,
}

impl TrainConfig {
    pub fn defaults() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 200,
            batch_size: 8,
            max_steps: 3000,
            seed: 0,
            clip_norm: 5.0,
            eval_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Contract("learning rate and clip norm must be positive".into()));
        }
        if self.warmup_steps == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Contract("warmup, batch size and max steps must be positive".into()));
        }
        Ok(())
    }

    /// Peak-scaled inverse-sqrt schedule: linear ramp over the warmup, then
    /// decay like sqrt(warmup/step).
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let w = self.warmup_steps as f64;
        self.learning_rate * (s / w).min((w / s).sqrt())
    }

    /// Apply one `key=value` line.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Data(format!("bad {what} value {value}"));
        match key {
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "warmup_steps" => self.warmup_steps = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "max_steps" => self.max_steps = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "clip_norm" => self.clip_norm = value.parse().map_err(|_| bad(key))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::Data(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Read a line-oriented `key=value` file; `#` starts a comment, blank
    /// lines are skipped, unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::defaults();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("line {}: expected key=value, got {line}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }
}

/// One training or evaluation utterance, features already in memory.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    pub feats: FeatureSequence,
    pub target: Vec<usize>,
}

/// Load the manifest rows for one target language (optionally restricted to
/// a source set) into memory.
pub fn load_items(
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    target_lang: &str,
    sources: Option<&[String]>,
    split: Split,
) -> Result<Vec<TrainItem>> {
    let keep = |r: &&ManifestRow| {
        r.split == split
            && r.target_lang == target_lang
            && sources.map_or(true, |s| s.iter().any(|l| *l == r.source_lang))
    };
    let mut items = Vec::new();
    for row in manifest.rows.iter().filter(keep) {
        items.push(TrainItem {
            utt_id: row.utt_id.clone(),
            feats: load_row_features(manifest_dir, row)?,
            target: row.target_ids.clone(),
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub trace: Vec<TracePoint>,
    /// (step, held-out token accuracy) at each eval interval.
    pub evals: Vec<(usize, f64)>,
}

/// Loss trace TSV: step, loss, lr.
pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in trace {
        writeln!(w, "{}\t{}\t{}", p.step, p.loss, p.lr)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &TransducerModel) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    fn apply(&mut self, model: &mut TransducerModel, grads: &[Vec<f64>], lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - Self::BETA1.powf(t);
        let bc2 = 1.0 - Self::BETA2.powf(t);
        for i in 0..grads.len() {
            let param = model.params_mut().by_idx_mut(i);
            if !param.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &g) in grads[i].iter().enumerate() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g;
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                param.value.values[j] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Train one branch on the given items. Deterministic in (seed, config,
/// items). Returns the per-step loss trace; the caller owns checkpointing.
pub fn train(
    model: &mut TransducerModel,
    items: &[TrainItem],
    branch: BranchId,
    spec: &ChunkMaskSpec,
    cfg: &TrainConfig,
    eval_items: Option<&[TrainItem]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut outcome = TrainOutcome::default();

    // Frozen encoder: outputs per utterance are constants; compute lazily
    // and reuse across steps.
    let frozen = model.encoder_frozen();
    let mut enc_cache: HashMap<usize, Tensor> = HashMap::new();

    for step in 1..=cfg.max_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..items.len()))
            .collect();
        let mut grads: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;

        for &idx in &batch {
            let item = &items[idx];
            token_sum += item.target.len();
            let mut run = || -> Result<f64> {
                let mut g = Graph::new();
                let loss = if frozen {
                    let enc_out = match enc_cache.get(&idx) {
                        Some(t) => t.clone(),
                        None => {
                            let t = model.encode(&item.feats, spec)?;
                            enc_cache.insert(idx, t.clone());
                            t
                        }
                    };
                    let lang = &model.branch_by_id(branch).lang;
                    let bound = model.bind_prefix(&mut g, &format!("branch/{lang}/"));
                    let enc = g.leaf(enc_out);
                    let pred = model.predictor_rows_graph(&mut g, &bound, branch, &item.target)?;
                    let logits = model.joint_logits_graph(&mut g, &bound, branch, enc, pred)?;
                    let logp = g.log_softmax(logits)?;
                    let loss = g.transducer_nll(logp, item.feats.t(), &item.target)?;
                    g.backward(loss)?;
                    accumulate(model, &g, &bound, &mut grads);
                    g.value(loss).values[0]
                } else {
                    let bound = model.bind(&mut g);
                    let loss =
                        model.utterance_nll_graph(&mut g, &bound, &item.feats, spec, branch, &item.target)?;
                    g.backward(loss)?;
                    accumulate(model, &g, &bound, &mut grads);
                    g.value(loss).values[0]
                };
                Ok(loss)
            };
            let loss = run().map_err(|e| {
                Error::NonFinite(format!(
                    "step {step}, utterance {}: {e}",
                    item.utt_id
                ))
            })?;
            nll_sum += loss;
        }

        let denom = token_sum.max(1) as f64;
        let batch_loss = nll_sum / denom;
        if !batch_loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| items[i].utt_id.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "loss at step {step} on batch {ids:?}"
            )));
        }
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v /= denom;
            }
        }

        // Global norm clip over trainable parameters.
        let mut norm_sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if model.params().by_idx(i).trainable {
                norm_sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        if norm > cfg.clip_norm {
            let scale = cfg.clip_norm / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }

        let lr = cfg.lr_at(step);
        adam.apply(model, &grads, lr);
        outcome.trace.push(TracePoint {
            step,
            loss: batch_loss,
            lr,
        });

        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            if let Some(eval) = eval_items {
                let decode = DecodeConfig::greedy(*spec);
                let summary = evaluate(model, branch, eval, &decode)?;
                outcome.evals.push((step, summary.eval.token_accuracy));
            }
        }
    }
    Ok(outcome)
}

fn accumulate(
    model: &TransducerModel,
    g: &Graph,
    bound: &crate::model::BoundModel,
    grads: &mut [Vec<f64>],
) {
    for i in 0..model.params().len() {
        if let Some(id) = bound.ids[i] {
            let src = g.grad(id);
            let dst = &mut grads[i];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

// ── expansion ────────────────────────────────────────────────────────

/// Fig.-3-style language expansion: freeze the encoder, add a fresh branch,
/// train it on the declared source subset only.
#[derive(Debug, Clone)]
pub struct ExpansionPlan {
    pub new_lang: String,
    pub vocab_size: usize,
    /// Source languages whose ({source}, new_lang) pairs feed the training.
    pub sources: Vec<String>,
    pub branch_seed: u64,
    pub train: TrainConfig,
}

pub fn expand(
    model: &mut TransducerModel,
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    spec: &ChunkMaskSpec,
    plan: &ExpansionPlan,
) -> Result<TrainOutcome> {
    if model.branches().iter().any(|b| b.lang == plan.new_lang) {
        return Err(Error::Contract(format!(
            "branch {} already exists",
            plan.new_lang
        )));
    }
    for src in &plan.sources {
        let has_rows = manifest.rows.iter().any(|r| {
            r.split == Split::Train && r.source_lang == *src && r.target_lang == plan.new_lang
        });
        if !has_rows {
            return Err(Error::Data(format!(
                "no training data for pair {src}>{}",
                plan.new_lang
            )));
        }
    }
    let items = load_items(
        manifest,
        manifest_dir,
        &plan.new_lang,
        Some(&plan.sources),
        Split::Train,
    )?;
    let branch = model.add_branch(&plan.new_lang, plan.vocab_size, plan.branch_seed)?;
    model.freeze_encoder();
    train(model, &items, branch, spec, &plan.train, None)
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub token_accuracy: f64,
    pub wer: f64,
    pub bleu: f64,
    pub sentences: usize,
    pub ref_tokens: usize,
    pub hyp_tokens: usize,
}

pub fn eval_summary(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<EvalSummary> {
    Ok(EvalSummary {
        token_accuracy: metrics::token_accuracy(references, hypotheses)?,
        wer: metrics::wer(references, hypotheses)?,
        bleu: metrics::bleu(references, hypotheses, 4)?,
        sentences: references.len(),
        ref_tokens: references.iter().map(|r| r.len()).sum(),
        hyp_tokens: hypotheses.iter().map(|h| h.len()).sum(),
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub eval: EvalSummary,
    /// None when every hypothesis came out empty.
    pub latency: Option<metrics::LatencyReport>,
    pub records: Vec<DecodeRecord>,
}

/// Greedy-decode every item and score it against the references.
pub fn evaluate(
    model: &TransducerModel,
    branch: BranchId,
    items: &[TrainItem],
    decode: &DecodeConfig,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Contract("no evaluation items".into()));
    }
    let lang = model.branch_by_id(branch).lang.clone();
    let mut records = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    let mut hyps = Vec::with_capacity(items.len());
    for item in items {
        let hyp = greedy_stream_decode(model, branch, &item.feats, decode)?;
        refs.push(item.target.clone());
        hyps.push(hyp.tokens.clone());
        records.push(DecodeRecord {
            utt_id: item.utt_id.clone(),
            branch: lang.clone(),
            tokens: hyp.tokens,
            score: hyp.score,
            delays: hyp.emission_delays,
            source_len: item.feats.t(),
        });
    }
    let latency = match metrics::latency_report(&records) {
        Ok(r) => Some(r),
        Err(_) => None,
    };
    Ok(Evaluation {
        eval: eval_summary(&refs, &hyps)?,
        latency,
        records,
    })
}

//! Streaming greedy and beam decoding over the transducer, recording the
//! source frames consumed at each emission for latency evaluation.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ChunkMaskSpec;
use crate::model::{BranchId, FeatureSequence, PredictorState, StreamState, TransducerModel, BLANK};
use crate::tensor::log_softmax_rows;

/// One decoded hypothesis. `emission_delays[i]` is the number of source
/// frames whose chunks had fully arrived when token i was emitted; it is
/// non-decreasing and a multiple of the chunk size except after a partial
/// final chunk.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub emission_delays: Vec<usize>,
    pub predictor_state: PredictorState,
}

impl Hypothesis {
    fn empty(state: PredictorState) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            emission_delays: Vec::new(),
            predictor_state: state,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_symbols_per_frame: usize,
    pub spec: ChunkMaskSpec,
}

impl DecodeConfig {
    pub fn greedy(spec: ChunkMaskSpec) -> Self {
        DecodeConfig {
            beam_width: 1,
            max_symbols_per_frame: 5,
            spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Contract("beam width must be >= 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Contract("max symbols per frame must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic argmax: the lowest index wins exact ties, so blank (index 0)
/// is preferred when tied.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding session fed one chunk at a time. The session only ever
/// sees arrived chunks, so it cannot peek at future frames.
pub struct StreamingDecodeSession<'m> {
    model: &'m TransducerModel,
    branch: BranchId,
    config: DecodeConfig,
    enc_state: StreamState,
    frames_fed: usize,
    h_pre: Vec<f64>,
    hyp: Hypothesis,
}

impl<'m> StreamingDecodeSession<'m> {
    pub fn new(model: &'m TransducerModel, branch: BranchId, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        let (h_pre, state) = model.predict_start(branch);
        Ok(StreamingDecodeSession {
            model,
            branch,
            config,
            enc_state: StreamState::new(),
            frames_fed: 0,
            h_pre,
            hyp: Hypothesis::empty(state),
        })
    }

    /// Feed the next chunk and decode its frames.
    pub fn push_chunk(&mut self, chunk: &FeatureSequence) -> Result<()> {
        let rows = self
            .model
            .encode_incremental(&mut self.enc_state, chunk, &self.config.spec)?;
        self.frames_fed += chunk.t();
        let h = rows.cols();
        for r in 0..rows.rows() {
            self.decode_frame(&rows.values[r * h..(r + 1) * h])?;
        }
        Ok(())
    }

    fn decode_frame(&mut self, enc_row: &[f64]) -> Result<()> {
        for sym in 0..=self.config.max_symbols_per_frame {
            let logits = self.model.joint(self.branch, enc_row, &self.h_pre)?;
            let lp = log_softmax_rows(&logits, 1, logits.len());
            let k = if sym == self.config.max_symbols_per_frame {
                BLANK // symbol cap: force the read transition
            } else {
                argmax(&lp)
            };
            if k == BLANK {
                self.hyp.score += lp[BLANK];
                return Ok(());
            }
            self.hyp.score += lp[k];
            self.hyp.tokens.push(k);
            self.hyp.emission_delays.push(self.frames_fed);
            let (h_pre, state) = self.model.predict(self.branch, k, &self.hyp.predictor_state)?;
            self.h_pre = h_pre;
            self.hyp.predictor_state = state;
        }
        Ok(())
    }

    pub fn finish(self) -> Hypothesis {
        self.hyp
    }
}

/// Greedy streaming decode of a whole utterance: frames are consumed in
/// chunks of the configured size, emitting per encoder frame as its chunk
/// arrives.
pub fn greedy_stream_decode(
    model: &TransducerModel,
    branch: BranchId,
    feats: &FeatureSequence,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    let mut session = StreamingDecodeSession::new(model, branch, *config)?;
    let u = config.spec.chunk_size;
    let t = feats.t();
    let mut start = 0;
    while start < t {
        let end = (start + u).min(t);
        session.push_chunk(&feats.slice(start, end)?)?;
        start = end;
    }
    Ok(session.finish())
}

struct BeamHyp {
    tokens: Vec<usize>,
    score: f64,
    delays: Vec<usize>,
    state: PredictorState,
    h_pre: Vec<f64>,
}

/// Merge a hypothesis into a pool keyed by token sequence, log-adding scores
/// of duplicates. The higher-scoring member keeps its delays.
fn merge_into(pool: &mut Vec<BeamHyp>, hyp: BeamHyp) {
    if let Some(existing) = pool.iter_mut().find(|h| h.tokens == hyp.tokens) {
        let (hi, lo) = if existing.score >= hyp.score {
            (existing.score, hyp.score)
        } else {
            existing.delays = hyp.delays;
            existing.state = hyp.state;
            existing.h_pre = hyp.h_pre;
            (hyp.score, existing.score)
        };
        existing.score = hi + (lo - hi).exp().ln_1p();
    } else {
        pool.push(hyp);
    }
}

/// Time-synchronous beam search; returns the N-best list sorted by score,
/// best first. Width 1 degenerates to [`greedy_stream_decode`].
pub fn beam_decode(
    model: &TransducerModel,
    branch: BranchId,
    feats: &FeatureSequence,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    if config.beam_width == 1 {
        return Ok(vec![greedy_stream_decode(model, branch, feats, config)?]);
    }
    let width = config.beam_width;
    let spec = &config.spec;
    let vocab = model.branch_by_id(branch).vocab_size;

    let (h_pre, state) = model.predict_start(branch);
    let mut beam = vec![BeamHyp {
        tokens: Vec::new(),
        score: 0.0,
        delays: Vec::new(),
        state,
        h_pre,
    }];

    let mut enc_state = StreamState::new();
    let t_total = feats.t();
    let mut start = 0;
    while start < t_total {
        let end = (start + spec.chunk_size).min(t_total);
        let rows = model.encode_incremental(&mut enc_state, &feats.slice(start, end)?, spec)?;
        let consumed = end;
        let h = rows.cols();
        for r in 0..rows.rows() {
            let enc_row = &rows.values[r * h..(r + 1) * h];
            let mut alive = beam;
            let mut done: Vec<BeamHyp> = Vec::new();
            for sym in 0..=config.max_symbols_per_frame {
                if alive.is_empty() {
                    break;
                }
                // (parent index, token, new score); parents move to `done`
                // via blank regardless.
                let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
                let mut parent_lps: Vec<Vec<f64>> = Vec::with_capacity(alive.len());
                for (pi, hyp) in alive.iter().enumerate() {
                    let logits = model.joint(branch, enc_row, &hyp.h_pre)?;
                    let lp = log_softmax_rows(&logits, 1, logits.len());
                    if sym < config.max_symbols_per_frame {
                        for k in 1..=vocab {
                            candidates.push((pi, k, hyp.score + lp[k]));
                        }
                    }
                    parent_lps.push(lp);
                }
                for (pi, hyp) in alive.iter().enumerate() {
                    merge_into(
                        &mut done,
                        BeamHyp {
                            tokens: hyp.tokens.clone(),
                            score: hyp.score + parent_lps[pi][BLANK],
                            delays: hyp.delays.clone(),
                            state: hyp.state.clone(),
                            h_pre: hyp.h_pre.clone(),
                        },
                    );
                }
                candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
                candidates.truncate(width);
                let mut next_alive: Vec<BeamHyp> = Vec::with_capacity(candidates.len());
                for (pi, k, score) in candidates {
                    let parent = &alive[pi];
                    let (h_pre, state) = model.predict(branch, k, &parent.state)?;
                    let mut tokens = parent.tokens.clone();
                    tokens.push(k);
                    let mut delays = parent.delays.clone();
                    delays.push(consumed);
                    merge_into(
                        &mut next_alive,
                        BeamHyp {
                            tokens,
                            score,
                            delays,
                            state,
                            h_pre,
                        },
                    );
                }
                next_alive.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                next_alive.truncate(width);
                alive = next_alive;
            }
            done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            done.truncate(width);
            beam = done;
        }
        start = end;
    }

    Ok(beam
        .into_iter()
        .map(|h| Hypothesis {
            tokens: h.tokens,
            score: h.score,
            emission_delays: h.delays,
            predictor_state: h.state,
        })
        .collect())
}

// ── decode log ───────────────────────────────────────────────────────

/// One line of the decode log consumed by the metrics pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub branch: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    pub delays: Vec<usize>,
    pub source_len: usize,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_ids(field: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad id {t} in decode log")))
        })
        .collect()
}

pub fn write_decode_log(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.utt_id,
            r.branch,
            join_ids(&r.tokens),
            r.score,
            join_ids(&r.delays),
            r.source_len
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_decode_log(path: &Path) -> Result<Vec<DecodeRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "decode log line {}: want 6 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        out.push(DecodeRecord {
            utt_id: fields[0].to_string(),
            branch: fields[1].to_string(),
            tokens: parse_ids(fields[2])?,
            score: fields[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad score {}", fields[3])))?,
            delays: parse_ids(fields[4])?,
            source_len: fields[5]
                .parse()
                .map_err(|_| Error::Data(format!("bad source length {}", fields[5])))?,
        });
    }
    Ok(out)
}

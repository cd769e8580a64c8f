//! The transducer model: a chunk-masked streaming transformer encoder shared
//! by every output language, plus per-language branches each holding a
//! recurrent prediction network and a feedforward joint network.
//!
//! The encoder forward pass has exactly one implementation, built on the
//! autodiff graph; inference simply discards the graph. The incremental
//! encoder feeds cached per-layer inputs back through the same ops, so
//! streaming and offline values agree bit for bit.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::{build_chunk_mask, AttnMask, ChunkMaskSpec};
use crate::tensor::{self, Tensor};

/// Input features for one utterance: a T×D frame matrix. The optional
/// source-language tag exists for corpus bookkeeping and evaluation reports
/// only; no model operation reads it, so the forward path cannot condition on
/// language identity.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    frames: Tensor,
    source_lang: Option<String>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "feature sequence wants T×D, got {:?}",
                frames.shape
            )));
        }
        Ok(FeatureSequence {
            frames,
            source_lang: None,
        })
    }

    pub fn with_source_lang(mut self, lang: impl Into<String>) -> Self {
        self.source_lang = Some(lang.into());
        self
    }

    pub fn t(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn d(&self) -> usize {
        self.frames.shape[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// Corpus/evaluation metadata; the model never calls this.
    pub fn source_lang(&self) -> Option<&str> {
        self.source_lang.as_deref()
    }

    /// Rows `r0..r1` as a new sequence (metadata dropped).
    pub fn slice(&self, r0: usize, r1: usize) -> Result<FeatureSequence> {
        let d = self.d();
        let vals = self.frames.values[r0 * d..r1 * d].to_vec();
        FeatureSequence::new(Tensor::new(vec![r1 - r0, d], vals)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub predictor_layers: usize,
    pub predictor_dim: usize,
    pub joint_dim: usize,
    pub chunk: ChunkMaskSpec,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on a CPU while exercising every
    /// mechanism of the full-size shape.
    pub fn desk_default() -> Self {
        ModelConfig {
            feature_dim: 16,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 128,
            predictor_layers: 1,
            predictor_dim: 64,
            joint_dim: 64,
            chunk: ChunkMaskSpec {
                chunk_size: 4,
                left_chunks: 1,
                num_layers: 4,
            },
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.ff_dim,
            self.predictor_layers,
            self.predictor_dim,
            self.joint_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract("model dims must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Contract(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.chunk.num_layers != self.num_layers {
            return Err(Error::Contract(format!(
                "chunk spec is for {} layers, encoder has {}",
                self.chunk.num_layers, self.num_layers
            )));
        }
        Ok(())
    }

    /// The training-time chunk spec with a different chunk geometry, e.g. for
    /// decoding at another latency.
    pub fn spec_with(&self, chunk_size: usize, left_chunks: usize) -> Result<ChunkMaskSpec> {
        ChunkMaskSpec::new(chunk_size, left_chunks, self.num_layers)
    }
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in a stable insertion order; the order defines optimizer
/// state layout, checkpoint layout, and gradient accumulation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.idx(name)]
    }

    pub fn by_idx(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total f64 element count under a name prefix.
    pub fn element_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Raw little-endian bytes of every parameter under a prefix, in order.
    /// Used by freezing tests to compare encoder state bitwise.
    pub fn bytes_of(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            for v in &p.value.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, values).expect("init shape")
}

// ── model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchId(pub usize);

/// One target language: its vocabulary plus the names of its prediction and
/// joint parameters. Output index 0 is always blank.
#[derive(Debug, Clone)]
pub struct Branch {
    pub id: BranchId,
    pub lang: String,
    pub vocab_size: usize,
}

impl Branch {
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }
}

pub const BLANK: usize = 0;

#[derive(Debug, Clone)]
pub struct TransducerModel {
    pub config: ModelConfig,
    params: ParamSet,
    branches: Vec<Branch>,
}

impl TransducerModel {
    /// Fresh model with a seeded encoder and no branches yet.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f) = (config.feature_dim, config.hidden_dim, config.ff_dim);

        params.add("encoder/input/w", glorot(&mut rng, d, h, vec![d, h]));
        params.add("encoder/input/b", Tensor::zeros(vec![h]));
        for l in 0..config.num_layers {
            let p = |s: &str| format!("encoder/l{l}/{s}");
            params.add(p("ln1/g"), Tensor::new(vec![h], vec![1.0; h])?);
            params.add(p("ln1/b"), Tensor::zeros(vec![h]));
            for w in ["wq", "wk", "wv", "wo"] {
                params.add(p(&format!("attn/{w}")), glorot(&mut rng, h, h, vec![h, h]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.add(p(&format!("attn/{b}")), Tensor::zeros(vec![h]));
            }
            params.add(p("ln2/g"), Tensor::new(vec![h], vec![1.0; h])?);
            params.add(p("ln2/b"), Tensor::zeros(vec![h]));
            params.add(p("ff/w1"), glorot(&mut rng, h, f, vec![h, f]));
            params.add(p("ff/b1"), Tensor::zeros(vec![f]));
            params.add(p("ff/w2"), glorot(&mut rng, f, h, vec![f, h]));
            params.add(p("ff/b2"), Tensor::zeros(vec![h]));
        }
        params.add("encoder/final_ln/g", Tensor::new(vec![h], vec![1.0; h])?);
        params.add("encoder/final_ln/b", Tensor::zeros(vec![h]));

        Ok(TransducerModel {
            config,
            params,
            branches: Vec::new(),
        })
    }

    /// Register a new target language: fresh prediction and joint parameters,
    /// encoder untouched. Deterministic in `seed`.
    pub fn add_branch(&mut self, lang: &str, vocab_size: usize, seed: u64) -> Result<BranchId> {
        if self.branches.iter().any(|b| b.lang == lang) {
            return Err(Error::Contract(format!("branch {lang} already exists")));
        }
        if vocab_size == 0 {
            return Err(Error::Contract("vocabulary must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, p, j) = (
            self.config.hidden_dim,
            self.config.predictor_dim,
            self.config.joint_dim,
        );
        let out = vocab_size + 1;
        let base = format!("branch/{lang}");
        // Embedding row 0 is the start symbol; blank is never fed back.
        self.params.add(
            format!("{base}/embed"),
            glorot(&mut rng, out, p, vec![out, p]),
        );
        for l in 0..self.config.predictor_layers {
            for w in ["wxz", "whz", "wxr", "whr", "wxn", "whn"] {
                self.params.add(
                    format!("{base}/gru{l}/{w}"),
                    glorot(&mut rng, p, p, vec![p, p]),
                );
            }
            for b in ["bz", "br", "bn"] {
                self.params
                    .add(format!("{base}/gru{l}/{b}"), Tensor::zeros(vec![p]));
            }
        }
        self.params
            .add(format!("{base}/joint/we"), glorot(&mut rng, h, j, vec![h, j]));
        self.params
            .add(format!("{base}/joint/wp"), glorot(&mut rng, p, j, vec![p, j]));
        self.params
            .add(format!("{base}/joint/b"), Tensor::zeros(vec![j]));
        self.params.add(
            format!("{base}/joint/wo"),
            glorot(&mut rng, j, out, vec![j, out]),
        );
        self.params
            .add(format!("{base}/joint/bo"), Tensor::zeros(vec![out]));

        let id = BranchId(self.branches.len());
        self.branches.push(Branch {
            id,
            lang: lang.to_string(),
            vocab_size,
        });
        Ok(id)
    }

    /// Mark every encoder parameter non-trainable. Gradients may still be
    /// computed through the encoder; the optimizer skips it.
    pub fn freeze_encoder(&mut self) {
        for p in &mut self.params.params {
            if p.name.starts_with("encoder/") {
                p.trainable = false;
            }
        }
    }

    pub fn encoder_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("encoder/"))
            .all(|p| !p.trainable)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, lang: &str) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|b| b.lang == lang)
            .ok_or_else(|| Error::Contract(format!("unknown branch {lang}")))
    }

    pub fn branch_by_id(&self, id: BranchId) -> &Branch {
        &self.branches[id.0]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn restore(config: ModelConfig, params: ParamSet, branches: Vec<Branch>) -> Self {
        TransducerModel {
            config,
            params,
            branches,
        }
    }

    // ── graph binding ────────────────────────────────────────────────

    /// Insert every parameter as a graph leaf; `BoundModel` maps parameter
    /// index to node id so gradients can be read back in parameter order.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|p| Some(g.leaf(p.value.clone())))
            .collect();
        BoundModel { ids }
    }

    /// Bind only parameters under a name prefix (e.g. just the encoder for
    /// incremental chunks).
    pub fn bind_prefix(&self, g: &mut Graph, prefix: &str) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|p| {
                if p.name.starts_with(prefix) {
                    Some(g.leaf(p.value.clone()))
                } else {
                    None
                }
            })
            .collect();
        BoundModel { ids }
    }

    fn node(&self, bound: &BoundModel, name: &str) -> NodeId {
        bound.ids[self.params.idx(name)]
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    // ── encoder ──────────────────────────────────────────────────────

    /// Input projection plus sinusoidal positions for frames starting at
    /// absolute index `offset`.
    fn embed_frames_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        frames: &Tensor,
        offset: usize,
    ) -> Result<NodeId> {
        let t = frames.shape[0];
        let h = self.config.hidden_dim;
        let feats = g.leaf(frames.clone());
        let w = self.node(bound, "encoder/input/w");
        let b = self.node(bound, "encoder/input/b");
        let proj = g.matmul(feats, w)?;
        let proj = g.add_row(proj, b)?;
        let mut pos = Vec::with_capacity(t * h);
        for i in 0..t {
            pos.extend_from_slice(&tensor::sinusoid_position(offset + i, h));
        }
        let pos = g.leaf(Tensor::new(vec![t, h], pos)?);
        g.add(proj, pos)
    }

    /// One pre-norm encoder layer. `x_cur` holds the query rows; `x_window`
    /// holds the key/value rows with the query rows as its suffix. `mask` is
    /// queries×window.
    #[allow(clippy::too_many_arguments)]
    fn encoder_layer_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        layer: usize,
        x_cur: NodeId,
        x_window: NodeId,
        mask: &Arc<AttnMask>,
    ) -> Result<NodeId> {
        let h = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = h / heads;
        let eps = self.config.layer_norm_eps;
        let p = |s: &str| format!("encoder/l{layer}/{s}");

        let q_rows = g.value(x_cur).rows();
        let w_rows = g.value(x_window).rows();

        let ln1_g = self.node(bound, &p("ln1/g"));
        let ln1_b = self.node(bound, &p("ln1/b"));
        let a_win = g.layer_norm(x_window, ln1_g, ln1_b, eps)?;
        let a_cur = g.slice_rows(a_win, w_rows - q_rows, w_rows)?;

        let wq = self.node(bound, &p("attn/wq"));
        let wk = self.node(bound, &p("attn/wk"));
        let wv = self.node(bound, &p("attn/wv"));
        let bq = self.node(bound, &p("attn/bq"));
        let bk = self.node(bound, &p("attn/bk"));
        let bv = self.node(bound, &p("attn/bv"));
        let q = g.matmul(a_cur, wq)?;
        let q = g.add_row(q, bq)?;
        let k = g.matmul(a_win, wk)?;
        let k = g.add_row(k, bk)?;
        let v = g.matmul(a_win, wv)?;
        let v = g.add_row(v, bv)?;

        let mut head_ctx = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (c0, c1) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice_cols(q, c0, c1)?;
            let kh = g.slice_cols(k, c0, c1)?;
            let vh = g.slice_cols(v, c0, c1)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let probs = g.masked_softmax(scores, Arc::clone(mask))?;
            head_ctx.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&head_ctx)?;
        let wo = self.node(bound, &p("attn/wo"));
        let bo = self.node(bound, &p("attn/bo"));
        let attn = g.matmul(ctx, wo)?;
        let attn = g.add_row(attn, bo)?;
        let x2 = g.add(x_cur, attn)?;

        let ln2_g = self.node(bound, &p("ln2/g"));
        let ln2_b = self.node(bound, &p("ln2/b"));
        let f = g.layer_norm(x2, ln2_g, ln2_b, eps)?;
        let w1 = self.node(bound, &p("ff/w1"));
        let b1 = self.node(bound, &p("ff/b1"));
        let w2 = self.node(bound, &p("ff/w2"));
        let b2 = self.node(bound, &p("ff/b2"));
        let ff = g.matmul(f, w1)?;
        let ff = g.add_row(ff, b1)?;
        let ff = g.relu(ff)?;
        let ff = g.matmul(ff, w2)?;
        let ff = g.add_row(ff, b2)?;
        g.add(x2, ff)
    }

    /// Whole-utterance encoder under the chunk mask; returns the T×H node.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        feats: &FeatureSequence,
        spec: &ChunkMaskSpec,
    ) -> Result<NodeId> {
        if feats.d() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {} != model dim {}",
                feats.d(),
                self.config.feature_dim
            )));
        }
        let mask = Arc::new(build_chunk_mask(feats.t(), spec));
        let mut x = self.embed_frames_graph(g, bound, feats.frames(), 0)?;
        for l in 0..self.config.num_layers {
            x = self.encoder_layer_graph(g, bound, l, x, x, &mask)?;
        }
        let gn = self.node(bound, "encoder/final_ln/g");
        let bn = self.node(bound, "encoder/final_ln/b");
        g.layer_norm(x, gn, bn, self.config.layer_norm_eps)
    }

    /// Offline encode: the full utterance under the chunk mask. Inference
    /// entry point; the backing graph is discarded.
    pub fn encode(&self, feats: &FeatureSequence, spec: &ChunkMaskSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_prefix(&mut g, "encoder/");
        let out = self.encode_graph(&mut g, &bound, feats, spec)?;
        Ok(g.value(out).clone())
    }

    /// Feed one chunk (length <= U; a shorter chunk closes the stream) and
    /// get the encoder rows for exactly those frames.
    pub fn encode_incremental(
        &self,
        state: &mut StreamState,
        chunk: &FeatureSequence,
        spec: &ChunkMaskSpec,
    ) -> Result<Tensor> {
        if chunk.d() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {} != model dim {}",
                chunk.d(),
                self.config.feature_dim
            )));
        }
        if state.finalized {
            return Err(Error::Contract(
                "stream already closed by a partial chunk; chunks must arrive in order".into(),
            ));
        }
        if chunk.t() > spec.chunk_size {
            return Err(Error::Contract(format!(
                "chunk of {} frames exceeds chunk size {}",
                chunk.t(),
                spec.chunk_size
            )));
        }
        if chunk.t() < spec.chunk_size {
            state.finalized = true;
        }
        if state.cache.is_empty() {
            state.cache = vec![VecDeque::new(); self.config.num_layers];
        }

        let mut g = Graph::new();
        let bound = self.bind_prefix(&mut g, "encoder/");
        let mut x_cur =
            self.embed_frames_graph(&mut g, &bound, chunk.frames(), state.frames_seen)?;
        for l in 0..self.config.num_layers {
            // Cache this layer's input before computing its output.
            let cur_tensor = g.value(x_cur).clone();
            let window = if state.cache[l].is_empty() {
                x_cur
            } else {
                let mut parts: Vec<NodeId> = state.cache[l]
                    .iter()
                    .map(|t| g.leaf(t.clone()))
                    .collect();
                parts.push(x_cur);
                g.concat_rows(&parts)?
            };
            let q_rows = g.value(x_cur).rows();
            let w_rows = g.value(window).rows();
            let mask = Arc::new(AttnMask::full(q_rows, w_rows));
            x_cur = self.encoder_layer_graph(&mut g, &bound, l, x_cur, window, &mask)?;
            state.cache[l].push_back(cur_tensor);
            while state.cache[l].len() > spec.left_chunks {
                state.cache[l].pop_front();
            }
        }
        let gn = self.node(&bound, "encoder/final_ln/g");
        let bn = self.node(&bound, "encoder/final_ln/b");
        let out = g.layer_norm(x_cur, gn, bn, self.config.layer_norm_eps)?;
        state.frames_seen += chunk.t();
        state.chunk_index += 1;
        Ok(g.value(out).clone())
    }

    // ── prediction network ───────────────────────────────────────────

    fn gru_step_raw(
        &self,
        lang: &str,
        layer: usize,
        x: &[f64],
        h: &[f64],
    ) -> Vec<f64> {
        let p = self.config.predictor_dim;
        let name = |s: &str| format!("branch/{lang}/gru{layer}/{s}");
        let w = |s: &str| &self.params.get(&name(s)).value.values;

        let gate = |wx: &str, wh: &str, b: &str| -> Vec<f64> {
            let a = tensor::matmul(x, w(wx), 1, p, p);
            let c = tensor::matmul(h, w(wh), 1, p, p);
            let mut out: Vec<f64> = a.iter().zip(&c).map(|(u, v)| u + v).collect();
            let bias = w(b);
            for (o, bv) in out.iter_mut().zip(bias) {
                *o += bv;
            }
            out
        };
        let z: Vec<f64> = gate("wxz", "whz", "bz").iter().map(|&v| tensor::sigmoid(v)).collect();
        let r: Vec<f64> = gate("wxr", "whr", "br").iter().map(|&v| tensor::sigmoid(v)).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(rv, hv)| rv * hv).collect();
        let a = tensor::matmul(x, w("wxn"), 1, p, p);
        let c = tensor::matmul(&rh, w("whn"), 1, p, p);
        let bias = w("bn");
        let n: Vec<f64> = (0..p).map(|i| (a[i] + c[i] + bias[i]).tanh()).collect();
        (0..p).map(|i| z[i] * h[i] + (1.0 - z[i]) * n[i]).collect()
    }

    fn predictor_advance(&self, lang: &str, embed_row: &[f64], state: &PredictorState) -> (Vec<f64>, PredictorState) {
        let mut x = embed_row.to_vec();
        let mut hidden = Vec::with_capacity(self.config.predictor_layers);
        for l in 0..self.config.predictor_layers {
            let h_new = self.gru_step_raw(lang, l, &x, &state.hidden[l]);
            x = h_new.clone();
            hidden.push(h_new);
        }
        let out = x;
        (
            out,
            PredictorState {
                hidden,
                last_token: state.last_token,
            },
        )
    }

    /// Start-of-sequence step from the zero state: produces the
    /// representation used before any token has been emitted.
    pub fn predict_start(&self, branch: BranchId) -> (Vec<f64>, PredictorState) {
        let b = self.branch_by_id(branch);
        let zero = PredictorState::zero(self.config.predictor_layers, self.config.predictor_dim);
        let embed = self.params.get(&format!("branch/{}/embed", b.lang));
        let (out, state) = self.predictor_advance(&b.lang, embed.value.row(0), &zero);
        (out, state)
    }

    /// One recurrent step on a non-blank token.
    pub fn predict(
        &self,
        branch: BranchId,
        token: usize,
        state: &PredictorState,
    ) -> Result<(Vec<f64>, PredictorState)> {
        let b = self.branch_by_id(branch);
        if token == BLANK {
            return Err(Error::Contract(
                "blank never advances the prediction network".into(),
            ));
        }
        if token > b.vocab_size {
            return Err(Error::Contract(format!(
                "token {token} outside vocabulary 1..={}",
                b.vocab_size
            )));
        }
        let embed = self.params.get(&format!("branch/{}/embed", b.lang));
        let (out, mut next) = self.predictor_advance(&b.lang, embed.value.row(token), state);
        next.last_token = Some(token);
        Ok((out, next))
    }

    /// Predictor rows for training: one row per lattice label index
    /// u = 0..=U, row u conditioned on SOS plus the first u target tokens.
    pub fn predictor_rows_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        branch: BranchId,
        target: &[usize],
    ) -> Result<NodeId> {
        let b = self.branch_by_id(branch);
        let lang = &b.lang;
        let p = self.config.predictor_dim;
        let mut ids = Vec::with_capacity(target.len() + 1);
        ids.push(0); // start symbol
        for &t in target {
            if t == BLANK || t > b.vocab_size {
                return Err(Error::Contract(format!(
                    "target token {t} outside vocabulary 1..={}",
                    b.vocab_size
                )));
            }
            ids.push(t);
        }
        let table = self.node(bound, &format!("branch/{lang}/embed"));
        let embedded = g.embed(table, &ids)?;

        let mut rows = Vec::with_capacity(ids.len());
        let mut hidden: Vec<NodeId> = (0..self.config.predictor_layers)
            .map(|_| g.leaf(Tensor::zeros(vec![1, p])))
            .collect();
        for (u, _) in ids.iter().enumerate() {
            let mut x = g.slice_rows(embedded, u, u + 1)?;
            for l in 0..self.config.predictor_layers {
                x = self.gru_step_graph(g, bound, lang, l, x, hidden[l])?;
                hidden[l] = x;
            }
            rows.push(x);
        }
        g.concat_rows(&rows)
    }

    fn gru_step_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        lang: &str,
        layer: usize,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let name = |s: &str| format!("branch/{lang}/gru{layer}/{s}");
        let w = |m: &TransducerModel, s: &str| m.node(bound, &name(s));

        let gate = |g: &mut Graph, wx: &str, wh: &str, b: &str| -> Result<NodeId> {
            let a = g.matmul(x, w(self, wx))?;
            let c = g.matmul(h, w(self, wh))?;
            let s = g.add(a, c)?;
            g.add_row(s, w(self, b))
        };
        let z_pre = gate(g, "wxz", "whz", "bz")?;
        let z = g.sigmoid(z_pre)?;
        let r_pre = gate(g, "wxr", "whr", "br")?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h)?;
        let a = g.matmul(x, w(self, "wxn"))?;
        let c = g.matmul(rh, w(self, "whn"))?;
        let n_pre = g.add(a, c)?;
        let n_pre = g.add_row(n_pre, w(self, "bn"))?;
        let n = g.tanh(n_pre)?;
        let zh = g.mul(z, h)?;
        let neg_z = g.scale(z, -1.0)?;
        let one_minus_z = g.add_scalar(neg_z, 1.0)?;
        let zn = g.mul(one_minus_z, n)?;
        g.add(zh, zn)
    }

    // ── joint network ────────────────────────────────────────────────

    /// Logits over blank + vocabulary for one (encoder row, predictor row)
    /// pair: projected sum, tanh, output projection. Log-softmax is applied
    /// by the caller.
    pub fn joint(&self, branch: BranchId, h_enc: &[f64], h_pre: &[f64]) -> Result<Vec<f64>> {
        let b = self.branch_by_id(branch);
        let (h, p, j) = (
            self.config.hidden_dim,
            self.config.predictor_dim,
            self.config.joint_dim,
        );
        if h_enc.len() != h || h_pre.len() != p {
            return Err(Error::Shape(format!(
                "joint inputs {}x{} vs config {h}x{p}",
                h_enc.len(),
                h_pre.len()
            )));
        }
        let name = |s: &str| format!("branch/{}/joint/{s}", b.lang);
        let w = |s: &str| &self.params.get(&name(s)).value.values;
        let a = tensor::matmul(h_enc, w("we"), 1, h, j);
        let c = tensor::matmul(h_pre, w("wp"), 1, p, j);
        let bias = w("b");
        let z: Vec<f64> = (0..j).map(|i| ((a[i] + c[i]) + bias[i]).tanh()).collect();
        let mut logits = tensor::matmul(&z, w("wo"), 1, j, b.output_dim());
        for (l, bo) in logits.iter_mut().zip(w("bo")) {
            *l += bo;
        }
        Ok(logits)
    }

    /// Joint logits for every (t, u) lattice node: a (T*(U+1))×(V+1) matrix
    /// with row t*(U+1)+u.
    pub fn joint_logits_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        branch: BranchId,
        enc: NodeId,
        pred: NodeId,
    ) -> Result<NodeId> {
        let b = self.branch_by_id(branch);
        let name = |s: &str| format!("branch/{}/joint/{s}", b.lang);
        let we = self.node(bound, &name("we"));
        let wp = self.node(bound, &name("wp"));
        let bias = self.node(bound, &name("b"));
        let wo = self.node(bound, &name("wo"));
        let bo = self.node(bound, &name("bo"));
        let a = g.matmul(enc, we)?;
        let c = g.matmul(pred, wp)?;
        let pair = g.pair_sum(a, c)?;
        let pair = g.add_row(pair, bias)?;
        let z = g.tanh(pair)?;
        let logits = g.matmul(z, wo)?;
        g.add_row(logits, bo)
    }

    /// Full training loss for one utterance: encoder, predictor, joint,
    /// log-softmax, transducer NLL.
    pub fn utterance_nll_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        feats: &FeatureSequence,
        spec: &ChunkMaskSpec,
        branch: BranchId,
        target: &[usize],
    ) -> Result<NodeId> {
        let enc = self.encode_graph(g, bound, feats, spec)?;
        let pred = self.predictor_rows_graph(g, bound, branch, target)?;
        let logits = self.joint_logits_graph(g, bound, branch, enc, pred)?;
        let logp = g.log_softmax(logits)?;
        g.transducer_nll(logp, feats.t(), target)
    }
}

/// Node ids of bound parameters, indexed like the model's `ParamSet`.
pub struct BoundModel {
    pub ids: Vec<Option<NodeId>>,
}

/// Recurrent predictor state: per-layer hidden vectors plus the last consumed
/// non-blank token. Advanced only by non-blank tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    hidden: Vec<Vec<f64>>,
    pub last_token: Option<usize>,
}

impl PredictorState {
    fn zero(layers: usize, dim: usize) -> Self {
        PredictorState {
            hidden: vec![vec![0.0; dim]; layers],
            last_token: None,
        }
    }
}

/// Incremental encoder state: per-layer inputs of the retained left chunks.
/// One `StreamState` per utterance; never shared.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    frames_seen: usize,
    chunk_index: usize,
    finalized: bool,
    cache: Vec<VecDeque<Tensor>>,
}

impl StreamState {
    pub fn new() -> Self {
        StreamState::default()
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn chunks_seen(&self) -> usize {
        self.chunk_index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 24,
            predictor_layers: 1,
            predictor_dim: 12,
            joint_dim: 12,
            chunk: ChunkMaskSpec {
                chunk_size: 2,
                left_chunks: 1,
                num_layers: 2,
            },
            layer_norm_eps: 1e-5,
        }
    }

    fn tiny_model(seed: u64) -> TransducerModel {
        let mut m = TransducerModel::new(tiny_config(), seed).unwrap();
        m.add_branch("M", 4, seed + 1).unwrap();
        m
    }

    fn random_feats(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureSequence {
        let vals = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSequence::new(Tensor::new(vec![t, d], vals).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_encode_ignores_chunk_geometry() {
        let m = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = random_feats(&mut rng, 1, 6);
        let a = m.encode(&feats, &m.config.spec_with(1, 0).unwrap()).unwrap();
        let b = m.encode(&feats, &m.config.spec_with(8, 2).unwrap()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn chunk_mask_actually_restricts_attention() {
        let m = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = random_feats(&mut rng, 8, 6);
        let offline = m.encode(&feats, &m.config.spec_with(8, 0).unwrap()).unwrap();
        let chunked = m.encode(&feats, &m.config.spec_with(3, 1).unwrap()).unwrap();
        let diff: f64 = offline
            .values
            .iter()
            .zip(&chunked.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "mask had no effect (max diff {diff})");
    }

    #[test]
    fn zeroing_frames_outside_receptive_field_leaves_row_unchanged() {
        let m = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 10;
        let feats = random_feats(&mut rng, t, 6);
        let spec = m.config.spec_with(2, 1).unwrap();
        let base = m.encode(&feats, &spec).unwrap();
        for frame1 in [1usize, 5, 9] {
            let (lo, hi) = crate::mask::receptive_field(frame1, m.config.num_layers, t, &spec);
            let mut zeroed = feats.frames().clone();
            for r in 0..t {
                if r + 1 < lo || r + 1 > hi {
                    for c in 0..6 {
                        zeroed.values[r * 6 + c] = 0.0;
                    }
                }
            }
            let out = m
                .encode(&FeatureSequence::new(zeroed).unwrap(), &spec)
                .unwrap();
            let row = frame1 - 1;
            for c in 0..m.config.hidden_dim {
                let d = (out.values[row * 16 + c] - base.values[row * 16 + c]).abs();
                assert!(d < 1e-12, "frame {frame1} col {c} moved by {d}");
            }
        }
    }

    #[test]
    fn incremental_encode_matches_offline() {
        let m = tiny_model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &t in &[1usize, 5, 8, 11] {
            for &u in &[1usize, 2, 4] {
                for &l in &[0usize, 1, 2] {
                    let feats = random_feats(&mut rng, t, 6);
                    let spec = m.config.spec_with(u, l).unwrap();
                    let offline = m.encode(&feats, &spec).unwrap();
                    let mut state = StreamState::new();
                    let mut rows = Vec::new();
                    let mut start = 0;
                    while start < t {
                        let end = (start + u).min(t);
                        let chunk = feats.slice(start, end).unwrap();
                        let out = m.encode_incremental(&mut state, &chunk, &spec).unwrap();
                        rows.extend_from_slice(&out.values);
                        start = end;
                    }
                    let diff = offline
                        .values
                        .iter()
                        .zip(&rows)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(diff < 1e-10, "T={t} U={u} L={l} max diff {diff}");
                }
            }
        }
    }

    #[test]
    fn single_chunk_stream_equals_offline_exactly() {
        let m = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats = random_feats(&mut rng, 4, 6);
        let spec = m.config.spec_with(4, 1).unwrap();
        let offline = m.encode(&feats, &spec).unwrap();
        let mut state = StreamState::new();
        let inc = m.encode_incremental(&mut state, &feats, &spec).unwrap();
        assert_eq!(offline.values, inc.values);
    }

    #[test]
    fn stream_rejects_chunk_after_partial_chunk() {
        let m = tiny_model(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = m.config.spec_with(4, 1).unwrap();
        let mut state = StreamState::new();
        let short = random_feats(&mut rng, 2, 6);
        m.encode_incremental(&mut state, &short, &spec).unwrap();
        let next = random_feats(&mut rng, 4, 6);
        assert!(m.encode_incremental(&mut state, &next, &spec).is_err());
    }

    #[test]
    fn stream_rejects_oversized_chunk() {
        let m = tiny_model(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = m.config.spec_with(2, 1).unwrap();
        let mut state = StreamState::new();
        let big = random_feats(&mut rng, 3, 6);
        assert!(m.encode_incremental(&mut state, &big, &spec).is_err());
    }

    #[test]
    fn predict_is_deterministic_and_rejects_blank() {
        let m = tiny_model(17);
        let branch = m.branch("M").unwrap().id;
        let (h0, s0) = m.predict_start(branch);
        let (h1a, s1a) = m.predict(branch, 2, &s0).unwrap();
        let (h1b, s1b) = m.predict(branch, 2, &s0).unwrap();
        assert_eq!(h1a, h1b);
        assert_eq!(s1a, s1b);
        assert_ne!(h0, h1a);
        assert_eq!(s1a.last_token, Some(2));
        assert!(m.predict(branch, BLANK, &s0).is_err());
        assert!(m.predict(branch, 99, &s0).is_err());
    }

    #[test]
    fn predictor_graph_rows_match_raw_steps() {
        let m = tiny_model(19);
        let branch = m.branch("M").unwrap().id;
        let target = [2usize, 1, 4];
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let rows = m.predictor_rows_graph(&mut g, &bound, branch, &target).unwrap();
        let rows = g.value(rows).clone();

        let (h0, mut state) = m.predict_start(branch);
        assert_eq!(rows.row(0), &h0[..]);
        for (u, &tok) in target.iter().enumerate() {
            let (h, next) = m.predict(branch, tok, &state).unwrap();
            assert_eq!(rows.row(u + 1), &h[..], "row {}", u + 1);
            state = next;
        }
    }

    #[test]
    fn joint_output_length_and_nonlinearity() {
        let m = tiny_model(21);
        let branch = m.branch("M").unwrap().id;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeros_h = vec![0.0; 16];
        let zeros_p = vec![0.0; 12];
        let full = m.joint(branch, &a, &b).unwrap();
        assert_eq!(full.len(), 5);
        // The tanh must make joint(a,0) + joint(0,b) - joint(0,0) differ from
        // joint(a,b); a purely linear combiner would match.
        let ja = m.joint(branch, &a, &zeros_p).unwrap();
        let jb = m.joint(branch, &zeros_h, &b).unwrap();
        let j0 = m.joint(branch, &zeros_h, &zeros_p).unwrap();
        let linear: Vec<f64> = (0..5).map(|i| ja[i] + jb[i] - j0[i]).collect();
        let max_gap = full
            .iter()
            .zip(&linear)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-6, "joint behaved linearly (gap {max_gap})");
    }

    #[test]
    fn joint_graph_matches_raw_joint() {
        let m = tiny_model(23);
        let branch = m.branch("M").unwrap().id;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let enc_vals: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pre_vals: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let enc = g.leaf(Tensor::new(vec![3, 16], enc_vals.clone()).unwrap());
        let pre = g.leaf(Tensor::new(vec![2, 12], pre_vals.clone()).unwrap());
        let logits = m.joint_logits_graph(&mut g, &bound, branch, enc, pre).unwrap();
        let logits = g.value(logits).clone();
        for t in 0..3 {
            for u in 0..2 {
                let raw = m
                    .joint(branch, &enc_vals[t * 16..(t + 1) * 16], &pre_vals[u * 12..(u + 1) * 12])
                    .unwrap();
                assert_eq!(logits.row(t * 2 + u), &raw[..], "pair ({t},{u})");
            }
        }
    }

    #[test]
    fn add_branch_leaves_original_branch_untouched() {
        let mut m = tiny_model(25);
        let branch = m.branch("M").unwrap().id;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let enc: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before_bytes = m.params().bytes_of("branch/M/");
        let (h0, _) = m.predict_start(branch);
        let j0 = m.joint(branch, &enc, &h0).unwrap();

        let total_before = m.params().element_count("");
        m.add_branch("N", 4, 99).unwrap();
        let added = m.params().element_count("") - total_before;
        assert_eq!(added, m.params().element_count("branch/N/"));

        assert_eq!(m.params().bytes_of("branch/M/"), before_bytes);
        let (h0b, _) = m.predict_start(branch);
        let j0b = m.joint(branch, &enc, &h0b).unwrap();
        assert_eq!(h0, h0b);
        assert_eq!(j0, j0b);
    }

    #[test]
    fn branches_with_same_seed_have_identical_init() {
        let mut m1 = tiny_model(27);
        let mut m2 = tiny_model(27);
        m1.add_branch("N", 4, 1234).unwrap();
        m2.add_branch("N", 4, 1234).unwrap();
        assert_eq!(m1.params().bytes_of("branch/N/"), m2.params().bytes_of("branch/N/"));
        assert!(m1.add_branch("N", 4, 5).is_err(), "duplicate language");
    }

    #[test]
    fn freeze_marks_encoder_non_trainable() {
        let mut m = tiny_model(29);
        assert!(!m.encoder_frozen());
        m.freeze_encoder();
        assert!(m.encoder_frozen());
        assert!(m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("branch/"))
            .all(|p| p.trainable));
    }

    #[test]
    fn encode_ignores_source_language_metadata() {
        let m = tiny_model(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let feats = random_feats(&mut rng, 6, 6);
        let tagged = feats.clone().with_source_lang("A");
        let spec = m.config.chunk;
        let a = m.encode(&feats, &spec).unwrap();
        let b = m.encode(&tagged, &spec).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn predictor_grad_check_through_two_steps() {
        let m = tiny_model(33);
        let branch = m.branch("M").unwrap().id;
        let tensors: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
        let model = m.clone();
        let err = grad_check(
            &tensors,
            move |g, ids| {
                let bound = BoundModel {
                    ids: ids.iter().map(|&id| Some(id)).collect(),
                };
                let rows = model.predictor_rows_graph(g, &bound, branch, &[2, 3])?;
                let sq = g.mul(rows, rows)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "predictor rel err {err}");
    }

    #[test]
    fn joint_grad_check() {
        let m = tiny_model(35);
        let branch = m.branch("M").unwrap().id;
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let enc = Tensor::new(vec![2, 16], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pre = Tensor::new(vec![2, 12], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tensors: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
        tensors.push(enc);
        tensors.push(pre);
        let model = m.clone();
        let err = grad_check(
            &tensors,
            move |g, ids| {
                let n = ids.len();
                let bound = BoundModel {
                    ids: ids[..n - 2].iter().map(|&id| Some(id)).collect(),
                };
                let logits = model.joint_logits_graph(g, &bound, branch, ids[n - 2], ids[n - 1])?;
                let lp = g.log_softmax(logits)?;
                let sq = g.mul(lp, lp)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "joint rel err {err}");
    }
}

//! A small pre-layer-norm transformer encoder with an MLM head and
//! per-layer virtual gate vectors on attention heads, intermediate
//! neurons and output neurons.
//!
//! Gates are forward-time multipliers only. A default gate set is all
//! ones and leaves the computation unchanged; gate gradients are what
//! the importance engine reads.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::rng::{seeded_rng, DropoutRng};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
/// First id available for regular vocabulary entries.
pub const FIRST_REGULAR_ID: u32 = 3;

const CHECKPOINT_FORMAT: &str = "gated-transformer-checkpoint/1";
const LN_EPS: f64 = 1e-5;
const ATTN_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {0} out of range for vocab of size {1}")]
    UnknownToken(u32, usize),
    #[error("gate shape mismatch at layer {layer}: expected {expected} {kind} gates, got {got}")]
    GateShape { layer: usize, kind: &'static str, expected: usize, got: usize },
    #[error("sequence length {0} exceeds max_seq_len {1}")]
    SequenceTooLong(usize, usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence {0} consists only of padding")]
    AllPadding(usize),
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("mask_prob must be in (0,1), got {0}")]
    InvalidMaskProb(f64),
    #[error("autodiff error: {0}")]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{0}`")]
    BadFormat(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Smallest configuration where head and neuron masking is observable.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size,
            max_seq_len: 32,
            dropout_p: 0.1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers < 1 || self.n_heads < 1 || self.d_model < 1 || self.d_ff < 1 {
            return Err(ModelError::InvalidConfig("all dims must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= FIRST_REGULAR_ID as usize {
            return Err(ModelError::InvalidConfig("vocab too small for specials".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!("dropout_p {} not in [0,1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    /// Closed vocabulary: specials followed by the given regular tokens.
    pub fn closed(regular: &[String]) -> Self {
        let mut tokens = vec!["[PAD]".to_string(), "[UNK]".to_string(), "[MASK]".to_string()];
        tokens.extend(regular.iter().cloned());
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i as u32)
            .unwrap_or(UNK_ID)
    }

    /// Whitespace tokenization against the closed vocabulary.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id_of(t)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Per-layer gate vectors, all defaulting to 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub head_gates: Vec<Vec<f64>>,
    pub inter_gates: Vec<Vec<f64>>,
    pub out_gates: Vec<Vec<f64>>,
}

impl GateSet {
    pub fn ones(config: &ModelConfig) -> Self {
        GateSet {
            head_gates: vec![vec![1.0; config.n_heads]; config.n_layers],
            inter_gates: vec![vec![1.0; config.d_ff]; config.n_layers],
            out_gates: vec![vec![1.0; config.d_model]; config.n_layers],
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let checks = [
            (&self.head_gates, config.n_heads, "head"),
            (&self.inter_gates, config.d_ff, "inter"),
            (&self.out_gates, config.d_model, "out"),
        ];
        for (gates, expected, kind) in checks {
            if gates.len() != config.n_layers {
                return Err(ModelError::GateShape {
                    layer: gates.len(),
                    kind,
                    expected: config.n_layers,
                    got: gates.len(),
                });
            }
            for (l, g) in gates.iter().enumerate() {
                if g.len() != expected {
                    return Err(ModelError::GateShape { layer: l, kind, expected, got: g.len() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout active; `seed` is the global seed, `pass` distinguishes
    /// independent dropout draws over the same input.
    Train { seed: u64, pass: u64 },
    Eval,
}

/// A batch after MLM corruption.
#[derive(Debug, Clone)]
pub struct MLMBatch {
    pub input_ids: Vec<Vec<u32>>,
    /// Original token at masked positions, `u32::MAX` elsewhere.
    pub labels: Vec<Vec<u32>>,
    pub mask_positions: Vec<Vec<bool>>,
}

impl MLMBatch {
    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().flatten().filter(|&&m| m).count()
    }
}

pub struct LayerGateNodes {
    pub head: NodeId,
    pub inter: NodeId,
    pub out: NodeId,
}

/// Pre-gate node ids of the three masked layer outputs.
pub struct LayerOutputNodes {
    pub attention: NodeId,
    pub intermediate: NodeId,
    pub output: NodeId,
}

/// Parameter and gate leaves shared by one or more encoder passes on a tape.
pub struct GraphBinding {
    pub param_nodes: BTreeMap<String, NodeId>,
    pub gate_nodes: Vec<LayerGateNodes>,
}

/// Output handles of a single encoder pass.
pub struct Encoding {
    pub layer_outputs: Vec<LayerOutputNodes>,
    /// Final hidden states, [N*T, d_model].
    pub hidden: NodeId,
    /// MLM logits, [N*T, vocab].
    pub logits: NodeId,
    pub n: usize,
    pub t: usize,
    /// true at non-padding positions, flattened [N*T].
    pub non_pad: Vec<bool>,
}

/// One forward pass: the tape plus handles into it.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub gate_nodes: Vec<LayerGateNodes>,
    pub layer_outputs: Vec<LayerOutputNodes>,
    /// Final hidden states, [N*T, d_model].
    pub hidden: NodeId,
    /// MLM logits, [N*T, vocab].
    pub logits: NodeId,
    pub n: usize,
    pub t: usize,
    /// true at non-padding positions, flattened [N*T].
    pub non_pad: Vec<bool>,
}

/// Mean cross-entropy over masked positions only.
pub fn mlm_loss(tape: &mut Tape, enc: &Encoding, batch: &MLMBatch) -> Result<NodeId, ModelError> {
    let vocab = tape.shape(enc.logits)[1];
    let mut idxs = Vec::new();
    for (s, row) in batch.mask_positions.iter().enumerate() {
        for (p, &m) in row.iter().enumerate() {
            if m {
                let flat_row = s * enc.t + p;
                let label = batch.labels[s][p] as usize;
                idxs.push(flat_row * vocab + label);
            }
        }
    }
    if idxs.is_empty() {
        return Err(ModelError::NoMaskedPositions);
    }
    let lsm = tape.log_softmax_rows(enc.logits);
    let picked = tape.gather_elems(lsm, &idxs);
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Per-example mean of final hidden states over non-padding positions.
/// Returns a [N, d_model] node.
pub fn sequence_repr(tape: &mut Tape, enc: &Encoding) -> Result<NodeId, ModelError> {
    let mut per_seq = Vec::with_capacity(enc.n);
    for s in 0..enc.n {
        let rows: Vec<usize> = (0..enc.t)
            .filter(|p| enc.non_pad[s * enc.t + p])
            .map(|p| s * enc.t + p)
            .collect();
        if rows.is_empty() {
            return Err(ModelError::AllPadding(s));
        }
        let k = rows.len();
        let gathered = tape.gather_rows(enc.hidden, &rows);
        let ones = tape.leaf(vec![1.0; k], vec![1, k], false);
        let summed = tape.matmul(ones, gathered);
        per_seq.push(tape.scale(summed, 1.0 / k as f64));
    }
    Ok(tape.concat_rows(&per_seq))
}

impl ForwardPass {
    fn encoding(&self) -> Encoding {
        Encoding {
            layer_outputs: Vec::new(),
            hidden: self.hidden,
            logits: self.logits,
            n: self.n,
            t: self.t,
            non_pad: self.non_pad.clone(),
        }
    }

    /// Mean cross-entropy over masked positions only.
    pub fn mlm_loss(&mut self, batch: &MLMBatch) -> Result<NodeId, ModelError> {
        let enc = self.encoding();
        mlm_loss(&mut self.tape, &enc, batch)
    }

    /// Per-example mean of final hidden states over non-padding positions.
    pub fn sequence_repr(&mut self) -> Result<NodeId, ModelError> {
        let enc = self.encoding();
        sequence_repr(&mut self.tape, &enc)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<ParamTensor>,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    params: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocab size {} != config.vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = seeded_rng(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let v = config.vocab_size;
        let mut params = Vec::new();

        let mut xavier = |name: &str, rows: usize, cols: usize, params: &mut Vec<ParamTensor>| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            params.push(ParamTensor { name: name.to_string(), shape: vec![rows, cols], data });
        };

        xavier("tok_emb", v, d, &mut params);
        xavier("pos_emb", config.max_seq_len, d, &mut params);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            params.push(ParamTensor { name: p("ln1.g"), shape: vec![d], data: vec![1.0; d] });
            params.push(ParamTensor { name: p("ln1.b"), shape: vec![d], data: vec![0.0; d] });
            xavier(&p("attn.wq"), d, d, &mut params);
            xavier(&p("attn.wk"), d, d, &mut params);
            xavier(&p("attn.wv"), d, d, &mut params);
            xavier(&p("attn.wo"), d, d, &mut params);
            params.push(ParamTensor { name: p("ln2.g"), shape: vec![d], data: vec![1.0; d] });
            params.push(ParamTensor { name: p("ln2.b"), shape: vec![d], data: vec![0.0; d] });
            xavier(&p("ffn.w1"), d, ff, &mut params);
            params.push(ParamTensor { name: p("ffn.b1"), shape: vec![ff], data: vec![0.0; ff] });
            xavier(&p("ffn.w2"), ff, d, &mut params);
            params.push(ParamTensor { name: p("ffn.b2"), shape: vec![d], data: vec![0.0; d] });
        }
        params.push(ParamTensor { name: "lnf.g".into(), shape: vec![d], data: vec![1.0; d] });
        params.push(ParamTensor { name: "lnf.b".into(), shape: vec![d], data: vec![0.0; d] });
        xavier("mlm.w", d, v, &mut params);
        params.push(ParamTensor { name: "mlm.b".into(), shape: vec![v], data: vec![0.0; v] });

        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model { config, vocab, params, index })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> &ParamTensor {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut ParamTensor {
        &mut self.params[self.index[name]]
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Bit-exact digest of all parameter values, for mutation checks.
    pub fn param_bits(&self) -> Vec<u64> {
        self.params.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::BadFormat(ck.format));
        }
        ck.config.validate()?;
        let index = ck.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model { config: ck.config, vocab: ck.vocab, params: ck.params, index })
    }

    /// Create parameter and gate leaves on `tape`. Multiple [`Model::encode`]
    /// calls against the same binding share those leaves, so a loss that
    /// couples several passes (e.g. a symmetric divergence between two
    /// dropout draws) accumulates its gradient into one set of gate nodes.
    pub fn bind(&self, tape: &mut Tape, gates: &GateSet) -> Result<GraphBinding, ModelError> {
        gates.validate(&self.config)?;
        let mut param_nodes = BTreeMap::new();
        for pt in &self.params {
            let id = tape.leaf(pt.data.clone(), pt.shape.clone(), true);
            param_nodes.insert(pt.name.clone(), id);
        }
        let mut gate_nodes = Vec::new();
        for l in 0..self.config.n_layers {
            gate_nodes.push(LayerGateNodes {
                head: tape.leaf(gates.head_gates[l].clone(), vec![self.config.n_heads], true),
                inter: tape.leaf(gates.inter_gates[l].clone(), vec![self.config.d_ff], true),
                out: tape.leaf(gates.out_gates[l].clone(), vec![self.config.d_model], true),
            });
        }
        Ok(GraphBinding { param_nodes, gate_nodes })
    }

    /// A binding with fresh gate leaves but the same parameter leaves, so a
    /// differently-gated pass contributes gradient to the same parameters.
    pub fn rebind_gates(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        gates: &GateSet,
    ) -> Result<GraphBinding, ModelError> {
        gates.validate(&self.config)?;
        let mut gate_nodes = Vec::new();
        for l in 0..self.config.n_layers {
            gate_nodes.push(LayerGateNodes {
                head: tape.leaf(gates.head_gates[l].clone(), vec![self.config.n_heads], true),
                inter: tape.leaf(gates.inter_gates[l].clone(), vec![self.config.d_ff], true),
                out: tape.leaf(gates.out_gates[l].clone(), vec![self.config.d_model], true),
            });
        }
        Ok(GraphBinding { param_nodes: binding.param_nodes.clone(), gate_nodes })
    }

    /// Build the forward graph for a batch of equal-length sequences.
    pub fn forward(&self, input_ids: &[Vec<u32>], gates: &GateSet, mode: Mode) -> Result<ForwardPass, ModelError> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, gates)?;
        let enc = self.encode(&mut tape, &binding, input_ids, mode)?;
        Ok(ForwardPass {
            tape,
            param_nodes: binding.param_nodes,
            gate_nodes: binding.gate_nodes,
            layer_outputs: enc.layer_outputs,
            hidden: enc.hidden,
            logits: enc.logits,
            n: enc.n,
            t: enc.t,
            non_pad: enc.non_pad,
        })
    }

    /// Run the encoder over a batch, appending to an existing tape.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        input_ids: &[Vec<u32>],
        mode: Mode,
    ) -> Result<Encoding, ModelError> {
        let n = input_ids.len();
        if n == 0 || input_ids[0].is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let t = input_ids[0].len();
        if t > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong(t, self.config.max_seq_len));
        }
        for row in input_ids {
            debug_assert_eq!(row.len(), t, "ragged batch");
            for &id in row {
                if id as usize >= self.config.vocab_size {
                    return Err(ModelError::UnknownToken(id, self.config.vocab_size));
                }
            }
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let mut dropout = match mode {
            Mode::Train { seed, pass } => Some(DropoutRng::new(seed, pass)),
            Mode::Eval => None,
        };
        let p = cfg.dropout_p;

        let param_nodes = &binding.param_nodes;
        let pn = |param_nodes: &BTreeMap<String, NodeId>, name: String| param_nodes[&name];

        let flat_ids: Vec<usize> = input_ids.iter().flatten().map(|&id| id as usize).collect();
        let non_pad: Vec<bool> = flat_ids.iter().map(|&id| id != PAD_ID as usize).collect();
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();

        let tok = tape.embed_lookup(param_nodes["tok_emb"], &flat_ids);
        let pos = tape.embed_lookup(param_nodes["pos_emb"], &pos_ids);
        let mut h = tape.add(tok, pos);

        let mut layer_outputs = Vec::new();

        for l in 0..cfg.n_layers {
            let head_gate = binding.gate_nodes[l].head;
            let inter_gate = binding.gate_nodes[l].inter;
            let out_gate = binding.gate_nodes[l].out;

            // attention sublayer
            let a_in = {
                let g = pn(&param_nodes, format!("layer{l}.ln1.g"));
                let b = pn(&param_nodes, format!("layer{l}.ln1.b"));
                tape.layer_norm(h, g, b, LN_EPS)
            };
            let q_full = tape.matmul(a_in, pn(&param_nodes, format!("layer{l}.attn.wq")));
            let k_full = tape.matmul(a_in, pn(&param_nodes, format!("layer{l}.attn.wk")));
            let v_full = tape.matmul(a_in, pn(&param_nodes, format!("layer{l}.attn.wv")));

            let mut per_seq = Vec::with_capacity(n);
            for s in 0..n {
                let qs = tape.slice_rows(q_full, s * t, t);
                let ks = tape.slice_rows(k_full, s * t, t);
                let vs = tape.slice_rows(v_full, s * t, t);
                // additive key mask for padding
                let key_mask: Vec<f64> = (0..t * t)
                    .map(|i| if non_pad[s * t + i % t] { 0.0 } else { ATTN_NEG })
                    .collect();
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for i in 0..cfg.n_heads {
                    let qh = tape.slice_cols(qs, i * dh, dh);
                    let kh = tape.slice_cols(ks, i * dh, dh);
                    let vh = tape.slice_cols(vs, i * dh, dh);
                    let scores = tape.matmul_nt(qh, kh);
                    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                    let masked = tape.add_const(scaled, &key_mask);
                    let mut probs = tape.softmax_rows(masked);
                    if let Some(dr) = dropout.as_mut() {
                        let mask = dr.mask(t * t, p);
                        probs = tape.mul_const(probs, mask);
                    }
                    heads.push(tape.matmul(probs, vh));
                }
                per_seq.push(tape.concat_cols(&heads));
            }
            // [N*T, d_model]: per-head outputs, the attention-layer output o_l
            let attn_out = tape.concat_rows(&per_seq);
            let head_gate_expanded = tape.repeat_interleave(head_gate, dh);
            let attn_gated = tape.mul_row_broadcast(attn_out, head_gate_expanded);
            let mut attn_proj = tape.matmul(attn_gated, pn(&param_nodes, format!("layer{l}.attn.wo")));
            if let Some(dr) = dropout.as_mut() {
                let mask = dr.mask(n * t * d, p);
                attn_proj = tape.mul_const(attn_proj, mask);
            }
            h = tape.add(h, attn_proj);

            // feed-forward sublayer
            let f_in = {
                let g = pn(&param_nodes, format!("layer{l}.ln2.g"));
                let b = pn(&param_nodes, format!("layer{l}.ln2.b"));
                tape.layer_norm(h, g, b, LN_EPS)
            };
            let a1 = tape.matmul(f_in, pn(&param_nodes, format!("layer{l}.ffn.w1")));
            let a1b = tape.add_bias(a1, pn(&param_nodes, format!("layer{l}.ffn.b1")));
            let inter = tape.gelu(a1b);
            let inter_gated = tape.mul_row_broadcast(inter, inter_gate);
            let a2 = tape.matmul(inter_gated, pn(&param_nodes, format!("layer{l}.ffn.w2")));
            let ffn_out = tape.add_bias(a2, pn(&param_nodes, format!("layer{l}.ffn.b2")));
            let out_gated = tape.mul_row_broadcast(ffn_out, out_gate);
            let mut ffn_drop = out_gated;
            if let Some(dr) = dropout.as_mut() {
                let mask = dr.mask(n * t * d, p);
                ffn_drop = tape.mul_const(ffn_drop, mask);
            }
            h = tape.add(h, ffn_drop);

            layer_outputs.push(LayerOutputNodes {
                attention: attn_out,
                intermediate: inter,
                output: ffn_out,
            });
        }

        let hidden = {
            let g = param_nodes["lnf.g"];
            let b = param_nodes["lnf.b"];
            tape.layer_norm(h, g, b, LN_EPS)
        };
        let lg = tape.matmul(hidden, param_nodes["mlm.w"]);
        let logits = tape.add_bias(lg, param_nodes["mlm.b"]);

        Ok(Encoding { layer_outputs, hidden, logits, n, t, non_pad })
    }
}

/// Standard 80/10/10 MLM corruption.
pub fn mlm_corrupt<R: Rng>(
    sequences: &[Vec<u32>],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MLMBatch, ModelError> {
    if !(0.0..1.0).contains(&mask_prob) || mask_prob <= 0.0 {
        return Err(ModelError::InvalidMaskProb(mask_prob));
    }
    if sequences.iter().any(|s| s.is_empty()) {
        return Err(ModelError::EmptySequence);
    }
    let mut input_ids = Vec::with_capacity(sequences.len());
    let mut labels = Vec::with_capacity(sequences.len());
    let mut mask_positions = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut inp = seq.clone();
        let mut lab = vec![u32::MAX; seq.len()];
        let mut pos = vec![false; seq.len()];
        for (i, &tok) in seq.iter().enumerate() {
            if tok == PAD_ID {
                continue;
            }
            if rng.gen::<f64>() < mask_prob {
                pos[i] = true;
                lab[i] = tok;
                let r: f64 = rng.gen();
                if r < 0.8 {
                    inp[i] = MASK_ID;
                } else if r < 0.9 {
                    inp[i] = rng.gen_range(FIRST_REGULAR_ID..vocab_size as u32);
                } // else keep original
            }
        }
        input_ids.push(inp);
        labels.push(lab);
        mask_positions.push(pos);
    }
    Ok(MLMBatch { input_ids, labels, mask_positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn toy_vocab(n_regular: usize) -> Vocab {
        let regular: Vec<String> = (0..n_regular).map(|i| format!("w{i}")).collect();
        Vocab::closed(&regular)
    }

    fn toy_model() -> Model {
        let vocab = toy_vocab(17);
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab_size: vocab.len(),
            max_seq_len: 8,
            dropout_p: 0.1,
        };
        Model::new(config, vocab, 42).unwrap()
    }

    fn toy_batch() -> Vec<Vec<u32>> {
        vec![vec![3, 4, 5, 6], vec![7, 8, 9, 3]]
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = toy_model();
        let gates = GateSet::ones(&m.config);
        let a = m.forward(&toy_batch(), &gates, Mode::Eval).unwrap();
        let b = m.forward(&toy_batch(), &gates, Mode::Eval).unwrap();
        assert_eq!(a.tape.data(a.logits), b.tape.data(b.logits));
    }

    #[test]
    fn train_same_seed_same_pass_identical() {
        let m = toy_model();
        let gates = GateSet::ones(&m.config);
        let mode = Mode::Train { seed: 5, pass: 0 };
        let a = m.forward(&toy_batch(), &gates, mode).unwrap();
        let b = m.forward(&toy_batch(), &gates, mode).unwrap();
        assert_eq!(a.tape.data(a.logits), b.tape.data(b.logits));
    }

    #[test]
    fn train_different_pass_differs() {
        let m = toy_model();
        let gates = GateSet::ones(&m.config);
        let a = m.forward(&toy_batch(), &gates, Mode::Train { seed: 5, pass: 0 }).unwrap();
        let b = m.forward(&toy_batch(), &gates, Mode::Train { seed: 5, pass: 1 }).unwrap();
        assert_ne!(a.tape.data(a.logits), b.tape.data(b.logits));
    }

    #[test]
    fn all_ones_gates_match_default() {
        let m = toy_model();
        let ones = GateSet::ones(&m.config);
        let mut same = GateSet::ones(&m.config);
        same.head_gates[0][0] = 1.0;
        let a = m.forward(&toy_batch(), &ones, Mode::Eval).unwrap();
        let b = m.forward(&toy_batch(), &same, Mode::Eval).unwrap();
        assert_eq!(a.tape.data(a.logits), b.tape.data(b.logits));
    }

    #[test]
    fn zero_head_gates_kill_attention_contribution() {
        let m = toy_model();
        let mut gates = GateSet::ones(&m.config);
        for l in 0..m.config.n_layers {
            gates.head_gates[l] = vec![0.0; m.config.n_heads];
        }
        let fp = m.forward(&toy_batch(), &gates, Mode::Eval).unwrap();
        // With all heads gated off, the gated attention output is exactly zero,
        // so the residual stream sees no attention contribution.
        for lo in &fp.layer_outputs {
            // pre-gate output is generally non-zero
            assert!(fp.tape.data(lo.attention).iter().any(|&v| v != 0.0));
        }
        // Compare against manually zeroing W_o (equivalent once heads are off).
        let mut m2 = m.clone();
        for l in 0..m2.config.n_layers {
            let name = format!("layer{l}.attn.wo");
            m2.param_mut(&name).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let fp2 = m2.forward(&toy_batch(), &GateSet::ones(&m2.config), Mode::Eval).unwrap();
        let a = fp.tape.data(fp.logits);
        let b = fp2.tape.data(fp2.logits);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_token_rejected() {
        let m = toy_model();
        let gates = GateSet::ones(&m.config);
        match m.forward(&[vec![3, 999]], &gates, Mode::Eval) {
            Err(ModelError::UnknownToken(999, _)) => {}
            Err(e) => panic!("wrong error: {e}"),
            Ok(_) => panic!("expected error"),
        }
    }

    #[test]
    fn mlm_loss_uniform_logits_is_log_vocab() {
        // Uniform logits give cross-entropy ln(V). Build a model whose mlm
        // weights are zero so logits are exactly uniform.
        let mut m = toy_model();
        m.param_mut("mlm.w").data.iter_mut().for_each(|v| *v = 0.0);
        m.param_mut("mlm.b").data.iter_mut().for_each(|v| *v = 0.0);
        let seqs = toy_batch();
        let mut rng = seeded_rng(1);
        let batch = mlm_corrupt(&seqs, 0.5, m.config.vocab_size, &mut rng).unwrap();
        assert!(batch.masked_count() > 0);
        let mut fp = m.forward(&batch.input_ids, &GateSet::ones(&m.config), Mode::Eval).unwrap();
        let loss = fp.mlm_loss(&batch).unwrap();
        let expected = (m.config.vocab_size as f64).ln();
        assert!((fp.tape.value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_requires_masked_positions() {
        let m = toy_model();
        let batch = MLMBatch {
            input_ids: toy_batch(),
            labels: vec![vec![u32::MAX; 4]; 2],
            mask_positions: vec![vec![false; 4]; 2],
        };
        let mut fp = m.forward(&batch.input_ids, &GateSet::ones(&m.config), Mode::Eval).unwrap();
        assert!(matches!(fp.mlm_loss(&batch), Err(ModelError::NoMaskedPositions)));
    }

    #[test]
    fn mlm_corrupt_deterministic_and_fraction() {
        let seqs: Vec<Vec<u32>> = (0..100).map(|_| (0..100).map(|i| 3 + (i % 10) as u32).collect()).collect();
        let b1 = mlm_corrupt(&seqs, 0.15, 20, &mut seeded_rng(9)).unwrap();
        let b2 = mlm_corrupt(&seqs, 0.15, 20, &mut seeded_rng(9)).unwrap();
        assert_eq!(b1.input_ids, b2.input_ids);
        assert_eq!(b1.labels, b2.labels);
        let frac = b1.masked_count() as f64 / 10_000.0;
        assert!((frac - 0.15).abs() < 0.01, "masked fraction {frac}");
    }

    #[test]
    fn mlm_corrupt_tiny_probability_rarely_masks() {
        let seqs = vec![vec![3u32; 8]];
        let b = mlm_corrupt(&seqs, 1e-9, 20, &mut seeded_rng(3)).unwrap();
        assert_eq!(b.masked_count(), 0);
    }

    #[test]
    fn mlm_corrupt_rejects_bad_prob() {
        let seqs = vec![vec![3u32; 4]];
        assert!(mlm_corrupt(&seqs, 0.0, 20, &mut seeded_rng(0)).is_err());
        assert!(mlm_corrupt(&seqs, 1.0, 20, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn sequence_repr_single_token() {
        let m = toy_model();
        let mut fp = m.forward(&[vec![5]], &GateSet::ones(&m.config), Mode::Eval).unwrap();
        let repr = fp.sequence_repr().unwrap();
        let hidden = fp.tape.data(fp.hidden).to_vec();
        assert_eq!(fp.tape.data(repr), &hidden[..]);
    }

    #[test]
    fn sequence_repr_mean_of_three() {
        let m = toy_model();
        let mut fp = m.forward(&[vec![3, 9, 11]], &GateSet::ones(&m.config), Mode::Eval).unwrap();
        let repr = fp.sequence_repr().unwrap();
        let d = m.config.d_model;
        let h = fp.tape.data(fp.hidden).to_vec();
        for c in 0..d {
            let expected = (h[c] + h[d + c] + h[2 * d + c]) / 3.0;
            assert!((fp.tape.data(repr)[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_repr_ignores_padding() {
        let m = toy_model();
        let mut fp = m.forward(&[vec![3, 9, PAD_ID, PAD_ID]], &GateSet::ones(&m.config), Mode::Eval).unwrap();
        let repr = fp.sequence_repr().unwrap();
        let d = m.config.d_model;
        let h = fp.tape.data(fp.hidden).to_vec();
        for c in 0..d {
            let expected = (h[c] + h[d + c]) / 2.0;
            assert!((fp.tape.data(repr)[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_repr_all_padding_errors() {
        let m = toy_model();
        let mut fp = m.forward(&[vec![PAD_ID, PAD_ID]], &GateSet::ones(&m.config), Mode::Eval).unwrap();
        assert!(matches!(fp.sequence_repr(), Err(ModelError::AllPadding(0))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = toy_model();
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(m.param_bits(), loaded.param_bits());
        assert_eq!(m.config, loaded.config);
    }

    #[test]
    fn residual_sanity_all_gates_zero() {
        // With every sublayer gated to zero the residual stream carries only
        // the embeddings; final hidden = lnf(embeddings).
        let m = toy_model();
        let mut gates = GateSet::ones(&m.config);
        for l in 0..m.config.n_layers {
            gates.head_gates[l] = vec![0.0; m.config.n_heads];
            gates.out_gates[l] = vec![0.0; m.config.d_model];
        }
        let fp = m.forward(&toy_batch(), &gates, Mode::Eval).unwrap();

        // reference: embeddings + final LN only
        let mut tape = Tape::new();
        let tok_t = tape.leaf(m.param("tok_emb").data.clone(), m.param("tok_emb").shape.clone(), false);
        let pos_t = tape.leaf(m.param("pos_emb").data.clone(), m.param("pos_emb").shape.clone(), false);
        let flat: Vec<usize> = toy_batch().iter().flatten().map(|&x| x as usize).collect();
        let pos_ids: Vec<usize> = (0..2).flat_map(|_| 0..4).collect();
        let te = tape.embed_lookup(tok_t, &flat);
        let pe = tape.embed_lookup(pos_t, &pos_ids);
        let emb = tape.add(te, pe);
        let g = tape.leaf(m.param("lnf.g").data.clone(), vec![m.config.d_model], false);
        let b = tape.leaf(m.param("lnf.b").data.clone(), vec![m.config.d_model], false);
        let expect = tape.layer_norm(emb, g, b, 1e-5);

        for (a, e) in fp.tape.data(fp.hidden).iter().zip(tape.data(expect)) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

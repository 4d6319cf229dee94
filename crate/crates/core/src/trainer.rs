//! Domain-adaptive pre-training steps.
//!
//! One training step combines an MLM loss with an optional contrastive
//! loss over three views of each sequence: the full network under two
//! independent dropout draws, and the network gated down to
//! previously-important units. Before the optimizer update, parameter
//! gradients can be shrunk by per-unit factors (1 - importance) so that
//! units that mattered for earlier domains move less.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::importance::{ImportanceStore, UnitValues};
use crate::model::{
    mlm_corrupt, mlm_loss, sequence_repr, GateSet, MLMBatch, Mode, Model, ModelConfig, ModelError,
};
use crate::rng::{mix2, seeded_rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("log io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("optimizer diverged: loss {0} exceeds {DIVERGENCE_LIMIT:.0e}")]
    Diverged(f64),
    #[error("label {0} outside the task's class set")]
    InvalidLabel(u8),
}

/// A training loss above this is treated as optimizer divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Optimizer selection; state lives in [`Optimizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    /// Weight of the contrastive term; 0 disables the extra passes.
    pub contrast_weight: f64,
    /// Softmax temperature for the contrastive similarities.
    pub temperature: f64,
    /// Shrink parameter gradients by (1 - importance) before the update.
    pub softmask: bool,
    /// Emit a JSONL log record every this many steps (0 = never).
    pub log_every: usize,
    #[serde(default = "OptimizerKind::adam")]
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            mask_prob: 0.15,
            contrast_weight: 1.0,
            temperature: 0.05,
            softmask: true,
            log_every: 100,
            optimizer: OptimizerKind::adam(),
        }
    }

    /// Full-scale reference settings (steps, batch size, learning rate as
    /// used on real corpora). Kept as a record of the reference regime;
    /// far too slow to run on a desk machine.
    pub fn paper_scale() -> Self {
        TrainConfig { steps: 2500, batch_size: 256, lr: 1e-4, ..TrainConfig::desk_scale() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk-scale" => Some(TrainConfig::desk_scale()),
            "paper-scale" => Some(TrainConfig::paper_scale()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0 < self.mask_prob && self.mask_prob < 1.0) {
            return Err(TrainError::InvalidConfig(format!("mask_prob {} not in (0,1)", self.mask_prob)));
        }
        if self.contrast_weight < 0.0 {
            return Err(TrainError::InvalidConfig("contrast_weight must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::InvalidConfig("temperature must be > 0".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(TrainError::InvalidConfig(
                    "adam betas must be in [0,1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Adam without weight decay. A gradient that is exactly zero leaves both
/// moments and the parameter bit-identical, which is what lets fully
/// masked units stay frozen.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = model.param_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let update = self.lr * mhat / (vhat.sqrt() + self.eps);
                if update != 0.0 {
                    p.data[i] -= update;
                }
            }
        }
    }
}

/// Optimizer state built from a [`TrainConfig`]. Both variants skip
/// exactly-zero updates so fully masked units stay bit-identical.
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let mut a = Adam::new(cfg.lr);
                a.beta1 = beta1;
                a.beta2 = beta2;
                a.eps = eps;
                Optimizer::Adam(a)
            }
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.lr },
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>) {
        match self {
            Optimizer::Adam(a) => a.step(model, grads),
            Optimizer::Sgd { lr } => {
                for (name, g) in grads {
                    let p = model.param_mut(name);
                    for i in 0..g.len() {
                        let update = *lr * g[i];
                        if update != 0.0 {
                            p.data[i] -= update;
                        }
                    }
                }
            }
        }
    }
}

/// Shrink each parameter gradient by the (1 - importance) factor of the
/// unit that owns it. Ownership:
/// - head i owns its d_head column slice of wq/wk/wv and row slice of wo;
/// - intermediate neuron j owns w1 column j, b1[j], and w2 row j;
/// - output neuron k owns w2 column k and b2[k].
/// w2 elements are owned twice (row by an intermediate neuron, column by
/// an output neuron); the two factors compose multiplicatively, so either
/// owner at full importance freezes the element.
pub fn softmask_apply(
    config: &ModelConfig,
    factors: &UnitValues,
    grads: &mut BTreeMap<String, Vec<f64>>,
) {
    let d = config.d_model;
    let ff = config.d_ff;
    let dh = config.d_head();
    for l in 0..config.n_layers {
        // attention heads: factors.head[l][i]
        for mat in ["wq", "wk", "wv"] {
            let g = grads.get_mut(&format!("layer{l}.attn.{mat}")).expect("missing attn grad");
            for r in 0..d {
                for c in 0..d {
                    g[r * d + c] *= factors.head[l][c / dh];
                }
            }
        }
        let g = grads.get_mut(&format!("layer{l}.attn.wo")).expect("missing wo grad");
        for r in 0..d {
            for c in 0..d {
                g[r * d + c] *= factors.head[l][r / dh];
            }
        }
        // intermediate neurons: w1 columns, b1, w2 rows
        let g = grads.get_mut(&format!("layer{l}.ffn.w1")).expect("missing w1 grad");
        for r in 0..d {
            for c in 0..ff {
                g[r * ff + c] *= factors.inter[l][c];
            }
        }
        let g = grads.get_mut(&format!("layer{l}.ffn.b1")).expect("missing b1 grad");
        for c in 0..ff {
            g[c] *= factors.inter[l][c];
        }
        // w2: row factor (intermediate) composed with column factor (output)
        let g = grads.get_mut(&format!("layer{l}.ffn.w2")).expect("missing w2 grad");
        for r in 0..ff {
            for c in 0..d {
                g[r * d + c] *= factors.inter[l][r] * factors.out[l][c];
            }
        }
        let g = grads.get_mut(&format!("layer{l}.ffn.b2")).expect("missing b2 grad");
        for c in 0..d {
            g[c] *= factors.out[l][c];
        }
    }
}

/// InfoNCE-style loss over sequence representations.
///
/// For each example n, the positive is the same sequence under a second
/// dropout draw (`full_plus` row n); the denominator sums similarities to
/// every `full_plus` row and every `prev` row (the gated, previous-knowledge
/// view). All similarities are cosine, divided by `temperature`. The
/// positive term appears in the denominator, so the loss is nonnegative,
/// and with all representations identical it equals ln(2N).
pub fn contrastive_loss(
    tape: &mut Tape,
    full: NodeId,
    full_plus: NodeId,
    prev: NodeId,
    temperature: f64,
) -> NodeId {
    let n = tape.shape(full)[0];
    let normalize = |tape: &mut Tape, x: NodeId| {
        let sq = tape.mul(x, x);
        let ss = tape.row_sum(sq);
        let norm = tape.sqrt(ss);
        tape.div_col_broadcast(x, norm)
    };
    let fu = normalize(tape, full);
    let fp = normalize(tape, full_plus);
    let pv = normalize(tape, prev);
    let sim_pos = tape.matmul_nt(fu, fp);
    let sim_prev = tape.matmul_nt(fu, pv);
    let logits = tape.concat_cols(&[sim_pos, sim_prev]);
    let scaled = tape.scale(logits, 1.0 / temperature);
    let lsm = tape.log_softmax_rows(scaled);
    // the positive for row i sits at column i of the sim_pos block
    let diag: Vec<usize> = (0..n).map(|i| i * 2 * n + i).collect();
    let picked = tape.gather_elems(lsm, &diag);
    let mean = tape.mean_all(picked);
    tape.scale(mean, -1.0)
}

/// The three sequence representations the contrastive loss compares:
/// the full network under two independent dropout draws, and the network
/// gated down to previously-important units.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeViews {
    pub o_full: Vec<f64>,
    pub o_full_plus: Vec<f64>,
    pub o_prev: Vec<f64>,
}

/// Compute the three views for one batch, without gradients. Training
/// builds the same three passes on a shared tape inside
/// [`dap_train_step`]; this standalone version exposes them for
/// inspection and testing.
pub fn knowledge_views(
    model: &Model,
    inputs: &[Vec<u32>],
    store: &ImportanceStore,
    seed: u64,
    base_pass: u64,
) -> Result<KnowledgeViews, TrainError> {
    let ones = GateSet::ones(&model.config);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &ones)?;
    let a = model.encode(&mut tape, &binding, inputs, Mode::Train { seed, pass: base_pass })?;
    let b = model.encode(&mut tape, &binding, inputs, Mode::Train { seed, pass: base_pass + 1 })?;
    let prev_binding = model.rebind_gates(&mut tape, &binding, &store.as_gates())?;
    let p =
        model.encode(&mut tape, &prev_binding, inputs, Mode::Train { seed, pass: base_pass + 2 })?;
    let of = sequence_repr(&mut tape, &a)?;
    let op = sequence_repr(&mut tape, &b)?;
    let ov = sequence_repr(&mut tape, &p)?;
    Ok(KnowledgeViews {
        o_full: tape.data(of).to_vec(),
        o_full_plus: tape.data(op).to_vec(),
        o_prev: tape.data(ov).to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub mlm_loss: f64,
    pub contrast_loss: f64,
    pub total_loss: f64,
}

/// One optimizer step on a pre-corrupted batch.
///
/// The MLM forward doubles as the first contrastive view; the second view
/// is the same input under an independent dropout draw, and the third is
/// a pass gated down to the accumulated importance in `store`. When
/// `store` is `None` (or the contrast weight is zero) the extra passes
/// are skipped entirely.
pub fn dap_train_step(
    model: &mut Model,
    store: Option<&ImportanceStore>,
    batch: &MLMBatch,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    seed: u64,
    step: usize,
) -> Result<StepStats, TrainError> {
    let ones = GateSet::ones(&model.config);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &ones)?;
    let base_pass = 3 * step as u64;
    let enc_a = model.encode(&mut tape, &binding, &batch.input_ids, Mode::Train { seed, pass: base_pass })?;
    let l_mlm = mlm_loss(&mut tape, &enc_a, batch)?;

    let contrast_on = cfg.contrast_weight > 0.0 && store.is_some();
    let (total, l_con) = if contrast_on {
        let store = store.unwrap();
        let enc_b =
            model.encode(&mut tape, &binding, &batch.input_ids, Mode::Train { seed, pass: base_pass + 1 })?;
        let prev_binding = model.rebind_gates(&mut tape, &binding, &store.as_gates())?;
        let enc_p =
            model.encode(&mut tape, &prev_binding, &batch.input_ids, Mode::Train { seed, pass: base_pass + 2 })?;
        let o_full = sequence_repr(&mut tape, &enc_a)?;
        let o_plus = sequence_repr(&mut tape, &enc_b)?;
        let o_prev = sequence_repr(&mut tape, &enc_p)?;
        let l_con = contrastive_loss(&mut tape, o_full, o_plus, o_prev, cfg.temperature);
        let weighted = tape.scale(l_con, cfg.contrast_weight);
        (tape.add(l_mlm, weighted), Some(l_con))
    } else {
        (l_mlm, None)
    };

    let loss_val = tape.value(total);
    if !loss_val.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss_val));
    }
    if loss_val > DIVERGENCE_LIMIT {
        return Err(TrainError::Diverged(loss_val));
    }

    tape.backward(total)?;

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, &node) in &binding.param_nodes {
        let g = tape
            .grad(node)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.data(node).len()]);
        grads.insert(name.clone(), g);
    }
    if cfg.softmask {
        if let Some(store) = store {
            softmask_apply(&model.config, &store.mask_factors(), &mut grads);
        }
    }
    opt.step(model, &grads);

    Ok(StepStats {
        step,
        mlm_loss: tape.value(l_mlm),
        contrast_loss: l_con.map(|n| tape.value(n)).unwrap_or(0.0),
        total_loss: tape.value(total),
    })
}

/// Train on one domain corpus with a fresh optimizer, sampling batches
/// with replacement. Writes one JSONL record per `log_every` steps.
pub fn train_domain(
    model: &mut Model,
    store: Option<&ImportanceStore>,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut (dyn Write + 'static)>,
) -> Result<Vec<StepStats>, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut opt = Optimizer::new(cfg);
    let mut sampler = seeded_rng(mix2(seed, 0x5a3c_17));
    let mut stats = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| corpus[sampler.gen_range(0..corpus.len())].clone())
            .collect();
        let mut corrupt_rng = seeded_rng(mix2(seed, 0xc0de ^ step as u64));
        let batch = match mlm_corrupt(&seqs, cfg.mask_prob, model.config.vocab_size, &mut corrupt_rng) {
            Ok(b) if b.masked_count() > 0 => b,
            // a tiny batch can end up with zero masked positions; skip it
            _ => continue,
        };
        let st = dap_train_step(model, store, &batch, cfg, &mut opt, seed, step)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&st)?)?;
            }
        }
        stats.push(st);
    }
    Ok(stats)
}

/// A 2-class linear probe on frozen sequence representations, trained
/// with full-batch Adam on the cross-entropy. Deterministic given the
/// seed; the encoder is never updated.
pub struct LinearProbe {
    pub w: Vec<f64>, // [d, 2] row-major
    pub b: Vec<f64>, // [2]
}

impl LinearProbe {
    pub fn train(features: &[Vec<f64>], labels: &[u8], epochs: usize, lr: f64, seed: u64) -> Self {
        let d = features[0].len();
        let mut rng = seeded_rng(mix2(seed, 0x9e0b));
        let a = (6.0 / (d + 2) as f64).sqrt();
        let mut w: Vec<f64> = (0..d * 2).map(|_| rng.gen_range(-a..a)).collect();
        let mut b = vec![0.0f64; 2];
        let n = features.len() as f64;
        let mut adam_m = vec![0.0; d * 2 + 2];
        let mut adam_v = vec![0.0; d * 2 + 2];
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        for t in 1..=epochs {
            let mut gw = vec![0.0; d * 2];
            let mut gb = vec![0.0; 2];
            for (x, &y) in features.iter().zip(labels) {
                let mut z = [b[0], b[1]];
                for (j, &xj) in x.iter().enumerate() {
                    z[0] += xj * w[j * 2];
                    z[1] += xj * w[j * 2 + 1];
                }
                let m = z[0].max(z[1]);
                let e0 = (z[0] - m).exp();
                let e1 = (z[1] - m).exp();
                let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
                for c in 0..2 {
                    let delta = p[c] - if y as usize == c { 1.0 } else { 0.0 };
                    gb[c] += delta / n;
                    for (j, &xj) in x.iter().enumerate() {
                        gw[j * 2 + c] += delta * xj / n;
                    }
                }
            }
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            for (i, g) in gw.iter().chain(gb.iter()).enumerate() {
                adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * g;
                adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * g * g;
                let upd = lr * (adam_m[i] / bc1) / ((adam_v[i] / bc2).sqrt() + eps);
                if i < d * 2 {
                    w[i] -= upd;
                } else {
                    b[i - d * 2] -= upd;
                }
            }
        }
        LinearProbe { w, b }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut z = [self.b[0], self.b[1]];
        for (j, &xj) in x.iter().enumerate() {
            z[0] += xj * self.w[j * 2];
            z[1] += xj * self.w[j * 2 + 1];
        }
        u8::from(z[1] > z[0])
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / labels.len() as f64
    }

    /// Accuracy and macro-averaged F1 over the two classes.
    pub fn evaluate(&self, features: &[Vec<f64>], labels: &[u8]) -> (f64, f64) {
        let mut tp = [0.0f64; 2];
        let mut fp = [0.0f64; 2];
        let mut fnn = [0.0f64; 2];
        let mut correct = 0usize;
        for (x, &y) in features.iter().zip(labels) {
            let p = self.predict(x) as usize;
            if p == y as usize {
                correct += 1;
                tp[p] += 1.0;
            } else {
                fp[p] += 1.0;
                fnn[y as usize] += 1.0;
            }
        }
        let f1 = |c: usize| {
            let denom = 2.0 * tp[c] + fp[c] + fnn[c];
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp[c] / denom
            }
        };
        (correct as f64 / labels.len() as f64, (f1(0) + f1(1)) / 2.0)
    }
}

/// Eval-mode sequence representations for a set of sequences, computed in
/// small batches of equal-length rows (sequences are padded by the caller).
pub fn extract_features(model: &Model, sequences: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, TrainError> {
    let gates = GateSet::ones(&model.config);
    let d = model.config.d_model;
    let mut feats = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(32) {
        let mut fp = model.forward(chunk, &gates, Mode::Eval)?;
        let repr = fp.sequence_repr()?;
        let data = fp.tape.data(repr);
        for r in 0..chunk.len() {
            feats.push(data[r * d..(r + 1) * d].to_vec());
        }
    }
    Ok(feats)
}

/// Evaluate the frozen encoder on a 2-class task: train a fresh linear
/// probe on its eval-mode sequence representations and return (accuracy,
/// macro-F1) on the test split. The encoder itself is never mutated.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: &Model,
    train_seqs: &[Vec<u32>],
    train_labels: &[u8],
    test_seqs: &[Vec<u32>],
    test_labels: &[u8],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&l| l > 1) {
        return Err(TrainError::InvalidLabel(bad));
    }
    let train_feats = extract_features(model, train_seqs)?;
    let test_feats = extract_features(model, test_seqs)?;
    let probe = LinearProbe::train(&train_feats, train_labels, epochs, lr, seed);
    Ok(probe.evaluate(&test_feats, test_labels))
}

//! Graph-attention + LSTM classifier: parameters, configuration, forward pass
//! and checkpoint I/O.
//!
//! Pipeline per graph: stacked multi-head GAT layers (self-loops added to
//! every neighbourhood) -> global mean pool -> reshape into `seq_len` steps ->
//! LSTM -> affine head -> log-softmax.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::nn::layers::{self, GatVars, LstmVars};
use crate::nn::tape::{Csr, Tape, Var};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATM1";

/// What the LSTM consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmInput {
    /// The pooled graph vector split into `seq_len` equal steps.
    Reshape,
    /// Node embeddings in segment order, one node per step.
    NodeSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_features: usize,
    pub classes: usize,
    pub gat_layers: usize,
    pub heads: usize,
    /// Output width per head on all but the last GAT layer.
    pub hidden_per_head: usize,
    /// Width of the last GAT layer's output, i.e. the pooled vector.
    pub pooled_dim: usize,
    /// Average heads on the last layer instead of concatenating them.
    pub final_average: bool,
    pub seq_len: usize,
    pub lstm_hidden: usize,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
    pub lstm_input: LstmInput,
    /// Dropout on GAT layer inputs during training; 0 disables it.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(in_features: usize, classes: usize) -> Self {
        Self {
            in_features,
            classes,
            gat_layers: 2,
            heads: 4,
            hidden_per_head: 16,
            pooled_dim: 64,
            final_average: true,
            seq_len: 4,
            lstm_hidden: 32,
            leaky_slope: 0.2,
            elu_alpha: 1.0,
            lstm_input: LstmInput::Reshape,
            dropout: 0.0,
        }
    }

    /// `(in, out-per-head, concat)` for each GAT layer.
    pub fn gat_dims(&self) -> Vec<(usize, usize, bool)> {
        let mut dims = Vec::with_capacity(self.gat_layers);
        let mut input = self.in_features;
        for l in 0..self.gat_layers {
            if l + 1 < self.gat_layers {
                dims.push((input, self.hidden_per_head, true));
                input = self.hidden_per_head * self.heads;
            } else if self.final_average {
                dims.push((input, self.pooled_dim, false));
            } else {
                dims.push((input, self.pooled_dim / self.heads, true));
            }
        }
        dims
    }

    pub fn lstm_input_dim(&self) -> usize {
        match self.lstm_input {
            LstmInput::Reshape => self.pooled_dim / self.seq_len,
            LstmInput::NodeSequence => self.pooled_dim,
        }
    }

    /// Checks the dimension chain F -> ... -> pooled -> LSTM -> classes.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_features == 0 {
            return fail("in_features must be positive".into());
        }
        if self.classes < 2 {
            return fail("need at least two classes".into());
        }
        if self.gat_layers == 0 || self.heads == 0 || self.hidden_per_head == 0 || self.pooled_dim == 0 {
            return fail("GAT layers, heads and widths must be positive".into());
        }
        if !self.final_average && self.pooled_dim % self.heads != 0 {
            return fail(format!("pooled_dim {} not divisible by {} heads", self.pooled_dim, self.heads));
        }
        if self.lstm_input == LstmInput::Reshape && (self.seq_len == 0 || self.pooled_dim % self.seq_len != 0) {
            return fail(format!("pooled_dim {} not divisible by seq_len {}", self.pooled_dim, self.seq_len));
        }
        if self.lstm_hidden == 0 {
            return fail("lstm_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.leaky_slope.is_finite() && self.elu_alpha.is_finite()) {
            return fail("activation constants must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHeadParams {
    /// F_in x F_out
    pub w: Tensor,
    /// 1 x 2F_out; first half scores the target node, second half the neighbour
    pub a: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
    pub concat: bool,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
}

impl GatLayerParams {
    pub fn out_dim(&self) -> usize {
        let f = self.heads[0].w.cols();
        if self.concat {
            f * self.heads.len()
        } else {
            f
        }
    }
}

/// One gate: `act([h_prev, x] W + b)` with `W` of shape (H + d_in) x H.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGate {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: LstmGate,
    pub forget: LstmGate,
    pub candidate: LstmGate,
    pub output: LstmGate,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.input.b.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input.w.rows() - self.hidden()
    }

    fn gates(&self) -> [&LstmGate; 4] {
        [&self.input, &self.forget, &self.candidate, &self.output]
    }

    fn gates_mut(&mut self) -> [&mut LstmGate; 4] {
        [&mut self.input, &mut self.forget, &mut self.candidate, &mut self.output]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub gat: Vec<GatLayerParams>,
    pub lstm: LstmParams,
    /// H x C
    pub head_w: Tensor,
    /// 1 x C
    pub head_b: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, values).expect("shape").param()
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

impl ModelParams {
    /// Glorot-uniform GAT and head weights, `U(-1/sqrt(H), 1/sqrt(H))` LSTM
    /// weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gat = config
            .gat_dims()
            .into_iter()
            .map(|(fin, fout, concat)| GatLayerParams {
                heads: (0..config.heads)
                    .map(|_| GatHeadParams { w: glorot(&mut rng, fin, fout), a: glorot(&mut rng, 1, 2 * fout) })
                    .collect(),
                concat,
                leaky_slope: config.leaky_slope,
                elu_alpha: config.elu_alpha,
            })
            .collect();
        let h = config.lstm_hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let d_in = config.lstm_input_dim();
        let mut gate = || LstmGate { w: uniform(&mut rng, h + d_in, h, bound), b: Tensor::zeros(1, h).param() };
        let lstm = LstmParams { input: gate(), forget: gate(), candidate: gate(), output: gate() };
        let head_w = glorot(&mut rng, h, config.classes);
        let head_b = Tensor::zeros(1, config.classes).param();
        Ok(Self { config, gat, lstm, head_w, head_b })
    }

    /// Same shapes with every value zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut() {
            t.values.fill(0.0);
        }
        Ok(p)
    }

    /// All tensors in slot order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.gat.iter().enumerate() {
            for (k, head) in layer.heads.iter().enumerate() {
                out.push((format!("gat{l}.head{k}.W"), &head.w));
                out.push((format!("gat{l}.head{k}.a"), &head.a));
            }
        }
        for (name, g) in ["input", "forget", "candidate", "output"].iter().zip(self.lstm.gates()) {
            out.push((format!("lstm.{name}.W"), &g.w));
            out.push((format!("lstm.{name}.b"), &g.b));
        }
        out.push(("head.W".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.gat {
            for head in &mut layer.heads {
                out.push(&mut head.w);
                out.push(&mut head.a);
            }
        }
        for g in self.lstm.gates_mut() {
            out.push(&mut g.w);
            out.push(&mut g.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every tensor on the tape in slot order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut slot = 0;
        let mut next = |tape: &mut Tape, t: &Tensor| {
            let v = tape.param(t, slot);
            slot += 1;
            v
        };
        let gat = self
            .gat
            .iter()
            .map(|layer| GatVars {
                heads: layer.heads.iter().map(|h| (next(tape, &h.w), next(tape, &h.a))).collect(),
                concat: layer.concat,
                leaky_slope: layer.leaky_slope,
                elu_alpha: layer.elu_alpha,
            })
            .collect();
        let mut gate = |tape: &mut Tape, g: &LstmGate| (next(tape, &g.w), next(tape, &g.b));
        let lstm = LstmVars {
            input: gate(tape, &self.lstm.input),
            forget: gate(tape, &self.lstm.forget),
            candidate: gate(tape, &self.lstm.candidate),
            output: gate(tape, &self.lstm.output),
            hidden: self.lstm.hidden(),
        };
        let head_w = next(tape, &self.head_w);
        let head_b = next(tape, &self.head_b);
        BoundParams { gat, lstm, head_w, head_b }
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config JSON");
        let tensors = self.named_tensors();
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (_, t) in tensors {
            b.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in &t.values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    /// Parses a checkpoint; with `expected` set, any config difference is a
    /// [`Error::Config`].
    pub fn from_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| fmt("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic, expected ATM1"));
        }
        let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(cfg_len)?)?;
        if let Some(want) = expected {
            if want != &config {
                return Err(Error::Config(format!(
                    "checkpoint config does not match: checkpoint has {}, expected {}",
                    serde_json::to_string(&config)?,
                    serde_json::to_string(want)?
                )));
            }
        }
        let mut params = Self::zeros(config)?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(fmt("tensor count does not match config"));
        }
        for t in slots.iter_mut() {
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if [rows, cols] != t.shape {
                return Err(fmt("tensor shape does not match config"));
            }
            for v in t.values.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_checkpoint(&fs::read(path)?, expected)
    }
}

/// Tape handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub gat: Vec<GatVars>,
    pub lstm: LstmVars,
    pub head_w: Var,
    pub head_b: Var,
}

/// A graph prepared for the model: f64 features and the self-looped CSR.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub features: Tensor,
    pub csr: Arc<Csr>,
    pub label: usize,
}

impl GraphInput {
    pub fn from_graph(g: &SimilarityGraph) -> Result<Self> {
        let features = Tensor::from_vec(g.n, g.feature_dim, g.features.iter().map(|&v| f64::from(v)).collect())?;
        Ok(Self { features, csr: Arc::new(Csr::with_self_loops(&g.adjacency())), label: g.label })
    }

    pub fn new(features: Tensor, adjacency: &[Vec<usize>], label: usize) -> Result<Self> {
        if adjacency.len() != features.rows() {
            return Err(Error::Shape(format!("{} adjacency rows for {} nodes", adjacency.len(), features.rows())));
        }
        if adjacency.iter().flatten().any(|&j| j >= features.rows()) {
            return Err(Error::Shape("adjacency refers to a missing node".into()));
        }
        Ok(Self { features, csr: Arc::new(Csr::with_self_loops(adjacency)), label })
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Handles to the interesting intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub log_probs: Var,
    /// `None` in node-sequence mode.
    pub pooled: Option<Var>,
    pub node_embeddings: Var,
    /// attention coefficients per layer, per head (one entry per CSR slot)
    pub alphas: Vec<Vec<Var>>,
}

/// Random state for training-time dropout.
pub struct DropoutRng<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Records the full forward pass of one graph on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &GraphInput,
    mut dropout: Option<DropoutRng<'_>>,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if input.features.cols() != cfg.in_features {
        return Err(Error::Shape(format!(
            "graph has {} features per node, model expects {}",
            input.features.cols(),
            cfg.in_features
        )));
    }
    if input.nodes() == 0 {
        return Err(Error::Argument("graph has no nodes".into()));
    }
    let mut h = tape.constant(&input.features);
    let mut alphas = Vec::with_capacity(bound.gat.len());
    for layer in &bound.gat {
        if let Some(d) = dropout.as_mut().filter(|d| d.rate > 0.0) {
            h = layers::dropout(tape, h, d.rate, d.rng)?;
        }
        let (out, a) = layers::gat_layer(tape, h, &input.csr, layer)?;
        h = out;
        alphas.push(a);
    }
    let (seq, pooled) = match cfg.lstm_input {
        LstmInput::Reshape => {
            let pooled = tape.mean_rows(h)?;
            (tape.reshape(pooled, cfg.seq_len, cfg.pooled_dim / cfg.seq_len)?, Some(pooled))
        }
        LstmInput::NodeSequence => (h, None),
    };
    let last = layers::lstm(tape, seq, &bound.lstm)?;
    let log_probs = layers::classify(tape, last, bound.head_w, bound.head_b)?;
    Ok(ForwardTrace { log_probs, pooled, node_embeddings: h, alphas })
}

/// Inference: log-probabilities for one graph.
pub fn predict_log_probs(params: &ModelParams, input: &GraphInput) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = forward(&mut tape, params, &bound, input, None)?;
    let out = tape.value(trace.log_probs).to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite log-probabilities".into()));
    }
    Ok(out)
}

/// Pooled graph vector (reshape mode) and the attention coefficients of
/// every layer and head, each aligned with `input.csr`.
pub fn inspect(params: &ModelParams, input: &GraphInput) -> Result<(Option<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = forward(&mut tape, params, &bound, input, None)?;
    let pooled = trace.pooled.map(|p| tape.value(p).to_vec());
    let alphas =
        trace.alphas.iter().map(|layer| layer.iter().map(|&a| tape.value(a).to_vec()).collect()).collect();
    Ok((pooled, alphas))
}

/// NLL of one graph and the per-slot gradients.
pub fn loss_and_grads(
    params: &ModelParams,
    input: &GraphInput,
    dropout: Option<DropoutRng<'_>>,
) -> Result<(f64, crate::nn::tape::ParamGrads)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = forward(&mut tape, params, &bound, input, dropout)?;
    let loss = tape.nll(trace.log_probs, Arc::from(vec![input.label]))?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    Ok((value, tape.backward(loss)?))
}

/// NLL only.
pub fn loss_only(params: &ModelParams, input: &GraphInput) -> Result<f64> {
    let lp = predict_log_probs(params, input)?;
    if input.label >= lp.len() {
        return Err(Error::Argument(format!("label {} outside 0..{}", input.label, lp.len())));
    }
    Ok(-lp[input.label])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::new(6, 3)
    }

    fn ring(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect()
    }

    fn input(n: usize, f: usize, seed: u64) -> GraphInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        GraphInput::new(Tensor::from_vec(n, f, vals).unwrap(), &ring(n), 1).unwrap()
    }

    #[test]
    fn config_chain_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.seq_len = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.lstm_input = LstmInput::NodeSequence;
        assert!(c.validate().is_ok());
        let p = ModelParams::init(c, 1).unwrap();
        assert_eq!(p.lstm.input_dim(), 64);
        let mut c = small_config();
        c.final_average = false;
        c.pooled_dim = 62;
        assert!(c.validate().is_err());
        assert_eq!(small_config().gat_dims(), vec![(6, 16, true), (64, 64, false)]);
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(small_config()).unwrap();
        for seed in 0..3 {
            let lp = predict_log_probs(&p, &input(5 + seed as usize, 6, seed)).unwrap();
            for v in lp {
                assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_probs_normalized_and_deterministic() {
        let p = ModelParams::init(small_config(), 3).unwrap();
        let g = input(7, 6, 9);
        let a = predict_log_probs(&p, &g).unwrap();
        let b = predict_log_probs(&p, &g).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_feature_width_is_shape_error() {
        let p = ModelParams::init(small_config(), 3).unwrap();
        assert!(matches!(predict_log_probs(&p, &input(4, 5, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let p = ModelParams::init(small_config(), 11).unwrap();
        let bytes = p.to_checkpoint();
        let q = ModelParams::from_checkpoint(&bytes, Some(&p.config)).unwrap();
        assert_eq!(p.named_tensors().len(), q.named_tensors().len());
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(q.named_tensors()) {
            assert_eq!(a.values, b.values);
        }
        let mut other = small_config();
        other.lstm_hidden = 8;
        assert!(matches!(ModelParams::from_checkpoint(&bytes, Some(&other)), Err(Error::Config(_))));
        assert!(ModelParams::from_checkpoint(&bytes[..bytes.len() - 3], None).is_err());
    }

    #[test]
    fn node_sequence_mode_runs() {
        let mut c = small_config();
        c.lstm_input = LstmInput::NodeSequence;
        let p = ModelParams::init(c, 2).unwrap();
        let (loss, grads) = loss_and_grads(&p, &input(6, 6, 4), None).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.grads.len(), p.named_tensors().len());
    }
}

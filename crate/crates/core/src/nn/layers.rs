//! Layer building blocks, recorded on a [`Tape`], plus plain-tensor entry
//! points for the individual stages of the model.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::model::{GatLayerParams, LstmParams};
use crate::nn::tape::{Csr, Tape, Var};
use crate::nn::tensor::Tensor;

/// Tape handles of one GAT layer: `(W, a)` per head.
#[derive(Debug, Clone)]
pub struct GatVars {
    pub heads: Vec<(Var, Var)>,
    pub concat: bool,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
}

/// Tape handles of the LSTM gates, `(W, b)` each.
#[derive(Debug, Clone)]
pub struct LstmVars {
    pub input: (Var, Var),
    pub forget: (Var, Var),
    pub candidate: (Var, Var),
    pub output: (Var, Var),
    pub hidden: usize,
}

/// Raw scores `LeakyReLU(a_l . Wh_i + a_r . Wh_j)`, one per CSR entry, and
/// the projected features `Wh`.
pub fn head_scores(tape: &mut Tape, h: Var, csr: &Arc<Csr>, w: Var, a: Var, slope: f64) -> Result<(Var, Var)> {
    let z = tape.matmul(h, w)?;
    let f = tape.shape(z).1;
    if tape.shape(a) != (1, 2 * f) {
        return Err(Error::Shape(format!("attention vector {:?}, expected (1, {})", tape.shape(a), 2 * f)));
    }
    let a_self = tape.slice_cols(a, 0, f)?;
    let a_nb = tape.slice_cols(a, f, f)?;
    let s_self = tape.matmul_bt(z, a_self)?;
    let s_nb = tape.matmul_bt(z, a_nb)?;
    let gs = tape.gather(s_self, csr.rows.clone())?;
    let gn = tape.gather(s_nb, csr.cols.clone())?;
    let e = tape.add(gs, gn)?;
    Ok((tape.leaky_relu(e, slope), z))
}

/// One multi-head attention layer. Returns the layer output and the
/// attention coefficients of every head.
pub fn gat_layer(tape: &mut Tape, h: Var, csr: &Arc<Csr>, layer: &GatVars) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut alphas = Vec::with_capacity(layer.heads.len());
    for &(w, a) in &layer.heads {
        let z = tape.matmul(h, w)?;
        let (agg, alpha) = tape.gat_attend(z, a, csr.clone(), layer.leaky_slope)?;
        outs.push(tape.elu(agg, layer.elu_alpha));
        alphas.push(alpha);
    }
    let out = if layer.concat {
        tape.concat_cols(&outs)?
    } else {
        let s = tape.sum(&outs)?;
        tape.scale(s, 1.0 / outs.len() as f64)
    };
    Ok((out, alphas))
}

/// Runs the LSTM over the rows of `seq` from zero state; returns the last
/// hidden state (1 x H).
pub fn lstm(tape: &mut Tape, seq: Var, p: &LstmVars) -> Result<Var> {
    let (steps, _) = tape.shape(seq);
    let mut h = tape.constant_raw(1, p.hidden, vec![0.0; p.hidden]);
    let mut c = tape.constant_raw(1, p.hidden, vec![0.0; p.hidden]);
    for t in 0..steps {
        let x = tape.slice_row(seq, t)?;
        let hx = tape.concat_cols(&[h, x])?;
        let gate = |tape: &mut Tape, (w, b): (Var, Var)| -> Result<Var> {
            let lin = tape.matmul(hx, w)?;
            tape.add_row(lin, b)
        };
        let f_pre = gate(tape, p.forget)?;
        let i_pre = gate(tape, p.input)?;
        let g_pre = gate(tape, p.candidate)?;
        let o_pre = gate(tape, p.output)?;
        let f = tape.sigmoid(f_pre);
        let i = tape.sigmoid(i_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
    }
    Ok(h)
}

/// Affine head followed by log-softmax.
pub fn classify(tape: &mut Tape, hidden: Var, w: Var, b: Var) -> Result<Var> {
    let lin = tape.matmul(hidden, w)?;
    let logits = tape.add_row(lin, b)?;
    Ok(tape.log_softmax_rows(logits))
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let keep = 1.0 - rate;
    let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = tape.constant_raw(r, c, mask);
    tape.mul(x, m)
}

fn bind_layer(tape: &mut Tape, layer: &GatLayerParams) -> GatVars {
    GatVars {
        heads: layer.heads.iter().map(|h| (tape.constant(&h.w), tape.constant(&h.a))).collect(),
        concat: layer.concat,
        leaky_slope: layer.leaky_slope,
        elu_alpha: layer.elu_alpha,
    }
}

/// Per-node sparse rows of `(neighbour, value)`.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

fn to_sparse_rows(csr: &Csr, values: &[f64]) -> SparseRows {
    (0..csr.n).map(|i| csr.row_range(i).map(|e| (csr.cols[e], values[e])).collect()).collect()
}

/// Attention scores `e_ij` of head `head` for every `j` in the self-looped
/// neighbourhood of `i`.
pub fn attention_scores(h: &Tensor, adjacency: &[Vec<usize>], layer: &GatLayerParams, head: usize) -> Result<SparseRows> {
    let Some(params) = layer.heads.get(head) else {
        return Err(Error::Argument(format!("head {head} of {}", layer.heads.len())));
    };
    if adjacency.len() != h.rows() {
        return Err(Error::Shape(format!("{} adjacency rows for {} nodes", adjacency.len(), h.rows())));
    }
    let csr = Arc::new(Csr::with_self_loops(adjacency));
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let w = tape.constant(&params.w);
    let a = tape.constant(&params.a);
    let (e, _) = head_scores(&mut tape, hv, &csr, w, a, layer.leaky_slope)?;
    Ok(to_sparse_rows(&csr, tape.value(e)))
}

/// Softmax of each node's scores, shifted by the row maximum.
pub fn attention_normalize(scores: &SparseRows) -> SparseRows {
    scores
        .iter()
        .map(|row| {
            let max = row.iter().map(|&(_, e)| e).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&(_, e)| (e - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            row.iter().zip(exps).map(|(&(j, _), x)| (j, x / z)).collect()
        })
        .collect()
}

/// One GAT layer on plain tensors.
pub fn gat_forward(h: &Tensor, adjacency: &[Vec<usize>], layer: &GatLayerParams) -> Result<Tensor> {
    if adjacency.len() != h.rows() {
        return Err(Error::Shape(format!("{} adjacency rows for {} nodes", adjacency.len(), h.rows())));
    }
    let csr = Arc::new(Csr::with_self_loops(adjacency));
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let vars = bind_layer(&mut tape, layer);
    let (out, _) = gat_layer(&mut tape, hv, &csr, &vars)?;
    Ok(tape.to_tensor(out))
}

pub fn global_mean_pool(h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let p = tape.mean_rows(hv)?;
    Ok(tape.to_tensor(p))
}

/// Splits a 1 x D vector into `seq_len` rows of width `D / seq_len`.
pub fn reshape_to_sequence(pooled: &Tensor, seq_len: usize) -> Result<Tensor> {
    let d = pooled.len();
    if seq_len == 0 || d % seq_len != 0 {
        return Err(Error::Config(format!("pooled width {d} not divisible by sequence length {seq_len}")));
    }
    Tensor::from_vec(seq_len, d / seq_len, pooled.values.clone())
}

pub fn lstm_forward(seq: &Tensor, params: &LstmParams) -> Result<Tensor> {
    if seq.cols() != params.input_dim() {
        return Err(Error::Shape(format!("sequence width {} but LSTM input {}", seq.cols(), params.input_dim())));
    }
    let mut tape = Tape::new();
    let s = tape.constant(seq);
    let mut gate = |g: &crate::nn::model::LstmGate| (tape.constant(&g.w), tape.constant(&g.b));
    let vars = LstmVars {
        input: gate(&params.input),
        forget: gate(&params.forget),
        candidate: gate(&params.candidate),
        output: gate(&params.output),
        hidden: params.hidden(),
    };
    let h = lstm(&mut tape, s, &vars)?;
    Ok(tape.to_tensor(h))
}

pub fn classify_forward(hidden: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden);
    let wv = tape.constant(w);
    let bv = tape.constant(b);
    let out = classify(&mut tape, h, wv, bv)?;
    Ok(tape.to_tensor(out))
}

/// Mean of `-logp[b, label_b]`.
pub fn nll_loss(logp: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(logp);
    let l = tape.nll(lp, Arc::from(labels))?;
    Ok(tape.value(l)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{GatHeadParams, LstmGate};

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(rows, cols, v).unwrap()
    }

    fn layer(heads: Vec<GatHeadParams>, concat: bool) -> GatLayerParams {
        GatLayerParams { heads, concat, leaky_slope: 0.2, elu_alpha: 1.0 }
    }

    #[test]
    fn score_examples() {
        let l = layer(vec![GatHeadParams { w: t(1, 1, vec![1.0]), a: t(1, 2, vec![1.0, -1.0]) }], true);
        let h = t(2, 1, vec![2.0, 3.0]);
        let e = attention_scores(&h, &[vec![1], vec![0]], &l, 0).unwrap();
        let e01 = e[0].iter().find(|(j, _)| *j == 1).unwrap().1;
        assert!((e01 - -0.2).abs() < 1e-15);

        let zero_a = layer(vec![GatHeadParams { w: t(1, 1, vec![1.0]), a: t(1, 2, vec![0.0, 0.0]) }], true);
        let e = attention_scores(&h, &[vec![1], vec![0]], &zero_a, 0).unwrap();
        assert!(e.iter().flatten().all(|&(_, v)| v == 0.0));

        let single = attention_scores(&t(1, 1, vec![4.0]), &[vec![]], &l, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 1);
        assert!(attention_scores(&h, &[vec![]], &l, 0).is_err());
        assert!(attention_scores(&h, &[vec![1], vec![0]], &l, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let one = attention_normalize(&vec![vec![(0, 3.7)]]);
        assert_eq!(one[0][0].1, 1.0);
        let eq = attention_normalize(&vec![vec![(0, 0.4), (1, 0.4), (2, 0.4), (3, 0.4)]]);
        assert!(eq[0].iter().all(|&(_, a)| (a - 0.25).abs() < 1e-15));
        let r = attention_normalize(&vec![vec![(0, 0.5), (1, -0.2), (2, 1.1)]]);
        let z = 0.5f64.exp() + (-0.2f64).exp() + 1.1f64.exp();
        for (&(_, a), e) in r[0].iter().zip([0.5f64, -0.2, 1.1]) {
            assert!((a - e.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_identity_map_averages_neighbours() {
        let l = layer(vec![GatHeadParams { w: t(2, 2, vec![1.0, 0.0, 0.0, 1.0]), a: t(1, 4, vec![0.0; 4]) }], true);
        let h = t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let adj = vec![vec![1, 2], vec![0], vec![0]];
        let out = gat_forward(&h, &adj, &l).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12 && (out.get(0, 1) - 5.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 2.0).abs() < 1e-12 && (out.get(1, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_is_elu_of_projection() {
        let w = t(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let l = layer(vec![GatHeadParams { w, a: t(1, 4, vec![0.3, -0.7, 0.1, 0.9]) }], true);
        let h = t(1, 2, vec![-1.0, 0.2]);
        let out = gat_forward(&h, &[vec![]], &l).unwrap();
        let z = [-1.0 * 0.5 + 0.2 * 2.0, -1.0 * -1.0 + 0.2 * 0.25];
        let elu = |x: f64| if x > 0.0 { x } else { x.exp_m1() };
        assert!((out.get(0, 0) - elu(z[0])).abs() < 1e-15);
        assert!((out.get(0, 1) - elu(z[1])).abs() < 1e-15);
    }

    #[test]
    fn pool_and_reshape() {
        let p = global_mean_pool(&t(2, 1, vec![1.0, 3.0])).unwrap();
        assert_eq!(p.values, vec![2.0]);
        let same = global_mean_pool(&t(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0])).unwrap();
        assert_eq!(same.values, vec![1.5, -2.0]);
        assert!(global_mean_pool(&Tensor::zeros(0, 3)).is_err());

        let v = t(1, 8, (0..8).map(f64::from).collect());
        let s = reshape_to_sequence(&v, 4).unwrap();
        assert_eq!(s.shape, [4, 2]);
        assert_eq!(s.row(2), &[4.0, 5.0]);
        assert_eq!(reshape_to_sequence(&v, 1).unwrap().values, v.values);
        let twelve = Tensor::zeros(1, 12);
        assert!(matches!(reshape_to_sequence(&twelve, 5), Err(Error::Config(_))));
    }

    fn gate(w: f64, u: f64, b: f64) -> LstmGate {
        // W rows: [h_prev; x]
        LstmGate { w: t(2, 1, vec![u, w]), b: t(1, 1, vec![b]) }
    }

    #[test]
    fn lstm_zero_and_single_step() {
        let zero = LstmParams { input: gate(0., 0., 0.), forget: gate(0., 0., 0.), candidate: gate(0., 0., 0.), output: gate(0., 0., 0.) };
        let out = lstm_forward(&t(3, 1, vec![1.0, -2.0, 0.5]), &zero).unwrap();
        assert_eq!(out.values, vec![0.0]);

        let p = LstmParams { input: gate(0.5, 9.0, 0.1), forget: gate(-0.3, 9.0, 0.2), candidate: gate(1.2, 9.0, -0.4), output: gate(0.7, 9.0, 0.05) };
        let x = 0.8;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5 * x + 0.1);
        let g = (1.2 * x - 0.4f64).tanh();
        let o = sig(0.7 * x + 0.05);
        let c = i * g; // forget gate multiplies c_0 = 0
        let want = o * c.tanh();
        let out = lstm_forward(&t(1, 1, vec![x]), &p).unwrap();
        assert!((out.values[0] - want).abs() < 1e-15);
        assert_eq!(lstm_forward(&t(1, 1, vec![x]), &p).unwrap(), out);
        assert!(lstm_forward(&t(1, 2, vec![x, x]), &p).is_err());
    }

    #[test]
    fn head_and_loss() {
        let out = classify_forward(&t(1, 2, vec![0.3, 0.9]), &Tensor::zeros(2, 4), &Tensor::zeros(1, 4)).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
        let lp = classify_forward(&t(1, 1, vec![1.0]), &t(1, 2, vec![2.0, 0.0]), &Tensor::zeros(1, 2)).unwrap();
        assert!((lp.values[0] - -0.126928).abs() < 1e-6);
        assert!((lp.values[1] - -2.126928).abs() < 1e-6);
        let lse = lp.values.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-12);

        let uniform = t(2, 10, vec![(0.1f64).ln(); 20]);
        assert!((nll_loss(&uniform, &[3, 7]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let near_one_hot = t(1, 2, vec![-1e-12, -30.0]);
        assert!(nll_loss(&near_one_hot, &[0]).unwrap() < 1e-9);
        let batch = t(3, 2, vec![-0.1, -2.4, -0.7, -0.7, -3.0, -0.05]);
        let want = (2.4 + 0.7 + 0.05) / 3.0;
        assert!((nll_loss(&batch, &[1, 0, 1]).unwrap() - want).abs() < 1e-12);
        assert!(matches!(nll_loss(&batch, &[0, 2, 1]), Err(Error::Argument(_))));
    }
}

//! Similarity graphs: one node per segment, an undirected edge wherever the
//! DTW similarity of two segments exceeds the threshold.
//!
//! # Binary container
//!
//! Little-endian throughout.
//!
//! | field        | type                      |
//! |--------------|---------------------------|
//! | magic        | `ATG1`                    |
//! | version      | u32 (= 1)                 |
//! | nodes `n`    | u32                       |
//! | features `F` | u32                       |
//! | edges `E`    | u32                       |
//! | label        | u32                       |
//! | tau          | f32                       |
//! | node order   | `n` x u32                 |
//! | features     | `n * F` x f32, row-major  |
//! | edges        | `E` x (u32 i, u32 j, f32) |
//!
//! Total size is `28 + 4n + 4nF + 12E` bytes.

use serde::Serialize;

use crate::dtw::{pairwise_similarity, SimilarityMatrix};
use crate::entropy::{segment, Segment};
use crate::error::{arg_err, Error, Result};
use crate::signal::LabeledSample;

pub const GRAPH_MAGIC: &[u8; 4] = b"ATG1";
pub const GRAPH_VERSION: u32 = 1;
const GRAPH_HEADER_LEN: usize = 28;

/// Undirected weighted graph over the segments of one labeled sample.
///
/// Edges are stored once with `i < j`; self-loops are never stored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityGraph {
    pub n: usize,
    pub feature_dim: usize,
    /// n x F, row-major
    pub features: Vec<f32>,
    pub edges: Vec<(usize, usize, f32)>,
    pub node_order: Vec<usize>,
    pub label: usize,
    pub tau: f32,
}

/// Byte size of the binary container for a graph of the given dimensions.
pub fn encoded_len(n: usize, feature_dim: usize, edges: usize) -> usize {
    GRAPH_HEADER_LEN + 4 * n + 4 * n * feature_dim + 12 * edges
}

impl SimilarityGraph {
    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Per-node neighbour lists in both directions, sorted, self excluded.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j, _) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n * self.feature_dim {
            return Err(Error::Shape(format!(
                "features hold {} values, expected {} x {}",
                self.features.len(),
                self.n,
                self.feature_dim
            )));
        }
        if self.node_order.len() != self.n || self.node_order.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("node order must be strictly increasing".into()));
        }
        for &(i, j, w) in &self.edges {
            if i >= j || j >= self.n {
                return Err(Error::Format(format!("bad edge ({i}, {j})")));
            }
            if !(w > self.tau && w <= 1.0) {
                return Err(Error::Format(format!("edge ({i}, {j}) weight {w} outside ({}, 1]", self.tau)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(encoded_len(self.n, self.feature_dim, self.edges.len()));
        b.extend_from_slice(GRAPH_MAGIC);
        for v in [GRAPH_VERSION, self.n as u32, self.feature_dim as u32, self.edges.len() as u32, self.label as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.tau.to_le_bytes());
        for &o in &self.node_order {
            b.extend_from_slice(&(o as u32).to_le_bytes());
        }
        for &f in &self.features {
            b.extend_from_slice(&f.to_le_bytes());
        }
        for &(i, j, w) in &self.edges {
            b.extend_from_slice(&(i as u32).to_le_bytes());
            b.extend_from_slice(&(j as u32).to_le_bytes());
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != GRAPH_MAGIC {
            return Err(Error::Format("bad magic, expected ATG1".into()));
        }
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!("graph version {version} unsupported (expected {GRAPH_VERSION})")));
        }
        let n = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let e = r.u32()? as usize;
        let label = r.u32()? as usize;
        let tau = r.f32()?;
        if bytes.len() != encoded_len(n, feature_dim, e) {
            return Err(Error::Format(format!(
                "graph container is {} bytes, header implies {}",
                bytes.len(),
                encoded_len(n, feature_dim, e)
            )));
        }
        let node_order = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let features = (0..n * feature_dim).map(|_| r.f32()).collect::<Result<_>>()?;
        let edges = (0..e)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize, r.f32()?)))
            .collect::<Result<_>>()?;
        let g = Self { n, feature_dim, features, edges, node_order, label, tau };
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        let nodes: Vec<serde_json::Value> = (0..self.n)
            .map(|i| serde_json::json!({ "start": self.node_order[i], "features": self.feature_row(i) }))
            .collect();
        let edges: Vec<serde_json::Value> =
            self.edges.iter().map(|&(i, j, w)| serde_json::json!({ "i": i, "j": j, "weight": w })).collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "label": self.label,
            "tau": self.tau,
            "nodes": nodes,
            "edges": edges,
        }))
        .expect("graph JSON")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("graph container truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Per-channel z-normalization of a segment, flattened channel after channel.
/// Constant channels map to zeros.
pub fn node_features(seg: &Segment) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.values.len() * seg.width());
    for ch in &seg.values {
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let constant = ch.iter().all(|&v| v == ch[0]);
        if constant || !(var > 0.0) {
            out.extend(std::iter::repeat_n(0.0, ch.len()));
        } else {
            let sd = var.sqrt();
            out.extend(ch.iter().map(|v| (v - mean) / sd));
        }
    }
    out
}

/// Threshold for edge creation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Per-graph quantile of the off-diagonal similarities.
    Quantile(f64),
}

/// Linear-interpolation quantile of the off-diagonal upper-triangle values.
pub fn threshold_from_quantile(sim: &SimilarityMatrix, q: f64) -> Result<f64> {
    if sim.n() < 2 {
        return arg_err("quantile threshold needs at least two nodes");
    }
    if !(0.0..=1.0).contains(&q) {
        return arg_err(format!("quantile must lie in [0, 1], got {q}"));
    }
    let mut v = sim.upper_triangle();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(if lo == hi { v[lo] } else { v[lo] + (v[hi] - v[lo]) * frac })
}

/// Connects `i < j` whenever `sim[i][j] > tau`, comparing at binary32
/// precision so the stored weights satisfy the threshold exactly.
pub fn build_graph(segments: &[Segment], sim: &SimilarityMatrix, tau: f64, label: usize) -> Result<SimilarityGraph> {
    if !(tau >= 0.0) {
        return arg_err(format!("threshold must be non-negative, got {tau}"));
    }
    if sim.n() != segments.len() {
        return Err(Error::Shape(format!("{} segments but {}x{} similarity matrix", segments.len(), sim.n(), sim.n())));
    }
    if tau >= 1.0 {
        log::warn!("threshold {tau} >= 1: graph will have no edges");
    }
    let n = segments.len();
    let tau32 = tau as f32;
    let mut features = Vec::new();
    let mut feature_dim = 0;
    for s in segments {
        let f = node_features(s);
        if feature_dim == 0 {
            feature_dim = f.len();
        } else if f.len() != feature_dim {
            return Err(Error::Shape("segments differ in size".into()));
        }
        features.extend(f.into_iter().map(|v| v as f32));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let w = sim.get(i, j) as f32;
            if w > tau32 {
                edges.push((i, j, w));
            }
        }
    }
    let g = SimilarityGraph {
        n,
        feature_dim,
        features,
        edges,
        node_order: segments.iter().map(|s| s.start_index).collect(),
        label,
        tau: tau32,
    };
    g.validate()?;
    Ok(g)
}

/// Graph construction settings for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSpec {
    pub window: usize,
    pub step: usize,
    pub policy: ThresholdPolicy,
    pub band_radius: Option<usize>,
}

pub fn sample_to_graph(sample: &LabeledSample, spec: &GraphSpec) -> Result<SimilarityGraph> {
    let segs = segment(&sample.data, spec.window, spec.step)?;
    let sim = pairwise_similarity(&segs, spec.band_radius)?;
    let tau = match spec.policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Quantile(q) if segs.len() >= 2 => threshold_from_quantile(&sim, q)?,
        ThresholdPolicy::Quantile(_) => 0.0,
    };
    build_graph(&segs, &sim, tau, sample.label)
}

//! Dynamic time warping between segments and the derived similarity matrix.
//!
//! The local cost between aligned time points is the Euclidean norm across
//! channels. The cumulative cost is the raw sum along the optimal path with no
//! length normalization; all segments inside one graph share a width, so the
//! raw costs are comparable.

use std::fmt::Write as _;

use crate::entropy::Segment;
use crate::error::{arg_err, Error, Result};

/// A time-major view of a multichannel series: `data[t * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    data: Vec<f64>,
    channels: usize,
}

impl Series {
    /// From channel-major vectors (`channels[c][t]`).
    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = channels.first() else {
            return arg_err("series has no channels");
        };
        let len = first.len();
        if channels.iter().any(|c| c.len() != len) {
            return arg_err("channels differ in length");
        }
        let c = channels.len();
        let mut data = vec![0.0; len * c];
        for (ci, ch) in channels.iter().enumerate() {
            for (t, &v) in ch.iter().enumerate() {
                data[t * c + ci] = v;
            }
        }
        Ok(Self { data, channels: c })
    }

    pub fn univariate(values: &[f64]) -> Self {
        Self { data: values.to_vec(), channels: 1 }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn point(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }
}

#[inline]
fn local_cost(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == 1 {
        (a[0] - b[0]).abs()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

fn check_pair(x: &Series, y: &Series) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return arg_err("DTW of an empty sequence");
    }
    if x.channels != y.channels {
        return arg_err(format!("channel mismatch: {} vs {}", x.channels, y.channels));
    }
    Ok(())
}

/// Rolling-row DP restricted to `|i - j| <= radius`. Rows run over the longer
/// series so the buffers are sized by the shorter one.
fn dtw_core(x: &Series, y: &Series, radius: usize) -> f64 {
    let (long, short) = if x.len() >= y.len() { (x, y) } else { (y, x) };
    let (p, q) = (long.len(), short.len());
    let mut prev = vec![f64::INFINITY; q];
    let mut cur = vec![f64::INFINITY; q];
    for i in 0..p {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(q - 1);
        cur.fill(f64::INFINITY);
        let xi = long.point(i);
        for j in lo..=hi {
            let d = local_cost(xi, short.point(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[q - 1]
}

/// Exact DTW distance between two time-major series.
pub fn dtw_series(x: &Series, y: &Series) -> Result<f64> {
    check_pair(x, y)?;
    Ok(dtw_core(x, y, x.len().max(y.len())))
}

/// Sakoe-Chiba banded DTW. Never smaller than the exact distance.
pub fn dtw_series_banded(x: &Series, y: &Series, radius: usize) -> Result<f64> {
    check_pair(x, y)?;
    let (p, q) = (x.len(), y.len());
    if p.abs_diff(q) > radius {
        return Err(Error::InfeasibleBand { radius, rows: p - 1, cols: q - 1 });
    }
    Ok(dtw_core(x, y, radius))
}

/// Exact DTW between channel-major inputs (`x[c][t]`).
pub fn dtw_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    dtw_series(&Series::from_channels(x)?, &Series::from_channels(y)?)
}

pub fn dtw_distance_banded(x: &[Vec<f64>], y: &[Vec<f64>], radius: usize) -> Result<f64> {
    dtw_series_banded(&Series::from_channels(x)?, &Series::from_channels(y)?, radius)
}

/// `1 / (1 + d)`.
pub fn similarity(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return arg_err(format!("distance must be non-negative, got {d}"));
    }
    Ok(1.0 / (1.0 + d))
}

/// Dense symmetric similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    pub window: usize,
    pub band_radius: Option<usize>,
}

impl SimilarityMatrix {
    pub fn from_dense(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return arg_err("similarity matrix needs at least one row");
        }
        if values.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("similarity matrix must be square".into()));
        }
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        Ok(Self { n, values: flat, window: 0, band_radius: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Off-diagonal upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{}", self.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Similarity of every segment pair; upper triangle computed, then mirrored.
pub fn pairwise_similarity(segments: &[Segment], band_radius: Option<usize>) -> Result<SimilarityMatrix> {
    if segments.is_empty() {
        return arg_err("no segments");
    }
    let series = segments
        .iter()
        .map(|s| Series::from_channels(&s.values))
        .collect::<Result<Vec<_>>>()?;
    let n = series.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let d = match band_radius {
                Some(r) => dtw_series_banded(&series[i], &series[j], r)?,
                None => dtw_series(&series[i], &series[j])?,
            };
            let sim = similarity(d)?;
            values[i * n + j] = sim;
            values[j * n + i] = sim;
        }
    }
    Ok(SimilarityMatrix { n, values, window: segments[0].width(), band_radius })
}

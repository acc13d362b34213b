//! Shannon entropy of windowed segments and entropy-guided window selection.
//!
//! Continuous segments are discretized with a per-segment, per-channel
//! min-max histogram before counting symbols. All logarithms are natural; the
//! choice of base rescales every normalized score by the same constant, so the
//! selected window does not depend on it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::signal::window_count;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_WINDOWS: [usize; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

/// A contiguous window `T[start..start + w]` across all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// channels x w
    pub values: Vec<Vec<f64>>,
    pub start_index: usize,
}

impl Segment {
    pub fn width(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

/// Cuts `channels` into windows of width `w` every `step` points.
pub fn segment(channels: &[Vec<f64>], w: usize, step: usize) -> Result<Vec<Segment>> {
    if w < 2 {
        return arg_err(format!("window must be at least 2, got {w}"));
    }
    if step == 0 {
        return arg_err("step must be positive");
    }
    let n = channels.first().map_or(0, Vec::len);
    if w > n {
        return Err(Error::InsufficientData { needed: w, available: n });
    }
    Ok((0..window_count(n, w, step))
        .map(|k| {
            let start = k * step;
            Segment {
                values: channels.iter().map(|c| c[start..start + w].to_vec()).collect(),
                start_index: start,
            }
        })
        .collect())
}

/// How the scan step relates to the window width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRule {
    Fixed(usize),
    /// `max(1, w / 2)`
    HalfWindow,
}

impl StepRule {
    pub fn step_for(self, w: usize) -> usize {
        match self {
            StepRule::Fixed(s) => s,
            StepRule::HalfWindow => (w / 2).max(1),
        }
    }
}

/// Empirical Shannon entropy, in nats, of a symbol sequence.
pub fn shannon_entropy(symbols: &[u32]) -> Result<f64> {
    if symbols.is_empty() {
        return arg_err("entropy of an empty sequence");
    }
    let max = *symbols.iter().max().unwrap() as usize;
    let counts: Vec<usize> = if max < 4096 {
        let mut c = vec![0usize; max + 1];
        for &s in symbols {
            c[s as usize] += 1;
        }
        c
    } else {
        let mut sorted = symbols.to_vec();
        sorted.sort_unstable();
        sorted.chunk_by(|a, b| a == b).map(<[u32]>::len).collect()
    };
    let total = symbols.len() as f64;
    Ok(counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

fn discretize_channel(values: &[f64], bins: usize, out: &mut Vec<u32>) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        out.extend(std::iter::repeat_n(0, values.len()));
        return;
    }
    let top = (bins - 1) as f64;
    out.extend(values.iter().map(|&v| (bins as f64 * (v - lo) / range).floor().clamp(0.0, top) as u32));
}

/// Min-max histogram symbols per channel, channel streams concatenated.
pub fn discretize(segment: &Segment, bins: usize) -> Result<Vec<u32>> {
    if bins < 2 {
        return arg_err(format!("bins must be at least 2, got {bins}"));
    }
    let mut out = Vec::with_capacity(segment.values.len() * segment.width());
    for ch in &segment.values {
        discretize_channel(ch, bins, &mut out);
    }
    Ok(out)
}

/// Mean segment entropy over all windows of width `w` with step `step`,
/// together with the number of windows.
pub fn average_entropy(channels: &[Vec<f64>], w: usize, step: usize, bins: usize) -> Result<(f64, usize)> {
    let segs = segment(channels, w, step)?;
    let mut total = 0.0;
    for s in &segs {
        total += shannon_entropy(&discretize(s, bins)?)?;
    }
    Ok((total / segs.len() as f64, segs.len()))
}

/// `h_bar / ln(w)`.
pub fn normalized_entropy(h_bar: f64, w: usize) -> Result<f64> {
    if w < 2 {
        return arg_err(format!("normalized entropy undefined for w = {w}"));
    }
    Ok(h_bar / (w as f64).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub w: usize,
    pub step: usize,
    pub h_bar: f64,
    pub h_norm: f64,
    pub segments: usize,
}

/// Full result of an entropy scan over candidate window widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScan {
    pub candidates: Vec<usize>,
    pub bins: usize,
    pub per_size: Vec<WindowScore>,
    pub best: usize,
}

impl WindowScan {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("w,H_bar,H_norm,n\n");
        for r in &self.per_size {
            writeln!(s, "{},{:.12},{:.12},{}", r.w, r.h_bar, r.h_norm, r.segments).unwrap();
        }
        s
    }
}

/// Scores every candidate width over one or more series and returns the
/// argmax of the normalized entropy (ties go to the smaller width).
///
/// With several series the average is taken over all of their segments pooled.
pub fn optimal_window_multi(
    series: &[&[Vec<f64>]],
    candidates: &[usize],
    step: StepRule,
    bins: usize,
) -> Result<(usize, WindowScan)> {
    if candidates.is_empty() {
        return arg_err("empty window candidate set");
    }
    if series.is_empty() {
        return arg_err("no series to scan");
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut per_size = Vec::with_capacity(sorted.len());
    for &w in &sorted {
        let s = step.step_for(w);
        let mut sum = 0.0;
        let mut count = 0usize;
        for ch in series {
            let (h, n) = average_entropy(ch, w, s, bins)?;
            sum += h * n as f64;
            count += n;
        }
        let h_bar = sum / count as f64;
        per_size.push(WindowScore { w, step: s, h_bar, h_norm: normalized_entropy(h_bar, w)?, segments: count });
    }
    let mut best = &per_size[0];
    for r in &per_size[1..] {
        if r.h_norm > best.h_norm {
            best = r;
        }
    }
    let best = best.w;
    Ok((best, WindowScan { candidates: sorted, bins, per_size, best }))
}

pub fn optimal_window(
    channels: &[Vec<f64>],
    candidates: &[usize],
    step: StepRule,
    bins: usize,
) -> Result<(usize, WindowScan)> {
    optimal_window_multi(&[channels], candidates, step, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent tally: count each distinct symbol by linear search.
    fn oracle_entropy(xs: &[u32]) -> f64 {
        let mut seen: Vec<(u32, usize)> = Vec::new();
        for &x in xs {
            match seen.iter_mut().find(|(s, _)| *s == x) {
                Some(e) => e.1 += 1,
                None => seen.push((x, 1)),
            }
        }
        let n = xs.len() as f64;
        seen.iter().map(|&(_, c)| -(c as f64 / n) * (c as f64 / n).ln()).sum()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[5, 5, 5, 5]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0, 1, 0, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let h = shannon_entropy(&[0, 0, 0, 1]).unwrap();
        assert!((h - 0.562335144618808).abs() < 1e-12);
        assert!((h - oracle_entropy(&[0, 0, 0, 1])).abs() < 1e-15);
        assert!(shannon_entropy(&[]).is_err());
        assert!((shannon_entropy(&[1, 70_000, 1, 70_000]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discretize_examples() {
        let seg = |v: Vec<f64>| Segment { values: vec![v], start_index: 0 };
        assert_eq!(discretize(&seg(vec![3.0; 5]), 7).unwrap(), vec![0; 5]);
        assert_eq!(discretize(&seg(vec![0.0, 0.5, 1.0]), 2).unwrap(), vec![0, 1, 1]);
        let v = lcg(3, 40);
        let got = discretize(&seg(v.clone()), 16).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (x, s) in v.iter().zip(&got) {
            let expect = ((16.0 * (x - lo) / (hi - lo)).floor() as i64).clamp(0, 15) as u32;
            assert_eq!(*s, expect);
        }
        let two = Segment { values: vec![vec![0.0, 1.0], vec![5.0, 5.0]], start_index: 0 };
        assert_eq!(discretize(&two, 4).unwrap(), vec![0, 3, 0, 0]);
        assert!(discretize(&seg(vec![1.0, 2.0]), 1).is_err());
    }

    #[test]
    fn average_entropy_cases() {
        let flat = vec![vec![2.0; 50]];
        assert_eq!(average_entropy(&flat, 10, 5, 16).unwrap(), (0.0, 9));
        let v = vec![lcg(9, 64)];
        let (h, n) = average_entropy(&v, 64, 3, 16).unwrap();
        assert_eq!(n, 1);
        let single = discretize(&Segment { values: v.clone(), start_index: 0 }, 16).unwrap();
        assert_eq!(h, shannon_entropy(&single).unwrap());

        // Brute force: enumerate windows by hand.
        let (h, n) = average_entropy(&v, 16, 8, 16).unwrap();
        let mut starts = vec![];
        let mut i = 0;
        while i + 16 <= 64 {
            starts.push(i);
            i += 8;
        }
        assert_eq!(n, starts.len());
        let mean: f64 = starts
            .iter()
            .map(|&s| {
                let seg = Segment { values: vec![v[0][s..s + 16].to_vec()], start_index: s };
                oracle_entropy(&discretize(&seg, 16).unwrap())
            })
            .sum::<f64>()
            / starts.len() as f64;
        assert!((h - mean).abs() < 1e-12);
        assert!(matches!(average_entropy(&v, 65, 1, 16), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_entropy(0.0, 7).unwrap(), 0.0);
        assert_eq!(normalized_entropy(std::f64::consts::LN_2, 2).unwrap(), 1.0);
        assert!((normalized_entropy(0.9, 30).unwrap() - 0.264_612_693_415_685).abs() < 1e-12);
        assert!(normalized_entropy(1.0, 1).is_err());
    }

    #[test]
    fn optimal_window_cases() {
        let flat = vec![vec![1.0; 300]];
        let (w, scan) = optimal_window(&flat, &[30, 10, 20], StepRule::HalfWindow, 16).unwrap();
        assert_eq!(w, 10);
        assert!(scan.per_size.iter().all(|r| r.h_norm == 0.0));
        assert!(optimal_window(&flat, &[], StepRule::HalfWindow, 16).is_err());

        let v = vec![lcg(11, 200)];
        let (w, scan) = optimal_window(&v, &[8, 16, 32], StepRule::Fixed(4), 16).unwrap();
        let scores: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&w| {
                let (h, _) = average_entropy(&v, w, 4, 16).unwrap();
                h / (w as f64).ln()
            })
            .collect();
        for (r, s) in scan.per_size.iter().zip(&scores) {
            assert_eq!(r.h_norm, *s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expect = [8usize, 16, 32][scores.iter().position(|&s| s == max).unwrap()];
        assert_eq!(w, expect);
        assert!(scan.to_csv().starts_with("w,H_bar,H_norm,n\n8,"));
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_permutation_invariant(xs in proptest::collection::vec(-50.0f64..50.0, 2..80), bins in 2usize..32) {
            let seg = Segment { values: vec![xs.clone()], start_index: 0 };
            let sym = discretize(&seg, bins).unwrap();
            let h = shannon_entropy(&sym).unwrap();
            prop_assert!(h >= 0.0 && h <= (bins as f64).ln() + 1e-12);
            let mut rev = sym.clone();
            rev.reverse();
            rev.rotate_left(sym.len() / 3);
            prop_assert!((shannon_entropy(&rev).unwrap() - h).abs() < 1e-12);
        }

        #[test]
        fn affine_rescale_keeps_window(seed in any::<u64>(), a in 0.1f64..20.0, b in -10.0f64..10.0) {
            let v = vec![lcg(seed, 240)];
            let scaled = vec![v[0].iter().map(|x| a * x + b).collect::<Vec<_>>()];
            let (w1, _) = optimal_window(&v, &DEFAULT_WINDOWS, StepRule::HalfWindow, 16).unwrap();
            let (w2, _) = optimal_window(&scaled, &DEFAULT_WINDOWS, StepRule::HalfWindow, 16).unwrap();
            prop_assert_eq!(w1, w2);
        }
    }
}

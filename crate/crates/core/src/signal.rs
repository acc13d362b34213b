//! Raw recordings, dataset manifests and stride-based sample slicing.
//!
//! # Recording file layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                                    |
//! |--------|------|------------------------------------------|
//! | 0      | 4    | magic `TSG1`                             |
//! | 4      | 4    | channel count (u32)                      |
//! | 8      | 8    | frame count (u64)                        |
//! | 16     | 4    | sample rate in Hz (u32)                  |
//! | 20     | ...  | frames, channel-interleaved binary32     |
//!
//! CSV files (one column per channel, one header row) are accepted as well.
//!
//! # Synthetic data
//!
//! [`generate_synthetic_dataset`] stands in for the bearing corpus. Class `c`
//! is a sinusoid at `BASE_FREQ_HZ + c * FREQ_GAP_HZ` plus a train of
//! exponentially decaying resonance bursts with amplitude `c * IMPULSE_STEP`
//! (class 0 has none), plus white Gaussian noise of standard deviation
//! `NOISE_STD`. Phase, burst jitter and noise are drawn from a ChaCha8 stream
//! seeded per run, so the output is bit-identical for a fixed seed.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub const RECORDING_MAGIC: &[u8; 4] = b"TSG1";
const HEADER_LEN: usize = 20;

/// Sampling rate of the synthetic generator.
pub const SYNTH_SAMPLE_RATE_HZ: f64 = 12_000.0;
/// Dominant frequency of class 0.
pub const BASE_FREQ_HZ: f64 = 500.0;
/// Gap in dominant frequency between consecutive classes.
pub const FREQ_GAP_HZ: f64 = 400.0;
/// Burst amplitude added per class index.
pub const IMPULSE_STEP: f64 = 0.6;
/// Interval between bursts, in samples.
pub const IMPULSE_PERIOD: usize = 97;
pub const NOISE_STD: f64 = 0.2;

/// A multi-channel raw time series with a file-level class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecording {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub label: usize,
    pub source_id: String,
}

impl SignalRecording {
    pub fn new(
        channels: Vec<Vec<f64>>,
        sample_rate_hz: f64,
        label: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let Some(first) = channels.first() else {
            return arg_err("recording needs at least one channel");
        };
        let n = first.len();
        if n == 0 {
            return arg_err("recording channels must be non-empty");
        }
        if channels.iter().any(|c| c.len() != n) {
            return arg_err("recording channels have different lengths");
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return arg_err(format!("sample rate must be positive, got {sample_rate_hz}"));
        }
        check_finite(&channels)?;
        Ok(Self { channels, sample_rate_hz, label, source_id: source_id.into() })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Keeps only the listed channels, in the listed order.
    pub fn select_channels(mut self, which: &[usize]) -> Result<Self> {
        if which.is_empty() {
            return arg_err("channel selection is empty");
        }
        let mut picked = Vec::with_capacity(which.len());
        for &c in which {
            match self.channels.get(c) {
                Some(ch) => picked.push(ch.clone()),
                None => {
                    return arg_err(format!(
                        "channel {c} requested but {} has {} channels",
                        self.source_id,
                        self.channels.len()
                    ))
                }
            }
        }
        self.channels = picked;
        Ok(self)
    }
}

fn check_finite(channels: &[Vec<f64>]) -> Result<()> {
    let n = channels.first().map_or(0, Vec::len);
    for frame in 0..n {
        for (channel, ch) in channels.iter().enumerate() {
            if !ch[frame].is_finite() {
                return Err(Error::Data { frame, channel });
            }
        }
    }
    Ok(())
}

/// A fixed-length labeled slice of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// channels x L
    pub data: Vec<Vec<f64>>,
    pub label: usize,
    pub source_id: String,
    pub start_index: usize,
}

impl LabeledSample {
    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One recording listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    /// Channel names in file order, informational.
    #[serde(default)]
    pub channel_layout: Vec<String>,
    /// Channels to keep. Absent means the first channel only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    pub label: usize,
    pub sample_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_count: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        if self.class_count < 2 {
            return arg_err("manifest class_count must be at least 2");
        }
        for e in &self.entries {
            if e.label >= self.class_count {
                return arg_err(format!(
                    "entry {} has label {} outside 0..{}",
                    e.path.display(),
                    e.label,
                    self.class_count
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads every entry, resolving relative paths against `base_dir` and
    /// applying each entry's channel selection.
    pub fn load_recordings(&self, base_dir: &Path) -> Result<Vec<SignalRecording>> {
        self.entries
            .iter()
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { base_dir.join(&e.path) };
                let rec = load_recording(&path, e)?;
                let which = e.channels.clone().unwrap_or_else(|| vec![0]);
                rec.select_channels(&which)
            })
            .collect()
    }
}

/// Reads a recording from a `TSG1` binary file or a CSV file (by extension).
pub fn load_recording(path: &Path, entry: &ManifestEntry) -> Result<SignalRecording> {
    let source_id = path.display().to_string();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let channels = read_csv_channels(fs::File::open(path)?)?;
        return SignalRecording::new(channels, entry.sample_rate_hz, entry.label, source_id);
    }
    let bytes = fs::read(path)?;
    let (channels, rate) = decode_recording(&bytes)?;
    // Header rate wins unless it is zero (unknown).
    let rate = if rate > 0 { f64::from(rate) } else { entry.sample_rate_hz };
    SignalRecording::new(channels, rate, entry.label, source_id)
}

/// Decodes the binary layout into per-channel vectors and the header rate.
pub fn decode_recording(bytes: &[u8]) -> Result<(Vec<Vec<f64>>, u32)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != RECORDING_MAGIC {
        return Err(Error::Format("bad magic, expected TSG1".into()));
    }
    let n_channels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let frames = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rate = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if n_channels == 0 {
        return Err(Error::Format("channel count is zero".into()));
    }
    if frames == 0 {
        return Err(Error::Format("frame count is zero".into()));
    }
    let expected = (frames as u128) * (n_channels as u128) * 4;
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u128) < expected {
        return Err(Error::Format(format!(
            "payload truncated: header declares {expected} bytes, found {}",
            payload.len()
        )));
    }
    if (payload.len() as u128) > expected {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let frames = frames as usize;
    let mut channels = vec![Vec::with_capacity(frames); n_channels];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let (frame, channel) = (i / n_channels, i % n_channels);
        if !v.is_finite() {
            return Err(Error::Data { frame, channel });
        }
        channels[channel].push(f64::from(v));
    }
    Ok((channels, rate))
}

pub fn encode_recording(rec: &SignalRecording) -> Vec<u8> {
    let n = rec.len();
    let c = rec.channel_count();
    let mut out = Vec::with_capacity(HEADER_LEN + n * c * 4);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(rec.sample_rate_hz.round() as u32).to_le_bytes());
    for frame in 0..n {
        for ch in &rec.channels {
            out.extend_from_slice(&(ch[frame] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_recording(path: &Path, rec: &SignalRecording) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_recording(rec))?;
    Ok(())
}

fn read_csv_channels<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines.next().ok_or_else(|| Error::Format("CSV is empty".into()))??;
    let width = header.split(',').count();
    let mut channels = vec![Vec::new(); width];
    for (frame, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Format(format!(
                "CSV row {} has {} fields, header has {width}",
                frame + 1,
                fields.len()
            )));
        }
        for (channel, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("CSV row {}: cannot parse {field:?}", frame + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data { frame, channel });
            }
            channels[channel].push(v);
        }
    }
    if channels[0].is_empty() {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    Ok(channels)
}

/// Number of windows of length `len` taken every `stride` points from `n`.
pub fn window_count(n: usize, len: usize, stride: usize) -> usize {
    if len == 0 || stride == 0 || len > n {
        0
    } else {
        (n - len) / stride + 1
    }
}

/// Slices a recording into overlapping labeled samples starting at `k * stride`.
pub fn make_samples(rec: &SignalRecording, sample_len: usize, stride: usize) -> Result<Vec<LabeledSample>> {
    if sample_len == 0 || stride == 0 {
        return arg_err("sample length and stride must be positive");
    }
    let n = rec.len();
    if sample_len > n {
        return Err(Error::InsufficientData { needed: sample_len, available: n });
    }
    let count = window_count(n, sample_len, stride);
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            LabeledSample {
                data: rec.channels.iter().map(|c| c[start..start + sample_len].to_vec()).collect(),
                label: rec.label,
                source_id: rec.source_id.clone(),
                start_index: start,
            }
        })
        .collect())
}

/// Deterministic stand-in dataset; see the module docs for the signal model.
pub fn generate_synthetic_dataset(
    class_count: usize,
    per_class: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<SignalRecording>> {
    if class_count < 2 {
        return arg_err("synthetic dataset needs at least 2 classes");
    }
    if length == 0 {
        return arg_err("synthetic recordings need positive length");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let dt = 1.0 / SYNTH_SAMPLE_RATE_HZ;
    let mut out = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        let freq = BASE_FREQ_HZ + class as f64 * FREQ_GAP_HZ;
        let amp = class as f64 * IMPULSE_STEP;
        for idx in 0..per_class {
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let offset = rng.random_range(0..IMPULSE_PERIOD);
            let mut x: Vec<f64> = (0..length)
                .map(|t| (std::f64::consts::TAU * freq * t as f64 * dt + phase).sin())
                .collect();
            if amp > 0.0 {
                let mut start = offset;
                while start < length {
                    for k in 0..(IMPULSE_PERIOD / 2).min(length - start) {
                        let decay = (-(k as f64) / 6.0).exp();
                        x[start + k] += amp * decay * (std::f64::consts::TAU * 0.25 * k as f64).cos();
                    }
                    start += IMPULSE_PERIOD;
                }
            }
            for v in &mut x {
                *v += noise.sample(&mut rng);
            }
            out.push(SignalRecording {
                channels: vec![x],
                sample_rate_hz: SYNTH_SAMPLE_RATE_HZ,
                label: class,
                source_id: format!("synthetic/c{class}/{idx}"),
            });
        }
    }
    Ok(out)
}

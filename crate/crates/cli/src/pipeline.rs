//! Dataset loading and the recordings -> graphs -> cross-validation chain.

use std::path::{Path, PathBuf};
use std::time::Instant;

use atg_core::entropy::{optimal_window_multi, WindowScan};
use atg_core::eval::{cross_validate_threaded, kfold_plan, train_model, CvResult};
use atg_core::graph::{sample_to_graph, SimilarityGraph};
use atg_core::nn::{GraphInput, ModelConfig, ModelParams};
use atg_core::signal::{generate_synthetic_dataset, make_samples, DatasetManifest, LabeledSample, SignalRecording};
use atg_core::{Error, Result};

use crate::config::RunConfig;

/// Where recordings come from: a manifest file or the built-in generator.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `synthetic` or `synthetic:<seed>`
    Synthetic { seed: Option<u64> },
    Manifest(PathBuf),
}

impl DataSource {
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.strip_prefix("synthetic") {
            Some("") => Ok(Self::Synthetic { seed: None }),
            Some(rest) => match rest.strip_prefix(':').and_then(|s| s.parse().ok()) {
                Some(seed) => Ok(Self::Synthetic { seed: Some(seed) }),
                None => Err(Error::Config(format!("bad synthetic data spec `{spec}`, expected synthetic[:seed]"))),
            },
            None => Ok(Self::Manifest(PathBuf::from(spec))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub recordings: Vec<SignalRecording>,
    pub classes: usize,
}

pub fn load_dataset(source: &DataSource, cfg: &RunConfig) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { seed } => Ok(Dataset {
            recordings: generate_synthetic_dataset(
                cfg.synthetic_classes,
                cfg.synthetic_per_class,
                cfg.sample_len,
                seed.unwrap_or(cfg.synthetic_seed),
            )?,
            classes: cfg.synthetic_classes,
        }),
        DataSource::Manifest(path) => {
            let manifest = DatasetManifest::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            Ok(Dataset { recordings: manifest.load_recordings(base)?, classes: manifest.class_count })
        }
    }
}

/// Entropy scan over the first `scan_recordings` recordings.
pub fn scan_window(ds: &Dataset, cfg: &RunConfig) -> Result<WindowScan> {
    let series: Vec<&[Vec<f64>]> =
        ds.recordings.iter().take(cfg.scan_recordings).map(|r| r.channels.as_slice()).collect();
    if series.is_empty() {
        return Err(Error::Argument("dataset has no recordings".into()));
    }
    Ok(optimal_window_multi(&series, &cfg.windows, cfg.scan_step_rule(), cfg.bins)?.1)
}

/// The configured window, or the scan's choice.
pub fn resolve_window(ds: &Dataset, cfg: &RunConfig) -> Result<(usize, Option<WindowScan>)> {
    match cfg.window {
        Some(w) => Ok((w, None)),
        None => {
            let scan = scan_window(ds, cfg)?;
            Ok((scan.best, Some(scan)))
        }
    }
}

pub fn samples(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for r in &ds.recordings {
        out.extend(make_samples(r, cfg.sample_len, cfg.stride)?);
    }
    if out.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    Ok(out)
}

pub fn build_graphs(samples: &[LabeledSample], cfg: &RunConfig, window: usize) -> Result<Vec<SimilarityGraph>> {
    let spec = cfg.graph_spec(window);
    samples.iter().map(|s| sample_to_graph(s, &spec)).collect()
}

pub fn to_inputs(graphs: &[SimilarityGraph]) -> Result<Vec<GraphInput>> {
    graphs.iter().map(GraphInput::from_graph).collect()
}

/// Everything one `train` run produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub window: usize,
    pub scan: Option<WindowScan>,
    pub model_config: ModelConfig,
    pub sample_count: usize,
    pub cv: CvResult,
    pub final_model: Option<ModelParams>,
    pub prepare_s: f64,
    pub train_s: f64,
}

/// Scan, graph construction, K-fold cross-validation and (optionally) a
/// final fit on every sample.
pub fn run_experiment(ds: &Dataset, cfg: &RunConfig) -> Result<Experiment> {
    let start = Instant::now();
    let (window, scan) = resolve_window(ds, cfg)?;
    let samples = samples(ds, cfg)?;
    let graphs = build_graphs(&samples, cfg, window)?;
    let inputs = to_inputs(&graphs)?;
    let prepare_s = start.elapsed().as_secs_f64();
    log::info!("{} graphs at window {window} in {prepare_s:.2}s", inputs.len());

    let start = Instant::now();
    let model_config = cfg.model_config(graphs[0].feature_dim, ds.classes);
    model_config.validate()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let plan = kfold_plan(&labels, cfg.folds, cfg.stratified, cfg.seed)?;
    let tc = cfg.train_config();
    let cv = cross_validate_threaded(&model_config, &inputs, &plan, &tc, cfg.threads)?;
    let final_model = if cfg.final_fit {
        let all: Vec<usize> = (0..inputs.len()).collect();
        Some(train_model(&model_config, &inputs, &all, &tc)?.params)
    } else {
        None
    };
    Ok(Experiment {
        window,
        scan,
        model_config,
        sample_count: samples.len(),
        cv,
        final_model,
        prepare_s,
        train_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_specs() {
        assert_eq!(DataSource::parse("synthetic").unwrap(), DataSource::Synthetic { seed: None });
        assert_eq!(DataSource::parse("synthetic:9").unwrap(), DataSource::Synthetic { seed: Some(9) });
        assert!(DataSource::parse("synthetic:x").is_err());
        assert_eq!(DataSource::parse("a/m.json").unwrap(), DataSource::Manifest("a/m.json".into()));
    }

    #[test]
    fn synthetic_graph_counts() {
        let cfg = RunConfig { synthetic_per_class: 2, window: Some(32), ..Default::default() };
        let ds = load_dataset(&DataSource::Synthetic { seed: None }, &cfg).unwrap();
        assert_eq!(ds.recordings.len(), 6);
        let s = samples(&ds, &cfg).unwrap();
        assert_eq!(s.len(), 6);
        let g = build_graphs(&s[..1], &cfg, 32).unwrap();
        assert_eq!(g[0].n, 63);
    }
}

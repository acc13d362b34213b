//! One function per subcommand. Each writes its files under the output
//! directory and returns a short human summary for stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atg_core::eval::metrics::EvalReport;
use atg_core::eval::stats::{ks_two_sample, welch_t_test};
use atg_core::eval::{cross_eval, train_model};
use atg_core::nn::gradcheck::{check_gradients, default_check, seeded_graph};
use atg_core::nn::{ModelConfig, ModelParams};
use atg_core::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::pipeline::{self, DataSource, Dataset};

/// Gradient check passes below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Context {
    pub cfg: RunConfig,
    pub data: Option<String>,
    pub out: PathBuf,
}

impl Context {
    fn dataset(&self) -> Result<Dataset> {
        let spec = self.data.as_deref().ok_or_else(|| Error::Config("missing --data (path or `synthetic`)".into()))?;
        pipeline::load_dataset(&DataSource::parse(spec)?, &self.cfg)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON value");
    s.push('\n');
    s
}

/// Drops wall-clock fields so report files are reproducible byte for byte.
fn strip_runtime(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("runtime_s");
            m.values_mut().for_each(strip_runtime);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_runtime),
        _ => {}
    }
}

fn report_value(r: &EvalReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report JSON");
    strip_runtime(&mut v);
    v
}

fn write_report(ctx: &Context, prefix: &str, r: &EvalReport, extra: Value) -> Result<()> {
    let mut doc = json!({ "report": report_value(r) });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    ctx.write(&format!("{prefix}report.json"), pretty(&doc))?;
    ctx.write(&format!("{prefix}report.txt"), r.to_table())?;
    ctx.write(&format!("{prefix}per_class.csv"), r.per_class_csv())
}

pub fn scan(ctx: &Context) -> Result<String> {
    let ds = ctx.dataset()?;
    let scan = pipeline::scan_window(&ds, &ctx.cfg)?;
    fs::create_dir_all(&ctx.out)?;
    ctx.write("window_scan.csv", scan.to_csv())?;
    ctx.write("scan.json", pretty(&serde_json::to_value(&scan)?))?;
    Ok(format!("w* = {}", scan.best))
}

pub fn build_graph(ctx: &Context) -> Result<String> {
    let ds = ctx.dataset()?;
    let (window, scan) = pipeline::resolve_window(&ds, &ctx.cfg)?;
    let samples = pipeline::samples(&ds, &ctx.cfg)?;
    let graphs = pipeline::build_graphs(&samples, &ctx.cfg, window)?;
    fs::create_dir_all(ctx.path("graphs"))?;
    if let Some(s) = &scan {
        ctx.write("window_scan.csv", s.to_csv())?;
    }
    let mut files = Vec::with_capacity(graphs.len());
    for (i, g) in graphs.iter().enumerate() {
        let name = format!("graphs/sample_{i:05}.atg");
        ctx.write(&name, g.to_bytes())?;
        files.push(json!({
            "file": name,
            "source": samples[i].source_id,
            "start": samples[i].start_index,
            "label": g.label,
            "nodes": g.n,
            "edges": g.edges.len(),
            "tau": g.tau,
        }));
    }
    let edges: Vec<usize> = graphs.iter().map(|g| g.edges.len()).collect();
    let edgeless = edges.iter().filter(|&&e| e == 0).count();
    let mut warnings = Vec::new();
    if edgeless > 0 {
        warnings.push(format!("{edgeless} of {} graphs have no edges", graphs.len()));
    }
    let mean_edges = edges.iter().sum::<usize>() as f64 / edges.len() as f64;
    let summary = json!({
        "graphs": graphs.len(),
        "window": window,
        "step": ctx.cfg.graph_spec(window).step,
        "feature_dim": graphs[0].feature_dim,
        "nodes_min": graphs.iter().map(|g| g.n).min(),
        "nodes_max": graphs.iter().map(|g| g.n).max(),
        "edges_min": edges.iter().min(),
        "edges_max": edges.iter().max(),
        "edges_mean": mean_edges,
        "edgeless": edgeless,
        "warnings": warnings,
        "files": files,
    });
    ctx.write("graph_summary.json", pretty(&summary))?;
    let mut msg = format!("{} graphs (window {window}, mean {mean_edges:.1} edges)", graphs.len());
    for w in &warnings {
        write!(msg, "\nwarning: {w}").unwrap();
    }
    Ok(msg)
}

pub fn train(ctx: &Context) -> Result<String> {
    let start = Instant::now();
    let ds = ctx.dataset()?;
    let exp = pipeline::run_experiment(&ds, &ctx.cfg)?;
    fs::create_dir_all(&ctx.out)?;
    if let Some(s) = &exp.scan {
        ctx.write("window_scan.csv", s.to_csv())?;
    }
    ctx.write("loss.csv", exp.cv.loss_csv())?;
    let folds: Vec<Value> =
        exp.cv.folds.iter().map(|f| json!({ "fold": f.fold, "report": report_value(&f.report) })).collect();
    write_report(
        ctx,
        "",
        &exp.cv.aggregate,
        json!({
            "window": exp.window,
            "samples": exp.sample_count,
            "model": exp.model_config,
            "folds": folds,
        }),
    )?;
    let mut resolved = ctx.cfg.clone();
    resolved.window = Some(exp.window);
    ctx.write("run.json", pretty(&serde_json::to_value(&resolved)?))?;
    if let Some(m) = &exp.final_model {
        m.save(&ctx.path("model.atm"))?;
    }
    let timing = json!({
        "prepare_s": exp.prepare_s,
        "train_s": exp.train_s,
        "total_s": start.elapsed().as_secs_f64(),
        "folds_s": exp.cv.folds.iter().map(|f| f.report.runtime_s).collect::<Vec<_>>(),
    });
    ctx.write("timing.json", pretty(&timing))?;
    let a = &exp.cv.aggregate;
    Ok(format!(
        "window {} | {}-fold ACC {:.4} DR {:.4} FAR {}",
        exp.window,
        exp.cv.folds.len(),
        a.acc,
        a.dr,
        a.far_percent.map_or("n/a".into(), |f| format!("{f:.3}%"))
    ))
}

/// Loads a checkpoint and the graphs it applies to, validating everything
/// before any output is written.
fn model_and_graphs(ctx: &Context, model: &Path, data: &str) -> Result<(ModelParams, Vec<atg_core::nn::GraphInput>)> {
    let params = ModelParams::load(model, None)?;
    let ds = pipeline::load_dataset(&DataSource::parse(data)?, &ctx.cfg)?;
    let channels = ds.recordings.first().map_or(1, |r| r.channel_count());
    let window = match ctx.cfg.window {
        Some(w) => w,
        None => params.config.in_features / channels,
    };
    if window * channels != params.config.in_features {
        return Err(Error::Config(format!(
            "checkpoint expects {} features per node, data gives {} ({} channels x window {window})",
            params.config.in_features,
            window * channels,
            channels
        )));
    }
    if ds.classes != params.config.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset declares {}",
            params.config.classes, ds.classes
        )));
    }
    let samples = pipeline::samples(&ds, &ctx.cfg)?;
    let graphs = pipeline::build_graphs(&samples, &ctx.cfg, window)?;
    Ok((params, pipeline::to_inputs(&graphs)?))
}

pub fn eval(ctx: &Context, model: &Path) -> Result<String> {
    let data = ctx.data.clone().ok_or_else(|| Error::Config("missing --data".into()))?;
    let (params, graphs) = model_and_graphs(ctx, model, &data)?;
    let r = cross_eval(&params, &graphs)?;
    fs::create_dir_all(&ctx.out)?;
    write_report(ctx, "", &r, json!({ "model": model.display().to_string(), "data": data }))?;
    Ok(format!("ACC {:.4} on {} graphs", r.acc, graphs.len()))
}

/// Trains on `--data` (or takes `--model`) and evaluates on `target`.
pub fn cross_eval_cmd(ctx: &Context, target: &str, model: Option<&Path>) -> Result<String> {
    let source = ctx.data.clone().ok_or_else(|| Error::Config("missing --data".into()))?;
    let model_path = match model {
        Some(p) => p.to_path_buf(),
        None => {
            let ds = ctx.dataset()?;
            let (window, _) = pipeline::resolve_window(&ds, &ctx.cfg)?;
            let samples = pipeline::samples(&ds, &ctx.cfg)?;
            let inputs = pipeline::to_inputs(&pipeline::build_graphs(&samples, &ctx.cfg, window)?)?;
            let config = ctx.cfg.model_config(inputs[0].features.cols(), ds.classes);
            config.validate()?;
            let all: Vec<usize> = (0..inputs.len()).collect();
            let params = train_model(&config, &inputs, &all, &ctx.cfg.train_config())?.params;
            fs::create_dir_all(&ctx.out)?;
            let p = ctx.path("model.atm");
            params.save(&p)?;
            p
        }
    };
    let (params, source_graphs) = model_and_graphs(ctx, &model_path, &source)?;
    let (_, target_graphs) = model_and_graphs(ctx, &model_path, target)?;
    let in_domain = cross_eval(&params, &source_graphs)?;
    let transfer = cross_eval(&params, &target_graphs)?;
    fs::create_dir_all(&ctx.out)?;
    write_report(
        ctx,
        "",
        &transfer,
        json!({ "source": source, "target": target, "source_report": report_value(&in_domain) }),
    )?;
    Ok(format!("source ACC {:.4} | target ACC {:.4}", in_domain.acc, transfer.acc))
}

fn pooled_values(ds: &Dataset) -> Vec<f64> {
    ds.recordings.iter().flat_map(|r| r.channels[0].iter().copied()).collect()
}

pub fn stats(ctx: &Context, target: &str) -> Result<String> {
    let a = ctx.dataset()?;
    let b = pipeline::load_dataset(&DataSource::parse(target)?, &ctx.cfg)?;
    let (x, y) = (pooled_values(&a), pooled_values(&b));
    let welch = welch_t_test(&x, &y)?;
    let ks = ks_two_sample(&x, &y)?;
    let doc = json!({
        "n_x": x.len(),
        "n_y": y.len(),
        "welch": welch,
        "ks": ks,
    });
    fs::create_dir_all(&ctx.out)?;
    ctx.write("stats.json", pretty(&doc))?;
    Ok(format!(
        "Welch t = {:.6} (df {:.1}, p = {:.6e}) | KS D = {:.6} (p = {:.6e})",
        welch.t, welch.df, welch.p_value, ks.statistic, ks.p_value
    ))
}

/// Runs the finite-difference suite; `Ok(false)` when the tolerance is missed.
pub fn grad_check(ctx: &Context, eps: f64, small: bool) -> Result<(bool, String)> {
    let report = if small {
        let mut c = ModelConfig::new(3, 3);
        c.heads = 2;
        c.hidden_per_head = 3;
        c.pooled_dim = 4;
        c.seq_len = 2;
        c.lstm_hidden = 3;
        let p = ModelParams::init(c, ctx.cfg.seed)?;
        check_gradients(&p, &seeded_graph(3, 1, ctx.cfg.seed), eps)?
    } else {
        default_check(ctx.cfg.seed, eps)?
    };
    fs::create_dir_all(&ctx.out)?;
    ctx.write("grad_check.json", pretty(&serde_json::to_value(&report)?))?;
    let ok = report.max_rel_err < GRAD_TOLERANCE;
    let rel = if ok { "<" } else { ">=" };
    Ok((ok, format!("{} parameters, max rel err {:.3e} {rel} {GRAD_TOLERANCE:e}", report.checked, report.max_rel_err)))
}

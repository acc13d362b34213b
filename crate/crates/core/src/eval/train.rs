//! Mini-batch Adam training, K-fold cross-validation and transfer evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::eval::folds::FoldPlan;
use crate::eval::metrics::{Averages, ClassMetrics, ConfusionMatrix, EvalReport};
use crate::nn::model::{loss_and_grads, predict_log_probs, DropoutRng, GraphInput, ModelConfig, ModelParams};
use crate::nn::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// graphs per optimizer step; gradients are averaged over the batch
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 16, adam: AdamConfig::default(), dropout: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// mean training loss per epoch
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh model on `graphs[train_idx]`.
pub fn train_model(
    config: &ModelConfig,
    graphs: &[GraphInput],
    train_idx: &[usize],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_idx.is_empty() {
        return arg_err("no training graphs");
    }
    if tc.batch_size == 0 {
        return arg_err("batch size must be positive");
    }
    check_compatible(config, graphs.iter().map(|g| (g.features.cols(), g.label)))?;
    let mut params = ModelParams::init(config.clone(), tc.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_0dd5);
    let mut order = train_idx.to_vec();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let dropout = (tc.dropout > 0.0).then(|| DropoutRng { rate: tc.dropout, rng: &mut rng });
                let (loss, grads) = loss_and_grads(&params, &graphs[i], dropout).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, graph {i}: {m}")),
                    other => other,
                })?;
                total += loss;
                for (slot, t) in params.tensors_mut().into_iter().enumerate() {
                    if let Some(g) = grads.get(slot) {
                        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                        t.accumulate_grad(&scaled);
                    }
                }
            }
            adam_step(&mut params, &mut state, &tc.adam)?;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() || !params.all_finite() {
            return Err(Error::Numerical(format!("training diverged at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

fn check_compatible(config: &ModelConfig, graphs: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    for (features, label) in graphs {
        if features != config.in_features {
            return Err(Error::Config(format!(
                "graphs have {features} features per node, model expects {}",
                config.in_features
            )));
        }
        if label >= config.classes {
            return Err(Error::Config(format!("label {label} outside the model's {} classes", config.classes)));
        }
    }
    Ok(())
}

/// Inference-only report over `graphs[idx]`.
pub fn evaluate(params: &ModelParams, graphs: &[GraphInput], idx: &[usize]) -> Result<EvalReport> {
    let start = Instant::now();
    check_compatible(&params.config, idx.iter().map(|&i| (graphs[i].features.cols(), graphs[i].label)))?;
    let mut logp = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    for &i in idx {
        logp.push(predict_log_probs(params, &graphs[i])?);
        truth.push(graphs[i].label);
    }
    EvalReport::from_predictions(&logp, &truth, params.config.classes, start.elapsed().as_secs_f64())
}

/// Applies a trained model to another dataset without touching its parameters.
pub fn cross_eval(params: &ModelParams, graphs: &[GraphInput]) -> Result<EvalReport> {
    if graphs.is_empty() {
        return arg_err("no graphs to evaluate");
    }
    let idx: Vec<usize> = (0..graphs.len()).collect();
    evaluate(params, graphs, &idx)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub aggregate: EvalReport,
}

impl CvResult {
    /// `fold,epoch,loss` for every fold and epoch.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("fold,epoch,loss\n");
        for f in &self.folds {
            for (e, l) in f.epoch_losses.iter().enumerate() {
                writeln!(s, "{},{},{:.12}", f.fold, e, l).unwrap();
            }
        }
        s
    }
}

/// Trains one model per fold and evaluates it on the held-out fold. Each
/// fold's initialization and shuffling derive from `tc.seed` and the fold id.
pub fn cross_validate(
    config: &ModelConfig,
    graphs: &[GraphInput],
    plan: &FoldPlan,
    tc: &TrainConfig,
) -> Result<CvResult> {
    cross_validate_threaded(config, graphs, plan, tc, 1)
}

/// As [`cross_validate`], with folds spread over up to `threads` workers.
/// Results do not depend on the thread count.
pub fn cross_validate_threaded(
    config: &ModelConfig,
    graphs: &[GraphInput],
    plan: &FoldPlan,
    tc: &TrainConfig,
    threads: usize,
) -> Result<CvResult> {
    if graphs.len() != plan.assignments.len() {
        return arg_err(format!("fold plan covers {} samples, got {} graphs", plan.assignments.len(), graphs.len()));
    }
    let run_fold = |fold: usize| -> Result<Option<FoldResult>> {
        let test = plan.test_indices(fold);
        if test.is_empty() {
            log::warn!("fold {fold} has no test samples; skipped");
            return Ok(None);
        }
        let fold_tc = TrainConfig { seed: tc.seed.wrapping_add(fold as u64), ..*tc };
        let start = Instant::now();
        let outcome = train_model(config, graphs, &plan.train_indices(fold), &fold_tc)?;
        let mut report = evaluate(&outcome.params, graphs, &test)?;
        report.runtime_s = start.elapsed().as_secs_f64();
        log::info!("fold {fold}: acc {:.4}", report.acc);
        Ok(Some(FoldResult { fold, params: outcome.params, epoch_losses: outcome.epoch_losses, report }))
    };
    let workers = threads.clamp(1, plan.k);
    let results: Vec<Result<Option<FoldResult>>> = if workers == 1 {
        (0..plan.k).map(run_fold).collect()
    } else {
        let mut slots: Vec<Option<Result<Option<FoldResult>>>> = (0..plan.k).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_fold = &run_fold;
                    s.spawn(move || (w..plan.k).step_by(workers).map(|f| (f, run_fold(f))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (f, r) in h.join().expect("fold worker panicked") {
                    slots[f] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every fold ran")).collect()
    };
    let mut folds = Vec::with_capacity(plan.k);
    for r in results {
        if let Some(f) = r? {
            folds.push(f);
        }
    }
    let reports: Vec<&EvalReport> = folds.iter().map(|f| &f.report).collect();
    let aggregate = aggregate_reports(&reports)?;
    Ok(CvResult { folds, aggregate })
}

/// Averages fold metrics; the confusion matrix is pooled over folds.
pub fn aggregate_reports(reports: &[&EvalReport]) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return arg_err("no reports to aggregate");
    };
    let classes = first.confusion.classes;
    let mut confusion = ConfusionMatrix::zeros(classes);
    for r in reports {
        confusion.add(&r.confusion)?;
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let per_class = (0..classes)
        .map(|c| ClassMetrics {
            class: c,
            precision: mean(&|r| r.per_class[c].precision),
            recall: mean(&|r| r.per_class[c].recall),
            f1: mean(&|r| r.per_class[c].f1),
            support: confusion.support(c),
        })
        .collect();
    let macro_avg = Averages {
        precision: mean(&|r| r.macro_avg.precision),
        recall: mean(&|r| r.macro_avg.recall),
        f1: mean(&|r| r.macro_avg.f1),
    };
    let acc = mean(&|r| r.acc);
    let far = mean_opt(&|r| r.far);
    Ok(EvalReport {
        confusion,
        per_class,
        macro_avg,
        micro_avg: Averages { precision: acc, recall: acc, f1: acc },
        acc,
        dr: mean(&|r| r.dr),
        far,
        far_percent: far.map(|f| f * 100.0),
        auc_macro: mean_opt(&|r| r.auc_macro),
        runtime_s: reports.iter().map(|r| r.runtime_s).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::folds::kfold_plan;
    use crate::nn::tensor::Tensor;
    use rand::Rng;

    // Two easily separable classes on 6-node rings.
    fn toy(count: usize, seed: u64) -> Vec<GraphInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj: Vec<Vec<usize>> = (0..6).map(|i| vec![(i + 1) % 6, (i + 5) % 6]).collect();
        (0..count)
            .map(|k| {
                let label = k % 2;
                let shift = if label == 0 { -1.0 } else { 1.0 };
                let vals = (0..6 * 4).map(|_| shift + rng.random_range(-0.3..0.3)).collect();
                GraphInput::new(Tensor::from_vec(6, 4, vals).unwrap(), &adj, label).unwrap()
            })
            .collect()
    }

    fn small(classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(4, classes);
        c.heads = 2;
        c.hidden_per_head = 4;
        c.pooled_dim = 8;
        c.seq_len = 2;
        c.lstm_hidden = 6;
        c
    }

    #[test]
    fn learns_toy_problem_and_is_deterministic() {
        let g = toy(20, 1);
        let tc = TrainConfig { epochs: 40, batch_size: 4, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
        let plan = kfold_plan(&g.iter().map(|x| x.label).collect::<Vec<_>>(), 2, true, 0).unwrap();
        let a = cross_validate(&small(2), &g, &plan, &tc).unwrap();
        assert!(a.aggregate.acc >= 0.9, "{}", a.aggregate.to_table());
        let losses = &a.folds[0].epoch_losses;
        assert!(losses.last().unwrap() < &losses[0]);
        let b = cross_validate_threaded(&small(2), &g, &plan, &tc, 2).unwrap();
        assert_eq!(a.loss_csv(), b.loss_csv());
        assert_eq!(a.folds[1].params, b.folds[1].params);
    }

    #[test]
    fn zero_epochs_is_untrained() {
        let g = toy(10, 2);
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let out = train_model(&small(2), &g, &[0, 1, 2], &tc).unwrap();
        assert!(out.epoch_losses.is_empty());
        assert_eq!(out.params, ModelParams::init(small(2), 0).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let g = toy(4, 3);
        let p = ModelParams::init(ModelConfig::new(5, 2), 0).unwrap();
        assert!(matches!(cross_eval(&p, &g), Err(Error::Config(_))));
        let narrow = ModelParams::init(small(1), 0);
        if let Ok(p) = narrow {
            assert!(matches!(cross_eval(&p, &g), Err(Error::Config(_))));
        }
    }

    #[test]
    fn aggregate_pools_confusion() {
        let r1 = EvalReport::from_confusion(ConfusionMatrix::from_counts(vec![vec![2, 0], vec![0, 2]]).unwrap(), None, 1.0);
        let r2 = EvalReport::from_confusion(ConfusionMatrix::from_counts(vec![vec![1, 1], vec![0, 2]]).unwrap(), None, 2.0);
        let a = aggregate_reports(&[&r1, &r2]).unwrap();
        assert_eq!(a.confusion.counts, vec![vec![3, 1], vec![0, 4]]);
        assert_eq!(a.acc, (1.0 + 0.75) / 2.0);
        assert_eq!(a.far, Some(0.25));
        assert_eq!(a.runtime_s, 3.0);
    }
}

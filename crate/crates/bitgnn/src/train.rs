//! Losses, optimizer, the training loop and metric logging.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ModelConfig, TaskKind};
use crate::data::{Dataset, Split};
use crate::graph::{batch, GraphBatch};
use crate::matrix::Matrix;
use crate::meta::GumbelSampler;
use crate::model::{BinGnnModel, Mode};
use crate::tape::{Tape, Var};
use crate::{cast, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset split {0:?} is empty")]
    EmptySplit(Split),
    #[error("dataset is missing targets required for training")]
    MissingTargets,
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("tape error: {0}")]
    Tape(#[from] crate::tape::TapeError),
}

/// Mean absolute error over all entries.
pub fn mae_loss<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>) -> Var<'t, F> {
    assert_eq!(pred.shape(), target.shape(), "MAE shape mismatch");
    pred.sub(target).abs().mean_all()
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy_loss<'t, F: Scalar>(logits: Var<'t, F>, classes: &[usize]) -> Var<'t, F> {
    let (rows, cols) = logits.shape();
    assert_eq!(rows, classes.len(), "one class per row");
    assert!(classes.iter().all(|&c| c < cols), "class out of range");
    logits
        .log_softmax()
        .gather_cols(Arc::new(classes.to_vec()))
        .mean_all()
        .neg()
}

/// Adam with bias-corrected moments, applied to the latent parameters.
pub struct Adam<F: Scalar> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: usize,
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr: cast::<F>(lr),
            beta1: cast::<F>(0.9),
            beta2: cast::<F>(0.999),
            eps: cast::<F>(1e-8),
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over all parameters; `grads[i]` pairs with
    /// `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Matrix<F>], grads: &[&Matrix<F>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state shape mismatch");
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = F::one() - self.beta1.powi(t);
        let c2 = F::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    let gv = g.get(i, j);
                    let mv = self.beta1 * m.get(i, j) + (F::one() - self.beta1) * gv;
                    let vv = self.beta2 * v.get(i, j) + (F::one() - self.beta2) * gv * gv;
                    m.set(i, j, mv);
                    v.set(i, j, vv);
                    let update = self.lr * (mv / c1) / ((vv / c2).sqrt() + self.eps);
                    p.set(i, j, p.get(i, j) - update);
                }
            }
        }
    }
}

/// One metric measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// `epoch,split,metric_name,value` rows with a header line.
pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("epoch,split,metric_name,value\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
    }
    out
}

#[derive(Debug)]
pub struct FitReport {
    pub log: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::GraphRegression => "mae",
        TaskKind::GraphClassification => "accuracy",
    }
}

/// Lower-is-better ordering for the validation metric.
fn better(task: TaskKind, candidate: f64, incumbent: f64) -> bool {
    match task {
        TaskKind::GraphRegression => candidate < incumbent,
        TaskKind::GraphClassification => candidate > incumbent,
    }
}

fn batch_loss<'t, F: Scalar>(
    model: &BinGnnModel<F>,
    tape: &'t Tape<F>,
    b: &GraphBatch<F>,
    mode: Mode,
    sampler: &mut GumbelSampler,
) -> Result<(Var<'t, F>, Vec<usize>), TrainError> {
    let out = model.forward(tape, b, mode, sampler)?;
    let loss = match model.config().task {
        TaskKind::GraphRegression => {
            let targets = b.targets().ok_or(TrainError::MissingTargets)?;
            mae_loss(out.prediction, tape.leaf(targets.clone()))
        }
        TaskKind::GraphClassification => {
            let classes = b.classes().ok_or(TrainError::MissingTargets)?;
            cross_entropy_loss(out.prediction, &classes)
        }
    };
    Ok((loss, out.param_ids))
}

/// Deterministic eval-mode metric over one split: MAE for regression,
/// accuracy for classification.
pub fn evaluate<F: Scalar>(
    model: &BinGnnModel<F>,
    data: &Dataset<F>,
    split: Split,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut sampler = GumbelSampler::new(model.config().seed, model.config().tau);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let graphs: Vec<&crate::graph::Graph<F>> = chunk.iter().map(|&i| &data.graphs[i]).collect();
        let b = batch(&graphs)?;
        let tape = Tape::new();
        let out = model.forward(&tape, &b, Mode::Eval, &mut sampler)?;
        let pred = out.prediction.value();
        match model.config().task {
            TaskKind::GraphRegression => {
                let targets = b.targets().ok_or(TrainError::MissingTargets)?;
                for i in 0..pred.rows() {
                    for j in 0..pred.cols() {
                        let d = pred.get(i, j) - targets.get(i, j);
                        acc += d.abs().to_f64().unwrap_or(f64::NAN);
                        count += 1;
                    }
                }
            }
            TaskKind::GraphClassification => {
                let classes = b.classes().ok_or(TrainError::MissingTargets)?;
                for (i, &want) in classes.iter().enumerate() {
                    let row = pred.row(i);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    if best == want {
                        acc += 1.0;
                    }
                    count += 1;
                }
            }
        }
    }
    Ok(acc / count as f64)
}

/// Runs the training loop: shuffled mini-batches, Adam on the latent
/// weights, one eval-mode train/val measurement per epoch, best-val
/// snapshot restored at the end (ties keep the earlier epoch).
pub fn fit<F: Scalar>(
    model: &mut BinGnnModel<F>,
    data: &Dataset<F>,
    config: &ModelConfig,
) -> Result<FitReport, TrainError> {
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if data.indices(Split::Val).is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }

    let shapes: Vec<(usize, usize)> =
        model.params_mut().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::<F>::new(config.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_BA7C);
    let mut sampler = GumbelSampler::new(config.seed ^ 0x6A3B_1E55, config.tau);

    let mut log = Vec::with_capacity(config.epochs * 2);
    let mut best: Option<(usize, f64, Vec<Matrix<F>>)> = None;
    let name = metric_name(config.task);

    for epoch in 1..=config.epochs {
        if config.tau_anneal && config.epochs > 1 {
            // Linear schedule from tau down to 0.1 across the run.
            let frac = (epoch - 1) as f64 / (config.epochs - 1) as f64;
            sampler.set_tau(config.tau + (0.1 - config.tau) * frac);
        }

        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let graphs: Vec<&crate::graph::Graph<F>> =
                chunk.iter().map(|&i| &data.graphs[i]).collect();
            let b = batch(&graphs)?;
            let tape = Tape::new();
            let (loss, param_ids) = batch_loss(model, &tape, &b, Mode::Train, &mut sampler)?;
            let lv = loss.value().get(0, 0);
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<&Matrix<F>> =
                param_ids.iter().map(|&id| grads.get_id(id)).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_refs);
        }

        // Kernel-vs-float spot check, once per epoch on a small batch.
        let graphs: Vec<&crate::graph::Graph<F>> = train_idx
            .iter()
            .take(config.batch_size.min(8))
            .map(|&i| &data.graphs[i])
            .collect();
        let b = batch(&graphs)?;
        assert!(
            model.kernel_matches_float_path(&b),
            "packed kernel diverged from the float path"
        );

        let train_metric = evaluate(model, data, Split::Train, config.batch_size)?;
        let val_metric = evaluate(model, data, Split::Val, config.batch_size)?;
        log.push(MetricRecord { epoch, split: "train", metric: name, value: train_metric });
        log.push(MetricRecord { epoch, split: "val", metric: name, value: val_metric });
        if !train_metric.is_finite() || !val_metric.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }

        let improved = match &best {
            None => true,
            Some((_, incumbent, _)) => better(config.task, val_metric, *incumbent),
        };
        if improved {
            best = Some((epoch, val_metric, model.snapshot_params()));
        }
    }

    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch ran");
    model.restore_params(&snapshot);
    Ok(FitReport { log, best_epoch, best_val })
}

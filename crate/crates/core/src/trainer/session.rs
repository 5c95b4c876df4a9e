use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{AblationEmbedding, Method, ScorerKind, Task, TrainConfig};
use super::data::{correct_flags, Batch, Embedder, FeatureTable};
use super::model::{Classifier, ClassifierSpec, EncoderKind, Regressor, ScorerSpec};
use super::{AttentionSummary, EpochMetrics, Metric, RegionMetric, RunRecord};
use crate::dppa::{
    build_kernel, clamp_weights, dpp_objective_and_gradient, fit_attention, AttentionWeights, KernelConfig,
    KernelMatrix, Selection, SelectionPlan,
};
use crate::error::{Error, Result};
use crate::gridcode::GridCodebook;
use crate::nn::{Adam, AdamConfig, Graph, ParamSet, Var};
use crate::rng::{stream, Rng};
use crate::tasks::{ArithmeticOp, DatasetSplit, Point, Problem, Region, NUM_CANDIDATES};
use crate::tensor::Tensor;

/// Regression targets are embeddings divided by this, the code's maximum,
/// so they lie in the logistic head's range.
pub const REGRESSION_SCALE: f64 = 3.0;

/// Kernel over the codebook's responses on the training square `[0, m-1]²`.
pub fn grid_kernel(codebook: &GridCodebook, m: i64, config: &KernelConfig) -> Result<KernelMatrix> {
    let points: Vec<Point> = (0..m).flat_map(|x| (0..m).map(move |y| [x, y])).collect();
    build_kernel(&codebook.encode_batch(&points)?, codebook.band_size(), config)
}

/// Everything a run consumes besides its config.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub data: &'a DatasetSplit,
    pub codebook: &'a GridCodebook,
    pub kernel_config: &'a KernelConfig,
    /// Grid kernel on the training region; built on demand when absent.
    pub kernel: Option<&'a KernelMatrix>,
    /// Previously fitted attention; fitted on demand when absent.
    pub attention: Option<&'a AttentionWeights>,
}

enum Model {
    Classifier(Classifier),
    Regressor { net: Regressor, eval_columns: std::ops::Range<usize> },
}

enum Penalty {
    None,
    L1(f64),
    /// `-λ·F̂(w)` over the given kernel.
    Dpp(f64, KernelMatrix),
}

pub struct TrainedRun {
    pub record: RunRecord,
    /// Best-validation parameters.
    pub params: ParamSet,
}

pub struct Session<'a> {
    config: TrainConfig,
    data: &'a DatasetSplit,
    attention: Option<(AttentionWeights, usize)>,
    table: FeatureTable,
    regression_table: Option<FeatureTable>,
    with_op: bool,
    model: Model,
    penalty: Penalty,
    params: ParamSet,
    tests: Vec<(Region, Vec<&'a Problem>)>,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl<'a> Session<'a> {
    pub fn prepare(config: &TrainConfig, inputs: TrainInputs<'a>) -> Result<Self> {
        config.validate()?;
        let data = inputs.data;
        if data.train.is_empty() || data.validation.is_empty() {
            return Err(Error::Empty("training and validation sets must be non-empty".into()));
        }
        let task = match data.train[0] {
            Problem::Analogy(_) => Task::Analogy,
            Problem::Arithmetic(_) => Task::Arithmetic,
        };
        if task != config.task {
            return Err(Error::InvalidConfig(format!("config task {:?} does not match the dataset", config.task)));
        }
        let m = data.train[0].region().side();
        let method = config.method;

        let mut kernel_cache: Option<KernelMatrix> = inputs.kernel.cloned();
        let mut kernel = || -> Result<KernelMatrix> {
            if kernel_cache.is_none() {
                kernel_cache = Some(grid_kernel(inputs.codebook, m, inputs.kernel_config)?);
            }
            Ok(kernel_cache.clone().expect("just built"))
        };

        let attention = if method.needs_attention() {
            let steps = config.dpp_epochs * ceil_div(data.train.len(), config.batch_size);
            match inputs.attention {
                Some(a) => Some((a.clone(), steps)),
                None => {
                    let fit = fit_attention(&kernel()?, steps, &AdamConfig::new(config.dpp_learning_rate))?;
                    Some((fit.attention, steps))
                }
            }
        } else {
            None
        };
        if let Some((a, _)) = &attention {
            if a.w.len() != inputs.codebook.num_cells() {
                return Err(Error::Shape(format!(
                    "attention covers {} cells, codebook has {}",
                    a.w.len(),
                    inputs.codebook.num_cells()
                )));
            }
        }

        let tests: Vec<(Region, Vec<&Problem>)> = data
            .tests
            .iter()
            .filter(|(r, _)| !matches!(method, Method::EmbeddingAblation { .. }) || r.index().is_some_and(|k| k <= 3))
            .map(|(r, ps)| (*r, ps.iter().collect()))
            .collect();
        let all_problems =
            || data.train.iter().chain(&data.validation).chain(tests.iter().flat_map(|(_, ps)| ps.iter().copied()));

        let full_plan = SelectionPlan { columns: (0..inputs.codebook.num_cells()).collect(), weights: None };
        let attn = || &attention.as_ref().expect("attention fitted").0;
        let embedder = match method {
            Method::Dppa | Method::Regression { dppa: true } => {
                Embedder::Grid { codebook: inputs.codebook, plan: SelectionPlan::new(&Selection::FMax, attn())? }
            }
            Method::TopK { k } => {
                Embedder::Grid { codebook: inputs.codebook, plan: SelectionPlan::new(&Selection::TopK(k), attn())? }
            }
            Method::EmbeddingAblation { embedding: AblationEmbedding::OneHot, .. } => {
                Embedder::Axis { len: axis_len(all_problems()), sigma: None }
            }
            Method::EmbeddingAblation { embedding: AblationEmbedding::Smoothed { sigma }, .. } => {
                Embedder::Axis { len: axis_len(all_problems()), sigma: Some(sigma) }
            }
            _ => Embedder::Grid { codebook: inputs.codebook, plan: full_plan.clone() },
        };
        let table = FeatureTable::build(all_problems(), &embedder)?;
        let with_op = task == Task::Arithmetic;
        let input_dim = table.dim() + if with_op { 2 } else { 0 };
        let items = data.train[0].context().len() + 1;

        let penalty = match method {
            Method::L1 { lambda } => Penalty::L1(lambda),
            Method::OnestepWhole { lambda } => Penalty::Dpp(lambda, kernel()?.as_single_block()),
            Method::OnestepWithin { lambda } => Penalty::Dpp(lambda, kernel()?),
            Method::EmbeddingAblation { embedding, attention_lambda: Some(lambda), .. } => {
                let k = match embedding {
                    AblationEmbedding::Grid => kernel()?,
                    _ => {
                        let points: Vec<Point> = (0..m).flat_map(|x| (0..m).map(move |y| [x, y])).collect();
                        let rows = points.iter().map(|&p| embedder.embed(p)).collect::<Result<Vec<_>>>()?;
                        build_kernel(&Tensor::from_rows(&rows), embedder.dim(), inputs.kernel_config)?
                    }
                };
                Penalty::Dpp(lambda, k.as_single_block())
            }
            _ => Penalty::None,
        };

        let mut params = ParamSet::new();
        let mut init = stream(config.seed, "init");
        let model = if let Method::Regression { dppa } = method {
            let a = attn();
            let bs = a.block_size;
            let (output, eval_columns) =
                if dppa { (bs, 0..bs) } else { (inputs.codebook.num_cells(), a.f_max * bs..(a.f_max + 1) * bs) };
            let net = Regressor::new(&mut params, input_dim, config.hidden, output, &mut init);
            Model::Regressor { net, eval_columns }
        } else {
            let trainable_attention = matches!(
                method,
                Method::L1 { .. }
                    | Method::NoDppaAttention
                    | Method::OnestepWhole { .. }
                    | Method::OnestepWithin { .. }
                    | Method::EmbeddingAblation { attention_lambda: Some(_), .. }
            );
            let encoder = match method {
                Method::Tcn => EncoderKind::Tcn,
                Method::EmbeddingAblation { encoder: true, .. } => EncoderKind::Squashing,
                _ => EncoderKind::Identity,
            };
            let scorer = match config.scorer {
                ScorerKind::Lstm => ScorerSpec::Lstm { hidden: config.hidden },
                ScorerKind::Transformer => ScorerSpec::Transformer(config.transformer.clone()),
            };
            let dropout = if let Method::LockedDropout { rate } = method { rate } else { 0.0 };
            let spec = ClassifierSpec {
                input_dim,
                attended_dim: table.dim(),
                items,
                trainable_attention,
                encoder,
                scorer,
                dropout,
            };
            Model::Classifier(Classifier::new(&spec, &mut params, &mut init)?)
        };
        if let Penalty::Dpp(_, k) = &penalty {
            if k.order() != table.dim() {
                return Err(Error::Shape(format!(
                    "penalty kernel has order {}, attention has {}",
                    k.order(),
                    table.dim()
                )));
            }
        }

        // Regression targets are full grid codes; the f_max block is sliced
        // out of them for the attended variant.
        let regression_table = match (method, &attention) {
            (Method::Regression { dppa }, Some((a, _))) => {
                let plan = if dppa { SelectionPlan::new(&Selection::FMax, a)? } else { full_plan };
                let answers: Vec<Point> = {
                    let mut seen = std::collections::HashSet::new();
                    all_problems().map(|p| p.answer()).filter(|p| seen.insert(*p)).collect()
                };
                Some(FeatureTable::from_points(answers, &Embedder::Grid { codebook: inputs.codebook, plan })?)
            }
            _ => None,
        };

        Ok(Session {
            config: config.clone(),
            data,
            attention,
            table,
            regression_table,
            with_op,
            model,
            penalty,
            params,
            tests,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn attention(&self) -> Option<&AttentionWeights> {
        self.attention.as_ref().map(|(a, _)| a)
    }

    /// Freshly initialised parameters.
    pub fn initial_params(&self) -> &ParamSet {
        &self.params
    }

    pub fn metric(&self) -> Metric {
        match self.model {
            Model::Classifier(_) => Metric::Accuracy,
            Model::Regressor { .. } => Metric::Mse,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.table.dim() + if self.with_op { 2 } else { 0 }
    }

    pub fn train(&self) -> Result<TrainedRun> {
        self.train_with(|_| {})
    }

    /// [`train`](Self::train), reporting each epoch's metrics as they land.
    pub fn train_with(&self, mut on_epoch: impl FnMut(&[EpochMetrics])) -> Result<TrainedRun> {
        let start = Instant::now();
        let cfg = &self.config;
        let metric = self.metric();
        let mut params = self.params.clone();
        let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate), params.tensors());
        let mut shuffle = stream(cfg.seed, "shuffle");
        let mut masks = stream(cfg.seed, "dropout");
        let mut epochs = Vec::new();
        let mut step_losses = Vec::new();

        let train_refs: Vec<&Problem> = self.data.train.iter().collect();
        let val_refs: Vec<&Problem> = self.data.validation.iter().collect();
        let probe = self.train_probe();
        let mut log = |epoch: usize, params: &ParamSet, epochs: &mut Vec<EpochMetrics>| -> Result<f64> {
            let (tl, tm) = self.evaluate_split(params, &probe)?;
            let (vl, vm) = self.evaluate_split(params, &val_refs)?;
            epochs.push(EpochMetrics { epoch, split: "train".into(), loss: tl, metric: tm });
            epochs.push(EpochMetrics { epoch, split: "val".into(), loss: vl, metric: vm });
            on_epoch(&epochs[epochs.len() - 2..]);
            Ok(vm)
        };
        let vm = log(0, &params, &mut epochs)?;
        let mut best_val = vm;
        let mut best_epoch = 0;
        let mut best = params.clone();

        let mut order: Vec<usize> = (0..train_refs.len()).collect();
        for epoch in 1..=cfg.task_epochs {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(cfg.batch_size) {
                let problems: Vec<&Problem> = chunk.iter().map(|&i| train_refs[i]).collect();
                let objective = self.update(&mut params, &mut adam, &problems, &mut masks)?;
                if !objective.is_finite() {
                    let trace = step_losses[step_losses.len().saturating_sub(10)..].to_vec();
                    return Err(Error::Divergence { step: step_losses.len(), trace });
                }
                step_losses.push(objective);
            }
            let vm = log(epoch, &params, &mut epochs)?;
            if metric.improves(vm, best_val) {
                best_val = vm;
                best_epoch = epoch;
                best = params.clone();
            }
        }

        let regions = self.evaluate(&best)?;
        let record = RunRecord {
            config: cfg.clone(),
            method: cfg.method.label(),
            metric,
            epochs,
            step_losses,
            best_epoch,
            regions,
            attention: self.attention.as_ref().map(|(a, steps)| AttentionSummary {
                f_max: a.f_max,
                per_frequency_objective: a.per_frequency_objective.clone(),
                steps: *steps,
            }),
            architecture_hash: best.architecture_hash(),
            checkpoint: None,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        Ok(TrainedRun { record, params: best })
    }

    /// One optimiser step on `problems`; returns the training objective.
    fn update(&self, params: &mut ParamSet, adam: &mut Adam, problems: &[&Problem], masks: &mut Rng) -> Result<f64> {
        let batch = Batch::build(problems, &self.table, self.with_op);
        let (objective, grads) = {
            let mut g = Graph::new(params);
            let loss = match &self.model {
                Model::Classifier(c) => {
                    let (scores, w) = c.scores(&mut g, &batch, Some(masks));
                    let ce = g.softmax_cross_entropy(scores, batch.targets.clone(), NUM_CANDIDATES);
                    self.penalised(&mut g, ce, w)?
                }
                Model::Regressor { net, .. } => {
                    let y = net.predict(&mut g, &batch);
                    g.mse(y, self.regression_targets(problems))
                }
            };
            let objective = g.value(loss).item();
            if !objective.is_finite() {
                return Ok(objective);
            }
            (objective, g.backward(loss).for_params(params))
        };
        adam.step(params.tensors_mut(), &grads);
        if let Model::Classifier(Classifier { attention: Some(id), .. }) = &self.model {
            clamp_weights(params.get_mut(*id).data_mut());
        }
        Ok(objective)
    }

    /// Fixed training subset, as large as the validation set, on which
    /// per-epoch training metrics are measured without dropout.
    fn train_probe(&self) -> Vec<&'a Problem> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut stream(self.config.seed, "probe"));
        idx.truncate(self.data.validation.len());
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.data.train[i]).collect()
    }

    fn penalised(&self, g: &mut Graph, loss: Var, w: Option<Var>) -> Result<Var> {
        let Some(w) = w else { return Ok(loss) };
        let penalty = match &self.penalty {
            Penalty::None => return Ok(loss),
            Penalty::L1(lambda) => {
                let s = g.sum_abs(w);
                g.scale(s, *lambda)
            }
            Penalty::Dpp(lambda, kernel) => {
                let (obj, grad) = dpp_objective_and_gradient(g.value(w).data(), kernel)?;
                let grad = Tensor::from_vec(1, grad.len(), grad.iter().map(|d| -lambda * d).collect());
                g.custom_scalar(w, -lambda * obj.total, grad)
            }
        };
        Ok(g.add(loss, penalty))
    }

    fn regression_targets(&self, problems: &[&Problem]) -> Tensor {
        let table = self.regression_table.as_ref().expect("regression session");
        let rows: Vec<Vec<f64>> =
            problems.iter().map(|p| table.row(p.answer()).iter().map(|v| v / REGRESSION_SCALE).collect()).collect();
        Tensor::from_rows(&rows)
    }

    /// Per-problem outcomes: correctness for classifiers, squared error on
    /// the evaluated columns for regression. Returns the mean loss too.
    fn outcomes(&self, params: &ParamSet, problems: &[&Problem]) -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut out = Vec::with_capacity(problems.len());
        for chunk in problems.chunks(self.config.eval_batch_size) {
            let batch = Batch::build(chunk, &self.table, self.with_op);
            let mut g = Graph::new(params);
            match &self.model {
                Model::Classifier(c) => {
                    let (scores, _) = c.scores(&mut g, &batch, None);
                    let ce = g.softmax_cross_entropy(scores, batch.targets.clone(), NUM_CANDIDATES);
                    loss += g.value(ce).item() * chunk.len() as f64;
                    out.extend(correct_flags(g.value(scores).data(), &batch.targets).into_iter().map(f64::from));
                }
                Model::Regressor { net, eval_columns } => {
                    let y = net.predict(&mut g, &batch);
                    let target = self.regression_targets(chunk);
                    let full = g.mse(y, target.clone());
                    loss += g.value(full).item() * chunk.len() as f64;
                    out.extend(squared_errors(g.value(y), &target, eval_columns));
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical("non-finite evaluation loss".into()));
            }
        }
        Ok((loss / problems.len().max(1) as f64, out))
    }

    fn evaluate_split(&self, params: &ParamSet, problems: &[&Problem]) -> Result<(f64, f64)> {
        let (loss, out) = self.outcomes(params, problems)?;
        Ok((loss, mean(&out)))
    }

    /// Metrics for train, validation and every evaluated test region in
    /// region order; arithmetic adds per-operation subsets.
    pub fn evaluate(&self, params: &ParamSet) -> Result<Vec<RegionMetric>> {
        if params.architecture_hash() != self.params.architecture_hash() {
            return Err(Error::HashMismatch {
                what: "model parameters".into(),
                expected: self.params.architecture_hash(),
                found: params.architecture_hash(),
            });
        }
        let mut splits: Vec<(String, Vec<&Problem>)> = vec![
            ("train".into(), self.data.train.iter().collect()),
            ("val".into(), self.data.validation.iter().collect()),
        ];
        splits.extend(self.tests.iter().map(|(r, ps)| (r.to_string(), ps.clone())));
        let mut metrics = Vec::new();
        for (label, problems) in splits {
            let (_, out) = self.outcomes(params, &problems)?;
            metrics.push(RegionMetric { region: label.clone(), subset: "all".into(), value: mean(&out), n: out.len() });
            if self.with_op {
                for (op, name) in [(ArithmeticOp::Add, "add"), (ArithmeticOp::Multiply, "multiply")] {
                    let sub: Vec<f64> =
                        problems.iter().zip(&out).filter(|(p, _)| p.op() == Some(op)).map(|(_, v)| *v).collect();
                    metrics.push(RegionMetric {
                        region: label.clone(),
                        subset: name.into(),
                        value: mean(&sub),
                        n: sub.len(),
                    });
                }
            }
        }
        Ok(metrics)
    }

    /// Raw candidate scores for `problems` (classifiers only).
    pub fn scores(&self, params: &ParamSet, problems: &[&Problem]) -> Result<Vec<f64>> {
        let Model::Classifier(c) = &self.model else {
            return Err(Error::InvalidConfig("regression models do not score candidates".into()));
        };
        let mut out = Vec::new();
        for chunk in problems.chunks(self.config.eval_batch_size) {
            let batch = Batch::build(chunk, &self.table, self.with_op);
            let mut g = Graph::new(params);
            let (s, _) = c.scores(&mut g, &batch, None);
            out.extend_from_slice(g.value(s).data());
        }
        Ok(out)
    }
}

/// Per-row mean squared error over `columns`.
fn squared_errors(pred: &Tensor, target: &Tensor, columns: &std::ops::Range<usize>) -> Vec<f64> {
    (0..pred.rows())
        .map(|r| {
            let (p, t) = (pred.row(r), target.row(r));
            columns.clone().map(|c| (p[c] - t[c]).powi(2)).sum::<f64>() / columns.len() as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-axis code length covering every coordinate the run will embed.
fn axis_len<'p>(problems: impl Iterator<Item = &'p Problem>) -> usize {
    problems.flat_map(|p| p.points()).flatten().max().map_or(1, |c| c as usize + 1)
}

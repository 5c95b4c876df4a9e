//! Scorers wrapped with the per-method input transforms.

use rand::Rng as _;

use super::data::Batch;
use crate::error::Result;
use crate::nn::lstm::LstmScorer;
use crate::nn::transformer::{TransformerConfig, TransformerScorer};
use crate::nn::{Affine, Graph, Linear, ParamId, ParamSet, RegressionHead, Var};
use crate::rng::Rng;
use crate::tasks::NUM_CANDIDATES;
use crate::tensor::Tensor;

pub const TCN_WIDTH: usize = 256;
pub const ABLATION_WIDTH: usize = 1024;
pub const TCN_EPS: f64 = 1e-8;

/// Per-item feature transform applied before the scorer.
#[derive(Clone, Debug)]
pub enum Encoder {
    Identity,
    /// Two rectified layers and a linear output, followed by temporal
    /// normalisation within each candidate sequence.
    Tcn {
        layers: [Linear; 3],
        norm: Affine,
    },
    /// Two rectified layers and a logistic output layer.
    Squashing {
        layers: [Linear; 3],
    },
}

impl Encoder {
    fn output_dim(&self, input: usize) -> usize {
        match self {
            Encoder::Identity => input,
            Encoder::Tcn { .. } => TCN_WIDTH,
            Encoder::Squashing { .. } => ABLATION_WIDTH,
        }
    }

    fn per_item(&self, g: &mut Graph, x: Var) -> Var {
        let (layers, squash) = match self {
            Encoder::Identity => return x,
            Encoder::Tcn { layers, .. } => (layers, false),
            Encoder::Squashing { layers } => (layers, true),
        };
        let h = layers[0].forward(g, x);
        let h = g.relu(h);
        let h = layers[1].forward(g, h);
        let h = g.relu(h);
        let y = layers[2].forward(g, h);
        if squash {
            g.sigmoid(y)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
pub enum Scorer {
    Lstm(LstmScorer),
    Transformer(TransformerScorer),
}

/// What the classifier is built from.
#[derive(Clone, Debug)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    /// Leading columns covered by trainable attention; the rest (the
    /// operation one-hot) pass through unweighted.
    pub attended_dim: usize,
    pub items: usize,
    pub trainable_attention: bool,
    pub encoder: EncoderKind,
    pub scorer: ScorerSpec,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Identity,
    Tcn,
    Squashing,
}

#[derive(Clone, Debug)]
pub enum ScorerSpec {
    Lstm { hidden: usize },
    Transformer(TransformerConfig),
}

/// Seven-way candidate scorer.
///
/// Parameters are registered attention first, then encoder, then scorer,
/// so two specs that differ only in dropout rate or penalty initialise
/// identically from the same stream.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub attention: Option<ParamId>,
    attended_dim: usize,
    encoder: Encoder,
    scorer: Scorer,
    dropout: f64,
    items: usize,
}

impl Classifier {
    pub fn new(spec: &ClassifierSpec, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let d = spec.input_dim;
        let attention =
            spec.trainable_attention.then(|| params.add("attention.w", Tensor::filled(1, spec.attended_dim, 0.5)));
        let encoder = match spec.encoder {
            EncoderKind::Identity => Encoder::Identity,
            EncoderKind::Tcn => Encoder::Tcn {
                layers: [
                    Linear::new(params, "tcn.fc1", d, TCN_WIDTH, rng),
                    Linear::new(params, "tcn.fc2", TCN_WIDTH, TCN_WIDTH, rng),
                    Linear::new(params, "tcn.out", TCN_WIDTH, TCN_WIDTH, rng),
                ],
                norm: Affine::new(params, "tcn.norm", TCN_WIDTH),
            },
            EncoderKind::Squashing => Encoder::Squashing {
                layers: [
                    Linear::new(params, "embed.fc1", d, ABLATION_WIDTH, rng),
                    Linear::new(params, "embed.fc2", ABLATION_WIDTH, ABLATION_WIDTH, rng),
                    Linear::new(params, "embed.out", ABLATION_WIDTH, ABLATION_WIDTH, rng),
                ],
            },
        };
        let width = encoder.output_dim(d);
        let scorer = match &spec.scorer {
            ScorerSpec::Lstm { hidden } => Scorer::Lstm(LstmScorer::new(params, width, *hidden, rng)),
            ScorerSpec::Transformer(cfg) => {
                Scorer::Transformer(TransformerScorer::new(params, cfg, width, spec.items, rng)?)
            }
        };
        Ok(Classifier {
            attention,
            attended_dim: spec.attended_dim,
            encoder,
            scorer,
            dropout: spec.dropout,
            items: spec.items,
        })
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    /// Candidate scores (`problems·7 × 1`, candidate-minor) and the
    /// attention weights if the model has them. Dropout masks are drawn
    /// only when `mask_rng` is given, i.e. during training.
    pub fn scores<'a>(&self, g: &mut Graph<'a>, batch: &'a Batch, mask_rng: Option<&mut Rng>) -> (Var, Option<Var>) {
        let mut rows = g.input_ref(&batch.rows);
        let w = self.attention.map(|id| g.param(id));
        if let Some(w) = w {
            rows = self.attend(g, rows, w);
        }
        rows = self.encoder.per_item(g, rows);

        let mask_rng = mask_rng.filter(|_| self.dropout > 0.0);
        let tcn = matches!(self.encoder, Encoder::Tcn { .. });
        let scores = match (&self.scorer, tcn, mask_rng) {
            // Shared-prefix evaluation: the context is run once per problem.
            (Scorer::Lstm(lstm), false, None) => {
                lstm.score_candidates_indexed(g, rows, &batch.context, &batch.candidates, NUM_CANDIDATES)
            }
            (scorer, _, mask_rng) => {
                let mut x = g.gather_rows(rows, self.sequence_layout(batch));
                if let Some(rng) = mask_rng {
                    let mask = self.locked_mask(g.value(x).shape(), rng);
                    let m = g.input(mask);
                    x = g.mul(x, m);
                }
                if let Encoder::Tcn { norm, .. } = &self.encoder {
                    x = g.group_norm(x, self.items, TCN_EPS);
                    x = norm.forward(g, x);
                }
                match scorer {
                    Scorer::Lstm(lstm) => {
                        let seqs = g.value(x).rows() / self.items;
                        let steps: Vec<Var> = (0..self.items)
                            .map(|t| g.gather_rows(x, (0..seqs).map(|s| s * self.items + t).collect()))
                            .collect();
                        lstm.score_sequences(g, &steps)
                    }
                    Scorer::Transformer(tf) => tf.score(g, x),
                }
            }
        };
        (scores, w)
    }

    fn attend(&self, g: &mut Graph, x: Var, w: Var) -> Var {
        let width = g.value(x).cols();
        if width == self.attended_dim {
            return g.mul_row(x, w);
        }
        let head = g.slice_cols(x, 0..self.attended_dim);
        let head = g.mul_row(head, w);
        let tail = g.slice_cols(x, self.attended_dim..width);
        g.concat_cols(&[head, tail])
    }

    /// Row indices placing item `t` of candidate sequence `s = p·7 + k`
    /// at row `s·T + t`.
    fn sequence_layout(&self, batch: &Batch) -> Vec<usize> {
        let mut idx = Vec::with_capacity(batch.candidates.len() * self.items);
        for (s, &cand) in batch.candidates.iter().enumerate() {
            let p = s / NUM_CANDIDATES;
            idx.extend(batch.context.iter().map(|step| step[p]));
            idx.push(cand);
        }
        idx
    }

    /// One inverted-dropout mask per sequence, repeated at every item.
    fn locked_mask(&self, (rows, cols): (usize, usize), rng: &mut Rng) -> Tensor {
        let keep = 1.0 - self.dropout;
        let mut mask = Tensor::zeros(rows, cols);
        for s in 0..rows / self.items {
            let row: Vec<f64> = (0..cols).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            for t in 0..self.items {
                mask.row_mut(s * self.items + t).copy_from_slice(&row);
            }
        }
        mask
    }
}

/// LSTM over the context followed by a logistic regression head.
#[derive(Clone, Debug)]
pub struct Regressor {
    lstm: LstmScorer,
    head: RegressionHead,
}

impl Regressor {
    pub fn new(params: &mut ParamSet, input_dim: usize, hidden: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let lstm = LstmScorer::new(params, input_dim, hidden, rng);
        let head = RegressionHead::new(params, hidden, output_dim, rng);
        Regressor { lstm, head }
    }

    pub fn predict<'a>(&self, g: &mut Graph<'a>, batch: &'a Batch) -> Var {
        let rows = g.input_ref(&batch.rows);
        let (h, _) = self.lstm.encode_indexed(g, rows, &batch.context);
        self.head.forward(g, h)
    }
}

//! Point embeddings and batch assembly.

use std::collections::HashMap;

use crate::dppa::SelectionPlan;
use crate::error::{Error, Result};
use crate::gridcode::GridCodebook;
use crate::tasks::{ArithmeticOp, Point, Problem, NUM_CANDIDATES};
use crate::tensor::Tensor;

/// How a point becomes a feature vector.
#[derive(Clone, Debug)]
pub enum Embedder<'a> {
    Grid {
        codebook: &'a GridCodebook,
        plan: SelectionPlan,
    },
    /// Concatenated per-axis codes of length `len`; `sigma = None` is a
    /// one-hot, otherwise a peak-normalised Gaussian bump.
    Axis {
        len: usize,
        sigma: Option<f64>,
    },
}

impl Embedder<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Grid { plan, .. } => plan.output_dim(),
            Embedder::Axis { len, .. } => 2 * len,
        }
    }

    pub fn embed(&self, p: Point) -> Result<Vec<f64>> {
        match self {
            Embedder::Grid { codebook, plan } => Ok(plan.apply(&codebook.encode(p)?.values)),
            &Embedder::Axis { len, sigma } => {
                if p.iter().any(|&c| c < 0 || c as usize >= len) {
                    return Err(Error::OutOfCoverage { x: p[0], y: p[1], extent: len as u32 });
                }
                let mut out = vec![0.0; 2 * len];
                for (axis, &c) in p.iter().enumerate() {
                    let code = &mut out[axis * len..(axis + 1) * len];
                    match sigma {
                        None => code[c as usize] = 1.0,
                        Some(s) => {
                            for (i, v) in code.iter_mut().enumerate() {
                                let d = i as f64 - c as f64;
                                *v = (-d * d / (2.0 * s * s)).exp();
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Embeddings of every distinct point a dataset mentions, computed once.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    index: HashMap<Point, usize>,
    features: Tensor,
}

impl FeatureTable {
    pub fn build<'p>(problems: impl IntoIterator<Item = &'p Problem>, embedder: &Embedder) -> Result<Self> {
        let mut index = HashMap::new();
        let mut order = Vec::new();
        for p in problems {
            for pt in p.points() {
                index.entry(pt).or_insert_with(|| {
                    order.push(pt);
                    order.len() - 1
                });
            }
        }
        Self::from_points(order, embedder)
    }

    pub fn from_points(points: Vec<Point>, embedder: &Embedder) -> Result<Self> {
        let dim = embedder.dim();
        let mut data = Vec::with_capacity(points.len() * dim);
        let mut index = HashMap::with_capacity(points.len());
        for (i, &p) in points.iter().enumerate() {
            data.extend(embedder.embed(p)?);
            index.insert(p, i);
        }
        Ok(FeatureTable { index, features: Tensor::from_vec(points.len(), dim, data) })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn row(&self, p: Point) -> &[f64] {
        let i = *self.index.get(&p).unwrap_or_else(|| panic!("point {p:?} missing from feature table"));
        self.features.row(i)
    }
}

/// Inputs for a batch of problems, as indices into a table of the
/// distinct `(point, operation)` feature rows the batch touches.
///
/// `context[t][p]` is item `t` of problem `p`; `candidates[p·7 + k]` is its
/// candidate `k`. With `with_op`, each row ends with the operation one-hot.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: Tensor,
    pub context: Vec<Vec<usize>>,
    pub candidates: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn problems(&self) -> usize {
        self.targets.len()
    }

    pub fn items(&self) -> usize {
        self.context.len() + 1
    }

    pub fn build(problems: &[&Problem], table: &FeatureTable, with_op: bool) -> Batch {
        let base = table.dim();
        let dim = base + if with_op { 2 } else { 0 };
        let steps = problems.first().map_or(0, |p| p.context().len());
        let mut slots: HashMap<(Point, Option<ArithmeticOp>), usize> = HashMap::new();
        let mut data = Vec::new();
        let mut slot = |pt: Point, op: Option<ArithmeticOp>| -> usize {
            *slots.entry((pt, op)).or_insert_with(|| {
                data.extend_from_slice(table.row(pt));
                if with_op {
                    data.extend_from_slice(&op.expect("arithmetic problem").onehot());
                }
                data.len() / dim - 1
            })
        };
        let mut context = vec![Vec::with_capacity(problems.len()); steps];
        let mut candidates = Vec::with_capacity(problems.len() * NUM_CANDIDATES);
        for p in problems {
            let op = if with_op { p.op() } else { None };
            for (t, pt) in p.context().into_iter().enumerate() {
                context[t].push(slot(pt, op));
            }
            for pt in p.candidates() {
                candidates.push(slot(pt, op));
            }
        }
        let n = data.len() / dim;
        Batch {
            rows: Tensor::from_vec(n, dim, data),
            context,
            candidates,
            targets: problems.iter().map(|p| p.target()).collect(),
        }
    }

    /// Item `t` of every problem as a dense `problems × dim` tensor.
    pub fn context_rows(&self, t: usize) -> Tensor {
        self.rows.select_rows(&self.context[t])
    }
}

/// A problem is solved when its target strictly outscores every foil.
pub fn correct_flags(scores: &[f64], targets: &[usize]) -> Vec<bool> {
    targets
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let s = &scores[p * NUM_CANDIDATES..(p + 1) * NUM_CANDIDATES];
            s.iter().enumerate().all(|(j, &v)| j == t || v < s[t])
        })
        .collect()
}

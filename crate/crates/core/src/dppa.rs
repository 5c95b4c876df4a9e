//! Determinantal attention over grid cells.
//!
//! The kernel `V` is a quality/diversity decomposition of training-region
//! statistics: `V_ij = q_i K_ij q_j` with `q_i = exp(w_m·m_i/2)` (`m_i` the
//! variance of cell `i`) and `K_ij = exp(-‖ŝ_i - ŝ_j‖²/b)` over the centred,
//! unit-norm response columns `ŝ_i`.
//!
//! Attention weights `w ∈ [ε, 1-ε]^N` are fitted by maximising the relaxed
//! within-band objective
//!
//! ```text
//! F̂(w) = Σ_f log det(diag(w_f)(V_f - I) + I)
//! ```
//!
//! which equals the log of the expected `det(V_x)` when each cell is kept
//! independently with probability `w_i`. Each term is evaluated in the
//! symmetric form `log det(D^½ (V_f - I) D^½ + I)`, `D = diag(w_f)`, whose
//! smallest eigenvalue is at least `1 - max w`, so a Cholesky factor exists.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::nn::optim::{Adam, AdamConfig};
use crate::tensor::{gemm, Tensor};

/// Attention weights are kept in `[WEIGHT_FLOOR, 1 - WEIGHT_FLOOR]`.
pub const WEIGHT_FLOOR: f64 = 1e-4;
/// Largest diagonal jitter tried before a factorisation is declared failed.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Weight `w_m` of the cell variance in the quality exponent.
    pub quality_weight: f64,
    /// Similarity bandwidth `b`.
    pub bandwidth: f64,
    /// First diagonal jitter tried when a factorisation fails.
    pub jitter: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { quality_weight: 1.0, bandwidth: 0.1, jitter: 1e-8 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.quality_weight.is_finite() {
            return Err(Error::InvalidConfig("quality_weight must be finite".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.jitter > 0.0 && self.jitter <= MAX_JITTER) {
            return Err(Error::InvalidConfig(format!("jitter must lie in (0, {MAX_JITTER}], got {}", self.jitter)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    entries: Tensor,
    cell_variances: Vec<f64>,
    block_size: usize,
    jitter: f64,
}

impl KernelMatrix {
    /// Wraps an explicit symmetric PSD matrix; `block_size` must divide its order.
    pub fn from_entries(entries: Tensor, block_size: usize, jitter: f64) -> Result<Self> {
        let n = entries.rows();
        if entries.cols() != n {
            return Err(Error::Shape(format!("kernel must be square, got {:?}", entries.shape())));
        }
        if block_size == 0 || !n.is_multiple_of(block_size) {
            return Err(Error::Shape(format!("block size {block_size} does not divide kernel order {n}")));
        }
        if !entries.all_finite() {
            return Err(Error::Numerical("kernel has non-finite entries".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Numerical(format!("kernel not symmetric at ({i}, {j})")));
                }
            }
        }
        let cell_variances = vec![f64::NAN; n];
        Ok(KernelMatrix { entries, cell_variances, block_size, jitter })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    /// Per-cell variances over the training responses (NaN when the kernel
    /// was supplied directly).
    pub fn cell_variances(&self) -> &[f64] {
        &self.cell_variances
    }

    pub fn order(&self) -> usize {
        self.entries.rows()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.order() / self.block_size
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn block_range(&self, f: usize) -> Range<usize> {
        f * self.block_size..(f + 1) * self.block_size
    }

    pub fn blocks(&self) -> Vec<Range<usize>> {
        (0..self.num_blocks()).map(|f| self.block_range(f)).collect()
    }

    pub fn block(&self, f: usize) -> Tensor {
        self.entries.block(self.block_range(f))
    }

    /// Same entries, viewed as a single block.
    pub fn as_single_block(&self) -> KernelMatrix {
        KernelMatrix {
            entries: self.entries.clone(),
            cell_variances: self.cell_variances.clone(),
            block_size: self.order(),
            jitter: self.jitter,
        }
    }

    /// Cholesky pivots of `entries + jitter·I`.
    pub fn jittered_pivots(&self) -> Result<Vec<f64>> {
        let mut shifted = self.entries.clone();
        for i in 0..self.order() {
            shifted[(i, i)] += self.jitter;
        }
        Ok(crate::linalg::Cholesky::new(&shifted)?.pivots())
    }
}

/// Builds `V` from a `points × cells` response matrix.
pub fn build_kernel(responses: &Tensor, block_size: usize, config: &KernelConfig) -> Result<KernelMatrix> {
    config.validate()?;
    let (n, cells) = responses.shape();
    if n == 0 || cells == 0 {
        return Err(Error::Empty("kernel needs at least one training response and one cell".into()));
    }
    if !responses.all_finite() {
        return Err(Error::Numerical("responses contain non-finite values".into()));
    }
    if block_size == 0 || cells % block_size != 0 {
        return Err(Error::Shape(format!("block size {block_size} does not divide {cells} cells")));
    }

    let mut means = vec![0.0; cells];
    for r in 0..n {
        for (m, x) in means.iter_mut().zip(responses.row(r)) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);

    let mut centred = responses.clone();
    let mut sq = vec![0.0; cells];
    for r in 0..n {
        for ((x, m), s) in centred.row_mut(r).iter_mut().zip(&means).zip(sq.iter_mut()) {
            *x -= m;
            *s += *x * *x;
        }
    }
    let variances: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
    let inv_norm: Vec<f64> = sq.iter().map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 }).collect();
    for r in 0..n {
        for (x, k) in centred.row_mut(r).iter_mut().zip(&inv_norm) {
            *x *= k;
        }
    }

    let mut gram = Tensor::zeros(cells, cells);
    gemm(1.0, &centred, true, &centred, false, 0.0, &mut gram);
    drop(centred);

    let quality: Vec<f64> = variances.iter().map(|m| (0.5 * config.quality_weight * m).exp()).collect();
    let sq_norm: Vec<f64> = (0..cells).map(|i| gram[(i, i)]).collect();
    let mut entries = Tensor::zeros(cells, cells);
    entries.data_mut().par_chunks_mut(cells).enumerate().for_each(|(i, row)| {
        for j in 0..cells {
            let d2 = (sq_norm[i] + sq_norm[j] - 2.0 * gram[(i.min(j), i.max(j))]).max(0.0);
            row[j] = quality[i] * quality[j] * (-d2 / config.bandwidth).exp();
        }
    });
    // Exact symmetry: the gram product is only symmetric up to rounding.
    for i in 0..cells {
        for j in 0..i {
            entries[(j, i)] = entries[(i, j)];
        }
    }
    Ok(KernelMatrix { entries, cell_variances: variances, block_size, jitter: config.jitter })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub total: f64,
    pub per_block: Vec<f64>,
}

fn check_weights(w: &[f64], order: usize) -> Result<()> {
    if w.len() != order {
        return Err(Error::Shape(format!("{} attention weights for a kernel of order {order}", w.len())));
    }
    if let Some((i, x)) = w.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Numerical(format!("attention weight {i} = {x} outside (0, 1)")));
    }
    Ok(())
}

/// Log-determinant term of one block, and optionally its gradient.
fn block_term(
    v: &Tensor,
    range: Range<usize>,
    w: &[f64],
    jitter: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = range.len();
    let sw: Vec<f64> = w[range.clone()].iter().map(|x| x.sqrt()).collect();
    let mut s = Tensor::zeros(n, n);
    for (a, i) in range.clone().enumerate() {
        let vrow = &v.row(i)[range.clone()];
        let srow = s.row_mut(a);
        for b in 0..n {
            let centred = vrow[b] - if a == b { 1.0 } else { 0.0 };
            srow[b] = sw[a] * centred * sw[b] + if a == b { 1.0 } else { 0.0 };
        }
    }
    let (chol, _) = cholesky_with_jitter(&s, jitter, MAX_JITTER)?;
    let value = chol.logdet();
    if !want_grad {
        return Ok((value, None));
    }
    // ∂/∂w_a = [(V - I) M⁻¹]_aa with M = D(V - I) + I = D^½ S D^-½, hence
    // (1/√w_a) Σ_k (V - I)_ak √w_k (S⁻¹)_ka.
    let sinv = chol.inverse();
    let mut grad = vec![0.0; n];
    for (a, i) in range.clone().enumerate() {
        let vrow = &v.row(i)[range.clone()];
        let irow = sinv.row(a);
        let mut acc = 0.0;
        for k in 0..n {
            let centred = vrow[k] - if a == k { 1.0 } else { 0.0 };
            acc += centred * sw[k] * irow[k];
        }
        grad[a] = acc / sw[a];
    }
    Ok((value, Some(grad)))
}

fn evaluate(w: &[f64], kernel: &KernelMatrix, want_grad: bool) -> Result<(Objective, Option<Vec<f64>>)> {
    check_weights(w, kernel.order())?;
    let blocks = kernel.blocks();
    let terms: Vec<(f64, Option<Vec<f64>>)> = blocks
        .par_iter()
        .map(|r| block_term(kernel.entries(), r.clone(), w, kernel.jitter(), want_grad))
        .collect::<Result<_>>()?;
    let per_block: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let total = per_block.iter().sum();
    let grad = want_grad.then(|| terms.into_iter().flat_map(|t| t.1.expect("gradient requested")).collect());
    Ok((Objective { total, per_block }, grad))
}

/// `F̂(w)` and its per-block terms `F̂_f`.
pub fn dpp_objective(w: &[f64], kernel: &KernelMatrix) -> Result<Objective> {
    Ok(evaluate(w, kernel, false)?.0)
}

/// `∂F̂/∂w`.
pub fn dpp_objective_gradient(w: &[f64], kernel: &KernelMatrix) -> Result<Vec<f64>> {
    Ok(evaluate(w, kernel, true)?.1.expect("gradient requested"))
}

pub fn dpp_objective_and_gradient(w: &[f64], kernel: &KernelMatrix) -> Result<(Objective, Vec<f64>)> {
    let (o, g) = evaluate(w, kernel, true)?;
    Ok((o, g.expect("gradient requested")))
}

/// Index of the largest value; ties go to the higher index.
pub fn argmax_frequency(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub w: Vec<f64>,
    pub per_frequency_objective: Vec<f64>,
    pub f_max: usize,
    pub block_size: usize,
}

impl AttentionWeights {
    pub fn num_blocks(&self) -> usize {
        self.per_frequency_objective.len()
    }

    /// Block indices by descending `F̂_f` (ties towards the higher index).
    pub fn ranked_blocks(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.num_blocks()).collect();
        idx.sort_by(|&a, &b| {
            self.per_frequency_objective[b]
                .partial_cmp(&self.per_frequency_objective[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        });
        idx
    }
}

#[derive(Clone, Debug)]
pub struct AttentionFit {
    pub attention: AttentionWeights,
    /// `F̂` at initialisation followed by its value after every update.
    pub trace: Vec<f64>,
}

/// Gradient ascent on `F̂` from `w = 0.5`, projecting onto `[ε, 1-ε]`
/// after every adaptive-moment step.
pub fn fit_attention(kernel: &KernelMatrix, steps: usize, step_rule: &AdamConfig) -> Result<AttentionFit> {
    if steps == 0 {
        return Err(Error::InvalidConfig("fit_attention needs at least one step".into()));
    }
    step_rule.validate()?;
    let n = kernel.order();
    let mut params = vec![Tensor::filled(1, n, 0.5)];
    let mut adam = Adam::new(step_rule.clone(), &params);
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (obj, grad) = match dpp_objective_and_gradient(params[0].data(), kernel) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => {
                return Err(Error::Divergence { step, trace: tail(&trace, msg) });
            }
            Err(e) => return Err(e),
        };
        if !obj.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, trace: tail(&trace, String::new()) });
        }
        trace.push(obj.total);
        if step == steps {
            let f_max = argmax_frequency(&obj.per_block);
            let attention = AttentionWeights {
                w: params[0].data().to_vec(),
                per_frequency_objective: obj.per_block,
                f_max,
                block_size: kernel.block_size(),
            };
            return Ok(AttentionFit { attention, trace });
        }
        // Minimise -F̂.
        let neg = Tensor::from_vec(1, n, grad.iter().map(|g| -g).collect());
        adam.step(&mut params, &[neg]);
        clamp_weights(params[0].data_mut());
    }
    unreachable!("loop returns on its final iteration")
}

fn tail(trace: &[f64], _msg: String) -> Vec<f64> {
    trace[trace.len().saturating_sub(10)..].to_vec()
}

pub fn clamp_weights(w: &mut [f64]) {
    for x in w {
        *x = x.clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum Selection {
    /// The unweighted cells of the winning band.
    FMax,
    /// The `K` best bands, concatenated by descending objective.
    TopK(usize),
    /// Every cell scaled by its attention weight.
    WeightedFull,
    /// Every cell, unweighted.
    Full,
}

/// Column gather (and optional per-column weight) realising a [`Selection`].
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub columns: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

impl SelectionPlan {
    pub fn new(selection: &Selection, attention: &AttentionWeights) -> Result<Self> {
        let n = attention.w.len();
        let bs = attention.block_size;
        let plan = match *selection {
            Selection::FMax => {
                SelectionPlan { columns: (attention.f_max * bs..(attention.f_max + 1) * bs).collect(), weights: None }
            }
            Selection::TopK(k) => {
                if k == 0 || k > attention.num_blocks() {
                    return Err(Error::InvalidConfig(format!(
                        "top_k needs 1 <= K <= {}, got {k}",
                        attention.num_blocks()
                    )));
                }
                let columns =
                    attention.ranked_blocks().into_iter().take(k).flat_map(|f| f * bs..(f + 1) * bs).collect();
                SelectionPlan { columns, weights: None }
            }
            Selection::WeightedFull => SelectionPlan { columns: (0..n).collect(), weights: Some(attention.w.clone()) },
            Selection::Full => SelectionPlan { columns: (0..n).collect(), weights: None },
        };
        Ok(plan)
    }

    pub fn output_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn apply(&self, embedding: &[f64]) -> Vec<f64> {
        match &self.weights {
            None => self.columns.iter().map(|&c| embedding[c]).collect(),
            Some(w) => self.columns.iter().map(|&c| embedding[c] * w[c]).collect(),
        }
    }
}

pub fn select_embeddings(embedding: &[f64], attention: &AttentionWeights, selection: &Selection) -> Result<Vec<f64>> {
    if embedding.len() != attention.w.len() {
        return Err(Error::Shape(format!(
            "embedding has {} cells, attention covers {}",
            embedding.len(),
            attention.w.len()
        )));
    }
    Ok(SelectionPlan::new(selection, attention)?.apply(embedding))
}

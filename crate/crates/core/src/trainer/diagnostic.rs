//! How far the attended codes of test operands drift from training ones.

use serde::{Deserialize, Serialize};

use crate::dppa::{AttentionWeights, Selection, SelectionPlan};
use crate::error::{Error, Result};
use crate::gridcode::GridCodebook;
use crate::tasks::{ArithmeticOp, DatasetSplit, Point, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpDistances {
    pub add: f64,
    pub multiply: f64,
}

impl OpDistances {
    pub fn ratio(&self) -> f64 {
        self.multiply / self.add
    }
}

/// Mean cosine distance between training and test value distributions.
///
/// For each operation, role (A, B, C) and f_max cell, the cell's values
/// over the training problems form one vector and its values over a test
/// region's problems another. Each vector is sorted and the longer one is
/// thinned to the shorter length at evenly spaced ranks, so the comparison
/// is between empirical quantile functions and does not depend on problem
/// order. Distances are averaged over roles, cells and regions.
pub fn multiplication_diagnostic(
    codebook: &GridCodebook,
    attention: &AttentionWeights,
    data: &DatasetSplit,
) -> Result<OpDistances> {
    let plan = SelectionPlan::new(&Selection::FMax, attention)?;
    let roles = |problems: &[&Problem], role: usize| -> Result<Vec<Vec<f64>>> {
        problems
            .iter()
            .map(|p| {
                let Problem::Arithmetic(a) = p else {
                    return Err(Error::InvalidConfig("the diagnostic needs arithmetic problems".into()));
                };
                let pt: Point = [a.a, a.b, a.c][role];
                Ok(plan.apply(&codebook.encode(pt)?.values))
            })
            .collect()
    };
    let mut out = [0.0; 2];
    for (slot, op) in [ArithmeticOp::Add, ArithmeticOp::Multiply].into_iter().enumerate() {
        let train = of_op(&data.train, op);
        if train.is_empty() || data.tests.is_empty() {
            return Err(Error::Empty("the diagnostic needs training and test problems of both operations".into()));
        }
        let train_roles = (0..3).map(|role| roles(&train, role)).collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (_, tests) in &data.tests {
            let test = of_op(tests, op);
            let n = train.len().min(test.len());
            if n == 0 {
                return Err(Error::Empty("a test region has no problems of one operation".into()));
            }
            for (role, a) in train_roles.iter().enumerate() {
                let b = roles(&test, role)?;
                for cell in 0..plan.output_dim() {
                    let qa = quantiles(a.iter().map(|r| r[cell]).collect(), n);
                    let qb = quantiles(b.iter().map(|r| r[cell]).collect(), n);
                    total += cosine_distance(qa.into_iter(), qb.into_iter());
                    count += 1;
                }
            }
        }
        out[slot] = total / count as f64;
    }
    Ok(OpDistances { add: out[0], multiply: out[1] })
}

fn of_op(problems: &[Problem], op: ArithmeticOp) -> Vec<&Problem> {
    problems.iter().filter(|p| p.op() == Some(op)).collect()
}

/// The sorted values at `n` evenly spaced ranks; `n <= values.len()`.
fn quantiles(mut values: Vec<f64>, n: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    (0..n).map(|i| values[i * values.len() / n]).collect()
}

/// `1 − cos(u, v)`; zero when either vector vanishes and they are equal.
fn cosine_distance(u: impl Iterator<Item = f64>, v: impl Iterator<Item = f64>) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return if nu == nv { 0.0 } else { 1.0 };
    }
    1.0 - dot / (nu.sqrt() * nv.sqrt())
}

//! Analogy and arithmetic problems over integer grid points.
//!
//! Every problem carries its correct answer, six foils, and the position
//! (`target`) of the answer among the seven candidates; candidate order is
//! fixed at generation time from the dataset seed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, stream, Rng};

pub type Point = [i64; 2];

pub const NUM_CANDIDATES: usize = 7;
pub const NUM_FOILS: usize = NUM_CANDIDATES - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum RegionKind {
    Training,
    Translation(u32),
    Scaling(u32),
    ArithmeticRegion(u32),
}

/// An inclusive integer square `[lo, hi]²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub kind: RegionKind,
    pub lo: i64,
    pub hi: i64,
}

impl Region {
    pub fn training(m: i64) -> Self {
        Region { kind: RegionKind::Training, lo: 0, hi: m - 1 }
    }

    pub fn translation(m: i64, k: u32) -> Self {
        let k64 = i64::from(k);
        Region { kind: RegionKind::Translation(k), lo: k64 * m, hi: (k64 + 1) * m - 1 }
    }

    pub fn scaling(m: i64, k: u32) -> Self {
        Region { kind: RegionKind::Scaling(k), lo: 0, hi: i64::from(k) * m - 1 }
    }

    /// Bounds apply to the answer `C`.
    pub fn arithmetic(m: i64, k: u32) -> Self {
        let k64 = i64::from(k);
        Region { kind: RegionKind::ArithmeticRegion(k), lo: k64 * m, hi: (k64 + 1) * m - 1 }
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.lo..=self.hi).contains(&p[0]) && (self.lo..=self.hi).contains(&p[1])
    }

    pub fn side(&self) -> i64 {
        self.hi - self.lo + 1
    }

    pub fn index(&self) -> Option<u32> {
        match self.kind {
            RegionKind::Training => None,
            RegionKind::Translation(k) | RegionKind::Scaling(k) | RegionKind::ArithmeticRegion(k) => Some(k),
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        [rng.gen_range(self.lo..=self.hi), rng.gen_range(self.lo..=self.hi)]
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            None => write!(f, "train"),
            Some(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithmeticOp {
    Add,
    Multiply,
}

impl ArithmeticOp {
    pub fn apply(self, a: Point, b: Point) -> Point {
        match self {
            ArithmeticOp::Add => [a[0] + b[0], a[1] + b[1]],
            ArithmeticOp::Multiply => [a[0] * b[0], a[1] * b[1]],
        }
    }

    pub fn onehot(self) -> [f64; 2] {
        match self {
            ArithmeticOp::Add => [1.0, 0.0],
            ArithmeticOp::Multiply => [0.0, 1.0],
        }
    }

    fn for_index(i: usize) -> Self {
        if i.is_multiple_of(2) {
            ArithmeticOp::Add
        } else {
            ArithmeticOp::Multiply
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyProblem {
    pub a: Point,
    pub b: Point,
    pub c: Point,
    pub d: Point,
    pub foils: Vec<Point>,
    pub region: Region,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticProblem {
    pub a: Point,
    pub b: Point,
    pub op: ArithmeticOp,
    pub c: Point,
    pub foils: Vec<Point>,
    pub region: Region,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Problem {
    Analogy(AnalogyProblem),
    Arithmetic(ArithmeticProblem),
}

impl Problem {
    /// Stimuli preceding the candidate: `[A, B, C]` or `[A, B]`.
    pub fn context(&self) -> Vec<Point> {
        match self {
            Problem::Analogy(p) => vec![p.a, p.b, p.c],
            Problem::Arithmetic(p) => vec![p.a, p.b],
        }
    }

    pub fn answer(&self) -> Point {
        match self {
            Problem::Analogy(p) => p.d,
            Problem::Arithmetic(p) => p.c,
        }
    }

    pub fn foils(&self) -> &[Point] {
        match self {
            Problem::Analogy(p) => &p.foils,
            Problem::Arithmetic(p) => &p.foils,
        }
    }

    pub fn target(&self) -> usize {
        match self {
            Problem::Analogy(p) => p.target,
            Problem::Arithmetic(p) => p.target,
        }
    }

    pub fn region(&self) -> Region {
        match self {
            Problem::Analogy(p) => p.region,
            Problem::Arithmetic(p) => p.region,
        }
    }

    pub fn op(&self) -> Option<ArithmeticOp> {
        match self {
            Problem::Analogy(_) => None,
            Problem::Arithmetic(p) => Some(p.op),
        }
    }

    /// Foils with the answer inserted at `target`.
    pub fn candidates(&self) -> [Point; NUM_CANDIDATES] {
        let mut out = [[0, 0]; NUM_CANDIDATES];
        let mut foils = self.foils().iter();
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = if i == self.target() { self.answer() } else { *foils.next().expect("six foils") };
        }
        out
    }

    /// Every point the problem mentions.
    pub fn points(&self) -> Vec<Point> {
        let mut p = self.context();
        p.extend_from_slice(&self.candidates());
        p
    }

    /// Checks the structural invariants of the problem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("invalid problem: {m}")));
        if self.foils().len() != NUM_FOILS || self.target() >= NUM_CANDIDATES {
            return bad("needs six foils and a target in 0..7".into());
        }
        let answer = self.answer();
        let distinct: HashSet<Point> = self.foils().iter().copied().collect();
        if distinct.len() != NUM_FOILS || distinct.contains(&answer) {
            return bad("foils must be distinct and differ from the answer".into());
        }
        let region = self.region();
        match self {
            Problem::Analogy(p) => {
                if [p.d[0] - p.c[0], p.d[1] - p.c[1]] != [p.b[0] - p.a[0], p.b[1] - p.a[1]] {
                    return bad("D - C must equal B - A".into());
                }
                if let Some(x) = [p.a, p.b, p.c, p.d].iter().chain(&p.foils).find(|x| !region.contains(**x)) {
                    return bad(format!("point {x:?} outside region {region}"));
                }
            }
            Problem::Arithmetic(p) => {
                if p.op.apply(p.a, p.b) != p.c {
                    return bad("C must equal op(A, B)".into());
                }
                if let Some(x) = std::iter::once(&p.c).chain(&p.foils).find(|x| !region.contains(**x)) {
                    return bad(format!("point {x:?} outside region {region}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Problem>,
    pub validation: Vec<Problem>,
    /// Test problems per region, in region order.
    pub tests: Vec<(Region, Vec<Problem>)>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Translation,
    Scaling,
}

fn sample_foils(rng: &mut Rng, region: &Region, answer: Point) -> Result<Vec<Point>> {
    if region.side() * region.side() < NUM_CANDIDATES as i64 {
        return Err(Error::Infeasible {
            requested: NUM_CANDIDATES,
            available: (region.side() * region.side()) as usize,
        });
    }
    let mut foils = Vec::with_capacity(NUM_FOILS);
    while foils.len() < NUM_FOILS {
        let g = region.sample(rng);
        if g != answer && !foils.contains(&g) {
            foils.push(g);
        }
    }
    Ok(foils)
}

/// Valid range for an anchor `x` such that `x` and `x + d` lie in `[0, m-1]`.
fn anchor_range(m: i64, d: i64) -> std::ops::RangeInclusive<i64> {
    0.max(-d)..=(m - 1).min(m - 1 - d)
}

/// `(A, B, C, D)` with uniform displacement, then uniform valid anchors.
fn sample_analogy_tuple(rng: &mut Rng, m: i64) -> [Point; 4] {
    let v = [rng.gen_range(-(m - 1)..=m - 1), rng.gen_range(-(m - 1)..=m - 1)];
    let pick = |rng: &mut Rng| [rng.gen_range(anchor_range(m, v[0])), rng.gen_range(anchor_range(m, v[1]))];
    let a = pick(rng);
    let c = pick(rng);
    [a, [a[0] + v[0], a[1] + v[1]], c, [c[0] + v[0], c[1] + v[1]]]
}

/// Number of distinct `(A, B, C, D)` tuples inside `[0, m-1]²`.
pub fn analogy_tuple_count(m: i64) -> u128 {
    let per_axis: u128 = (-(m - 1)..=m - 1).map(|d| ((m - d.abs()) as u128).pow(2)).sum();
    per_axis * per_axis
}

fn all_analogy_tuples(m: i64) -> Vec<[Point; 4]> {
    let mut out = Vec::new();
    for dx in -(m - 1)..=m - 1 {
        for dy in -(m - 1)..=m - 1 {
            let (rx, ry) = (anchor_range(m, dx), anchor_range(m, dy));
            for ax in rx.clone() {
                for ay in ry.clone() {
                    for cx in rx.clone() {
                        for cy in ry.clone() {
                            out.push([[ax, ay], [ax + dx, ay + dy], [cx, cy], [cx + dx, cy + dy]]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn analogy_problem(tuple: [Point; 4], region: Region, rng: &mut Rng) -> Result<Problem> {
    let [a, b, c, d] = tuple;
    let foils = sample_foils(rng, &region, d)?;
    let target = rng.gen_range(0..NUM_CANDIDATES);
    Ok(Problem::Analogy(AnalogyProblem { a, b, c, d, foils, region, target }))
}

/// Training and validation analogies over `[0, m-1]²`, all tuples distinct.
/// When the request equals the number of tuples that exist, every tuple is
/// enumerated instead of sampled.
pub fn gen_analogy_training(m: i64, n_train: usize, n_val: usize, seed: u64) -> Result<DatasetSplit> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("analogies need M >= 2, got {m}")));
    }
    let wanted = n_train + n_val;
    let available = analogy_tuple_count(m);
    if wanted as u128 > available {
        return Err(Error::Infeasible { requested: wanted, available: available.min(usize::MAX as u128) as usize });
    }
    let mut rng = stream(seed, "analogy.tuples");
    let tuples = if wanted as u128 == available {
        let mut all = all_analogy_tuples(m);
        all.shuffle(&mut rng);
        all
    } else {
        let mut seen = HashSet::with_capacity(wanted);
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let t = sample_analogy_tuple(&mut rng, m);
            if seen.insert(t) {
                out.push(t);
            }
        }
        out
    };
    let region = Region::training(m);
    let problems = tuples
        .into_iter()
        .enumerate()
        .map(|(i, t)| analogy_problem(t, region, &mut indexed_stream(seed, "analogy.train", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut train = problems;
    let validation = train.split_off(n_train);
    Ok(DatasetSplit { train, validation, tests: Vec::new(), seed })
}

fn check_regions(m: i64, ks: &[u32], coverage: u32, region: impl Fn(i64, u32) -> Region) -> Result<Vec<Region>> {
    ks.iter()
        .map(|&k| {
            let r = region(m, k);
            if k == 0 || r.hi >= i64::from(coverage) {
                return Err(Error::OutOfCoverage { x: r.hi, y: r.hi, extent: coverage });
            }
            Ok(r)
        })
        .collect()
}

/// Fresh training-style analogies moved into each region of `regime`.
pub fn gen_analogy_tests(
    m: i64,
    ks: &[u32],
    n_per_region: usize,
    regime: Regime,
    coverage: u32,
    seed: u64,
) -> Result<Vec<(Region, Vec<Problem>)>> {
    let regions = match regime {
        Regime::Translation => check_regions(m, ks, coverage, Region::translation)?,
        Regime::Scaling => check_regions(m, ks, coverage, Region::scaling)?,
    };
    regions
        .into_iter()
        .map(|region| {
            let k = i64::from(region.index().expect("test region"));
            let label = format!("analogy.test.{regime:?}.{k}");
            let mut rng = stream(seed, &label);
            let problems = (0..n_per_region)
                .map(|i| {
                    let moved = sample_analogy_tuple(&mut rng, m).map(|p| match regime {
                        Regime::Translation => [p[0] + k * m, p[1] + k * m],
                        Regime::Scaling => [p[0] * k, p[1] * k],
                    });
                    analogy_problem(moved, region, &mut indexed_stream(seed, &label, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((region, problems))
        })
        .collect()
}

/// Per-coordinate pairs `(a, b)`, `a, b ∈ [0, range)`, whose result lands in `[lo, hi]`.
fn coordinate_pairs(op: ArithmeticOp, range: i64, lo: i64, hi: i64) -> u128 {
    let span = |from: i64, to: i64| if to < from { 0 } else { (to - from + 1) as u128 };
    (0..range)
        .map(|a| match op {
            ArithmeticOp::Add => span((lo - a).max(0), (hi - a).min(range - 1)),
            ArithmeticOp::Multiply if a == 0 => {
                if lo <= 0 {
                    range as u128
                } else {
                    0
                }
            }
            ArithmeticOp::Multiply => span(((lo + a - 1) / a).max(0), (hi / a).min(range - 1)),
        })
        .sum()
}

/// Rejection sampling budget shared by the arithmetic generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionBudget {
    /// Maximum candidate draws per region (or per training split).
    pub max_draws: u64,
}

impl Default for RejectionBudget {
    fn default() -> Self {
        RejectionBudget { max_draws: 2_000_000_000 }
    }
}

struct CoordinateSampler {
    draws: u64,
    budget: u64,
    accepted: u64,
}

impl CoordinateSampler {
    /// Rejection-samples `a, b ∈ [0, range)` until `op(a, b) ∈ [lo, hi]`.
    /// The region is a product of per-axis intervals, so sampling each axis
    /// separately is exactly joint rejection sampling.
    fn pair(&mut self, rng: &mut Rng, op: ArithmeticOp, range: i64, lo: i64, hi: i64) -> Result<(i64, i64)> {
        loop {
            if self.draws >= self.budget {
                return Err(Error::RejectionBudget {
                    budget: self.budget,
                    accepted: self.accepted,
                    rate: self.accepted as f64 / self.draws.max(1) as f64,
                });
            }
            self.draws += 1;
            let (a, b) = (rng.gen_range(0..range), rng.gen_range(0..range));
            let c = op.apply([a, 0], [b, 0])[0];
            if (lo..=hi).contains(&c) {
                self.accepted += 1;
                return Ok((a, b));
            }
        }
    }

    fn point_pair(&mut self, rng: &mut Rng, op: ArithmeticOp, range: i64, region: &Region) -> Result<(Point, Point)> {
        let (ax, bx) = self.pair(rng, op, range, region.lo, region.hi)?;
        let (ay, by) = self.pair(rng, op, range, region.lo, region.hi)?;
        Ok(([ax, ay], [bx, by]))
    }
}

fn arithmetic_problem(a: Point, b: Point, op: ArithmeticOp, region: Region, rng: &mut Rng) -> Result<Problem> {
    let c = op.apply(a, b);
    let foils = sample_foils(rng, &region, c)?;
    let target = rng.gen_range(0..NUM_CANDIDATES);
    Ok(Problem::Arithmetic(ArithmeticProblem { a, b, op, c, foils, region, target }))
}

/// Diagnostics of one arithmetic generation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    /// Fraction of per-axis draws accepted, keyed by split or region label.
    pub per_split: BTreeMap<String, f64>,
}

/// Arithmetic problems: training/validation with `A, B, C ∈ [0, m-1]²`
/// (distinct `(A, B, op)` tuples), and per test region `K` problems whose
/// answer lies in `[K·m, (K+1)·m - 1]²` with `A, B` anywhere in coverage.
/// Every list alternates add and multiply, so counts must be even.
#[allow(clippy::too_many_arguments)]
pub fn gen_arithmetic(
    m: i64,
    n_train: usize,
    n_val: usize,
    n_per_region: usize,
    ks: &[u32],
    coverage: u32,
    budget: RejectionBudget,
    seed: u64,
) -> Result<(DatasetSplit, AcceptanceRates)> {
    if m < 3 {
        return Err(Error::InvalidConfig(format!("arithmetic needs M >= 3, got {m}")));
    }
    if [n_train, n_val, n_per_region].iter().any(|n| n % 2 == 1) {
        return Err(Error::InvalidConfig("arithmetic counts must be even (half add, half multiply)".into()));
    }
    let mut rates = AcceptanceRates::default();
    let train_region = Region::training(m);
    let wanted = n_train + n_val;
    for op in [ArithmeticOp::Add, ArithmeticOp::Multiply] {
        let available = coordinate_pairs(op, m, 0, m - 1).pow(2);
        if (wanted / 2) as u128 > available {
            return Err(Error::Infeasible { requested: wanted / 2, available: available as usize });
        }
    }

    let mut rng = stream(seed, "arithmetic.tuples");
    let mut sampler = CoordinateSampler { draws: 0, budget: budget.max_draws, accepted: 0 };
    let mut seen = HashSet::with_capacity(wanted);
    let mut problems = Vec::with_capacity(wanted);
    while problems.len() < wanted {
        let op = ArithmeticOp::for_index(problems.len());
        let (a, b) = sampler.point_pair(&mut rng, op, m, &train_region)?;
        if seen.insert((a, b, op)) {
            let i = problems.len() as u64;
            problems.push(arithmetic_problem(
                a,
                b,
                op,
                train_region,
                &mut indexed_stream(seed, "arithmetic.train", i),
            )?);
        }
    }
    rates.per_split.insert("train".into(), sampler.accepted as f64 / sampler.draws as f64);
    // Alternating ops means both halves keep equal add/multiply counts.
    let validation = problems.split_off(n_train);
    let train = problems;

    let regions = check_regions(m, ks, coverage, Region::arithmetic)?;
    let range = i64::from(coverage);
    let mut tests = Vec::with_capacity(regions.len());
    for region in regions {
        let label = format!("arithmetic.test.{region}");
        let mut rng = stream(seed, &label);
        let mut sampler = CoordinateSampler { draws: 0, budget: budget.max_draws, accepted: 0 };
        let list = (0..n_per_region)
            .map(|i| {
                let op = ArithmeticOp::for_index(i);
                let (a, b) = sampler.point_pair(&mut rng, op, range, &region)?;
                arithmetic_problem(a, b, op, region, &mut indexed_stream(seed, &label, i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        rates.per_split.insert(region.to_string(), sampler.accepted as f64 / sampler.draws.max(1) as f64);
        tests.push((region, list));
    }
    Ok((DatasetSplit { train, validation, tests, seed }, rates))
}

/// The seven scored sequences of one problem, each `len × dim`, and the
/// index of the correct one.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequences {
    pub sequences: Vec<crate::Tensor>,
    pub target: usize,
}

/// Turns problems into candidate sequences: `(A, B, C, candidate)` for
/// analogies and `(A, B, candidate)` with the operation one-hot appended to
/// every step for arithmetic.
pub fn problems_to_sequences(
    problems: &[Problem],
    codebook: &crate::gridcode::GridCodebook,
    plan: &crate::dppa::SelectionPlan,
) -> Result<Vec<ScoredSequences>> {
    problems
        .iter()
        .map(|p| {
            let feature = |pt: Point| -> Result<Vec<f64>> {
                let mut v = plan.apply(&codebook.encode(pt)?.values);
                if let Some(op) = p.op() {
                    v.extend_from_slice(&op.onehot());
                }
                Ok(v)
            };
            let context = p.context().into_iter().map(feature).collect::<Result<Vec<_>>>()?;
            let sequences = p
                .candidates()
                .iter()
                .map(|&c| {
                    let mut rows = context.clone();
                    rows.push(feature(c)?);
                    Ok(crate::Tensor::from_rows(&rows))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoredSequences { sequences, target: p.target() })
        })
        .collect()
}

/// One JSON object per line.
pub fn write_jsonl(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut bytes = Vec::new();
    for p in problems {
        serde_json::to_writer(&mut bytes, p)?;
        bytes.write_all(b"\n")?;
    }
    crate::artifact::write_atomic(path, &bytes)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Problem>> {
    let f = fs::File::open(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem =
            serde_json::from_str(&line).map_err(|e| Error::Artifact(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(p);
    }
    Ok(out)
}

//! What the page computes, as plain Rust so it can be tested natively.

use serde::Serialize;

use griddpp::dppa::{fit_attention, KernelConfig};
use griddpp::gridcode::GridCodebook;
use griddpp::nn::AdamConfig;
use griddpp::tasks::{gen_analogy_tests, gen_analogy_training, Problem, Regime};
use griddpp::trainer::grid_kernel;
use griddpp::{Error, Result};

/// Activation of one cell over a `res × res` raster of pixel centres
/// covering `[x0, x0 + span) × [y0, y0 + span)`, row-major with y down.
pub fn activation_map(book: &GridCodebook, cell: usize, origin: [f64; 2], span: f64, res: usize) -> Result<Vec<f64>> {
    if cell >= book.num_cells() {
        return Err(Error::InvalidConfig(format!("cell {cell} out of range (0..{})", book.num_cells())));
    }
    if res == 0 || !(span > 0.0) {
        return Err(Error::InvalidConfig("raster needs a positive size".into()));
    }
    let mut all = vec![0.0; book.num_cells()];
    let step = span / res as f64;
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        for i in 0..res {
            let p = [origin[0] + (i as f64 + 0.5) * step, origin[1] + (j as f64 + 0.5) * step];
            book.response_at(p, &mut all);
            out.push(all[cell]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct FitView {
    pub m: i64,
    pub steps: usize,
    pub per_frequency_objective: Vec<f64>,
    /// `F̂_f / max_f F̂_f`, for bar heights.
    pub relative: Vec<f64>,
    pub f_max: usize,
    /// Mean attention weight within each band.
    pub band_weight: Vec<f64>,
    pub trace: Vec<f64>,
}

/// Kernel over the `m × m` training square, then attention fitting.
pub fn fit(book: &GridCodebook, m: i64, steps: usize, learning_rate: f64) -> Result<FitView> {
    let kernel = grid_kernel(book, m, &KernelConfig::default())?;
    let fit = fit_attention(&kernel, steps, &AdamConfig::new(learning_rate))?;
    let a = fit.attention;
    let top = a.per_frequency_objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bs = a.block_size;
    Ok(FitView {
        m,
        steps,
        relative: a.per_frequency_objective.iter().map(|v| v / top).collect(),
        band_weight: a.w.chunks(bs).map(|c| c.iter().sum::<f64>() / bs as f64).collect(),
        per_frequency_objective: a.per_frequency_objective,
        f_max: a.f_max,
        trace: fit.trace,
    })
}

/// One analogy in region `k` (0 is the training square).
pub fn analogy(m: i64, k: u32, scaling: bool, seed: u64) -> Result<Problem> {
    if k == 0 {
        return Ok(gen_analogy_training(m, 1, 1, seed)?.train.remove(0));
    }
    let regime = if scaling { Regime::Scaling } else { Regime::Translation };
    let mut tests = gen_analogy_tests(m, &[k], 1, regime, 1000, seed)?;
    Ok(tests.remove(0).1.remove(0))
}

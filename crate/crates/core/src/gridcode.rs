//! Grid-cell population codes for 2-D integer points.
//!
//! A cell with spatial frequency `F` and phase offset `o` responds to a point
//! `A` with `max(0, Σ_k cos(b_k · (F·A + o)))`, where `b_0, b_1, b_2` are unit
//! vectors at 0, π/3 and 2π/3. Cells are grouped into frequency bands; band
//! `f` occupies the contiguous index range `[f·N_p, (f+1)·N_p)`.

use std::f64::consts::PI;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BASIS_ANGLES: [f64; 3] = [0.0, PI / 3.0, 2.0 * PI / 3.0];
pub const CODEBOOK_FORMAT: &str = "griddpp.codebook";
pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridCodeConfig {
    pub num_frequencies: usize,
    pub num_phases: usize,
    /// Radians per unit distance of the lowest band.
    pub base_frequency: f64,
    pub frequency_scaling: f64,
    /// Side of the square `[0, coverage_extent)^2` that may be encoded.
    pub coverage_extent: u32,
}

impl Default for GridCodeConfig {
    fn default() -> Self {
        GridCodeConfig {
            num_frequencies: 9,
            num_phases: 100,
            base_frequency: 0.0028 * 2.0 * PI,
            frequency_scaling: 2f64.sqrt(),
            coverage_extent: 1000,
        }
    }
}

impl GridCodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::InvalidConfig("num_frequencies must be at least 1".into()));
        }
        if self.num_phases == 0 || phase_side(self.num_phases).is_none() {
            return Err(Error::InvalidConfig(format!(
                "num_phases must be a positive perfect square, got {}",
                self.num_phases
            )));
        }
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            return Err(Error::InvalidConfig(format!("base_frequency must be positive, got {}", self.base_frequency)));
        }
        if !(self.frequency_scaling > 0.0 && self.frequency_scaling.is_finite()) {
            return Err(Error::InvalidConfig("frequency_scaling must be positive".into()));
        }
        if self.coverage_extent == 0 {
            return Err(Error::InvalidConfig("coverage_extent must be positive".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.num_frequencies * self.num_phases
    }

    pub fn frequency(&self, band: usize) -> f64 {
        self.base_frequency * self.frequency_scaling.powi(band as i32)
    }
}

fn phase_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub frequency: usize,
    pub phase: usize,
    /// Phase-space offset added to `F·A` (radians).
    pub offset: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct GridCodebook {
    config: GridCodeConfig,
    frequencies: Vec<f64>,
    cells: Vec<GridCell>,
    basis: [[f64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEmbedding {
    pub values: Vec<f64>,
    pub source_point: [i64; 2],
}

/// Phase-space period lattice of the three-cosine pattern: the two vectors
/// `a` with `b_0·a, b_1·a ∈ 2πZ` (and hence `b_2·a` as well).
pub fn phase_lattice() -> [[f64; 2]; 2] {
    let b = basis();
    // Invert [b0; b1] and scale its columns by 2π.
    let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
    let inv = [[b[1][1] / det, -b[0][1] / det], [-b[1][0] / det, b[0][0] / det]];
    let s = 2.0 * PI;
    [[s * inv[0][0], s * inv[1][0]], [s * inv[0][1], s * inv[1][1]]]
}

fn basis() -> [[f64; 2]; 3] {
    BASIS_ANGLES.map(|a| [a.cos(), a.sin()])
}

pub fn build_codebook(config: &GridCodeConfig) -> Result<GridCodebook> {
    config.validate()?;
    let side = phase_side(config.num_phases).expect("validated");
    let lattice = phase_lattice();
    let frequencies: Vec<f64> = (0..config.num_frequencies).map(|f| config.frequency(f)).collect();
    let mut cells = Vec::with_capacity(config.num_cells());
    for f in 0..config.num_frequencies {
        for p in 0..config.num_phases {
            let (i, j) = ((p / side) as f64 / side as f64, (p % side) as f64 / side as f64);
            let offset = [i * lattice[0][0] + j * lattice[1][0], i * lattice[0][1] + j * lattice[1][1]];
            cells.push(GridCell { frequency: f, phase: p, offset });
        }
    }
    Ok(GridCodebook { config: config.clone(), frequencies, cells, basis: basis() })
}

impl GridCodebook {
    pub fn config(&self) -> &GridCodeConfig {
        &self.config
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn basis(&self) -> &[[f64; 2]; 3] {
        &self.basis
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_bands(&self) -> usize {
        self.frequencies.len()
    }

    pub fn band_size(&self) -> usize {
        self.config.num_phases
    }

    pub fn band(&self, f: usize) -> Range<usize> {
        let n = self.config.num_phases;
        f * n..(f + 1) * n
    }

    /// Offset of a cell expressed as a spatial displacement (`offset / F`).
    pub fn spatial_offset(&self, cell: usize) -> [f64; 2] {
        let c = &self.cells[cell];
        let freq = self.frequencies[c.frequency];
        [c.offset[0] / freq, c.offset[1] / freq]
    }

    /// Spatial period vectors of band `f`: translating any point by an
    /// integer combination of these leaves every cell of the band unchanged.
    pub fn period_vectors(&self, f: usize) -> [[f64; 2]; 2] {
        let freq = self.frequencies[f];
        phase_lattice().map(|a| [a[0] / freq, a[1] / freq])
    }

    pub fn in_coverage(&self, point: [i64; 2]) -> bool {
        let e = i64::from(self.config.coverage_extent);
        (0..e).contains(&point[0]) && (0..e).contains(&point[1])
    }

    fn check_coverage(&self, point: [i64; 2]) -> Result<()> {
        if self.in_coverage(point) {
            Ok(())
        } else {
            Err(Error::OutOfCoverage { x: point[0], y: point[1], extent: self.config.coverage_extent })
        }
    }

    /// Responses at an arbitrary real position, without coverage checks.
    /// `encode` is this function restricted to covered integer points.
    pub fn response_at(&self, position: [f64; 2], out: &mut [f64]) {
        assert_eq!(out.len(), self.cells.len());
        for (f, &freq) in self.frequencies.iter().enumerate() {
            let base = [freq * position[0], freq * position[1]];
            for idx in self.band(f) {
                let o = self.cells[idx].offset;
                let phi = [base[0] + o[0], base[1] + o[1]];
                let s: f64 = self.basis.iter().map(|b| (b[0] * phi[0] + b[1] * phi[1]).cos()).sum();
                out[idx] = s.max(0.0);
            }
        }
    }

    pub fn encode(&self, point: [i64; 2]) -> Result<GridEmbedding> {
        self.check_coverage(point)?;
        let mut values = vec![0.0; self.cells.len()];
        self.response_at([point[0] as f64, point[1] as f64], &mut values);
        Ok(GridEmbedding { values, source_point: point })
    }

    /// Row `i` of the result is `encode(points[i])`.
    pub fn encode_batch(&self, points: &[[i64; 2]]) -> Result<Tensor> {
        if let Some(&p) = points.iter().find(|&&p| !self.in_coverage(p)) {
            self.check_coverage(p)?;
        }
        let n = self.cells.len();
        let mut out = Tensor::zeros(points.len(), n);
        if n > 0 {
            out.data_mut().par_chunks_mut(n).zip(points.par_iter()).for_each(|(row, p)| {
                self.response_at([p[0] as f64, p[1] as f64], row);
            });
        }
        Ok(out)
    }

    pub fn to_document(&self) -> CodebookDocument {
        CodebookDocument {
            format: CODEBOOK_FORMAT.to_string(),
            version: CODEBOOK_VERSION,
            config: self.config.clone(),
            frequencies: self.frequencies.clone(),
            basis_angles: BASIS_ANGLES.to_vec(),
            offsets: self.cells.iter().map(|c| c.offset).collect(),
        }
    }

    pub fn from_document(doc: &CodebookDocument) -> Result<Self> {
        if doc.format != CODEBOOK_FORMAT || doc.version != CODEBOOK_VERSION {
            return Err(Error::Artifact(format!("unsupported codebook document {} v{}", doc.format, doc.version)));
        }
        let book = build_codebook(&doc.config)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        let consistent = doc.frequencies.len() == book.frequencies.len()
            && doc.frequencies.iter().zip(&book.frequencies).all(|(&a, &b)| close(a, b))
            && doc.basis_angles.len() == 3
            && doc.basis_angles.iter().zip(BASIS_ANGLES).all(|(&a, b)| close(a, b))
            && doc.offsets.len() == book.cells.len()
            && doc.offsets.iter().zip(&book.cells).all(|(o, c)| close(o[0], c.offset[0]) && close(o[1], c.offset[1]));
        if !consistent {
            return Err(Error::Artifact("codebook document disagrees with its own config".into()));
        }
        Ok(book)
    }

    pub fn content_hash(&self) -> String {
        crate::artifact::hash_json(&self.to_document())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookDocument {
    pub format: String,
    pub version: u32,
    pub config: GridCodeConfig,
    pub frequencies: Vec<f64>,
    pub basis_angles: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

//! WebAssembly bindings for the demo page in `www/`.

pub mod demo;

use std::sync::OnceLock;

use wasm_bindgen::prelude::*;

use griddpp::gridcode::{build_codebook, GridCodeConfig, GridCodebook};

fn book() -> &'static GridCodebook {
    static BOOK: OnceLock<GridCodebook> = OnceLock::new();
    BOOK.get_or_init(|| build_codebook(&GridCodeConfig::default()).expect("default config is valid"))
}

fn js_err(e: griddpp::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn num_bands() -> usize {
    book().num_bands()
}

#[wasm_bindgen]
pub fn band_size() -> usize {
    book().band_size()
}

/// Spatial period lengths of each band, for labels.
#[wasm_bindgen]
pub fn band_periods() -> Vec<f64> {
    (0..book().num_bands())
        .map(|f| {
            let [p, _] = book().period_vectors(f);
            p[0].hypot(p[1])
        })
        .collect()
}

#[wasm_bindgen]
pub fn activation_map(band: usize, phase: usize, x0: f64, y0: f64, span: f64, res: usize) -> Result<Vec<f64>, JsError> {
    let cell = band * book().band_size() + phase;
    demo::activation_map(book(), cell, [x0, y0], span, res).map_err(js_err)
}

/// JSON of [`demo::FitView`].
#[wasm_bindgen]
pub fn fit_dpp(m: i32, steps: usize, learning_rate: f64) -> Result<String, JsError> {
    let view = demo::fit(book(), i64::from(m), steps, learning_rate).map_err(js_err)?;
    Ok(serde_json::to_string(&view).expect("plain data"))
}

/// JSON of one analogy problem.
#[wasm_bindgen]
pub fn analogy(m: i32, k: u32, scaling: bool, seed: u32) -> Result<String, JsError> {
    let p = demo::analogy(i64::from(m), k, scaling, u64::from(seed)).map_err(js_err)?;
    Ok(serde_json::to_string(&p).expect("plain data"))
}

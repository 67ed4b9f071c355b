//! Browser bindings: scan responses, token counts and gate weights.
//!
//! The `*_json` functions are plain Rust and return JSON text; the exported
//! wrappers turn their errors into JavaScript exceptions.

use eegmamba::moe::{top_k_indices, top_k_softmax};
use eegmamba::ssm::{discretize, selective_scan_sequential};
use eegmamba::st_adaptive::TokenizerConfig;
use eegmamba::Tensor;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Output of a single-channel, single-state selective scan with constant
/// step `delta`, decay `a < 0`, input gain `b` and readout `c`, driven by a
/// unit impulse (`step = false`) or a unit step.
pub fn scan_response_values(delta: f64, a: f64, b: f64, c: f64, len: usize, step: bool) -> Result<Vec<f64>, String> {
    if len == 0 || len > 1 << 16 {
        return Err(format!("length must lie in 1..=65536, got {len}"));
    }
    if !(delta > 0.0) || !(a < 0.0) {
        return Err("delta must be positive and a negative".into());
    }
    let t = |shape: [usize; 3], v: f64| Tensor::<f64>::full(shape, v);
    let x = Tensor::new([1, len, 1], (0..len).map(|i| if step || i == 0 { 1.0 } else { 0.0 }).collect())
        .map_err(|e| e.to_string())?;
    let a = Tensor::full([1, 1], a);
    let (abar, bbar) = discretize(&t([1, len, 1], delta), &a, &t([1, len, 1], b)).map_err(|e| e.to_string())?;
    let y = selective_scan_sequential(&abar, &bbar, &x, &t([1, len, 1], c), None).map_err(|e| e.to_string())?;
    Ok(y.data().to_vec())
}

/// Narrow, wide and total token counts (the total includes the class token).
pub fn token_counts_json(
    len: usize,
    small_kernel: usize,
    small_stride: usize,
    wide_kernel: usize,
    wide_stride: usize,
) -> Result<String, String> {
    let cfg = TokenizerConfig {
        spatial_kernel: 1,
        small_kernel,
        small_stride,
        wide_kernel,
        wide_stride,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let (narrow, wide) = cfg.token_count(len).map_err(|e| e.to_string())?;
    Ok(json!({ "narrow": narrow, "wide": wide, "total": narrow + wide + 1 }).to_string())
}

/// Top-k gate weights over `logits`, the selected experts and the
/// universal-expert weight `1 − max(weight)`.
pub fn gate_json(logits: &[f64], k: usize) -> Result<String, String> {
    if logits.is_empty() || k == 0 || k > logits.len() {
        return Err(format!("need 1 ≤ k ≤ {} experts, got k = {k}", logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err("logits must be finite".into());
    }
    let weights = top_k_softmax(logits, k);
    let mut selected = top_k_indices(logits, k);
    selected.sort_unstable();
    let max = weights.iter().copied().fold(0.0, f64::max);
    Ok(json!({ "weights": weights, "selected": selected, "universal": 1.0 - max }).to_string())
}

#[wasm_bindgen]
pub fn scan_response(delta: f64, a: f64, b: f64, c: f64, len: usize, step: bool) -> Result<Vec<f64>, JsError> {
    scan_response_values(delta, a, b, c, len, step).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn token_counts(
    len: usize,
    small_kernel: usize,
    small_stride: usize,
    wide_kernel: usize,
    wide_stride: usize,
) -> Result<String, JsError> {
    token_counts_json(len, small_kernel, small_stride, wide_kernel, wide_stride).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gate(logits: Vec<f64>, k: usize) -> Result<String, JsError> {
    gate_json(&logits, k).map_err(|e| JsError::new(&e))
}

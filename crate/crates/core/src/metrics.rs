use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine similarity of two equally shaped tensors, flattened.
pub fn cosine_similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "cosine similarity of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(cosine_slices(a.data(), b.data()))
}

/// Slice form of [`cosine_similarity`]; both all-zero gives 1.0, exactly one
/// all-zero gives 0.0. Accumulates in f64 in index order.
pub fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// Sequential mean, so the result does not depend on how the terms were produced.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Sinusoidal encoding at a possibly fractional position:
/// `PE[2i] = sin(pos / 10000^(2i/dim))`, `PE[2i+1] = cos(…)`.
pub fn positional_encoding_at(pos: f64, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even positive dim, got {dim}")));
    }
    if !(pos >= 0.0) {
        return Err(Error::invalid(format!("position must be non-negative, got {pos}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = pos / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(angle.sin() as f32);
        out.push(angle.cos() as f32);
    }
    Ok(out)
}

pub fn positional_encoding(pos: usize, dim: usize) -> Result<Vec<f32>> {
    positional_encoding_at(pos as f64, dim)
}

/// `[n, dim]` table for positions `0, rate, 2·rate, …`.
pub fn positional_table(n: usize, dim: usize, rate: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dim);
    for p in 0..n {
        data.extend(positional_encoding_at(p as f64 * rate, dim)?);
    }
    Tensor::new(vec![n, dim], data)
}

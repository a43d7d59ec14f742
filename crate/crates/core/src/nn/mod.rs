//! Minimal differentiable tensor engine: an eager reverse-mode tape,
//! dense/convolutional/recurrent layers, Adam, and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use conv::{Conv3dGeometry, ConvTranspose2dGeometry};
pub use graph::{softmax, softmax_in_place, Gradients, Graph, Var};
pub use layers::{lstm_forward, Conv1d, Conv3d, ConvTranspose2d, Linear, Lstm, LstmCell, LstmState};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Eager 3-D convolution of `input: [N, C, D, H, W]` with `kernel: [O, C, KD, KH, KW]`.
pub fn conv3d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, geometry: Conv3dGeometry) -> Result<Tensor> {
    let mut g = Graph::detached();
    let x = g.constant(input.clone());
    let w = g.constant(kernel.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let y = g.conv3d(x, w, b, geometry)?;
    Ok(g.tensor(y))
}

/// Runs an LSTM over a sequence of `[1, D]` rows.
pub fn lstm_over_rows(
    g: &mut Graph,
    lstm: &Lstm,
    rows: &[Var],
    initial: Option<&LstmState>,
) -> Result<(Var, LstmState)> {
    if rows.is_empty() {
        return Err(Error::invalid("LSTM input sequence is empty"));
    }
    let xs = g.concat_rows(rows)?;
    lstm_forward(g, lstm, xs, initial)
}

#[cfg(test)]
mod tests;

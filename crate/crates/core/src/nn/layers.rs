use rand::Rng;

use super::conv::{Conv3dGeometry, ConvTranspose2dGeometry};
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x · Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng)?;
        let bias = if bias {
            Some(store.uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// 3-D convolution over `[N, C, D, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: Conv3dGeometry,
}

impl Conv3d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geometry: Conv3dGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = store.uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            fan_in,
            rng,
        )?;
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv3d(x, w, Some(b), self.geometry)
    }
}

/// 1-D convolution over `[N, C, L]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv1d {
    /// Stride 1 with "same" padding (`kernel / 2`); `kernel` must be odd.
    pub fn same<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("`{name}`: same-padding needs an odd kernel, got {kernel}")));
        }
        let fan_in = in_channels * kernel;
        let weight = store.uniform(format!("{name}.weight"), &[out_channels, in_channels, kernel], fan_in, rng)?;
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), 1, self.padding)
    }
}

/// 2-D transposed convolution over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvTranspose2dGeometry,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvTranspose2dGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.uniform(
            format!("{name}.weight"),
            &[in_channels, out_channels, kernel, kernel],
            fan_in,
            rng,
        )?;
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.geometry)
    }
}

/// Per-layer (and per-direction) hidden and cell vectors, each `[1, H]`.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, slots: usize, hidden_dim: usize) -> Self {
        let hidden = (0..slots).map(|_| g.constant(Tensor::zeros(&[1, hidden_dim]))).collect();
        let cell = (0..slots).map(|_| g.constant(Tensor::zeros(&[1, hidden_dim]))).collect();
        Self { hidden, cell }
    }

    pub fn slots(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_finite(&self, g: &Graph) -> bool {
        self.hidden
            .iter()
            .chain(&self.cell)
            .all(|&v| g.value(v).iter().all(|x| x.is_finite()))
    }
}

/// Added to the uniform init of the forget-gate bias.
pub const FORGET_BIAS: f32 = 1.0;

/// One LSTM cell; gate order i, f, g, o.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.uniform(format!("{name}.w_ih"), &[4 * hidden_dim, input_dim], hidden_dim, rng)?;
        let w_hh = store.uniform(format!("{name}.w_hh"), &[4 * hidden_dim, hidden_dim], hidden_dim, rng)?;
        let bias = store.uniform(format!("{name}.bias"), &[4 * hidden_dim], hidden_dim, rng)?;
        store.get_mut(bias).data_mut()[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|v| *v += FORGET_BIAS);
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    /// Input projection for a whole sequence `[T, in] -> [T, 4H]`, bias included.
    pub fn project_inputs(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let w = g.param(self.w_ih);
        let b = g.param(self.bias);
        g.linear(xs, w, Some(b))
    }

    /// One step from a pre-projected input row `[1, 4H]`.
    pub fn step_projected(&self, g: &mut Graph, xproj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        let w_hh = g.param(self.w_hh);
        let rec = g.linear(h, w_hh, None)?;
        let gates = g.add(xproj, rec)?;
        let i = g.slice_cols(gates, 0, hd)?;
        let f = g.slice_cols(gates, hd, hd)?;
        let gg = g.slice_cols(gates, 2 * hd, hd)?;
        let o = g.slice_cols(gates, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, gg)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xp = self.project_inputs(g, x)?;
        self.step_projected(g, xp, h, c)
    }
}

/// Stacked, optionally bidirectional LSTM.
///
/// Cells and state slots are ordered `layer * directions + direction`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub cells: Vec<LstmCell>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Config(format!("`{name}`: LSTM dims and layer count must be positive")));
        }
        let dirs = if bidirectional { 2 } else { 1 };
        let mut cells = Vec::with_capacity(layers * dirs);
        for l in 0..layers {
            let in_dim = if l == 0 { input_dim } else { dirs * hidden_dim };
            for d in 0..dirs {
                let suffix = if d == 0 { "" } else { "_reverse" };
                cells.push(LstmCell::new(store, &format!("{name}.l{l}{suffix}"), in_dim, hidden_dim, rng)?);
            }
        }
        Ok(Self {
            cells,
            input_dim,
            hidden_dim,
            layers,
            bidirectional,
        })
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.directions() * self.hidden_dim
    }

    pub fn state_slots(&self) -> usize {
        self.layers * self.directions()
    }

    /// Runs the whole stack over `inputs: [T, input_dim]`.
    pub fn forward(&self, g: &mut Graph, inputs: Var, initial: Option<&LstmState>) -> Result<(Var, LstmState)> {
        lstm_forward(g, self, inputs, initial)
    }

    /// Single time step of a unidirectional stack: `x: [1, input_dim]`.
    pub fn step(&self, g: &mut Graph, x: Var, state: &LstmState) -> Result<LstmState> {
        if self.bidirectional {
            return Err(Error::invalid("step-wise execution needs a unidirectional LSTM"));
        }
        if state.slots() != self.layers {
            return Err(Error::shape(
                "lstm_step",
                format!("state has {} slots, stack has {} layers", state.slots(), self.layers),
            ));
        }
        let mut input = x;
        let mut hidden = Vec::with_capacity(self.layers);
        let mut cell = Vec::with_capacity(self.layers);
        for (l, c) in self.cells.iter().enumerate() {
            let (h, cs) = c.step(g, input, state.hidden[l], state.cell[l])?;
            hidden.push(h);
            cell.push(cs);
            input = h;
        }
        Ok(LstmState { hidden, cell })
    }
}

/// Stacked (bi)LSTM over `inputs: [T, input_dim]`; returns outputs
/// `[T, directions · H]` and the final state of every layer/direction.
pub fn lstm_forward(g: &mut Graph, lstm: &Lstm, inputs: Var, initial: Option<&LstmState>) -> Result<(Var, LstmState)> {
    let shape = g.shape(inputs).to_vec();
    let [steps, in_dim] = shape[..] else {
        return Err(Error::shape("lstm_forward", format!("expected [T, D] input, got {shape:?}")));
    };
    if in_dim != lstm.input_dim {
        return Err(Error::shape(
            "lstm_forward",
            format!("input dim {in_dim}, LSTM expects {}", lstm.input_dim),
        ));
    }
    debug_assert!(steps > 0);
    let dirs = lstm.directions();
    let hd = lstm.hidden_dim;
    let init = match initial {
        Some(s) if s.slots() != lstm.state_slots() => {
            return Err(Error::shape(
                "lstm_forward",
                format!("initial state has {} slots, expected {}", s.slots(), lstm.state_slots()),
            ))
        }
        Some(s) => s.clone(),
        None => LstmState::zeros(g, lstm.state_slots(), hd),
    };
    let mut layer_in = inputs;
    let mut hidden = Vec::with_capacity(lstm.state_slots());
    let mut cell = Vec::with_capacity(lstm.state_slots());
    for l in 0..lstm.layers {
        let mut dir_outputs = Vec::with_capacity(dirs);
        for d in 0..dirs {
            let slot = l * dirs + d;
            let c = &lstm.cells[slot];
            let proj = c.project_inputs(g, layer_in)?;
            let (mut h, mut cs) = (init.hidden[slot], init.cell[slot]);
            let mut outs = vec![h; steps];
            for k in 0..steps {
                let t = if d == 0 { k } else { steps - 1 - k };
                let xp = g.slice_rows(proj, t, 1)?;
                (h, cs) = c.step_projected(g, xp, h, cs)?;
                outs[t] = h;
            }
            hidden.push(h);
            cell.push(cs);
            dir_outputs.push(g.concat_rows(&outs)?);
        }
        layer_in = if dirs == 1 {
            dir_outputs[0]
        } else {
            g.concat_cols(&dir_outputs)?
        };
    }
    Ok((layer_in, LstmState { hidden, cell }))
}

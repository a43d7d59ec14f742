//! Autoregressive mel decoder: BiLSTM memory over visual features, a
//! dropout prenet, dot-product attention with positional encodings, a
//! 4-layer LSTM and a sigmoid stop gate.

mod pe;

pub use pe::{positional_encoding, positional_encoding_at, positional_table};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioConfig, Melspectrogram};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, Linear, Lstm, LstmState, ParamId, ParamStore, Tensor, Var};

const TF_SALT: u64 = 0x7466_7261_7469_6f00;

/// Initial value of the trainable positional-encoding gain. At unit gain the
/// position term is too weak against content to pin attention to the
/// diagonal at small `attn_dim`.
pub const PE_SCALE_INIT: f32 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_mels: usize,
    pub decoder_layers: usize,
    pub bilstm_layers: usize,
    pub hidden_dim: usize,
    pub prenet_dims: [usize; 2],
    pub attn_dim: usize,
    pub dropout: f32,
    pub gate_threshold: f32,
    pub max_steps: usize,
    /// Video frames per decoder step; places query positions on the
    /// memory's time axis (25 fps video against 80 mel frames/s).
    pub query_position_rate: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            decoder_layers: 4,
            bilstm_layers: 2,
            hidden_dim: 256,
            prenet_dims: [256, 128],
            attn_dim: 128,
            dropout: 0.5,
            gate_threshold: 0.5,
            max_steps: 1000,
            query_position_rate: 0.3125,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.n_mels > 0
            && self.decoder_layers > 0
            && self.bilstm_layers > 0
            && self.hidden_dim > 0
            && self.prenet_dims.iter().all(|&d| d > 0)
            && self.attn_dim > 0
            && self.attn_dim % 2 == 0;
        if !dims_ok {
            return Err(Error::Config(format!("decoder dims must be positive with an even attn_dim: {self:?}")));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::Config(format!("gate_threshold {} outside (0, 1)", self.gate_threshold)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.query_position_rate > 0.0) {
            return Err(Error::Config("query_position_rate must be positive".into()));
        }
        Ok(())
    }

    /// Query position rate implied by a video frame rate and audio framing.
    pub fn position_rate_for(fps: f32, audio: &AudioConfig) -> f32 {
        fps * audio.hop as f32 / audio.sample_rate_hz as f32
    }
}

/// Inverted dropout masks from a dedicated stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: ChaCha8Rng,
    p: f32,
}

impl Dropout {
    pub fn new(seed: u64, p: f32) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p,
        }
    }

    /// `[1, len]` mask with entries `0` or `1 / (1 − p)`.
    pub fn mask(&mut self, len: usize) -> Tensor {
        let keep = 1.0 / (1.0 - self.p);
        let data = (0..len).map(|_| if self.rng.gen::<f32>() < self.p { 0.0 } else { keep }).collect();
        Tensor::new(vec![1, len], data).expect("non-empty mask")
    }
}

/// Keys, values and initial decoder state derived from the visual features.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub keys: Var,
    pub keys_t: Var,
    pub values: Var,
    pub latent: LstmState,
    /// Final BiLSTM hidden states of every layer and direction, concatenated.
    pub summary: Var,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub frame: Var,
    pub gate_logit: Var,
    pub gate: Var,
    pub weights: Var,
    pub state: LstmState,
}

#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// `[T, n_mels]`.
    pub frames: Var,
    /// `[T, 1]`.
    pub gate_logits: Var,
    /// Whether step `t` was fed the ground-truth frame `t − 1` (always false at `t = 0`).
    pub forced: Vec<bool>,
    /// Attention weights per step, each `[1, N]`.
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub mel: Melspectrogram,
    pub gates: Vec<f32>,
    /// `T × N` attention weights.
    pub attention: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct MelDecoder {
    pub config: DecoderConfig,
    pub visual_dim: usize,
    pub bilstm: Lstm,
    pub key_conv: Conv1d,
    pub value_conv: Conv1d,
    pub init_h: Vec<Linear>,
    pub init_c: Vec<Linear>,
    pub prenet: [Linear; 2],
    pub query: Linear,
    pub lstm: Lstm,
    pub frame_proj: Linear,
    pub gate_proj: Linear,
    pub go_frame: ParamId,
    pub pe_scale: ParamId,
    pub mel_offset: ParamId,
    pub mel_scale: ParamId,
    pub mel_inv_scale: ParamId,
}

impl MelDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: &DecoderConfig, visual_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let h = c.hidden_dim;
        let bilstm = Lstm::new(store, &format!("{prefix}.bilstm"), visual_dim, h, c.bilstm_layers, true, rng)?;
        let slots = bilstm.state_slots();
        let key_conv = Conv1d::same(store, &format!("{prefix}.key_conv"), 2 * h, c.attn_dim, 3, rng)?;
        let value_conv = Conv1d::same(store, &format!("{prefix}.value_conv"), 2 * h, c.attn_dim, 3, rng)?;
        let mut init_h = Vec::with_capacity(c.decoder_layers);
        let mut init_c = Vec::with_capacity(c.decoder_layers);
        for l in 0..c.decoder_layers {
            init_h.push(Linear::new(store, &format!("{prefix}.init_h{l}"), slots * h, h, true, rng)?);
            init_c.push(Linear::new(store, &format!("{prefix}.init_c{l}"), slots * h, h, true, rng)?);
        }
        let [p0, p1] = c.prenet_dims;
        let prenet = [
            Linear::new(store, &format!("{prefix}.prenet0"), c.n_mels, p0, true, rng)?,
            Linear::new(store, &format!("{prefix}.prenet1"), p0, p1, true, rng)?,
        ];
        let query = Linear::new(store, &format!("{prefix}.query"), p1 + h, c.attn_dim, true, rng)?;
        let lstm = Lstm::new(store, &format!("{prefix}.lstm"), p1 + c.attn_dim, h, c.decoder_layers, false, rng)?;
        let frame_proj = Linear::new(store, &format!("{prefix}.frame_proj"), h + c.attn_dim, c.n_mels, true, rng)?;
        let gate_proj = Linear::new(store, &format!("{prefix}.gate_proj"), h + slots * h, 1, true, rng)?;
        let go_frame = store.zeros(format!("{prefix}.go_frame"), &[1, c.n_mels], true)?;
        let pe_scale = store.insert(format!("{prefix}.pe_scale"), Tensor::filled(&[1, 1], PE_SCALE_INIT).with_requires_grad(true))?;
        let mel_offset = store.zeros(format!("{prefix}.mel_offset"), &[1, c.n_mels], false)?;
        let mel_scale = store.insert(format!("{prefix}.mel_scale"), Tensor::filled(&[1, c.n_mels], 1.0))?;
        let mel_inv_scale = store.insert(format!("{prefix}.mel_inv_scale"), Tensor::filled(&[1, c.n_mels], 1.0))?;
        Ok(Self {
            config: c.clone(),
            visual_dim,
            bilstm,
            key_conv,
            value_conv,
            init_h,
            init_c,
            prenet,
            query,
            lstm,
            frame_proj,
            gate_proj,
            go_frame,
            pe_scale,
            mel_offset,
            mel_scale,
            mel_inv_scale,
        })
    }

    /// Sets the fixed per-band output normalisation (mean and standard
    /// deviation of the training mels).
    pub fn set_normalization(&self, store: &mut ParamStore, mean: &[f32], std: &[f32]) -> Result<()> {
        let n = self.config.n_mels;
        if mean.len() != n || std.len() != n || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("normalisation needs n_mels means and positive deviations"));
        }
        store.get_mut(self.mel_offset).data_mut().copy_from_slice(mean);
        store.get_mut(self.mel_scale).data_mut().copy_from_slice(std);
        let inv: Vec<f32> = std.iter().map(|s| 1.0 / s).collect();
        store.get_mut(self.mel_inv_scale).data_mut().copy_from_slice(&inv);
        Ok(())
    }

    /// `(vf [N, D_v]) → memory`.
    pub fn encode_visual(&self, g: &mut Graph, vf: Var) -> Result<DecoderMemory> {
        let shape = g.shape(vf).to_vec();
        if shape.len() != 2 || shape[1] != self.visual_dim {
            return Err(Error::shape("encode_visual", format!("expected [N, {}], got {shape:?}", self.visual_dim)));
        }
        let n = shape[0];
        let h = self.config.hidden_dim;
        let (out, state) = self.bilstm.forward(g, vf, None)?;
        // [N, 2H] → [1, 2H, N] for the temporal convolutions.
        let ot = g.transpose(out)?;
        let x = g.reshape(ot, &[1, 2 * h, n])?;
        let pe = g.constant(positional_table(n, self.config.attn_dim, 1.0 / self.config.query_position_rate as f64)?);
        let alpha = g.param(self.pe_scale);
        let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
        let alpha_col = g.matmul(ones, alpha)?;
        let pe_cols = g.constant(Tensor::filled(&[1, self.config.attn_dim], 1.0));
        let alpha_tile = g.matmul(alpha_col, pe_cols)?;
        let pe = g.mul(pe, alpha_tile)?;
        let mut kv = Vec::with_capacity(2);
        for conv in [&self.key_conv, &self.value_conv] {
            let y = conv.forward(g, x)?;
            let y = g.reshape(y, &[self.config.attn_dim, n])?;
            let y = g.transpose(y)?;
            kv.push(g.add(y, pe)?);
        }
        let summary_h = g.concat_cols(&state.hidden)?;
        let summary_c = g.concat_cols(&state.cell)?;
        let mut hidden = Vec::with_capacity(self.config.decoder_layers);
        let mut cell = Vec::with_capacity(self.config.decoder_layers);
        for (lh, lc) in self.init_h.iter().zip(&self.init_c) {
            hidden.push(lh.forward(g, summary_h)?);
            cell.push(lc.forward(g, summary_c)?);
        }
        let keys_t = g.transpose(kv[0])?;
        Ok(DecoderMemory {
            keys: kv[0],
            keys_t,
            values: kv[1],
            latent: LstmState { hidden, cell },
            summary: summary_h,
            rows: n,
        })
    }

    /// Two `linear → ReLU → dropout` layers over a normalised frame.
    pub fn prenet(&self, g: &mut Graph, frame: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        let mut dropout = dropout;
        let mut x = frame;
        for layer in &self.prenet {
            x = layer.forward(g, x)?;
            x = g.relu(x);
            if let Some(d) = dropout.as_deref_mut() {
                let m = g.constant(d.mask(layer.out_dim));
                x = g.mul(x, m)?;
            }
        }
        Ok(x)
    }

    /// Attention of a `[1, d_attn]` query over the memory.
    pub fn attend(&self, g: &mut Graph, query: Var, mem: &DecoderMemory) -> Result<(Var, Var)> {
        attend(g, query, mem.keys_t, mem.values)
    }

    /// Query position of a decoder step; memory row `n` sits at
    /// `n / query_position_rate` on the same axis.
    pub fn query_position(&self, step: usize) -> f64 {
        step as f64
    }

    /// One decoder step from the previous (un-normalised) frame.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        prev_frame: Var,
        state: &LstmState,
        mem: &DecoderMemory,
        step: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<StepOutput> {
        if !state.is_finite(g) {
            return Err(Error::NonFinite { op: "decode_step" });
        }
        let c = &self.config;
        let off = g.param(self.mel_offset);
        let inv = g.param(self.mel_inv_scale);
        let centred = g.sub(prev_frame, off)?;
        let normed = g.mul(centred, inv)?;
        let p = self.prenet(g, normed, dropout)?;
        let top = *state.hidden.last().expect("decoder has at least one layer");
        let q_in = g.concat_cols(&[p, top])?;
        let q = self.query.forward(g, q_in)?;
        let pe = g.constant(Tensor::row(positional_encoding_at(self.query_position(step), c.attn_dim)?));
        let alpha = g.param(self.pe_scale);
        let pe_cols = g.constant(Tensor::filled(&[1, c.attn_dim], 1.0));
        let alpha_row = g.matmul(alpha, pe_cols)?;
        let pe = g.mul(pe, alpha_row)?;
        let q = g.add(q, pe)?;
        let (context, weights) = self.attend(g, q, mem)?;
        let x = g.concat_cols(&[p, context])?;
        let new_state = self.lstm.step(g, x, state)?;
        let h = *new_state.hidden.last().expect("decoder has at least one layer");
        let hc = g.concat_cols(&[h, context])?;
        let y = self.frame_proj.forward(g, hc)?;
        let sc = g.param(self.mel_scale);
        let y = g.mul(y, sc)?;
        let frame = g.add(y, off)?;
        let hs = g.concat_cols(&[h, mem.summary])?;
        let gate_logit = self.gate_proj.forward(g, hs)?;
        let gate = g.sigmoid(gate_logit);
        Ok(StepOutput {
            frame,
            gate_logit,
            gate,
            weights,
            state: new_state,
        })
    }

    fn check_visual(&self, vf: &Tensor) -> Result<()> {
        if vf.shape().len() != 2 || vf.dim(1) != self.visual_dim {
            return Err(Error::shape("decoder", format!("visual features {:?}, expected [N, {}]", vf.shape(), self.visual_dim)));
        }
        Ok(())
    }

    /// Free-running decoding from the go frame. Stops after the first step
    /// whose gate exceeds `threshold` (that frame is kept) or after
    /// `max_steps` frames.
    pub fn generate(
        &self,
        store: &ParamStore,
        vf: &Tensor,
        threshold: f32,
        max_steps: usize,
        seed: u64,
        audio: &AudioConfig,
    ) -> Result<Generation> {
        self.check_visual(vf)?;
        if max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        let mut g = Graph::new(store);
        let v = g.constant(vf.clone());
        let mem = self.encode_visual(&mut g, v)?;
        let mut dropout = Dropout::new(seed, self.config.dropout);
        let mut prev = g.param(self.go_frame);
        let mut state = mem.latent.clone();
        let mut frames = Vec::new();
        let mut gates = Vec::new();
        let mut attention = Vec::new();
        for step in 0..max_steps {
            let out = self.decode_step(&mut g, prev, &state, &mem, step, Some(&mut dropout))?;
            g.check_finite()?;
            let frame = g.value(out.frame).to_vec();
            let gate = g.scalar(out.gate);
            attention.push(g.value(out.weights).to_vec());
            gates.push(gate);
            prev = g.constant(Tensor::row(frame.clone()));
            frames.push(frame);
            state = out.state;
            if gate > threshold {
                break;
            }
        }
        let mel = Melspectrogram::new(
            frames.concat(),
            gates.len(),
            self.config.n_mels,
            audio.sample_rate_hz,
            audio.hop,
        )?;
        Ok(Generation { mel, gates, attention })
    }

    /// Decodes `target.frames()` steps. Before step `t ≥ 1` a seeded draw
    /// feeds the ground-truth frame `t − 1` with probability `tf_ratio`,
    /// otherwise the model's own previous output (as a constant). Dropout
    /// masks come from `seed` in the same order as [`Self::generate`].
    pub fn teacher_forced_forward(
        &self,
        g: &mut Graph,
        vf: Var,
        target: &Melspectrogram,
        tf_ratio: f32,
        seed: u64,
    ) -> Result<TeacherForced> {
        if target.frames() == 0 {
            return Err(Error::invalid("teacher forcing needs a non-empty target"));
        }
        if !(0.0..=1.0).contains(&tf_ratio) {
            return Err(Error::invalid(format!("tf_ratio {tf_ratio} outside [0, 1]")));
        }
        if target.n_mels() != self.config.n_mels {
            return Err(Error::shape("teacher_forced_forward", format!("{} bands, decoder has {}", target.n_mels(), self.config.n_mels)));
        }
        let mem = self.encode_visual(g, vf)?;
        let mut dropout = Dropout::new(seed, self.config.dropout);
        let mut draws = ChaCha8Rng::seed_from_u64(seed ^ TF_SALT);
        let mut prev = g.param(self.go_frame);
        let mut state = mem.latent.clone();
        let mut frames = Vec::with_capacity(target.frames());
        let mut logits = Vec::with_capacity(target.frames());
        let mut weights = Vec::with_capacity(target.frames());
        let mut forced = Vec::with_capacity(target.frames());
        for t in 0..target.frames() {
            if t > 0 {
                let use_truth = draws.gen::<f32>() < tf_ratio;
                forced.push(use_truth);
                let row = if use_truth {
                    target.row(t - 1).to_vec()
                } else {
                    g.value(*frames.last().expect("t > 0")).to_vec()
                };
                prev = g.constant(Tensor::row(row));
            } else {
                forced.push(false);
            }
            let out = self.decode_step(g, prev, &state, &mem, t, Some(&mut dropout))?;
            frames.push(out.frame);
            logits.push(out.gate_logit);
            weights.push(out.weights);
            state = out.state;
        }
        Ok(TeacherForced {
            frames: g.concat_rows(&frames)?,
            gate_logits: g.concat_rows(&logits)?,
            forced,
            weights,
        })
    }
}

/// Scaled dot-product attention of `query [1, d]` over `keys_t [d, N]` and
/// `values [N, d]`; returns `(context [1, d], weights [1, N])`.
pub fn attend(g: &mut Graph, query: Var, keys_t: Var, values: Var) -> Result<(Var, Var)> {
    let ks = g.shape(keys_t).to_vec();
    if ks.len() != 2 || ks[1] == 0 {
        return Err(Error::invalid("attention over an empty memory"));
    }
    let scores = g.matmul(query, keys_t)?;
    let scores = g.scale(scores, 1.0 / (ks[0] as f32).sqrt());
    let weights = g.softmax_rows(scores)?;
    let context = g.matmul(weights, values)?;
    Ok((context, weights))
}

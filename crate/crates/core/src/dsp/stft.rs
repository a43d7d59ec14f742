use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioConfig, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    /// Periodic Hann; satisfies COLA at hop = n_fft / 4.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftOptions {
    pub window: Window,
    /// Reflect-pad `n_fft / 2` samples on both sides so frame `t` is centred on sample `t · hop`.
    pub center: bool,
}

impl Default for StftOptions {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            center: true,
        }
    }
}

/// One-sided complex STFT, `frames × (n_fft/2 + 1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..][..self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Weight of bin `k` in the two-sided spectrum: mirrored bins count twice.
    pub fn bin_weight(bins: usize, k: usize) -> f64 {
        if k == 0 || k == bins - 1 {
            1.0
        } else {
            2.0
        }
    }

    /// `Σ |X|²` over the full two-sided spectrum.
    pub fn energy(&self) -> f64 {
        self.data
            .iter()
            .enumerate()
            .map(|(i, c)| Self::bin_weight(self.bins, i % self.bins) * c.norm_sqr())
            .sum()
    }
}

/// Reusable FFT plans and window for one `(n_fft, hop, window)` triple.
pub(crate) struct StftEngine {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub(crate) fn new(n_fft: usize, hop: usize, window: Window) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: window.coefficients(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub(crate) fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames at `t · hop` with no padding; `signal.len() ≥ n_fft`.
    pub(crate) fn analyze(&self, signal: &[f64]) -> Spectrogram {
        debug_assert!(signal.len() >= self.n_fft);
        let frames = 1 + (signal.len() - self.n_fft) / self.hop;
        let bins = self.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let seg = &signal[t * self.hop..][..self.n_fft];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }

    /// Least-squares inverse: the real signal whose STFT is closest (in the
    /// two-sided Frobenius norm) to `spec`. Length `(T-1)·hop + n_fft`.
    pub(crate) fn synthesize(&self, spec: &Spectrogram) -> Vec<f64> {
        let n = self.n_fft;
        let len = (spec.frames - 1) * self.hop + n;
        let mut out = vec![0.0f64; len];
        let mut wsum = vec![0.0f64; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..spec.frames {
            let frame = spec.frame(t);
            buf[..spec.bins].copy_from_slice(frame);
            for k in 1..n - spec.bins + 1 {
                buf[n - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let off = t * self.hop;
            for i in 0..n {
                let w = self.window[i];
                out[off + i] += w * buf[i].re / n as f64;
                wsum[off + i] += w * w;
            }
        }
        for (o, &s) in out.iter_mut().zip(&wsum) {
            *o = if s > 1e-10 { *o / s } else { 0.0 };
        }
        out
    }
}

pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(Error::invalid(format!(
            "signal of {} samples too short to reflect-pad by {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    Ok(out)
}

pub fn stft_with(samples: &[f32], n_fft: usize, hop: usize, opts: StftOptions) -> Result<Spectrogram> {
    if samples.len() < n_fft {
        return Err(Error::invalid(format!(
            "STFT needs at least n_fft = {n_fft} samples, got {}",
            samples.len()
        )));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::Config(format!("hop {hop} must be in [1, {n_fft}]")));
    }
    let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let engine = StftEngine::new(n_fft, hop, opts.window);
    let padded = if opts.center { reflect_pad(&x, n_fft / 2)? } else { x };
    Ok(engine.analyze(&padded))
}

/// Centred Hann STFT; `T = 1 + ⌊len / hop⌋` frames.
pub fn stft(w: &Waveform, cfg: &AudioConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    stft_with(&w.samples, cfg.n_fft, cfg.hop, StftOptions::default())
}

/// Inverse of [`stft`]: least-squares overlap-add, centre padding removed,
/// truncated to `length` samples.
pub fn istft(spec: &Spectrogram, cfg: &AudioConfig, length: usize) -> Result<Waveform> {
    cfg.validate()?;
    if spec.bins != cfg.n_bins() || spec.frames == 0 {
        return Err(Error::shape(
            "istft",
            format!("{} bins for n_fft {}", spec.bins, cfg.n_fft),
        ));
    }
    let engine = StftEngine::new(cfg.n_fft, cfg.hop, Window::Hann);
    let full = engine.synthesize(spec);
    let start = cfg.n_fft / 2;
    let samples = full
        .iter()
        .skip(start)
        .take(length)
        .map(|&v| v as f32)
        .collect();
    Ok(Waveform::new(samples, cfg.sample_rate_hz))
}

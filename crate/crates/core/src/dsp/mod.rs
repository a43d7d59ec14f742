//! Audio ↔ spectrogram transforms.

mod config;
pub mod griffin_lim;
pub mod mel;
pub mod melfile;
pub mod stft;
pub mod wav;

pub use config::AudioConfig;
pub use griffin_lim::{chunked_synthesize, griffin_lim, griffin_lim_with_history, mel_to_wav, GriffinLimRun};
pub use mel::{mel_filterbank, mel_to_hz, hz_to_mel, wav_to_mel, MelFilterbank};
pub use stft::{istft, stft, Spectrogram, StftOptions, Window};

use crate::error::{Error, Result};

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / self.samples.len() as f64).sqrt() as f32
    }

    /// Scales so the largest magnitude is exactly 1; silence stays silent.
    pub fn peak_normalized(mut self) -> Self {
        let peak = self.peak();
        if peak > 0.0 {
            self.samples.iter_mut().for_each(|v| *v = (*v / peak).clamp(-1.0, 1.0));
        }
        self
    }
}

/// `T × n_mels` natural-log mel amplitudes, row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Melspectrogram {
    data: Vec<f32>,
    frames: usize,
    n_mels: usize,
    pub sample_rate_hz: u32,
    pub hop: usize,
}

impl Melspectrogram {
    pub fn new(data: Vec<f32>, frames: usize, n_mels: usize, sample_rate_hz: u32, hop: usize) -> Result<Self> {
        if frames == 0 || n_mels == 0 {
            return Err(Error::invalid("melspectrogram needs at least one frame and one band"));
        }
        if data.len() != frames * n_mels {
            return Err(Error::shape(
                "melspectrogram",
                format!("{} values for {frames} × {n_mels}", data.len()),
            ));
        }
        Ok(Self {
            data,
            frames,
            n_mels,
            sample_rate_hz,
            hop,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], cfg: &AudioConfig) -> Result<Self> {
        if rows.iter().any(|r| r.len() != cfg.n_mels) {
            return Err(Error::shape("melspectrogram", "row width differs from n_mels"));
        }
        Self::new(rows.concat(), rows.len(), cfg.n_mels, cfg.sample_rate_hz, cfg.hop)
    }

    /// A melspectrogram with every entry at the floor `ln(log_floor)`.
    pub fn floor(frames: usize, cfg: &AudioConfig) -> Result<Self> {
        Self::new(
            vec![cfg.log_floor_ln(); frames * cfg.n_mels],
            frames,
            cfg.n_mels,
            cfg.sample_rate_hz,
            cfg.hop,
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..][..self.n_mels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.n_mels)
    }

    pub fn check_config(&self, cfg: &AudioConfig) -> Result<()> {
        if self.n_mels != cfg.n_mels || self.hop != cfg.hop || self.sample_rate_hz != cfg.sample_rate_hz {
            return Err(Error::invalid(format!(
                "melspectrogram ({} mels, hop {}, {} Hz) does not match config ({} mels, hop {}, {} Hz)",
                self.n_mels, self.hop, self.sample_rate_hz, cfg.n_mels, cfg.hop, cfg.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::invalid(format!(
                "frame range [{start}, {}) outside 0..{}",
                start + len,
                self.frames
            )));
        }
        Self::new(
            self.data[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            len,
            self.n_mels,
            self.sample_rate_hz,
            self.hop,
        )
    }

    /// Concatenates along time; all parts must share band count and framing.
    pub fn concat(parts: &[Melspectrogram]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no melspectrograms to concatenate"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.n_mels != first.n_mels || p.hop != first.hop || p.sample_rate_hz != first.sample_rate_hz {
                return Err(Error::invalid(format!(
                    "cannot concatenate {}-band and {}-band melspectrograms",
                    first.n_mels, p.n_mels
                )));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Self::new(data, frames, first.n_mels, first.sample_rate_hz, first.hop)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

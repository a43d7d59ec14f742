use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Analysis parameters shared by every spectral transform.
///
/// Defaults: 16 kHz, 50 ms window (800), 12.5 ms hop (200), 80 mel bands
/// over 55–7600 Hz, amplitude floor 1e-5. At 25 fps video this is exactly
/// 3.2 mel frames per video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f32,
    pub fmax_hz: f32,
    pub log_floor: f32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            n_fft: 800,
            hop: 200,
            n_mels: 80,
            fmin_hz: 55.0,
            fmax_hz: 7600.0,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f32 / 2.0;
        let problem = if self.sample_rate_hz == 0 {
            Some("sample rate must be positive".to_string())
        } else if self.n_fft < 2 || self.n_fft % 2 != 0 {
            Some(format!("n_fft must be even and ≥ 2, got {}", self.n_fft))
        } else if self.hop == 0 || self.hop > self.n_fft {
            Some(format!("hop must be in [1, n_fft], got {}", self.hop))
        } else if self.n_mels == 0 {
            Some("n_mels must be ≥ 1".to_string())
        } else if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            Some(format!(
                "need 0 ≤ fmin < fmax ≤ {nyquist}, got {}..{}",
                self.fmin_hz, self.fmax_hz
            ))
        } else if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            Some(format!("log_floor must be positive, got {}", self.log_floor))
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(format!("audio: {p}"))),
            None => Ok(()),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `ln(log_floor)`, the smallest value a mel entry can take.
    pub fn log_floor_ln(&self) -> f32 {
        self.log_floor.ln()
    }

    /// Number of STFT frames for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn frames_per_second(&self) -> f32 {
        self.sample_rate_hz as f32 / self.hop as f32
    }

    pub fn bin_hz(&self, bin: usize) -> f32 {
        bin as f32 * self.sample_rate_hz as f32 / self.n_fft as f32
    }
}

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, MelFilterbank};
use super::stft::{Spectrogram, StftEngine, Window};
use super::{AudioConfig, Melspectrogram, Waveform};
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 60;
pub const DEFAULT_SEED: u64 = 0x6c69_7032;
/// Multiplicative-update passes after the clipped pseudo-inverse. Clipping
/// alone leaves positive side lobes that lift quiet bands by several nats.
pub const NNLS_ITERATIONS: usize = 100;

/// Linear STFT magnitude, `frames × (n_fft/2 + 1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitude {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Magnitude {
    pub fn new(data: Vec<f64>, frames: usize, bins: usize) -> Result<Self> {
        if frames == 0 || data.len() != frames * bins {
            return Err(Error::shape("magnitude", format!("{} values for {frames} × {bins}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("magnitude entries must be finite and ≥ 0, found {v}")));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn of(spec: &Spectrogram) -> Self {
        Self {
            frames: spec.frames,
            bins: spec.bins,
            data: spec.magnitudes(),
        }
    }

    fn weighted_norm(&self) -> f64 {
        self.data
            .iter()
            .enumerate()
            .map(|(i, m)| Spectrogram::bin_weight(self.bins, i % self.bins) * m * m)
            .sum::<f64>()
            .sqrt()
    }
}

/// Result of a phase-retrieval run.
#[derive(Debug, Clone)]
pub struct GriffinLimRun {
    pub waveform: Waveform,
    /// Spectral convergence after each iteration.
    pub sc_history: Vec<f64>,
}

/// `‖|X| − M‖ / ‖M‖` over the two-sided spectrum; 0 when both are silent.
pub fn spectral_convergence(estimate: &Magnitude, reference: &Magnitude) -> Result<f64> {
    if estimate.frames != reference.frames || estimate.bins != reference.bins {
        return Err(Error::shape(
            "spectral_convergence",
            format!(
                "{}×{} vs {}×{}",
                estimate.frames, estimate.bins, reference.frames, reference.bins
            ),
        ));
    }
    let diff: f64 = estimate
        .data
        .iter()
        .zip(&reference.data)
        .enumerate()
        .map(|(i, (a, b))| Spectrogram::bin_weight(reference.bins, i % reference.bins) * (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = reference.weighted_norm();
    Ok(if norm > 0.0 { diff / norm } else if diff > 0.0 { f64::INFINITY } else { 0.0 })
}

pub fn griffin_lim(magnitude: &Magnitude, cfg: &AudioConfig, iterations: usize) -> Result<Waveform> {
    Ok(griffin_lim_with_history(magnitude, cfg, iterations, DEFAULT_SEED)?.waveform)
}

/// Alternating projections between the target magnitude and the set of
/// consistent spectrograms. Output has `(T − 1) · hop` samples.
pub fn griffin_lim_with_history(
    magnitude: &Magnitude,
    cfg: &AudioConfig,
    iterations: usize,
    seed: u64,
) -> Result<GriffinLimRun> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::invalid("Griffin-Lim needs at least one iteration"));
    }
    if magnitude.bins != cfg.n_bins() {
        return Err(Error::shape(
            "griffin_lim",
            format!("{} bins for n_fft {}", magnitude.bins, cfg.n_fft),
        ));
    }
    let magnitude = Magnitude::new(magnitude.data.clone(), magnitude.frames, magnitude.bins)?;
    let engine = StftEngine::new(cfg.n_fft, cfg.hop, Window::Hann);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Complex64> = (0..magnitude.data.len())
        .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let mut target = Spectrogram {
        frames: magnitude.frames,
        bins: magnitude.bins,
        data: vec![Complex64::new(0.0, 0.0); magnitude.data.len()],
    };
    let mut signal = Vec::new();
    let mut sc_history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for ((t, &m), p) in target.data.iter_mut().zip(&magnitude.data).zip(&phase) {
            *t = p * m;
        }
        signal = engine.synthesize(&target);
        let estimate = engine.analyze(&signal);
        sc_history.push(spectral_convergence(&Magnitude::of(&estimate), &magnitude)?);
        for (p, s) in phase.iter_mut().zip(&estimate.data) {
            let n = s.norm();
            *p = if n > 0.0 { s / n } else { Complex64::new(1.0, 0.0) };
        }
    }
    let start = cfg.n_fft / 2;
    let len = (magnitude.frames - 1) * cfg.hop;
    let samples = signal[start..start + len].iter().map(|&v| v as f32).collect();
    Ok(GriffinLimRun {
        waveform: Waveform::new(samples, cfg.sample_rate_hz).peak_normalized(),
        sc_history,
    })
}

/// Linear magnitude from a log-mel spectrogram: `exp` (floor entries read as
/// zero energy), pseudo-inverse of the filterbank with negatives clipped to
/// 0, then refined as a non-negative least-squares fit.
pub fn mel_to_magnitude(mel: &Melspectrogram, cfg: &AudioConfig) -> Result<Magnitude> {
    let fb = mel_filterbank(cfg)?;
    mel_to_magnitude_with(mel, cfg, &fb)
}

pub(crate) fn mel_to_magnitude_with(mel: &Melspectrogram, cfg: &AudioConfig, fb: &MelFilterbank) -> Result<Magnitude> {
    mel.check_config(cfg)?;
    if !mel.is_finite() {
        return Err(Error::NonFinite { op: "mel_to_wav" });
    }
    let pinv = fb.pseudo_inverse()?;
    let floor = cfg.log_floor_ln();
    let mut data = Vec::with_capacity(mel.frames() * fb.bins);
    let mut energy = vec![0.0f64; fb.n_mels];
    for row in mel.rows() {
        for (e, &v) in energy.iter_mut().zip(row) {
            *e = if v <= floor { 0.0 } else { (v as f64).exp() };
        }
        let mut x: Vec<f64> = (0..fb.bins)
            .map(|k| pinv[k * fb.n_mels..][..fb.n_mels].iter().zip(&energy).map(|(p, e)| p * e).sum::<f64>().max(0.0))
            .collect();
        fb.refine_nonnegative(&energy, &mut x, NNLS_ITERATIONS);
        data.extend(x);
    }
    Magnitude::new(data, mel.frames(), fb.bins)
}

pub fn mel_to_wav(mel: &Melspectrogram, cfg: &AudioConfig, iterations: usize) -> Result<Waveform> {
    let magnitude = mel_to_magnitude(mel, cfg)?;
    griffin_lim(&magnitude, cfg, iterations)
}

/// Concatenates chunk melspectrograms along time and inverts them in one
/// pass, so phase is retrieved jointly across chunk boundaries.
pub fn chunked_synthesize(chunks: &[Melspectrogram], cfg: &AudioConfig, iterations: usize) -> Result<Waveform> {
    let whole = Melspectrogram::concat(chunks)?;
    mel_to_wav(&whole, cfg, iterations)
}

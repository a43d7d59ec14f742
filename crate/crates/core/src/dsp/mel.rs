use nalgebra::DMatrix;

use super::stft::stft;
use super::{AudioConfig, Melspectrogram, Waveform};
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, equally spaced on the mel scale, peak weight 1 at
/// each centre.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    /// `n_mels × bins`, row-major.
    pub weights: Vec<f64>,
    /// Centre frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
    /// Half-open bin range holding each filter's non-zero weights.
    pub spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..][..self.bins]
    }

    /// `fb · magnitude` for one frame.
    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.spans
            .iter()
            .enumerate()
            .map(|(m, &(a, b))| self.row(m)[a..b].iter().zip(&magnitude[a..b]).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// `fbᵀ · energy` for one frame.
    pub fn apply_transpose(&self, energy: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for (m, (&(a, b), &e)) in self.spans.iter().zip(energy).enumerate() {
            for (o, w) in out[a..b].iter_mut().zip(&self.row(m)[a..b]) {
                *o += w * e;
            }
        }
        out
    }

    /// Non-negative least-squares refinement of `x ≥ 0` towards
    /// `fb · x = energy` by multiplicative updates. Entries start from
    /// `x` (zeros are lifted slightly so they can move) and stay ≥ 0.
    pub fn refine_nonnegative(&self, energy: &[f64], x: &mut [f64], iterations: usize) {
        let numer = self.apply_transpose(energy);
        let scale = numer.iter().cloned().fold(0.0, f64::max);
        if scale == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let lift = 1e-6 * x.iter().cloned().fold(0.0, f64::max).max(scale * 1e-6);
        for (v, &n) in x.iter_mut().zip(&numer) {
            *v = if n > 0.0 { v.max(0.0) + lift } else { 0.0 };
        }
        for _ in 0..iterations {
            let denom = self.apply_transpose(&self.apply(x));
            for ((v, &n), &d) in x.iter_mut().zip(&numer).zip(&denom) {
                if d > 0.0 {
                    *v *= n / d;
                }
            }
        }
    }

    /// Moore-Penrose pseudo-inverse, `bins × n_mels` row-major.
    pub fn pseudo_inverse(&self) -> Result<Vec<f64>> {
        let fb = DMatrix::from_row_slice(self.n_mels, self.bins, &self.weights);
        let pinv = fb
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::invalid(format!("filterbank pseudo-inverse: {e}")))?;
        let mut out = Vec::with_capacity(self.bins * self.n_mels);
        for r in 0..self.bins {
            for c in 0..self.n_mels {
                out.push(pinv[(r, c)]);
            }
        }
        Ok(out)
    }
}

pub fn mel_filterbank(cfg: &AudioConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let lo = hz_to_mel(cfg.fmin_hz as f64);
    let hi = hz_to_mel(cfg.fmax_hz as f64);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..][..bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (centre - left);
            let falling = (right - f) / (right - centre);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({left:.1}–{right:.1} Hz) falls between FFT bins; \
                 reduce n_mels or increase n_fft"
            )));
        }
    }
    let spans = weights
        .chunks(bins)
        .map(|r| {
            let a = r.iter().position(|&w| w > 0.0).unwrap_or(0);
            let b = r.iter().rposition(|&w| w > 0.0).map_or(a, |i| i + 1);
            (a, b)
        })
        .collect();
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        bins,
        weights,
        spans,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
    })
}

/// `ln(max(fb · |STFT|, log_floor))`, one row per STFT frame.
pub fn wav_to_mel(w: &Waveform, cfg: &AudioConfig) -> Result<Melspectrogram> {
    let fb = mel_filterbank(cfg)?;
    mel_with_filterbank(w, cfg, &fb)
}

pub(crate) fn mel_with_filterbank(w: &Waveform, cfg: &AudioConfig, fb: &MelFilterbank) -> Result<Melspectrogram> {
    let spec = stft(w, cfg)?;
    let floor = cfg.log_floor as f64;
    let mags = spec.magnitudes();
    let mut data = Vec::with_capacity(spec.frames * cfg.n_mels);
    for row in mags.chunks(spec.bins) {
        data.extend(fb.apply(row).into_iter().map(|e| e.max(floor).ln() as f32));
    }
    Melspectrogram::new(data, spec.frames, cfg.n_mels, cfg.sample_rate_hz, cfg.hop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(hz: f64, secs: f64, cfg: &AudioConfig) -> Waveform {
        let sr = cfg.sample_rate_hz as f64;
        let n = (secs * sr) as usize;
        Waveform::new(
            (0..n).map(|i| (0.5 * (2.0 * PI * hz * i as f64 / sr).sin()) as f32).collect(),
            cfg.sample_rate_hz,
        )
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 55.0, 440.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn rows_nonnegative_cover_band_and_ordered() {
        let cfg = AudioConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!((fb.n_mels, fb.bins), (80, 401));
        for m in 0..fb.n_mels {
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
            assert!(fb.row(m).iter().sum::<f64>() > 0.0);
        }
        for k in 0..fb.bins {
            let f = cfg.bin_hz(k) as f64;
            if f > cfg.fmin_hz as f64 && f < cfg.fmax_hz as f64 {
                assert!((0..fb.n_mels).any(|m| fb.row(m)[k] > 0.0), "bin {k} uncovered");
            }
        }
        let peaks: Vec<usize> = (0..fb.n_mels)
            .map(|m| {
                let r = fb.row(m);
                (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap()
            })
            .collect();
        assert!(peaks.windows(2).all(|p| p[0] <= p[1]));
        assert!(fb.centers_hz.windows(2).all(|c| c[0] < c[1]));
    }

    #[test]
    fn four_band_centres_match_hand_table() {
        let cfg = AudioConfig {
            n_mels: 4,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            ..AudioConfig::default()
        };
        let fb = mel_filterbank(&cfg).unwrap();
        // 2595·log10(1 + 8000/700) = 2840.0230; centres at i/5 of that.
        let top = 2840.023_046_f64;
        let bin_hz = 20.0;
        for (i, m) in (1..=4).zip(0..4) {
            let mel = top * i as f64 / 5.0;
            let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
            let r = fb.row(m);
            let peak = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            assert!((peak as f64 * bin_hz - hz).abs() <= bin_hz, "band {m}: {peak} vs {hz}");
        }
    }

    #[test]
    fn overfine_filterbank_is_rejected() {
        let cfg = AudioConfig {
            n_fft: 64,
            hop: 16,
            n_mels: 80,
            ..AudioConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn silence_sits_at_floor() {
        let cfg = AudioConfig::default();
        let mel = wav_to_mel(&Waveform::silence(4_000, 16_000), &cfg).unwrap();
        assert_eq!(mel.frames(), 21);
        assert!(mel.data().iter().all(|&v| v == cfg.log_floor_ln()));
    }

    #[test]
    fn noise_burst_louder_than_silence() {
        let cfg = AudioConfig::default();
        let mut x = vec![0.0f32; 8_000];
        let mut state = 12345u32;
        for v in &mut x[3_000..5_000] {
            state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            *v = (state >> 8) as f32 / (1u32 << 24) as f32 - 0.5;
        }
        let mel = wav_to_mel(&Waveform::new(x, 16_000), &cfg).unwrap();
        let mean = |t: usize| mel.row(t).iter().sum::<f32>() / cfg.n_mels as f32;
        assert!(mean(20) > mean(2));
        assert!(mean(20) > mean(38));
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let cfg = AudioConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let nearest = (0..fb.n_mels)
            .min_by(|&a, &b| (fb.centers_hz[a] - 440.0).abs().total_cmp(&(fb.centers_hz[b] - 440.0).abs()))
            .unwrap();
        let mel = wav_to_mel(&tone(440.0, 0.5, &cfg), &cfg).unwrap();
        for t in 4..mel.frames() - 4 {
            let r = mel.row(t);
            let arg = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn one_hop_shift_moves_frames_by_one() {
        let cfg = AudioConfig::default();
        let base = tone(300.0, 0.3, &cfg);
        let mut shifted = vec![0.0f32; cfg.hop];
        shifted.extend_from_slice(&base.samples);
        let a = wav_to_mel(&base, &cfg).unwrap();
        let b = wav_to_mel(&Waveform::new(shifted, 16_000), &cfg).unwrap();
        for t in 4..a.frames() - 4 {
            for (x, y) in a.row(t).iter().zip(b.row(t + 1)) {
                assert!((x - y).abs() < 1e-4, "frame {t}");
            }
        }
    }
}

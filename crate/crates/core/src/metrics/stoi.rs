//! Short-time objective intelligibility and its extended variant.
//!
//! Both signals are resampled to 10 kHz, silent frames (more than 40 dB
//! below the loudest clean frame) are dropped, and 15 one-third-octave band
//! envelopes from 150 Hz are compared over 30-frame (384 ms) segments.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = 1e-12;

/// Hann window of `n + 2` points with both zero end points removed.
fn inner_hann(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos()).collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rational resampling with a Blackman-windowed sinc.
pub(crate) fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = (to as u64 / g, from as u64 / g);
    let ratio = up as f64 / down as f64;
    // cutoff in cycles per input sample
    let fc = 0.5 * ratio.min(1.0);
    let half = 16.0 / (2.0 * fc);
    let out_len = ((x.len() as u64 * up + down - 1) / down) as usize;
    let mut y = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let lo = ((t - half).ceil().max(0.0)) as usize;
        let hi = ((t + half).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let tau = t - k as f64;
            let w = 0.42 + 0.5 * (PI * tau / half).cos() + 0.08 * (2.0 * PI * tau / half).cos();
            acc += xk * 2.0 * fc * sinc(2.0 * fc * tau) * w;
        }
        y.push(acc);
    }
    y
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..(len + 1).saturating_sub(frame)).step_by(hop)
}

/// Drops frames of both signals where the clean frame is more than
/// `DYN_RANGE_DB` below the loudest clean frame, then overlap-adds.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = inner_hann(FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), FRAME, HOP).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = x[s..s + FRAME].iter().zip(&w).map(|(v, w)| (v * w).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let top = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| e > top - DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * HOP + FRAME;
    let mut xs = vec![0.0; len];
    let mut ys = vec![0.0; len];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            xs[j * HOP + i] += x[s + i] * w[i];
            ys[j * HOP + i] += y[s + i] * w[i];
        }
    }
    (xs, ys)
}

/// One-third-octave band envelopes, `frames × BANDS`.
fn band_envelopes(x: &[f64]) -> Vec<[f64; BANDS]> {
    let w = inner_hann(FRAME);
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| (freqs[a] - f).abs().total_cmp(&(freqs[b] - f).abs()))
            .unwrap()
    };
    let ranges: Vec<(usize, usize)> = (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let mut out = Vec::new();
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    // the final full frame is excluded, matching the reference framing
    for s in (0..x.len().saturating_sub(FRAME)).step_by(HOP) {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i] = Complex64::new(x[s + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        let mut row = [0.0; BANDS];
        for (r, &(lo, hi)) in row.iter_mut().zip(&ranges) {
            *r = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        }
        out.push(row);
    }
    out
}

struct Prepared {
    clean: Vec<[f64; BANDS]>,
    degraded: Vec<[f64; BANDS]>,
}

fn prepare(clean: &Waveform, degraded: &Waveform) -> Result<Prepared> {
    if clean.sample_rate_hz != degraded.sample_rate_hz {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate_hz, degraded.sample_rate_hz
        )));
    }
    if clean.sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if !clean.samples.iter().chain(&degraded.samples).all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "stoi" });
    }
    let len = clean.len().min(degraded.len());
    let to_f64 = |w: &Waveform| w.samples[..len].iter().map(|&v| v as f64).collect::<Vec<_>>();
    let x = resample(&to_f64(clean), clean.sample_rate_hz, FS);
    let y = resample(&to_f64(degraded), degraded.sample_rate_hz, FS);
    let (x, y) = remove_silent_frames(&x, &y);
    let (cx, cy) = (band_envelopes(&x), band_envelopes(&y));
    if cx.len() < SEGMENT {
        return Err(Error::invalid(format!(
            "need at least {SEGMENT} non-silent analysis frames ({} ms), got {}",
            SEGMENT * HOP * 1000 / FS as usize,
            cx.len()
        )));
    }
    Ok(Prepared { clean: cx, degraded: cy })
}

fn normalise(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Classic STOI: clipped, scale-normalised envelope correlation averaged over
/// bands and segments.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    let p = prepare(clean, degraded)?;
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let segments = p.clean.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        for j in 0..BANDS {
            let mut xs: Vec<f64> = (m..m + SEGMENT).map(|t| p.clean[t][j]).collect();
            let ys: Vec<f64> = (m..m + SEGMENT).map(|t| p.degraded[t][j]).collect();
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gain = nx / (ny + EPS);
            let mut yp: Vec<f64> = ys.iter().zip(&xs).map(|(y, x)| (y * gain).min(x * (1.0 + clip))).collect();
            normalise(&mut xs);
            normalise(&mut yp);
            total += xs.iter().zip(&yp).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (segments * BANDS) as f64)
}

/// Extended STOI: each segment is mean/variance normalised along time within
/// every band, then across bands at every instant; the per-instant spectral
/// correlations are averaged.
pub fn estoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    let p = prepare(clean, degraded)?;
    let segments = p.clean.len() - SEGMENT + 1;
    let row_col = |env: &[[f64; BANDS]], m: usize| {
        let mut seg = vec![[0.0; SEGMENT]; BANDS];
        for (j, row) in seg.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = env[m + n][j];
            }
            normalise(row);
        }
        let mut cols = vec![[0.0; BANDS]; SEGMENT];
        for (n, col) in cols.iter_mut().enumerate() {
            for (j, v) in col.iter_mut().enumerate() {
                *v = seg[j][n];
            }
            normalise(col);
        }
        cols
    };
    let mut total = 0.0;
    for m in 0..segments {
        let xs = row_col(&p.clean, m);
        let ys = row_col(&p.degraded, m);
        for (a, b) in xs.iter().zip(&ys) {
            total += a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / SEGMENT as f64;
        }
    }
    Ok(total / segments as f64)
}

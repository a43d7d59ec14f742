use lip2speech::data::generate_corpus;
use lip2speech::dsp::{AudioConfig, Waveform};
use lip2speech::metrics::{estoi, stoi, wer, MetricReport};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn speech(seed: u64) -> Waveform {
    generate_corpus(1, 1, 12, seed).unwrap().remove(0).audio
}

fn noise(len: usize, scale: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); scale * v as f32 }).collect::<Vec<f32>>()
}

fn noisy(x: &Waveform, snr_scale: f32, seed: u64) -> Waveform {
    let n = noise(x.len(), snr_scale, seed);
    Waveform::new(x.samples.iter().zip(n).map(|(a, b)| a + b).collect(), x.sample_rate_hz)
}

#[test]
fn identical_signals_score_one() {
    let x = speech(1);
    assert!((stoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    assert!((estoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn positive_scaling_is_invisible() {
    let x = speech(2);
    let y = noisy(&x, 0.02, 5);
    let scaled = Waveform::new(y.samples.iter().map(|v| v * 0.3).collect(), y.sample_rate_hz);
    assert!((stoi(&x, &y).unwrap() - stoi(&x, &scaled).unwrap()).abs() < 1e-6);
    assert!((estoi(&x, &y).unwrap() - estoi(&x, &scaled).unwrap()).abs() < 1e-6);
    let louder = Waveform::new(x.samples.iter().map(|v| v * 2.5).collect(), x.sample_rate_hz);
    assert!((stoi(&x, &louder).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn independent_noise_is_unintelligible() {
    for seed in 0..3 {
        let x = speech(10 + seed);
        let n = Waveform::new(noise(x.len(), 0.1, 100 + seed), x.sample_rate_hz);
        let s = stoi(&x, &n).unwrap();
        assert!(s < 0.3, "stoi {s}");
    }
}

#[test]
fn extended_variant_stays_within_envelope_on_noisy_pairs() {
    for seed in 0..4 {
        let x = speech(20 + seed);
        for scale in [0.01, 0.03, 0.1] {
            let y = noisy(&x, scale, 200 + seed);
            let (s, e) = (stoi(&x, &y).unwrap(), estoi(&x, &y).unwrap());
            assert!(e <= s + 0.1, "estoi {e} stoi {s}");
            assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&e));
        }
    }
}

#[test]
fn more_noise_lowers_intelligibility() {
    let x = speech(30);
    let a = stoi(&x, &noisy(&x, 0.005, 1)).unwrap();
    let b = stoi(&x, &noisy(&x, 0.05, 1)).unwrap();
    assert!(a > b, "{a} vs {b}");
}

#[test]
fn short_input_is_rejected() {
    let x = Waveform::new(noise(3_000, 0.1, 1), 16_000);
    assert!(stoi(&x, &x).is_err());
    assert!(estoi(&x, &x).is_err());
}

#[test]
fn unequal_lengths_are_trimmed_and_rates_checked() {
    let x = speech(3);
    let mut longer = x.samples.clone();
    longer.extend(noise(4_000, 0.2, 9));
    let y = Waveform::new(longer, x.sample_rate_hz);
    assert!((stoi(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    let other_rate = Waveform::new(x.samples.clone(), 8_000);
    assert!(stoi(&x, &other_rate).is_err());
}

#[test]
fn report_marks_pesq_unavailable() {
    let x = speech(4);
    let r = MetricReport::evaluate(&x, &x, &AudioConfig::default()).unwrap();
    assert!((r.stoi - 1.0).abs() < 1e-6);
    assert_eq!(r.mel_mse, 0.0);
    assert_eq!(r.spectral_convergence, 0.0);
    assert_eq!(r.pesq, "unavailable");
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"pesq\":\"unavailable\""));
}

proptest! {
    #[test]
    fn wer_is_bounded(r in proptest::collection::vec("[a-d]", 1..8), h in proptest::collection::vec("[a-d]", 0..8)) {
        let w = wer(&r, &h).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!(w <= (r.len() + h.len()) as f64 / r.len() as f64);
        prop_assert_eq!(wer(&r, &r).unwrap(), 0.0);
    }
}

fn lcg_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = (s.wrapping_mul(1_664_525).wrapping_add(1_013_904_223)) % (1 << 32);
            (s >> 8) as f64 / (1u64 << 24) as f64 - 0.5
        })
        .collect()
}

fn reference_signal(fs: u32) -> Vec<f64> {
    use std::f64::consts::PI;
    let n = (1.5 * fs as f64) as usize;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs as f64;
            let env = 0.55 + 0.45 * (2.0 * PI * 3.0 * t).sin().powi(2);
            env * (0.4 * (2.0 * PI * 220.0 * t).sin()
                + 0.25 * (2.0 * PI * 660.0 * t + 0.3).sin()
                + 0.15 * (2.0 * PI * 1870.0 * t).sin())
        })
        .collect();
    let (a, b) = ((0.3 * fs as f64) as usize, (0.45 * fs as f64) as usize);
    x[a..b].iter_mut().for_each(|v| *v *= 0.001);
    x
}

/// Values produced by the widely used Python reference implementation on
/// the same deterministic signals.
#[test]
fn agrees_with_reference_implementation() {
    let cases = [
        (10_000, 0.05, 0.646_090_907_995_984_7, 0.216_894_448_583_598_83, 1e-4),
        (10_000, 0.3, 0.528_740_101_959_844_3, 0.144_285_700_458_334_4, 1e-4),
        // the reference resamples with a different filter
        (16_000, 0.05, 0.668_341_312_417_465_3, 0.277_475_070_565_608_7, 0.02),
        (16_000, 0.3, 0.577_164_064_305_193_2, 0.205_500_305_311_727_67, 0.02),
    ];
    for (fs, amp, want_stoi, want_estoi, tol) in cases {
        let x = reference_signal(fs);
        let nz = lcg_noise(x.len(), 7);
        let clean = Waveform::new(x.iter().map(|&v| v as f32).collect(), fs);
        let degraded = Waveform::new(x.iter().zip(&nz).map(|(a, b)| (a + amp * b) as f32).collect(), fs);
        let s = stoi(&clean, &degraded).unwrap();
        let e = estoi(&clean, &degraded).unwrap();
        assert!((s - want_stoi).abs() < tol, "fs {fs} amp {amp}: stoi {s} vs {want_stoi}");
        assert!((e - want_estoi).abs() < tol, "fs {fs} amp {amp}: estoi {e} vs {want_estoi}");
    }
}

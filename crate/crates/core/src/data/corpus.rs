//! Procedural audiovisual corpus.
//!
//! Each identity has a face template (geometry and colours) and a voice
//! (fundamental frequency and spectral tilt). Each word token has a mouth
//! opening trajectory, a mouth width and a formant pair. As with real
//! articulation, the peak opening sets the first formant and the lip width
//! the second; the opening curve also drives the rendered mouth height and
//! the audio amplitude envelope.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::img::Image;

const SYLLABLES: [&str; 16] = [
    "ba", "da", "ga", "pa", "ta", "ka", "ma", "na", "la", "ra", "sa", "za", "fa", "va", "ha", "ya",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub vocab_size: usize,
    pub words_per_sample: usize,
    /// Video frames per word.
    pub word_frames: usize,
    pub fps: u32,
    pub sample_rate_hz: u32,
    pub f0_base_hz: f64,
    pub f0_spacing_hz: f64,
    pub face_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_identities: 4,
            samples_per_identity: 8,
            vocab_size: 12,
            words_per_sample: 3,
            word_frames: 10,
            fps: 25,
            sample_rate_hz: 16_000,
            f0_base_hz: 100.0,
            f0_spacing_hz: 30.0,
            face_size: 64,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if self.vocab_size < 2 {
            Some("vocab_size must be ≥ 2".to_string())
        } else if self.n_identities == 0 || self.samples_per_identity == 0 {
            Some("need at least one identity and one sample each".to_string())
        } else if self.words_per_sample == 0 || self.word_frames < 2 {
            Some("need ≥ 1 word per sample and ≥ 2 frames per word".to_string())
        } else if self.fps == 0 || self.sample_rate_hz % self.fps != 0 {
            Some(format!(
                "sample rate {} must be a multiple of fps {}",
                self.sample_rate_hz, self.fps
            ))
        } else if self.f0_spacing_hz < 30.0 || self.f0_base_hz <= 0.0 {
            Some("f0 spacing must be ≥ 30 Hz and base positive".to_string())
        } else if self.face_size < 32 {
            Some(format!("face_size {} below 32", self.face_size))
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(format!("corpus: {p}"))),
            None => Ok(()),
        }
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate_hz / self.fps) as usize
    }

    pub fn word_seconds(&self) -> f64 {
        self.word_frames as f64 / self.fps as f64
    }
}

pub fn token_name(id: usize) -> String {
    match SYLLABLES.get(id) {
        Some(s) => s.to_string(),
        None => format!("w{id}"),
    }
}

pub fn token_id(name: &str, vocab_size: usize) -> Option<usize> {
    (0..vocab_size).find(|&i| token_name(i) == name)
}

const PEAKS: [f64; 3] = [0.55, 0.775, 1.0];
const WIDTHS: [f64; 4] = [0.7, 0.9, 1.1, 1.3];

/// Mouth opening in `[0, 1]` at position `u ∈ [0, 1]` through a word. Tokens
/// differ in peak height, bump count and sharpness.
pub fn mouth_opening(token: usize, u: f64) -> f64 {
    let amp = PEAKS[token % 3] * 0.85f64.powi((token / 12) as i32);
    let bumps = 1 + (token + token / 3) % 2;
    let power = 1 + ((token / 6) % 2) as i32;
    amp * (PI * bumps as f64 * u.clamp(0.0, 1.0)).sin().abs().powi(power)
}

/// Mouth width of a token relative to the identity's neutral width.
pub fn mouth_width(token: usize) -> f64 {
    WIDTHS[(token / 3) % 4]
}

/// First two formant frequencies of a token: F1 follows the peak opening,
/// F2 the mouth width.
pub fn formants(token: usize) -> (f64, f64) {
    (
        300.0 + 200.0 * (token % 3) as f64 + 60.0 * (token / 12) as f64,
        900.0 + 400.0 * ((token / 3) % 4) as f64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0_hz: f64,
    /// Harmonic amplitude falls as `(f / f0)^-tilt`.
    pub tilt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTemplate {
    pub skin: [f32; 3],
    pub background: [f32; 3],
    pub hair: [f32; 3],
    pub face_radius: [f32; 2],
    pub eye_offset: f32,
    pub eye_row: f32,
    pub eye_radius: f32,
    pub mouth_half_width: f32,
    /// `(row, col)` of the mouth centre in pixels.
    pub mouth_center: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub name: String,
    pub index: usize,
    pub voice: Voice,
    pub face: FaceTemplate,
}

impl Identity {
    pub fn new(index: usize, cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x1d_0000 + index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut colour = |lo: f32, hi: f32| -> [f32; 3] { [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)] };
        let skin = colour(0.45, 0.95);
        let background = colour(0.05, 0.4);
        let hair = colour(0.0, 0.6);
        let s = cfg.face_size as f32 / 64.0;
        let face = FaceTemplate {
            skin,
            background,
            hair,
            face_radius: [rng.gen_range(24.0..28.0) * s, rng.gen_range(19.0..24.0) * s],
            eye_offset: rng.gen_range(7.0..11.0) * s,
            eye_row: rng.gen_range(22.0..27.0) * s,
            eye_radius: rng.gen_range(2.0..3.5) * s,
            mouth_half_width: rng.gen_range(7.0..11.0) * s,
            mouth_center: [rng.gen_range(44.0..48.0) * s, rng.gen_range(30.0..34.0) * s],
        };
        Self {
            name: format!("id{index:02}"),
            index,
            voice: Voice {
                f0_hz: cfg.f0_base_hz + cfg.f0_spacing_hz * index as f64,
                tilt: 0.6 + 0.25 * (index % 4) as f64,
            },
            face,
        }
    }

    /// RGB face with the mouth open by `opening ∈ [0, 1]` and stretched
    /// horizontally by `width`.
    pub fn render(&self, opening: f64, width: f64, size: usize) -> Image {
        let f = &self.face;
        let s = size as f32 / 64.0;
        let mut img = Image::filled(size, size, 3, 0.0);
        let centre = size as f32 / 2.0;
        let mouth_ry = (0.6 + 6.5 * opening as f32) * s;
        let mouth_rx = f.mouth_half_width * width as f32;
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
                let mut px = f.background;
                let fy = (y - centre) / f.face_radius[0];
                let fx = (x - centre) / f.face_radius[1];
                if fy * fy + fx * fx <= 1.0 {
                    px = if y < f.eye_row - 7.0 * s { f.hair } else { f.skin };
                    for side in [-1.0, 1.0] {
                        let (ey, ex) = (y - f.eye_row, x - (centre + side * f.eye_offset));
                        if ey * ey + ex * ex <= f.eye_radius * f.eye_radius {
                            px = [0.05, 0.05, 0.08];
                        }
                    }
                    let my = (y - f.mouth_center[0]) / mouth_ry;
                    let mx = (x - f.mouth_center[1]) / mouth_rx;
                    if my * my + mx * mx <= 1.0 {
                        px = [0.45, 0.08, 0.1];
                    }
                }
                for (ch, v) in px.iter().enumerate() {
                    img.set(r, c, ch, *v);
                }
            }
        }
        img
    }

    /// Unit-RMS harmonic amplitudes for one token.
    pub fn harmonics(&self, token: usize, sample_rate_hz: u32) -> Vec<f64> {
        let (f1, f2) = formants(token);
        let top = (sample_rate_hz as f64 / 2.0).min(7_600.0);
        let count = (top / self.voice.f0_hz).floor() as usize;
        let resonance = |f: f64, centre: f64| (-0.5 * ((f - centre) / 150.0).powi(2)).exp();
        let mut amps: Vec<f64> = (1..=count)
            .map(|k| {
                let f = k as f64 * self.voice.f0_hz;
                (k as f64).powf(-self.voice.tilt) * (0.08 + resonance(f, f1) + 0.7 * resonance(f, f2))
            })
            .collect();
        let rms = (amps.iter().map(|a| a * a / 2.0).sum::<f64>()).sqrt();
        amps.iter_mut().for_each(|a| *a /= rms);
        amps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub identity: String,
    pub identity_index: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    /// Face video frames (RGB, or grayscale when loaded from disk).
    pub frames: Vec<Image>,
    /// Mouth opening at each frame centre.
    pub openings: Vec<f32>,
    /// Relative mouth width at each frame.
    pub widths: Vec<f32>,
    pub audio: Waveform,
    pub fps: u32,
    /// Neutral (closed-mouth) face of the speaker.
    pub face: Image,
    /// `(row, col)` mouth landmark, constant over the clip.
    pub mouth_center: [f32; 2],
}

impl SyntheticSample {
    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }
}

const LEVEL: f64 = 0.18;
const NOISE: f64 = 0.002;

fn synthesize(identity: &Identity, tokens: &[usize], cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> (Waveform, Vec<f32>) {
    let spf = cfg.samples_per_frame();
    let word_len = cfg.word_frames * spf;
    let total = tokens.len() * word_len;
    let sr = cfg.sample_rate_hz as f64;
    let tables: Vec<Vec<f64>> = tokens.iter().map(|&t| identity.harmonics(t, cfg.sample_rate_hz)).collect();
    let count = tables.iter().map(Vec::len).max().unwrap_or(0);
    let phases: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let w = i / word_len;
        let u = (i % word_len) as f64 / word_len as f64;
        let env = 0.1 + 0.9 * mouth_opening(tokens[w], u);
        let t = i as f64 / sr;
        let voiced: f64 = tables[w]
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(k, (a, p))| a * (2.0 * PI * (k + 1) as f64 * identity.voice.f0_hz * t + p).sin())
            .sum();
        let v = LEVEL * env * voiced + NOISE * rng.sample::<f64, _>(StandardNormal);
        samples.push(v.clamp(-1.0, 1.0) as f32);
    }
    let openings = (0..tokens.len() * cfg.word_frames)
        .map(|n| {
            let w = n / cfg.word_frames;
            let u = ((n % cfg.word_frames) as f64 + 0.5) / cfg.word_frames as f64;
            mouth_opening(tokens[w], u) as f32
        })
        .collect();
    (Waveform::new(samples, cfg.sample_rate_hz), openings)
}

pub fn generate_sample(identity: &Identity, tokens: &[usize], cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    cfg.validate()?;
    if tokens.is_empty() || tokens.iter().any(|&t| t >= cfg.vocab_size) {
        return Err(Error::invalid("tokens must be non-empty and inside the vocabulary"));
    }
    let (audio, openings) = synthesize(identity, tokens, cfg, rng);
    let widths: Vec<f32> = (0..openings.len())
        .map(|n| mouth_width(tokens[n / cfg.word_frames]) as f32)
        .collect();
    let frames = openings
        .iter()
        .zip(&widths)
        .map(|(&o, &w)| identity.render(o as f64, w as f64, cfg.face_size))
        .collect();
    Ok(SyntheticSample {
        identity: identity.name.clone(),
        identity_index: identity.index,
        tokens: tokens.iter().map(|&t| token_name(t)).collect(),
        token_ids: tokens.to_vec(),
        frames,
        openings,
        widths,
        audio,
        fps: cfg.fps,
        face: identity.render(0.0, 1.0, cfg.face_size),
        mouth_center: identity.face.mouth_center,
    })
}

/// `n_identities × samples_per_identity` samples, identity-major, with
/// uniformly drawn tokens. Bit-identical for equal configs.
pub fn generate_corpus_with(cfg: &CorpusConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_identities * cfg.samples_per_identity);
    for id in 0..cfg.n_identities {
        let identity = Identity::new(id, cfg);
        for _ in 0..cfg.samples_per_identity {
            let tokens: Vec<usize> = (0..cfg.words_per_sample).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            out.push(generate_sample(&identity, &tokens, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

pub fn generate_corpus(n_identities: usize, samples_per_identity: usize, vocab_size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_corpus_with(&CorpusConfig {
        n_identities,
        samples_per_identity,
        vocab_size,
        seed,
        ..CorpusConfig::default()
    })
}

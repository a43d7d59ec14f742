//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`); the process exits non-zero
//! when any criterion fails.

use std::io::Cursor;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lip2speech::data::corpus::generate_sample;
use lip2speech::data::{generate_corpus, yld_segment, yld_segment_with, CorpusConfig, Identity, SyntheticSample};
use lip2speech::decoder::{DecoderConfig, MelDecoder};
use lip2speech::dsp::griffin_lim::Magnitude;
use lip2speech::dsp::melfile::{read_mel_from, write_mel_to};
use lip2speech::dsp::wav::{read_wav_from, write_wav_to};
use lip2speech::dsp::{griffin_lim_with_history, mel_to_wav, stft, wav_to_mel, AudioConfig, Melspectrogram, Waveform};
use lip2speech::img::Image;
use lip2speech::metrics::{stoi, wer, TokenClassifier};
use lip2speech::model::{Lip2Speech, ModelConfig};
use lip2speech::nn::checkpoint::{read_checkpoint, write_checkpoint};
use lip2speech::nn::gradcheck::{check_gradients, GradCheckOutcome};
use lip2speech::nn::{Conv1d, Conv3d, Conv3dGeometry, ConvTranspose2d, ConvTranspose2dGeometry, Graph, Linear, Lstm, ParamId, ParamStore, Tensor, Var};
use lip2speech::speaker::{
    nearest, read_embeddings_from, train_speaker_encoder, write_embeddings_to, SpeakerDataset, SpeakerEmbedding, SpeakerModel,
    SpeakerModelConfig, SpeakerTrainConfig,
};
use lip2speech::trainer::{evaluate, tf_schedule, train_with, EpochRecord, TrainConfig, TrainHooks, TrainingExample, EVAL_SALT};
use lip2speech::video::{encode_frames, LipRoiSequence, VideoEncoderConfig, LIP_SIZE};
use lip2speech::Result;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Result<Verdict>;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn lip_noise(n: usize, rng: &mut ChaCha8Rng) -> LipRoiSequence {
    let frames = (0..n)
        .map(|_| Image::new(LIP_SIZE, LIP_SIZE, 1, (0..LIP_SIZE * LIP_SIZE).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    LipRoiSequence::new(frames, 25.0).unwrap()
}

fn one_hot_speaker(k: usize) -> SpeakerEmbedding {
    let mut e = vec![0.0f32; 256];
    e[k] = 1.0;
    SpeakerEmbedding::new(e).unwrap()
}

// ---------------------------------------------------------------- 1

const GRAD_H: f32 = 1e-3;
const GRAD_TOL: f64 = 1e-3;

/// Checks every entry of every parameter of `store` (inputs are registered
/// as parameters too) against `Σ r ⊙ forward(x)` for a fixed random `r`.
/// Full coverage matters: in f32 a central difference at this step carries
/// roughly 1e-4 of round-off, so a sample dominated by tiny gradients can
/// read as a mismatch that the whole vector does not have.
fn grad_instance<F>(store: &mut ParamStore, out_shape: &[usize], rng: &mut ChaCha8Rng, forward: F) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let r = random_tensor(out_shape, rng);
    let targets: Vec<ParamId> = store.ids().collect();
    check_gradients(store, &targets, GRAD_H, usize::MAX, rng, |g| {
        let y = forward(g)?;
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    })
}

fn layer_instance(kind: usize, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match kind {
        0 => {
            let (n, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let layer = Linear::new(&mut store, "lin", i, o, rng.gen_bool(0.7), &mut rng)?;
            let x = store.insert("x", random_tensor(&[n, i], &mut rng).with_requires_grad(true))?;
            grad_instance(&mut store, &[n, o], &mut rng, |g| {
                let xv = g.param(x);
                layer.forward(g, xv)
            })
        }
        1 => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = [3, 3, 3];
            let stride = [1, rng.gen_range(1..3), rng.gen_range(1..3)];
            let geom = Conv3dGeometry::same(k, stride);
            let layer = Conv3d::new(&mut store, "c3", ci, co, k, geom, &mut rng)?;
            let (d, h, w) = (rng.gen_range(1..4), rng.gen_range(3..6), rng.gen_range(3..6));
            let x = store.insert("x", random_tensor(&[1, ci, d, h, w], &mut rng).with_requires_grad(true))?;
            let out = [
                1,
                co,
                geom.output_extent(0, d, 3)?,
                geom.output_extent(1, h, 3)?,
                geom.output_extent(2, w, 3)?,
            ];
            grad_instance(&mut store, &out, &mut rng, |g| {
                let xv = g.param(x);
                layer.forward(g, xv)
            })
        }
        2 => {
            let (ci, co, k, l) = (rng.gen_range(1..4), rng.gen_range(1..4), [1, 3, 5][rng.gen_range(0..3)], rng.gen_range(1..8));
            let layer = Conv1d::same(&mut store, "c1", ci, co, k, &mut rng)?;
            let x = store.insert("x", random_tensor(&[1, ci, l], &mut rng).with_requires_grad(true))?;
            grad_instance(&mut store, &[1, co, l], &mut rng, |g| {
                let xv = g.param(x);
                layer.forward(g, xv)
            })
        }
        3 => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (k, stride) = (rng.gen_range(2..5), rng.gen_range(1..3));
            let padding = rng.gen_range(0..k.min(2));
            let layer = ConvTranspose2d::new(&mut store, "ct", ci, co, k, ConvTranspose2dGeometry { stride, padding }, &mut rng)?;
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let x = store.insert("x", random_tensor(&[2, ci, h, w], &mut rng).with_requires_grad(true))?;
            let ext = |n: usize| (n - 1) * stride + k - 2 * padding;
            grad_instance(&mut store, &[2, co, ext(h), ext(w)], &mut rng, |g| {
                let xv = g.param(x);
                layer.forward(g, xv)
            })
        }
        _ => {
            let bidirectional = kind == 5;
            let (t, i, hdim, layers) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
            let lstm = Lstm::new(&mut store, "lstm", i, hdim, layers, bidirectional, &mut rng)?;
            let x = store.insert("x", random_tensor(&[t, i], &mut rng).with_requires_grad(true))?;
            grad_instance(&mut store, &[t, lstm.output_dim()], &mut rng, |g| {
                let xv = g.param(x);
                Ok(lstm.forward(g, xv, None)?.0)
            })
        }
    }
}

fn decode_step_instance(seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DecoderConfig {
        n_mels: 5,
        decoder_layers: 2,
        bilstm_layers: 1,
        hidden_dim: 6,
        prenet_dims: [6, 4],
        attn_dim: 4,
        max_steps: 40,
        ..DecoderConfig::default()
    };
    let mut store = ParamStore::new();
    let vis = 6;
    let dec = MelDecoder::new(&mut store, "dec", &cfg, vis, &mut rng)?;
    let n = rng.gen_range(1..6);
    let step = rng.gen_range(0..8);
    let vf = random_tensor(&[n, vis], &mut rng);
    let prev = random_tensor(&[1, 5], &mut rng);
    let w = random_tensor(&[1, 5], &mut rng);
    let targets: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    check_gradients(&mut store, &targets, GRAD_H, usize::MAX, &mut rng, |g| {
        let vfv = g.constant(vf.clone());
        let mem = dec.encode_visual(g, vfv)?;
        let pv = g.constant(prev.clone());
        let out = dec.decode_step(g, pv, &mem.latent.clone(), &mem, step, None)?;
        let wv = g.constant(w.clone());
        let p = g.mul(out.frame, wv)?;
        let s = g.sum(p);
        let gate = g.sum(out.gate);
        g.add(s, gate)
    })
}

fn gradient_correctness() -> Result<Verdict> {
    const NAMES: [&str; 6] = ["linear", "conv3d", "conv1d", "conv_transpose2d", "lstm", "bilstm"];
    const PER_LAYER: u64 = 16;
    const DECODE_STEPS: u64 = 12;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut instances = 0;
    for (kind, name) in NAMES.iter().enumerate() {
        for s in 0..PER_LAYER {
            let seed = 1000 * kind as u64 + s;
            let o = layer_instance(kind, seed)?;
            instances += 1;
            worst = worst.max(o.rel_error);
            if !o.passes(GRAD_TOL) {
                failures.push(format!("{name}#{seed} rel {:.2e}", o.rel_error));
            }
        }
    }
    for s in 0..DECODE_STEPS {
        let o = decode_step_instance(9000 + s)?;
        instances += 1;
        worst = worst.max(o.rel_error);
        if !o.passes(GRAD_TOL) {
            failures.push(format!("decode_step#{s} rel {:.2e}", o.rel_error));
        }
    }
    Ok(Verdict::new(
        failures.is_empty() && instances >= 100,
        format!("{instances} instances, worst rel error {worst:.2e} (tol {GRAD_TOL:.0e}); failing: {failures:?}"),
    ))
}

// ---------------------------------------------------------------- 2

fn tone(cfg: &AudioConfig, secs: f64) -> Waveform {
    let sr = cfg.sample_rate_hz as f64;
    let n = (secs * sr) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
            let s = 0.5 * (2.0 * std::f64::consts::PI * 220.0 * t).sin() + 0.25 * (2.0 * std::f64::consts::PI * 660.0 * t).sin();
            (env * s) as f32
        })
        .collect();
    Waveform::new(samples, cfg.sample_rate_hz)
}

fn griffin_lim_convergence() -> Result<Verdict> {
    let cfg = AudioConfig::default();
    let bins = cfg.n_bins();
    let mut bad = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(8..40);
        let mag = Magnitude::new((0..frames * bins).map(|_| rng.gen::<f64>()).collect(), frames, bins)?;
        let run = griffin_lim_with_history(&mag, &cfg, 60, seed)?;
        let h = &run.sc_history;
        if h.len() != 60 {
            bad.push(format!("seed {seed}: {} entries", h.len()));
        } else if let Some(i) = h.windows(2).position(|w| w[1] > w[0]) {
            bad.push(format!("seed {seed}: SC rose at iteration {} ({} -> {})", i + 1, h[i], h[i + 1]));
        }
    }
    let mag = Magnitude::of(&stft(&tone(&cfg, 0.5), &cfg)?);
    let sc = *griffin_lim_with_history(&mag, &cfg, 60, 7)?.sc_history.last().unwrap();
    Ok(Verdict::new(
        bad.is_empty() && sc < 0.1,
        format!("20 random magnitudes monotone: {}; tone SC after 60 iterations {sc:.4} (< 0.1); {bad:?}", bad.is_empty()),
    ))
}

// ---------------------------------------------------------------- 3

fn round_trip_fidelity() -> Result<Verdict> {
    let audio = AudioConfig::default();
    let cfg = CorpusConfig {
        words_per_sample: 5,
        word_frames: 10,
        ..CorpusConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sample = generate_sample(&Identity::new(2, &cfg), &[0, 4, 7, 9, 11], &cfg, &mut rng)?;
    let original = &sample.audio;
    let mel = wav_to_mel(original, &audio)?;
    let mut recon = mel_to_wav(&mel, &audio, 60)?;
    // synthesis is peak-normalised; restore the source level before re-analysis
    let gain = original.peak();
    recon.samples.iter_mut().for_each(|v| *v *= gain);
    let back = wav_to_mel(&recon, &audio)?;
    let t = back.frames().min(mel.frames());
    let mae = mel.data()[..t * mel.n_mels()]
        .iter()
        .zip(&back.data()[..t * mel.n_mels()])
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / (t * mel.n_mels()) as f64;
    let s = stoi(original, &recon)?;
    Ok(Verdict::new(
        mae < 1.0 && s > 0.75,
        format!("{:.2} s utterance: mel MAE {mae:.3} (< 1.0), STOI {s:.3} (> 0.75)", original.duration_s()),
    ))
}

// ---------------------------------------------------------------- 4

fn overfit_convergence() -> Result<Verdict> {
    let audio = AudioConfig::default();
    let s = &generate_corpus(1, 1, 12, 5)?[0];
    let target = wav_to_mel(&s.audio, &audio)?;
    let ex = TrainingExample {
        lips: LipRoiSequence::from_faces(&s.frames, Some(s.mouth_center), s.fps as f32)?,
        speaker: one_hot_speaker(0),
        target: target.clone(),
    };
    let cfg = ModelConfig {
        video: VideoEncoderConfig { stem_channels: 4, blocks: 3 },
        decoder: DecoderConfig {
            hidden_dim: 64,
            prenet_dims: [64, 32],
            attn_dim: 32,
            max_steps: 200,
            ..DecoderConfig::default()
        },
        seed: 1,
    };
    let mut model = Lip2Speech::new(&cfg)?;
    let tc = TrainConfig {
        lr: 2e-3,
        max_epochs: 200,
        early_stop_patience: 1000,
        ..TrainConfig::default()
    };
    let report = train_with(&mut model, std::slice::from_ref(&ex), &tc, &mut Quiet)?;
    let reached = report.epochs.iter().find(|e| e.train_mse < 0.05).map(|e| e.epoch);
    let best = report.epochs.iter().map(|e| e.train_mse).fold(f32::INFINITY, f32::min);
    let gen = model.generate(&ex.lips, &ex.speaker, 0.5, 200, 0, &audio)?;
    let ratio = gen.mel.frames() as f64 / target.frames() as f64;
    Ok(Verdict::new(
        reached.is_some() && (0.8..=1.2).contains(&ratio),
        format!(
            "train MSE < 0.05 first at epoch {reached:?} of {} (min {best:.4}); generated {} frames vs target {} (ratio {ratio:.2})",
            report.epochs.len(),
            gen.mel.frames(),
            target.frames()
        ),
    ))
}

struct Quiet;

impl TrainHooks for Quiet {}

struct Progress(&'static str);

impl TrainHooks for Progress {
    fn epoch_end(&mut self, r: &EpochRecord) {
        if r.epoch % 20 == 0 {
            eprintln!("  [{}] epoch {:3} tf {:.1} mse {:.4} val {:.4} {:.0}s", self.0, r.epoch, r.tf_ratio, r.train_mse, r.val_mse, r.wall_s);
        }
    }
}

// ---------------------------------------------------------------- 5

fn corpus_generalization() -> Result<Verdict> {
    let audio = AudioConfig::default();
    let corpus = generate_corpus(4, 8, 12, 11)?;
    let speaker = SpeakerModel::new(&SpeakerModelConfig::default())?;
    let data: Vec<TrainingExample> = corpus
        .iter()
        .map(|s| {
            Ok(TrainingExample {
                lips: LipRoiSequence::from_faces(&s.frames, Some(s.mouth_center), s.fps as f32)?,
                speaker: speaker.face_encode(&s.face)?,
                target: wav_to_mel(&s.audio, &audio)?,
            })
        })
        .collect::<Result<_>>()?;
    let cfg = ModelConfig {
        video: VideoEncoderConfig { stem_channels: 8, blocks: 3 },
        decoder: DecoderConfig {
            hidden_dim: 64,
            prenet_dims: [64, 32],
            attn_dim: 32,
            max_steps: 200,
            ..DecoderConfig::default()
        },
        seed: 1,
    };
    let mut model = Lip2Speech::new(&cfg)?;
    let tc = TrainConfig {
        lr: 2e-3,
        max_epochs: 120,
        early_stop_patience: 1000,
        ..TrainConfig::default()
    };
    let report = train_with(&mut model, &data, &tc, &mut Progress("corpus"))?;
    let train: Vec<&TrainingExample> = report.train_indices.iter().map(|&i| &data[i]).collect();
    let held: Vec<&TrainingExample> = report.val_indices.iter().map(|&i| &data[i]).collect();
    let eval_seed = tc.seed ^ EVAL_SALT;
    let (_, train_mse) = evaluate(&model, &train, tc.gate_pos_weight, eval_seed)?;
    let (_, held_mse) = evaluate(&model, &held, tc.gate_pos_weight, eval_seed)?;

    let fit: Vec<(&Melspectrogram, &[String])> =
        report.train_indices.iter().map(|&i| (&data[i].target, corpus[i].tokens.as_slice())).collect();
    let classifier = TokenClassifier::fit(&fit)?;
    let mut total_wer = 0.0;
    for &i in &report.val_indices {
        let gen = model.generate(&data[i].lips, &data[i].speaker, 0.5, 200, 7, &audio)?;
        let wav = mel_to_wav(&gen.mel, &audio, 60)?;
        let hyp = classifier.classify(&wav_to_mel(&wav, &audio)?);
        total_wer += wer(&corpus[i].tokens, &hyp)?;
    }
    let mean_wer = total_wer / report.val_indices.len() as f64;
    let ratio = held_mse / train_mse;
    Ok(Verdict::new(
        ratio < 2.0 && mean_wer < 0.5,
        format!(
            "{} train / {} held out: teacher-forced MSE {train_mse:.4} vs {held_mse:.4} (ratio {ratio:.2} < 2); held-out WER {:.1}% (< 50%)",
            train.len(),
            held.len(),
            100.0 * mean_wer
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn speaker_identity() -> Result<Verdict> {
    let audio = AudioConfig::default();
    let corpus = generate_corpus(8, 8, 12, 3)?;
    let (train, held): (Vec<(usize, &SyntheticSample)>, Vec<(usize, &SyntheticSample)>) =
        corpus.iter().enumerate().partition(|(i, _)| i % 8 < 6);
    let train: Vec<&SyntheticSample> = train.into_iter().map(|(_, s)| s).collect();
    let held: Vec<&SyntheticSample> = held.into_iter().map(|(_, s)| s).collect();
    let mut model = SpeakerModel::new(&SpeakerModelConfig::default())?;
    let mels: Vec<Melspectrogram> = train.iter().map(|s| wav_to_mel(&s.audio, &audio)).collect::<Result<_>>()?;
    model.calibrate_speech(&mels)?;
    let frozen = model.frozen_fingerprint();
    let speech = model.speech_fingerprint();
    let dtrain = SpeakerDataset::from_samples(&train, &audio)?;
    let dheld = SpeakerDataset::from_samples(&held, &audio)?;
    let cfg = SpeakerTrainConfig {
        max_steps: 300,
        ..SpeakerTrainConfig::default()
    };
    train_speaker_encoder(&mut model, &dtrain, &dheld, &cfg)?;
    let unchanged = model.frozen_fingerprint() == frozen && model.speech_fingerprint() == speech;

    let faces: Vec<Image> = held.iter().map(|s| s.frames[0].clone()).collect();
    let face_embs = model.face_encode_batch(&faces)?;
    let speech_embs: Vec<SpeakerEmbedding> =
        held.iter().map(|s| model.speech_encode(&wav_to_mel(&s.audio, &audio)?)).collect::<Result<_>>()?;
    let hits = nearest(&face_embs, &speech_embs)
        .iter()
        .enumerate()
        .filter(|&(i, &j)| held[i].identity_index == held[j].identity_index)
        .count();
    let acc = hits as f64 / held.len() as f64;
    Ok(Verdict::new(
        acc >= 0.8 && unchanged,
        format!("held-out face->speech retrieval {hits}/{} = {:.1}% (>= 80%); frozen blocks unchanged: {unchanged}", held.len(), 100.0 * acc),
    ))
}

// ---------------------------------------------------------------- 7

fn architecture_contracts() -> Result<Verdict> {
    let audio = AudioConfig::default();
    let cfg = ModelConfig {
        video: VideoEncoderConfig { stem_channels: 2, blocks: 3 },
        decoder: DecoderConfig {
            hidden_dim: 16,
            prenet_dims: [16, 8],
            attn_dim: 8,
            max_steps: 40,
            ..DecoderConfig::default()
        },
        seed: 3,
    };
    let model = Lip2Speech::new(&cfg)?;
    let speaker = one_hot_speaker(5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();
    let mut max_dev = 0.0f64;
    for n in [1usize, 5, 29] {
        let lips = lip_noise(n, &mut rng);
        let feats = encode_frames(&model.video, &model.store, &lips)?;
        if feats.shape()[0] != n {
            problems.push(format!("video features {:?} for N={n}", feats.shape()));
        }
        let vf = model.visual_tensor(&lips, &speaker)?;
        let mut g = Graph::new(&model.store);
        let v = g.constant(vf.clone());
        let mem = model.decoder.encode_visual(&mut g, v)?;
        if vf.shape()[0] != n || mem.rows != n {
            problems.push(format!("N={n}: fused {:?}, memory rows {}", vf.shape(), mem.rows));
        }
        for max_steps in [1, 7, 40] {
            let gen = model.decoder.generate(&model.store, &vf, 0.5, max_steps, n as u64, &audio)?;
            if gen.mel.frames() > max_steps || gen.attention.len() != gen.mel.frames() {
                problems.push(format!("N={n}: {} frames for max_steps {max_steps}", gen.mel.frames()));
            }
            for row in &gen.attention {
                max_dev = max_dev.max((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs());
                if row.len() != n || row.iter().any(|&w| w < 0.0) {
                    problems.push(format!("N={n}: attention row of {} entries", row.len()));
                }
            }
            if let Some(v) = gen.gates.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
                problems.push(format!("N={n}: gate {v}"));
            }
        }
    }

    // a gate that never fires runs exactly to the bound
    let mut silent = Lip2Speech::new(&cfg)?;
    silent.store.get_mut(silent.decoder.gate_proj.weight).data_mut().fill(0.0);
    silent.store.get_mut(silent.decoder.gate_proj.bias.unwrap()).data_mut().fill(-12.0);
    let lips = lip_noise(6, &mut rng);
    for max_steps in [1, 23] {
        let gen = silent.generate(&lips, &speaker, 0.5, max_steps, 1, &audio)?;
        if gen.mel.frames() != max_steps {
            problems.push(format!("never-firing gate gave {} frames for max_steps {max_steps}", gen.mel.frames()));
        }
    }

    let mut zero = Lip2Speech::new(&cfg)?;
    zero.store.scale_all(0.0);
    let vf = zero.visual_tensor(&lips, &speaker)?;
    let zero_gates = {
        let mut g = Graph::new(&zero.store);
        let v = g.constant(vf);
        let mem = zero.decoder.encode_visual(&mut g, v)?;
        let prev = g.param(zero.decoder.go_frame);
        let mut gates = Vec::new();
        let mut state = mem.latent.clone();
        let mut prev = prev;
        for step in 0..4 {
            let out = zero.decoder.decode_step(&mut g, prev, &state, &mem, step, None)?;
            gates.push(g.scalar(out.gate));
            prev = out.frame;
            state = out.state;
        }
        gates
    };
    if zero_gates.iter().any(|&v| v != 0.5) {
        problems.push(format!("zero-parameter gates {zero_gates:?}"));
    }
    Ok(Verdict::new(
        problems.is_empty() && max_dev <= 1e-6,
        format!("N in {{1,5,29}} preserved, max |sum(attention) - 1| {max_dev:.1e}, zero-parameter gate {:?}; {problems:?}", zero_gates[0]),
    ))
}

// ---------------------------------------------------------------- 8

fn yld_segmentation() -> Result<Verdict> {
    let mut problems = Vec::new();

    let segs = yld_segment(&[true; 100], 25.0)?;
    let got: Vec<(f64, f64)> = segs.iter().map(|s| (s.start_s, s.end_s)).collect();
    if got != [(0.0, 3.0), (3.0, 4.0)] {
        problems.push(format!("4 s all-true gave {got:?}"));
    }
    if !yld_segment(&[false; 100], 25.0)?.is_empty() {
        problems.push("all-false gave segments".into());
    }
    let mut half = vec![false; 60];
    half[20..32].iter_mut().for_each(|v| *v = true);
    if !yld_segment(&half, 25.0)?.is_empty() {
        problems.push("0.5 s run gave segments".into());
    }

    let strategy = (
        prop::collection::vec(prop::bool::weighted(0.85), 1..400),
        prop::sample::select(vec![10.0f64, 24.0, 25.0, 29.97, 30.0]),
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let outcome = runner.run(&strategy, |(det, fps)| {
        let segs = yld_segment(&det, fps).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut last_end = 0;
        for s in &segs {
            let [a, b] = s.frame_range;
            prop_assert!(a >= last_end && a < b && b <= det.len(), "ranges {:?}", segs.iter().map(|s| s.frame_range).collect::<Vec<_>>());
            let dur = (b - a) as f64 / fps;
            prop_assert!((1.0 - 1e-9..=3.0 + 1e-9).contains(&dur), "duration {dur}");
            prop_assert!(det[a..b].iter().all(|&d| d), "segment {a}..{b} has a negative frame");
            prop_assert!((s.start_s - a as f64 / fps).abs() < 1e-9 && (s.end_s - b as f64 / fps).abs() < 1e-9);
            last_end = b;
        }
        // no qualifying run is left out entirely
        let mut start = None;
        for (i, &d) in det.iter().chain(std::iter::once(&false)).enumerate() {
            match (d, start) {
                (true, None) => start = Some(i),
                (false, Some(a)) => {
                    if (i - a) as f64 / fps >= 1.0 {
                        prop_assert!(segs.iter().any(|s| s.frame_range[0] >= a && s.frame_range[1] <= i), "run {a}..{i} dropped");
                    }
                    start = None;
                }
                _ => {}
            }
        }
        Ok(())
    });
    if let Err(e) = outcome {
        problems.push(format!("property: {e}"));
    }
    if yld_segment_with(&[true; 10], 0.0, 1.0, 3.0).is_ok() {
        problems.push("fps 0 accepted".into());
    }
    Ok(Verdict::new(
        problems.is_empty(),
        format!("3 documented examples + 512 random detection tracks; {problems:?}"),
    ))
}

// ---------------------------------------------------------------- 9

fn teacher_forcing_schedule() -> Result<Verdict> {
    let cfg = TrainConfig::default();
    let mut mismatches = Vec::new();
    for epoch in 0..=300usize {
        // exact rational oracle, in tenths
        let tenths = 10usize.saturating_sub(epoch / 10).max(2);
        let expected = tenths as f64 / 10.0;
        let got = tf_schedule(epoch, &cfg);
        if (got - expected).abs() > 1e-12 {
            mismatches.push((epoch, got, expected));
        }
    }
    let floor_from = (0..=300).find(|&e| tf_schedule(e, &cfg) <= 0.2 + 1e-12);
    Ok(Verdict::new(
        mismatches.is_empty() && floor_from == Some(80),
        format!("epochs 0..=300 checked; floor 0.2 from epoch {floor_from:?}; mismatches {mismatches:?}"),
    ))
}

// ---------------------------------------------------------------- 10

fn bytes_of<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn bit_exact_io() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut problems = Vec::new();

    let model = Lip2Speech::new(&ModelConfig {
        video: VideoEncoderConfig { stem_channels: 2, blocks: 3 },
        decoder: DecoderConfig {
            hidden_dim: 16,
            prenet_dims: [16, 8],
            attn_dim: 8,
            ..DecoderConfig::default()
        },
        seed: 9,
    })?;
    let ck = bytes_of(|b| write_checkpoint(&model.store, b))?;
    let loaded = read_checkpoint(Cursor::new(&ck))?;
    let ck2 = bytes_of(|b| write_checkpoint(&loaded, b))?;
    let same_values = model.store.ids().all(|id| loaded.get(id).data() == model.store.get(id).data());
    if ck != ck2 || !same_values {
        problems.push("checkpoint".to_string());
    }

    let audio = AudioConfig::default();
    let frames = 37;
    let mel = Melspectrogram::new(random_tensor(&[frames, 80], &mut rng).data().to_vec(), frames, 80, audio.sample_rate_hz, audio.hop)?;
    let m1 = bytes_of(|b| write_mel_to(&mel, b))?;
    let mel_back = read_mel_from(Cursor::new(&m1))?;
    let m2 = bytes_of(|b| write_mel_to(&mel_back, b))?;
    if m1 != m2 || mel_back != mel {
        problems.push("MEL1".to_string());
    }

    let embs: Vec<SpeakerEmbedding> = (0..5)
        .map(|_| {
            let v: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            SpeakerEmbedding::new(v.into_iter().map(|x| x / norm).collect())
        })
        .collect::<Result<_>>()?;
    let e1 = bytes_of(|b| write_embeddings_to(&embs, b))?;
    let embs_back = read_embeddings_from(Cursor::new(&e1))?;
    let e2 = bytes_of(|b| write_embeddings_to(&embs_back, b))?;
    if e1 != e2 || embs_back.iter().zip(&embs).any(|(a, b)| a.values() != b.values()) {
        problems.push("EMB1".to_string());
    }

    let wave = Waveform::new((0..4000).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), audio.sample_rate_hz);
    let mut w1 = Cursor::new(Vec::new());
    write_wav_to(&wave, &mut w1)?;
    let wave_back = read_wav_from(Cursor::new(w1.get_ref()))?;
    let mut w2 = Cursor::new(Vec::new());
    write_wav_to(&wave_back, &mut w2)?;
    let within_lsb = wave.samples.iter().zip(&wave_back.samples).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0);
    if w1.get_ref() != w2.get_ref() || !within_lsb || wave_back.len() != wave.len() {
        problems.push("WAV".to_string());
    }

    Ok(Verdict::new(
        problems.is_empty(),
        format!("checkpoint {} B, MEL1 {} B, EMB1 {} B, WAV {} B re-encoded; mismatched: {problems:?}", ck.len(), m1.len(), e1.len(), w1.get_ref().len()),
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, Criterion, Duration); 10] = [
        ("gradient correctness", gradient_correctness, Duration::from_secs(120)),
        ("Griffin-Lim convergence", griffin_lim_convergence, Duration::from_secs(60)),
        ("round-trip fidelity", round_trip_fidelity, Duration::from_secs(60)),
        ("overfit convergence", overfit_convergence, Duration::from_secs(600)),
        ("small-corpus generalization", corpus_generalization, Duration::from_secs(1800)),
        ("speaker identity", speaker_identity, Duration::from_secs(600)),
        ("architecture contracts", architecture_contracts, Duration::from_secs(600)),
        ("YLD segmentation", yld_segmentation, Duration::from_secs(600)),
        ("teacher-forcing schedule", teacher_forcing_schedule, Duration::from_secs(600)),
        ("bit-exact I/O", bit_exact_io, Duration::from_secs(600)),
    ];
    // numeric arguments select criteria; anything else (libtest flags) is ignored
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let elapsed = t0.elapsed();
        let on_time = elapsed <= *budget;
        let pass = verdict.pass && on_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {} [{:.1} s, budget {} s{}]",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if on_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

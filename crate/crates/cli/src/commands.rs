//! One function per subcommand. Each returns a JSON summary that `main`
//! prints on success.

use std::fs;
use std::path::{Path, PathBuf};

use lip2speech::data::disk::{read_corpus, read_frames, read_sample, write_corpus};
use lip2speech::data::{detect, extract_clips, generate_corpus_with, yld_segment, SyntheticSample, TemplateMatcher};
use lip2speech::dsp::melfile::{read_mel, write_mel};
use lip2speech::dsp::wav::{read_wav, write_wav};
use lip2speech::dsp::{chunked_synthesize, wav_to_mel, Melspectrogram};
use lip2speech::img::{heatmap, read_image, write_image, Image};
use lip2speech::metrics::{wer, MetricReport};
use lip2speech::model::Lip2Speech;
use lip2speech::nn::checkpoint;
use lip2speech::speaker::{train_speaker_encoder, write_embeddings, SpeakerDataset, SpeakerModel};
use lip2speech::trainer::{train_with, EpochRecord, TrainHooks, TrainingExample};
use lip2speech::video::LipRoiSequence;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::CliConfig;
use crate::failure::{persist, persist_bytes, persist_json, CliResult, Failure};

const DEFAULT_FPS: f32 = 25.0;

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Failure::from(e).at(out))
}

/// Builds `out` next to its final location and moves the entries over.
fn stage_dir<F>(out: &Path, fill: F) -> CliResult<Vec<PathBuf>>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Failure::from(e).at(parent))?;
    let staging = parent.join(format!(".{name}.{}.tmp", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    prepare_out(out)?;
    let mut moved = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(&staging)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for src in entries {
        let dest = out.join(src.file_name().expect("directory entry has a name"));
        if dest.is_dir() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&src, &dest).map_err(|e| Failure::from(e).at(&dest))?;
        moved.push(dest);
    }
    fs::remove_dir(&staging)?;
    Ok(moved)
}

fn save_config(cfg: &CliConfig, out: &Path) -> CliResult<()> {
    persist_json(&out.join("config.json"), cfg)
}

fn read_dataset(data: &Path) -> CliResult<Vec<SyntheticSample>> {
    read_corpus(data).map_err(|e| Failure::from(e).at(data))
}

pub fn gen_corpus(cfg: &CliConfig, out: &Path) -> CliResult<Value> {
    let samples = generate_corpus_with(&cfg.corpus)?;
    let written = stage_dir(out, |dir| {
        write_corpus(dir, &samples)?;
        persist_json(&dir.join("corpus.json"), &cfg.corpus)
    })?;
    Ok(json!({
        "samples": samples.len(),
        "identities": cfg.corpus.n_identities,
        "entries": written.len(),
        "out": out,
    }))
}

/// Holds out the last quarter (rounded up) of every identity's samples;
/// identities with a single sample stay in training.
fn split_by_identity(corpus: &[SyntheticSample]) -> (Vec<usize>, Vec<usize>) {
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in corpus.iter().enumerate() {
        by_id.entry(s.identity_index).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_id.values() {
        let held = if idx.len() < 2 { 0 } else { idx.len().div_ceil(4) };
        train.extend_from_slice(&idx[..idx.len() - held]);
        val.extend_from_slice(&idx[idx.len() - held..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train_speaker(cfg: &CliConfig, data: &Path, out: &Path) -> CliResult<Value> {
    let corpus = read_dataset(data)?;
    let (train_idx, val_idx) = split_by_identity(&corpus);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &corpus[i]).collect::<Vec<_>>();
    let (train, val) = (pick(&train_idx), pick(&val_idx));
    let mut model = SpeakerModel::new(&cfg.speaker)?;
    let mels = train
        .iter()
        .map(|s| wav_to_mel(&s.audio, &cfg.audio))
        .collect::<lip2speech::Result<Vec<_>>>()?;
    model.calibrate_speech(&mels)?;
    let dtrain = SpeakerDataset::from_samples(&train, &cfg.audio)?;
    let dval = SpeakerDataset::from_samples(if val.is_empty() { &train } else { &val }, &cfg.audio)?;
    let report = train_speaker_encoder(&mut model, &dtrain, &dval, &cfg.speaker_train)?;

    let faces: Vec<Image> = corpus.iter().map(|s| s.face.clone()).collect();
    let embeddings = model.face_encode_batch(&faces)?;
    prepare_out(out)?;
    persist(&out.join("speaker.ckpt"), |p| checkpoint::save(&model.store, p))?;
    persist(&out.join("embeddings.emb"), |p| write_embeddings(&embeddings, p))?;
    persist_json(&out.join("speaker_report.json"), &report)?;
    save_config(cfg, out)?;
    Ok(json!({
        "initial_val_loss": report.initial_val_loss,
        "best_val_loss": report.best_val_loss,
        "steps": report.steps,
        "stop_reason": report.stop_reason,
        "train_samples": train_idx.len(),
        "val_samples": val_idx.len(),
    }))
}

fn load_speaker(cfg: &CliConfig, ckpt: Option<&Path>) -> CliResult<SpeakerModel> {
    let mut model = SpeakerModel::new(&cfg.speaker)?;
    if let Some(p) = ckpt {
        checkpoint::load_into(&mut model.store, p).map_err(|e| Failure::from(e).at(p))?;
    }
    Ok(model)
}

struct Progress;

impl TrainHooks for Progress {
    fn epoch_end(&mut self, r: &EpochRecord) {
        eprintln!(
            "epoch {:>4}  tf {:.1}  train {:.4}  val {:.4}  {:.1}s",
            r.epoch, r.tf_ratio, r.train_loss, r.val_loss, r.wall_s
        );
    }
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_loss: f32,
    stop_reason: String,
    epochs: usize,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
}

pub fn train(cfg: &CliConfig, data: &Path, speaker_ckpt: Option<&Path>, out: &Path) -> CliResult<Value> {
    let corpus = read_dataset(data)?;
    let speaker = load_speaker(cfg, speaker_ckpt)?;
    let examples = corpus
        .iter()
        .map(|s| {
            Ok(TrainingExample {
                lips: LipRoiSequence::from_faces(&s.frames, Some(s.mouth_center), s.fps as f32)?,
                speaker: speaker.face_encode(&s.face)?,
                target: wav_to_mel(&s.audio, &cfg.audio)?,
            })
        })
        .collect::<lip2speech::Result<Vec<_>>>()?;
    let mut model = Lip2Speech::new(&cfg.model)?;
    let report = train_with(&mut model, &examples, &cfg.train, &mut Progress)?;

    prepare_out(out)?;
    persist(&out.join("model.ckpt"), |p| model.save(p))?;
    persist(&out.join("speaker.ckpt"), |p| checkpoint::save(&speaker.store, p))?;
    persist_bytes(&out.join("train_log.jsonl"), report.to_json_lines()?.as_bytes())?;
    let summary = TrainSummary {
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        stop_reason: report.stop_reason.clone(),
        epochs: report.epochs.len(),
        train_indices: report.train_indices.clone(),
        val_indices: report.val_indices.clone(),
    };
    persist_json(&out.join("train_report.json"), &summary)?;
    save_config(cfg, out)?;
    Ok(serde_json::to_value(&summary)?)
}

/// Face frames, neutral face, mouth landmark and frame rate of an input
/// directory. A directory with `meta.json` is read as a corpus sample;
/// otherwise frames come from `frames/` (or the directory itself) and the
/// face from `face.ppm`/`face.png` or the first frame.
struct VideoInput {
    frames: Vec<Image>,
    face: Image,
    mouth: Option<[f32; 2]>,
    fps: f32,
    reference: Option<lip2speech::dsp::Waveform>,
}

fn read_input(dir: &Path) -> CliResult<VideoInput> {
    if dir.join("meta.json").is_file() {
        let s = read_sample(dir).map_err(|e| Failure::from(e).at(dir))?;
        return Ok(VideoInput {
            frames: s.frames,
            face: s.face,
            mouth: Some(s.mouth_center),
            fps: s.fps as f32,
            reference: Some(s.audio),
        });
    }
    let frame_dir = if dir.join("frames").is_dir() { dir.join("frames") } else { dir.to_path_buf() };
    let frames = read_frames(&frame_dir).map_err(|e| Failure::from(e).at(&frame_dir))?;
    let face = ["face.ppm", "face.png"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .map(|p| read_image(&p).map_err(|e| Failure::from(e).at(&p)))
        .transpose()?
        .unwrap_or_else(|| frames[0].clone());
    Ok(VideoInput {
        frames,
        face,
        mouth: None,
        fps: DEFAULT_FPS,
        reference: None,
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Number of video frames per inference chunk.
pub fn chunk_frames(chunk_seconds: f64, fps: f32) -> usize {
    ((chunk_seconds * fps as f64).round() as usize).max(1)
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub speaker: Option<&'a Path>,
    pub attention: bool,
    pub out: &'a Path,
}

pub fn infer(cfg: &CliConfig, args: &InferArgs) -> CliResult<Value> {
    let model = Lip2Speech::load(&cfg.model, args.checkpoint).map_err(|e| Failure::from(e).at(args.checkpoint))?;
    let default_speaker = sibling(args.checkpoint, "speaker.ckpt");
    let speaker_ckpt = args.speaker.map(Path::to_path_buf).or_else(|| default_speaker.is_file().then_some(default_speaker));
    let speaker = load_speaker(cfg, speaker_ckpt.as_deref())?;
    let input = read_input(args.input)?;
    let lips = LipRoiSequence::from_faces(&input.frames, input.mouth, input.fps)?;
    let embedding = speaker.face_encode(&input.face)?;

    let per_chunk = chunk_frames(cfg.infer.chunk_seconds, input.fps);
    let mut mels = Vec::new();
    let mut attention = Vec::new();
    let mut chunks = Vec::new();
    for (k, frames) in lips.frames.chunks(per_chunk).enumerate() {
        let seq = LipRoiSequence::new(frames.to_vec(), input.fps)?;
        let gen = model.generate(
            &seq,
            &embedding,
            cfg.infer.threshold,
            cfg.model.decoder.max_steps,
            cfg.infer.seed.wrapping_add(k as u64),
            &cfg.audio,
        )?;
        let stopped = gen.gates.last().is_some_and(|&g| g > cfg.infer.threshold);
        chunks.push(json!({ "video_frames": frames.len(), "mel_frames": gen.mel.frames(), "stopped_by_gate": stopped }));
        mels.push(gen.mel);
        attention.push(gen.attention);
    }
    let mel = Melspectrogram::concat(&mels)?;
    if !mel.is_finite() {
        return Err(Failure::new(crate::failure::Category::Numeric, "generated melspectrogram is not finite"));
    }
    let wav = chunked_synthesize(&mels, &cfg.audio, cfg.infer.iterations)?;
    if wav.samples.iter().any(|s| !s.is_finite()) {
        return Err(Failure::new(crate::failure::Category::Numeric, "synthesized audio is not finite"));
    }

    prepare_out(args.out)?;
    persist(&args.out.join("speech.wav"), |p| write_wav(&wav, p))?;
    persist(&args.out.join("speech.mel"), |p| write_mel(&mel, p))?;
    if args.attention {
        for (k, att) in attention.iter().enumerate() {
            let cols = att.first().map_or(0, Vec::len);
            // Rows are encoder positions, columns decoder steps.
            let mut t = vec![0.0f32; cols * att.len()];
            for (s, row) in att.iter().enumerate() {
                for (n, &w) in row.iter().enumerate() {
                    t[n * att.len() + s] = w;
                }
            }
            render(&t, cols, att.len(), &args.out.join(format!("attention_{k:03}.pgm")), "rows: encoder positions; columns: decoder steps")?;
        }
    }
    let mut summary = json!({
        "chunks": chunks,
        "chunk_video_frames": per_chunk,
        "mel_frames": mel.frames(),
        "duration_s": wav.duration_s(),
    });
    if let Some(reference) = &input.reference {
        let target = wav_to_mel(reference, &cfg.audio)?;
        summary["mel_mse_vs_reference"] = json!(lip2speech::metrics::mel_mse(&mel, &target)?);
    }
    persist_json(&args.out.join("infer.json"), &summary)?;
    Ok(summary)
}

/// Writes a min/max-normalised PGM and a JSON sidecar next to it.
fn render(values: &[f32], rows: usize, cols: usize, path: &Path, layout: &str) -> CliResult<Value> {
    let (img, lo, hi) = heatmap(values, rows, cols)?;
    persist(path, |p| write_image(&img, p))?;
    let sidecar = json!({
        "min": lo,
        "max": hi,
        "rows": rows,
        "cols": cols,
        "layout": layout,
        "pixel": "round(255 * (v - min) / (max - min)); 128 everywhere when max == min",
    });
    persist_json(&path.with_extension("json"), &sidecar)?;
    Ok(sidecar)
}

pub fn render_mel(mel_path: &Path, out: &Path) -> CliResult<Value> {
    let mel = read_mel(mel_path).map_err(|e| Failure::from(e).at(mel_path))?;
    let (frames, bands) = (mel.frames(), mel.n_mels());
    // Highest band on the top row, time left to right.
    let mut values = vec![0.0f32; frames * bands];
    for t in 0..frames {
        for (m, &v) in mel.row(t).iter().enumerate() {
            values[(bands - 1 - m) * frames + t] = v;
        }
    }
    prepare_out(out)?;
    let stem = mel_path.file_stem().map_or("mel".into(), |s| s.to_string_lossy().into_owned());
    let path = out.join(format!("{stem}.pgm"));
    let sidecar = render(&values, bands, frames, &path, "rows: mel bands, highest first; columns: frames")?;
    Ok(json!({ "image": path, "min": sidecar["min"], "max": sidecar["max"] }))
}

pub struct MetricsArgs<'a> {
    pub reference: &'a Path,
    pub degraded: &'a Path,
    pub reference_text: Option<&'a str>,
    pub hypothesis_text: Option<&'a str>,
    pub out: Option<&'a Path>,
}

pub fn metrics(cfg: &CliConfig, args: &MetricsArgs) -> CliResult<Value> {
    let clean = read_wav(args.reference).map_err(|e| Failure::from(e).at(args.reference))?;
    let degraded = read_wav(args.degraded).map_err(|e| Failure::from(e).at(args.degraded))?;
    let mut report = MetricReport::evaluate(&clean, &degraded, &cfg.audio)?;
    match (args.reference_text, args.hypothesis_text) {
        (Some(r), Some(h)) => {
            let r: Vec<&str> = r.split_whitespace().collect();
            let h: Vec<&str> = h.split_whitespace().collect();
            report.wer = Some(wer(&r, &h)?);
        }
        (None, None) => {}
        _ => return Err(Failure::args("WER needs both --reference-text and --hypothesis-text")),
    }
    if let Some(out) = args.out {
        prepare_out(out)?;
        persist_json(&out.join("metrics.json"), &report)?;
    }
    Ok(serde_json::to_value(&report)?)
}

/// Detections as a JSON array of booleans or 0/1, or whitespace-separated
/// `0`/`1`/`true`/`false` tokens.
pub fn parse_detections(text: &str) -> CliResult<Vec<bool>> {
    if text.trim_start().starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(text).map_err(|e| Failure::args(format!("detections: {e}")))?;
        return values
            .iter()
            .map(|v| match v {
                Value::Bool(b) => Ok(*b),
                Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
                Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
                other => Err(Failure::args(format!("detection value {other} is not a boolean"))),
            })
            .collect();
    }
    text.split_whitespace()
        .map(|t| match t {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(Failure::args(format!("detection token {other:?} is not 0/1"))),
        })
        .collect()
}

pub struct SegmentArgs<'a> {
    pub detections: Option<&'a Path>,
    pub frames: Option<&'a Path>,
    pub target: Option<&'a Path>,
    pub audio: Option<&'a Path>,
    pub fps: f64,
    pub out: &'a Path,
}

pub fn segment(args: &SegmentArgs) -> CliResult<Value> {
    if !(args.fps > 0.0 && args.fps.is_finite()) {
        return Err(Failure::args(format!("--fps must be positive, got {}", args.fps)));
    }
    let mut frames = None;
    let detections = match (args.detections, args.frames, args.target) {
        (Some(path), None, None) => parse_detections(&fs::read_to_string(path).map_err(|e| Failure::from(e).at(path))?)?,
        (None, Some(dir), Some(target)) => {
            let f = read_frames(dir).map_err(|e| Failure::from(e).at(dir))?;
            let t = read_image(target).map_err(|e| Failure::from(e).at(target))?;
            let d = detect(&TemplateMatcher::default(), &f, &t);
            frames = Some(f);
            d
        }
        _ => return Err(Failure::args("give either --detections, or --frames together with --target")),
    };
    let segments = yld_segment(&detections, args.fps)?;
    prepare_out(args.out)?;
    if let Some(audio_path) = args.audio {
        let frames = frames.as_ref().ok_or_else(|| Failure::args("--audio needs --frames"))?;
        let audio = read_wav(audio_path).map_err(|e| Failure::from(e).at(audio_path))?;
        let clips = extract_clips(frames, &audio, &segments)?;
        stage_dir(&args.out.join("clips"), |dir| {
            for (k, clip) in clips.iter().enumerate() {
                let d = dir.join(format!("clip_{k:04}"));
                fs::create_dir_all(d.join("frames"))?;
                for (i, f) in clip.frames.iter().enumerate() {
                    write_image(f, &d.join("frames").join(format!("{i:04}.pgm")))?;
                }
                write_wav(&clip.audio, &d.join("audio.wav"))?;
            }
            Ok(())
        })?;
    }
    let manifest = json!({ "fps": args.fps, "frames": detections.len(), "segments": segments });
    persist_json(&args.out.join("segments.json"), &manifest)?;
    Ok(json!({ "segments": segments.len(), "frames": detections.len() }))
}

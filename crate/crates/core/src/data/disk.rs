//! On-disk corpus layout: one directory per sample holding `frames/NNNN.pgm`
//! (grayscale), `face.ppm`, `audio.wav` and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::SyntheticSample;
use crate::dsp::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::img::{read_image, write_image, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub identity: String,
    pub identity_index: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub fps: u32,
    pub mouth_center: [f32; 2],
    pub openings: Vec<f32>,
    pub widths: Vec<f32>,
}

/// Entry of an identity manifest: face frames plus an audio file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub audio: PathBuf,
}

pub fn frame_dir(dir: &Path) -> PathBuf {
    dir.join("frames")
}

pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "ppm" | "png")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no frames in {}", dir.display())));
    }
    paths.iter().map(|p| read_image(p)).collect()
}

pub fn write_sample(dir: &Path, sample: &SyntheticSample) -> Result<()> {
    let frames = frame_dir(dir);
    fs::create_dir_all(&frames)?;
    for (i, f) in sample.frames.iter().enumerate() {
        write_image(&f.to_gray(), &frames.join(format!("{i:04}.pgm")))?;
    }
    write_image(&sample.face, &dir.join("face.ppm"))?;
    write_wav(&sample.audio, &dir.join("audio.wav"))?;
    let meta = SampleMeta {
        identity: sample.identity.clone(),
        identity_index: sample.identity_index,
        tokens: sample.tokens.clone(),
        token_ids: sample.token_ids.clone(),
        fps: sample.fps,
        mouth_center: sample.mouth_center,
        openings: sample.openings.clone(),
        widths: sample.widths.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<SyntheticSample> {
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let frames = read_frames(&frame_dir(dir))?;
    Ok(SyntheticSample {
        identity: meta.identity,
        identity_index: meta.identity_index,
        tokens: meta.tokens,
        token_ids: meta.token_ids,
        frames,
        openings: meta.openings,
        widths: meta.widths,
        audio: read_wav(&dir.join("audio.wav"))?,
        fps: meta.fps,
        face: read_image(&dir.join("face.ppm"))?,
        mouth_center: meta.mouth_center,
    })
}

/// Writes `root/sample_NNNN/` for each sample.
pub fn write_corpus(root: &Path, samples: &[SyntheticSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        write_sample(&root.join(format!("sample_{i:04}")), s)?;
    }
    Ok(())
}

pub fn read_corpus(root: &Path) -> Result<Vec<SyntheticSample>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no samples under {}", root.display())));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

//! `MEL1` files: magic, then u32 `T`, `n_mels`, sample rate and hop, then
//! `T · n_mels` f32 values row-major, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Melspectrogram;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEL1";

pub fn write_mel_to<W: Write>(mel: &Melspectrogram, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [mel.frames(), mel.n_mels(), mel.sample_rate_hz as usize, mel.hop] {
        let v = u32::try_from(v).map_err(|_| Error::format("mel", format!("{v} does not fit in u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for v in mel.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("mel", format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_mel_from<R: Read>(mut r: R) -> Result<Melspectrogram> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("mel", format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::format("mel", format!("bad magic {magic:?}")));
    }
    let frames = read_u32(&mut r)? as usize;
    let n_mels = read_u32(&mut r)? as usize;
    let sample_rate = read_u32(&mut r)?;
    let hop = read_u32(&mut r)? as usize;
    let count = frames
        .checked_mul(n_mels)
        .filter(|c| *c <= 1 << 30)
        .ok_or_else(|| Error::format("mel", format!("implausible size {frames} × {n_mels}")))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format("mel", format!("truncated data: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Melspectrogram::new(data, frames, n_mels, sample_rate, hop)
}

pub fn write_mel(mel: &Melspectrogram, path: &Path) -> Result<()> {
    write_mel_to(mel, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_mel(path: &Path) -> Result<Melspectrogram> {
    read_mel_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

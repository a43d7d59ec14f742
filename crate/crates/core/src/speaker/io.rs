//! EMB1: `b"EMB1"`, u32 count, u32 dim, then `count·dim` f32, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SpeakerEmbedding, EMBED_DIM};
use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

pub fn write_embeddings_to<W: Write>(embeddings: &[SpeakerEmbedding], mut w: W) -> Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(embeddings.len() as u32).to_le_bytes())?;
    w.write_all(&(EMBED_DIM as u32).to_le_bytes())?;
    for e in embeddings {
        for v in e.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_from<R: Read>(mut r: R) -> Result<Vec<SpeakerEmbedding>> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|e| Error::format("EMB1", e.to_string()))?;
    if &head[..4] != EMB_MAGIC {
        return Err(Error::format("EMB1", "bad magic"));
    }
    let count = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if dim != EMBED_DIM {
        return Err(Error::format("EMB1", format!("dimension {dim}, expected {EMBED_DIM}")));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * dim * 4 {
        return Err(Error::format("EMB1", format!("{} payload bytes for {count}×{dim}", bytes.len())));
    }
    bytes
        .chunks_exact(dim * 4)
        .map(|c| SpeakerEmbedding::new(c.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()))
        .collect()
}

pub fn write_embeddings(embeddings: &[SpeakerEmbedding], path: impl AsRef<Path>) -> Result<()> {
    write_embeddings_to(embeddings, BufWriter::new(File::create(path)?))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<SpeakerEmbedding>> {
    read_embeddings_from(BufReader::new(File::open(path)?))
}

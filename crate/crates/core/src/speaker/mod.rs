//! Face → voice identity: a small face CNN trained contrastively against a
//! frozen recurrent speech encoder.

mod encoders;
mod io;
mod train;

pub use encoders::{FaceEncoder, SpeakerModel, SpeakerModelConfig, SpeechEncoder};
pub use io::{read_embeddings, read_embeddings_from, write_embeddings, write_embeddings_to, EMB_MAGIC};
pub use train::{
    sample_window_seconds, train_speaker_encoder, SpeakerDataset, SpeakerIdentity, SpeakerTrainConfig,
    SpeakerTrainReport,
};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

pub const EMBED_DIM: usize = 256;
pub const FACE_SIZE: usize = 64;
pub const DEFAULT_TEMPERATURE: f32 = 0.07;
const UNIT_TOL: f32 = 1e-3;

/// Unit-norm vocal identity code.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f32>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBED_DIM {
            return Err(Error::shape("speaker_embedding", format!("expected {EMBED_DIM} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "speaker_embedding" });
        }
        let norm = l2(&values);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("speaker embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f32 {
        l2(&self.0)
    }

    pub fn cosine(&self, other: &Self) -> f32 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f32>() / (self.norm() * other.norm())
    }
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    let shape = g.shape(v);
    let [b, d] = shape[..] else {
        return Err(Error::shape("contrastive_loss", format!("{what}: expected [B, D], got {shape:?}")));
    };
    for (i, row) in g.value(v).chunks(d).enumerate() {
        let n = l2(row);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok((b, d))
}

/// Symmetric in-batch InfoNCE over index-aligned pairs: the mean of the
/// face→speech and speech→face cross-entropies of `cos / temperature`.
pub fn contrastive_loss_var(g: &mut Graph, face: Var, speech: Var, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let (b, d) = check_unit_rows(g, face, "face embeddings")?;
    let (b2, d2) = check_unit_rows(g, speech, "speech embeddings")?;
    if (b, d) != (b2, d2) {
        return Err(Error::shape("contrastive_loss", format!("[{b}, {d}] vs [{b2}, {d2}]")));
    }
    let st = g.transpose(speech)?;
    let sim = g.matmul(face, st)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    let f2s = g.cross_entropy_rows(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let s2f = g.cross_entropy_rows(lt, &targets)?;
    let both = g.add(f2s, s2f)?;
    Ok(g.scale(both, 0.5))
}

/// Value form of [`contrastive_loss_var`] for `[B, D]` embedding matrices.
pub fn contrastive_loss(face: &Tensor, speech: &Tensor, temperature: f32) -> Result<f32> {
    if face.shape().len() != 2 || face.dim(0) == 0 {
        return Err(Error::invalid("contrastive loss needs a non-empty [B, D] batch"));
    }
    let mut g = Graph::detached();
    let f = g.constant(face.clone());
    let s = g.constant(speech.clone());
    let l = contrastive_loss_var(&mut g, f, s, temperature)?;
    Ok(g.scalar(l))
}

/// Stacks embeddings into a `[B, EMBED_DIM]` tensor.
pub fn stack(embeddings: &[SpeakerEmbedding]) -> Result<Tensor> {
    if embeddings.is_empty() {
        return Err(Error::invalid("no embeddings to stack"));
    }
    let data = embeddings.iter().flat_map(|e| e.values().iter().copied()).collect();
    Tensor::new(vec![embeddings.len(), EMBED_DIM], data)
}

/// Index of the nearest (cosine) candidate for every query.
pub fn nearest(queries: &[SpeakerEmbedding], candidates: &[SpeakerEmbedding]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| {
            candidates
                .iter()
                .enumerate()
                .max_by(|a, b| q.cosine(a.1).total_cmp(&q.cosine(b.1)))
                .map_or(0, |(i, _)| i)
        })
        .collect()
}

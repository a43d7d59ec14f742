//! Lip regions, the spatio-temporal frame encoder, and fusion with the
//! speaker embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::nn::conv::Conv3dGeometry;
use crate::nn::layers::Conv3d;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// Side of the square grayscale lip crop.
pub const LIP_SIZE: usize = 48;
/// Smallest frame side accepted by [`crop_lip_roi`].
pub const MIN_FRAME: usize = 32;

/// Cuts an `H/2 × W/2` window around the mouth and resamples it to a
/// `LIP_SIZE²` grayscale crop. Without a landmark the window is the lower
/// centre of the frame: rows `[H/2, H)`, columns `[W/4, 3W/4)`.
pub fn crop_lip_roi(frame: &Image, mouth: Option<[f32; 2]>) -> Result<Image> {
    if frame.width < MIN_FRAME || frame.height < MIN_FRAME {
        return Err(Error::invalid(format!(
            "frame {}×{} smaller than the {MIN_FRAME}×{MIN_FRAME} minimum",
            frame.width, frame.height
        )));
    }
    let (h, w) = (frame.height / 2, frame.width / 2);
    let (top, left) = match mouth {
        None => (frame.height / 2, frame.width / 4),
        Some([row, col]) => {
            let top = (row - h as f32 / 2.0).round().clamp(0.0, (frame.height - h) as f32) as usize;
            let left = (col - w as f32 / 2.0).round().clamp(0.0, (frame.width - w) as f32) as usize;
            (top, left)
        }
    };
    Ok(frame.crop(top, left, h, w)?.to_gray().resize(LIP_SIZE, LIP_SIZE))
}

/// `N` grayscale lip crops at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipRoiSequence {
    pub frames: Vec<Image>,
    pub fps: f32,
}

impl LipRoiSequence {
    pub fn new(frames: Vec<Image>, fps: f32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("lip sequence needs at least one frame"));
        }
        if let Some(f) = frames.iter().find(|f| f.width != LIP_SIZE || f.height != LIP_SIZE || f.channels != 1) {
            return Err(Error::shape(
                "lip_sequence",
                format!("expected {LIP_SIZE}×{LIP_SIZE}×1 crops, got {}×{}×{}", f.height, f.width, f.channels),
            ));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    /// Crops every face frame around a fixed mouth landmark.
    pub fn from_faces(faces: &[Image], mouth: Option<[f32; 2]>, fps: f32) -> Result<Self> {
        let frames = faces.iter().map(|f| crop_lip_roi(f, mouth)).collect::<Result<_>>()?;
        Self::new(frames, fps)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flipped(&self) -> Self {
        Self {
            frames: self.frames.iter().map(Image::flip_horizontal).collect(),
            fps: self.fps,
        }
    }

    /// `[1, 1, N, 48, 48]` raw pixels.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.frames.iter().flat_map(|f| f.data.iter().copied()).collect();
        Tensor::new(vec![1, 1, self.frames.len(), LIP_SIZE, LIP_SIZE], data).expect("validated crop sizes")
    }

    /// `[1, 1, N, 48, 48]` with the sequence's mean frame removed, so that
    /// static appearance cancels and mouth motion remains.
    pub fn to_motion_tensor(&self) -> Tensor {
        let px = LIP_SIZE * LIP_SIZE;
        let n = self.frames.len() as f32;
        let mut mean = vec![0.0f32; px];
        for f in &self.frames {
            mean.iter_mut().zip(&f.data).for_each(|(m, v)| *m += v / n);
        }
        let data = self
            .frames
            .iter()
            .flat_map(|f| f.data.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        Tensor::new(vec![1, 1, self.frames.len(), LIP_SIZE, LIP_SIZE], data).expect("validated crop sizes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoEncoderConfig {
    /// Channels of the 3-D stem; each 2-D block doubles them.
    pub stem_channels: usize,
    pub blocks: usize,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            blocks: 3,
        }
    }
}

impl VideoEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.stem_channels << self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.blocks == 0 || self.blocks > 4 {
            return Err(Error::Config(format!(
                "video: need stem_channels ≥ 1 and 1..=4 blocks, got {} / {}",
                self.stem_channels, self.blocks
            )));
        }
        Ok(())
    }
}

/// 3-D stem (kernel 3×5×5, temporal "same" padding, spatial stride 2)
/// followed by per-frame 3×3 stride-2 blocks, global average pooling and a
/// fixed per-feature affine standardisation.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub stem: Conv3d,
    pub blocks: Vec<Conv3d>,
    pub feat_offset: ParamId,
    pub feat_scale: ParamId,
    pub config: VideoEncoderConfig,
}

impl VideoEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: &VideoEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv3d::new(
            store,
            &format!("{prefix}.stem"),
            1,
            config.stem_channels,
            [3, 5, 5],
            Conv3dGeometry::new([1, 2, 2], [1, 2, 2]),
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut ch = config.stem_channels;
        for b in 0..config.blocks {
            blocks.push(Conv3d::new(
                store,
                &format!("{prefix}.block{b}"),
                ch,
                2 * ch,
                [1, 3, 3],
                Conv3dGeometry::new([1, 2, 2], [0, 1, 1]),
                rng,
            )?);
            ch *= 2;
        }
        let feat_offset = store.zeros(format!("{prefix}.feat_offset"), &[1, ch], false)?;
        let feat_scale = store.insert(format!("{prefix}.feat_scale"), Tensor::filled(&[1, ch], 1.0))?;
        Ok(Self {
            stem,
            blocks,
            feat_offset,
            feat_scale,
            config: config.clone(),
        })
    }

    /// Encoder input for a sequence: see [`LipRoiSequence::to_motion_tensor`].
    pub fn input(seq: &LipRoiSequence) -> Tensor {
        seq.to_motion_tensor()
    }

    /// Sets the standardisation to the per-feature mean and deviation of
    /// the pooled features over every frame of `seqs`.
    pub fn calibrate(&self, store: &mut ParamStore, seqs: &[&LipRoiSequence]) -> Result<()> {
        let d = self.feature_dim();
        store.get_mut(self.feat_offset).data_mut().fill(0.0);
        store.get_mut(self.feat_scale).data_mut().fill(1.0);
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut rows = 0usize;
        for seq in seqs {
            let f = encode_frames(self, store, seq)?;
            for row in f.data().chunks(d) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return Err(Error::invalid("calibration needs at least one frame"));
        }
        let n = rows as f64;
        let off: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let scale: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let sd = (q / n - (s / n).powi(2)).max(0.0).sqrt();
                if sd > 1e-7 {
                    (1.0 / sd) as f32
                } else {
                    1.0
                }
            })
            .collect();
        store.get_mut(self.feat_offset).data_mut().copy_from_slice(&off);
        store.get_mut(self.feat_scale).data_mut().copy_from_slice(&scale);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `[1, 1, N, 48, 48] → [N, D_face]`.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let mut x = self.stem.forward(g, frames)?;
        x = g.relu(x);
        for b in &self.blocks {
            x = b.forward(g, x)?;
            x = g.relu(x);
        }
        let pooled = g.spatial_mean_pool(x)?;
        let n = g.shape(pooled)[0];
        let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
        let off = g.param(self.feat_offset);
        let sc = g.param(self.feat_scale);
        let off = g.matmul(ones, off)?;
        let sc = g.matmul(ones, sc)?;
        let centred = g.sub(pooled, off)?;
        g.mul(centred, sc)
    }
}

/// Per-frame features `[N, D_face]` of a lip sequence.
pub fn encode_frames(encoder: &VideoEncoder, store: &ParamStore, seq: &LipRoiSequence) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.constant(VideoEncoder::input(seq));
    let y = encoder.forward(&mut g, x)?;
    g.check_finite()?;
    Ok(g.tensor(y))
}

/// `[N, D]` features and a `[1, E]` embedding → `[N, D + E]`, each row the
/// frame features followed by the embedding.
pub fn fuse(g: &mut Graph, frame_feats: Var, speaker: Var) -> Result<Var> {
    let shape = g.shape(frame_feats).to_vec();
    let es = g.shape(speaker).to_vec();
    if shape.len() != 2 || es.len() != 2 || es[0] != 1 {
        return Err(Error::shape("fuse", format!("features {shape:?}, embedding {es:?}")));
    }
    let ones = g.constant(Tensor::filled(&[shape[0], 1], 1.0));
    let tiled = g.matmul(ones, speaker)?;
    g.concat_cols(&[frame_feats, tiled])
}

/// Plain-tensor form of [`fuse`].
pub fn fuse_visual_features(frame_feats: &Tensor, speaker: &[f32]) -> Result<Tensor> {
    let mut g = Graph::detached();
    let f = g.constant(frame_feats.clone());
    let s = g.constant(Tensor::row(speaker.to_vec()));
    let y = fuse(&mut g, f, s)?;
    Ok(g.tensor(y))
}

//! Turning a long face video into short clips of a verified speaker.

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::img::Image;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    /// Half-open frame range `[start, end)`.
    pub frame_range: [usize; 2],
}

impl Segment {
    pub fn from_frames(start: usize, end: usize, fps: f64) -> Self {
        Self {
            start_s: start as f64 / fps,
            end_s: end as f64 / fps,
            frame_range: [start, end],
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn frames(&self) -> usize {
        self.frame_range[1] - self.frame_range[0]
    }
}

/// Decides whether a frame shows the target face.
pub trait FaceMatcher {
    fn matches(&self, frame: &Image, target: &Image) -> bool;
}

/// Stand-in recogniser for procedural faces: compares the upper part of the
/// frame (hair, eyes, skin; the mouth is excluded) against the target in
/// grayscale by mean absolute difference.
#[derive(Debug, Clone, Copy)]
pub struct TemplateMatcher {
    pub tolerance: f32,
}

impl Default for TemplateMatcher {
    fn default() -> Self {
        Self { tolerance: 0.04 }
    }
}

impl FaceMatcher for TemplateMatcher {
    fn matches(&self, frame: &Image, target: &Image) -> bool {
        if frame.width != target.width || frame.height != target.height {
            return false;
        }
        let (a, b) = (frame.to_gray(), target.to_gray());
        let rows = frame.height * 5 / 8;
        let n = rows * frame.width;
        let diff: f32 = a.data[..n].iter().zip(&b.data[..n]).map(|(x, y)| (x - y).abs()).sum();
        diff / (n as f32) < self.tolerance
    }
}

pub fn detect<M: FaceMatcher>(matcher: &M, frames: &[Image], target: &Image) -> Vec<bool> {
    frames.iter().map(|f| matcher.matches(f, target)).collect()
}

/// Maximal runs of positive frames, cut into `[min_s, max_s]` pieces.
///
/// Long runs are split greedily into `max_s` pieces. A final piece shorter
/// than `min_s` is merged into its predecessor when the result stays within
/// `max_s`, and dropped otherwise. Runs shorter than `min_s` are dropped.
pub fn yld_segment_with(detections: &[bool], fps: f64, min_s: f64, max_s: f64) -> Result<Vec<Segment>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    if !(min_s > 0.0 && min_s <= max_s) {
        return Err(Error::invalid(format!("need 0 < min_s ≤ max_s, got {min_s}, {max_s}")));
    }
    let min_frames = (min_s * fps - EPS).ceil() as usize;
    let max_frames = (max_s * fps + EPS).floor() as usize;
    if min_frames > max_frames {
        return Err(Error::invalid("no whole-frame duration fits between min_s and max_s"));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < detections.len() {
        if !detections[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < detections.len() && detections[i] {
            i += 1;
        }
        let end = i;
        if end - start < min_frames {
            continue;
        }
        let mut pieces: Vec<(usize, usize)> = Vec::new();
        let mut s = start;
        while end - s > max_frames {
            pieces.push((s, s + max_frames));
            s += max_frames;
        }
        let rest = end - s;
        if rest >= min_frames {
            pieces.push((s, end));
        } else if let Some(last) = pieces.last_mut() {
            if end - last.0 <= max_frames {
                last.1 = end;
            }
        }
        out.extend(pieces.into_iter().map(|(a, b)| Segment::from_frames(a, b, fps)));
    }
    Ok(out)
}

pub fn yld_segment(detections: &[bool], fps: f64) -> Result<Vec<Segment>> {
    yld_segment_with(detections, fps, 1.0, 3.0)
}

/// A clip of video frames and the matching audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub audio: Waveform,
}

/// Cuts frames `[start, end)` and samples `[round(start_s·sr), round(end_s·sr))`.
pub fn extract_clips(frames: &[Image], audio: &Waveform, segments: &[Segment]) -> Result<Vec<Clip>> {
    let sr = audio.sample_rate_hz as f64;
    segments
        .iter()
        .map(|seg| {
            let [a, b] = seg.frame_range;
            let (sa, sb) = ((seg.start_s * sr).round() as usize, (seg.end_s * sr).round() as usize);
            if a >= b || b > frames.len() || sa >= sb || sb > audio.len() {
                return Err(Error::invalid(format!(
                    "segment frames [{a}, {b}) / samples [{sa}, {sb}) outside video of {} frames, {} samples",
                    frames.len(),
                    audio.len()
                )));
            }
            Ok(Clip {
                frames: frames[a..b].to_vec(),
                audio: Waveform::new(audio.samples[sa..sb].to_vec(), audio.sample_rate_hz),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_seconds_split_into_three_plus_one() {
        let segs = yld_segment(&[true; 100], 25.0).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].frame_range, [0, 75]);
        assert_eq!((segs[0].start_s, segs[0].end_s), (0.0, 3.0));
        assert_eq!((segs[1].start_s, segs[1].end_s), (3.0, 4.0));
    }

    #[test]
    fn empty_and_short_runs() {
        assert!(yld_segment(&[false; 80], 25.0).unwrap().is_empty());
        let mut d = vec![false; 60];
        d[10..22].iter_mut().for_each(|v| *v = true);
        assert!(yld_segment(&d, 25.0).unwrap().is_empty());
    }

    #[test]
    fn short_remainder_is_dropped_when_merge_would_overflow() {
        // 3.4 s: 3 s piece, 0.4 s remainder cannot merge
        let segs = yld_segment(&[true; 85], 25.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].frame_range, [0, 75]);
    }

    #[test]
    fn remainder_at_or_above_minimum_is_kept() {
        let segs = yld_segment_with(&[true; 32], 10.0, 1.0, 2.0).unwrap();
        assert_eq!(segs.iter().map(|s| s.frame_range).collect::<Vec<_>>(), vec![[0, 20], [20, 32]]);
        let segs = yld_segment_with(&[true; 32], 10.0, 1.5, 2.0).unwrap();
        assert_eq!(segs.iter().map(|s| s.frame_range).collect::<Vec<_>>(), vec![[0, 20]]);
    }

    #[test]
    fn clip_index_arithmetic() {
        let frames: Vec<Image> = (0..100).map(|i| Image::filled(2, 2, 1, i as f32 / 100.0)).collect();
        let audio = Waveform::new((0..64_000).map(|i| i as f32 / 64_000.0).collect(), 16_000);
        let seg = Segment::from_frames(25, 50, 25.0);
        let clips = extract_clips(&frames, &audio, &[seg]).unwrap();
        assert_eq!(clips[0].frames.len(), 25);
        assert_eq!(clips[0].frames[0], frames[25]);
        assert_eq!(clips[0].frames[24], frames[49]);
        assert_eq!(clips[0].audio.len(), 16_000);
        assert_eq!(clips[0].audio.samples[0], audio.samples[16_000]);
        assert_eq!(*clips[0].audio.samples.last().unwrap(), audio.samples[31_999]);
        let whole = extract_clips(&frames, &audio, &[Segment::from_frames(0, 100, 25.0)]).unwrap();
        assert_eq!(whole[0].frames, frames);
        assert_eq!(whole[0].audio, audio);
        assert!(extract_clips(&frames, &audio, &[Segment::from_frames(90, 101, 25.0)]).is_err());
    }
}

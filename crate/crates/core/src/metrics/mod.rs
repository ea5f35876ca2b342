//! Motion alignment between the RGB and alpha halves of a generated video.

mod flow;

use serde::{Deserialize, Serialize};

pub use flow::{farneback_flow, FlowField, FlowParams};

use crate::dataset::RgbaVideo;
use crate::error::{Error, Result};

/// Single-channel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Luma of an interleaved RGB frame.
pub fn to_grayscale(rgb: &[f64], height: usize, width: usize) -> Result<Gray> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Dimension(format!("{} samples for a {height}x{width} RGB frame", rgb.len())));
    }
    let data = rgb.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
    Ok(Gray { height, width, data })
}

/// RGB luma frames of a video.
pub fn rgb_luma(video: &RgbaVideo) -> Vec<Gray> {
    (0..video.frames())
        .map(|f| to_grayscale(&video.rgb_frame(f), video.height(), video.width()).expect("frame size"))
        .collect()
}

/// Alpha frames. Replicating alpha to three channels and taking luma gives
/// the alpha value back, so it is used directly.
pub fn alpha_planes(video: &RgbaVideo) -> Vec<Gray> {
    (0..video.frames())
        .map(|f| Gray { height: video.height(), width: video.width(), data: video.alpha_frame(f) })
        .collect()
}

/// Per-pixel flow distance averaged over every consecutive frame pair.
pub fn flow_difference_map(rgb: &[Gray], alpha: &[Gray], params: &FlowParams) -> Result<Gray> {
    if rgb.len() != alpha.len() {
        return Err(Error::Dimension(format!("{} RGB frames vs {} alpha frames", rgb.len(), alpha.len())));
    }
    if rgb.len() < 2 {
        return Err(Error::InsufficientFrames(rgb.len()));
    }
    let (h, w) = (rgb[0].height, rgb[0].width);
    let mut acc = vec![0.0; h * w];
    for pair in 0..rgb.len() - 1 {
        let a = farneback_flow(&rgb[pair], &rgb[pair + 1], params)?;
        let b = farneback_flow(&alpha[pair], &alpha[pair + 1], params)?;
        if a.data.len() != acc.len() || b.data.len() != acc.len() {
            return Err(Error::Dimension(format!("frame pair {pair} does not match {h}x{w}")));
        }
        for ((s, u), v) in acc.iter_mut().zip(&a.data).zip(&b.data) {
            *s += (u[0] - v[0]).hypot(u[1] - v[1]);
        }
    }
    let pairs = (rgb.len() - 1) as f64;
    Ok(Gray { height: h, width: w, data: acc.into_iter().map(|v| v / pairs).collect() })
}

/// Mean per-pixel distance between the flows of two frame sequences, over
/// all pixels and every consecutive pair.
pub fn flow_difference(rgb: &[Gray], alpha: &[Gray], params: &FlowParams) -> Result<f64> {
    let map = flow_difference_map(rgb, alpha, params)?;
    Ok(map.data.iter().sum::<f64>() / map.data.len() as f64)
}

pub fn video_flow_difference(video: &RgbaVideo, params: &FlowParams) -> Result<f64> {
    flow_difference(&rgb_luma(video), &alpha_planes(video), params)
}

/// Intersection over union of two masks; `None` when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Least-squares plane `c0 + c1·x + c2·y` per channel, fitted on the
/// outermost pixel ring.
fn border_plane(rgb: &[f64], height: usize, width: usize) -> [[f64; 3]; 3] {
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [[0.0; 3]; 3];
    for y in 0..height {
        for x in 0..width {
            if y != 0 && x != 0 && y + 1 != height && x + 1 != width {
                continue;
            }
            let phi = [1.0, x as f64, y as f64];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += phi[i] * phi[j];
                }
                for c in 0..3 {
                    atb[c][i] += phi[i] * rgb[(y * width + x) * 3 + c];
                }
            }
        }
    }
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&ata);
    let mut out = [[0.0; 3]; 3];
    for c in 0..3 {
        // Cramer's rule
        for k in 0..3 {
            let mut m = ata;
            for r in 0..3 {
                m[r][k] = atb[c][r];
            }
            out[c][k] = det3(&m) / d;
        }
    }
    out
}

/// Colour distance below which a frame or pixel has no usable contrast.
const MIN_CONTRAST: f64 = 0.05;
/// Slack for 16-bit quantization of coverage values that sit exactly on the
/// threshold.
const QUANT_SLACK: f64 = 1e-3;

/// Foreground mask derived from RGB alone: background is the border-ring
/// plane, the foreground colour is the pixel farthest from it, and each pixel
/// is unmixed along that line.
pub fn derived_foreground(rgb: &[f64], height: usize, width: usize, threshold: f64) -> Vec<bool> {
    let plane = border_plane(rgb, height, width);
    let bg = |y: usize, x: usize| {
        let mut b = [0.0; 3];
        for c in 0..3 {
            b[c] = plane[c][0] + plane[c][1] * x as f64 + plane[c][2] * y as f64;
        }
        b
    };
    let diff = |i: usize| {
        let b = bg(i / width, i % width);
        [rgb[i * 3] - b[0], rgb[i * 3 + 1] - b[1], rgb[i * 3 + 2] - b[2]]
    };
    let n = height * width;
    let far = (0..n)
        .map(|i| {
            let d = diff(i);
            (i, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        })
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let Some((peak, dist2)) = far else { return Vec::new() };
    if dist2.sqrt() < MIN_CONTRAST {
        return vec![false; n];
    }
    let fg = [rgb[peak * 3], rgb[peak * 3 + 1], rgb[peak * 3 + 2]];
    (0..n)
        .map(|i| {
            let b = bg(i / width, i % width);
            let dir = [fg[0] - b[0], fg[1] - b[1], fg[2] - b[2]];
            let len2 = dir.iter().map(|v| v * v).sum::<f64>();
            if len2.sqrt() < MIN_CONTRAST {
                return false;
            }
            let d = diff(i);
            let a = (d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2]) / len2;
            a >= threshold - QUANT_SLACK
        })
        .collect()
}

/// Mean per-frame IoU between the binarized alpha and the RGB-derived
/// foreground. Frames where both are empty are skipped.
pub fn alpha_alignment_iou(video: &RgbaVideo, threshold: f64) -> Result<f64> {
    let (h, w) = (video.height(), video.width());
    let scores: Vec<f64> = (0..video.frames())
        .filter_map(|f| {
            let alpha: Vec<bool> = video.alpha_frame(f).iter().map(|&a| a >= threshold).collect();
            let derived = derived_foreground(&video.rgb_frame(f), h, w, threshold);
            mask_iou(&alpha, &derived)
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::UndefinedScore);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub name: String,
    /// Hash of the video's frame files and manifest.
    pub hash: String,
    pub flow_difference: f64,
    /// `None` when neither mask has any foreground.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub flow: FlowParams,
    pub threshold: f64,
    pub videos: Vec<VideoScore>,
    pub mean_flow_difference: f64,
    pub mean_iou: Option<f64>,
}

impl MetricsRecord {
    pub fn from_scores(flow: FlowParams, threshold: f64, videos: Vec<VideoScore>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::NoInput("no videos were scored".into()));
        }
        let mean_flow_difference = videos.iter().map(|v| v.flow_difference).sum::<f64>() / videos.len() as f64;
        let ious: Vec<f64> = videos.iter().filter_map(|v| v.iou).collect();
        let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
        Ok(MetricsRecord { flow, threshold, videos, mean_flow_difference, mean_iou })
    }
}

/// Scores one video.
pub fn score_video(name: &str, hash: &str, video: &RgbaVideo, flow: &FlowParams, threshold: f64) -> Result<VideoScore> {
    let iou = match alpha_alignment_iou(video, threshold) {
        Ok(v) => Some(v),
        Err(Error::UndefinedScore) => None,
        Err(e) => return Err(e),
    };
    Ok(VideoScore { name: name.into(), hash: hash.into(), flow_difference: video_flow_difference(video, flow)?, iou })
}

use crate::error::{Error, Result};

/// Straight-alpha RGBA video, samples in `[0,1]`, interleaved `R,G,B,A`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbaVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("video dims {frames}x{height}x{width} must be positive")));
        }
        if data.len() != frames * height * width * 4 {
            return Err(Error::Dimension(format!("{} samples for a {frames}x{height}x{width} RGBA video", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("sample {v} outside [0,1]")));
        }
        Ok(RgbaVideo { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        RgbaVideo { frames, height, width, data: vec![0.0; frames * height * width * 4] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height + y) * self.width + x) * 4
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f64; 4] {
        let o = self.offset(f, y, x);
        self.data[o..o + 4].try_into().expect("4 channels")
    }

    /// Callers keep samples inside `[0,1]`.
    pub fn set_pixel(&mut self, f: usize, y: usize, x: usize, px: [f64; 4]) {
        let o = self.offset(f, y, x);
        self.data[o..o + 4].copy_from_slice(&px);
    }

    /// Interleaved RGB of frame `f`, `H·W·3` values.
    pub fn rgb_frame(&self, f: usize) -> Vec<f64> {
        let n = self.frame_len();
        self.data[f * n * 4..(f + 1) * n * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn alpha_frame(&self, f: usize) -> Vec<f64> {
        let n = self.frame_len();
        self.data[f * n * 4..(f + 1) * n * 4].chunks_exact(4).map(|p| p[3]).collect()
    }

    /// RGB of every frame, `F·H·W·3` values.
    pub fn rgb(&self) -> Vec<f64> {
        self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
    }

    /// Alpha replicated to three channels, `F·H·W·3` values.
    pub fn alpha_rgb(&self) -> Vec<f64> {
        self.data.chunks_exact(4).flat_map(|p| [p[3]; 3]).collect()
    }

    /// Builds a video from `F·H·W·3` RGB values and `F·H·W` alpha values.
    pub fn from_planes(frames: usize, height: usize, width: usize, rgb: &[f64], alpha: &[f64]) -> Result<Self> {
        let n = frames * height * width;
        if rgb.len() != n * 3 || alpha.len() != n {
            return Err(Error::Dimension(format!("planes of {} and {} values for {n} pixels", rgb.len(), alpha.len())));
        }
        let data = rgb.chunks_exact(3).zip(alpha).flat_map(|(c, a)| [c[0], c[1], c[2], *a]).collect();
        RgbaVideo::new(frames, height, width, data)
    }
}

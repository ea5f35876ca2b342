use super::RgbaVideo;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frame geometry shared by videos and their token form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "{}x{} frames ({} of them) cannot be cut into {}-pixel patches",
                self.height, self.width, self.frames, self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.frames * (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Cuts an `F×H×W×3` half into non-overlapping patches in
/// (frame, patch row, patch column) order; each token lists its pixels row
/// by row with channels innermost.
pub fn patchify(half: &[f64], geo: Geometry) -> Result<Tensor> {
    geo.validate()?;
    let (h, w, p) = (geo.height, geo.width, geo.patch);
    if half.len() != geo.frames * h * w * 3 {
        return Err(Error::Dimension(format!("{} values for a {}x{h}x{w}x3 half", half.len(), geo.frames)));
    }
    let mut data = Vec::with_capacity(half.len());
    for f in 0..geo.frames {
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    let row = (f * h + py * p + dy) * w + px * p;
                    data.extend_from_slice(&half[row * 3..(row + p) * 3]);
                }
            }
        }
    }
    Tensor::matrix(geo.tokens(), geo.patch_dim(), data)
}

pub fn unpatchify(tokens: &Tensor, geo: Geometry) -> Result<Vec<f64>> {
    geo.validate()?;
    if tokens.rows() != geo.tokens() || tokens.cols() != geo.patch_dim() {
        return Err(Error::Dimension(format!(
            "{}x{} tokens for {} patches of width {}",
            tokens.rows(),
            tokens.cols(),
            geo.tokens(),
            geo.patch_dim()
        )));
    }
    let (h, w, p) = (geo.height, geo.width, geo.patch);
    let mut half = vec![0.0; geo.frames * h * w * 3];
    let mut m = 0;
    for f in 0..geo.frames {
        for py in 0..h / p {
            for px in 0..w / p {
                let token = tokens.row(m);
                for dy in 0..p {
                    let row = (f * h + py * p + dy) * w + px * p;
                    half[row * 3..(row + p) * 3].copy_from_slice(&token[dy * p * 3..(dy + 1) * p * 3]);
                }
                m += 1;
            }
        }
    }
    Ok(half)
}

fn to_signed(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 2.0 * x - 1.0).collect()
}

/// RGB tokens, followed by alpha tokens (alpha replicated to three
/// channels) when `joint`; samples are mapped from `[0,1]` to `[-1,1]`.
pub fn video_to_tokens(video: &RgbaVideo, patch: usize, joint: bool) -> Result<Tensor> {
    let geo = Geometry { frames: video.frames(), height: video.height(), width: video.width(), patch };
    let rgb = patchify(&to_signed(&video.rgb()), geo)?;
    if !joint {
        return Ok(rgb);
    }
    let alpha = patchify(&to_signed(&video.alpha_rgb()), geo)?;
    let mut data = rgb.into_data();
    data.extend(alpha.into_data());
    Tensor::matrix(2 * geo.tokens(), geo.patch_dim(), data)
}

/// Decodes `2L` tokens into a video: values map back to `[0,1]` and are
/// clamped, and alpha is the mean of its three channels.
pub fn tokens_to_video(tokens: &Tensor, geo: Geometry) -> Result<RgbaVideo> {
    geo.validate()?;
    let l = geo.tokens();
    if tokens.rows() != 2 * l {
        return Err(Error::Dimension(format!("{} token rows, expected {}", tokens.rows(), 2 * l)));
    }
    let split = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
        let rows: Vec<f64> = range.flat_map(|r| tokens.row(r).to_vec()).collect();
        let half = unpatchify(&Tensor::matrix(l, geo.patch_dim(), rows)?, geo)?;
        Ok(half.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
    };
    let rgb = split(0..l)?;
    let alpha: Vec<f64> =
        split(l..2 * l)?.chunks_exact(3).map(|c| ((c[0] + c[1] + c[2]) / 3.0).clamp(0.0, 1.0)).collect();
    RgbaVideo::from_planes(geo.frames, geo.height, geo.width, &rgb, &alpha)
}

/// Decodes `L` RGB-only tokens with an opaque alpha.
pub fn rgb_tokens_to_video(tokens: &Tensor, geo: Geometry) -> Result<RgbaVideo> {
    let half = unpatchify(tokens, geo)?;
    let rgb: Vec<f64> = half.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    let alpha = vec![1.0; rgb.len() / 3];
    RgbaVideo::from_planes(geo.frames, geo.height, geo.width, &rgb, &alpha)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::{synthesize_scene, SceneSpec};
    use crate::embedding::position_index;

    const GEO: Geometry = Geometry { frames: 2, height: 8, width: 12, patch: 4 };

    #[test]
    fn token_count_and_scan_order() {
        let n = GEO.frames * GEO.height * GEO.width * 3;
        let half: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let t = patchify(&half, GEO).unwrap();
        assert_eq!(t.rows(), 2 * 2 * 3);
        assert_eq!(t.cols(), 48);
        // token 1 is frame 0, patch row 0, patch column 1: first pixel (0, 4)
        assert_eq!(t.get(1, 0), (4 * 3) as f64);
        // token 3 starts at pixel (4, 0)
        assert_eq!(t.get(3, 0), (4 * 12 * 3) as f64);
        // token 6 starts frame 1
        assert_eq!(t.get(6, 0), (8 * 12 * 3) as f64);
    }

    #[test]
    fn divisibility_is_enforced() {
        let geo = Geometry { height: 10, ..GEO };
        assert!(matches!(patchify(&vec![0.0; 2 * 10 * 12 * 3], geo), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_tokens_share_positions_with_their_rgb_tokens() {
        let sp = SceneSpec::for_class(3, 1).unwrap();
        let (v, _) = synthesize_scene(&sp, 2, 16, 16).unwrap();
        let t = video_to_tokens(&v, 4, true).unwrap();
        let l = t.rows() / 2;
        for m in 1..=l {
            assert_eq!(position_index(m, l).unwrap(), position_index(m + l, l).unwrap());
        }
        // alpha token m covers the same pixels as RGB token m
        let alpha_half = unpatchify(
            &Tensor::matrix(l, 48, t.data()[l * 48..].to_vec()).unwrap(),
            Geometry { frames: 2, height: 16, width: 16, patch: 4 },
        )
        .unwrap();
        let expected: Vec<f64> = v.alpha_rgb().iter().map(|a| 2.0 * a - 1.0).collect();
        assert_eq!(alpha_half, expected);
    }

    #[test]
    fn decoding_inverts_encoding_for_well_formed_videos() {
        let sp = SceneSpec::for_class(9, 4).unwrap();
        let (v, _) = synthesize_scene(&sp, 2, 16, 16).unwrap();
        let t = video_to_tokens(&v, 4, true).unwrap();
        let back = tokens_to_video(&t, Geometry { frames: 2, height: 16, width: 16, patch: 4 }).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_clamps_out_of_range_values() {
        let geo = Geometry { frames: 1, height: 4, width: 4, patch: 4 };
        let t = Tensor::new(vec![2, 48], (0..96).map(|i| if i % 2 == 0 { 5.0 } else { -5.0 }).collect()).unwrap();
        let v = tokens_to_video(&t, geo).unwrap();
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in 0u64..500, frames in 1usize..3, ph in 1usize..4, pw in 1usize..4) {
            let geo = Geometry { frames, height: ph * 2, width: pw * 2, patch: 2 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let half: Vec<f64> = (0..frames * geo.height * geo.width * 3).map(|_| rng.gen()).collect();
            let t = patchify(&half, geo).unwrap();
            prop_assert_eq!(t.rows(), geo.tokens());
            prop_assert_eq!(unpatchify(&t, geo).unwrap(), half);
        }
    }
}

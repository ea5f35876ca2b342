use serde::{Deserialize, Serialize};

use super::RgbaVideo;
use crate::error::{Error, Result};

const REFINE_EPS: f64 = 1e-6;

/// Edge sharpening: `clamp(α·gain, 0, 1)^(1/(1−choke+ε))`.
pub fn refine_mask(alpha: &[f64], gain: f64, choke: f64) -> Result<Vec<f64>> {
    if !(gain > 0.0) || !(0.0..=1.0).contains(&choke) {
        return Err(Error::Config(format!("gain {gain} must be positive and choke {choke} in [0,1]")));
    }
    let power = 1.0 / (1.0 - choke + REFINE_EPS);
    Ok(alpha.iter().map(|a| (a * gain).clamp(0.0, 1.0).powf(power)).collect())
}

/// Which way the decontamination blend points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecontaminateOrientation {
    /// `rgb·(1−m) + m·background`
    #[default]
    AsPrinted,
    /// `rgb·m + (1−m)·background`, keeping the foreground.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontaminateConfig {
    pub gain: f64,
    pub choke: f64,
    pub orientation: DecontaminateOrientation,
}

impl Default for DecontaminateConfig {
    fn default() -> Self {
        DecontaminateConfig { gain: 1.1, choke: 0.5, orientation: DecontaminateOrientation::AsPrinted }
    }
}

/// Blends interleaved RGB toward `background` by the refined mask.
///
/// `rgb` and `background` hold three values per alpha value.
pub fn color_decontaminate(
    rgb: &[f64],
    alpha: &[f64],
    background: &[f64],
    config: &DecontaminateConfig,
) -> Result<Vec<f64>> {
    let mask = refine_mask(alpha, config.gain, config.choke)?;
    blend_with_mask(rgb, &mask, background, config.orientation)
}

/// The decontamination blend for an already refined mask.
pub fn blend_with_mask(
    rgb: &[f64],
    mask: &[f64],
    background: &[f64],
    orientation: DecontaminateOrientation,
) -> Result<Vec<f64>> {
    if rgb.len() != mask.len() * 3 || background.len() != rgb.len() {
        return Err(Error::Dimension(format!(
            "rgb {}, mask {}, background {} values disagree",
            rgb.len(),
            mask.len(),
            background.len()
        )));
    }
    Ok(rgb
        .chunks_exact(3)
        .zip(background.chunks_exact(3))
        .zip(mask)
        .flat_map(|((c, b), &m)| {
            // the endpoint that keeps rgb returns it untouched
            [0, 1, 2].map(|i| match orientation {
                DecontaminateOrientation::AsPrinted if m == 0.0 => c[i],
                DecontaminateOrientation::AsPrinted => c[i] * (1.0 - m) + m * b[i],
                DecontaminateOrientation::Inverted if m == 1.0 => c[i],
                DecontaminateOrientation::Inverted => c[i] * m + (1.0 - m) * b[i],
            })
        })
        .collect())
}

pub const DEFAULT_BLUR_KERNEL: usize = 201;

/// Largest odd size not exceeding `min(H, W)`, or `kernel` when it fits.
pub fn effective_kernel(kernel: usize, height: usize, width: usize) -> Result<usize> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("blur kernel {kernel} must be odd")));
    }
    let limit = height.min(width);
    if kernel <= limit {
        return Ok(kernel);
    }
    let clamped = if limit % 2 == 1 { limit } else { limit - 1 };
    log::warn!("blur kernel {kernel} exceeds the {height}x{width} frame; using {clamped}");
    Ok(clamped.max(1))
}

fn gaussian_weights(kernel: usize) -> Vec<f64> {
    let sigma = kernel as f64 / 6.0;
    let half = (kernel / 2) as isize;
    let w: Vec<f64> = (-half..=half).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// One separable pass over an `H×W×3` plane with replicated borders. Output
/// is accumulated as offsets from the centre pixel so a constant input stays
/// bit-exact.
fn blur_pass(plane: &[f64], height: usize, width: usize, weights: &[f64], horizontal: bool) -> Vec<f64> {
    let half = (weights.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let centre = plane[(y * width + x) * 3 + c];
                let mut acc = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    let d = k as isize - half;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + d).clamp(0, width as isize - 1) as usize)
                    } else {
                        ((y as isize + d).clamp(0, height as isize - 1) as usize, x)
                    };
                    acc += w * (plane[(yy * width + xx) * 3 + c] - centre);
                }
                out[(y * width + x) * 3 + c] = centre + acc;
            }
        }
    }
    out
}

/// Gaussian blur (σ = kernel/6) of an interleaved RGB frame.
pub fn gaussian_blur_rgb(plane: &[f64], height: usize, width: usize, kernel: usize) -> Result<Vec<f64>> {
    if plane.len() != height * width * 3 {
        return Err(Error::Dimension(format!("{} values for a {height}x{width} RGB frame", plane.len())));
    }
    let k = effective_kernel(kernel, height, width)?;
    let weights = gaussian_weights(k);
    let h = blur_pass(plane, height, width, &weights, true);
    Ok(blur_pass(&h, height, width, &weights, false))
}

/// Replaces every frame's background with the blurred first frame, keeping
/// the foreground through its alpha.
pub fn blur_background(video: &RgbaVideo, kernel: usize) -> Result<RgbaVideo> {
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let bg = gaussian_blur_rgb(&video.rgb_frame(0), h, w, kernel)?;
    let mut out = video.clone();
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let p = video.pixel(fi, y, x);
                let a = p[3];
                let b = &bg[(y * w + x) * 3..(y * w + x) * 3 + 3];
                let mix = |c: usize| {
                    if a == 1.0 {
                        p[c]
                    } else if a == 0.0 {
                        b[c]
                    } else {
                        (p[c] * a + b[c] * (1.0 - a)).clamp(0.0, 1.0)
                    }
                };
                out.set_pixel(fi, y, x, [mix(0), mix(1), mix(2), a]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{synthesize_scene, SceneSpec};

    #[test]
    fn refine_mask_endpoints_and_identity_parameters() {
        let r = refine_mask(&[0.0, 0.95, 1.0], 1.1, 0.5).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 1.0]);
        let alpha: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let id = refine_mask(&alpha, 1.0, 0.0).unwrap();
        for (a, b) in alpha.iter().zip(&id) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(refine_mask(&[0.5], 0.0, 0.5).is_err());
        assert!(refine_mask(&[0.5], 1.0, 1.5).is_err());
    }

    #[test]
    fn refine_mask_golden_values() {
        // 0.5·1.1 = 0.55 raised to 1/(0.5 + 1e-6)
        let r = refine_mask(&[0.5], 1.1, 0.5).unwrap()[0];
        let expected = 0.55f64.powf(1.0 / 0.500_001);
        assert_eq!(r, expected);
        assert!((r - 0.3025).abs() < 1e-5);
    }

    #[test]
    fn decontaminate_endpoints_and_scalar_case() {
        let rgb = [0.8, 0.3, 0.1, 0.2, 0.9, 0.4];
        let bg = [0.2, 0.2, 0.2, 0.7, 0.7, 0.7];
        let cfg = DecontaminateConfig::default();
        assert_eq!(color_decontaminate(&rgb, &[0.0, 0.0], &bg, &cfg).unwrap(), rgb.to_vec());
        assert_eq!(color_decontaminate(&rgb, &[1.0, 1.0], &bg, &cfg).unwrap(), bg.to_vec());

        let half =
            blend_with_mask(&[0.8, 0.8, 0.8], &[0.5], &[0.2, 0.2, 0.2], DecontaminateOrientation::AsPrinted).unwrap();
        assert_eq!(half, vec![0.5; 3]);

        let inv = DecontaminateConfig { orientation: DecontaminateOrientation::Inverted, ..cfg };
        assert_eq!(color_decontaminate(&rgb, &[1.0, 1.0], &bg, &inv).unwrap(), rgb.to_vec());
        assert_eq!(color_decontaminate(&rgb, &[0.0, 0.0], &bg, &inv).unwrap(), bg.to_vec());
    }

    #[test]
    fn kernel_clamps_to_the_frame() {
        assert_eq!(effective_kernel(201, 16, 16).unwrap(), 15);
        assert_eq!(effective_kernel(201, 17, 40).unwrap(), 17);
        assert_eq!(effective_kernel(5, 16, 16).unwrap(), 5);
        assert!(effective_kernel(4, 16, 16).is_err());
    }

    #[test]
    fn blur_of_a_constant_frame_is_exact() {
        let plane = vec![0.3712; 9 * 7 * 3];
        assert_eq!(gaussian_blur_rgb(&plane, 9, 7, DEFAULT_BLUR_KERNEL).unwrap(), plane);
    }

    #[test]
    fn blurred_background_is_static_and_foreground_kept() {
        let sp = SceneSpec::for_class(6, 2).unwrap();
        let (v, _) = synthesize_scene(&sp, 5, 16, 16).unwrap();
        let out = blur_background(&v, DEFAULT_BLUR_KERNEL).unwrap();
        let mut background: Vec<Option<[f64; 3]>> = vec![None; 256];
        for f in 0..5 {
            for y in 0..16 {
                for x in 0..16 {
                    let (p, q) = (v.pixel(f, y, x), out.pixel(f, y, x));
                    assert_eq!(p[3], q[3]);
                    if p[3] == 1.0 {
                        assert_eq!(p, q);
                    }
                    if p[3] == 0.0 {
                        let rgb = [q[0], q[1], q[2]];
                        let slot = &mut background[y * 16 + x];
                        match slot {
                            Some(prev) => assert_eq!(*prev, rgb),
                            None => *slot = Some(rgb),
                        }
                    }
                }
            }
        }
        // a second pass blurs the (already blurred) first frame again, so
        // the background stays static but is not bit-identical in general
        let again = blur_background(&out, DEFAULT_BLUR_KERNEL).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if (0..5).all(|f| v.pixel(f, y, x)[3] == 0.0) {
                    let first = again.pixel(0, y, x);
                    assert!((1..5).all(|f| again.pixel(f, y, x) == first));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn refine_mask_is_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0,
                                               gain in 0.1f64..3.0, choke in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = refine_mask(&[lo, hi], gain, choke).unwrap();
            prop_assert!(r[0] <= r[1]);
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RgbaVideo;
use crate::error::{Error, Result};
use crate::model::NUM_CONDITIONS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Translate,
    Spin,
    Bounce,
    Scale,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring];
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Translate, Motion::Spin, Motion::Bounce, Motion::Scale];
}

/// Condition class of a shape/motion pair.
pub fn cond_id(shape: Shape, motion: Motion) -> usize {
    shape as usize * Motion::ALL.len() + motion as usize
}

pub fn class_of(cond_id: usize) -> Result<(Shape, Motion)> {
    if cond_id >= NUM_CONDITIONS {
        return Err(Error::Lookup(cond_id));
    }
    Ok((Shape::ALL[cond_id / Motion::ALL.len()], Motion::ALL[cond_id % Motion::ALL.len()]))
}

/// Everything needed to render one sprite video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub motion: Motion,
    pub fg_color: [f64; 3],
    pub bg_texture_seed: u64,
    /// Drives sprite size and trajectory.
    pub seed: u64,
}

impl SceneSpec {
    /// Random colors and trajectory for a fixed class.
    pub fn for_class(cond_id: usize, seed: u64) -> Result<Self> {
        let (shape, motion) = class_of(cond_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fg_color = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        Ok(SceneSpec { shape, motion, fg_color, bg_texture_seed: rng.gen(), seed: rng.gen() })
    }

    pub fn cond_id(&self) -> usize {
        cond_id(self.shape, self.motion)
    }
}

/// Sprite pose in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

const MAX_SCALE: f64 = 1.3;
const SUBSAMPLES: usize = 4;

fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= r * r,
        Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        Shape::Triangle => [90f64, 210.0, 330.0].iter().all(|deg| {
            let a = deg.to_radians();
            u * a.cos() + v * a.sin() <= 0.5 * r
        }),
        Shape::Ring => {
            // the gap keeps rotations visible
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= 0.3 * r * r && !(u > 0.0 && v.abs() < 0.35 * u)
        }
    }
}

/// Fraction of the pixel at `(x, y)` covered by the sprite.
fn coverage(shape: Shape, pose: &Pose, radius: f64, x: usize, y: usize) -> f64 {
    let (s, c) = pose.angle.sin_cos();
    let mut hits = 0;
    for j in 0..SUBSAMPLES {
        for i in 0..SUBSAMPLES {
            let px = x as f64 + (i as f64 + 0.5) / SUBSAMPLES as f64 - pose.cx;
            let py = y as f64 + (j as f64 + 0.5) / SUBSAMPLES as f64 - pose.cy;
            let u = (c * px + s * py) / pose.scale;
            let v = (-s * px + c * py) / pose.scale;
            if inside(shape, u, v, radius) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64
}

/// Planar background: `base + gx·(x̂−½) + gy·(ŷ−½)` per channel.
#[derive(Clone, Copy, Debug)]
struct Background {
    base: [f64; 3],
    gx: [f64; 3],
    gy: [f64; 3],
}

impl Background {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ch = |lo: f64, hi: f64| [0; 3].map(|_| rng.gen_range(lo..hi));
        Background { base: ch(0.15, 0.35), gx: ch(-0.15, 0.15), gy: ch(-0.15, 0.15) }
    }

    fn at(&self, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
        let xn = if w > 1 { x as f64 / (w - 1) as f64 - 0.5 } else { 0.0 };
        let yn = if h > 1 { y as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
        [0, 1, 2].map(|c| self.base[c] + self.gx[c] * xn + self.gy[c] * yn)
    }
}

fn trajectory(spec: &SceneSpec, frames: usize, h: usize, w: usize) -> Result<(f64, Vec<Pose>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = h.min(w) as f64 * rng.gen_range(0.18..0.26);
    let reach = radius * 1.15 * if spec.motion == Motion::Scale { MAX_SCALE } else { 1.0 };
    let (lo_x, hi_x) = (reach + 1.0, w as f64 - reach - 1.0);
    let (lo_y, hi_y) = (reach + 1.0, h as f64 - reach - 1.0);
    if lo_x > hi_x || lo_y > hi_y {
        return Err(Error::Spec(format!("a sprite of radius {radius:.2} does not fit a {h}x{w} frame")));
    }
    let point = |rng: &mut ChaCha8Rng| (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
    let span = (hi_x - lo_x).hypot(hi_y - lo_y);
    let progress = |f: usize| if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
    let angle0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let still = |(cx, cy): (f64, f64)| Pose { cx, cy, angle: angle0, scale: 1.0 };
    let poses = match spec.motion {
        Motion::Translate => {
            let start = point(&mut rng);
            let mut end = point(&mut rng);
            for _ in 0..64 {
                if (end.0 - start.0).hypot(end.1 - start.1) >= 0.5 * span {
                    break;
                }
                end = point(&mut rng);
            }
            (0..frames)
                .map(|f| {
                    let p = progress(f);
                    still((start.0 + (end.0 - start.0) * p, start.1 + (end.1 - start.1) * p))
                })
                .collect()
        }
        Motion::Spin => {
            let centre = point(&mut rng);
            let omega = rng.gen_range(0.25..0.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (0..frames).map(|f| Pose { angle: angle0 + omega * f as f64, ..still(centre) }).collect()
        }
        Motion::Bounce => {
            let (x0, x1) = if rng.gen::<bool>() { (lo_x, hi_x) } else { (hi_x, lo_x) };
            let bounces = rng.gen_range(1..=2) as f64;
            (0..frames)
                .map(|f| {
                    let p = progress(f);
                    let hop = (std::f64::consts::PI * bounces * p).sin().abs();
                    still((x0 + (x1 - x0) * p, hi_y - (hi_y - lo_y) * hop))
                })
                .collect()
        }
        Motion::Scale => {
            let centre = point(&mut rng);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..frames)
                .map(|f| {
                    let s = 1.0 + (MAX_SCALE - 1.0) * (std::f64::consts::TAU * f as f64 / frames as f64 + phase).sin();
                    Pose { scale: s, ..still(centre) }
                })
                .collect()
        }
    };
    Ok((radius, poses))
}

/// Renders an anti-aliased sprite over a planar background with straight
/// alpha compositing.
pub fn synthesize_scene(spec: &SceneSpec, frames: usize, height: usize, width: usize) -> Result<(RgbaVideo, usize)> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!("scene dims {frames}x{height}x{width} must be positive")));
    }
    if spec.fg_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Spec(format!("foreground color {:?} outside [0,1]", spec.fg_color)));
    }
    let (radius, poses) = trajectory(spec, frames, height, width)?;
    let bg = Background::new(spec.bg_texture_seed);
    let mut video = RgbaVideo::zeros(frames, height, width);
    for (f, pose) in poses.iter().enumerate() {
        let mut covered = 0.0;
        for y in 0..height {
            for x in 0..width {
                let a = coverage(spec.shape, pose, radius, x, y);
                covered += a;
                let b = bg.at(y, x, height, width);
                let [r, g, bl] = [0, 1, 2].map(|c| spec.fg_color[c] * a + b[c] * (1.0 - a));
                video.set_pixel(f, y, x, [r, g, bl, a]);
            }
        }
        if covered == 0.0 {
            return Err(Error::Spec(format!("sprite leaves the frame at frame {f}")));
        }
    }
    Ok((video, spec.cond_id()))
}

/// Background colour the renderer uses at `(y, x)`.
pub fn background_at(spec: &SceneSpec, y: usize, x: usize, height: usize, width: usize) -> [f64; 3] {
    Background::new(spec.bg_texture_seed).at(y, x, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: usize, seed: u64) -> SceneSpec {
        SceneSpec::for_class(id, seed).unwrap()
    }

    #[test]
    fn class_table_is_a_bijection() {
        for id in 0..NUM_CONDITIONS {
            let (s, m) = class_of(id).unwrap();
            assert_eq!(cond_id(s, m), id);
        }
        assert!(matches!(class_of(16), Err(Error::Lookup(16))));
    }

    #[test]
    fn compositing_identity_and_pure_pixels() {
        for id in 0..NUM_CONDITIONS {
            let sp = spec(id, 40 + id as u64);
            let (v, cid) = synthesize_scene(&sp, 6, 16, 16).unwrap();
            assert_eq!(cid, id);
            let (mut opaque, mut clear) = (0, 0);
            for f in 0..6 {
                for y in 0..16 {
                    for x in 0..16 {
                        let p = v.pixel(f, y, x);
                        let bg = background_at(&sp, y, x, 16, 16);
                        for c in 0..3 {
                            let expect = sp.fg_color[c] * p[3] + bg[c] * (1.0 - p[3]);
                            assert!((p[c] - expect).abs() <= 1e-12);
                        }
                        if p[3] == 1.0 {
                            opaque += 1;
                            assert_eq!([p[0], p[1], p[2]], sp.fg_color);
                        }
                        if p[3] == 0.0 {
                            clear += 1;
                            assert_eq!([p[0], p[1], p[2]], bg);
                        }
                    }
                }
            }
            assert!(opaque > 0 && clear > 0, "class {id}");
        }
    }

    #[test]
    fn rendering_is_deterministic_and_has_soft_edges() {
        let sp = spec(5, 9);
        let (a, _) = synthesize_scene(&sp, 4, 16, 16).unwrap();
        let (b, _) = synthesize_scene(&sp, 4, 16, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.data().chunks_exact(4).any(|p| p[3] > 0.0 && p[3] < 1.0));
    }

    #[test]
    fn frames_too_small_for_a_sprite_are_rejected() {
        assert!(matches!(synthesize_scene(&spec(0, 1), 2, 3, 3), Err(Error::Spec(_))));
    }

    #[test]
    fn motion_classes_actually_move() {
        for id in 0..NUM_CONDITIONS {
            let (shape, motion) = class_of(id).unwrap();
            if shape == Shape::Circle && motion == Motion::Spin {
                continue;
            }
            let (v, _) = synthesize_scene(&spec(id, 3), 4, 16, 16).unwrap();
            assert_ne!(v.alpha_frame(0), v.alpha_frame(3), "class {id}");
        }
    }
}

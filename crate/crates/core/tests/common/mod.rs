#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgba_dit::metrics::Gray;
use rgba_dit::model::{DiT, DiTConfig, EXTENSION_PREFIX};
use rgba_dit::numerics::Tensor;

pub fn texture(x: f64, y: f64) -> f64 {
    0.6 + 0.15 * (0.45 * x + 0.2 * y).sin() + 0.12 * (0.3 * x - 0.5 * y + 1.0).cos()
}

/// Smooth full-frame texture shifted by `(sx, sy)`.
pub fn shifted_texture(n: usize, sx: f64, sy: f64) -> Gray {
    let f = |x: f64, y: f64| {
        0.5 + 0.15 * (0.21 * x + 0.13 * y).sin()
            + 0.1 * (0.17 * x - 0.29 * y + 1.0).cos()
            + 0.08 * (0.37 * x + 0.07 * y + 2.0).sin()
    };
    Gray { height: n, width: n, data: (0..n * n).map(|i| f((i % n) as f64 - sx, (i / n) as f64 - sy)).collect() }
}

pub fn flip_horizontal(g: &Gray) -> Gray {
    let mut data = g.data.clone();
    for row in data.chunks_mut(g.width) {
        row.reverse();
    }
    Gray { data, ..g.clone() }
}

/// A textured disc of radius `r` moving right at `speed` px/frame over a
/// flat background, plus a per-pixel count of frame pairs it covers.
pub struct MovingSprite {
    pub frames: Vec<Gray>,
    pub support: Vec<usize>,
}

pub fn moving_sprite(n: usize, frames: usize, r: f64, speed: f64) -> MovingSprite {
    let mut out = Vec::with_capacity(frames);
    let mut support = vec![0; n * n];
    for f in 0..frames {
        let (cx, cy) = (n as f64 * 0.375 + speed * f as f64, n as f64 * 0.5);
        let mut d = vec![0.2; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    d[y * n + x] = texture(dx, dy);
                    if f + 1 < frames {
                        support[y * n + x] += 1;
                    }
                }
            }
        }
        out.push(Gray { height: n, width: n, data: d });
    }
    MovingSprite { frames: out, support }
}

/// Mean of `map` over the sprite support, weighted by coverage count.
pub fn support_mean(map: &Gray, support: &[usize]) -> f64 {
    let total: usize = support.iter().sum();
    map.data.iter().zip(support).map(|(v, &c)| v * c as f64).sum::<f64>() / total as f64
}

/// depth 2, D 32, two frames of 8×8 with patch 4: L = 8.
pub fn small_config() -> DiTConfig {
    DiTConfig {
        depth: 2,
        dim: 32,
        heads: 2,
        ffn_mult: 2,
        patch: 4,
        frames: 2,
        height: 8,
        width: 8,
        cond_tokens: 2,
        time_embed_dim: 16,
        lora_rank: 4,
        ..DiTConfig::default()
    }
}

pub fn random_tokens(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::normal(&[rows, cols], 1.0, &mut rng)
}

/// Overwrites every extension parameter with U(-scale, scale) values.
pub fn randomize_extension(model: &mut DiT, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> =
        model.params().iter().filter(|(_, p)| p.name.starts_with(EXTENSION_PREFIX)).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).tensor.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn rows(t: &Tensor, range: std::ops::Range<usize>) -> Vec<f64> {
    t.data()[range.start * t.cols()..range.end * t.cols()].to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

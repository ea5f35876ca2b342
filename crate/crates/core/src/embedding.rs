//! Positional encodings, the shared RGB/alpha position index and the
//! zero-initialized domain embedding.
//!
//! The video segment of a doubled sequence holds `2L` tokens: positions
//! `1..=L` are RGB, `L+1..=2L` are alpha. Alpha token `L+m` reuses the
//! positional code of RGB token `m`, and is told apart from it only by the
//! learnable domain vector added to its features.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rope_frequency, Graph, NodeId, ParamId, ParamStore, RopeTable, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    AbsoluteSinusoidal,
    Rope,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalScheme {
    pub kind: PositionalKind,
    /// Rotary frequency base; unused by the sinusoidal scheme.
    pub theta_base: f64,
    pub dim: usize,
}

impl PositionalScheme {
    pub fn absolute(dim: usize) -> Self {
        PositionalScheme { kind: PositionalKind::AbsoluteSinusoidal, theta_base: 10_000.0, dim }
    }

    pub fn rope(dim: usize) -> Self {
        PositionalScheme { kind: PositionalKind::Rope, theta_base: 10_000.0, dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("positional encoding dimension {} must be even and positive", self.dim)));
        }
        if self.kind == PositionalKind::Rope && !(self.theta_base > 0.0) {
            return Err(Error::Config("rope theta_base must be positive".into()));
        }
        Ok(())
    }
}

/// Token layout `[text | RGB | alpha]` of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub text_len: usize,
    /// Video tokens per domain (`L`).
    pub video_len: usize,
    pub dim: usize,
    pub doubled: bool,
}

impl SequenceLayout {
    pub fn new(text_len: usize, video_len: usize, dim: usize, doubled: bool) -> Result<Self> {
        if video_len == 0 || dim == 0 {
            return Err(Error::Config("sequence layout needs L > 0 and D > 0".into()));
        }
        Ok(SequenceLayout { text_len, video_len, dim, doubled })
    }

    pub fn video_tokens(&self) -> usize {
        if self.doubled {
            2 * self.video_len
        } else {
            self.video_len
        }
    }

    pub fn total_len(&self) -> usize {
        self.text_len + self.video_tokens()
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text_len
    }

    pub fn rgb_range(&self) -> Range<usize> {
        self.text_len..self.text_len + self.video_len
    }

    /// Empty when the layout is not doubled.
    pub fn alpha_range(&self) -> Range<usize> {
        if self.doubled {
            self.text_len + self.video_len..self.text_len + 2 * self.video_len
        } else {
            self.total_len()..self.total_len()
        }
    }

    /// The same layout without the alpha segment.
    pub fn base(&self) -> Self {
        SequenceLayout { doubled: false, ..*self }
    }
}

/// Effective positional index of 1-based video token `m` in a doubled
/// sequence of `2L` video tokens: `m` for RGB tokens, `m - L` for alpha.
pub fn position_index(m: usize, video_len: usize) -> Result<usize> {
    if m == 0 || m > 2 * video_len {
        return Err(Error::Index { index: m, max: 2 * video_len });
    }
    Ok(if m <= video_len { m } else { m - video_len })
}

/// Sinusoidal code at a real-valued position: channel `2i` holds
/// `sin(pos / 10000^(2i/D))`, channel `2i+1` the matching cosine.
pub fn sinusoidal_features(pos: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal dimension {dim} must be even")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = pos / 10_000_f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

pub fn sinusoidal_pe(index: usize, dim: usize) -> Result<Vec<f64>> {
    sinusoidal_features(index as f64, dim)
}

/// Rotates channel pair `(2i, 2i+1)` by `index · theta_base^(-2i/D)`.
pub fn apply_rope(x: &[f64], index: usize, theta_base: f64) -> Result<Vec<f64>> {
    let dim = x.len();
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("rope dimension {dim} must be even")));
    }
    let mut out = x.to_vec();
    for i in 0..dim / 2 {
        let angle = index as f64 * rope_frequency(i, dim, theta_base);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Learnable `1×D` vector added to every alpha token.
#[derive(Clone, Copy, Debug)]
pub struct DomainEmbedding {
    pub id: ParamId,
}

impl DomainEmbedding {
    /// Registers a zero-initialized, trainable vector of length `dim`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        DomainEmbedding { id: store.add(name, Tensor::zeros(&[dim]), true) }
    }
}

/// Video tokens after positional/domain embedding.
#[derive(Clone, Debug)]
pub struct EmbeddedVideo {
    pub tokens: NodeId,
    /// Effective positional index of every video row, in row order.
    pub positions: Vec<usize>,
}

/// Embeds the `2L` video tokens of a doubled sequence.
///
/// Absolute scheme: row `m` becomes `x_m + p(idx(m)) (+ d when m > L)`.
/// Rotary scheme: row `m` becomes `x_m (+ d when m > L)`; the returned
/// positions drive the later rotation of queries and keys.
pub fn embed_video_tokens(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    scheme: &PositionalScheme,
    domain: Option<DomainEmbedding>,
    layout: &SequenceLayout,
) -> Result<EmbeddedVideo> {
    if !layout.doubled {
        return Err(Error::Config("embed_video_tokens needs a doubled layout".into()));
    }
    embed_video(g, store, x, scheme, domain, layout)
}

/// Shared by the doubled and the base (RGB-only) layouts.
pub(crate) fn embed_video(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    scheme: &PositionalScheme,
    domain: Option<DomainEmbedding>,
    layout: &SequenceLayout,
) -> Result<EmbeddedVideo> {
    scheme.validate()?;
    let rows = layout.video_tokens();
    let value = g.value(x);
    if value.rows() != rows || value.cols() != layout.dim || scheme.dim != layout.dim {
        return Err(Error::Config(format!(
            "video tokens {}x{} do not match layout {rows}x{} / scheme dim {}",
            value.rows(),
            value.cols(),
            layout.dim,
            scheme.dim
        )));
    }
    let positions = (1..=rows).map(|m| position_index(m, layout.video_len)).collect::<Result<Vec<_>>>()?;

    let mut tokens = x;
    if scheme.kind == PositionalKind::AbsoluteSinusoidal {
        let mut pe = Vec::with_capacity(rows * layout.dim);
        for &p in &positions {
            pe.extend(sinusoidal_pe(p, layout.dim)?);
        }
        let pe = g.constant(Tensor::matrix(rows, layout.dim, pe)?);
        tokens = g.add(tokens, pe)?;
    }
    if let Some(d) = domain {
        if layout.doubled {
            let dn = g.param(store, d.id);
            tokens = g.add_row_vector_range(tokens, dn, layout.video_len..2 * layout.video_len)?;
        }
    }
    Ok(EmbeddedVideo { tokens, positions })
}

/// Rotation table for a full `[text | video]` sequence; text rows are not
/// rotated.
pub(crate) fn rope_table_for_sequence(
    text_len: usize,
    video_positions: &[usize],
    head_dim: usize,
    theta_base: f64,
) -> Result<Arc<RopeTable>> {
    let positions: Vec<Option<usize>> =
        std::iter::repeat_n(None, text_len).chain(video_positions.iter().map(|&p| Some(p))).collect();
    Ok(Arc::new(RopeTable::new(&positions, head_dim, theta_base)?))
}

//! QKV projection with alpha-scoped low-rank adapters, the additive
//! attention mask regimes, and multi-head masked attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    embed_video, rope_table_for_sequence, DomainEmbedding, PositionalKind, PositionalScheme, SequenceLayout,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RopeTable, Tensor};

/// Which query/key groups of a `[text | RGB | alpha]` sequence are blocked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Text queries cannot see alpha keys; everything else is open.
    TextToAlphaBlocked,
    /// Neither text nor RGB queries can see alpha keys.
    AllAlphaKeysBlocked,
    Unmasked,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::TextToAlphaBlocked, MaskMode::AllAlphaKeysBlocked, MaskMode::Unmasked];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::TextToAlphaBlocked => "text_to_alpha_blocked",
            MaskMode::AllAlphaKeysBlocked => "all_alpha_keys_blocked",
            MaskMode::Unmasked => "unmasked",
        }
    }

    fn references_alpha(self) -> bool {
        !matches!(self, MaskMode::Unmasked)
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask mode `{s}`")))
    }
}

/// Additive `{0, -inf}` mask over a full sequence.
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub layout: SequenceLayout,
    pub mode: MaskMode,
    pub matrix: Arc<Tensor>,
}

impl MaskSpec {
    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.matrix.get(query, key) == f64::NEG_INFINITY
    }

    pub fn blocked_count(&self) -> usize {
        self.matrix.data().iter().filter(|&&v| v == f64::NEG_INFINITY).count()
    }
}

pub fn build_mask(layout: &SequenceLayout, mode: MaskMode) -> Result<MaskSpec> {
    if mode.references_alpha() && !layout.doubled {
        return Err(Error::Config(format!("mask mode {mode} needs a doubled layout")));
    }
    let n = layout.total_len();
    let mut m = Tensor::zeros(&[n, n]);
    let alpha = layout.alpha_range();
    let blocked_queries = match mode {
        MaskMode::TextToAlphaBlocked => layout.text_range(),
        MaskMode::AllAlphaKeysBlocked => 0..layout.rgb_range().end,
        MaskMode::Unmasked => 0..0,
    };
    for q in blocked_queries {
        for k in alpha.clone() {
            m.data_mut()[q * n + k] = f64::NEG_INFINITY;
        }
    }
    Ok(MaskSpec { layout: *layout, mode, matrix: Arc::new(m) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
}

/// Low-rank residual `gamma · x · down · up`, applied to alpha rows only.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub gamma: f64,
    pub target: LoraTarget,
}

impl LoraAdapter {
    /// `down` ~ U(-1/sqrt(D), 1/sqrt(D)), `up` = 0, both trainable.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rank: usize,
        gamma: f64,
        target: LoraTarget,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::Config(format!("adapter rank {rank} must lie in 1..{dim} (below the model width)")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let down = store.add(format!("{prefix}.down"), Tensor::uniform(&[dim, rank], bound, rng), true);
        let up = store.add(format!("{prefix}.up"), Tensor::zeros(&[rank, dim]), true);
        Ok(LoraAdapter { down, up, rank, gamma, target })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.tensor(self.down).numel() + store.tensor(self.up).numel()
    }

    /// `gamma · (x · down) · up`
    pub fn residual(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let down = g.param(store, self.down);
        let up = g.param(store, self.up);
        let low = g.matmul(x, down)?;
        let out = g.matmul(low, up)?;
        if self.gamma == 1.0 {
            Ok(out)
        } else {
            g.scale(out, self.gamma)
        }
    }
}

/// The adapters of one attention layer, one per projection.
#[derive(Clone, Copy, Debug)]
pub struct AlphaLora {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

impl AlphaLora {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rank: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AlphaLora {
            q: LoraAdapter::new(store, &format!("{prefix}.q"), dim, rank, gamma, LoraTarget::Q, rng)?,
            k: LoraAdapter::new(store, &format!("{prefix}.k"), dim, rank, gamma, LoraTarget::K, rng)?,
            v: LoraAdapter::new(store, &format!("{prefix}.v"), dim, rank, gamma, LoraTarget::V, rng)?,
        })
    }

    pub fn adapters(&self) -> [LoraAdapter; 3] {
        [self.q, self.k, self.v]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.adapters().iter().flat_map(|a| [a.down, a.up]).collect()
    }
}

/// Shared projection weights of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model width {dim} not divisible by {heads} heads")));
        }
        if !(dim / heads).is_multiple_of(2) {
            return Err(Error::Config(format!("head width {} must be even", dim / heads)));
        }
        let bound = (3.0 / dim as f64).sqrt();
        let mut w = |name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::uniform(&[dim, dim], bound, rng), trainable)
        };
        let wq = w("wq", rng);
        let wk = w("wk", rng);
        let wv = w("wv", rng);
        let wo = w("wo", rng);
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[dim]), trainable);
        Ok(AttentionWeights { wq, wk, wv, wo, bo, heads, dim })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.bo]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// Projects a full `[text | video]` hidden sequence.
///
/// All rows use the shared weights; alpha rows additionally receive the
/// adapter residual. With a rotary table, q and k rows are rotated after
/// projection (text rows carry no rotation).
pub fn project_sequence(
    g: &mut Graph,
    store: &ParamStore,
    hidden: NodeId,
    weights: &AttentionWeights,
    lora: Option<&AlphaLora>,
    layout: &SequenceLayout,
    rope: Option<&Arc<RopeTable>>,
) -> Result<Qkv> {
    let v = g.value(hidden);
    if v.rows() != layout.total_len() || v.cols() != weights.dim {
        return Err(Error::Dimension(format!(
            "hidden sequence {}x{} does not match layout {}x{}",
            v.rows(),
            v.cols(),
            layout.total_len(),
            weights.dim
        )));
    }
    let alpha = layout.alpha_range();
    let alpha_in = match (lora, alpha.is_empty()) {
        (Some(_), false) => Some(g.slice_rows(hidden, alpha.clone())?),
        _ => None,
    };
    let project = |g: &mut Graph, w: ParamId, adapter: Option<LoraAdapter>| -> Result<NodeId> {
        let wn = g.param(store, w);
        let base = g.matmul(hidden, wn)?;
        match (adapter, alpha_in) {
            (Some(a), Some(x)) => {
                let delta = a.residual(g, store, x)?;
                g.add_rows(base, delta, alpha.start)
            }
            _ => Ok(base),
        }
    };
    let mut q = project(g, weights.wq, lora.map(|l| l.q))?;
    let mut k = project(g, weights.wk, lora.map(|l| l.k))?;
    let v = project(g, weights.wv, lora.map(|l| l.v))?;
    if let Some(table) = rope {
        q = g.rope(q, table.clone())?;
        k = g.rope(k, table.clone())?;
    }
    Ok(Qkv { q, k, v })
}

/// Projects separately supplied text and video tokens. Video tokens are
/// embedded first (shared position index and, for alpha rows, the domain
/// vector); the rotary scheme rotates video q/k rows by their shared index.
#[allow(clippy::too_many_arguments)]
pub fn project_qkv(
    g: &mut Graph,
    store: &ParamStore,
    text: NodeId,
    video: NodeId,
    weights: &AttentionWeights,
    lora: Option<&AlphaLora>,
    scheme: &PositionalScheme,
    domain: Option<DomainEmbedding>,
    layout: &SequenceLayout,
) -> Result<Qkv> {
    let embedded = embed_video(g, store, video, scheme, domain, layout)?;
    let hidden = if layout.text_len > 0 { g.concat_rows(&[text, embedded.tokens])? } else { embedded.tokens };
    let rope = match scheme.kind {
        PositionalKind::Rope => {
            Some(rope_table_for_sequence(layout.text_len, &embedded.positions, weights.head_dim(), scheme.theta_base)?)
        }
        PositionalKind::AbsoluteSinusoidal => None,
    };
    project_sequence(g, store, hidden, weights, lora, layout, rope.as_ref())
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: NodeId,
    /// Post-softmax weights, one `[n×n]` node per head.
    pub probs: Vec<NodeId>,
}

/// Per-head `softmax(q kᵀ / sqrt(d_head) + M) v`, heads concatenated and
/// passed through the output projection.
pub fn grouped_attention(
    g: &mut Graph,
    store: &ParamStore,
    qkv: Qkv,
    mask: &MaskSpec,
    weights: &AttentionWeights,
) -> Result<AttentionOutput> {
    let n = g.value(qkv.q).rows();
    if mask.matrix.rows() != n {
        return Err(Error::Dimension(format!("mask covers {} tokens, sequence has {n}", mask.matrix.rows())));
    }
    let hd = weights.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(weights.heads);
    let mut probs = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let cols = h * hd..(h + 1) * hd;
        let (q, k, v) = if weights.heads == 1 {
            (qkv.q, qkv.k, qkv.v)
        } else {
            (g.slice_cols(qkv.q, cols.clone())?, g.slice_cols(qkv.k, cols.clone())?, g.slice_cols(qkv.v, cols)?)
        };
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let p = g.softmax_masked(scores, mask.matrix.clone())?;
        probs.push(p);
        heads.push(g.matmul(p, v)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(store, weights.wo);
    let bo = g.param(store, weights.bo);
    let out = g.matmul(cat, wo)?;
    let output = g.add_row_vector(out, bo)?;
    Ok(AttentionOutput { output, probs })
}

/// Inputs of a single attention layer for [`truncated_equivalence_check`].
#[derive(Clone, Debug)]
pub struct BlockInputs<'a> {
    pub store: &'a ParamStore,
    pub text: Tensor,
    /// `2L` video tokens, RGB half first.
    pub video: Tensor,
    pub weights: AttentionWeights,
    pub lora: Option<AlphaLora>,
    pub domain: Option<DomainEmbedding>,
    pub scheme: PositionalScheme,
    pub mode: MaskMode,
}

/// Runs the extended `[text | RGB | alpha]` sequence and the base
/// `[text | RGB]` sequence through the same layer and returns the largest
/// absolute difference over the text and RGB output rows.
pub fn truncated_equivalence_check(inputs: &BlockInputs<'_>, layout: &SequenceLayout) -> Result<f64> {
    let run = |layout: &SequenceLayout, video: Tensor, mode: MaskMode, lora: Option<&AlphaLora>| {
        let mut g = Graph::new();
        let text = g.constant(inputs.text.clone());
        let video = g.constant(video);
        let qkv = project_qkv(
            &mut g,
            inputs.store,
            text,
            video,
            &inputs.weights,
            lora,
            &inputs.scheme,
            inputs.domain,
            layout,
        )?;
        let mask = build_mask(layout, mode)?;
        let out = grouped_attention(&mut g, inputs.store, qkv, &mask, &inputs.weights)?;
        Ok::<_, Error>(g.value(out.output).clone())
    };
    let extended = run(layout, inputs.video.clone(), inputs.mode, inputs.lora.as_ref())?;
    let base_layout = layout.base();
    let rgb_rows = layout.video_len * layout.dim;
    let rgb = Tensor::matrix(layout.video_len, layout.dim, inputs.video.data()[..rgb_rows].to_vec())?;
    let base = run(&base_layout, rgb, MaskMode::Unmasked, None)?;
    let shared = base_layout.total_len() * layout.dim;
    Ok(extended.data()[..shared].iter().zip(&base.data()[..shared]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

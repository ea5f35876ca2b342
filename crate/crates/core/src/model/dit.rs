use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DiTConfig, NUM_CONDITIONS};
use crate::attention::{
    build_mask, grouped_attention, project_sequence, AlphaLora, AttentionWeights, MaskMode, MaskSpec, Qkv,
};
use crate::embedding::{
    embed_video, rope_table_for_sequence, sinusoidal_features, DomainEmbedding, PositionalKind, PositionalScheme,
    SequenceLayout,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RopeTable, Tensor};

/// How the alpha video is attached to the pretrained RGB model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointDesign {
    /// Alpha tokens appended after the RGB tokens of one sequence.
    SequenceExtension,
    /// Two parallel streams joined by cross-stream attention after every
    /// attention layer.
    BatchExtension,
    /// RGB and alpha patches merged channel-wise into one token.
    LatentDimExtension,
}

impl JointDesign {
    pub const ALL: [JointDesign; 3] =
        [JointDesign::SequenceExtension, JointDesign::BatchExtension, JointDesign::LatentDimExtension];

    pub fn as_str(self) -> &'static str {
        match self {
            JointDesign::SequenceExtension => "sequence_extension",
            JointDesign::BatchExtension => "batch_extension",
            JointDesign::LatentDimExtension => "latent_dim_extension",
        }
    }
}

impl std::fmt::Display for JointDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for JointDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JointDesign::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown joint design `{s}`")))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    attn: AttentionWeights,
    ln2: Norm,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Parameters added on top of the frozen base model.
#[derive(Clone, Debug)]
pub enum Extension {
    Sequence {
        lora: Vec<AlphaLora>,
        domain: DomainEmbedding,
    },
    /// Per block: `[into_rgb, into_alpha]` cross-stream attention.
    Batch {
        comm: Vec<[AttentionWeights; 2]>,
    },
    LatentDim {
        merge_w: ParamId,
        merge_b: ParamId,
        unmerge_w: ParamId,
        unmerge_b: ParamId,
    },
}

impl Extension {
    pub fn design(&self) -> JointDesign {
        match self {
            Extension::Sequence { .. } => JointDesign::SequenceExtension,
            Extension::Batch { .. } => JointDesign::BatchExtension,
            Extension::LatentDim { .. } => JointDesign::LatentDimExtension,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted tokens, same shape as the input video tokens.
    pub prediction: NodeId,
    /// Full hidden sequence after each block (RGB stream for the batch design).
    pub hidden: Vec<NodeId>,
    /// Post-softmax attention weights per block and head.
    pub probs: Vec<Vec<NodeId>>,
    pub layout: SequenceLayout,
}

/// Prefix of every parameter that belongs to a joint-generation extension.
pub const EXTENSION_PREFIX: &str = "ext.";

/// Desk-scale video diffusion transformer over pixel patches.
#[derive(Clone, Debug)]
pub struct DiT {
    config: DiTConfig,
    store: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond_table: ParamId,
    blocks: Vec<Block>,
    final_ln: Norm,
    unpatch_w: ParamId,
    unpatch_b: ParamId,
    extension: Option<Extension>,
}

fn uniform_param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let bound = (3.0 / rows as f64).sqrt();
    store.add(name, Tensor::uniform(&[rows, cols], bound, rng), true)
}

impl DiT {
    /// Fresh base (RGB-only) model with every parameter trainable.
    pub fn new_base(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, dp) = (config.dim, config.patch_dim());
        let patch_w = uniform_param(&mut store, "patch.w", dp, d, &mut rng);
        let patch_b = store.add("patch.b", Tensor::zeros(&[d]), true);
        let time_w1 = uniform_param(&mut store, "time.w1", config.time_embed_dim, d, &mut rng);
        let time_b1 = store.add("time.b1", Tensor::zeros(&[d]), true);
        let time_w2 = uniform_param(&mut store, "time.w2", d, d, &mut rng);
        let time_b2 = store.add("time.b2", Tensor::zeros(&[d]), true);
        let cond_rows = (NUM_CONDITIONS * config.cond_tokens).max(1);
        let cond_table = store.add("cond.table", Tensor::uniform(&[cond_rows, d], 3f64.sqrt(), &mut rng), true);
        let norm = |store: &mut ParamStore, prefix: &str| Norm {
            scale: store.add(format!("{prefix}.scale"), Tensor::filled(&[d], 1.0), true),
            shift: store.add(format!("{prefix}.shift"), Tensor::zeros(&[d]), true),
        };
        let hidden = d * config.ffn_mult;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let ln1 = norm(&mut store, &format!("{p}.ln1"));
            let attn = AttentionWeights::new(&mut store, &format!("{p}.attn"), d, config.heads, true, &mut rng)?;
            let ln2 = norm(&mut store, &format!("{p}.ln2"));
            let ff1_w = uniform_param(&mut store, &format!("{p}.ff1.w"), d, hidden, &mut rng);
            let ff1_b = store.add(format!("{p}.ff1.b"), Tensor::zeros(&[hidden]), true);
            let ff2_w = uniform_param(&mut store, &format!("{p}.ff2.w"), hidden, d, &mut rng);
            let ff2_b = store.add(format!("{p}.ff2.b"), Tensor::zeros(&[d]), true);
            blocks.push(Block { ln1, attn, ln2, ff1_w, ff1_b, ff2_w, ff2_b });
        }
        let final_ln = norm(&mut store, "final_ln");
        let unpatch_w = uniform_param(&mut store, "unpatch.w", d, dp, &mut rng);
        let unpatch_b = store.add("unpatch.b", Tensor::zeros(&[dp]), true);
        Ok(DiT {
            config,
            store,
            patch_w,
            patch_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_table,
            blocks,
            final_ln,
            unpatch_w,
            unpatch_b,
            extension: None,
        })
    }

    /// Freezes the base weights and attaches a trainable joint-generation
    /// extension.
    pub fn extend(mut self, design: JointDesign, seed: u64) -> Result<Self> {
        if self.extension.is_some() {
            return Err(Error::Config("model is already extended".into()));
        }
        self.store.freeze_all();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a1fa);
        let (d, dp) = (self.config.dim, self.config.patch_dim());
        let ext = match design {
            JointDesign::SequenceExtension => {
                if self.config.lora_rank >= d {
                    log::warn!(
                        "lora rank {} does not fit model width {d}; using rank {}",
                        self.config.lora_rank,
                        self.config.effective_lora_rank()
                    );
                }
                let rank = self.config.effective_lora_rank();
                let lora = (0..self.config.depth)
                    .map(|i| {
                        AlphaLora::new(
                            &mut self.store,
                            &format!("{EXTENSION_PREFIX}lora.{i}"),
                            d,
                            rank,
                            self.config.lora_gamma,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let domain = DomainEmbedding::new(&mut self.store, &format!("{EXTENSION_PREFIX}domain"), d);
                Extension::Sequence { lora, domain }
            }
            JointDesign::BatchExtension => {
                let mut comm = Vec::with_capacity(self.config.depth);
                for i in 0..self.config.depth {
                    // both directions start from the same random state
                    let start = rng.clone();
                    let mut pair = Vec::with_capacity(2);
                    for dir in ["to_rgb", "to_alpha"] {
                        rng = start.clone();
                        let w = AttentionWeights::new(
                            &mut self.store,
                            &format!("{EXTENSION_PREFIX}comm.{i}.{dir}"),
                            d,
                            self.config.heads,
                            true,
                            &mut rng,
                        )?;
                        self.store.get_mut(w.wo).tensor = Tensor::zeros(&[d, d]);
                        pair.push(w);
                    }
                    comm.push([pair[0], pair[1]]);
                }
                Extension::Batch { comm }
            }
            JointDesign::LatentDimExtension => {
                let mut merge = Tensor::zeros(&[2 * dp, d]);
                let mut unmerge = Tensor::zeros(&[d, 2 * dp]);
                for i in 0..(2 * dp).min(d) {
                    merge.data_mut()[i * d + i] = 1.0;
                    unmerge.data_mut()[i * 2 * dp + i] = 1.0;
                }
                let p = EXTENSION_PREFIX;
                Extension::LatentDim {
                    merge_w: self.store.add(format!("{p}merge.w"), merge, true),
                    merge_b: self.store.add(format!("{p}merge.b"), Tensor::zeros(&[d]), true),
                    unmerge_w: self.store.add(format!("{p}unmerge.w"), unmerge, true),
                    unmerge_b: self.store.add(format!("{p}unmerge.b"), Tensor::zeros(&[2 * dp]), true),
                }
            }
        };
        self.extension = Some(ext);
        Ok(self)
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn extension(&self) -> Option<&Extension> {
        self.extension.as_ref()
    }

    pub fn design(&self) -> Option<JointDesign> {
        self.extension.as_ref().map(Extension::design)
    }

    pub fn is_base_param(name: &str) -> bool {
        !name.starts_with(EXTENSION_PREFIX)
    }

    /// Number of video token rows the model consumes: `L` for the base
    /// model, `2L` once extended.
    pub fn input_rows(&self) -> usize {
        match self.extension {
            None => self.config.video_len(),
            Some(_) => 2 * self.config.video_len(),
        }
    }

    /// Closed-form trainable parameter count of an extension design.
    pub fn expected_trainable_count(config: &DiTConfig, design: JointDesign) -> usize {
        let (d, dp, depth) = (config.dim, config.patch_dim(), config.depth);
        match design {
            JointDesign::SequenceExtension => {
                let r = config.effective_lora_rank();
                depth * 3 * (d * r + r * d) + d
            }
            JointDesign::BatchExtension => depth * 2 * (4 * d * d + d),
            JointDesign::LatentDimExtension => 2 * dp * d + d + d * 2 * dp + 2 * dp,
        }
    }

    pub fn scheme(&self) -> PositionalScheme {
        PositionalScheme { kind: self.config.positional, theta_base: self.config.rope_theta, dim: self.config.dim }
    }

    /// Sequence layout seen by attention.
    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            text_len: self.config.cond_tokens,
            video_len: self.config.video_len(),
            dim: self.config.dim,
            doubled: matches!(self.extension, Some(Extension::Sequence { .. })),
        }
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wn = g.param(&self.store, w);
        let bn = g.param(&self.store, b);
        let y = g.matmul(x, wn)?;
        g.add_row_vector(y, bn)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, n: Norm) -> Result<NodeId> {
        let s = g.param(&self.store, n.scale);
        let b = g.param(&self.store, n.shift);
        g.layer_norm(x, s, b, self.config.ln_eps)
    }

    fn time_embedding(&self, g: &mut Graph, time: f64) -> Result<NodeId> {
        if !time.is_finite() {
            return Err(Error::Contract(format!("diffusion time {time} is not finite")));
        }
        let feats = sinusoidal_features(time * 1000.0, self.config.time_embed_dim)?;
        let x = g.constant(Tensor::matrix(1, feats.len(), feats)?);
        let h = self.linear(g, x, self.time_w1, self.time_b1)?;
        let h = g.silu(h)?;
        self.linear(g, h, self.time_w2, self.time_b2)
    }

    fn text_tokens(&self, g: &mut Graph, cond_id: usize, time: NodeId) -> Result<Option<NodeId>> {
        if cond_id >= NUM_CONDITIONS {
            return Err(Error::Lookup(cond_id));
        }
        let lt = self.config.cond_tokens;
        if lt == 0 {
            return Ok(None);
        }
        let table = g.param(&self.store, self.cond_table);
        let index: Vec<usize> = (cond_id * lt..(cond_id + 1) * lt).collect();
        let rows = g.gather_rows(table, &index)?;
        Ok(Some(g.add_row_vector(rows, time)?))
    }

    fn rope_table(&self, layout: &SequenceLayout, positions: &[usize]) -> Result<Option<Arc<RopeTable>>> {
        match self.config.positional {
            PositionalKind::Rope => Ok(Some(rope_table_for_sequence(
                layout.text_len,
                positions,
                self.config.dim / self.config.heads,
                self.config.rope_theta,
            )?)),
            PositionalKind::AbsoluteSinusoidal => Ok(None),
        }
    }

    /// Patch-embedded (or merged) video rows plus time embedding, followed by
    /// positional/domain embedding and the condition tokens in front.
    fn assemble(
        &self,
        g: &mut Graph,
        embedded_video: NodeId,
        time: NodeId,
        cond_id: usize,
        layout: &SequenceLayout,
        domain: Option<DomainEmbedding>,
    ) -> Result<(NodeId, Option<Arc<RopeTable>>)> {
        let with_time = g.add_row_vector(embedded_video, time)?;
        let emb = embed_video(g, &self.store, with_time, &self.scheme(), domain, layout)?;
        let rope = self.rope_table(layout, &emb.positions)?;
        let h = match self.text_tokens(g, cond_id, time)? {
            Some(text) => g.concat_rows(&[text, emb.tokens])?,
            None => emb.tokens,
        };
        Ok((h, rope))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_residual(
        &self,
        g: &mut Graph,
        block: &Block,
        h: NodeId,
        layout: &SequenceLayout,
        mask: &MaskSpec,
        lora: Option<&AlphaLora>,
        rope: Option<&Arc<RopeTable>>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let a = self.norm(g, h, block.ln1)?;
        let qkv = project_sequence(g, &self.store, a, &block.attn, lora, layout, rope)?;
        let out = grouped_attention(g, &self.store, qkv, mask, &block.attn)?;
        Ok((g.add(h, out.output)?, out.probs))
    }

    fn ffn_residual(&self, g: &mut Graph, block: &Block, h: NodeId) -> Result<NodeId> {
        let f = self.norm(g, h, block.ln2)?;
        let f = self.linear(g, f, block.ff1_w, block.ff1_b)?;
        let f = g.gelu(f)?;
        let f = self.linear(g, f, block.ff2_w, block.ff2_b)?;
        g.add(h, f)
    }

    fn head(&self, g: &mut Graph, h: NodeId, layout: &SequenceLayout) -> Result<NodeId> {
        let video = if layout.text_len > 0 { g.slice_rows(h, layout.text_len..layout.total_len())? } else { h };
        self.norm(g, video, self.final_ln)
    }

    fn check_input(&self, video: &Tensor, cols: usize) -> Result<()> {
        if video.rows() != self.input_rows() || video.cols() != cols {
            return Err(Error::Config(format!(
                "video tokens {}x{} do not match the model layout {}x{cols}",
                video.rows(),
                video.cols(),
                self.input_rows()
            )));
        }
        Ok(())
    }

    /// One denoiser evaluation.
    ///
    /// `video` holds `L` patch tokens for the base model and `2L` (RGB half
    /// first) once extended; the prediction has the same shape. `mode`
    /// selects the attention mask of the sequence-extension design and is
    /// ignored by the others, whose attention never mixes domains in one
    /// sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        video: &Tensor,
        time: f64,
        cond_id: usize,
        mode: MaskMode,
    ) -> Result<ForwardOutput> {
        let dp = self.config.patch_dim();
        self.check_input(video, dp)?;
        match &self.extension {
            None => self.forward_single(g, video, time, cond_id, MaskMode::Unmasked, None),
            Some(Extension::Sequence { lora, domain }) => {
                self.forward_single(g, video, time, cond_id, mode, Some((lora, *domain)))
            }
            Some(Extension::Batch { comm }) => self.forward_batch(g, video, time, cond_id, comm),
            Some(Extension::LatentDim { merge_w, merge_b, unmerge_w, unmerge_b }) => {
                self.forward_latent(g, video, time, cond_id, [*merge_w, *merge_b, *unmerge_w, *unmerge_b])
            }
        }
    }

    fn forward_single(
        &self,
        g: &mut Graph,
        video: &Tensor,
        time: f64,
        cond_id: usize,
        mode: MaskMode,
        seq_ext: Option<(&Vec<AlphaLora>, DomainEmbedding)>,
    ) -> Result<ForwardOutput> {
        let layout = self.layout();
        let mask = build_mask(&layout, mode)?;
        let t = self.time_embedding(g, time)?;
        let x = g.constant(video.clone());
        let patches = self.linear(g, x, self.patch_w, self.patch_b)?;
        let (mut h, rope) = self.assemble(g, patches, t, cond_id, &layout, seq_ext.map(|s| s.1))?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut probs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let lora = seq_ext.map(|s| &s.0[i]);
            let (h1, p) = self.attention_residual(g, block, h, &layout, &mask, lora, rope.as_ref())?;
            h = self.ffn_residual(g, block, h1)?;
            hidden.push(h);
            probs.push(p);
        }
        let out = self.head(g, h, &layout)?;
        let prediction = self.linear(g, out, self.unpatch_w, self.unpatch_b)?;
        Ok(ForwardOutput { prediction, hidden, probs, layout })
    }

    fn forward_batch(
        &self,
        g: &mut Graph,
        video: &Tensor,
        time: f64,
        cond_id: usize,
        comm: &[[AttentionWeights; 2]],
    ) -> Result<ForwardOutput> {
        let layout = self.layout();
        let l = layout.video_len;
        let mask = build_mask(&layout, MaskMode::Unmasked)?;
        let cross_layout = SequenceLayout { text_len: 0, ..layout };
        let cross_mask = build_mask(&cross_layout, MaskMode::Unmasked)?;
        let t = self.time_embedding(g, time)?;
        let x = g.constant(video.clone());
        let mut streams = Vec::with_capacity(2);
        let mut rope = None;
        for half in [0..l, l..2 * l] {
            let xs = g.slice_rows(x, half)?;
            let patches = self.linear(g, xs, self.patch_w, self.patch_b)?;
            let (h, r) = self.assemble(g, patches, t, cond_id, &layout, None)?;
            streams.push(h);
            rope = r;
        }
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut probs = Vec::with_capacity(self.blocks.len());
        for (block, dirs) in self.blocks.iter().zip(comm) {
            let mut block_probs = Vec::new();
            for (s, h) in streams.iter_mut().enumerate() {
                let (h1, p) = self.attention_residual(g, block, *h, &layout, &mask, None, rope.as_ref())?;
                *h = h1;
                if s == 0 {
                    block_probs = p;
                }
            }
            // both messages are computed before either stream is updated
            let mut normed = Vec::with_capacity(2);
            for h in &streams {
                let n = self.norm(g, *h, block.ln1)?;
                normed.push(g.slice_rows(n, layout.text_len..layout.total_len())?);
            }
            let mut messages = Vec::with_capacity(2);
            for (s, w) in dirs.iter().enumerate() {
                let (own, other) = (normed[s], normed[1 - s]);
                let wq = g.param(&self.store, w.wq);
                let wk = g.param(&self.store, w.wk);
                let wv = g.param(&self.store, w.wv);
                let qkv = Qkv { q: g.matmul(own, wq)?, k: g.matmul(other, wk)?, v: g.matmul(other, wv)? };
                messages.push(grouped_attention(g, &self.store, qkv, &cross_mask, w)?.output);
            }
            for (h, m) in streams.iter_mut().zip(messages) {
                *h = g.add_rows(*h, m, layout.text_len)?;
                *h = self.ffn_residual(g, block, *h)?;
            }
            hidden.push(streams[0]);
            probs.push(block_probs);
        }
        let mut preds = Vec::with_capacity(2);
        for h in streams {
            let out = self.head(g, h, &layout)?;
            preds.push(self.linear(g, out, self.unpatch_w, self.unpatch_b)?);
        }
        let prediction = g.concat_rows(&preds)?;
        Ok(ForwardOutput { prediction, hidden, probs, layout })
    }

    fn forward_latent(
        &self,
        g: &mut Graph,
        video: &Tensor,
        time: f64,
        cond_id: usize,
        [merge_w, merge_b, unmerge_w, unmerge_b]: [ParamId; 4],
    ) -> Result<ForwardOutput> {
        let layout = self.layout();
        let (l, dp) = (layout.video_len, self.config.patch_dim());
        let mask = build_mask(&layout, MaskMode::Unmasked)?;
        let mut merged = Vec::with_capacity(l * 2 * dp);
        for m in 0..l {
            merged.extend_from_slice(video.row(m));
            merged.extend_from_slice(video.row(l + m));
        }
        let t = self.time_embedding(g, time)?;
        let x = g.constant(Tensor::matrix(l, 2 * dp, merged)?);
        let tokens = self.linear(g, x, merge_w, merge_b)?;
        let (mut h, rope) = self.assemble(g, tokens, t, cond_id, &layout, None)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut probs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (h1, p) = self.attention_residual(g, block, h, &layout, &mask, None, rope.as_ref())?;
            h = self.ffn_residual(g, block, h1)?;
            hidden.push(h);
            probs.push(p);
        }
        let out = self.head(g, h, &layout)?;
        let out = self.linear(g, out, unmerge_w, unmerge_b)?;
        let rgb = g.slice_cols(out, 0..dp)?;
        let alpha = g.slice_cols(out, dp..2 * dp)?;
        let prediction = g.concat_rows(&[rgb, alpha])?;
        Ok(ForwardOutput { prediction, hidden, probs, layout })
    }

    /// Latent-design merge followed by unmerge, skipping the transformer.
    pub fn latent_round_trip(&self, merged: &Tensor) -> Result<Tensor> {
        let Some(Extension::LatentDim { merge_w, merge_b, unmerge_w, unmerge_b }) = &self.extension else {
            return Err(Error::Config("model does not use the latent-dimension design".into()));
        };
        let mut g = Graph::new();
        let x = g.constant(merged.clone());
        let h = self.linear(&mut g, x, *merge_w, *merge_b)?;
        let y = self.linear(&mut g, h, *unmerge_w, *unmerge_b)?;
        Ok(g.value(y).clone())
    }

    /// Replaces parameter values by name; used by checkpoint loading.
    pub(crate) fn load_values(&mut self, values: Vec<(String, Tensor, bool)>) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, tensor, trainable) in values {
            let id = self
                .store
                .lookup(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter `{name}` is unknown")))?;
            if self.store.tensor(id).shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.store.tensor(id).shape()
                )));
            }
            let p = self.store.get_mut(id);
            p.tensor = tensor;
            p.trainable = trainable;
            p.grad = None;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (_, p) = self.store.iter().nth(i).expect("index in range");
            return Err(Error::Config(format!("checkpoint is missing parameter `{}`", p.name)));
        }
        Ok(())
    }
}

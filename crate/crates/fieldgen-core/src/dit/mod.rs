//! The diffusion transformer backbone.
//!
//! Latents are tokenized over a fixed g x g patch grid. Each block applies,
//! with pre-normalization and residuals: multi-scale neighborhood
//! self-attention (shared Q/K/V across scales, per-head additive spatial
//! bias on the logits, concat + learned fusion over scales), cross-attention
//! from patch tokens onto the three boundary-condition tokens, and a 2-layer
//! MLP. The spatial bias and the final output head are zero-initialized, so
//! a fresh model predicts exactly zero noise and its self-attention reduces
//! to the unbiased form.

mod geometry;

pub use geometry::{
    neighborhood_masks, pairwise_geometry, NeighborhoodMasks, PatchGeometry, MASKED_LOGIT,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{kaiming_uniform, Binding, Conv2d, Linear, NormParams, ParamId, ParamStore};
use crate::tensor::{NodeId, Result, Scalar, Tape, Tensor, TensorError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    /// Patch grid side g; g^2 tokens.
    pub grid_side: usize,
    /// Token dimension.
    pub dim: usize,
    /// Transformer depth.
    pub depth: usize,
    pub heads: usize,
    /// Neighborhood attention scales (Chebyshev radii).
    pub scales: Vec<usize>,
    pub latent_channels: usize,
    /// Latent spatial side; must divide by `grid_side`.
    pub latent_side: usize,
    /// Base width of the condition-stream encoders.
    pub cond_width: usize,
    pub mlp_ratio: usize,
}

impl DitConfig {
    pub fn desk() -> Self {
        Self {
            grid_side: 8,
            dim: 128,
            depth: 4,
            heads: 4,
            scales: vec![1, 2, 4],
            latent_channels: 64,
            latent_side: 8,
            cond_width: 32,
            mlp_ratio: 4,
        }
    }

    pub fn paper() -> Self {
        Self {
            grid_side: 8,
            dim: 1024,
            depth: 12,
            heads: 16,
            scales: vec![1, 2, 4],
            latent_channels: 1024,
            latent_side: 32,
            cond_width: 64,
            mlp_ratio: 4,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn patch_size(&self) -> usize {
        self.latent_side / self.grid_side
    }

    pub fn token_in_dim(&self) -> usize {
        self.latent_channels * self.patch_size() * self.patch_size()
    }

    /// Patch-condition-layer triples coupled by cross-attention in one
    /// forward pass.
    pub fn injection_points(&self) -> usize {
        self.tokens() * 3 * self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::Parameter(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(TensorError::Parameter("dim must be even".into()));
        }
        if !self.latent_side.is_multiple_of(self.grid_side) {
            return Err(TensorError::Parameter(format!(
                "latent side {} not divisible by grid side {}",
                self.latent_side, self.grid_side
            )));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(TensorError::Parameter("scales must be positive".into()));
        }
        if self.depth == 0 || self.grid_side < 2 {
            return Err(TensorError::Parameter("depth and grid side too small".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion timestep (pre-projection): first half
/// sine, second half cosine over log-spaced frequencies. t = 0 gives all
/// sines 0 and cosines 1.
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "timestep embedding needs even dim");
    let half = dim / 2;
    let mut data = vec![S::ZERO; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000.0f64).ln() * exponent).exp();
        let angle = t as f64 * freq;
        data[i] = S::from_f64(angle.sin());
        data[half + i] = S::from_f64(angle.cos());
    }
    Tensor::from_vec(&[1, dim], data).expect("timestep embedding shape")
}

/// Learned spatial-relationship bias: distance MLP, direction MLP, and a
/// bucketed relative-position table, fused down to one logit per head. The
/// final projection starts at zero so an untrained model is bias-free.
struct SpatialBiasNet {
    mlp_d1: Linear,
    mlp_d2: Linear,
    mlp_u1: Linear,
    mlp_u2: Linear,
    e_r: ParamId,
    fuse1: Linear,
    fuse2: Linear,
}

const BIAS_FEAT: usize = 16;
const BIAS_HIDDEN: usize = 32;

impl SpatialBiasNet {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, n_buckets: usize, heads: usize) -> Self {
        let f = BIAS_FEAT;
        Self {
            mlp_d1: Linear::init(store, rng, "dit.bias.mlp_d1", 1, f),
            mlp_d2: Linear::init(store, rng, "dit.bias.mlp_d2", f, f),
            mlp_u1: Linear::init(store, rng, "dit.bias.mlp_u1", 2, f),
            mlp_u2: Linear::init(store, rng, "dit.bias.mlp_u2", f, f),
            e_r: store.register(
                "dit.bias.e_r",
                kaiming_uniform(rng, &[n_buckets, f], f),
            ),
            fuse1: Linear::init(store, rng, "dit.bias.fuse1", 3 * f, BIAS_HIDDEN),
            fuse2: Linear::init_zero(store, "dit.bias.fuse2", BIAS_HIDDEN, heads),
        }
    }

    /// Per-head additive logit bias, each `[g^2, g^2]`.
    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        geo: &PatchGeometry,
        heads: usize,
    ) -> Result<Vec<NodeId>> {
        let n = geo.grid * geo.grid;
        let pairs = n * n;
        let dist = tape.constant(Tensor::from_vec(
            &[pairs, 1],
            geo.dist.iter().map(|&d| S::from_f64(d)).collect(),
        )?);
        let dir = tape.constant(Tensor::from_vec(
            &[pairs, 2],
            geo.dir.iter().map(|&d| S::from_f64(d)).collect(),
        )?);
        let hd = self.mlp_d1.forward(tape, bind, dist)?;
        let hd = tape.silu(hd)?;
        let hd = self.mlp_d2.forward(tape, bind, hd)?;
        let hu = self.mlp_u1.forward(tape, bind, dir)?;
        let hu = tape.silu(hu)?;
        let hu = self.mlp_u2.forward(tape, bind, hu)?;
        let er = tape.embedding_rows(bind.node(self.e_r), &geo.buckets)?;
        let cat = tape.concat_lastdim(&[hd, hu, er])?;
        let fused = self.fuse1.forward(tape, bind, cat)?;
        let fused = tape.silu(fused)?;
        let out = self.fuse2.forward(tape, bind, fused)?; // [pairs, heads]
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let col = tape.slice_lastdim(out, h, 1)?;
            per_head.push(tape.reshape(col, &[n, n])?);
        }
        Ok(per_head)
    }
}

/// Per-stream convolutional encoder: fixed coordinate channels are appended
/// to the 3-channel stream (global pooling of translation-equivariant
/// features is otherwise blind to where the boundary content sits), then
/// three downsampling stages, global average pooling, and a projection to
/// the token dimension.
struct StreamEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl StreamEncoder {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, dim: usize) -> Self {
        let widths = [width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        let mut cin = 3 + 2; // stream channels plus x/y coordinate maps
        for (i, &cout) in widths.iter().enumerate() {
            convs.push(Conv2d::init(store, rng, &format!("{name}.conv{i}"), cin, cout, 3, 1, 1));
            cin = cout;
        }
        let proj = Linear::init(store, rng, &format!("{name}.proj"), cin, dim);
        Self { convs, proj }
    }

    fn coordinate_maps<S: Scalar>(h: usize, w: usize) -> Tensor<S> {
        let mut data = vec![S::ZERO; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = S::from_f64(x as f64 / (w - 1).max(1) as f64);
                data[h * w + y * w + x] = S::from_f64(y as f64 / (h - 1).max(1) as f64);
            }
        }
        Tensor::from_vec(&[2, h, w], data).expect("coordinate maps")
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.shape(x).to_vec();
        let coords = tape.constant(Self::coordinate_maps::<S>(shape[1], shape[2]));
        let mut h = tape.concat_channels(&[x, coords])?;
        for conv in &self.convs {
            h = conv.forward(tape, bind, h)?;
            h = tape.silu(h)?;
            h = tape.avg_pool2(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let row = tape.reshape(pooled, &[1, tape.shape(pooled)[0]])?;
        self.proj.forward(tape, bind, row)
    }
}

/// Scaled dot-product multi-head attention over already-projected Q/K/V,
/// with optional additive logit mask (shared by all heads) and optional
/// per-head additive bias. Heads are concatenated; no output projection.
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<NodeId>,
    bias_heads: Option<&[NodeId]>,
) -> Result<NodeId> {
    let d = tape.shape(q)[1];
    if !d.is_multiple_of(heads) {
        return Err(TensorError::Dimension(format!(
            "attend: dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_lastdim(q, h * dh, dh)?;
        let kh = tape.slice_lastdim(k, h * dh, dh)?;
        let vh = tape.slice_lastdim(v, h * dh, dh)?;
        let kt = tape.transpose2d(kh)?;
        let mut logits = tape.matmul(qh, kt)?;
        logits = tape.scale(logits, inv_sqrt)?;
        if let Some(bias) = bias_heads {
            logits = tape.add(logits, bias[h])?;
        }
        if let Some(mask) = mask {
            logits = tape.add(logits, mask)?;
        }
        let attn = tape.softmax_lastdim(logits)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat_lastdim(&head_outs)
}

struct DitBlock {
    ln1: NormParams,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    fuse: Linear,
    ln2: NormParams,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ln3: NormParams,
    mlp1: Linear,
    mlp2: Linear,
}

impl DitBlock {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &DitConfig) -> Self {
        let d = cfg.dim;
        let n_scales = cfg.scales.len();
        Self {
            ln1: NormParams::init(store, &format!("{name}.ln1"), d),
            wq: Linear::init(store, rng, &format!("{name}.sa.wq"), d, d),
            wk: Linear::init(store, rng, &format!("{name}.sa.wk"), d, d),
            wv: Linear::init(store, rng, &format!("{name}.sa.wv"), d, d),
            fuse: Linear::init(store, rng, &format!("{name}.sa.fuse"), n_scales * d, d),
            ln2: NormParams::init(store, &format!("{name}.ln2"), d),
            cq: Linear::init(store, rng, &format!("{name}.ca.wq"), d, d),
            ck: Linear::init(store, rng, &format!("{name}.ca.wk"), d, d),
            cv: Linear::init(store, rng, &format!("{name}.ca.wv"), d, d),
            co: Linear::init(store, rng, &format!("{name}.ca.wo"), d, d),
            ln3: NormParams::init(store, &format!("{name}.ln3"), d),
            mlp1: Linear::init(store, rng, &format!("{name}.mlp1"), d, cfg.mlp_ratio * d),
            mlp2: Linear::init(store, rng, &format!("{name}.mlp2"), cfg.mlp_ratio * d, d),
        }
    }
}

/// Counters from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardAudit {
    pub cross_attention_calls: usize,
    /// Sum of patches x condition tokens over all cross-attention calls.
    pub injection_points: usize,
}

pub struct Dit {
    pub cfg: DitConfig,
    pub geometry: PatchGeometry,
    pub masks: NeighborhoodMasks,
    patch_proj: Linear,
    t_proj1: Linear,
    t_proj2: Linear,
    bias_net: SpatialBiasNet,
    blocks: Vec<DitBlock>,
    ln_f: NormParams,
    head: Linear,
    null_tokens: ParamId,
    streams: Vec<StreamEncoder>,
}

impl Dit {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let geometry = pairwise_geometry(cfg.grid_side);
        let masks = neighborhood_masks(cfg.grid_side, &cfg.scales);
        let d = cfg.dim;
        let patch_proj = Linear::init(store, rng, "dit.patch_proj", cfg.token_in_dim(), d);
        let t_proj1 = Linear::init(store, rng, "dit.t_proj1", d, d);
        let t_proj2 = Linear::init(store, rng, "dit.t_proj2", d, d);
        let bias_net = SpatialBiasNet::init(store, rng, geometry.n_buckets, cfg.heads);
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::init(store, rng, &format!("dit.block{i}"), &cfg))
            .collect();
        let ln_f = NormParams::init(store, "dit.ln_f", d);
        let head = Linear::init_zero(store, "dit.head", d, cfg.token_in_dim());
        let null_tokens = store.register("dit.null_tokens", kaiming_uniform(rng, &[3, d], d));
        let streams = ["sketch", "edge", "spatial"]
            .iter()
            .map(|s| StreamEncoder::init(store, rng, &format!("dit.cond.{s}"), cfg.cond_width, d))
            .collect();
        Ok(Self {
            cfg,
            geometry,
            masks,
            patch_proj,
            t_proj1,
            t_proj2,
            bias_net,
            blocks,
            ln_f,
            head,
            null_tokens,
            streams,
        })
    }

    /// Encode the 9-channel condition tensor into 3 boundary tokens `[3, d]`
    /// (sketch, edge, spatial reference - fixed order, independent encoders).
    pub fn encode_condition_tokens<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        cond: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.shape(cond).to_vec();
        if shape.len() != 3 || shape[0] != 9 {
            return Err(TensorError::Dimension(format!(
                "condition tokens: input {shape:?}, expected [9, H, W]"
            )));
        }
        let mut rows = Vec::with_capacity(3);
        for (s, enc) in self.streams.iter().enumerate() {
            let stream = tape.slice_channels(cond, 3 * s, 3)?;
            rows.push(enc.forward(tape, bind, stream)?);
        }
        tape.concat_rows(&rows)
    }

    /// The learned null tokens used for the unconditional branch.
    pub fn null_condition_tokens<S: Scalar>(&self, tape: &Tape<S>, bind: &Binding) -> NodeId {
        let _ = tape;
        bind.node(self.null_tokens)
    }

    /// Self-attention Q/K/V projections of one block, for equivalence
    /// audits against reference attention implementations.
    pub fn block_qkv<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        block_idx: usize,
        x: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let block = &self.blocks[block_idx];
        let q = block.wq.forward(tape, bind, x)?;
        let k = block.wk.forward(tape, bind, x)?;
        let v = block.wv.forward(tape, bind, x)?;
        Ok((q, k, v))
    }

    /// Per-head spatial-bias logit matrices under the current parameters.
    pub fn spatial_bias_nodes<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
    ) -> Result<Vec<NodeId>> {
        self.bias_net.forward(tape, bind, &self.geometry, self.cfg.heads)
    }

    fn multiscale_attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        block: &DitBlock,
        x: NodeId,
        mask_nodes: &[NodeId],
        bias_heads: &[NodeId],
    ) -> Result<NodeId> {
        // One set of Q/K/V projections shared by every scale.
        let q = block.wq.forward(tape, bind, x)?;
        let k = block.wk.forward(tape, bind, x)?;
        let v = block.wv.forward(tape, bind, x)?;
        let mut scale_outs = Vec::with_capacity(mask_nodes.len());
        for &mask in mask_nodes {
            scale_outs.push(attend(tape, q, k, v, self.cfg.heads, Some(mask), Some(bias_heads))?);
        }
        let cat = tape.concat_lastdim(&scale_outs)?;
        block.fuse.forward(tape, bind, cat)
    }

    fn cross_attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        block: &DitBlock,
        x: NodeId,
        cond_tokens: NodeId,
    ) -> Result<NodeId> {
        let q = block.cq.forward(tape, bind, x)?;
        let k = block.ck.forward(tape, bind, cond_tokens)?;
        let v = block.cv.forward(tape, bind, cond_tokens)?;
        let cat = attend(tape, q, k, v, self.cfg.heads, None, None)?;
        block.co.forward(tape, bind, cat)
    }

    /// Predict the noise in `z_t` given the timestep and condition tokens.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        z_t: NodeId,
        t: usize,
        cond_tokens: NodeId,
    ) -> Result<(NodeId, ForwardAudit)> {
        let cfg = &self.cfg;
        let shape = tape.shape(z_t).to_vec();
        if shape != [cfg.latent_channels, cfg.latent_side, cfg.latent_side] {
            return Err(TensorError::Dimension(format!(
                "dit forward: latent {shape:?}, expected [{}, {}, {}]",
                cfg.latent_channels, cfg.latent_side, cfg.latent_side
            )));
        }
        if tape.shape(cond_tokens) != [3, cfg.dim] {
            return Err(TensorError::Dimension(format!(
                "dit forward: condition tokens {:?}, expected [3, {}]",
                tape.shape(cond_tokens),
                cfg.dim
            )));
        }

        let tokens = tape.patchify(z_t, cfg.grid_side)?;
        let mut x = self.patch_proj.forward(tape, bind, tokens)?;

        let temb = tape.constant(timestep_embedding::<S>(t, cfg.dim));
        let temb = self.t_proj1.forward(tape, bind, temb)?;
        let temb = tape.silu(temb)?;
        let temb = self.t_proj2.forward(tape, bind, temb)?;
        let temb_vec = tape.reshape(temb, &[cfg.dim])?;
        x = tape.add_bias_lastdim(x, temb_vec)?;

        let mask_nodes: Vec<NodeId> = (0..cfg.scales.len())
            .map(|s| tape.constant(self.masks.additive::<S>(s)))
            .collect();
        let bias_heads = self.bias_net.forward(tape, bind, &self.geometry, cfg.heads)?;

        let mut audit = ForwardAudit::default();
        for block in &self.blocks {
            let h = block.ln1.forward(tape, bind, x)?;
            let sa = self.multiscale_attention(tape, bind, block, h, &mask_nodes, &bias_heads)?;
            x = tape.add(x, sa)?;

            let h = block.ln2.forward(tape, bind, x)?;
            let ca = self.cross_attention(tape, bind, block, h, cond_tokens)?;
            x = tape.add(x, ca)?;
            audit.cross_attention_calls += 1;
            audit.injection_points += cfg.tokens() * 3;

            let h = block.ln3.forward(tape, bind, x)?;
            let m = block.mlp1.forward(tape, bind, h)?;
            let m = tape.gelu(m)?;
            let m = block.mlp2.forward(tape, bind, m)?;
            x = tape.add(x, m)?;
        }

        let x = self.ln_f.forward(tape, bind, x)?;
        let out_tokens = self.head.forward(tape, bind, x)?;
        let eps_hat = tape.unpatchify(
            out_tokens,
            cfg.latent_channels,
            cfg.grid_side,
            cfg.patch_size(),
        )?;
        Ok((eps_hat, audit))
    }
}

//! Denoising enhancement path: forward-noising schedule, timestep and
//! context conditioning, patch-token transformer blocks with adaptive
//! layer-norm modulation, and the zero-initialized noise-prediction head.
//!
//! Frames are tokenized independently (the `B*T` frames of a clip form the
//! token-group batch); temporal mixing is the sequence path's job.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{linear_last, repeat_rows};
use crate::params::{fan_in_init, Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Attention heads per block. The token dimension must be divisible by this.
pub const NUM_HEADS: usize = 4;
/// Feedforward expansion factor inside each block.
const MLP_RATIO: usize = 4;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Linear forward-noising schedule.
///
/// `alpha_bars` has `t_diff + 1` entries with the convention
/// `alpha_bar(0) = 1` (no noise); `betas[i]` is the step `t = i + 1` value.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_diff: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Default linear-β endpoints for a given step count.
///
/// The classic `[1e-4, 0.02]` endpoints destroy the signal only over ~1000
/// steps; shorter schedules keep too much terminal signal. Scaling both
/// endpoints by `1000 / t_diff` (capped below 1) preserves the terminal
/// signal-to-noise behaviour at any desk-scale step count.
pub fn default_beta_range(t_diff: usize) -> (f64, f64) {
    assert!(t_diff >= 1, "schedule needs at least one step");
    let k = 1000.0 / t_diff as f64;
    let beta_start = (1e-4 * k).min(0.05);
    let beta_end = (0.02 * k).min(0.6);
    (beta_start, beta_end)
}

impl NoiseSchedule {
    pub fn t_diff(&self) -> usize {
        self.t_diff
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_diff).contains(&t), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// Cumulative signal fraction at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_diff, "alpha_bar index {t} out of range");
        self.alpha_bars[t]
    }
}

/// Builds a linear schedule from `beta_start` at `t = 1` to `beta_end` at
/// `t = t_diff`. Requires `0 < beta_start < beta_end < 1` and `t_diff >= 1`;
/// logs a warning when the terminal signal fraction stays at or above 0.05
/// (the schedule then barely destroys the signal, which defeats training).
pub fn build_noise_schedule(
    t_diff: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_diff < 1 {
        return Err(Error::config("noise schedule needs t_diff >= 1"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "noise schedule endpoints must satisfy 0 < beta_start < beta_end < 1 \
             (got beta_start={beta_start}, beta_end={beta_end})"
        )));
    }
    let denom = (t_diff - 1).max(1) as f64;
    let betas: Vec<f64> = (0..t_diff)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_diff + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0;
    for beta in &betas {
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    if alpha_bars[t_diff] >= 0.05 {
        log::warn!(
            "noise schedule keeps {:.3} of the signal at the final step; \
             expected < 0.05 — consider a larger beta range or more steps",
            alpha_bars[t_diff]
        );
    }
    Ok(NoiseSchedule { t_diff, betas, alpha_bars })
}

/// Forward-noising: per batch element `b`,
/// `out[b] = sqrt(alpha_bar(t[b])) * x[b] + sqrt(1 - alpha_bar(t[b])) * eps[b]`.
///
/// `t[b] = 0` copies the frames bit-for-bit (no arithmetic applied).
/// Plain tensor math — the result enters a tape as a constant; gradients
/// never flow through the noising itself.
pub fn add_noise<T: Element>(
    x: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::input(format!(
            "noise tensor shape {:?} must match input shape {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let batch = *x.shape().first().unwrap_or(&0);
    if t.len() != batch {
        return Err(Error::input(format!(
            "got {} timesteps for a batch of {batch}",
            t.len()
        )));
    }
    let per = x.numel() / batch.max(1);
    let mut out = vec![T::zero(); x.numel()];
    for (b, &tb) in t.iter().enumerate() {
        if tb > schedule.t_diff() {
            return Err(Error::input(format!(
                "timestep {tb} out of range 0..={}",
                schedule.t_diff()
            )));
        }
        let dst = &mut out[b * per..][..per];
        let src = &x.data()[b * per..][..per];
        if tb == 0 {
            dst.copy_from_slice(src);
            continue;
        }
        let ab = schedule.alpha_bar(tb);
        let signal = T::from_f64(ab.sqrt());
        let noise = T::from_f64((1.0 - ab).sqrt());
        let eb = &eps.data()[b * per..][..per];
        for i in 0..per {
            dst[i] = signal * src[i] + noise * eb[i];
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// Sinusoidal timestep features: for each `t`, `d_c/2` sine values at
/// geometrically spaced frequencies followed by the matching cosines, so
/// `t = 0` maps to `[0, .., 0, 1, .., 1]`.
pub fn timestep_features<T: Element>(t: &[usize], d_c: usize) -> Tensor<T> {
    assert!(d_c >= 2 && d_c % 2 == 0, "embedding dim must be even and >= 2");
    let half = d_c / 2;
    let mut data = vec![T::zero(); t.len() * d_c];
    for (b, &tb) in t.iter().enumerate() {
        for i in 0..half {
            let omega = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
            let angle = tb as f64 * omega;
            data[b * d_c + i] = T::from_f64(angle.sin());
            data[b * d_c + half + i] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![t.len(), d_c], data)
}

/// Two-layer MLP over timestep features.
#[derive(Debug, Clone)]
pub struct TimeEmbedParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TimeEmbedTensors {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl TimeEmbedParams {
    pub fn register(store: &mut ParamStore, d_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let w1 = store.register("dit.time_w1", fan_in_init(rng, &[d_c, d_c], d_c));
        let b1 = store.register("dit.time_b1", Tensor::zeros(&[d_c]));
        let w2 = store.register("dit.time_w2", fan_in_init(rng, &[d_c, d_c], d_c));
        let b2 = store.register("dit.time_b2", Tensor::zeros(&[d_c]));
        Self { w1, b1, w2, b2 }
    }

    pub fn resolve(&self, bound: &Bound) -> TimeEmbedTensors {
        TimeEmbedTensors {
            w1: bound.tensor(self.w1),
            b1: bound.tensor(self.b1),
            w2: bound.tensor(self.w2),
            b2: bound.tensor(self.b2),
        }
    }
}

/// Embeds per-batch timesteps: sinusoidal features -> dense -> SiLU -> dense.
pub fn embed_timesteps<T: Element>(
    tape: &mut Tape<T>,
    p: &TimeEmbedTensors,
    t: &[usize],
    d_c: usize,
) -> TensorId {
    let feats = timestep_features::<T>(t, d_c);
    let feats = tape.constant(&feats);
    let h = tape.linear(feats, p.w1, Some(p.b1));
    let h = tape.silu(h);
    tape.linear(h, p.w2, Some(p.b2))
}

/// Projects the final sequence-path latents into the conditioning space:
/// mean over time, then a dense layer.
pub fn make_context<T: Element>(
    tape: &mut Tape<T>,
    ctx_w: TensorId,
    ctx_b: TensorId,
    z_last: TensorId,
) -> TensorId {
    let shape = tape.shape(z_last).to_vec();
    assert_eq!(shape.len(), 3, "make_context: latents must be [B, T, D]");
    let pooled = tape.mean_axis(z_last, 1);
    tape.linear(pooled, ctx_w, Some(ctx_b))
}

// ---------------------------------------------------------------------------
// Transformer blocks with adaptive layer-norm modulation
// ---------------------------------------------------------------------------

/// One token-transformer block: attention and feedforward sub-layers, each
/// entered through layer-norm + conditioned affine modulation and gated
/// before its residual add. The modulation projection is zero-initialized,
/// making the whole block the identity map at init.
#[derive(Debug, Clone)]
pub struct DitBlockParams {
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub ada_w: ParamId,
    pub ada_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DitBlockTensors {
    pub qkv_w: TensorId,
    pub qkv_b: TensorId,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
    pub ada_w: TensorId,
    pub ada_b: TensorId,
}

impl DitBlockParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_tok: usize,
        d_c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = MLP_RATIO * d_tok;
        let qkv_w = store.register(
            format!("{prefix}.qkv_w"),
            fan_in_init(rng, &[d_tok, 3 * d_tok], d_tok),
        );
        let qkv_b = store.register(format!("{prefix}.qkv_b"), Tensor::zeros(&[3 * d_tok]));
        let proj_w = store.register(
            format!("{prefix}.proj_w"),
            fan_in_init(rng, &[d_tok, d_tok], d_tok),
        );
        let proj_b = store.register(format!("{prefix}.proj_b"), Tensor::zeros(&[d_tok]));
        let mlp_w1 = store.register(
            format!("{prefix}.mlp_w1"),
            fan_in_init(rng, &[d_tok, hidden], d_tok),
        );
        let mlp_b1 = store.register(format!("{prefix}.mlp_b1"), Tensor::zeros(&[hidden]));
        let mlp_w2 = store.register(
            format!("{prefix}.mlp_w2"),
            fan_in_init(rng, &[hidden, d_tok], hidden),
        );
        let mlp_b2 = store.register(format!("{prefix}.mlp_b2"), Tensor::zeros(&[d_tok]));
        // Zero-initialized modulation: scales, shifts, and gates all start
        // at zero, so every block starts as the identity.
        let ada_w = store.register(format!("{prefix}.ada_w"), Tensor::zeros(&[d_c, 6 * d_tok]));
        let ada_b = store.register(format!("{prefix}.ada_b"), Tensor::zeros(&[6 * d_tok]));
        Self { qkv_w, qkv_b, proj_w, proj_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2, ada_w, ada_b }
    }

    pub fn resolve(&self, bound: &Bound) -> DitBlockTensors {
        DitBlockTensors {
            qkv_w: bound.tensor(self.qkv_w),
            qkv_b: bound.tensor(self.qkv_b),
            proj_w: bound.tensor(self.proj_w),
            proj_b: bound.tensor(self.proj_b),
            mlp_w1: bound.tensor(self.mlp_w1),
            mlp_b1: bound.tensor(self.mlp_b1),
            mlp_w2: bound.tensor(self.mlp_w2),
            mlp_b2: bound.tensor(self.mlp_b2),
            ada_w: bound.tensor(self.ada_w),
            ada_b: bound.tensor(self.ada_b),
        }
    }
}

/// Layer-norm over the token dimension with constant (1, 0) affine — the
/// learnable modulation happens outside via scale/shift from the condition.
fn plain_layer_norm<T: Element>(tape: &mut Tape<T>, x: TensorId) -> TensorId {
    let d = *tape.shape(x).last().expect("layer-norm input has rank >= 1");
    let gamma = tape.constant(&Tensor::full(&[d], T::one()));
    let beta = tape.constant(&Tensor::zeros(&[d]));
    tape.layer_norm(x, gamma, beta)
}

/// Applies `(1 + scale) * x + shift` with per-group scale/shift broadcast
/// over tokens. `x: [G, P, d]`, `scale`/`shift`: `[G, d]`.
fn modulate<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    shift: TensorId,
    scale: TensorId,
) -> TensorId {
    let p = tape.shape(x)[1];
    let scale1 = tape.add_scalar(scale, 1.0);
    let scale1 = repeat_rows(tape, scale1, p);
    let shift_b = repeat_rows(tape, shift, p);
    let scaled = tape.mul(x, scale1);
    tape.add(scaled, shift_b)
}

/// Multi-head self-attention over `[G, P, d]` tokens.
pub fn multi_head_attention<T: Element>(
    tape: &mut Tape<T>,
    p: &DitBlockTensors,
    tokens: TensorId,
    n_heads: usize,
) -> TensorId {
    let shape = tape.shape(tokens).to_vec();
    assert_eq!(shape.len(), 3, "attention input must be [G, P, d]");
    let (g, pn, d) = (shape[0], shape[1], shape[2]);
    assert!(
        d % n_heads == 0,
        "token dim {d} must be divisible by {n_heads} heads"
    );
    let dh = d / n_heads;

    let qkv = linear_last(tape, tokens, p.qkv_w, Some(p.qkv_b)); // [G, P, 3d]
    let split_heads = |tape: &mut Tape<T>, x: TensorId| -> TensorId {
        let x = tape.reshape(x, &[g, pn, n_heads, dh]);
        let x = tape.transpose(x, 1, 2); // [G, H, P, dh]
        tape.reshape(x, &[g * n_heads, pn, dh])
    };
    let q = tape.slice(qkv, 2, 0, d);
    let q = split_heads(tape, q);
    let k = tape.slice(qkv, 2, d, d);
    let k = split_heads(tape, k);
    let v = tape.slice(qkv, 2, 2 * d, d);
    let v = split_heads(tape, v);

    let kt = tape.transpose(k, 1, 2); // [G*H, dh, P]
    let scores = tape.bmm(q, kt);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores); // rows sum to 1 over keys
    let ctx = tape.bmm(attn, v); // [G*H, P, dh]

    let ctx = tape.reshape(ctx, &[g, n_heads, pn, dh]);
    let ctx = tape.transpose(ctx, 1, 2); // [G, P, H, dh]
    let ctx = tape.reshape(ctx, &[g, pn, d]);
    linear_last(tape, ctx, p.proj_w, Some(p.proj_b))
}

/// One conditioned transformer block over `[G, P, d]` tokens with a per-group
/// condition `c: [G, d_c]`.
pub fn dit_block<T: Element>(
    tape: &mut Tape<T>,
    p: &DitBlockTensors,
    tokens: TensorId,
    c: TensorId,
    n_heads: usize,
) -> TensorId {
    let d = *tape.shape(tokens).last().unwrap();
    let pn = tape.shape(tokens)[1];

    let ada_in = tape.silu(c);
    let mods = tape.linear(ada_in, p.ada_w, Some(p.ada_b)); // [G, 6d]
    let scale1 = tape.slice(mods, 1, 0, d);
    let shift1 = tape.slice(mods, 1, d, d);
    let gate1 = tape.slice(mods, 1, 2 * d, d);
    let scale2 = tape.slice(mods, 1, 3 * d, d);
    let shift2 = tape.slice(mods, 1, 4 * d, d);
    let gate2 = tape.slice(mods, 1, 5 * d, d);

    let normed = plain_layer_norm(tape, tokens);
    let modulated = modulate(tape, normed, shift1, scale1);
    let attn_out = multi_head_attention(tape, p, modulated, n_heads);
    let g1 = repeat_rows(tape, gate1, pn);
    let gated_attn = tape.mul(attn_out, g1);
    let tokens = tape.add(tokens, gated_attn);

    let normed2 = plain_layer_norm(tape, tokens);
    let modulated2 = modulate(tape, normed2, shift2, scale2);
    let hidden = linear_last(tape, modulated2, p.mlp_w1, Some(p.mlp_b1));
    let hidden = tape.silu(hidden);
    let mlp_out = linear_last(tape, hidden, p.mlp_w2, Some(p.mlp_b2));
    let g2 = repeat_rows(tape, gate2, pn);
    let gated_mlp = tape.mul(mlp_out, g2);
    tape.add(tokens, gated_mlp)
}

// ---------------------------------------------------------------------------
// Full denoiser
// ---------------------------------------------------------------------------

/// All parameters of the denoising path.
#[derive(Debug, Clone)]
pub struct DitParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub time: TimeEmbedParams,
    pub ctx_w: ParamId,
    pub ctx_b: ParamId,
    pub blocks: Vec<DitBlockParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DitTensors {
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub pos: TensorId,
    pub time: TimeEmbedTensors,
    pub ctx_w: TensorId,
    pub ctx_b: TensorId,
    pub blocks: Vec<DitBlockTensors>,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl DitParams {
    /// Registers the full denoiser. `d_latent` is the sequence-path latent
    /// width feeding the context projection; `d_c` doubles as the token
    /// dimension. The prediction head is zero-initialized so a fresh model
    /// predicts exactly zero noise.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        d_c: usize,
        d_latent: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            height % patch == 0 && width % patch == 0,
            "patch size {patch} must divide frame dims {height}x{width}"
        );
        let patch_dim = channels * patch * patch;
        let n_tokens = (height / patch) * (width / patch);

        let patch_w = store.register(
            "dit.patch_w",
            fan_in_init(rng, &[patch_dim, d_c], patch_dim),
        );
        let patch_b = store.register("dit.patch_b", Tensor::zeros(&[d_c]));
        let pos_data: Vec<f32> = {
            use rand_distr::{Distribution, StandardNormal};
            (0..n_tokens * d_c)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    (0.02 * v) as f32
                })
                .collect()
        };
        let pos = store.register("dit.pos", Tensor::new(vec![n_tokens, d_c], pos_data));
        let time = TimeEmbedParams::register(store, d_c, rng);
        let ctx_w = store.register("dit.ctx_w", fan_in_init(rng, &[d_latent, d_c], d_latent));
        let ctx_b = store.register("dit.ctx_b", Tensor::zeros(&[d_c]));
        let blocks = (0..n_blocks)
            .map(|i| DitBlockParams::register(store, &format!("dit.block{i}"), d_c, d_c, rng))
            .collect();
        let head_w = store.register("dit.head_w", Tensor::zeros(&[d_c, patch_dim]));
        let head_b = store.register("dit.head_b", Tensor::zeros(&[patch_dim]));
        Self { patch_w, patch_b, pos, time, ctx_w, ctx_b, blocks, head_w, head_b }
    }

    pub fn resolve(&self, bound: &Bound) -> DitTensors {
        DitTensors {
            patch_w: bound.tensor(self.patch_w),
            patch_b: bound.tensor(self.patch_b),
            pos: bound.tensor(self.pos),
            time: self.time.resolve(bound),
            ctx_w: bound.tensor(self.ctx_w),
            ctx_b: bound.tensor(self.ctx_b),
            blocks: self.blocks.iter().map(|b| b.resolve(bound)).collect(),
            head_w: bound.tensor(self.head_w),
            head_b: bound.tensor(self.head_b),
        }
    }
}

/// Predicts the noise content of `x: [B, T, C, H, W]` under condition
/// `c: [B, d_c]` (timestep embedding plus context, already fused).
///
/// Pipeline: patchify each frame, embed patches, add learned position
/// embeddings, run the conditioned blocks, final layer-norm, linear head,
/// unpatchify back to the input shape.
pub fn predict_noise<T: Element>(
    tape: &mut Tape<T>,
    p: &DitTensors,
    x: TensorId,
    c: TensorId,
    patch: usize,
) -> TensorId {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 5, "predict_noise: input must be [B, T, C, H, W]");
    let (b, t, ch, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let n_tokens = (h / patch) * (w / patch);
    let d_c = tape.shape(c)[1];

    let frames = tape.reshape(x, &[b * t, ch, h, w]);
    let tok = tape.patchify(frames, patch); // [B*T, P, C*p*p]
    let tok = linear_last(tape, tok, p.patch_w, Some(p.patch_b)); // [B*T, P, d]
    let pos = tape.reshape(p.pos, &[1, n_tokens, d_c]);
    let pos = tape.expand(pos, 0, b * t);
    let mut tok = tape.add(tok, pos);

    // Every frame of sample `b` shares that sample's condition row.
    let c_bt = repeat_rows(tape, c, t); // [B, T, d_c]
    let c_bt = tape.reshape(c_bt, &[b * t, d_c]);

    for block in &p.blocks {
        tok = dit_block(tape, block, tok, c_bt, NUM_HEADS);
    }
    let tok = plain_layer_norm(tape, tok);
    let out = linear_last(tape, tok, p.head_w, Some(p.head_b)); // [B*T, P, C*p*p]
    let frames_out = tape.unpatchify(out, patch, ch, h, w);
    tape.reshape(frames_out, &[b, t, ch, h, w])
}

/// Keeps the last `t_out` frames of a `[B, T, C, H, W]` residual so it can
/// be fused with a horizon-length prediction. Errors when the horizon is
/// longer than the residual.
pub fn truncate_to_horizon<T: Element>(
    tape: &mut Tape<T>,
    dx: TensorId,
    t_out: usize,
) -> Result<TensorId> {
    let shape = tape.shape(dx).to_vec();
    assert_eq!(shape.len(), 5, "truncate_to_horizon: input must be [B, T, C, H, W]");
    let t = shape[1];
    if t_out > t {
        return Err(Error::input(format!(
            "cannot fuse: residual covers {t} frames but the horizon needs {t_out}"
        )));
    }
    if t_out == t {
        return Ok(dx);
    }
    Ok(tape.slice(dx, 1, t - t_out, t_out))
}

//! Full dual-path model: configuration, parameter assembly, and the forward
//! passes that wire the sequence path and the denoising path together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    embed_timesteps, make_context, predict_noise, truncate_to_horizon, DitParams, NUM_HEADS,
};
use crate::error::{Error, Result};
use crate::mamba::{
    mamba_block, spatial_decode, spatial_encode, DecoderParams, EncoderParams, MambaBlockParams,
    ENCODER_DOWNSAMPLE,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Architecture and loss hyper-parameters. All dimensions are in elements;
/// frame geometry is fixed per model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Latent width of the sequence path.
    pub d: usize,
    /// State count per latent channel in the scan.
    pub n: usize,
    /// Number of stacked bidirectional blocks.
    pub l_blocks: usize,
    /// Depthwise temporal kernel width (odd).
    pub k_t: usize,
    /// Residual connection around each sequence block.
    pub residual: bool,
    /// Number of conditioned transformer blocks in the denoiser.
    pub n_dit_blocks: usize,
    /// Patch edge length for tokenization.
    pub patch_size: usize,
    /// Conditioning dimension; doubles as the token dimension.
    pub d_c: usize,
    /// Total diffusion steps.
    pub t_diff: usize,
    /// Reconstruction-loss weight.
    pub lambda: f64,
    /// Frame channels.
    pub channels: usize,
    /// Frame height in pixels.
    pub height: usize,
    /// Frame width in pixels.
    pub width: usize,
    /// History length consumed by the model.
    pub t_in: usize,
    /// Horizon length produced by the model.
    pub t_out: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given frame geometry.
    pub fn desk(channels: usize, height: usize, width: usize, t_in: usize, t_out: usize) -> Self {
        ModelConfig {
            d: 64,
            n: 16,
            l_blocks: 4,
            k_t: 3,
            residual: true,
            n_dit_blocks: 4,
            patch_size: 4,
            d_c: 64,
            t_diff: 100,
            lambda: 1.0,
            channels,
            height,
            width,
            t_in,
            t_out,
        }
    }

    /// Checks every structural constraint, returning a configuration error
    /// naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::config(msg));
        if self.d == 0 || self.n == 0 || self.d_c == 0 || self.channels == 0 {
            return err("model dimensions must be positive".into());
        }
        if self.l_blocks == 0 {
            return err("need at least one sequence block".into());
        }
        if self.k_t % 2 == 0 || self.k_t == 0 {
            return err(format!(
                "temporal kernel width must be odd and positive (got {})",
                self.k_t
            ));
        }
        if self.n_dit_blocks == 0 {
            return err("need at least one denoiser block".into());
        }
        if self.height % ENCODER_DOWNSAMPLE != 0 || self.width % ENCODER_DOWNSAMPLE != 0 {
            return err(format!(
                "frame dims {}x{} must be divisible by {ENCODER_DOWNSAMPLE} \
                 (two stride-2 encoder stages)",
                self.height, self.width
            ));
        }
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return err(format!(
                "patch size {} must divide frame dims {}x{}",
                self.patch_size, self.height, self.width
            ));
        }
        if self.d_c % 2 != 0 {
            return err(format!(
                "conditioning dim {} must be even for the sinusoidal embedding",
                self.d_c
            ));
        }
        if self.d_c % NUM_HEADS != 0 {
            return err(format!(
                "conditioning dim {} must be divisible by the {NUM_HEADS} attention heads",
                self.d_c
            ));
        }
        if self.t_diff == 0 {
            return err("diffusion step count must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!(
                "reconstruction weight must be finite and non-negative (got {})",
                self.lambda
            ));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return err("history and horizon lengths must be at least 1".into());
        }
        Ok(())
    }
}

/// The assembled model: config plus every named parameter.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub blocks: Vec<MambaBlockParams>,
    pub decoder: DecoderParams,
    pub dit: DitParams,
}

impl Model {
    /// Builds and initializes a model. Parameter registration order is fixed
    /// (encoder, sequence blocks, decoder, denoiser), so a given
    /// `(config, init_seed)` pair always produces identical parameters.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, config.channels, config.d, &mut rng);
        let blocks = (0..config.l_blocks)
            .map(|i| {
                MambaBlockParams::register(
                    &mut store,
                    &format!("block{i}"),
                    config.d,
                    config.n,
                    config.k_t,
                    &mut rng,
                )
            })
            .collect();
        let decoder = DecoderParams::register(
            &mut store,
            config.d,
            config.channels,
            config.height,
            config.width,
            config.t_in,
            config.t_out,
            &mut rng,
        );
        let dit = DitParams::register(
            &mut store,
            config.channels,
            config.height,
            config.width,
            config.patch_size,
            config.d_c,
            config.d,
            config.n_dit_blocks,
            &mut rng,
        );
        Ok(Model { config, store, encoder, blocks, decoder, dit })
    }

    /// Binds every parameter onto `tape` as leaves.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    /// Sequence path: encode frames, run the block stack, decode the
    /// horizon. Returns `(prediction [B, t_out, C, H, W], final latents
    /// [B, t_in, D])` — the latents also feed the denoiser's context.
    pub fn sequence_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
    ) -> (TensorId, TensorId) {
        let enc = self.encoder.resolve(bound);
        let mut z = spatial_encode(tape, &enc, x);
        for block in &self.blocks {
            let bt = block.resolve(bound);
            z = mamba_block(tape, &bt, z, self.config.residual);
        }
        let dec = self.decoder.resolve(bound);
        let y = spatial_decode(
            tape,
            &dec,
            z,
            self.config.t_out,
            self.config.channels,
            self.config.height,
            self.config.width,
        );
        (y, z)
    }

    /// Context condition from the final sequence latents; `zeroed` replaces
    /// it with zeros (ablation switch) while keeping shapes identical.
    pub fn context<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        z_last: TensorId,
        zeroed: bool,
    ) -> TensorId {
        if zeroed {
            let batch = tape.shape(z_last)[0];
            return tape.constant(&Tensor::zeros(&[batch, self.config.d_c]));
        }
        let dit = self.dit.resolve(bound);
        make_context(tape, dit.ctx_w, dit.ctx_b, z_last)
    }

    /// Timestep condition for per-batch steps `t`.
    pub fn time_condition<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        t: &[usize],
    ) -> TensorId {
        let dit = self.dit.resolve(bound);
        embed_timesteps(tape, &dit.time, t, self.config.d_c)
    }

    /// Denoiser forward under a fused condition `c = c_time + c_context`.
    pub fn noise_prediction<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
        c: TensorId,
    ) -> TensorId {
        let dit = self.dit.resolve(bound);
        predict_noise(tape, &dit, x, c, self.config.patch_size)
    }

    /// Detail-enhancement fusion: run the denoiser on the clean input at
    /// timestep 0, keep the last `t_out` frames of the residual, and add it
    /// to the sequence-path prediction.
    pub fn enhanced_prediction<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
        y_seq: TensorId,
        c_context: TensorId,
    ) -> Result<TensorId> {
        let batch = tape.shape(x)[0];
        let c_time = self.time_condition(tape, bound, &vec![0; batch]);
        let c = tape.add(c_time, c_context);
        let dx = self.noise_prediction(tape, bound, x, c);
        let dx = truncate_to_horizon(tape, dx, self.config.t_out)?;
        if tape.shape(dx) != tape.shape(y_seq) {
            return Err(Error::input(format!(
                "cannot fuse residual of shape {:?} with prediction of shape {:?}",
                tape.shape(dx),
                tape.shape(y_seq)
            )));
        }
        Ok(tape.add(y_seq, dx))
    }
}

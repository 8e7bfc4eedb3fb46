//! Training: loss construction, the Adam optimizer, gradient clipping,
//! deterministic batching, the step/loop drivers, and binary checkpoints.
//!
//! Determinism contract: a run is fully reproducible from `(seed, step)`.
//! Every step draws its noise from a freshly seeded stream, and batch
//! composition depends only on `(seed, epoch)`, so a resumed run replays
//! the exact arithmetic of an uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, FrameSequence};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Hard ceiling on the global gradient norm applied before every update.
pub const GRAD_CLIP: f64 = 1.0;

/// Stream tag separating the per-epoch shuffle RNG from the per-step RNG.
const EPOCH_STREAM: u64 = 0x45504f4348; // "EPOCH"

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Mean squared error between two tensors of identical shape (the
/// noise-matching term). Errors on a shape mismatch.
pub fn squared_error_mean<T: Element>(
    tape: &mut Tape<T>,
    predicted: TensorId,
    actual: TensorId,
) -> Result<TensorId> {
    if tape.shape(predicted) != tape.shape(actual) {
        return Err(Error::input(format!(
            "squared-error operands must share a shape (got {:?} vs {:?})",
            tape.shape(predicted),
            tape.shape(actual)
        )));
    }
    let d = tape.sub(predicted, actual);
    let sq = tape.mul(d, d);
    Ok(tape.mean_all(sq))
}

/// Mean absolute error between two tensors of identical shape (the
/// frame-reconstruction term). Errors on a shape mismatch.
pub fn absolute_error_mean<T: Element>(
    tape: &mut Tape<T>,
    predicted: TensorId,
    actual: TensorId,
) -> Result<TensorId> {
    if tape.shape(predicted) != tape.shape(actual) {
        return Err(Error::input(format!(
            "absolute-error operands must share a shape (got {:?} vs {:?})",
            tape.shape(predicted),
            tape.shape(actual)
        )));
    }
    let d = tape.sub(predicted, actual);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Combined objective `l_diff + lambda * l_recon`. The recombination in
/// [`LossReport::decomposes_exactly`] repeats this arithmetic bit for bit.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    l_diff: TensorId,
    l_recon: TensorId,
    lambda: f64,
) -> TensorId {
    let scaled = tape.scale(l_recon, lambda);
    tape.add(l_diff, scaled)
}

/// Scalar loss values extracted from one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_diff: f32,
    pub l_recon: f32,
    pub lambda: f64,
    pub l_total: f32,
}

impl LossReport {
    /// Whether the reported total is exactly the weighted sum of the parts
    /// in f32 arithmetic, i.e. `l_total == l_diff + (lambda as f32) * l_recon`
    /// bit for bit. Holds by construction for every step this module takes.
    pub fn decomposes_exactly(&self) -> bool {
        let recombined = self.l_diff + (self.lambda as f32) * self.l_recon;
        self.l_total.to_bits() == recombined.to_bits()
    }
}

/// Ablation switches honoured by both training and inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardFlags {
    /// Skip the denoiser entirely: the noise-matching term becomes a
    /// constant zero and the prediction is the raw sequence-path output.
    pub disable_diffusion: bool,
    /// Replace the sequence-derived context condition with zeros while
    /// keeping every shape identical (conditioning ablation).
    pub zero_context: bool,
}

/// Graph handles for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_diff: TensorId,
    pub l_recon: TensorId,
    pub l_total: TensorId,
    /// Final frames the reconstruction term is scored on (fused output, or
    /// the sequence-path output when the denoiser is disabled).
    pub prediction: TensorId,
}

/// Builds the full training objective on `tape`:
///
/// 1. sequence path on the conditioning frames `x`,
/// 2. noise-matching term on `x` noised to per-sample steps `t` with `eps`,
///    conditioned on timestep + sequence context,
/// 3. reconstruction term on the detail-enhanced prediction against `y`,
/// 4. weighted total.
pub fn compute_losses<T: Element>(
    tape: &mut Tape<T>,
    model: &Model,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    flags: ForwardFlags,
) -> Result<LossNodes> {
    let x_id = tape.constant(x);
    let y_id = tape.constant(y);
    let (y_seq, z_last) = model.sequence_forward(tape, bound, x_id);
    let c_context = model.context(tape, bound, z_last, flags.zero_context);

    let l_diff = if flags.disable_diffusion {
        tape.constant_scalar(T::from_f64(0.0))
    } else {
        let x_noisy = add_noise(x, t, eps, schedule)?;
        let x_noisy = tape.constant(&x_noisy);
        let eps_id = tape.constant(eps);
        let c_time = model.time_condition(tape, bound, t);
        let c = tape.add(c_time, c_context);
        let eps_hat = model.noise_prediction(tape, bound, x_noisy, c);
        squared_error_mean(tape, eps_hat, eps_id)?
    };

    let prediction = if flags.disable_diffusion {
        y_seq
    } else {
        model.enhanced_prediction(tape, bound, x_id, y_seq, c_context)?
    };
    let l_recon = absolute_error_mean(tape, prediction, y_id)?;
    let l_total = total_loss(tape, l_diff, l_recon, model.config.lambda);
    Ok(LossNodes { l_diff, l_recon, l_total, prediction })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment tensors are stored in f32; the
/// per-element update is computed in f64 and rounded once at the end.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    /// Fresh optimizer state (zero moments) for every parameter in `store`,
    /// with betas `(0.9, 0.999)` and epsilon `1e-8`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Number of updates applied so far (the resume point for a loop).
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` pairs with the `i`-th registered
    /// parameter; `None` means no gradient flowed and is treated as zero.
    /// Rejects non-finite gradients (naming the parameter) before touching
    /// any state, so a failed step leaves parameters and moments intact.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor<f32>>],
    ) -> Result<()> {
        assert_eq!(
            grads.len(),
            store.len(),
            "expected one gradient slot per registered parameter"
        );
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let pid = ParamId(i);
            assert_eq!(
                g.shape(),
                store.get(pid).shape(),
                "gradient shape mismatch for parameter '{}'",
                store.name(pid)
            );
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient for parameter '{}'", store.name(pid)),
                });
            }
        }

        self.step += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..store.len() {
            let pid = ParamId(i);
            let mut p = store.get(pid).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.numel() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j] as f64);
                let mj = b1 * (m.data()[j] as f64) + (1.0 - b1) * gj;
                let vj = b2 * (v.data()[j] as f64) + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = mj as f32;
                v.data_mut()[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                p.data_mut()[j] = ((p.data()[j] as f64) - update) as f32;
            }
            store.set(pid, p);
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm. A non-finite norm leaves the gradients
/// untouched (the optimizer rejects them with a proper error).
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = ((*x as f64) * s) as f32;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Step / loop drivers
// ---------------------------------------------------------------------------

/// One optimization step on the batch `(x, y)`.
///
/// Randomness is self-contained: a stream seeded by `(seed, step)` draws
/// the per-sample diffusion timesteps first, then the noise tensor, so the
/// step's arithmetic depends only on its inputs and `(seed, step)`.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    step: usize,
    seed: u64,
    flags: ForwardFlags,
) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64));
    let batch = *x.shape().first().expect("batch tensor must have a batch axis");
    let t: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=schedule.t_diff())).collect();
    let eps = Tensor::<f32>::randn(x.shape(), &mut rng);

    let mut tape: Tape<f32> = Tape::new();
    let bound = model.bind(&mut tape, true);
    let nodes = compute_losses(&mut tape, model, &bound, x, y, &t, &eps, schedule, flags)?;
    let report = LossReport {
        l_diff: tape.value(nodes.l_diff).data()[0],
        l_recon: tape.value(nodes.l_recon).data()[0],
        lambda: model.config.lambda,
        l_total: tape.value(nodes.l_total).data()[0],
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite { context: format!("training loss at step {step}") });
    }

    tape.backward(nodes.l_total);
    let mut grads: Vec<Option<Tensor<f32>>> =
        model.store.ids().map(|pid| tape.grad(bound.tensor(pid))).collect();
    drop(tape);
    clip_global_norm(&mut grads, GRAD_CLIP);
    opt.apply(&mut model.store, &grads)?;
    Ok(report)
}

/// Sample indices for 1-based `step`: consecutive positions in a virtual
/// stream of epochs, where each epoch is an independent shuffle of
/// `0..n_samples` keyed by `(seed, epoch)`. Step `k` with batch size `b`
/// reads positions `(k-1)*b .. k*b` of that stream, so any step's batch can
/// be reconstructed without replaying earlier ones.
pub fn batch_indices(n_samples: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    assert!(n_samples > 0, "dataset must be non-empty");
    assert!(batch_size > 0, "batch size must be positive");
    assert!(step >= 1, "training steps are 1-based");
    let first = (step - 1) * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for k in 0..batch_size {
        let pos = first + k;
        let e = pos / n_samples;
        if e != epoch {
            perm = (0..n_samples).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, EPOCH_STREAM), e as u64));
            perm.shuffle(&mut rng);
            epoch = e;
        }
        out.push(perm[pos % n_samples]);
    }
    out
}

/// Copies the selected samples out of a dataset: conditioning frames (the
/// first `t_in`) into `x`, target frames (the last `t_out`) into `y`.
pub fn gather_batch(seq: &FrameSequence, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
    let (n, t, c, h, w) = seq.dims();
    let (t_in, t_out) = (seq.t_in(), seq.t_out());
    assert!(t_in > 0, "gathering a batch needs conditioning frames");
    let frame = c * h * w;
    let sample = t * frame;
    let data = seq.tensor().data();
    let mut x = vec![0.0f32; indices.len() * t_in * frame];
    let mut y = vec![0.0f32; indices.len() * t_out * frame];
    for (row, &idx) in indices.iter().enumerate() {
        assert!(idx < n, "sample index {idx} out of range for {n} samples");
        let base = idx * sample;
        x[row * t_in * frame..][..t_in * frame].copy_from_slice(&data[base..base + t_in * frame]);
        let tail = base + (t - t_out) * frame;
        y[row * t_out * frame..][..t_out * frame]
            .copy_from_slice(&data[tail..tail + t_out * frame]);
    }
    (
        Tensor::new(vec![indices.len(), t_in, c, h, w], x),
        Tensor::new(vec![indices.len(), t_out, c, h, w], y),
    )
}

/// Options for [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Total step count the run should reach (resume-aware: a loaded
    /// optimizer that already took `k` steps continues at `k + 1`).
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: ForwardFlags,
    /// Where to write checkpoints; `None` trains without saving.
    pub checkpoint_path: Option<PathBuf>,
    /// Save every this many steps (`0` = only after the final step).
    pub checkpoint_every: usize,
    /// Run configuration echoed verbatim into every checkpoint.
    pub config_text: String,
}

/// Everything a progress sink needs about one completed step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
    pub wallclock_ms: u128,
}

/// Drives [`train_step`] from the optimizer's current position up to
/// `opts.steps`, batching deterministically and checkpointing as requested.
/// `on_step` runs after every update (logging, CSV emission, early aborts).
pub fn train_loop(
    model: &mut Model,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    data: &FrameSequence,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    let (n, _, c, h, w) = data.dims();
    let cfg = &model.config;
    if data.t_in() != cfg.t_in
        || data.t_out() != cfg.t_out
        || c != cfg.channels
        || h != cfg.height
        || w != cfg.width
    {
        return Err(Error::config(format!(
            "dataset geometry {}+{} frames of {}x{}x{} does not match the model's {}+{} frames of {}x{}x{}",
            data.t_in(), data.t_out(), c, h, w,
            cfg.t_in, cfg.t_out, cfg.channels, cfg.height, cfg.width
        )));
    }
    let done = opt.step_count() as usize;
    for step in done + 1..=opts.steps {
        let idx = batch_indices(n, opts.batch_size, step, opts.seed);
        let (x, y) = gather_batch(data, &idx);
        let started = Instant::now();
        let report = train_step(model, opt, schedule, &x, &y, step, opts.seed, opts.flags)?;
        let record = StepRecord {
            step,
            report,
            lr: opt.lr(),
            wallclock_ms: started.elapsed().as_millis(),
        };
        on_step(&record)?;
        if let Some(path) = &opts.checkpoint_path {
            let periodic = opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0;
            if periodic || step == opts.steps {
                save_checkpoint(path, model, opt, &opts.config_text)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Samples per forward chunk during inference; keeps the graph's
/// intermediate storage bounded for large evaluation batches.
const PREDICT_CHUNK: usize = 8;

/// Model outputs for a batch of conditioning clips.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Sequence-path output plus the denoiser's detail residual
    /// (equals `sequence_only` when the denoiser is disabled).
    pub fused: Tensor<f32>,
    /// Raw sequence-path output.
    pub sequence_only: Tensor<f32>,
}

/// Runs the model forward on `x` of shape `[B, t_in, C, H, W]` without
/// touching gradients, internally chunking the batch to bound memory.
pub fn predict(model: &Model, x: &Tensor<f32>, flags: ForwardFlags) -> Result<Prediction> {
    let cfg = &model.config;
    let expected = [cfg.t_in, cfg.channels, cfg.height, cfg.width];
    if x.shape().len() != 5 || x.shape()[1..] != expected {
        return Err(Error::input(format!(
            "prediction input must be [batch, {}, {}, {}, {}] (got {:?})",
            cfg.t_in, cfg.channels, cfg.height, cfg.width,
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let in_frame = cfg.t_in * cfg.channels * cfg.height * cfg.width;
    let out_frame = cfg.t_out * cfg.channels * cfg.height * cfg.width;
    let mut fused = vec![0.0f32; batch * out_frame];
    let mut seq_only = vec![0.0f32; batch * out_frame];
    let mut start = 0;
    while start < batch {
        let rows = PREDICT_CHUNK.min(batch - start);
        let chunk = Tensor::new(
            vec![rows, cfg.t_in, cfg.channels, cfg.height, cfg.width],
            x.data()[start * in_frame..(start + rows) * in_frame].to_vec(),
        );
        let mut tape: Tape<f32> = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x_id = tape.constant(&chunk);
        let (y_seq, z_last) = model.sequence_forward(&mut tape, &bound, x_id);
        let fused_id = if flags.disable_diffusion {
            y_seq
        } else {
            let ctx = model.context(&mut tape, &bound, z_last, flags.zero_context);
            model.enhanced_prediction(&mut tape, &bound, x_id, y_seq, ctx)?
        };
        seq_only[start * out_frame..(start + rows) * out_frame]
            .copy_from_slice(tape.value(y_seq).data());
        fused[start * out_frame..(start + rows) * out_frame]
            .copy_from_slice(tape.value(fused_id).data());
        start += rows;
    }
    let shape = vec![batch, cfg.t_out, cfg.channels, cfg.height, cfg.width];
    Ok(Prediction {
        fused: Tensor::new(shape.clone(), fused),
        sequence_only: Tensor::new(shape, seq_only),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"DFMA";
const CHECKPOINT_VERSION: u32 = 1;

/// A model plus optimizer state restored from disk.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    /// The run configuration text echoed into the file at save time.
    pub config_text: String,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_usize(buf: &mut Vec<u8>, v: usize) {
    push_u32(buf, u32::try_from(v).expect("field exceeds u32 range"));
}

fn push_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model configuration, every parameter (name, shape, f32 data),
/// and the full optimizer state, then atomically replaces `path` (write to
/// a sibling temp file + rename). A trailing CRC32 covers the whole body.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    opt: &Adam,
    config_text: &str,
) -> Result<()> {
    assert_eq!(opt.m.len(), model.store.len(), "optimizer built for a different model");
    let cfg = &model.config;
    let mut b: Vec<u8> = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut b, CHECKPOINT_VERSION);
    for field in [
        cfg.d,
        cfg.n,
        cfg.l_blocks,
        cfg.k_t,
        usize::from(cfg.residual),
        cfg.n_dit_blocks,
        cfg.patch_size,
        cfg.d_c,
        cfg.t_diff,
    ] {
        push_usize(&mut b, field);
    }
    b.extend_from_slice(&cfg.lambda.to_le_bytes());
    for field in [cfg.channels, cfg.height, cfg.width, cfg.t_in, cfg.t_out] {
        push_usize(&mut b, field);
    }
    push_usize(&mut b, config_text.len());
    b.extend_from_slice(config_text.as_bytes());

    push_usize(&mut b, model.store.len());
    for (name, p) in model.store.iter() {
        push_usize(&mut b, name.len());
        b.extend_from_slice(name.as_bytes());
        push_usize(&mut b, p.shape().len());
        for &d in p.shape() {
            push_usize(&mut b, d);
        }
        push_f32s(&mut b, p.data());
    }

    b.extend_from_slice(&opt.lr.to_le_bytes());
    b.extend_from_slice(&opt.beta1.to_le_bytes());
    b.extend_from_slice(&opt.beta2.to_le_bytes());
    b.extend_from_slice(&opt.eps.to_le_bytes());
    b.extend_from_slice(&opt.step.to_le_bytes());
    for m in &opt.m {
        push_f32s(&mut b, m.data());
    }
    for v in &opt.v {
        push_f32s(&mut b, v.data());
    }

    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &b).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.path, "truncated payload"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Loads a checkpoint written by [`save_checkpoint`]: verifies the CRC,
/// rebuilds the model from the stored configuration, and overwrites every
/// parameter and optimizer moment. Parameter records must appear in
/// registration order under their registered names.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::format(path, "file too short to be a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::format(path, "checksum mismatch"));
    }
    let mut r = ByteReader { data: body, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic (not a checkpoint)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }

    let d = r.usize()?;
    let n = r.usize()?;
    let l_blocks = r.usize()?;
    let k_t = r.usize()?;
    let residual = match r.u32()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(path, format!("residual flag must be 0 or 1, got {other}")))
        }
    };
    let n_dit_blocks = r.usize()?;
    let patch_size = r.usize()?;
    let d_c = r.usize()?;
    let t_diff = r.usize()?;
    let lambda = r.f64()?;
    let channels = r.usize()?;
    let height = r.usize()?;
    let width = r.usize()?;
    let t_in = r.usize()?;
    let t_out = r.usize()?;
    let config = ModelConfig {
        d,
        n,
        l_blocks,
        k_t,
        residual,
        n_dit_blocks,
        patch_size,
        d_c,
        t_diff,
        lambda,
        channels,
        height,
        width,
        t_in,
        t_out,
    };

    let text_len = r.usize()?;
    if text_len > body.len() {
        return Err(Error::format(path, "config text length exceeds file size"));
    }
    let config_text = String::from_utf8(r.take(text_len)?.to_vec())
        .map_err(|_| Error::format(path, "config text is not valid UTF-8"))?;

    let mut model = Model::new(config, 0)
        .map_err(|e| Error::format(path, format!("stored configuration is invalid: {e}")))?;
    let n_params = r.usize()?;
    if n_params != model.store.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint stores {n_params} parameters but the configuration implies {}",
                model.store.len()
            ),
        ));
    }
    for i in 0..n_params {
        let pid = ParamId(i);
        let name_len = r.usize()?;
        if name_len > 4096 {
            return Err(Error::format(path, "parameter name is implausibly long"));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not valid UTF-8"))?;
        if name != model.store.name(pid) {
            return Err(Error::format(
                path,
                format!(
                    "parameter {i} is '{name}' but the configuration implies '{}'",
                    model.store.name(pid)
                ),
            ));
        }
        let rank = r.usize()?;
        if rank > 8 {
            return Err(Error::format(path, format!("parameter '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        if shape != model.store.get(pid).shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter '{name}' has shape {:?} but the configuration implies {:?}",
                    shape,
                    model.store.get(pid).shape()
                ),
            ));
        }
        let data = r.f32_vec(model.store.get(pid).numel())?;
        model.store.set(pid, Tensor::new(shape, data));
    }

    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let step = r.u64()?;
    if !(lr.is_finite() && beta1.is_finite() && beta2.is_finite() && eps.is_finite()) {
        return Err(Error::format(path, "optimizer hyperparameters are not finite"));
    }
    let mut m = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let p = model.store.get(ParamId(i));
        m.push(Tensor::new(p.shape().to_vec(), r.f32_vec(p.numel())?));
    }
    let mut v = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let p = model.store.get(ParamId(i));
        v.push(Tensor::new(p.shape().to_vec(), r.f32_vec(p.numel())?));
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after optimizer state"));
    }
    let optimizer = Adam { lr, beta1, beta2, eps, step, m, v };
    Ok(Checkpoint { model, optimizer, config_text })
}

//! Sequence-tensor file format, synthetic data generation, frame repair,
//! and PGM export.
//!
//! # Archive format (`.btchw`, version 1)
//!
//! | offset | bytes | field                              |
//! |--------|-------|------------------------------------|
//! | 0      | 4     | magic `"BTCW"`                     |
//! | 4      | 4     | format version, u32 LE (= 1)       |
//! | 8      | 20    | dims B,T,C,H,W as u32 LE           |
//! | 28     | 4     | scalar-type tag, u32 LE (1 = f32)  |
//! | 32     | 4     | t_in, u32 LE                       |
//! | 36     | 4     | t_out, u32 LE                      |
//! | 40     | 4·n   | payload, row-major f32 LE          |
//! | 40+4n  | 4     | CRC-32 of header + payload bytes   |
//!
//! Invariants: `t_in + t_out == T`; payload length matches the dims; the
//! checksum covers every byte before it (header included), so any flipped
//! byte in the file is detected. Readers validate dimensions against the
//! file size *before* allocating, so corrupt headers are rejected cheaply.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BTCW";
const FORMAT_VERSION: u32 = 1;
const SCALAR_TAG_F32: u32 = 1;
const HEADER_LEN: usize = 40;

/// Derive an independent RNG stream from a base seed and a stream index
/// (sample index, training step, ...). SplitMix64-style finalizer: nearby
/// inputs map to unrelated outputs.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A `[B,T,C,H,W]` tensor of frames split into `t_in` history frames and
/// `t_out` horizon frames along the time axis (`t_in + t_out == T`).
#[derive(Debug, Clone)]
pub struct FrameSequence {
    tensor: Tensor<f32>,
    t_in: usize,
    t_out: usize,
}

impl FrameSequence {
    /// Validating constructor. Values must be finite; values outside the
    /// nominal `[-0.5, 1.5]` band are tolerated with a warning.
    pub fn new(tensor: Tensor<f32>, t_in: usize, t_out: usize) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 {
            return Err(Error::Input(format!(
                "frame sequence requires a [B,T,C,H,W] tensor, got shape {s:?}"
            )));
        }
        if s.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!(
                "frame sequence dimensions must be positive, got {s:?}"
            )));
        }
        if t_in + t_out != s[1] {
            return Err(Error::Input(format!(
                "t_in ({t_in}) + t_out ({t_out}) must equal the time extent {}",
                s[1]
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite {
                context: "frame sequence payload".into(),
            });
        }
        let outliers = tensor
            .data()
            .iter()
            .filter(|v| !(-0.5..=1.5).contains(&(**v as f64)))
            .count();
        if outliers > 0 {
            log::warn!(
                "frame sequence contains {outliers} values outside [-0.5, 1.5]; \
                 expected frames normalised to [0, 1]"
            );
        }
        Ok(FrameSequence { tensor, t_in, t_out })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn t_in(&self) -> usize {
        self.t_in
    }

    pub fn t_out(&self) -> usize {
        self.t_out
    }

    /// `(B, T, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    /// One frame plane, flattened row-major `[H*W]`.
    pub fn frame(&self, b: usize, t: usize, c: usize) -> &[f32] {
        let (bs, ts, cs, h, w) = self.dims();
        assert!(b < bs && t < ts && c < cs, "frame index out of range");
        let plane = h * w;
        &self.tensor.data()[((b * ts + t) * cs + c) * plane..][..plane]
    }

    fn slice_time(&self, start: usize, len: usize) -> Tensor<f32> {
        let (b, t, c, h, w) = self.dims();
        let block = c * h * w;
        let mut out = Vec::with_capacity(b * len * block);
        for bi in 0..b {
            let from = (bi * t + start) * block;
            out.extend_from_slice(&self.tensor.data()[from..from + len * block]);
        }
        Tensor::new(vec![b, len, c, h, w], out)
    }

    /// The first `t_in` frames as `[B, t_in, C, H, W]`.
    pub fn input_frames(&self) -> Tensor<f32> {
        assert!(self.t_in > 0, "sequence has no input frames (t_in = 0)");
        self.slice_time(0, self.t_in)
    }

    /// The last `t_out` frames as `[B, t_out, C, H, W]`.
    pub fn target_frames(&self) -> Tensor<f32> {
        assert!(self.t_out > 0, "sequence has no target frames (t_out = 0)");
        self.slice_time(self.t_in, self.t_out)
    }
}

/// Parsed archive header (no payload).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub b: u32,
    pub t: u32,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    pub t_in: u32,
    pub t_out: u32,
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<ArchiveHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("file too short for a header ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"BTCW\"", &bytes[0..4]),
        ));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header = ArchiveHeader {
        b: u32_at(bytes, 8),
        t: u32_at(bytes, 12),
        c: u32_at(bytes, 16),
        h: u32_at(bytes, 20),
        w: u32_at(bytes, 24),
        t_in: u32_at(bytes, 32),
        t_out: u32_at(bytes, 36),
    };
    let tag = u32_at(bytes, 28);
    if tag != SCALAR_TAG_F32 {
        return Err(Error::format(
            path,
            format!("unsupported scalar-type tag {tag}, expected {SCALAR_TAG_F32} (f32)"),
        ));
    }
    let dims = [header.b, header.t, header.c, header.h, header.w];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, format!("zero dimension in header {dims:?}")));
    }
    if u64::from(header.t_in) + u64::from(header.t_out) != u64::from(header.t) {
        return Err(Error::format(
            path,
            format!(
                "t_in ({}) + t_out ({}) != T ({})",
                header.t_in, header.t_out, header.t
            ),
        ));
    }
    Ok(header)
}

/// Element count from a header with overflow checking.
fn header_numel(path: &Path, h: &ArchiveHeader) -> Result<usize> {
    let dims = [h.b, h.t, h.c, h.h, h.w];
    let mut numel: u64 = 1;
    for &d in &dims {
        numel = numel.checked_mul(u64::from(d)).ok_or_else(|| {
            Error::format(path, format!("dimension product overflows: {dims:?}"))
        })?;
    }
    usize::try_from(numel)
        .ok()
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(path, format!("payload too large for this platform: {dims:?}")))
}

/// Read only the 40-byte header of an archive.
pub fn read_header(path: &Path) -> Result<ArchiveHeader> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    file.read_exact(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &buf)
}

/// Read and fully validate an archive.
pub fn read_archive(path: &Path) -> Result<FrameSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let numel = header_numel(path, &header)?;
    let expected = HEADER_LEN
        .checked_add(numel * 4)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::format(path, "size computation overflow".to_string()))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "file length {} does not match header (expected {expected} bytes)",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + numel * 4];
    let stored_crc = u32_at(&bytes, HEADER_LEN + numel * 4);
    let actual_crc = crc32fast::hash(&bytes[..HEADER_LEN + numel * 4]);
    if stored_crc != actual_crc {
        return Err(Error::format(
            path,
            format!("checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let shape = vec![
        header.b as usize,
        header.t as usize,
        header.c as usize,
        header.h as usize,
        header.w as usize,
    ];
    FrameSequence::new(
        Tensor::new(shape, data),
        header.t_in as usize,
        header.t_out as usize,
    )
    .map_err(|e| match e {
        Error::NonFinite { .. } => Error::format(path, "payload contains non-finite values".to_string()),
        other => other,
    })
}

/// Write a sequence as an archive. Byte output is a pure function of the
/// sequence contents.
pub fn write_archive(seq: &FrameSequence, path: &Path) -> Result<()> {
    let (b, t, c, h, w) = seq.dims();
    let dims_u32: [u32; 5] = [b, t, c, h, w].map(|d| {
        u32::try_from(d).expect("archive dimensions exceed u32 range")
    });
    let numel = seq.tensor.numel();
    let mut bytes = Vec::with_capacity(HEADER_LEN + numel * 4 + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims_u32 {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes.extend_from_slice(&SCALAR_TAG_F32.to_le_bytes());
    bytes.extend_from_slice(&(seq.t_in as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.t_out as u32).to_le_bytes());
    for v in seq.tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Motion pattern for generated sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motif {
    /// Sinusoidal stripe pattern translating at constant sub-pixel velocity;
    /// frame `t` is frame 0 circularly shifted by `round(v*t)` pixels.
    DriftingStripes,
    /// Gaussian blob moving at constant speed, reflecting off frame walls.
    BouncingBlob,
    /// Smoothed random field advected by a constant integer shift per frame.
    AdvectedNoise,
}

impl std::str::FromStr for Motif {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drifting-stripes" => Ok(Motif::DriftingStripes),
            "bouncing-blob" => Ok(Motif::BouncingBlob),
            "advected-noise" => Ok(Motif::AdvectedNoise),
            other => Err(Error::Config(format!(
                "unknown motif '{other}' (expected drifting-stripes, bouncing-blob, or advected-noise)"
            ))),
        }
    }
}

impl std::fmt::Display for Motif {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Motif::DriftingStripes => "drifting-stripes",
            Motif::BouncingBlob => "bouncing-blob",
            Motif::AdvectedNoise => "advected-noise",
        })
    }
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub seed: u64,
}

/// Generate a deterministic single-channel dataset with coherent constant
/// -velocity motion. Each sample draws its own parameters from an RNG
/// stream derived from `(seed, sample_index)`.
pub fn generate_synthetic(motif: Motif, spec: &SynthSpec) -> Result<FrameSequence> {
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::Config(format!(
            "synthetic frames require height and width >= 16, got {}x{}",
            spec.height, spec.width
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    if spec.frames < 2 {
        return Err(Error::Config("frames must be at least 2".into()));
    }
    if spec.t_in == 0 {
        return Err(Error::Config("t_in must be positive".into()));
    }
    if spec.t_in >= spec.frames {
        return Err(Error::Config(format!(
            "t_in must be < frames (got t_in={}, frames={})",
            spec.t_in, spec.frames
        )));
    }
    let (n, t, h, w) = (spec.n_samples, spec.frames, spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.0f32; n * t * plane];
    for s in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, s as u64));
        let sample = &mut data[s * t * plane..][..t * plane];
        match motif {
            Motif::DriftingStripes => gen_stripes(sample, t, h, w, &mut rng),
            Motif::BouncingBlob => gen_blob(sample, t, h, w, &mut rng),
            Motif::AdvectedNoise => gen_advected(sample, t, h, w, &mut rng),
        }
    }
    FrameSequence::new(
        Tensor::new(vec![n, t, 1, h, w], data),
        spec.t_in,
        spec.frames - spec.t_in,
    )
}

/// Circularly shift `base` (extent `h x w`) by `(sy, sx)` into `out`:
/// content moves down/right for positive shifts.
fn circular_shift(base: &[f32], out: &mut [f32], h: usize, w: usize, sy: i64, sx: i64) {
    for y in 0..h {
        let src_y = (y as i64 - sy).rem_euclid(h as i64) as usize;
        for x in 0..w {
            let src_x = (x as i64 - sx).rem_euclid(w as i64) as usize;
            out[y * w + x] = base[src_y * w + src_x];
        }
    }
}

fn gen_stripes(sample: &mut [f32], t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let plane = h * w;
    let cycles = rng.gen_range(2..=5) as f64;
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = h.max(w) as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut base = vec![0.0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 * ct + y as f64 * st) / scale;
            base[y * w + x] =
                (0.5 + 0.5 * (std::f64::consts::TAU * cycles * u + phase).sin()) as f32;
        }
    }
    // Constant sub-pixel velocity, at least half a pixel per frame on x.
    let vx = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let vy = rng.gen_range(-1.5..1.5);
    for ti in 0..t {
        let sy = (vy * ti as f64).round() as i64;
        let sx = (vx * ti as f64).round() as i64;
        circular_shift(&base, &mut sample[ti * plane..][..plane], h, w, sy, sx);
    }
}

fn gen_blob(sample: &mut [f32], t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let plane = h * w;
    let sigma = 2.0f64;
    // Keep the blob at least ~3.5 sigma inside the walls so its tails never
    // clip and the centroid stays trackable.
    let margin = 7.0f64;
    let (xmin, xmax) = (margin, w as f64 - 1.0 - margin);
    let (ymin, ymax) = (margin, h as f64 - 1.0 - margin);
    let mut cx = rng.gen_range(xmin..xmax);
    let mut cy = rng.gen_range(ymin..ymax);
    let mut vx = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut vy = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let inv = 1.0 / (2.0 * sigma * sigma);
    for ti in 0..t {
        let frame = &mut sample[ti * plane..][..plane];
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                frame[y * w + x] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
        cx += vx;
        cy += vy;
        if cx < xmin {
            cx = 2.0 * xmin - cx;
            vx = -vx;
        } else if cx > xmax {
            cx = 2.0 * xmax - cx;
            vx = -vx;
        }
        if cy < ymin {
            cy = 2.0 * ymin - cy;
            vy = -vy;
        } else if cy > ymax {
            cy = 2.0 * ymax - cy;
            vy = -vy;
        }
    }
}

fn gen_advected(sample: &mut [f32], t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let plane = h * w;
    // Smooth a white-noise field with a few circular 3x3 box-blur passes.
    let mut base: Vec<f64> = (0..plane).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut tmp = vec![0.0f64; plane];
    for _ in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    let yy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                    for dx in -1i64..=1 {
                        let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                        acc += base[yy * w + xx];
                    }
                }
                tmp[y * w + x] = acc / 9.0;
            }
        }
        std::mem::swap(&mut base, &mut tmp);
    }
    let (lo, hi) = base
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = (hi - lo).max(1e-9);
    let base_f32: Vec<f32> = base.iter().map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0)).collect();
    // Integer advection; dx is never zero so motion is guaranteed.
    let dx = *[-2i64, -1, 1, 2].get(rng.gen_range(0..4)).unwrap();
    let dy = rng.gen_range(-2i64..=2);
    for ti in 0..t {
        circular_shift(
            &base_f32,
            &mut sample[ti * plane..][..plane],
            h,
            w,
            dy * ti as i64,
            dx * ti as i64,
        );
    }
}

// ---------------------------------------------------------------------------
// Frame repair
// ---------------------------------------------------------------------------

/// Replace the frames marked bad by temporal linear interpolation between
/// the nearest good frames; a single bad frame at a sequence boundary
/// copies its nearest good neighbour. The mask applies to every sample in
/// the batch.
///
/// Errors: mask length mismatch, every frame bad, or a run of two-or-more
/// bad frames touching a sequence boundary.
pub fn repair_frames(seq: &FrameSequence, bad_mask: &[bool]) -> Result<FrameSequence> {
    let (b, t, c, h, w) = seq.dims();
    if bad_mask.len() != t {
        return Err(Error::Input(format!(
            "bad-frame mask has {} entries for a {t}-frame sequence",
            bad_mask.len()
        )));
    }
    if bad_mask.iter().all(|&m| m) {
        return Err(Error::Input(
            "cannot repair a sequence in which every frame is bad".into(),
        ));
    }
    let block = c * h * w;
    let mut out = seq.tensor.data().to_vec();
    // Identify maximal runs of bad frames.
    let mut i = 0;
    while i < t {
        if !bad_mask[i] {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < t && bad_mask[i] {
            i += 1;
        }
        let run_end = i; // exclusive
        let k = run_end - run_start;
        let prev = run_start.checked_sub(1).filter(|&p| !bad_mask[p]);
        let next = (run_end < t).then_some(run_end);
        match (prev, next) {
            (Some(p), Some(nx)) => {
                // Interior run: linear interpolation between frames p and nx.
                for (m, ti) in (run_start..run_end).enumerate() {
                    let wn = (m + 1) as f32 / (k + 1) as f32;
                    let wp = 1.0 - wn;
                    for bi in 0..b {
                        let dst = (bi * t + ti) * block;
                        let src_p = (bi * t + p) * block;
                        let src_n = (bi * t + nx) * block;
                        for j in 0..block {
                            out[dst + j] = wp * seq.tensor.data()[src_p + j]
                                + wn * seq.tensor.data()[src_n + j];
                        }
                    }
                }
            }
            (only_prev, only_next) => {
                if k > 1 {
                    return Err(Error::Input(format!(
                        "run of {k} consecutive bad frames touches the sequence boundary \
                         (frames {run_start}..{run_end}); at most one boundary frame can be repaired"
                    )));
                }
                let src_t = only_prev.or(only_next).expect("not all frames are bad");
                for bi in 0..b {
                    let dst = (bi * t + run_start) * block;
                    let src = (bi * t + src_t) * block;
                    out.copy_within(src..src + block, dst);
                }
            }
        }
    }
    FrameSequence::new(
        Tensor::new(vec![b, t, c, h, w], out),
        seq.t_in,
        seq.t_out,
    )
}

// ---------------------------------------------------------------------------
// PGM export
// ---------------------------------------------------------------------------

/// Write one frame as a binary PGM (P5, maxval 255); values are mapped by
/// `round(255 * clip(v, 0, 1))`.
pub fn write_pgm(path: &Path, frame: &[f32], h: usize, w: usize) -> Result<()> {
    if frame.len() != h * w {
        return Err(Error::Input(format!(
            "PGM frame buffer length {} does not match extent {h}x{w}",
            frame.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        frame
            .iter()
            .map(|&v| (255.0 * f64::from(v).clamp(0.0, 1.0)).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the tempdir so the path stays valid for the test body.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    fn random_sequence(shape: [usize; 5], t_in: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensor = Tensor::<f32>::rand_uniform(&shape, 0.0, 1.0, &mut rng);
        FrameSequence::new(tensor, t_in, shape[1] - t_in).unwrap()
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let seq = random_sequence([4, 10, 1, 32, 32], 5, 7);
        let path = temp_path("rt.btchw");
        write_archive(&seq, &path).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.dims(), seq.dims());
        assert_eq!(back.t_in(), 5);
        assert_eq!(back.t_out(), 5);
        assert_eq!(back.tensor().data(), seq.tensor().data());

        // Writing the same sequence twice produces identical bytes.
        let path2 = temp_path("rt2.btchw");
        write_archive(&seq, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_reports_history_split() {
        let seq = random_sequence([2, 10, 1, 16, 16], 5, 3);
        let path = temp_path("hdr.btchw");
        write_archive(&seq, &path).unwrap();
        let h = read_header(&path).unwrap();
        assert_eq!(h.t_in, 5);
        assert_eq!(h.t_out, 5);
        assert_eq!((h.b, h.t, h.c, h.h, h.w), (2, 10, 1, 16, 16));
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let seq = random_sequence([1, 4, 1, 16, 16], 2, 11);
        let path = temp_path("crc.btchw");
        write_archive(&seq, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let err = read_archive(&path).unwrap_err();
        assert!(
            err.to_string().contains("checksum"),
            "expected checksum error, got: {err}"
        );
    }

    #[test]
    fn malformed_headers_are_rejected_cleanly() {
        let seq = random_sequence([1, 4, 1, 16, 16], 2, 13);
        let good_path = temp_path("good.btchw");
        write_archive(&seq, &good_path).unwrap();
        let good = std::fs::read(&good_path).unwrap();

        // Wrong magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        let p = temp_path("magic.btchw");
        std::fs::write(&p, &bad).unwrap();
        assert!(read_archive(&p).unwrap_err().to_string().contains("magic"));

        // Truncated file.
        let p = temp_path("trunc.btchw");
        std::fs::write(&p, &good[..good.len() / 2]).unwrap();
        assert!(read_archive(&p).is_err());

        // Huge dimensions: must reject before allocating.
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let p = temp_path("huge.btchw");
        std::fs::write(&p, &bad).unwrap();
        assert!(read_archive(&p).is_err());

        // t_in + t_out != T.
        let mut bad = good;
        bad[32..36].copy_from_slice(&9u32.to_le_bytes());
        let p = temp_path("split.btchw");
        std::fs::write(&p, &bad).unwrap();
        assert!(read_archive(&p).unwrap_err().to_string().contains("t_in"));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec {
            n_samples: 3,
            frames: 6,
            height: 16,
            width: 16,
            t_in: 3,
            seed: 42,
        };
        for motif in [Motif::DriftingStripes, Motif::BouncingBlob, Motif::AdvectedNoise] {
            let a = generate_synthetic(motif, &spec).unwrap();
            let b = generate_synthetic(motif, &spec).unwrap();
            assert_eq!(a.tensor().data(), b.tensor().data(), "{motif} not deterministic");
            let mut other = spec.clone();
            other.seed = 43;
            let c = generate_synthetic(motif, &other).unwrap();
            assert_ne!(a.tensor().data(), c.tensor().data(), "{motif} ignores seed");
        }
    }

    #[test]
    fn all_motifs_stay_in_unit_range() {
        let spec = SynthSpec {
            n_samples: 2,
            frames: 8,
            height: 24,
            width: 20,
            t_in: 4,
            seed: 5,
        };
        for motif in [Motif::DriftingStripes, Motif::BouncingBlob, Motif::AdvectedNoise] {
            let seq = generate_synthetic(motif, &spec).unwrap();
            for &v in seq.tensor().data() {
                assert!((0.0..=1.0).contains(&v), "{motif} produced {v}");
            }
        }
    }

    /// Exhaustive search for a circular shift mapping `a` onto `b` exactly.
    fn find_exact_shift(a: &[f32], b: &[f32], h: usize, w: usize) -> Vec<(i64, i64)> {
        let mut hits = Vec::new();
        let mut shifted = vec![0.0f32; h * w];
        for sy in 0..h as i64 {
            for sx in 0..w as i64 {
                circular_shift(a, &mut shifted, h, w, sy, sx);
                if shifted == b {
                    hits.push((sy, sx));
                }
            }
        }
        hits
    }

    #[test]
    fn stripes_frames_are_exact_shifts_of_frame_zero() {
        let spec = SynthSpec {
            n_samples: 2,
            frames: 6,
            height: 20,
            width: 24,
            t_in: 3,
            seed: 9,
        };
        let seq = generate_synthetic(Motif::DriftingStripes, &spec).unwrap();
        let (_, t, _, h, w) = seq.dims();
        for s in 0..2 {
            let f0 = seq.frame(s, 0, 0);
            let mut moved = false;
            for ti in 1..t {
                let ft = seq.frame(s, ti, 0);
                let hits = find_exact_shift(f0, ft, h, w);
                assert!(
                    !hits.is_empty(),
                    "sample {s} frame {ti} is not a circular shift of frame 0"
                );
                if ft != f0 {
                    moved = true;
                }
            }
            assert!(moved, "sample {s} shows no motion");
        }
    }

    #[test]
    fn advected_noise_shifts_linearly_in_time() {
        let spec = SynthSpec {
            n_samples: 2,
            frames: 5,
            height: 16,
            width: 16,
            t_in: 2,
            seed: 21,
        };
        let seq = generate_synthetic(Motif::AdvectedNoise, &spec).unwrap();
        let (_, t, _, h, w) = seq.dims();
        for s in 0..2 {
            let f0 = seq.frame(s, 0, 0);
            let hits = find_exact_shift(f0, seq.frame(s, 1, 0), h, w);
            assert_eq!(hits.len(), 1, "shift between consecutive frames must be unique");
            let (dy, dx) = hits[0];
            let mut shifted = vec![0.0f32; h * w];
            for ti in 2..t {
                circular_shift(f0, &mut shifted, h, w, dy * ti as i64, dx * ti as i64);
                assert_eq!(
                    shifted.as_slice(),
                    seq.frame(s, ti, 0),
                    "sample {s} frame {ti} does not follow linear advection"
                );
            }
        }
    }

    #[test]
    fn blob_centroid_moves_at_constant_speed_between_reflections() {
        let spec = SynthSpec {
            n_samples: 5,
            frames: 12,
            height: 32,
            width: 32,
            t_in: 6,
            seed: 33,
        };
        let seq = generate_synthetic(Motif::BouncingBlob, &spec).unwrap();
        let (n, t, _, h, w) = seq.dims();
        for s in 0..n {
            // Intensity-weighted centroids, computed from pixels alone.
            let centroids: Vec<(f64, f64)> = (0..t)
                .map(|ti| {
                    let f = seq.frame(s, ti, 0);
                    let (mut sx, mut sy, mut m) = (0.0f64, 0.0f64, 0.0f64);
                    for y in 0..h {
                        for x in 0..w {
                            let v = f[y * w + x] as f64;
                            sx += v * x as f64;
                            sy += v * y as f64;
                            m += v;
                        }
                    }
                    (sx / m, sy / m)
                })
                .collect();
            // Speeds for steps whose endpoints are well inside the walls
            // (reflection can fall mid-step near the boundary).
            let interior = |c: &(f64, f64)| {
                c.0 > 8.5 && c.0 < w as f64 - 9.5 && c.1 > 8.5 && c.1 < h as f64 - 9.5
            };
            let speeds: Vec<f64> = centroids
                .windows(2)
                .filter(|pair| interior(&pair[0]) && interior(&pair[1]))
                .map(|pair| {
                    let (dx, dy) = (pair[1].0 - pair[0].0, pair[1].1 - pair[0].1);
                    (dx * dx + dy * dy).sqrt()
                })
                .collect();
            assert!(
                speeds.len() >= 2,
                "sample {s}: too few interior steps to judge constant speed"
            );
            let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
            for sp in &speeds {
                assert!(
                    (sp - mean).abs() / mean < 0.02,
                    "sample {s}: speed {sp} deviates from mean {mean}"
                );
            }
        }
    }

    #[test]
    fn repair_midpoint_and_weighted_runs() {
        // Build [1, 4, 1, 16, 16] with recognisable constant frames A, ?, ?, B.
        let plane = 16 * 16;
        let mut data = vec![0.0f32; 4 * plane];
        data[..plane].fill(0.0); // A
        data[plane..2 * plane].fill(9.0); // garbage
        data[2 * plane..3 * plane].fill(9.0); // garbage
        data[3 * plane..].fill(1.0); // B
        let seq = FrameSequence::new(Tensor::new(vec![1, 4, 1, 16, 16], data), 2, 2).unwrap();

        let fixed = repair_frames(&seq, &[false, true, true, false]).unwrap();
        for &v in fixed.frame(0, 1, 0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6, "weights should be (2/3, 1/3): {v}");
        }
        for &v in fixed.frame(0, 2, 0) {
            assert!((v - 2.0 / 3.0).abs() < 1e-6, "weights should be (1/3, 2/3): {v}");
        }
        // Good frames untouched.
        assert_eq!(fixed.frame(0, 0, 0), seq.frame(0, 0, 0));
        assert_eq!(fixed.frame(0, 3, 0), seq.frame(0, 3, 0));

        // Single interior gap: exact midpoint.
        let mut data = vec![0.0f32; 3 * plane];
        data[plane..2 * plane].fill(5.0);
        data[2 * plane..].fill(1.0);
        let seq = FrameSequence::new(Tensor::new(vec![1, 3, 1, 16, 16], data), 2, 1).unwrap();
        let fixed = repair_frames(&seq, &[false, true, false]).unwrap();
        for &v in fixed.frame(0, 1, 0) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn repair_boundary_rules() {
        let seq = random_sequence([2, 5, 1, 16, 16], 3, 17);

        // No bad frames: identity.
        let same = repair_frames(&seq, &[false; 5]).unwrap();
        assert_eq!(same.tensor().data(), seq.tensor().data());

        // Single leading bad frame copies the first good frame.
        let fixed = repair_frames(&seq, &[true, false, false, false, false]).unwrap();
        assert_eq!(fixed.frame(0, 0, 0), seq.frame(0, 1, 0));
        assert_eq!(fixed.frame(1, 0, 0), seq.frame(1, 1, 0));

        // Single trailing bad frame copies the last good frame.
        let fixed = repair_frames(&seq, &[false, false, false, false, true]).unwrap();
        assert_eq!(fixed.frame(0, 4, 0), seq.frame(0, 3, 0));

        // Two consecutive bad frames at a boundary: error.
        assert!(repair_frames(&seq, &[true, true, false, false, false]).is_err());
        assert!(repair_frames(&seq, &[false, false, false, true, true]).is_err());

        // All bad: error.
        assert!(repair_frames(&seq, &[true; 5]).is_err());

        // Mask length mismatch: error.
        assert!(repair_frames(&seq, &[false; 4]).is_err());
    }

    #[test]
    fn generation_rejects_bad_specs() {
        let mut spec = SynthSpec {
            n_samples: 1,
            frames: 6,
            height: 8,
            width: 32,
            t_in: 3,
            seed: 0,
        };
        assert!(generate_synthetic(Motif::DriftingStripes, &spec).is_err());
        spec.height = 32;
        spec.t_in = 6;
        assert!(generate_synthetic(Motif::DriftingStripes, &spec).is_err());
        spec.t_in = 3;
        assert!(generate_synthetic(Motif::DriftingStripes, &spec).is_ok());
        assert!("no-such-motif".parse::<Motif>().is_err());
    }

    #[test]
    fn pgm_export_clips_and_scales() {
        let path = temp_path("f.pgm");
        let frame = vec![0.0f32, 0.5, 1.0, 1.2, -0.1, 0.25, 0.75, 1.0, 0.0];
        // 3x3 is below the SSIM window but PGM has no such restriction.
        write_pgm(&path, &frame, 3, 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px, &[0, 128, 255, 255, 0, 64, 191, 255, 0]);
    }

    #[test]
    fn sequence_constructor_validates() {
        // Wrong rank.
        assert!(FrameSequence::new(Tensor::zeros(&[2, 3, 4]), 1, 2).is_err());
        // Split mismatch.
        assert!(FrameSequence::new(Tensor::zeros(&[1, 4, 1, 16, 16]), 1, 2).is_err());
        // Non-finite payload.
        let mut t = Tensor::zeros(&[1, 2, 1, 16, 16]);
        t.data_mut()[3] = f32::NAN;
        assert!(FrameSequence::new(t, 1, 1).is_err());
    }
}

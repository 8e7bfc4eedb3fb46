//! Evaluation metrics: MSE, MAE, and SSIM over frame sequences.
//!
//! All accumulation happens in f64 regardless of the input element type.
//! SSIM uses the de-facto standard parameterization — 11x11 Gaussian window
//! with sigma 1.5, C1 = (0.01*L)^2, C2 = (0.03*L)^2, L = 1 — over valid
//! (fully inside the frame) window positions only. Both inputs go through
//! the identical code path, so `ssim(x, x) == 1.0` holds exactly.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared difference over all elements.
pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    pair_mean(a, b, |d| d * d)
}

/// Mean absolute difference over all elements.
pub fn mae<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    pair_mean(a, b, f64::abs)
}

fn pair_mean<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64) -> f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "metric inputs must have identical shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Input("metric inputs must be non-empty".into()));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += f(x.as_f64() - y.as_f64());
    }
    Ok(acc / a.numel() as f64)
}

/// Normalised 1-D Gaussian taps for the SSIM window.
fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// SSIM between two single-channel frames of extent `h x w`, flattened
/// row-major, with an explicit window size and Gaussian sigma.
pub fn ssim_frame_with_window<T: Element>(
    a: &[T],
    b: &[T],
    h: usize,
    w: usize,
    window: usize,
    sigma: f64,
) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Input(format!(
            "ssim: frame buffers (lengths {}, {}) do not match extent {h}x{w}",
            a.len(),
            b.len()
        )));
    }
    if h < window || w < window {
        return Err(Error::Input(format!(
            "ssim: frame {h}x{w} is smaller than the {window}x{window} window; \
             use larger frames or a smaller window override"
        )));
    }
    let taps = gaussian_taps(window, sigma);
    // Separable window: weight(i,j) = taps[i] * taps[j].
    let mut total = 0.0f64;
    let mut count = 0usize;
    for wy in 0..=(h - window) {
        for wx in 0..=(w - window) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..window {
                let row = (wy + i) * w + wx;
                let ti = taps[i];
                for j in 0..window {
                    let wgt = ti * taps[j];
                    let av = a[row + j].as_f64();
                    let bv = b[row + j].as_f64();
                    mu_a += wgt * av;
                    mu_b += wgt * bv;
                    aa += wgt * av * av;
                    bb += wgt * bv * bv;
                    ab += wgt * av * bv;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the standard 11x11 / sigma 1.5 window.
pub fn ssim_frame<T: Element>(a: &[T], b: &[T], h: usize, w: usize) -> Result<f64> {
    ssim_frame_with_window(a, b, h, w, SSIM_WINDOW, SSIM_SIGMA)
}

/// Metrics for one predicted frame index, aggregated over the batch.
#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
}

/// Aggregate and per-frame metrics for a prediction/target pair.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub per_frame: Vec<FrameMetrics>,
}

/// Compare prediction and target tensors of shape `[B,T,C,H,W]` frame by
/// frame. SSIM is defined for single-channel data only (C == 1).
pub fn compare_sequences<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<MetricReport> {
    if pred.shape() != target.shape() {
        return Err(Error::Input(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 5 {
        return Err(Error::Input(format!(
            "sequence metrics expect [B,T,C,H,W] tensors, got {s:?}"
        )));
    }
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if c != 1 {
        return Err(Error::Input(format!(
            "SSIM is defined for single-channel sequences; got C = {c}"
        )));
    }
    let plane = h * w;
    let mut per_frame = Vec::with_capacity(t);
    let mut total_sq = 0.0f64;
    let mut total_abs = 0.0f64;
    let mut total_ssim = 0.0f64;
    for ti in 0..t {
        let mut sq = 0.0f64;
        let mut ab = 0.0f64;
        let mut ss = 0.0f64;
        for bi in 0..b {
            let off = (bi * t + ti) * plane;
            let pa = &pred.data()[off..off + plane];
            let ta = &target.data()[off..off + plane];
            for (x, y) in pa.iter().zip(ta) {
                let d = x.as_f64() - y.as_f64();
                sq += d * d;
                ab += d.abs();
            }
            ss += ssim_frame(pa, ta, h, w)?;
        }
        let n = (b * plane) as f64;
        per_frame.push(FrameMetrics {
            frame_index: ti,
            mse: sq / n,
            mae: ab / n,
            ssim: ss / b as f64,
        });
        total_sq += sq;
        total_abs += ab;
        total_ssim += ss;
    }
    let n = (b * t * plane) as f64;
    Ok(MetricReport {
        mse: total_sq / n,
        mae: total_abs / n,
        ssim: total_ssim / (b * t) as f64,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_give_perfect_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform(&[1, 2, 1, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        let r = compare_sequences(&x, &x).unwrap();
        assert_eq!(r.ssim, 1.0, "ssim(x,x) must be exactly 1");
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn constant_offset_matches_analytic_values() {
        let y = Tensor::<f64>::full(&[2, 3, 4], 0.4);
        let yhat = Tensor::<f64>::full(&[2, 3, 4], 0.5);
        assert!((mse(&yhat, &y).unwrap() - 0.01).abs() < 1e-15);
        assert!((mae(&yhat, &y).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[3, 4, 5], &mut rng);
        let b = Tensor::<f64>::randn(&[3, 4, 5], &mut rng);
        // Independent nested-loop accumulation.
        let mut sq = 0.0;
        let mut ab = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let idx = (i * 4 + j) * 5 + k;
                    let d = a.data()[idx] - b.data()[idx];
                    sq += d * d;
                    ab += d.abs();
                }
            }
        }
        let n = 60.0;
        let m = mse(&a, &b).unwrap();
        let ma = mae(&a, &b).unwrap();
        assert!((m - sq / n).abs() / (sq / n) < 1e-12);
        assert!((ma - ab / n).abs() / (ab / n) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(mse(&a, &b).is_err());
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_constant_offset_matches_direct_formula() {
        // Constant images: every window sees mu_a = 0.25, mu_b = 0.75,
        // zero variance and covariance, so SSIM reduces to the
        // C2-limited luminance expression computed here directly.
        let h = 16;
        let w = 16;
        let a = vec![0.25f64; h * w];
        let b = vec![0.75f64; h * w];
        let got = ssim_frame(&a, &b, h, w).unwrap();
        let (mu_a, mu_b) = (0.25f64, 0.75f64);
        let want = ((2.0 * mu_a * mu_b + SSIM_C1) * SSIM_C2)
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * SSIM_C2);
        assert!(
            (got - want).abs() / want.abs() < 1e-6,
            "got {got}, want {want}"
        );
    }

    #[test]
    fn anticorrelated_pattern_scores_negative() {
        // High-contrast checkerboard vs its inversion.
        let h = 16;
        let w = 16;
        let mut a = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                a[y * w + x] = ((x + y) % 2) as f64;
            }
        }
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let got = ssim_frame(&a, &b, h, w).unwrap();
        assert!(got < 0.0, "anticorrelated SSIM should be negative, got {got}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = Tensor::<f64>::rand_uniform(&[16 * 16], 0.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(&[16 * 16], 0.0, 1.0, &mut rng);
            let ab = ssim_frame(a.data(), b.data(), 16, 16).unwrap();
            let ba = ssim_frame(b.data(), a.data(), 16, 16).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry violated: {ab} vs {ba}");
            assert!(ab <= 1.0 && ab >= -1.0, "ssim out of range: {ab}");
        }
    }

    #[test]
    fn frame_smaller_than_window_is_an_error() {
        let a = vec![0.0f64; 8 * 8];
        let err = ssim_frame(&a, &a, 8, 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("11x11"), "message should name the window: {msg}");
    }

    #[test]
    fn per_frame_report_isolates_the_bad_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Tensor::<f64>::rand_uniform(&[2, 3, 1, 16, 16], 0.0, 1.0, &mut rng);
        let mut pred = target.clone();
        // Corrupt frame index 1 of every sample.
        let plane = 16 * 16;
        for bi in 0..2 {
            let off = (bi * 3 + 1) * plane;
            for v in &mut pred.data_mut()[off..off + plane] {
                *v = 1.0 - *v;
            }
        }
        let r = compare_sequences(&pred, &target).unwrap();
        assert_eq!(r.per_frame.len(), 3);
        assert_eq!(r.per_frame[0].mse, 0.0);
        assert_eq!(r.per_frame[2].mse, 0.0);
        assert!(r.per_frame[1].mse > 0.01);
        assert_eq!(r.per_frame[0].ssim, 1.0);
        assert!(r.per_frame[1].ssim < 0.5);
    }
}

//! Small composite building blocks shared by the sequence and denoising
//! networks: biased convolutions, dense layers over the trailing axis, and
//! broadcast helpers. All of them expand to primitive tape ops, so gradients
//! come for free.

use crate::tensor::{Element, Tape, TensorId};

/// 2-D convolution plus per-channel bias. `x: [n, c_in, h, w]`,
/// `kernel: [c_out, c_in, kh, kw]`, `bias: [c_out]`.
pub fn conv2d_bias<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) -> TensorId {
    let y = tape.conv2d(x, kernel, stride, pad);
    let out_shape = tape.shape(y).to_vec();
    let b = broadcast_channel(tape, bias, &out_shape);
    tape.add(y, b)
}

/// Transposed 2-D convolution plus per-channel bias.
/// `x: [n, c_in, h, w]`, `kernel: [c_in, c_out, kh, kw]`, `bias: [c_out]`.
pub fn conv_transpose2d_bias<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) -> TensorId {
    let y = tape.conv_transpose2d(x, kernel, stride, pad);
    let out_shape = tape.shape(y).to_vec();
    let b = broadcast_channel(tape, bias, &out_shape);
    tape.add(y, b)
}

/// Expands a `[c]` vector to `[n, c, h, w]` for channel-wise addition.
fn broadcast_channel<T: Element>(
    tape: &mut Tape<T>,
    bias: TensorId,
    out_shape: &[usize],
) -> TensorId {
    assert_eq!(out_shape.len(), 4, "broadcast_channel expects a 4-D target");
    let (n, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    assert_eq!(
        tape.shape(bias),
        &[c],
        "bias length {} does not match channel count {c}",
        tape.shape(bias)[0]
    );
    let b = tape.reshape(bias, &[1, c, 1, 1]);
    let b = tape.expand(b, 0, n);
    let b = tape.expand(b, 2, h);
    tape.expand(b, 3, w)
}

/// Dense layer applied along the last axis of an arbitrary-rank input:
/// `x: [.., d_in]`, `w: [d_in, d_out]`, optional `bias: [d_out]`.
/// Leading axes are preserved.
pub fn linear_last<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    bias: Option<TensorId>,
) -> TensorId {
    let in_shape = tape.shape(x).to_vec();
    let d_in = *in_shape.last().expect("linear_last needs rank >= 1 input");
    let w_shape = tape.shape(w);
    assert_eq!(
        w_shape[0], d_in,
        "linear_last: input feature dim {d_in} does not match weight rows {}",
        w_shape[0]
    );
    let d_out = w_shape[1];
    let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[rows, d_in]);
    let y = tape.linear(flat, w, bias);
    let mut out_shape = in_shape;
    *out_shape.last_mut().unwrap() = d_out;
    tape.reshape(y, &out_shape)
}

/// Expands a `[rows, d]` matrix to `[rows, reps, d]` by repeating each row.
pub fn repeat_rows<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    reps: usize,
) -> TensorId {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 2, "repeat_rows expects a 2-D input");
    let (rows, d) = (shape[0], shape[1]);
    let x = tape.reshape(x, &[rows, 1, d]);
    tape.expand(x, 1, reps)
}

//! Finite-difference verification for every differentiable operation.
//!
//! Each test contracts the op's output against a fixed random weight tensor
//! so that every output coordinate contributes to the scalar loss with a
//! distinct coefficient; a missing or misplaced gradient term cannot cancel.

use diffuma_core::{check_gradients, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract `y` against a fixed weight tensor to produce the scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, y: TensorId, w: &Tensor<f64>) -> TensorId {
    let wid = tape.constant(w);
    let prod = tape.mul(y, wid);
    tape.sum_all(prod)
}

fn assert_grad<F>(name: &str, build: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let err = check_gradients(build, inputs, EPS).unwrap();
    assert!(err < tol, "{name}: max relative gradient error {err} >= {tol}");
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(10);
    let a = Tensor::randn(&[3, 4], &mut r);
    let b = Tensor::randn(&[3, 4], &mut r);
    let w = Tensor::randn(&[3, 4], &mut r);

    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let w = w.clone();
        assert_grad(
            name,
            move |tape, ids| {
                let y = match f {
                    0 => tape.add(ids[0], ids[1]),
                    1 => tape.sub(ids[0], ids[1]),
                    _ => tape.mul(ids[0], ids[1]),
                };
                weighted_sum(tape, y, &w)
            },
            &[a.clone(), b.clone()],
            1e-7,
        );
    }
}

#[test]
fn elementwise_unary_ops() {
    let mut r = rng(11);
    // Keep |x| in a range where exp/softplus are well-conditioned and away
    // from the abs kink at zero.
    let x = Tensor::rand_uniform(&[3, 5], 0.3, 2.0, &mut r);
    let xneg = Tensor::rand_uniform(&[3, 5], -2.0, -0.3, &mut r);
    let w = Tensor::randn(&[3, 5], &mut r);

    for (name, f) in [
        ("neg", 0usize),
        ("scale", 1),
        ("add_scalar", 2),
        ("silu", 3),
        ("sigmoid", 4),
        ("softplus", 5),
        ("exp", 6),
        ("abs_positive", 7),
    ] {
        let w = w.clone();
        assert_grad(
            name,
            move |tape, ids| {
                let y = match f {
                    0 => tape.neg(ids[0]),
                    1 => tape.scale(ids[0], -1.7),
                    2 => tape.add_scalar(ids[0], 0.9),
                    3 => tape.silu(ids[0]),
                    4 => tape.sigmoid(ids[0]),
                    5 => tape.softplus(ids[0]),
                    6 => tape.exp(ids[0]),
                    _ => tape.abs(ids[0]),
                };
                weighted_sum(tape, y, &w)
            },
            &[x.clone()],
            1e-6,
        );
    }

    let w2 = w.clone();
    assert_grad(
        "abs_negative",
        move |tape, ids| {
            let y = tape.abs(ids[0]);
            weighted_sum(tape, y, &w2)
        },
        &[xneg],
        1e-6,
    );
}

#[test]
fn matmul_and_bmm() {
    let mut r = rng(12);
    let a = Tensor::randn(&[3, 4], &mut r);
    let b = Tensor::randn(&[4, 2], &mut r);
    let w = Tensor::randn(&[3, 2], &mut r);
    assert_grad(
        "matmul",
        move |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]);
            weighted_sum(tape, y, &w)
        },
        &[a, b],
        1e-6,
    );

    let a = Tensor::randn(&[2, 3, 4], &mut r);
    let b = Tensor::randn(&[2, 4, 2], &mut r);
    let w = Tensor::randn(&[2, 3, 2], &mut r);
    assert_grad(
        "bmm",
        move |tape, ids| {
            let y = tape.bmm(ids[0], ids[1]);
            weighted_sum(tape, y, &w)
        },
        &[a, b],
        1e-6,
    );
}

#[test]
fn linear_with_bias() {
    let mut r = rng(13);
    let x = Tensor::randn(&[3, 4], &mut r);
    let wmat = Tensor::randn(&[4, 2], &mut r);
    let bias = Tensor::randn(&[2], &mut r);
    let w = Tensor::randn(&[3, 2], &mut r);
    assert_grad(
        "linear",
        move |tape, ids| {
            let y = tape.linear(ids[0], ids[1], Some(ids[2]));
            weighted_sum(tape, y, &w)
        },
        &[x, wmat, bias],
        1e-6,
    );
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(14);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = Tensor::randn(&[2, 2, 5, 5], &mut r);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let mut probe = Tape::<f64>::new();
        let xi = probe.constant(&x);
        let ki = probe.constant(&k);
        let y = probe.conv2d(xi, ki, stride, pad);
        let w = Tensor::randn(probe.shape(y), &mut r);
        assert_grad(
            &format!("conv2d s{stride} p{pad}"),
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], stride, pad);
                weighted_sum(tape, y, &w)
            },
            &[x, k],
            1e-6,
        );
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let mut r = rng(15);
    for &(stride, pad, ksz) in &[(1usize, 0usize, 3usize), (2, 1, 4)] {
        let x = Tensor::randn(&[2, 3, 4, 4], &mut r);
        let k = Tensor::randn(&[3, 2, ksz, ksz], &mut r);
        let mut probe = Tape::<f64>::new();
        let xi = probe.constant(&x);
        let ki = probe.constant(&k);
        let y = probe.conv_transpose2d(xi, ki, stride, pad);
        let w = Tensor::randn(probe.shape(y), &mut r);
        assert_grad(
            &format!("conv_transpose2d s{stride} p{pad}"),
            move |tape, ids| {
                let y = tape.conv_transpose2d(ids[0], ids[1], stride, pad);
                weighted_sum(tape, y, &w)
            },
            &[x, k],
            1e-6,
        );
    }
}

#[test]
fn conv1d_gradients_including_depthwise() {
    let mut r = rng(16);
    // Full convolution: groups = 1.
    let x = Tensor::randn(&[2, 4, 7], &mut r);
    let k = Tensor::randn(&[3, 4, 3], &mut r);
    let w = Tensor::randn(&[2, 3, 7], &mut r);
    assert_grad(
        "conv1d groups=1",
        move |tape, ids| {
            let y = tape.conv1d(ids[0], ids[1], 1, 1, 1);
            weighted_sum(tape, y, &w)
        },
        &[x, k],
        1e-6,
    );

    // Depthwise: groups = channels, kernel [c,1,k].
    let x = Tensor::randn(&[2, 4, 7], &mut r);
    let k = Tensor::randn(&[4, 1, 3], &mut r);
    let w = Tensor::randn(&[2, 4, 7], &mut r);
    assert_grad(
        "conv1d depthwise",
        move |tape, ids| {
            let y = tape.conv1d(ids[0], ids[1], 1, 1, 4);
            weighted_sum(tape, y, &w)
        },
        &[x, k],
        1e-6,
    );
}

#[test]
fn layer_norm_gradients_all_parameters() {
    let mut r = rng(17);
    let x = Tensor::randn(&[4, 6], &mut r);
    let gamma = Tensor::rand_uniform(&[6], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[6], &mut r);
    let w = Tensor::randn(&[4, 6], &mut r);
    assert_grad(
        "layer_norm",
        move |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2]);
            weighted_sum(tape, y, &w)
        },
        &[x, gamma, beta],
        1e-5,
    );
}

#[test]
fn softmax_gradients() {
    let mut r = rng(18);
    let x = Tensor::randn(&[3, 5], &mut r);
    let w = Tensor::randn(&[3, 5], &mut r);
    assert_grad(
        "softmax",
        move |tape, ids| {
            let y = tape.softmax(ids[0]);
            weighted_sum(tape, y, &w)
        },
        &[x],
        1e-5,
    );
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(19);
    let x = Tensor::randn(&[2, 3, 4], &mut r);

    let w = Tensor::randn(&[4, 6], &mut r);
    assert_grad(
        "reshape",
        move |tape, ids| {
            let y = tape.reshape(ids[0], &[4, 6]);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let w = Tensor::randn(&[4, 3, 2], &mut r);
    assert_grad(
        "transpose",
        move |tape, ids| {
            let y = tape.transpose(ids[0], 0, 2);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let xs = Tensor::randn(&[2, 1, 4], &mut r);
    let w = Tensor::randn(&[2, 3, 4], &mut r);
    assert_grad(
        "expand",
        move |tape, ids| {
            let y = tape.expand(ids[0], 1, 3);
            weighted_sum(tape, y, &w)
        },
        &[xs],
        1e-7,
    );

    let w = Tensor::randn(&[2, 4], &mut r);
    assert_grad(
        "sum_axis",
        move |tape, ids| {
            let y = tape.sum_axis(ids[0], 1);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let w = Tensor::randn(&[2, 4], &mut r);
    assert_grad(
        "mean_axis",
        move |tape, ids| {
            let y = tape.mean_axis(ids[0], 1);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let w = Tensor::randn(&[2, 2, 4], &mut r);
    assert_grad(
        "slice",
        move |tape, ids| {
            let y = tape.slice(ids[0], 1, 1, 2);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let w = Tensor::randn(&[2, 3, 4], &mut r);
    assert_grad(
        "reverse",
        move |tape, ids| {
            let y = tape.reverse(ids[0], 1);
            weighted_sum(tape, y, &w)
        },
        &[x.clone()],
        1e-7,
    );

    let a = Tensor::randn(&[2, 2, 4], &mut r);
    let b = Tensor::randn(&[2, 3, 4], &mut r);
    let w = Tensor::randn(&[2, 5, 4], &mut r);
    assert_grad(
        "concat",
        move |tape, ids| {
            let y = tape.concat(&[ids[0], ids[1]], 1);
            weighted_sum(tape, y, &w)
        },
        &[a, b],
        1e-7,
    );
}

#[test]
fn patch_op_gradients() {
    let mut r = rng(20);
    let x = Tensor::randn(&[2, 2, 4, 4], &mut r);
    let w = Tensor::randn(&[2, 4, 8], &mut r);
    assert_grad(
        "patchify",
        move |tape, ids| {
            let y = tape.patchify(ids[0], 2);
            weighted_sum(tape, y, &w)
        },
        &[x],
        1e-7,
    );

    let tok = Tensor::randn(&[2, 4, 8], &mut r);
    let w = Tensor::randn(&[2, 2, 4, 4], &mut r);
    assert_grad(
        "unpatchify",
        move |tape, ids| {
            let y = tape.unpatchify(ids[0], 2, 2, 4, 4);
            weighted_sum(tape, y, &w)
        },
        &[tok],
        1e-7,
    );
}

#[test]
fn reductions_to_scalar() {
    let mut r = rng(21);
    let x = Tensor::randn(&[3, 4], &mut r);
    assert_grad(
        "sum_all",
        |tape, ids| tape.sum_all(ids[0]),
        &[x.clone()],
        1e-8,
    );
    assert_grad(
        "mean_all",
        |tape, ids| tape.mean_all(ids[0]),
        &[x],
        1e-8,
    );
}

#[test]
fn shared_operand_accumulates_both_paths() {
    // f(x) = sum(x*x + 3x): gradient must combine both uses of x.
    let mut r = rng(22);
    let x = Tensor::randn(&[4], &mut r);
    assert_grad(
        "shared operand",
        |tape, ids| {
            let sq = tape.mul(ids[0], ids[0]);
            let tripled = tape.scale(ids[0], 3.0);
            let s = tape.add(sq, tripled);
            tape.sum_all(s)
        },
        &[x],
        1e-7,
    );
}

//! Convolution checked against a direct nested-loop reference.
//!
//! The reference below is written for clarity, not speed: seven explicit
//! loops over batch, group, channel and kernel axes with f64 accumulation
//! and explicit zero padding. It is the oracle the tape implementation must
//! match; it shares no code with the production kernels.

use petkit_core::adapter::{adapter_forward, AdapterConfig, InitScheme, Nonlinearity};
use petkit_core::params::seeded_rng;
use petkit_core::tensor::Tensor;
use petkit_core::Tape;
use rand::Rng;

#[allow(clippy::too_many_arguments)]
fn reference_conv(
    x: &[f32],
    (n, c_in, h, w): (usize, usize, usize, usize),
    wt: &[f32],
    (c_out, _cpg, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<f32> {
    let cpg_in = c_in / groups;
    let cpg_out = c_out / groups;
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; n * c_out * h_out * w_out];
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / cpg_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc: f64 = bias.map(|b| b[co] as f64).unwrap_or(0.0);
                    for ci_l in 0..cpg_in {
                        let ci = g * cpg_in + ci_l;
                        for kh_i in 0..kh {
                            for kw_i in 0..kw {
                                let ih = (oh * stride + kh_i) as isize - padding as isize;
                                let iw = (ow * stride + kw_i) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c_in + ci) * h + ih as usize) * w + iw as usize];
                                let wv = wt[((co * cpg_in + ci_l) * kh + kh_i) * kw + kw_i];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * c_out + co) * h_out + oh) * w_out + ow] = acc as f32;
                }
            }
        }
    }
    out
}

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed, 90);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn run_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<f32> {
    let mut tape: Tape = Tape::inference();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let bv = bias.map(|b| tape.leaf(b, false));
    let out = tape.conv2d(xv, wv, bv, stride, padding, groups).unwrap();
    tape.value(out).data().to_vec()
}

fn assert_close(actual: &[f32], expected: &[f32], tol: f32, ctx: &str) {
    assert_eq!(actual.len(), expected.len(), "{ctx}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{ctx}[{i}]: {a} vs {e} (diff {})",
            (a - e).abs()
        );
    }
}

#[test]
fn random_conv_matches_reference() {
    // The spec's reference case: 2x4x5x5 input, 6x4x3x3 weight, pad 1.
    let x = random_tensor(vec![2, 4, 5, 5], 1);
    let w = random_tensor(vec![6, 4, 3, 3], 2);
    let got = run_conv(&x, &w, None, 1, 1, 1);
    let want = reference_conv(x.data(), (2, 4, 5, 5), w.data(), (6, 4, 3, 3), None, 1, 1, 1);
    assert_close(&got, &want, 1e-5, "k3 p1");
}

#[test]
fn conv_matches_reference_across_configs() {
    for (seed, (n, c_in, h), (c_out, k), stride, padding, groups, bias) in [
        (10, (1usize, 4usize, 7usize), (8usize, 3usize), 1usize, 1usize, 1usize, true),
        (11, (2, 6, 6), (6, 3), 2, 1, 2, false),
        (12, (2, 4, 5), (4, 1), 1, 0, 4, true),
        (13, (1, 8, 9), (4, 5), 2, 2, 4, false),
        (14, (3, 2, 8), (5, 7), 1, 3, 1, true),
        (15, (2, 6, 5), (9, 3), 3, 1, 3, false),
    ] {
        let x = random_tensor(vec![n, c_in, h, h], seed);
        let w = random_tensor(vec![c_out, c_in / groups, k, k], seed + 100);
        let b = random_tensor(vec![c_out], seed + 200);
        let bias = bias.then_some(&b);
        let got = run_conv(&x, &w, bias, stride, padding, groups);
        let want = reference_conv(
            x.data(),
            (n, c_in, h, h),
            w.data(),
            (c_out, c_in / groups, k, k),
            bias.map(|b| b.data()),
            stride,
            padding,
            groups,
        );
        assert_close(&got, &want, 1e-5, &format!("seed {seed}"));
    }
}

#[test]
fn conv_is_linear_in_input_and_weight() {
    let x = random_tensor(vec![1, 3, 6, 6], 20);
    let w1 = random_tensor(vec![4, 3, 3, 3], 21);
    let w2 = random_tensor(vec![4, 3, 3, 3], 22);

    // conv(a*x) = a*conv(x)
    let ax = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| 2.5 * v).collect(),
    )
    .unwrap();
    let lhs = run_conv(&ax, &w1, None, 1, 1, 1);
    let rhs: Vec<f32> = run_conv(&x, &w1, None, 1, 1, 1)
        .iter()
        .map(|v| 2.5 * v)
        .collect();
    assert_close(&lhs, &rhs, 1e-5, "input scaling");

    // conv with (w1+w2) = conv(w1) + conv(w2)
    let wsum = Tensor::new(
        w1.shape().to_vec(),
        w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let lhs = run_conv(&x, &wsum, None, 1, 1, 1);
    let rhs: Vec<f32> = run_conv(&x, &w1, None, 1, 1, 1)
        .iter()
        .zip(run_conv(&x, &w2, None, 1, 1, 1))
        .map(|(a, b)| a + b)
        .collect();
    assert_close(&lhs, &rhs, 1e-5, "weight additivity");
}

#[test]
fn grouped_identity_kernels_are_identity() {
    // groups == C_in == C_out with 1x1 all-ones kernels: the identity map.
    let x = random_tensor(vec![2, 5, 4, 4], 30);
    let w = Tensor::filled(vec![5, 1, 1, 1], 1.0);
    let got = run_conv(&x, &w, None, 1, 0, 5);
    assert_eq!(got.as_slice(), x.data());
}

#[test]
fn adapter_forward_matches_composed_reference() {
    // Random adapter (C_in=4, C_out=8, gamma=2, K=3) on a 1x4x5x5 input must
    // equal the brute-force conv oracle composed twice with ReLU between.
    let mut cfg = AdapterConfig::new(2, 3);
    cfg.init_scheme = InitScheme::KaimingBoth;
    cfg.nonlinearity = Nonlinearity::Relu;
    let z = random_tensor(vec![1, 4, 5, 5], 40);
    let w_down = random_tensor(vec![2, 2, 3, 3], 41);
    let w_up = random_tensor(vec![8, 2, 1, 1], 42);

    let mut tape: Tape = Tape::inference();
    let zv = tape.leaf(&z, false);
    let wd = tape.leaf(&w_down, false);
    let wu = tape.leaf(&w_up, false);
    let out = adapter_forward(&mut tape, zv, wd, wu, &cfg, 1).unwrap();
    assert_eq!(tape.shape(out), &[1, 8, 5, 5]);

    let mid = reference_conv(z.data(), (1, 4, 5, 5), w_down.data(), (2, 2, 3, 3), None, 1, 1, 2);
    let mid_relu: Vec<f32> = mid.iter().map(|&v| v.max(0.0)).collect();
    let want = reference_conv(&mid_relu, (1, 2, 5, 5), w_up.data(), (8, 2, 1, 1), None, 1, 0, 1);
    assert_close(tape.value(out).data(), &want, 1e-5, "adapter composition");
}

#[test]
fn forward_values_stay_finite() {
    let x = random_tensor(vec![2, 3, 9, 9], 50);
    let w = random_tensor(vec![7, 3, 5, 5], 51);
    let got = run_conv(&x, &w, None, 2, 2, 1);
    assert!(got.iter().all(|v| v.is_finite()));
}

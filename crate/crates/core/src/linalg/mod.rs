//! Dense `f64` tensors, a reverse-mode gradient tape, parameter storage and
//! the finite-difference oracle everything else is checked against.

pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use layers::{Conv, LayerNorm, Linear, Mlp};
pub use graph::{BinaryKind, Gradients, Graph, UnaryKind, Var};
pub use params::{Adam, ParamId, ParamStore, ParamTensor};
pub use rng::SeededRng;
pub use tensor::Tensor;

pub(crate) use graph::{align_corners_taps, sigmoid};

use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Row-wise softmax over the last axis, stabilised by subtracting the row max.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let y = g.softmax_last(v);
    g.value(y).clone()
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Same-padded cross-correlation of `[C_in×H×W]` with `[C_out×C_in×k×k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(kernel.clone()), g.constant(bias.clone()));
    let y = g.conv2d(xv, kv, bv)?;
    Ok(g.value(y).clone())
}

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol_check(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        let e = relative_error(analytic, numeric);
        assert!(e < tol, "relative error {e} >= {tol}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    /// Builds `loss = Σ w ⊙ op(inputs)` with fixed random weights `w` so the
    /// output gradient is not uniform, then checks every input.
    fn check_op(inputs: &[Tensor], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = op(&mut g, &vars);
            random_tensor(g.shape(y), &mut rng, 1.0)
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let y = op(&mut g, &vars);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = op(&mut g, &vars);
        let w = g.constant(probe.clone());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let numeric = finite_diff_grad(
                |t| {
                    let mut ins = inputs.to_vec();
                    ins[k] = t.clone();
                    eval(&ins)
                },
                &inputs[k],
                1e-5,
            );
            tol_check(&grads.get_or_zeros(*v, &inputs[k]), &numeric, 1e-4);
        }
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::from_rows(&[vec![2.0, 2.0, 2.0]]).unwrap();
        let y = softmax_rows(&z);
        assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let z = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let y = softmax_rows(&z);
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let mut rng = SeededRng::new(3);
        let x = random_tensor(&[4, 6], &mut rng, 3.0);
        let shifted = x.map(|v| v + 1234.5);
        assert!(softmax_rows(&x).max_abs_diff(&softmax_rows(&shifted)) < 1e-12);
        let big = x.map(|v| v * 1e6);
        assert!(softmax_rows(&big).all_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            let y = softmax_rows(&random_tensor(&[5, 7], &mut rng, 10.0));
            for r in 0..5 {
                let s: f64 = y.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(y.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[4]);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[1, 4], 7.0), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
        let y = layer_norm(
            &Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
        let mut rng = SeededRng::new(9);
        // output variance is var/(var + eps), so unit-scale inputs would sit
        // ~eps below 1; scale 10 keeps it inside [1 - 1e-6, 1]
        let x = random_tensor(&[3, 16], &mut rng, 10.0);
        let y = layer_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-5).unwrap();
        for r in 0..3 {
            let xr = x.row(r);
            let xm = xr.iter().sum::<f64>() / 16.0;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((1.0 - 1e-6..=1.0).contains(&var), "var {var}");
            assert!((var - xv / (xv + 1e-5)).abs() < 1e-12);
        }
    }

    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let p = (ks / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, w]);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += k.data()[((co * cin + ci) * ks + ky) * ks + kx]
                                    * x.data()[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_examples() {
        let mut rng = SeededRng::new(5);
        let x = random_tensor(&[1, 4, 5], &mut rng, 1.0);
        let id = conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(id, x);
        let zb = conv2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), &Tensor::vector(&[0.5, -2.0])).unwrap();
        assert!(zb.data()[..20].iter().all(|&v| v == 0.5));
        assert!(zb.data()[20..].iter().all(|&v| v == -2.0));
        let ramp = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let avg = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let got = conv2d(&ramp, &avg, &Tensor::zeros(&[1])).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&ramp, &avg, &Tensor::zeros(&[1]))) < 1e-12);
        // interior pixel averages its 3×3 neighbourhood: centre value 5 at (1,1)
        assert!((got.data()[5] - 5.0).abs() < 1e-12);
        let k = random_tensor(&[3, 2, 3, 3], &mut rng, 1.0);
        let b = random_tensor(&[3], &mut rng, 1.0);
        let x = random_tensor(&[2, 5, 6], &mut rng, 1.0);
        assert!(conv2d(&x, &k, &b).unwrap().max_abs_diff(&naive_conv(&x, &k, &b)) < 1e-12);
        assert!(conv2d(&random_tensor(&[3, 5, 6], &mut rng, 1.0), &k, &b).is_err());
    }

    #[test]
    fn finite_diff_matches_softmax_jacobian() {
        let mut rng = SeededRng::new(11);
        let x = random_tensor(&[1, 5], &mut rng, 1.0);
        let pick = 2;
        let y = softmax_rows(&x);
        let numeric = finite_diff_grad(|t| softmax_rows(t).data()[pick], &x, 1e-5);
        for j in 0..5 {
            let delta = if j == pick { 1.0 } else { 0.0 };
            let analytic = y.data()[pick] * (delta - y.data()[j]);
            assert!((analytic - numeric.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_associative_on_random_chains() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            let a = random_tensor(&[3, 4], &mut rng, 1.0);
            let b = random_tensor(&[4, 5], &mut rng, 1.0);
            let c = random_tensor(&[5, 2], &mut rng, 1.0);
            let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(relative_error_with_floor(&l, &r) < 1e-9);
        }
    }

    fn relative_error_with_floor(a: &Tensor, b: &Tensor) -> f64 {
        gradcheck::relative_error_with_floor(a, b, 1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            let mut r = |s: &[usize]| random_tensor(s, &mut rng, 1.0);
            check_op(&[r(&[3, 4]), r(&[4, 2])], seed, |g, v| g.matmul(v[0], v[1]).unwrap());
            check_op(&[r(&[2, 3, 4]), r(&[2, 4, 2])], seed, |g, v| g.matmul(v[0], v[1]).unwrap());
            check_op(&[r(&[3, 5])], seed, |g, v| g.softmax_last(v[0]));
            check_op(&[r(&[3, 6]), r(&[6]), r(&[6])], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
            check_op(&[r(&[2, 4, 5]), r(&[3, 2, 3, 3]), r(&[3])], seed, |g, v| g.conv2d(v[0], v[1], v[2]).unwrap());
            check_op(&[r(&[2, 2, 3, 3]), r(&[1, 2, 1, 1]), r(&[1])], seed, |g, v| g.conv2d(v[0], v[1], v[2]).unwrap());
            check_op(&[r(&[2, 6, 4])], seed, |g, v| g.resize_bilinear(v[0], 3, 7).unwrap());
            check_op(&[r(&[2, 3]), r(&[1, 3])], seed, |g, v| g.div(v[0], v[1]).unwrap());
            check_op(&[r(&[2, 3]), r(&[2, 1])], seed, |g, v| g.maximum(v[0], v[1]).unwrap());
            check_op(&[r(&[2, 3]), r(&[2, 3])], seed, |g, v| g.minimum(v[0], v[1]).unwrap());
            check_op(&[r(&[2, 3, 4])], seed, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
            check_op(&[r(&[4, 3])], seed, |g, v| g.index_select(v[0], &[3, 0, 0]).unwrap());
            check_op(&[r(&[2, 3, 4])], seed, |g, v| g.sum_axis(v[0], 1).unwrap());
            check_op(&[r(&[2, 3]), r(&[2, 2])], seed, |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
            check_op(&[r(&[2, 6])], seed, |g, v| g.slice(v[0], 1, 2, 3).unwrap());
            for kind in [
                UnaryKind::Relu,
                UnaryKind::Sigmoid,
                UnaryKind::Softplus,
                UnaryKind::Exp,
                UnaryKind::Square,
                UnaryKind::SmoothL1,
            ] {
                check_op(&[r(&[3, 4]).map(|v| 2.0 * v)], seed, move |g, v| g.unary(kind, v[0]));
            }
            check_op(&[r(&[3, 4]).map(|v| v.abs() + 0.5)], seed, |g, v| g.ln(v[0]));
        }
    }
}

#![allow(dead_code)]

use deformdet::tensor::{finite_diff_grad, grad_error, GradError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Checks `analytic` against central differences of `f` at `at`.
pub fn fd_check(analytic: &Tensor, at: &Tensor, f: impl Fn(&Tensor) -> f64) -> GradError {
    let numeric = finite_diff_grad(f, at, EPS);
    grad_error(analytic.data(), numeric.data())
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at4(oc, ic, ki, kj)
                                        * x.at4(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Central differences of `f` at selected entries of `at`, compared with
/// the same entries of `analytic`.
pub fn fd_probe(
    analytic: &Tensor,
    at: &Tensor,
    idx: &[usize],
    f: impl Fn(&Tensor) -> f64,
) -> GradError {
    let mut a = Vec::with_capacity(idx.len());
    let mut n = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut p = at.clone();
        p.data_mut()[i] += EPS;
        let mut q = at.clone();
        q.data_mut()[i] -= EPS;
        n.push((f(&p) - f(&q)) / (2.0 * EPS));
        a.push(analytic.data()[i]);
    }
    grad_error(&a, &n)
}

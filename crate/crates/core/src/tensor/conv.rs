use super::Tensor;
use crate::error::{Error, Result};

/// Weights and geometry of a 2-D cross-correlation.
///
/// `weight` is `(out_c, in_c, k_h, k_w)` and `bias` is `(out_c)`. Kernel
/// sides are odd so `padding = k / 2` keeps spatial alignment at stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (o, _, kh, kw) = self.weight.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.bias.shape() != [o] {
            return Err(Error::shape(
                "ConvParams",
                format!("bias shape {:?} for {o} output channels", self.bias.shape()),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients of a convolution-like operator.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
    pub d_offsets: Option<Tensor>,
}

pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn check_conv(
    op: &'static str,
    input: &Tensor,
    params: &ConvParams,
) -> Result<ConvGeometry> {
    params.validate()?;
    let (batch, in_c, height, width) = input.dims4()?;
    if in_c != params.in_channels() {
        return Err(Error::shape(
            op,
            format!(
                "input has {in_c} channels but kernel expects {}",
                params.in_channels()
            ),
        ));
    }
    let (kh, kw) = params.kernel();
    let out_h = conv_output_size(height, kh, params.stride, params.padding);
    let out_w = conv_output_size(width, kw, params.stride, params.padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
            batch,
            in_c,
            height,
            width,
            out_h,
            out_w,
        }),
        _ => Err(Error::shape(
            op,
            format!(
                "input {height}x{width} with padding {} is smaller than kernel {kh}x{kw}",
                params.padding
            ),
        )),
    }
}

/// Row-major `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`.
/// With `trans_a` the buffer `a` holds the `k×m` transpose, likewise `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds input patches into a `(in_c·kh·kw) × (batch·out_h·out_w)` matrix.
pub(crate) fn im2col(
    input: &Tensor,
    geo: &ConvGeometry,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let plane_out = geo.out_h * geo.out_w;
    let ncols = geo.batch * plane_out;
    let mut cols = vec![0.0; geo.in_c * kh * kw * ncols];
    let x = input.data();
    for c in 0..geo.in_c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..geo.batch {
                    let src = &x[(b * geo.in_c + c) * geo.height * geo.width..]
                        [..geo.height * geo.width];
                    for oy in 0..geo.out_h {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= geo.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * geo.width..][..geo.width];
                        let dst = &mut dst_row[b * plane_out + oy * geo.out_w..][..geo.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix >= 0 && ix < geo.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(
    dcols: &[f64],
    geo: &ConvGeometry,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    d_input: &mut [f64],
) {
    let plane_out = geo.out_h * geo.out_w;
    let ncols = geo.batch * plane_out;
    for c in 0..geo.in_c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src_row = &dcols[row * ncols..(row + 1) * ncols];
                for b in 0..geo.batch {
                    let dst = &mut d_input[(b * geo.in_c + c) * geo.height * geo.width..]
                        [..geo.height * geo.width];
                    for oy in 0..geo.out_h {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= geo.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * geo.width..][..geo.width];
                        let src = &src_row[b * plane_out + oy * geo.out_w..][..geo.out_w];
                        for (ox, g) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix >= 0 && ix < geo.width as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Multiplies the weight matrix against unfolded columns and lays the result
/// out as `(batch, out_c, out_h, out_w)` with bias added.
pub(crate) fn apply_weights(
    cols: &[f64],
    weight: &Tensor,
    bias: &Tensor,
    batch: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let out_c = weight.shape()[0];
    let k = weight.len() / out_c;
    let plane = out_h * out_w;
    let ncols = batch * plane;
    let mut tmp = vec![0.0; out_c * ncols];
    gemm(out_c, k, ncols, weight.data(), false, cols, false, &mut tmp, 0.0);
    let mut out = Tensor::zeros(&[batch, out_c, out_h, out_w]);
    let od = out.data_mut();
    for b in 0..batch {
        for o in 0..out_c {
            let bias_o = bias.data()[o];
            let src = &tmp[o * ncols + b * plane..][..plane];
            let dst = &mut od[(b * out_c + o) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias_o;
            }
        }
    }
    out
}

/// Backward of [`apply_weights`]: returns `(d_cols, d_weight, d_bias)`.
pub(crate) fn apply_weights_backward(
    cols: &[f64],
    weight: &Tensor,
    upstream: &Tensor,
) -> (Vec<f64>, Tensor, Tensor) {
    let (batch, out_c, out_h, out_w) = upstream.dims4().expect("rank-4 upstream");
    let k = weight.len() / out_c;
    let plane = out_h * out_w;
    let ncols = batch * plane;
    let mut dy = vec![0.0; out_c * ncols];
    let ud = upstream.data();
    for b in 0..batch {
        for o in 0..out_c {
            dy[o * ncols + b * plane..][..plane]
                .copy_from_slice(&ud[(b * out_c + o) * plane..][..plane]);
        }
    }
    let mut d_weight = weight.zeros_like();
    gemm(
        out_c,
        ncols,
        k,
        &dy,
        false,
        cols,
        true,
        d_weight.data_mut(),
        0.0,
    );
    let mut d_bias = Tensor::zeros(&[out_c]);
    for (o, db) in d_bias.data_mut().iter_mut().enumerate() {
        *db = dy[o * ncols..(o + 1) * ncols].iter().sum();
    }
    let mut d_cols = vec![0.0; k * ncols];
    gemm(k, out_c, ncols, weight.data(), true, &dy, false, &mut d_cols, 0.0);
    (d_cols, d_weight, d_bias)
}

/// Cross-correlation with zero padding, plus a per-output-channel bias.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let geo = check_conv("conv2d", input, params)?;
    let (kh, kw) = params.kernel();
    let cols = im2col(input, &geo, kh, kw, params.stride, params.padding);
    Ok(apply_weights(
        &cols,
        &params.weight,
        &params.bias,
        geo.batch,
        geo.out_h,
        geo.out_w,
    ))
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    upstream: &Tensor,
) -> Result<GradBundle> {
    let geo = check_conv("conv2d_backward", input, params)?;
    let expected = [geo.batch, params.out_channels(), geo.out_h, geo.out_w];
    if upstream.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream shape {:?} differs from output shape {expected:?}",
                upstream.shape()
            ),
        ));
    }
    let (kh, kw) = params.kernel();
    let cols = im2col(input, &geo, kh, kw, params.stride, params.padding);
    let (d_cols, d_weights, d_bias) = apply_weights_backward(&cols, &params.weight, upstream);
    let mut d_input = input.zeros_like();
    col2im_add(
        &d_cols,
        &geo,
        kh,
        kw,
        params.stride,
        params.padding,
        d_input.data_mut(),
    );
    Ok(GradBundle {
        d_input,
        d_weights,
        d_bias,
        d_offsets: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(k: usize, pad: usize) -> ConvParams {
        ConvParams::new(
            Tensor::full(&[1, 1, k, k], 1.0),
            Tensor::zeros(&[1]),
            1,
            pad,
        )
        .unwrap()
    }

    #[test]
    fn counts_overlapping_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &ones_kernel(3, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let y = conv2d(&x, &ones_kernel(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let err = conv2d(&x, &ones_kernel(3, 1)).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn rejects_even_kernel() {
        let p = ConvParams::new(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1]), 1, 0);
        assert!(p.is_err());
    }

    #[test]
    fn rejects_too_small_input() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &ones_kernel(5, 0)).is_err());
    }

    #[test]
    fn scalar_backward_is_chain_rule() {
        let w = 1.75;
        let x = -0.4;
        let up = 2.5;
        let p = ConvParams::new(
            Tensor::full(&[1, 1, 1, 1], w),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        let g = conv2d_backward(
            &Tensor::full(&[1, 1, 1, 1], x),
            &p,
            &Tensor::full(&[1, 1, 1, 1], up),
        )
        .unwrap();
        assert_eq!(g.d_input.data(), &[w * up]);
        assert_eq!(g.d_weights.data(), &[x * up]);
        assert_eq!(g.d_bias.data(), &[up]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64).sin());
        let p = ConvParams::new(
            Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).cos()),
            Tensor::full(&[3], 0.3),
            2,
            1,
        )
        .unwrap();
        let up = Tensor::zeros(&[1, 3, 3, 3]);
        let g = conv2d_backward(&x, &p, &up).unwrap();
        assert_eq!(g.d_input.max_abs(), 0.0);
        assert_eq!(g.d_weights.max_abs(), 0.0);
        assert_eq!(g.d_bias.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_wrong_upstream() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let up = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &ones_kernel(3, 1), &up).is_err());
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_output_size(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_size(5, 3, 1, 1), Some(5));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
    }
}

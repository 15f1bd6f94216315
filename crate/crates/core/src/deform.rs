//! Deformable convolution.
//!
//! For output position `p0` and kernel tap `pn`, the input is sampled at
//! `p0·stride − padding + pn + Δpn` with bilinear interpolation, where the
//! displacement `Δpn` comes from an auxiliary convolution over the same
//! input:
//!
//! ```text
//! y(p0) = bias + Σ_n Σ_c w_c(pn) · x_c(p0·stride − padding + pn + Δpn)
//! ```
//!
//! Offsets are shared across input channels. The offset field has `2·kh·kw`
//! channels: for tap `n` (taps enumerated row-major over the kernel),
//! channel `2n` is `Δy` and channel `2n + 1` is `Δx`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::init::{he_conv, named_rng};
use crate::tensor::conv::{apply_weights, apply_weights_backward, check_conv};
use crate::tensor::{
    add_assign, conv2d, conv2d_backward, BilinearTaps, ConvParams, GradBundle, Tensor,
};

thread_local! {
    static FLIP_OFFSET_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the offset gradient on the current thread. Exists so the
/// gradient self-check can be shown to catch a broken backward pass.
#[doc(hidden)]
pub fn inject_offset_grad_sign_bug(enabled: bool) {
    FLIP_OFFSET_GRAD.with(|f| f.set(enabled));
}

/// Per-position sampling displacements, `(batch, 2·kh·kw, out_h, out_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField(Tensor);

impl OffsetField {
    pub fn new(offsets: Tensor) -> Result<Self> {
        let (_, c, _, _) = offsets.dims4()?;
        if c % 2 != 0 {
            return Err(Error::shape(
                "OffsetField",
                format!("offset field needs an even channel count, got {c}"),
            ));
        }
        Ok(Self(offsets))
    }

    pub fn zeros(batch: usize, taps: usize, out_h: usize, out_w: usize) -> Self {
        Self(Tensor::zeros(&[batch, 2 * taps, out_h, out_w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformConvLayer {
    pub main: ConvParams,
    pub offset_branch: ConvParams,
    /// When set, offsets are clamped to `±(k + 1)` pixels before sampling.
    pub clamp_offsets: bool,
}

impl DeformConvLayer {
    pub fn new(main: ConvParams, offset_branch: ConvParams) -> Result<Self> {
        let layer = Self {
            main,
            offset_branch,
            clamp_offsets: false,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        self.offset_branch.validate()?;
        let (kh, kw) = self.main.kernel();
        if self.offset_branch.out_channels() != 2 * kh * kw {
            return Err(Error::shape(
                "DeformConvLayer",
                format!(
                    "offset branch has {} output channels, a {kh}x{kw} kernel needs {}",
                    self.offset_branch.out_channels(),
                    2 * kh * kw
                ),
            ));
        }
        if self.offset_branch.in_channels() != self.main.in_channels() {
            return Err(Error::shape(
                "DeformConvLayer",
                format!(
                    "offset branch reads {} channels, main kernel reads {}",
                    self.offset_branch.in_channels(),
                    self.main.in_channels()
                ),
            ));
        }
        if self.offset_branch.kernel() != self.main.kernel()
            || self.offset_branch.stride != self.main.stride
            || self.offset_branch.padding != self.main.padding
        {
            return Err(Error::shape(
                "DeformConvLayer",
                "offset branch must share kernel size, stride and padding with the main kernel",
            ));
        }
        Ok(())
    }

    pub fn clamp_bound(&self) -> Option<f64> {
        let (kh, kw) = self.main.kernel();
        self.clamp_offsets.then(|| (kh.max(kw) + 1) as f64)
    }

    pub fn offset_params(&self) -> usize {
        self.offset_branch.num_params()
    }

    pub fn num_params(&self) -> usize {
        self.main.num_params() + self.offset_branch.num_params()
    }
}

/// Layer with He-uniform main weights from `seed` and a zero offset branch,
/// so a fresh layer computes exactly the plain convolution of its kernel.
pub fn make_dc_layer(
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    seed: u64,
) -> Result<DeformConvLayer> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "deformable kernel size must be odd, got {k}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let mut rng = named_rng(seed, "deform.main");
    let main = he_conv(out_c, in_c, k, stride, &mut rng);
    let offset_branch = ConvParams::zeros(2 * k * k, in_c, k, stride, k / 2);
    DeformConvLayer::new(main, offset_branch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
    pub d_offsets: Tensor,
    pub d_offset_weights: Tensor,
    pub d_offset_bias: Tensor,
}

struct Sampling {
    batch: usize,
    in_c: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl Sampling {
    fn check(
        op: &'static str,
        input: &Tensor,
        main: &ConvParams,
        offsets: &OffsetField,
    ) -> Result<Self> {
        let geo = check_conv(op, input, main)?;
        let (kh, kw) = main.kernel();
        let expected = [geo.batch, 2 * kh * kw, geo.out_h, geo.out_w];
        if offsets.tensor().shape() != expected {
            return Err(Error::shape(
                op,
                format!(
                    "offset field {:?} does not match expected {expected:?}",
                    offsets.tensor().shape()
                ),
            ));
        }
        Ok(Self {
            batch: geo.batch,
            in_c: geo.in_c,
            height: geo.height,
            width: geo.width,
            out_h: geo.out_h,
            out_w: geo.out_w,
            kh,
            kw,
            stride: main.stride,
            padding: main.padding,
        })
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.out_h * self.out_w
    }

    fn ncols(&self) -> usize {
        self.batch * self.plane_out()
    }

    /// Calls `f(b, p, n, taps, clamped_y, clamped_x)` for every sample.
    fn for_each_sample(
        &self,
        offsets: &Tensor,
        clamp: Option<f64>,
        mut f: impl FnMut(usize, usize, usize, &BilinearTaps, bool, bool),
    ) {
        let plane = self.plane_out();
        let od = offsets.data();
        let ntaps = self.taps();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let p = oy * self.out_w + ox;
                    for n in 0..ntaps {
                        let (ki, kj) = (n / self.kw, n % self.kw);
                        let mut dy = od[(b * 2 * ntaps + 2 * n) * plane + p];
                        let mut dx = od[(b * 2 * ntaps + 2 * n + 1) * plane + p];
                        let (mut cy, mut cx) = (false, false);
                        if let Some(bound) = clamp {
                            cy = dy.abs() > bound;
                            cx = dx.abs() > bound;
                            dy = dy.clamp(-bound, bound);
                            dx = dx.clamp(-bound, bound);
                        }
                        let y = (oy * self.stride + ki) as f64 - self.padding as f64 + dy;
                        let x = (ox * self.stride + kj) as f64 - self.padding as f64 + dx;
                        let taps = BilinearTaps::new(self.height, self.width, y, x);
                        f(b, p, n, &taps, cy, cx);
                    }
                }
            }
        }
    }

    fn columns(&self, input: &Tensor, offsets: &Tensor, clamp: Option<f64>) -> Vec<f64> {
        let ncols = self.ncols();
        let plane_in = self.height * self.width;
        let plane_out = self.plane_out();
        let ntaps = self.taps();
        let x = input.data();
        let mut cols = vec![0.0; self.in_c * ntaps * ncols];
        self.for_each_sample(offsets, clamp, |b, p, n, taps, _, _| {
            let col = b * plane_out + p;
            for c in 0..self.in_c {
                let src = &x[(b * self.in_c + c) * plane_in..][..plane_in];
                cols[(c * ntaps + n) * ncols + col] = taps.value(src);
            }
        });
        cols
    }
}

/// Deformable convolution with an externally supplied offset field.
pub fn dc_forward_with_offsets(
    input: &Tensor,
    main: &ConvParams,
    offsets: &OffsetField,
    clamp: Option<f64>,
) -> Result<Tensor> {
    let s = Sampling::check("dc_forward", input, main, offsets)?;
    let cols = s.columns(input, offsets.tensor(), clamp);
    Ok(apply_weights(
        &cols,
        &main.weight,
        &main.bias,
        s.batch,
        s.out_h,
        s.out_w,
    ))
}

/// Returns the output and the offset field it was sampled with.
pub fn dc_forward(input: &Tensor, layer: &DeformConvLayer) -> Result<(Tensor, OffsetField)> {
    layer.validate()?;
    let offsets = OffsetField::new(conv2d(input, &layer.offset_branch)?)?;
    let out = dc_forward_with_offsets(input, &layer.main, &offsets, layer.clamp_bound())?;
    Ok((out, offsets))
}

/// Gradients with the offset field held as an independent input: `d_input`
/// covers only the sampling path, `d_offsets` is populated.
pub fn dc_backward_fixed_offsets(
    input: &Tensor,
    main: &ConvParams,
    offsets: &OffsetField,
    clamp: Option<f64>,
    upstream: &Tensor,
) -> Result<GradBundle> {
    let s = Sampling::check("dc_backward", input, main, offsets)?;
    let expected = [s.batch, main.out_channels(), s.out_h, s.out_w];
    if upstream.shape() != expected {
        return Err(Error::shape(
            "dc_backward",
            format!(
                "upstream {:?} differs from output shape {expected:?}",
                upstream.shape()
            ),
        ));
    }
    let cols = s.columns(input, offsets.tensor(), clamp);
    let (d_cols, d_weights, d_bias) = apply_weights_backward(&cols, &main.weight, upstream);

    let ncols = s.ncols();
    let plane_in = s.height * s.width;
    let plane_out = s.plane_out();
    let ntaps = s.taps();
    let x = input.data();
    let mut d_input = input.zeros_like();
    let mut d_offsets = offsets.tensor().zeros_like();
    let sign = if FLIP_OFFSET_GRAD.with(|f| f.get()) {
        -1.0
    } else {
        1.0
    };
    {
        let di = d_input.data_mut();
        let doff = d_offsets.data_mut();
        s.for_each_sample(offsets.tensor(), clamp, |b, p, n, taps, cy, cx| {
            let col = b * plane_out + p;
            let (mut gy, mut gx) = (0.0, 0.0);
            for c in 0..s.in_c {
                let g = d_cols[(c * ntaps + n) * ncols + col];
                if g == 0.0 {
                    continue;
                }
                let base = (b * s.in_c + c) * plane_in;
                taps.scatter(&mut di[base..base + plane_in], g);
                let (sy, sx) = taps.coord_grads(&x[base..base + plane_in]);
                gy += g * sy;
                gx += g * sx;
            }
            let oy = (b * 2 * ntaps + 2 * n) * plane_out + p;
            let ox = (b * 2 * ntaps + 2 * n + 1) * plane_out + p;
            doff[oy] = if cy { 0.0 } else { sign * gy };
            doff[ox] = if cx { 0.0 } else { sign * gx };
        });
    }
    Ok(GradBundle {
        d_input,
        d_weights,
        d_bias,
        d_offsets: Some(d_offsets),
    })
}

/// Full backward: the input gradient sums the sampling path and the path
/// through the offset branch.
pub fn dc_backward(
    input: &Tensor,
    layer: &DeformConvLayer,
    offsets: &OffsetField,
    upstream: &Tensor,
) -> Result<DeformGrads> {
    layer.validate()?;
    let direct =
        dc_backward_fixed_offsets(input, &layer.main, offsets, layer.clamp_bound(), upstream)?;
    let d_offsets = direct.d_offsets.expect("offset gradient is always populated");
    let branch = conv2d_backward(input, &layer.offset_branch, &d_offsets)?;
    let mut d_input = direct.d_input;
    add_assign(&mut d_input, &branch.d_input)?;
    Ok(DeformGrads {
        d_input,
        d_weights: direct.d_weights,
        d_bias: direct.d_bias,
        d_offsets,
        d_offset_weights: branch.d_weights,
        d_offset_bias: branch.d_bias,
    })
}

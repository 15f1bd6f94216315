use super::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Concatenates rank-4 maps along the channel axis, preserving input order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total_c * plane);
    for bi in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], data)
}

/// Splits a map into consecutive channel ranges; the backward of
/// [`concat_channels`].
pub fn split_channels(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (b, c, h, w) = input.dims4()?;
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {sizes:?} do not partition {c} channels"),
        ));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f64>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(b * s * plane))
        .collect();
    for bi in 0..b {
        let mut start = 0;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            let base = (bi * c + start) * plane;
            part.extend_from_slice(&input.data()[base..base + s * plane]);
            start += s;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor::new(vec![b, s, h, w], data))
        .collect()
}

pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        for y in 0..oh {
            let srow = &src[(p * h + y / 2) * w..][..w];
            let drow = &mut dst[(p * oh + y) * ow..][..ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    Ok(out)
}

/// Sums each 2×2 block of the upstream gradient into one cell.
pub fn upsample_nearest2x_backward(upstream: &Tensor) -> Result<Tensor> {
    let (b, c, oh, ow) = upstream.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape(
            "upsample_nearest2x_backward",
            format!("upstream spatial size {oh}x{ow} is not even"),
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let src = upstream.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        for y in 0..oh {
            let srow = &src[(p * oh + y) * ow..][..ow];
            let drow = &mut dst[(p * h + y / 2) * w..][..w];
            for (x, g) in srow.iter().enumerate() {
                drow[x / 2] += g;
            }
        }
    }
    Ok(out)
}

fn pool_dims(op: &'static str, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            op,
            format!("spatial size {h}x{w} must be even for 2x2 pooling"),
        ));
    }
    Ok((b, c, h, w))
}

/// Row-major position of the block maximum; the first one wins ties.
#[inline]
fn block_argmax(src: &[f64], w: usize, y: usize, x: usize) -> usize {
    let cands = [
        2 * y * w + 2 * x,
        2 * y * w + 2 * x + 1,
        (2 * y + 1) * w + 2 * x,
        (2 * y + 1) * w + 2 * x + 1,
    ];
    let mut best = cands[0];
    for &i in &cands[1..] {
        if src[i] > src[best] {
            best = i;
        }
    }
    best
}

pub fn downsample_maxpool2x(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = pool_dims("downsample_maxpool2x", input)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for p in 0..b * c {
        let src = &input.data()[p * h * w..][..h * w];
        let dst = &mut out.data_mut()[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[block_argmax(src, w, y, x)];
            }
        }
    }
    Ok(out)
}

/// Routes each upstream value to the argmax of its 2×2 input block.
pub fn downsample_maxpool2x_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = pool_dims("downsample_maxpool2x_backward", input)?;
    let (oh, ow) = (h / 2, w / 2);
    if upstream.shape() != [b, c, oh, ow] {
        return Err(Error::shape(
            "downsample_maxpool2x_backward",
            format!(
                "upstream {:?} vs pooled {:?}",
                upstream.shape(),
                [b, c, oh, ow]
            ),
        ));
    }
    let mut d_input = input.zeros_like();
    for p in 0..b * c {
        let src = &input.data()[p * h * w..][..h * w];
        let up = &upstream.data()[p * oh * ow..][..oh * ow];
        let dst = &mut d_input.data_mut()[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[block_argmax(src, w, y, x)] += up[y * ow + x];
            }
        }
    }
    Ok(d_input)
}

pub fn leaky_relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    out
}

/// `pre` is the activation's input.
pub fn leaky_relu_backward(pre: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if pre.shape() != upstream.shape() {
        return Err(Error::shape(
            "leaky_relu_backward",
            format!("{:?} vs {:?}", pre.shape(), upstream.shape()),
        ));
    }
    let mut out = upstream.clone();
    for (g, x) in out.data_mut().iter_mut().zip(pre.data()) {
        if *x < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    Ok(out)
}

use super::Tensor;

/// The four grid neighbours of a fractional position and their weights.
///
/// Corners are ordered `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`. Neighbours outside
/// the map are marked invalid and read as zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub valid: [bool; 4],
    fy: f64,
    fx: f64,
}

impl BilinearTaps {
    pub fn new(height: usize, width: usize, y: f64, x: f64) -> Self {
        let mut taps = BilinearTaps {
            index: [0; 4],
            weight: [0.0; 4],
            valid: [false; 4],
            fy: 0.0,
            fx: 0.0,
        };
        // far outside (or NaN): every neighbour is padding
        let inside = y > -2.0 && x > -2.0 && y < height as f64 + 1.0 && x < width as f64 + 1.0;
        if !inside {
            return taps;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        taps.fy = fy;
        taps.fx = fx;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ];
        for (i, &(cy, cx, w)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < height && (cx as usize) < width {
                taps.index[i] = cy as usize * width + cx as usize;
                taps.weight[i] = w;
                taps.valid[i] = true;
            }
        }
        taps
    }

    #[inline]
    fn corner(&self, plane: &[f64], i: usize) -> f64 {
        if self.valid[i] {
            plane[self.index[i]]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn value(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..4 {
            if self.valid[i] {
                v += self.weight[i] * plane[self.index[i]];
            }
        }
        v
    }

    /// Partial derivatives of [`value`](Self::value) w.r.t. `(y, x)`.
    #[inline]
    pub fn coord_grads(&self, plane: &[f64]) -> (f64, f64) {
        let v00 = self.corner(plane, 0);
        let v01 = self.corner(plane, 1);
        let v10 = self.corner(plane, 2);
        let v11 = self.corner(plane, 3);
        let dy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }

    #[inline]
    pub fn scatter(&self, d_plane: &mut [f64], upstream: f64) {
        for i in 0..4 {
            if self.valid[i] {
                d_plane[self.index[i]] += upstream * self.weight[i];
            }
        }
    }
}

fn plane_dims(map: &Tensor) -> (usize, usize) {
    match map.shape() {
        [h, w] => (*h, *w),
        s => panic!("bilinear sampling expects a single (H, W) plane, got {s:?}"),
    }
}

/// Bilinear interpolation of a single `(H, W)` plane at fractional `(y, x)`.
/// Neighbours outside the plane read as zero.
pub fn bilinear_sample(map: &Tensor, y: f64, x: f64) -> f64 {
    let (h, w) = plane_dims(map);
    BilinearTaps::new(h, w, y, x).value(map.data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrads {
    /// `(flat index, upstream · corner weight)` for each in-bounds corner.
    pub d_map: Vec<(usize, f64)>,
    pub d_y: f64,
    pub d_x: f64,
}

pub fn bilinear_sample_grads(map: &Tensor, y: f64, x: f64, upstream: f64) -> SampleGrads {
    let (h, w) = plane_dims(map);
    let taps = BilinearTaps::new(h, w, y, x);
    let (dy, dx) = taps.coord_grads(map.data());
    let d_map = (0..4)
        .filter(|&i| taps.valid[i])
        .map(|i| (taps.index[i], upstream * taps.weight[i]))
        .collect();
    SampleGrads {
        d_map,
        d_y: upstream * dy,
        d_x: upstream * dx,
    }
}

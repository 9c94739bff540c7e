//! Bilinear resampling of planes through arbitrary sampling grids, with the
//! exact adjoint, plus separable Gaussian smoothing.

use ndarray::{Array2, ArrayView2};

/// For each output pixel, the four source taps and their bilinear weights.
#[derive(Clone, Debug)]
pub struct SamplingGrid {
    h: usize,
    w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl SamplingGrid {
    /// Builds a grid from a function giving the (fractional) source coordinate of
    /// each output pixel. Sources outside the plane are clamped to the edge.
    pub fn from_fn(h: usize, w: usize, mut source: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let idx = |yy: usize, xx: usize| (yy * w + xx) as u32;
                taps.push([
                    (idx(y0, x0), (1.0 - fy) * (1.0 - fx)),
                    (idx(y0, x1), (1.0 - fy) * fx),
                    (idx(y1, x0), fy * (1.0 - fx)),
                    (idx(y1, x1), fy * fx),
                ]);
            }
        }
        Self { h, w, taps }
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`, then a shift.
    /// Output pixel p samples the source at `center + R(-angle) (p - center - shift) / scale`.
    pub fn affine(
        h: usize,
        w: usize,
        center: (f64, f64),
        angle: f64,
        scale: f64,
        shift: (f64, f64),
    ) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_fn(h, w, |y, x| {
            let dy = (y as f64 - center.0 - shift.0) / scale;
            let dx = (x as f64 - center.1 - shift.1) / scale;
            (center.0 + c * dy - s * dx, center.1 + s * dy + c * dx)
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn apply(&self, src: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(src.dim(), (self.h, self.w), "sampling grid shape mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let out = self
            .taps
            .iter()
            .map(|t| t.iter().map(|&(i, wt)| flat[i as usize] * wt).sum())
            .collect();
        Array2::from_shape_vec((self.h, self.w), out).expect("grid size")
    }

    /// Transpose of [`SamplingGrid::apply`].
    pub fn adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(grad.dim(), (self.h, self.w), "sampling grid shape mismatch");
        let mut out = vec![0.0; self.h * self.w];
        for (t, &g) in self.taps.iter().zip(grad.iter()) {
            for &(i, wt) in t {
                out[i as usize] += wt * g;
            }
        }
        Array2::from_shape_vec((self.h, self.w), out).expect("grid size")
    }
}

/// Separable Gaussian blur with edge clamping. `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(src: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = src.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * src[[y, clampi(x as isize + j as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * rows[[clampi(y as isize + j as isize - radius, h), x]])
            .sum::<f64>()
    })
}

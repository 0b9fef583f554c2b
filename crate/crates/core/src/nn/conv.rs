//! 3D convolution and stride-2 transposed convolution, im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Array5, ArrayView2, ArrayView4, ArrayViewMut2};

use super::Scalar;

/// Cubic-kernel 3D convolution with uniform stride and zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d<F> {
    /// (c_out, c_in, k, k, k)
    pub weight: Array5<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv3d<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array5::zeros((c_out, c_in, kernel, kernel, kernel)),
            bias: Array1::zeros(c_out),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_spatial(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding);
        (
            (d + 2 * p - k) / s + 1,
            (h + 2 * p - k) / s + 1,
            (w + 2 * p - k) / s + 1,
        )
    }

    /// y = W * im2col(x) + b for one item (c_in, D, H, W).
    pub fn forward(&self, x: &ArrayView4<F>) -> Array4<F> {
        let sh = x.shape();
        let (c_in, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let c_out = self.weight.shape()[0];
        debug_assert_eq!(c_in, self.weight.shape()[1]);
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let ov = od * oh * ow;
        let k = self.kernel();
        let rows = c_in * k * k * k;

        let cols = im2col(x, k, self.stride, self.padding, (od, oh, ow));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, rows))
            .expect("contiguous weight");

        let mut y2 = Array2::<F>::zeros((c_out, ov));
        general_mat_mul(F::one(), &w2, &cols.view(), F::zero(), &mut y2);
        for (mut row, &b) in y2.rows_mut().into_iter().zip(self.bias.iter()) {
            for v in row.iter_mut() {
                *v += b;
            }
        }
        y2.into_shape_with_order((c_out, od, oh, ow)).expect("reshape output")
    }

    /// Accumulates dW into `dw` (flat, weight layout) and db into `db`;
    /// returns dx.
    pub fn backward(
        &self,
        x: &ArrayView4<F>,
        dy: &ArrayView4<F>,
        dw: &mut [F],
        db: &mut [F],
    ) -> Array4<F> {
        let sh = x.shape();
        let (c_in, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let osh = dy.shape();
        let (c_out, od, oh, ow) = (osh[0], osh[1], osh[2], osh[3]);
        let ov = od * oh * ow;
        let k = self.kernel();
        let rows = c_in * k * k * k;

        let dy2 = dy
            .to_owned()
            .into_shape_with_order((c_out, ov))
            .expect("contiguous dy");

        // db
        for (acc, row) in db.iter_mut().zip(dy2.rows()) {
            let mut s = F::zero();
            for &v in row.iter() {
                s += v;
            }
            *acc += s;
        }

        // dW += dy2 . cols^T
        let cols = im2col(x, k, self.stride, self.padding, (od, oh, ow));
        let mut dw2 = ArrayViewMut2::from_shape((c_out, rows), dw).expect("dw slot size");
        general_mat_mul(F::one(), &dy2.view(), &cols.t(), F::one(), &mut dw2);

        // dx = col2im(W^T . dy2)
        let w2: ArrayView2<F> = self
            .weight
            .view()
            .into_shape_with_order((c_out, rows))
            .expect("contiguous weight");
        let mut dcols = Array2::<F>::zeros((rows, ov));
        general_mat_mul(F::one(), &w2.t(), &dy2.view(), F::zero(), &mut dcols);
        col2im(
            &dcols,
            (c_in, d, h, w),
            k,
            self.stride,
            self.padding,
            (od, oh, ow),
        )
    }

    pub fn param_sizes(&self) -> [usize; 2] {
        [self.weight.len(), self.bias.len()]
    }
}

/// Gather (c_in*k^3, out_voxels) patch matrix; out-of-bounds reads are zero.
fn im2col<F: Scalar>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    padding: usize,
    (od, oh, ow): (usize, usize, usize),
) -> Array2<F> {
    let sh = x.shape();
    let (c_in, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let ov = od * oh * ow;
    let mut cols = Array2::<F>::zeros((c_in * k * k * k, ov));
    let xs = x.as_slice().expect("standard-layout input");
    let cs = cols.as_slice_mut().unwrap();

    let p = padding as isize;
    let mut row = 0usize;
    for ci in 0..c_in {
        let x_ch = ci * d * h * w;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row_off = row * ov;
                    for odi in 0..od {
                        let di = (odi * stride) as isize - p + kd as isize;
                        if di < 0 || di >= d as isize {
                            continue; // zero padding
                        }
                        let x_d = x_ch + di as usize * h * w;
                        for ohi in 0..oh {
                            let hi = (ohi * stride) as isize - p + kh as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let x_h = x_d + hi as usize * w;
                            let c_base = row_off + (odi * oh + ohi) * ow;
                            // Valid ow range: 0 <= owi*stride - p + kw < w
                            let shift = kw as isize - p;
                            let lo = if shift < 0 {
                                ((-shift) as usize).div_ceil(stride)
                            } else {
                                0
                            };
                            let hi_excl = {
                                let top = w as isize - shift; // owi*stride < top
                                if top <= 0 {
                                    0
                                } else {
                                    (((top - 1) as usize) / stride + 1).min(ow)
                                }
                            };
                            if lo >= hi_excl {
                                continue;
                            }
                            if stride == 1 {
                                let src0 = (x_h as isize + lo as isize + shift) as usize;
                                let n = hi_excl - lo;
                                cs[c_base + lo..c_base + lo + n]
                                    .copy_from_slice(&xs[src0..src0 + n]);
                            } else {
                                for owi in lo..hi_excl {
                                    let wi = (owi * stride) as isize + shift;
                                    cs[c_base + owi] = xs[x_h + wi as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back to input layout (inverse of im2col).
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    (c_in, d, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (od, oh, ow): (usize, usize, usize),
) -> Array4<F> {
    let ov = od * oh * ow;
    let mut dx = Array4::<F>::zeros((c_in, d, h, w));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcols.as_slice().expect("standard-layout cols");

    let p = padding as isize;
    let mut row = 0usize;
    for ci in 0..c_in {
        let x_ch = ci * d * h * w;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row_off = row * ov;
                    for odi in 0..od {
                        let di = (odi * stride) as isize - p + kd as isize;
                        if di < 0 || di >= d as isize {
                            continue;
                        }
                        let x_d = x_ch + di as usize * h * w;
                        for ohi in 0..oh {
                            let hi = (ohi * stride) as isize - p + kh as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let x_h = x_d + hi as usize * w;
                            let c_base = row_off + (odi * oh + ohi) * ow;
                            let shift = kw as isize - p;
                            let lo = if shift < 0 {
                                ((-shift) as usize).div_ceil(stride)
                            } else {
                                0
                            };
                            let hi_excl = {
                                let top = w as isize - shift;
                                if top <= 0 {
                                    0
                                } else {
                                    (((top - 1) as usize) / stride + 1).min(ow)
                                }
                            };
                            for owi in lo..hi_excl {
                                let wi = (owi * stride) as isize + shift;
                                ds[x_h + wi as usize] += cs[c_base + owi];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d<F> {
    /// (c_in, c_out, 2, 2, 2)
    pub weight: Array5<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> ConvTranspose3d<F> {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Array5::zeros((c_in, c_out, 2, 2, 2)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> Array4<F> {
        let sh = x.shape();
        let (c_in, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let c_out = self.weight.shape()[1];
        let v = d * h * w;

        let x2 = x
            .to_owned()
            .into_shape_with_order((c_in, v))
            .expect("contiguous input");
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 8))
            .expect("contiguous weight");
        let mut y2 = Array2::<F>::zeros((c_out * 8, v));
        general_mat_mul(F::one(), &w2.t(), &x2.view(), F::zero(), &mut y2);

        let mut y = Array4::<F>::zeros((c_out, 2 * d, 2 * h, 2 * w));
        {
            let ys = y.as_slice_mut().unwrap();
            let y2s = y2.as_slice().unwrap();
            let (hh, ww) = (2 * h, 2 * w);
            for co in 0..c_out {
                let b = self.bias[co];
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let r = ((co * 2 + kd) * 2 + kh) * 2 + kw;
                            let r_off = r * v;
                            for di in 0..d {
                                for hi in 0..h {
                                    let src = r_off + (di * h + hi) * w;
                                    let dst = co * (2 * d) * hh * ww
                                        + (2 * di + kd) * hh * ww
                                        + (2 * hi + kh) * ww
                                        + kw;
                                    for wi in 0..w {
                                        ys[dst + 2 * wi] = y2s[src + wi] + b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &ArrayView4<F>,
        dy: &ArrayView4<F>,
        dw: &mut [F],
        db: &mut [F],
    ) -> Array4<F> {
        let sh = x.shape();
        let (c_in, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let c_out = self.weight.shape()[1];
        let v = d * h * w;

        // Gather dy into GEMM layout (c_out*8, v); also reduce db.
        let mut dy2 = Array2::<F>::zeros((c_out * 8, v));
        {
            let dys = dy.as_slice().expect("standard-layout dy");
            let d2 = dy2.as_slice_mut().unwrap();
            let (hh, ww) = (2 * h, 2 * w);
            for co in 0..c_out {
                let mut bsum = F::zero();
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let r = ((co * 2 + kd) * 2 + kh) * 2 + kw;
                            let r_off = r * v;
                            for di in 0..d {
                                for hi in 0..h {
                                    let dst = r_off + (di * h + hi) * w;
                                    let src = co * (2 * d) * hh * ww
                                        + (2 * di + kd) * hh * ww
                                        + (2 * hi + kh) * ww
                                        + kw;
                                    for wi in 0..w {
                                        let g = dys[src + 2 * wi];
                                        d2[dst + wi] = g;
                                        bsum += g;
                                    }
                                }
                            }
                        }
                    }
                }
                db[co] += bsum;
            }
        }

        let x2 = x
            .to_owned()
            .into_shape_with_order((c_in, v))
            .expect("contiguous input");

        // dW += x2 . dy2^T
        let mut dw2 = ArrayViewMut2::from_shape((c_in, c_out * 8), dw).expect("dw slot size");
        general_mat_mul(F::one(), &x2.view(), &dy2.t(), F::one(), &mut dw2);

        // dx = W . dy2
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 8))
            .expect("contiguous weight");
        let mut dx2 = Array2::<F>::zeros((c_in, v));
        general_mat_mul(F::one(), &w2, &dy2.view(), F::zero(), &mut dx2);
        dx2.into_shape_with_order((c_in, d, h, w)).expect("reshape dx")
    }

    pub fn param_sizes(&self) -> [usize; 2] {
        [self.weight.len(), self.bias.len()]
    }
}

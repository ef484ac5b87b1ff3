//! Raw compute kernels over flat row-major buffers.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use crate::error::{shape_err, Result};

/// Geometry of a grouped, strided, zero-padded 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input and weight, got {x_shape:?} and {w_shape:?}"));
        }
        if stride == 0 || groups == 0 {
            return Err(shape_err!("conv2d stride and groups must be positive"));
        }
        let (cin, cout) = (x_shape[1], w_shape[0]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err!("channels {cin}->{cout} not divisible by groups {groups}"));
        }
        if w_shape[1] != cin / groups {
            return Err(shape_err!(
                "weight {w_shape:?} expects {} input channels per group, input {x_shape:?} has {}",
                w_shape[1],
                cin / groups
            ));
        }
        let g = Self {
            batch: x_shape[0],
            in_channels: cin,
            in_h: x_shape[2],
            in_w: x_shape[3],
            out_channels: cout,
            kernel_h: w_shape[2],
            kernel_w: w_shape[3],
            stride,
            padding,
            groups,
        };
        if g.in_h + 2 * padding < g.kernel_h || g.in_w + 2 * padding < g.kernel_w {
            return Err(shape_err!("kernel {w_shape:?} larger than padded input {x_shape:?}"));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_h() * self.out_w()) as u64
            * (self.kernel_h * self.kernel_w * self.in_channels / self.groups) as u64
    }

    /// Visits every (output offset, input offset, weight offset) triple that
    /// contributes to the cross-correlation, skipping padded taps.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        for b in 0..self.batch {
            for oc in 0..self.out_channels {
                let g = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = ((b * self.out_channels + oc) * oh + oy) * ow + ox;
                        for icg in 0..cin_g {
                            let ic = g * cin_g + icg;
                            for ky in 0..kh {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= self.in_h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix < 0 || ix >= self.in_w as isize {
                                        continue;
                                    }
                                    let i = ((b * self.in_channels + ic) * self.in_h + iy as usize) * self.in_w + ix as usize;
                                    let w = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                                    f(o, i, w);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> alloc::vec::Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = alloc::vec![0.0; g.batch * g.out_channels * plane];
    if let Some(bias) = bias {
        for (k, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[k % g.out_channels]);
        }
    }
    g.for_each_tap(|o, i, wi| out[o] += x[i] * w[wi]);
    out
}

/// Gradients of the cross-correlation with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (alloc::vec::Vec<f64>, alloc::vec::Vec<f64>, alloc::vec::Vec<f64>) {
    let mut dx = alloc::vec![0.0; x.len()];
    let mut dw = alloc::vec![0.0; w.len()];
    g.for_each_tap(|o, i, wi| {
        dx[i] += w[wi] * dy[o];
        dw[wi] += x[i] * dy[o];
    });
    let plane = g.out_h() * g.out_w();
    let mut db = alloc::vec![0.0; g.out_channels];
    for (k, chunk) in dy.chunks(plane).enumerate() {
        db[k % g.out_channels] += chunk.iter().sum::<f64>();
    }
    (dx, dw, db)
}

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j loop order.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += dy[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(dy: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&d, &bv) in dyrow.iter().zip(brow) {
                acc += d * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · dy[m×n]`
pub fn matmul_tn_acc(a: &[f64], dy: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &d) in orow.iter_mut().zip(dyrow) {
                *o += av * d;
            }
        }
    }
}

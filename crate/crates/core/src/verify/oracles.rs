//! Naive loop implementations used as independent references. They share no
//! code with the kernels they check.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Direct cross-correlation: `x (B,Cin,H,W)`, `w (Cout,Cin/groups,k,k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize, groups: usize) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    for bi in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ci in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                let ix = (xo * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[bi, g * cpg + ci, iy as usize, ix as usize]) * w.get(&[o, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[bi, o, y, xo], acc);
                }
            }
        }
    }
    out
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.get(&[r, c]) * x[c]).sum::<f64>()).collect()
}

/// Multi-head self-attention computed one head and one query at a time.
pub fn mhsa(x: &Tensor, qkv_w: &Tensor, qkv_b: &Tensor, proj_w: &Tensor, proj_b: &Tensor, heads: usize) -> Tensor {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut out = Tensor::zeros(&[b, n, c]);
    for bi in 0..b {
        let proj: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let row: Vec<f64> = (0..c).map(|j| x.get(&[bi, t, j])).collect();
                affine(&row, qkv_w, qkv_b)
            })
            .collect();
        for t in 0..n {
            let mut ctx = vec![0.0; c];
            for hd in 0..heads {
                let q = |s: usize, j: usize| proj[s][hd * d + j];
                let k = |s: usize, j: usize| proj[s][c + hd * d + j];
                let v = |s: usize, j: usize| proj[s][2 * c + hd * d + j];
                let scores: Vec<f64> = (0..n).map(|s| scale * (0..d).map(|j| q(t, j) * k(s, j)).sum::<f64>()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - m)).collect();
                let z: f64 = e.iter().sum();
                for j in 0..d {
                    ctx[hd * d + j] = (0..n).map(|s| e[s] / z * v(s, j)).sum();
                }
            }
            for (j, y) in affine(&ctx, proj_w, proj_b).into_iter().enumerate() {
                out.set(&[bi, t, j], y);
            }
        }
    }
    out
}

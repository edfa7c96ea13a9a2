//! Convolution, pooling and the grid-to-token reshape.

use super::tape::GradStore;
use super::{expect_rank, Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Valid output-column range for a kernel column so the input index stays in
/// bounds: returns ox in [lo, hi) with ix = ox*stride + kx - pad in [0, w).
fn out_bounds(kx: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_num = in_w + pad;
    let hi = if hi_num > kx {
        (((hi_num - kx - 1) / stride) + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_forward<F: Real>(
    x: &[F],
    w: &[F],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [F],
) {
    for b in 0..n {
        for oc in 0..co {
            let out_base = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let in_base = (b * ci + ic) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((oc * ci + ic) * kh + ky) * kw + kx];
                        if wv.is_zero() {
                            continue;
                        }
                        let (xlo, xhi) = out_bounds(kx, pad, stride, wd, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * wd;
                            let out_row = out_base + oy * ow;
                            for ox in xlo..xhi {
                                let ix = ox * stride + kx - pad;
                                out[out_row + ox] += wv * x[in_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> Tape<F> {
    /// 2-D cross-correlation over NCHW input.
    pub fn conv2d(
        &self,
        x: &Tensor<F>,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<F>> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", weight, 4)?;
        let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, wci, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wci != ci {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {} vs kernel channels {}", ci, wci),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive".to_string()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        if let Some(b) = bias {
            if b.numel() != co {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} vs {} output channels", b.shape(), co),
                ));
            }
        }

        let mut data = vec![F::zero(); n * co * oh * ow];
        if let Some(b) = bias {
            for bi in 0..n {
                for oc in 0..co {
                    let base = (bi * co + oc) * oh * ow;
                    let bv = b.data()[oc];
                    if !bv.is_zero() {
                        for v in &mut data[base..base + oh * ow] {
                            *v = bv;
                        }
                    }
                }
            }
        }
        conv_forward(
            x.data(),
            weight.data(),
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut data,
        );

        let (xn, wn) = (x.node(), weight.node());
        let bn = bias.and_then(|b| b.node());
        let (xd, wdta) = (x.data_arc(), weight.data_arc());
        let tracked = xn.is_some() || wn.is_some() || bn.is_some();
        let node = self.record(tracked, data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(bn, |db| {
                    for bi in 0..n {
                        for oc in 0..co {
                            let base = (bi * co + oc) * oh * ow;
                            let mut s = F::zero();
                            for &gv in &g[base..base + oh * ow] {
                                s += gv;
                            }
                            db[oc] += s;
                        }
                    }
                });
                store.accum(xn, |dx| {
                    // dx[iy,ix] += g[oy,ox] * w[ky,kx]
                    for b in 0..n {
                        for oc in 0..co {
                            let g_base = (b * co + oc) * oh * ow;
                            for ic in 0..ci {
                                let x_base = (b * ci + ic) * h * w;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let wv = wdta[((oc * ci + ic) * kh + ky) * kw + kx];
                                        if wv.is_zero() {
                                            continue;
                                        }
                                        let (xlo, xhi) = out_bounds(kx, pad, stride, w, ow);
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let x_row = x_base + iy as usize * w;
                                            let g_row = g_base + oy * ow;
                                            for ox in xlo..xhi {
                                                let ix = ox * stride + kx - pad;
                                                dx[x_row + ix] += wv * g[g_row + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                store.accum(wn, |dw| {
                    for b in 0..n {
                        for oc in 0..co {
                            let g_base = (b * co + oc) * oh * ow;
                            for ic in 0..ci {
                                let x_base = (b * ci + ic) * h * w;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let (xlo, xhi) = out_bounds(kx, pad, stride, w, ow);
                                        let mut s = F::zero();
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let x_row = x_base + iy as usize * w;
                                            let g_row = g_base + oy * ow;
                                            for ox in xlo..xhi {
                                                let ix = ox * stride + kx - pad;
                                                s += g[g_row + ox] * xd[x_row + ix];
                                            }
                                        }
                                        dw[((oc * ci + ic) * kh + ky) * kw + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[n, co, oh, ow])?.with_node(node))
    }

    /// 2x2 max pooling, stride 2. Ties route the gradient to the first
    /// element in (dy, dx) scan order.
    pub fn maxpool2(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("maxpool2", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "maxpool2",
                format!("spatial dims {}x{} not divisible by 2", h, w),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![F::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for bc in 0..n * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = in_base + (oy * 2 + dy) * w + ox * 2 + dx;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        let xn = x.node();
        let node = self.record(xn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(xn, |dx| {
                    for (i, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[i];
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[n, c, oh, ow])?.with_node(node))
    }

    /// Flatten a [1,C,H,W] feature map into [H*W, C] token rows.
    pub fn grid_to_tokens(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("grid_to_tokens", x, 4)?;
        if x.shape()[0] != 1 {
            return Err(Error::dim(
                "grid_to_tokens",
                format!("expected batch 1, got {:?}", x.shape()),
            ));
        }
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = h * w;
        let mut data = vec![F::zero(); k * c];
        for ch in 0..c {
            for pix in 0..k {
                data[pix * c + ch] = x.data()[ch * k + pix];
            }
        }
        let xn = x.node();
        let node = self.record(xn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(xn, |dx| {
                    for ch in 0..c {
                        for pix in 0..k {
                            dx[ch * k + pix] += g[pix * c + ch];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[k, c])?.with_node(node))
    }
}

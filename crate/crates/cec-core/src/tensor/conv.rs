//! Convolution, pooling, and layout ops for the small image encoder.
//! Stride is fixed at 1; downsampling is done by average pooling so the
//! whole encoder stays smooth for finite-difference checks.

use super::Tensor;
use crate::error::{CecError, Result};
use crate::scalar::Scalar;

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    pad: usize,
}

fn conv_forward<S: Scalar>(x: &[S], wgt: &[S], bias: &[S], d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.c_out * d.h_out * d.w_out];
    for o in 0..d.c_out {
        let plane = &mut out[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        let b = bias[o];
        for v in plane.iter_mut() {
            *v = b;
        }
    }
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = wgt[((o * d.c_in + c) * d.kh + ky) * d.kw + kx];
                    // ox + kx - pad must land inside the input row
                    let ox_lo = d.pad.saturating_sub(kx);
                    let ox_hi = (d.w + d.pad - kx).min(d.w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = oy + ky;
                        if iy < d.pad || iy - d.pad >= d.h {
                            continue;
                        }
                        let in_row = &x[(c * d.h + iy - d.pad) * d.w..];
                        let out_row = &mut out[(o * d.h_out + oy) * d.w_out..][ox_lo..ox_hi];
                        let in_seg = &in_row[ox_lo + kx - d.pad..ox_hi + kx - d.pad];
                        for (ov, &iv) in out_row.iter_mut().zip(in_seg) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<S: Scalar>(
    g: &[S],
    x: &[S],
    wgt: &[S],
    d: &ConvDims,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::zero(); d.c_in * d.h * d.w];
    let mut dw = vec![S::zero(); d.c_out * d.c_in * d.kh * d.kw];
    let mut db = vec![S::zero(); d.c_out];
    for o in 0..d.c_out {
        let plane = &g[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        let mut acc = S::zero();
        for &v in plane {
            acc += v;
        }
        db[o] = acc;
    }
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let widx = ((o * d.c_in + c) * d.kh + ky) * d.kw + kx;
                    let wv = wgt[widx];
                    let ox_lo = d.pad.saturating_sub(kx);
                    let ox_hi = (d.w + d.pad - kx).min(d.w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut wacc = S::zero();
                    for oy in 0..d.h_out {
                        let iy = oy + ky;
                        if iy < d.pad || iy - d.pad >= d.h {
                            continue;
                        }
                        let g_row = &g[(o * d.h_out + oy) * d.w_out..][ox_lo..ox_hi];
                        let x_base = (c * d.h + iy - d.pad) * d.w + ox_lo + kx - d.pad;
                        let x_seg = &x[x_base..x_base + (ox_hi - ox_lo)];
                        let dx_seg = &mut dx[x_base..x_base + (ox_hi - ox_lo)];
                        for ((dxv, &gv), &xv) in dx_seg.iter_mut().zip(g_row).zip(x_seg) {
                            *dxv += wv * gv;
                            wacc += gv * xv;
                        }
                    }
                    dw[widx] = wacc;
                }
            }
        }
    }
    (dx, dw, db)
}

impl<S: Scalar> Tensor<S> {
    /// 2-d convolution over a single [C, H, W] image with an [O, C, kh, kw]
    /// kernel, [O] bias, symmetric zero padding, stride 1.
    pub fn conv2d(&self, weight: &Tensor<S>, bias: &Tensor<S>, pad: usize) -> Result<Tensor<S>> {
        let (c_in, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(CecError::Dimension(format!(
                    "conv2d input must be [C, H, W], got {other:?}"
                )))
            }
        };
        let (c_out, c_in2, kh, kw) = match weight.shape() {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            other => {
                return Err(CecError::Dimension(format!(
                    "conv2d weight must be [O, C, kh, kw], got {other:?}"
                )))
            }
        };
        if c_in != c_in2 || bias.shape() != [c_out] {
            return Err(CecError::Dimension(format!(
                "conv2d channel mismatch: input {:?}, weight {:?}, bias {:?}",
                self.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(CecError::Dimension(
                "conv2d kernel larger than padded input".into(),
            ));
        }
        let d = ConvDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out: h + 2 * pad - kh + 1,
            w_out: w + 2 * pad - kw + 1,
            pad,
        };
        let out = conv_forward(self.data(), weight.data(), bias.data(), &d);
        let shape = vec![c_out, d.h_out, d.w_out];
        let (x, wv) = (self.data_rc(), weight.data_rc());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g| {
                let dd = ConvDims {
                    c_in,
                    h,
                    w,
                    c_out,
                    kh,
                    kw,
                    h_out: h + 2 * pad - kh + 1,
                    w_out: w + 2 * pad - kw + 1,
                    pad,
                };
                let (dx, dw, db) = conv_backward(g, &x, &wv, &dd);
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// 2x2 average pooling with stride 2 over a [C, H, W] image.
    pub fn avg_pool2(&self) -> Result<Tensor<S>> {
        let (c, h, w) = match self.shape() {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => (*c, *h, *w),
            other => {
                return Err(CecError::Dimension(format!(
                    "avg_pool2 needs even [C, H, W], got {other:?}"
                )))
            }
        };
        let (ho, wo) = (h / 2, w / 2);
        let quarter = S::from_f64_c(0.25);
        let mut out = vec![S::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                let r0 = &self.data()[(ch * h + 2 * oy) * w..][..w];
                let r1 = &self.data()[(ch * h + 2 * oy + 1) * w..][..w];
                let orow = &mut out[(ch * ho + oy) * wo..][..wo];
                for ox in 0..wo {
                    orow[ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(ch * ho + oy) * wo + ox] * quarter;
                            dx[(ch * h + 2 * oy) * w + 2 * ox] = gv;
                            dx[(ch * h + 2 * oy) * w + 2 * ox + 1] = gv;
                            dx[(ch * h + 2 * oy + 1) * w + 2 * ox] = gv;
                            dx[(ch * h + 2 * oy + 1) * w + 2 * ox + 1] = gv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Reorder a [C, H, W] feature volume into patch rows: [H*W, C], row
    /// index y*W + x.
    pub fn chw_to_rows(&self) -> Result<Tensor<S>> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(CecError::Dimension(format!(
                    "chw_to_rows expects [C, H, W], got {other:?}"
                )))
            }
        };
        let hw = h * w;
        let mut out = vec![S::zero(); hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = self.data()[ch * hw + p];
            }
        }
        Ok(Tensor::from_op(
            vec![hw, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = g[p * c + ch];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1-channel 3x3 kernel with a single center one reproduces input
        let x = Tensor::constant(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::constant(vec![1, 1, 3, 3], k).unwrap();
        let b = Tensor::constant(vec![1], vec![0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_valid_shrinks() {
        let x = Tensor::constant(vec![1, 5, 5], vec![1.0; 25]).unwrap();
        let w = Tensor::constant(vec![2, 1, 3, 3], vec![1.0; 18]).unwrap();
        let b = Tensor::constant(vec![2], vec![0.5, -0.5]).unwrap();
        let y = x.conv2d(&w, &b, 0).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert_eq!(y.data()[0], 9.0 + 0.5);
        assert_eq!(y.data()[9], 9.0 - 0.5);
    }

    #[test]
    fn pool_averages_quads() {
        let x = Tensor::constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.avg_pool2().unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn chw_to_rows_layout() {
        let x = Tensor::constant(vec![2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let y = x.chw_to_rows().unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        // patch 0 = (channel values at position 0) = [1, 10]
        assert_eq!(y.data(), &[1.0, 10.0, 2.0, 20.0]);
    }
}

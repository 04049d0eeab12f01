// Raw numeric kernels shared by the forward and backward passes of the tape.
// Everything here works on flat row-major slices; shape validation happens
// one level up in `autograd`.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded patch matrix: one per output pixel per sample.
    pub fn columns(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold `input[B,C,H,W]` into a `[C·kh·kw, B·Ho·Wo]` patch matrix.
pub fn im2col<F: Scalar>(g: &ConvGeometry, input: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.columns();
    let mut cols = vec![F::zero(); g.patch_len() * ncols];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &input[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let dst = &mut dst_row[(b * oh + oy) * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
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

/// Adjoint of [`im2col`]: scatter-add patch gradients back into `[B,C,H,W]`.
pub fn col2im<F: Scalar>(g: &ConvGeometry, cols: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.columns();
    let mut out = vec![F::zero(); g.batch * g.in_channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        let src = &src_row[(b * oh + oy) * ow..][..ow];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[Cout, B·S]` → `[B, Cout, S]`.
pub fn channel_major_to_batch_major<F: Scalar>(m: &[F], batch: usize, channels: usize, spatial: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &m[c * batch * spatial + b * spatial..][..spatial];
            out[(b * channels + c) * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

/// `[B, Cout, S]` → `[Cout, B·S]`.
pub fn batch_major_to_channel_major<F: Scalar>(t: &[F], batch: usize, channels: usize, spatial: usize) -> Vec<F> {
    let mut out = vec![F::zero(); t.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &t[(b * channels + c) * spatial..][..spatial];
            out[c * batch * spatial + b * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

/// Cross-correlation forward. Returns the output `[B,Cout,Ho,Wo]` and the patch matrix.
pub fn conv2d_forward<F: Scalar>(g: &ConvGeometry, input: &[F], weight: &[F]) -> (Vec<F>, Vec<F>) {
    let cols = im2col(g, input);
    let ncols = g.columns();
    let kk = g.patch_len();
    let mut mat = vec![F::zero(); g.out_channels * ncols];
    F::gemm(
        g.out_channels,
        kk,
        ncols,
        F::one(),
        weight,
        kk as isize,
        1,
        &cols,
        ncols as isize,
        1,
        F::zero(),
        &mut mat,
        ncols as isize,
        1,
    );
    let out = channel_major_to_batch_major(&mat, g.batch, g.out_channels, g.out_h() * g.out_w());
    (out, cols)
}

/// Gradient w.r.t. the weight `[Cout, C·kh·kw]`.
pub fn conv2d_weight_grad<F: Scalar>(g: &ConvGeometry, grad_mat: &[F], cols: &[F]) -> Vec<F> {
    let ncols = g.columns();
    let kk = g.patch_len();
    let mut dw = vec![F::zero(); g.out_channels * kk];
    F::gemm(
        g.out_channels,
        ncols,
        kk,
        F::one(),
        grad_mat,
        ncols as isize,
        1,
        cols,
        1,
        ncols as isize,
        F::zero(),
        &mut dw,
        kk as isize,
        1,
    );
    dw
}

/// Gradient w.r.t. the input `[B,C,H,W]`.
pub fn conv2d_input_grad<F: Scalar>(g: &ConvGeometry, grad_mat: &[F], weight: &[F]) -> Vec<F> {
    let ncols = g.columns();
    let kk = g.patch_len();
    let mut dcols = vec![F::zero(); kk * ncols];
    F::gemm(
        kk,
        g.out_channels,
        ncols,
        F::one(),
        weight,
        1,
        kk as isize,
        grad_mat,
        ncols as isize,
        1,
        F::zero(),
        &mut dcols,
        ncols as isize,
        1,
    );
    col2im(g, &dcols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Max pooling; returns outputs and the flat input index that won each window.
/// The first maximum in row-major window order wins ties.
pub fn maxpool_forward<F: Scalar>(g: &PoolGeometry, input: &[F]) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut argmax = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * g.stride * g.width + ox * g.stride;
                let mut best = input[best_idx];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

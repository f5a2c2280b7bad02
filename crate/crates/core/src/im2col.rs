//! Patch extraction for convolutions as matrix products. candle's CPU conv
//! backward is several times slower than its forward, so convolutions here
//! are `weight · im2col(x)` and the two ops below are each other's adjoint.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(self.height), o(self.width))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn cols_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.rows() * ho * wo
    }

    /// Calls `f(image_index, cols_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        let col_row = (row * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                f(img_row + ix as usize, col_row + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

fn gather<T: Copy + Default>(g: &Geometry, batch: usize, src: &[T]) -> Vec<T> {
    let (il, cl) = (g.image_len(), g.cols_len());
    let mut out = vec![T::default(); batch * cl];
    for b in 0..batch {
        let (img, cols) = (&src[b * il..(b + 1) * il], &mut out[b * cl..(b + 1) * cl]);
        g.for_each_tap(|i, c| cols[c] = img[i]);
    }
    out
}

fn scatter<T: Copy + Default + AddAssign>(g: &Geometry, batch: usize, src: &[T]) -> Vec<T> {
    let (il, cl) = (g.image_len(), g.cols_len());
    let mut out = vec![T::default(); batch * il];
    for b in 0..batch {
        let (cols, img) = (&src[b * cl..(b + 1) * cl], &mut out[b * il..(b + 1) * il]);
        g.for_each_tap(|i, c| img[i] += cols[c]);
    }
    out
}

/// `(B, C, H, W)` to `(B, C·k·k, Ho·Wo)`.
pub(crate) struct Im2Col(pub Geometry);

/// `(B, C·k·k, Ho·Wo)` to `(B, C, H, W)`, summing overlapping taps.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (batch, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.channels, g.height, g.width) {
            candle_core::bail!("im2col geometry {g:?} does not match input {:?}", layout.shape());
        }
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((batch, g.rows(), ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(gather(g, batch, contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(gather(g, batch, contiguous(d, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (batch, rows, n) = layout.shape().dims3()?;
        let (ho, wo) = g.out_hw();
        if (rows, n) != (g.rows(), ho * wo) {
            candle_core::bail!("col2im geometry {g:?} does not match input {:?}", layout.shape());
        }
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(scatter(g, batch, contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(scatter(g, batch, contiguous(d, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// 2D convolution with square kernels, `weight` shaped `(Co, C, k, k)`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    if ci != c {
        candle_core::bail!("conv expects {ci} input channels, got {c}");
    }
    let g = Geometry { channels: c, height: h, width: w, kernel: k, stride, padding };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((co, c * k * k))?.broadcast_matmul(&cols)?;
    y.reshape((b, co, ho, wo))
}

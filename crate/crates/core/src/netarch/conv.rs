//! Convolution as patch extraction plus one matmul.
//!
//! Patch extraction (`im2col`) and its adjoint (`col2im`) are custom ops
//! with hand-written loops, each the other's gradient. Columns form one
//! `(C * k * k, B * Ho * Wo)` matrix so the whole batch is a single GEMM.
//! Rows are ordered `(channel, dy, dx)`, matching the `[out, in, k, k]`
//! weight layout, so the weight reshapes to `[out, in * k * k]` in place.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_shape(&self) -> Shape {
        Shape::from((
            self.channels * self.k * self.k,
            self.batch * self.ho * self.wo,
        ))
    }

    fn input_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.h, self.w))
    }

    /// Output positions `[first, last)` along one axis whose tap `d`
    /// lands inside `len`.
    fn valid(&self, d: usize, out_len: usize, len: usize) -> (usize, usize) {
        let first = self.pad.saturating_sub(d).div_ceil(self.stride);
        let mut last = 0;
        // largest o with o*stride + d - pad < len
        if len + self.pad > d {
            last = ((len + self.pad - d - 1) / self.stride + 1).min(out_len);
        }
        (first, last.max(first))
    }

    /// Visits `(src, dst, run)` for every in-bounds run of one tap along
    /// an output row; `src` indexes the input, `dst` the columns.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.ho * self.wo;
        let width = self.batch * n;
        let plane = self.h * self.w;
        for bc in 0..self.batch * self.channels {
            let (b, c) = (bc / self.channels, bc % self.channels);
            for dy in 0..self.k {
                let (oy0, oy1) = self.valid(dy, self.ho, self.h);
                for dx in 0..self.k {
                    let (ox0, ox1) = self.valid(dx, self.wo, self.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = (c * self.k + dy) * self.k + dx;
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + dy - self.pad;
                        let ix0 = ox0 * self.stride + dx - self.pad;
                        f(
                            bc * plane + iy * self.w + ix0,
                            row * width + b * n + oy * self.wo + ox0,
                            ox1 - ox0,
                        );
                    }
                }
            }
        }
    }
}

fn im2col<T: Copy + Default>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.k * g.k * g.ho * g.wo];
    let s = g.stride;
    g.for_each_run(|src, dst, run| {
        if s == 1 {
            out[dst..dst + run].copy_from_slice(&x[src..src + run]);
        } else {
            for i in 0..run {
                out[dst + i] = x[src + i * s];
            }
        }
    });
    out
}

fn col2im<T: Copy + Default + AddAssign>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|src, dst, run| {
        for i in 0..run {
            out[src + i * s] += cols[dst + i];
        }
    });
    out
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op} expects a contiguous input")))?;
    Ok(&v[a..b])
}

struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l, "im2col")?, &self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l, "im2col")?, &self.0)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "im2col supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l, "col2im")?, &self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l, "col2im")?, &self.0)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "col2im supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, self.0.input_shape()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Swaps the two leading axes of a contiguous `(A, B, N)` tensor with
/// whole-row copies; its own adjoint.
struct SwapLeading {
    a: usize,
    b: usize,
    n: usize,
}

fn swap_leading<T: Copy>(x: &[T], a: usize, b: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&x[(i * b + j) * n..][..n]);
        }
    }
    out
}

impl CustomOp1 for SwapLeading {
    fn name(&self) -> &'static str {
        "swap-leading"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b, n) = (self.a, self.b, self.n);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(swap_leading(contiguous(v, l, "swap")?, a, b, n)),
            CpuStorage::F64(v) => CpuStorage::F64(swap_leading(contiguous(v, l, "swap")?, a, b, n)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "swap supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, Shape::from((b, a, n))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let back = SwapLeading {
            a: self.b,
            b: self.a,
            n: self.n,
        };
        Ok(Some(grad.contiguous()?.apply_op1(back)?))
    }
}

/// Square-kernel 2-D convolution of `(B, C, H, W)` by `[out, C, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, h, wd) = x.dims4()?;
    let (cout, cin, k, k2) = w.dims4()?;
    if cin != channels || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(candle_core::Error::Msg(format!(
            "conv2d: input {:?} incompatible with kernel {:?} (stride {stride}, pad {pad})",
            x.dims(),
            w.dims()
        )));
    }
    let g = Geometry {
        batch,
        channels,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let w2 = w.reshape((cout, channels * k * k))?;
    let swap = SwapLeading {
        a: cout,
        b: batch,
        n: g.ho * g.wo,
    };
    w2.matmul(&cols)?
        .reshape((cout, batch, g.ho * g.wo))?
        .apply_op1(swap)?
        .reshape((batch, cout, g.ho, g.wo))
}

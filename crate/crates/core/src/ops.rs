//! CPU convolution kernels exposed to candle as differentiable custom ops.
//!
//! Dense convolutions go through a chunked im2col followed by a single GEMM
//! per chunk, which keeps the column buffer bounded even for 1024x1024
//! feature maps. Depthwise convolutions (one input channel per group, with an
//! optional channel multiplier) use direct loops.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

/// Upper bound on the number of f32 elements in an im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout) -> Result<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => bail!("convolution kernels require f32 tensors"),
    };
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("convolution kernels require contiguous tensors"),
    }
}

fn dims4(layout: &Layout, what: &str) -> Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => bail!("{what}: expected a rank-4 tensor, got {other:?}"),
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn new(
        (batch, cin, h, w): (usize, usize, usize, usize),
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            bail!("convolution kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            hout: conv_out_len(h, k, stride, pad),
            wout: conv_out_len(w, k, stride, pad),
        })
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.ckk() * self.wout).max(1)).clamp(1, self.hout)
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // ix = c*s + kx - pad must lie in [0, w)
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s).min(self.wout) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.wout)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f32], rows: std::ops::Range<usize>, cols: &mut [f32]) {
        let n = rows.len() * self.wout;
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.col_range(kx);
                    for (ri, r) in rows.clone().enumerate() {
                        let dst = &mut row[ri * self.wout..(ri + 1) * self.wout];
                        let iy = (r * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo >= hi {
                            continue;
                        }
                        if s == 1 {
                            let start = lo + kx - p;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for c in lo..hi {
                                dst[c] = src[c * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], rows: std::ops::Range<usize>, gx: &mut [f32]) {
        let n = rows.len() * self.wout;
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.col_range(kx);
                    for (ri, r) in rows.clone().enumerate() {
                        let iy = (r * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let src = &row[ri * self.wout..(ri + 1) * self.wout];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for c in lo..hi {
                            dst[c * s + kx - p] += src[c];
                        }
                    }
                }
            }
        }
    }
}

/// `dst = (accumulate ? dst : 0) + lhs * rhs`, all strides in elements.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [f32],
    dst_rs: usize,
    accumulate: bool,
    lhs: &[f32],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[f32],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!((m - 1) * dst_rs + n <= dst.len());
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                dst[r * dst_rs..r * dst_rs + n].fill(0.0);
            }
        }
        return;
    }
    debug_assert!((m - 1) * lhs_rs + (k - 1) * lhs_cs < lhs.len());
    debug_assert!((k - 1) * rhs_rs + (n - 1) * rhs_cs < rhs.len());
    // SAFETY: the debug assertions above spell out the extents gemm touches;
    // every caller derives them from the same geometry used to size buffers.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn dense_forward(g: &Geometry, x: &[f32], wt: &[f32]) -> Vec<f32> {
    let hw = g.hout * g.wout;
    let ckk = g.ckk();
    let mut out = vec![0f32; g.batch * g.cout * hw];
    let chunk = g.rows_per_chunk();
    let mut cols = vec![0f32; if g.is_pointwise() { 0 } else { ckk * chunk * g.wout }];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let ob = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + chunk).min(g.hout);
            let n = (r1 - r0) * g.wout;
            let dst = &mut ob[r0 * g.wout..];
            if g.is_pointwise() {
                sgemm(g.cout, n, ckk, dst, hw, false, wt, (ckk, 1), &xb[r0 * g.w..], (g.h * g.w, 1));
            } else {
                g.im2col(xb, r0..r1, &mut cols[..ckk * n]);
                sgemm(g.cout, n, ckk, dst, hw, false, wt, (ckk, 1), &cols[..ckk * n], (n, 1));
            }
            r0 = r1;
        }
    }
    out
}

fn dense_input_grad(g: &Geometry, grad: &[f32], wt: &[f32]) -> Vec<f32> {
    let hw = g.hout * g.wout;
    let ckk = g.ckk();
    let mut gx = vec![0f32; g.batch * g.cin * g.h * g.w];
    let chunk = g.rows_per_chunk();
    let mut cols = vec![0f32; if g.is_pointwise() { 0 } else { ckk * chunk * g.wout }];
    for b in 0..g.batch {
        let gb = &grad[b * g.cout * hw..(b + 1) * g.cout * hw];
        let gxb = &mut gx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + chunk).min(g.hout);
            let n = (r1 - r0) * g.wout;
            if g.is_pointwise() {
                let dst = &mut gxb[r0 * g.w..];
                sgemm(ckk, n, g.cout, dst, g.h * g.w, false, wt, (1, ckk), &gb[r0 * g.wout..], (hw, 1));
            } else {
                let c = &mut cols[..ckk * n];
                sgemm(ckk, n, g.cout, c, n, false, wt, (1, ckk), &gb[r0 * g.wout..], (hw, 1));
                g.col2im(c, r0..r1, gxb);
            }
            r0 = r1;
        }
    }
    gx
}

fn dense_weight_grad(g: &Geometry, x: &[f32], grad: &[f32]) -> Vec<f32> {
    let hw = g.hout * g.wout;
    let ckk = g.ckk();
    let mut gw = vec![0f32; g.cout * ckk];
    let chunk = g.rows_per_chunk();
    let mut cols = vec![0f32; if g.is_pointwise() { 0 } else { ckk * chunk * g.wout }];
    let mut first = true;
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let gb = &grad[b * g.cout * hw..(b + 1) * g.cout * hw];
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + chunk).min(g.hout);
            let n = (r1 - r0) * g.wout;
            let lhs = &gb[r0 * g.wout..];
            if g.is_pointwise() {
                sgemm(g.cout, ckk, n, &mut gw, ckk, !first, lhs, (hw, 1), &xb[r0 * g.w..], (1, g.h * g.w));
            } else {
                g.im2col(xb, r0..r1, &mut cols[..ckk * n]);
                sgemm(g.cout, ckk, n, &mut gw, ckk, !first, lhs, (hw, 1), &cols[..ckk * n], (1, n));
            }
            first = false;
            r0 = r1;
        }
    }
    gw
}

fn depthwise_forward(g: &Geometry, x: &[f32], wt: &[f32]) -> Vec<f32> {
    let mult = g.cout / g.cin;
    let hw = g.hout * g.wout;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut out = vec![0f32; g.batch * g.cout * hw];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let ci = o / mult;
            let plane = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(b * g.cout + o) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[(o * k + ky) * k + kx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for r in 0..g.hout {
                        let iy = (r * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[r * g.wout..][..g.wout];
                        if s == 1 {
                            let off = lo + kx - p;
                            for (d, v) in drow[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                                *d += wv * v;
                            }
                        } else {
                            for c in lo..hi {
                                drow[c] += wv * src[c * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_input_grad(g: &Geometry, grad: &[f32], wt: &[f32]) -> Vec<f32> {
    let mult = g.cout / g.cin;
    let hw = g.hout * g.wout;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut gx = vec![0f32; g.batch * g.cin * g.h * g.w];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let ci = o / mult;
            let gplane = &grad[(b * g.cout + o) * hw..][..hw];
            let dst = &mut gx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[(o * k + ky) * k + kx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for r in 0..g.hout {
                        let iy = (r * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let grow = &gplane[r * g.wout..][..g.wout];
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        if s == 1 {
                            let off = lo + kx - p;
                            for (d, v) in drow[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * v;
                            }
                        } else {
                            for c in lo..hi {
                                drow[c * s + kx - p] += wv * grow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn depthwise_weight_grad(g: &Geometry, x: &[f32], grad: &[f32]) -> Vec<f32> {
    let mult = g.cout / g.cin;
    let hw = g.hout * g.wout;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut gw = vec![0f32; g.cout * k * k];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let ci = o / mult;
            let plane = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            let gplane = &grad[(b * g.cout + o) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0f32;
                    for r in 0..g.hout {
                        let iy = (r * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let grow = &gplane[r * g.wout..][..g.wout];
                        if s == 1 {
                            let off = lo + kx - p;
                            acc += src[off..off + hi - lo]
                                .iter()
                                .zip(&grow[lo..hi])
                                .map(|(a, b)| a * b)
                                .sum::<f32>();
                        } else {
                            for c in lo..hi {
                                acc += src[c * s + kx - p] * grow[c];
                            }
                        }
                    }
                    gw[(o * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    gw
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Dense,
    Depthwise,
}

/// Forward op: `(input, weight) -> output`.
#[derive(Clone, Copy, Debug)]
struct ConvOp {
    kind: Kind,
    stride: usize,
    pad: usize,
}

impl ConvOp {
    fn geometry(&self, x: &Layout, w: &Layout) -> Result<Geometry> {
        let xd = dims4(x, "conv input")?;
        let (cout, wc, k, k2) = dims4(w, "conv weight")?;
        if k != k2 {
            bail!("only square kernels are supported, got {k}x{k2}");
        }
        match self.kind {
            Kind::Dense if wc != xd.1 => {
                bail!("conv weight expects {wc} input channels, input has {}", xd.1)
            }
            Kind::Depthwise if wc != 1 || cout % xd.1 != 0 => {
                bail!("depthwise weight {:?} incompatible with {} input channels", w.dims(), xd.1)
            }
            _ => {}
        }
        Geometry::new(xd, cout, k, self.stride, self.pad)
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Dense => "conv2d-gemm",
            Kind::Depthwise => "conv2d-depthwise",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2)?;
        let (x, w) = (f32_slice(s1, l1)?, f32_slice(s2, l2)?);
        let out = match self.kind {
            Kind::Dense => dense_forward(&g, x, w),
            Kind::Depthwise => depthwise_forward(&g, x, w),
        };
        Ok((CpuStorage::F32(out), Shape::from((g.batch, g.cout, g.hout, g.wout))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (b, c, h, wd) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvGradOp { op: *self, target: GradTarget::Input { shape: (b, c, h, wd) } },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvGradOp { op: *self, target: GradTarget::Weight { shape: w.dims4()? } },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

#[derive(Clone, Copy, Debug)]
enum GradTarget {
    /// `(grad_out, weight) -> grad_input`
    Input { shape: (usize, usize, usize, usize) },
    /// `(input, grad_out) -> grad_weight`
    Weight { shape: (usize, usize, usize, usize) },
}

#[derive(Clone, Copy, Debug)]
struct ConvGradOp {
    op: ConvOp,
    target: GradTarget,
}

impl CustomOp2 for ConvGradOp {
    fn name(&self) -> &'static str {
        "conv2d-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (a, bslice) = (f32_slice(s1, l1)?, f32_slice(s2, l2)?);
        match self.target {
            GradTarget::Input { shape } => {
                let (cout, _, k, _) = dims4(l2, "conv weight")?;
                let g = Geometry::new(shape, cout, k, self.op.stride, self.op.pad)?;
                let gx = match self.op.kind {
                    Kind::Dense => dense_input_grad(&g, a, bslice),
                    Kind::Depthwise => depthwise_input_grad(&g, a, bslice),
                };
                Ok((CpuStorage::F32(gx), Shape::from(shape)))
            }
            GradTarget::Weight { shape } => {
                let xd = dims4(l1, "conv input")?;
                let g = Geometry::new(xd, shape.0, shape.2, self.op.stride, self.op.pad)?;
                let gw = match self.op.kind {
                    Kind::Dense => dense_weight_grad(&g, a, bslice),
                    Kind::Depthwise => depthwise_weight_grad(&g, a, bslice),
                };
                Ok((CpuStorage::F32(gw), Shape::from(shape)))
            }
        }
    }
}

/// Dense 2-D convolution (`groups == 1`) of `x: [B, Cin, H, W]` with
/// `weight: [Cout, Cin, K, K]`, symmetric zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let op = ConvOp { kind: Kind::Dense, stride, pad: padding };
    x.contiguous()?.apply_op2(&weight.contiguous()?, op)
}

/// Depthwise convolution: every input channel is its own group and produces
/// `Cout / Cin` output channels. `weight: [Cout, 1, K, K]`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let op = ConvOp { kind: Kind::Depthwise, stride, pad: padding };
    x.contiguous()?.apply_op2(&weight.contiguous()?, op)
}

/// Transposed convolution with kernel 2, stride 2 and no output padding.
/// `weight: [Cin, Cout, 2, 2]` (PyTorch layout).
pub fn conv_transpose2x2(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (wc, cout, kh, kw) = weight.dims4()?;
    if wc != cin || kh != 2 || kw != 2 {
        bail!("transposed conv weight {:?} incompatible with input {:?}", weight.dims(), x.dims());
    }
    // [B*H*W, Cin] x [Cin, Cout*4] -> [B, H, W, Cout, 2, 2]
    let wmat = weight.reshape((cin, cout * 4))?;
    let xmat = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, cin))?;
    let y = xmat.matmul(&wmat)?.reshape((b, h, w, cout, 2, 2))?;
    y.permute((0, 3, 1, 4, 2, 5))?.contiguous()?.reshape((b, cout, 2 * h, 2 * w))
}

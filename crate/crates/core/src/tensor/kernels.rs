//! Forward and adjoint kernels on plain tensors. The tape composes these;
//! nothing here records history.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Output extent of a sliding window, `None` when it would be empty.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, padding: usize) -> Self {
        Window { kh: k, kw: k, stride, padding }
    }

    pub fn output_hw(&self, h: usize, w: usize, op: &'static str) -> Result<(usize, usize)> {
        match (
            conv_out_dim(h, self.kh, self.stride, self.padding),
            conv_out_dim(w, self.kw, self.stride, self.padding),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                op,
                format!(
                    "window {}x{} stride {} padding {} yields an empty output on {h}x{w}",
                    self.kh, self.kw, self.stride, self.padding
                ),
            )),
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: m×k`, `b: k×n` given as
/// arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(plane: &[f64], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    let pad = win.padding as isize;
    for ci in 0..c {
        let src = &plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, plane: &mut [f64]) {
    let hw = ho * wo;
    let pad = win.padding as isize;
    for ci in 0..c {
        let dst = &mut plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(win: Window) -> bool {
    win.kh == 1 && win.kw == 1 && win.stride == 1 && win.padding == 0
}

pub fn check_conv(input: Shape, weight: Shape, bias: Option<Shape>, stride: usize, padding: usize) -> Result<Shape> {
    if input.c != weight.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but weight {} expects {}", input.c, weight, weight.c),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(Error::shape("conv2d", format!("bias {b} does not match {} output channels", weight.n)));
        }
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let win = Window { kh: weight.h, kw: weight.w, stride, padding };
    let (ho, wo) = win.output_hw(input.h, input.w, "conv2d")?;
    Ok(Shape::new(input.n, weight.n, ho, wo))
}

/// Cross-correlation with zero padding.
pub fn conv2d(input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, stride: usize, padding: usize) -> Result<Tensor4> {
    let out_shape = check_conv(input.shape(), weight.shape(), bias.map(|b| b.shape()), stride, padding)?;
    let s = input.shape();
    let ws = weight.shape();
    let win = Window { kh: ws.h, kw: ws.w, stride, padding };
    let (ho, wo) = (out_shape.h, out_shape.w);
    let k = ws.c * ws.h * ws.w;
    let hw = ho * wo;
    let mut out = Tensor4::zeros(out_shape);
    let mut cols = if is_pointwise(win) { Vec::new() } else { vec![0.0; k * hw] };
    let in_per = s.c * s.plane();
    for n in 0..s.n {
        let plane = &input.data()[n * in_per..(n + 1) * in_per];
        let b_mat: &[f64] = if is_pointwise(win) {
            plane
        } else {
            im2col(plane, s.c, s.h, s.w, win, ho, wo, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * ws.n * hw..(n + 1) * ws.n * hw];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(ws.n, k, hw, weight.data(), (k, 1), b_mat, (hw, 1), 1.0, dst);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weight: Option<Tensor4>,
    pub bias: Option<Tensor4>,
}

/// Adjoint of [`conv2d`] for the requested operands.
pub fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_input, need_weight, need_bias) = need;
    let s = input.shape();
    let ws = weight.shape();
    let gs = grad_out.shape();
    let win = Window { kh: ws.h, kw: ws.w, stride, padding };
    let (ho, wo) = (gs.h, gs.w);
    let k = ws.c * ws.h * ws.w;
    let hw = ho * wo;
    let pointwise = is_pointwise(win);

    let mut d_input = need_input.then(|| Tensor4::zeros(s));
    let mut d_weight = need_weight.then(|| Tensor4::zeros(ws));
    let mut d_bias = need_bias.then(|| Tensor4::zeros(Shape::new(1, ws.n, 1, 1)));
    let mut cols = vec![0.0; if pointwise { 0 } else { k * hw }];
    let mut d_cols = vec![0.0; if need_input && !pointwise { k * hw } else { 0 }];
    let in_per = s.c * s.plane();

    for n in 0..s.n {
        let g = &grad_out.data()[n * ws.n * hw..(n + 1) * ws.n * hw];
        if let Some(db) = d_bias.as_mut() {
            for (co, chunk) in g.chunks(hw).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f64>();
            }
        }
        let plane = &input.data()[n * in_per..(n + 1) * in_per];
        if let Some(dw) = d_weight.as_mut() {
            let b_mat: &[f64] = if pointwise {
                plane
            } else {
                im2col(plane, s.c, s.h, s.w, win, ho, wo, &mut cols);
                &cols
            };
            // dW (co×k) += G (co×hw) · colsᵀ (hw×k)
            gemm(ws.n, hw, k, g, (hw, 1), b_mat, (1, hw), 1.0, dw.data_mut());
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx.data_mut()[n * in_per..(n + 1) * in_per];
            if pointwise {
                // dX (ci×hw) = Wᵀ (ci×co) · G (co×hw)
                gemm(k, ws.n, hw, weight.data(), (1, k), g, (hw, 1), 1.0, dst);
            } else {
                gemm(k, ws.n, hw, weight.data(), (1, k), g, (hw, 1), 0.0, &mut d_cols);
                col2im(&d_cols, s.c, s.h, s.w, win, ho, wo, dst);
            }
        }
    }
    ConvGrads { input: d_input, weight: d_weight, bias: d_bias }
}

/// Multiply-accumulate count of one convolution application (bias excluded).
pub fn conv_macs(input: Shape, weight: Shape, output: Shape) -> u64 {
    debug_assert_eq!(input.n, output.n);
    (output.n * weight.n * weight.c * weight.h * weight.w * output.h * output.w) as u64
}

pub fn upsample2x(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor4::zeros(os);
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            let src_row = &src[(nc * s.h + y / 2) * s.w..(nc * s.h + y / 2 + 1) * s.w];
            let dst_row = &mut dst[(nc * os.h + y) * os.w..(nc * os.h + y + 1) * os.w];
            for (x_out, v) in dst_row.iter_mut().enumerate() {
                *v = src_row[x_out / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block back onto its source cell.
pub fn upsample2x_backward(grad_out: &Tensor4) -> Tensor4 {
    let os = grad_out.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let mut out = Tensor4::zeros(s);
    let g = grad_out.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            for x in 0..os.w {
                dst[(nc * s.h + y / 2) * s.w + x / 2] += g[(nc * os.h + y) * os.w + x];
            }
        }
    }
    out
}

pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape("concat_channels", format!("{sa} and {sb} differ in batch or spatial dims")));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
        data.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
    }
    Tensor4::new(os, data)
}

pub fn slice_channels(x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape("slice_channels", format!("[{start}, {}) out of {} channels", start + len, s.c)));
    }
    let os = Shape::new(s.n, len, s.h, s.w);
    let p = s.plane();
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        let base = n * s.c * p;
        data.extend_from_slice(&x.data()[base + start * p..base + (start + len) * p]);
    }
    Tensor4::new(os, data)
}

/// Places `grad` into channels `[start, start+len)` of a zero tensor of shape `full`.
pub fn unslice_channels(grad: &Tensor4, full: Shape, start: usize) -> Tensor4 {
    let gs = grad.shape();
    let p = full.plane();
    let mut out = Tensor4::zeros(full);
    for n in 0..full.n {
        let dst = n * full.c * p + start * p;
        let src = n * gs.c * p;
        out.data_mut()[dst..dst + gs.c * p].copy_from_slice(&grad.data()[src..src + gs.c * p]);
    }
    out
}

/// Top-left `h × w` window.
pub fn crop(x: &Tensor4, h: usize, w: usize) -> Result<Tensor4> {
    let s = x.shape();
    if h == 0 || w == 0 || h > s.h || w > s.w {
        return Err(Error::shape("crop", format!("cannot crop {s} to {h}x{w}")));
    }
    Ok(Tensor4::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, xx| x.at(n, c, y, xx)))
}

pub fn crop_backward(grad: &Tensor4, full: Shape) -> Tensor4 {
    let gs = grad.shape();
    let mut out = Tensor4::zeros(full);
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                for x in 0..gs.w {
                    let i = out.index(n, c, y, x);
                    out.data_mut()[i] = grad.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// every output cell, the flat index of the winning input element.
pub fn max_pool(x: &Tensor4, win: Window) -> Result<(Tensor4, Vec<usize>)> {
    let s = x.shape();
    let (ho, wo) = win.output_hw(s.h, s.w, "max_pool")?;
    let os = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor4::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let pad = win.padding as isize;
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                if best_i == usize::MAX {
                    return Err(Error::shape("max_pool", "a window lies entirely in padding"));
                }
                out.data_mut()[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward(grad: &Tensor4, argmax: &[usize], input: Shape) -> Tensor4 {
    let mut out = Tensor4::zeros(input);
    for (g, &i) in grad.data().iter().zip(argmax) {
        out.data_mut()[i] += g;
    }
    out
}

/// Average pooling; padded cells count as zeros in the divisor.
pub fn avg_pool(x: &Tensor4, win: Window) -> Result<Tensor4> {
    let s = x.shape();
    let (ho, wo) = win.output_hw(s.h, s.w, "avg_pool")?;
    let os = Shape::new(s.n, s.c, ho, wo);
    let norm = 1.0 / (win.kh * win.kw) as f64;
    let pad = win.padding as isize;
    let mut out = Tensor4::zeros(os);
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            acc += x.data()[base + iy as usize * s.w + ix as usize];
                        }
                    }
                }
                out.data_mut()[o] = acc * norm;
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(grad: &Tensor4, input: Shape, win: Window) -> Tensor4 {
    let gs = grad.shape();
    let norm = 1.0 / (win.kh * win.kw) as f64;
    let pad = win.padding as isize;
    let mut out = Tensor4::zeros(input);
    let mut o = 0;
    for nc in 0..input.n * input.c {
        let base = nc * input.plane();
        for oy in 0..gs.h {
            for ox in 0..gs.w {
                let g = grad.data()[o] * norm;
                o += 1;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < input.w as isize {
                            out.data_mut()[base + iy as usize * input.w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-(sample, group) statistics saved by [`group_norm`].
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn check_group_norm(x: Shape, groups: usize, gamma: Shape, beta: Shape) -> Result<()> {
    if groups == 0 || !x.c.is_multiple_of(groups) {
        return Err(Error::shape("group_norm", format!("{} channels not divisible into {groups} groups", x.c)));
    }
    if gamma.numel() != x.c || beta.numel() != x.c {
        return Err(Error::shape("group_norm", format!("affine {gamma}/{beta} does not match {} channels", x.c)));
    }
    Ok(())
}

/// Group normalization with a per-channel affine transform.
pub fn group_norm(x: &Tensor4, groups: usize, gamma: &Tensor4, beta: &Tensor4) -> Result<(Tensor4, GroupStats)> {
    let s = x.shape();
    check_group_norm(s, groups, gamma.shape(), beta.shape())?;
    let cpg = s.c / groups;
    let m = cpg * s.plane();
    let mut out = Tensor4::zeros(s);
    let mut stats = GroupStats { mean: Vec::with_capacity(s.n * groups), rstd: Vec::with_capacity(s.n * groups) };
    for n in 0..s.n {
        for g in 0..groups {
            let start = (n * s.c + g * cpg) * s.plane();
            let chunk = &x.data()[start..start + m];
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let (ga, be) = (gamma.data()[c], beta.data()[c]);
                let off = start + ci * s.plane();
                for i in off..off + s.plane() {
                    out.data_mut()[i] = (x.data()[i] - mean) * rstd * ga + be;
                }
            }
        }
    }
    Ok((out, stats))
}

pub struct GroupNormGrads {
    pub input: Tensor4,
    pub gamma: Tensor4,
    pub beta: Tensor4,
}

pub fn group_norm_backward(
    x: &Tensor4,
    groups: usize,
    gamma: &Tensor4,
    stats: &GroupStats,
    grad: &Tensor4,
) -> GroupNormGrads {
    let s = x.shape();
    let cpg = s.c / groups;
    let p = s.plane();
    let m = (cpg * p) as f64;
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = Tensor4::zeros(gamma.shape());
    let mut dbeta = Tensor4::zeros(gamma.shape());
    for n in 0..s.n {
        for g in 0..groups {
            let k = n * groups + g;
            let (mean, rstd) = (stats.mean[k], stats.rstd[k]);
            let start = (n * s.c + g * cpg) * p;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let ga = gamma.data()[c];
                let off = start + ci * p;
                let (mut dga, mut dbe) = (0.0, 0.0);
                for i in off..off + p {
                    let xhat = (x.data()[i] - mean) * rstd;
                    let dy = grad.data()[i];
                    dga += dy * xhat;
                    dbe += dy;
                    let dxhat = dy * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma.data_mut()[c] += dga;
                dbeta.data_mut()[c] += dbe;
            }
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let ga = gamma.data()[c];
                let off = start + ci * p;
                for i in off..off + p {
                    let xhat = (x.data()[i] - mean) * rstd;
                    let dxhat = grad.data()[i] * ga;
                    dx.data_mut()[i] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    GroupNormGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// Relocates a `(n, 4N, H, W)` map to `(n, N, 2H, 2W)`: output cell
/// `(2y+i, 2x+j)` of class `c` reads input channel `(2i+j)·N + c` at `(y, x)`.
pub fn rearrange_quadrants(x: &Tensor4, classes: usize) -> Result<Tensor4> {
    let s = x.shape();
    if classes == 0 || s.c != 4 * classes {
        return Err(Error::shape(
            "rearrange_quadrants",
            format!("{} channels is not 4 x {classes} classes", s.c),
        ));
    }
    let os = Shape::new(s.n, classes, 2 * s.h, 2 * s.w);
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for q in 0..4 {
            let (i, j) = (q / 2, q % 2);
            for c in 0..classes {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let dst = out.index(n, c, 2 * y + i, 2 * xx + j);
                        out.data_mut()[dst] = x.at(n, q * classes + c, y, xx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`rearrange_quadrants`] (also its adjoint).
pub fn gather_quadrants(x: &Tensor4, classes: usize) -> Result<Tensor4> {
    let s = x.shape();
    if s.c != classes || !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(
            "gather_quadrants",
            format!("{s} is not a {classes}-class map with even spatial dims"),
        ));
    }
    let os = Shape::new(s.n, 4 * classes, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for q in 0..4 {
            let (i, j) = (q / 2, q % 2);
            for c in 0..classes {
                for y in 0..os.h {
                    for xx in 0..os.w {
                        let dst = out.index(n, q * classes + c, y, xx);
                        out.data_mut()[dst] = x.at(n, c, 2 * y + i, 2 * xx + j);
                    }
                }
            }
        }
    }
    Ok(out)
}

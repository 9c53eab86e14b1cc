//! Grouped 2-D convolution.
//!
//! Group `j` convolves input channels `[j·c/g, (j+1)·c/g)` into output
//! channels `[j·o/g, (j+1)·o/g)`. The general path unfolds a chunk of
//! images side by side with im2col and runs one matrix product per group;
//! channel-wise convs (one channel per group) run a direct kernel.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{dims4, gemm, Float, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvConfig {
    /// Stride 1 with `k/2` padding, which preserves spatial size for odd `k`.
    pub fn same(kernel: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups,
        }
    }
}

/// Weight `(o, c/g, k, k)`, optional bias `(o)` and geometry of one conv layer.
#[derive(Clone, Debug)]
pub struct ConvWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub config: ConvConfig,
}

impl<T: Float> ConvWeights<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, config: ConvConfig) -> Result<Self> {
        let [o, cg, k, kw] = dims4(&weight, "conv weights")?;
        let g = config.groups;
        if g == 0 || o % g != 0 {
            return Err(Error::GroupDivisibility { c: cg * g, o, g });
        }
        if k != kw {
            return Err(Error::InvalidShape {
                op: "conv weights",
                shape: weight.shape().to_vec(),
                reason: "kernel must be square".into(),
            });
        }
        if config.stride == 0 {
            return Err(Error::invalid("conv weights: stride must be >= 1"));
        }
        if let Some(b) = &bias {
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv bias",
                    left: b.shape().to_vec(),
                    right: vec![o],
                });
            }
        }
        Ok(Self { weight, bias, config })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.config.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Weight count `k·k·(c/g)·(o/g)·g` of a grouped convolution, plus `o` for a bias.
pub fn count_conv_params(k: usize, c: usize, o: usize, g: usize, with_bias: bool) -> Result<usize> {
    if g == 0 || !c.is_multiple_of(g) || !o.is_multiple_of(g) {
        return Err(Error::GroupDivisibility { c, o, g });
    }
    Ok(k * k * (c / g) * (o / g) * g + if with_bias { o } else { 0 })
}

/// `(input + 2·padding − k) / stride + 1`, rejecting non-integral results.
pub fn conv_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::invalid("conv: kernel and stride must be >= 1"));
    }
    let span = input + 2 * padding;
    if span < k {
        return Err(Error::invalid(format!(
            "conv: kernel {k} larger than padded input {span}"
        )));
    }
    if !(span - k).is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "conv: output size ({input} + 2·{padding} − {k})/{stride} + 1 is not integral"
        )));
    }
    Ok((span - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], cfg: ConvConfig) -> Result<Self> {
        let (&[n, c, h, w], &[o, cw, k, kw]) = (input, weight) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: format!("expected rank-4 input and weight, weight is {weight:?}"),
            });
        };
        let g = cfg.groups;
        if g == 0 || c % g != 0 || o % g != 0 {
            return Err(Error::GroupDivisibility { c, o, g });
        }
        if cw * g != c || k != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        let oh = conv_output_size(h, k, cfg.stride, cfg.padding)?;
        let ow = conv_output_size(w, k, cfg.stride, cfg.padding)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride: cfg.stride,
            pad: cfg.padding,
            groups: g,
            oh,
            ow,
        })
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    /// Unfolded rows per group.
    fn kk(&self) -> usize {
        self.cg() * self.k * self.k
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn in_img(&self) -> usize {
        self.c * self.h * self.w
    }

    fn channelwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `out·stride + offset − pad` falls inside `[0, len)`.
    fn valid(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > offset { (p - offset).div_ceil(s) } else { 0 };
        let hi = if len + p > offset {
            ((len - 1 + p - offset) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Upper bound on unfolded-column elements held at once; images are
/// processed in chunks that fit.
const COLS_BUDGET: usize = 1 << 18;

impl Geometry {
    /// Rows of the unfolded matrix over all groups.
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Images per chunk.
    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.ohw()).max(1)).clamp(1, self.n)
    }
}

/// Unfold one image into columns `[off, off + oh·ow)` of a row-major buffer
/// with `ld` columns. Row `(ci·k + ky)·k + kx` holds the input pixels that
/// kernel tap `(ky, kx)` of channel `ci` sees at every output position.
fn im2col<T: Float>(x: &[T], geo: &Geometry, cols: &mut [T], ld: usize, off: usize) {
    let Geometry { c, h, w, k, stride, pad, oh, ow, .. } = *geo;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = geo.valid(ky, h, oh);
            for kx in 0..k {
                let (xlo, xhi) = geo.valid(kx, w, ow);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + ohw];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * stride + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if stride == 1 {
                        let start = xlo + kx - pad;
                        drow[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns `[off, off + oh·ow)` back
/// onto one image.
fn col2im<T: Float>(cols: &[T], ld: usize, off: usize, geo: &Geometry, dx: &mut [T]) {
    let Geometry { c, h, w, k, stride, pad, oh, ow, .. } = *geo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = geo.valid(ky, h, oh);
            for kx in 0..k {
                let (xlo, xhi) = geo.valid(kx, w, ow);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ld + off..];
                for oy in ylo..yhi {
                    let iy = oy * stride + ky - pad;
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow + xlo..oy * ow + xhi];
                    if stride == 1 {
                        let start = xlo + kx - pad;
                        for (d, &v) in drow[start..start + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            drow[(xlo + i) * stride + kx - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// One image of a channel-wise conv: `y[ch] = w[ch] ⋆ x[ch]`.
fn channelwise_forward<T: Float>(x: &[T], weight: &[T], geo: &Geometry, y: &mut [T]) {
    let Geometry { c, h, w, k, stride, pad, oh, ow, .. } = *geo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let out = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for ky in 0..k {
            let (ylo, yhi) = geo.valid(ky, h, oh);
            for kx in 0..k {
                let (xlo, xhi) = geo.valid(kx, w, ow);
                let wv = weight[(ch * k + ky) * k + kx];
                for oy in ylo..yhi {
                    let iy = oy * stride + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut out[oy * ow + xlo..oy * ow + xhi];
                    if stride == 1 {
                        let start = xlo + kx - pad;
                        let len = drow.len();
                        for (d, &v) in drow.iter_mut().zip(&src[start..start + len]) {
                            *d += wv * v;
                        }
                    } else {
                        for (i, d) in drow.iter_mut().enumerate() {
                            *d += wv * src[(xlo + i) * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn channelwise_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    geo: &Geometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let Geometry { c, h, w, k, stride, pad, oh, ow, .. } = *geo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let grad = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for ky in 0..k {
            let (ylo, yhi) = geo.valid(ky, h, oh);
            for kx in 0..k {
                let (xlo, xhi) = geo.valid(kx, w, ow);
                let widx = (ch * k + ky) * k + kx;
                let wv = weight[widx];
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let iy = oy * stride + ky - pad;
                    let grow = &grad[oy * ow + xlo..oy * ow + xhi];
                    let row = ch * h * w + iy * w;
                    if stride == 1 {
                        let start = xlo + kx - pad;
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[row + start..row + start + grow.len()];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        let src = &plane[iy * w + start..iy * w + start + grow.len()];
                        acc += grow.iter().zip(src).map(|(&gv, &xv)| gv * xv).sum::<T>();
                    } else {
                        for (i, &gv) in grow.iter().enumerate() {
                            let ix = (xlo + i) * stride + kx - pad;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[row + ix] += wv * gv;
                            }
                            acc += gv * plane[iy * w + ix];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

fn forward_impl<T: Float>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geo: &Geometry) -> Tensor<T> {
    let (n, o, ohw, kk, og) = (geo.n, geo.o, geo.ohw(), geo.kk(), geo.og());
    let in_img = geo.in_img();
    let mut out = vec![T::zero(); n * o * ohw];
    let wdata = weight.data();
    if geo.channelwise() {
        for img in 0..n {
            let x = &input.data()[img * in_img..(img + 1) * in_img];
            channelwise_forward(x, wdata, geo, &mut out[img * o * ohw..(img + 1) * o * ohw]);
        }
    } else {
        // Unfold a chunk of images side by side so each group is one wide
        // product: (og × kk) · (kk × images·ohw).
        let chunk = geo.chunk();
        let mut cols = vec![T::zero(); geo.rows() * chunk * ohw];
        let mut ycm = vec![T::zero(); o * chunk * ohw];
        for first in (0..n).step_by(chunk) {
            let cn = chunk.min(n - first);
            let ld = cn * ohw;
            for j in 0..cn {
                let img = first + j;
                im2col(&input.data()[img * in_img..(img + 1) * in_img], geo, &mut cols, ld, j * ohw);
            }
            for gi in 0..geo.groups {
                let a = MatRef::row_major(&wdata[gi * og * kk..(gi + 1) * og * kk], og, kk);
                let b = MatRef::row_major(&cols[gi * kk * ld..(gi + 1) * kk * ld], kk, ld);
                gemm(T::one(), a, b, T::zero(), &mut ycm[gi * og * ld..(gi + 1) * og * ld]);
            }
            for j in 0..cn {
                for oc in 0..o {
                    let dst = ((first + j) * o + oc) * ohw;
                    out[dst..dst + ohw].copy_from_slice(&ycm[oc * ld + j * ohw..oc * ld + (j + 1) * ohw]);
                }
            }
        }
    }
    if let Some(b) = bias {
        for (i, row) in out.chunks_mut(ohw).enumerate() {
            let bv = b.data()[i % o];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_parts(vec![n, o, geo.oh, geo.ow], out)
}

/// Gradients `(dx, dw, db)` for the requested inputs.
fn backward_impl<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    geo: &Geometry,
    needs: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (need_x, need_w, need_b) = needs;
    let (n, o, ohw, kk, og) = (geo.n, geo.o, geo.ohw(), geo.kk(), geo.og());
    let in_img = geo.in_img();
    let mut dx = need_x.then(|| vec![T::zero(); n * in_img]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.numel()]);
    let wdata = weight.data();

    if geo.channelwise() {
        for img in 0..n {
            let x = &input.data()[img * in_img..(img + 1) * in_img];
            let g = &dy.data()[img * o * ohw..(img + 1) * o * ohw];
            let dx_img = dx.as_mut().map(|d| &mut d[img * in_img..(img + 1) * in_img]);
            channelwise_backward(x, wdata, g, geo, dx_img, dw.as_deref_mut());
        }
    } else if need_x || need_w {
        let chunk = geo.chunk();
        let cols_len = geo.rows() * chunk * ohw;
        let mut cols = if need_w { vec![T::zero(); cols_len] } else { Vec::new() };
        let mut dcols = if need_x { vec![T::zero(); cols_len] } else { Vec::new() };
        let mut dycm = vec![T::zero(); o * chunk * ohw];
        for first in (0..n).step_by(chunk) {
            let cn = chunk.min(n - first);
            let ld = cn * ohw;
            for j in 0..cn {
                for oc in 0..o {
                    let src = ((first + j) * o + oc) * ohw;
                    dycm[oc * ld + j * ohw..oc * ld + (j + 1) * ohw].copy_from_slice(&dy.data()[src..src + ohw]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                for j in 0..cn {
                    let img = first + j;
                    im2col(&input.data()[img * in_img..(img + 1) * in_img], geo, &mut cols, ld, j * ohw);
                }
                for gi in 0..geo.groups {
                    let a = MatRef::row_major(&dycm[gi * og * ld..(gi + 1) * og * ld], og, ld);
                    let b = MatRef::row_major(&cols[gi * kk * ld..(gi + 1) * kk * ld], kk, ld).t();
                    gemm(T::one(), a, b, T::one(), &mut dw[gi * og * kk..(gi + 1) * og * kk]);
                }
            }
            if let Some(dx) = dx.as_mut() {
                for gi in 0..geo.groups {
                    let a = MatRef::row_major(&wdata[gi * og * kk..(gi + 1) * og * kk], og, kk).t();
                    let b = MatRef::row_major(&dycm[gi * og * ld..(gi + 1) * og * ld], og, ld);
                    gemm(T::one(), a, b, T::zero(), &mut dcols[gi * kk * ld..(gi + 1) * kk * ld]);
                }
                for j in 0..cn {
                    let img = first + j;
                    col2im(&dcols, ld, j * ohw, geo, &mut dx[img * in_img..(img + 1) * in_img]);
                }
            }
        }
    }

    let db = need_b.then(|| {
        let mut db = vec![T::zero(); o];
        for (i, row) in dy.data().chunks(ohw).enumerate() {
            db[i % o] += row.iter().copied().sum::<T>();
        }
        Tensor::from_parts(vec![o], db)
    });
    (
        dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        db,
    )
}

/// Grouped convolution of an `(N, c, H, W)` tensor without recording a graph.
pub fn conv2d_forward<T: Float>(input: &Tensor<T>, weights: &ConvWeights<T>) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.shape(), weights.weight.shape(), weights.config)?;
    Ok(forward_impl(input, &weights.weight, weights.bias.as_ref(), &geo))
}

/// Differentiable grouped convolution. `weight` is `(o, c/g, k, k)` and
/// `bias`, when given, is `(o)`.
pub fn conv2d<T: Float>(
    g: &mut Graph<T>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    cfg: ConvConfig,
) -> Result<NodeId> {
    let geo = Geometry::new(g.value(x).shape(), g.value(weight).shape(), cfg)?;
    if let Some(b) = bias {
        if g.value(b).shape() != [geo.o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: g.value(b).shape().to_vec(),
                right: vec![geo.o],
            });
        }
    }
    let out = forward_impl(g.value(x), g.value(weight), bias.map(|b| g.value(b)), &geo);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(g.record(
        "conv2d",
        &inputs,
        out,
        Box::new(move |args| {
            let need_b = args.needs.get(2).copied().unwrap_or(false);
            let (dx, dw, db) = backward_impl(
                args.inputs[0],
                args.inputs[1],
                args.grad,
                &geo,
                (args.needs[0], args.needs[1], need_b),
            );
            let mut grads = vec![dx, dw];
            if args.inputs.len() == 3 {
                grads.push(db);
            }
            grads
        }),
    ))
}

//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.kh) / self.stride + 1,
            (self.w + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` is inside the image.
fn valid_span(out: usize, size: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if size + pad > k {
        (size + pad - k).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds the channels of one group of one image into `cols`
/// (`cin_g*kh*kw` rows by `ho*wo` columns).
fn im2col<F: Scalar>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let (s, p) = (g.stride, g.padding);
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(ho, g.h, s, ki, p);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(wo, g.w, s, kj, p);
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                dst[..ylo * wo].fill(F::zero());
                dst[yhi * wo..].fill(F::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    drow[..xlo].fill(F::zero());
                    drow[xhi..].fill(F::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let x0 = xlo * s + kj - p;
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        drow[xlo..xhi].copy_from_slice(&srow[x0..x0 + xhi - xlo]);
                    } else {
                        let span = &srow[x0..x0 + (xhi - xlo - 1) * s + 1];
                        for (i, d) in drow[xlo..xhi].iter_mut().enumerate() {
                            *d = span[i * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `img`.
fn col2im<F: Scalar>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let (s, p) = (g.stride, g.padding);
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(ho, g.h, s, ki, p);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(wo, g.w, s, kj, p);
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                if xlo == xhi {
                    continue;
                }
                let x0 = xlo * s + kj - p;
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let srow = &src[oy * wo + xlo..oy * wo + xhi];
                    let start = iy * g.w + x0;
                    let prow = &mut plane[start..start + (srow.len() - 1) * s + 1];
                    for (i, &v) in srow.iter().enumerate() {
                        prow[i * s] += v;
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin && self.cout == self.cin
    }
}

/// Calls `f(y_out, y_in, x_out_range, x_in_start, tap)` for every kernel tap and
/// output row whose receptive field row is inside the image.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, (usize, usize), usize, usize)) {
    let (ho, wo) = g.out_hw();
    let (s, p) = (g.stride, g.padding);
    for ki in 0..g.kh {
        let (ylo, yhi) = valid_span(ho, g.h, s, ki, p);
        for kj in 0..g.kw {
            let (xlo, xhi) = valid_span(wo, g.w, s, kj, p);
            if xlo == xhi {
                continue;
            }
            let x0 = xlo * s + kj - p;
            for oy in ylo..yhi {
                f(oy, oy * s + ki - p, (xlo, xhi), x0, ki * g.kw + kj);
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<F>() + tail
}

fn depthwise_forward<F: Scalar>(g: &ConvGeom, x: &[F], wgt: &[F], out: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let taps = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(n * g.cin + c) * ho * wo..][..ho * wo];
            let k = &wgt[c * taps..(c + 1) * taps];
            for_each_tap(g, |oy, iy, (xlo, xhi), x0, t| {
                let drow = &mut dst[oy * wo + xlo..oy * wo + xhi];
                let kt = k[t];
                if g.stride == 1 {
                    let srow = &plane[iy * g.w + x0..iy * g.w + x0 + drow.len()];
                    for (d, &v) in drow.iter_mut().zip(srow) {
                        *d += kt * v;
                    }
                } else {
                    let srow = plane[iy * g.w + x0..].iter().step_by(g.stride);
                    for (d, &v) in drow.iter_mut().zip(srow) {
                        *d += kt * v;
                    }
                }
            });
        }
    }
}

fn depthwise_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    wgt: &[F],
    gout: &[F],
    mut gx: Option<&mut [F]>,
    mut gw: Option<&mut [F]>,
) {
    let (ho, wo) = g.out_hw();
    let taps = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let in_off = (n * g.cin + c) * g.h * g.w;
            let plane = &x[in_off..in_off + g.h * g.w];
            let gy = &gout[(n * g.cin + c) * ho * wo..][..ho * wo];
            let k = &wgt[c * taps..(c + 1) * taps];
            let mut gk = vec![F::zero(); taps];
            let mut gplane = gx.as_mut().map(|gx| &mut gx[in_off..in_off + g.h * g.w]);
            for_each_tap(g, |oy, iy, (xlo, xhi), x0, t| {
                let grow = &gy[oy * wo + xlo..oy * wo + xhi];
                let kt = k[t];
                let start = iy * g.w + x0;
                if g.stride == 1 {
                    let srow = &plane[start..start + grow.len()];
                    gk[t] += dot(grow, srow);
                    if let Some(gp) = gplane.as_mut() {
                        for (d, &v) in gp[start..start + grow.len()].iter_mut().zip(grow) {
                            *d += kt * v;
                        }
                    }
                } else {
                    let srow = plane[start..].iter().step_by(g.stride);
                    gk[t] += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<F>();
                    if let Some(gp) = gplane.as_mut() {
                        for (d, &v) in gp[start..].iter_mut().step_by(g.stride).zip(grow) {
                            *d += kt * v;
                        }
                    }
                }
            });
            if let Some(gw) = gw.as_mut() {
                for (a, b) in gw[c * taps..(c + 1) * taps].iter_mut().zip(&gk) {
                    *a += *b;
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(g: &ConvGeom, x: &[F], wgt: &[F], bias: Option<&[F]>) -> Vec<F> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut out = vec![F::zero(); g.n * g.cout * hw];
    if g.is_depthwise() {
        depthwise_forward(g, x, wgt, &mut out);
        add_bias(g, bias, &mut out);
        return out;
    }
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); rows * hw]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let img_off = (n * g.cin + grp * cin_g) * g.h * g.w;
            let img = &x[img_off..img_off + cin_g * g.h * g.w];
            let src: &[F] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            let w_g = &wgt[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let out_off = (n * g.cout + grp * cout_g) * hw;
            F::gemm(
                cout_g,
                rows,
                hw,
                F::one(),
                w_g,
                (rows as isize, 1),
                src,
                (hw as isize, 1),
                F::zero(),
                &mut out[out_off..out_off + cout_g * hw],
                (hw as isize, 1),
            );
        }
    }
    add_bias(g, bias, &mut out);
    out
}

fn add_bias<F: Scalar>(g: &ConvGeom, bias: Option<&[F]>, out: &mut [F]) {
    let (ho, wo) = g.out_hw();
    if let Some(b) = bias {
        for (i, plane) in out.chunks_mut(ho * wo).enumerate() {
            let bv = b[i % g.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    wgt: &[F],
    gout: &[F],
    want: (bool, bool, bool),
) -> ConvGrads<F> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut gx = want.0.then(|| vec![F::zero(); x.len()]);
    let mut gw = want.1.then(|| vec![F::zero(); wgt.len()]);
    let gb = want.2.then(|| {
        let mut b = vec![F::zero(); g.cout];
        for n in 0..g.n {
            for (co, bv) in b.iter_mut().enumerate() {
                let off = (n * g.cout + co) * hw;
                *bv += gout[off..off + hw].iter().copied().sum::<F>();
            }
        }
        b
    });
    if g.is_depthwise() {
        depthwise_backward(g, x, wgt, gout, gx.as_deref_mut(), gw.as_deref_mut());
        return ConvGrads {
            input: gx,
            weight: gw,
            bias: gb,
        };
    }
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![F::zero(); rows * hw]
    };
    let mut dcols = if pointwise || gx.is_none() {
        Vec::new()
    } else {
        vec![F::zero(); rows * hw]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let img_off = (n * g.cin + grp * cin_g) * g.h * g.w;
            let img_len = cin_g * g.h * g.w;
            let out_off = (n * g.cout + grp * cout_g) * hw;
            let gy = &gout[out_off..out_off + cout_g * hw];
            let w_off = grp * cout_g * rows;
            if let Some(gw) = gw.as_mut() {
                let src: &[F] = if pointwise {
                    &x[img_off..img_off + img_len]
                } else {
                    im2col(g, &x[img_off..img_off + img_len], &mut cols);
                    &cols
                };
                // dW[cout_g, rows] += dY[cout_g, hw] * cols^T[hw, rows]
                F::gemm(
                    cout_g,
                    hw,
                    rows,
                    F::one(),
                    gy,
                    (hw as isize, 1),
                    src,
                    (1, hw as isize),
                    F::one(),
                    &mut gw[w_off..w_off + cout_g * rows],
                    (rows as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let w_g = &wgt[w_off..w_off + cout_g * rows];
                // dcols[rows, hw] = W^T[rows, cout_g] * dY[cout_g, hw]
                let dst = &mut gx[img_off..img_off + img_len];
                if pointwise {
                    F::gemm(
                        rows,
                        cout_g,
                        hw,
                        F::one(),
                        w_g,
                        (1, rows as isize),
                        gy,
                        (hw as isize, 1),
                        F::one(),
                        dst,
                        (hw as isize, 1),
                    );
                } else {
                    F::gemm(
                        rows,
                        cout_g,
                        hw,
                        F::one(),
                        w_g,
                        (1, rows as isize),
                        gy,
                        (hw as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (hw as isize, 1),
                    );
                    col2im(g, &dcols, dst);
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Source taps for one axis of a half-pixel bilinear resize.
#[derive(Clone, Debug)]
pub struct LerpTable<F> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<F>,
}

pub fn lerp_table<F: Scalar>(src: usize, dst: usize) -> LerpTable<F> {
    let scale = src as f64 / dst as f64;
    let mut t = LerpTable {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for d in 0..dst {
        let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(F::from_f64_lossy(pos - lo as f64));
    }
    t
}

pub fn bilinear_forward<F: Scalar>(
    x: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ty: &LerpTable<F>,
    tx: &LerpTable<F>,
) -> Vec<F> {
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (F::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<F: Scalar>(
    gout: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ty: &LerpTable<F>,
    tx: &LerpTable<F>,
) -> Vec<F> {
    let mut gx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * ow + ox];
                let (top, bot) = (v * (F::one() - fy), v * fy);
                dst[y0 * w + x0] += top * (F::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (F::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    gx
}

/// Nearest-neighbour source index for each destination position.
pub fn nearest_table(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|d| (d * src / dst).min(src - 1)).collect()
}

/// Element strides of `shape` (rank 4) with zero stride on broadcast extents of size 1
/// relative to `target`.
pub fn broadcast_strides(shape: [usize; 4], target: [usize; 4]) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if shape[d] == 1 && target[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Broadcast iteration in blocks: `f(i0, j0, len, contiguous)` covers
/// target indices `i0..i0 + len`, matched either to `src[j0..j0 + len]` or,
/// when not `contiguous`, to the single element `src[j0]`.
pub fn for_each_broadcast_block(
    target: [usize; 4],
    src: [usize; 4],
    mut f: impl FnMut(usize, usize, usize, bool),
) {
    let s = broadcast_strides(src, target);
    let same = |d: usize| src[d] == target[d] || target[d] == 1;
    let bcast = |d: usize| src[d] == 1;
    let contiguous = same(3);
    let mut split = 4;
    while split > 0 && (if contiguous { same(split - 1) } else { bcast(split - 1) }) {
        split -= 1;
    }
    let len: usize = target[split..].iter().product();
    let mut outer = [1usize; 4];
    outer[..split].copy_from_slice(&target[..split]);
    let mut i = 0;
    for a in 0..outer[0] {
        for b in 0..outer[1] {
            for c in 0..outer[2] {
                for d in 0..outer[3] {
                    let j = a * s[0] + b * s[1] + c * s[2] + d * s[3];
                    f(i, j, len, contiguous);
                    i += len;
                }
            }
        }
    }
}

//! Raw kernels over flat `(N, C, H, W, D)` buffers.
//!
//! Convolution is lowered to im2col followed by a matrix product. Every output
//! element is reduced in a fixed order, so results are bitwise reproducible.

/// `C = alpha * A * B + beta * C` with arbitrary (non-negative) strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 { 0 } else { (rows - 1) * rs + (cols - 1) * cs + 1 }
    };
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every index the routine touches; A, B and C
    // come from distinct borrows so C does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a cubic-kernel 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &i) in out.iter_mut().zip(&self.input) {
            let span = i + 2 * self.padding;
            if span < self.kernel || self.stride == 0 {
                return None;
            }
            *o = (span - self.kernel) / self.stride + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_shiftable(&self) -> bool {
        self.stride == 1 && self.kernel > 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }
}

/// Unfolds one sample into a `(C*k^3) x (Ho*Wo*Do)` row-major matrix.
fn im2col(x: &[f64], g: &ConvGeometry, out: [usize; 3], col: &mut [f64]) {
    let [h, w, d] = g.input;
    let [ho, wo, dout] = out;
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let so = ho * wo * dout;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * h * w * d..(c + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let dst = &mut col[row * so..(row + 1) * so];
                    row += 1;
                    // Valid output depth range for this tap.
                    let (od_lo, od_hi) = valid_range(dout, d, s, kd as isize - p);
                    for oh in 0..ho {
                        let ih = (oh * s) as isize + kh as isize - p;
                        for ow in 0..wo {
                            let base = (oh * wo + ow) * dout;
                            let seg = &mut dst[base..base + dout];
                            let iw = (ow * s) as isize + kw as isize - p;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize || od_lo >= od_hi {
                                seg.fill(0.0);
                                continue;
                            }
                            seg[..od_lo].fill(0.0);
                            seg[od_hi..].fill(0.0);
                            let src = &xc[(ih as usize * w + iw as usize) * d..];
                            let off = kd as isize - p;
                            if s == 1 {
                                let start = (od_lo as isize + off) as usize;
                                seg[od_lo..od_hi].copy_from_slice(&src[start..start + (od_hi - od_lo)]);
                            } else {
                                for (od, v) in seg.iter_mut().enumerate().take(od_hi).skip(od_lo) {
                                    *v = src[((od * s) as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates a column matrix back onto one sample's input gradient.
fn col2im(col: &[f64], g: &ConvGeometry, out: [usize; 3], dx: &mut [f64]) {
    let [h, w, d] = g.input;
    let [ho, wo, dout] = out;
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let so = ho * wo * dout;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &mut dx[c * h * w * d..(c + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let src = &col[row * so..(row + 1) * so];
                    row += 1;
                    let (od_lo, od_hi) = valid_range(dout, d, s, kd as isize - p);
                    if od_lo >= od_hi {
                        continue;
                    }
                    let off = kd as isize - p;
                    for oh in 0..ho {
                        let ih = (oh * s) as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * s) as isize + kw as isize - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let seg = &src[(oh * wo + ow) * dout..(oh * wo + ow + 1) * dout];
                            let dst = &mut xc[(ih as usize * w + iw as usize) * d..];
                            for od in od_lo..od_hi {
                                dst[((od * s) as isize + off) as usize] += seg[od];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*s + off < len`.
fn valid_range(out_len: usize, len: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let max_src = len as isize - 1 - off;
    let hi = if max_src < 0 { 0 } else { (max_src as usize / s + 1).min(out_len) };
    (lo.min(out_len), hi.max(lo.min(out_len)))
}

/// Cross-correlation with zero padding. `weight` is `(Co, Ci, k, k, k)`.
pub fn conv3d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let out = g.output().expect("validated geometry");
    let [h, w, d] = g.input;
    let si = h * w * d;
    let so: usize = out.iter().product();
    let kk = g.patch_len();
    if g.is_shiftable() {
        return shifted_forward(x, weight, bias, g, out);
    }
    let mut y = vec![0.0; g.batch * g.out_channels * so];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * so] };
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * si..(n + 1) * g.in_channels * si];
        let yn = &mut y[n * g.out_channels * so..(n + 1) * g.out_channels * so];
        let cols: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, out, &mut col);
            &col
        };
        gemm(g.out_channels, kk, so, 1.0, weight, (kk, 1), cols, (so, 1), 0.0, yn, (so, 1));
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                yn[co * so..(co + 1) * so].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Gradients of [`conv3d_forward`]: `(dx, dweight, dbias)`. `dx` is skipped when
/// `need_input_grad` is false.
pub fn conv3d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_input_grad: bool,
    need_bias_grad: bool,
) -> ConvGrads {
    let out = g.output().expect("validated geometry");
    let [h, w, d] = g.input;
    let si = h * w * d;
    let so: usize = out.iter().product();
    let kk = g.patch_len();
    if g.is_shiftable() {
        return shifted_backward(x, weight, dy, g, out, need_input_grad, need_bias_grad);
    }
    let mut dw = vec![0.0; g.out_channels * kk];
    let mut dx = need_input_grad.then(|| vec![0.0; g.batch * g.in_channels * si]);
    let mut db = need_bias_grad.then(|| vec![0.0; g.out_channels]);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * so] };
    let mut dcol = if pointwise || !need_input_grad { Vec::new() } else { vec![0.0; kk * so] };
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * si..(n + 1) * g.in_channels * si];
        let dyn_ = &dy[n * g.out_channels * so..(n + 1) * g.out_channels * so];
        let cols: &[f64] = if pointwise {
            xn
        } else {
            im2col(xn, g, out, &mut col);
            &col
        };
        // dW += dY (Co x So) * col^T (So x K)
        gemm(g.out_channels, so, kk, 1.0, dyn_, (so, 1), cols, (1, so), 1.0, &mut dw, (kk, 1));
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dyn_[co * so..(co + 1) * so].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_channels * si..(n + 1) * g.in_channels * si];
            if pointwise {
                gemm(kk, g.out_channels, so, 1.0, weight, (1, kk), dyn_, (so, 1), 0.0, dxn, (so, 1));
            } else {
                gemm(kk, g.out_channels, so, 1.0, weight, (1, kk), dyn_, (so, 1), 0.0, &mut dcol, (so, 1));
                col2im(&dcol, g, out, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Stride-1 convolution on a zero-padded copy of the input. Each tap is one
/// gemm against the padded buffer at a fixed offset; outputs live on the padded
/// `(W, D)` pitch and are cropped afterwards.
struct Shifted {
    padded: [usize; 3],
    np: usize,
    span: usize,
    taps: Vec<usize>,
}

impl Shifted {
    fn new(g: &ConvGeometry, out: [usize; 3]) -> Self {
        let p = g.padding;
        let padded = g.input.map(|v| v + 2 * p);
        let [hp, wp, dp] = padded;
        let [ho, wo, dout] = out;
        let span = (ho - 1) * wp * dp + (wo - 1) * dp + dout;
        let k = g.kernel;
        let mut taps = Vec::with_capacity(k * k * k);
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    taps.push((kh * wp + kw) * dp + kd);
                }
            }
        }
        Shifted { padded, np: hp * wp * dp, span, taps }
    }

    fn pad(&self, src: &[f64], channels: usize, dims: [usize; 3], p: usize, dst: &mut [f64]) {
        let [h, w, d] = dims;
        let [_, wp, dp] = self.padded;
        dst.fill(0.0);
        for c in 0..channels {
            let s = &src[c * h * w * d..];
            let t = &mut dst[c * self.np..];
            for ih in 0..h {
                for iw in 0..w {
                    let o = ((ih + p) * wp + iw + p) * dp + p;
                    t[o..o + d].copy_from_slice(&s[(ih * w + iw) * d..(ih * w + iw + 1) * d]);
                }
            }
        }
    }

    /// Moves rows of pitch `(wp, dp)` to a dense `(ho, wo, dout)` layout, or back.
    fn crop(&self, wide: &mut [f64], pitch: usize, dense: &mut [f64], channels: usize, out: [usize; 3], to_dense: bool) {
        let [ho, wo, dout] = out;
        let [_, wp, dp] = self.padded;
        let so = ho * wo * dout;
        for c in 0..channels {
            for oh in 0..ho {
                for ow in 0..wo {
                    let a = c * pitch + (oh * wp + ow) * dp;
                    let b = c * so + (oh * wo + ow) * dout;
                    if to_dense {
                        dense[b..b + dout].copy_from_slice(&wide[a..a + dout]);
                    } else {
                        wide[a..a + dout].copy_from_slice(&dense[b..b + dout]);
                    }
                }
            }
        }
    }
}

fn shifted_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry, out: [usize; 3]) -> Vec<f64> {
    let sh = Shifted::new(g, out);
    let si: usize = g.input.iter().product();
    let so: usize = out.iter().product();
    let k3 = g.kernel.pow(3);
    let (ci, co) = (g.in_channels, g.out_channels);
    let mut xpad = vec![0.0; ci * sh.np];
    let mut wide = vec![0.0; co * sh.span];
    let mut y = vec![0.0; g.batch * co * so];
    for n in 0..g.batch {
        sh.pad(&x[n * ci * si..(n + 1) * ci * si], ci, g.input, g.padding, &mut xpad);
        for (t, &off) in sh.taps.iter().enumerate() {
            let beta = if t == 0 { 0.0 } else { 1.0 };
            gemm(co, ci, sh.span, 1.0, &weight[t..], (ci * k3, k3), &xpad[off..], (sh.np, 1), beta, &mut wide, (sh.span, 1));
        }
        let yn = &mut y[n * co * so..(n + 1) * co * so];
        sh.crop(&mut wide, sh.span, yn, co, out, true);
        if let Some(b) = bias {
            for (c, bv) in b.iter().enumerate() {
                yn[c * so..(c + 1) * so].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

const CHUNK: usize = 512;

type ConvGrads = (Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>);

fn shifted_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    out: [usize; 3],
    need_input_grad: bool,
    need_bias_grad: bool,
) -> ConvGrads {
    let sh = Shifted::new(g, out);
    let si: usize = g.input.iter().product();
    let so: usize = out.iter().product();
    let k3 = g.kernel.pow(3);
    let (ci, co) = (g.in_channels, g.out_channels);
    let [h, w, d] = g.input;
    let [_, wp, dp] = sh.padded;
    let p = g.padding;
    let mut xpad = vec![0.0; ci * sh.np];
    let mut wide = vec![0.0; co * sh.span];
    let mut dxpad = if need_input_grad { vec![0.0; ci * sh.np] } else { Vec::new() };
    let mut dw = vec![0.0; co * ci * k3];
    let mut cols = vec![0.0; ci * k3 * CHUNK];
    let mut dx = need_input_grad.then(|| vec![0.0; g.batch * ci * si]);
    let mut db = need_bias_grad.then(|| vec![0.0; co]);
    for n in 0..g.batch {
        sh.pad(&x[n * ci * si..(n + 1) * ci * si], ci, g.input, p, &mut xpad);
        let mut dyn_ = dy[n * co * so..(n + 1) * co * so].to_vec();
        // Off-grid positions of the wide buffer stay zero.
        wide.fill(0.0);
        sh.crop(&mut wide, sh.span, &mut dyn_, co, out, false);
        if let Some(db) = db.as_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyn_[c * so..(c + 1) * so].iter().sum::<f64>();
            }
        }
        let kk = ci * k3;
        let mut q0 = 0;
        while q0 < sh.span {
            let q = CHUNK.min(sh.span - q0);
            for c in 0..ci {
                for (t, &off) in sh.taps.iter().enumerate() {
                    let src = c * sh.np + off + q0;
                    cols[(c * k3 + t) * CHUNK..][..q].copy_from_slice(&xpad[src..src + q]);
                }
            }
            gemm(co, q, kk, 1.0, &wide[q0..], (sh.span, 1), &cols, (1, CHUNK), 1.0, &mut dw, (kk, 1));
            q0 += q;
        }
        if let Some(dx) = dx.as_mut() {
            dxpad.fill(0.0);
            for (t, &off) in sh.taps.iter().enumerate() {
                gemm(ci, co, sh.span, 1.0, &weight[t..], (k3, ci * k3), &wide, (sh.span, 1), 1.0, &mut dxpad[off..], (sh.np, 1));
            }
            let dxn = &mut dx[n * ci * si..(n + 1) * ci * si];
            for c in 0..ci {
                for ih in 0..h {
                    for iw in 0..w {
                        let a = c * sh.np + ((ih + p) * wp + iw + p) * dp + p;
                        let b = c * si + (ih * w + iw) * d;
                        dxn[b..b + d].copy_from_slice(&dxpad[a..a + d]);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Output spatial dims of a 2x2x2 / stride-2 pool (odd extents truncated).
pub fn pool2_output(input: [usize; 3]) -> [usize; 3] {
    input.map(|v| v / 2)
}

/// 2x2x2 average pooling with stride 2 over `planes = N*C` volumes.
pub fn avg_pool2_forward(x: &[f64], planes: usize, input: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = input;
    let [ho, wo, dout] = pool2_output(input);
    let mut y = vec![0.0; planes * ho * wo * dout];
    for p in 0..planes {
        let xp = &x[p * h * w * d..(p + 1) * h * w * d];
        let yp = &mut y[p * ho * wo * dout..(p + 1) * ho * wo * dout];
        for oh in 0..ho {
            for ow in 0..wo {
                for od in 0..dout {
                    let mut acc = 0.0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let base = ((2 * oh + dh) * w + 2 * ow + dw) * d + 2 * od;
                            acc += xp[base] + xp[base + 1];
                        }
                    }
                    yp[(oh * wo + ow) * dout + od] = acc / 8.0;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &[f64], planes: usize, input: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = input;
    let [ho, wo, dout] = pool2_output(input);
    let mut dx = vec![0.0; planes * h * w * d];
    for p in 0..planes {
        let dxp = &mut dx[p * h * w * d..(p + 1) * h * w * d];
        let dyp = &dy[p * ho * wo * dout..(p + 1) * ho * wo * dout];
        for oh in 0..ho {
            for ow in 0..wo {
                for od in 0..dout {
                    let g = dyp[(oh * wo + ow) * dout + od] / 8.0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let base = ((2 * oh + dh) * w + 2 * ow + dw) * d + 2 * od;
                            dxp[base] += g;
                            dxp[base + 1] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

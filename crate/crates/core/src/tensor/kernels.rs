//! Raw forward/backward loops over flat buffers. The tape wires these up;
//! nothing in here knows about gradients being optional.

/// Spatial dims of an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Self { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Nchw,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.input.n, self.k, self.oh, self.ow]
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.input.w);
        // ix = ox*s + kx - p must satisfy 0 <= ix < w
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let (s, p, h) = (self.stride, self.pad, self.input.h);
        let lo = if ky >= p { 0 } else { (p - ky).div_ceil(s) };
        let hi = if h + p > ky { ((h + p - ky - 1) / s + 1).min(self.oh) } else { 0 };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let Nchw { n, c, h: ih, w: iw } = g.input;
    let (oh, ow) = (g.oh, g.ow);
    let mut out = vec![0.0; n * g.k * oh * ow];
    for b in 0..n {
        for k in 0..g.k {
            let o_plane = &mut out[(b * g.k + k) * oh * ow..][..oh * ow];
            for ch in 0..c {
                let x_plane = &x[(b * c + ch) * ih * iw..][..ih * iw];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.oy_range(ky);
                    for kx in 0..g.kw {
                        let wv = w[((k * c + ch) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.ox_range(kx);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o_plane[oy * ow..][..ow];
                            let xrow = &x_plane[iy * iw..][..iw];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the input and kernel gradients of a convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let Nchw { n, c, h: ih, w: iw } = g.input;
    let (oh, ow) = (g.oh, g.ow);
    for b in 0..n {
        for k in 0..g.k {
            let d_plane = &dout[(b * g.k + k) * oh * ow..][..oh * ow];
            for ch in 0..c {
                let x_off = (b * c + ch) * ih * iw;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.oy_range(ky);
                    for kx in 0..g.kw {
                        let widx = ((k * c + ch) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = g.ox_range(kx);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &d_plane[oy * ow..][..ow];
                            let row_off = x_off + iy * iw;
                            if let Some(dx) = dx.as_deref_mut() {
                                for ox in ox0..ox1 {
                                    dx[row_off + ox * g.stride + kx - g.pad] += wv * drow[ox];
                                }
                            }
                            if dw.is_some() {
                                for ox in ox0..ox1 {
                                    acc += drow[ox] * x[row_off + ox * g.stride + kx - g.pad];
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
    }
}

/// The four taps of a border-clamped bilinear lookup at `(x, y)` on an
/// `h × w` grid, as `(flat index, weight)`. Cell `(i, j)` sits at `x = j`,
/// `y = i`. Weights always sum to one.
pub fn bilinear_weights(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// An axis-aligned region on a feature map, in grid coordinates.
///
/// `batch` selects the sample of an NCHW map. The box spans
/// `[cx - w/2, cx + w/2] × [cy - l/2, cy + l/2]`; cell centers sit at
/// integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
}

impl RoiBox {
    pub fn new(batch: usize, cx: f64, cy: f64, w: f64, l: f64) -> Self {
        Self { batch, cx, cy, w, l }
    }

    /// Sample points of an `r × r` RoI-Align grid, one per bin center, row-major.
    pub fn sample_points(&self, r: usize) -> Vec<(f64, f64)> {
        let w = self.w.max(1.0);
        let l = self.l.max(1.0);
        let x0 = self.cx - w / 2.0;
        let y0 = self.cy - l / 2.0;
        let (bw, bl) = (w / r as f64, l / r as f64);
        let mut pts = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                pts.push((x0 + (j as f64 + 0.5) * bw, y0 + (i as f64 + 0.5) * bl));
            }
        }
        pts
    }

    /// Grid cells whose centers fall inside the box (clamped to the map),
    /// never empty: falls back to the cell nearest the box center.
    pub fn covered_cells(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let clampi = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
        let x0 = (self.cx - self.w / 2.0).ceil();
        let x1 = (self.cx + self.w / 2.0).floor();
        let y0 = (self.cy - self.l / 2.0).ceil();
        let y1 = (self.cy + self.l / 2.0).floor();
        let mut cells = Vec::new();
        if x0 <= x1 && y0 <= y1 {
            let (xa, xb) = (clampi(x0, w) as usize, clampi(x1, w) as usize);
            let (ya, yb) = (clampi(y0, h) as usize, clampi(y1, h) as usize);
            for i in ya..=yb {
                for j in xa..=xb {
                    cells.push((i, j));
                }
            }
        }
        if cells.is_empty() {
            cells.push((clampi(self.cy.round(), h) as usize, clampi(self.cx.round(), w) as usize));
        }
        cells
    }
}

pub(crate) fn roi_align_forward(x: &[f64], dims: Nchw, boxes: &[RoiBox], r: usize) -> Vec<f64> {
    let plane = dims.plane();
    let mut out = vec![0.0; boxes.len() * dims.c * r * r];
    for (p, b) in boxes.iter().enumerate() {
        for (s, &(sx, sy)) in b.sample_points(r).iter().enumerate() {
            let taps = bilinear_weights(dims.h, dims.w, sx, sy);
            for ch in 0..dims.c {
                let src = &x[(b.batch * dims.c + ch) * plane..][..plane];
                out[(p * dims.c + ch) * r * r + s] = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
            }
        }
    }
    out
}

pub(crate) fn roi_align_backward(dout: &[f64], dims: Nchw, boxes: &[RoiBox], r: usize, dx: &mut [f64]) {
    let plane = dims.plane();
    for (p, b) in boxes.iter().enumerate() {
        for (s, &(sx, sy)) in b.sample_points(r).iter().enumerate() {
            let taps = bilinear_weights(dims.h, dims.w, sx, sy);
            for ch in 0..dims.c {
                let g = dout[(p * dims.c + ch) * r * r + s];
                let dst = &mut dx[(b.batch * dims.c + ch) * plane..][..plane];
                for &(i, wt) in &taps {
                    dst[i] += wt * g;
                }
            }
        }
    }
}

/// Softmax over axis 1 of an NCHW buffer with temperature `tau`.
pub(crate) fn channel_softmax_forward(x: &[f64], dims: Nchw, tau: f64) -> Vec<f64> {
    let plane = dims.plane();
    let mut out = vec![0.0; x.len()];
    for b in 0..dims.n {
        let base = b * dims.c * plane;
        for s in 0..plane {
            let at = |ch: usize| base + ch * plane + s;
            let m = (0..dims.c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..dims.c {
                let e = ((x[at(ch)] - m) / tau).exp();
                out[at(ch)] = e;
                z += e;
            }
            for ch in 0..dims.c {
                out[at(ch)] /= z;
            }
        }
    }
    out
}

pub(crate) fn channel_softmax_backward(y: &[f64], dy: &[f64], dims: Nchw, tau: f64, dx: &mut [f64]) {
    let plane = dims.plane();
    for b in 0..dims.n {
        let base = b * dims.c * plane;
        for s in 0..plane {
            let at = |ch: usize| base + ch * plane + s;
            let dot: f64 = (0..dims.c).map(|ch| y[at(ch)] * dy[at(ch)]).sum();
            for ch in 0..dims.c {
                dx[at(ch)] += y[at(ch)] * (dy[at(ch)] - dot) / tau;
            }
        }
    }
}

/// Softmax over the spatial positions of each `(n, c)` plane.
pub(crate) fn spatial_softmax_forward(x: &[f64], dims: Nchw, tau: f64) -> Vec<f64> {
    let plane = dims.plane();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ((v - m) / tau).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

pub(crate) fn spatial_softmax_backward(y: &[f64], dy: &[f64], dims: Nchw, tau: f64, dx: &mut [f64]) {
    let plane = dims.plane();
    for ((ys, dys), dxs) in y.chunks(plane).zip(dy.chunks(plane)).zip(dx.chunks_mut(plane)) {
        let dot: f64 = ys.iter().zip(dys).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
            *d += yv * (g - dot) / tau;
        }
    }
}

/// Per-channel statistics over (N, H, W).
pub(crate) fn channel_stats(x: &[f64], dims: Nchw) -> (Vec<f64>, Vec<f64>) {
    let plane = dims.plane();
    let m = (dims.n * plane) as f64;
    let mut mean = vec![0.0; dims.c];
    let mut var = vec![0.0; dims.c];
    for ch in 0..dims.c {
        let mut s = 0.0;
        for b in 0..dims.n {
            s += x[(b * dims.c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..dims.n {
            v += x[(b * dims.c + ch) * plane..][..plane]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

pub(crate) fn upsample2x_forward(x: &[f64], dims: Nchw) -> Vec<f64> {
    let (h, w) = (dims.h, dims.w);
    let mut out = vec![0.0; x.len() * 4];
    for (p, src) in x.chunks(h * w).enumerate() {
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dout: &[f64], dims: Nchw, dx: &mut [f64]) {
    let (h, w) = (dims.h, dims.w);
    for (p, dst) in dx.chunks_mut(h * w).enumerate() {
        let src = &dout[p * 4 * h * w..][..4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
}

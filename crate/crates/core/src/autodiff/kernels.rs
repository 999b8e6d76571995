//! Slice-level convolution and pooling kernels.
//!
//! All loops run in a fixed order, so results are bit-reproducible.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvCfg {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            ..Self::default()
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one spatial axis, or `None` if the kernel does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolCfg {
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel && self.padding < self.kernel)
            .then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Padding cells are excluded from the divisor.
    Avg,
}

/// Range of output positions `o` such that `o * stride + offset` lies in `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let last = extent as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        (last / s + 1).min(out as isize)
    };
    let lo = lo.min(out as isize);
    (lo as usize, hi.max(lo) as usize)
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn cpg(&self, cfg: &ConvCfg) -> usize {
        self.c / cfg.groups
    }

    fn fpg(&self, cfg: &ConvCfg) -> usize {
        self.f / cfg.groups
    }
}

/// Visit every (input index, weight index, output index) triple of a convolution,
/// row segment at a time: `f(in_row, w_idx, out_row, iw0, ow_lo, ow_hi)`.
#[inline]
fn for_each_tap(
    d: &ConvDims,
    cfg: &ConvCfg,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let cpg = d.cpg(cfg);
    let fpg = d.fpg(cfg);
    let s = cfg.stride;
    for n in 0..d.n {
        for fo in 0..d.f {
            let g = fo / fpg;
            let out_plane = (n * d.f + fo) * d.ho * d.wo;
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let in_plane = (n * d.c + c) * d.h * d.w;
                for kh in 0..d.k {
                    let off_h = (kh * cfg.dilation) as isize - cfg.padding as isize;
                    let (oh_lo, oh_hi) = valid_range(d.ho, s, off_h, d.h);
                    for kw in 0..d.k {
                        let off_w = (kw * cfg.dilation) as isize - cfg.padding as isize;
                        let (ow_lo, ow_hi) = valid_range(d.wo, s, off_w, d.w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let w_idx = ((fo * cpg + ci) * d.k + kh) * d.k + kw;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + off_h;
                            let in_row = in_plane + ih as usize * d.w;
                            let out_row = out_plane + oh * d.wo;
                            let iw0 = (ow_lo * s) as isize + off_w;
                            f(in_row, w_idx, out_row, iw0 as usize, ow_lo, ow_hi);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    d: &ConvDims,
    cfg: &ConvCfg,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.n * d.f * plane];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b[i % d.f]);
        }
    }
    let s = cfg.stride;
    for_each_tap(d, cfg, |in_row, w_idx, out_row, iw0, lo, hi| {
        let wv = w[w_idx];
        let dst = &mut out[out_row + lo..out_row + hi];
        if s == 1 {
            let src = &x[in_row + iw0..in_row + iw0 + (hi - lo)];
            for (o, i) in dst.iter_mut().zip(src) {
                *o += wv * i;
            }
        } else {
            for (j, o) in dst.iter_mut().enumerate() {
                *o += wv * x[in_row + iw0 + j * s];
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input(
    d: &ConvDims,
    cfg: &ConvCfg,
    w: &[f64],
    gout: &[f64],
    gx: &mut [f64],
) {
    let s = cfg.stride;
    for_each_tap(d, cfg, |in_row, w_idx, out_row, iw0, lo, hi| {
        let wv = w[w_idx];
        let src = &gout[out_row + lo..out_row + hi];
        for (j, g) in src.iter().enumerate() {
            gx[in_row + iw0 + j * s] += wv * g;
        }
    });
}

pub(crate) fn conv2d_backward_weight(
    d: &ConvDims,
    cfg: &ConvCfg,
    x: &[f64],
    gout: &[f64],
    gw: &mut [f64],
) {
    let s = cfg.stride;
    for_each_tap(d, cfg, |in_row, w_idx, out_row, iw0, lo, hi| {
        let src = &gout[out_row + lo..out_row + hi];
        let mut acc = 0.0;
        for (j, g) in src.iter().enumerate() {
            acc += g * x[in_row + iw0 + j * s];
        }
        gw[w_idx] += acc;
    });
}

pub(crate) fn conv2d_backward_bias(d: &ConvDims, gout: &[f64], gb: &mut [f64]) {
    let plane = d.ho * d.wo;
    for (i, chunk) in gout.chunks(plane).enumerate() {
        gb[i % d.f] += chunk.iter().sum::<f64>();
    }
}

/// Pooling forward over `planes` independent `h x w` planes.
///
/// For max pooling, returns the flat input index chosen for each output
/// (first row-major maximum in the window).
pub(crate) fn pool_forward(
    kind: PoolKind,
    cfg: &PoolCfg,
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(planes * ho * wo);
    }
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            let (h0, h1) = window(oh, cfg, h);
            for ow in 0..wo {
                let (w0, w1) = window(ow, cfg, w);
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                let idx = base + ih * w + iw;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0;
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                acc += x[base + ih * w + iw];
                            }
                        }
                        out.push(acc / ((h1 - h0) * (w1 - w0)) as f64);
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn pool_backward_avg(
    cfg: &PoolCfg,
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    gout: &[f64],
    gx: &mut [f64],
) {
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            let (h0, h1) = window(oh, cfg, h);
            for ow in 0..wo {
                let (w0, w1) = window(ow, cfg, w);
                let g = gout[(p * ho + oh) * wo + ow] / ((h1 - h0) * (w1 - w0)) as f64;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        gx[base + ih * w + iw] += g;
                    }
                }
            }
        }
    }
}

/// Clipped input window `[start, end)` for output position `o`.
#[inline]
fn window(o: usize, cfg: &PoolCfg, extent: usize) -> (usize, usize) {
    let start = (o * cfg.stride) as isize - cfg.padding as isize;
    let end = (start + cfg.kernel as isize).min(extent as isize);
    (start.max(0) as usize, end.max(0) as usize)
}

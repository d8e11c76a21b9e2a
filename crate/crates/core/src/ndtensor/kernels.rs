//! Raw forward/backward loops over flat buffers. Shape checking happens in
//! the callers; everything here assumes consistent geometry.

/// Grouped same-padded convolution over three spatial axes (unit axes are
/// used for 1-D and 2-D cases). Weight layout is
/// `(cout, cin / groups, k0, k1, k2)`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub spatial: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeom {
    fn volume(&self) -> usize {
        self.spatial.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `i` in `0..extent` for which `i + offset` is a valid input index.
#[inline]
fn valid_range(extent: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Visits every (output-row, input-row, tap) triple of one channel pair. The
/// callback receives the tap index, the output row start, the input row
/// start, and the valid `[lo, hi)` range along the innermost axis together
/// with the innermost offset.
#[inline]
fn for_each_tap_row(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let [d0, d1, d2] = g.spatial;
    let [k0, k1, k2] = g.kernel;
    for a in 0..k0 {
        let oa = a as isize - (k0 / 2) as isize;
        let (a_lo, a_hi) = valid_range(d0, oa);
        for b in 0..k1 {
            let ob = b as isize - (k1 / 2) as isize;
            let (b_lo, b_hi) = valid_range(d1, ob);
            for c in 0..k2 {
                let oc = c as isize - (k2 / 2) as isize;
                let (c_lo, c_hi) = valid_range(d2, oc);
                if c_lo >= c_hi {
                    continue;
                }
                let tap = (a * k1 + b) * k2 + c;
                for i in a_lo..a_hi {
                    let si = (i as isize + oa) as usize;
                    for j in b_lo..b_hi {
                        let sj = (j as isize + ob) as usize;
                        f(tap, (i * d1 + j) * d2, (si * d1 + sj) * d2, c_lo, c_hi, oc);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let vol = g.volume();
    let taps = g.taps();
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let mut y = vec![0.0; g.batch * g.cout * vol];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let group = co / cout_g;
            let yc = &mut y[(n * g.cout + co) * vol..][..vol];
            for cl in 0..cin_g {
                let ci = group * cin_g + cl;
                let xc = &x[(n * g.cin + ci) * vol..][..vol];
                let wc = &w[(co * cin_g + cl) * taps..][..taps];
                for_each_tap_row(g, |tap, yo, xo, lo, hi, off| {
                    let wv = wc[tap];
                    if wv == 0.0 {
                        return;
                    }
                    let yr = &mut yc[yo..yo + g.spatial[2]];
                    let xr = &xc[xo..xo + g.spatial[2]];
                    let shift = (lo as isize + off) as usize;
                    for (yv, xv) in yr[lo..hi].iter_mut().zip(&xr[shift..]) {
                        *yv += wv * xv;
                    }
                });
            }
        }
    }
    y
}

/// Returns `(dL/dx, dL/dw)` given `dL/dy`.
pub(crate) fn conv_backward(x: &[f64], w: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let vol = g.volume();
    let taps = g.taps();
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let group = co / cout_g;
            let gyc = &gy[(n * g.cout + co) * vol..][..vol];
            for cl in 0..cin_g {
                let ci = group * cin_g + cl;
                let xoff = (n * g.cin + ci) * vol;
                let woff = (co * cin_g + cl) * taps;
                let xc = &x[xoff..xoff + vol];
                let gxc = &mut gx[xoff..xoff + vol];
                let wc = &w[woff..woff + taps];
                let gwc = &mut gw[woff..woff + taps];
                for_each_tap_row(g, |tap, yo, xo, lo, hi, off| {
                    let wv = wc[tap];
                    let gr = &gyc[yo + lo..yo + hi];
                    let shift = (lo as isize + off) as usize;
                    let xr = &xc[xo + shift..];
                    let mut acc = 0.0;
                    for (gv, xv) in gr.iter().zip(xr) {
                        acc += gv * xv;
                    }
                    gwc[tap] += acc;
                    if wv != 0.0 {
                        let gxr = &mut gxc[xo + shift..];
                        for (gxv, gv) in gxr.iter_mut().zip(gr) {
                            *gxv += wv * gv;
                        }
                    }
                });
            }
        }
    }
    (gx, gw)
}

/// `y = x w^T + b` with `x: (n, fin)`, `w: (fout, fin)`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * fout];
    for r in 0..n {
        let xr = &x[r * fin..][..fin];
        for o in 0..fout {
            let wr = &w[o * fin..][..fin];
            y[r * fout + o] = b[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * fin];
    let mut gw = vec![0.0; fout * fin];
    let mut gb = vec![0.0; fout];
    for r in 0..n {
        let xr = &x[r * fin..][..fin];
        for o in 0..fout {
            let g = gy[r * fout + o];
            gb[o] += g;
            let wr = &w[o * fin..][..fin];
            let gwr = &mut gw[o * fin..][..fin];
            let gxr = &mut gx[r * fin..][..fin];
            for k in 0..fin {
                gwr[k] += g * xr[k];
                gxr[k] += g * wr[k];
            }
        }
    }
    (gx, gw, gb)
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every input element, the flat index of the pooled output cell it
/// falls into. Pooled axes shrink to `ceil(extent / factor)`.
pub(crate) fn pool_index_map(shape: &[usize], axes: &[usize], factor: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = shape[a].div_ceil(factor);
    }
    let out_strides = strides(&out_shape);
    let total: usize = shape.iter().product();
    let mut pooled = vec![false; shape.len()];
    for &a in axes {
        pooled[a] = true;
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut o = 0;
        for (ax, &i) in idx.iter().enumerate() {
            let oi = if pooled[ax] { i / factor } else { i };
            o += oi * out_strides[ax];
        }
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// Normalization statistics. `lead` is the batch size, `channels` the channel
/// count and `inner` the flattened spatial size of a `(lead, channels, inner)`
/// buffer.
#[derive(Clone, Debug)]
pub(crate) struct NormGeom {
    pub lead: usize,
    pub channels: usize,
    pub inner: usize,
    /// `None` = per-channel statistics over batch and space (batch norm);
    /// `Some(g)` = per-sample statistics over `g` channel groups.
    pub groups: Option<usize>,
}

impl NormGeom {
    pub fn stat_count(&self) -> usize {
        match self.groups {
            None => self.channels,
            Some(g) => self.lead * g,
        }
    }

    #[inline]
    pub fn stat_of(&self, n: usize, c: usize) -> usize {
        match self.groups {
            None => c,
            Some(g) => n * g + c / (self.channels / g),
        }
    }

    pub fn members(&self) -> usize {
        match self.groups {
            None => self.lead * self.inner,
            Some(g) => self.channels / g * self.inner,
        }
    }
}

/// Two-pass mean and biased variance per statistic group.
pub(crate) fn norm_stats(x: &[f64], g: &NormGeom) -> (Vec<f64>, Vec<f64>) {
    let k = g.stat_count();
    let m = g.members() as f64;
    let mut mean = vec![0.0; k];
    for n in 0..g.lead {
        for c in 0..g.channels {
            let s = g.stat_of(n, c);
            mean[s] += x[(n * g.channels + c) * g.inner..][..g.inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; k];
    for n in 0..g.lead {
        for c in 0..g.channels {
            let s = g.stat_of(n, c);
            let mu = mean[s];
            var[s] += x[(n * g.channels + c) * g.inner..][..g.inner]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Applies `(x - mean) * inv_std` per statistic group; returns `xhat`.
pub(crate) fn norm_apply(x: &[f64], g: &NormGeom, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..g.lead {
        for c in 0..g.channels {
            let s = g.stat_of(n, c);
            let off = (n * g.channels + c) * g.inner;
            for (o, v) in out[off..off + g.inner].iter_mut().zip(&x[off..off + g.inner]) {
                *o = (v - mean[s]) * inv_std[s];
            }
        }
    }
    out
}

/// Gradient of `xhat` w.r.t. `x` when the statistics were computed from `x`.
pub(crate) fn norm_backward_batch_stats(gxhat: &[f64], xhat: &[f64], g: &NormGeom, inv_std: &[f64]) -> Vec<f64> {
    let k = g.stat_count();
    let m = g.members() as f64;
    let mut sum_g = vec![0.0; k];
    let mut sum_gx = vec![0.0; k];
    for n in 0..g.lead {
        for c in 0..g.channels {
            let s = g.stat_of(n, c);
            let off = (n * g.channels + c) * g.inner;
            for i in off..off + g.inner {
                sum_g[s] += gxhat[i];
                sum_gx[s] += gxhat[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![0.0; gxhat.len()];
    for n in 0..g.lead {
        for c in 0..g.channels {
            let s = g.stat_of(n, c);
            let off = (n * g.channels + c) * g.inner;
            let (mg, mgx) = (sum_g[s] / m, sum_gx[s] / m);
            for i in off..off + g.inner {
                gx[i] = inv_std[s] * (gxhat[i] - mg - xhat[i] * mgx);
            }
        }
    }
    gx
}

/// Bilinear sampling positions with aligned corners: for each output index,
/// the lower source index, the upper source index, and the upper weight.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Numerically stable `log(sum(exp(v)))`.
pub(crate) fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.map(|z| (z - m).exp()).sum::<f64>().ln()
}

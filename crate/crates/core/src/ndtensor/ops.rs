//! Stateless forward primitives on unbatched tensors.
//!
//! The tape (`Tape`) offers the same primitives on batched tensors with
//! gradient recording; these helpers are thin wrappers that add and remove
//! the batch axis.

use crate::error::{Error, Result};
use crate::ndtensor::kernels::{self, ConvGeom, NormGeom};
use crate::ndtensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Standard1d,
    Standard2d,
    Standard3d,
    Depthwise2d,
    Pointwise,
}

impl ConvKind {
    /// Number of spatial axes the kernel spans (pointwise spans none).
    pub fn spatial_rank(self) -> usize {
        match self {
            ConvKind::Standard1d => 1,
            ConvKind::Standard2d | ConvKind::Depthwise2d => 2,
            ConvKind::Standard3d => 3,
            ConvKind::Pointwise => 0,
        }
    }
}

/// Stride-1, zero-padded "same-centered" convolution settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub extent: Vec<usize>,
}

impl ConvSpec {
    pub fn new(kind: ConvKind, extent: Vec<usize>) -> Result<Self> {
        if kind != ConvKind::Pointwise && extent.len() != kind.spatial_rank() {
            return Err(Error::shape(format!(
                "{kind:?} needs {} kernel extents, got {}",
                kind.spatial_rank(),
                extent.len()
            )));
        }
        for (axis, &e) in extent.iter().enumerate() {
            if e % 2 == 0 {
                return Err(Error::shape(format!(
                    "kernel extent {e} on spatial axis {axis} is not odd"
                )));
            }
        }
        Ok(ConvSpec { kind, extent })
    }
}

/// Validates a batched input `(N, C, spatial...)` against a weight tensor
/// and returns the loop geometry.
pub(crate) fn conv_geometry(kind: ConvKind, x: &[usize], w: &[usize]) -> Result<ConvGeom> {
    let sr = kind.spatial_rank();
    if kind == ConvKind::Pointwise {
        if x.len() < 2 || w.len() != 2 {
            return Err(Error::shape(format!(
                "pointwise convolution expects input (N, C, ...) and weight (out, in); got {x:?} and {w:?}"
            )));
        }
    } else if x.len() != sr + 2 || w.len() != sr + 2 {
        return Err(Error::shape(format!(
            "{kind:?} expects rank-{} input and weight; got {x:?} and {w:?}",
            sr + 2
        )));
    }
    let (batch, cin) = (x[0], x[1]);
    let (cout, groups) = match kind {
        ConvKind::Depthwise2d => {
            if w[0] != cin || w[1] != 1 {
                return Err(Error::shape(format!(
                    "channel axis: depthwise weight {w:?} must be ({cin}, 1, ...) for {cin} input channels"
                )));
            }
            (cin, cin)
        }
        _ => {
            if w[1] != cin {
                return Err(Error::shape(format!(
                    "channel axis: input has {cin} channels, weight expects {}",
                    w[1]
                )));
            }
            (w[0], 1)
        }
    };
    for (axis, &e) in w[2..].iter().enumerate() {
        if e % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel extent {e} on spatial axis {axis} is not odd"
            )));
        }
    }
    let (spatial, kernel) = match kind {
        ConvKind::Pointwise => ([1, 1, x[2..].iter().product()], [1, 1, 1]),
        ConvKind::Standard1d => ([1, 1, x[2]], [1, 1, w[2]]),
        ConvKind::Standard2d | ConvKind::Depthwise2d => ([1, x[2], x[3]], [1, w[2], w[3]]),
        ConvKind::Standard3d => ([x[2], x[3], x[4]], [w[2], w[3], w[4]]),
    };
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        groups,
        spatial,
        kernel,
    })
}

fn with_batch_axis(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Convolves an unbatched input `(C, spatial...)`. Weight layout is
/// `(out, in, spatial...)`, `(C, 1, kh, kw)` for depthwise and `(out, in)`
/// for pointwise.
pub fn convolve(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.kind != ConvKind::Pointwise && w.rank() >= 2 && w.shape()[2..] != spec.extent[..] {
        return Err(Error::shape(format!(
            "weight spatial extents {:?} disagree with spec {:?}",
            &w.shape()[2..],
            spec.extent
        )));
    }
    let xb = with_batch_axis(x)?;
    let geom = conv_geometry(spec.kind, xb.shape(), w.shape())?;
    let y = kernels::conv_forward(xb.data(), w.data(), &geom);
    let mut shape = x.shape().to_vec();
    shape[0] = geom.cout;
    Tensor::new(shape, y)
}

/// Average pooling along `axes` with window and stride `factor`. A ragged
/// right edge is zero-padded to a full window.
pub fn pool_avg(x: &Tensor, factor: usize, axes: &[usize]) -> Result<Tensor> {
    check_pool(x.shape(), factor, axes)?;
    let (shape, map) = kernels::pool_index_map(x.shape(), axes, factor);
    let scale = 1.0 / (factor as f64).powi(axes.len() as i32);
    let mut out = vec![0.0; shape.iter().product()];
    for (v, &o) in x.data().iter().zip(&map) {
        out[o] += v * scale;
    }
    Tensor::new(shape, out)
}

pub(crate) fn check_pool(shape: &[usize], factor: usize, axes: &[usize]) -> Result<()> {
    if factor < 1 {
        return Err(Error::invalid("pooling factor must be at least 1"));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::shape(format!("pool axis {a} out of range for {shape:?}")));
        }
        if axes[..i].contains(&a) {
            return Err(Error::shape(format!("pool axis {a} repeated")));
        }
    }
    Ok(())
}

/// Mean over every axis after the first (channel) axis; those axes become 1.
pub fn global_avg(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "global average needs rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[0];
    let inner = x.len() / c;
    let data = x
        .data()
        .chunks(inner)
        .map(|ch| ch.iter().sum::<f64>() / inner as f64)
        .collect();
    let mut shape = vec![1; x.rank()];
    shape[0] = c;
    Tensor::new(shape, data)
}

/// Affine map `x w^T + b` for `x` of shape `(in)` or `(N, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin) = match x.shape() {
        [f] => (1, *f),
        [n, f] => (*n, *f),
        s => return Err(Error::shape(format!("linear input must be rank 1 or 2, got {s:?}"))),
    };
    check_linear(fin, w.shape(), b.shape())?;
    let fout = w.shape()[0];
    let y = kernels::linear_forward(x.data(), w.data(), b.data(), n, fin, fout);
    let shape = if x.rank() == 1 { vec![fout] } else { vec![n, fout] };
    Tensor::new(shape, y)
}

pub(crate) fn check_linear(fin: usize, w: &[usize], b: &[usize]) -> Result<()> {
    if w.len() != 2 || w[1] != fin {
        return Err(Error::shape(format!(
            "linear weight {w:?} does not accept {fin} input features"
        )));
    }
    if b != [w[0]] {
        return Err(Error::shape(format!("linear bias {b:?} must be [{}]", w[0])));
    }
    Ok(())
}

/// Normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per-channel statistics over batch and space.
    Batch,
    /// Per-sample statistics over `g` groups of channels.
    Group(usize),
}

pub(crate) fn norm_geometry(shape: &[usize], mode: NormMode) -> Result<NormGeom> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "normalization expects (N, C, ...), got {shape:?}"
        )));
    }
    let (lead, channels) = (shape[0], shape[1]);
    let groups = match mode {
        NormMode::Batch => None,
        NormMode::Group(g) => {
            if g == 0 || channels % g != 0 {
                return Err(Error::shape(format!(
                    "{channels} channels not divisible into {g} groups"
                )));
            }
            Some(g)
        }
    };
    Ok(NormGeom {
        lead,
        channels,
        inner: shape[2..].iter().product(),
        groups,
    })
}

/// Normalizes a batched `(N, C, ...)` tensor with batch statistics, then
/// applies the per-channel affine `gamma * xhat + beta`.
pub fn normalize(x: &Tensor, mode: NormMode, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let g = norm_geometry(x.shape(), mode)?;
    if gamma.shape() != [g.channels] || beta.shape() != [g.channels] {
        return Err(Error::shape(format!(
            "normalization affine parameters must have shape [{}]",
            g.channels
        )));
    }
    let (mean, var) = kernels::norm_stats(x.data(), &g);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut y = kernels::norm_apply(x.data(), &g, &mean, &inv);
    apply_affine(&mut y, &g, gamma.data(), beta.data());
    Tensor::new(x.shape().to_vec(), y)
}

pub(crate) fn apply_affine(y: &mut [f64], g: &NormGeom, gamma: &[f64], beta: &[f64]) {
    for n in 0..g.lead {
        for c in 0..g.channels {
            let off = (n * g.channels + c) * g.inner;
            for v in &mut y[off..off + g.inner] {
                *v = gamma[c] * *v + beta[c];
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Negative log-likelihood of `label` under `softmax(logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(kernels::log_sum_exp(logits.iter().copied()) - logits[label])
}

/// Bilinear resize (aligned corners) of the last two axes.
pub fn upsample_bilinear(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (lead, h, w) = upsample_dims(x.shape(), target)?;
    let y = upsample_forward(x.data(), lead, (h, w), target);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = target.0;
    shape[r - 1] = target.1;
    Tensor::new(shape, y)
}

pub(crate) fn upsample_dims(shape: &[usize], target: (usize, usize)) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "bilinear upsampling needs two spatial axes, got {shape:?}"
        )));
    }
    if target.0 < 1 || target.1 < 1 {
        return Err(Error::invalid(format!("upsampling target {target:?} must be positive")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

pub(crate) fn upsample_forward(x: &[f64], lead: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<f64> {
    let ty = kernels::bilinear_taps(src.0, dst.0);
    let tx = kernels::bilinear_taps(src.1, dst.1);
    let mut y = vec![0.0; lead * dst.0 * dst.1];
    for l in 0..lead {
        let xs = &x[l * src.0 * src.1..][..src.0 * src.1];
        let ys = &mut y[l * dst.0 * dst.1..][..dst.0 * dst.1];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = xs[y0 * src.1 + x0] * (1.0 - wx) + xs[y0 * src.1 + x1] * wx;
                let bot = xs[y1 * src.1 + x0] * (1.0 - wx) + xs[y1 * src.1 + x1] * wx;
                ys[i * dst.1 + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    y
}

pub(crate) fn upsample_backward(gy: &[f64], lead: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<f64> {
    let ty = kernels::bilinear_taps(src.0, dst.0);
    let tx = kernels::bilinear_taps(src.1, dst.1);
    let mut gx = vec![0.0; lead * src.0 * src.1];
    for l in 0..lead {
        let gxs = &mut gx[l * src.0 * src.1..][..src.0 * src.1];
        let gys = &gy[l * dst.0 * dst.1..][..dst.0 * dst.1];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = gys[i * dst.1 + j];
                gxs[y0 * src.1 + x0] += g * (1.0 - wy) * (1.0 - wx);
                gxs[y0 * src.1 + x1] += g * (1.0 - wy) * wx;
                gxs[y1 * src.1 + x0] += g * wy * (1.0 - wx);
                gxs[y1 * src.1 + x1] += g * wy * wx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_passes_signal_through() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3], &[0.0, 1.0, 0.0]);
        let spec = ConvSpec::new(ConvKind::Standard1d, vec![3]).unwrap();
        assert_eq!(convolve(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = t(&[2, 3, 3], &[1.5; 18]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let spec = ConvSpec::new(ConvKind::Standard2d, vec![3, 3]).unwrap();
        let y = convolve(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_extent_rejected() {
        assert!(ConvSpec::new(ConvKind::Standard1d, vec![4]).is_err());
        let x = t(&[1, 4], &[0.0; 4]);
        let w = Tensor::zeros(&[1, 1, 4]);
        let spec = ConvSpec {
            kind: ConvKind::Standard1d,
            extent: vec![4],
        };
        let err = convolve(&x, &w, &spec).unwrap_err().to_string();
        assert!(err.contains("spatial axis 0"), "{err}");
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = t(&[2, 4], &[0.0; 8]);
        let w = Tensor::zeros(&[1, 3, 3]);
        let spec = ConvSpec::new(ConvKind::Standard1d, vec![3]).unwrap();
        let err = convolve(&x, &w, &spec).unwrap_err().to_string();
        assert!(err.contains("channel axis"), "{err}");
    }

    #[test]
    fn pool_examples() {
        let y = pool_avg(&t(&[4], &[1.0, 3.0, 5.0, 7.0]), 2, &[0]).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
        let y = pool_avg(&t(&[3], &[1.0, 3.0, 5.0]), 2, &[0]).unwrap();
        assert_eq!(y.data(), &[2.0, 2.5]);
        assert!(pool_avg(&t(&[3], &[1.0, 3.0, 5.0]), 0, &[0]).is_err());
    }

    #[test]
    fn global_avg_examples() {
        let y = global_avg(&t(&[1, 2], &[0.0, 2.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[1.0]);
        let y = global_avg(&Tensor::full(&[3, 2, 2], 4.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.set(&[i, i], 1.0);
        }
        let b = Tensor::zeros(&[3]);
        assert_eq!(linear(&x, &w, &b).unwrap(), x);
        let b = t(&[3], &[0.1, 0.2, 0.3]);
        assert_eq!(linear(&Tensor::zeros(&[3]), &w, &b).unwrap(), b);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn normalize_constant_input_yields_bias() {
        let x = Tensor::full(&[2, 4, 3], 7.0);
        let gamma = t(&[4], &[2.0, 2.0, 2.0, 2.0]);
        let beta = t(&[4], &[0.5, -1.0, 0.0, 3.0]);
        for mode in [NormMode::Batch, NormMode::Group(2)] {
            let y = normalize(&x, mode, &gamma, &beta).unwrap();
            for n in 0..2 {
                for c in 0..4 {
                    for p in 0..3 {
                        assert_eq!(y.get(&[n, c, p]), beta.data()[c]);
                    }
                }
            }
        }
        assert!(normalize(&x, NormMode::Group(3), &gamma, &beta).is_err());
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        assert_eq!(softmax(&[3.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn cross_entropy_perfect_logits_vanish() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 50.0] {
            let ce = cross_entropy(&[gap, 0.0, 0.0], 0).unwrap();
            assert!(ce >= 0.0 && ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(upsample_bilinear(&x, (2, 3)).unwrap(), x);
        let c = Tensor::full(&[2, 3, 3], 1.25);
        let y = upsample_bilinear(&c, (7, 5)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
        assert!(upsample_bilinear(&c, (0, 5)).is_err());
    }
}

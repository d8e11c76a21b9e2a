//! Independent loop-based reference implementations used by several test targets.
#![allow(dead_code)]

pub mod checks;

use hknas_core::data::{normalize, stratified_split, synth_generate, HsiCube, Split, SplitSpec, SynthSpec};
use hknas_core::mixedop::{EdgeKind, Form};
use hknas_core::ndtensor::Tensor;
use hknas_core::searchspace::{NetKind, Scene};

/// Same-padded convolution of one `(C, d0, d1, d2)` volume with a
/// `(Cout, C / groups, k0, k1, k2)` kernel, by direct summation.
pub fn naive_conv(
    x: &[f64],
    c: usize,
    dims: [usize; 3],
    w: &[f64],
    cout: usize,
    groups: usize,
    k: [usize; 3],
) -> Vec<f64> {
    let cin_g = c / groups;
    let cout_g = cout / groups;
    let [d0, d1, d2] = dims;
    let mut y = vec![0.0; cout * d0 * d1 * d2];
    for o in 0..cout {
        let g = o / cout_g;
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        let cc = g * cin_g + ci;
                        for a in 0..k[0] {
                            for b in 0..k[1] {
                                for e in 0..k[2] {
                                    let p0 = i0 as i64 + a as i64 - (k[0] / 2) as i64;
                                    let p1 = i1 as i64 + b as i64 - (k[1] / 2) as i64;
                                    let p2 = i2 as i64 + e as i64 - (k[2] / 2) as i64;
                                    if p0 < 0
                                        || p1 < 0
                                        || p2 < 0
                                        || p0 >= d0 as i64
                                        || p1 >= d1 as i64
                                        || p2 >= d2 as i64
                                    {
                                        continue;
                                    }
                                    let xi = ((cc * d0 + p0 as usize) * d1 + p1 as usize) * d2 + p2 as usize;
                                    let wi = (((o * cin_g + ci) * k[0] + a) * k[1] + b) * k[2] + e;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    y[((o * d0 + i0) * d1 + i1) * d2 + i2] = acc;
                }
            }
        }
    }
    y
}

/// Chebyshev distance of a flat footprint position from the center.
pub fn ring_of(pos: usize, size: usize, dims: usize) -> usize {
    let c = size / 2;
    let mut rem = pos;
    let mut r = 0;
    for _ in 0..dims {
        let i = rem % size;
        rem /= size;
        r = r.max(i.abs_diff(c));
    }
    r
}

/// Number of footprint positions in the core area of candidate `s`
/// (1-based): the 3^d center for `s = 1`, the shell at distance `s` otherwise.
pub fn core_count(size: usize, dims: usize, s: usize) -> usize {
    let fp = size.pow(dims as u32);
    (0..fp).filter(|&p| in_core(ring_of(p, size, dims), s)).count()
}

fn in_core(ring: usize, s: usize) -> bool {
    if s == 1 {
        ring <= 1
    } else {
        ring == s
    }
}

/// Mean hyper-kernel weight over each candidate's core area, all channel
/// pairs pooled. `w` has layout `(pairs, S^dims)`.
pub fn alpha_oracle(w: &[f64], size: usize, dims: usize) -> Vec<f64> {
    let fp = size.pow(dims as u32);
    let pairs = w.len() / fp;
    (1..=size / 2)
        .map(|s| {
            let mut sum = 0.0;
            let mut n = 0;
            for pair in 0..pairs {
                for p in 0..fp {
                    if in_core(ring_of(p, size, dims), s) {
                        sum += w[pair * fp + p];
                        n += 1;
                    }
                }
            }
            sum / n as f64
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|x| x / t).collect()
}

/// Centered crop of extent `e` from the trailing `dims` axes of a
/// `(pairs, S^dims)` kernel.
pub fn crop(w: &[f64], size: usize, dims: usize, e: usize) -> Vec<f64> {
    let fp = size.pow(dims as u32);
    let pairs = w.len() / fp;
    let off = (size - e) / 2;
    let mut out = Vec::with_capacity(pairs * e.pow(dims as u32));
    for pair in 0..pairs {
        for q in 0..e.pow(dims as u32) {
            let mut rem = q;
            let mut idx = [0usize; 3];
            for d in (0..dims).rev() {
                idx[d] = rem % e + off;
                rem /= e;
            }
            let mut flat = 0;
            for &i in &idx[..dims] {
                flat = flat * size + i;
            }
            out.push(w[pair * fp + flat]);
        }
    }
    out
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

/// Softmax-weighted sum over candidates of one kernel applied by `apply(crop, extent)`.
fn mix(
    w: &[f64],
    size: usize,
    dims: usize,
    coef: &[f64],
    mut apply: impl FnMut(&[f64], usize) -> Vec<f64>,
) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for (i, &c) in coef.iter().enumerate() {
        let e = 2 * (i + 1) + 1;
        let y = apply(&crop(w, size, dims, e), e);
        match &mut acc {
            None => acc = Some(y.iter().map(|v| v * c).collect()),
            Some(a) => add_scaled(a, &y, c),
        }
    }
    acc.unwrap()
}

/// Reference output of a mixed edge: the per-candidate loop of the
/// weighted candidate convolutions. `kernels` and `alphas` follow the edge's
/// kernel order (spectral first for pair forms); input is batched.
pub fn mixed_edge_oracle(kind: EdgeKind, x: &Tensor, kernels: &[Tensor], alphas: &[Vec<f64>], size: usize) -> Vec<f64> {
    let shape = x.shape();
    let n = shape[0];
    let per = x.len() / n;
    let coefs: Vec<Vec<f64>> = alphas.iter().map(|a| softmax(a)).collect();
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        let xs = &x.data()[b * per..(b + 1) * per];
        let y = match kind {
            EdgeKind::Spectral => {
                let (c, l) = (shape[1], shape[2]);
                mix(kernels[0].data(), size, 1, &coefs[0], |k, e| {
                    naive_conv(xs, c, [1, 1, l], k, c, 1, [1, 1, e])
                })
            }
            EdgeKind::Cube(form) => {
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let spectral = |v: &[f64]| {
                    mix(kernels[0].data(), size, 1, &coefs[0], |k, e| {
                        naive_conv(v, 1, [c, h, w], k, 1, 1, [e, 1, 1])
                    })
                };
                let spatial = |v: &[f64]| {
                    mix(kernels[1].data(), size, 2, &coefs[1], |k, e| {
                        naive_conv(v, c, [1, h, w], k, c, c, [1, e, e])
                    })
                };
                match form {
                    Form::Conv3d => mix(kernels[0].data(), size, 3, &coefs[0], |k, e| {
                        naive_conv(xs, 1, [c, h, w], k, 1, 1, [e, e, e])
                    }),
                    Form::Serial1dThen2dDw => spatial(&spectral(xs)),
                    Form::Serial2dDwThen1d => spectral(&spatial(xs)),
                    Form::Parallel1d2dDw => {
                        let mut a = spectral(xs);
                        add_scaled(&mut a, &spatial(xs), 1.0);
                        a
                    }
                }
            }
        };
        out.extend(y);
    }
    out
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Normalized synthetic scene with its stratified split.
pub fn small_scene(classes: usize, side: usize, bands: usize, noise: f64, knowable: usize) -> (HsiCube, Split) {
    let spec = SynthSpec {
        classes,
        height: side,
        width: side,
        bands,
        noise,
        seed: 7,
    };
    let s = synth_generate(&spec).unwrap();
    let split = stratified_split(&s.labels, &SplitSpec::new(knowable, 0)).unwrap();
    (normalize(&s.cube), split)
}

/// Known searched architectures for every scene and kind, rows separated by `;`.
pub const REFERENCE_ARCHS: &[(Scene, NetKind, &str)] = &[
    (
        Scene::IndianPines,
        NetKind::Cls1d,
        "1 1 3 2 3;3 1 0 1 1;1 2 0 3 1;3 1 1 0 1;2 2 3 0 0;3 0 2 2 2",
    ),
    (Scene::IndianPines, NetKind::Cls3d, "2 1 2 1;0 0 2 0;0 2 2 1"),
    (Scene::IndianPines, NetKind::Seg3d, "1;0;2"),
    (Scene::PaviaUniversity, NetKind::Cls1d, "0;3;2;2"),
    (Scene::PaviaUniversity, NetKind::Cls3d, "3/3 0/1;0/0 2/1;2/0 0/2"),
    (Scene::PaviaUniversity, NetKind::Seg3d, "23;23;23"),
    (Scene::KennedySpaceCenter, NetKind::Cls1d, "3 1;2 0;2 1"),
    (Scene::KennedySpaceCenter, NetKind::Cls3d, "0 1;3 0;0 3"),
    (Scene::KennedySpaceCenter, NetKind::Seg3d, "30;12;30"),
    (Scene::Salinas, NetKind::Cls1d, "1;1;0;2"),
    (Scene::Salinas, NetKind::Cls3d, "0 2;0 3;2 1"),
    (Scene::Salinas, NetKind::Seg3d, "0;3;1"),
    (Scene::HanChuan, NetKind::Cls1d, "2 0 0;1 1 3;3 1 2"),
    (Scene::HanChuan, NetKind::Cls3d, "3/2 0/3;1/0 0/2;0/1 3/1"),
    (Scene::HanChuan, NetKind::Seg3d, "0;1;0"),
    (Scene::HongHu, NetKind::Cls1d, "0;0;2"),
    (Scene::HongHu, NetKind::Cls3d, "1/0 1/1 3/2;1/3 2/0 2/3;3/2 3/2 1/3"),
    (Scene::HongHu, NetKind::Seg3d, "0;0;0"),
];

/// Architecture file text of `;`-separated rows.
pub fn arch_text(rows: &str) -> String {
    rows.split(';').map(|r| format!("{r}\n")).collect()
}

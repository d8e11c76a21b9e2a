//! Randomized checks returning their worst observed error, so unit-sized
//! tests and the acceptance run can share them at different trial counts.
#![allow(dead_code)]

use hknas_core::hyperkernel::{Candidate, HyperKernel, KernelKind};
use hknas_core::mixedop::{self, AlphaMode, DerivedOp, EdgeKind, FixedOp, Form, MixedEdge};
use hknas_core::ndtensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{alpha_oracle, max_rel_err, mixed_edge_oracle};

pub const KINDS: [EdgeKind; 5] = [
    EdgeKind::Spectral,
    EdgeKind::Cube(Form::Conv3d),
    EdgeKind::Cube(Form::Serial1dThen2dDw),
    EdgeKind::Cube(Form::Serial2dDwThen1d),
    EdgeKind::Cube(Form::Parallel1d2dDw),
];

/// Random input for an edge of `kind` with `c` channels.
pub fn random_input(kind: EdgeKind, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = rng.random_range(1..=2);
    let shape = match kind {
        EdgeKind::Spectral => vec![n, c, rng.random_range(1..=9)],
        EdgeKind::Cube(_) => vec![n, c, rng.random_range(1..=9), rng.random_range(1..=9)],
    };
    Tensor::randn(&shape, rng)
}

/// Worst relative error of mixed-edge forward passes against the
/// per-candidate loop oracle over `trials` random shapes (up to 4
/// channels, 9x9 spatial), cycling through every edge kind.
pub fn mixed_edge_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let kind = KINDS[t % KINDS.len()];
        let c = rng.random_range(1..=4);
        let edge = MixedEdge::new("e", kind, c, 9, AlphaMode::Hyper, &mut rng).unwrap();
        let x = random_input(kind, c, &mut rng);
        let got = mixedop::forward_mixed(&edge, &x).unwrap();
        let kernels: Vec<Tensor> = edge.kernels().iter().map(|k| k.weights.value.clone()).collect();
        let alphas: Vec<Vec<f64>> = edge
            .kernels()
            .iter()
            .zip(&kernels)
            .map(|(k, w)| alpha_oracle(w.data(), 9, k.dims()))
            .collect();
        let want = mixed_edge_oracle(kind, &x, &kernels, &alphas, 9);
        worst = worst.max(max_rel_err(got.data(), &want));
    }
    worst
}

/// `L(y+) - L(y-)` for `L = 0.5 |y - t|^2`, summed per element as
/// `0.5 (y+ - y-)(y+ + y- - 2t)` so the two large totals never cancel.
fn loss_diff(yp: &Tensor, ym: &Tensor, target: &Tensor) -> f64 {
    yp.data()
        .iter()
        .zip(ym.data())
        .zip(target.data())
        .map(|((a, b), t)| 0.5 * (a - b) * (a + b - 2.0 * t))
        .sum()
}

/// Relative error between central differences (step `h`) and tape gradients
/// with respect to hyper-kernel weights at `coords` random coordinates of a
/// one-edge network of `kind`: the largest deviation over the largest
/// sampled gradient, as in `max_rel_err`.
pub fn gradient_check_error(kind: EdgeKind, coords: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Five channels so every tap of the depth axis overlaps the input.
    let c = 5;
    let mut edge = MixedEdge::new("e", kind, c, 9, AlphaMode::Hyper, &mut rng).unwrap();
    // Small kernels keep the softmax away from saturation so both paths carry signal.
    for k in edge.kernels_mut() {
        k.weights.value = k.weights.value.scaled(0.5);
    }
    let shape = match kind {
        EdgeKind::Spectral => vec![2, c, 11],
        EdgeKind::Cube(_) => vec![1, c, 6, 5],
    };
    let x = Tensor::randn(&shape, &mut rng);
    let target = Tensor::randn(&shape, &mut rng);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = edge.forward(&mut tape, xv).unwrap();
    let t = tape.constant(target.scaled(-1.0));
    let d = tape.add(y, t).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = edge
        .kernels()
        .iter()
        .map(|k| tape.param_grad(k.weights.id()).unwrap().scaled(0.5))
        .collect();

    let (mut fds, mut ans) = (Vec::with_capacity(coords), Vec::with_capacity(coords));
    for _ in 0..coords {
        let ki = rng.random_range(0..edge.kernels().len());
        let i = rng.random_range(0..edge.kernels()[ki].weights.value.len());
        let orig = edge.kernels()[ki].weights.value.data()[i];
        edge.kernels_mut()[ki].weights.value.data_mut()[i] = orig + h;
        let yp = mixedop::forward_mixed(&edge, &x).unwrap();
        edge.kernels_mut()[ki].weights.value.data_mut()[i] = orig - h;
        let ym = mixedop::forward_mixed(&edge, &x).unwrap();
        edge.kernels_mut()[ki].weights.value.data_mut()[i] = orig;
        fds.push(loss_diff(&yp, &ym, &target) / (2.0 * h));
        ans.push(grads[ki].data()[i]);
    }
    max_rel_err(&fds, &ans)
}

/// Worst relative error between a rank-1 3-D convolution `u (x) v` and the
/// spectral-then-depthwise composition with `u` and `v`.
pub fn separable_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = rng.random_range(1..=6);
        let s = rng.random_range(1..=4);
        let e = 2 * s + 1;
        let u = Tensor::randn(&[e], &mut rng);
        let v = Tensor::randn(&[e, e], &mut rng);
        let mut k3 = Vec::with_capacity(e * e * e);
        for a in 0..e {
            for b in v.data() {
                k3.push(u.data()[a] * b);
            }
        }
        let cand = Candidate::new(s).unwrap();
        let vol = DerivedOp::new(EdgeKind::Cube(Form::Conv3d), vec![cand]).unwrap();
        let vol = FixedOp::from_weights("v", vol, c, vec![Tensor::new(vec![1, 1, e, e, e], k3).unwrap()]).unwrap();
        let ser = DerivedOp::new(EdgeKind::Cube(Form::Serial1dThen2dDw), vec![cand, cand]).unwrap();
        let dw: Vec<f64> = (0..c).flat_map(|_| v.data().iter().copied()).collect();
        let ser = FixedOp::from_weights(
            "s",
            ser,
            c,
            vec![
                Tensor::new(vec![1, 1, e], u.data().to_vec()).unwrap(),
                Tensor::new(vec![c, 1, e, e], dw).unwrap(),
            ],
        )
        .unwrap();
        let shape = [
            rng.random_range(1..=2),
            c,
            rng.random_range(1..=9),
            rng.random_range(1..=9),
        ];
        let x = Tensor::randn(&shape, &mut rng);
        let run = |op: &FixedOp| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = op.forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        worst = worst.max(max_rel_err(run(&vol).data(), run(&ser).data()));
    }
    worst
}

/// A depthwise hyper kernel for direct tests.
pub fn depthwise_kernel(c: usize, rng: &mut ChaCha8Rng) -> HyperKernel {
    HyperKernel::random("dw", KernelKind::Depthwise, 2, 9, c, c, rng).unwrap()
}

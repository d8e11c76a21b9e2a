//! Hyper kernels: over-sized convolution weights whose centered crops are
//! the candidate operations of a searchable layer.
//!
//! For a kernel of odd size `S` there are `S / 2` candidates, numbered
//! `s = 1..=S/2`, with extent `2s + 1`. Candidate `s` owns a *core area*:
//! the shell of its footprint not covered by candidate `s - 1`. The mean
//! weight over a candidate's core area is its structural parameter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{CustomBackward, Param, ParamRole, Tape, Tensor, Var};

/// One candidate operation, identified by its 1-based index `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate(usize);

impl Candidate {
    /// Candidate with 1-based index `s` (extent `2s + 1`).
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::invalid("candidate index s starts at 1"));
        }
        Ok(Candidate(s))
    }

    /// Candidate for a 0-based architecture-matrix code.
    pub fn from_code(code: usize) -> Self {
        Candidate(code + 1)
    }

    pub fn s(self) -> usize {
        self.0
    }

    /// 0-based code as written in architecture matrices.
    pub fn code(self) -> usize {
        self.0 - 1
    }

    pub fn extent(self) -> usize {
        2 * self.0 + 1
    }
}

/// Binary footprint masks and core-area masks for one `(S, d)` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    size: usize,
    dims: usize,
    masks: Vec<Vec<u8>>,
    core: Vec<Vec<u8>>,
}

pub fn make_masks(size: usize, dims: usize) -> Result<MaskSet> {
    MaskSet::new(size, dims)
}

impl MaskSet {
    pub fn new(size: usize, dims: usize) -> Result<Self> {
        check_size(size)?;
        if !(1..=3).contains(&dims) {
            return Err(Error::invalid(format!(
                "hyper kernels have 1 to 3 spatial dims, got {dims}"
            )));
        }
        let center = size / 2;
        let footprint = size.pow(dims as u32);
        // Chebyshev radius of every footprint position from the center.
        let radius: Vec<usize> = (0..footprint)
            .map(|mut pos| {
                let mut r = 0;
                for _ in 0..dims {
                    r = r.max((pos % size).abs_diff(center));
                    pos /= size;
                }
                r
            })
            .collect();
        let count = size / 2;
        let masks: Vec<Vec<u8>> = (1..=count)
            .map(|s| radius.iter().map(|&r| u8::from(r <= s)).collect())
            .collect();
        let core = (0..count)
            .map(|i| {
                if i == 0 {
                    masks[0].clone()
                } else {
                    masks[i].iter().zip(&masks[i - 1]).map(|(a, b)| a - b).collect()
                }
            })
            .collect();
        Ok(MaskSet {
            size,
            dims,
            masks,
            core,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn candidates(&self) -> usize {
        self.masks.len()
    }

    pub fn footprint(&self) -> usize {
        self.size.pow(self.dims as u32)
    }

    pub fn mask(&self, c: Candidate) -> &[u8] {
        &self.masks[c.code()]
    }

    pub fn core_mask(&self, c: Candidate) -> &[u8] {
        &self.core[c.code()]
    }

    pub fn core_count(&self, c: Candidate) -> usize {
        self.core[c.code()].iter().map(|&v| v as usize).sum()
    }

    pub fn all_candidates(&self) -> impl Iterator<Item = Candidate> {
        (1..=self.candidates()).map(Candidate)
    }

    fn check(&self, c: Candidate) -> Result<()> {
        if c.s() > self.candidates() {
            return Err(Error::invalid(format!(
                "sub-kernel index {} out of range 1..={}",
                c.s(),
                self.candidates()
            )));
        }
        Ok(())
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "hyper kernel size must be odd and at least 3, got {size}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Layout `(out, in, S, ...)`.
    Standard,
    /// Layout `(channels, 1, S, S)`.
    Depthwise,
}

/// Importance scores of the candidates of one hyper kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralParams(pub Vec<f64>);

impl StructuralParams {
    pub fn softmax(&self) -> Vec<f64> {
        crate::ndtensor::ops::softmax(&self.0)
    }

    /// Highest-scoring candidate; ties go to the smallest kernel.
    pub fn argmax(&self) -> Candidate {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        Candidate::from_code(best)
    }
}

#[derive(Clone, Debug)]
pub struct HyperKernel {
    kind: KernelKind,
    masks: MaskSet,
    pub weights: Param,
}

impl HyperKernel {
    /// Standard-normal initialization, as the search algorithm prescribes.
    pub fn random<R: Rng + ?Sized>(
        name: impl Into<String>,
        kind: KernelKind,
        dims: usize,
        size: usize,
        out_channels: usize,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = MaskSet::new(size, dims)?;
        let shape = Self::shape_for(kind, dims, size, out_channels, in_channels)?;
        let w = Tensor::randn(&shape, rng);
        Ok(HyperKernel {
            kind,
            masks,
            weights: Param::new(name, w, ParamRole::HyperKernel),
        })
    }

    /// Wraps existing weights; the layout must match `kind`.
    pub fn from_weights(name: impl Into<String>, kind: KernelKind, dims: usize, weights: Tensor) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != dims + 2 {
            return Err(Error::shape(format!(
                "{dims}-D hyper kernel needs rank {}, got {shape:?}",
                dims + 2
            )));
        }
        let size = shape[2];
        if shape[2..].iter().any(|&e| e != size) {
            return Err(Error::shape(format!(
                "hyper kernel footprint must be cubic, got {shape:?}"
            )));
        }
        if kind == KernelKind::Depthwise && (dims != 2 || shape[1] != 1) {
            return Err(Error::shape(format!(
                "depthwise hyper kernel must be (C, 1, S, S), got {shape:?}"
            )));
        }
        let masks = MaskSet::new(size, dims)?;
        Ok(HyperKernel {
            kind,
            masks,
            weights: Param::new(name, weights, ParamRole::HyperKernel),
        })
    }

    fn shape_for(kind: KernelKind, dims: usize, size: usize, out: usize, inp: usize) -> Result<Vec<usize>> {
        let (o, i) = match kind {
            KernelKind::Standard => (out, inp),
            KernelKind::Depthwise => {
                if dims != 2 || out != inp {
                    return Err(Error::invalid(
                        "depthwise hyper kernels are 2-D with equal in/out channels",
                    ));
                }
                (out, 1)
            }
        };
        let mut shape = vec![o, i];
        shape.extend(std::iter::repeat_n(size, dims));
        Ok(shape)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn size(&self) -> usize {
        self.masks.size
    }

    pub fn dims(&self) -> usize {
        self.masks.dims
    }

    pub fn candidates(&self) -> usize {
        self.masks.candidates()
    }

    /// Number of (out, in) channel pairs sharing the footprint.
    pub fn channel_pairs(&self) -> usize {
        let s = self.weights.value.shape();
        s[0] * s[1]
    }

    /// Hyper-kernel weights with everything outside candidate `c` zeroed.
    pub fn extract_subkernel(&self, c: Candidate) -> Result<Tensor> {
        self.masks.check(c)?;
        let mask = self.masks.mask(c);
        let mut out = self.weights.value.clone();
        for chunk in out.data_mut().chunks_mut(mask.len()) {
            for (v, &m) in chunk.iter_mut().zip(mask) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Centered crop of extent `2s + 1` on every spatial axis.
    pub fn crop(&self, c: Candidate) -> Result<Tensor> {
        self.masks.check(c)?;
        crop_centered(&self.weights.value, self.dims(), c.extent())
    }

    pub fn structural_params(&self) -> StructuralParams {
        StructuralParams(core_means(self.weights.value.data(), &self.masks))
    }

    /// Records `structural_params` of the kernel leaf `kernel` on a tape.
    pub fn alpha_on(&self, tape: &mut Tape, kernel: Var) -> Var {
        let alpha = core_means(tape.value(kernel).data(), &self.masks);
        tape.custom(
            &[kernel],
            Tensor::vector(&alpha),
            Box::new(CoreMeanRule {
                masks: self.masks.clone(),
            }),
        )
    }

    /// Records `sum_s weights[s] * subkernel_s` on a tape. By linearity of
    /// convolution, convolving with this kernel equals the weighted sum of
    /// the candidate convolutions.
    pub fn mix_on(&self, tape: &mut Tape, kernel: Var, weights: Var) -> Result<Var> {
        let w = tape.value(weights).data().to_vec();
        if w.len() != self.candidates() {
            return Err(Error::shape(format!(
                "{} mixing weights for {} candidates",
                w.len(),
                self.candidates()
            )));
        }
        let coef = mix_coefficients(&self.masks, &w);
        let k = tape.value(kernel);
        let mut out = k.clone();
        for chunk in out.data_mut().chunks_mut(coef.len()) {
            chunk.iter_mut().zip(&coef).for_each(|(v, c)| *v *= c);
        }
        Ok(tape.custom(
            &[kernel, weights],
            out,
            Box::new(MixRule {
                masks: self.masks.clone(),
                coef,
            }),
        ))
    }
}

/// Per-footprint-position multiplier `sum_{s : pos in m_s} w_s`.
fn mix_coefficients(masks: &MaskSet, w: &[f64]) -> Vec<f64> {
    let mut coef = vec![0.0; masks.footprint()];
    for (mask, &ws) in masks.masks.iter().zip(w) {
        for (c, &m) in coef.iter_mut().zip(mask) {
            if m != 0 {
                *c += ws;
            }
        }
    }
    coef
}

/// Mean of the weights over each core area, across all channel pairs.
fn core_means(weights: &[f64], masks: &MaskSet) -> Vec<f64> {
    let fp = masks.footprint();
    let pairs = weights.len() / fp;
    masks
        .core
        .iter()
        .map(|core| {
            let count = core.iter().filter(|&&m| m != 0).count();
            let total: f64 = weights
                .chunks(fp)
                .map(|chunk| {
                    chunk
                        .iter()
                        .zip(core)
                        .filter(|(_, &m)| m != 0)
                        .map(|(v, _)| v)
                        .sum::<f64>()
                })
                .sum();
            total / (count * pairs) as f64
        })
        .collect()
}

struct CoreMeanRule {
    masks: MaskSet,
}

impl CustomBackward for CoreMeanRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = inputs[0];
        let fp = self.masks.footprint();
        let pairs = k.len() / fp;
        let mut per_pos = vec![0.0; fp];
        for (core, &g) in self.masks.core.iter().zip(grad.data()) {
            let count = core.iter().filter(|&&m| m != 0).count();
            let share = g / (count * pairs) as f64;
            for (p, &m) in per_pos.iter_mut().zip(core) {
                if m != 0 {
                    *p += share;
                }
            }
        }
        let data = (0..k.len()).map(|i| per_pos[i % fp]).collect();
        vec![Some(Tensor::new(k.shape().to_vec(), data).expect("same shape"))]
    }
}

struct MixRule {
    masks: MaskSet,
    coef: Vec<f64>,
}

impl CustomBackward for MixRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = inputs[0];
        let fp = self.coef.len();
        let gk: Vec<f64> = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, g)| g * self.coef[i % fp])
            .collect();
        // Sum of K * g per footprint position, over channel pairs.
        let mut kg = vec![0.0; fp];
        for (i, (kv, g)) in k.data().iter().zip(grad.data()).enumerate() {
            kg[i % fp] += kv * g;
        }
        let gw: Vec<f64> = self
            .masks
            .masks
            .iter()
            .map(|mask| kg.iter().zip(mask).filter(|(_, &m)| m != 0).map(|(v, _)| v).sum())
            .collect();
        vec![
            Some(Tensor::new(k.shape().to_vec(), gk).expect("same shape")),
            Some(Tensor::vector(&gw)),
        ]
    }
}

/// Centered crop of the trailing `dims` axes of `w` to `extent`.
pub fn crop_centered(w: &Tensor, dims: usize, extent: usize) -> Result<Tensor> {
    let shape = w.shape();
    let lead = shape.len() - dims;
    let size = shape[lead];
    if extent > size || extent.is_multiple_of(2) {
        return Err(Error::invalid(format!("cannot crop extent {extent} from size {size}")));
    }
    let off = (size - extent) / 2;
    let fp_in = size.pow(dims as u32);
    let fp_out = extent.pow(dims as u32);
    let pairs = w.len() / fp_in;
    let mut out = Vec::with_capacity(pairs * fp_out);
    for p in 0..pairs {
        let src = &w.data()[p * fp_in..][..fp_in];
        for mut q in 0..fp_out {
            let mut idx = 0;
            let mut mul = 1;
            for _ in 0..dims {
                idx += (q % extent + off) * mul;
                q /= extent;
                mul *= size;
            }
            out.push(src[idx]);
        }
    }
    let mut new_shape = shape[..lead].to_vec();
    new_shape.extend(std::iter::repeat_n(extent, dims));
    Tensor::new(new_shape, out)
}

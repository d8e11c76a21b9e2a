use std::sync::atomic::{AtomicU64, Ordering};

use crate::ndtensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable tensor, unique within the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution or linear weight; weight decay applies.
    Weight,
    /// Hyper-kernel weight; decayed like any other weight.
    HyperKernel,
    /// Bias vector; not decayed.
    Bias,
    /// Normalization scale or shift; not decayed.
    Norm,
    /// Free structural parameters used only by the two-tier ablation.
    FreeAlpha,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::HyperKernel)
    }

    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

/// A named tensor plus its accumulated gradient.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub role: ParamRole,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad,
            role,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Clones get a fresh identity so two copies never alias on one tape.
impl Clone for Param {
    fn clone(&self) -> Self {
        let mut p = Param::new(self.name.clone(), self.value.clone(), self.role);
        p.grad = self.grad.clone();
        p
    }
}

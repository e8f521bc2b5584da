//! Trainable parameter containers and the naming/grouping visitor used by the
//! optimizer, the gradient checker and the checkpoint writer.

use rand::Rng;

use crate::error::Result;
use crate::nn;
use crate::scalar::Scalar;
use crate::tally::OpTally;
use crate::tensor::Tensor;

/// Coarse parameter families, used to probe gradients group by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Camg,
    CompactHeads,
    FocusedEmbed,
    FocusedHeads,
    Navigators,
    Coefficients,
    /// `b_0` / `b_1`, the per-branch kernel biases.
    BranchBias,
    /// Full kernels of the no-low-rank ablation.
    DenseKernel,
    BiasBlock,
    Backbone,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Camg => "camg",
            ParamGroup::CompactHeads => "compact_heads",
            ParamGroup::FocusedEmbed => "focused_embed",
            ParamGroup::FocusedHeads => "focused_heads",
            ParamGroup::Navigators => "navigators",
            ParamGroup::Coefficients => "coefficients",
            ParamGroup::BranchBias => "branch_bias",
            ParamGroup::DenseKernel => "dense_kernel",
            ParamGroup::BiasBlock => "bias_block",
            ParamGroup::Backbone => "backbone",
        }
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a Tensor<T>,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a mut Tensor<T>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tree of named tensors. Aliased storage is visited once.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn param_list(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        self.visit("", &mut v);
        v
    }

    fn param_list_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = Vec::new();
        self.visit_mut("", &mut v);
        v
    }

    fn num_params(&self) -> usize {
        self.param_list().iter().map(|p| p.tensor.len()).sum()
    }

    /// Same structure with every tensor zeroed; the gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for p in z.param_list_mut() {
            p.tensor.fill(T::zero());
        }
        z
    }

    /// Elementwise `self += other` over matching structures.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.param_list();
        for (dst, s) in self.param_list_mut().into_iter().zip(src) {
            dst.tensor.add_assign(s.tensor)?;
        }
        Ok(())
    }

    /// Multiplies every tensor by `a`.
    fn scale_all(&mut self, a: T) {
        for p in self.param_list_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= a);
        }
    }
}

/// Square convolution kernel with bias, `(C_out, C_in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(co: usize, ci: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[co, ci, k, k]),
            bias: Tensor::zeros(&[co]),
        }
    }

    /// Fan-in uniform initialisation, `U(-1/√(C_in·k²), 1/√(C_in·k²))`.
    pub fn init(co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((ci * k * k) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[co, ci, k, k], bound, rng),
            bias: Tensor::uniform(&[co], bound, rng),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Same-size stride-1 convolution.
    pub fn forward(&self, x: &Tensor<T>, tally: &mut OpTally) -> Result<Tensor<T>> {
        nn::conv2d_tallied(x, &self.weight, &self.bias, self.kernel_size() / 2, tally)
    }

    /// Accumulates weight/bias gradients into `grad`, returns the input gradient.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        nn::conv2d_backward(x, &self.weight, gy, &mut grad.weight, &mut grad.bias)
    }

    pub fn visit_into<'a>(
        &'a self,
        prefix: &str,
        group: ParamGroup,
        out: &mut Vec<ParamRef<'a, T>>,
    ) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            group,
            tensor: &self.weight,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            group,
            tensor: &self.bias,
        });
    }

    pub fn visit_mut_into<'a>(
        &'a mut self,
        prefix: &str,
        group: ParamGroup,
        out: &mut Vec<ParamMut<'a, T>>,
    ) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            group,
            tensor: &mut self.weight,
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            group,
            tensor: &mut self.bias,
        });
    }
}

/// Fully-connected layer, weight `(D_out, D_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(dout: usize, din: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[dout, din]),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn init(dout: usize, din: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[dout, din], bound, rng),
            bias: Tensor::uniform(&[dout], bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        nn::linear(v, &self.weight, &self.bias)
    }

    pub(crate) fn forward_raw(&self, v: &[T], y: &mut [T], tally: &mut OpTally) {
        nn::linear_raw(v, self.weight.data(), self.bias.data(), y);
        tally.record_macs((self.in_dim() * self.out_dim()) as u64);
    }

    pub(crate) fn backward_raw(&self, v: &[T], g: &[T], grad: &mut Self, gv: &mut [T]) {
        nn::linear_backward_raw(
            v,
            self.weight.data(),
            g,
            grad.weight.data_mut(),
            grad.bias.data_mut(),
            gv,
        );
    }

    pub fn visit_into<'a>(
        &'a self,
        prefix: &str,
        group: ParamGroup,
        out: &mut Vec<ParamRef<'a, T>>,
    ) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            group,
            tensor: &self.weight,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            group,
            tensor: &self.bias,
        });
    }

    pub fn visit_mut_into<'a>(
        &'a mut self,
        prefix: &str,
        group: ParamGroup,
        out: &mut Vec<ParamMut<'a, T>>,
    ) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            group,
            tensor: &mut self.weight,
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            group,
            tensor: &mut self.bias,
        });
    }
}

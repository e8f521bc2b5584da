//! Two-component low-rank convolution kernels.
//!
//! Each component scales a depth-wise navigator `(1, C_in, k, k)` by per
//! `(output, input)` channel coefficients `(C_out, C_in, 1, 1)`; the full kernel
//! is the sum of the two expanded components.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{join, Conv, ParamGroup, ParamMut, ParamRef};
use crate::scalar::Scalar;
use crate::tally::OpTally;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankKernel<T> {
    pub navigators: [Tensor<T>; 2],
    pub coefficients: [Tensor<T>; 2],
    pub bias: Tensor<T>,
}

/// `W[o,i,u,v] = λ[o,i] · K_d[0,i,u,v]`.
pub fn expand_component<T: Scalar>(lambda: &Tensor<T>, navigator: &Tensor<T>) -> Result<Tensor<T>> {
    let (co, ci, one_a, one_b) = lambda.dims4()?;
    let (one, nci, k, k2) = navigator.dims4()?;
    if one_a != 1 || one_b != 1 || one != 1 || nci != ci || k != k2 {
        return Err(shape_err!(
            "coefficients {:?} do not match navigator {:?}",
            lambda.shape(),
            navigator.shape()
        ));
    }
    let kk = k * k;
    let nav = navigator.data();
    let lam = lambda.data();
    Ok(Tensor::from_fn(&[co, ci, k, k], |idx| {
        let t = idx % kk;
        let oi = idx / kk;
        lam[oi] * nav[(oi % ci) * kk + t]
    }))
}

impl<T: Scalar> LowRankKernel<T> {
    pub fn zeros(co: usize, ci: usize, k: usize) -> Self {
        Self {
            navigators: [Tensor::zeros(&[1, ci, k, k]), Tensor::zeros(&[1, ci, k, k])],
            coefficients: [Tensor::zeros(&[co, ci, 1, 1]), Tensor::zeros(&[co, ci, 1, 1])],
            bias: Tensor::zeros(&[co]),
        }
    }

    /// Navigators from `U(-1,1)/√(C_in·k²)`, coefficients from `U(-1,1)/√C_in`,
    /// zero bias.
    pub fn init(co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> Self {
        let nb = 1.0 / ((ci * k * k) as f64).sqrt();
        let cb = 1.0 / (ci as f64).sqrt();
        let n0 = Tensor::uniform(&[1, ci, k, k], nb, rng);
        let c0 = Tensor::uniform(&[co, ci, 1, 1], cb, rng);
        let n1 = Tensor::uniform(&[1, ci, k, k], nb, rng);
        let c1 = Tensor::uniform(&[co, ci, 1, 1], cb, rng);
        Self {
            navigators: [n0, n1],
            coefficients: [c0, c1],
            bias: Tensor::zeros(&[co]),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.coefficients[0].shape();
        (s[0], s[1], self.navigators[0].shape()[2])
    }

    /// `W^(1) + W^(2)`.
    pub fn assemble(&self) -> Result<Tensor<T>> {
        self.assemble_tallied(&mut OpTally::off())
    }

    pub(crate) fn assemble_tallied(&self, tally: &mut OpTally) -> Result<Tensor<T>> {
        if self.navigators[0].shape() != self.navigators[1].shape()
            || self.coefficients[0].shape() != self.coefficients[1].shape()
        {
            return Err(shape_err!("low-rank components differ in shape"));
        }
        let w = expand_component(&self.coefficients[0], &self.navigators[0])?
            .add(&expand_component(&self.coefficients[1], &self.navigators[1])?)?;
        let n = w.len() as u64;
        tally.record(2 * n, n);
        Ok(w)
    }

    /// Back-propagates a gradient on the assembled kernel into navigators and
    /// coefficients.
    pub fn backward(&self, gw: &Tensor<T>, grad: &mut Self) -> Result<()> {
        let (co, ci, k) = self.dims();
        gw.expect_shape(&[co, ci, k, k], "low-rank kernel gradient")?;
        let kk = k * k;
        let g = gw.data();
        for n in 0..2 {
            let nav = self.navigators[n].data();
            let lam = self.coefficients[n].data();
            let (gnav, glam) = {
                let LowRankKernel {
                    navigators,
                    coefficients,
                    ..
                } = grad;
                (navigators[n].data_mut(), coefficients[n].data_mut())
            };
            for o in 0..co {
                for i in 0..ci {
                    let oi = o * ci + i;
                    let mut acc = T::zero();
                    for t in 0..kk {
                        let gv = g[oi * kk + t];
                        acc += gv * nav[i * kk + t];
                        gnav[i * kk + t] += gv * lam[oi];
                    }
                    glam[oi] += acc;
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (co, ci, k) = self.dims();
        param_count(ci, co, k).0
    }
}

/// Parameter counts `(low-rank, dense)` of a `C_in → C_out`, `k×k` kernel
/// including its per-output bias.
pub fn param_count(ci: usize, co: usize, k: usize) -> (usize, usize) {
    let lowrank = 2 * (ci * k * k + co * ci) + co;
    let dense = co * ci * k * k + co;
    (lowrank, dense)
}

/// Base kernel of one branch: low-rank by default, dense in the ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseKernel<T> {
    LowRank(LowRankKernel<T>),
    Dense(Conv<T>),
}

impl<T: Scalar> BaseKernel<T> {
    pub fn init(co: usize, ci: usize, k: usize, low_rank: bool, rng: &mut impl Rng) -> Self {
        if low_rank {
            BaseKernel::LowRank(LowRankKernel::init(co, ci, k, rng))
        } else {
            let mut c = Conv::init(co, ci, k, rng);
            c.bias.fill(T::zero());
            BaseKernel::Dense(c)
        }
    }

    pub fn zeros(co: usize, ci: usize, k: usize, low_rank: bool) -> Self {
        if low_rank {
            BaseKernel::LowRank(LowRankKernel::zeros(co, ci, k))
        } else {
            BaseKernel::Dense(Conv::zeros(co, ci, k))
        }
    }

    pub fn bias(&self) -> &Tensor<T> {
        match self {
            BaseKernel::LowRank(l) => &l.bias,
            BaseKernel::Dense(c) => &c.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        match self {
            BaseKernel::LowRank(l) => &mut l.bias,
            BaseKernel::Dense(c) => &mut c.bias,
        }
    }

    /// Full `(C_out, C_in, k, k)` kernel.
    pub fn assemble(&self) -> Result<Tensor<T>> {
        self.assemble_tallied(&mut OpTally::off())
    }

    pub(crate) fn assemble_tallied(&self, tally: &mut OpTally) -> Result<Tensor<T>> {
        match self {
            BaseKernel::LowRank(l) => l.assemble_tallied(tally),
            BaseKernel::Dense(c) => Ok(c.weight.clone()),
        }
    }

    pub(crate) fn backward(&self, gw: &Tensor<T>, gb: &[T], grad: &mut Self) -> Result<()> {
        for (d, &g) in grad.bias_mut().data_mut().iter_mut().zip(gb) {
            *d += g;
        }
        match (self, grad) {
            (BaseKernel::LowRank(l), BaseKernel::LowRank(gl)) => l.backward(gw, gl),
            (BaseKernel::Dense(_), BaseKernel::Dense(gc)) => gc.weight.add_assign(gw),
            _ => Err(shape_err!("gradient kernel variant mismatch")),
        }
    }

    pub(crate) fn visit_into<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match self {
            BaseKernel::LowRank(l) => {
                for n in 0..2 {
                    out.push(ParamRef {
                        name: join(prefix, &format!("navigator{n}")),
                        group: ParamGroup::Navigators,
                        tensor: &l.navigators[n],
                    });
                    out.push(ParamRef {
                        name: join(prefix, &format!("coefficient{n}")),
                        group: ParamGroup::Coefficients,
                        tensor: &l.coefficients[n],
                    });
                }
                out.push(ParamRef {
                    name: join(prefix, "bias"),
                    group: ParamGroup::BranchBias,
                    tensor: &l.bias,
                });
            }
            BaseKernel::Dense(c) => {
                out.push(ParamRef {
                    name: join(prefix, "weight"),
                    group: ParamGroup::DenseKernel,
                    tensor: &c.weight,
                });
                out.push(ParamRef {
                    name: join(prefix, "bias"),
                    group: ParamGroup::BranchBias,
                    tensor: &c.bias,
                });
            }
        }
    }

    pub(crate) fn visit_mut_into<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        match self {
            BaseKernel::LowRank(l) => {
                let [n0, n1] = &mut l.navigators;
                let [c0, c1] = &mut l.coefficients;
                for (n, (nav, coef)) in [(n0, c0), (n1, c1)].into_iter().enumerate() {
                    out.push(ParamMut {
                        name: join(prefix, &format!("navigator{n}")),
                        group: ParamGroup::Navigators,
                        tensor: nav,
                    });
                    out.push(ParamMut {
                        name: join(prefix, &format!("coefficient{n}")),
                        group: ParamGroup::Coefficients,
                        tensor: coef,
                    });
                }
                out.push(ParamMut {
                    name: join(prefix, "bias"),
                    group: ParamGroup::BranchBias,
                    tensor: &mut l.bias,
                });
            }
            BaseKernel::Dense(c) => {
                out.push(ParamMut {
                    name: join(prefix, "weight"),
                    group: ParamGroup::DenseKernel,
                    tensor: &mut c.weight,
                });
                out.push(ParamMut {
                    name: join(prefix, "bias"),
                    group: ParamGroup::BranchBias,
                    tensor: &mut c.bias,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_coefficients_copy_navigator() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let nav = Tensor::<f64>::uniform(&[1, 3, 3, 3], 1.0, &mut r);
        let w = expand_component(&Tensor::ones(&[2, 3, 1, 1]), &nav).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(&w.data()[(o * 3 + i) * 9..(o * 3 + i + 1) * 9], &nav.data()[i * 9..(i + 1) * 9]);
            }
        }
        let w = expand_component(&Tensor::full(&[1, 1, 1, 1], 2.0), &Tensor::ones(&[1, 1, 3, 3])).unwrap();
        assert!(w.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn expansion_matches_broadcast_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let lam = Tensor::<f64>::uniform(&[4, 3, 1, 1], 1.0, &mut r);
        let nav = Tensor::uniform(&[1, 3, 5, 5], 1.0, &mut r);
        let w = expand_component(&lam, &nav).unwrap();
        for o in 0..4 {
            for i in 0..3 {
                for u in 0..5 {
                    for v in 0..5 {
                        let e = lam.data()[o * 3 + i] * nav.data()[(i * 5 + u) * 5 + v];
                        let got = w.data()[((o * 3 + i) * 5 + u) * 5 + v];
                        assert!((got - e).abs() < 1e-15);
                    }
                }
            }
        }
        assert!(expand_component(&lam, &Tensor::zeros(&[1, 2, 5, 5])).is_err());
    }

    #[test]
    fn assemble_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut k = LowRankKernel::<f64>::init(3, 2, 3, &mut r);
        let first = expand_component(&k.coefficients[0], &k.navigators[0]).unwrap();
        let second = expand_component(&k.coefficients[1], &k.navigators[1]).unwrap();
        let sum = k.assemble().unwrap();
        assert!(sum.max_abs_diff(&first.add(&second).unwrap()).unwrap() < 1e-15);

        k.coefficients[1].fill(0.0);
        assert_eq!(k.assemble().unwrap(), first);

        k.navigators[1] = k.navigators[0].clone();
        k.coefficients[1] = k.coefficients[0].scale(-1.0);
        assert!(k.assemble().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(32, 32, 3), (2656, 9248));
        assert_eq!(param_count(1, 1, 1), (5, 2));
        assert_eq!(param_count(8, 8, 3), (280, 584));
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(LowRankKernel::<f64>::init(5, 4, 3, &mut r).num_params(), param_count(4, 5, 3).0);
    }

    #[test]
    fn component_slices_are_scalar_multiples_of_navigator() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let k = LowRankKernel::<f64>::init(4, 3, 3, &mut r);
        for n in 0..2 {
            let w = expand_component(&k.coefficients[n], &k.navigators[n]).unwrap();
            for o in 0..4 {
                for i in 0..3 {
                    let lam = k.coefficients[n].data()[o * 3 + i];
                    for t in 0..9 {
                        assert_eq!(w.data()[(o * 3 + i) * 9 + t], lam * k.navigators[n].data()[i * 9 + t]);
                    }
                }
            }
        }
    }

    /// Loss `Σ g ⊙ conv2d(x, assemble(K))` differentiated by central differences.
    #[test]
    fn gradient_through_assembly_and_conv_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[3, 5, 5], 1.0, &mut r);
        let up = Tensor::<f64>::uniform(&[2, 5, 5], 1.0, &mut r);
        let kernel = LowRankKernel::<f64>::init(2, 3, 3, &mut r);
        let loss = |k: &LowRankKernel<f64>| {
            let y = nn::conv2d(&x, &k.assemble().unwrap(), &k.bias, 1).unwrap();
            y.mul(&up).unwrap().sum()
        };
        let w = kernel.assemble().unwrap();
        let mut gw = Tensor::zeros(w.shape());
        let mut gb = Tensor::zeros(&[2]);
        nn::conv2d_backward(&x, &w, &up, &mut gw, &mut gb).unwrap();
        let mut grad = LowRankKernel::zeros(2, 3, 3);
        kernel.backward(&gw, &mut grad).unwrap();

        let h = 1e-5;
        let check = |get: &dyn Fn(&mut LowRankKernel<f64>) -> &mut f64, analytic: f64| {
            let mut kp = kernel.clone();
            *get(&mut kp) += h;
            let mut km = kernel.clone();
            *get(&mut km) -= h;
            let fd = (loss(&kp) - loss(&km)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "fd {fd} vs analytic {analytic}");
        };
        for n in 0..2 {
            for idx in [0usize, 4, 13, 26] {
                check(&|k| &mut k.navigators[n].data_mut()[idx], grad.navigators[n].data()[idx]);
            }
            for idx in [0usize, 3, 5] {
                check(&|k| &mut k.coefficients[n].data_mut()[idx], grad.coefficients[n].data()[idx]);
            }
        }
    }
}

//! l1 training with Adam and a step-decay schedule, plus finite-difference
//! gradient verification.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::WaldSample;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{ergas, sam};
use crate::net::{net_backward, net_forward, net_forward_cached, Bi2MaNet, RATIO};
use crate::params::{ParamGroup, Parameters};
use crate::resample::upsample_bicubic;
use crate::scalar::Scalar;
use crate::tally::OpTally;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    /// Epochs between decays.
    pub period: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Optimiser steps after which training stops; `0` means no cap.
    pub iterations: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 6e-4,
            decay: 0.8,
            period: 200,
            batch: 32,
            epochs: 400,
            iterations: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.period == 0 {
            return Err(Error::Config("batch and period must be positive".into()));
        }
        if !(self.lr0 >= 0.0) || !(self.decay > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} / decay {} invalid",
                self.lr0, self.decay
            )));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊epoch / period⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.period) as i32)
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    Ok(pred.sub(gt)?.map(|v| v.abs()).mean())
}

/// `scale · sign(pred − gt) / N`, with `sign(0) = 0`.
pub fn l1_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let g = scale / T::from_usize_lossy(gt.len());
    pred.zip_map(gt, |p, t| {
        if p > t {
            g
        } else if p < t {
            -g
        } else {
            T::zero()
        }
    })
}

/// Bias-corrected Adam over any parameter tree.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Parameters<T>>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .param_list()
            .iter()
            .map(|p| vec![T::zero(); p.tensor.len()])
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let gl = grads.param_list();
        let pl = params.param_list_mut();
        if gl.len() != pl.len() || pl.len() != self.m.len() {
            return Err(shape_err!("optimiser state does not match parameters"));
        }
        for (((p, g), m), v) in pl.into_iter().zip(gl).zip(&mut self.m).zip(&mut self.v) {
            if p.tensor.len() != g.tensor.len() || m.len() != g.tensor.len() {
                return Err(shape_err!("gradient {} has the wrong size", g.name));
            }
            for (((x, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.tensor.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss `scale · l1` of one sample and its gradients. `masks` freezes routing.
pub fn sample_gradient<T: Scalar>(
    net: &Bi2MaNet<T>,
    s: &WaldSample<T>,
    scale: T,
    masks: Option<&[Tensor<T>]>,
) -> Result<(T, Bi2MaNet<T>)> {
    let (pred, cache) = net_forward_cached(net, &s.pan, &s.lrms, masks, &mut OpTally::off())?;
    let loss = l1_loss(&pred, &s.gt)?;
    let gy = l1_grad(&pred, &s.gt, scale)?;
    let mut grad = net.zeroed();
    net_backward(net, &cache, &gy, &mut grad)?;
    Ok((loss * scale, grad))
}

/// Mean l1 over the batch and its gradient. Samples are processed in
/// parallel; gradients are summed in batch order.
pub fn batch_gradient<T: Scalar>(net: &Bi2MaNet<T>, batch: &[&WaldSample<T>]) -> Result<(T, Bi2MaNet<T>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = T::one() / T::from_usize_lossy(batch.len());
    let parts: Vec<Result<(T, Bi2MaNet<T>)>> = batch
        .par_iter()
        .map(|s| sample_gradient(net, s, scale, None))
        .collect();
    let mut grad = net.zeroed();
    let mut loss = T::zero();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.accumulate(&g)?;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean pre-update batch loss over the epoch.
    pub train_l1: f64,
    pub val_sam: Option<f64>,
    pub val_ergas: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,lr,train_l1,val_sam,val_ergas";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{},{}",
            self.epoch,
            self.lr,
            self.train_l1,
            opt(self.val_sam),
            opt(self.val_ergas)
        )
    }
}

/// Mean quality over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub l1: f64,
    pub sam: f64,
    pub ergas: f64,
}

fn mean_quality<T: Scalar>(
    samples: &[WaldSample<T>],
    predict: impl Fn(&WaldSample<T>) -> Result<Tensor<T>> + Sync,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let rows: Vec<Result<(f64, f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let p = predict(s)?;
            Ok((l1_loss(&p, &s.gt)?.as_f64(), sam(&p, &s.gt)?, ergas(&p, &s.gt, RATIO)?))
        })
        .collect();
    let n = samples.len() as f64;
    let (mut l, mut a, mut e) = (0.0, 0.0, 0.0);
    for r in rows {
        let (x, y, z) = r?;
        l += x;
        a += y;
        e += z;
    }
    Ok(Evaluation {
        l1: l / n,
        sam: a / n,
        ergas: e / n,
    })
}

pub fn evaluate<T: Scalar>(net: &Bi2MaNet<T>, samples: &[WaldSample<T>]) -> Result<Evaluation> {
    mean_quality(samples, |s| net_forward(&s.pan, &s.lrms, net))
}

/// Quality of plain bicubic upsampling of the LRMS.
pub fn evaluate_bicubic<T: Scalar>(samples: &[WaldSample<T>]) -> Result<Evaluation> {
    mean_quality(samples, |s| upsample_bicubic(&s.lrms, RATIO))
}

/// Runs Adam on shuffled mini-batches. `on_epoch` sees every record as it is
/// produced. Stops after `cfg.epochs` epochs or `cfg.iterations` steps.
pub fn train<T: Scalar>(
    net: &mut Bi2MaNet<T>,
    train_set: &[WaldSample<T>],
    val_set: &[WaldSample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_BA7C);
    let mut adam = Adam::new(net, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        if cfg.iterations > 0 && steps >= cfg.iterations {
            break;
        }
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if cfg.iterations > 0 && steps >= cfg.iterations {
                break;
            }
            let batch: Vec<&WaldSample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = batch_gradient(net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {steps}"
                )));
            }
            adam.step(net, &grad, lr)?;
            total += loss.as_f64();
            batches += 1;
            steps += 1;
        }
        let (val_sam, val_ergas) = if val_set.is_empty() {
            (None, None)
        } else {
            let e = evaluate(net, val_set)?;
            (Some(e.sam), Some(e.ergas))
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_l1: total / batches.max(1) as f64,
            val_sam,
            val_ergas,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare by absolute difference.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        d / self.analytic.abs().max(self.numeric.abs()).max(GRADCHECK_FLOOR)
    }

    pub fn passes(&self) -> bool {
        self.rel_err() < GRADCHECK_TOL
    }
}

/// Compares `grads` against central differences of `loss` at
/// `probes_per_group` random scalars of every parameter group.
pub fn gradcheck<P>(
    params: &P,
    grads: &P,
    loss: impl Fn(&P) -> Result<f64> + Sync,
    probes_per_group: usize,
    seed: u64,
) -> Result<Vec<Probe>>
where
    P: Parameters<f64> + Clone + Sync,
{
    let list = params.param_list();
    let glist = grads.param_list();
    let mut groups: BTreeMap<ParamGroup, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, p) in list.iter().enumerate() {
        let e = groups.entry(p.group).or_default();
        e.push((t, p.tensor.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (group, tensors) in &groups {
        let total: usize = tensors.iter().map(|t| t.1).sum();
        for _ in 0..probes_per_group {
            let mut k = rng.gen_range(0..total);
            for &(t, len) in tensors {
                if k < len {
                    picks.push((*group, t, k));
                    break;
                }
                k -= len;
            }
        }
    }
    let names: Vec<String> = list.iter().map(|p| p.name.clone()).collect();
    let analytic: Vec<f64> = picks.iter().map(|&(_, t, k)| glist[t].tensor.data()[k]).collect();
    picks
        .par_iter()
        .zip(analytic)
        .map(|(&(group, t, k), a)| {
            let eval = |delta: f64| -> Result<f64> {
                let mut q = params.clone();
                q.param_list_mut()[t].tensor.data_mut()[k] += delta;
                loss(&q)
            };
            let numeric = (eval(GRADCHECK_STEP)? - eval(-GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP);
            Ok(Probe {
                name: names[t].clone(),
                group,
                index: k,
                analytic: a,
                numeric,
            })
        })
        .collect()
}

/// Gradient check of the mean l1 loss of a whole network on one sample,
/// with every layer's routing frozen at its unperturbed value.
pub fn gradcheck_net(
    net: &Bi2MaNet<f64>,
    sample: &WaldSample<f64>,
    probes_per_group: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    let (_, cache) = net_forward_cached(net, &sample.pan, &sample.lrms, None, &mut OpTally::off())?;
    let masks: Vec<Tensor<f64>> = cache.masks().iter().map(|m| m.mask.hard_mask.clone()).collect();
    drop(cache);
    let (_, grads) = sample_gradient(net, sample, 1.0, Some(&masks))?;
    gradcheck(
        net,
        &grads,
        |q| {
            let (p, _) = net_forward_cached(q, &sample.pan, &sample.lrms, Some(&masks), &mut OpTally::off())?;
            l1_loss(&p, &sample.gt)
        },
        probes_per_group,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_samples, DataSpec};
    use crate::net::{build_variant, Ablation, NetConfig};

    #[test]
    fn l1_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[2, 3, 3], 1.0, &mut r);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        let b = Tensor::<f64>::uniform(&[2, 3, 3], 1.0, &mut r);
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 18.0;
        assert!((l1_loss(&a, &b).unwrap() - oracle).abs() < 1e-15);
        assert!(l1_grad(&a, &a, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 6e-4);
        assert_eq!(c.learning_rate(199), 6e-4);
        assert_eq!(c.learning_rate(200), 0.8 * 6e-4);
        assert!((c.learning_rate(400) - 0.64 * 6e-4).abs() < 1e-18);
    }

    #[derive(Clone)]
    struct Scalar1(Tensor<f64>);

    impl Parameters<f64> for Scalar1 {
        fn visit<'a>(&'a self, _: &str, out: &mut Vec<crate::params::ParamRef<'a, f64>>) {
            out.push(crate::params::ParamRef {
                name: "x".into(),
                group: ParamGroup::Backbone,
                tensor: &self.0,
            });
        }
        fn visit_mut<'a>(&'a mut self, _: &str, out: &mut Vec<crate::params::ParamMut<'a, f64>>) {
            out.push(crate::params::ParamMut {
                name: "x".into(),
                group: ParamGroup::Backbone,
                tensor: &mut self.0,
            });
        }
    }

    #[test]
    fn adam_cases() {
        let mut p = Scalar1(Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap());
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &Scalar1(Tensor::zeros(&[2])), 0.1).unwrap();
        assert_eq!(p.0.data(), &[0.5, -1.0]);

        let mut p = Scalar1(Tensor::zeros(&[2]));
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &Scalar1(Tensor::from_vec(&[2], vec![3.0, -0.2]).unwrap()), 0.01).unwrap();
        assert!((p.0.data()[0] + 0.01).abs() < 1e-10);
        assert!((p.0.data()[1] - 0.01).abs() < 1e-9);

        // f(x) = x², x0 = 1, lr 0.1. Momentum carries x through zero at
        // step 11, so |x| only decreases monotonically for the first ten
        // steps; the trajectory is pinned against a reference recurrence.
        let mut p = Scalar1(Tensor::ones(&[1]));
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let mut xs = Vec::new();
        for _ in 0..100 {
            let g = Scalar1(p.0.scale(2.0));
            adam.step(&mut p, &g, 0.1).unwrap();
            xs.push(p.0.data()[0]);
        }
        assert!(xs[..10].windows(2).all(|w| w[1].abs() < w[0].abs()));
        for (step, expect) in [(9, 0.07624915560691221), (10, 0.005131501948057199), (11, -0.05893789063004727), (99, 0.002936675681102549)] {
            assert!((xs[step] - expect).abs() < 1e-12, "step {step}: {}", xs[step]);
        }
    }

    fn tiny() -> (Bi2MaNet<f64>, Vec<WaldSample<f64>>) {
        let cfg = NetConfig {
            base_channels: 8,
            depth: 2,
            ..NetConfig::default()
        };
        let net = build_variant(cfg, 7).unwrap();
        let spec = DataSpec {
            height: 16,
            width: 16,
            ..DataSpec::default()
        };
        (net, synth_samples(&spec, 3, 0, 4).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut net, data) = tiny();
        let before = net.clone();
        let cfg = TrainConfig {
            lr0: 0.0,
            batch: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let recs = train(&mut net, &data, &[], &cfg, |_| {}).unwrap();
        assert_eq!(net, before);
        assert_eq!(recs[0].train_l1, recs[1].train_l1);
        assert_eq!(recs[0].val_sam, None);
    }

    #[test]
    fn training_is_deterministic() {
        let (net0, data) = tiny();
        let cfg = TrainConfig {
            batch: 2,
            epochs: 2,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = net0.clone();
        let mut b = net0.clone();
        let ra = train(&mut a, &data[..3], &data[3..], &cfg, |_| {}).unwrap();
        let rb = train(&mut b, &data[..3], &data[3..], &cfg, |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_ne!(a, net0);
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let cfg = NetConfig {
            base_channels: 8,
            depth: 2,
            ablation: Ablation::Full,
            ..NetConfig::default()
        };
        let net = Bi2MaNet::<f64>::zeros(cfg).unwrap();
        let (_, data) = tiny();
        let mut s = data[0].clone();
        s.gt = upsample_bicubic(&s.lrms, RATIO).unwrap();
        let (loss, g) = sample_gradient(&net, &s, 1.0, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.param_list().iter().all(|p| p.tensor.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let (net, data) = tiny();
        let probes = gradcheck_net(&net, &data[0], 4, 11).unwrap();
        for p in &probes {
            assert!(p.passes(), "{p:?} rel {}", p.rel_err());
        }
    }
}

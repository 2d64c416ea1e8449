//! In-process simulation of data-parallel replicas running AdamW with
//! rounded updates.
//!
//! Each replica holds its own parameters and optimizer state. A step
//! computes local gradients (optionally on worker threads), reduces them in
//! fixed replica order on the coordinating thread, and applies the same
//! reduced gradient everywhere. Whether the replicas stay bit-identical
//! depends only on where their write-back rounding draws come from.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Split, Task};
use crate::optim::{step_in_place, AdamWConfig, AdamWSRState};
use crate::policy::PrecisionPolicy;
use crate::rounding::{round_nearest, RoundRng};
use crate::tensor::{Precision, Tensor};

/// Role tags for stream ids.
pub const ROLE_OPT: u64 = 1;
pub const ROLE_REPLICA: u64 = 2;
pub const ROLE_DATA: u64 = 3;
pub const ROLE_INIT: u64 = 4;

/// `(role << 48) | (replica << 32) | tensor`.
pub const fn stream_id(role: u64, replica: u64, tensor: u64) -> u64 {
    (role << 48) | ((replica & 0xFFFF) << 32) | (tensor & 0xFFFF_FFFF)
}

/// Mean of per-replica gradients. Summation runs in replica order, each
/// partial sum narrowed to `precision`; the mean is narrowed once more.
pub fn reduced_gradient(grads: &[&Tensor], precision: Precision) -> Result<Tensor> {
    let first = grads.first().ok_or_else(|| Error::config("replicas", "at least one gradient"))?;
    let mut acc: Vec<f32> = first.data().iter().map(|&v| precision.narrow(v)).collect();
    for g in &grads[1..] {
        first.same_shape(g)?;
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a = precision.narrow(*a + precision.narrow(v));
        }
    }
    if grads.len() > 1 {
        let m = grads.len() as f32;
        acc.iter_mut().for_each(|a| *a = precision.narrow(*a / m));
    }
    Tensor::new(first.shape().to_vec(), acc, precision)
}

/// Divergence between replicas after a step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub step: u64,
    /// Largest `|x_a - x_b|` over all replica pairs and elements.
    pub max_linf: f64,
    /// Fraction of stored bits that differ from replica 0, over all other
    /// replicas and elements.
    pub bit_mismatch_frac: f64,
    pub per_tensor_linf: Vec<f64>,
}

impl DriftReport {
    pub fn is_zero(&self) -> bool {
        self.max_linf == 0.0 && self.bit_mismatch_frac == 0.0
    }
}

/// Loss and drift for one group step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStep {
    pub losses: Vec<f32>,
    pub drift: DriftReport,
}

impl GroupStep {
    pub fn mean_loss(&self) -> f32 {
        self.losses.iter().sum::<f32>() / self.losses.len() as f32
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaGroup {
    pub params: Vec<Vec<Tensor>>,
    pub states: Vec<Vec<AdamWSRState>>,
    pub rng: RoundRng,
    pub reduction: Precision,
    pub shared_randomness: bool,
    pub cfg: AdamWConfig,
    pub policy: PrecisionPolicy,
    pub parallel: bool,
    t: u64,
}

impl ReplicaGroup {
    /// `m` replicas all starting from `init` (narrowed to the weight
    /// precision). Gradients are reduced in the policy's gradient precision.
    pub fn new(
        m: usize,
        init: &[Tensor],
        cfg: AdamWConfig,
        policy: PrecisionPolicy,
        rng: RoundRng,
        shared_randomness: bool,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("replicas", "must be >= 1"));
        }
        cfg.validate()?;
        policy.validate()?;
        let start: Vec<Tensor> = init
            .iter()
            .map(|t| match policy.weights {
                Precision::Bf16 => {
                    let v = t.data().iter().map(|&x| round_nearest(x).to_f32()).collect();
                    Tensor::new(t.shape().to_vec(), v, Precision::Bf16)
                }
                Precision::Fp32 => Ok(t.cast(Precision::Fp32)),
            })
            .collect::<Result<_>>()?;
        let states = (0..m)
            .map(|r| {
                start
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let replica = if shared_randomness { 0 } else { r as u64 };
                        AdamWSRState::new(p.shape(), &policy, stream_id(ROLE_OPT, replica, k as u64))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            params: vec![start; m],
            states,
            rng,
            reduction: policy.gradients,
            shared_randomness,
            cfg,
            policy,
            parallel: true,
            t: 0,
        })
    }

    pub fn replicas(&self) -> usize {
        self.params.len()
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One synchronized step. `grad_fn(m, params)` returns replica `m`'s
    /// local loss and gradient.
    pub fn group_step_with<F>(&mut self, grad_fn: F) -> Result<GroupStep>
    where
        F: Fn(usize, &[Tensor]) -> (f32, Vec<Vec<f32>>) + Sync,
    {
        let gp = self.policy.gradients;
        let local = |m: usize, p: &Vec<Tensor>| -> Result<(f32, Vec<Tensor>)> {
            let (loss, grads) = grad_fn(m, p);
            let grads = p
                .iter()
                .zip(grads)
                .map(|(t, g)| {
                    let g = Tensor::new(t.shape().to_vec(), g, Precision::Fp32)?;
                    if let Some((index, value)) = g.first_non_finite() {
                        return Err(Error::NonFinite { index, value });
                    }
                    Ok(g.cast(gp))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Replica {
                    replica: m,
                    source: Box::new(e),
                })?;
            Ok((loss, grads))
        };
        let results: Vec<Result<(f32, Vec<Tensor>)>> = if self.parallel {
            self.params.par_iter().enumerate().map(|(m, p)| local(m, p)).collect()
        } else {
            self.params.iter().enumerate().map(|(m, p)| local(m, p)).collect()
        };
        let mut losses = Vec::with_capacity(results.len());
        let mut grads = Vec::with_capacity(results.len());
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            grads.push(g);
        }
        let reduced = (0..self.params[0].len())
            .map(|k| {
                let per: Vec<&Tensor> = grads.iter().map(|g| &g[k]).collect();
                reduced_gradient(&per, self.reduction)
            })
            .collect::<Result<Vec<_>>>()?;

        let (cfg, policy, rng) = (&self.cfg, &self.policy, &self.rng);
        let apply = |(m, (p, st)): (usize, (&mut Vec<Tensor>, &mut Vec<AdamWSRState>))| -> Result<()> {
            for ((x, s), g) in p.iter_mut().zip(st.iter_mut()).zip(&reduced) {
                step_in_place(x, g, s, cfg, policy, rng).map_err(|e| Error::Replica {
                    replica: m,
                    source: Box::new(e),
                })?;
            }
            Ok(())
        };
        if self.parallel {
            self.params
                .par_iter_mut()
                .zip(self.states.par_iter_mut())
                .enumerate()
                .map(apply)
                .collect::<Result<()>>()?;
        } else {
            self.params
                .iter_mut()
                .zip(self.states.iter_mut())
                .enumerate()
                .map(apply)
                .collect::<Result<()>>()?;
        }
        self.t += 1;
        Ok(GroupStep {
            losses,
            drift: self.drift(),
        })
    }

    /// Step on a [`Task`], replica `m` evaluating `batches[m]`.
    pub fn group_step<T: Task + ?Sized>(&mut self, task: &T, batches: &[&[usize]]) -> Result<GroupStep> {
        if batches.len() != self.replicas() {
            return Err(Error::config("batches", "one batch per replica"));
        }
        self.group_step_with(|m, p| task.loss_and_grad(p, Split::Train, batches[m]))
    }

    pub fn drift(&self) -> DriftReport {
        let m = self.replicas();
        let n_tensors = self.params[0].len();
        let mut per_tensor = vec![0.0f64; n_tensors];
        let mut mismatched = 0u64;
        let mut total = 0u64;
        for k in 0..n_tensors {
            let base = &self.params[0][k];
            let width = match base.storage() {
                Precision::Bf16 => 16,
                Precision::Fp32 => 32,
            };
            for i in 0..base.len() {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                let b0 = base.data()[i].to_bits();
                for r in 0..m {
                    let v = self.params[r][k].data()[i];
                    lo = lo.min(v as f64);
                    hi = hi.max(v as f64);
                    if r > 0 {
                        mismatched += (v.to_bits() ^ b0).count_ones() as u64;
                    }
                }
                per_tensor[k] = per_tensor[k].max(hi - lo);
                total += width * (m as u64 - 1);
            }
        }
        DriftReport {
            step: self.t,
            max_linf: per_tensor.iter().cloned().fold(0.0, f64::max),
            bit_mismatch_frac: if total == 0 { 0.0 } else { mismatched as f64 / total as f64 },
            per_tensor_linf: per_tensor,
        }
    }
}

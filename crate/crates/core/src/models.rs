//! Small built-in models with hand-written backprop.
//!
//! Parameters arrive as (possibly bf16-valued) tensors; activations and
//! gradients are computed in binary32. Examples are addressed by index so a
//! global batch can be sharded across replicas without copying data.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::rounding::{Address, RoundRng};
use crate::tensor::Tensor;

/// Which split an index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A model together with its data.
pub trait Task: Sync {
    fn name(&self) -> &str;
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    /// Initial parameter values (binary32; callers narrow per policy).
    fn init(&self, rng: &RoundRng, stream: u64) -> Vec<Vec<f32>>;
    fn len(&self, split: Split) -> usize;
    /// Mean loss over `idx`; when `grads` is given it is overwritten with the
    /// gradient of that mean.
    fn evaluate(&self, params: &[Tensor], split: Split, idx: &[usize], grads: Option<&mut [Vec<f32>]>) -> f32;

    fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn loss_and_grad(&self, params: &[Tensor], split: Split, idx: &[usize]) -> (f32, Vec<Vec<f32>>) {
        let mut g: Vec<Vec<f32>> = self
            .param_shapes()
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        let loss = self.evaluate(params, split, idx, Some(&mut g));
        (loss, g)
    }

    fn loss(&self, params: &[Tensor], split: Split, idx: &[usize]) -> f32 {
        self.evaluate(params, split, idx, None)
    }
}

/// Fills `out` with scaled standard normals from `(stream, step = tensor, i)`.
fn normal_init(rng: &RoundRng, stream: u64, tensor: u64, n: usize, scale: f64) -> Vec<f32> {
    (0..n)
        .map(|i| (rng.normal(Address::new(stream, tensor, i as u64)) * scale) as f32)
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense regression data `y = X w* + noise`.
#[derive(Clone, Debug)]
pub struct LinearRegression {
    pub dim: usize,
    x: [Vec<f32>; 2],
    y: [Vec<f32>; 2],
}

impl LinearRegression {
    pub fn new(dim: usize, n_train: usize, n_val: usize, noise: f64, seed: u64) -> Self {
        let rng = RoundRng::new(seed);
        let w: Vec<f64> = (0..dim).map(|i| rng.normal(Address::new(0, 0, i as u64))).collect();
        let make = |split: u64, n: usize| {
            let mut xs = Vec::with_capacity(n * dim);
            let mut ys = Vec::with_capacity(n);
            for e in 0..n {
                let mut t = 0.0;
                for (j, wj) in w.iter().enumerate() {
                    let v = rng.normal(Address::new(1 + split, e as u64, j as u64));
                    t += v * wj;
                    xs.push(v as f32);
                }
                t += noise * rng.normal(Address::new(3 + split, e as u64, 0));
                ys.push(t as f32);
            }
            (xs, ys)
        };
        let (xt, yt) = make(0, n_train);
        let (xv, yv) = make(1, n_val);
        Self {
            dim,
            x: [xt, xv],
            y: [yt, yv],
        }
    }
}

fn split_ix(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
    }
}

impl Task for LinearRegression {
    fn name(&self) -> &str {
        "linear_regression"
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim], vec![1]]
    }

    fn init(&self, _rng: &RoundRng, _stream: u64) -> Vec<Vec<f32>> {
        vec![vec![0.0; self.dim], vec![0.0]]
    }

    fn len(&self, split: Split) -> usize {
        self.y[split_ix(split)].len()
    }

    fn evaluate(&self, params: &[Tensor], split: Split, idx: &[usize], mut grads: Option<&mut [Vec<f32>]>) -> f32 {
        let s = split_ix(split);
        let (w, b) = (params[0].data(), params[1].data()[0]);
        if let Some(g) = grads.as_deref_mut() {
            g.iter_mut().for_each(|v| v.fill(0.0));
        }
        let inv = 1.0 / idx.len().max(1) as f32;
        let mut loss = 0.0f32;
        for &e in idx {
            let x = &self.x[s][e * self.dim..(e + 1) * self.dim];
            let r = dot(w, x) + b - self.y[s][e];
            loss += 0.5 * r * r;
            if let Some(g) = grads.as_deref_mut() {
                axpy(r * inv, x, &mut g[0]);
                g[1][0] += r * inv;
            }
        }
        loss * inv
    }
}

/// Two-layer tanh network regressing a fixed random teacher of the same form.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    x: [Vec<f32>; 2],
    y: [Vec<f32>; 2],
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, n_train: usize, n_val: usize, seed: u64) -> Self {
        let rng = RoundRng::new(seed);
        let w1: Vec<f64> = (0..input * hidden)
            .map(|i| rng.normal(Address::new(10, 0, i as u64)) / (input as f64).sqrt())
            .collect();
        let w2: Vec<f64> = (0..hidden)
            .map(|i| rng.normal(Address::new(11, 0, i as u64)) / (hidden as f64).sqrt())
            .collect();
        let make = |split: u64, n: usize| {
            let mut xs = Vec::with_capacity(n * input);
            let mut ys = Vec::with_capacity(n);
            for e in 0..n {
                let x: Vec<f64> = (0..input)
                    .map(|j| rng.normal(Address::new(12 + split, e as u64, j as u64)))
                    .collect();
                let mut out = 0.0;
                for h in 0..hidden {
                    let a: f64 = (0..input).map(|j| w1[h * input + j] * x[j]).sum();
                    out += w2[h] * a.tanh();
                }
                xs.extend(x.iter().map(|&v| v as f32));
                ys.push(out as f32);
            }
            (xs, ys)
        };
        let (xt, yt) = make(0, n_train);
        let (xv, yv) = make(1, n_val);
        Self {
            input,
            hidden,
            x: [xt, xv],
            y: [yt, yv],
        }
    }
}

impl Task for Mlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.hidden, self.input], vec![self.hidden], vec![1, self.hidden], vec![1]]
    }

    fn init(&self, rng: &RoundRng, stream: u64) -> Vec<Vec<f32>> {
        vec![
            normal_init(rng, stream, 0, self.hidden * self.input, 1.0 / (self.input as f64).sqrt()),
            vec![0.0; self.hidden],
            normal_init(rng, stream, 2, self.hidden, 1.0 / (self.hidden as f64).sqrt()),
            vec![0.0],
        ]
    }

    fn len(&self, split: Split) -> usize {
        self.y[split_ix(split)].len()
    }

    fn evaluate(&self, params: &[Tensor], split: Split, idx: &[usize], mut grads: Option<&mut [Vec<f32>]>) -> f32 {
        let s = split_ix(split);
        let (w1, b1, w2, b2) = (params[0].data(), params[1].data(), params[2].data(), params[3].data()[0]);
        if let Some(g) = grads.as_deref_mut() {
            g.iter_mut().for_each(|v| v.fill(0.0));
        }
        let inv = 1.0 / idx.len().max(1) as f32;
        let mut h = vec![0.0f32; self.hidden];
        let mut loss = 0.0f32;
        for &e in idx {
            let x = &self.x[s][e * self.input..(e + 1) * self.input];
            for k in 0..self.hidden {
                h[k] = (dot(&w1[k * self.input..(k + 1) * self.input], x) + b1[k]).tanh();
            }
            let r = dot(w2, &h) + b2 - self.y[s][e];
            loss += 0.5 * r * r;
            if let Some(g) = grads.as_deref_mut() {
                let dr = r * inv;
                g[3][0] += dr;
                for k in 0..self.hidden {
                    g[2][k] += dr * h[k];
                    let dpre = dr * w2[k] * (1.0 - h[k] * h[k]);
                    g[1][k] += dpre;
                    axpy(dpre, x, &mut g[0][k * self.input..(k + 1) * self.input]);
                }
            }
        }
        loss * inv
    }
}

/// Architecture of the character model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharLmConfig {
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        Self {
            context: 8,
            embed: 16,
            hidden: 128,
        }
    }
}

/// Fixed-window character model: embeddings of the previous `context`
/// characters are concatenated, passed through one tanh layer and a softmax
/// over the vocabulary.
#[derive(Clone, Debug)]
pub struct CharLm {
    pub cfg: CharLmConfig,
    pub vocab: usize,
    tokens: [Vec<u8>; 2],
}

impl CharLm {
    pub fn new(corpus: &Corpus, cfg: CharLmConfig) -> Self {
        Self {
            cfg,
            vocab: corpus.vocab_size(),
            tokens: [corpus.train().to_vec(), corpus.val().to_vec()],
        }
    }
}

impl Task for CharLm {
    fn name(&self) -> &str {
        "char_lm"
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.cfg;
        vec![
            vec![self.vocab, c.embed],
            vec![c.hidden, c.context * c.embed],
            vec![c.hidden],
            vec![self.vocab, c.hidden],
            vec![self.vocab],
        ]
    }

    fn init(&self, rng: &RoundRng, stream: u64) -> Vec<Vec<f32>> {
        let c = self.cfg;
        let fan_in = (c.context * c.embed) as f64;
        vec![
            normal_init(rng, stream, 0, self.vocab * c.embed, 1.0),
            normal_init(rng, stream, 1, c.hidden * c.context * c.embed, 1.0 / fan_in.sqrt()),
            vec![0.0; c.hidden],
            normal_init(rng, stream, 3, self.vocab * c.hidden, 1.0 / (c.hidden as f64).sqrt()),
            vec![0.0; self.vocab],
        ]
    }

    fn len(&self, split: Split) -> usize {
        self.tokens[split_ix(split)].len().saturating_sub(self.cfg.context)
    }

    fn evaluate(&self, params: &[Tensor], split: Split, idx: &[usize], mut grads: Option<&mut [Vec<f32>]>) -> f32 {
        let c = self.cfg;
        let v = self.vocab;
        let width = c.context * c.embed;
        let toks = &self.tokens[split_ix(split)];
        let (emb, w1, b1, w2, b2) = (
            params[0].data(),
            params[1].data(),
            params[2].data(),
            params[3].data(),
            params[4].data(),
        );
        if let Some(g) = grads.as_deref_mut() {
            g.iter_mut().for_each(|v| v.fill(0.0));
        }
        let inv = 1.0 / idx.len().max(1) as f32;
        let mut input = vec![0.0f32; width];
        let mut h = vec![0.0f32; c.hidden];
        let mut logits = vec![0.0f32; v];
        let mut dh = vec![0.0f32; c.hidden];
        let mut din = vec![0.0f32; width];
        let mut loss = 0.0f32;
        for &e in idx {
            let ctx = &toks[e..e + c.context];
            let target = toks[e + c.context] as usize;
            for (j, &t) in ctx.iter().enumerate() {
                let t = t as usize;
                input[j * c.embed..(j + 1) * c.embed].copy_from_slice(&emb[t * c.embed..(t + 1) * c.embed]);
            }
            for k in 0..c.hidden {
                h[k] = (dot(&w1[k * width..(k + 1) * width], &input) + b1[k]).tanh();
            }
            let mut max = f32::NEG_INFINITY;
            for o in 0..v {
                logits[o] = dot(&w2[o * c.hidden..(o + 1) * c.hidden], &h) + b2[o];
                max = max.max(logits[o]);
            }
            let mut z = 0.0f32;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            loss += z.ln() - (logits[target].ln());
            let Some(g) = grads.as_deref_mut() else {
                continue;
            };
            // logits now holds unnormalized probabilities
            dh.fill(0.0);
            for o in 0..v {
                let mut d = logits[o] / z;
                if o == target {
                    d -= 1.0;
                }
                let d = d * inv;
                g[4][o] += d;
                axpy(d, &h, &mut g[3][o * c.hidden..(o + 1) * c.hidden]);
                axpy(d, &w2[o * c.hidden..(o + 1) * c.hidden], &mut dh);
            }
            din.fill(0.0);
            for k in 0..c.hidden {
                let dpre = dh[k] * (1.0 - h[k] * h[k]);
                g[2][k] += dpre;
                axpy(dpre, &input, &mut g[1][k * width..(k + 1) * width]);
                axpy(dpre, &w1[k * width..(k + 1) * width], &mut din);
            }
            for (j, &t) in ctx.iter().enumerate() {
                let t = t as usize;
                axpy(1.0, &din[j * c.embed..(j + 1) * c.embed], &mut g[0][t * c.embed..(t + 1) * c.embed]);
            }
        }
        loss * inv
    }
}

/// Uniform sample of `size` training indices for a given step.
pub fn sample_batch(rng: &RoundRng, stream: u64, step: u64, size: usize, n: usize) -> Vec<usize> {
    (0..size)
        .map(|i| rng.below(Address::new(stream, step, i as u64), n as u64) as usize)
        .collect()
}

/// Contiguous shard `m` of `parts` (sizes differ by at most one).
pub fn shard(idx: &[usize], m: usize, parts: usize) -> &[usize] {
    let n = idx.len();
    let lo = n * m / parts;
    let hi = n * (m + 1) / parts;
    &idx[lo..hi]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn tensors(task: &dyn Task, values: Vec<Vec<f32>>) -> Vec<Tensor> {
        task.param_shapes()
            .into_iter()
            .zip(values)
            .map(|(s, v)| Tensor::new(s, v, Precision::Fp32).unwrap())
            .collect()
    }

    /// Central differences in binary64 would need an f64 model; binary32 with a
    /// moderate step and loose tolerance is enough to catch indexing bugs.
    fn grad_check(task: &dyn Task, seed: u64) {
        let rng = RoundRng::new(seed);
        let init = task.init(&rng, 0);
        let params = tensors(task, init.clone());
        let idx: Vec<usize> = (0..6).map(|i| i * 3 % task.len(Split::Train)).collect();
        let (_, g) = task.loss_and_grad(&params, Split::Train, &idx);
        let h = 1e-2f32;
        for (k, vals) in init.iter().enumerate() {
            for probe in 0..vals.len().min(12) {
                let i = (probe * 7919) % vals.len();
                let mut up = init.clone();
                up[k][i] += h;
                let mut dn = init.clone();
                dn[k][i] -= h;
                let lu = task.loss(&tensors(task, up), Split::Train, &idx) as f64;
                let ld = task.loss(&tensors(task, dn), Split::Train, &idx) as f64;
                let fd = (lu - ld) / (2.0 * h as f64);
                let an = g[k][i] as f64;
                assert!(
                    (fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()) + 2e-3,
                    "{} tensor {k} elem {i}: fd {fd} vs analytic {an}",
                    task.name()
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_check(&LinearRegression::new(5, 50, 10, 0.1, 1), 2);
        grad_check(&Mlp::new(4, 8, 50, 10, 3), 4);
        let corpus = Corpus::synthetic(5, 4000);
        grad_check(
            &CharLm::new(
                &corpus,
                CharLmConfig {
                    context: 3,
                    embed: 4,
                    hidden: 8,
                },
            ),
            6,
        );
    }

    #[test]
    fn shards_partition_the_batch() {
        let idx: Vec<usize> = (0..10).collect();
        let parts: Vec<usize> = (0..3).flat_map(|m| shard(&idx, m, 3).to_vec()).collect();
        assert_eq!(parts, idx);
        assert_eq!(shard(&idx, 0, 1), &idx[..]);
    }

    #[test]
    fn char_lm_is_small() {
        let corpus = Corpus::synthetic(1, 20_000);
        let lm = CharLm::new(&corpus, CharLmConfig::default());
        assert!(lm.param_count() <= 1_000_000);
        let params = tensors(&lm, lm.init(&RoundRng::new(0), 0));
        let l = lm.loss(&params, Split::Val, &[0, 1, 2, 3]);
        assert!(l.is_finite() && l > 0.0);
    }
}

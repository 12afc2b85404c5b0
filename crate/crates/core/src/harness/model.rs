//! Tiny decoder: token embedding, residual attention + tanh feed-forward
//! blocks, and a linear readout from the last token, with a hand-written
//! backward pass.
//!
//! All parameters live in one flat vector so the optimizer, gradient
//! clipping and finite-difference checks can treat them uniformly.
//! Initialisation: weights uniform in `±1/sqrt(fan_in)`, embeddings uniform in
//! `±1`, biases zero.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, forward_with_plan, AttentionConfig, AttentionPlan, ForwardState, HeadTensor};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradcheck::{central_differences, compare, GradCheckReport, DEFAULT_STEP};
use crate::layout::{build_layout, SequenceLayout};
use crate::masks::MaskKind;
use crate::numerics::{matmul, Matrix, Real, Rng};

use super::tasks::{gen_task, Example, TaskKind, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub num_heads: usize,
    pub d_head: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            num_heads: 2,
            d_head: 8,
            ff_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.num_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.layers) {
            return Err(Error::invalid(format!("layers must be in 1..=4, got {}", self.layers)));
        }
        if self.num_heads == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("num_heads and ff_dim must be positive"));
        }
        if self.d_head < 2 || !self.d_head.is_multiple_of(2) {
            return Err(Error::invalid(format!("d_head must be even and >= 2, got {}", self.d_head)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIndex {
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    embed: Range<usize>,
    layers: Vec<LayerIndex>,
    wr: Range<usize>,
    br: Range<usize>,
    total: usize,
}

impl ParamIndex {
    fn new(cfg: &ModelConfig, vocab: usize, classes: usize) -> Self {
        let d = cfg.embed_dim();
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let embed = take(vocab * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerIndex {
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                w1: take(d * cfg.ff_dim),
                b1: take(cfg.ff_dim),
                w2: take(cfg.ff_dim * d),
                b2: take(d),
            })
            .collect();
        let wr = take(d * classes);
        let br = take(classes);
        ParamIndex {
            embed,
            layers,
            wr,
            br,
            total: next,
        }
    }
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    b1: Vec<Real>,
    w2: Matrix,
    b2: Vec<Real>,
}

/// Parameters unpacked into matrices once per optimizer step.
pub struct Weights {
    embed: Matrix,
    layers: Vec<LayerWeights>,
    wr: Matrix,
    br: Vec<Real>,
}

struct LayerCache {
    x: Matrix,
    attn: ForwardState,
    merged: Matrix,
    x1: Matrix,
    h: Matrix,
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    config: ModelConfig,
    vocab: usize,
    num_classes: usize,
    index: ParamIndex,
    params: Vec<Real>,
    plan: AttentionPlan,
}

impl TinyModel {
    /// Fresh model for sequences of `layout` with attention settings `attention`
    /// (its head count and width must match `config`).
    pub fn new(
        config: ModelConfig,
        layout: &SequenceLayout,
        attention: &AttentionConfig,
        vocab: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if attention.num_heads != config.num_heads || attention.d_head != config.d_head {
            return Err(Error::invalid("attention heads/width must match the model config"));
        }
        if vocab == 0 || num_classes == 0 {
            return Err(Error::invalid("vocab and num_classes must be positive"));
        }
        let plan = AttentionPlan::new(layout, attention)?;
        let index = ParamIndex::new(&config, vocab, num_classes);
        let mut params = vec![0.0; index.total];
        let mut rng = Rng::seeded(seed);
        let d = config.embed_dim();
        let mut fill = |r: &Range<usize>, bound: Real| {
            for p in &mut params[r.clone()] {
                *p = rng.uniform(-bound, bound);
            }
        };
        let inv = |fan_in: usize| 1.0 / (fan_in as Real).sqrt();
        fill(&index.embed, 1.0);
        for l in &index.layers {
            fill(&l.wq, inv(d));
            fill(&l.wk, inv(d));
            fill(&l.wv, inv(d));
            fill(&l.wo, inv(d));
            fill(&l.w1, inv(d));
            fill(&l.w2, inv(config.ff_dim));
        }
        fill(&index.wr, inv(d));
        Ok(TinyModel {
            config,
            vocab,
            num_classes,
            index,
            params,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seq_len(&self) -> usize {
        self.plan.seq_len()
    }

    pub fn params(&self) -> &[Real] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Real] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn mat(&self, r: &Range<usize>, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.params[r.clone()].to_vec()).expect("range sized by index")
    }

    pub fn weights(&self) -> Weights {
        let d = self.config.embed_dim();
        let f = self.config.ff_dim;
        Weights {
            embed: self.mat(&self.index.embed, self.vocab, d),
            layers: self
                .index
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: self.mat(&l.wq, d, d),
                    wk: self.mat(&l.wk, d, d),
                    wv: self.mat(&l.wv, d, d),
                    wo: self.mat(&l.wo, d, d),
                    w1: self.mat(&l.w1, d, f),
                    b1: self.params[l.b1.clone()].to_vec(),
                    w2: self.mat(&l.w2, f, d),
                    b2: self.params[l.b2.clone()].to_vec(),
                })
                .collect(),
            wr: self.mat(&self.index.wr, d, self.num_classes),
            br: self.params[self.index.br.clone()].to_vec(),
        }
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.tokens.len() != self.seq_len() {
            return Err(Error::shape("TinyModel", self.seq_len(), ex.tokens.len()));
        }
        if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::invalid(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        if ex.label >= self.num_classes {
            return Err(Error::invalid(format!("label {} outside {} classes", ex.label, self.num_classes)));
        }
        Ok(())
    }

    fn split_heads(&self, x: &Matrix) -> HeadTensor {
        let (t, dh, heads) = (x.rows(), self.config.d_head, self.config.num_heads);
        let mut data = Vec::with_capacity(t * heads * dh);
        for h in 0..heads {
            for n in 0..t {
                data.extend_from_slice(&x.row(n)[h * dh..(h + 1) * dh]);
            }
        }
        HeadTensor::from_vec(heads, t, dh, data).expect("sized from x")
    }

    fn merge_heads(&self, x: &HeadTensor) -> Matrix {
        let (heads, t, dh) = x.shape();
        let mut m = Matrix::zeros(t, heads * dh);
        for h in 0..heads {
            for n in 0..t {
                m.row_mut(n)[h * dh..(h + 1) * dh].copy_from_slice(x.row(h, n));
            }
        }
        m
    }

    fn forward(&self, w: &Weights, tokens: &[usize]) -> (Vec<LayerCache>, Matrix) {
        let d = self.config.embed_dim();
        let mut x = Matrix::zeros(tokens.len(), d);
        for (n, &tok) in tokens.iter().enumerate() {
            x.row_mut(n).copy_from_slice(w.embed.row(tok));
        }
        let mut caches = Vec::with_capacity(w.layers.len());
        for lw in &w.layers {
            let q = self.split_heads(&matmul(&x, &lw.wq).expect("T x D"));
            let k = self.split_heads(&matmul(&x, &lw.wk).expect("T x D"));
            let v = self.split_heads(&matmul(&x, &lw.wv).expect("T x D"));
            let attn = forward_with_plan(&q, &k, &v, &self.plan, Execution::Sequential)
                .expect("shapes fixed by the plan");
            let merged = self.merge_heads(&attn.output);
            let x1 = x.add(&matmul(&merged, &lw.wo).expect("T x D")).expect("T x D");
            let mut h = matmul(&x1, &lw.w1).expect("T x F");
            for n in 0..h.rows() {
                for (z, b) in h.row_mut(n).iter_mut().zip(&lw.b1) {
                    *z = (*z + b).tanh();
                }
            }
            let mut x2 = matmul(&h, &lw.w2).expect("T x D");
            for n in 0..x2.rows() {
                for ((o, b), r) in x2.row_mut(n).iter_mut().zip(&lw.b2).zip(x1.row(n)) {
                    *o += b + r;
                }
            }
            caches.push(LayerCache {
                x,
                attn: attn.state,
                merged,
                x1,
                h,
            });
            x = x2;
        }
        (caches, x)
    }

    fn logits_from(&self, w: &Weights, last: &[Real]) -> Vec<Real> {
        (0..self.num_classes)
            .map(|c| w.br[c] + last.iter().enumerate().map(|(i, &x)| x * w.wr.get(i, c)).sum::<Real>())
            .collect()
    }

    pub fn logits(&self, w: &Weights, tokens: &[usize]) -> Vec<Real> {
        let (_, x) = self.forward(w, tokens);
        self.logits_from(w, x.row(x.rows() - 1))
    }

    pub fn predict(&self, w: &Weights, tokens: &[usize]) -> usize {
        let logits = self.logits(w, tokens);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, w: &Weights, ex: &Example) -> Result<Real> {
        self.check_example(ex)?;
        let logits = self.logits(w, &ex.tokens);
        Ok(cross_entropy(&logits, ex.label).0)
    }

    /// Mean loss over `batch`, and its gradient accumulated into `grad`
    /// (scaled by `1 / batch.len()`).
    pub fn loss_and_grad(&self, w: &Weights, batch: &[&Example], grad: &mut [Real]) -> Result<Real> {
        if grad.len() != self.params.len() {
            return Err(Error::shape("loss_and_grad", self.params.len(), grad.len()));
        }
        let inv = 1.0 / batch.len().max(1) as Real;
        let mut total = 0.0;
        for ex in batch {
            self.check_example(ex)?;
            total += self.example_grad(w, ex, inv, grad);
        }
        Ok(total * inv)
    }

    fn example_grad(&self, w: &Weights, ex: &Example, weight: Real, grad: &mut [Real]) -> Real {
        let d = self.config.embed_dim();
        let t = ex.tokens.len();
        let (caches, x_out) = self.forward(w, &ex.tokens);
        let last = x_out.row(t - 1);
        let logits = self.logits_from(w, last);
        let (loss, probs) = cross_entropy(&logits, ex.label);

        let mut d_logits = probs;
        d_logits[ex.label] -= 1.0;
        d_logits.iter_mut().for_each(|g| *g *= weight);
        for (i, &x) in last.iter().enumerate() {
            for (c, &g) in d_logits.iter().enumerate() {
                grad[self.index.wr.start + i * self.num_classes + c] += x * g;
            }
        }
        add_into(&mut grad[self.index.br.clone()], &d_logits);
        let mut dx = Matrix::zeros(t, d);
        for (i, o) in dx.row_mut(t - 1).iter_mut().enumerate() {
            *o = (0..self.num_classes).map(|c| w.wr.get(i, c) * d_logits[c]).sum();
        }

        for ((lw, li), cache) in w.layers.iter().zip(&self.index.layers).zip(&caches).rev() {
            // feed-forward: x2 = x1 + tanh(x1 W1 + b1) W2 + b2
            add_into(&mut grad[li.w2.clone()], matmul(&cache.h.transpose(), &dx).expect("F x D").as_slice());
            add_into(&mut grad[li.b2.clone()], &column_sums(&dx));
            let mut dz = matmul(&dx, &lw.w2.transpose()).expect("T x F");
            for (g, &h) in dz.as_mut_slice().iter_mut().zip(cache.h.as_slice()) {
                *g *= 1.0 - h * h;
            }
            add_into(&mut grad[li.w1.clone()], matmul(&cache.x1.transpose(), &dz).expect("D x F").as_slice());
            add_into(&mut grad[li.b1.clone()], &column_sums(&dz));
            let dx1 = dx.add(&matmul(&dz, &lw.w1.transpose()).expect("T x D")).expect("T x D");

            // attention: x1 = x + merge(attn(x Wq, x Wk, x Wv)) Wo
            add_into(&mut grad[li.wo.clone()], matmul(&cache.merged.transpose(), &dx1).expect("D x D").as_slice());
            let d_merged = matmul(&dx1, &lw.wo.transpose()).expect("T x D");
            let g = attention_backward(&cache.attn, &self.split_heads(&d_merged)).expect("state from forward");
            let mut dx_in = dx1;
            for (gh, wmat, range) in [
                (&g.grad_q, &lw.wq, &li.wq),
                (&g.grad_k, &lw.wk, &li.wk),
                (&g.grad_v, &lw.wv, &li.wv),
            ] {
                let gm = self.merge_heads(gh);
                add_into(&mut grad[range.clone()], matmul(&cache.x.transpose(), &gm).expect("D x D").as_slice());
                dx_in = dx_in.add(&matmul(&gm, &wmat.transpose()).expect("T x D")).expect("T x D");
            }
            dx = dx_in;
        }
        for (n, &tok) in ex.tokens.iter().enumerate() {
            let start = self.index.embed.start + tok * d;
            add_into(&mut grad[start..start + d], dx.row(n));
        }
        loss
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn column_sums(m: &Matrix) -> Vec<Real> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        add_into(&mut out, m.row(i));
    }
    out
}

/// `(loss, softmax probabilities)`.
fn cross_entropy(logits: &[Real], label: usize) -> (Real, Vec<Real>) {
    let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: Real = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    (loss, exps.into_iter().map(|e| e / z).collect())
}

/// Full-model analytic gradient against central differences on a micro
/// configuration: T = 8, one layer, d_head = 4, dual rotary (gamma = 1) with
/// the frame-wise block causal mask.
pub fn check_model_gradients(seed: u64) -> Result<GradCheckReport> {
    let layout = build_layout(1, 2, 3, 1)?;
    let config = ModelConfig {
        layers: 1,
        num_heads: 2,
        d_head: 4,
        ff_dim: 8,
    };
    let attention = AttentionConfig::new(2, 4)
        .with_mask(MaskKind::FwBlockCausal)
        .with_gamma(1.0);
    let data = gen_task(TaskKind::FrameOrder, &layout, seed, 3)?;
    let mut model = TinyModel::new(config, &layout, &attention, VOCAB_SIZE, data.num_classes, seed)?;
    let batch: Vec<&Example> = data.examples.iter().collect();
    let mut analytic = vec![0.0; model.num_params()];
    model.loss_and_grad(&model.weights(), &batch, &mut analytic)?;
    let mut params = model.params.clone();
    let numeric = central_differences(&mut params, DEFAULT_STEP, |p| {
        model.params.copy_from_slice(p);
        let w = model.weights();
        let total: Real = batch.iter().map(|ex| model.loss(&w, ex).expect("validated")).sum();
        total / batch.len() as Real
    });
    Ok(compare("tiny model", &[("params", &analytic, &numeric)]))
}

//! Synthetic token streams from a seeded order-k Markov chain.
//!
//! Each context (the previous `order` tokens) owns a row of standard normal
//! logits drawn from its own RNG stream; the transition distribution is the
//! softmax of those logits divided by `temperature`. Temperature 0 means
//! argmax, so the chain is deterministic and ends in a cycle.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sfl_core::rng::{split_seed, stream_tag};
use sfl_core::Rng;

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub vocab: usize,
    pub order: usize,
    pub temperature: f64,
    pub seed: u64,
    pub train_tokens: usize,
    pub eval_tokens: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            order: 2,
            temperature: 0.5,
            seed: 7,
            train_tokens: 200_000,
            eval_tokens: 8_192,
        }
    }
}

const BURN_IN: usize = 1_000;

pub struct MarkovChain {
    spec: DataSpec,
    rows: HashMap<u64, Vec<f64>>,
}

impl MarkovChain {
    pub fn new(spec: DataSpec) -> Result<Self> {
        if spec.vocab < 2 {
            return Err(LabError::Config("data vocab must be at least 2".into()));
        }
        if spec.order == 0 || spec.order > 8 {
            return Err(LabError::Config("data order must be in 1..=8".into()));
        }
        if !(spec.temperature >= 0.0) {
            return Err(LabError::Config("data temperature must be non-negative".into()));
        }
        Ok(Self {
            spec,
            rows: HashMap::new(),
        })
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    fn context_id(&self, ctx: &[usize]) -> u64 {
        ctx.iter()
            .fold(0u64, |h, &t| h.wrapping_mul(self.spec.vocab as u64).wrapping_add(t as u64))
    }

    /// Transition probabilities after `ctx` (the last `order` tokens).
    pub fn probs(&mut self, ctx: &[usize]) -> &[f64] {
        let id = self.context_id(ctx);
        let (v, temp, seed) = (self.spec.vocab, self.spec.temperature, self.spec.seed);
        self.rows.entry(id).or_insert_with(|| {
            let mut rng = Rng::new(split_seed(split_seed(seed, stream_tag("markov-row")), id));
            let logits: Vec<f64> = (0..v).map(|_| rng.normal()).collect();
            let mut p = vec![0.0; v];
            if temp == 0.0 {
                let best = (0..v).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
                p[best] = 1.0;
            } else {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for (pj, &z) in p.iter_mut().zip(&logits) {
                    *pj = ((z - m) / temp).exp();
                }
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
            }
            p
        })
    }

    /// `n` tokens from the stream labelled `label`, after a burn-in so the
    /// output starts near the stationary distribution.
    pub fn sample(&mut self, label: &str, n: usize) -> Vec<usize> {
        let k = self.spec.order;
        let mut rng = Rng::fork(self.spec.seed, label);
        let mut ctx: Vec<usize> = (0..k).map(|_| rng.below(self.spec.vocab)).collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..BURN_IN + n {
            let next = rng.categorical(self.probs(&ctx));
            ctx.remove(0);
            ctx.push(next);
            if i >= BURN_IN {
                out.push(next);
            }
        }
        out
    }

    /// Mean `-ln p(next | context)` of the true chain over a stream.
    pub fn cross_entropy(&mut self, tokens: &[usize]) -> f64 {
        let k = self.spec.order;
        if tokens.len() <= k {
            return f64::NAN;
        }
        let mut acc = 0.0;
        for w in tokens.windows(k + 1) {
            acc -= self.probs(&w[..k])[w[k]].max(1e-300).ln();
        }
        acc / (tokens.len() - k) as f64
    }
}

/// Shannon entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(tokens: &[usize], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    for &t in tokens {
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Train and eval streams for one run.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn generate_data(spec: &DataSpec) -> Result<Corpus> {
    let mut chain = MarkovChain::new(spec.clone())?;
    Ok(Corpus {
        train: chain.sample("train", spec.train_tokens),
        eval: chain.sample("eval", spec.eval_tokens),
    })
}

/// `count` windows of `len` tokens drawn uniformly from `stream`.
pub fn sample_windows(stream: &[usize], len: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(stream.len() >= len, "stream shorter than one window");
    let span = stream.len() - len + 1;
    (0..count)
        .map(|_| {
            let s = rng.below(span);
            stream[s..s + len].to_vec()
        })
        .collect()
}

/// Consecutive, non-overlapping windows from the start of `stream`.
pub fn fixed_windows(stream: &[usize], len: usize, count: usize) -> Vec<Vec<usize>> {
    stream.chunks_exact(len).take(count).map(|c| c.to_vec()).collect()
}

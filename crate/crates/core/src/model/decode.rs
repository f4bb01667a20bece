use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Model;
use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum Strategy {
    /// Highest-probability token; ties go to the lowest id.
    #[default]
    Greedy,
    /// Sample from the smallest set of tokens whose mass reaches `top_p`.
    Nucleus { top_p: f64, temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Softmax probability of each emitted token.
    pub probs: Vec<f64>,
    /// `L` tokens were emitted without an EOS.
    pub truncated: bool,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .map(|x| ((x - max) / temperature).exp())
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn nucleus(p: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        kept += 1;
        mass += p[i];
        if mass >= top_p {
            break;
        }
    }
    let mut u = rng.gen::<f64>() * mass;
    for &i in &order[..kept] {
        u -= p[i];
        if u < 0.0 {
            return i;
        }
    }
    order[kept - 1]
}

/// Emits tokens one at a time from `begin` until EOS or `max_len` tokens.
pub fn generate_from_memory(
    model: &Model,
    memory: &Matrix,
    begin: u32,
    eos: u32,
    max_len: usize,
    strategy: Strategy,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    if let Strategy::Nucleus { top_p, temperature } = strategy {
        if !(top_p > 0.0 && top_p <= 1.0 && temperature > 0.0) {
            return Err(Error::Config(format!(
                "nucleus needs 0 < top_p <= 1 and temperature > 0 (got {top_p}, {temperature})"
            )));
        }
    }
    let max_len = max_len.min(model.config().max_seq_len);
    let mut inputs = vec![begin];
    let mut out = Generation {
        tokens: Vec::new(),
        probs: Vec::new(),
        truncated: false,
    };
    while out.tokens.len() < max_len {
        let logits = model.logits_from_memory(memory, &inputs)?;
        let last = logits.row(logits.rows - 1);
        let p = softmax(last, 1.0);
        let tok = match strategy {
            Strategy::Greedy => argmax(&p),
            Strategy::Nucleus { top_p, temperature } => {
                let q = if temperature == 1.0 {
                    p.clone()
                } else {
                    softmax(last, temperature)
                };
                nucleus(&q, top_p, rng)
            }
        };
        out.tokens.push(tok as u32);
        out.probs.push(p[tok]);
        if tok as u32 == eos {
            return Ok(out);
        }
        inputs.push(tok as u32);
    }
    out.truncated = true;
    Ok(out)
}

/// Encodes the window once, then decodes autoregressively.
pub fn generate(
    model: &Model,
    frames: &[Matrix],
    begin: u32,
    eos: u32,
    max_len: usize,
    strategy: Strategy,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    let (memory, _) = model.memory(frames)?;
    generate_from_memory(model, &memory, begin, eos, max_len, strategy, rng)
}

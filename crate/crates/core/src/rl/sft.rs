use alloc::vec::Vec;

use super::Adam;
use crate::autodiff::Tape;
use crate::engine::EngineProfile;
use crate::error::Result;
use crate::model::{forward_tape, ForwardOptions, ParamVars, PolicyParams};

/// A prompt followed by its target response.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftOutcome {
    /// Mean per-token negative log-likelihood before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

/// One supervised step minimizing mean token NLL over the batch.
pub fn sft_step(params: &mut PolicyParams, batch: &[SftExample], opt: &mut Adam, engine: &EngineProfile) -> Result<SftOutcome> {
    let tokens: usize = batch.iter().map(|e| e.tokens.len() - e.prompt_len).sum();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let out = forward_tape(&mut tape, params, &vars, &ex.tokens, ex.prompt_len, engine, &ForwardOptions::default())?;
        let lp = tape.value(out.logprobs).data();
        loss -= lp.iter().sum::<f64>();
        let seed = alloc::vec![-1.0 / tokens as f64; lp.len()];
        let g = vars.collect(&tape.backward_seeded(out.logprobs, &seed)?, params);
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let grad_norm = opt.descend(params, grads);
    Ok(SftOutcome {
        loss: loss / tokens as f64,
        grad_norm,
    })
}

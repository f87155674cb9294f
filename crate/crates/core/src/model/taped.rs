use alloc::vec::Vec;

use super::forward::{check_sequence, positional_row, ForwardOptions};
use super::{PolicyParams, RoutingTrace};
use crate::autodiff::{Gradients, Tape, Var};
use crate::engine::{EngineProfile, Site};
use crate::error::{Error, Result};
use crate::moe::{self, ExpertVars, RowRoute};

/// One tape variable per parameter slot.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    /// Register every parameter as a trainable leaf.
    pub fn register(tape: &mut Tape, params: &PolicyParams) -> Self {
        Self {
            vars: params.tensors().iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Gradient per slot; slots that received none are zero-filled.
    pub fn collect(&self, grads: &Gradients, params: &PolicyParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.get(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }
}

/// Output of [`forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Vector of response-token log-probabilities.
    pub logprobs: Var,
    pub trace: RoutingTrace,
    pub topk_calls: usize,
}

/// Teacher-forced forward recorded on `tape`, with the parameters taken from
/// `vars`. Matches [`super::forward_logprobs`] bit for bit under the same
/// profile and options.
pub fn forward_tape(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    tokens: &[u32],
    prompt_len: usize,
    engine: &EngineProfile,
    opts: &ForwardOptions<'_>,
) -> Result<TapeForward> {
    check_sequence(params, tokens, prompt_len, opts)?;
    let c = *params.config();
    let lay = params.layout();
    if vars.vars.len() != params.tensors().len() {
        return Err(Error::Invalid("parameter variables do not match the layout".into()));
    }
    let n = tokens.len();
    let d = c.d_model;
    let dense = engine.reduction(Site::Dense);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pe: Vec<f64> = (0..n).flat_map(|p| positional_row(p, d)).collect();
    let x = tape.embedding(vars.vars[lay.embed], &ids)?;
    let mut x = tape.add_const(x, &pe)?;
    let positions: Vec<usize> = (0..n).collect();
    let routes: Vec<RowRoute<'_>> = (0..n)
        .map(|t| match opts.forced(t, prompt_len) {
            Some(token_masks) => RowRoute::Replay(token_masks),
            None => RowRoute::Standard,
        })
        .collect();
    let mut trace_idx: Vec<u16> = alloc::vec![0; n * c.layers * c.top_k];
    let mut topk_calls = 0;
    for (l, b) in lay.blocks.iter().enumerate() {
        let v = |s: usize| vars.vars[s];
        let xn = tape.rmsnorm(x, v(b.attn_norm))?;
        let q = tape.matmul(xn, v(b.wq), dense)?;
        let k = tape.matmul(xn, v(b.wk), dense)?;
        let vv = tape.matmul(xn, v(b.wv), dense)?;
        let a = tape.causal_attention(q, k, vv, c.heads, engine.softmax)?;
        let o = tape.matmul(a, v(b.wo), dense)?;
        x = tape.add(x, o)?;
        let xn = tape.rmsnorm(x, v(b.moe_norm))?;
        let layer_routes: Vec<RowRoute<'_>> = routes
            .iter()
            .map(|r| match r {
                RowRoute::Replay(tm) => RowRoute::Replay(&tm[l * c.top_k..(l + 1) * c.top_k]),
                RowRoute::Standard => RowRoute::Standard,
            })
            .collect();
        let ev: Vec<ExpertVars> = b
            .experts
            .iter()
            .map(|e| ExpertVars {
                w1: v(e.w1),
                b1: v(e.b1),
                w2: v(e.w2),
                b2: v(e.b2),
            })
            .collect();
        let out = moe::moe_forward_tape(tape, xn, v(b.router), &ev, c.top_k, &layer_routes, engine, &positions, l)?;
        topk_calls += out.selected_locally;
        for (t, mk) in out.masks.iter().enumerate() {
            let start = (t * c.layers + l) * c.top_k;
            trace_idx[start..start + c.top_k].copy_from_slice(mk.selected());
        }
        x = tape.add(x, out.output)?;
    }
    let xf = tape.rmsnorm(x, vars.vars[lay.final_norm])?;
    let mut logits = tape.matmul(xf, vars.vars[lay.lm_head], dense)?;
    if opts.temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / opts.temperature)?;
    }
    let lp = tape.log_softmax(logits, engine.softmax)?;
    let entries: Vec<(usize, usize)> = (prompt_len - 1..n - 1).map(|t| (t, tokens[t + 1] as usize)).collect();
    let logprobs = tape.pick(lp, &entries)?;
    let masks = super::MaskTable::from_indices(c.layers, c.experts, c.top_k, trace_idx)?;
    Ok(TapeForward {
        logprobs,
        trace: RoutingTrace::new(tokens.to_vec(), masks)?,
        topk_calls,
    })
}

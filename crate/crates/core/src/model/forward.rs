use alloc::vec;
use alloc::vec::Vec;

use super::{PolicyParams, RoutingTrace};
use crate::engine::{self, EngineProfile, Site};
use crate::error::{shape_err, Error, Result};
use crate::moe::{self, RouteMode, RoutingMask};

/// Sinusoidal position encoding for one position.
pub fn positional_row(pos: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = libm::pow(10000.0, -((2 * i) as f64) / d as f64);
        let a = pos as f64 * freq;
        out[2 * i] = libm::sin(a);
        out[2 * i + 1] = libm::cos(a);
    }
    out
}

/// Logits divided by the temperature. `t == 1` leaves them untouched.
pub(crate) fn tempered(logits: &mut [f64], temperature: f64) {
    if temperature != 1.0 {
        let c = 1.0 / temperature;
        for v in logits {
            *v *= c;
        }
    }
}

pub(crate) fn entropy_of_logprobs(logp: &[f64]) -> f64 {
    let mut h = 0.0;
    for &l in logp {
        let p = libm::exp(l);
        if p > 0.0 {
            h -= p * l;
        }
    }
    h
}

/// Incremental forward with a key/value cache. Each call to [`step`]
/// processes exactly one token at the next position.
///
/// [`step`]: InferenceSession::step
pub struct InferenceSession<'a> {
    params: &'a PolicyParams,
    profile: &'a EngineProfile,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    trace: RoutingTrace,
    topk_calls: usize,
}

impl<'a> InferenceSession<'a> {
    pub fn new(params: &'a PolicyParams, profile: &'a EngineProfile) -> Self {
        let c = params.config();
        Self {
            params,
            profile,
            keys: vec![Vec::new(); c.layers],
            values: vec![Vec::new(); c.layers],
            trace: RoutingTrace::empty(c.layers, c.experts, c.top_k),
            topk_calls: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.trace.len()
    }

    /// Number of top-k selections performed so far (replayed layers do not
    /// select).
    pub fn topk_calls(&self) -> usize {
        self.topk_calls
    }

    pub fn trace(&self) -> &RoutingTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RoutingTrace {
        self.trace
    }

    /// Feed `token`; `replay` optionally supplies this position's masks for
    /// every layer (`layers * top_k` ascending indices). Returns the raw
    /// next-token logits.
    pub fn step(&mut self, token: u32, replay: Option<&[u16]>) -> Result<Vec<f64>> {
        let p = self.params;
        let c = *p.config();
        let lay = p.layout();
        let pos = self.position();
        if pos >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: c.max_seq_len,
            });
        }
        if token as usize >= c.vocab {
            return Err(shape_err("step", alloc::format!("token {token} outside vocabulary {}", c.vocab)));
        }
        if let Some(r) = replay {
            if r.len() != c.layers * c.top_k {
                return Err(Error::TraceMismatch);
            }
        }
        let d = c.d_model;
        let dense = self.profile.reduction(Site::Dense);
        let style = self.profile.softmax;
        let emb = &p.tensor(lay.embed).data()[token as usize * d..(token as usize + 1) * d];
        let pe = positional_row(pos, d);
        let mut x: Vec<f64> = emb.iter().zip(&pe).map(|(e, q)| e + q).collect();
        let mut xn = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut token_masks: Vec<u16> = Vec::with_capacity(c.layers * c.top_k);
        for (l, b) in lay.blocks.iter().enumerate() {
            engine::rmsnorm_row(&x, p.tensor(b.attn_norm).data(), &mut xn);
            engine::vecmat(&xn, p.tensor(b.wq).data(), d, dense, &mut q);
            engine::vecmat(&xn, p.tensor(b.wk).data(), d, dense, &mut k);
            engine::vecmat(&xn, p.tensor(b.wv).data(), d, dense, &mut v);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let mut probs = vec![0.0; c.heads * (pos + 1)];
            engine::attend_row(&q, &self.keys[l], &self.values[l], c.heads, style, &mut att, &mut probs);
            engine::vecmat(&att, p.tensor(b.wo).data(), d, dense, &mut o);
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
            engine::rmsnorm_row(&x, p.tensor(b.moe_norm).data(), &mut xn);
            let forced;
            let mode = match replay {
                Some(r) => {
                    forced = RoutingMask::from_indices(c.experts, &r[l * c.top_k..(l + 1) * c.top_k])?;
                    RouteMode::Replay(&forced)
                }
                None => RouteMode::Standard,
            };
            let row = moe::moe_forward_row(&xn, p.router_view(l), &p.expert_views(l), mode, self.profile, Some((pos, l)))?;
            if row.selected_locally {
                self.topk_calls += 1;
            }
            for (a, b) in x.iter_mut().zip(&row.output) {
                *a += b;
            }
            token_masks.extend_from_slice(row.mask.selected());
        }
        self.trace.push(token, &token_masks);
        engine::rmsnorm_row(&x, p.tensor(lay.final_norm).data(), &mut xn);
        let mut logits = vec![0.0; c.vocab];
        engine::vecmat(&xn, p.tensor(lay.lm_head).data(), c.vocab, dense, &mut logits);
        Ok(logits)
    }
}

/// Options shared by the tape-free and taped teacher-forced forwards.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    /// Masks to force. The trace's tokens must be a prefix of the input.
    pub replay: Option<&'a RoutingTrace>,
    /// Replay prompt positions too (otherwise only response positions).
    pub replay_prompt: bool,
    pub temperature: f64,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            replay: None,
            replay_prompt: true,
            temperature: 1.0,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn replaying(trace: &'a RoutingTrace) -> Self {
        Self {
            replay: Some(trace),
            ..Self::default()
        }
    }

    /// Masks forced at position `t`, if any.
    pub(crate) fn forced(&self, t: usize, prompt_len: usize) -> Option<&'a [u16]> {
        let r = self.replay?;
        (t < r.len() && (self.replay_prompt || t >= prompt_len)).then(|| r.masks().token(t))
    }
}

/// Teacher-forced forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Log-probability of each response token.
    pub logprobs: Vec<f64>,
    /// Entropy of the next-token distribution at each response position.
    pub entropies: Vec<f64>,
    /// Masks actually used at every position.
    pub trace: RoutingTrace,
    pub topk_calls: usize,
}

pub(crate) fn check_sequence(params: &PolicyParams, tokens: &[u32], prompt_len: usize, opts: &ForwardOptions<'_>) -> Result<()> {
    let c = params.config();
    if tokens.is_empty() || prompt_len == 0 || prompt_len > tokens.len() {
        return Err(Error::Invalid("prompt must be nonempty and within the sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: c.max_seq_len,
        });
    }
    if let Some(r) = opts.replay {
        let m = r.masks();
        if !r.is_prefix_of(tokens) || m.layers() != c.layers || m.experts() != c.experts || m.top_k() != c.top_k {
            return Err(Error::TraceMismatch);
        }
    }
    Ok(())
}

/// Teacher-forced forward over `tokens` (prompt of `prompt_len` tokens
/// followed by the response) without a tape.
pub fn forward_logprobs(
    tokens: &[u32],
    prompt_len: usize,
    params: &PolicyParams,
    engine: &EngineProfile,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    check_sequence(params, tokens, prompt_len, opts)?;
    let mut session = InferenceSession::new(params, engine);
    let mut logprobs = Vec::with_capacity(tokens.len() - prompt_len);
    let mut entropies = Vec::with_capacity(tokens.len() - prompt_len);
    let mut lp = vec![0.0; params.config().vocab];
    for (t, &tok) in tokens.iter().enumerate() {
        let mut logits = session.step(tok, opts.forced(t, prompt_len))?;
        if t + 1 >= prompt_len && t + 1 < tokens.len() {
            tempered(&mut logits, opts.temperature);
            engine::log_softmax_row(&logits, engine.softmax, &mut lp);
            logprobs.push(lp[tokens[t + 1] as usize]);
            entropies.push(entropy_of_logprobs(&lp));
        }
    }
    let topk_calls = session.topk_calls();
    Ok(ForwardOutput {
        logprobs,
        entropies,
        trace: session.into_trace(),
        topk_calls,
    })
}

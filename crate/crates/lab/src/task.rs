//! The sorting task: the prompt is a random symbol string followed by a
//! separator, and the correct response is the same symbols in ascending
//! order followed by an end token.

use std::collections::BTreeSet;

use r3_core::rng;
use r3_core::rl::SftExample;

const PROMPT_STREAM: u64 = 0x7072_6f6d;
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Number of sortable symbols; ids `0..alphabet`.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub eval_prompts: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            alphabet: 30,
            min_len: 4,
            max_len: 8,
            seed: 7,
            eval_prompts: 256,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.alphabet < 2 {
            return Err("alphabet needs at least two symbols".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err("need 1 <= min_len <= max_len".into());
        }
        if self.eval_prompts == 0 {
            return Err("eval_prompts must be positive".into());
        }
        Ok(())
    }

    pub fn sep(&self) -> u32 {
        self.alphabet as u32
    }

    pub fn eos(&self) -> u32 {
        self.alphabet as u32 + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet + 2
    }

    /// Longest prompt plus longest correct response.
    pub fn max_sequence_len(&self) -> usize {
        2 * (self.max_len + 1)
    }

    /// Response budget: long enough for any correct answer.
    pub fn max_new_tokens(&self) -> usize {
        self.max_len + 1
    }
}

/// Prompt generator with a disjoint held-out evaluation set.
#[derive(Debug, Clone)]
pub struct SortTask {
    cfg: TaskConfig,
    eval: Vec<Vec<u32>>,
    held_out: BTreeSet<Vec<u32>>,
}

impl SortTask {
    pub fn new(cfg: TaskConfig) -> Self {
        let mut held_out = BTreeSet::new();
        let mut eval = Vec::with_capacity(cfg.eval_prompts);
        let mut i = 0;
        while eval.len() < cfg.eval_prompts {
            let p = draw(&cfg, EVAL_STREAM, i);
            i += 1;
            if held_out.insert(p.clone()) {
                eval.push(p);
            }
        }
        Self { cfg, eval, held_out }
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn eval_prompts(&self) -> &[Vec<u32>] {
        &self.eval
    }

    /// The `index`-th training prompt; never one of the evaluation prompts.
    pub fn train_prompt(&self, index: u64) -> Vec<u32> {
        let mut attempt = 0;
        loop {
            let p = draw(&self.cfg, PROMPT_STREAM, rng::hash3(index, attempt, 0));
            if !self.held_out.contains(&p) {
                return p;
            }
            attempt += 1;
        }
    }

    /// The correct response to `prompt`, end token included.
    pub fn answer(&self, prompt: &[u32]) -> Vec<u32> {
        let sep = self.cfg.sep();
        let mut body: Vec<u32> = prompt.iter().copied().filter(|&t| t != sep).collect();
        body.sort_unstable();
        body.push(self.cfg.eos());
        body
    }

    pub fn reward(&self, prompt: &[u32], response: &[u32]) -> f64 {
        if response == self.answer(prompt).as_slice() {
            1.0
        } else {
            0.0
        }
    }

    pub fn sft_example(&self, prompt: Vec<u32>) -> SftExample {
        let answer = self.answer(&prompt);
        let prompt_len = prompt.len();
        let mut tokens = prompt;
        tokens.extend(answer);
        SftExample { tokens, prompt_len }
    }
}

fn draw(cfg: &TaskConfig, stream: u64, index: u64) -> Vec<u32> {
    let key = rng::hash3(cfg.seed, stream, index);
    let span = (cfg.max_len - cfg.min_len + 1) as f64;
    let len = cfg.min_len + ((rng::uniform(key, 0, 0) * span) as usize).min(cfg.max_len - cfg.min_len);
    let mut p: Vec<u32> = (0..len)
        .map(|j| ((rng::uniform(key, 1, j as u64) * cfg.alphabet as f64) as u32).min(cfg.alphabet as u32 - 1))
        .collect();
    p.push(cfg.sep());
    p
}

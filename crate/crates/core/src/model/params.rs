use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::moe::{ExpertView, RouterView};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub moe_norm: usize,
    pub router: usize,
    pub experts: Vec<ExpertSlots>,
}

/// Index of every parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub blocks: Vec<BlockSlots>,
    pub final_norm: usize,
    pub lm_head: usize,
}

impl Layout {
    /// Layout plus `(name, shape)` for each slot, in canonical order.
    pub fn for_config(cfg: &ModelConfig) -> (Self, Vec<(String, Vec<usize>)>) {
        let (v, d, h, m) = (cfg.vocab, cfg.d_model, cfg.expert_hidden, cfg.experts);
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot = |name: String, shape: Vec<usize>| {
            specs.push((name, shape));
            specs.len() - 1
        };
        let embed = slot("embed".into(), vec![v, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let attn_norm = slot(p("attn_norm"), vec![d]);
            let wq = slot(p("wq"), vec![d, d]);
            let wk = slot(p("wk"), vec![d, d]);
            let wv = slot(p("wv"), vec![d, d]);
            let wo = slot(p("wo"), vec![d, d]);
            let moe_norm = slot(p("moe_norm"), vec![d]);
            let router = slot(p("router"), vec![d, m]);
            let experts = (0..m)
                .map(|e| ExpertSlots {
                    w1: slot(p(&format!("experts.{e}.w1")), vec![d, h]),
                    b1: slot(p(&format!("experts.{e}.b1")), vec![h]),
                    w2: slot(p(&format!("experts.{e}.w2")), vec![h, d]),
                    b2: slot(p(&format!("experts.{e}.b2")), vec![d]),
                })
                .collect();
            blocks.push(BlockSlots {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                moe_norm,
                router,
                experts,
            });
        }
        let final_norm = slot("final_norm".into(), vec![d]);
        let lm_head = slot("lm_head".into(), vec![d, v]);
        (
            Self {
                embed,
                blocks,
                final_norm,
                lm_head,
            },
            specs,
        )
    }
}

/// Scales applied on top of the fan-in initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    pub router_scale: f64,
    pub expert_out_scale: f64,
    pub lm_head_scale: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            router_scale: 1.0,
            expert_out_scale: 1.0,
            lm_head_scale: 1.0,
        }
    }
}

/// All parameters of the policy transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl PolicyParams {
    pub fn init(config: ModelConfig, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::for_config(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut tensors: Vec<Tensor> = specs.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let mut fill = |t: &mut Tensor, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in t.data_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        let d = config.d_model as f64;
        let h = config.expert_hidden as f64;
        let depth = (2 * config.layers) as f64;
        fill(&mut tensors[layout.embed], 1.0);
        for b in &layout.blocks {
            tensors[b.attn_norm].data_mut().fill(1.0);
            tensors[b.moe_norm].data_mut().fill(1.0);
            for w in [b.wq, b.wk, b.wv] {
                fill(&mut tensors[w], 1.0 / libm::sqrt(d));
            }
            fill(&mut tensors[b.wo], 1.0 / libm::sqrt(d * depth));
            fill(&mut tensors[b.router], opts.router_scale / libm::sqrt(d));
            for e in &b.experts {
                fill(&mut tensors[e.w1], 1.0 / libm::sqrt(d));
                fill(&mut tensors[e.w2], opts.expert_out_scale / libm::sqrt(h * depth));
            }
        }
        tensors[layout.final_norm].data_mut().fill(1.0);
        fill(&mut tensors[layout.lm_head], opts.lm_head_scale / libm::sqrt(d));
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            tensors,
            layout,
        })
    }

    /// Rebuild from tensors in canonical order (e.g. a decoded checkpoint).
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::for_config(&config);
        if named.len() != specs.len() {
            return Err(shape_err("params", format!("{} tensors for {} slots", named.len(), specs.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(specs) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(shape_err("params", format!("slot {want} {:?} got {name} {:?}", shape, t.shape())));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn router_view(&self, layer: usize) -> RouterView<'_> {
        let b = &self.layout.blocks[layer];
        RouterView {
            weight: self.tensors[b.router].data(),
            d: self.config.d_model,
            m: self.config.experts,
            k: self.config.top_k,
        }
    }

    pub fn expert_views(&self, layer: usize) -> Vec<ExpertView<'_>> {
        self.layout.blocks[layer]
            .experts
            .iter()
            .map(|e| ExpertView {
                w1: self.tensors[e.w1].data(),
                b1: self.tensors[e.b1].data(),
                w2: self.tensors[e.w2].data(),
                b2: self.tensors[e.b2].data(),
                d: self.config.d_model,
                h: self.config.expert_hidden,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// 64-bit tag over every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::hash3(self.tensors.len() as u64, self.num_scalars() as u64, 0x636b_7074);
        for (i, t) in self.tensors.iter().enumerate() {
            for v in t.data() {
                h = crate::rng::hash3(h, i as u64, v.to_bits());
            }
        }
        h
    }
}

/// Frozen copy of the parameters, shareable across rollout workers.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    id: u64,
    params: Arc<PolicyParams>,
}

impl PolicySnapshot {
    pub fn new(id: u64, params: &PolicyParams) -> Self {
        Self {
            id,
            params: Arc::new(params.clone()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl core::ops::Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

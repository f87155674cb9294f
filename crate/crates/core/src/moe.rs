//! Mixture-of-experts feed-forward layer.
//!
//! A router projects the token's hidden vector to one logit per expert, the
//! top `K` experts are selected into a binary mask, softmax over the
//! selected logits gives the gate weights, and the output is the
//! gate-weighted sum of the selected experts. In replay mode the mask is
//! supplied from outside (typically captured by the inference engine) while
//! the gates are still a softmax over the *local* router logits, so gradient
//! reaches the router weights.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::engine::{self, EngineProfile, Reduction, Site};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// K-of-M expert selection, stored as ascending expert indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingMask {
    num_experts: usize,
    selected: Vec<u16>,
}

impl RoutingMask {
    /// Build from ascending or unordered indices; duplicates are rejected.
    pub fn from_indices(num_experts: usize, indices: &[u16]) -> Result<Self> {
        let mut selected = indices.to_vec();
        selected.sort_unstable();
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate expert in mask".into()));
        }
        if selected.iter().any(|&i| i as usize >= num_experts) {
            return Err(Error::Invalid("expert index out of range".into()));
        }
        Ok(Self { num_experts, selected })
    }

    pub fn from_binary(bits: &[bool]) -> Result<Self> {
        let idx: Vec<u16> = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u16)
            .collect();
        Self::from_indices(bits.len(), &idx)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn selected(&self) -> &[u16] {
        &self.selected
    }

    pub fn count(&self) -> usize {
        self.selected.len()
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.selected.binary_search(&(expert as u16)).is_ok()
    }

    pub fn to_binary(&self) -> Vec<bool> {
        let mut bits = vec![false; self.num_experts];
        for &i in &self.selected {
            bits[i as usize] = true;
        }
        bits
    }

    /// Check length and population against a layer with `m` experts, top-`k`.
    pub fn validate(&self, m: usize, k: usize) -> Result<()> {
        if self.num_experts != m {
            return Err(shape_err("routing mask", alloc::format!("length {} for {} experts", self.num_experts, m)));
        }
        if self.count() != k {
            return Err(Error::MaskPopulation {
                expected: k,
                found: self.count(),
            });
        }
        Ok(())
    }
}

/// Masks used by one layer, one per processed token; logits are kept only
/// when requested.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub masks: Vec<RoutingMask>,
    pub logits: Option<Vec<Vec<f64>>>,
}

/// Select the `k` largest logits. Ties go to the lower expert index.
pub fn topk_mask(s: &[f64], k: usize) -> Result<RoutingMask> {
    let m = s.len();
    if k == 0 || k > m {
        return Err(Error::TopK { k, m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    // total_cmp keeps this a total order even for signed zeros
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let picked: Vec<u16> = order[..k].iter().map(|&i| i as u16).collect();
    RoutingMask::from_indices(m, &picked)
}

/// Router weight `W_r` (d×M) and the number of experts to select.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub weight: Tensor,
    pub top_k: usize,
}

impl RouterParams {
    pub fn new(weight: Tensor, top_k: usize) -> Result<Self> {
        let (_, m) = weight.dims2()?;
        if top_k == 0 || top_k > m {
            return Err(Error::TopK { k: top_k, m });
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite("router weight"));
        }
        Ok(Self { weight, top_k })
    }

    pub fn view(&self) -> RouterView<'_> {
        let (d, m) = self.weight.dims2().expect("router weight is rank 2");
        RouterView {
            weight: self.weight.data(),
            d,
            m,
            k: self.top_k,
        }
    }
}

/// One expert: `d → h → d` perceptron with a SiLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Expert {
    pub fn view(&self) -> ExpertView<'_> {
        let (d, h) = self.w1.dims2().expect("w1 is rank 2");
        ExpertView {
            w1: self.w1.data(),
            b1: self.b1.data(),
            w2: self.w2.data(),
            b2: self.b2.data(),
            d,
            h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub experts: Vec<Expert>,
}

impl ExpertParams {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::Invalid("no experts".into()));
        };
        let shapes = |e: &Expert| {
            (
                e.w1.shape().to_vec(),
                e.b1.shape().to_vec(),
                e.w2.shape().to_vec(),
                e.b2.shape().to_vec(),
            )
        };
        let reference = shapes(first);
        if experts.iter().any(|e| shapes(e) != reference) {
            return Err(shape_err("experts", "expert shapes differ"));
        }
        Ok(Self { experts })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RouterView<'a> {
    pub weight: &'a [f64],
    pub d: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertView<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub d: usize,
    pub h: usize,
}

impl ExpertView<'_> {
    pub fn forward_row(&self, x: &[f64], red: Reduction) -> Vec<f64> {
        let mut hidden = vec![0.0; self.h];
        engine::vecmat(x, self.w1, self.h, red, &mut hidden);
        for (v, b) in hidden.iter_mut().zip(self.b1) {
            *v = engine::silu(*v + b);
        }
        let mut out = vec![0.0; self.d];
        engine::vecmat(&hidden, self.w2, self.d, red, &mut out);
        for (v, b) in out.iter_mut().zip(self.b2) {
            *v += b;
        }
        out
    }
}

/// `x · W_r` under the profile's router arithmetic (no jitter).
pub fn router_logits(x: &[f64], params: &RouterParams, profile: &EngineProfile) -> Result<Vec<f64>> {
    let view = params.view();
    if x.len() != view.d {
        return Err(shape_err("router_logits", alloc::format!("input {} for width {}", x.len(), view.d)));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("router input"));
    }
    Ok(router_logits_at(x, view, profile, None))
}

/// Router logits for the token at `(position, layer)`, including the
/// profile's keyed jitter when `at` is given.
pub fn router_logits_at(
    x: &[f64],
    router: RouterView<'_>,
    profile: &EngineProfile,
    at: Option<(usize, usize)>,
) -> Vec<f64> {
    let mut logits = vec![0.0; router.m];
    engine::vecmat(x, router.weight, router.m, profile.reduction(Site::Router), &mut logits);
    if let Some((pos, layer)) = at {
        if let Some(j) = profile.router_jitter(pos, layer, router.m) {
            for (l, o) in logits.iter_mut().zip(&j) {
                *l += o;
            }
        }
    }
    logits
}

/// How a layer picks its experts.
#[derive(Debug, Clone, Copy)]
pub enum RouteMode<'a> {
    Standard,
    Replay(&'a RoutingMask),
}

/// Result of routing one token through one layer.
#[derive(Debug, Clone)]
pub struct RowOutput {
    pub output: Vec<f64>,
    pub mask: RoutingMask,
    pub gates: Vec<f64>,
    pub logits: Vec<f64>,
    /// Whether top-k selection ran (false in replay).
    pub selected_locally: bool,
}

/// One token through one MoE layer. Only the selected experts are evaluated,
/// in ascending index order.
pub fn moe_forward_row(
    x: &[f64],
    router: RouterView<'_>,
    experts: &[ExpertView<'_>],
    mode: RouteMode<'_>,
    profile: &EngineProfile,
    at: Option<(usize, usize)>,
) -> Result<RowOutput> {
    let logits = router_logits_at(x, router, profile, at);
    let (mask, selected_locally) = match mode {
        RouteMode::Standard => (topk_mask(&logits, router.k)?, true),
        RouteMode::Replay(m) => {
            m.validate(router.m, router.k)?;
            (m.clone(), false)
        }
    };
    let mut gates = vec![0.0; router.m];
    engine::masked_softmax_row(&logits, &mask.to_binary(), profile.softmax, &mut gates)?;
    let red = profile.reduction(Site::Expert);
    let mut output = vec![0.0; router.d];
    for &e in mask.selected() {
        let y = experts[e as usize].forward_row(x, red);
        let g = gates[e as usize];
        for (o, v) in output.iter_mut().zip(&y) {
            *o += g * v;
        }
    }
    Ok(RowOutput {
        output,
        mask,
        gates,
        logits,
        selected_locally,
    })
}

/// Single-vector MoE forward on owned parameters. With `capture`, the mask
/// actually used is returned as a one-token [`LayerTrace`].
pub fn moe_forward(
    x: &[f64],
    router: &RouterParams,
    experts: &ExpertParams,
    mode: RouteMode<'_>,
    capture: bool,
    profile: &EngineProfile,
) -> Result<(Vec<f64>, Option<LayerTrace>)> {
    let view = router.view();
    if x.len() != view.d {
        return Err(shape_err("moe_forward", alloc::format!("input {} for width {}", x.len(), view.d)));
    }
    if experts.experts.len() != view.m {
        return Err(shape_err("moe_forward", "expert count differs from router width"));
    }
    let views: Vec<ExpertView<'_>> = experts.experts.iter().map(Expert::view).collect();
    let row = moe_forward_row(x, view, &views, mode, profile, None)?;
    let trace = capture.then(|| LayerTrace {
        masks: vec![row.mask.clone()],
        logits: Some(vec![row.logits.clone()]),
    });
    Ok((row.output, trace))
}

/// Tape variables for one expert.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Per-row routing instruction for the taped layer.
#[derive(Debug, Clone, Copy)]
pub enum RowRoute<'a> {
    Standard,
    Replay(&'a [u16]),
}

/// Output of [`moe_forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeMoeOutput {
    pub output: Var,
    pub masks: Vec<RoutingMask>,
    pub gates: Var,
    /// Rows that ran top-k selection.
    pub selected_locally: usize,
}

/// MoE layer over `x [n,d]` recorded on a tape. `positions[i]` is the
/// absolute sequence position of row `i` (it keys the router jitter).
/// Per row the arithmetic is identical to [`moe_forward_row`].
#[allow(clippy::too_many_arguments)]
pub fn moe_forward_tape(
    tape: &mut Tape,
    x: Var,
    router: Var,
    experts: &[ExpertVars],
    top_k: usize,
    routes: &[RowRoute<'_>],
    profile: &EngineProfile,
    positions: &[usize],
    layer: usize,
) -> Result<TapeMoeOutput> {
    let (n, d) = tape.value(x).dims2()?;
    let (_, m) = tape.value(router).dims2()?;
    if routes.len() != n || positions.len() != n || experts.len() != m {
        return Err(shape_err("moe_forward_tape", "per-row inputs disagree with batch"));
    }
    let mut logits = tape.matmul(x, router, profile.reduction(Site::Router))?;
    if profile.jitter != 0.0 {
        let mut offsets = Vec::with_capacity(n * m);
        for &p in positions {
            offsets.extend(profile.router_jitter(p, layer, m).unwrap_or_else(|| vec![0.0; m]));
        }
        logits = tape.add_const(logits, &offsets)?;
    }
    let mut masks = Vec::with_capacity(n);
    let mut selected_locally = 0;
    {
        let lv = tape.value(logits);
        for (i, route) in routes.iter().enumerate() {
            let mask = match route {
                RowRoute::Standard => {
                    selected_locally += 1;
                    topk_mask(lv.row(i), top_k)?
                }
                RowRoute::Replay(idx) => {
                    let mk = RoutingMask::from_indices(m, idx)?;
                    mk.validate(m, top_k)?;
                    mk
                }
            };
            masks.push(mask);
        }
    }
    let bits: Vec<bool> = masks.iter().flat_map(|mk| mk.to_binary()).collect();
    let gates = tape.masked_softmax(logits, &bits, profile.softmax)?;
    let red = profile.reduction(Site::Expert);
    let mut out = tape.constant(Tensor::zeros(&[n, d]));
    for (e, ev) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| masks[i].contains(e)).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let h = tape.matmul(xe, ev.w1, red)?;
        let h = tape.add_bias(h, ev.b1)?;
        let h = tape.silu(h)?;
        let y = tape.matmul(h, ev.w2, red)?;
        let y = tape.add_bias(y, ev.b2)?;
        let entries: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let g = tape.pick(gates, &entries)?;
        let y = tape.scale_rows(y, g)?;
        out = tape.scatter_add_rows(out, y, &rows)?;
    }
    Ok(TapeMoeOutput {
        output: out,
        masks,
        gates,
        selected_locally,
    })
}

#[cfg(test)]
mod tests;

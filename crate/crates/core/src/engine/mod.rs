//! Engine profiles: a deterministic description of how one engine does its
//! arithmetic. Two profiles applied to identical parameters and inputs give
//! slightly different numbers, which is enough to flip top-k router choices
//! near a tie.

mod kernels;

pub mod divergence;

use alloc::string::String;

pub use kernels::{
    attend_row, log_softmax_row, masked_softmax_row, rmsnorm_row, silu, softmax_row, vecmat,
    RMS_EPS,
};

use crate::rng;

/// Rounding applied after every product and every partial sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F64,
    F32,
    F16,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
            Precision::F16 => half::f16::from_f64(x).to_f64(),
        }
    }
}

/// Order in which a reduction visits its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SumOrder {
    LeftToRight,
    /// Recursive halving; the left half takes the extra element on odd counts.
    Pairwise,
    /// Left-to-right inside blocks of the given size, then left-to-right over
    /// the block partials.
    Blocked(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SoftmaxStyle {
    MaxSubtracted,
    Unshifted,
}

/// Which weight matmuls use the profile's precision and order. Everything
/// outside the scope runs canonical arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PerturbScope {
    /// Router and expert matmuls only.
    Moe,
    /// Every weight matmul in the model.
    All,
}

/// Where a matmul sits in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Router,
    Expert,
    Dense,
}

/// Precision plus order: everything a reduction needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reduction {
    pub precision: Precision,
    pub order: SumOrder,
}

impl Reduction {
    pub const CANONICAL: Reduction = Reduction {
        precision: Precision::F64,
        order: SumOrder::LeftToRight,
    };

    pub fn is_canonical(&self) -> bool {
        self.precision == Precision::F64 && self.order == SumOrder::LeftToRight
    }

    /// Sum under this reduction. Operands are rounded on entry.
    pub fn sum(&self, values: &[f64]) -> f64 {
        let p = self.precision;
        match self.order {
            SumOrder::LeftToRight => left_to_right(values, p),
            SumOrder::Pairwise => pairwise(values, p),
            SumOrder::Blocked(b) => {
                let b = b.max(1);
                let mut total = 0.0;
                for chunk in values.chunks(b) {
                    total = p.round(total + left_to_right(chunk, p));
                }
                total
            }
        }
    }
}

fn left_to_right(values: &[f64], p: Precision) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc = p.round(acc + p.round(v));
    }
    acc
}

fn pairwise(values: &[f64], p: Precision) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => p.round(values[0]),
        n => {
            let mid = n.div_ceil(2);
            p.round(pairwise(&values[..mid], p) + pairwise(&values[mid..], p))
        }
    }
}

/// One engine's numerical behavior. A profile is a pure function of its
/// fields: the same profile always produces bit-identical forwards.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EngineProfile {
    pub name: String,
    pub precision: Precision,
    pub order: SumOrder,
    pub softmax: SoftmaxStyle,
    pub scope: PerturbScope,
    /// Half-width of the uniform jitter added to router logits.
    pub jitter: f64,
    pub seed: u64,
    /// When set, `run` is folded into the jitter key so repeated forwards of
    /// the same input disagree.
    pub run_indexed: bool,
    pub run: u64,
}

impl EngineProfile {
    pub fn canonical() -> Self {
        Self {
            name: "canonical".into(),
            precision: Precision::F64,
            order: SumOrder::LeftToRight,
            softmax: SoftmaxStyle::MaxSubtracted,
            scope: PerturbScope::Moe,
            jitter: 0.0,
            seed: 0,
            run_indexed: false,
            run: 0,
        }
    }

    /// The default training-side profile: blocked f32 accumulation in the
    /// router and expert matmuls plus a small router-logit jitter.
    pub fn default_training() -> Self {
        Self {
            name: "training".into(),
            precision: Precision::F32,
            order: SumOrder::Blocked(8),
            softmax: SoftmaxStyle::MaxSubtracted,
            scope: PerturbScope::Moe,
            jitter: 3e-2,
            seed: 0x74_7261_696e,
            run_indexed: false,
            run: 0,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_jitter(mut self, delta: f64) -> Self {
        self.jitter = delta;
        self
    }

    /// The profile used for the `run`-th repetition of a forward.
    pub fn for_run(&self, run: u64) -> Self {
        let mut p = self.clone();
        p.run = run;
        p
    }

    pub fn is_canonical(&self) -> bool {
        self.precision == Precision::F64
            && self.order == SumOrder::LeftToRight
            && self.softmax == SoftmaxStyle::MaxSubtracted
            && self.jitter == 0.0
    }

    /// Arithmetic for a matmul at `site`.
    pub fn reduction(&self, site: Site) -> Reduction {
        let perturbed = match (self.scope, site) {
            (PerturbScope::All, _) => true,
            (PerturbScope::Moe, Site::Router | Site::Expert) => true,
            (PerturbScope::Moe, Site::Dense) => false,
        };
        if perturbed {
            Reduction {
                precision: self.precision,
                order: self.order,
            }
        } else {
            Reduction::CANONICAL
        }
    }

    fn jitter_key(&self) -> u64 {
        let run = if self.run_indexed { self.run.wrapping_add(1) } else { 0 };
        rng::hash3(self.seed, run, 0x6a69_7474_6572)
    }

    /// Router-logit offsets for one `(position, layer)`, or `None` when the
    /// profile carries no jitter.
    pub fn router_jitter(&self, position: usize, layer: usize, experts: usize) -> Option<alloc::vec::Vec<f64>> {
        if self.jitter == 0.0 {
            return None;
        }
        let key = self.jitter_key();
        Some(
            (0..experts)
                .map(|e| rng::symmetric(key, layer as u64, (position * experts + e) as u64, self.jitter))
                .collect(),
        )
    }

    /// Stable 64-bit tag of every field that influences numerics (the name is
    /// excluded).
    pub fn fingerprint(&self) -> u64 {
        let p = match self.precision {
            Precision::F64 => 1,
            Precision::F32 => 2,
            Precision::F16 => 3,
        };
        let o = match self.order {
            SumOrder::LeftToRight => 1,
            SumOrder::Pairwise => 2,
            SumOrder::Blocked(b) => 3 + ((b as u64) << 8),
        };
        let s = match self.softmax {
            SoftmaxStyle::MaxSubtracted => 1,
            SoftmaxStyle::Unshifted => 2,
        };
        let sc = match self.scope {
            PerturbScope::Moe => 1,
            PerturbScope::All => 2,
        };
        let mut h = rng::hash3(p, o, s);
        h = rng::hash3(h, sc, self.jitter.to_bits());
        h = rng::hash3(h, self.seed, self.run_indexed as u64);
        rng::hash3(h, self.run, 0)
    }
}

impl Default for EngineProfile {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Sum `values` under the profile's precision and order.
pub fn reduce(values: &[f64], profile: &EngineProfile) -> f64 {
    Reduction {
        precision: profile.precision,
        order: profile.order,
    }
    .sum(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn with(precision: Precision, order: SumOrder) -> EngineProfile {
        EngineProfile {
            precision,
            order,
            ..EngineProfile::canonical()
        }
    }

    #[test]
    fn canonical_small_integers() {
        assert_eq!(reduce(&[1.0, 2.0, 3.0], &EngineProfile::canonical()), 6.0);
    }

    #[test]
    fn cancellation_under_each_order() {
        // Oracle: evaluate each grouping explicitly.
        let v = [1e16, 1.0, -1e16];
        let ltr = (1e16f64 + 1.0) + -1e16;
        assert_eq!(ltr, 0.0);
        assert_eq!(reduce(&v, &with(Precision::F64, SumOrder::LeftToRight)), ltr);
        let pw = (1e16f64 + 1.0) + -1e16;
        assert_eq!(reduce(&v, &with(Precision::F64, SumOrder::Pairwise)), pw);
        let r = |x: f64| x as f32 as f64;
        let blocked = r(r(r(0.0 + r(1e16)) + r(1.0)) + r(-1e16));
        assert_eq!(blocked, 0.0);
        assert_eq!(reduce(&v, &with(Precision::F32, SumOrder::Blocked(1))), blocked);
    }

    #[test]
    fn reduced_precision_differs_from_canonical() {
        // 1 + 1e-9 is representable in f64 but absorbed in f32.
        let v = [1.0, 1e-9, 1e-9, 1e-9];
        let canon = reduce(&v, &EngineProfile::canonical());
        let lowp = reduce(&v, &with(Precision::F32, SumOrder::Blocked(1)));
        assert_eq!(canon, ((1.0 + 1e-9) + 1e-9) + 1e-9);
        assert_eq!(lowp, 1.0);
        assert_ne!(canon, lowp);
        let h = reduce(&[1.0, 1e-4], &with(Precision::F16, SumOrder::LeftToRight));
        assert_eq!(h, 1.0);
    }

    #[test]
    fn blocked_visits_blocks_then_partials() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let p = with(Precision::F64, SumOrder::Blocked(2));
        assert_eq!(reduce(&v, &p), 15.0);
        assert_eq!(reduce(&[], &p), 0.0);
    }

    #[test]
    fn jitter_keyed_and_bounded() {
        let p = EngineProfile::canonical().with_jitter(1e-3);
        let a = p.router_jitter(5, 2, 8).unwrap();
        assert_eq!(a, p.router_jitter(5, 2, 8).unwrap());
        assert_ne!(a, p.router_jitter(6, 2, 8).unwrap());
        assert!(a.iter().all(|x| x.abs() <= 1e-3));
        assert!(EngineProfile::canonical().router_jitter(0, 0, 8).is_none());
        // run index only matters when enabled
        assert_eq!(p.for_run(3).router_jitter(1, 1, 4), p.router_jitter(1, 1, 4));
        let mut q = p.clone();
        q.run_indexed = true;
        assert_ne!(q.for_run(3).router_jitter(1, 1, 4), q.for_run(4).router_jitter(1, 1, 4));
    }

    #[test]
    fn scope_limits_perturbation() {
        let t = EngineProfile::default_training();
        assert!(t.reduction(Site::Dense).is_canonical());
        assert!(!t.reduction(Site::Router).is_canonical());
        assert_ne!(t.fingerprint(), EngineProfile::canonical().fingerprint());
        assert_eq!(
            EngineProfile::canonical().named("x").fingerprint(),
            EngineProfile::canonical().fingerprint()
        );
    }
}

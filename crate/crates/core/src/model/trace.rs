use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::moe::RoutingMask;

/// Per-token, per-layer expert selections stored flat: token-major, then
/// layer, then `top_k` ascending expert indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskTable {
    layers: usize,
    experts: usize,
    top_k: usize,
    indices: Vec<u16>,
}

impl MaskTable {
    pub fn new(layers: usize, experts: usize, top_k: usize) -> Self {
        Self {
            layers,
            experts,
            top_k,
            indices: Vec::new(),
        }
    }

    /// Build from raw indices, validating every mask.
    pub fn from_indices(layers: usize, experts: usize, top_k: usize, indices: Vec<u16>) -> Result<Self> {
        let unit = layers * top_k;
        if unit == 0 || !indices.len().is_multiple_of(unit) {
            return Err(shape_err("mask table", "index count is not a multiple of layers*top_k"));
        }
        let t = Self {
            layers,
            experts,
            top_k,
            indices,
        };
        for chunk in t.indices.chunks_exact(top_k) {
            if chunk.windows(2).any(|w| w[0] >= w[1]) || chunk.iter().any(|&e| e as usize >= experts) {
                return Err(Error::Invalid("mask indices must be ascending, distinct and < experts".into()));
            }
        }
        Ok(t)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.indices.len() / (self.layers * self.top_k).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn mask(&self, token: usize, layer: usize) -> &[u16] {
        let start = (token * self.layers + layer) * self.top_k;
        &self.indices[start..start + self.top_k]
    }

    /// All layers' masks for one token.
    pub fn token(&self, token: usize) -> &[u16] {
        let unit = self.layers * self.top_k;
        &self.indices[token * unit..(token + 1) * unit]
    }

    pub fn routing_mask(&self, token: usize, layer: usize) -> RoutingMask {
        RoutingMask::from_indices(self.experts, self.mask(token, layer)).expect("table masks are valid")
    }

    /// Append one token's masks, one per layer.
    pub fn push_token(&mut self, masks: &[RoutingMask]) -> Result<()> {
        if masks.len() != self.layers {
            return Err(shape_err("mask table", "one mask per layer required"));
        }
        for m in masks {
            m.validate(self.experts, self.top_k)?;
        }
        for m in masks {
            self.indices.extend_from_slice(m.selected());
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, token_masks: &[u16]) {
        debug_assert_eq!(token_masks.len(), self.layers * self.top_k);
        self.indices.extend_from_slice(token_masks);
    }

    pub fn prefix(&self, tokens: usize) -> Self {
        let n = tokens.min(self.len()) * self.layers * self.top_k;
        Self {
            indices: self.indices[..n].to_vec(),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers == other.layers && self.experts == other.experts && self.top_k == other.top_k
    }
}

/// Routing masks bound to the token ids they were computed for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingTrace {
    tokens: Vec<u32>,
    masks: MaskTable,
}

impl RoutingTrace {
    pub fn new(tokens: Vec<u32>, masks: MaskTable) -> Result<Self> {
        if tokens.len() != masks.len() {
            return Err(Error::TraceMismatch);
        }
        Ok(Self { tokens, masks })
    }

    pub fn empty(layers: usize, experts: usize, top_k: usize) -> Self {
        Self {
            tokens: Vec::new(),
            masks: MaskTable::new(layers, experts, top_k),
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn masks(&self) -> &MaskTable {
        &self.masks
    }

    pub fn into_parts(self) -> (Vec<u32>, MaskTable) {
        (self.tokens, self.masks)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask(&self, token: usize, layer: usize) -> &[u16] {
        self.masks.mask(token, layer)
    }

    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            tokens: self.tokens[..n].to_vec(),
            masks: self.masks.prefix(n),
        }
    }

    /// Whether this trace's tokens are a prefix of `tokens`.
    pub fn is_prefix_of(&self, tokens: &[u32]) -> bool {
        self.tokens.len() <= tokens.len() && self.tokens[..] == tokens[..self.tokens.len()]
    }

    pub(crate) fn push(&mut self, token: u32, token_masks: &[u16]) {
        self.tokens.push(token);
        self.masks.push_raw(token_masks);
    }

    /// Overwrite one token's mask at `layer` with a different valid mask;
    /// used to build negative controls.
    pub fn corrupt(&mut self, token: usize, layer: usize) {
        let (k, m) = (self.masks.top_k, self.masks.experts);
        let start = (token * self.masks.layers + layer) * k;
        let cur: Vec<u16> = self.masks.indices[start..start + k].to_vec();
        let next = (0..m as u16).find(|e| !cur.contains(e)).expect("k < m");
        let mut new = cur;
        new[0] = next;
        new.sort_unstable();
        self.masks.indices[start..start + k].copy_from_slice(&new);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn push_and_read_back() {
        let mut t = MaskTable::new(2, 4, 2);
        let a = RoutingMask::from_indices(4, &[3, 1]).unwrap();
        let b = RoutingMask::from_indices(4, &[0, 2]).unwrap();
        t.push_token(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.mask(0, 0), &[1, 3]);
        assert_eq!(t.routing_mask(0, 1), b);
        assert!(t.push_token(core::slice::from_ref(&a)).is_err());
        let wrong = RoutingMask::from_indices(4, &[0]).unwrap();
        assert!(t.push_token(&[a, wrong]).is_err());
    }

    #[test]
    fn from_indices_validates() {
        assert!(MaskTable::from_indices(1, 4, 2, vec![0, 3, 1, 2]).is_ok());
        assert!(MaskTable::from_indices(1, 4, 2, vec![3, 0]).is_err());
        assert!(MaskTable::from_indices(1, 4, 2, vec![0, 4]).is_err());
        assert!(MaskTable::from_indices(1, 4, 2, vec![0]).is_err());
    }

    #[test]
    fn trace_prefix_and_corrupt() {
        let masks = MaskTable::from_indices(1, 4, 2, vec![0, 1, 2, 3, 0, 3]).unwrap();
        let mut tr = RoutingTrace::new(vec![5, 6, 7], masks).unwrap();
        assert!(tr.is_prefix_of(&[5, 6, 7, 8]));
        assert!(!tr.is_prefix_of(&[5, 6]));
        assert_eq!(tr.prefix(2).mask(1, 0), &[2, 3]);
        tr.corrupt(0, 0);
        assert_ne!(tr.mask(0, 0), &[0, 1]);
        assert_eq!(tr.mask(0, 0).len(), 2);
        assert!(RoutingTrace::new(vec![1], MaskTable::new(1, 4, 2)).is_err());
    }
}

//! Discrepancy metrics between an inference-side and a training-side
//! computation of the same tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::engine::EngineProfile;
use crate::error::{shape_err, Error, Result};
use crate::model::{forward_logprobs, ForwardOptions, PolicyParams, RoutingTrace};

/// The two probabilities one sampled token received, stored as logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenProbRecord {
    logp_infer: f64,
    logp_train: f64,
    pub position: usize,
    pub sequence: usize,
}

fn check_logp(l: f64) -> Result<f64> {
    if l.is_finite() && l <= 0.0 {
        Ok(l)
    } else {
        Err(Error::DegenerateProbability)
    }
}

impl TokenProbRecord {
    pub fn from_logprobs(logp_infer: f64, logp_train: f64, position: usize, sequence: usize) -> Result<Self> {
        Ok(Self {
            logp_infer: check_logp(logp_infer)?,
            logp_train: check_logp(logp_train)?,
            position,
            sequence,
        })
    }

    pub fn from_probs(p_infer: f64, p_train: f64, position: usize, sequence: usize) -> Result<Self> {
        let ok = |p: f64| p > 0.0 && p <= 1.0;
        if !ok(p_infer) || !ok(p_train) {
            return Err(Error::DegenerateProbability);
        }
        Self::from_logprobs(libm::log(p_infer), libm::log(p_train), position, sequence)
    }

    pub fn logp_infer(&self) -> f64 {
        self.logp_infer
    }

    pub fn logp_train(&self) -> f64 {
        self.logp_train
    }

    pub fn p_infer(&self) -> f64 {
        libm::exp(self.logp_infer)
    }

    pub fn p_train(&self) -> f64 {
        libm::exp(self.logp_train)
    }

    /// `log(p_train / p_infer)`.
    pub fn log_ratio(&self) -> f64 {
        self.logp_train - self.logp_infer
    }

    /// The k3 term `r - 1 - log r` with `r = p_train / p_infer`.
    pub fn k3_term(&self) -> f64 {
        let x = self.log_ratio();
        libm::expm1(x) - x
    }
}

/// Records for one sequence from aligned per-token logprob lists.
pub fn records_for_sequence(logp_infer: &[f64], logp_train: &[f64], sequence: usize) -> Result<Vec<TokenProbRecord>> {
    if logp_infer.len() != logp_train.len() {
        return Err(shape_err("records", "logprob lists differ in length"));
    }
    logp_infer
        .iter()
        .zip(logp_train)
        .enumerate()
        .map(|(t, (&i, &tr))| TokenProbRecord::from_logprobs(i, tr, t, sequence))
        .collect()
}

/// Mean k3 estimate of the KL divergence between the two engines. Terms are
/// summed in sorted order so the result depends only on the record multiset.
pub fn kl_k3(records: &[TokenProbRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("kl_k3 needs at least one record".into()));
    }
    let mut terms: Vec<f64> = records.iter().map(TokenProbRecord::k3_term).collect();
    terms.sort_unstable_by(f64::total_cmp);
    let total: f64 = terms.iter().sum();
    Ok(total / records.len() as f64)
}

/// Fraction of records whose ratio or inverse ratio exceeds `tau`.
pub fn extreme_fraction(records: &[TokenProbRecord], tau: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("extreme_fraction needs at least one record".into()));
    }
    if !(tau >= 1.0) {
        return Err(Error::Invalid(format!("tau must be >= 1, got {tau}")));
    }
    let n = records.iter().filter(|r| libm::exp(libm::fabs(r.log_ratio())) > tau).count();
    Ok(n as f64 / records.len() as f64)
}

pub const TAU_GRID: [f64; 9] = [1.01, 1.05, 1.1, 1.2, 1.5, 2.0, 3.0, 5.0, 10.0];

/// `F(tau)` sampled on a grid of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCurve {
    pub points: Vec<(f64, f64)>,
}

impl TauCurve {
    pub fn compute(records: &[TokenProbRecord], grid: &[f64]) -> Result<Self> {
        let points = grid.iter().map(|&t| Ok((t, extreme_fraction(records, t)?))).collect::<Result<_>>()?;
        Ok(Self { points })
    }

    pub fn at(&self, tau: f64) -> Option<f64> {
        self.points.iter().find(|(t, _)| *t == tau).map(|(_, f)| *f)
    }
}

/// Granularity of a routing comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffLevel {
    Router,
    Token,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

/// Histogram of routing disagreements at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffStats {
    pub level: DiffLevel,
    pub histogram: Vec<Bucket>,
    /// Units counted: `(token, layer)` pairs, tokens or sequences.
    pub total: u64,
    pub mean: f64,
    /// Fraction of units with any disagreement.
    pub nonzero_fraction: f64,
}

fn check_pair(a: &RoutingTrace, b: &RoutingTrace) -> Result<()> {
    if a.tokens() != b.tokens() || !a.masks().same_shape(b.masks()) {
        return Err(shape_err("routing_diff", "traces cover different tokens or shapes"));
    }
    Ok(())
}

fn overlap(a: &[u16], b: &[u16]) -> usize {
    // both ascending
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `K - |A ∩ B|` for every `(token, layer)`, token-major.
pub fn router_disagreements(a: &RoutingTrace, b: &RoutingTrace) -> Result<Vec<u32>> {
    check_pair(a, b)?;
    let (l, k) = (a.masks().layers(), a.masks().top_k());
    let mut out = Vec::with_capacity(a.len() * l);
    for t in 0..a.len() {
        for layer in 0..l {
            out.push((k - overlap(a.mask(t, layer), b.mask(t, layer))) as u32);
        }
    }
    Ok(out)
}

/// Disagreements summed over layers, per token.
pub fn token_disagreements(a: &RoutingTrace, b: &RoutingTrace) -> Result<Vec<u32>> {
    let per = router_disagreements(a, b)?;
    let l = a.masks().layers();
    Ok(per.chunks(l.max(1)).map(|c| c.iter().sum()).collect())
}

fn integer_histogram(level: DiffLevel, values: &[u32], max: usize) -> DiffStats {
    let mut counts = vec![0u64; max + 1];
    for &v in values {
        counts[v as usize] += 1;
    }
    let total = values.len() as u64;
    let sum: u64 = values.iter().map(|&v| v as u64).sum();
    let nonzero = values.iter().filter(|&&v| v > 0).count();
    DiffStats {
        level,
        histogram: counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| Bucket {
                lo: i as f64,
                hi: i as f64,
                count,
            })
            .collect(),
        total,
        mean: if total == 0 { 0.0 } else { sum as f64 / total as f64 },
        nonzero_fraction: if total == 0 { 0.0 } else { nonzero as f64 / total as f64 },
    }
}

const SEQUENCE_BUCKETS: usize = 20;

fn uniform_histogram(values: &[f64]) -> DiffStats {
    let total = values.len() as u64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut histogram = Vec::new();
    if total > 0 {
        let width = (hi - lo) / SEQUENCE_BUCKETS as f64;
        let mut counts = [0u64; SEQUENCE_BUCKETS];
        for &v in values {
            let i = if width > 0.0 { (((v - lo) / width) as usize).min(SEQUENCE_BUCKETS - 1) } else { 0 };
            counts[i] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            histogram.push(Bucket {
                lo: lo + width * i as f64,
                hi: if i + 1 == SEQUENCE_BUCKETS { hi } else { lo + width * (i + 1) as f64 },
                count,
            });
        }
    }
    let nonzero = values.iter().filter(|&&v| v > 0.0).count();
    DiffStats {
        level: DiffLevel::Sequence,
        histogram,
        total,
        mean: if total == 0 { 0.0 } else { values.iter().sum::<f64>() / total as f64 },
        nonzero_fraction: if total == 0 { 0.0 } else { nonzero as f64 / total as f64 },
    }
}

/// Compare two traces of the same sequence.
pub fn routing_diff(a: &RoutingTrace, b: &RoutingTrace, level: DiffLevel) -> Result<DiffStats> {
    routing_diff_corpus(&[(a, b)], level)
}

/// Compare aligned trace pairs, one pair per sequence.
pub fn routing_diff_corpus(pairs: &[(&RoutingTrace, &RoutingTrace)], level: DiffLevel) -> Result<DiffStats> {
    let (l, k) = pairs.first().map_or((1, 1), |(a, _)| (a.masks().layers(), a.masks().top_k()));
    for (a, _) in pairs {
        if a.masks().layers() != l || a.masks().top_k() != k {
            return Err(shape_err("routing_diff", "sequences disagree on layers or top_k"));
        }
    }
    match level {
        DiffLevel::Router => {
            let mut all = Vec::new();
            for (a, b) in pairs {
                all.extend(router_disagreements(a, b)?);
            }
            Ok(integer_histogram(level, &all, k))
        }
        DiffLevel::Token => {
            let mut all = Vec::new();
            for (a, b) in pairs {
                all.extend(token_disagreements(a, b)?);
            }
            Ok(integer_histogram(level, &all, l * k))
        }
        DiffLevel::Sequence => {
            let mut means = Vec::with_capacity(pairs.len());
            for (a, b) in pairs {
                let per = token_disagreements(a, b)?;
                if !per.is_empty() {
                    means.push(per.iter().map(|&v| v as f64).sum::<f64>() / per.len() as f64);
                }
            }
            Ok(uniform_histogram(&means))
        }
    }
}

/// k3 KL between the first two of `n` repeated forwards, plus their
/// per-token records (run 1 in the `infer` slot, run 2 in `train`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub kl: f64,
    pub records: Vec<TokenProbRecord>,
}

/// Run the same teacher-forced forward `n` times, the `i`-th under
/// `engine.for_run(i)`. `sequences` holds `(tokens, prompt_len)` pairs.
pub fn repeated_forward_probe(
    params: &PolicyParams,
    engine: &EngineProfile,
    sequences: &[(Vec<u32>, usize)],
    n: usize,
) -> Result<ProbeResult> {
    if n < 2 {
        return Err(Error::Invalid("repeated forward needs n >= 2".into()));
    }
    let mut runs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let e = engine.for_run(i as u64);
        let mut per_seq = Vec::with_capacity(sequences.len());
        for (tokens, prompt) in sequences {
            per_seq.push(forward_logprobs(tokens, *prompt, params, &e, &ForwardOptions::default())?.logprobs);
        }
        runs.push(per_seq);
    }
    let mut records = Vec::new();
    for (s, (a, b)) in runs[0].iter().zip(&runs[1]).enumerate() {
        records.extend(records_for_sequence(a, b, s)?);
    }
    let kl = if records.is_empty() { 0.0 } else { kl_k3(&records)? };
    Ok(ProbeResult { kl, records })
}

/// Scatter rows as CSV text: header `p_infer,p_train`, 17 significant
/// digits per value.
pub fn scatter_csv(records: &[TokenProbRecord]) -> String {
    let mut s = String::from("p_infer,p_train\n");
    for r in records {
        let _ = writeln!(s, "{:.16e},{:.16e}", r.p_infer(), r.p_train());
    }
    s
}

/// Parse text produced by [`scatter_csv`] back into `(p_infer, p_train)`.
pub fn parse_scatter_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("p_infer,p_train") {
        return Err(Error::Invalid("missing scatter header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once(',').ok_or_else(|| Error::Invalid(format!("bad scatter row {l:?}")))?;
            let p = |v: &str| v.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {v:?}")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

//! Coded-fragment bookkeeping: sequence-number allocation, per-device
//! fragment ledgers, batch layout and the stochastic rateless decode model.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the probability of a failed decode depends on the fragment count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeModel {
    /// Failure probability 1 below `k`, 0.85 at `k`, 0.567 above `k`.
    #[default]
    Literal,
    /// Non-default variant: failure probability 0.85 * 0.567^(l - k) above `k`.
    GeometricTail,
}

pub const FAIL_AT_K: f64 = 0.85;
pub const FAIL_ABOVE_K: f64 = 0.567;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodingParams {
    pub update_bytes: u32,
    /// Largest number of downlink frames the gateway may send (`M`).
    pub max_frames: u32,
    /// Size of the sequence-number space (`M0`).
    pub max_sequence: u32,
    pub d2d_max: u32,
    pub d2d_min: u32,
    /// Scaling `c` applied to the success ratio denominator.
    pub success_scaling: f64,
    /// Number of independently coded batches.
    pub batches: u32,
    pub batch_d2d_max: u32,
    pub batch_d2d_min: u32,
    pub decode_model: DecodeModel,
}

impl Default for CodingParams {
    fn default() -> Self {
        Self {
            update_bytes: 10_000,
            max_frames: 10_000,
            max_sequence: 65_536,
            d2d_max: 25,
            d2d_min: 10,
            success_scaling: 0.25,
            batches: 1,
            batch_d2d_max: 5,
            batch_d2d_min: 2,
            decode_model: DecodeModel::Literal,
        }
    }
}

impl CodingParams {
    pub fn validate(&self, fragment_bytes: u32) -> Result<()> {
        if self.update_bytes == 0 {
            return Err(Error::config("coding.update_bytes", "must be >= 1"));
        }
        let k = self.source_fragments(fragment_bytes);
        if self.max_frames <= k {
            return Err(Error::config(
                "coding.max_frames",
                format!("must exceed the {k} source fragments"),
            ));
        }
        if !(self.success_scaling > 0.0 && self.success_scaling <= 1.0) {
            return Err(Error::config("coding.success_scaling", "must be in (0, 1]"));
        }
        if self.d2d_min > self.d2d_max {
            return Err(Error::config("coding.d2d_min", "must not exceed d2d_max"));
        }
        if self.batch_d2d_min > self.batch_d2d_max {
            return Err(Error::config(
                "coding.batch_d2d_min",
                "must not exceed batch_d2d_max",
            ));
        }
        if self.batches == 0 {
            return Err(Error::config("coding.batches", "must be >= 1"));
        }
        if self.batches > k {
            return Err(Error::config(
                "coding.batches",
                format!("cannot exceed the {k} source fragments"),
            ));
        }
        if self.max_sequence < self.max_frames {
            return Err(Error::config("coding.max_sequence", "must be >= max_frames"));
        }
        Ok(())
    }

    pub fn source_fragments(&self, fragment_bytes: u32) -> u32 {
        self.update_bytes.div_ceil(fragment_bytes.max(1))
    }

    /// D2D frame bounds `(min, max)` per decoded unit (whole update or batch).
    pub fn d2d_bounds(&self) -> (u32, u32) {
        if self.batches > 1 {
            (self.batch_d2d_min, self.batch_d2d_max)
        } else {
            (self.d2d_min, self.d2d_max)
        }
    }

    /// Sequence numbers reserved per ED.
    pub fn d2d_stride(&self) -> u32 {
        let (_, max) = self.d2d_bounds();
        max * self.batches
    }
}

/// Sequence number of downlink frame `n`.
pub fn gateway_sequence(n: u32, params: &CodingParams) -> Result<u32> {
    if n >= params.max_frames {
        return Err(Error::GatewayBudgetExhausted {
            index: n,
            max: params.max_frames,
        });
    }
    Ok(n)
}

/// Sequence number of the `frame`-th D2D frame from ED `ed`.
pub fn d2d_sequence(ed: u32, frame: u32, n_ed: u32, params: &CodingParams) -> Result<u32> {
    let stride = params.d2d_stride();
    if ed >= n_ed || frame >= stride {
        return Err(Error::SequenceOutOfRange {
            ed,
            n_ed,
            frame,
            per_ed: stride,
        });
    }
    Ok(params.max_frames + ed * stride + frame)
}

pub fn max_supported_eds(params: &CodingParams) -> u32 {
    let stride = params.d2d_stride();
    if stride == 0 {
        return u32::MAX;
    }
    params.max_sequence.saturating_sub(params.max_frames) / stride
}

pub fn decode_failure_probability(l: u32, k: u32, model: DecodeModel) -> f64 {
    use std::cmp::Ordering::*;
    match (l.cmp(&k), model) {
        (Less, _) => 1.0,
        (Equal, _) => FAIL_AT_K,
        (Greater, DecodeModel::Literal) => FAIL_ABOVE_K,
        (Greater, DecodeModel::GeometricTail) => FAIL_AT_K * FAIL_ABOVE_K.powi((l - k) as i32),
    }
}

/// One Bernoulli decode trial after the `l`-th distinct fragment arrives.
pub fn decode_attempt<R: Rng + ?Sized>(l: u32, k: u32, model: DecodeModel, rng: &mut R) -> bool {
    if l < k {
        return false;
    }
    rng.random::<f64>() >= decode_failure_probability(l, k, model)
}

pub fn batch_of_downlink_frame(n: u32, batches: u32) -> u32 {
    n % batches.max(1)
}

/// Source-fragment counts per batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    sizes: Vec<u32>,
}

impl BatchLayout {
    /// `k` fragments split into `batches` batches of `ceil(k / batches)`, the
    /// last one taking the remainder.
    pub fn new(k: u32, batches: u32) -> Self {
        let batches = batches.max(1);
        let per = k.div_ceil(batches);
        let mut sizes = Vec::with_capacity(batches as usize);
        let mut left = k;
        for b in 0..batches {
            let size = if b + 1 == batches { left } else { per.min(left) };
            sizes.push(size);
            left -= size;
        }
        Self { sizes }
    }

    pub fn batches(&self) -> u32 {
        self.sizes.len() as u32
    }

    pub fn size(&self, batch: u32) -> u32 {
        self.sizes[batch as usize]
    }

    pub fn batch_of(&self, n: u32) -> u32 {
        batch_of_downlink_frame(n, self.batches())
    }

    /// Whether the gateway has sent at least `k_batch` frames of the batch that
    /// owns frame `n` by the end of frame `n`.
    pub fn d2d_possible_after(&self, n: u32) -> bool {
        n / self.batches() + 1 >= self.size(self.batch_of(n))
    }
}

/// Distinct-fragment count, decode latch and heard D2D senders for one batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchLedger {
    received: HashSet<u32>,
    decoded: bool,
    senders: BTreeSet<u32>,
}

impl BatchLedger {
    pub fn distinct(&self) -> u32 {
        self.received.len() as u32
    }

    pub fn is_decoded(&self) -> bool {
        self.decoded
    }

    /// β: distinct D2D senders heard before this batch decoded.
    pub fn beta(&self) -> u32 {
        self.senders.len() as u32
    }

    pub fn senders(&self) -> &BTreeSet<u32> {
        &self.senders
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentLedger {
    batches: Vec<BatchLedger>,
}

impl FragmentLedger {
    pub fn new(batches: u32) -> Self {
        Self {
            batches: vec![BatchLedger::default(); batches.max(1) as usize],
        }
    }

    pub fn batch(&self, batch: u32) -> &BatchLedger {
        &self.batches[batch as usize]
    }

    pub fn batches(&self) -> impl Iterator<Item = &BatchLedger> {
        self.batches.iter()
    }

    /// Records a fragment; returns true if its sequence number is new.
    pub fn insert(&mut self, batch: u32, seq: u32) -> bool {
        self.batches[batch as usize].received.insert(seq)
    }

    pub fn record_sender(&mut self, batch: u32, sender: u32) {
        let b = &mut self.batches[batch as usize];
        if !b.decoded {
            b.senders.insert(sender);
        }
    }

    pub fn mark_decoded(&mut self, batch: u32) {
        self.batches[batch as usize].decoded = true;
    }

    pub fn is_decoded(&self, batch: u32) -> bool {
        self.batches[batch as usize].decoded
    }

    pub fn all_decoded(&self) -> bool {
        self.batches.iter().all(|b| b.decoded)
    }
}

//! Gateway and end-device behaviour: which slots a device listens in, how it
//! reacts to fragments, how many D2D frames it sends and where they go.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coding::{self, BatchLayout, CodingParams, DecodeModel, FragmentLedger};
use crate::error::{Error, Result};
use crate::phy::{MAX_SF, MIN_SF};
use crate::scheduler::{downlink_sf_at, DownlinkSlotPlan, SlotPlanParams};

/// Broadcast scheme run by the gateway and devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    /// Stepped downlink SF plus cooperative D2D broadcast.
    D2d,
    /// As `D2d`, but receivers wake only for occupied D2D superslots.
    D2dPsi,
    /// Rateless multicast at one fixed SF.
    Fsf(u8),
    /// Stepped downlink SF, no D2D.
    GlMsf,
}

impl Scheme {
    pub fn uses_d2d(self) -> bool {
        matches!(self, Scheme::D2d | Scheme::D2dPsi)
    }

    /// Slot-plan parameters with the downlink SF rule of this scheme applied.
    pub fn slot_params(self, base: &SlotPlanParams) -> SlotPlanParams {
        match self {
            Scheme::Fsf(sf) => base.with_fixed_sf(sf),
            _ => base.clone(),
        }
    }

    pub fn downlink_sf(self, n: u32, params: &SlotPlanParams) -> u8 {
        match self {
            Scheme::Fsf(sf) => sf,
            _ => downlink_sf_at(n, params.start_sf, params.frames_per_sf_step),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::D2d => f.write_str("d2d"),
            Scheme::D2dPsi => f.write_str("d2d-psi"),
            Scheme::Fsf(sf) => write!(f, "fsf-{sf}"),
            Scheme::GlMsf => f.write_str("gl-msf"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        match lower.as_str() {
            "d2d" => Ok(Scheme::D2d),
            "d2d-psi" => Ok(Scheme::D2dPsi),
            "gl-msf" => Ok(Scheme::GlMsf),
            other => {
                let sf = other
                    .strip_prefix("fsf-")
                    .and_then(|v| v.parse::<u8>().ok())
                    .filter(|sf| (MIN_SF..=MAX_SF).contains(sf));
                sf.map(Scheme::Fsf).ok_or_else(|| {
                    Error::config(
                        "scheme",
                        format!("unknown scheme `{s}` (expected d2d, d2d-psi, gl-msf or fsf-7..fsf-12)"),
                    )
                })
            }
        }
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

/// η: scaled fraction of peers believed to be updated.
pub fn success_ratio(beta: u32, scaling: f64, n_ed: u32) -> f64 {
    f64::from(beta) / (scaling * f64::from(n_ed))
}

/// Number of D2D frames an ED sends after decoding, clamped to `[n_min, n_max]`.
pub fn num_d2d_frames(eta: f64, n_max: u32, n_min: u32) -> u32 {
    // Guard against 12.000000001-style float noise before the ceiling.
    let wanted = ((1.0 - eta) * f64::from(n_max) - 1e-9).ceil();
    let wanted = if wanted.is_finite() && wanted > 0.0 {
        wanted.min(f64::from(n_max)) as u32
    } else {
        0
    };
    wanted.max(n_min).min(n_max.max(n_min))
}

/// One scheduled D2D transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct D2dPlanEntry {
    /// Downlink frame whose D2D window carries the transmission.
    pub frame: u32,
    pub superslot: u32,
    pub seq: u32,
    pub batch: u32,
}

/// Places `n_d2d` frames for a device that decoded `batch` during downlink
/// frame `decoded_at`: one per eligible window, starting with the window after
/// frame `decoded_at + lambda`. Windows without superslots or reserved for
/// another batch are skipped; the plan is cut short at the session horizon.
#[allow(clippy::too_many_arguments)]
pub fn schedule_d2d<R: Rng + ?Sized>(
    ed: u32,
    decoded_at: u32,
    lambda: u32,
    n_d2d: u32,
    batch: u32,
    plan: &DownlinkSlotPlan,
    layout: &BatchLayout,
    coding: &CodingParams,
    n_ed: u32,
    rng: &mut R,
) -> Result<Vec<D2dPlanEntry>> {
    let per_batch = coding.d2d_bounds().1;
    let mut entries = Vec::with_capacity(n_d2d as usize);
    let mut frame = u64::from(decoded_at) + u64::from(lambda);
    while (entries.len() as u32) < n_d2d && frame < plan.len() as u64 {
        let n = frame as u32;
        let slot = plan.entry(n);
        if slot.s_d2d > 0 && layout.batch_of(n) == batch {
            let m = entries.len() as u32;
            entries.push(D2dPlanEntry {
                frame: n,
                superslot: rng.random_range(0..slot.s_d2d),
                seq: coding::d2d_sequence(ed, batch * per_batch + m, n_ed, coding)?,
                batch,
            });
        }
        frame += 1;
    }
    Ok(entries)
}

/// Where an ED is in the frame structure when deciding whether to listen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotContext {
    Downlink,
    D2d {
        /// Downlink frame the window follows.
        frame: u32,
        /// Some ED transmits in this superslot.
        occupied: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdState {
    pub id: u32,
    pub position: (f64, f64),
    pub ledger: FragmentLedger,
    /// Processing delay in downlink superslots.
    pub lambda: u32,
    pub d2d_plan: Vec<D2dPlanEntry>,
    /// Number of D2D frames chosen at each batch decode.
    pub d2d_chosen: Vec<Option<u32>>,
    pub tx_seconds: f64,
    pub rx_seconds: f64,
    pub completion_s: Option<f64>,
}

impl EdState {
    pub fn new(id: u32, position: (f64, f64), batches: u32, lambda: u32) -> Self {
        Self {
            id,
            position,
            ledger: FragmentLedger::new(batches),
            lambda,
            d2d_plan: Vec::new(),
            d2d_chosen: vec![None; batches.max(1) as usize],
            tx_seconds: 0.0,
            rx_seconds: 0.0,
            completion_s: None,
        }
    }

    pub fn distance_m(&self) -> f64 {
        self.position.0.hypot(self.position.1)
    }

    pub fn is_done(&self) -> bool {
        self.ledger.all_decoded()
    }
}

pub fn ed_listen_policy(ed: &EdState, slot: SlotContext, scheme: Scheme, layout: &BatchLayout) -> bool {
    if ed.is_done() {
        return false;
    }
    match slot {
        SlotContext::Downlink => true,
        SlotContext::D2d { frame, occupied } => {
            if !scheme.uses_d2d() || !layout.d2d_possible_after(frame) {
                return false;
            }
            if ed.ledger.is_decoded(layout.batch_of(frame)) {
                return false;
            }
            match scheme {
                Scheme::D2dPsi => occupied,
                _ => true,
            }
        }
    }
}

/// What a received fragment did to a device's ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragmentEffect {
    /// The batch was already decoded.
    Ignored,
    Duplicate,
    Stored { distinct: u32 },
    Decoded { distinct: u32 },
}

fn store_fragment<R: Rng + ?Sized>(
    ed: &mut EdState,
    seq: u32,
    batch: u32,
    k_batch: u32,
    model: DecodeModel,
    rng: &mut R,
) -> FragmentEffect {
    if !ed.ledger.insert(batch, seq) {
        return FragmentEffect::Duplicate;
    }
    let distinct = ed.ledger.batch(batch).distinct();
    if coding::decode_attempt(distinct, k_batch, model, rng) {
        ed.ledger.mark_decoded(batch);
        FragmentEffect::Decoded { distinct }
    } else {
        FragmentEffect::Stored { distinct }
    }
}

pub fn on_downlink_frame_received<R: Rng + ?Sized>(
    ed: &mut EdState,
    seq: u32,
    batch: u32,
    k_batch: u32,
    model: DecodeModel,
    rng: &mut R,
) -> FragmentEffect {
    if ed.ledger.is_decoded(batch) {
        return FragmentEffect::Ignored;
    }
    store_fragment(ed, seq, batch, k_batch, model, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn on_d2d_frame_received<R: Rng + ?Sized>(
    ed: &mut EdState,
    sender: u32,
    seq: u32,
    batch: u32,
    k_batch: u32,
    model: DecodeModel,
    rng: &mut R,
) -> FragmentEffect {
    if ed.ledger.is_decoded(batch) {
        return FragmentEffect::Ignored;
    }
    ed.ledger.record_sender(batch, sender);
    store_fragment(ed, seq, batch, k_batch, model, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    AllConfirmed,
    AllAcknowledged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayAction {
    Transmit { frame: u32, sf: u8 },
    Stop(StopReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayState {
    pub frames_sent: u32,
    pub max_frames: u32,
    pub scheme: Scheme,
    batches: u32,
    /// `heard[ed * batches + batch]`: a D2D frame of that batch reached the gateway.
    heard: Vec<bool>,
    heard_count: Vec<u32>,
    confirmed: usize,
}

impl GatewayState {
    pub fn new(scheme: Scheme, max_frames: u32, n_ed: u32, batches: u32) -> Self {
        let batches = batches.max(1);
        Self {
            frames_sent: 0,
            max_frames,
            scheme,
            batches,
            heard: vec![false; (n_ed * batches) as usize],
            heard_count: vec![0; n_ed as usize],
            confirmed: 0,
        }
    }

    /// Records a D2D frame of `batch` from `ed`. Returns true when this makes
    /// the sender confirmed (heard for every batch).
    pub fn confirm(&mut self, ed: u32, batch: u32) -> bool {
        let idx = (ed * self.batches + batch) as usize;
        if self.heard[idx] {
            return false;
        }
        self.heard[idx] = true;
        let count = &mut self.heard_count[ed as usize];
        *count += 1;
        if *count == self.batches {
            self.confirmed += 1;
            true
        } else {
            false
        }
    }

    pub fn is_confirmed(&self, ed: u32) -> bool {
        self.heard_count[ed as usize] == self.batches
    }

    pub fn confirmed_count(&self) -> usize {
        self.confirmed
    }

    pub fn all_confirmed(&self) -> bool {
        self.confirmed == self.heard_count.len()
    }
}

/// Decides whether the gateway sends its next downlink frame.
pub fn gateway_step(gw: &GatewayState, all_decoded: bool, params: &SlotPlanParams) -> GatewayAction {
    if gw.frames_sent >= gw.max_frames {
        return GatewayAction::Stop(StopReason::BudgetExhausted);
    }
    if gw.scheme.uses_d2d() {
        if gw.all_confirmed() {
            return GatewayAction::Stop(StopReason::AllConfirmed);
        }
    } else if all_decoded {
        // Benchmarks: ideal out-of-band acknowledgement of the last decode.
        return GatewayAction::Stop(StopReason::AllAcknowledged);
    }
    GatewayAction::Transmit {
        frame: gw.frames_sent,
        sf: gw.scheme.downlink_sf(gw.frames_sent, params),
    }
}

//! Slot-indexed simulation of one FUOTA session: placement, channel draws,
//! interferer traffic, downlink and D2D windows, and replication fan-out.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coding::{self, BatchLayout};
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::frame::{FrameKind, Origin};
use crate::interference::{spawn_interferers, uniform_in_disk, InterfererTraffic};
use crate::metrics;
use crate::phy::{self, Arrival, CaptureOutcome, MAX_SF};
use crate::protocol::{
    self, ed_listen_policy, gateway_step, EdState, FragmentEffect, GatewayAction, GatewayState,
    Scheme, SlotContext, StopReason,
};
use crate::scheduler::{build_slot_plan, DownlinkSlotPlan};

/// FUOTA traffic (downlink and D2D) always uses this channel.
pub const FUOTA_CHANNEL: u8 = 0;

const STREAM_PLACEMENT: u64 = 1;
const STREAM_SHADOWING: u64 = 2;
const STREAM_FADING: u64 = 3;
const STREAM_NOISE_FADING: u64 = 4;
const STREAM_INTERFERERS: u64 = 5;
const STREAM_TRAFFIC: u64 = 6;
const STREAM_PROTOCOL: u64 = 7;
const STREAM_DECODE: u64 = 8;
const STREAM_INTERFERER_SHADOWING: u64 = 9;

/// Interferer frames are materialised this far ahead of the simulation clock.
const TRAFFIC_CHUNK_S: f64 = 3600.0;

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn subkey(seed: u64, stream: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    substream(seed, stream).fill_bytes(&mut key);
    key
}

/// Seed of replication `r` under `master`.
pub fn replication_seed(master: u64, r: u32) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(u64::from(r));
    rng.next_u64()
}

/// `n` points uniform on the disk of radius `radius` around the gateway.
pub fn place_recipients<R: Rng + ?Sized>(n: u32, radius: f64, rng: &mut R) -> Vec<(f64, f64)> {
    (0..n).map(|_| uniform_in_disk(radius, rng)).collect()
}

/// Slot plan used by `cfg`'s scheme.
pub fn slot_plan_for(cfg: &SimConfig) -> Result<DownlinkSlotPlan> {
    build_slot_plan(
        cfg.coding.max_frames,
        &cfg.scheme.slot_params(&cfg.slots),
        &cfg.phy,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdResult {
    pub ed: u32,
    pub distance_m: f64,
    /// `None` if the update was not decoded before the session ended.
    pub completion_s: Option<f64>,
    pub tx_s: f64,
    pub rx_s: f64,
    pub energy_j: f64,
    pub d2d_sent: u32,
    pub listened_downlink: u32,
    pub listened_superslots: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub scheme: Scheme,
    pub eds: Vec<EdResult>,
    pub gateway_frames: u32,
    pub d2d_frames: u64,
    /// EDs the gateway heard a D2D frame from for every batch.
    pub confirmed: u32,
    pub stop_reason: StopReason,
    pub session_end_s: f64,
}

impl RunResult {
    pub fn decoded(&self) -> usize {
        self.eds.iter().filter(|e| e.completion_s.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    /// Downlink frame index (for D2D frames: the frame whose window carries it).
    pub frame: u32,
    pub superslot: Option<u32>,
    pub kind: FrameKind,
    pub origin: Origin,
    pub seq: u32,
    pub batch: u32,
    pub sf: u8,
    pub start_s: f64,
    pub duration_s: f64,
    pub listeners: u32,
    pub received_by: u32,
    pub lost_sensitivity: u32,
    pub lost_collision: u32,
    pub gateway_received: bool,
    pub noise_overlaps: u32,
}

impl TraceFrame {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeEvent {
    pub ed: u32,
    pub batch: u32,
    pub frame: u32,
    pub time_s: f64,
    /// Distinct D2D senders heard for this batch before decoding.
    pub senders: Vec<u32>,
    /// D2D frame count chosen, `None` for schemes without D2D.
    pub n_d2d: Option<u32>,
    /// Frames actually placed (fewer if the session horizon cuts the plan).
    pub scheduled: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub frames: Vec<TraceFrame>,
    pub decodes: Vec<DecodeEvent>,
    pub interferers: u32,
    pub noise_frames_on_channel: u64,
}

impl Trace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# interferers={} channel_noise_frames={}",
            self.interferers, self.noise_frames_on_channel
        );
        let _ = writeln!(
            out,
            "# frame superslot kind origin seq batch sf start_s duration_s listeners received lost_sens lost_coll gw noise"
        );
        for f in &self.frames {
            let origin = match f.origin {
                Origin::Gateway => "gw".to_string(),
                Origin::Ed(i) => format!("ed{i}"),
                Origin::Interferer(i) => format!("if{i}"),
            };
            let kind = match f.kind {
                FrameKind::Downlink => "dl",
                FrameKind::D2d => "d2d",
                FrameKind::Noise => "noise",
            };
            let _ = writeln!(
                out,
                "{} {} {kind} {origin} {} {} {} {:.6} {:.6} {} {} {} {} {} {}",
                f.frame,
                f.superslot.map_or("-".to_string(), |s| s.to_string()),
                f.seq,
                f.batch,
                f.sf,
                f.start_s,
                f.duration_s,
                f.listeners,
                f.received_by,
                f.lost_sensitivity,
                f.lost_collision,
                u8::from(f.gateway_received),
                f.noise_overlaps,
            );
        }
        let _ = writeln!(out, "# decodes: ed batch frame time_s n_d2d scheduled senders");
        for d in &self.decodes {
            let senders: Vec<String> = d.senders.iter().map(u32::to_string).collect();
            let _ = writeln!(
                out,
                "{} {} {} {:.6} {} {} [{}]",
                d.ed,
                d.batch,
                d.frame,
                d.time_s,
                d.n_d2d.map_or("-".to_string(), |n| n.to_string()),
                d.scheduled,
                senders.join(",")
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct NoiseFrame {
    start: f64,
    end: f64,
    sf: u8,
    node: u32,
    uid: u64,
}

/// Channel-0 interferer frames, generated lazily in time order.
struct NoiseField {
    positions: Vec<(f64, f64)>,
    sources: Vec<InterfererTraffic<ChaCha8Rng>>,
    emitted: Vec<u64>,
    frames: Vec<NoiseFrame>,
    generated_until: f64,
    max_duration: f64,
}

impl NoiseField {
    fn ensure(&mut self, t: f64) {
        while self.generated_until <= t {
            let until = self.generated_until + TRAFFIC_CHUNK_S;
            let mut chunk = Vec::new();
            for (i, src) in self.sources.iter_mut().enumerate() {
                while src.peek_start() < until {
                    let Some(f) = src.next() else { break };
                    let uid = (i as u64) << 32 | self.emitted[i];
                    self.emitted[i] += 1;
                    if f.channel == FUOTA_CHANNEL {
                        chunk.push(NoiseFrame {
                            start: f.start_s,
                            end: f.end_s(),
                            sf: f.sf,
                            node: i as u32,
                            uid,
                        });
                    }
                }
            }
            chunk.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.uid.cmp(&b.uid)));
            self.frames.extend(chunk);
            self.generated_until = until;
        }
    }

    fn overlapping(&mut self, start: f64, end: f64) -> Vec<NoiseFrame> {
        if self.sources.is_empty() {
            return Vec::new();
        }
        self.ensure(end);
        let lo = start - self.max_duration;
        let first = self.frames.partition_point(|f| f.start < lo);
        self.frames[first..]
            .iter()
            .take_while(|f| f.start < end)
            .filter(|f| f.start < end && start < f.end)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingTx {
    ed: u32,
    superslot: u32,
    seq: u32,
    batch: u32,
}

struct Simulation<'a> {
    cfg: &'a SimConfig,
    seed: u64,
    plan: DownlinkSlotPlan,
    slot_params: crate::scheduler::SlotPlanParams,
    layout: BatchLayout,
    n_ed: u32,
    eds: Vec<EdState>,
    /// Mean path gain plus shadowing, `[tx * (n_ed + 1) + rx]`; node 0 is the gateway.
    link_db: Vec<f64>,
    interferer_shadow_db: Vec<f64>,
    protocol_rngs: Vec<ChaCha8Rng>,
    decode_rngs: Vec<ChaCha8Rng>,
    fading_key: [u8; 32],
    noise_key: [u8; 32],
    noise: NoiseField,
    gw: GatewayState,
    pending: BTreeMap<u32, Vec<PendingTx>>,
    listened_downlink: Vec<u32>,
    listened_superslots: Vec<u32>,
    d2d_sent: Vec<u32>,
    d2d_frames: u64,
    last_activity_s: f64,
    trace: Option<Trace>,
}

fn position_of(eds: &[EdState], node: usize) -> (f64, f64) {
    if node == 0 {
        (0.0, 0.0)
    } else {
        eds[node - 1].position
    }
}

fn floored_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1).max(1.0)
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a SimConfig, seed: u64, traced: bool) -> Result<Self> {
        cfg.validate()?;
        let plan = slot_plan_for(cfg)?;
        let slot_params = cfg.scheme.slot_params(&cfg.slots);
        let n_ed = cfg.n_ed;
        let batches = cfg.coding.batches;
        let layout = BatchLayout::new(cfg.source_fragments(), batches);
        let nodes = n_ed as usize + 1;

        let positions = place_recipients(n_ed, cfg.cell_radius_m, &mut substream(seed, STREAM_PLACEMENT));
        let protocol_key = substream(seed, STREAM_PROTOCOL).next_u64();
        let mut protocol_rngs: Vec<ChaCha8Rng> = (0..n_ed)
            .map(|ed| {
                let mut rng = ChaCha8Rng::seed_from_u64(protocol_key);
                rng.set_stream(u64::from(ed));
                rng
            })
            .collect();
        let eds: Vec<EdState> = positions
            .iter()
            .zip(protocol_rngs.iter_mut())
            .enumerate()
            .map(|(i, (&pos, rng))| {
                let lambda = rng.random_range(cfg.lambda.min..=cfg.lambda.max);
                EdState::new(i as u32, pos, batches, lambda)
            })
            .collect();
        let decode_key = substream(seed, STREAM_DECODE).next_u64();
        let decode_rngs = (0..u64::from(n_ed) * u64::from(batches))
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(decode_key);
                rng.set_stream(i);
                rng
            })
            .collect();

        let sigma = cfg.phy.shadow_sigma_db;
        let shadow = Normal::new(0.0, sigma.max(0.0))
            .map_err(|_| Error::config("phy.shadow_sigma_db", "invalid standard deviation"))?;
        let mut shadow_rng = substream(seed, STREAM_SHADOWING);
        let mut link_db = vec![0.0; nodes * nodes];
        for tx in 0..nodes {
            for rx in 0..nodes {
                let s = if sigma > 0.0 { shadow.sample(&mut shadow_rng) } else { 0.0 };
                if tx != rx {
                    let d = floored_distance(position_of(&eds, tx), position_of(&eds, rx));
                    link_db[tx * nodes + rx] = cfg.phy.path_gain_db(d) + s;
                }
            }
        }

        let interferer_positions = spawn_interferers(&cfg.interference, &mut substream(seed, STREAM_INTERFERERS));
        let mut interferer_shadow_db = vec![0.0; interferer_positions.len() * nodes];
        if sigma > 0.0 {
            let mut rng = substream(seed, STREAM_INTERFERER_SHADOWING);
            for v in interferer_shadow_db.iter_mut() {
                *v = shadow.sample(&mut rng);
            }
        }
        let traffic_key = substream(seed, STREAM_TRAFFIC).next_u64();
        let sources = (0..interferer_positions.len() as u32)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(traffic_key);
                rng.set_stream(u64::from(i));
                InterfererTraffic::new(i, &cfg.interference, &cfg.phy, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let noise = NoiseField {
            emitted: vec![0; interferer_positions.len()],
            positions: interferer_positions,
            sources,
            frames: Vec::new(),
            generated_until: 0.0,
            max_duration: phy::airtime(MAX_SF, cfg.interference.max_payload_bytes, &cfg.phy)?,
        };

        let trace = traced.then(|| Trace {
            interferers: noise.positions.len() as u32,
            ..Trace::default()
        });
        Ok(Self {
            cfg,
            seed,
            gw: GatewayState::new(cfg.scheme, cfg.coding.max_frames, n_ed, batches),
            plan,
            slot_params,
            layout,
            n_ed,
            eds,
            link_db,
            interferer_shadow_db,
            protocol_rngs,
            decode_rngs,
            fading_key: subkey(seed, STREAM_FADING),
            noise_key: subkey(seed, STREAM_NOISE_FADING),
            noise,
            pending: BTreeMap::new(),
            listened_downlink: vec![0; n_ed as usize],
            listened_superslots: vec![0; n_ed as usize],
            d2d_sent: vec![0; n_ed as usize],
            d2d_frames: 0,
            last_activity_s: 0.0,
            trace,
        })
    }

    fn nodes(&self) -> usize {
        self.n_ed as usize + 1
    }

    fn all_done(&self) -> bool {
        self.eds.iter().all(EdState::is_done)
    }

    /// Fading gain of FUOTA frame `seq` at every FUOTA node, in dB.
    fn fading_db(&self, seq: u32) -> Vec<f64> {
        if !self.cfg.phy.rayleigh_fading {
            return vec![0.0; self.nodes()];
        }
        let mut rng = ChaCha8Rng::from_seed(self.fading_key);
        rng.set_stream(u64::from(seq));
        (0..self.nodes())
            .map(|_| 10.0 * phy::draw_fading(&mut rng).log10())
            .collect()
    }

    fn noise_power_dbm(&self, nf: &NoiseFrame, rx: usize) -> f64 {
        let pos = self.noise.positions[nf.node as usize];
        let d = floored_distance(pos, position_of(&self.eds, rx));
        let shadow = if self.interferer_shadow_db.is_empty() {
            0.0
        } else {
            self.interferer_shadow_db[nf.node as usize * self.nodes() + rx]
        };
        let fade = if self.cfg.phy.rayleigh_fading {
            let mut rng = ChaCha8Rng::from_seed(self.noise_key);
            rng.set_stream(nf.uid);
            rng.set_word_pos(2 * rx as u128);
            10.0 * phy::draw_fading(&mut rng).log10()
        } else {
            0.0
        };
        self.cfg.phy.tx_power_interferer_dbm + self.cfg.phy.path_gain_db(d) + shadow + fade
    }

    fn noise_arrivals(&self, noise: &[NoiseFrame], rx: usize, out: &mut Vec<Arrival>) {
        out.extend(noise.iter().map(|nf| Arrival {
            power_dbm: self.noise_power_dbm(nf, rx),
            sf: nf.sf,
            channel: FUOTA_CHANNEL,
        }));
    }

    fn run(mut self) -> Result<(RunResult, Option<Trace>)> {
        let m = self.plan.len() as u32;
        let mut stop = None;
        for n in 0..m {
            if stop.is_none() {
                match gateway_step(&self.gw, self.all_done(), &self.slot_params) {
                    GatewayAction::Transmit { frame, sf } => {
                        self.downlink(frame, sf)?;
                        self.gw.frames_sent += 1;
                    }
                    GatewayAction::Stop(reason) => stop = Some(reason),
                }
            }
            if self.pending.is_empty() && (stop.is_some() || self.all_done()) {
                break;
            }
            self.d2d_window(n)?;
        }

        let stop_reason = match stop {
            Some(r) => r,
            None if self.all_done() && self.pending.is_empty() => {
                if !self.cfg.scheme.uses_d2d() {
                    StopReason::AllAcknowledged
                } else if self.gw.all_confirmed() {
                    StopReason::AllConfirmed
                } else {
                    // Nothing left that could confirm the rest: the gateway
                    // keeps transmitting to its budget.
                    let last = m - 1;
                    self.gw.frames_sent = m;
                    self.last_activity_s = self
                        .last_activity_s
                        .max(self.plan.downlink_start_s(last) + self.plan.downlink_airtime(last));
                    StopReason::BudgetExhausted
                }
            }
            None => StopReason::BudgetExhausted,
        };

        let energy = &self.cfg.energy;
        let eds = self
            .eds
            .iter()
            .enumerate()
            .map(|(i, ed)| EdResult {
                ed: ed.id,
                distance_m: ed.distance_m(),
                completion_s: ed.completion_s,
                tx_s: ed.tx_seconds,
                rx_s: ed.rx_seconds,
                energy_j: metrics::energy(ed.tx_seconds, ed.rx_seconds, energy),
                d2d_sent: self.d2d_sent[i],
                listened_downlink: self.listened_downlink[i],
                listened_superslots: self.listened_superslots[i],
            })
            .collect();
        let result = RunResult {
            seed: self.seed,
            scheme: self.cfg.scheme,
            eds,
            gateway_frames: self.gw.frames_sent,
            d2d_frames: self.d2d_frames,
            confirmed: self.gw.confirmed_count() as u32,
            stop_reason,
            session_end_s: self.last_activity_s,
        };
        let mut trace = self.trace;
        if let Some(t) = trace.as_mut() {
            t.noise_frames_on_channel = self
                .noise
                .frames
                .iter()
                .filter(|f| f.start < self.last_activity_s)
                .count() as u64;
        }
        Ok((result, trace))
    }

    fn downlink(&mut self, n: u32, sf: u8) -> Result<()> {
        let entry = *self.plan.entry(n);
        let start = self.plan.downlink_start_s(n);
        let air = self.plan.downlink_airtime(n);
        let seq = coding::gateway_sequence(n, &self.cfg.coding)?;
        let batch = self.layout.batch_of(n);
        let k_batch = self.layout.size(batch);
        let listen_s = f64::from(entry.g_p) * self.plan.ping_slot_s;
        let noise = self.noise.overlapping(start, start + air);
        let fading = self.fading_db(seq);
        let nodes = self.nodes();
        let tx_power = self.cfg.phy.tx_power_gateway_dbm;
        let model = self.cfg.coding.decode_model;

        let mut tf = TraceFrame {
            frame: n,
            superslot: None,
            kind: FrameKind::Downlink,
            origin: Origin::Gateway,
            seq,
            batch,
            sf,
            start_s: start,
            duration_s: air,
            listeners: 0,
            received_by: 0,
            lost_sensitivity: 0,
            lost_collision: 0,
            gateway_received: false,
            noise_overlaps: noise.len() as u32,
        };
        let mut arrivals = Vec::new();
        for i in 0..self.n_ed as usize {
            if !ed_listen_policy(&self.eds[i], SlotContext::Downlink, self.cfg.scheme, &self.layout) {
                continue;
            }
            self.listened_downlink[i] += 1;
            self.eds[i].rx_seconds += listen_s;
            tf.listeners += 1;
            let rx = i + 1;
            let power = tx_power + self.link_db[rx] + fading[rx];
            arrivals.clear();
            self.noise_arrivals(&noise, rx, &mut arrivals);
            match phy::capture_outcome(power, sf, &arrivals, FUOTA_CHANNEL, &self.cfg.phy)? {
                CaptureOutcome::LostSensitivity => tf.lost_sensitivity += 1,
                CaptureOutcome::LostCollision => tf.lost_collision += 1,
                CaptureOutcome::Received => {
                    tf.received_by += 1;
                    let effect = protocol::on_downlink_frame_received(
                        &mut self.eds[i],
                        seq,
                        batch,
                        k_batch,
                        model,
                        &mut self.decode_rngs[i * self.layout.batches() as usize + batch as usize],
                    );
                    if let FragmentEffect::Decoded { .. } = effect {
                        self.on_decoded(i, batch, n, start + air)?;
                    }
                }
            }
        }
        debug_assert_eq!(nodes, fading.len());
        self.last_activity_s = self.last_activity_s.max(start + air);
        if let Some(t) = self.trace.as_mut() {
            t.frames.push(tf);
        }
        Ok(())
    }

    fn on_decoded(&mut self, i: usize, batch: u32, n: u32, time_s: f64) -> Result<()> {
        if self.eds[i].is_done() {
            self.eds[i].completion_s = Some(time_s);
        }
        let mut n_d2d = None;
        let mut scheduled = 0;
        if self.cfg.scheme.uses_d2d() {
            let beta = self.eds[i].ledger.batch(batch).beta();
            let eta = protocol::success_ratio(beta, self.cfg.coding.success_scaling, self.n_ed);
            let (min, max) = self.cfg.coding.d2d_bounds();
            let count = protocol::num_d2d_frames(eta, max, min);
            let entries = protocol::schedule_d2d(
                i as u32,
                n,
                self.eds[i].lambda,
                count,
                batch,
                &self.plan,
                &self.layout,
                &self.cfg.coding,
                self.n_ed,
                &mut self.protocol_rngs[i],
            )?;
            scheduled = entries.len() as u32;
            for e in &entries {
                self.pending.entry(e.frame).or_default().push(PendingTx {
                    ed: i as u32,
                    superslot: e.superslot,
                    seq: e.seq,
                    batch: e.batch,
                });
            }
            self.eds[i].d2d_chosen[batch as usize] = Some(count);
            self.eds[i].d2d_plan.extend(entries);
            n_d2d = Some(count);
        }
        if let Some(t) = self.trace.as_mut() {
            t.decodes.push(DecodeEvent {
                ed: i as u32,
                batch,
                frame: n,
                time_s,
                senders: self.eds[i].ledger.batch(batch).senders().iter().copied().collect(),
                n_d2d,
                scheduled,
            });
        }
        Ok(())
    }

    fn d2d_window(&mut self, n: u32) -> Result<()> {
        let entry = *self.plan.entry(n);
        if entry.s_d2d == 0 {
            return Ok(());
        }
        let scheme = self.cfg.scheme;
        let txs = self.pending.remove(&n).unwrap_or_default();
        let superslot_s = f64::from(entry.e_p) * self.plan.ping_slot_s;

        if txs.is_empty() {
            // No frame can arrive, so only scanning time is at stake.
            if scheme == Scheme::D2d {
                let ctx = SlotContext::D2d { frame: n, occupied: false };
                for i in 0..self.n_ed as usize {
                    if ed_listen_policy(&self.eds[i], ctx, scheme, &self.layout) {
                        self.listened_superslots[i] += entry.s_d2d;
                        self.eds[i].rx_seconds += f64::from(entry.s_d2d) * superslot_s;
                    }
                }
            }
            return Ok(());
        }

        let mut by_superslot: Vec<Vec<PendingTx>> = vec![Vec::new(); entry.s_d2d as usize];
        for tx in txs {
            by_superslot[tx.superslot as usize].push(tx);
        }
        for (s, group) in by_superslot.iter().enumerate() {
            self.d2d_superslot(n, s as u32, group, superslot_s)?;
        }
        Ok(())
    }

    fn d2d_superslot(&mut self, n: u32, s: u32, txs: &[PendingTx], superslot_s: f64) -> Result<()> {
        let scheme = self.cfg.scheme;
        let occupied = !txs.is_empty();
        let ctx = SlotContext::D2d { frame: n, occupied };
        if !occupied {
            if scheme == Scheme::D2d {
                for i in 0..self.n_ed as usize {
                    if ed_listen_policy(&self.eds[i], ctx, scheme, &self.layout) {
                        self.listened_superslots[i] += 1;
                        self.eds[i].rx_seconds += superslot_s;
                    }
                }
            }
            return Ok(());
        }

        let start = self.plan.superslot_start_s(n, s);
        let air = self.plan.d2d_airtime_s;
        let sf = self.plan.d2d_sf;
        let nodes = self.nodes();
        let tx_power = self.cfg.phy.tx_power_ed_dbm;
        let model = self.cfg.coding.decode_model;
        let noise = self.noise.overlapping(start, start + air);
        let fading: Vec<Vec<f64>> = txs.iter().map(|t| self.fading_db(t.seq)).collect();
        let power_at = |link_db: &[f64], k: usize, rx: usize| -> f64 {
            let tx_node = txs[k].ed as usize + 1;
            tx_power + link_db[tx_node * nodes + rx] + fading[k][rx]
        };

        let mut frames: Vec<TraceFrame> = txs
            .iter()
            .map(|t| TraceFrame {
                frame: n,
                superslot: Some(s),
                kind: FrameKind::D2d,
                origin: Origin::Ed(t.ed),
                seq: t.seq,
                batch: t.batch,
                sf,
                start_s: start,
                duration_s: air,
                listeners: 0,
                received_by: 0,
                lost_sensitivity: 0,
                lost_collision: 0,
                gateway_received: false,
                noise_overlaps: noise.len() as u32,
            })
            .collect();

        for t in txs {
            let i = t.ed as usize;
            self.eds[i].tx_seconds += air;
            self.d2d_sent[i] += 1;
            self.d2d_frames += 1;
        }

        let mut arrivals = Vec::new();
        // Gateway.
        for k in 0..txs.len() {
            arrivals.clear();
            for j in (0..txs.len()).filter(|&j| j != k) {
                arrivals.push(Arrival {
                    power_dbm: power_at(&self.link_db, j, 0),
                    sf,
                    channel: FUOTA_CHANNEL,
                });
            }
            self.noise_arrivals(&noise, 0, &mut arrivals);
            let p = power_at(&self.link_db, k, 0);
            if phy::capture_outcome(p, sf, &arrivals, FUOTA_CHANNEL, &self.cfg.phy)? == CaptureOutcome::Received {
                frames[k].gateway_received = true;
                self.gw.confirm(txs[k].ed, txs[k].batch);
            }
        }

        // End devices.
        for i in 0..self.n_ed as usize {
            if txs.iter().any(|t| t.ed as usize == i) {
                continue;
            }
            if !ed_listen_policy(&self.eds[i], ctx, scheme, &self.layout) {
                continue;
            }
            self.listened_superslots[i] += 1;
            self.eds[i].rx_seconds += superslot_s;
            let rx = i + 1;
            for f in frames.iter_mut() {
                f.listeners += 1;
            }
            // Under dominant-interferer capture only the strongest frame can survive.
            let best = (0..txs.len())
                .max_by(|&a, &b| {
                    power_at(&self.link_db, a, rx).total_cmp(&power_at(&self.link_db, b, rx))
                })
                .expect("occupied superslot");
            arrivals.clear();
            for j in (0..txs.len()).filter(|&j| j != best) {
                arrivals.push(Arrival {
                    power_dbm: power_at(&self.link_db, j, rx),
                    sf,
                    channel: FUOTA_CHANNEL,
                });
            }
            self.noise_arrivals(&noise, rx, &mut arrivals);
            let p = power_at(&self.link_db, best, rx);
            match phy::capture_outcome(p, sf, &arrivals, FUOTA_CHANNEL, &self.cfg.phy)? {
                CaptureOutcome::LostSensitivity => frames[best].lost_sensitivity += 1,
                CaptureOutcome::LostCollision => frames[best].lost_collision += 1,
                CaptureOutcome::Received => {
                    frames[best].received_by += 1;
                    let t = txs[best];
                    let k_batch = self.layout.size(t.batch);
                    let effect = protocol::on_d2d_frame_received(
                        &mut self.eds[i],
                        t.ed,
                        t.seq,
                        t.batch,
                        k_batch,
                        model,
                        &mut self.decode_rngs[i * self.layout.batches() as usize + t.batch as usize],
                    );
                    if let FragmentEffect::Decoded { .. } = effect {
                        self.on_decoded(i, t.batch, n, start + air)?;
                    }
                }
            }
        }

        self.last_activity_s = self.last_activity_s.max(start + air);
        if let Some(t) = self.trace.as_mut() {
            t.frames.extend(frames);
        }
        Ok(())
    }
}

/// One session of `cfg` under `seed`.
pub fn run_once(cfg: &SimConfig, seed: u64) -> Result<RunResult> {
    Simulation::new(cfg, seed, false)?.run().map(|(r, _)| r)
}

/// As `run_once`, also returning a frame-level trace.
pub fn run_once_traced(cfg: &SimConfig, seed: u64) -> Result<(RunResult, Trace)> {
    let (r, t) = Simulation::new(cfg, seed, true)?.run()?;
    Ok((r, t.unwrap_or_default()))
}

/// `cfg.replications` independent sessions seeded from `cfg.seed`, in order.
pub fn run_replications(cfg: &SimConfig) -> Result<Vec<RunResult>> {
    #[cfg(feature = "parallel")]
    {
        run_replications_parallel(cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_replications_sequential(cfg)
    }
}

pub fn run_replications_sequential(cfg: &SimConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    (0..cfg.replications)
        .map(|r| run_once(cfg, replication_seed(cfg.seed, r)))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn run_replications_parallel(cfg: &SimConfig) -> Result<Vec<RunResult>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_once(cfg, replication_seed(cfg.seed, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::{decode_failure_probability, DecodeModel};
    use crate::interference::InterfererField;
    use std::collections::{HashMap, HashSet};

    fn quiet(mut cfg: SimConfig) -> SimConfig {
        cfg.interference = InterfererField {
            intensity_per_m2: 0.0,
            ..InterfererField::default()
        };
        cfg
    }

    #[test]
    fn placement_is_uniform_on_the_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = place_recipients(100_000, 1000.0, &mut rng);
        let mut radii: Vec<f64> = pts.iter().map(|p| p.0.hypot(p.1)).collect();
        assert!(radii.iter().all(|&r| r <= 1000.0));
        radii.sort_by(f64::total_cmp);
        let n = radii.len() as f64;
        let ks = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = (r / 1000.0).powi(2);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / n.sqrt(), "{ks}");
        assert_eq!(place_recipients(1, 10.0, &mut rng).len(), 1);
    }

    #[test]
    fn replication_seeds_are_distinct() {
        let seeds: HashSet<u64> = (0..1000).map(|r| replication_seed(42, r)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(replication_seed(42, 3), replication_seed(42, 3));
    }

    #[test]
    fn single_close_device_matches_closed_form() {
        let mut cfg = quiet(SimConfig {
            scheme: Scheme::Fsf(7),
            n_ed: 1,
            cell_radius_m: 1.0,
            ..SimConfig::default()
        });
        cfg.phy.rayleigh_fading = false;
        let seed = 99;
        let r = run_once(&cfg, seed).unwrap();

        // Every frame arrives (-63 dBm against -123 dBm), so the decode index
        // follows from the decode stream alone.
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, STREAM_DECODE).next_u64());
        rng.set_stream(0);
        let mut l = 0u32;
        loop {
            l += 1;
            if l >= 200 && rng.random::<f64>() >= decode_failure_probability(l, 200, DecodeModel::Literal) {
                break;
            }
        }
        let air = phy::airtime(7, 50, &cfg.phy).unwrap();
        let expected = f64::from(l - 1) * 326.0 * 0.03 + air;
        let ed = &r.eds[0];
        assert!((ed.completion_s.unwrap() - expected).abs() < 1e-6, "{:?} vs {expected}", ed.completion_s);
        assert_eq!(ed.listened_downlink, l);
        assert!((ed.rx_s - f64::from(l) * 4.0 * 0.03).abs() < 1e-9);
        assert_eq!(ed.tx_s, 0.0);
        assert_eq!(r.gateway_frames, l);
        assert_eq!(r.stop_reason, StopReason::AllAcknowledged);
    }

    #[test]
    fn same_seed_same_result() {
        let cfg = SimConfig {
            n_ed: 150,
            ..SimConfig::default()
        };
        let a = run_once(&cfg, 5).unwrap();
        let b = run_once(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let c = run_once(&cfg, 6).unwrap();
        assert_ne!(a.eds, c.eds);
    }

    #[test]
    fn psi_matches_completion_and_saves_listening() {
        for base in [SimConfig::default(), SimConfig::batched()] {
            let cfg = SimConfig { n_ed: 200, ..base };
            let plain = run_once(&cfg, 11).unwrap();
            let psi = run_once(&SimConfig { scheme: Scheme::D2dPsi, ..cfg }, 11).unwrap();
            for (a, b) in plain.eds.iter().zip(&psi.eds) {
                assert_eq!(a.completion_s, b.completion_s);
                assert_eq!(a.tx_s, b.tx_s);
                assert!(b.rx_s <= a.rx_s);
            }
            assert!(psi.eds.iter().map(|e| e.rx_s).sum::<f64>() < plain.eds.iter().map(|e| e.rx_s).sum::<f64>());
        }
    }

    #[test]
    fn fixed_step_multi_sf_reduces_to_fixed_sf() {
        let mut gl = SimConfig {
            scheme: Scheme::GlMsf,
            n_ed: 100,
            ..SimConfig::default()
        };
        gl.slots.frames_per_sf_step = u32::MAX;
        let fsf = SimConfig {
            scheme: Scheme::Fsf(7),
            ..gl.clone()
        };
        let a = run_once(&gl, 3).unwrap();
        let b = run_once(&fsf, 3).unwrap();
        assert_eq!(a.eds, b.eds);
        assert_eq!(a.gateway_frames, b.gateway_frames);
    }

    #[test]
    fn benchmarks_never_transmit() {
        for scheme in [Scheme::Fsf(12), Scheme::GlMsf] {
            let cfg = SimConfig {
                scheme,
                n_ed: 100,
                ..SimConfig::default()
            };
            let r = run_once(&cfg, 1).unwrap();
            assert_eq!(r.d2d_frames, 0);
            assert!(r.eds.iter().all(|e| e.tx_s == 0.0 && e.listened_superslots == 0));
        }
    }

    #[test]
    fn replications_are_ordered_and_match_single_runs() {
        let cfg = SimConfig {
            n_ed: 60,
            replications: 4,
            ..SimConfig::default()
        };
        let seq = run_replications_sequential(&cfg).unwrap();
        assert_eq!(seq, run_replications(&cfg).unwrap());
        for (r, res) in seq.iter().enumerate() {
            assert_eq!(res.seed, replication_seed(cfg.seed, r as u32));
        }
        let one = SimConfig { replications: 1, ..cfg.clone() };
        assert_eq!(run_replications(&one).unwrap()[0], run_once(&cfg, replication_seed(cfg.seed, 0)).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SimConfig {
            n_ed: 0,
            ..SimConfig::default()
        };
        assert!(matches!(run_once(&cfg, 1), Err(Error::InvalidConfig { .. })));
    }

    fn check_accounting(cfg: &SimConfig, r: &RunResult) {
        let plan = slot_plan_for(cfg).unwrap();
        let e_s = f64::from(plan.entry(0).e_p) * plan.ping_slot_s;
        for ed in &r.eds {
            let downlink: f64 = (0..ed.listened_downlink)
                .map(|n| f64::from(plan.entry(n).g_p) * plan.ping_slot_s)
                .sum();
            let expected_rx = downlink + f64::from(ed.listened_superslots) * e_s;
            assert!((ed.rx_s - expected_rx).abs() < 1e-6 * expected_rx.max(1.0));
            assert!((ed.tx_s - f64::from(ed.d2d_sent) * plan.d2d_airtime_s).abs() < 1e-9);
            let e = metrics::energy(ed.tx_s, ed.rx_s, &cfg.energy);
            assert!((ed.energy_j - e).abs() < 1e-9);
        }
    }

    fn check_trace(cfg: &SimConfig, r: &RunResult, t: &Trace) {
        let plan = slot_plan_for(cfg).unwrap();
        let tau = cfg.slots.duty_cycle_pct / 100.0;

        // Schedule discipline: FUOTA frames overlap only inside a shared D2D superslot.
        let mut frames: Vec<&TraceFrame> = t.frames.iter().collect();
        frames.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for w in frames.windows(2) {
            if w[1].start_s < w[0].end_s() - 1e-9 {
                assert_eq!(w[0].kind, FrameKind::D2d);
                assert_eq!(w[1].kind, FrameKind::D2d);
                assert_eq!((w[0].frame, w[0].superslot), (w[1].frame, w[1].superslot));
            }
        }

        // Gateway duty cycle per interval and window non-encroachment.
        for f in t.frames.iter().filter(|f| f.kind == FrameKind::Downlink) {
            let e = plan.entry(f.frame);
            assert!(e.g_p + e.s_d2d * e.e_p <= e.w_p);
            let interval = f64::from(e.w_p) * plan.ping_slot_s;
            assert!(f.duration_s / interval <= tau + 1e-12);
        }
        for f in t.frames.iter().filter(|f| f.kind == FrameKind::D2d) {
            let e = plan.entry(f.frame);
            let s = f.superslot.unwrap();
            assert!(s < e.s_d2d);
            assert!(f.start_s >= plan.downlink_start_s(f.frame) + f64::from(e.g_p) * plan.ping_slot_s - 1e-9);
            if (f.frame as usize) + 1 < plan.len() {
                assert!(f.end_s() <= plan.downlink_start_s(f.frame + 1) + 1e-9);
            }
        }

        // Sequence numbers are globally unique.
        let mut seqs = HashSet::new();
        assert!(t.frames.iter().all(|f| seqs.insert(f.seq)));

        // At most one D2D frame per ED per window.
        let mut per_window = HashSet::new();
        for f in t.frames.iter().filter(|f| f.kind == FrameKind::D2d) {
            let Origin::Ed(ed) = f.origin else { panic!() };
            assert!(per_window.insert((ed, f.frame)));
        }

        // Senders had decoded the same batch before the listener did, and
        // frame counts stay in bounds.
        let (min, max) = cfg.coding.d2d_bounds();
        let mut decoded_at: HashMap<(u32, u32), f64> = HashMap::new();
        for d in &t.decodes {
            for s in &d.senders {
                let when = decoded_at.get(&(*s, d.batch)).expect("sender decoded earlier");
                assert!(*when < d.time_s);
            }
            decoded_at.insert((d.ed, d.batch), d.time_s);
            if cfg.scheme.uses_d2d() {
                let n = d.n_d2d.unwrap();
                assert!((min..=max).contains(&n));
                assert!(d.scheduled <= n);
            }
        }

        // Completion is the decode time of the last batch.
        for ed in &r.eds {
            let last = t.decodes.iter().filter(|d| d.ed == ed.ed).map(|d| d.time_s).fold(None, |a: Option<f64>, x| Some(a.map_or(x, |a| a.max(x))));
            let all = t.decodes.iter().filter(|d| d.ed == ed.ed).count() as u32 == cfg.coding.batches;
            assert_eq!(ed.completion_s, if all { last } else { None });
        }

        // Per-ED D2D transmit time in any one-hour window.
        let mut tx_times: HashMap<u32, Vec<(f64, f64)>> = HashMap::new();
        for f in t.frames.iter().filter(|f| f.kind == FrameKind::D2d) {
            let Origin::Ed(ed) = f.origin else { panic!() };
            tx_times.entry(ed).or_default().push((f.start_s, f.duration_s));
        }
        for frames in tx_times.values() {
            for (i, (start, _)) in frames.iter().enumerate() {
                let busy: f64 = frames[i..]
                    .iter()
                    .take_while(|(s, _)| *s < start + 3600.0)
                    .map(|(_, d)| d)
                    .sum();
                assert!(busy <= tau * 3600.0);
            }
        }
    }

    #[test]
    fn traces_satisfy_schedule_invariants() {
        for (base, scheme) in [
            (SimConfig::default(), Scheme::D2d),
            (SimConfig::default(), Scheme::D2dPsi),
            (SimConfig::default(), Scheme::GlMsf),
            (SimConfig::batched(), Scheme::D2d),
        ] {
            let cfg = SimConfig { scheme, n_ed: 200, ..base };
            let (r, t) = run_once_traced(&cfg, 21).unwrap();
            assert_eq!(r, run_once(&cfg, 21).unwrap());
            check_trace(&cfg, &r, &t);
            check_accounting(&cfg, &r);
            assert!(t.to_text().lines().count() > t.frames.len());
        }
    }

    #[test]
    fn interferers_cause_collisions() {
        let mut cfg = SimConfig {
            scheme: Scheme::Fsf(12),
            n_ed: 50,
            ..SimConfig::default()
        };
        cfg.interference.intensity_per_m2 = 1e-4;
        let (_, t) = run_once_traced(&cfg, 4).unwrap();
        assert!(t.interferers > 1000);
        assert!(t.frames.iter().any(|f| f.noise_overlaps > 0));
        assert!(t.frames.iter().map(|f| f.lost_collision).sum::<u32>() > 0);

        let quiet = quiet(cfg);
        let (_, t) = run_once_traced(&quiet, 4).unwrap();
        assert!(t.frames.iter().all(|f| f.noise_overlaps == 0 && f.lost_collision == 0));
    }
}

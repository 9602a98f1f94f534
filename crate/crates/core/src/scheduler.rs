//! Ping-slot arithmetic for the downlink superslots, duty-cycle silent periods
//! and the D2D windows placed inside them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{self, PhyParams, MAX_SF, MIN_SF};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlotPlanParams {
    /// Ping-slot duration in seconds.
    pub ping_slot_s: f64,
    /// Duty-cycle limit in percent.
    pub duty_cycle_pct: f64,
    /// Largest permitted number of superslots per D2D window.
    pub max_d2d_superslots: u32,
    /// Downlink SF of the first frame.
    pub start_sf: u8,
    /// Frames sent before the downlink SF steps up by one.
    pub frames_per_sf_step: u32,
    pub d2d_sf: u8,
    pub fragment_bytes: u32,
}

impl Default for SlotPlanParams {
    fn default() -> Self {
        Self {
            ping_slot_s: 0.03,
            duty_cycle_pct: 1.0,
            max_d2d_superslots: 20,
            start_sf: 7,
            frames_per_sf_step: 300,
            d2d_sf: 10,
            fragment_bytes: 50,
        }
    }
}

impl SlotPlanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ping_slot_s > 0.0) {
            return Err(Error::config("slots.ping_slot_s", "must be > 0"));
        }
        if !(self.duty_cycle_pct > 0.0 && self.duty_cycle_pct <= 100.0) {
            return Err(Error::config("slots.duty_cycle_pct", "must be in (0, 100]"));
        }
        if self.max_d2d_superslots < 1 {
            return Err(Error::config("slots.max_d2d_superslots", "must be >= 1"));
        }
        if !(MIN_SF..=MAX_SF).contains(&self.start_sf) {
            return Err(Error::config("slots.start_sf", "must be in 7..=12"));
        }
        if self.frames_per_sf_step < 1 {
            return Err(Error::config("slots.frames_per_sf_step", "must be >= 1"));
        }
        if !(MIN_SF..=MAX_SF).contains(&self.d2d_sf) {
            return Err(Error::config("slots.d2d_sf", "must be in 7..=12"));
        }
        if self.fragment_bytes == 0 {
            return Err(Error::config("slots.fragment_bytes", "must be >= 1"));
        }
        Ok(())
    }

    /// The same plan with the downlink pinned to `sf` for the whole session.
    pub fn with_fixed_sf(&self, sf: u8) -> Self {
        Self {
            start_sf: sf,
            frames_per_sf_step: u32::MAX,
            ..self.clone()
        }
    }
}

fn slots_for(duration_s: f64, ping_slot_s: f64) -> u32 {
    ((duration_s / ping_slot_s).ceil() as u32).max(1)
}

/// Ping slots covered by a downlink frame at `sf` (`G_p`).
pub fn downlink_superslot_len(sf: u8, plan: &SlotPlanParams, phy: &PhyParams) -> Result<u32> {
    let air = phy::airtime(sf, plan.fragment_bytes, phy)?;
    Ok(slots_for(air, plan.ping_slot_s))
}

/// Slots from the start of a downlink frame at `sf` to the start of the
/// next one under the duty-cycle limit (`W_p`).
pub fn silent_slots(sf: u8, plan: &SlotPlanParams, phy: &PhyParams) -> Result<u32> {
    let air = phy::airtime(sf, plan.fragment_bytes, phy)?;
    Ok(silent_slots_for_airtime(air, plan))
}

pub fn silent_slots_for_airtime(airtime_s: f64, plan: &SlotPlanParams) -> u32 {
    let slots = (100.0 * airtime_s / (plan.duty_cycle_pct * plan.ping_slot_s)).ceil();
    (slots as u32).max(1)
}

/// Ping slots covered by one D2D frame (`E_p`).
pub fn d2d_superslot_len(plan: &SlotPlanParams, phy: &PhyParams) -> Result<u32> {
    downlink_superslot_len(plan.d2d_sf, plan, phy)
}

/// Superslots in the D2D window following a downlink frame.
pub fn d2d_window_size(w_p: u32, g_p: u32, e_p: u32, s_star: u32) -> u32 {
    if w_p <= g_p || e_p == 0 {
        return 0;
    }
    ((w_p - g_p) / e_p).min(s_star)
}

/// Downlink SF of frame `n` under the stepped progression.
pub fn downlink_sf_at(n: u32, start_sf: u8, frames_per_step: u32) -> u8 {
    let steps = n / frames_per_step.max(1);
    let sf = u32::from(start_sf).saturating_add(steps);
    sf.min(u32::from(MAX_SF)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub sf: u8,
    pub g_p: u32,
    pub w_p: u32,
    pub e_p: u32,
    pub s_d2d: u32,
    pub start_slot: u64,
}

impl SlotEntry {
    pub fn window_start_slot(&self) -> u64 {
        self.start_slot + u64::from(self.g_p)
    }

    pub fn window_end_slot(&self) -> u64 {
        self.window_start_slot() + u64::from(self.s_d2d) * u64::from(self.e_p)
    }
}

/// Per-frame timing of a whole session.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkSlotPlan {
    pub ping_slot_s: f64,
    pub duty_cycle_pct: f64,
    pub d2d_sf: u8,
    pub d2d_airtime_s: f64,
    /// Downlink airtime per SF, indexed `sf - 7`.
    pub downlink_airtime_s: [f64; 6],
    pub frames: Vec<SlotEntry>,
}

pub fn build_slot_plan(
    max_frames: u32,
    plan: &SlotPlanParams,
    phy: &PhyParams,
) -> Result<DownlinkSlotPlan> {
    if max_frames == 0 {
        return Err(Error::config("coding.max_frames", "must be >= 1"));
    }
    plan.validate()?;
    let e_p = d2d_superslot_len(plan, phy)?;
    let mut per_sf = [(0u32, 0u32); 6];
    let mut downlink_airtime_s = [0.0; 6];
    for sf in MIN_SF..=MAX_SF {
        let i = usize::from(sf - MIN_SF);
        per_sf[i] = (
            downlink_superslot_len(sf, plan, phy)?,
            silent_slots(sf, plan, phy)?,
        );
        downlink_airtime_s[i] = phy::airtime(sf, plan.fragment_bytes, phy)?;
    }

    let mut frames = Vec::with_capacity(max_frames as usize);
    let mut start_slot = 0u64;
    for n in 0..max_frames {
        let sf = downlink_sf_at(n, plan.start_sf, plan.frames_per_sf_step);
        let (g_p, w_p) = per_sf[usize::from(sf - MIN_SF)];
        let s_d2d = d2d_window_size(w_p, g_p, e_p, plan.max_d2d_superslots);
        frames.push(SlotEntry {
            sf,
            g_p,
            w_p,
            e_p,
            s_d2d,
            start_slot,
        });
        start_slot += u64::from(w_p);
    }

    Ok(DownlinkSlotPlan {
        ping_slot_s: plan.ping_slot_s,
        duty_cycle_pct: plan.duty_cycle_pct,
        d2d_sf: plan.d2d_sf,
        d2d_airtime_s: phy::airtime(plan.d2d_sf, plan.fragment_bytes, phy)?,
        downlink_airtime_s,
        frames,
    })
}

impl DownlinkSlotPlan {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn entry(&self, n: u32) -> &SlotEntry {
        &self.frames[n as usize]
    }

    pub fn slot_time_s(&self, slot: u64) -> f64 {
        slot as f64 * self.ping_slot_s
    }

    pub fn downlink_start_s(&self, n: u32) -> f64 {
        self.slot_time_s(self.entry(n).start_slot)
    }

    pub fn downlink_airtime(&self, n: u32) -> f64 {
        self.downlink_airtime_s[usize::from(self.entry(n).sf - MIN_SF)]
    }

    pub fn superslot_start_s(&self, n: u32, superslot: u32) -> f64 {
        let e = self.entry(n);
        self.slot_time_s(e.window_start_slot() + u64::from(superslot) * u64::from(e.e_p))
    }

    /// Total slots spanned by the plan (sum of all silent periods).
    pub fn horizon_slots(&self) -> u64 {
        self.frames
            .last()
            .map_or(0, |e| e.start_slot + u64::from(e.w_p))
    }

    pub fn horizon_s(&self) -> f64 {
        self.slot_time_s(self.horizon_slots())
    }

    /// Per-frame CSV (`n,sf,G_p,W_p,E_p,S_D2D,start_slot`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,sf,G_p,W_p,E_p,S_D2D,start_slot\n");
        for (n, e) in self.frames.iter().enumerate() {
            out.push_str(&format!(
                "{n},{},{},{},{},{},{}\n",
                e.sf, e.g_p, e.w_p, e.e_p, e.s_d2d, e.start_slot
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn defaults() -> (SlotPlanParams, PhyParams) {
        (SlotPlanParams::default(), PhyParams::default())
    }

    #[test]
    fn superslot_lengths() {
        let (plan, phy) = defaults();
        // ceil(2.30195/0.03) = 77, ceil(0.575488/0.03) = 20
        assert_eq!(downlink_superslot_len(12, &plan, &phy).unwrap(), 77);
        assert_eq!(downlink_superslot_len(10, &plan, &phy).unwrap(), 20);
        assert_eq!(d2d_superslot_len(&plan, &phy).unwrap(), 20);
        let sf7 = SlotPlanParams {
            d2d_sf: 7,
            ..plan.clone()
        };
        assert_eq!(d2d_superslot_len(&sf7, &phy).unwrap(), 4);
        let wide = SlotPlanParams {
            ping_slot_s: 1.0,
            ..plan
        };
        assert_eq!(d2d_superslot_len(&wide, &phy).unwrap(), 1);
        assert_eq!(slots_for(0.06, 0.03), 2);
    }

    #[test]
    fn silent_periods() {
        let (plan, phy) = defaults();
        assert_eq!(silent_slots(12, &plan, &phy).unwrap(), 7674);
        assert_eq!(silent_slots(10, &plan, &phy).unwrap(), 1919);
        assert_eq!(silent_slots_for_airtime(2.302, &plan), 7674);
        assert_eq!(silent_slots_for_airtime(0.5755, &plan), 1919);
        let free = SlotPlanParams {
            duty_cycle_pct: 100.0,
            ..plan
        };
        assert_eq!(silent_slots_for_airtime(0.03, &free), 1);
    }

    #[test]
    fn window_sizes() {
        assert_eq!(d2d_window_size(7674, 77, 20, 20), 20);
        assert_eq!(d2d_window_size(100, 60, 20, 20), 2);
        assert_eq!(d2d_window_size(100, 100, 20, 20), 0);
        assert_eq!(d2d_window_size(90, 100, 20, 20), 0);
    }

    #[test]
    fn sf_progression() {
        assert_eq!(downlink_sf_at(0, 7, 300), 7);
        assert_eq!(downlink_sf_at(299, 7, 300), 7);
        assert_eq!(downlink_sf_at(300, 7, 300), 8);
        assert_eq!(downlink_sf_at(10_000, 7, 300), 12);
        assert_eq!(downlink_sf_at(u32::MAX, 12, 1), 12);
    }

    #[test]
    fn plan_recurrence_and_consistency() {
        let (plan, phy) = defaults();
        let p = build_slot_plan(2000, &plan, &phy).unwrap();
        assert_eq!(p.frames[1].start_slot - p.frames[0].start_slot, u64::from(p.frames[0].w_p));
        assert_eq!(p.frames[299].sf, 7);
        assert_eq!(p.frames[300].sf, 8);
        let total: u64 = p.frames.iter().map(|e| u64::from(e.w_p)).sum();
        assert_eq!(p.horizon_slots(), total);
        for (n, e) in p.frames.iter().enumerate() {
            assert_eq!(e.sf, downlink_sf_at(n as u32, 7, 300));
        }
    }

    #[test]
    fn fixed_sf_plan_never_steps() {
        let (plan, phy) = defaults();
        let p = build_slot_plan(5000, &plan.with_fixed_sf(9), &phy).unwrap();
        assert!(p.frames.iter().all(|e| e.sf == 9));
    }

    #[test]
    fn csv_dump_has_one_row_per_frame() {
        let (plan, phy) = defaults();
        let p = build_slot_plan(3, &plan, &phy).unwrap();
        let csv = p.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("n,sf,G_p,W_p,E_p,S_D2D,start_slot\n0,7,4,326,20,16,0\n"));
    }

    proptest! {
        #[test]
        fn windows_never_encroach_and_duty_cycle_holds(
            tp in 0.005..0.5f64,
            tau in 0.1..100.0f64,
            s_star in 1u32..40,
            start in 7u8..=12,
            step in 1u32..50,
            d2d_sf in 7u8..=12,
            b in 1u32..120,
        ) {
            let phy = PhyParams::default();
            let params = SlotPlanParams {
                ping_slot_s: tp,
                duty_cycle_pct: tau,
                max_d2d_superslots: s_star,
                start_sf: start,
                frames_per_sf_step: step,
                d2d_sf,
                fragment_bytes: b,
            };
            let plan = build_slot_plan(400, &params, &phy).unwrap();
            for (n, e) in plan.frames.iter().enumerate() {
                prop_assert!(u64::from(e.g_p) + u64::from(e.s_d2d) * u64::from(e.e_p) <= u64::from(e.w_p));
                if n + 1 < plan.frames.len() {
                    prop_assert!(e.window_end_slot() <= plan.frames[n + 1].start_slot);
                }
                let air = plan.downlink_airtime(n as u32);
                prop_assert!(air / (f64::from(e.w_p) * tp) <= tau / 100.0 + 1e-12);
            }
        }
    }
}

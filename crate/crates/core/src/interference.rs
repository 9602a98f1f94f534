//! External LoRa traffic: a Poisson field of pure-ALOHA interferers around the
//! gateway, each emitting Poisson frame arrivals on random SF/channel/length.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKind, Origin};
use crate::phy::{self, PhyParams, MAX_SF, MIN_SF};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterfererField {
    /// Nodes per square metre.
    pub intensity_per_m2: f64,
    /// Radius of the disk (centred on the gateway) the field covers.
    pub region_radius_m: f64,
    /// Frames per second per interferer.
    pub traffic_rate_hz: f64,
    pub min_payload_bytes: u32,
    pub max_payload_bytes: u32,
    pub channels: u8,
}

impl Default for InterfererField {
    fn default() -> Self {
        Self {
            intensity_per_m2: 1e-5,
            region_radius_m: 2000.0,
            traffic_rate_hz: 1.0 / 600.0,
            min_payload_bytes: 1,
            max_payload_bytes: 20,
            channels: 8,
        }
    }
}

impl InterfererField {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_per_m2 >= 0.0) {
            return Err(Error::config("interference.intensity_per_m2", "must be >= 0"));
        }
        if !(self.region_radius_m > 0.0) {
            return Err(Error::config("interference.region_radius_m", "must be > 0"));
        }
        if !(self.traffic_rate_hz >= 0.0) {
            return Err(Error::config("interference.traffic_rate_hz", "must be >= 0"));
        }
        if self.min_payload_bytes > self.max_payload_bytes {
            return Err(Error::config(
                "interference.min_payload_bytes",
                "must not exceed max_payload_bytes",
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("interference.channels", "must be >= 1"));
        }
        Ok(())
    }

    pub fn mean_count(&self) -> f64 {
        self.intensity_per_m2 * PI * self.region_radius_m * self.region_radius_m
    }
}

/// Uniform point on the disk of radius `radius` centred at the origin.
pub fn uniform_in_disk<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    (r * theta.cos(), r * theta.sin())
}

pub fn spawn_interferers<R: Rng + ?Sized>(field: &InterfererField, rng: &mut R) -> Vec<(f64, f64)> {
    let mean = field.mean_count();
    if mean <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(0.0) as usize;
    (0..count)
        .map(|_| uniform_in_disk(field.region_radius_m, rng))
        .collect()
}

/// Endless, time-ordered frame stream of one interferer.
pub struct InterfererTraffic<R> {
    node: u32,
    next_start: f64,
    gaps: Option<Exp<f64>>,
    min_payload: u32,
    max_payload: u32,
    channels: u8,
    power_dbm: f64,
    /// Indexed `(sf - 7) * span + (payload - min_payload)`.
    airtime: Vec<f64>,
    rng: R,
}

impl<R: Rng> InterfererTraffic<R> {
    pub fn new(node: u32, field: &InterfererField, phy: &PhyParams, mut rng: R) -> Result<Self> {
        field.validate()?;
        let gaps = if field.traffic_rate_hz > 0.0 {
            Some(
                Exp::new(field.traffic_rate_hz)
                    .map_err(|_| Error::config("interference.traffic_rate_hz", "invalid rate"))?,
            )
        } else {
            None
        };
        let mut airtime = Vec::new();
        for sf in MIN_SF..=MAX_SF {
            for b in field.min_payload_bytes..=field.max_payload_bytes {
                airtime.push(phy::airtime(sf, b, phy)?);
            }
        }
        let next_start = gaps.as_ref().map_or(f64::INFINITY, |g| g.sample(&mut rng));
        Ok(Self {
            node,
            next_start,
            gaps,
            min_payload: field.min_payload_bytes,
            max_payload: field.max_payload_bytes,
            channels: field.channels,
            power_dbm: phy.tx_power_interferer_dbm,
            airtime,
            rng,
        })
    }

    /// Start time of the frame `next` would return.
    pub fn peek_start(&self) -> f64 {
        self.next_start
    }
}

impl<R: Rng> Iterator for InterfererTraffic<R> {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        let gaps = self.gaps.as_ref()?;
        let start_s = self.next_start;
        let sf = self.rng.random_range(MIN_SF..=MAX_SF);
        let payload = self.rng.random_range(self.min_payload..=self.max_payload);
        let channel = self.rng.random_range(0..self.channels);
        let span = (self.max_payload - self.min_payload + 1) as usize;
        let duration_s = self.airtime[usize::from(sf - MIN_SF) * span + (payload - self.min_payload) as usize];
        self.next_start += gaps.sample(&mut self.rng);
        Some(Frame {
            origin: Origin::Interferer(self.node),
            kind: FrameKind::Noise,
            sf,
            channel,
            start_s,
            duration_s,
            power_dbm: self.power_dbm,
            seq: None,
            batch: None,
        })
    }
}

/// All frames interferer `node` sends in `[0, horizon_s)`, in time order.
pub fn interferer_frames<R: Rng>(
    node: u32,
    horizon_s: f64,
    field: &InterfererField,
    phy: &PhyParams,
    rng: R,
) -> Result<Vec<Frame>> {
    Ok(InterfererTraffic::new(node, field, phy, rng)?
        .take_while(|f| f.start_s < horizon_s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Kolmogorov-Smirnov statistic of `r` against the uniform-on-disk
    /// radial CDF r^2 / R^2.
    pub(crate) fn ks_radial(mut radii: Vec<f64>, radius: f64) -> f64 {
        radii.sort_by(f64::total_cmp);
        let n = radii.len() as f64;
        radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = (r / radius).powi(2);
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                (f - lo).abs().max((hi - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_intensity_spawns_nothing() {
        let field = InterfererField {
            intensity_per_m2: 0.0,
            ..InterfererField::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(spawn_interferers(&field, &mut rng).is_empty());
    }

    #[test]
    fn spawn_count_matches_poisson_mean() {
        let field = InterfererField::default();
        assert!((field.mean_count() - 125.66).abs() < 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| spawn_interferers(&field, &mut rng).len()).sum();
        let mean = total as f64 / f64::from(trials);
        assert!((mean - field.mean_count()).abs() < 2.0, "{mean}");
    }

    #[test]
    fn positions_are_uniform_on_the_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let radii: Vec<f64> = (0..100_000)
            .map(|_| {
                let (x, y) = uniform_in_disk(2000.0, &mut rng);
                x.hypot(y)
            })
            .collect();
        let d = ks_radial(radii, 2000.0);
        assert!(d < 1.628 / (100_000f64).sqrt(), "KS {d}");
    }

    #[test]
    fn frame_count_matches_rate() {
        let field = InterfererField::default();
        let phy = PhyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| interferer_frames(0, 6000.0, &field, &phy, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / f64::from(trials);
        assert!((mean - 10.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn frame_attributes_are_uniform() {
        let field = InterfererField::default();
        let phy = PhyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = interferer_frames(0, 6.0e8, &field, &phy, &mut rng).unwrap();
        assert!(frames.len() > 990_000);
        let n = frames.len() as f64;
        let mut sf = [0usize; 6];
        let mut ch = [0usize; 8];
        for f in &frames {
            sf[usize::from(f.sf - 7)] += 1;
            ch[usize::from(f.channel)] += 1;
            assert_eq!(f.power_dbm, 14.0);
        }
        for c in sf {
            let p = c as f64 / n;
            assert!((p / (1.0 / 6.0) - 1.0).abs() < 0.01, "{p}");
        }
        for c in ch {
            let p = c as f64 / n;
            assert!((p / 0.125 - 1.0).abs() < 0.01, "{p}");
        }
        assert!(frames.windows(2).all(|w| w[0].start_s <= w[1].start_s));
    }

    #[test]
    fn traffic_is_reproducible() {
        let field = InterfererField::default();
        let phy = PhyParams::default();
        let a = interferer_frames(3, 1e5, &field, &phy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = interferer_frames(3, 1e5, &field, &phy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}

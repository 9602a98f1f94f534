use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gateway,
    Ed(u32),
    Interferer(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Downlink,
    D2d,
    Noise,
}

/// One on-air transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Origin,
    pub kind: FrameKind,
    pub sf: u8,
    pub channel: u8,
    pub start_s: f64,
    pub duration_s: f64,
    pub power_dbm: f64,
    pub seq: Option<u32>,
    pub batch: Option<u32>,
}

impl Frame {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn overlaps(&self, start_s: f64, end_s: f64) -> bool {
        self.start_s < end_s && start_s < self.end_s()
    }
}

//! Named experiments: a base configuration, the schemes to compare and an
//! optional parameter sweep.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::protocol::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Maximum superslots per D2D window.
    SStar,
    NEd,
    SfD2d,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SStar => "s_star",
            SweepAxis::NEd => "n_ed",
            SweepAxis::SfD2d => "sf_d2d",
        }
    }

    pub fn apply(self, cfg: &mut SimConfig, value: u32) -> Result<()> {
        match self {
            SweepAxis::SStar => cfg.slots.max_d2d_superslots = value,
            SweepAxis::NEd => cfg.n_ed = value,
            SweepAxis::SfD2d => {
                cfg.slots.d2d_sf = u8::try_from(value)
                    .map_err(|_| Error::config("sweep.sf_d2d", format!("{value} is not a spreading factor")))?
            }
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub schemes: Vec<Scheme>,
    /// Axes are crossed; an empty list means a single point.
    pub sweep: Vec<Sweep>,
    pub config: SimConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            schemes: vec![Scheme::D2d],
            sweep: Vec::new(),
            config: SimConfig::default(),
        }
    }
}

/// One (scheme, sweep point) combination, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub scheme: Scheme,
    pub point: Vec<(SweepAxis, u32)>,
    pub config: SimConfig,
    /// File stem: `<scenario>_<scheme>[_<axis>=<value>]...`.
    pub label: String,
}

pub const PRESETS: [&str; 5] = ["fig3", "fig4", "fig5", "fig6", "table2"];

impl Scenario {
    pub fn preset(name: &str) -> Option<Self> {
        let batched = [Scheme::D2d, Scheme::Fsf(12), Scheme::GlMsf];
        let s = match name {
            "fig3" => Self {
                name: name.into(),
                schemes: vec![Scheme::D2d, Scheme::D2dPsi, Scheme::Fsf(12), Scheme::Fsf(9), Scheme::GlMsf],
                ..Self::default()
            },
            "fig4" => Self {
                name: name.into(),
                sweep: vec![
                    Sweep {
                        axis: SweepAxis::SStar,
                        values: vec![1, 2, 5, 10, 20],
                    },
                    Sweep {
                        axis: SweepAxis::NEd,
                        values: vec![200, 400, 600],
                    },
                ],
                ..Self::default()
            },
            "fig5" => Self {
                name: name.into(),
                sweep: vec![Sweep {
                    axis: SweepAxis::SfD2d,
                    values: (7..=12).collect(),
                }],
                ..Self::default()
            },
            "fig6" | "table2" => Self {
                name: name.into(),
                schemes: batched.to_vec(),
                config: SimConfig::batched(),
                ..Self::default()
            },
            _ => return None,
        };
        Some(s)
    }

    /// Every (scheme, point) run in a fixed order, each validated.
    pub fn expand(&self) -> Result<Vec<ScenarioRun>> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes", "at least one scheme is required"));
        }
        let mut points: Vec<Vec<(SweepAxis, u32)>> = vec![Vec::new()];
        for sweep in &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config(format!("sweep.{}", sweep.axis), "needs at least one value"));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    sweep.values.iter().map(move |&v| {
                        let mut p = p.clone();
                        p.push((sweep.axis, v));
                        p
                    })
                })
                .collect();
        }
        let mut runs = Vec::new();
        for &scheme in &self.schemes {
            for point in &points {
                let mut config = self.config.clone();
                config.scheme = scheme;
                for &(axis, value) in point {
                    axis.apply(&mut config, value)?;
                }
                config.validate().map_err(|e| match (e, point.is_empty()) {
                    (Error::InvalidConfig { field, reason }, false) => Error::InvalidConfig {
                        field,
                        reason: format!("{reason} (at {})", point_suffix(point)),
                    },
                    (e, _) => e,
                })?;
                let mut label = format!("{}_{}", self.name, scheme);
                if !point.is_empty() {
                    label.push('_');
                    label.push_str(&point_suffix(point));
                }
                runs.push(ScenarioRun {
                    scheme,
                    point: point.clone(),
                    config,
                    label,
                });
            }
        }
        Ok(runs)
    }
}

fn point_suffix(point: &[(SweepAxis, u32)]) -> String {
    point
        .iter()
        .map(|(a, v)| format!("{a}={v}"))
        .collect::<Vec<_>>()
        .join("_")
}

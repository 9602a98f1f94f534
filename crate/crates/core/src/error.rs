use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("spreading factor {0} outside 7..=12")]
    InvalidSpreadingFactor(u8),
    #[error("SF{0} with low data rate optimisation leaves a non-positive symbol denominator")]
    DegenerateSymbolDenominator(u8),
    #[error("link distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("gateway frame budget exhausted: frame {index} requested with M = {max}")]
    GatewayBudgetExhausted { index: u32, max: u32 },
    #[error("D2D sequence slot out of range: ed {ed} (of {n_ed}), frame {frame} (of {per_ed})")]
    SequenceOutOfRange {
        ed: u32,
        n_ed: u32,
        frame: u32,
        per_ed: u32,
    },
    #[error("invalid configuration: `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

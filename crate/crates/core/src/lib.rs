//! Online redundancy regulation for two-modality classifiers.
//!
//! The crate is a small, explicit numerical engine: MLP encoders with a
//! fused linear head and hand-written gradients ([`model`]), redundant-phase
//! monitoring ([`monitor`]), a co-information gate ([`gating`]), and
//! gradient surgery that brakes the dominant modality only in directions
//! orthogonal to its task gradient ([`regulate`]). [`trainer`] wires these
//! into a deterministic training loop with JSON-lines telemetry.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod model;
pub mod monitor;
pub mod numerics;
pub mod regulate;
pub mod telemetry;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};

/// Number of modalities handled by the engine.
pub const NUM_MODALITIES: usize = 2;

/// Modality identifier. `A` always precedes `V` in tie-breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    A,
    V,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::A, Modality::V];

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::V => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::V,
            Modality::V => Modality::A,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::V => "v",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

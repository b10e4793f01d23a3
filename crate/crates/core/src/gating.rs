//! Co-information gate: a paired-cosine proxy for shared cross-modal
//! content, a linearly rising threshold, and the three-way gate.

use serde::{Deserialize, Serialize};

use crate::config::deserialize_extended_f64;
use crate::error::{invalid, shape, Result};
use crate::numerics::{dot, matmul_bt, norm, Matrix, RngState};
use crate::{Modality, NUM_MODALITIES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    /// Redundancy threshold `R`. Accepts `"inf"` to disable the gate.
    #[serde(deserialize_with = "deserialize_extended_f64", serialize_with = "crate::config::serialize_extended_f64")]
    pub r_threshold: f64,
    /// Normalization guard for the cosine proxy.
    pub eps: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau_min: 0.2,
            tau_max: 0.5,
            r_threshold: 0.15,
            eps: 1e-8,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_min && self.tau_min < self.tau_max && self.tau_max < 1.0) {
            return Err(invalid(format!(
                "gate thresholds must satisfy 0 < tau_min < tau_max < 1, got tau_min={} tau_max={}",
                self.tau_min, self.tau_max
            )));
        }
        if self.r_threshold.is_nan() {
            return Err(invalid("gate.r_threshold must be a number"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(invalid("gate.eps must be > 0"));
        }
        Ok(())
    }
}

fn normalized_rows(z: &Matrix, eps: f64) -> Vec<Vec<f64>> {
    z.row_iter()
        .map(|r| {
            let n = norm(r);
            if n < eps {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

/// `(1/B) Σ_i ⟨ẑ_a,i, ẑ_v,i⟩` over L2-normalized rows. Rows with norm below
/// `eps` count as zero vectors. Both inputs must have the same width; see
/// [`CoinfoProxy`] for mismatched widths.
pub fn coinfo_similarity(z_a: &Matrix, z_v: &Matrix, eps: f64) -> Result<f64> {
    if z_a.rows() != z_v.rows() {
        return Err(shape(format!("co-information proxy: {} rows vs {} rows", z_a.rows(), z_v.rows())));
    }
    if z_a.cols() != z_v.cols() {
        return Err(shape(format!(
            "co-information proxy needs equal widths ({} vs {}); use CoinfoProxy",
            z_a.cols(),
            z_v.cols()
        )));
    }
    let a = normalized_rows(z_a, eps);
    let v = normalized_rows(z_v, eps);
    let total: f64 = a.iter().zip(&v).map(|(x, y)| dot(x, y)).sum();
    Ok(total / z_a.rows() as f64)
}

/// Co-information proxy with an optional fixed random projection that maps
/// the wider modality down to the narrower width.
#[derive(Clone, Debug, PartialEq)]
pub struct CoinfoProxy {
    projection: Option<(Modality, Matrix)>,
}

impl CoinfoProxy {
    pub fn new(d_a: usize, d_v: usize, rng: &mut RngState) -> Self {
        if d_a == d_v {
            return CoinfoProxy { projection: None };
        }
        let (wide, from, to) = if d_a > d_v { (Modality::A, d_a, d_v) } else { (Modality::V, d_v, d_a) };
        let scale = 1.0 / (to as f64).sqrt();
        let data = (0..to * from).map(|_| scale * rng.gaussian()).collect();
        CoinfoProxy {
            projection: Some((wide, Matrix::from_parts(to, from, data))),
        }
    }

    pub fn is_projecting(&self) -> bool {
        self.projection.is_some()
    }

    pub fn similarity(&self, z_a: &Matrix, z_v: &Matrix, eps: f64) -> Result<f64> {
        match &self.projection {
            None => coinfo_similarity(z_a, z_v, eps),
            Some((Modality::A, p)) => coinfo_similarity(&matmul_bt(z_a, p)?, z_v, eps),
            Some((Modality::V, p)) => coinfo_similarity(z_a, &matmul_bt(z_v, p)?, eps),
        }
    }
}

/// `τ(t) = τ_min + (t/T)(τ_max − τ_min)` for `0 ≤ t ≤ T`.
pub fn threshold_schedule(t: usize, total_epochs: usize, cfg: &GateConfig) -> Result<f64> {
    if total_epochs == 0 || t > total_epochs {
        return Err(invalid(format!("epoch {t} outside schedule range 0..={total_epochs}")));
    }
    Ok(cfg.tau_min + (t as f64 / total_epochs as f64) * (cfg.tau_max - cfg.tau_min))
}

/// Which of the three gate conditions hold for one modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateIndicators {
    pub is_dominant: bool,
    pub r_exceeds: bool,
    pub sim_meets_tau: bool,
}

impl GateIndicators {
    pub fn open(&self) -> bool {
        self.is_dominant && self.r_exceeds && self.sim_meets_tau
    }
}

fn indicators(m: Modality, dominant: Modality, r: f64, sim: f64, tau: f64, r_threshold: f64) -> GateIndicators {
    GateIndicators {
        is_dominant: m == dominant,
        r_exceeds: r > r_threshold,
        sim_meets_tau: sim >= tau,
    }
}

/// `1{m = dominant} · 1{r > R} · 1{sim ≥ τ}`.
pub fn gate_coefficient(m: Modality, dominant: Modality, r: f64, sim: f64, tau: f64, r_threshold: f64) -> bool {
    indicators(m, dominant, r, sim, tau, r_threshold).open()
}

/// Gate outcome for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub gate: [bool; NUM_MODALITIES],
    pub sim: f64,
    pub tau: f64,
    pub dominant: Modality,
    pub indicators: [GateIndicators; NUM_MODALITIES],
}

/// Evaluates the gate for both modalities. A missing monitor value keeps
/// that modality closed.
pub fn decide(dominant: Modality, r: [Option<f64>; NUM_MODALITIES], sim: f64, tau: f64, r_threshold: f64) -> GateDecision {
    let mut ind = [GateIndicators::default(); NUM_MODALITIES];
    for m in Modality::ALL {
        ind[m.index()] = match r[m.index()] {
            Some(rm) => indicators(m, dominant, rm, sim, tau, r_threshold),
            None => GateIndicators {
                is_dominant: m == dominant,
                r_exceeds: false,
                sim_meets_tau: sim >= tau,
            },
        };
    }
    GateDecision {
        gate: [ind[0].open(), ind[1].open()],
        sim,
        tau,
        dominant,
        indicators: ind,
    }
}

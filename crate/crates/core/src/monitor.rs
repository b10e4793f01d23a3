//! Redundant-phase monitoring.
//!
//! Each modality is tracked through its branch correct-class probability
//! (epoch means pushed into a sliding window), the growth rate of the
//! window mean, a noise-pair redundancy score of its encoder, the combined
//! monitor `r = red − γ·max(S, 0)`, and the representation-to-logit coupling
//! on a fixed probe batch. The modality with the larger window mean is
//! dominant.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::{branch_logits, encode, EncoderParams, ModelState};
use crate::numerics::{sample_gaussian, Matrix, RngState};
use crate::{Modality, NUM_MODALITIES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// Sliding-window length `L`, in epochs.
    pub window: usize,
    pub gamma: f64,
    /// Std of the paired probe noise.
    pub sigma: f64,
    pub eps: f64,
    pub probe_size: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            window: 5,
            gamma: 0.5,
            sigma: 0.05,
            eps: 1e-8,
            probe_size: 64,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(invalid(format!("monitor.window must be >= 2, got {}", self.window)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("monitor.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("monitor.sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("monitor.eps must be > 0, got {}", self.eps)));
        }
        if self.probe_size == 0 {
            return Err(invalid("monitor.probe_size must be >= 1"));
        }
        Ok(())
    }
}

/// Mean probability assigned to the true class.
pub fn batch_correct_prob(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(shape(format!("{} labels for {} probability rows", labels.len(), probs.rows())));
    }
    let k = probs.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(invalid(format!("label {y} out of range for K={k}")));
        }
        total += probs.get(i, y);
    }
    Ok(total / labels.len() as f64)
}

/// Mean of the last `window` entries of `values`.
pub fn window_mean(values: &[f64], window: usize) -> Result<f64> {
    if values.is_empty() || window == 0 {
        return Err(invalid("window mean of an empty buffer"));
    }
    let tail = &values[values.len().saturating_sub(window)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Bounded FIFO of epoch-level values.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    capacity: usize,
    values: VecDeque<f64>,
}

impl Window {
    pub fn new(capacity: usize) -> Self {
        Window {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Result<f64> {
        let v: Vec<f64> = self.values.iter().copied().collect();
        window_mean(&v, self.capacity)
    }
}

/// `S = (p̄_t − p̄_{t−1}) / (|p̄_{t−1}| + ε)`.
pub fn gain_growth_rate(pbar_t: f64, pbar_prev: f64, eps: f64) -> f64 {
    (pbar_t - pbar_prev) / (pbar_prev.abs() + eps)
}

/// `‖Z¹ − Z²‖²_F / (‖x¹ − x²‖²_F + ε)` for one pair of noisy copies of the
/// probe batch.
pub fn redundancy_score(encoder: &EncoderParams, probe_x: &Matrix, sigma: f64, eps: f64, rng: &mut RngState) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(invalid(format!("probe sigma must be > 0, got {sigma}")));
    }
    let (n, d) = probe_x.shape();
    let e1 = sample_gaussian(rng, n, d, sigma)?;
    let e2 = sample_gaussian(rng, n, d, sigma)?;
    let x1 = probe_x.add(&e1)?;
    let x2 = probe_x.add(&e2)?;
    let z1 = encode(encoder, &x1)?;
    let z2 = encode(encoder, &x2)?;
    let num = z1.sub(&z2)?.frobenius_sq();
    let den = x1.sub(&x2)?.frobenius_sq() + eps;
    Ok(num / den)
}

/// `r = red − γ·max(S, 0)`.
pub fn redundancy_monitor(red: f64, growth: f64, gamma: f64) -> f64 {
    red - gamma * growth.max(0.0)
}

/// `k = ‖f_t − f_{t−1}‖_F / (‖z_t − z_{t−1}‖_F + ε)`.
pub fn rlc_coupling(f_t: &Matrix, f_prev: &Matrix, z_t: &Matrix, z_prev: &Matrix, eps: f64) -> Result<f64> {
    let df = f_t.sub(f_prev)?.frobenius();
    let dz = z_t.sub(z_prev)?.frobenius();
    Ok(df / (dz + eps))
}

/// Latest monitor readings for one modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reading {
    /// Epoch mean of the per-batch correct-class probability.
    pub p: Option<f64>,
    pub pbar: Option<f64>,
    pub growth: Option<f64>,
    pub red: Option<f64>,
    pub r: Option<f64>,
    pub rlc: Option<f64>,
}

#[derive(Clone, Debug)]
struct ProbeSnapshot {
    z: [Matrix; NUM_MODALITIES],
    f: [Matrix; NUM_MODALITIES],
}

/// Epoch-level monitor state for both modalities.
#[derive(Clone, Debug)]
pub struct MonitorState {
    cfg: MonitorConfig,
    windows: [Window; NUM_MODALITIES],
    readings: [Reading; NUM_MODALITIES],
    previous_probe: Option<ProbeSnapshot>,
    rng: RngState,
    refreshes: usize,
}

impl MonitorState {
    /// `rng` is the monitor's own stream for probe noise.
    pub fn new(cfg: MonitorConfig, rng: RngState) -> Self {
        MonitorState {
            windows: [Window::new(cfg.window), Window::new(cfg.window)],
            readings: Default::default(),
            previous_probe: None,
            rng,
            refreshes: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn reading(&self, m: Modality) -> &Reading {
        &self.readings[m.index()]
    }

    pub fn window(&self, m: Modality) -> &Window {
        &self.windows[m.index()]
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Pushes one value into a modality's window, updating `p`, `p̄` and `S`.
    pub fn push_correct_prob(&mut self, m: Modality, p: f64) -> Result<()> {
        let i = m.index();
        let prev = self.readings[i].pbar;
        self.windows[i].push(p);
        let pbar = self.windows[i].mean()?;
        let r = &mut self.readings[i];
        r.p = Some(p);
        r.pbar = Some(pbar);
        r.growth = prev.map(|q| gain_growth_rate(pbar, q, self.cfg.eps));
        Ok(())
    }

    /// End-of-epoch refresh: windows, growth, redundancy, monitor and RLC.
    pub fn refresh(&mut self, epoch_p: [f64; NUM_MODALITIES], model: &ModelState, probe: [&Matrix; NUM_MODALITIES]) -> Result<()> {
        for m in Modality::ALL {
            self.push_correct_prob(m, epoch_p[m.index()])?;
        }
        let mut z = Vec::with_capacity(NUM_MODALITIES);
        let mut f = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let i = m.index();
            let red = redundancy_score(model.encoder(m), probe[i], self.cfg.sigma, self.cfg.eps, &mut self.rng)?;
            let zm = encode(model.encoder(m), probe[i])?;
            let fm = branch_logits(model, &zm, m)?;
            let rlc = match &self.previous_probe {
                Some(prev) => Some(rlc_coupling(&fm, &prev.f[i], &zm, &prev.z[i], self.cfg.eps)?),
                None => None,
            };
            let r = &mut self.readings[i];
            r.red = Some(red);
            r.r = r.growth.map(|s| redundancy_monitor(red, s, self.cfg.gamma));
            r.rlc = rlc;
            z.push(zm);
            f.push(fm);
        }
        let (zv, fv) = (z.pop().unwrap(), f.pop().unwrap());
        let (za, fa) = (z.pop().unwrap(), f.pop().unwrap());
        self.previous_probe = Some(ProbeSnapshot { z: [za, zv], f: [fa, fv] });
        self.refreshes += 1;
        Ok(())
    }
}

/// Argmax of the window means; ties go to `A`.
pub fn dominant_modality(state: &MonitorState) -> Result<Modality> {
    let a = state.readings[0].pbar;
    let v = state.readings[1].pbar;
    match (a, v) {
        (Some(a), Some(v)) => Ok(if v > a { Modality::V } else { Modality::A }),
        _ => Err(invalid("dominant modality needs at least one window mean per modality")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;

    fn linear(w: Matrix) -> EncoderParams {
        let n = w.rows();
        EncoderParams::new(vec![Dense { weight: w, bias: vec![0.0; n] }]).unwrap()
    }

    #[test]
    fn correct_prob_examples() {
        let onehot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(batch_correct_prob(&onehot, &[0, 1]).unwrap(), 1.0);
        let uniform = Matrix::from_vec(3, 4, vec![0.25; 12]).unwrap();
        assert_eq!(batch_correct_prob(&uniform, &[0, 3, 2]).unwrap(), 0.25);
        let p = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        assert!((batch_correct_prob(&p, &[0, 1]).unwrap() - 0.75).abs() < 1e-15);
        assert!(batch_correct_prob(&p, &[0, 2]).is_err());
    }

    #[test]
    fn window_mean_examples() {
        assert_eq!(window_mean(&[0.5], 3).unwrap(), 0.5);
        assert!((window_mean(&[0.2, 0.4, 0.6, 0.8], 3).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(window_mean(&[0.3; 7], 5).unwrap(), 0.3);
        assert!(window_mean(&[], 3).is_err());

        let mut w = Window::new(3);
        for v in [0.2, 0.4, 0.6, 0.8] {
            w.push(v);
        }
        assert_eq!(w.len(), 3);
        assert!((w.mean().unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn growth_rate_examples() {
        assert_eq!(gain_growth_rate(0.4, 0.4, 1e-8), 0.0);
        assert!((gain_growth_rate(0.55, 0.50, 1e-8) - 0.1).abs() < 1e-7);
        assert!((gain_growth_rate(0.1, 0.0, 1e-8) - 1e7).abs() < 1e-3);
    }

    #[test]
    fn monitor_formula() {
        assert!((redundancy_monitor(0.3, -0.2, 0.5) - 0.3).abs() < 1e-15);
        assert!((redundancy_monitor(0.3, 0.2, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(redundancy_monitor(0.3, 5.0, 0.0), 0.3);
    }

    #[test]
    fn redundancy_identity_and_scaling() {
        let mut rng = RngState::new(3);
        let x = sample_gaussian(&mut rng, 64, 16, 1.0).unwrap();
        let red = redundancy_score(&linear(Matrix::identity(16)), &x, 0.05, 1e-8, &mut rng).unwrap();
        assert!((red - 1.0).abs() <= 1e-8, "{red}");
        for c in [0.5, 2.0, 3.0] {
            let enc = linear(Matrix::identity(16).scale(c).unwrap());
            let red = redundancy_score(&enc, &x, 0.05, 1e-8, &mut rng).unwrap();
            assert!((red - c * c).abs() / (c * c) <= 0.02, "c={c} red={red}");
        }
        assert!(redundancy_score(&linear(Matrix::identity(16)), &x, 0.0, 1e-8, &mut rng).is_err());
    }

    #[test]
    fn redundancy_is_rotation_invariant() {
        let mut rng = RngState::new(17);
        let enc = EncoderParams::init(6, &[8], 4, &mut rng);
        // Orthogonal 4x4 from two Givens rotations.
        let (c1, s1) = (0.3f64.cos(), 0.3f64.sin());
        let (c2, s2) = (1.1f64.cos(), 1.1f64.sin());
        let g1 = Matrix::from_rows(&[vec![c1, -s1, 0.0, 0.0], vec![s1, c1, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let g2 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, c2, 0.0, -s2], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, s2, 0.0, c2]]).unwrap();
        let q = crate::numerics::matmul(&g1, &g2).unwrap();
        let rotated = enc.compose_output(&q).unwrap();
        let x = sample_gaussian(&mut rng, 32, 6, 1.0).unwrap();
        let noise = RngState::new(99);
        let a = redundancy_score(&enc, &x, 0.05, 1e-8, &mut noise.clone()).unwrap();
        let b = redundancy_score(&rotated, &x, 0.05, 1e-8, &mut noise.clone()).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn rlc_examples() {
        let mut rng = RngState::new(4);
        let f = sample_gaussian(&mut rng, 5, 3, 1.0).unwrap();
        let z0 = sample_gaussian(&mut rng, 5, 4, 1.0).unwrap();
        let z1 = sample_gaussian(&mut rng, 5, 4, 1.0).unwrap();
        assert_eq!(rlc_coupling(&f, &f, &z1, &z0, 1e-8).unwrap(), 0.0);
        assert_eq!(rlc_coupling(&f, &f, &z0, &z0, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn dominance_and_ties() {
        let mut st = MonitorState::new(MonitorConfig::default(), RngState::new(0));
        assert!(dominant_modality(&st).is_err());
        st.push_correct_prob(Modality::A, 0.6).unwrap();
        st.push_correct_prob(Modality::V, 0.4).unwrap();
        assert_eq!(dominant_modality(&st).unwrap(), Modality::A);

        let mut tie = MonitorState::new(MonitorConfig::default(), RngState::new(0));
        tie.push_correct_prob(Modality::A, 0.5).unwrap();
        tie.push_correct_prob(Modality::V, 0.5).unwrap();
        assert_eq!(dominant_modality(&tie).unwrap(), Modality::A);
    }

    #[test]
    fn dominance_flips_when_window_means_cross() {
        let cfg = MonitorConfig { window: 2, ..Default::default() };
        let mut st = MonitorState::new(cfg, RngState::new(0));
        let trace = [(0.6, 0.3), (0.5, 0.5), (0.4, 0.9), (0.4, 0.9)];
        let mut seen = Vec::new();
        for (a, v) in trace {
            st.push_correct_prob(Modality::A, a).unwrap();
            st.push_correct_prob(Modality::V, v).unwrap();
            seen.push(dominant_modality(&st).unwrap());
        }
        // Window means: (0.6,0.3) (0.55,0.4) (0.45,0.7) (0.4,0.9).
        assert_eq!(seen, vec![Modality::A, Modality::A, Modality::V, Modality::V]);
    }

    #[test]
    fn growth_needs_two_means() {
        let mut st = MonitorState::new(MonitorConfig::default(), RngState::new(0));
        st.push_correct_prob(Modality::A, 0.5).unwrap();
        assert_eq!(st.reading(Modality::A).growth, None);
        st.push_correct_prob(Modality::A, 0.7).unwrap();
        let s = st.reading(Modality::A).growth.unwrap();
        assert!((s - gain_growth_rate(0.6, 0.5, 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(MonitorConfig::default().validate().is_ok());
        assert!(MonitorConfig { window: 1, ..Default::default() }.validate().is_err());
        assert!(MonitorConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(MonitorConfig { sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(MonitorConfig { gamma: -0.1, ..Default::default() }.validate().is_err());
    }
}

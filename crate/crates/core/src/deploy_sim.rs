//! Duty-cycle energy model of the edge node and a simple link-latency model.
//!
//! Per beat period `T` the node infers for `t_infer`, transmits a forwarded
//! payload for `t_tx` with probability `f`, and sleeps otherwise:
//!
//! `I = (t_infer * i_infer + f * t_tx * i_tx + (T - t_infer - f * t_tx) * i_sleep) / T`
//!
//! The forward fraction comes from the edge exit rate through an affine
//! [`FractionMapping`], fitted by [`calibrate`] against measured currents.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io_util::fmt_sig9;

/// Thresholds at which the reference currents below were measured.
pub const REFERENCE_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
/// Measured average current (mA) of the gated edge node, broadcast radio mode.
pub const REFERENCE_OURS_BROADCAST: [f64; 5] = [0.79, 0.80, 0.82, 0.86, 0.94];
/// Measured average current (mA) of the gated edge node, connected radio mode.
pub const REFERENCE_OURS_CONNECTED: [f64; 5] = [1.07, 1.16, 1.28, 1.71, 1.79];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxMode {
    Connected,
    Broadcast,
}

impl TxMode {
    pub const ALL: [TxMode; 2] = [TxMode::Broadcast, TxMode::Connected];

    pub fn name(self) -> &'static str {
        match self {
            TxMode::Connected => "connected",
            TxMode::Broadcast => "broadcast",
        }
    }
}

/// Currents in mA, times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerProfile {
    pub i_sleep: f64,
    pub i_infer: f64,
    pub i_tx_connected: f64,
    pub i_tx_broadcast: f64,
    pub t_infer: f64,
    pub t_tx: f64,
    pub beat_period: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            i_sleep: 0.58,
            i_infer: 0.74,
            i_tx_connected: 3.66,
            i_tx_broadcast: 3.20,
            t_infer: 0.05,
            t_tx: 0.2,
            beat_period: 1.0,
        }
    }
}

impl PowerProfile {
    pub fn validate(&self) -> Result<()> {
        let currents = [self.i_sleep, self.i_infer, self.i_tx_connected, self.i_tx_broadcast];
        if currents.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return invalid("currents must be positive");
        }
        if self.i_sleep > self.i_infer {
            return invalid("sleep current exceeds inference current");
        }
        let times = [self.t_infer, self.t_tx, self.beat_period];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.beat_period <= 0.0 {
            return invalid("times must be non-negative and the beat period positive");
        }
        if self.t_infer + self.t_tx > self.beat_period {
            return invalid("t_infer + t_tx exceeds the beat period");
        }
        Ok(())
    }

    pub fn i_tx(&self, mode: TxMode) -> f64 {
        match mode {
            TxMode::Connected => self.i_tx_connected,
            TxMode::Broadcast => self.i_tx_broadcast,
        }
    }

    /// Current with nothing forwarded.
    pub fn base_current(&self) -> f64 {
        (self.t_infer * self.i_infer + (self.beat_period - self.t_infer) * self.i_sleep) / self.beat_period
    }

    /// Extra current per unit of forward fraction.
    pub fn tx_slope(&self, mode: TxMode) -> f64 {
        self.t_tx * (self.i_tx(mode) - self.i_sleep) / self.beat_period
    }
}

pub fn average_current(profile: &PowerProfile, forward_fraction: f64, mode: TxMode) -> Result<f64> {
    profile.validate()?;
    if !(0.0..=1.0).contains(&forward_fraction) {
        return invalid(format!("forward fraction {forward_fraction} outside [0, 1]"));
    }
    let p = profile;
    let tx = forward_fraction * p.t_tx;
    Ok((p.t_infer * p.i_infer + tx * p.i_tx(mode) + (p.beat_period - p.t_infer - tx) * p.i_sleep) / p.beat_period)
}

/// `f = clamp(offset + gain * dtc, 0, 1)` where `dtc = 1 - edge exit rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionMapping {
    pub offset: f64,
    pub gain: f64,
}

impl Default for FractionMapping {
    fn default() -> Self {
        Self { offset: 0.0, gain: 1.0 }
    }
}

impl FractionMapping {
    pub fn fraction(&self, edge_exit_rate: f64) -> f64 {
        (self.offset + self.gain * (1.0 - edge_exit_rate)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mode: TxMode,
    pub mapping: FractionMapping,
    pub modeled: Vec<f64>,
    pub target: Vec<f64>,
    /// Largest `|modeled - target| / target`.
    pub max_relative_error: f64,
}

/// Least-squares fit of the fraction mapping so the modeled current tracks
/// `target` at the given edge exit rates. `t_tx` stays as set in `profile`.
pub fn calibrate(profile: &PowerProfile, mode: TxMode, edge_exit_rates: &[f64], target: &[f64]) -> Result<Calibration> {
    profile.validate()?;
    if edge_exit_rates.len() != target.len() || target.is_empty() {
        return invalid("calibration needs one exit rate per target current");
    }
    let slope = profile.tx_slope(mode);
    if slope <= 0.0 {
        return invalid("calibration needs t_tx > 0 and i_tx above i_sleep");
    }
    // Fit target - base = slope * (offset + gain * d) by ordinary least squares.
    let base = profile.base_current();
    let n = target.len() as f64;
    let d: Vec<f64> = edge_exit_rates.iter().map(|r| 1.0 - r).collect();
    let y: Vec<f64> = target.iter().map(|t| (t - base) / slope).collect();
    let (dm, ym) = (d.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sdd: f64 = d.iter().map(|x| (x - dm).powi(2)).sum();
    let sdy: f64 = d.iter().zip(&y).map(|(x, v)| (x - dm) * (v - ym)).sum();
    let mapping = if sdd > 1e-15 {
        let gain = sdy / sdd;
        FractionMapping { offset: ym - gain * dm, gain }
    } else {
        // Constant exit rate: minimum-norm solution of offset + gain * d = ym.
        let s = 1.0 + dm * dm;
        FractionMapping { offset: ym / s, gain: ym * dm / s }
    };
    let modeled = edge_exit_rates
        .iter()
        .map(|&r| average_current(profile, mapping.fraction(r), mode))
        .collect::<Result<Vec<_>>>()?;
    let max_relative_error = modeled
        .iter()
        .zip(target)
        .map(|(m, t)| ((m - t) / t).abs())
        .fold(0.0, f64::max);
    Ok(Calibration {
        mode,
        mapping,
        modeled,
        target: target.to_vec(),
        max_relative_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCurrents {
    pub mode: TxMode,
    /// Average current of the gated node, one per threshold.
    pub ours: Vec<f64>,
    /// Current under continuous transmission.
    pub continuous: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSavings {
    pub mode: TxMode,
    pub ours: Vec<f64>,
    pub continuous: f64,
    pub mean_ours: f64,
    /// `1 - mean(ours) / continuous`.
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub thresholds: Vec<f64>,
    pub inference_only_ma: f64,
    pub sleep_ma: f64,
    pub modes: Vec<ModeSavings>,
    /// `1 - sum(mean ours) / sum(continuous)` over the modes.
    pub pooled_savings: f64,
}

pub fn savings_report(thresholds: &[f64], modes: &[ModeCurrents], profile: &PowerProfile) -> Result<EnergyReport> {
    if modes.is_empty() || thresholds.is_empty() {
        return invalid("savings report needs thresholds and at least one mode");
    }
    if let Some(m) = modes.iter().find(|m| m.ours.len() != thresholds.len()) {
        return invalid(format!(
            "{} mode has {} currents for {} thresholds",
            m.mode.name(),
            m.ours.len(),
            thresholds.len()
        ));
    }
    let modes: Vec<ModeSavings> = modes
        .iter()
        .map(|m| {
            let mean_ours = m.ours.iter().sum::<f64>() / m.ours.len() as f64;
            ModeSavings {
                mode: m.mode,
                ours: m.ours.clone(),
                continuous: m.continuous,
                mean_ours,
                savings: 1.0 - mean_ours / m.continuous,
            }
        })
        .collect();
    let pooled_savings =
        1.0 - modes.iter().map(|m| m.mean_ours).sum::<f64>() / modes.iter().map(|m| m.continuous).sum::<f64>();
    Ok(EnergyReport {
        thresholds: thresholds.to_vec(),
        inference_only_ma: profile.i_infer,
        sleep_ma: profile.i_sleep,
        modes,
        pooled_savings,
    })
}

/// The measured gated currents of both modes, with continuous transmission
/// taken from `profile`.
pub fn reference_currents(profile: &PowerProfile) -> Vec<ModeCurrents> {
    [(TxMode::Broadcast, REFERENCE_OURS_BROADCAST), (TxMode::Connected, REFERENCE_OURS_CONNECTED)]
        .into_iter()
        .map(|(mode, ours)| ModeCurrents { mode, ours: ours.to_vec(), continuous: profile.i_tx(mode) })
        .collect()
}

/// Model both radio modes from per-threshold edge exit rates.
pub fn model_report(
    profile: &PowerProfile,
    mapping: &FractionMapping,
    thresholds: &[f64],
    edge_exit_rates: &[f64],
) -> Result<EnergyReport> {
    if thresholds.len() != edge_exit_rates.len() {
        return invalid("one exit rate per threshold is required");
    }
    let modes = TxMode::ALL
        .iter()
        .map(|&mode| {
            Ok(ModeCurrents {
                mode,
                ours: edge_exit_rates
                    .iter()
                    .map(|&r| average_current(profile, mapping.fraction(r), mode))
                    .collect::<Result<_>>()?,
                continuous: profile.i_tx(mode),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    savings_report(thresholds, &modes, profile)
}

impl EnergyReport {
    /// `threshold,mode,ours_mA,continuous_mA,savings_pct`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "mode", "ours_mA", "continuous_mA", "savings_pct"])?;
        for m in &self.modes {
            for (t, i) in self.thresholds.iter().zip(&m.ours) {
                w.write_record([
                    fmt_sig9(*t),
                    m.mode.name().to_string(),
                    fmt_sig9(*i),
                    fmt_sig9(m.continuous),
                    fmt_sig9(100.0 * (1.0 - i / m.continuous)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed delay plus serialization time for one stage boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub delay_s: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        // Roughly a BLE link.
        Self {
            delay_s: 0.0075,
            bandwidth_bytes_per_s: 125_000.0,
        }
    }
}

impl LinkModel {
    pub fn transfer_time(&self, bytes: usize) -> f64 {
        self.delay_s + bytes as f64 / self.bandwidth_bytes_per_s
    }
}

/// Link time of a beat emitted at `exit_stage`, crossing one boundary per
/// earlier stage. `payloads[i]` is the bytes sent across boundary `i`.
pub fn beat_latency(links: &[LinkModel], payloads: &[usize], exit_stage: usize) -> Result<f64> {
    if exit_stage > links.len() || links.len() != payloads.len() {
        return invalid("one link and payload per crossed boundary is required");
    }
    Ok(links[..exit_stage]
        .iter()
        .zip(payloads)
        .map(|(l, &b)| l.transfer_time(b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_only_boundary() {
        let p = PowerProfile {
            t_infer: 1.0,
            t_tx: 0.0,
            ..PowerProfile::default()
        };
        assert_eq!(average_current(&p, 0.0, TxMode::Broadcast).unwrap(), 0.74);
    }

    #[test]
    fn continuous_transmission_bound() {
        for (mode, bound) in [(TxMode::Broadcast, 3.20), (TxMode::Connected, 3.66)] {
            let mut prev = f64::INFINITY;
            for t_infer in [1e-3, 1e-6, 1e-9] {
                let p = PowerProfile {
                    t_infer,
                    t_tx: 1.0 - t_infer,
                    ..PowerProfile::default()
                };
                let err = (average_current(&p, 1.0, mode).unwrap() - bound).abs();
                assert!(err < prev);
                prev = err;
            }
            assert!(prev < 1e-8);
        }
    }

    #[test]
    fn closed_form_hand_evaluation() {
        let p = PowerProfile::default();
        // f = 0.3 + 0.5 * (1 - 0.6) = 0.5; 0.05*0.74 + 0.1*3.2 + 0.85*0.58.
        let f = FractionMapping { offset: 0.3, gain: 0.5 }.fraction(0.6);
        let hand = 0.037 + 0.32 + 0.493;
        let got = average_current(&p, f, TxMode::Broadcast).unwrap();
        assert!(((got - hand) / hand).abs() < 1e-12);
    }

    #[test]
    fn fraction_bounds_and_profile_checks() {
        let p = PowerProfile::default();
        assert!(average_current(&p, 1.1, TxMode::Connected).is_err());
        assert!(average_current(&p, -0.1, TxMode::Connected).is_err());
        let bad = PowerProfile { t_tx: 0.99, ..p };
        assert!(bad.validate().is_err());
        let bad = PowerProfile { i_sleep: 1.0, ..p };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_savings() {
        let p = PowerProfile::default();
        let r = savings_report(
            &REFERENCE_THRESHOLDS,
            &[
                ModeCurrents { mode: TxMode::Broadcast, ours: REFERENCE_OURS_BROADCAST.to_vec(), continuous: 3.20 },
                ModeCurrents { mode: TxMode::Connected, ours: REFERENCE_OURS_CONNECTED.to_vec(), continuous: 3.66 },
            ],
            &p,
        )
        .unwrap();
        assert!((r.modes[0].savings - (1.0 - 0.842 / 3.20)).abs() < 1e-12);
        assert!((r.modes[1].savings - (1.0 - 1.402 / 3.66)).abs() < 1e-12);
        assert!((r.pooled_savings - (1.0 - 2.244 / 6.86)).abs() < 1e-12);
        let same = savings_report(
            &[0.5, 0.6],
            &[ModeCurrents { mode: TxMode::Broadcast, ours: vec![3.2, 3.2], continuous: 3.2 }],
            &p,
        )
        .unwrap();
        assert_eq!(same.modes[0].savings, 0.0);
        let short = [ModeCurrents { mode: TxMode::Broadcast, ours: vec![1.0], continuous: 3.2 }];
        assert!(savings_report(&[0.5, 0.6], &short, &p).is_err());
    }

    #[test]
    fn calibration_recovers_a_known_mapping() {
        let p = PowerProfile::default();
        let truth = FractionMapping { offset: 0.4, gain: 0.5 };
        let rates = [0.95, 0.9, 0.8, 0.6, 0.3];
        let target: Vec<f64> = rates
            .iter()
            .map(|&r| average_current(&p, truth.fraction(r), TxMode::Broadcast).unwrap())
            .collect();
        let c = calibrate(&p, TxMode::Broadcast, &rates, &target).unwrap();
        assert!((c.mapping.offset - 0.4).abs() < 1e-9);
        assert!((c.mapping.gain - 0.5).abs() < 1e-9);
        assert!(c.max_relative_error < 1e-12);
        let flat = calibrate(&p, TxMode::Broadcast, &[1.0; 5], &REFERENCE_OURS_BROADCAST).unwrap();
        assert!(flat.max_relative_error < 0.15);
    }

    #[test]
    fn latency_sums_crossed_boundaries() {
        let links = [LinkModel { delay_s: 0.01, bandwidth_bytes_per_s: 1000.0 }; 2];
        assert_eq!(beat_latency(&links, &[64, 64], 0).unwrap(), 0.0);
        assert!((beat_latency(&links, &[64, 32], 2).unwrap() - (0.01 + 0.064 + 0.01 + 0.032)).abs() < 1e-15);
        assert!(beat_latency(&links, &[64, 64], 3).is_err());
    }

    #[test]
    fn energy_csv_rows() {
        let r = model_report(&PowerProfile::default(), &FractionMapping::default(), &[0.5, 0.9], &[0.9, 0.5]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "threshold,mode,ours_mA,continuous_mA,savings_pct");
        assert_eq!(text.lines().count(), 5);
    }
}

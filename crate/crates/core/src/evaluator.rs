//! Threshold sweeps and system-level metrics.
//!
//! Each beat is scored by the label emitted at its actual exit. Sensitivity is
//! the macro-averaged recall over the classes present in the evaluation set.
//! FLOPs are per-beat averages and include exit-head and encoder costs; the
//! efficiency rate divides them by the exit-free backbone FLOPs. The baseline
//! accuracy and sensitivity are those of the same model's final head.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::beatset::{BeatRecord, BEAT_LEN};
use crate::cascade::{batch_from, decide, BeatProfile, Cascade, ExitDecision};
use crate::error::{invalid, Error, Result};
use crate::io_util::{fmt_sig9, round_sig9};

/// Bytes of a raw `f32` beat, the reference for transmission savings.
pub const RAW_BEAT_BYTES: usize = BEAT_LEN * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub system_accuracy: f64,
    pub system_sensitivity: f64,
    /// Fraction of beats reaching the final stage.
    pub dtc: f64,
    /// One rate per exit.
    pub exit_rate: Vec<f64>,
    /// Mean FLOPs per beat.
    pub total_flops: f64,
    pub efficiency_rate: f64,
    pub bytes_per_beat: f64,
    pub transmission_savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub placement: Vec<usize>,
    pub baseline_flops: u64,
    pub baseline_accuracy: f64,
    pub baseline_sensitivity: f64,
    pub raw_beat_bytes: usize,
    pub num_beats: usize,
    pub points: Vec<SweepPoint>,
}

/// Parse `start:end:step` into an inclusive grid, e.g. `0:1:0.01` gives 101 values.
pub fn parse_threshold_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad threshold grid {spec:?}")))
        })
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return invalid(format!("threshold grid {spec:?} must be start:end:step"));
    };
    if !(step > 0.0 && start <= end && step.is_finite()) {
        return invalid(format!("threshold grid {spec:?} needs start <= end and step > 0"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| round_sig9(start + i as f64 * step)).collect();
    check_thresholds(&grid)?;
    Ok(grid)
}

/// The 101-point grid `0.00, 0.01, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_thresholds(ts: &[f64]) -> Result<()> {
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return invalid(format!("threshold {t} outside [0, 1]"));
    }
    Ok(())
}

/// Macro-averaged recall from `(predicted, actual)` class-index pairs.
/// Classes that never occur as `actual` are left out of the average.
pub fn macro_recall(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<f64> {
    let mut hits = Vec::<usize>::new();
    let mut totals = Vec::<usize>::new();
    for (pred, actual) in pairs {
        if actual >= totals.len() {
            totals.resize(actual + 1, 0);
            hits.resize(actual + 1, 0);
        }
        totals[actual] += 1;
        if pred == actual {
            hits[actual] += 1;
        }
    }
    let present: Vec<f64> = totals
        .iter()
        .zip(&hits)
        .filter(|(t, _)| **t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    if present.is_empty() {
        return invalid("sensitivity needs at least one decision");
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn sensitivity(decisions: &[ExitDecision]) -> Result<f64> {
    macro_recall(decisions.iter().map(|d| (d.predicted_class.index(), d.true_class.index())))
}

pub fn transmission_savings(bytes_per_beat: f64, raw_beat_bytes: usize) -> Result<f64> {
    if raw_beat_bytes == 0 {
        return invalid("raw beat size must be positive");
    }
    Ok(1.0 - bytes_per_beat / raw_beat_bytes as f64)
}

/// Aggregate one threshold's decisions into a [`SweepPoint`].
pub fn sweep_point(
    threshold: f64,
    decisions: &[ExitDecision],
    num_stages: usize,
    baseline_flops: u64,
    raw_beat_bytes: usize,
) -> Result<SweepPoint> {
    if decisions.is_empty() {
        return invalid("no decisions to aggregate");
    }
    let n = decisions.len() as f64;
    let batch = batch_from(decisions.to_vec(), num_stages);
    let rates = batch.exit_rates();
    let total_flops = decisions.iter().map(|d| d.flops as f64).sum::<f64>() / n;
    let bytes_per_beat = decisions.iter().map(|d| d.bytes as f64).sum::<f64>() / n;
    Ok(SweepPoint {
        threshold,
        system_accuracy: decisions.iter().filter(|d| d.correct()).count() as f64 / n,
        system_sensitivity: sensitivity(decisions)?,
        dtc: rates[num_stages - 1],
        exit_rate: rates[..num_stages - 1].to_vec(),
        total_flops,
        efficiency_rate: total_flops / baseline_flops as f64,
        bytes_per_beat,
        transmission_savings: transmission_savings(bytes_per_beat, raw_beat_bytes)?,
    })
}

/// Run every head once per beat; thresholds are applied afterwards.
pub fn profile_all(cascade: &Cascade, beats: &[BeatRecord]) -> Result<Vec<BeatProfile>> {
    beats.iter().map(|b| cascade.profile(b)).collect()
}

/// Decisions for one uniform threshold applied at every exit.
pub fn decisions_at(profiles: &[BeatProfile], threshold: f64) -> Vec<ExitDecision> {
    let exits = profiles.first().map_or(0, |p| p.heads.len() - 1);
    let th = vec![threshold; exits];
    profiles.iter().map(|p| decide(p, &th)).collect()
}

pub fn sweep_profiles(
    profiles: &[BeatProfile],
    thresholds: &[f64],
    placement: &[usize],
    baseline_flops: u64,
) -> Result<SweepReport> {
    if profiles.is_empty() {
        return invalid("sweep needs at least one beat");
    }
    check_thresholds(thresholds)?;
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("thresholds must be strictly increasing");
    }
    let stages = profiles[0].heads.len();
    let finals = decisions_at(profiles, 1.0);
    let baseline_accuracy = finals.iter().filter(|d| d.correct()).count() as f64 / finals.len() as f64;
    let points = thresholds
        .iter()
        .map(|&t| sweep_point(t, &decisions_at(profiles, t), stages, baseline_flops, RAW_BEAT_BYTES))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        placement: placement.to_vec(),
        baseline_flops,
        baseline_accuracy,
        baseline_sensitivity: sensitivity(&finals)?,
        raw_beat_bytes: RAW_BEAT_BYTES,
        num_beats: profiles.len(),
        points,
    })
}

/// Sweep a uniform threshold over `thresholds` on `beats`.
pub fn sweep(cascade: &Cascade, beats: &[BeatRecord], thresholds: &[f64], placement: &[usize]) -> Result<SweepReport> {
    check_thresholds(thresholds)?;
    let profiles = profile_all(cascade, beats)?;
    sweep_profiles(&profiles, thresholds, placement, cascade.baseline_flops())
}

impl SweepPoint {
    fn rounded(&self) -> Self {
        Self {
            threshold: round_sig9(self.threshold),
            system_accuracy: round_sig9(self.system_accuracy),
            system_sensitivity: round_sig9(self.system_sensitivity),
            dtc: round_sig9(self.dtc),
            exit_rate: self.exit_rate.iter().map(|&r| round_sig9(r)).collect(),
            total_flops: round_sig9(self.total_flops),
            efficiency_rate: round_sig9(self.efficiency_rate),
            bytes_per_beat: round_sig9(self.bytes_per_beat),
            transmission_savings: round_sig9(self.transmission_savings),
        }
    }
}

impl SweepReport {
    /// Copy with every float rounded to 9 significant digits, as exported.
    pub fn rounded(&self) -> Self {
        Self {
            baseline_accuracy: round_sig9(self.baseline_accuracy),
            baseline_sensitivity: round_sig9(self.baseline_sensitivity),
            points: self.points.iter().map(SweepPoint::rounded).collect(),
            ..self.clone()
        }
    }

    pub fn point_at(&self, threshold: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.threshold - threshold).abs() < 1e-9)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let exits = self.placement.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["threshold".to_string(), "system_accuracy".into(), "system_sensitivity".into(), "dtc".into()];
        header.extend((1..=exits).map(|i| format!("exit_rate_{i}")));
        header.extend(
            ["total_flops", "efficiency_rate", "bytes_per_beat", "transmission_savings"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![
                fmt_sig9(p.threshold),
                fmt_sig9(p.system_accuracy),
                fmt_sig9(p.system_sensitivity),
                fmt_sig9(p.dtc),
            ];
            row.extend(p.exit_rate.iter().map(|&r| fmt_sig9(r)));
            row.extend([p.total_flops, p.efficiency_rate, p.bytes_per_beat, p.transmission_savings].map(fmt_sig9));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beatset::generate_synthetic;
    use crate::exit_graph::{attach_exits, ExitPlacement};
    use crate::nn::{default_backbone, ParamStore};
    use crate::trainer::evaluate_heads;

    fn cascade(boundaries: Vec<usize>) -> (Cascade, crate::exit_graph::ExitModel<f32>) {
        let bb = default_backbone();
        let p = ParamStore::init(&bb, 11);
        let m = attach_exits(&bb, &p, &ExitPlacement::new(boundaries, 6).unwrap(), 16, 12).unwrap();
        (Cascade::from_model(&m).unwrap(), m)
    }

    #[test]
    fn grid_parsing() {
        let g = parse_threshold_grid("0:1:0.01").unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g, default_thresholds());
        assert_eq!(parse_threshold_grid("0.5:0.9:0.1").unwrap(), vec![0.5, 0.6, 0.7, 0.8, 0.9]);
        assert!(parse_threshold_grid("0:2:0.5").is_err());
        assert!(parse_threshold_grid("0:1").is_err());
        assert!(parse_threshold_grid("0:1:0").is_err());
    }

    #[test]
    fn macro_recall_examples() {
        let all_n: Vec<(usize, usize)> = (0..5).flat_map(|c| (0..4).map(move |_| (0, c))).collect();
        assert!((macro_recall(all_n).unwrap() - 0.2).abs() < 1e-15);
        let mut pairs = vec![(0, 0); 9];
        pairs.push((1, 0));
        pairs.extend([(0, 1); 2]);
        pairs.extend([(1, 1); 8]);
        assert!((macro_recall(pairs).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(macro_recall((0..3).map(|c| (c, c))).unwrap(), 1.0);
        assert!(macro_recall(std::iter::empty()).is_err());
    }

    #[test]
    fn savings_arithmetic() {
        assert_eq!(transmission_savings(0.0, 1040).unwrap(), 1.0);
        assert!((transmission_savings(64.0, 1040).unwrap() - (1.0 - 64.0 / 1040.0)).abs() < 1e-15);
        assert!((transmission_savings(0.1 * 64.0, 1040).unwrap() - 0.993846).abs() < 1e-6);
        assert!(transmission_savings(1.0, 0).is_err());
    }

    #[test]
    fn boundary_thresholds_match_head_metrics() {
        let (c, m) = cascade(vec![2]);
        let beats = generate_synthetic(8, 3, 0.05).unwrap();
        let r = sweep(&c, &beats, &[0.0, 1.0], &[2]).unwrap();
        let heads = evaluate_heads(&m, &beats).unwrap();
        let (p0, p1) = (&r.points[0], &r.points[1]);
        assert_eq!(p0.exit_rate, vec![1.0]);
        assert_eq!(p0.dtc, 0.0);
        assert_eq!(p0.system_accuracy, heads.accuracy[0]);
        let b = &m.branches()[0];
        assert_eq!(p0.total_flops, (m.backbone().flops_in(0..b.cut) + b.head_flops()) as f64);
        assert!(p0.efficiency_rate < 1.0);
        assert_eq!(p1.dtc, 1.0);
        assert_eq!(p1.system_accuracy, heads.accuracy[1]);
        assert_eq!(p1.system_accuracy, r.baseline_accuracy);
        assert_eq!(p1.system_sensitivity, r.baseline_sensitivity);
        assert!(p1.efficiency_rate > 1.0);
        assert_eq!(p1.bytes_per_beat, 64.0);
    }

    #[test]
    fn dual_exit_rates_conserve() {
        let (c, _) = cascade(vec![1, 4]);
        let beats = generate_synthetic(4, 1, 0.05).unwrap();
        let r = sweep(&c, &beats, &default_thresholds(), &[1, 4]).unwrap();
        assert_eq!(r.points.len(), 101);
        for p in &r.points {
            assert!((p.exit_rate.iter().sum::<f64>() + p.dtc - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_one_row_per_threshold() {
        let (c, _) = cascade(vec![2]);
        let beats = generate_synthetic(2, 1, 0.05).unwrap();
        let r = sweep(&c, &beats, &default_thresholds(), &[2]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 102);
        assert!(text.starts_with("threshold,system_accuracy,system_sensitivity,dtc,exit_rate_1,total_flops"));
        assert!(sweep(&c, &beats, &[0.5, 1.5], &[2]).is_err());
        assert!(sweep(&c, &[], &[0.5], &[2]).is_err());
    }
}

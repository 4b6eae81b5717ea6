//! Staged execution with confidence gating.
//!
//! In gated mode each non-final stage runs its body and exit head; the beat
//! leaves when the top class probability is strictly above that exit's
//! threshold, otherwise the encoder output is forwarded. The final stage always
//! emits. Pass-through mode skips every head and codec and must reproduce the
//! monolithic backbone exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::beatset::{AamiClass, BeatRecord};
use crate::error::{invalid, Error, Result};
use crate::exit_graph::{build_stages, partition, ExitModel, NodeRole, PartitionPlan, StageModel};
use crate::io_util::fmt_sig9;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Gated,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// One threshold per exit, each in `[0, 1]`.
    pub thresholds: Vec<f64>,
    pub mode: GateMode,
}

impl GateConfig {
    pub fn gated(thresholds: Vec<f64>) -> Self {
        Self {
            thresholds,
            mode: GateMode::Gated,
        }
    }

    /// The same threshold at every exit.
    pub fn uniform(threshold: f64, num_exits: usize) -> Self {
        Self::gated(vec![threshold; num_exits])
    }

    pub fn pass_through() -> Self {
        Self {
            thresholds: Vec::new(),
            mode: GateMode::PassThrough,
        }
    }

    fn validate(&self, num_exits: usize) -> Result<()> {
        if self.mode == GateMode::PassThrough {
            return Ok(());
        }
        if self.thresholds.len() != num_exits {
            return invalid(format!(
                "{num_exits} exits need {num_exits} thresholds, got {}",
                self.thresholds.len()
            ));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return invalid(format!("threshold {t} outside [0, 1]"));
        }
        Ok(())
    }
}

/// Outcome for one beat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitDecision {
    pub beat_id: String,
    /// Index of the stage that emitted the prediction.
    pub exit_stage: usize,
    /// Top class probability at the emitting head.
    pub pred: f64,
    pub predicted_class: AamiClass,
    pub true_class: AamiClass,
    /// Cumulative FLOPs up to and including the emitting stage.
    pub flops: u64,
    /// Bytes forwarded across stage boundaries.
    pub bytes: usize,
    pub probabilities: Vec<f32>,
}

impl ExitDecision {
    pub fn correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}

/// Every head's output along the gated path, plus the cost of reaching it.
/// Deciding from a profile matches [`Cascade::classify`] for any thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatProfile {
    pub beat_id: String,
    pub true_class: AamiClass,
    /// Probabilities per stage head; the last entry is the final head.
    pub heads: Vec<Vec<f32>>,
    /// FLOPs spent when emitting at stage `i`.
    pub flops: Vec<u64>,
    /// Bytes forwarded when emitting at stage `i`.
    pub bytes: Vec<usize>,
}

/// Index and value of the first maximum.
pub fn argmax(p: &[f32]) -> (usize, f32) {
    p.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Apply thresholds to a precomputed profile.
pub fn decide(profile: &BeatProfile, thresholds: &[f64]) -> ExitDecision {
    let last = profile.heads.len() - 1;
    let stage = (0..last)
        .find(|&i| f64::from(argmax(&profile.heads[i]).1) > thresholds[i])
        .unwrap_or(last);
    let probs = &profile.heads[stage];
    let (cls, pred) = argmax(probs);
    ExitDecision {
        beat_id: profile.beat_id.clone(),
        exit_stage: stage,
        pred: f64::from(pred),
        predicted_class: AamiClass::from_index(cls).unwrap_or(AamiClass::Q),
        true_class: profile.true_class,
        flops: profile.flops[stage],
        bytes: profile.bytes[stage],
        probabilities: probs.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub decisions: Vec<ExitDecision>,
    /// Beats emitted per stage.
    pub exit_counts: Vec<usize>,
}

impl BatchResult {
    pub fn exit_rates(&self) -> Vec<f64> {
        let n = self.decisions.len().max(1) as f64;
        self.exit_counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Ordered stage executors.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    stages: Vec<StageModel<f32>>,
}

/// Edge for the first stage, Cloud for the last, Fog in between.
pub fn default_roles(num_stages: usize) -> Vec<NodeRole> {
    (0..num_stages)
        .map(|i| match i {
            0 => NodeRole::Edge,
            i if i + 1 == num_stages => NodeRole::Cloud,
            _ => NodeRole::Fog,
        })
        .collect()
}

impl Cascade {
    pub fn new(stages: Vec<StageModel<f32>>) -> Result<Self> {
        if stages.len() < 2 {
            return invalid("a cascade needs at least two stages");
        }
        let last = stages.len() - 1;
        for (i, s) in stages.iter().enumerate() {
            if (i == 0) == s.decoder.is_some() {
                return invalid(format!("stage {i}: only non-first stages open with a decoder"));
            }
            if (i == last) == s.exit.is_some() {
                return invalid(format!("stage {i}: only non-final stages carry an exit"));
            }
            if i > 0 {
                let prev = &stages[i - 1];
                if prev.body.output_shape() != s.body.input_shape() {
                    return Err(Error::Shape(format!(
                        "stage {i} expects {}, stage {} produces {}",
                        s.body.input_shape(),
                        i - 1,
                        prev.body.output_shape()
                    )));
                }
                if prev.payload_bytes() != 4 * s.input_shape().elements() {
                    return Err(Error::Shape(format!("stage {i}: encoder and decoder widths differ")));
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn from_plan(model: &ExitModel<f32>, plan: &PartitionPlan) -> Result<Self> {
        Self::new(build_stages(model, plan)?)
    }

    /// Cascade using [`default_roles`].
    pub fn from_model(model: &ExitModel<f32>) -> Result<Self> {
        let plan = partition(model, &default_roles(model.num_heads()))?;
        Self::from_plan(model, &plan)
    }

    pub fn stages(&self) -> &[StageModel<f32>] {
        &self.stages
    }

    pub fn num_exits(&self) -> usize {
        self.stages.len() - 1
    }

    /// FLOPs of the monolithic backbone this cascade was cut from.
    pub fn baseline_flops(&self) -> u64 {
        self.stages.iter().map(StageModel::body_flops).sum()
    }

    fn input(beat: &BeatRecord) -> Tensor<f32> {
        Tensor::from_samples(beat.samples())
    }

    /// Run every head along the gated path.
    pub fn profile(&self, beat: &BeatRecord) -> Result<BeatProfile> {
        let mut heads = Vec::with_capacity(self.stages.len());
        let mut flops = Vec::with_capacity(self.stages.len());
        let mut bytes = Vec::with_capacity(self.stages.len());
        let (mut spent, mut sent) = (0u64, 0usize);
        let mut x = Self::input(beat);
        for s in &self.stages {
            if s.decoder.is_some() {
                x = s.run_decoder(&x)?;
            }
            let feature = s.run_body(&x)?;
            spent += s.decoder_flops() + s.body_flops() + s.head_flops();
            flops.push(spent);
            bytes.push(sent);
            match s.run_head(&feature)? {
                Some(p) => {
                    heads.push(p.into_data());
                    x = s.run_encoder(&feature)?.expect("exit stage has an encoder");
                    spent += s.encoder_flops();
                    sent += s.payload_bytes();
                }
                None => heads.push(feature.into_data()),
            }
        }
        Ok(BeatProfile {
            beat_id: beat.id(),
            true_class: beat.label,
            heads,
            flops,
            bytes,
        })
    }

    /// Classify one beat, stopping at the first confident exit.
    pub fn classify(&self, beat: &BeatRecord, gate: &GateConfig) -> Result<ExitDecision> {
        gate.validate(self.num_exits())?;
        if gate.mode == GateMode::PassThrough {
            return self.classify_pass_through(beat);
        }
        let (mut spent, mut sent) = (0u64, 0usize);
        let mut x = Self::input(beat);
        for (i, s) in self.stages.iter().enumerate() {
            if s.decoder.is_some() {
                x = s.run_decoder(&x)?;
            }
            let feature = s.run_body(&x)?;
            spent += s.decoder_flops() + s.body_flops() + s.head_flops();
            let probs = match s.run_head(&feature)? {
                Some(p) => {
                    if f64::from(argmax(p.data()).1) <= gate.thresholds[i] {
                        x = s.run_encoder(&feature)?.expect("exit stage has an encoder");
                        spent += s.encoder_flops();
                        sent += s.payload_bytes();
                        continue;
                    }
                    p
                }
                None => feature,
            };
            return Ok(self.emit(beat, i, probs.into_data(), spent, sent));
        }
        unreachable!("the final stage always emits")
    }

    fn classify_pass_through(&self, beat: &BeatRecord) -> Result<ExitDecision> {
        let mut x = Self::input(beat);
        let (mut spent, mut sent) = (0u64, 0usize);
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            x = s.run_body(&x)?;
            spent += s.body_flops();
            if i < last {
                sent += 4 * x.shape().elements();
            }
        }
        Ok(self.emit(beat, last, x.into_data(), spent, sent))
    }

    /// Output of the stage bodies chained on raw features.
    pub fn pass_through_output(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.stages.iter().try_fold(input.clone(), |x, s| s.run_body(&x))
    }

    fn emit(&self, beat: &BeatRecord, stage: usize, probs: Vec<f32>, flops: u64, bytes: usize) -> ExitDecision {
        let (cls, pred) = argmax(&probs);
        ExitDecision {
            beat_id: beat.id(),
            exit_stage: stage,
            pred: f64::from(pred),
            predicted_class: AamiClass::from_index(cls).unwrap_or(AamiClass::Q),
            true_class: beat.label,
            flops,
            bytes,
            probabilities: probs,
        }
    }

    pub fn classify_batch(&self, beats: &[BeatRecord], gate: &GateConfig) -> Result<BatchResult> {
        let decisions = beats
            .iter()
            .map(|b| self.classify(b, gate))
            .collect::<Result<Vec<_>>>()?;
        Ok(batch_from(decisions, self.stages.len()))
    }
}

/// Tally exit counts for a list of decisions.
pub fn batch_from(decisions: Vec<ExitDecision>, num_stages: usize) -> BatchResult {
    let mut exit_counts = vec![0; num_stages];
    for d in &decisions {
        exit_counts[d.exit_stage] += 1;
    }
    BatchResult {
        decisions,
        exit_counts,
    }
}

/// One row per beat: `beat_id,exit_stage,pred,predicted_class,true_class,flops,bytes`.
pub fn write_trace_csv<W: Write>(out: W, decisions: &[ExitDecision]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beat_id", "exit_stage", "pred", "predicted_class", "true_class", "flops", "bytes"])?;
    for d in decisions {
        w.write_record([
            d.beat_id.clone(),
            d.exit_stage.to_string(),
            fmt_sig9(d.pred),
            d.predicted_class.name().to_string(),
            d.true_class.name().to_string(),
            d.flops.to_string(),
            d.bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beatset::generate_synthetic;
    use crate::exit_graph::{attach_exits, ExitPlacement};
    use crate::nn::{default_backbone, forward, ParamStore};

    fn model(boundaries: Vec<usize>) -> ExitModel<f32> {
        let bb = default_backbone();
        let p = ParamStore::init(&bb, 3);
        attach_exits(&bb, &p, &ExitPlacement::new(boundaries, 6).unwrap(), 16, 4).unwrap()
    }

    #[test]
    fn profile_decisions_match_direct_classification() {
        let m = model(vec![2, 4]);
        let c = Cascade::from_model(&m).unwrap();
        let beats = generate_synthetic(10, 1, 0.05).unwrap();
        for b in &beats {
            let prof = c.profile(b).unwrap();
            for t in [0.0, 0.2, 0.21, 0.25, 0.3, 1.0] {
                let th = vec![t, t];
                assert_eq!(decide(&prof, &th), c.classify(b, &GateConfig::gated(th.clone())).unwrap());
            }
        }
    }

    #[test]
    fn profile_matches_joint_model_heads() {
        let m = model(vec![1, 3]);
        let c = Cascade::from_model(&m).unwrap();
        for b in &generate_synthetic(5, 2, 0.05).unwrap() {
            let heads = m.forward_heads(&Tensor::from_samples(b.samples())).unwrap().heads;
            assert_eq!(c.profile(b).unwrap().heads, heads);
        }
    }

    #[test]
    fn extreme_thresholds() {
        let m = model(vec![2]);
        let c = Cascade::from_model(&m).unwrap();
        let beats = generate_synthetic(4, 5, 0.05).unwrap();
        let all_final = c.classify_batch(&beats, &GateConfig::uniform(1.0, 1)).unwrap();
        assert_eq!(all_final.exit_counts, vec![0, 20]);
        let all_early = c.classify_batch(&beats, &GateConfig::uniform(0.0, 1)).unwrap();
        assert_eq!(all_early.exit_counts, vec![20, 0]);
        assert!(all_early.decisions.iter().all(|d| d.bytes == 0));
        assert!(all_final.decisions.iter().all(|d| d.bytes == 64));
    }

    #[test]
    fn flops_and_bytes_accounting() {
        let m = model(vec![2]);
        let c = Cascade::from_model(&m).unwrap();
        let b = &m.branches()[0];
        let bb = m.backbone();
        let beat = &generate_synthetic(1, 0, 0.0).unwrap()[0];
        let early = c.classify(beat, &GateConfig::uniform(0.0, 1)).unwrap();
        assert_eq!(early.flops, bb.flops_in(0..b.cut) + b.head_flops());
        let late = c.classify(beat, &GateConfig::uniform(1.0, 1)).unwrap();
        assert_eq!(
            late.flops,
            bb.total_flops() + b.head_flops() + b.encoder_flops() + b.decoder_flops()
        );
        assert_eq!(c.baseline_flops(), bb.total_flops());
    }

    #[test]
    fn pass_through_is_bitwise_monolithic() {
        let m = model(vec![2, 4]);
        let c = Cascade::from_model(&m).unwrap();
        let (bb, p) = m.strip();
        for beat in &generate_synthetic(5, 9, 0.1).unwrap() {
            let x = Tensor::from_samples(beat.samples());
            let mono = forward(&bb, &p, &x, None).unwrap();
            let staged = c.pass_through_output(&x).unwrap();
            let a: Vec<u32> = mono.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = staged.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            let d = c.classify(beat, &GateConfig::pass_through()).unwrap();
            assert_eq!(d.exit_stage, 2);
            assert_eq!(d.flops, bb.total_flops());
            assert_eq!(d.bytes, 4 * (16 * 65 + 32 * 16));
        }
    }

    #[test]
    fn bad_gate_configs() {
        let c = Cascade::from_model(&model(vec![2])).unwrap();
        let beat = &generate_synthetic(1, 0, 0.0).unwrap()[0];
        assert!(c.classify(beat, &GateConfig::uniform(0.5, 2)).is_err());
        assert!(c.classify(beat, &GateConfig::uniform(1.5, 1)).is_err());
        assert!(c.classify(beat, &GateConfig::uniform(f64::NAN, 1)).is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_beat() {
        let c = Cascade::from_model(&model(vec![2])).unwrap();
        let beats = generate_synthetic(2, 0, 0.05).unwrap();
        let r = c.classify_batch(&beats, &GateConfig::uniform(0.3, 1)).unwrap();
        assert_eq!(r.exit_counts.iter().sum::<usize>(), 10);
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &r.decisions).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "beat_id,exit_stage,pred,predicted_class,true_class,flops,bytes");
        assert_eq!(lines.len(), 11);
        let recount = lines[1..].iter().filter(|l| l.split(',').nth(1) == Some("0")).count();
        assert_eq!(recount, r.exit_counts[0]);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), (1, 0.4));
    }
}

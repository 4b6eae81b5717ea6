//! Beat-level dataset: records, resampling, synthetic generation, stratified
//! splits and the `.beats` container.
//!
//! # Synthetic beats
//!
//! [`generate_synthetic`] draws beats from five fixed templates, one per AAMI
//! class. Each template is a sum of Gaussian bumps `a * exp(-(n - c)^2 / (2 w^2))`
//! over the 260-sample window with the R peak at sample 130:
//!
//! | wave        | centre            | width      | amplitude |
//! |-------------|-------------------|------------|-----------|
//! | P           | 90                | 6          | `p_amp`   |
//! | Q           | 130 - 1.5 r_w - 2 | 2.5        | -0.15     |
//! | R           | 130               | `r_w`      | 1.0       |
//! | S           | 130 + 1.5 r_w + 2 | 3          | -0.25     |
//! | T           | 205               | 16         | `t_amp`   |
//! | previous T  | `rr_prefix`       | 12         | 0.2       |
//!
//! The "previous T" bump is the tail of the preceding beat; a short RR
//! interval pulls it into the window. Class parameters:
//!
//! | class | `r_w` | `t_amp` | `rr_prefix` | `p_amp` |
//! |-------|-------|---------|-------------|---------|
//! | N     | 4     | 0.30    | -60         | 0.12    |
//! | SVEB  | 4     | 0.30    | 40          | 0.12    |
//! | VEB   | 12    | -0.45   | 30          | 0.00    |
//! | F     | 8     | 0.05    | 15          | 0.06    |
//! | Q     | 6     | 0.60    | 5           | 0.02    |
//!
//! Additive white Gaussian noise of the requested standard deviation is added
//! per sample. Generated beats are raw amplitudes; [`BeatSet::ingest`] applies
//! the per-beat z-score once and records it in the file header flags.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io_util::{put_f32s, put_u32, ByteReader};

/// Samples per beat window, centred on the R peak.
pub const BEAT_LEN: usize = 260;
/// Sampling rate of the source recordings.
pub const SOURCE_RATE_HZ: f64 = 360.0;

const BEATS_MAGIC: &[u8; 8] = b"ECGBEATS";
const BEATS_VERSION: u32 = 1;
const FLAG_ZSCORE: u32 = 1;

/// The five AAMI heartbeat classes. Discriminants are the stable class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AamiClass {
    N = 0,
    Sveb = 1,
    Veb = 2,
    F = 3,
    Q = 4,
}

impl AamiClass {
    pub const ALL: [AamiClass; 5] = [
        AamiClass::N,
        AamiClass::Sveb,
        AamiClass::Veb,
        AamiClass::F,
        AamiClass::Q,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AamiClass::N => "N",
            AamiClass::Sveb => "SVEB",
            AamiClass::Veb => "VEB",
            AamiClass::F => "F",
            AamiClass::Q => "Q",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for AamiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One labelled, R-peak-centred beat window.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatRecord {
    samples: Vec<f32>,
    pub label: AamiClass,
    pub source_id: String,
    pub beat_index: u32,
}

impl BeatRecord {
    pub fn new(
        samples: Vec<f32>,
        label: AamiClass,
        source_id: impl Into<String>,
        beat_index: u32,
    ) -> Result<Self> {
        if samples.len() != BEAT_LEN {
            return invalid(format!(
                "beat must have {BEAT_LEN} samples, got {}",
                samples.len()
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return invalid(format!("beat sample {i} is not finite"));
        }
        Ok(Self {
            samples,
            label,
            source_id: source_id.into(),
            beat_index,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// `(source_id, beat_index)`, the identity used for split disjointness.
    pub fn key(&self) -> (&str, u32) {
        (&self.source_id, self.beat_index)
    }

    /// Display identifier used in decision traces.
    pub fn id(&self) -> String {
        format!("{}#{}", self.source_id, self.beat_index)
    }

    fn zscore_in_place(&mut self) {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = self
            .samples
            .iter()
            .map(|&s| (s as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        for s in &mut self.samples {
            let centred = *s as f64 - mean;
            *s = if std > 0.0 { centred / std } else { centred } as f32;
        }
    }
}

/// A beat collection plus the ingestion state recorded in the file header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatSet {
    pub beats: Vec<BeatRecord>,
    /// Whether the per-beat z-score has already been applied.
    pub normalized: bool,
}

impl BeatSet {
    pub fn new(beats: Vec<BeatRecord>) -> Self {
        Self {
            beats,
            normalized: false,
        }
    }

    /// Apply the per-beat z-score unless it was already applied.
    pub fn ingest(&mut self) {
        if self.normalized {
            return;
        }
        for b in &mut self.beats {
            b.zscore_in_place();
        }
        self.normalized = true;
    }

    pub fn ingested(mut self) -> Self {
        self.ingest();
        self
    }

    pub fn len(&self) -> usize {
        self.beats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beats.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.beats.len() * (BEAT_LEN * 4 + 32));
        out.extend_from_slice(BEATS_MAGIC);
        put_u32(&mut out, BEATS_VERSION);
        put_u32(&mut out, if self.normalized { FLAG_ZSCORE } else { 0 });
        put_u32(&mut out, self.beats.len() as u32);
        for b in &self.beats {
            out.push(b.label.index() as u8);
            put_u32(&mut out, b.source_id.len() as u32);
            out.extend_from_slice(b.source_id.as_bytes());
            put_u32(&mut out, b.beat_index);
            put_f32s(&mut out, &b.samples);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != BEATS_MAGIC {
            return Err(r.format_err(0, "bad magic, not a .beats file"));
        }
        let version = r.u32("version")?;
        if version != BEATS_VERSION {
            return Err(r.format_err(8, format!("unsupported version {version}")));
        }
        let flags = r.u32("flags")?;
        if flags & !FLAG_ZSCORE != 0 {
            return Err(r.format_err(12, format!("unknown header flags {flags:#x}")));
        }
        let count = r.u32("beat count")? as usize;
        let mut beats = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.position();
            let class = r.u8("class byte")?;
            let label = AamiClass::from_index(class as usize)
                .ok_or_else(|| r.format_err(at, format!("invalid class byte {class}")))?;
            let id_len = r.u32("source id length")? as usize;
            let id_at = r.position();
            let id = std::str::from_utf8(r.take(id_len, "source id")?)
                .map_err(|_| r.format_err(id_at, "source id is not UTF-8"))?
                .to_string();
            let beat_index = r.u32("beat index")?;
            let samples_at = r.position();
            let samples = r.f32_vec(BEAT_LEN, "samples")?;
            let beat = BeatRecord::new(samples, label, id, beat_index)
                .map_err(|e| r.format_err(samples_at, e.to_string()))?;
            beats.push(beat);
        }
        if r.remaining() != 0 {
            return Err(r.format_err(r.position(), "trailing bytes after last beat"));
        }
        Ok(Self {
            beats,
            normalized: flags & FLAG_ZSCORE != 0,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// CSV export: `source_id,beat_index,label,s0..s259`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec![
            "source_id".to_string(),
            "beat_index".to_string(),
            "label".to_string(),
        ];
        header.extend((0..BEAT_LEN).map(|i| format!("s{i}")));
        wr.write_record(&header)?;
        for b in &self.beats {
            let mut row = vec![
                b.source_id.clone(),
                b.beat_index.to_string(),
                b.label.name().to_string(),
            ];
            row.extend(b.samples.iter().map(|s| s.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Linear-interpolation resampling.
///
/// The output has `round(len * rate_out / rate_in)` samples spread evenly
/// over the input span, so the first and last samples are preserved.
pub fn resample(signal: &[f64], rate_in: f64, rate_out: f64) -> Result<Vec<f64>> {
    if !(rate_in > 0.0 && rate_out > 0.0 && rate_in.is_finite() && rate_out.is_finite()) {
        return invalid("sampling rates must be positive and finite");
    }
    if signal.is_empty() {
        return invalid("cannot resample an empty signal");
    }
    if let Some(i) = signal.iter().position(|s| !s.is_finite()) {
        return invalid(format!("signal sample {i} is not finite"));
    }
    let n = signal.len();
    let out_len = (n as f64 * rate_out / rate_in).round() as usize;
    if out_len == 0 {
        return invalid("resampled signal would be empty");
    }
    if out_len == 1 || n == 1 {
        return Ok(vec![signal[0]; out_len]);
    }
    let span = (n - 1) as f64;
    let denom = (out_len - 1) as f64;
    Ok((0..out_len)
        .map(|j| {
            let x = j as f64 * span / denom;
            let i = (x.floor() as usize).min(n - 2);
            let frac = x - i as f64;
            let (a, b) = (signal[i], signal[i + 1]);
            (a + frac * (b - a)).clamp(a.min(b), a.max(b))
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct TemplateParams {
    r_width: f64,
    t_amp: f64,
    rr_prefix: f64,
    p_amp: f64,
}

const TEMPLATES: [TemplateParams; 5] = [
    TemplateParams { r_width: 4.0, t_amp: 0.30, rr_prefix: -60.0, p_amp: 0.12 },
    TemplateParams { r_width: 4.0, t_amp: 0.30, rr_prefix: 40.0, p_amp: 0.12 },
    TemplateParams { r_width: 12.0, t_amp: -0.45, rr_prefix: 30.0, p_amp: 0.0 },
    TemplateParams { r_width: 8.0, t_amp: 0.05, rr_prefix: 15.0, p_amp: 0.06 },
    TemplateParams { r_width: 6.0, t_amp: 0.60, rr_prefix: 5.0, p_amp: 0.02 },
];

fn bump(n: f64, centre: f64, width: f64, amp: f64) -> f64 {
    amp * (-(n - centre).powi(2) / (2.0 * width * width)).exp()
}

/// The noise-free template for `class`, before any normalization.
pub fn class_template(class: AamiClass) -> Vec<f64> {
    let p = TEMPLATES[class.index()];
    let r = 130.0;
    (0..BEAT_LEN)
        .map(|i| {
            let n = i as f64;
            bump(n, r - 40.0, 6.0, p.p_amp)
                + bump(n, r - 1.5 * p.r_width - 2.0, 2.5, -0.15)
                + bump(n, r, p.r_width, 1.0)
                + bump(n, r + 1.5 * p.r_width + 2.0, 3.0, -0.25)
                + bump(n, r + 75.0, 16.0, p.t_amp)
                + bump(n, p.rr_prefix, 12.0, 0.2)
        })
        .collect()
}

/// Deterministic synthetic beats: `count_per_class` beats of every class,
/// interleaved class by class, with unique `beat_index` values.
pub fn generate_synthetic(
    count_per_class: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<BeatRecord>> {
    if count_per_class < 1 {
        return invalid("count_per_class must be at least 1");
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return invalid("noise_sigma must be a finite non-negative number");
    }
    let templates: Vec<Vec<f64>> = AamiClass::ALL.iter().map(|&c| class_template(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
    let source = format!("synthetic-{seed}");
    let mut beats = Vec::with_capacity(count_per_class * AamiClass::COUNT);
    for i in 0..count_per_class {
        for class in AamiClass::ALL {
            let template = &templates[class.index()];
            let samples = template
                .iter()
                .map(|&t| {
                    if noise_sigma > 0.0 {
                        (t + noise.sample(&mut rng)) as f32
                    } else {
                        t as f32
                    }
                })
                .collect();
            let index = (i * AamiClass::COUNT + class.index()) as u32;
            beats.push(BeatRecord::new(samples, class, source.clone(), index)?);
        }
    }
    Ok(beats)
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const DEFAULT: SplitRatios = SplitRatios {
        train: 0.7,
        validation: 0.15,
        test: 0.15,
    };

    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return invalid("split ratios must be finite and non-negative");
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("split ratios must sum to 1, got {sum}"));
        }
        Ok(())
    }

    /// Per-class counts: train and validation are rounded, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.validation).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<BeatRecord>,
    pub validation: Vec<BeatRecord>,
    pub test: Vec<BeatRecord>,
    pub seed: u64,
}

/// Stratified, seeded split. Within each part beats keep their input order.
pub fn split(beats: &[BeatRecord], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut seen = HashSet::with_capacity(beats.len());
    for b in beats {
        if !seen.insert(b.key()) {
            return invalid(format!("duplicate beat {}", b.id()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; beats.len()];
    for class in AamiClass::ALL {
        let mut idx: Vec<usize> = (0..beats.len()).filter(|&i| beats[i].label == class).collect();
        idx.shuffle(&mut rng);
        let (n_train, n_val, _) = ratios.counts(idx.len());
        for (rank, &i) in idx.iter().enumerate() {
            assignment[i] = if rank < n_train {
                0
            } else if rank < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let mut out = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (b, part) in beats.iter().zip(assignment) {
        match part {
            0 => out.train.push(b.clone()),
            1 => out.validation.push(b.clone()),
            _ => out.test.push(b.clone()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_counts(beats: &[BeatRecord]) -> [usize; 5] {
        let mut c = [0; 5];
        for b in beats {
            c[b.label.index()] += 1;
        }
        c
    }

    #[test]
    fn class_indices_are_stable() {
        let idx: Vec<usize> = AamiClass::ALL.iter().map(|c| c.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(AamiClass::from_name("VEB"), Some(AamiClass::Veb));
        assert_eq!(AamiClass::from_index(5), None);
    }

    #[test]
    fn beat_record_rejects_bad_samples() {
        assert!(BeatRecord::new(vec![0.0; 259], AamiClass::N, "a", 0).is_err());
        let mut s = vec![0.0; BEAT_LEN];
        s[3] = f32::NAN;
        assert!(BeatRecord::new(s, AamiClass::N, "a", 0).is_err());
    }

    #[test]
    fn resample_identity() {
        let sig: Vec<f64> = (0..360).map(|i| ((i * 37) % 11) as f64 - 3.5).collect();
        assert_eq!(resample(&sig, 360.0, 360.0).unwrap(), sig);
    }

    #[test]
    fn resample_constant() {
        assert_eq!(resample(&[1.0; 4], 4.0, 2.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn resample_ramp_matches_per_index_oracle() {
        let ramp: Vec<f64> = (0..360).map(|i| i as f64).collect();
        let out = resample(&ramp, 360.0, 260.0).unwrap();
        assert_eq!(out.len(), 260);
        // Interpolating a straight line returns the line: the value at output
        // index j is its position on the input axis, j * 359 / 259.
        for (j, v) in out.iter().enumerate() {
            let expected = j as f64 * 359.0 / 259.0;
            assert!((v - expected).abs() <= 1e-9 * expected.max(1.0), "index {j}");
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(out[259], 359.0);
    }

    #[test]
    fn resample_errors() {
        assert!(resample(&[], 360.0, 260.0).is_err());
        assert!(resample(&[1.0, f64::INFINITY], 360.0, 260.0).is_err());
        assert!(resample(&[1.0], 0.0, 260.0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(10, 3, 0.05).unwrap();
        let b = generate_synthetic(10, 3, 0.05).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.iter().zip(&b).all(|(x, y)| {
            x.samples().iter().map(|s| s.to_bits()).eq(y.samples().iter().map(|s| s.to_bits()))
                && x.label == y.label
                && x.key() == y.key()
        }));
        assert_eq!(class_counts(&a), [10; 5]);
    }

    #[test]
    fn zero_noise_reproduces_templates() {
        let beats = generate_synthetic(3, 11, 0.0).unwrap();
        for b in &beats {
            let t: Vec<f32> = class_template(b.label).iter().map(|&v| v as f32).collect();
            assert_eq!(b.samples(), &t[..]);
        }
    }

    #[test]
    fn synthetic_classes_are_well_separated() {
        let beats = generate_synthetic(200, 5, 0.05).unwrap();
        let mut means = vec![vec![0.0f64; BEAT_LEN]; 5];
        for b in &beats {
            for (m, &s) in means[b.label.index()].iter_mut().zip(b.samples()) {
                *m += s as f64 / 200.0;
            }
        }
        // Pooled per-sample within-class standard deviation.
        let mut ss = 0.0;
        for b in &beats {
            for (m, &s) in means[b.label.index()].iter().zip(b.samples()) {
                ss += (s as f64 - m).powi(2);
            }
        }
        let within = (ss / (beats.len() * BEAT_LEN) as f64).sqrt();
        assert!((within - 0.05).abs() < 0.005, "within-class std {within}");
        for a in 0..5 {
            for b in a + 1..5 {
                let d = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 10.0 * within, "classes {a},{b}: distance {d}");
            }
        }
    }

    #[test]
    fn synthetic_rejects_zero_count() {
        assert!(matches!(
            generate_synthetic(0, 1, 0.05),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn split_default_proportions() {
        let beats = generate_synthetic(100, 1, 0.05).unwrap();
        let s = split(&beats, SplitRatios::DEFAULT, 9).unwrap();
        assert_eq!(class_counts(&s.train), [70; 5]);
        assert_eq!(class_counts(&s.validation), [15; 5]);
        assert_eq!(class_counts(&s.test), [15; 5]);
        let mut keys: Vec<_> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .map(|b| b.key())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), beats.len());
    }

    #[test]
    fn split_all_train() {
        let beats = generate_synthetic(4, 1, 0.05).unwrap();
        let s = split(&beats, SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 2).unwrap();
        assert_eq!(s.train.len(), 20);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_seven_beats_rounding() {
        let beats: Vec<BeatRecord> = generate_synthetic(7, 1, 0.05)
            .unwrap()
            .into_iter()
            .filter(|b| b.label == AamiClass::F)
            .collect();
        let s = split(&beats, SplitRatios::DEFAULT, 4).unwrap();
        let got = [s.train.len(), s.validation.len(), s.test.len()];
        for (g, want) in got.iter().zip([4.9, 1.05, 1.05]) {
            assert!((*g as f64 - want).abs() <= 1.0, "{got:?}");
        }
        assert_eq!(got.iter().sum::<usize>(), 7);
        assert_eq!(got, [5, 1, 1]);
    }

    #[test]
    fn split_is_reproducible_and_rejects_bad_ratios() {
        let beats = generate_synthetic(20, 1, 0.05).unwrap();
        assert_eq!(
            split(&beats, SplitRatios::DEFAULT, 5).unwrap(),
            split(&beats, SplitRatios::DEFAULT, 5).unwrap()
        );
        let bad = SplitRatios {
            train: 0.7,
            validation: 0.2,
            test: 0.2,
        };
        assert!(split(&beats, bad, 5).is_err());
    }

    #[test]
    fn beat_file_roundtrip_and_flags() {
        let mut set = BeatSet::new(generate_synthetic(2, 8, 0.05).unwrap());
        set.ingest();
        let bytes = set.encode();
        let back = BeatSet::decode(&bytes).unwrap();
        assert!(back.normalized);
        assert_eq!(back.encode(), bytes);
        let mut again = back.clone();
        again.ingest();
        assert_eq!(again, back, "z-score must not be applied twice");
    }

    #[test]
    fn beat_file_reports_truncation_offset() {
        let set = BeatSet::new(generate_synthetic(1, 8, 0.05).unwrap());
        let bytes = set.encode();
        match BeatSet::decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        match BeatSet::decode(b"NOTBEATS") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn zscore_gives_unit_variance() {
        let set = BeatSet::new(generate_synthetic(1, 8, 0.05).unwrap()).ingested();
        for b in &set.beats {
            let n = BEAT_LEN as f64;
            let mean = b.samples().iter().map(|&s| s as f64).sum::<f64>() / n;
            let var = b.samples().iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let set = BeatSet::new(generate_synthetic(1, 8, 0.05).unwrap());
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("source_id,beat_index,label,s0,s1"));
        assert!(header.ends_with(",s259"));
        assert_eq!(lines.count(), 5);
    }
}

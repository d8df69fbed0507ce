//! Recording ingestion, clip segmentation, normalization, and
//! patient-stratified dataset manifests.
//!
//! EDF is the clinical ingest format; everything downstream runs on the
//! native container (see [`native`]), which keeps the hot paths bit-exact.
//! Recordings are segmented into non-overlapping 60-second clips on an
//! exact grid (clip `i` covers `[60i, 60(i+1))` seconds; a trailing partial
//! clip is dropped), and per-channel normalization statistics come from the
//! training split only.

pub mod edf;
pub mod manifest;
pub mod native;
pub mod store;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Clip duration in seconds; fixed across the toolkit.
pub const CLIP_LEN_S: f64 = 60.0;

/// Floor applied to per-channel standard deviations so dead channels do not
/// blow up normalization.
pub const EPS_STD: f64 = 1e-6;

/// The 19 scalp electrodes of the standard 10-20 configuration, canonical
/// spelling and order.
pub const STANDARD_CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5",
    "T6", "Fz", "Cz", "Pz",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("missing required channel '{0}'")]
    MissingChannel(String),
    #[error("bad data: {0}")]
    BadData(String),
    #[error("need at least 3 patients to split, got {0}")]
    TooFewPatients(usize),
    #[error("unknown recording '{0}'")]
    UnknownRecording(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Adult,
    Pediatric,
}

impl AgeGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgeGroup::Adult => "adult",
            AgeGroup::Pediatric => "pediatric",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "adult" => Ok(AgeGroup::Adult),
            "pediatric" => Ok(AgeGroup::Pediatric),
            other => Err(DataError::BadData(format!("unknown age group '{other}'"))),
        }
    }
}

/// Recording-level metadata carried through the whole pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingMeta {
    pub recording_id: String,
    pub patient_id: String,
    pub age_group: AgeGroup,
    pub icu: bool,
    pub hospital: String,
}

/// A multichannel voltage recording in microvolts, channel-major.
#[derive(Debug, Clone)]
pub struct EegRecording {
    pub meta: RecordingMeta,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// `channels x time`, row-major.
    pub samples: Vec<f32>,
    pub n_samples: usize,
}

impl EegRecording {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz
    }

    pub fn channel(&self, idx: usize) -> &[f32] {
        &self.samples[idx * self.n_samples..(idx + 1) * self.n_samples]
    }

    /// Samples per 60-second clip.
    pub fn clip_samples(&self) -> usize {
        (CLIP_LEN_S * self.sample_rate_hz).round() as usize
    }

    /// Number of whole 60-second clips; the trailing partial clip is
    /// dropped.
    pub fn n_clips(&self) -> usize {
        self.n_samples / self.clip_samples()
    }

    /// Extract clip `idx` as a `[clip_samples, n_channels]` time-major
    /// buffer ready for the model. `None` when the index is off the grid.
    pub fn clip(&self, idx: usize) -> Option<Vec<f32>> {
        let len = self.clip_samples();
        if idx >= self.n_clips() {
            return None;
        }
        let start = idx * len;
        let ch = self.n_channels();
        let mut out = vec![0.0f32; len * ch];
        for c in 0..ch {
            let src = &self.samples[c * self.n_samples + start..c * self.n_samples + start + len];
            for (t, &v) in src.iter().enumerate() {
                out[t * ch + c] = v;
            }
        }
        Some(out)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.len() != self.n_channels() * self.n_samples {
            return Err(DataError::BadData(format!(
                "{} samples for {} channels x {}",
                self.samples.len(),
                self.n_channels(),
                self.n_samples
            )));
        }
        if self.sample_rate_hz <= 0.0 {
            return Err(DataError::BadData("non-positive sample rate".into()));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(DataError::BadData("non-finite sample".into()));
        }
        Ok(())
    }
}

/// Map a vendor channel label onto the canonical 10-20 name: strip an `EEG `
/// prefix and a `-REF`-style suffix, fold case, then apply the alias table.
pub fn normalize_channel_name(raw: &str, aliases: &BTreeMap<String, String>) -> Option<String> {
    let mut name = raw.trim();
    for prefix in ["EEG ", "eeg "] {
        if let Some(rest) = name.strip_prefix(prefix) {
            name = rest.trim();
        }
    }
    if let Some(pos) = name.find('-') {
        name = name[..pos].trim();
    }
    let lower = name.to_lowercase();
    let resolved = aliases.get(&lower).cloned().unwrap_or(lower);
    STANDARD_CHANNELS
        .iter()
        .find(|c| c.to_lowercase() == resolved)
        .map(|c| c.to_string())
}

/// Vendor alias table; modern T7/T8/P7/P8 names map to the older T3/T4/T5/T6
/// used by the canonical list. Extendable via a `raw = canonical` config
/// file.
pub fn default_channel_aliases() -> BTreeMap<String, String> {
    [("t7", "t3"), ("t8", "t4"), ("p7", "t5"), ("p8", "t6")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

/// Load extra channel aliases from a `raw = canonical` lines file.
pub fn load_channel_aliases(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut map = default_channel_aliases();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line.split_once('=').ok_or_else(|| {
            DataError::BadData(format!("alias line {}: expected `raw = canonical`", i + 1))
        })?;
        map.insert(a.trim().to_lowercase(), b.trim().to_lowercase());
    }
    Ok(map)
}

/// Linear resampling to a target rate.
pub fn resample_linear(samples: &[f32], from_hz: f64, to_hz: f64) -> Vec<f32> {
    if (from_hz - to_hz).abs() < 1e-9 || samples.is_empty() {
        return samples.to_vec();
    }
    let duration = samples.len() as f64 / from_hz;
    let n_out = (duration * to_hz).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    let last = samples.len() - 1;
    for i in 0..n_out {
        let pos = i as f64 * from_hz / to_hz;
        let lo = pos.floor() as usize;
        if lo >= last {
            out.push(samples[last]);
        } else {
            let frac = (pos - lo as f64) as f32;
            out.push(samples[lo] * (1.0 - frac) + samples[lo + 1] * frac);
        }
    }
    out
}

/// Per-channel mean and standard deviation over the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = toml::to_string(self).map_err(|e| DataError::BadData(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| DataError::BadData(e.to_string()))
    }
}

/// Accumulates per-channel statistics across training clips.
#[derive(Debug)]
pub struct NormAccumulator {
    n_channels: usize,
    count: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl NormAccumulator {
    pub fn new(n_channels: usize) -> Self {
        NormAccumulator {
            n_channels,
            count: 0.0,
            sum: vec![0.0; n_channels],
            sumsq: vec![0.0; n_channels],
        }
    }

    /// Feed one `[len, n_channels]` time-major clip.
    pub fn add_clip(&mut self, clip: &[f32]) {
        let len = clip.len() / self.n_channels;
        for t in 0..len {
            for c in 0..self.n_channels {
                let v = clip[t * self.n_channels + c] as f64;
                self.sum[c] += v;
                self.sumsq[c] += v * v;
            }
        }
        self.count += len as f64;
    }

    pub fn finish(self) -> Result<NormStats, DataError> {
        if self.count == 0.0 {
            return Err(DataError::BadData(
                "cannot compute normalization statistics from an empty training set".into(),
            ));
        }
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.count).collect();
        let std: Vec<f64> = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / self.count - m * m).max(0.0)).sqrt().max(EPS_STD))
            .collect();
        Ok(NormStats { mean, std })
    }
}

/// Normalize a `[len, n_channels]` clip in place: `(x - mean_ch) / std_ch`.
pub fn normalize_clip(clip: &mut [f32], stats: &NormStats) {
    let ch = stats.n_channels();
    for (i, v) in clip.iter_mut().enumerate() {
        let c = i % ch;
        *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::BadData(format!("unknown split '{other}'"))),
        }
    }
}

/// Deterministic patient-disjoint split. Target counts follow the fractions
/// with largest-remainder rounding, so each split deviates by at most one
/// patient's worth.
pub fn split_by_patient(
    patients: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, Split>, DataError> {
    let n = patients.len();
    if n < 3 {
        return Err(DataError::TooFewPatients(n));
    }
    let mut unique: Vec<String> = patients.to_vec();
    unique.sort();
    unique.dedup();
    let n = unique.len();
    if n < 3 {
        return Err(DataError::TooFewPatients(n));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);

    let fracs = [fractions.0, fractions.1, fractions.2];
    let raw: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = n - counts.iter().sum::<usize>();
    for (i, _) in rem {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    // every split gets at least one patient
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }

    let mut map = BTreeMap::new();
    let mut it = unique.into_iter();
    for (split, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
        for _ in 0..count {
            map.insert(it.next().unwrap(), *split);
        }
    }
    Ok(map)
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rate: f64, seconds: f64) -> EegRecording {
        let n = (rate * seconds) as usize;
        let ch = 2;
        let mut samples = vec![0.0f32; ch * n];
        for c in 0..ch {
            for t in 0..n {
                samples[c * n + t] = (c * n + t) as f32;
            }
        }
        EegRecording {
            meta: RecordingMeta {
                recording_id: "r0".into(),
                patient_id: "p0".into(),
                age_group: AgeGroup::Adult,
                icu: false,
                hospital: "h".into(),
            },
            sample_rate_hz: rate,
            channel_names: vec!["Fp1".into(), "Fp2".into()],
            samples,
            n_samples: n,
        }
    }

    #[test]
    fn clip_counts_match_duration_arithmetic() {
        assert_eq!(rec(16.0, 3600.0).n_clips(), 60);
        assert_eq!(rec(16.0, 3659.0).n_clips(), 60); // trailing 59 s dropped
        assert_eq!(rec(16.0, 59.0).n_clips(), 0);
        // paper-scale clip length at 200 Hz
        assert_eq!(rec(200.0, 60.0).clip_samples(), 12_000);
    }

    #[test]
    fn clip_grid_is_exact_prefix_without_overlap() {
        let r = rec(16.0, 150.0); // 2 clips + partial
        let len = r.clip_samples();
        assert_eq!(r.n_clips(), 2);
        for i in 0..2 {
            let clip = r.clip(i).unwrap();
            // channel 0 of this recording is the ramp t -> t
            assert_eq!(clip[0], (i * len) as f32);
            assert_eq!(clip[(len - 1) * 2], (i * len + len - 1) as f32);
        }
        assert!(r.clip(2).is_none());
    }

    #[test]
    fn channel_name_normalization() {
        let aliases = default_channel_aliases();
        assert_eq!(
            normalize_channel_name("EEG FP1-REF", &aliases),
            Some("Fp1".into())
        );
        assert_eq!(normalize_channel_name("t8", &aliases), Some("T4".into()));
        assert_eq!(normalize_channel_name(" Cz ", &aliases), Some("Cz".into()));
        assert_eq!(normalize_channel_name("ECG", &aliases), None);
    }

    #[test]
    fn resample_identity_and_halving() {
        let ramp: Vec<f32> = (0..100).map(|i| i as f32).collect();
        assert_eq!(resample_linear(&ramp, 10.0, 10.0), ramp);
        let down = resample_linear(&ramp, 10.0, 5.0);
        assert_eq!(down.len(), 50);
        assert!((down[10] - 20.0).abs() < 1e-6);
        let up = resample_linear(&ramp, 10.0, 20.0);
        assert_eq!(up.len(), 200);
        assert!((up[21] - 10.5).abs() < 1e-6);
    }

    #[test]
    fn norm_stats_floor_and_gaussian() {
        // constant channel floors to eps and normalizes to zero
        let mut acc = NormAccumulator::new(1);
        acc.add_clip(&vec![3.25f32; 1000]);
        let stats = acc.finish().unwrap();
        assert_eq!(stats.std[0], EPS_STD);
        let mut clip = vec![3.25f32; 10];
        normalize_clip(&mut clip, &stats);
        assert!(clip.iter().all(|&v| v == 0.0));

        // standard-normal synthetic channel: post-normalization mean ~ 0,
        // std ~ 1 within 0.05 over 1e6 samples
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f32> = (0..1_000_000)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                (x * 2.0 + 5.0) as f32
            })
            .collect();
        let mut acc = NormAccumulator::new(1);
        acc.add_clip(&data);
        let stats = acc.finish().unwrap();
        let mut normed = data.clone();
        normalize_clip(&mut normed, &stats);
        let mean = normed.iter().map(|&v| v as f64).sum::<f64>() / normed.len() as f64;
        let var = normed.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / normed.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn norm_stats_leakage_canary() {
        let mut acc = NormAccumulator::new(1);
        acc.add_clip(&[1.0, 2.0, 3.0, 4.0]);
        let train_only = acc.finish().unwrap();
        let mut acc = NormAccumulator::new(1);
        acc.add_clip(&[1.0, 2.0, 3.0, 4.0]);
        acc.add_clip(&[100.0, 120.0]);
        let with_test = acc.finish().unwrap();
        assert_ne!(train_only, with_test);
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(NormAccumulator::new(3).finish().is_err());
    }

    #[test]
    fn split_fractions_and_determinism() {
        let patients: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let map = split_by_patient(&patients, (0.5, 0.1, 0.4), 1).unwrap();
        let count = |s: Split| map.values().filter(|&&v| v == s).count();
        assert_eq!(count(Split::Train), 5);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 4);
        let map2 = split_by_patient(&patients, (0.5, 0.1, 0.4), 1).unwrap();
        assert_eq!(map, map2);
        let map3 = split_by_patient(&patients, (0.5, 0.1, 0.4), 2).unwrap();
        assert!(map != map3 || map.len() == map3.len());
        assert!(split_by_patient(&patients[..2], (0.5, 0.1, 0.4), 1).is_err());
    }

    #[test]
    fn splits_are_patient_disjoint_for_many_seeds() {
        let patients: Vec<String> = (0..23).map(|i| format!("p{i}")).collect();
        for seed in 0..100 {
            let map = split_by_patient(&patients, (0.5, 0.1, 0.4), seed).unwrap();
            // a BTreeMap cannot hold a patient twice; verify every patient is
            // present exactly once and all splits are non-empty
            assert_eq!(map.len(), patients.len());
            for s in [Split::Train, Split::Val, Split::Test] {
                assert!(map.values().any(|&v| v == s), "seed {seed}: {s:?} empty");
            }
        }
    }

    #[test]
    fn digest_changes_with_content() {
        let a = sha256_hex(b"hello");
        let b = sha256_hex(b"hellp");
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }
}

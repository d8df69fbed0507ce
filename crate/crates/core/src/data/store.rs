//! Clip access over a corpus directory of native recording containers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::native::load_native;
use super::{DataError, EegRecording, NormStats};

/// Lazily loads recordings from `<root>/recordings/<id>.eegn` and serves
/// normalized clips. Loaded recordings stay cached.
pub struct ClipStore {
    root: PathBuf,
    cache: HashMap<String, Arc<EegRecording>>,
}

impl ClipStore {
    pub fn open(root: &Path) -> Self {
        ClipStore {
            root: root.to_path_buf(),
            cache: HashMap::new(),
        }
    }

    pub fn recordings_dir(root: &Path) -> PathBuf {
        root.join("recordings")
    }

    pub fn recording_path(&self, recording_id: &str) -> PathBuf {
        Self::recordings_dir(&self.root).join(format!("{recording_id}.eegn"))
    }

    pub fn recording(&mut self, recording_id: &str) -> Result<Arc<EegRecording>, DataError> {
        if let Some(rec) = self.cache.get(recording_id) {
            return Ok(rec.clone());
        }
        let path = self.recording_path(recording_id);
        if !path.exists() {
            return Err(DataError::UnknownRecording(recording_id.to_string()));
        }
        let rec = Arc::new(load_native(&path)?);
        self.cache.insert(recording_id.to_string(), rec.clone());
        Ok(rec)
    }

    /// Raw `[clip_samples, n_channels]` clip, time-major.
    pub fn raw_clip(&mut self, recording_id: &str, clip_index: usize) -> Result<Vec<f32>, DataError> {
        let rec = self.recording(recording_id)?;
        rec.clip(clip_index).ok_or_else(|| {
            DataError::BadData(format!(
                "clip {clip_index} out of range for recording {recording_id} ({} clips)",
                rec.n_clips()
            ))
        })
    }

    /// Normalized clip ready for the model.
    pub fn normalized_clip(
        &mut self,
        recording_id: &str,
        clip_index: usize,
        stats: &NormStats,
    ) -> Result<Vec<f32>, DataError> {
        let mut clip = self.raw_clip(recording_id, clip_index)?;
        super::normalize_clip(&mut clip, stats);
        Ok(clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::native::save_native;
    use crate::data::{AgeGroup, NormAccumulator, RecordingMeta};

    #[test]
    fn store_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(ClipStore::recordings_dir(dir.path())).unwrap();
        let n = 16 * 120;
        let rec = EegRecording {
            meta: RecordingMeta {
                recording_id: "r1".into(),
                patient_id: "p1".into(),
                age_group: AgeGroup::Adult,
                icu: false,
                hospital: "h".into(),
            },
            sample_rate_hz: 16.0,
            channel_names: vec!["Fp1".into()],
            samples: (0..n).map(|i| i as f32).collect(),
            n_samples: n,
        };
        save_native(&rec, &ClipStore::recordings_dir(dir.path()).join("r1.eegn")).unwrap();

        let mut store = ClipStore::open(dir.path());
        let clip0 = store.raw_clip("r1", 0).unwrap();
        assert_eq!(clip0.len(), 16 * 60);
        assert_eq!(clip0[0], 0.0);
        let clip1 = store.raw_clip("r1", 1).unwrap();
        assert_eq!(clip1[0], (16 * 60) as f32);
        assert!(store.raw_clip("r1", 2).is_err());
        assert!(matches!(
            store.raw_clip("nope", 0),
            Err(DataError::UnknownRecording(_))
        ));

        let mut acc = NormAccumulator::new(1);
        acc.add_clip(&clip0);
        let stats = acc.finish().unwrap();
        let normed = store.normalized_clip("r1", 0, &stats).unwrap();
        let mean: f64 = normed.iter().map(|&v| v as f64).sum::<f64>() / normed.len() as f64;
        assert!(mean.abs() < 1e-6);
    }
}

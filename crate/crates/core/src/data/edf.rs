//! Minimal EDF reader and writer.
//!
//! Covers the plain EDF profile: fixed-width ASCII header, one header block
//! per signal, and data records of 2-byte little-endian integers calibrated
//! to physical units per signal. The writer exists for round-trip tests and
//! demo files; ingestion is the supported direction.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    io_err, normalize_channel_name, resample_linear, DataError, EegRecording, RecordingMeta,
    STANDARD_CHANNELS,
};

/// One decoded EDF signal in physical units.
#[derive(Debug, Clone)]
pub struct EdfSignal {
    pub label: String,
    pub sample_rate_hz: f64,
    pub physical: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EdfFile {
    pub patient: String,
    pub recording: String,
    pub record_duration_s: f64,
    pub n_records: usize,
    pub signals: Vec<EdfSignal>,
}

fn ascii_field(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn numeric_field<T: std::str::FromStr>(bytes: &[u8], what: &str) -> Result<T, DataError> {
    ascii_field(bytes)
        .parse()
        .map_err(|_| DataError::MalformedHeader(format!("{what}: '{}'", ascii_field(bytes))))
}

/// Parse a whole EDF file into calibrated physical signals.
pub fn read_edf_file(path: &Path) -> Result<EdfFile, DataError> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() < 256 {
        return Err(DataError::MalformedHeader(
            "file shorter than the 256-byte fixed header".into(),
        ));
    }
    let patient = ascii_field(&bytes[8..88]);
    let recording = ascii_field(&bytes[88..168]);
    let header_bytes: usize = numeric_field(&bytes[184..192], "header byte count")?;
    let n_records: i64 = numeric_field(&bytes[236..244], "record count")?;
    let record_duration_s: f64 = numeric_field(&bytes[244..252], "record duration")?;
    let n_signals: usize = numeric_field(&bytes[252..256], "signal count")?;

    if n_signals == 0 {
        return Err(DataError::MalformedHeader("zero signals".into()));
    }
    if header_bytes != 256 * (n_signals + 1) {
        return Err(DataError::MalformedHeader(format!(
            "header byte count {header_bytes} does not match {} signals",
            n_signals
        )));
    }
    if bytes.len() < header_bytes {
        return Err(DataError::MalformedHeader(
            "file shorter than its declared header".into(),
        ));
    }
    if n_records <= 0 {
        return Err(DataError::MalformedHeader(format!(
            "record count {n_records} (zero-length or streaming files unsupported)"
        )));
    }
    let n_records = n_records as usize;
    if record_duration_s <= 0.0 {
        return Err(DataError::MalformedHeader("non-positive record duration".into()));
    }

    // Per-signal header arrays.
    let sig = &bytes[256..header_bytes];
    let field = |offset: usize, width: usize, i: usize| -> &[u8] {
        let base = offset * n_signals + i * width;
        &sig[base..base + width]
    };
    let mut labels = Vec::with_capacity(n_signals);
    let mut phys_min = Vec::with_capacity(n_signals);
    let mut phys_max = Vec::with_capacity(n_signals);
    let mut dig_min = Vec::with_capacity(n_signals);
    let mut dig_max = Vec::with_capacity(n_signals);
    let mut spr = Vec::with_capacity(n_signals);
    for i in 0..n_signals {
        labels.push(ascii_field(field(0, 16, i)));
        // transducer(80) and phys_dim(8) are skipped: offsets below are in
        // bytes from the start of the signal header block.
        phys_min.push(numeric_field::<f64>(field_bytes(sig, n_signals, 104, 8, i), "phys min")?);
        phys_max.push(numeric_field::<f64>(field_bytes(sig, n_signals, 112, 8, i), "phys max")?);
        dig_min.push(numeric_field::<f64>(field_bytes(sig, n_signals, 120, 8, i), "dig min")?);
        dig_max.push(numeric_field::<f64>(field_bytes(sig, n_signals, 128, 8, i), "dig max")?);
        spr.push(numeric_field::<usize>(
            field_bytes(sig, n_signals, 216, 8, i),
            "samples per record",
        )?);
    }
    let record_samples: usize = spr.iter().sum();
    let expected = header_bytes + n_records * record_samples * 2;
    if bytes.len() != expected {
        return Err(DataError::MalformedHeader(format!(
            "file is {} bytes but the header implies {expected}",
            bytes.len()
        )));
    }

    let mut signals: Vec<EdfSignal> = (0..n_signals)
        .map(|i| EdfSignal {
            label: labels[i].clone(),
            sample_rate_hz: spr[i] as f64 / record_duration_s,
            physical: Vec::with_capacity(n_records * spr[i]),
        })
        .collect();
    let mut off = header_bytes;
    for _ in 0..n_records {
        for i in 0..n_signals {
            let span = dig_max[i] - dig_min[i];
            if span == 0.0 {
                return Err(DataError::MalformedHeader(format!(
                    "signal '{}': digital min equals max",
                    labels[i]
                )));
            }
            let gain = (phys_max[i] - phys_min[i]) / span;
            for _ in 0..spr[i] {
                let raw = i16::from_le_bytes([bytes[off], bytes[off + 1]]) as f64;
                off += 2;
                signals[i]
                    .physical
                    .push(((raw - dig_min[i]) * gain + phys_min[i]) as f32);
            }
        }
    }
    Ok(EdfFile {
        patient,
        recording,
        record_duration_s,
        n_records,
        signals,
    })
}

fn field_bytes<'a>(sig: &'a [u8], ns: usize, byte_offset: usize, width: usize, i: usize) -> &'a [u8] {
    let base = byte_offset * ns + i * width;
    &sig[base..base + width]
}

/// Read an EDF file as a pipeline recording: select the 19 standard
/// channels by normalized name and resample to the target rate.
pub fn read_edf(
    path: &Path,
    meta: RecordingMeta,
    target_rate_hz: f64,
    aliases: &BTreeMap<String, String>,
) -> Result<EegRecording, DataError> {
    let edf = read_edf_file(path)?;
    let mut by_name: BTreeMap<String, &EdfSignal> = BTreeMap::new();
    for s in &edf.signals {
        if let Some(canonical) = normalize_channel_name(&s.label, aliases) {
            by_name.entry(canonical).or_insert(s);
        }
    }
    let mut channels = Vec::with_capacity(STANDARD_CHANNELS.len());
    for &name in STANDARD_CHANNELS.iter() {
        let sig = by_name
            .get(name)
            .ok_or_else(|| DataError::MissingChannel(name.to_string()))?;
        channels.push(resample_linear(&sig.physical, sig.sample_rate_hz, target_rate_hz));
    }
    let n_uni = channels.iter().map(|c| c.len()).min().unwrap_or(0);
    if n_uni == 0 {
        return Err(DataError::BadData("empty recording after resampling".into()));
    }
    let mut samples = Vec::with_capacity(STANDARD_CHANNELS.len() * n_uni);
    for c in &channels {
        samples.extend_from_slice(&c[..n_uni]);
    }
    let rec = EegRecording {
        meta,
        sample_rate_hz: target_rate_hz,
        channel_names: STANDARD_CHANNELS.iter().map(|s| s.to_string()).collect(),
        samples,
        n_samples: n_uni,
    };
    rec.validate()?;
    Ok(rec)
}

/// Write a minimal EDF file: one-second records, per-channel physical range
/// from the data, digital range the full i16 span.
pub fn write_edf(
    path: &Path,
    channel_names: &[String],
    sample_rate_hz: f64,
    channels: &[Vec<f32>],
    patient: &str,
) -> Result<(), DataError> {
    if channel_names.len() != channels.len() || channels.is_empty() {
        return Err(DataError::BadData("channel name/data count mismatch".into()));
    }
    let spr = sample_rate_hz.round() as usize;
    if spr == 0 || (sample_rate_hz - spr as f64).abs() > 1e-9 {
        return Err(DataError::BadData(
            "writer requires an integral sample rate".into(),
        ));
    }
    let n_samples = channels.iter().map(|c| c.len()).min().unwrap();
    let n_records = n_samples / spr;
    if n_records == 0 {
        return Err(DataError::BadData("less than one record of data".into()));
    }
    let ns = channels.len();

    let mut phys_min = vec![0.0f64; ns];
    let mut phys_max = vec![0.0f64; ns];
    for (i, c) in channels.iter().enumerate() {
        let lo = c.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = c.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let (lo, hi) = if (hi - lo).abs() < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        };
        phys_min[i] = lo;
        phys_max[i] = hi;
    }
    let (dig_min, dig_max) = (-32768f64, 32767f64);

    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    let mut pad = |s: &str, width: usize| -> Vec<u8> {
        let mut v = s.as_bytes().to_vec();
        v.truncate(width);
        v.resize(width, b' ');
        v
    };
    let header_bytes = 256 * (ns + 1);
    let mut head = Vec::new();
    head.extend(pad("0", 8));
    head.extend(pad(patient, 80));
    head.extend(pad("onsetkit export", 80));
    head.extend(pad("01.01.20", 8));
    head.extend(pad("00.00.00", 8));
    head.extend(pad(&header_bytes.to_string(), 8));
    head.extend(pad("", 44));
    head.extend(pad(&n_records.to_string(), 8));
    head.extend(pad("1", 8));
    head.extend(pad(&ns.to_string(), 4));
    // signal header arrays
    for name in channel_names {
        head.extend(pad(name, 16));
    }
    for _ in 0..ns {
        head.extend(pad("", 80)); // transducer
    }
    for _ in 0..ns {
        head.extend(pad("uV", 8));
    }
    for i in 0..ns {
        head.extend(pad(&format!("{:.3}", phys_min[i]), 8));
    }
    for i in 0..ns {
        head.extend(pad(&format!("{:.3}", phys_max[i]), 8));
    }
    for _ in 0..ns {
        head.extend(pad("-32768", 8));
    }
    for _ in 0..ns {
        head.extend(pad("32767", 8));
    }
    for _ in 0..ns {
        head.extend(pad("", 80)); // prefiltering
    }
    for _ in 0..ns {
        head.extend(pad(&spr.to_string(), 8));
    }
    for _ in 0..ns {
        head.extend(pad("", 32));
    }
    debug_assert_eq!(head.len(), header_bytes);
    w.write_all(&head).map_err(|e| io_err(path, e))?;

    // The writer re-parses its own formatted physical ranges so the
    // reader's calibration matches exactly.
    let parsed_min: Vec<f64> = phys_min.iter().map(|v| format!("{v:.3}").parse().unwrap()).collect();
    let parsed_max: Vec<f64> = phys_max.iter().map(|v| format!("{v:.3}").parse().unwrap()).collect();
    for rec_i in 0..n_records {
        for (i, c) in channels.iter().enumerate() {
            let gain = (dig_max - dig_min) / (parsed_max[i] - parsed_min[i]);
            for t in 0..spr {
                let v = c[rec_i * spr + t] as f64;
                let dig = ((v - parsed_min[i]) * gain + dig_min).round().clamp(dig_min, dig_max);
                w.write_all(&(dig as i16).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

//! Native recording container: the toolkit's internal interchange format.
//!
//! Layout: magic `EEGN`, u32 version, length-prefixed UTF-8 metadata
//! strings, u8 age-group and ICU flags, u32 channel count, f64 sample rate,
//! u64 sample count, length-prefixed channel names, then row-major
//! (channel-major) float32 little-endian samples. Everything is bit-exact
//! on round trip.

use std::io::{Read, Write};
use std::path::Path;

use super::{io_err, AgeGroup, DataError, EegRecording, RecordingMeta};

const MAGIC: &[u8; 4] = b"EEGN";
const VERSION: u32 = 1;

pub fn save_native(rec: &EegRecording, path: &Path) -> Result<(), DataError> {
    rec.validate()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    let werr = |e: std::io::Error| io_err(path, e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    for s in [
        &rec.meta.recording_id,
        &rec.meta.patient_id,
        &rec.meta.hospital,
    ] {
        write_str(&mut w, s).map_err(werr)?;
    }
    w.write_all(&[match rec.meta.age_group {
        AgeGroup::Adult => 0u8,
        AgeGroup::Pediatric => 1u8,
    }])
    .map_err(werr)?;
    w.write_all(&[rec.meta.icu as u8]).map_err(werr)?;
    w.write_all(&(rec.n_channels() as u32).to_le_bytes())
        .map_err(werr)?;
    w.write_all(&rec.sample_rate_hz.to_le_bytes()).map_err(werr)?;
    w.write_all(&(rec.n_samples as u64).to_le_bytes())
        .map_err(werr)?;
    for name in &rec.channel_names {
        write_str(&mut w, name).map_err(werr)?;
    }
    for &v in &rec.samples {
        w.write_all(&v.to_le_bytes()).map_err(werr)?;
    }
    w.flush().map_err(werr)?;
    Ok(())
}

pub fn load_native(path: &Path) -> Result<EegRecording, DataError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| io_err(path, e))?);
    let rerr = |e: std::io::Error| io_err(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(DataError::MalformedHeader(format!(
            "{}: not a native recording container",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(rerr)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(DataError::MalformedHeader(format!(
            "unsupported container version {version}"
        )));
    }
    let recording_id = read_str(&mut r).map_err(rerr)?;
    let patient_id = read_str(&mut r).map_err(rerr)?;
    let hospital = read_str(&mut r).map_err(rerr)?;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags).map_err(rerr)?;
    let age_group = match flags[0] {
        0 => AgeGroup::Adult,
        1 => AgeGroup::Pediatric,
        other => {
            return Err(DataError::MalformedHeader(format!(
                "unknown age group tag {other}"
            )))
        }
    };
    r.read_exact(&mut v4).map_err(rerr)?;
    let n_channels = u32::from_le_bytes(v4) as usize;
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8).map_err(rerr)?;
    let sample_rate_hz = f64::from_le_bytes(v8);
    r.read_exact(&mut v8).map_err(rerr)?;
    let n_samples = u64::from_le_bytes(v8) as usize;
    let mut channel_names = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        channel_names.push(read_str(&mut r).map_err(rerr)?);
    }
    let mut samples = vec![0.0f32; n_channels * n_samples];
    let mut buf = vec![0u8; n_channels * n_samples * 4];
    r.read_exact(&mut buf).map_err(rerr)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        samples[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    let rec = EegRecording {
        meta: RecordingMeta {
            recording_id,
            patient_id,
            age_group,
            icu: flags[1] != 0,
            hospital,
        },
        sample_rate_hz,
        channel_names,
        samples,
        n_samples,
    };
    rec.validate()?;
    Ok(rec)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let mut n4 = [0u8; 4];
    r.read_exact(&mut n4)?;
    let n = u32::from_le_bytes(n4) as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

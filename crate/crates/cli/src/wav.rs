//! Mono 16-bit PCM RIFF/WAVE files, read and written with bit-exact
//! headers.

use std::fs;
use std::io::Write;
use std::path::Path;

use dprcnet_core::signal::Waveform;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad {field}: expected {expected}")]
    BadField { field: &'static str, expected: &'static str },
    #[error("unsupported {field}: {value} (only mono 16-bit PCM is handled)")]
    Unsupported { field: &'static str, value: u32 },
    #[error("truncated {0}")]
    Truncated(&'static str),
}

const PCM_FORMAT: u16 = 1;
const BITS_PER_SAMPLE: u16 = 16;

/// Writes the waveform as mono 16-bit PCM. Samples outside [-1, 1] are
/// clipped; the number of clipped samples is returned so callers can warn.
/// The file is written to a temporary sibling and renamed into place.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<usize, WavError> {
    let mut clipped = 0usize;
    let mut pcm = Vec::with_capacity(w.len() * 2);
    for &s in &w.samples {
        let c = if s > 1.0 {
            clipped += 1;
            1.0
        } else if s < -1.0 {
            clipped += 1;
            -1.0
        } else {
            s
        };
        let q = (c * 32767.0).round() as i16;
        pcm.extend_from_slice(&q.to_le_bytes());
    }

    let data_len = pcm.len() as u32;
    let byte_rate = w.sample_rate * u32::from(BITS_PER_SAMPLE / 8);
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&u16::from(BITS_PER_SAMPLE / 8).to_le_bytes()); // block align
    out.extend_from_slice(&BITS_PER_SAMPLE.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);

    let tmp = path.with_extension("wav.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(clipped)
}

/// Reads a mono 16-bit PCM RIFF/WAVE file, scaling samples to [-1, 1].
/// Unknown chunks are skipped; malformed or unsupported fields are named in
/// the error.
pub fn read_wav(path: &Path) -> Result<Waveform, WavError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(WavError::Truncated("riff header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::BadField { field: "chunk id", expected: "RIFF" });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadField { field: "format", expected: "WAVE" });
    }

    let mut sample_rate: Option<u32> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(WavError::Truncated(if id == b"data" { "data chunk" } else { "chunk" }));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Truncated("fmt chunk"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != PCM_FORMAT {
                    return Err(WavError::Unsupported { field: "audio format", value: format.into() });
                }
                if channels != 1 {
                    return Err(WavError::Unsupported { field: "channels", value: channels.into() });
                }
                if bits != BITS_PER_SAMPLE {
                    return Err(WavError::Unsupported { field: "bits per sample", value: bits.into() });
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body_start + size + (size & 1);
    }

    let sample_rate = sample_rate.ok_or(WavError::BadField { field: "fmt chunk", expected: "present" })?;
    let data = data.ok_or(WavError::BadField { field: "data chunk", expected: "present" })?;
    if data.len() % 2 != 0 {
        return Err(WavError::Truncated("data chunk"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dprcnet_core::rng::SeededRng;
    use tempfile::tempdir;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = SeededRng::new(seed);
        Waveform::new((0..n).map(|_| rng.uniform(-0.9, 0.9)).collect(), 8000)
    }

    #[test]
    fn header_constants() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&noise(8000, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        // 8000 samples at 16 bits -> 16000 data bytes.
        let data_len = u32::from_le_bytes(bytes[40..44].try_into().unwrap());
        assert_eq!(data_len, 16000);
        assert_eq!(bytes.len(), 44 + 16000);
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let w = noise(1000, 2);
        let clipped = write_wav(&w, &path).unwrap();
        assert_eq!(clipped, 0);
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 8000);
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn clipping_counted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let w = Waveform::new(vec![0.0, 1.5, -2.0, 0.5], 8000);
        assert_eq!(write_wav(&w, &path).unwrap(), 2);
        let r = read_wav(&path).unwrap();
        assert_eq!(r.samples[1], 1.0);
        assert_eq!(r.samples[2], -1.0);
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.wav");
        write_wav(&noise(100, 3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(WavError::Unsupported { field: "channels", .. })
        ));
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.wav");
        write_wav(&noise(100, 4), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::Truncated(_))));
    }

    #[test]
    fn non_riff_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.wav");
        std::fs::write(&path, b"not a wave file at all......").unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::BadField { field: "chunk id", .. })));
    }
}

//! Seeded synthetic two-source generation, SNR-controlled mixing, and
//! line-oriented dataset manifests.
//!
//! Manifest format: a `# dprcnet manifest` comment, a `sample_rate<TAB>hz`
//! line, then one entry per line with tab-separated fields
//! `mixture_path  src1_path  src2_path  duration_s  seed`, paths relative to
//! the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use dprcnet_core::rng::SeededRng;
use dprcnet_core::signal::{MixtureSample, Waveform};
use thiserror::Error;

use crate::wav::{read_wav, write_wav, WavError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Wav(#[from] WavError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Parameter(String),
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
}

/// Synthetic source families. Two band-noise sources with disjoint bands
/// give a well-defined separation target.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    BandNoise { lo_hz: f64, hi_hz: f64 },
    Harmonic { f0_hz: f64, partials: usize },
}

/// Default spectrally disjoint band pair for generated corpora.
pub const DEFAULT_BANDS: ((f64, f64), (f64, f64)) = ((300.0, 1200.0), (1800.0, 3400.0));

const FIR_TAPS: usize = 257;

/// Windowed-sinc bandpass (Blackman window, 257 taps, ~74 dB stop-band
/// attenuation), applied with zero-padded edges so the length is preserved.
fn bandpass_fir(lo: f64, hi: f64, sample_rate: f64) -> Vec<f64> {
    let center = (FIR_TAPS - 1) as f64 / 2.0;
    let sinc = |x: f64| {
        if x.abs() < 1e-12 {
            1.0
        } else {
            (core::f64::consts::PI * x).sin() / (core::f64::consts::PI * x)
        }
    };
    let f_lo = lo / sample_rate;
    let f_hi = hi / sample_rate;
    (0..FIR_TAPS)
        .map(|n| {
            let t = n as f64 - center;
            let ideal = 2.0 * f_hi * sinc(2.0 * f_hi * t) - 2.0 * f_lo * sinc(2.0 * f_lo * t);
            let w = 0.42 - 0.5 * (2.0 * core::f64::consts::PI * n as f64 / (FIR_TAPS - 1) as f64).cos()
                + 0.08 * (4.0 * core::f64::consts::PI * n as f64 / (FIR_TAPS - 1) as f64).cos();
            ideal * w
        })
        .collect()
}

fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let center = (h.len() - 1) / 2;
    let mut out = vec![0.0; x.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &hv) in h.iter().enumerate() {
            let idx = n as isize + k as isize - center as isize;
            if idx >= 0 && (idx as usize) < x.len() {
                acc += hv * x[idx as usize];
            }
        }
        *o = acc;
    }
    out
}

/// Generates one unit-RMS source, deterministic under (kind, seed).
pub fn synth_source(
    kind: &SourceKind,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform, DataError> {
    if duration_s <= 0.0 {
        return Err(DataError::Parameter("duration must be positive".into()));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(DataError::Parameter("duration rounds to zero samples".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mut rng = SeededRng::new(seed);
    let mut samples = match kind {
        SourceKind::BandNoise { lo_hz, hi_hz } => {
            if !(0.0 < *lo_hz && lo_hz < hi_hz && *hi_hz < nyquist) {
                return Err(DataError::Parameter(format!(
                    "band {lo_hz}-{hi_hz} Hz must satisfy 0 < lo < hi < {nyquist}"
                )));
            }
            let white: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            convolve_same(&white, &bandpass_fir(*lo_hz, *hi_hz, sample_rate as f64))
        }
        SourceKind::Harmonic { f0_hz, partials } => {
            if !(0.0 < *f0_hz && *f0_hz < nyquist) {
                return Err(DataError::Parameter(format!(
                    "fundamental {f0_hz} Hz must lie below the Nyquist rate {nyquist}"
                )));
            }
            if *partials == 0 {
                return Err(DataError::Parameter("at least one partial required".into()));
            }
            let phases: Vec<f64> = (0..*partials)
                .map(|_| rng.uniform(0.0, 2.0 * core::f64::consts::PI))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sample_rate as f64;
                    phases
                        .iter()
                        .enumerate()
                        .map(|(m, phase)| {
                            let f = f0_hz * (m + 1) as f64;
                            if f < nyquist {
                                (2.0 * core::f64::consts::PI * f * t + phase).sin()
                            } else {
                                0.0
                            }
                        })
                        .sum()
                })
                .collect()
        }
    };
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    if rms == 0.0 {
        return Err(DataError::Parameter("generated source is silent".into()));
    }
    for s in &mut samples {
        *s /= rms;
    }
    Ok(Waveform::new(samples, sample_rate))
}

/// Uniform mixing SNR on [-5, 5] dB.
pub fn draw_snr_db(rng: &mut SeededRng) -> f64 {
    rng.uniform(-5.0, 5.0)
}

/// Rescales `s2` so the s1-to-s2 power ratio is `snr_db`, then sums. The
/// stored sources are the rescaled ones, so the mixture equals their
/// sample-wise sum exactly.
pub fn mix_at_snr(
    s1: &Waveform,
    s2: &Waveform,
    snr_db: f64,
    seed: u64,
) -> Result<MixtureSample, DataError> {
    if s1.len() != s2.len() {
        return Err(DataError::Parameter(format!(
            "source lengths differ: {} vs {}",
            s1.len(),
            s2.len()
        )));
    }
    let (p1, p2) = (s1.power(), s2.power());
    if p1 == 0.0 || p2 == 0.0 {
        return Err(DataError::Parameter("sources must not be silent".into()));
    }
    let gain = (p1 / (p2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = s2.scaled(gain);
    let mixture = Waveform::new(
        s1.samples.iter().zip(&scaled.samples).map(|(a, b)| a + b).collect(),
        s1.sample_rate,
    );
    Ok(MixtureSample {
        mixture,
        sources: vec![s1.clone(), scaled],
        noise: None,
        snr_db,
        seed,
    })
}

/// Rescales every component by a common factor so the peak magnitude fits
/// 16-bit files with headroom. A common factor preserves the mixing identity
/// and, since SI-SDR is scale-invariant, all separation targets.
fn normalize_peak(sample: MixtureSample, peak: f64) -> MixtureSample {
    let max = sample
        .mixture
        .samples
        .iter()
        .chain(sample.sources.iter().flat_map(|s| s.samples.iter()))
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    if max <= peak || max == 0.0 {
        return sample;
    }
    let g = peak / max;
    MixtureSample {
        mixture: sample.mixture.scaled(g),
        sources: sample.sources.iter().map(|s| s.scaled(g)).collect(),
        noise: sample.noise.as_ref().map(|n| n.scaled(g)),
        snr_db: sample.snr_db,
        seed: sample.seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub mixture: PathBuf,
    pub source1: PathBuf,
    pub source2: PathBuf,
    pub duration_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory entry paths are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::from("# dprcnet manifest\n");
        out.push_str(&format!("sample_rate\t{}\n", self.sample_rate));
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.mixture.display(),
                e.source1.display(),
                e.source2.display(),
                e.duration_s,
                e.seed
            ));
        }
        let tmp = path.with_extension("tsv.tmp");
        fs::write(&tmp, out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest, DataError> {
        let text = fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut sample_rate: Option<u32> = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if sample_rate.is_none() {
                if fields.len() != 2 || fields[0] != "sample_rate" {
                    return Err(DataError::ManifestParse {
                        line: i + 1,
                        message: "expected `sample_rate<TAB>hz` header".into(),
                    });
                }
                sample_rate = Some(fields[1].parse().map_err(|_| DataError::ManifestParse {
                    line: i + 1,
                    message: format!("bad sample rate {:?}", fields[1]),
                })?);
                continue;
            }
            if fields.len() != 5 {
                return Err(DataError::ManifestParse {
                    line: i + 1,
                    message: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            entries.push(ManifestEntry {
                mixture: PathBuf::from(fields[0]),
                source1: PathBuf::from(fields[1]),
                source2: PathBuf::from(fields[2]),
                duration_s: fields[3].parse().map_err(|_| DataError::ManifestParse {
                    line: i + 1,
                    message: format!("bad duration {:?}", fields[3]),
                })?,
                seed: fields[4].parse().map_err(|_| DataError::ManifestParse {
                    line: i + 1,
                    message: format!("bad seed {:?}", fields[4]),
                })?,
            });
        }
        let sample_rate = sample_rate.ok_or(DataError::ManifestParse {
            line: 0,
            message: "missing sample_rate header".into(),
        })?;
        Ok(Manifest { sample_rate, entries, base_dir })
    }

    /// Loads every referenced WAV and rebuilds the in-memory samples. The
    /// realized mixing SNR is recovered from the stored source powers.
    pub fn load_samples(&self) -> Result<Vec<MixtureSample>, DataError> {
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let mixture = read_wav(&self.base_dir.join(&e.mixture))?;
            let s1 = read_wav(&self.base_dir.join(&e.source1))?;
            let s2 = read_wav(&self.base_dir.join(&e.source2))?;
            for w in [&mixture, &s1, &s2] {
                if w.sample_rate != self.sample_rate {
                    return Err(DataError::Parameter(format!(
                        "sample rate {} in {:?} does not match manifest rate {}",
                        w.sample_rate, e.mixture, self.sample_rate
                    )));
                }
            }
            let snr_db = 10.0 * (s1.power() / s2.power()).log10();
            out.push(MixtureSample {
                mixture,
                sources: vec![s1, s2],
                noise: None,
                snr_db,
                seed: e.seed,
            });
        }
        Ok(out)
    }
}

/// Generates `n` two-source mixtures from spectrally disjoint band-noise
/// families, writes the WAVs and a `manifest.tsv` into `out_dir`, and
/// returns the manifest. Fully reproducible from `seed`.
pub fn build_dataset(
    n: usize,
    duration_s: f64,
    out_dir: &Path,
    seed: u64,
    sample_rate: u32,
) -> Result<Manifest, DataError> {
    if n == 0 {
        return Err(DataError::Parameter("dataset size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let ((lo1, hi1), (lo2, hi2)) = DEFAULT_BANDS;
    let mut master = SeededRng::new(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let entry_seed = master.next_u64();
        let mut entry_rng = SeededRng::new(entry_seed);
        let s1 = synth_source(
            &SourceKind::BandNoise { lo_hz: lo1, hi_hz: hi1 },
            duration_s,
            sample_rate,
            entry_rng.next_u64(),
        )?;
        let s2 = synth_source(
            &SourceKind::BandNoise { lo_hz: lo2, hi_hz: hi2 },
            duration_s,
            sample_rate,
            entry_rng.next_u64(),
        )?;
        let snr_db = draw_snr_db(&mut entry_rng);
        let sample = normalize_peak(mix_at_snr(&s1, &s2, snr_db, entry_seed)?, 0.9);

        let names = [
            format!("mix_{i:04}.wav"),
            format!("s1_{i:04}.wav"),
            format!("s2_{i:04}.wav"),
        ];
        write_wav(&sample.mixture, &out_dir.join(&names[0]))?;
        write_wav(&sample.sources[0], &out_dir.join(&names[1]))?;
        write_wav(&sample.sources[1], &out_dir.join(&names[2]))?;
        entries.push(ManifestEntry {
            mixture: PathBuf::from(&names[0]),
            source1: PathBuf::from(&names[1]),
            source2: PathBuf::from(&names[2]),
            duration_s,
            seed: entry_seed,
        });
    }
    let manifest = Manifest { sample_rate, entries, base_dir: out_dir.to_path_buf() };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};
    use tempfile::tempdir;

    #[test]
    fn synth_is_deterministic_under_seed() {
        let kind = SourceKind::BandNoise { lo_hz: 300.0, hi_hz: 1200.0 };
        let a = synth_source(&kind, 0.5, 8000, 7).unwrap();
        let b = synth_source(&kind, 0.5, 8000, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = synth_source(&kind, 0.5, 8000, 8).unwrap();
        assert_ne!(a.samples, c.samples);

        let h = SourceKind::Harmonic { f0_hz: 220.0, partials: 5 };
        let d = synth_source(&h, 0.5, 8000, 7).unwrap();
        let e = synth_source(&h, 0.5, 8000, 7).unwrap();
        assert_eq!(d.samples, e.samples);
    }

    #[test]
    fn sources_are_unit_rms() {
        for kind in [
            SourceKind::BandNoise { lo_hz: 300.0, hi_hz: 1200.0 },
            SourceKind::Harmonic { f0_hz: 150.0, partials: 8 },
        ] {
            let w = synth_source(&kind, 1.0, 8000, 3).unwrap();
            assert!((w.rms() - 1.0).abs() <= 1e-6, "rms {}", w.rms());
        }
    }

    fn band_energy_fraction(w: &Waveform, lo: f64, hi: f64) -> f64 {
        let n = w.len();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> =
            w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
        fft.process(&mut buf);
        let hz_per_bin = w.sample_rate as f64 / n as f64;
        let mut inside = 0.0;
        let mut total = 0.0;
        for (bin, v) in buf.iter().enumerate().take(n / 2 + 1) {
            let f = bin as f64 * hz_per_bin;
            let p = v.norm_sqr();
            total += p;
            if (lo..=hi).contains(&f) {
                inside += p;
            }
        }
        inside / total
    }

    #[test]
    fn band_noise_energy_concentrated_in_band() {
        for (lo, hi) in [(300.0, 1200.0), (1800.0, 3400.0)] {
            let w = synth_source(&SourceKind::BandNoise { lo_hz: lo, hi_hz: hi }, 1.0, 8000, 11)
                .unwrap();
            let frac = band_energy_fraction(&w, lo, hi);
            assert!(frac >= 0.90, "only {frac:.3} of energy in {lo}-{hi} Hz");
        }
    }

    #[test]
    fn band_outside_nyquist_rejected() {
        for (lo, hi) in [(0.0, 1000.0), (3000.0, 1000.0), (300.0, 4000.0), (300.0, 5000.0)] {
            assert!(
                synth_source(&SourceKind::BandNoise { lo_hz: lo, hi_hz: hi }, 0.5, 8000, 0).is_err(),
                "{lo}-{hi} accepted"
            );
        }
        assert!(synth_source(&SourceKind::Harmonic { f0_hz: 4000.0, partials: 2 }, 0.5, 8000, 0)
            .is_err());
    }

    #[test]
    fn mix_gain_matches_requested_snr() {
        let s1 = synth_source(&SourceKind::BandNoise { lo_hz: 300.0, hi_hz: 1200.0 }, 0.5, 8000, 1)
            .unwrap();
        let s2 = synth_source(&SourceKind::BandNoise { lo_hz: 1800.0, hi_hz: 3400.0 }, 0.5, 8000, 2)
            .unwrap();
        // Unit-RMS inputs: 0 dB keeps the power, 20 dB scales s2 by 0.1.
        let balanced = mix_at_snr(&s1, &s2, 0.0, 0).unwrap();
        assert!((balanced.sources[1].rms() - 1.0).abs() <= 1e-9);
        let quiet = mix_at_snr(&s1, &s2, 20.0, 0).unwrap();
        assert!((quiet.sources[1].rms() - 0.1).abs() <= 1e-9);
        // Realized power ratio matches the draw.
        let drawn = mix_at_snr(&s1, &s2, -3.7, 0).unwrap();
        let realized = 10.0 * (drawn.sources[0].power() / drawn.sources[1].power()).log10();
        assert!((realized + 3.7).abs() <= 1e-9);
    }

    #[test]
    fn mixture_is_exact_sum_of_sources() {
        let s1 = synth_source(&SourceKind::BandNoise { lo_hz: 300.0, hi_hz: 1200.0 }, 0.25, 8000, 3)
            .unwrap();
        let s2 = synth_source(&SourceKind::BandNoise { lo_hz: 1800.0, hi_hz: 3400.0 }, 0.25, 8000, 4)
            .unwrap();
        let m = mix_at_snr(&s1, &s2, 2.5, 0).unwrap();
        for i in 0..m.mixture.len() {
            let sum = m.sources[0].samples[i] + m.sources[1].samples[i];
            assert!((m.mixture.samples[i] - sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn silent_source_rejected() {
        let s1 = Waveform::new(vec![0.0; 100], 8000);
        let s2 = Waveform::new(vec![0.1; 100], 8000);
        assert!(mix_at_snr(&s1, &s2, 0.0, 0).is_err());
        assert!(mix_at_snr(&s2, &s1, 0.0, 0).is_err());
        let s3 = Waveform::new(vec![0.1; 50], 8000);
        assert!(mix_at_snr(&s2, &s3, 0.0, 0).is_err());
    }

    #[test]
    fn snr_draws_are_uniform_on_range() {
        // Kolmogorov-Smirnov against U(-5, 5); critical value at the 1%
        // level is 1.628/sqrt(n).
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|seed| draw_snr_db(&mut SeededRng::new(seed as u64)))
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d_stat = 0.0f64;
        for (i, x) in draws.iter().enumerate() {
            let cdf = (x + 5.0) / 10.0;
            assert!((0.0..=1.0).contains(&cdf), "draw {x} outside [-5, 5]");
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d_stat < critical, "KS statistic {d_stat:.5} >= {critical:.5}");
    }

    #[test]
    fn build_dataset_counts_and_determinism() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let a = build_dataset(4, 0.25, dir_a.path(), 77, 8000).unwrap();
        let b = build_dataset(4, 0.25, dir_b.path(), 77, 8000).unwrap();
        assert_eq!(a.entries.len(), 4);
        let wavs = |d: &Path| {
            let mut names: Vec<String> = fs::read_dir(d)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .filter(|n| n.ends_with(".wav"))
                .collect();
            names.sort();
            names
        };
        let names = wavs(dir_a.path());
        assert_eq!(names.len(), 12);
        // Byte-identical corpora from the same seed.
        for name in &names {
            let ba = fs::read(dir_a.path().join(name)).unwrap();
            let bb = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(ba, bb, "{name} differs between same-seed runs");
        }
        assert_eq!(
            fs::read(dir_a.path().join("manifest.tsv")).unwrap(),
            fs::read(dir_b.path().join("manifest.tsv")).unwrap()
        );
        let c = build_dataset(4, 0.25, dir_b.path(), 78, 8000).unwrap();
        assert_ne!(a.entries[0].seed, c.entries[0].seed);
    }

    #[test]
    fn dataset_files_satisfy_mixing_identity_after_quantization() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(3, 0.25, dir.path(), 5, 8000).unwrap();
        let samples = manifest.load_samples().unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            for i in 0..s.mixture.len() {
                let sum = s.sources[0].samples[i] + s.sources[1].samples[i];
                // Three independently quantized signals.
                assert!((s.mixture.samples[i] - sum).abs() <= 2.0 / 32767.0);
            }
        }
    }

    #[test]
    fn manifest_round_trip_reproduces_dataset() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(2, 0.25, dir.path(), 13, 8000).unwrap();
        let reread = Manifest::read(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(reread.sample_rate, manifest.sample_rate);
        assert_eq!(reread.entries, manifest.entries);
        let a = manifest.load_samples().unwrap();
        let b = reread.load_samples().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mixture.samples, y.mixture.samples);
            assert_eq!(x.sources[0].samples, y.sources[0].samples);
            assert_eq!(x.sources[1].samples, y.sources[1].samples);
            assert_eq!(x.seed, y.seed);
        }
    }

    #[test]
    fn manifest_parse_errors_name_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "sample_rate\t8000\nmix.wav\ts1.wav\n").unwrap();
        match Manifest::read(&path) {
            Err(DataError::ManifestParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "nonsense\n").unwrap();
        assert!(matches!(Manifest::read(&path), Err(DataError::ManifestParse { .. })));
    }
}

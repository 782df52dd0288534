//! Waveforms and mixtures, the time-domain data the pipeline moves around.

use alloc::vec::Vec;

use crate::math;

/// Canonical sample rate for the toolkit.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// A mono signal with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        assert!(samples.iter().all(|s| s.is_finite()), "waveform samples must be finite");
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.len() as f64
    }

    pub fn rms(&self) -> f64 {
        math::sqrt(self.power())
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// One training/evaluation item: a mixture, its rescaled sources, and the
/// mixing metadata. The mixture equals the sample-wise sum of the sources
/// (plus noise when present).
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    /// SNR drawn for the mix, in dB.
    pub snr_db: f64,
    pub seed: u64,
}

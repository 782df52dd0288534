//! Complexity accounting (parameter and multiply-accumulate counts from the
//! configuration alone) and separation-metric evaluation over datasets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::chunk::ChunkSpec;
use crate::frontend;
use crate::separator::{DpRcNet, ModelConfig};
use crate::signal::MixtureSample;
use crate::train::{separation_improvement, TrainError, TrainResult};
use crate::tensor::{TensorError, TensorResult};

/// Parameter and MACs totals with per-module breakdowns. Totals always equal
/// the sum of their breakdown.
#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub params_total: u64,
    pub params_by_module: Vec<(String, u64)>,
    /// One forward pass at `macs_duration_seconds`, when requested.
    pub macs_total: Option<u64>,
    pub macs_by_module: Vec<(String, u64)>,
    pub macs_duration_seconds: Option<f64>,
    pub sample_rate: Option<u32>,
    /// Counting conventions the numbers depend on.
    pub assumptions: Vec<String>,
}

fn subblock_params(dim: u64, hidden: u64) -> u64 {
    let lstm = 2 * 4 * hidden * (dim + hidden + 1);
    let fc = dim * 2 * hidden + dim;
    let norm = 2 * dim;
    let expand = 4 * dim * dim + 4 * dim;
    let contract = dim * 4 * dim + dim;
    let gamma = dim;
    lstm + fc + norm + expand + contract + gamma
}

/// Closed-form parameter count; equals direct enumeration of an
/// instantiated model.
pub fn count_params(cfg: &ModelConfig) -> ComplexityReport {
    let n = cfg.encoder_dim as u64;
    let l = cfg.frame_len as u64;
    let b = cfg.bottleneck_dim as u64;
    let h = cfg.lstm_hidden as u64;
    let s = cfg.num_speakers as u64;

    let mut modules: Vec<(String, u64)> = Vec::new();
    modules.push((String::from("encoder"), n * l));
    modules.push((String::from("input_norm"), 2 * n));
    modules.push((String::from("bottleneck"), b * n + b));
    let mut d_in = b;
    for (r, (&dim, &blocks)) in cfg.stage_dims.iter().zip(&cfg.stage_blocks).enumerate() {
        let dim = dim as u64;
        let entry = 2 * d_in + dim * d_in + dim;
        let body = 2 * blocks as u64 * subblock_params(dim, h);
        modules.push((format!("stage{r}"), entry + body));
        d_in = dim;
    }
    modules.push((String::from("head"), s * n * d_in + s * n));
    modules.push((String::from("decoder"), n * l));

    ComplexityReport {
        params_total: modules.iter().map(|(_, v)| v).sum(),
        params_by_module: modules,
        macs_total: None,
        macs_by_module: Vec::new(),
        macs_duration_seconds: None,
        sample_rate: None,
        assumptions: assumptions(),
    }
}

fn assumptions() -> Vec<String> {
    alloc::vec![
        String::from("one MAC = one multiply-add"),
        String::from("biases, activations, norms, masking, and overlap-adds excluded from MACs"),
        String::from("LSTM MACs = steps * directions * 4 * hidden * (input + hidden)"),
        String::from("conv MACs = output elements * fan-in; linear MACs = positions * out * in"),
    ]
}

/// Multiply-accumulate count for one forward pass separating S speakers
/// from a mixture of the given duration.
pub fn estimate_macs(
    cfg: &ModelConfig,
    duration_seconds: f64,
    sample_rate: u32,
) -> TensorResult<ComplexityReport> {
    if duration_seconds <= 0.0 {
        return Err(TensorError::InvalidArgument("duration must be positive"));
    }
    let samples = (duration_seconds * sample_rate as f64) as usize;
    if samples < cfg.frame_len {
        return Err(TensorError::InvalidArgument("duration is shorter than one frame"));
    }
    let t_padded = frontend::padded_len(samples, cfg.frame_len, cfg.stride);
    let k = frontend::frame_count(t_padded, cfg.frame_len, cfg.stride) as u64;
    let spec = ChunkSpec::plan(k as usize, cfg.chunk_size, cfg.hop)?;
    let positions = (cfg.chunk_size * spec.positions()) as u64;

    let n = cfg.encoder_dim as u64;
    let l = cfg.frame_len as u64;
    let b = cfg.bottleneck_dim as u64;
    let h = cfg.lstm_hidden as u64;
    let s = cfg.num_speakers as u64;

    let mut modules: Vec<(String, u64)> = Vec::new();
    modules.push((String::from("encoder"), k * n * l));
    modules.push((String::from("bottleneck"), k * n * b));
    let mut d_in = b;
    for (r, (&dim, &blocks)) in cfg.stage_dims.iter().zip(&cfg.stage_blocks).enumerate() {
        let dim = dim as u64;
        let entry = positions * dim * d_in;
        // Per sub-block: Bi-LSTM over all chunk positions plus the FC and
        // the two 1x1 feature maps. Both axes visit I*J positions total.
        let lstm = positions * 2 * 4 * h * (dim + h);
        let fc = positions * dim * 2 * h;
        let mlp = positions * 8 * dim * dim;
        let body = 2 * blocks as u64 * (lstm + fc + mlp);
        modules.push((format!("stage{r}"), entry + body));
        d_in = dim;
    }
    modules.push((String::from("head"), positions * s * n * d_in));
    modules.push((String::from("decoder"), s * k * n * l));

    let report = count_params(cfg);
    Ok(ComplexityReport {
        params_total: report.params_total,
        params_by_module: report.params_by_module,
        macs_total: Some(modules.iter().map(|(_, v)| v).sum()),
        macs_by_module: modules,
        macs_duration_seconds: Some(duration_seconds),
        sample_rate: Some(sample_rate),
        assumptions: assumptions(),
    })
}

/// 64-bit FNV-1a over a canonical serialization of the configuration; used
/// to stamp evaluation reports.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    eat(cfg.frame_len as u64);
    eat(cfg.stride as u64);
    eat(cfg.encoder_dim as u64);
    eat(cfg.bottleneck_dim as u64);
    eat(cfg.chunk_size as u64);
    eat(cfg.hop as u64);
    eat(cfg.stage_dims.len() as u64);
    for &d in &cfg.stage_dims {
        eat(d as u64);
    }
    for &b in &cfg.stage_blocks {
        eat(b as u64);
    }
    eat(cfg.lstm_hidden as u64);
    eat(cfg.num_speakers as u64);
    eat(cfg.layerscale_init.to_bits());
    eat(cfg.droppath_max.to_bits());
    hash
}

/// Per-entry separation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryMetrics {
    pub index: usize,
    pub si_sdri_db: f64,
    pub sdri_db: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub entries: Vec<EntryMetrics>,
    pub mean_si_sdri_db: f64,
    pub mean_sdri_db: f64,
}

/// Separates every sample and scores it against its references, resolving
/// the output permutation by best mean SI-SDR per entry.
pub fn evaluate_samples(model: &DpRcNet, samples: &[MixtureSample]) -> TrainResult<EvalReport> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let eval_model = model.detached();
    let speakers = model.config.num_speakers;
    let run = |(index, sample): (usize, &MixtureSample)| -> TrainResult<EntryMetrics> {
        if sample.sources.len() != speakers {
            return Err(TrainError::SpeakerCountMismatch {
                estimates: speakers,
                references: sample.sources.len(),
            });
        }
        let estimates = eval_model.separate(&sample.mixture)?;
        let (si_sdri_db, sdri_db) =
            separation_improvement(&estimates, &sample.sources, &sample.mixture)?;
        Ok(EntryMetrics { index, si_sdri_db, sdri_db })
    };
    let results: Vec<TrainResult<EntryMetrics>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            samples.par_iter().enumerate().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            samples.iter().enumerate().map(run).collect()
        }
    };
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        entries.push(r?);
    }
    let n = entries.len() as f64;
    let mean_si_sdri_db = entries.iter().map(|e| e.si_sdri_db).sum::<f64>() / n;
    let mean_sdri_db = entries.iter().map(|e| e.sdri_db).sum::<f64>() / n;
    Ok(EvalReport { entries, mean_si_sdri_db, mean_sdri_db })
}

// ── text rendering ──────────────────────────────────────────────────

/// Aligned human-readable complexity table.
pub fn render_complexity_text(report: &ComplexityReport) -> String {
    let mut out = String::new();
    out.push_str("module           params           macs\n");
    let macs_for = |name: &str| {
        report
            .macs_by_module
            .iter()
            .find(|(m, _)| m == name)
            .map(|(_, v)| format!("{v}"))
            .unwrap_or_else(|| String::from("-"))
    };
    for (name, params) in &report.params_by_module {
        out.push_str(&format!("{name:<16} {params:<16} {}\n", macs_for(name)));
    }
    out.push_str(&format!(
        "total            {:<16} {}\n",
        report.params_total,
        report.macs_total.map(|v| format!("{v}")).unwrap_or_else(|| String::from("-"))
    ));
    if let (Some(d), Some(sr)) = (report.macs_duration_seconds, report.sample_rate) {
        out.push_str(&format!("macs counted for one forward pass on {d} s at {sr} Hz\n"));
    }
    for a in &report.assumptions {
        out.push_str(&format!("note: {a}\n"));
    }
    out
}

/// Machine-readable `key=value` lines.
pub fn render_complexity_kv(report: &ComplexityReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("params_total={}\n", report.params_total));
    for (name, v) in &report.params_by_module {
        out.push_str(&format!("params.{name}={v}\n"));
    }
    if let Some(total) = report.macs_total {
        out.push_str(&format!("macs_total={total}\n"));
        for (name, v) in &report.macs_by_module {
            out.push_str(&format!("macs.{name}={v}\n"));
        }
    }
    if let Some(d) = report.macs_duration_seconds {
        out.push_str(&format!("macs_duration_seconds={d}\n"));
    }
    if let Some(sr) = report.sample_rate {
        out.push_str(&format!("sample_rate={sr}\n"));
    }
    out
}

/// Evaluation report: hash-stamped header, one line per entry, mean line.
pub fn render_eval_report(report: &EvalReport, cfg: &ModelConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_hash={:016x}\n", config_hash(cfg)));
    out.push_str("entry\tsi_sdri_db\tsdri_db\n");
    for e in &report.entries {
        out.push_str(&format!("{}\t{:.4}\t{:.4}\n", e.index, e.si_sdri_db, e.sdri_db));
    }
    out.push_str(&format!(
        "mean\t{:.4}\t{:.4}\n",
        report.mean_si_sdri_db, report.mean_sdri_db
    ));
    out
}

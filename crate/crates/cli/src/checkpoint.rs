//! Binary model checkpoints: one container holding a format tag, the model
//! configuration, every named parameter tensor, and training metadata.
//! Round trips are bit-exact.

use std::fs;
use std::path::Path;

use dprcnet_core::separator::{DpRcNet, ModelConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a dprcnet checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter {name}: {message}")]
    BadParameter { name: String, message: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

const MAGIC: &[u8; 4] = b"DPRC";
const VERSION: u32 = 1;

/// Training metadata stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub best_score: Option<f64>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let len = self.u64(what)? as usize;
        self.take(len, what)
    }
}

fn write_config(w: &mut Writer, cfg: &ModelConfig) {
    w.u64(cfg.frame_len as u64);
    w.u64(cfg.stride as u64);
    w.u64(cfg.encoder_dim as u64);
    w.u64(cfg.bottleneck_dim as u64);
    w.u64(cfg.chunk_size as u64);
    w.u64(cfg.hop as u64);
    w.u64(cfg.stage_dims.len() as u64);
    for &d in &cfg.stage_dims {
        w.u64(d as u64);
    }
    for &b in &cfg.stage_blocks {
        w.u64(b as u64);
    }
    w.u64(cfg.lstm_hidden as u64);
    w.u64(cfg.num_speakers as u64);
    w.f64(cfg.layerscale_init);
    w.f64(cfg.droppath_max);
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let frame_len = r.u64("config")? as usize;
    let stride = r.u64("config")? as usize;
    let encoder_dim = r.u64("config")? as usize;
    let bottleneck_dim = r.u64("config")? as usize;
    let chunk_size = r.u64("config")? as usize;
    let hop = r.u64("config")? as usize;
    let stages = r.u64("config")? as usize;
    let mut stage_dims = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_dims.push(r.u64("config")? as usize);
    }
    let mut stage_blocks = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_blocks.push(r.u64("config")? as usize);
    }
    Ok(ModelConfig {
        frame_len,
        stride,
        encoder_dim,
        bottleneck_dim,
        chunk_size,
        hop,
        stage_dims,
        stage_blocks,
        lstm_hidden: r.u64("config")? as usize,
        num_speakers: r.u64("config")? as usize,
        layerscale_init: r.f64("config")?,
        droppath_max: r.f64("config")?,
    })
}

/// Serializes the model and metadata, writing atomically.
pub fn save(
    model: &DpRcNet,
    meta: CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    write_config(&mut w, &model.config);
    w.u64(meta.epoch);
    w.u64(meta.best_score.is_some() as u64);
    w.f64(meta.best_score.unwrap_or(0.0));
    let params = model.named_params();
    w.u64(params.len() as u64);
    for (name, tensor) in params {
        w.bytes(name.as_bytes());
        w.u64(tensor.shape().len() as u64);
        for &d in tensor.shape() {
            w.u64(d as u64);
        }
        for &v in tensor.data() {
            w.f64(v);
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &w.buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reconstructs a model from a checkpoint, validating every parameter name
/// and shape against a freshly built model of the stored configuration.
pub fn load(path: &Path) -> Result<(DpRcNet, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config = read_config(&mut r)?;
    let epoch = r.u64("metadata")?;
    let has_best = r.u64("metadata")? != 0;
    let best = r.f64("metadata")?;
    let meta = CheckpointMeta { epoch, best_score: has_best.then_some(best) };

    let mut model =
        DpRcNet::init(config, 0).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let expected = model.named_params().len();
    let count = r.u64("parameter count")? as usize;
    if count != expected {
        return Err(CheckpointError::BadParameter {
            name: "<count>".into(),
            message: format!("checkpoint has {count} parameters, model needs {expected}"),
        });
    }
    for _ in 0..count {
        let name = String::from_utf8(r.bytes("parameter name")?.to_vec()).map_err(|_| {
            CheckpointError::BadParameter {
                name: "<name>".into(),
                message: "parameter name is not UTF-8".into(),
            }
        })?;
        let rank = r.u64("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("parameter shape")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("parameter data")?);
        }
        model.set_param(&name, data).map_err(|e| CheckpointError::BadParameter {
            name: name.clone(),
            message: e.to_string(),
        })?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy() -> DpRcNet {
        DpRcNet::init(
            ModelConfig {
                frame_len: 4,
                stride: 2,
                encoder_dim: 6,
                bottleneck_dim: 3,
                chunk_size: 4,
                hop: 2,
                stage_dims: vec![2, 4],
                stage_blocks: vec![1, 1],
                lstm_hidden: 2,
                num_speakers: 2,
                layerscale_init: 1e-6,
                droppath_max: 0.1,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy();
        let meta = CheckpointMeta { epoch: 17, best_score: Some(6.25) };
        save(&model, meta, &path).unwrap();
        let (loaded, loaded_meta) = load(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.config, model.config);
        let a = model.named_params();
        let b = loaded.named_params();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {na} not bit-exact");
        }
        // And the serialized bytes themselves are stable.
        let again = dir.path().join("again.ckpt");
        save(&loaded, loaded_meta, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn missing_best_score_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&toy(), CheckpointMeta { epoch: 0, best_score: None }, &path).unwrap();
        let (_, meta) = load(&path).unwrap();
        assert_eq!(meta.best_score, None);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&toy(), CheckpointMeta { epoch: 1, best_score: None }, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Truncated(_))));
    }
}

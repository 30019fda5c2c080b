//! Checkpoint format: a text manifest (one line per parameter: name,
//! dtype, shape) followed by the concatenated raw little-endian IEEE-754
//! f32 values in manifest order, and a trailing little-endian u64 holding
//! the total value count as an integrity check.
//!
//! ```text
//! seqlab-ckpt v1
//! config d_model=64 encoder_layers=2 ... max_tokens=34
//! params 107
//! proj.audio.w f32 16x64
//! ...
//! data
//! <raw f32 values> <u64 value count>
//! ```

use super::{ModelConfig, ModelParams};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Corrupt(msg.into()))
}

impl ModelConfig {
    fn manifest_line(&self) -> String {
        format!(
            "config d_model={} encoder_layers={} decoder_layers={} heads={} ffn_dim={} content_vocab={} frame_dim={} max_frames={} max_tokens={}",
            self.d_model,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ffn_dim,
            self.content_vocab,
            self.frame_dim,
            self.max_frames,
            self.max_tokens
        )
    }

    fn from_manifest_line(line: &str) -> Result<Self, CheckpointError> {
        let mut cfg = ModelConfig::default();
        let body = line
            .strip_prefix("config ")
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad config line: {line}")))?;
        for kv in body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad config item: {kv}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| CheckpointError::Corrupt(format!("bad config value: {kv}")))?;
            match k {
                "d_model" => cfg.d_model = v,
                "encoder_layers" => cfg.encoder_layers = v,
                "decoder_layers" => cfg.decoder_layers = v,
                "heads" => cfg.heads = v,
                "ffn_dim" => cfg.ffn_dim = v,
                "content_vocab" => cfg.content_vocab = v,
                "frame_dim" => cfg.frame_dim = v,
                "max_frames" => cfg.max_frames = v,
                "max_tokens" => cfg.max_tokens = v,
                other => return corrupt(format!("unknown config key: {other}")),
            }
        }
        Ok(cfg)
    }
}

impl ModelParams<f32> {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "seqlab-ckpt v1")?;
        writeln!(w, "{}", self.config.manifest_line())?;
        writeln!(w, "params {}", self.entries().len())?;
        for e in self.entries() {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} f32 {}", e.name, dims.join("x"))?;
        }
        writeln!(w, "data")?;
        let mut count: u64 = 0;
        for e in self.entries() {
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
                count += 1;
            }
        }
        w.write_all(&count.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();

        let mut read_line = |r: &mut BufReader<File>| -> Result<String, CheckpointError> {
            line.clear();
            let n = r.read_line(&mut line)?;
            if n == 0 {
                return corrupt("unexpected end of manifest");
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        let magic = read_line(&mut r)?;
        if magic != "seqlab-ckpt v1" {
            return corrupt(format!("bad magic: {magic}"));
        }
        let config = ModelConfig::from_manifest_line(&read_line(&mut r)?)?;
        let params_line = read_line(&mut r)?;
        let n_params: usize = params_line
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad params line: {params_line}")))?;

        // A freshly initialised registry provides the expected names and
        // shapes; the manifest must match it exactly.
        let mut params: ModelParams<f32> = ModelParams::init(&config, 0)
            .map_err(|e| CheckpointError::Corrupt(format!("config rejected: {e}")))?;
        if params.entries().len() != n_params {
            return corrupt(format!(
                "manifest declares {n_params} params, config implies {}",
                params.entries().len()
            ));
        }
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let l = read_line(&mut r)?;
            let mut it = l.split_whitespace();
            let (name, dtype, shape) = match (it.next(), it.next(), it.next(), it.next()) {
                (Some(n), Some(d), Some(s), None) => (n, d, s),
                _ => return corrupt(format!("bad manifest line: {l}")),
            };
            if dtype != "f32" {
                return corrupt(format!("unsupported dtype {dtype} for {name}"));
            }
            let dims: Result<Vec<usize>, _> = shape.split('x').map(str::parse).collect();
            let dims = dims.map_err(|_| CheckpointError::Corrupt(format!("bad shape: {l}")))?;
            manifest.push((name.to_string(), dims));
        }
        let data_line = read_line(&mut r)?;
        if data_line != "data" {
            return corrupt(format!("expected data marker, got: {data_line}"));
        }

        let mut total: u64 = 0;
        for ((name, shape), entry) in manifest.iter().zip(params.entries_mut()) {
            if name != &entry.name || shape != &entry.shape {
                return corrupt(format!(
                    "manifest entry {name} {shape:?} does not match expected {} {:?}",
                    entry.name, entry.shape
                ));
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Corrupt(format!("truncated values for {name}")))?;
            entry.values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            total += numel as u64;
        }
        let mut tail = [0u8; 8];
        r.read_exact(&mut tail)
            .map_err(|_| CheckpointError::Corrupt("missing trailing count".into()))?;
        let declared = u64::from_le_bytes(tail);
        if declared != total {
            return corrupt(format!(
                "trailing count {declared} does not match {total} values read"
            ));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return corrupt(format!("{} trailing bytes after checkpoint", rest.len()));
        }
        Ok(params)
    }
}

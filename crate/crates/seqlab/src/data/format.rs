//! Corpus file format. Text header (magic, version, config echo as
//! key=value lines, split counts), then fixed-order binary records:
//! u32 token count, u32 frame count, token ids as u16, audio then visual
//! frames as f32. Little-endian throughout. Samples are stored in split
//! order labelled, unlabelled, test_id, test_ood.

use super::{Corpus, CorpusConfig, Sample};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
    #[error("invalid corpus config: {0}")]
    BadConfig(String),
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T, CorpusError> {
    Err(CorpusError::Corrupt(msg.into()))
}

impl CorpusConfig {
    pub fn echo_lines(&self) -> Vec<String> {
        vec![
            format!("content_vocab={}", self.content_vocab),
            format!("viseme_classes={}", self.viseme_classes),
            format!("frame_dim={}", self.frame_dim),
            format!("frames_per_token_min={}", self.frames_per_token_min),
            format!("frames_per_token_max={}", self.frames_per_token_max),
            format!("sigma_audio={}", self.sigma_audio),
            format!("sigma_visual={}", self.sigma_visual),
            format!("visual_residual={}", self.visual_residual),
            format!("markov_successors={}", self.markov_successors),
            format!("labelled_size={}", self.labelled_size),
            format!("labelled_min_tokens={}", self.labelled_min_tokens),
            format!("labelled_max_tokens={}", self.labelled_max_tokens),
            format!("unlabelled_size={}", self.unlabelled_size),
            format!("unlabelled_min_tokens={}", self.unlabelled_min_tokens),
            format!("unlabelled_max_tokens={}", self.unlabelled_max_tokens),
            format!("test_id_size={}", self.test_id_size),
            format!("ood_bucket_size={}", self.ood_bucket_size),
            format!("seed={}", self.seed),
        ]
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), CorpusError> {
        let bad = |k: &str, v: &str| CorpusError::BadConfig(format!("bad value for {k}: {v}"));
        macro_rules! parse {
            ($field:ident) => {
                self.$field = value.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "content_vocab" => parse!(content_vocab),
            "viseme_classes" => parse!(viseme_classes),
            "frame_dim" => parse!(frame_dim),
            "frames_per_token_min" => parse!(frames_per_token_min),
            "frames_per_token_max" => parse!(frames_per_token_max),
            "sigma_audio" => parse!(sigma_audio),
            "sigma_visual" => parse!(sigma_visual),
            "visual_residual" => parse!(visual_residual),
            "markov_successors" => parse!(markov_successors),
            "labelled_size" => parse!(labelled_size),
            "labelled_min_tokens" => parse!(labelled_min_tokens),
            "labelled_max_tokens" => parse!(labelled_max_tokens),
            "unlabelled_size" => parse!(unlabelled_size),
            "unlabelled_min_tokens" => parse!(unlabelled_min_tokens),
            "unlabelled_max_tokens" => parse!(unlabelled_max_tokens),
            "test_id_size" => parse!(test_id_size),
            "ood_bucket_size" => parse!(ood_bucket_size),
            "seed" => parse!(seed),
            other => {
                return Err(CorpusError::BadConfig(format!("unknown corpus key: {other}")))
            }
        }
        Ok(())
    }
}

fn write_sample(w: &mut impl Write, s: &Sample) -> std::io::Result<()> {
    w.write_all(&(s.tokens.len() as u32).to_le_bytes())?;
    w.write_all(&(s.frames as u32).to_le_bytes())?;
    for &t in &s.tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    for &v in &s.audio {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &s.visual {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_sample(r: &mut impl Read, frame_dim: usize) -> Result<Sample, CorpusError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let tokens_len = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let frames = u32::from_le_bytes(b4) as usize;
    let mut tokens = Vec::with_capacity(tokens_len);
    let mut b2 = [0u8; 2];
    for _ in 0..tokens_len {
        r.read_exact(&mut b2)?;
        tokens.push(u16::from_le_bytes(b2));
    }
    let mut read_frames = |n: usize| -> Result<Vec<f32>, CorpusError> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let audio = read_frames(frames * frame_dim)?;
    let visual = read_frames(frames * frame_dim)?;
    Ok(Sample {
        tokens,
        audio,
        visual,
        frames,
    })
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "seqlab-corpus v1")?;
        for line in self.config.echo_lines() {
            writeln!(w, "{line}")?;
        }
        writeln!(
            w,
            "counts labelled={} unlabelled={} test_id={} test_ood={}",
            self.labelled.len(),
            self.unlabelled.len(),
            self.test_id.len(),
            self.test_ood.len()
        )?;
        writeln!(w, "end-header")?;
        for split in [&self.labelled, &self.unlabelled, &self.test_id, &self.test_ood] {
            for s in split {
                write_sample(&mut w, s)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        let mut read_line = |r: &mut BufReader<File>| -> Result<String, CorpusError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return corrupt("unexpected end of header");
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = read_line(&mut r)?;
        if magic != "seqlab-corpus v1" {
            return corrupt(format!("bad magic: {magic}"));
        }
        let mut config = CorpusConfig::default();
        let counts;
        loop {
            let l = read_line(&mut r)?;
            if let Some(rest) = l.strip_prefix("counts ") {
                counts = rest.to_string();
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| CorpusError::Corrupt(format!("bad header line: {l}")))?;
            config
                .set_key(k, v)
                .map_err(|e| CorpusError::Corrupt(e.to_string()))?;
        }
        let mut sizes = [0usize; 4];
        for item in counts.split_whitespace() {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CorpusError::Corrupt(format!("bad counts item: {item}")))?;
            let n: usize = v
                .parse()
                .map_err(|_| CorpusError::Corrupt(format!("bad count: {item}")))?;
            match k {
                "labelled" => sizes[0] = n,
                "unlabelled" => sizes[1] = n,
                "test_id" => sizes[2] = n,
                "test_ood" => sizes[3] = n,
                other => return corrupt(format!("unknown count: {other}")),
            }
        }
        let end = read_line(&mut r)?;
        if end != "end-header" {
            return corrupt(format!("expected end-header, got: {end}"));
        }
        let mut read_split = |n: usize| -> Result<Vec<Sample>, CorpusError> {
            (0..n).map(|_| read_sample(&mut r, config.frame_dim)).collect()
        };
        let labelled = read_split(sizes[0])?;
        let unlabelled = read_split(sizes[1])?;
        let test_id = read_split(sizes[2])?;
        let test_ood = read_split(sizes[3])?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return corrupt(format!("{} trailing bytes", rest.len()));
        }
        Ok(Corpus {
            config,
            labelled,
            unlabelled,
            test_id,
            test_ood,
        })
    }
}

//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! length-prefixed JSON header (configuration, vocabularies, training
//! bookkeeping), then every tensor in visitor order, each prefixed by
//! its name and shape. Values are raw little-endian f64, so a
//! save/load round trip reproduces the model bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::AnswerVocabulary;
use crate::encoder::model::EncoderParameters;
use crate::encoder::tokenizer::Tokenizer;
use crate::encoder::ModelConfig;
use crate::linalg::Mat;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"KVQACKPT";
const VERSION: u32 = 1;

/// A trained (or freshly initialized) model plus everything needed to
/// resume or evaluate it: both vocabularies, the epoch it came from,
/// its validation accuracy, optimizer identity and shuffle-RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParameters,
    pub tokenizer: Tokenizer,
    pub vocab: AnswerVocabulary,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub rng_seed: u64,
    /// Word position of the shuffle RNG when this snapshot was taken;
    /// stored as a string because it is 128 bits wide.
    pub rng_word_pos: u128,
    pub optimizer: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    n_words: usize,
    n_answers: usize,
    tokenizer_words: Vec<String>,
    vocab_entries: Vec<String>,
    vocab_unk_index: usize,
    epoch: usize,
    val_accuracy: f64,
    rng_seed: u64,
    rng_word_pos: String,
    optimizer: String,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = Header {
        config: checkpoint.params.config,
        n_words: checkpoint.params.n_words,
        n_answers: checkpoint.params.n_answers,
        tokenizer_words: checkpoint.tokenizer.words().to_vec(),
        vocab_entries: checkpoint.vocab.entries.clone(),
        vocab_unk_index: checkpoint.vocab.unk_index,
        epoch: checkpoint.epoch,
        val_accuracy: checkpoint.val_accuracy,
        rng_seed: checkpoint.rng_seed,
        rng_word_pos: checkpoint.rng_word_pos.to_string(),
        optimizer: checkpoint.optimizer.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, &e))?;
    let ioe = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(ioe)?);
    let mut inner = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut count: u64 = 0;
        checkpoint.params.for_each_tensor(|_, _| count += 1);
        w.write_all(&count.to_le_bytes())?;
        Ok(())
    };
    inner().map_err(ioe)?;
    let mut io_err = None;
    checkpoint.params.for_each_tensor(|name, m| {
        if io_err.is_some() {
            return;
        }
        let res = (|| -> std::io::Result<()> {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows as u64).to_le_bytes())?;
            w.write_all(&(m.cols as u64).to_le_bytes())?;
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            io_err = Some(e);
        }
    });
    if let Some(e) = io_err {
        return Err(ioe(e));
    }
    w.flush().map_err(ioe)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ioe = |e: std::io::Error| Error::io(path, e);
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "run the train command first to produce a checkpoint".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ioe)?;
    if &magic != MAGIC {
        return Err(Error::validation(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(ioe)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let header_len = read_u64(&mut r).map_err(ioe)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(ioe)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::json(path, &e))?;

    let tokenizer = Tokenizer::from_words(header.tokenizer_words)?;
    if tokenizer.n_tokens() != header.n_words {
        return Err(Error::validation(
            "checkpoint header is inconsistent: token count does not match its word list",
        ));
    }
    let vocab = AnswerVocabulary {
        entries: header.vocab_entries,
        unk_index: header.vocab_unk_index,
    };
    if vocab.unk_index + 1 != vocab.entries.len() || vocab.entries.len() != header.n_answers {
        return Err(Error::validation(
            "checkpoint header is inconsistent: answer vocabulary shape is wrong",
        ));
    }
    let rng_word_pos: u128 = header.rng_word_pos.parse().map_err(|_| {
        Error::validation("checkpoint header has a malformed rng_word_pos field")
    })?;

    let mut params = EncoderParameters::new(&header.config, header.n_words, header.n_answers)?;
    let tensor_count = read_u64(&mut r).map_err(ioe)?;
    let mut stored: Vec<(String, Mat)> = Vec::with_capacity(tensor_count as usize);
    for _ in 0..tensor_count {
        let name_len = read_u64(&mut r).map_err(ioe)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(ioe)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::validation("checkpoint tensor name is not UTF-8"))?;
        let rows = read_u64(&mut r).map_err(ioe)? as usize;
        let cols = read_u64(&mut r).map_err(ioe)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(ioe)?;
            *v = f64::from_le_bytes(buf);
        }
        stored.push((name, Mat { rows, cols, data }));
    }

    let mut cursor = 0usize;
    let mut mismatch: Option<String> = None;
    params.for_each_tensor_mut(|name, m| {
        if mismatch.is_some() {
            return;
        }
        let Some((stored_name, stored_mat)) = stored.get(cursor) else {
            mismatch = Some(format!("checkpoint is missing tensor {name}"));
            return;
        };
        if stored_name != name {
            mismatch = Some(format!(
                "checkpoint tensor order mismatch: expected {name}, found {stored_name}"
            ));
            return;
        }
        if stored_mat.rows != m.rows || stored_mat.cols != m.cols {
            mismatch = Some(format!(
                "checkpoint tensor {name} has shape {}x{}, expected {}x{}",
                stored_mat.rows, stored_mat.cols, m.rows, m.cols
            ));
            return;
        }
        m.data.copy_from_slice(&stored_mat.data);
        cursor += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::validation(msg));
    }
    if cursor != stored.len() {
        return Err(Error::validation(format!(
            "checkpoint carries {} extra tensors the configuration does not expect",
            stored.len() - cursor
        )));
    }

    Ok(Checkpoint {
        params,
        tokenizer,
        vocab,
        epoch: header.epoch,
        val_accuracy: header.val_accuracy,
        rng_seed: header.rng_seed,
        rng_word_pos,
        optimizer: header.optimizer,
    })
}

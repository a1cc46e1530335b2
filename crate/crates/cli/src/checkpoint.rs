//! Bit-exact checkpoints: a JSON header followed by raw little-endian f64
//! payloads for parameters and Adam moments. Reload plus continue is
//! indistinguishable from an uninterrupted run.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use moelab_core::model::{build_model, Model, OptimizerConfig, OptimizerState};
use moelab_core::rng::SeededRng;
use moelab_core::{Error, Result};

use crate::config::{parse_config_str, RunConfig};

const MAGIC: &[u8; 8] = b"MOELAB01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Echoed run config; reparsed on load.
    config_text: String,
    step: u64,
    /// Resolved expert inner scale of the saved model.
    beta: f64,
    rng_seed_hex: String,
    rng_word_pos: String,
    opt_max_lr: f64,
    opt_warmup: u64,
    opt_total: u64,
    params: Vec<ParamHeader>,
    /// Payload offsets (f64 units) of the Adam moment blocks.
    adam_m_offset: u64,
    adam_v_offset: u64,
}

/// A complete training state.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub rng: SeededRng,
}

/// Write atomically (temp file + rename).
pub fn save(path: &Path, cp: &Checkpoint) -> Result<()> {
    let params = cp.model.params();
    let total: u64 = params.iter().map(|(_, _, _, t)| t.numel() as u64).sum();
    let mut headers = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, _, _, t) in &params {
        headers.push(ParamHeader {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64;
    }
    let header = Header {
        version: FORMAT_VERSION,
        config_text: cp.config.to_config_string(),
        step: cp.step,
        beta: cp.model.beta,
        rng_seed_hex: hex_encode(&cp.rng.seed()),
        rng_word_pos: cp.rng.word_pos().to_string(),
        opt_max_lr: cp.optimizer.config.max_lr,
        opt_warmup: cp.optimizer.config.warmup_steps,
        opt_total: cp.optimizer.config.total_steps,
        params: headers,
        adam_m_offset: total,
        adam_v_offset: 2 * total,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        let mut write_block = |values: &[f64]| -> Result<()> {
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
            Ok(())
        };
        for (_, _, _, t) in &params {
            write_block(&t.values)?;
        }
        for m in &cp.optimizer.m {
            write_block(m)?;
        }
        for v in &cp.optimizer.v {
            write_block(v)?;
        }
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and reconstruct the full training state.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "checkpoint {}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }

    let config = parse_config_str(&header.config_text)?;
    let mut model = build_model(&config.model)?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let total: u64 = header.params.iter().map(|p| p.len).sum();
    let expect_bytes = 3 * total as usize * 8;
    if payload.len() != expect_bytes {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, expected {expect_bytes}",
            payload.len()
        )));
    }
    let read_block = |offset: u64, len: u64| -> Vec<f64> {
        let start = offset as usize * 8;
        payload[start..start + len as usize * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    };

    {
        let params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                header.params.len(),
                params.len()
            )));
        }
        for ((name, _, _, tensor), ph) in params.into_iter().zip(&header.params) {
            if name != ph.name || tensor.shape != ph.shape {
                return Err(Error::Format(format!(
                    "checkpoint parameter '{}' {:?} does not match model '{}' {:?}",
                    ph.name, ph.shape, name, tensor.shape
                )));
            }
            tensor.values = read_block(ph.offset, ph.len);
        }
    }

    let opt_config = OptimizerConfig::new(header.opt_max_lr, header.opt_warmup, header.opt_total);
    let mut optimizer = OptimizerState::new(&model, opt_config);
    optimizer.step = header.step;
    for (i, ph) in header.params.iter().enumerate() {
        optimizer.m[i] = read_block(header.adam_m_offset + ph.offset, ph.len);
        optimizer.v[i] = read_block(header.adam_v_offset + ph.offset, ph.len);
    }

    let seed = hex_decode(&header.rng_seed_hex)?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Format(format!("bad rng position {:?}", header.rng_word_pos)))?;
    let rng = SeededRng::from_state(seed, word_pos);

    Ok(Checkpoint {
        config,
        model,
        optimizer,
        step: header.step,
        rng,
    })
}

fn hex_encode(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format(format!("bad rng seed length {}", s.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16);
        let lo = (chunk[1] as char).to_digit(16);
        match (hi, lo) {
            (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
            _ => return Err(Error::Format(format!("bad rng seed hex {s:?}"))),
        }
    }
    Ok(out)
}

//! Model checkpoints: everything needed to caption with a trained model.
//!
//! Layout (little-endian):
//!   magic "VCRNCKPT" | u32 version=1
//!   | u32 config_len | config text (the canonical key=value form)
//!   | u32 token_count | per token: u32 len + UTF-8 bytes (id order)
//!   | u8 has_dictionary | [u32 M | u32 d | u64 seed | f64 objective
//!                          | M*d f32] when set
//!   | u32 param_count | per param (name order): u32 name_len + name
//!                       | u32 rows | u32 cols | rows*cols f32

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::config::{KvConfig, ModelConfig};
use crate::corpus::files::{
    check_magic, check_version, expect_eof, read_exact, read_f32_payload, read_f64, read_str,
    read_u32, read_u64, write_f32_payload, write_f64, write_str, write_u32, write_u64,
};
use crate::corpus::Vocabulary;
use crate::dictionary::{FitMeta, VideoDictionary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"VCRNCKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;

    let mut kv = KvConfig::new();
    model.config.write_kv(&mut kv);
    kv.set("data", "d_appearance", model.d_appearance);
    kv.set("data", "d_motion", model.d_motion);
    write_str(&mut w, &kv.serialize())?;

    let tokens = model.vocab.tokens();
    write_u32(&mut w, tokens.len() as u32)?;
    for token in tokens {
        write_str(&mut w, token)?;
    }

    match &model.dictionary {
        Some(dict) => {
            w.write_all(&[1u8])?;
            write_u32(&mut w, dict.num_centers() as u32)?;
            write_u32(&mut w, dict.dim() as u32)?;
            write_u64(&mut w, dict.meta.seed)?;
            write_f64(&mut w, dict.meta.objective)?;
            write_f32_payload(&mut w, dict.centers.data())?;
        }
        None => w.write_all(&[0u8])?,
    }

    write_u32(&mut w, model.store.len() as u32)?;
    for (name, param) in model.store.iter() {
        write_str(&mut w, name)?;
        write_u32(&mut w, param.value.rows() as u32)?;
        write_u32(&mut w, param.value.cols() as u32)?;
        write_f32_payload(&mut w, param.value.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CKPT_MAGIC)?;
    check_version(&mut r, CKPT_VERSION)?;

    let kv = KvConfig::parse(&read_str(&mut r, "config block")?)?;
    let config = ModelConfig::from_kv(&kv)?;
    let d_appearance: usize = kv
        .get("data", "d_appearance")
        .ok_or_else(|| Error::Parse("checkpoint config misses d_appearance".into()))?
        .parse()
        .map_err(|_| Error::Parse("bad d_appearance".into()))?;
    let d_motion: usize = kv
        .get("data", "d_motion")
        .ok_or_else(|| Error::Parse("checkpoint config misses d_motion".into()))?
        .parse()
        .map_err(|_| Error::Parse("bad d_motion".into()))?;

    let token_count = read_u32(&mut r, "token count")? as usize;
    let mut tokens = Vec::with_capacity(token_count);
    for _ in 0..token_count {
        tokens.push(read_str(&mut r, "vocabulary token")?);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;

    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, "dictionary flag")?;
    let dictionary = if flag[0] == 1 {
        let m = read_u32(&mut r, "center count")? as usize;
        let d = read_u32(&mut r, "center dim")? as usize;
        let seed = read_u64(&mut r, "dictionary seed")?;
        let objective = read_f64(&mut r, "dictionary objective")?;
        let values = read_f32_payload(&mut r, m * d, "dictionary centers")?;
        Some(VideoDictionary {
            centers: Tensor::from_vec(m, d, values)?,
            meta: FitMeta { iterations: 0, objective, seed, objective_history: Vec::new() },
        })
    } else {
        None
    };

    // Build a fresh model for the registration layout, then overwrite
    // every parameter with the stored payloads.
    let mut model = Model::new(config, vocab, dictionary, d_appearance, d_motion, 0)?;
    let param_count = read_u32(&mut r, "parameter count")? as usize;
    if param_count != model.store.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} parameters, config implies {}",
            param_count,
            model.store.len()
        )));
    }
    for _ in 0..param_count {
        let name = read_str(&mut r, "parameter name")?;
        let rows = read_u32(&mut r, "parameter rows")? as usize;
        let cols = read_u32(&mut r, "parameter cols")? as usize;
        let values = read_f32_payload(&mut r, rows * cols, "parameter payload")?;
        let target = model.store.value_mut(&name).map_err(|_| {
            Error::Parse(format!("checkpoint parameter '{name}' is not part of this architecture"))
        })?;
        if target.shape() != (rows, cols) {
            return Err(Error::Parse(format!(
                "parameter '{}' has shape {rows}x{cols}, expected {}x{}",
                name,
                target.rows(),
                target.cols()
            )));
        }
        *target = Tensor::from_vec(rows, cols, values)?;
    }
    expect_eof(&mut r, "checkpoint")?;
    Ok(model)
}

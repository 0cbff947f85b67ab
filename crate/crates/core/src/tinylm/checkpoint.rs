//! Binary checkpoint format.
//!
//! ```text
//! magic        6 bytes  "FAKTLM"
//! version      u32
//! flags        u8       bit 0 = frozen
//! config       7 × u64  vocab_size embed_dim num_layers num_heads mlp_dim context_len seed
//! n_params     u64
//! params       n_params × f64
//! n_tokens     u32
//! tokens       n_tokens × (u32 byte length, UTF-8 bytes)
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, PolicyModel, Result};
use crate::vocab::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FAKTLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &PolicyModel, vocab: &Vocab) -> Result<()> {
    let c = model.config();
    if vocab.len() != c.vocab_size {
        return Err(ModelError::Checkpoint(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            c.vocab_size
        )));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[model.is_frozen() as u8])?;
    for v in [c.vocab_size, c.embed_dim, c.num_layers, c.num_heads, c.mlp_dim, c.context_len] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for x in model.params() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(vocab.len() as u32).to_le_bytes())?;
    for t in vocab.tokens() {
        w.write_all(&(t.len() as u32).to_le_bytes())?;
        w.write_all(t.as_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(PolicyModel, Vocab)> {
    let magic: [u8; 6] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let [flags] = read_array::<1, _>(&mut r)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u64(&mut r)? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        num_layers: dims[2],
        num_heads: dims[3],
        mlp_dim: dims[4],
        context_len: dims[5],
        seed: read_u64(&mut r)?,
    };
    config.validate()?;
    let n = read_u64(&mut r)? as usize;
    if n != config.num_params() {
        return Err(ModelError::ParamCount {
            got: n,
            want: config.num_params(),
        });
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let nt = read_u32(&mut r)? as usize;
    let mut tokens = Vec::with_capacity(nt);
    for _ in 0..nt {
        let len = read_u32(&mut r)? as usize;
        let mut b = vec![0u8; len];
        r.read_exact(&mut b)
            .map_err(|e| ModelError::Checkpoint(format!("truncated token: {e}")))?;
        tokens.push(String::from_utf8(b).map_err(|e| ModelError::Checkpoint(e.to_string()))?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let vocab = Vocab::from_tokens(tokens).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if vocab.len() != config.vocab_size {
        return Err(ModelError::Checkpoint("vocabulary size mismatch".into()));
    }
    let model = PolicyModel::from_params(config, params, flags & 1 == 1)?;
    Ok((model, vocab))
}

pub fn save_checkpoint(path: &Path, model: &PolicyModel, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, vocab)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, Vocab)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

//! Binary checkpoint format: magic "TCDC", version, a config snapshot, the
//! step counter and noise seed, and every named parameter with its AdamW
//! moments. Save -> load -> save is byte-identical.

use crate::config::Config;
use crate::params::{ParamEntry, ParamStore};
use std::io::{self, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCDC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    /// Base seed of the Gumbel noise stream; together with the step counter
    /// this reproduces the exact training randomness.
    pub noise_seed: u64,
    pub opt_steps: u64,
    pub store: ParamStore,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config error in checkpoint snapshot: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("checkpoint model dims ({0}) do not match requested dims ({1})")]
    DimMismatch(String, String),
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn get_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(format!("non-utf8 string: {e}")))
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_str(w, &ckpt.config.to_text())?;
    put_u64(w, ckpt.step)?;
    put_u64(w, ckpt.noise_seed)?;
    put_u64(w, ckpt.opt_steps)?;
    put_u32(w, ckpt.store.len() as u32)?;
    for e in ckpt.store.entries() {
        put_str(w, &e.name)?;
        put_u32(w, e.shape.len() as u32)?;
        for &d in &e.shape {
            put_u32(w, d as u32)?;
        }
        put_f64s(w, &e.data)?;
        put_f64s(w, &e.m)?;
        put_f64s(w, &e.v)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_text = get_str(r)?;
    let mut config = Config::default();
    config.apply_file_text(&config_text)?;
    config.validate()?;
    let step = get_u64(r)?;
    let noise_seed = get_u64(r)?;
    let opt_steps = get_u64(r)?;
    let count = get_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut moments = Vec::with_capacity(count);
    for _ in 0..count {
        let name = get_str(r)?;
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let data = get_f64s(r, n)?;
        let m = get_f64s(r, n)?;
        let v = get_f64s(r, n)?;
        entries.push((name, shape, data));
        moments.push((m, v));
    }
    let mut store = ParamStore::from_entries(entries);
    for (entry, (m, v)) in store.entries_mut().iter_mut().zip(moments) {
        entry.m = m;
        entry.v = v;
    }
    Ok(Checkpoint { config, step, noise_seed, opt_steps, store })
}

pub fn save_to_path(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_from_path(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Fails loudly when the loaded model dimensions differ from explicitly
/// requested ones.
pub fn check_dims(ckpt: &Checkpoint, c: Option<usize>, l: Option<usize>, n: Option<usize>) -> Result<(), CheckpointError> {
    let (cc, cl, cn) = (ckpt.config.model.c, ckpt.config.model.l, ckpt.config.model.n);
    let mismatch = c.map(|v| v != cc).unwrap_or(false)
        || l.map(|v| v != cl).unwrap_or(false)
        || n.map(|v| v != cn).unwrap_or(false);
    if mismatch {
        return Err(CheckpointError::DimMismatch(
            format!("C={cc} L={cl} N={cn}"),
            format!(
                "C={} L={} N={}",
                c.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                l.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                n.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
            ),
        ));
    }
    Ok(())
}

impl ParamEntry {
    /// Structural fingerprint used when validating a loaded store against a
    /// freshly built model.
    pub fn signature(&self) -> (String, Vec<usize>) {
        (self.name.clone(), self.shape.clone())
    }
}

/// A loaded store must carry exactly the parameters the config's model
/// defines, in order.
pub fn validate_store(ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let fresh = crate::model::Model::new(ckpt.config.clone());
    if fresh.store.len() != ckpt.store.len() {
        return Err(CheckpointError::Corrupt(format!(
            "store has {} parameters, model defines {}",
            ckpt.store.len(),
            fresh.store.len()
        )));
    }
    for (a, b) in fresh.store.entries().iter().zip(ckpt.store.entries()) {
        if a.signature() != b.signature() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter mismatch: model defines {:?}, checkpoint has {:?}",
                a.signature(),
                b.signature()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn small_checkpoint() -> Checkpoint {
        let mut cfg = Config::default();
        cfg.model.c = 16;
        cfg.model.l = 1;
        cfg.model.n = 2;
        cfg.model.heads = 2;
        cfg.model.h_mlp = 8;
        cfg.data.t = 2;
        cfg.data.h = 8;
        cfg.data.w = 8;
        cfg.data.n_objects = 2;
        let model = Model::new(cfg.clone());
        Checkpoint { config: cfg, step: 17, noise_seed: 42, opt_steps: 17, store: model.store }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ckpt = small_checkpoint();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.noise_seed, 42);
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &loaded).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let ckpt = small_checkpoint();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(matches!(read_checkpoint(&mut corrupted.as_slice()), Err(CheckpointError::BadMagic)));
        let mut versioned = bytes;
        versioned[4] = 99;
        assert!(matches!(read_checkpoint(&mut versioned.as_slice()), Err(CheckpointError::BadVersion(_))));
    }

    #[test]
    fn dim_mismatch_fails_loudly() {
        let ckpt = small_checkpoint();
        assert!(check_dims(&ckpt, Some(16), None, None).is_ok());
        assert!(matches!(check_dims(&ckpt, Some(32), None, None), Err(CheckpointError::DimMismatch(..))));
        assert!(matches!(check_dims(&ckpt, None, Some(3), None), Err(CheckpointError::DimMismatch(..))));
    }

    #[test]
    fn store_validates_against_model_structure() {
        let ckpt = small_checkpoint();
        validate_store(&ckpt).unwrap();
    }
}

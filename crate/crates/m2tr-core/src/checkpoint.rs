//! Binary checkpoint container: config snapshot, epoch counter, RNG state,
//! named parameter tensors, and optimizer moments.
//!
//! Layout: magic `M2TR`, version `u32` LE, length-prefixed canonical config
//! JSON, epoch `u32`, RNG seed (32 bytes) + word position (`u128` LE), then
//! length-prefixed UTF-8 names with rank/dims as `u32` LE and f32 LE
//! payloads, then optional Adam state (step count + per-parameter moment
//! payloads in parameter order).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"M2TR";
const VERSION: u32 = 1;

/// Adam moments aligned with checkpoint parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, Tensor<f32>)>,
    pub opt: Option<AdamSnapshot>,
}

impl Checkpoint {
    /// Snapshot of a live parameter store.
    pub fn from_store(
        config: &Config,
        epoch: u32,
        rng_seed: [u8; 32],
        rng_word_pos: u128,
        store: &ParamStore<f32>,
        opt: Option<AdamSnapshot>,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            rng_seed,
            rng_word_pos,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            opt,
        }
    }

    /// Overwrites a freshly constructed store with the checkpointed values.
    /// Names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model wants {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} not in model")))?;
            if store.get(id).shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, model wants {:?}",
                    tensor.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = tensor.clone();
        }
        Ok(())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_json = ckpt.config.canonical_json();
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&ckpt.epoch.to_le_bytes())?;
    w.write_all(&ckpt.rng_seed)?;
    w.write_all(&ckpt.rng_word_pos.to_le_bytes())?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match &ckpt.opt {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            w.write_all(&opt.step.to_le_bytes())?;
            for (i, (_, tensor)) in ckpt.params.iter().enumerate() {
                if opt.m[i].len() != tensor.numel() || opt.v[i].len() != tensor.numel() {
                    return Err(Error::Contract("optimizer moments misaligned with parameters".into()));
                }
                for &v in &opt.m[i] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for &v in &opt.v[i] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{}: truncated checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad checkpoint magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config = Config::from_json(
        std::str::from_utf8(&config_bytes).map_err(|_| Error::Data("config is not UTF-8".into()))?,
    )?;
    let epoch = read_u32(&mut r)?;
    let mut rng_seed = [0u8; 32];
    r.read_exact(&mut rng_seed)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let rng_word_pos = u128::from_le_bytes(pos);
    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        let mut step_bytes = [0u8; 8];
        r.read_exact(&mut step_bytes)?;
        let step = u64::from_le_bytes(step_bytes);
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut buf = [0u8; 4];
        for (_, tensor) in &params {
            let mut mv = Vec::with_capacity(tensor.numel());
            for _ in 0..tensor.numel() {
                r.read_exact(&mut buf)?;
                mv.push(f32::from_le_bytes(buf));
            }
            let mut vv = Vec::with_capacity(tensor.numel());
            for _ in 0..tensor.numel() {
                r.read_exact(&mut buf)?;
                vv.push(f32::from_le_bytes(buf));
            }
            m.push(mv);
            v.push(vv);
        }
        Some(AdamSnapshot { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        epoch,
        rng_seed,
        rng_word_pos,
        params,
        opt,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            config: Config::desk_preset(),
            epoch: 3,
            rng_seed: [7u8; 32],
            rng_word_pos: 1234567890123,
            params: vec![
                ("a.weight".into(), Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap()),
                ("a.bias".into(), Tensor::from_vec(&[2], vec![0.0, 0.125]).unwrap()),
            ],
            opt: Some(AdamSnapshot {
                step: 42,
                m: vec![vec![0.1; 4], vec![0.2; 2]],
                v: vec![vec![0.3; 4], vec![0.4; 2]],
            }),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = sample_checkpoint();
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.epoch, ckpt.epoch);
        assert_eq!(back.rng_seed, ckpt.rng_seed);
        assert_eq!(back.rng_word_pos, ckpt.rng_word_pos);
        assert_eq!(back.params.len(), 2);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back.opt, ckpt.opt);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn version_mismatch_is_rejected_with_message() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        match load(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("version"), "message: {msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}

//! Binary checkpoints.
//!
//! Layout, little-endian:
//! `"MCKP"` | u32 version | u32 n + n bytes config hash (hex) | u64 epoch |
//! u64 step | u64 run seed | u32 n + n bytes config JSON | 8 parameter records
//! (in [`PARAM_NAMES`](crate::segnet::PARAM_NAMES) order) | 8 velocity
//! records | u32 Z | Z × (u8 initialized flag + prototype record).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::step::TrainState;
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fka::PrototypeBank;
use crate::segnet::SegNet;
use crate::tensor::{read_record, write_record, Record, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"MCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub state: TrainState,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn encode<W: Write>(w: &mut W, cfg: &ExperimentConfig, state: &TrainState, epoch: usize) -> std::io::Result<()> {
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    put_bytes(w, cfg.hash().as_bytes())?;
    w.write_all(&(epoch as u64).to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&cfg.seeds.run.to_le_bytes())?;
    put_bytes(w, cfg.to_json().as_bytes())?;
    for t in state.net.tensors().into_iter().chain(&state.velocity) {
        write_record(&mut *w, &Record::F64(t.clone()))?;
    }
    let bank = &state.bank;
    w.write_all(&(bank.prototypes.len() as u32).to_le_bytes())?;
    for (rho, &init) in bank.prototypes.iter().zip(&bank.initialized) {
        w.write_all(&[init as u8])?;
        let t = Tensor::new(vec![rho.len()], rho.clone()).map_err(std::io::Error::other)?;
        write_record(&mut *w, &Record::F64(t))?;
    }
    w.flush()
}

pub fn write_checkpoint(path: &Path, cfg: &ExperimentConfig, state: &TrainState, epoch: usize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    encode(&mut BufWriter::new(f), cfg, state, epoch).map_err(|e| Error::io(path, e))
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(b)
}

fn take_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = u32::from_le_bytes(take(r)?) as usize;
    if n > 1 << 24 {
        return Err(bad(format!("implausible field length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(b)
}

fn take_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    match read_record(r)? {
        Record::F64(t) => Ok(t),
        _ => Err(bad("expected an f64 record")),
    }
}

pub fn decode_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    if take::<4, _>(r)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hash = String::from_utf8(take_bytes(r)?).map_err(|_| bad("hash is not utf-8"))?;
    let epoch = u64::from_le_bytes(take(r)?) as usize;
    let step = u64::from_le_bytes(take(r)?);
    let run_seed = u64::from_le_bytes(take(r)?);
    let json = String::from_utf8(take_bytes(r)?).map_err(|_| bad("config is not utf-8"))?;
    let config = ExperimentConfig::from_json(&json)?;
    if config.hash() != hash {
        return Err(bad("config hash mismatch"));
    }
    if config.seeds.run != run_seed {
        return Err(bad("run seed disagrees with config"));
    }
    let params = (0..8).map(|_| take_tensor(r)).collect::<Result<Vec<_>>>()?;
    let velocity = (0..8).map(|_| take_tensor(r)).collect::<Result<Vec<_>>>()?;
    let net = SegNet::from_tensors(params)?;
    for (v, p) in velocity.iter().zip(net.tensors()) {
        if v.shape() != p.shape() {
            return Err(bad("velocity shape differs from its parameter"));
        }
    }
    let z = u32::from_le_bytes(take(r)?) as usize;
    if z != config.num_classes {
        return Err(bad(format!("{z} prototypes for {} classes", config.num_classes)));
    }
    let mut bank = PrototypeBank::new(z, config.feature_channels, config.eta);
    for k in 0..z {
        bank.initialized[k] = match take::<1, _>(r)?[0] {
            0 => false,
            1 => true,
            f => return Err(bad(format!("bad initialized flag {f}"))),
        };
        let rho = take_tensor(r)?;
        if rho.shape() != [config.feature_channels] {
            return Err(bad("prototype length differs from feature_channels"));
        }
        bank.prototypes[k] = rho.into_data();
    }
    Ok(Checkpoint {
        config,
        epoch,
        state: TrainState {
            net,
            velocity,
            bank,
            step,
        },
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 8,
            feature_channels: 4,
            hidden: [3, 4],
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip() {
        let cfg = small();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 17;
        state.bank.update_class(1, &[0.5, 0.25, 0.0, 1.0]);
        let mut buf = Vec::new();
        encode(&mut buf, &cfg, &state, 3).unwrap();
        let back = decode_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.state, state);
    }

    #[test]
    fn detects_corruption() {
        let cfg = small();
        let state = TrainState::new(&cfg).unwrap();
        let mut buf = Vec::new();
        encode(&mut buf, &cfg, &state, 0).unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(decode_checkpoint(&mut wrong_magic.as_slice()).is_err());
        // flip a digit of the stored hash
        let mut wrong_hash = buf.clone();
        wrong_hash[12] ^= 1;
        assert!(decode_checkpoint(&mut wrong_hash.as_slice()).is_err());
        assert!(decode_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }
}

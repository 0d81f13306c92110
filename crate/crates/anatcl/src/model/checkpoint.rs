//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic `ANCL` | version u16 | config block (u32 length + utf-8
//!   key=value lines) | epoch u32 | RNG state (32-byte seed, u128 word
//!   position, u64 stream) | aux flag u8 | three tensor lists (params,
//!   Adam m, Adam v; each u32 count, then per tensor u8 ndim, u32 dims,
//!   f64 data) | Adam t u64 | crc32 of everything before the trailer.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::write_atomic;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::numgrad::Tensor;

use super::adam::AdamState;
use super::encoder::{Affine, EncoderConfig, Parameters};
use super::train::TrainConfig;

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"ANCL";

/// Complete ChaCha state: restoring reproduces the exact stream position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or reuse a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub params: Parameters,
    pub state: AdamState,
    pub epoch: u32,
    pub rng: RngState,
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn config_text(encoder: &EncoderConfig, train: &TrainConfig) -> String {
    let loss = &train.loss;
    [
        format!("input_dim={}", encoder.input_dim),
        format!("hidden={}", join_dims(&encoder.hidden)),
        format!("representation_dim={}", encoder.representation_dim),
        format!("projection_dim={}", encoder.projection_dim),
        format!("encoder_seed={}", encoder.seed),
        format!("learning_rate={}", train.learning_rate),
        format!("batch_size={}", train.batch_size),
        format!("epochs={}", train.epochs),
        format!("train_seed={}", train.seed),
        format!("augment_strength={}", train.augment_strength),
        format!("variant={}", loss.variant()),
        format!("lambda1={}", loss.lambda1()),
        format!("lambda2={}", loss.lambda2()),
        format!("temperature={}", loss.temperature()),
        format!("sigma={}", loss.sigma()),
    ]
    .join("\n")
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptFile(detail.into())
}

fn parse_config(text: &str) -> Result<(EncoderConfig, TrainConfig)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("config line without '=': {}", line)))?;
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(corrupt(format!("duplicate config key {}", key)));
        }
    }
    let mut get = |key: &str| -> Result<String> {
        map.remove(key)
            .ok_or_else(|| corrupt(format!("config key {} missing", key)))
    };
    fn num<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| corrupt(format!("bad value '{}' for {}", raw, key)))
    }

    let hidden_raw = get("hidden")?;
    let hidden: Vec<usize> = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(|d| num("hidden", d))
            .collect::<Result<_>>()?
    };
    let encoder = EncoderConfig {
        input_dim: num("input_dim", &get("input_dim")?)?,
        hidden,
        representation_dim: num("representation_dim", &get("representation_dim")?)?,
        projection_dim: num("projection_dim", &get("projection_dim")?)?,
        seed: num("encoder_seed", &get("encoder_seed")?)?,
    };
    let variant = LossVariant::from_str(&get("variant")?)
        .map_err(|e| corrupt(format!("config variant: {}", e)))?;
    let loss = LossConfig::build(
        variant,
        num("lambda1", &get("lambda1")?)?,
        num("lambda2", &get("lambda2")?)?,
        num("temperature", &get("temperature")?)?,
        num("sigma", &get("sigma")?)?,
    )
    .map_err(|e| corrupt(format!("config loss: {}", e)))?;
    let train = TrainConfig {
        learning_rate: num("learning_rate", &get("learning_rate")?)?,
        batch_size: num("batch_size", &get("batch_size")?)?,
        epochs: num("epochs", &get("epochs")?)?,
        loss,
        seed: num("train_seed", &get("train_seed")?)?,
        augment_strength: num("augment_strength", &get("augment_strength")?)?,
    };
    if let Some(extra) = map.keys().next() {
        return Err(corrupt(format!("unknown config key {}", extra)));
    }
    Ok((encoder, train))
}

fn push_tensors(buf: &mut Vec<u8>, tensors: &[&Tensor]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.push(t.shape().len() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt("truncated checkpoint"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        if count > 1 << 16 {
            return Err(corrupt(format!("implausible tensor count {}", count)));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = self.u8()? as usize;
            if ndim > 2 {
                return Err(corrupt(format!("tensor rank {} unsupported", ndim)));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            if len > 1 << 28 {
                return Err(corrupt(format!("implausible tensor length {}", len)));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(self.f64()?);
            }
            out.push(Tensor::from_vec(shape, data).map_err(|e| corrupt(e.to_string()))?);
        }
        Ok(out)
    }
}

fn group_params(tensors: Vec<Tensor>, encoder_layers: usize, has_aux: bool) -> Result<Parameters> {
    let expected = 2 * (encoder_layers + 2 + usize::from(has_aux));
    if tensors.len() != expected {
        return Err(corrupt(format!(
            "expected {} parameter tensors, found {}",
            expected,
            tensors.len()
        )));
    }
    let mut affines = Vec::with_capacity(tensors.len() / 2);
    let mut iter = tensors.into_iter();
    while let (Some(w), Some(b)) = (iter.next(), iter.next()) {
        if w.shape().len() != 2 || b.shape().len() != 1 || w.cols() != b.len() {
            return Err(corrupt("parameter tensor shapes are inconsistent"));
        }
        affines.push(Affine { w, b });
    }
    let aux = if has_aux { affines.pop() } else { None };
    let head = affines.split_off(encoder_layers);
    Ok(Parameters {
        encoder: affines,
        head,
        aux,
    })
}

impl Checkpoint {
    /// Serialize to the documented binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = config_text(&self.encoder_config, &self.train_config);
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.push(u8::from(self.params.aux.is_some()));
        push_tensors(&mut buf, &self.params.tensors());
        push_tensors(&mut buf, &self.state.m.iter().collect::<Vec<_>>());
        push_tensors(&mut buf, &self.state.v.iter().collect::<Vec<_>>());
        buf.extend_from_slice(&self.state.t.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// Parse the binary layout, verifying magic, version, and checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(corrupt("file shorter than any valid checkpoint"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes, not a checkpoint"));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(corrupt(format!(
                "checksum mismatch: stored {:08x}, computed {:08x}",
                stored, actual
            )));
        }

        let config_len = cur.u32()? as usize;
        let config_bytes = cur.take(config_len)?;
        let text = std::str::from_utf8(config_bytes)
            .map_err(|_| corrupt("config block is not utf-8"))?;
        let (encoder_config, train_config) = parse_config(text)?;

        let epoch = cur.u32()?;
        let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
        let word_pos = cur.u128()?;
        let stream = cur.u64()?;
        let has_aux = match cur.u8()? {
            0 => false,
            1 => true,
            other => return Err(corrupt(format!("bad aux flag {}", other))),
        };

        let encoder_layers = encoder_config.hidden.len() + 1;
        let params = group_params(cur.tensors()?, encoder_layers, has_aux)?;
        let m = cur.tensors()?;
        let v = cur.tensors()?;
        let t = cur.u64()?;
        if cur.pos != body_len {
            return Err(corrupt("trailing bytes after checkpoint payload"));
        }
        let n_params = params.tensors().len();
        if m.len() != n_params || v.len() != n_params {
            return Err(corrupt(format!(
                "moment count {}/{} does not match {} parameters",
                m.len(),
                v.len(),
                n_params
            )));
        }
        Ok(Self {
            encoder_config,
            train_config,
            params,
            state: AdamState { m, v, t },
            epoch,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let encoder_config = EncoderConfig {
            input_dim: 10,
            hidden: vec![8, 6],
            representation_dim: 5,
            projection_dim: 4,
            seed: 3,
        };
        let train_config = TrainConfig::new(LossConfig::new(LossVariant::AnatclGlobal));
        let params = Parameters::init(&encoder_config, None).unwrap();
        let mut state = AdamState::new(&params);
        state.t = 17;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        rng.next_u64();
        rng.next_u64();
        Checkpoint {
            encoder_config,
            train_config,
            params,
            state,
            epoch: 42,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn rng_stream_resumes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..7 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        assert_eq!(rng.next_u64(), restored.next_u64());
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn aux_head_round_trips() {
        let mut ckpt = sample();
        ckpt.params = Parameters::init(&ckpt.encoder_config, Some(3)).unwrap();
        ckpt.state = AdamState::new(&ckpt.params);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(ckpt, back);
        assert!(back.params.aux.is_some());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptFile(_)) => {}
                other => panic!("cut {}: expected CorruptFile, got {:?}", cut, other.err()),
            }
        }
    }

    #[test]
    fn future_version_is_version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        bytes[5] = 0;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::VersionMismatch { found, supported }) => {
                assert_eq!(found, 2);
                assert_eq!(supported, 1);
            }
            other => panic!("expected VersionMismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CorruptFile(msg)) => assert!(msg.contains("checksum"), "{}", msg),
            other => panic!("expected CorruptFile, got {:?}", other.err()),
        }
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn config_text_round_trips_through_parse() {
        let ckpt = sample();
        let text = config_text(&ckpt.encoder_config, &ckpt.train_config);
        let (enc, train) = parse_config(&text).unwrap();
        assert_eq!(enc, ckpt.encoder_config);
        assert_eq!(train, ckpt.train_config);
    }

    #[test]
    fn unknown_config_key_is_corrupt() {
        let ckpt = sample();
        let text = config_text(&ckpt.encoder_config, &ckpt.train_config) + "\nmystery=1";
        match parse_config(&text) {
            Err(Error::CorruptFile(msg)) => assert!(msg.contains("mystery"), "{}", msg),
            other => panic!("expected CorruptFile, got {:?}", other.err()),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("absent.ckpt")),
            Err(Error::MissingFile(_))
        ));
    }
}

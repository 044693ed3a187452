//! Binary checkpoints: magic "MCAM", fixed little-endian layout, bit-exact
//! 64-bit parameter round trips.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use mcam_core::vlt::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::pipeline::Pipeline;
use crate::HarnessError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCAM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer bookkeeping carried alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub epoch: u32,
    pub learning_rate: f64,
    pub step_count: u64,
}

pub fn save_checkpoint(
    pipeline: &Pipeline,
    state: TrainState,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.learning_rate.to_le_bytes());
    out.extend_from_slice(&state.step_count.to_le_bytes());

    let config = pipeline.config.to_toml()?;
    write_block(&mut out, config.as_bytes());
    let vocab = serde_json::to_vec(&pipeline.vocab)?;
    write_block(&mut out, &vocab);

    let params = pipeline.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        write_block(&mut out, p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.to_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Pipeline, TrainState), HarnessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(HarnessError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::BadVersion { got: version, expected: CHECKPOINT_VERSION });
    }
    let epoch = r.u32("epoch")?;
    let learning_rate = r.f64("learning rate")?;
    let step_count = r.u64("step count")?;

    let config_text = String::from_utf8(r.block("config")?.to_vec())
        .map_err(|_| HarnessError::CheckpointTruncated { what: "config utf-8" })?;
    let config = Config::from_toml(&config_text)?;
    let mut vocab: Vocab = serde_json::from_slice(r.block("vocab")?)?;
    vocab.reindex();

    // Parameter initialization is irrelevant: every tensor is overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pipeline = Pipeline::new(&config, vocab, &mut rng)?;
    let by_name: HashMap<String, _> =
        pipeline.parameters().into_iter().map(|p| (p.name.clone(), p)).collect();
    let mut seen = Vec::new();

    let count = r.u32("parameter count")? as usize;
    for _ in 0..count {
        let name = String::from_utf8(r.block("parameter name")?.to_vec())
            .map_err(|_| HarnessError::CheckpointTruncated { what: "parameter name utf-8" })?;
        let rank = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("parameter dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f64("parameter data")?);
        }
        let param = by_name
            .get(&name)
            .ok_or_else(|| HarnessError::UnknownParam { name: name.clone() })?;
        if param.tensor.shape() != shape.as_slice() {
            return Err(HarnessError::ParamShape {
                name,
                got: shape,
                want: param.tensor.shape().to_vec(),
            });
        }
        param.tensor.set_values(&values)?;
        seen.push(name);
    }
    for name in by_name.keys() {
        if !seen.contains(name) {
            return Err(HarnessError::MissingParam { name: name.clone() });
        }
    }
    Ok((pipeline, TrainState { epoch, learning_rate, step_count }))
}

fn write_block(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.bytes.len() {
            return Err(HarnessError::CheckpointTruncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn block(&mut self, what: &'static str) -> Result<&'a [u8], HarnessError> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }
}

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, GanConfig, Generator};
use crate::autodiff::{Adam, ParamSet, Tensor};
use crate::container::{self, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Trained model plus everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: GanConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    /// SHA-256 of the training log written so far, lowercase hex.
    pub log_sha256: String,
}

impl ModelCheckpoint {
    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.discriminator
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: GanConfig,
    epoch: usize,
    step: u64,
    rng_seed: String,
    rng_word_pos: String,
    log_sha256: String,
    adam_g_step: u64,
    adam_d_step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

const GROUPS: [&str; 6] = ["gen", "disc", "adam_g.m", "adam_g.v", "adam_d.m", "adam_d.v"];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(s.get(2 * i..2 * i + 2).ok_or_else(bad)?, 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let (gm, gv) = ckpt.adam_g.moments();
    let (dm, dv) = ckpt.adam_d.moments();
    let gen = ckpt.generator.params();
    let disc = ckpt.discriminator.params();
    fn named(ps: &ParamSet<f32>) -> Vec<(String, &Tensor<f32>)> {
        ps.iter().map(|(n, t)| (n.to_string(), t)).collect()
    }
    fn indexed(ts: &[Tensor<f32>]) -> Vec<(String, &Tensor<f32>)> {
        ts.iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect()
    }
    let groups = [named(gen), named(disc), indexed(gm), indexed(gv), indexed(dm), indexed(dv)];

    let mut tensors = Vec::new();
    let mut planes: Vec<&[f32]> = Vec::new();
    for (group, items) in GROUPS.iter().zip(&groups) {
        for (name, t) in items {
            tensors.push(Entry { group: group.to_string(), name: name.clone(), shape: t.shape().to_vec() });
            planes.push(t.data());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng_seed: hex(&ckpt.rng.seed),
        rng_word_pos: ckpt.rng.word_pos.to_string(),
        log_sha256: ckpt.log_sha256.clone(),
        adam_g_step: ckpt.adam_g.step_count(),
        adam_d_step: ckpt.adam_d.step_count(),
        tensors,
    };
    container::encode(CHECKPOINT_MAGIC, &header, &planes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (header, payload): (Header, _) = container::decode(CHECKPOINT_MAGIC, bytes)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    header.config.validate()?;
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let values = container::read_f32s(payload, total)?;

    let mut grouped: Vec<Vec<(String, Tensor<f32>)>> = vec![Vec::new(); GROUPS.len()];
    let mut offset = 0;
    for e in header.tensors {
        let k = GROUPS
            .iter()
            .position(|g| *g == e.group)
            .ok_or_else(|| Error::Format(format!("unknown tensor group {:?}", e.group)))?;
        let n: usize = e.shape.iter().product();
        let t = Tensor::new(&e.shape, values[offset..offset + n].to_vec())?;
        offset += n;
        grouped[k].push((e.name, t));
    }
    let mut groups = grouped.into_iter();
    let mut next_params = || {
        let mut ps = ParamSet::new();
        for (name, t) in groups.next().unwrap_or_default() {
            ps.push(name, t);
        }
        ps
    };
    let gen = next_params();
    let disc = next_params();
    let mut tensors = || next_params().tensors().to_vec();
    let (gm, gv, dm, dv) = (tensors(), tensors(), tensors(), tensors());

    let config = header.config;
    let generator = Generator::from_params(&config, gen)?;
    let discriminator = Discriminator::from_params(&config, disc)?;
    let check_moments = |m: &[Tensor<f32>], ps: &ParamSet<f32>, what: &str| {
        if m.len() != ps.len() || m.iter().zip(ps.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Format(format!("{what} optimizer state does not match parameters")));
        }
        Ok(())
    };
    check_moments(&gm, generator.params(), "generator")?;
    check_moments(&dm, discriminator.params(), "discriminator")?;
    let adam_g = Adam::from_state(config.adam, gm, gv, header.adam_g_step)?;
    let adam_d = Adam::from_state(config.adam, dm, dv, header.adam_d_step)?;
    let word_pos = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Format(format!("bad rng word position {:?}", header.rng_word_pos)))?;
    Ok(ModelCheckpoint {
        config,
        generator,
        discriminator,
        adam_g,
        adam_d,
        epoch: header.epoch,
        step: header.step,
        rng: RngState { seed: unhex32(&header.rng_seed)?, word_pos },
        log_sha256: header.log_sha256,
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &checkpoint_bytes(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    checkpoint_from_bytes(&container::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use rand::{RngCore, SeedableRng};

    fn small() -> ModelCheckpoint {
        let config = GanConfig { size: 32, base_width: 4, depth: 3, ..Default::default() };
        let generator = Generator::new(&config, 1).unwrap();
        let discriminator = Discriminator::new(&config, 2).unwrap();
        let shapes = |ps: &ParamSet<f32>| ps.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let gs = shapes(generator.params());
        let ds = shapes(discriminator.params());
        let adam_g = Adam::new(AdamConfig::default(), &gs.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let adam_d = Adam::new(AdamConfig::default(), &ds.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        ModelCheckpoint {
            config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            epoch: 3,
            step: 12,
            rng: RngState::capture(&rng),
            log_sha256: "ab".repeat(32),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = small();
        let back = checkpoint_from_bytes(&checkpoint_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let mut a = ckpt.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_tile_magic_and_truncation() {
        let bytes = checkpoint_bytes(&small()).unwrap();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"CSTK");
        assert!(matches!(checkpoint_from_bytes(&wrong), Err(Error::Format(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Truncated { .. })));
    }
}

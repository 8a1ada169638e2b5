//! Checkpoint files: everything needed to resume a run bit-for-bit.
//!
//! Binary layout (little-endian): magic, format version, iteration, cloud
//! arrays, predictor weights + optimizer moments, cloud optimizer moments,
//! RNG seed + stream position, CRC32 over everything before it. Floats are
//! stored as raw IEEE bits, so a save/load round trip is exact and resumed
//! runs replay the same arithmetic.

use crate::bytesio::{self, Reader};
use crate::cloud::GaussianCloud;
use crate::mask::Predictor;
use crate::optim::{Adam, FlatAdam};
use crate::render::ParamGrads;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub cloud: GaussianCloud,
    pub predictor: Predictor,
    pub predictor_opt: FlatAdam,
    pub cloud_opt: Adam,
    /// Seed the run was started with plus the ChaCha word position at save
    /// time; together they reproduce the RNG stream exactly.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// RNG positioned exactly where it was when the checkpoint was taken.
    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        bytesio::put_u32(&mut buf, FORMAT_VERSION);
        bytesio::put_u64(&mut buf, self.iteration);

        let cloud = &self.cloud;
        bytesio::put_u64(&mut buf, cloud.len() as u64);
        bytesio::put_f64_slice(&mut buf, cloud.positions.as_flattened());
        bytesio::put_f64_slice(&mut buf, cloud.log_scales.as_flattened());
        bytesio::put_f64_slice(&mut buf, &cloud.rotations);
        bytesio::put_f64_slice(&mut buf, &cloud.opacity_logits);
        bytesio::put_f64_slice(&mut buf, cloud.colors.as_flattened());
        bytesio::put_f64_slice(&mut buf, &cloud.depths);
        bytesio::put_f64_slice(&mut buf, &cloud.r_max);
        bytesio::put_f64_slice(&mut buf, &cloud.densify_grad_accum);
        bytesio::put_f64_slice(&mut buf, cloud.densify_dir_accum.as_flattened());
        bytesio::put_u64(&mut buf, cloud.densify_count.len() as u64);
        for &c in &cloud.densify_count {
            bytesio::put_u32(&mut buf, c);
        }
        bytesio::put_f64_slice(&mut buf, &cloud.conflict_ema);

        bytesio::put_u32(&mut buf, self.predictor.c as u32);
        bytesio::put_f64_slice(&mut buf, &self.predictor.flatten());
        bytesio::put_u64(&mut buf, self.predictor_opt.step_count);
        bytesio::put_f64_slice(&mut buf, &self.predictor_opt.m);
        bytesio::put_f64_slice(&mut buf, &self.predictor_opt.v);

        bytesio::put_u64(&mut buf, self.cloud_opt.step_count);
        put_param_grads(&mut buf, &self.cloud_opt.m);
        put_param_grads(&mut buf, &self.cloud_opt.v);

        bytesio::put_u64(&mut buf, self.rng_seed);
        bytesio::put_u128(&mut buf, self.rng_word_pos);

        let crc = bytesio::crc32(&buf);
        bytesio::put_u32(&mut buf, crc);
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 8 {
            return Err(Error::Corrupted { path: path.into(), reason: "too short".into() });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if tail != bytesio::crc32(body).to_le_bytes() {
            return Err(Error::Corrupted { path: path.into(), reason: "bad checksum".into() });
        }
        let mut r = Reader::new(body, path);
        if r.take(4)? != MAGIC {
            return Err(r.corrupted("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let iteration = r.u64()?;

        let n = r.u64()? as usize;
        let mut cloud = GaussianCloud::default();
        cloud.positions = read_pairs(&mut r, n)?;
        cloud.log_scales = read_pairs(&mut r, n)?;
        cloud.rotations = read_exact(&mut r, n)?;
        cloud.opacity_logits = read_exact(&mut r, n)?;
        cloud.colors = read_triples(&mut r, n)?;
        cloud.depths = read_exact(&mut r, n)?;
        cloud.r_max = read_exact(&mut r, n)?;
        cloud.densify_grad_accum = read_exact(&mut r, n)?;
        cloud.densify_dir_accum = read_pairs(&mut r, n)?;
        let nc = r.u64()? as usize;
        if nc != n {
            return Err(r.corrupted("densify_count length mismatch"));
        }
        cloud.densify_count = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        cloud.conflict_ema = read_exact(&mut r, n)?;

        let c = r.u32()? as usize;
        let weights = r.f64_vec()?;
        let predictor = Predictor::from_flat(c, &weights)?;
        let predictor_opt = FlatAdam {
            step_count: r.u64()?,
            m: r.f64_vec()?,
            v: r.f64_vec()?,
        };
        if predictor_opt.m.len() != weights.len() || predictor_opt.v.len() != weights.len() {
            return Err(r.corrupted("predictor moment length mismatch"));
        }

        let cloud_opt = Adam {
            step_count: r.u64()?,
            m: read_param_grads(&mut r, n)?,
            v: read_param_grads(&mut r, n)?,
        };

        let rng_seed = r.u64()?;
        let rng_word_pos = r.u128()?;
        r.finish()?;
        Ok(Checkpoint {
            iteration,
            cloud,
            predictor,
            predictor_opt,
            cloud_opt,
            rng_seed,
            rng_word_pos,
        })
    }
}

fn put_param_grads(buf: &mut Vec<u8>, g: &ParamGrads) {
    bytesio::put_f64_slice(buf, g.position.as_flattened());
    bytesio::put_f64_slice(buf, g.log_scale.as_flattened());
    bytesio::put_f64_slice(buf, &g.rotation);
    bytesio::put_f64_slice(buf, &g.opacity);
    bytesio::put_f64_slice(buf, g.color.as_flattened());
}

fn read_param_grads(r: &mut Reader, n: usize) -> Result<ParamGrads> {
    Ok(ParamGrads {
        position: read_pairs(r, n)?,
        log_scale: read_pairs(r, n)?,
        rotation: read_exact(r, n)?,
        opacity: read_exact(r, n)?,
        color: read_triples(r, n)?,
    })
}

fn read_exact(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    let v = r.f64_vec()?;
    if v.len() != n {
        return Err(r.corrupted(format!("array length {} does not match count {n}", v.len())));
    }
    Ok(v)
}

fn read_pairs(r: &mut Reader, n: usize) -> Result<Vec<[f64; 2]>> {
    let flat = r.f64_vec()?;
    if flat.len() != 2 * n {
        return Err(r.corrupted("pair array length mismatch"));
    }
    Ok(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn read_triples(r: &mut Reader, n: usize) -> Result<Vec<[f64; 3]>> {
    let flat = r.f64_vec()?;
    if flat.len() != 3 * n {
        return Err(r.corrupted("triple array length mismatch"));
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::FEATURE_DIM;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn sample_checkpoint(seed: u64, n: usize) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = GaussianCloud::default();
        for _ in 0..n {
            cloud.push(
                [rng.gen(), rng.gen()],
                [rng.gen::<f64>() - 3.0, rng.gen::<f64>() - 3.0],
                rng.gen::<f64>() * 3.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen(),
            );
        }
        for i in 0..n {
            cloud.r_max[i] = rng.gen::<f64>() * 10.0;
            cloud.densify_grad_accum[i] = rng.gen::<f64>() * 1e-3;
            cloud.densify_dir_accum[i] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            cloud.densify_count[i] = rng.gen::<u32>() % 100;
            cloud.conflict_ema[i] = rng.gen();
        }
        let predictor = Predictor::init(FEATURE_DIM, &mut rng);
        let nw = predictor.n_weights();
        let mut predictor_opt = FlatAdam::new(nw);
        predictor_opt.step_count = rng.gen::<u32>() as u64;
        for v in predictor_opt.m.iter_mut().chain(predictor_opt.v.iter_mut()) {
            *v = rng.gen::<f64>() - 0.5;
        }
        let mut cloud_opt = Adam::new(n);
        cloud_opt.step_count = rng.gen::<u32>() as u64;
        for a in crate::render::Attribute::ALL {
            for v in cloud_opt.m.attribute_mut(a) {
                *v = rng.gen::<f64>() - 0.5;
            }
            for v in cloud_opt.v.attribute_mut(a) {
                *v = rng.gen::<f64>();
            }
        }
        let mut word_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let skip = word_rng.gen::<u8>() as usize;
        let mut stream = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..skip {
            stream.next_u64();
        }
        Checkpoint {
            iteration: rng.gen::<u32>() as u64,
            cloud,
            predictor,
            predictor_opt,
            cloud_opt,
            rng_seed: seed,
            rng_word_pos: stream.get_word_pos(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample_checkpoint(77, 13);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        // Same bytes on re-save: serialization itself is deterministic.
        let bytes1 = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let ck = sample_checkpoint(5, 3);
        let mut original = ChaCha8Rng::seed_from_u64(ck.rng_seed);
        original.set_word_pos(ck.rng_word_pos);
        let mut restored = ck.restore_rng();
        for _ in 0..32 {
            assert_eq!(original.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample_checkpoint(8, 2);
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the version field (offset 4) and fix up the checksum.
        bytes[4] = 9;
        let body_len = bytes.len() - 4;
        let crc = bytesio::crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample_checkpoint(9, 4);
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupted { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupted { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_random_checkpoints(seed in 0u64..10_000, n in 1usize..40) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.bin");
            let ck = sample_checkpoint(seed, n);
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            prop_assert_eq!(ck, back);
        }
    }
}

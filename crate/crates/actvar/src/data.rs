//! Synthetic class-conditional multi-scale token maps.
//!
//! Each sample starts from a random coarse token near a class-specific base
//! value; every finer scale is a deterministic refinement of the previous
//! scale (bilinear upsampling of the token values plus a class-specific
//! spatial texture) with optional bounded per-token noise. With noise 0 the
//! next scale is a pure function of the previous scale and the class, so a
//! perfect predictor exists by construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_schedule, ScaleSchedule, TokenMap};
use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, Tensor};

const MAGIC: &[u8; 4] = b"AVD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub sides: Vec<usize>,
    pub vocab: usize,
    /// Per-token probability of a bounded random perturbation after
    /// refinement.
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn schedule(&self) -> Result<ScaleSchedule> {
        build_schedule(&self.sides)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub maps: Vec<TokenMap>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Class texture at one grid position: a smooth class-keyed pattern with
/// amplitude a few token bins wide.
fn texture(class: usize, scale: usize, y: usize, x: usize, side: usize, vocab: usize) -> f64 {
    let fx = 1.0 + (class % 4) as f64;
    let fy = 1.0 + ((class / 4) % 4) as f64;
    let phase = class as f64 * 0.7 + scale as f64 * 0.3;
    let s = side as f64;
    let amp = vocab as f64 / 10.0;
    amp * (std::f64::consts::TAU * (fx * x as f64 / s + fy * y as f64 / s) + phase).sin()
}

fn clamp_token(v: f64, vocab: usize) -> u32 {
    v.round().clamp(0.0, (vocab - 1) as f64) as u32
}

/// Deterministic refinement of one scale to the next: bilinear upsampling of
/// the token values plus the class texture, rounded into the vocabulary.
pub fn refine_map(prev: &TokenMap, class: usize, next_side: usize, vocab: usize) -> Result<TokenMap> {
    let values: Vec<f64> = prev.tokens.iter().map(|&t| t as f64).collect();
    let grid = Tensor::constant(vec![prev.side * prev.side, 1], values);
    let up = upsample_bilinear(&grid, prev.side, next_side)?;
    let scale_index = prev.scale_index + 1;
    let tokens = up.with_data(|u| {
        (0..next_side * next_side)
            .map(|p| {
                let (y, x) = (p / next_side, p % next_side);
                clamp_token(u[p] + texture(class, scale_index, y, x, next_side, vocab), vocab)
            })
            .collect::<Vec<u32>>()
    });
    TokenMap::new(scale_index, next_side, tokens)
}

fn gen_sample(
    spec: &DatasetSpec,
    schedule: &ScaleSchedule,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let base = (class as f64 + 0.5) * spec.vocab as f64 / spec.classes as f64;
    let jitter = rng.gen_range(-(spec.vocab as f64) / 8.0..spec.vocab as f64 / 8.0);
    let first = TokenMap::new(0, schedule.side(0), {
        let side = schedule.side(0);
        (0..side * side).map(|_| clamp_token(base + jitter, spec.vocab)).collect()
    })?;
    let mut maps = vec![first];
    for s in 1..schedule.num_scales() {
        let mut next = refine_map(&maps[s - 1], class, schedule.side(s), spec.vocab)?;
        if spec.noise > 0.0 {
            let span = (spec.vocab as i64 / 8).max(1);
            for t in next.tokens.iter_mut() {
                if rng.gen::<f64>() < spec.noise {
                    let delta = rng.gen_range(-span..=span);
                    *t = (*t as i64 + delta).clamp(0, spec.vocab as i64 - 1) as u32;
                }
            }
        }
        maps.push(next);
    }
    Ok(Sample { class, maps })
}

/// Generates the full dataset with a deterministic 90/10 train/val split
/// (every tenth sample of each class goes to validation).
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.vocab < 2 {
        return Err(Error::Argument("dataset spec needs classes, samples and vocab >= 2".into()));
    }
    let schedule = spec.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..spec.classes {
        for i in 0..spec.samples_per_class {
            let sample = gen_sample(spec, &schedule, class, &mut rng)?;
            if i % 10 == 9 {
                val.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

fn write_split(path: &Path, spec: &DatasetSpec, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let u32s = [
        spec.vocab as u32,
        spec.classes as u32,
        spec.sides.len() as u32,
    ];
    for v in u32s {
        w.write_all(&v.to_le_bytes())?;
    }
    for &s in &spec.sides {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        w.write_all(&(s.class as u32).to_le_bytes())?;
        for m in &s.maps {
            for &t in &m.tokens {
                w.write_all(&(t as u16).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<(Vec<usize>, usize, usize, Vec<Sample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m4 = [0u8; 4];
    r.read_exact(&mut m4)?;
    if &m4 != MAGIC {
        return Err(Error::Checkpoint(format!("bad dataset magic in {}", path.display())));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let vocab = next_u32(&mut r)? as usize;
    let classes = next_u32(&mut r)? as usize;
    let n_scales = next_u32(&mut r)? as usize;
    let mut sides = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        sides.push(next_u32(&mut r)? as usize);
    }
    let n_samples = next_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(n_samples);
    let mut tok2 = [0u8; 2];
    for _ in 0..n_samples {
        let class = next_u32(&mut r)? as usize;
        let mut maps = Vec::with_capacity(n_scales);
        for (s, &side) in sides.iter().enumerate() {
            let mut tokens = Vec::with_capacity(side * side);
            for _ in 0..side * side {
                r.read_exact(&mut tok2)?;
                tokens.push(u16::from_le_bytes(tok2) as u32);
            }
            maps.push(TokenMap::new(s, side, tokens)?);
        }
        samples.push(Sample { class, maps });
    }
    Ok((sides, vocab, classes, samples))
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_split(&dir.join("train.bin"), &self.spec, &self.train)?;
        write_split(&dir.join("val.bin"), &self.spec, &self.val)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let spec: DatasetSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let (sides, vocab, _classes, train) = read_split(&dir.join("train.bin"))?;
        let (_, _, _, val) = read_split(&dir.join("val.bin"))?;
        if sides != spec.sides || vocab != spec.vocab {
            return Err(Error::Checkpoint("dataset metadata disagrees with binary header".into()));
        }
        Ok(Dataset { spec, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(noise: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            classes: 3,
            samples_per_class: 10,
            sides: vec![1, 2, 3],
            vocab: 32,
            noise,
            seed,
        }
    }

    #[test]
    fn noiseless_refinement_is_a_pure_function() {
        let ds = gen_dataset(&tiny_spec(0.0, 7)).unwrap();
        for sample in ds.train.iter().chain(&ds.val) {
            for s in 1..sample.maps.len() {
                let oracle = refine_map(
                    &sample.maps[s - 1],
                    sample.class,
                    sample.maps[s].side,
                    ds.spec.vocab,
                )
                .unwrap();
                assert_eq!(oracle, sample.maps[s], "oracle predictor must be exact");
            }
        }
    }

    #[test]
    fn same_seed_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_dataset(&tiny_spec(0.2, 42)).unwrap().save(d1.path()).unwrap();
        gen_dataset(&tiny_spec(0.2, 42)).unwrap().save(d2.path()).unwrap();
        for f in ["train.bin", "val.bin", "meta.json"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between runs");
        }
    }

    #[test]
    fn split_sizes_and_roundtrip() {
        let ds = gen_dataset(&tiny_spec(0.1, 1)).unwrap();
        assert_eq!(ds.train.len(), 27);
        assert_eq!(ds.val.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
    }

    #[test]
    fn reference_schedule_sequence_length() {
        let spec = DatasetSpec {
            classes: 2,
            samples_per_class: 2,
            sides: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16],
            vocab: 64,
            noise: 0.1,
            seed: 0,
        };
        let ds = gen_dataset(&spec).unwrap();
        let total: usize = ds.train[0].maps.iter().map(|m| m.tokens.len()).sum();
        assert_eq!(total, 680);
    }

    #[test]
    fn tokens_stay_in_vocabulary() {
        let ds = gen_dataset(&tiny_spec(0.5, 3)).unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            for m in &s.maps {
                assert!(m.tokens.iter().all(|&t| (t as usize) < ds.spec.vocab));
            }
        }
    }
}

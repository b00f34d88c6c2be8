//! Continuous sequences with tunable temporal consistency.
//!
//! Each coordinate of the latent follows a stationary AR(1) process,
//! `u[t+1] = gamma * u[t] + sqrt(1 - gamma^2) * eps[t]`, optionally passed
//! through a fixed random orthogonal map. `gamma = 1` gives constant
//! sequences and `gamma = 0` gives i.i.d. steps.

use std::io::{Read, Write};
use std::path::Path;

use ebwm_autodiff::{NdArray, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SequenceBatch;
use crate::error::{Error, Result};
use crate::objectives::smooth_l1;
use crate::params::normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    None,
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSpec {
    pub feature_dim: usize,
    /// Number of context positions `T`; each sequence stores `T + 1` states.
    pub context_len: usize,
    pub batch: usize,
    pub gamma: f64,
    pub mixing: Mixing,
    /// Seed of the orthogonal map, shared by every batch of a dataset.
    pub mixing_seed: u64,
    pub seed: u64,
}

impl ContinuousSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config {
                key: "gamma".into(),
                msg: format!("{} is outside [0, 1]", self.gamma),
            });
        }
        if self.feature_dim == 0 || self.context_len == 0 || self.batch == 0 {
            return Err(Error::Config {
                key: "continuous".into(),
                msg: "feature_dim, context_len and batch must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Random orthogonal `n x n` matrix: Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal_matrix(n: usize, seed: u64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = normal(&[n, n], 1.0, &mut rng);
    let mut rows: Vec<Vec<f64>> = g.data().chunks(n).map(<[f64]>::to_vec).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let rj = rows[j].clone();
            for (a, b) in rows[i].iter_mut().zip(&rj) {
                *a -= dot * b;
            }
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in rows[i].iter_mut() {
            *a /= norm;
        }
    }
    NdArray::new(&[n, n], rows.concat()).expect("square matrix")
}

/// Generates the pre-mixing latent, `[B, T + 1, F]`.
pub fn latent(spec: &ContinuousSpec) -> Result<NdArray> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (b, l, f) = (spec.batch, spec.context_len + 1, spec.feature_dim);
    let noise = normal(&[b, l, f], 1.0, &mut rng);
    let innov = (1.0 - spec.gamma * spec.gamma).max(0.0).sqrt();
    let n = noise.data();
    let mut u = vec![0.0; b * l * f];
    for bi in 0..b {
        for t in 0..l {
            for k in 0..f {
                let i = (bi * l + t) * f + k;
                u[i] = if t == 0 {
                    n[i]
                } else {
                    spec.gamma * u[i - f] + innov * n[i]
                };
            }
        }
    }
    Ok(NdArray::new(&[b, l, f], u)?)
}

pub fn gen_continuous(spec: &ContinuousSpec) -> Result<SequenceBatch> {
    let u = latent(spec)?;
    let features = match spec.mixing {
        Mixing::None => u,
        Mixing::Orthogonal => {
            let q = Tensor::constant(orthogonal_matrix(spec.feature_dim, spec.mixing_seed));
            let (b, l, f) = (spec.batch, spec.context_len + 1, spec.feature_dim);
            Tensor::constant(u.reshape(&[b * l, f])?)
                .matmul(&q)?
                .reshape(&[b, l, f])?
                .value()
                .clone()
        }
    };
    SequenceBatch::continuous(features)
}

/// SmoothL1 (beta = 1) of predicting every next state as the current one.
pub fn copy_baseline_score(batch: &SequenceBatch) -> Result<f64> {
    let ctx = Tensor::constant(batch.context_features()?);
    let tgt = Tensor::constant(batch.target_features()?);
    Ok(smooth_l1(&ctx, &tgt, 1.0)?.item()?)
}

const FIXTURE_MAGIC: &[u8; 4] = b"EBWC";

/// Writes features as little-endian f32 after a header of magic, version
/// byte, `B`, `T + 1`, `F` (u32), gamma (f64) and seed (u64).
pub fn export_fixture(path: &Path, batch: &SequenceBatch, gamma: f64, seed: u64) -> Result<()> {
    let SequenceBatch::Continuous { features } = batch else {
        return Err(Error::ModeMismatch);
    };
    let mut buf = Vec::with_capacity(32 + 4 * features.numel());
    buf.extend_from_slice(FIXTURE_MAGIC);
    buf.push(1);
    for &d in features.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&gamma.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a fixture back; returns the batch, gamma and seed.
pub fn import_fixture(path: &Path) -> Result<(SequenceBatch, f64, u64)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if raw.len() < 33 || &raw[..4] != FIXTURE_MAGIC || raw[4] != 1 {
        return Err(bad("not a continuous fixture"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let gamma = f64::from_le_bytes(raw[17..25].try_into().unwrap());
    let seed = u64::from_le_bytes(raw[25..33].try_into().unwrap());
    let body = &raw[33..];
    if body.len() != 4 * dims.iter().product::<usize>() {
        return Err(bad("truncated payload"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((
        SequenceBatch::continuous(NdArray::new(&dims, data)?)?,
        gamma,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(gamma: f64, batch: usize, len: usize) -> ContinuousSpec {
        ContinuousSpec {
            feature_dim: 16,
            context_len: len,
            batch,
            gamma,
            mixing: Mixing::Orthogonal,
            mixing_seed: 5,
            seed: 7,
        }
    }

    #[test]
    fn orthogonal_map_is_orthogonal() {
        let q = orthogonal_matrix(16, 3);
        let qt = Tensor::constant(q.clone());
        let qqt = qt.matmul_t(&qt, false, true).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qqt.value().data()[i * 16 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_one_is_constant_and_copy_scores_zero() {
        let b = gen_continuous(&spec(1.0, 4, 8)).unwrap();
        assert_eq!(copy_baseline_score(&b).unwrap(), 0.0);
        let ctx = b.context_features().unwrap();
        let tgt = b.target_features().unwrap();
        assert!(ctx.max_abs_diff(&tgt) < 1e-12);
    }

    #[test]
    fn constant_batch_copy_score_zero() {
        let f = NdArray::from_fn(&[2, 5, 3], |i| ((i / 3) / 5) as f64 * 7.5 - 1.0);
        let b = SequenceBatch::continuous(f).unwrap();
        assert_eq!(copy_baseline_score(&b).unwrap(), 0.0);
    }

    #[test]
    fn copy_mse_matches_ar1_closed_form() {
        // E|u[t+1] - u[t]|^2 per coordinate = 2(1 - gamma)
        let mut s = spec(0.9, 64, 100);
        s.mixing = Mixing::None;
        let u = latent(&s).unwrap();
        let (l, f) = (101, 16);
        let d = u.data();
        let (mut acc, mut n) = (0.0, 0usize);
        for b in 0..64 {
            for t in 0..100 {
                for k in 0..f {
                    let x = d[(b * l + t + 1) * f + k] - d[(b * l + t) * f + k];
                    acc += x * x;
                    n += 1;
                }
            }
        }
        assert!(n >= 100_000);
        let mse = acc / n as f64;
        assert!((mse - 0.2).abs() < 0.01, "{mse}");
    }

    #[test]
    fn stationary_unit_variance() {
        for gamma in [0.0, 0.5, 0.9, 0.99] {
            let mut s = spec(gamma, 1024, 99);
            s.mixing = Mixing::None;
            s.feature_dim = 1;
            let u = latent(&s).unwrap();
            let n = u.numel() as f64;
            let mean = u.sum() / n;
            let var = u
                .data()
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / n;
            assert!((0.9..=1.1).contains(&var), "gamma {gamma}: var {var}");
        }
    }

    #[test]
    fn gamma_zero_best_latent_predictor_error_is_one() {
        let mut s = spec(0.0, 256, 32);
        s.mixing = Mixing::None;
        let b = gen_continuous(&s).unwrap();
        let t = b.target_features().unwrap();
        let mse = t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64;
        assert!((mse - 1.0).abs() < 0.03, "{mse}");
    }

    #[test]
    fn mixing_preserves_copy_score() {
        let mixed = gen_continuous(&spec(0.9, 8, 16)).unwrap();
        let mut s = spec(0.9, 8, 16);
        s.mixing = Mixing::None;
        let raw = gen_continuous(&s).unwrap();
        // SmoothL1 is not rotation invariant; squared error is.
        let sq = |b: &SequenceBatch| {
            let c = b.context_features().unwrap();
            let t = b.target_features().unwrap();
            c.data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        assert!((sq(&mixed) - sq(&raw)).abs() < 1e-9);
    }

    #[test]
    fn reproducible_per_seed() {
        let a = gen_continuous(&spec(0.9, 4, 8)).unwrap();
        let b = gen_continuous(&spec(0.9, 4, 8)).unwrap();
        assert_eq!(a, b);
        let mut s = spec(0.9, 4, 8);
        s.seed = 8;
        assert_ne!(a, gen_continuous(&s).unwrap());
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.bin");
        let b = gen_continuous(&spec(0.9, 2, 4)).unwrap();
        export_fixture(&path, &b, 0.9, 7).unwrap();
        let (back, g, s) = import_fixture(&path).unwrap();
        assert_eq!((g, s), (0.9, 7));
        let (SequenceBatch::Continuous { features: a }, SequenceBatch::Continuous { features: c }) =
            (&b, &back)
        else {
            unreachable!()
        };
        assert!(a.max_abs_diff(c) < 1e-6);
    }
}

//! Training data: the teacher-forced batch layout plus desk-scale generators.

pub mod corpus;
pub mod synth;
pub mod text;

use ebwm_autodiff::NdArray;

use crate::config::Mode;
use crate::error::{Error, Result};

/// A batch of `T + 1` consecutive states per sequence. Entries `0..T` are the
/// context and entry `t + 1` is the ground-truth next state for position `t`.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceBatch {
    /// Features of shape `[B, T + 1, F]`.
    Continuous { features: NdArray },
    /// Row-major token ids, `batch` rows of `len = T + 1`.
    Discrete {
        tokens: Vec<usize>,
        batch: usize,
        len: usize,
    },
}

impl SequenceBatch {
    pub fn continuous(features: NdArray) -> Result<Self> {
        if features.rank() != 3 || features.shape()[1] < 2 {
            return Err(Error::Config {
                key: "batch".into(),
                msg: format!(
                    "continuous batch needs [B, T+1, F] with T >= 1, got {:?}",
                    features.shape()
                ),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("continuous batch"));
        }
        Ok(SequenceBatch::Continuous { features })
    }

    pub fn discrete(tokens: Vec<usize>, batch: usize, len: usize, vocab: usize) -> Result<Self> {
        if len < 2 || tokens.len() != batch * len {
            return Err(Error::Config {
                key: "batch".into(),
                msg: format!(
                    "{} tokens do not form {batch} rows of length {len} >= 2",
                    tokens.len()
                ),
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(SequenceBatch::Discrete { tokens, batch, len })
    }

    pub fn mode(&self) -> Mode {
        match self {
            SequenceBatch::Continuous { .. } => Mode::Continuous,
            SequenceBatch::Discrete { .. } => Mode::Discrete,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            SequenceBatch::Continuous { features } => features.shape()[0],
            SequenceBatch::Discrete { batch, .. } => *batch,
        }
    }

    /// Number of context positions `T` (one less than the stored length).
    pub fn context_len(&self) -> usize {
        match self {
            SequenceBatch::Continuous { features } => features.shape()[1] - 1,
            SequenceBatch::Discrete { len, .. } => len - 1,
        }
    }

    fn feature_window(&self, offset: usize) -> Result<NdArray> {
        let SequenceBatch::Continuous { features } = self else {
            return Err(Error::ModeMismatch);
        };
        let (b, l, f) = (
            features.shape()[0],
            features.shape()[1],
            features.shape()[2],
        );
        let t = l - 1;
        let d = features.data();
        let mut out = Vec::with_capacity(b * t * f);
        for bi in 0..b {
            out.extend_from_slice(&d[(bi * l + offset) * f..(bi * l + offset + t) * f]);
        }
        Ok(NdArray::new(&[b, t, f], out)?)
    }

    /// `[B, T, F]` context features.
    pub fn context_features(&self) -> Result<NdArray> {
        self.feature_window(0)
    }

    /// `[B, T, F]` ground-truth next features.
    pub fn target_features(&self) -> Result<NdArray> {
        self.feature_window(1)
    }

    fn token_window(&self, offset: usize) -> Result<Vec<usize>> {
        let SequenceBatch::Discrete { tokens, batch, len } = self else {
            return Err(Error::ModeMismatch);
        };
        Ok((0..*batch)
            .flat_map(|b| {
                tokens[b * len + offset..b * len + offset + len - 1]
                    .iter()
                    .copied()
            })
            .collect())
    }

    /// Flattened `[B * T]` context token ids.
    pub fn context_tokens(&self) -> Result<Vec<usize>> {
        self.token_window(0)
    }

    /// Flattened `[B * T]` next-token targets.
    pub fn target_tokens(&self) -> Result<Vec<usize>> {
        self.token_window(1)
    }

    /// Copy of the batch keeping only rows `rows`.
    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Result<Self> {
        match self {
            SequenceBatch::Continuous { features } => {
                let (l, f) = (features.shape()[1], features.shape()[2]);
                let d = features.data()[rows.start * l * f..rows.end * l * f].to_vec();
                SequenceBatch::continuous(NdArray::new(&[rows.len(), l, f], d)?)
            }
            SequenceBatch::Discrete { tokens, len, .. } => Ok(SequenceBatch::Discrete {
                tokens: tokens[rows.start * len..rows.end * len].to_vec(),
                batch: rows.len(),
                len: *len,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_forced_layout() {
        let b = SequenceBatch::discrete(vec![1, 2, 3, 4, 5, 6], 2, 3, 10).unwrap();
        assert_eq!(b.context_len(), 2);
        assert_eq!(b.context_tokens().unwrap(), vec![1, 2, 4, 5]);
        assert_eq!(b.target_tokens().unwrap(), vec![2, 3, 5, 6]);
        assert!(matches!(
            SequenceBatch::discrete(vec![1, 20], 1, 2, 10),
            Err(Error::TokenOutOfRange { id: 20, .. })
        ));

        let f = NdArray::from_fn(&[1, 3, 2], |i| i as f64);
        let b = SequenceBatch::continuous(f).unwrap();
        assert_eq!(b.context_features().unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.target_features().unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(b.context_tokens(), Err(Error::ModeMismatch)));
    }
}

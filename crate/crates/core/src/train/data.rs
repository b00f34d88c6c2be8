//! Deterministic batch streams for training and validation.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::config::{DataSpec, TrainConfig};
use crate::data::corpus::generate_corpus;
use crate::data::synth::{gen_continuous, ContinuousSpec};
use crate::data::text::{batch_text, load_corpus, tokenize_bytes, unigram_entropy};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

/// Mix a base seed with a stream tag and two indices.
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(
        splitmix(splitmix(base ^ splitmix(stream)) ^ a) ^ b.wrapping_mul(0x2545_f491_4f6c_dd1d),
    )
}

#[derive(Clone, Debug)]
enum Source {
    Continuous(ContinuousSpec),
    Text {
        train: Arc<Vec<usize>>,
        val: Arc<Vec<usize>>,
    },
}

/// Every batch is a pure function of the config seed and its index, so the
/// stream is reproducible no matter which thread produces it.
#[derive(Clone, Debug)]
pub struct DataSource {
    source: Source,
    seed: u64,
    batch: usize,
    context_len: usize,
}

impl DataSource {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let context_len = cfg.model.context_length;
        let source = match &cfg.data {
            DataSpec::Continuous {
                gamma,
                mixing,
                mixing_seed,
            } => Source::Continuous(ContinuousSpec {
                feature_dim: cfg.model.features(),
                context_len,
                batch: cfg.batch_size,
                gamma: *gamma,
                mixing: *mixing,
                mixing_seed: *mixing_seed,
                seed: 0,
            }),
            DataSpec::Text {
                corpus,
                generated_bytes,
                corpus_seed,
                val_fraction,
            } => {
                let tokens = match corpus {
                    Some(path) => load_corpus(path)?,
                    None => tokenize_bytes(&generate_corpus(*generated_bytes, *corpus_seed)),
                };
                let cut = ((tokens.len() as f64) * (1.0 - val_fraction)).round() as usize;
                let (train, val) = tokens.split_at(cut);
                for part in [train, val] {
                    if part.len() <= context_len + 1 {
                        return Err(Error::CorpusTooShort {
                            len: part.len(),
                            window: context_len + 1,
                        });
                    }
                }
                Source::Text {
                    train: Arc::new(train.to_vec()),
                    val: Arc::new(val.to_vec()),
                }
            }
        };
        Ok(Self {
            source,
            seed: cfg.seed,
            batch: cfg.batch_size,
            context_len,
        })
    }

    fn make(&self, stream: u64, a: u64, b: u64) -> Result<SequenceBatch> {
        let seed = derive_seed(self.seed, stream, a, b);
        match &self.source {
            Source::Continuous(spec) => gen_continuous(&ContinuousSpec {
                seed,
                ..spec.clone()
            }),
            Source::Text { train, val } => {
                let corpus = if stream == VAL_STREAM { val } else { train };
                batch_text(corpus, self.context_len, self.batch, seed)
            }
        }
    }

    pub fn train_batch(&self, step: usize, micro: usize) -> Result<SequenceBatch> {
        self.make(TRAIN_STREAM, step as u64, micro as u64)
    }

    pub fn val_batch(&self, index: usize) -> Result<SequenceBatch> {
        self.make(VAL_STREAM, index as u64, 0)
    }

    /// Fraction of the training corpus covered after `sequences` windows;
    /// `NaN` for synthetic streams, which have no epochs.
    pub fn epoch(&self, sequences: usize) -> f64 {
        match &self.source {
            Source::Continuous(_) => f64::NAN,
            Source::Text { train, .. } => {
                (sequences * self.context_len) as f64 / train.len() as f64
            }
        }
    }

    /// Empirical unigram entropy of the held-out split (text only).
    pub fn val_unigram_entropy(&self) -> Option<f64> {
        match &self.source {
            Source::Text { val, .. } => Some(unigram_entropy(val)),
            Source::Continuous(_) => None,
        }
    }

    pub fn train_unigram_entropy(&self) -> Option<f64> {
        match &self.source {
            Source::Text { train, .. } => Some(unigram_entropy(train)),
            Source::Continuous(_) => None,
        }
    }
}

/// Background producer of per-step micro-batch lists, in step order.
pub struct Prefetch {
    pub rx: Receiver<Result<Vec<SequenceBatch>>>,
    handle: JoinHandle<()>,
}

impl Prefetch {
    pub fn spawn(
        source: DataSource,
        steps: std::ops::Range<usize>,
        micro: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth);
        let handle = std::thread::spawn(move || {
            for step in steps {
                let item = (0..micro)
                    .map(|m| source.train_batch(step, m))
                    .collect::<Result<Vec<_>>>();
                if tx.send(item).is_err() {
                    return;
                }
            }
        });
        Self { rx, handle }
    }

    /// Stop early: drop the receiver so the producer exits, then join it.
    pub fn finish(self) {
        drop(self.rx);
        let _ = self.handle.join();
    }
}

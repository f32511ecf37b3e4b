//! Seedable, counter-based random streams.
//!
//! All randomness in a run flows from a single seed, split into named
//! streams so that data shuffling, parameter initialisation and Monte-Carlo
//! sampling do not perturb one another. Streams expose their word position
//! so checkpoints can restore them exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Stream ids carved out of the ChaCha stream space.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const PREDICT: u64 = 4;
    /// Per-epoch metric evaluation uses `METRICS_BASE + epoch`.
    pub const METRICS_BASE: u64 = 1000;
}

/// One named ChaCha20 stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    rng: ChaCha20Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        StreamRng { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("normal_tensor shape")
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random_range(0.0..1.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

/// Noise injection point for layer forward passes.
///
/// `Draw` pulls fresh standard normals from a stream; `Record` does the same
/// while keeping a copy; `Replay` feeds back a recorded sequence, which makes
/// a stochastic objective a deterministic function of its parameters (as
/// required for finite-difference gradient checks).
pub enum NoiseSource<'a> {
    Draw(&'a mut StreamRng),
    Record(&'a mut StreamRng, &'a mut Vec<Tensor>),
    Replay(&'a [Tensor], usize),
}

impl<'a> NoiseSource<'a> {
    pub fn draw(rng: &'a mut StreamRng) -> Self {
        NoiseSource::Draw(rng)
    }

    pub fn record(rng: &'a mut StreamRng, buf: &'a mut Vec<Tensor>) -> Self {
        NoiseSource::Record(rng, buf)
    }

    pub fn replay(buf: &'a [Tensor]) -> Self {
        NoiseSource::Replay(buf, 0)
    }

    pub fn next_normal(&mut self, shape: &[usize]) -> crate::error::Result<Tensor> {
        match self {
            NoiseSource::Draw(rng) => Ok(rng.normal_tensor(shape)),
            NoiseSource::Record(rng, buf) => {
                let t = rng.normal_tensor(shape);
                buf.push(t.clone());
                Ok(t)
            }
            NoiseSource::Replay(buf, cursor) => {
                let t = buf.get(*cursor).ok_or_else(|| {
                    crate::error::Error::InvalidArgument(
                        "replay noise buffer exhausted".into(),
                    )
                })?;
                if t.shape() != shape {
                    return Err(crate::error::Error::Shape {
                        op: "noise_replay",
                        node: None,
                        detail: format!("recorded {:?}, requested {:?}", t.shape(), shape),
                    });
                }
                *cursor += 1;
                Ok(t.clone())
            }
        }
    }

    /// Number of tensors drawn or replayed so far (draw mode reports 0; use
    /// record mode to count).
    pub fn replay_cursor(&self) -> usize {
        match self {
            NoiseSource::Replay(_, c) => *c,
            _ => 0,
        }
    }
}

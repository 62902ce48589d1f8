//! Counter-based random streams.
//!
//! Every random draw in training and sampling comes from a ChaCha stream
//! keyed by `(seed, purpose, counter, lane)`, so a draw depends only on its
//! key and never on how many draws happened elsewhere. This is what makes
//! resumed runs and parallel chains reproduce sequential runs bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    WarmStart = 3,
    Prior = 4,
    ChainNoise = 5,
    Reparam = 6,
    Sample = 7,
    Data = 8,
    Eval = 9,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, purpose, counter)`; `lane` selects a
/// ChaCha sub-stream (used for per-chain noise).
pub fn stream(seed: u64, purpose: Purpose, counter: u64, lane: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ purpose as u64) ^ counter);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(lane);
    rng
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// One noise stream per chain (row) of a batched latent state.
#[derive(Clone, Debug)]
pub struct ChainNoise {
    lanes: Vec<ChaCha8Rng>,
}

impl ChainNoise {
    pub fn new(seed: u64, counter: u64, chains: usize) -> Self {
        ChainNoise {
            lanes: (0..chains as u64)
                .map(|c| stream(seed, Purpose::ChainNoise, counter, c))
                .collect(),
        }
    }

    pub fn chains(&self) -> usize {
        self.lanes.len()
    }

    /// Standard normal draws shaped `chains × dim`; row `i` comes from lane `i`.
    pub fn draw(&mut self, dim: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.lanes.len() * dim);
        for lane in &mut self.lanes {
            for _ in 0..dim {
                data.push(lane.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::new([self.lanes.len(), dim], data).expect("length matches shape")
    }
}

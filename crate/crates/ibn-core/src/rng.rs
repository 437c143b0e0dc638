//! Named, splittable random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! (master seed, purpose, and a handful of context fields). Streams are
//! derived statelessly, so results do not depend on evaluation order and
//! a resumed run sees exactly the draws an uninterrupted run would.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Part of the key, never reused across meanings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    DropoutTrain,
    DropoutEval,
    MaskDraw,
    Synthetic,
    Shuffle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::DropoutTrain => 2,
            Purpose::DropoutEval => 3,
            Purpose::MaskDraw => 4,
            Purpose::Synthetic => 5,
            Purpose::Shuffle => 6,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed and key fields into one 64-bit stream seed.
pub fn mix(master: u64, fields: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &f in fields {
        h = splitmix64(h ^ f);
    }
    h
}

/// Stable 64-bit hash of a name (FNV-1a), used to key per-parameter init
/// streams so initialization does not depend on registration order.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, fields: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(fields.len() + 1);
    all.push(purpose.tag());
    all.extend_from_slice(fields);
    ChaCha8Rng::seed_from_u64(mix(master, &all))
}

/// Identifies one dropout draw: layer, direction tag, processing step,
/// Monte Carlo sample index, plus the enclosing evaluation instance.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey {
    pub layer: u8,
    pub direction: u8,
    pub step: u32,
    pub sample: u32,
    pub gate: u8,
}

/// Stateless dropout-mask source for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropoutStreams {
    pub master: u64,
    pub purpose: Purpose,
    /// Epoch for training-time draws, 0 for evaluation.
    pub epoch: u32,
    /// Window / batch-element identifier.
    pub instance: u64,
}

impl DropoutStreams {
    pub fn train(master: u64, epoch: u32, instance: u64) -> Self {
        DropoutStreams {
            master,
            purpose: Purpose::DropoutTrain,
            epoch,
            instance,
        }
    }

    pub fn eval(master: u64, instance: u64) -> Self {
        DropoutStreams {
            master,
            purpose: Purpose::DropoutEval,
            epoch: 0,
            instance,
        }
    }

    /// Binary keep-mask with keep probability 1-p, entries in {0.0, 1.0}.
    pub fn keep_mask(&self, key: DropoutKey, shape: &[usize], p: f64) -> Tensor {
        let mut rng = stream(
            self.master,
            self.purpose,
            &[
                self.epoch as u64,
                self.instance,
                key.layer as u64,
                key.direction as u64,
                key.step as u64,
                key.sample as u64,
                key.gate as u64,
            ],
        );
        let mut mask = Tensor::zeros(shape);
        for v in mask.data_mut() {
            *v = if rng.gen::<f64>() < p { 0.0 } else { 1.0 };
        }
        mask
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sequence::{Sequence, SequencePair};
use super::synth::horizontal_flip;
use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub window: usize,
    /// Random window starts, shuffling and flip augmentation.
    pub train: bool,
    pub flip_probability: f64,
    pub seed: u64,
}

/// Where a batch row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub sequence: usize,
    pub start: usize,
    pub flipped: bool,
}

/// Inputs `[B, T, J, 3]` and root-centered targets `[B, T, J, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub windows: Vec<WindowRef>,
}

/// Subtracts the root joint of each frame.
pub fn root_centered(seq: &Sequence, root: usize) -> Sequence {
    let j = seq.joints();
    let mut out = seq.clone();
    for frame in out.data_mut().chunks_mut(j * 3) {
        let r = [frame[root * 3], frame[root * 3 + 1], frame[root * 3 + 2]];
        for p in frame.chunks_mut(3) {
            for c in 0..3 {
                p[c] -= r[c];
            }
        }
    }
    out
}

/// Window start positions for one sequence.
fn starts(len: usize, window: usize, train: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = len / window;
    if train {
        (0..count).map(|_| rng.random_range(0..=len - window)).collect()
    } else {
        (0..count).map(|i| i * window).collect()
    }
}

/// Cuts `dataset` into windows and groups them into batches. Training mode
/// draws `⌊len / T⌋` random windows per sequence, shuffles them and flips each
/// with the configured probability; evaluation mode uses consecutive
/// non-overlapping windows in order (a trailing partial window is dropped).
pub fn make_batches(dataset: &[SequencePair], skeleton: &SkeletonSpec, opts: &BatchOptions) -> Result<Vec<Batch>> {
    if opts.batch_size == 0 || opts.window == 0 {
        return Err(Error::Config("batch size and window must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut refs = Vec::new();
    for (i, pair) in dataset.iter().enumerate() {
        pair.input.check_skeleton(skeleton)?;
        let len = pair.input.frames();
        if len < opts.window {
            return Err(Error::SequenceTooShort { name: pair.name.clone(), frames: len, window: opts.window });
        }
        refs.extend(starts(len, opts.window, opts.train, &mut rng).into_iter().map(|start| WindowRef {
            sequence: i,
            start,
            flipped: false,
        }));
    }
    if opts.train {
        refs.shuffle(&mut rng);
        for r in &mut refs {
            r.flipped = rng.random_bool(opts.flip_probability.clamp(0.0, 1.0));
        }
    }
    let j = skeleton.joint_count();
    let t = opts.window;
    refs.chunks(opts.batch_size)
        .map(|chunk| {
            let mut input = Vec::with_capacity(chunk.len() * t * j * 3);
            let mut target = Vec::with_capacity(chunk.len() * t * j * 3);
            for r in chunk {
                let pair = &dataset[r.sequence];
                let mut x = pair.input.window(r.start, t);
                let mut y = pair.target.window(r.start, t);
                if r.flipped {
                    x = horizontal_flip(&x, skeleton)?;
                    y = horizontal_flip(&y, skeleton)?;
                }
                input.extend_from_slice(x.data());
                target.extend_from_slice(root_centered(&y, skeleton.root).data());
            }
            let shape = vec![chunk.len(), t, j, 3];
            Ok(Batch {
                input: Tensor::new(shape.clone(), input)?,
                target: Tensor::new(shape, target)?,
                windows: chunk.to_vec(),
            })
        })
        .collect()
}

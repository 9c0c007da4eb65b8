//! Pre-norm transformer encoder-decoder with one embedding matrix shared by
//! encoder input, decoder input and the output projection.

mod checkpoint;
mod decode;
mod net;
mod ops;
mod params;
mod scalar;

pub use checkpoint::{read_container, write_container, Checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use decode::{argmax, beam_search, encode, greedy, length_penalty, step, Memory, Stream, LENGTH_ALPHA};
pub use net::{backward, forward, forward_packed, Forward, Net, Packed};
pub use params::{Group, Layout, ModelConfig, Params, TensorSpec};
pub use scalar::Scalar;

use crate::corrupt::TrainingExample;
use crate::error::Result;
use crate::rng::Rng;

pub fn init_model(config: ModelConfig, seed: u64) -> Result<Checkpoint> {
    Checkpoint::init(config, seed)
}

/// Mean loss over loss-masked positions and its gradient.
pub fn loss_and_grad<T: Scalar>(net: &Net<T>, batch: &[TrainingExample], rng: Option<&mut Rng>) -> Result<(f64, Params<T>)> {
    let fwd = forward(net, batch, rng)?;
    let g = backward(net, &fwd, T::from_f64(1.0 / fwd.tokens() as f64));
    Ok((fwd.mean_loss(), g))
}

/// Translates one source; `beam == 1` is greedy.
pub fn decode(ckpt: &Checkpoint, src: &[u32], beam: usize, max_len: usize) -> Result<Vec<u32>> {
    beam_search(&ckpt.net(), src, beam, max_len)
}

#[cfg(test)]
mod tests;

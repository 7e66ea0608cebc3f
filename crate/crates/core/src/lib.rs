//! Molecular fields as SE(3)-invariant implicit neural representations.
//!
//! A molecule is encoded by an equivariant message-passing network into an
//! invariant embedding and a canonical frame. A causal transformer turns a
//! conditioning vector into a sequence of weight tokens which decode into
//! the parameters of a coordinate MLP; the MLP is queried in the molecule's
//! canonical coordinates, so the represented field is invariant to global
//! rigid motions by construction.

pub mod cinr;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fshn;
pub mod geom;
pub mod model;
pub mod params;
pub mod swt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every random stream in the crate comes from here.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

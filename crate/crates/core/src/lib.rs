//! Convolutional sparse coding: the implicit banded circulant dictionary,
//! localized sparsity and coherence measures, recovery bounds, pursuit
//! solvers and a small experiment harness.

pub mod conv_dict;
pub mod error;
pub mod experiments;
pub mod io;
pub mod measures;
pub mod pursuit;
pub mod rng;
pub mod synth;

pub use conv_dict::{
    build_stripe_dictionary, make_local_dictionary, Atom, ConvOperator, GlobalCode, LocalDictionary, StripeDictionary,
};
pub use error::{Error, Result};

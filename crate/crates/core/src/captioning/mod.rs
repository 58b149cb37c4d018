//! Memory-augmented report decoder, vocabulary and decoding strategies.

pub mod decoder;
pub mod memory;
pub mod search;
pub mod vocab;

pub use decoder::{Decoder, DecoderConfig, DecoderState, MemoryNorm};
pub use memory::{MemoryStep, RelationalMemory};
pub use search::{generate_beam, generate_greedy, Generated, StepModel};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

//! Desk-scale multimodal token video generation.
//!
//! The pieces, bottom to top:
//!
//! - [`vocab`]: one contiguous id space shared by special, visual, audio,
//!   and text tokens, plus visual-token factorization.
//! - [`codec`]: toy tokenizers with exact shape arithmetic: a causal patch
//!   vector-quantizer for video, a 4-level residual quantizer for audio, and
//!   a flow/depth structure packer.
//! - [`sequence`]: task definitions and the token sequence protocol
//!   (framing specials, text-embedding slots, prefix boundary, loss mask).
//! - [`lm`]: the prefix decoder-only transformer with manual backprop,
//!   trained on loss positions only, decoded with classifier-free guidance.
//! - [`scheduler`]: alternating multi-task training over length-homogeneous
//!   groups with a two-phase image/video curriculum.
//! - [`train`]: the training loops: clip-to-example building, scheduled
//!   batches, exact checkpoint resume.
//! - [`superres`]: non-autoregressive token super-resolution with 3-axis
//!   windowed attention and iterative confidence sampling.
//! - [`pipeline`]: request orchestration: generation, long-video extension,
//!   task chaining.
//! - [`synth`]: procedural moving-shape dataset with captions, analytic
//!   flow/depth, and tone audio.
//! - [`eval`]: Frechet feature distance and caption-fidelity checks.
//! - [`io`]: binary containers (clip sets, checkpoints, stats) and run
//!   configuration.
//! - [`cli`]: implementations behind the `vidlm` binary's subcommands.
//!
//! Everything is deterministic given a seed, single-threaded, and sized for
//! a laptop CPU. See `examples/` for one runnable program per capability.

pub mod cli;
pub mod codec;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod scheduler;
pub mod sequence;
pub mod superres;
pub mod synth;
pub mod train;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};

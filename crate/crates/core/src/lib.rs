//! A small vision-language-action policy: a frozen transformer backbone
//! feeds a denoising action head through layer-mixing attention, and a
//! FIFO skill memory supplies retrieved action chunks. Training is
//! imitation on a 2D pick-and-place table.

pub mod backbone;
pub mod codec;
pub mod env;
pub mod harness;
pub mod head;
pub mod mol;
pub mod msm;
pub mod tensor;
pub mod nn;
pub mod policy;

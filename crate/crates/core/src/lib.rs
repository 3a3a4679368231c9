//! Curating skeleton motion-capture datasets for annotation.
//!
//! The crate learns unsupervised motion features with a dual-level
//! contrastive objective, ranks sequences so that each next one is as unlike
//! the already-ranked ones as possible, and trains a cheap per-frame
//! multi-label classifier on the labelled prefix of that ranking.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod annotate;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod experiments;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod rank;
pub mod synth;
pub mod tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/augment.md")]
    mod augment {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/annotation.md")]
    mod annotation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

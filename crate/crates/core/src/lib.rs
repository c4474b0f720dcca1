//! Cross-modal fragment attention with contrastive attention supervision,
//! attention-correctness metrics, and a toy image-caption world to train
//! and evaluate on.

pub mod attention;
pub mod jsonfmt;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod synthworld;
pub mod trainer;

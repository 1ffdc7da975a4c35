//! Compute-optimal vocabulary sizing for language models.
//!
//! The crate covers the tokenizer fertility model, the training FLOPs cost
//! model, unigram-normalized loss metrics, and three estimators of the optimal
//! vocabulary: IsoFLOPs power laws ([`isoflops`]), the FLOPs-derivative root
//! ([`derivative`]) and the vocabulary-aware parametric loss ([`parametric`]).

pub mod derivative;
pub mod error;
pub mod fertility;
pub mod isoflops;
pub mod lossmeter;
pub mod optim;
pub mod parametric;
pub mod predict;
pub mod scale;
pub mod synth;

pub use error::{Error, Result};
pub use derivative::GammaFit;
pub use fertility::{FertilityFit, FertilityPoint, MergeTable};
pub use isoflops::{AllocationLaws, BudgetOptimum, PowerLawFit};
pub use predict::{Approach, ArtifactSet, PredictionRequest, VocabPrediction};
pub use synth::SynthPlan;
pub use parametric::{ParametricLoss, VocabSolution};
pub use scale::{round_vocab, FlopsBudget, RunRecord, ShapeBracket, ShapeTable};

//! Shared inputs for the benchmarks.

use std::path::PathBuf;

use vocabscale_core::isoflops::{geometric_budgets, select_optima};
use vocabscale_core::synth::generate;
use vocabscale_core::{BudgetOptimum, RunRecord, SynthPlan};

/// The English test corpus that ships with the core crate.
pub fn corpus() -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/english_docs.txt");
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Noiseless records from the default synthetic plan.
pub fn records() -> Vec<RunRecord> {
    generate(&SynthPlan::default()).expect("default plan is valid")
}

/// Per-budget optima selected from [`records`].
pub fn optima(budgets: usize) -> Vec<BudgetOptimum> {
    let recs = records();
    let b = geometric_budgets(&recs, budgets).expect("records are non-empty");
    select_optima(&recs, &b).optima
}

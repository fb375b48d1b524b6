//! Shared inputs for the criterion benchmarks.

use levex_core::model::reference_example;
use levex_core::{InitialState, MarketModel, Solution, SystemMode};

/// Reference example `n` with its formula-mode admissible solution.
pub fn formula_case(n: u32) -> (MarketModel, InitialState, Solution) {
    let (model, init, _) = reference_example(n).expect("reference example");
    let (_, _, sol) = levex_core::solver::solve(&model, SystemMode::Formula, None).expect("admissible root");
    (model, init, sol)
}

//! Fixtures shared by the benchmarks.

use consol_core::{load_scenario, BuiltScenario, Consolidation};

/// A built catalog scenario. Panics on unknown names.
pub fn builtin(name: &str) -> BuiltScenario {
    load_scenario(&format!("builtin:{name}"))
        .and_then(|f| f.build())
        .unwrap_or_else(|e| panic!("builtin {name}: {e}"))
}

pub fn consolidation(name: &str) -> Consolidation {
    builtin(name).scenario.cons
}

/// Deterministic sample points spread over `[-r, r]^2`.
pub fn points(count: usize, r: f64) -> Vec<[f64; 2]> {
    (0..count)
        .map(|k| {
            let a = k as f64 * 2.399_963;
            let s = r * ((k % 97) as f64 / 97.0);
            [s * a.cos(), s * a.sin()]
        })
        .collect()
}
